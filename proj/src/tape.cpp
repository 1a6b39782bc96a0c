#include "gradcell/tape.hpp"

#include "gradcell/errors.hpp"
#include "gradcell/kernels.hpp"

namespace gradcell::ad {

namespace {

// dst += s * src, same shape and dtype.
void add_into(Tensor& dst, const Tensor& src, double s) {
    dispatch(dst.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::ops<T>().axpy(static_cast<T>(s), src.data<T>().data(), dst.data<T>().data(),
                               static_cast<std::size_t>(dst.numel()));
    });
}

}  // namespace

Value Tape::leaf(Parameter& p) {
    auto holder = std::shared_ptr<Tensor>(&p.value, [](Tensor*) {});
    if (!recording()) return Value{holder, this, -1};

    auto it = leaf_cache_.find(&p);
    if (it != leaf_cache_.end()) return Value{holder, this, it->second};

    const int id = static_cast<int>(nodes_.size());
    Parameter* pp = &p;
    nodes_.push_back(Node{"leaf",
                          [pp](const Tensor& g, Tape&) {
                              if (g.dtype() != pp->grad.dtype())
                                  throw UsageError("parameter grad dtype mismatch: " + pp->name);
                              add_into(pp->grad, g, 1.0);
                          },
                          p.value.shape(), p.value.dtype()});
    grads_.emplace_back();
    leaf_cache_.emplace(&p, id);
    return Value{holder, this, id};
}

Value Tape::make(Tensor out, const char* op, BackwardFn backward) {
    if (!out.all_finite())
        throw NumericalError(std::string(op) + ": produced non-finite values");
    return record(std::make_shared<Tensor>(std::move(out)), op, std::move(backward));
}

Value Tape::record(std::shared_ptr<Tensor> out, const char* op, BackwardFn backward) {
    if (!recording()) return Value{std::move(out), this, -1};

    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{op, std::move(backward), out->shape(), out->dtype()});
    grads_.emplace_back();
    return Value{std::move(out), this, id};
}

void Tape::accum_grad(int node, const Tensor& contribution, double s) {
    if (node < 0) return;
    auto& slot = grads_[static_cast<std::size_t>(node)];
    auto& n = nodes_[static_cast<std::size_t>(node)];
    if (!slot.has_value()) slot = Tensor::zeros(n.shape, n.dt);
    if (contribution.dtype() != n.dt || contribution.numel() != slot->numel())
        throw UsageError(std::string("gradient contribution mismatch at op ") + n.op);
    add_into(*slot, contribution, s);
}

void Tape::backward(const Value& loss) {
    if (!recording()) throw UsageError("backward() on a no_grad tape");
    if (loss.tape != this) throw UsageError("backward(): loss belongs to another tape");
    if (!loss.needs_grad()) throw UsageError("backward(): loss does not require gradients");
    if (loss.numel() != 1) throw UsageError("backward(): loss must be a scalar");

    Tensor seed = Tensor::zeros(loss.shape(), loss.dtype());
    seed.set(0, 1.0);
    grads_[static_cast<std::size_t>(loss.node)] = std::move(seed);

    for (int i = loss.node; i >= 0; --i) {
        auto& slot = grads_[static_cast<std::size_t>(i)];
        if (!slot.has_value()) continue;
        Tensor g = std::move(*slot);
        slot.reset();
        if (!g.all_finite())
            throw NumericalError(std::string(nodes_[static_cast<std::size_t>(i)].op) +
                                 ": non-finite gradient");
        nodes_[static_cast<std::size_t>(i)].backward(g, *this);
    }
}

void Tape::account(const std::shared_ptr<Tensor>& t) {
    if (!recording() || !t) return;
    if (accounted_.insert(t->raw()).second) saved_bytes_ += t->bytes();
}

}  // namespace gradcell::ad
