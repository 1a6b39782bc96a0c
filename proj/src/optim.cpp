#include "gradcell/optim.hpp"

#include <cmath>

#include "gradcell/errors.hpp"

namespace gradcell::ad {

void zero_grads(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->zero_grad();
}

double global_grad_norm(const std::vector<Parameter*>& params) {
    double acc = 0.0;
    for (const Parameter* p : params) {
        dispatch(p->grad.dtype(), [&](auto tag) {
            using T = decltype(tag);
            for (T v : p->grad.data<T>()) acc += static_cast<double>(v) * static_cast<double>(v);
        });
    }
    return std::sqrt(acc);
}

void Adam::step(const std::vector<Parameter*>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
        auto it = state_.find(p->name);
        if (it == state_.end()) {
            it = state_
                     .emplace(p->name, Moments{Tensor::zeros(p->value.shape(), p->value.dtype()),
                                               Tensor::zeros(p->value.shape(), p->value.dtype())})
                     .first;
        }
        Moments& st = it->second;
        if (st.m.numel() != p->value.numel())
            throw UsageError("Adam: state shape mismatch for " + p->name);
        dispatch(p->value.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto w = p->value.data<T>();
            auto g = p->grad.data<T>();
            auto m = st.m.data<T>();
            auto v = st.v.data<T>();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                double wi = static_cast<double>(w[i]);
                wi -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps));
                if (cfg_.weight_decay != 0.0) wi -= cfg_.lr * cfg_.weight_decay * static_cast<double>(w[i]);
                w[i] = static_cast<T>(wi);
            }
        });
    }
}

std::map<std::string, Tensor> Adam::state_blobs() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, st] : state_) {
        out.emplace("adam.m." + name, st.m);
        out.emplace("adam.v." + name, st.v);
    }
    return out;
}

void Adam::load_state(const std::map<std::string, Tensor>& blobs, std::int64_t steps) {
    state_.clear();
    t_ = steps;
    for (const auto& [key, t] : blobs) {
        if (key.rfind("adam.m.", 0) == 0) {
            state_[key.substr(7)].m = t;
        } else if (key.rfind("adam.v.", 0) == 0) {
            state_[key.substr(7)].v = t;
        }
    }
    for (const auto& [name, st] : state_)
        if (st.m.numel() != st.v.numel()) throw SchemaError("Adam state incomplete for " + name);
}

}  // namespace gradcell::ad
