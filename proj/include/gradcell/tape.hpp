#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "gradcell/tensor.hpp"

namespace gradcell::ad {

class Tape;

// A trainable leaf. Gradients accumulate additively into `grad` across
// backward passes until zero_grad() is called.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape(), value.dtype())) {}

    void zero_grad() { grad.zero(); }
};

// Handle to a tensor in a computation. node < 0 means no gradient flows
// through it (constants, detached values, anything built under no_grad).
struct Value {
    std::shared_ptr<Tensor> t;
    Tape* tape = nullptr;
    int node = -1;

    const Tensor& tensor() const { return *t; }
    const Shape& shape() const { return t->shape(); }
    Dtype dtype() const { return t->dtype(); }
    std::int64_t rows() const { return t->rows(); }
    std::int64_t cols() const { return t->cols(); }
    std::int64_t numel() const { return t->numel(); }
    bool needs_grad() const { return node >= 0; }
};

using BackwardFn = std::function<void(const Tensor& g, Tape& tape)>;

// Records the forward pass as a flat list of nodes and replays it in exact
// reverse order on backward(). In no_grad mode nothing is recorded and no
// closure state is retained, which is what makes cache-building passes cheap.
class Tape {
public:
    enum class Mode { grad, no_grad };

    explicit Tape(Mode mode = Mode::grad) : mode_(mode) {}

    bool recording() const { return mode_ == Mode::grad; }
    Mode mode() const { return mode_; }

    // Leaf Value for a parameter. One node per parameter per tape.
    Value leaf(Parameter& p);

    // Wraps a tensor that gradients never flow into.
    Value constant(Tensor t) {
        return Value{std::make_shared<Tensor>(std::move(t)), this, -1};
    }

    // Registers a new op result. `backward` receives dL/d(out) and pushes
    // contributions into the inputs via accum_grad / parameter grads.
    // In no_grad mode the closure is discarded and node stays -1.
    Value make(Tensor out, const char* op, BackwardFn backward);

    // Same, for callers that already hold the output in a shared_ptr
    // (ops whose backward rule reads their own output). No finite-check.
    Value record(std::shared_ptr<Tensor> out, const char* op, BackwardFn backward);

    // Adds s * contribution into the grad buffer of `node`.
    void accum_grad(int node, const Tensor& contribution, double s = 1.0);

    // Runs reverse-mode accumulation from a scalar loss. Parameter
    // gradients accumulate additively; call zero_grad between steps, not
    // between chunks.
    void backward(const Value& loss);

    // Accounting for closure-captured tensors, deduplicated by buffer.
    void account(const std::shared_ptr<Tensor>& t);

    std::size_t num_nodes() const { return nodes_.size(); }
    std::size_t saved_bytes() const { return saved_bytes_; }

private:
    struct Node {
        const char* op;
        BackwardFn backward;
        Shape shape;
        Dtype dt;
    };

    Mode mode_;
    std::vector<Node> nodes_;
    std::vector<std::optional<Tensor>> grads_;
    std::unordered_map<const Parameter*, int> leaf_cache_;
    std::unordered_set<const void*> accounted_;
    std::size_t saved_bytes_ = 0;
};

}  // namespace gradcell::ad
