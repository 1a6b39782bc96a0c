#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gradcell/tape.hpp"

namespace gradcell::ad {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

void zero_grads(const std::vector<Parameter*>& params);
double global_grad_norm(const std::vector<Parameter*>& params);

// Adam with bias correction and decoupled weight decay. Moment state is
// keyed by parameter name so it survives checkpoint round-trips.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::int64_t steps_taken() const { return t_; }

    void step(const std::vector<Parameter*>& params);

    // Checkpoint access: moments as named tensors plus step counter.
    std::map<std::string, Tensor> state_blobs() const;
    void load_state(const std::map<std::string, Tensor>& blobs, std::int64_t steps);

private:
    struct Moments {
        Tensor m, v;
    };
    AdamConfig cfg_;
    std::map<std::string, Moments> state_;
    std::int64_t t_ = 0;
};

}  // namespace gradcell::ad
