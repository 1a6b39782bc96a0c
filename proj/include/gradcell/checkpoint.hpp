#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gradcell/encoder.hpp"

namespace gradcell::ckpt {

// On-disk model state: header (magic, version, encoder config, step
// counter), then named tensors as (name, dims, f32 payload) records.
// f32 payloads round-trip bit-exactly when training runs in f32.
struct Checkpoint {
    enc::EncoderConfig config;
    std::int64_t step = 0;
    std::map<std::string, ad::Tensor> blobs;
};

void save_checkpoint(const std::string& path, const enc::EncoderConfig& config, std::int64_t step,
                     const std::vector<ad::Parameter*>& params,
                     const std::map<std::string, ad::Tensor>& extra = {});

Checkpoint load_checkpoint(const std::string& path);

// Copies blobs into matching parameters by name. Missing names or shape
// disagreements raise SchemaError. Values are converted to each
// parameter's dtype (exact for f32).
void load_params(const Checkpoint& c, const std::vector<ad::Parameter*>& params);

}  // namespace gradcell::ckpt
