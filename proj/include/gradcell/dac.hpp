#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradcell/objectives.hpp"
#include "gradcell/optim.hpp"

namespace gradcell::dac {

using ad::Tape;
using ad::Tensor;
using ad::Value;

// Partition of a batch of T samples into ceil(T/t) contiguous chunks.
struct ChunkSchedule {
    std::int64_t batch_size = 0;  // T
    std::int64_t mini_size = 0;   // t

    std::int64_t n_chunks() const;
    // [begin, end) of chunk k; the ranges tile [0, T) exactly
    std::pair<std::int64_t, std::int64_t> chunk_range(std::int64_t k) const;
    void validate() const;  // throws UsageError
};

struct Batch {
    std::vector<pre::SparseProfile> cells;
    std::vector<std::int64_t> labels;  // 0 = normal, 1 = cancer, -1 = unknown
};

// Silent-pass results for the whole batch: every pooled view plus the
// rng triples that produced it, so chunk recomputation can replay them.
struct EmbeddingCache {
    Tensor h;       // [T x d']
    Tensor h_plus;  // [T x d']
    std::vector<enc::EncodeRng> rng_h;
    std::vector<enc::EncodeRng> rng_plus;
};

// Test-only knobs. perturb_sample corrupts the replay rng for one sample
// during recomputation, which must surface as ReplayError. chunk_order
// reorders chunk processing (empty = natural order).
struct DacHooks {
    std::uint64_t perturb_sample = static_cast<std::uint64_t>(-1);
    std::vector<std::int64_t> chunk_order;
};

// The rng triple of sample i of a step; pass 1 gives the positive view.
enc::EncodeRng sample_rng(std::uint64_t seed, std::uint64_t step, std::int64_t batch_size,
                          std::int64_t i, std::uint64_t pass, bool favor_redraw);

EmbeddingCache fill_cache(const Batch& batch, const pre::BinSpec& spec,
                          enc::EncoderParams& params, std::uint64_t seed, std::uint64_t step);

struct DacResult {
    // every chunk evaluates the same full-batch loss, so these agree
    // with each other and with the end-to-end loss to rounding
    std::vector<double> chunk_losses;
};

// Steps 1-3 of chunked contrastive training: cache all views without
// gradients, then per chunk recompute that chunk's views with gradients,
// splice them into the cached batch, evaluate the full-batch loss scaled
// by `weight`, and backpropagate. Gradients accumulate across chunks;
// parameter values are never touched. A recomputed view that disagrees
// with its cached row beyond 1e-9 raises ReplayError.
DacResult dac_contrastive_backward(const Batch& batch, const pre::BinSpec& spec,
                                   enc::EncoderParams& params, const ChunkSchedule& schedule,
                                   double temperature, std::uint64_t seed, std::uint64_t step,
                                   double weight = 1.0, const DacHooks* hooks = nullptr);

// Reference path: all T pairs on one tape, one loss, one backward.
double end_to_end_backward(const Batch& batch, const pre::BinSpec& spec,
                           enc::EncoderParams& params, double temperature, std::uint64_t seed,
                           std::uint64_t step, double weight = 1.0);

struct EquivalenceRow {
    std::int64_t mini_size = 0;
    double max_rel_diff = 0.0;  // worst coordinate over all parameters
    std::string worst_param;
    bool pass = false;
};

struct EquivalenceReport {
    std::int64_t batch_size = 0;
    double threshold = 0.0;
    std::vector<EquivalenceRow> rows;
    bool all_pass() const;
};

// Runs both gradient paths on a synthetic batch of T cells and compares
// the accumulated chunked gradient against the end-to-end gradient for
// every mini-batch size in t_list. 64-bit parameters throughout.
EquivalenceReport verify_gradient_equivalence(const enc::EncoderConfig& cfg, std::int64_t T,
                                              const std::vector<std::int64_t>& t_list,
                                              std::uint64_t seed, double temperature = 0.05,
                                              double threshold = 1e-6,
                                              const DacHooks* hooks = nullptr);

// Copies every parameter's gradient, in registry order.
std::vector<Tensor> grad_snapshot(const std::vector<ad::Parameter*>& params);

// max |a - b| / max(1, |a|, |b|) over all coordinates; the comparison
// metric used by the equivalence report. worst_index receives the
// position of the offending tensor when given.
double max_grad_rel_diff(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                         std::size_t* worst_index = nullptr);

struct TrainConfig {
    enc::EncoderConfig encoder;
    std::int64_t batch_size = 8;  // T
    std::int64_t mini_size = 4;   // t
    double temperature = 0.05;
    double mask_rate = 0.15;
    obj::LossWeights weights;
    ad::AdamConfig adam;
    std::uint64_t seed = 0;
    ad::Dtype precision = ad::Dtype::f32;

    ChunkSchedule schedule() const { return {batch_size, mini_size}; }
    void validate() const;
};

struct StepMetrics {
    std::int64_t step = 0;  // completed steps including this one; matches checkpoints
    double l_cl = 0.0;
    double l_mlm = 0.0;
    double l_cls = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;  // measured, excluded from the deterministic log line

    // fixed-format record; bitwise reproducible for a given seed
    std::string line() const;
};

class Trainer {
public:
    Trainer(TrainConfig cfg, enc::EncoderParams params, obj::PretrainHeads heads);

    // One full update: chunked contrastive backward, masked-expression
    // and discrimination backward over the same chunking, then Adam.
    // NumericalError zeroes the accumulated gradients and rethrows;
    // parameter values stay untouched.
    StepMetrics train_step(const Batch& batch);

    std::vector<ad::Parameter*> trainable();
    enc::EncoderParams& params() { return params_; }
    obj::PretrainHeads& heads() { return heads_; }
    ad::Adam& optimizer() { return opt_; }
    const TrainConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return step_; }
    void set_step_count(std::int64_t s) { step_ = s; }

private:
    TrainConfig cfg_;
    enc::EncoderParams params_;
    obj::PretrainHeads heads_;
    ad::Adam opt_;
    std::int64_t step_ = 0;
};

// Deterministic batch composition: T distinct corpus indices per step.
std::vector<std::size_t> sample_batch_indices(std::size_t corpus_size, std::int64_t batch_size,
                                              std::uint64_t seed, std::uint64_t step);

// Runs n_steps over the corpus, appending one metrics line per step to
// metrics_path (or skipping the file when the path is empty). Returns
// the metric records.
std::vector<StepMetrics> pretrain(const std::vector<pre::SparseProfile>& cells,
                                  const std::vector<pre::Label>& labels, TrainConfig cfg,
                                  std::int64_t n_steps, const std::string& metrics_path,
                                  Trainer* reuse = nullptr);

// Activation-memory model: bytes = fixed + mini * len * per_token * layers.
struct MemoryModel {
    double bytes_per_token_per_layer = 0.0;
    double fixed_overhead_bytes = 0.0;
    double budget_bytes = 0.0;
    void validate() const;  // throws ConfigError unless all positive
};

double memory_estimate(const MemoryModel& m, std::int64_t seq_len, std::int64_t mini_batch,
                       const enc::EncoderConfig& cfg);

// Largest sequence length whose estimate fits the budget at this
// mini-batch size. A budget below the fixed overhead is infeasible.
std::int64_t max_len_for_budget(const MemoryModel& m, double budget, std::int64_t mini_batch,
                                const enc::EncoderConfig& cfg);

// Preset calibrated to the published 40 GB curve for the full 10-layer
// configuration: length 50 at mini-batch 256, about 13,000 at 1.
MemoryModel published_memory_preset();

// Recorded activation bytes of one gradient-mode chunk: `mini` cells of
// `seq_len` expressed genes each, both contrastive views.
double measured_activation_bytes(enc::EncoderConfig cfg, std::int64_t seq_len,
                                 std::int64_t mini_batch, std::uint64_t seed);

// Least-squares fit of (fixed, per-token) to instrumented measurements
// at the given (seq_len, mini_batch) probes.
MemoryModel calibrate_memory_model(const enc::EncoderConfig& cfg,
                                   const std::vector<std::pair<std::int64_t, std::int64_t>>& probes,
                                   std::uint64_t seed, double budget);

}  // namespace gradcell::dac
