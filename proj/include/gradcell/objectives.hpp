#pragma once

#include <cstdint>
#include <vector>

#include "gradcell/encoder.hpp"

namespace gradcell::obj {

using ad::Tape;
using ad::Value;

// Two pooled views of the same cell through independent dropout masks.
// Every other cell in the batch serves as a negative.
struct PositivePair {
    Value h;
    Value h_plus;
};

// Runs encode + pool twice with pass indices 0 and 1. With dropout
// disabled the views coincide and the pair is useless for contrastive
// training; that degenerate case warns once on stderr but still returns.
PositivePair make_positive_pair(Tape& tape, const pre::SparseProfile& profile,
                                const pre::BinSpec& spec, enc::EncoderParams& params,
                                std::uint64_t seed, std::uint64_t sample,
                                std::uint64_t favor_draw = 0);

struct ContrastiveBatch {
    Value h;       // [T x d'] anchors
    Value h_plus;  // [T x d'] positives, row-aligned with h
    double temperature = 0.05;
};

// -(1/T) sum_i log( e^{sim(h_i,h_i+)/tau} / sum_j e^{sim(h_i,h_j+)/tau} )
// with cosine similarity. The denominator runs over the positives only,
// so the i-th numerator term is one of the denominator terms and the
// loss is nonnegative. A single-sample batch scores exactly zero.
Value info_nce_loss(const ContrastiveBatch& batch);

// Which token slots of a cell are hidden from the model and the bin
// class each one must be reconstructed as.
struct MlmPlan {
    std::vector<std::int64_t> slots;   // indices into the profile's token list
    std::vector<std::int64_t> labels;  // bin class of the original value
};

// Independently selects each expressed position with probability
// mask_rate, redrawing until at least one is selected. Pure function of
// the stream state: replaying the same stream gives the same plan.
MlmPlan mlm_mask(const pre::SparseProfile& profile, const pre::BinSpec& spec, double mask_rate,
                 ad::RngStream rng);

// Output heads for the two token-level pretraining tasks, trained
// together with the encoder.
struct PretrainHeads {
    ad::Parameter mlm_w;  // [n_bins x d]
    ad::Parameter mlm_b;  // [1 x n_bins]
    ad::Parameter cls_w;  // [1 x d]
    ad::Parameter cls_b;  // [1 x 1]

    static PretrainHeads init(std::int64_t feature_size, std::int64_t n_bins, std::uint64_t seed,
                              ad::Dtype dt = ad::Dtype::f32);
    std::vector<ad::Parameter*> all();
};

// Encode with the planned slots' expression tokens replaced by the mask
// token; gene identity stays visible so the model predicts expression
// from identity plus context.
Value encode_masked(Tape& tape, const pre::SparseProfile& profile, const pre::BinSpec& spec,
                    const MlmPlan& plan, enc::EncoderParams& params, const enc::EncodeRng& rng);

// Reads the masked rows out of H and scores them: [N x n_bins].
Value mlm_logits(const Value& h, const MlmPlan& plan, PretrainHeads& heads);

// Scores the CLS row of H as a tumor/normal logit: [1 x 1].
Value cls_logit(const Value& h, PretrainHeads& heads);

struct MlmBatch {
    Value logits;                      // [N x M], one row per masked gene
    std::vector<std::int64_t> labels;  // N entries in [0, M)
};

// -(1/N) sum_i log softmax(logits_i)[label_i], probabilities clamped at
// 1e-12 so a confidently wrong head cannot produce infinities.
Value mlm_loss(const MlmBatch& batch);

struct ClsBatch {
    Value logits;                      // [B x 1] raw scores
    std::vector<std::int64_t> labels;  // B entries in {0, 1}
};

// Mean binary cross-entropy of sigmoid(logit) against the labels,
// probabilities clamped to [1e-12, 1 - 1e-12].
Value cls_loss(const ClsBatch& batch);

struct LossWeights {
    double cl = 1.0;
    double mlm = 1.0;
    double cls = 1.0;
    void validate() const;  // nonnegative, not all zero
};

double combined_pretrain_loss(const LossWeights& w, double l_cl, double l_mlm, double l_cls);

}  // namespace gradcell::obj
