#include "gradcell/objectives.hpp"

#include <atomic>
#include <cmath>
#include <iostream>
#include <string>

#include "gradcell/errors.hpp"
#include "gradcell/ops.hpp"

namespace gradcell::obj {

using ad::Dtype;
using ad::Parameter;
using ad::RngStream;
using ad::Shape;
using ad::substream;
using ad::Tensor;

PositivePair make_positive_pair(Tape& tape, const pre::SparseProfile& profile,
                                const pre::BinSpec& spec, enc::EncoderParams& params,
                                std::uint64_t seed, std::uint64_t sample,
                                std::uint64_t favor_draw) {
    if (params.cfg.dropout_p == 0.0) {
        static std::atomic<bool> warned{false};
        if (!warned.exchange(true))
            std::cerr << "warning: dropout is disabled, so the two contrastive views of each "
                         "cell are identical and the loss sits at its self-similarity floor\n";
    }
    enc::EncodeRng first{seed, sample, 0, favor_draw};
    enc::EncodeRng second{seed, sample, 1, favor_draw};
    Value a = enc::encode(tape, profile, spec, params, first);
    Value b = enc::encode(tape, profile, spec, params, second);
    return {enc::pool_full_sequence(a, profile, params),
            enc::pool_full_sequence(b, profile, params)};
}

Value info_nce_loss(const ContrastiveBatch& batch) {
    const auto T = batch.h.rows();
    if (batch.h_plus.rows() != T || batch.h_plus.cols() != batch.h.cols())
        throw UsageError("contrastive batch: anchors and positives must be row-aligned");
    if (batch.temperature <= 0.0) throw UsageError("contrastive temperature must be positive");

    Value hn = ad::div_colvec(batch.h, ad::l2norm_rows(batch.h));
    Value pn = ad::div_colvec(batch.h_plus, ad::l2norm_rows(batch.h_plus));
    Value logits = ad::scale(ad::matmul(hn, pn, false, true), 1.0 / batch.temperature);

    // shift rows by their detached max so exp never overflows; the shift
    // cancels between the two terms
    Value z = ad::sub_colvec(logits, ad::row_max_detached(logits));
    Value lse = ad::vlog(ad::row_sum(ad::vexp(z)));  // [T x 1]

    // the diagonal entries are each anchor's own positive
    Tensor eye = Tensor::zeros({T, T}, batch.h.dtype());
    for (std::int64_t i = 0; i < T; ++i) eye.set(i, i, 1.0);
    Value diag = ad::row_sum(ad::mul(z, batch.h.tape->constant(std::move(eye))));

    return ad::mean_all(ad::sub(lse, diag));
}

MlmPlan mlm_mask(const pre::SparseProfile& profile, const pre::BinSpec& spec, double mask_rate,
                 ad::RngStream rng) {
    if (!(mask_rate > 0.0 && mask_rate < 1.0))
        throw UsageError("mask rate must lie strictly between 0 and 1");
    if (profile.positions.empty()) throw EmptyCellError("cannot mask an empty profile");

    MlmPlan plan;
    while (plan.slots.empty()) {
        for (std::size_t k = 0; k < profile.positions.size(); ++k) {
            if (rng.uniform() < mask_rate) {
                plan.slots.push_back(static_cast<std::int64_t>(k));
                plan.labels.push_back(pre::bin(profile.values[k], spec));
            }
        }
    }
    return plan;
}

PretrainHeads PretrainHeads::init(std::int64_t feature_size, std::int64_t n_bins,
                                  std::uint64_t seed, Dtype dt) {
    auto randn = [&](Shape shape, std::uint64_t tag, double std) {
        RngStream r{seed, substream(seed, ad::stream_tag::init, tag), 0};
        Tensor t = Tensor::zeros(std::move(shape), dt);
        for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, std * r.normal());
        return t;
    };
    const double std = 1.0 / std::sqrt(static_cast<double>(feature_size));
    PretrainHeads h{
        Parameter("mlm.w", randn({n_bins, feature_size}, 9100, std)),
        Parameter("mlm.b", Tensor::zeros({1, n_bins}, dt)),
        Parameter("cls.w", randn({1, feature_size}, 9101, std)),
        Parameter("cls.b", Tensor::zeros({1, 1}, dt)),
    };
    return h;
}

std::vector<Parameter*> PretrainHeads::all() { return {&mlm_w, &mlm_b, &cls_w, &cls_b}; }

Value encode_masked(Tape& tape, const pre::SparseProfile& profile, const pre::BinSpec& spec,
                    const MlmPlan& plan, enc::EncoderParams& params, const enc::EncodeRng& rng) {
    const auto len = static_cast<std::int64_t>(profile.positions.size());
    std::vector<std::int64_t> gene_ids{params.cfg.n_genes};
    std::vector<std::int64_t> expr_tokens{spec.cls_token()};
    gene_ids.reserve(static_cast<std::size_t>(len) + 1);
    expr_tokens.reserve(static_cast<std::size_t>(len) + 1);
    for (std::int64_t k = 0; k < len; ++k) {
        gene_ids.push_back(profile.positions[static_cast<std::size_t>(k)]);
        expr_tokens.push_back(pre::bin(profile.values[static_cast<std::size_t>(k)], spec));
    }
    for (auto slot : plan.slots) {
        if (slot < 0 || slot >= len)
            throw IndexError("masked slot " + std::to_string(slot) +
                             " is outside the profile's " + std::to_string(len) + " tokens");
        expr_tokens[static_cast<std::size_t>(slot) + 1] = spec.mask_token();
    }
    return enc::run_layers(enc::embed_tokens(tape, gene_ids, expr_tokens, params), params, rng);
}

Value mlm_logits(const Value& h, const MlmPlan& plan, PretrainHeads& heads) {
    std::vector<std::int64_t> rows;
    rows.reserve(plan.slots.size());
    for (auto slot : plan.slots) rows.push_back(slot + 1);  // skip the CLS row
    Value picked = ad::gather_rows(h, rows);
    Tape& tape = *h.tape;
    return ad::add_rowvec(ad::matmul(picked, tape.leaf(heads.mlm_w), false, true),
                          tape.leaf(heads.mlm_b));
}

Value cls_logit(const Value& h, PretrainHeads& heads) {
    Value cls_row = ad::slice_rows(h, 0, 1);
    Tape& tape = *h.tape;
    return ad::add_rowvec(ad::matmul(cls_row, tape.leaf(heads.cls_w), false, true),
                          tape.leaf(heads.cls_b));
}

Value mlm_loss(const MlmBatch& batch) {
    const auto n = batch.logits.rows();
    const auto m = batch.logits.cols();
    if (static_cast<std::int64_t>(batch.labels.size()) != n)
        throw UsageError("mlm batch: one label per logit row required");
    for (auto lab : batch.labels)
        if (lab < 0 || lab >= m) throw IndexError("mlm label outside the class range");

    Value z = ad::sub_colvec(batch.logits, ad::row_max_detached(batch.logits));
    Value logp = ad::sub_colvec(z, ad::vlog(ad::row_sum(ad::vexp(z))));
    logp = ad::clamp_min(logp, std::log(1e-12));

    Tensor onehot = Tensor::zeros({n, m}, batch.logits.dtype());
    for (std::int64_t i = 0; i < n; ++i) onehot.set(i, batch.labels[static_cast<std::size_t>(i)], 1.0);
    Value picked = ad::sum_all(ad::mul(logp, batch.logits.tape->constant(std::move(onehot))));
    return ad::scale(picked, -1.0 / static_cast<double>(n));
}

Value cls_loss(const ClsBatch& batch) {
    const auto b = batch.logits.rows();
    if (batch.logits.cols() != 1) throw UsageError("cls batch: logits must be a column");
    if (static_cast<std::int64_t>(batch.labels.size()) != b)
        throw UsageError("cls batch: one label per logit required");

    Value v = ad::sigmoid(batch.logits);
    v = ad::clamp_max(ad::clamp_min(v, 1e-12), 1.0 - 1e-12);

    Tensor lab = Tensor::zeros({b, 1}, batch.logits.dtype());
    Tensor inv = Tensor::zeros({b, 1}, batch.logits.dtype());
    for (std::int64_t i = 0; i < b; ++i) {
        const auto l = batch.labels[static_cast<std::size_t>(i)];
        if (l != 0 && l != 1) throw UsageError("cls labels must be 0 or 1");
        lab.set(i, 0, static_cast<double>(l));
        inv.set(i, 0, 1.0 - static_cast<double>(l));
    }
    Tape& tape = *batch.logits.tape;
    Value pos = ad::mul(tape.constant(std::move(lab)), ad::vlog(v));
    Value one = tape.constant(Tensor::from(std::vector<double>(static_cast<std::size_t>(b), 1.0),
                                           {b, 1}, batch.logits.dtype()));
    Value neg = ad::mul(tape.constant(std::move(inv)), ad::vlog(ad::sub(one, v)));
    return ad::scale(ad::mean_all(ad::add(pos, neg)), -1.0);
}

void LossWeights::validate() const {
    if (cl < 0.0 || mlm < 0.0 || cls < 0.0)
        throw ConfigError("loss weights must be nonnegative");
    if (cl == 0.0 && mlm == 0.0 && cls == 0.0)
        throw ConfigError("at least one loss weight must be positive");
}

double combined_pretrain_loss(const LossWeights& w, double l_cl, double l_mlm, double l_cls) {
    w.validate();
    return w.cl * l_cl + w.mlm * l_mlm + w.cls * l_cls;
}

}  // namespace gradcell::obj
