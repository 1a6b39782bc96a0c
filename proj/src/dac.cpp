#include "gradcell/dac.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>

#include "gradcell/errors.hpp"
#include "gradcell/ops.hpp"

namespace gradcell::dac {

using ad::Dtype;
using ad::Parameter;
using ad::RngStream;
using ad::substream;

std::int64_t ChunkSchedule::n_chunks() const {
    return (batch_size + mini_size - 1) / mini_size;
}

std::pair<std::int64_t, std::int64_t> ChunkSchedule::chunk_range(std::int64_t k) const {
    const auto begin = k * mini_size;
    return {begin, std::min(begin + mini_size, batch_size)};
}

void ChunkSchedule::validate() const {
    if (batch_size < 1) throw UsageError("chunk schedule: batch size must be at least 1");
    if (mini_size < 1) throw UsageError("chunk schedule: mini-batch size must be at least 1");
}

enc::EncodeRng sample_rng(std::uint64_t seed, std::uint64_t step, std::int64_t batch_size,
                          std::int64_t i, std::uint64_t pass, bool favor_redraw) {
    return {seed, step * static_cast<std::uint64_t>(batch_size) + static_cast<std::uint64_t>(i),
            pass, favor_redraw ? step : 0};
}

namespace {

Tensor rows_of(const Tensor& t, std::int64_t a, std::int64_t b) {
    Tensor out = Tensor::zeros({b - a, t.cols()}, t.dtype());
    for (std::int64_t r = a; r < b; ++r)
        for (std::int64_t c = 0; c < t.cols(); ++c) out.set(r - a, c, t.at(r, c));
    return out;
}

void store_row(Tensor& dst, std::int64_t row, const Tensor& src) {
    for (std::int64_t c = 0; c < dst.cols(); ++c) dst.set(row, c, src.at(0, c));
}

double rel_diff(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

void check_replay(const Tensor& cached, std::int64_t row, const Tensor& fresh, std::int64_t sample) {
    for (std::int64_t c = 0; c < cached.cols(); ++c) {
        if (rel_diff(cached.at(row, c), fresh.at(0, c)) > 1e-9)
            throw ReplayError("recomputed view of sample " + std::to_string(sample) +
                              " differs from its cached value; the rng bookkeeping is broken");
    }
}

void check_batch(const Batch& batch, const ChunkSchedule& schedule) {
    schedule.validate();
    if (static_cast<std::int64_t>(batch.cells.size()) != schedule.batch_size)
        throw UsageError("batch holds " + std::to_string(batch.cells.size()) +
                         " cells but the schedule expects " +
                         std::to_string(schedule.batch_size));
}

}  // namespace

EmbeddingCache fill_cache(const Batch& batch, const pre::BinSpec& spec,
                          enc::EncoderParams& params, std::uint64_t seed, std::uint64_t step) {
    const auto T = static_cast<std::int64_t>(batch.cells.size());
    const auto dp = params.cfg.pooled_dim();
    EmbeddingCache cache;
    cache.h = Tensor::zeros({T, dp}, params.dtype());
    cache.h_plus = Tensor::zeros({T, dp}, params.dtype());
    cache.rng_h.reserve(static_cast<std::size_t>(T));
    cache.rng_plus.reserve(static_cast<std::size_t>(T));

    for (std::int64_t i = 0; i < T; ++i) {
        const auto rng = sample_rng(seed, step, T, i, 0, params.cfg.favor_redraw);
        Tape tape(Tape::Mode::no_grad);
        auto pair = obj::make_positive_pair(tape, batch.cells[static_cast<std::size_t>(i)], spec,
                                            params, seed, rng.sample, rng.favor_draw);
        store_row(cache.h, i, pair.h.tensor());
        store_row(cache.h_plus, i, pair.h_plus.tensor());
        cache.rng_h.push_back(rng);
        cache.rng_plus.push_back(sample_rng(seed, step, T, i, 1, params.cfg.favor_redraw));
    }
    return cache;
}

DacResult dac_contrastive_backward(const Batch& batch, const pre::BinSpec& spec,
                                   enc::EncoderParams& params, const ChunkSchedule& schedule,
                                   double temperature, std::uint64_t seed, std::uint64_t step,
                                   double weight, const DacHooks* hooks) {
    check_batch(batch, schedule);
    const auto T = schedule.batch_size;

    EmbeddingCache cache = fill_cache(batch, spec, params, seed, step);

    std::vector<std::int64_t> order(static_cast<std::size_t>(schedule.n_chunks()));
    std::iota(order.begin(), order.end(), 0);
    if (hooks && !hooks->chunk_order.empty()) {
        if (static_cast<std::int64_t>(hooks->chunk_order.size()) != schedule.n_chunks())
            throw UsageError("chunk order must list every chunk exactly once");
        order = hooks->chunk_order;
    }

    DacResult result;
    result.chunk_losses.resize(static_cast<std::size_t>(schedule.n_chunks()), 0.0);

    for (auto k : order) {
        const auto [begin, end] = schedule.chunk_range(k);
        Tape tape;

        std::vector<Value> h_parts, hp_parts;
        if (begin > 0) {
            h_parts.push_back(tape.constant(rows_of(cache.h, 0, begin)));
            hp_parts.push_back(tape.constant(rows_of(cache.h_plus, 0, begin)));
        }
        for (std::int64_t i = begin; i < end; ++i) {
            auto rng = cache.rng_h[static_cast<std::size_t>(i)];
            if (hooks && hooks->perturb_sample == static_cast<std::uint64_t>(i))
                rng.sample += 1;  // sabotage the replay on purpose
            auto pair = obj::make_positive_pair(tape, batch.cells[static_cast<std::size_t>(i)],
                                                spec, params, seed, rng.sample, rng.favor_draw);
            check_replay(cache.h, i, pair.h.tensor(), i);
            check_replay(cache.h_plus, i, pair.h_plus.tensor(), i);
            h_parts.push_back(pair.h);
            hp_parts.push_back(pair.h_plus);
        }
        if (end < T) {
            h_parts.push_back(tape.constant(rows_of(cache.h, end, T)));
            hp_parts.push_back(tape.constant(rows_of(cache.h_plus, end, T)));
        }

        Value h_full = h_parts.size() == 1 ? h_parts[0] : ad::concat_rows(h_parts);
        Value hp_full = hp_parts.size() == 1 ? hp_parts[0] : ad::concat_rows(hp_parts);
        Value loss = obj::info_nce_loss({h_full, hp_full, temperature});
        result.chunk_losses[static_cast<std::size_t>(k)] = loss.tensor().at(0);
        tape.backward(weight == 1.0 ? loss : ad::scale(loss, weight));
    }
    return result;
}

double end_to_end_backward(const Batch& batch, const pre::BinSpec& spec,
                           enc::EncoderParams& params, double temperature, std::uint64_t seed,
                           std::uint64_t step, double weight) {
    const auto T = static_cast<std::int64_t>(batch.cells.size());
    if (T < 1) throw UsageError("cannot train on an empty batch");

    Tape tape;
    std::vector<Value> hs, hps;
    hs.reserve(static_cast<std::size_t>(T));
    hps.reserve(static_cast<std::size_t>(T));
    for (std::int64_t i = 0; i < T; ++i) {
        const auto rng = sample_rng(seed, step, T, i, 0, params.cfg.favor_redraw);
        auto pair = obj::make_positive_pair(tape, batch.cells[static_cast<std::size_t>(i)], spec,
                                            params, seed, rng.sample, rng.favor_draw);
        hs.push_back(pair.h);
        hps.push_back(pair.h_plus);
    }
    Value loss = obj::info_nce_loss(
        {T == 1 ? hs[0] : ad::concat_rows(hs), T == 1 ? hps[0] : ad::concat_rows(hps),
         temperature});
    const double value = loss.tensor().at(0);
    tape.backward(weight == 1.0 ? loss : ad::scale(loss, weight));
    return value;
}

std::vector<Tensor> grad_snapshot(const std::vector<Parameter*>& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (auto* p : params) out.push_back(p->grad);
    return out;
}

double max_grad_rel_diff(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                         std::size_t* worst_index) {
    if (a.size() != b.size()) throw UsageError("gradient snapshots cover different parameters");
    double worst = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        if (a[p].numel() != b[p].numel())
            throw UsageError("gradient snapshots disagree on parameter shapes");
        for (std::int64_t i = 0; i < a[p].numel(); ++i) {
            const double d = rel_diff(a[p].at(i), b[p].at(i));
            if (d > worst) {
                worst = d;
                if (worst_index) *worst_index = p;
            }
        }
    }
    return worst;
}

bool EquivalenceReport::all_pass() const {
    if (rows.empty()) return false;
    for (const auto& r : rows)
        if (!r.pass) return false;
    return true;
}

EquivalenceReport verify_gradient_equivalence(const enc::EncoderConfig& cfg, std::int64_t T,
                                              const std::vector<std::int64_t>& t_list,
                                              std::uint64_t seed, double temperature,
                                              double threshold, const DacHooks* hooks) {
    if (T < 1) throw UsageError("equivalence check needs at least one sample");
    if (t_list.empty()) throw UsageError("equivalence check needs at least one mini-batch size");

    auto params = enc::EncoderParams::init(cfg, seed, Dtype::f64);
    pre::BinSpec spec;

    // synthetic batch: truncated so every cell fits the context window
    auto counts = pre::synth_counts(T, cfg.n_genes, 0.3, seed + 1);
    auto profiles = pre::profiles_from_counts(counts, nullptr);
    Batch batch;
    for (auto& p : profiles)
        batch.cells.push_back(pre::truncate_profile(p, cfg.max_seq_len - 1));
    batch.labels.assign(static_cast<std::size_t>(T), -1);

    auto trainable = params.all();

    ad::zero_grads(trainable);
    end_to_end_backward(batch, spec, params, temperature, seed, 0);
    const auto reference = grad_snapshot(trainable);

    EquivalenceReport report;
    report.batch_size = T;
    report.threshold = threshold;
    for (auto t : t_list) {
        ad::zero_grads(trainable);
        dac_contrastive_backward(batch, spec, params, {T, t}, temperature, seed, 0, 1.0, hooks);
        const auto chunked = grad_snapshot(trainable);

        EquivalenceRow row;
        row.mini_size = t;
        std::size_t worst = 0;
        row.max_rel_diff = max_grad_rel_diff(reference, chunked, &worst);
        row.worst_param = trainable[worst]->name;
        row.pass = row.max_rel_diff <= threshold;
        report.rows.push_back(std::move(row));
    }
    ad::zero_grads(trainable);
    return report;
}

void TrainConfig::validate() const {
    encoder.validate();
    if (batch_size < 2) throw ConfigError("training requires a batch of at least 2 cells");
    if (mini_size < 1) throw ConfigError("mini-batch size must be at least 1");
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (!(mask_rate > 0.0 && mask_rate < 1.0))
        throw ConfigError("mask rate must lie strictly between 0 and 1");
    weights.validate();
    if (adam.lr < 0.0) throw ConfigError("learning rate must be nonnegative");
}

std::string StepMetrics::line() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "step=%lld cl=%.17g mlm=%.17g cls=%.17g grad_norm=%.17g",
                  static_cast<long long>(step), l_cl, l_mlm, l_cls, grad_norm);
    return buf;
}

Trainer::Trainer(TrainConfig cfg, enc::EncoderParams params, obj::PretrainHeads heads)
    : cfg_(std::move(cfg)), params_(std::move(params)), heads_(std::move(heads)),
      opt_(cfg_.adam) {
    cfg_.validate();
}

std::vector<Parameter*> Trainer::trainable() {
    auto all = params_.all();
    for (auto* p : heads_.all()) all.push_back(p);
    return all;
}

StepMetrics Trainer::train_step(const Batch& batch) {
    const auto T = cfg_.batch_size;
    if (static_cast<std::int64_t>(batch.cells.size()) != T ||
        static_cast<std::int64_t>(batch.labels.size()) != T)
        throw UsageError("batch size does not match the training configuration");
    const auto start = std::chrono::steady_clock::now();
    const auto schedule = cfg_.schedule();
    const auto step_id = static_cast<std::uint64_t>(step_);
    pre::BinSpec spec;

    auto all = trainable();
    ad::zero_grads(all);

    StepMetrics metrics;
    metrics.step = step_ + 1;  // labeled by completed steps, like checkpoints

    try {
        // contrastive term, chunked
        auto dac = dac_contrastive_backward(batch, spec, params_, schedule, cfg_.temperature,
                                            cfg_.seed, step_id, cfg_.weights.cl);
        metrics.l_cl = dac.chunk_losses.front();

        // masked-expression and discrimination terms over the same chunking
        std::vector<obj::MlmPlan> plans;
        std::int64_t total_masked = 0, total_labeled = 0;
        for (std::int64_t i = 0; i < T; ++i) {
            RngStream r{cfg_.seed,
                        substream(cfg_.seed, ad::stream_tag::mlm_mask, step_id,
                                  static_cast<std::uint64_t>(i)),
                        0};
            plans.push_back(
                obj::mlm_mask(batch.cells[static_cast<std::size_t>(i)], spec, cfg_.mask_rate, r));
            total_masked += static_cast<std::int64_t>(plans.back().slots.size());
            if (batch.labels[static_cast<std::size_t>(i)] >= 0) ++total_labeled;
        }

        for (std::int64_t k = 0; k < schedule.n_chunks(); ++k) {
            const auto [begin, end] = schedule.chunk_range(k);
            Tape tape;
            std::vector<Value> mlm_parts, cls_parts;
            std::vector<std::int64_t> mlm_labels, cls_labels;
            std::int64_t chunk_masked = 0;
            for (std::int64_t i = begin; i < end; ++i) {
                const auto& cell = batch.cells[static_cast<std::size_t>(i)];
                const auto& plan = plans[static_cast<std::size_t>(i)];
                const auto rng = sample_rng(cfg_.seed, step_id, T, i, 2,
                                            params_.cfg.favor_redraw);
                Value h = obj::encode_masked(tape, cell, spec, plan, params_, rng);
                mlm_parts.push_back(obj::mlm_logits(h, plan, heads_));
                mlm_labels.insert(mlm_labels.end(), plan.labels.begin(), plan.labels.end());
                chunk_masked += static_cast<std::int64_t>(plan.slots.size());
                const auto label = batch.labels[static_cast<std::size_t>(i)];
                if (label >= 0) {
                    cls_parts.push_back(obj::cls_logit(h, heads_));
                    cls_labels.push_back(label);
                }
            }

            std::vector<Value> objective;
            if (chunk_masked > 0) {
                Value l = obj::mlm_loss({mlm_parts.size() == 1 ? mlm_parts[0]
                                                               : ad::concat_rows(mlm_parts),
                                         mlm_labels});
                const double share =
                    static_cast<double>(chunk_masked) / static_cast<double>(total_masked);
                metrics.l_mlm += l.tensor().at(0) * share;
                objective.push_back(ad::scale(l, cfg_.weights.mlm * share));
            }
            if (!cls_parts.empty()) {
                Value l = obj::cls_loss({cls_parts.size() == 1 ? cls_parts[0]
                                                               : ad::concat_rows(cls_parts),
                                         cls_labels});
                const double share = static_cast<double>(cls_parts.size()) /
                                     static_cast<double>(total_labeled);
                metrics.l_cls += l.tensor().at(0) * share;
                objective.push_back(ad::scale(l, cfg_.weights.cls * share));
            }
            if (objective.empty()) continue;
            Value total = objective[0];
            for (std::size_t j = 1; j < objective.size(); ++j)
                total = ad::add(total, objective[j]);
            tape.backward(total);
        }

        metrics.grad_norm = ad::global_grad_norm(all);
    } catch (const NumericalError&) {
        ad::zero_grads(all);  // leave parameters untouched and grads clean
        throw;
    }

    opt_.step(all);
    ++step_;
    metrics.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - start)
                          .count();
    return metrics;
}

std::vector<std::size_t> sample_batch_indices(std::size_t corpus_size, std::int64_t batch_size,
                                              std::uint64_t seed, std::uint64_t step) {
    if (corpus_size < static_cast<std::size_t>(batch_size))
        throw UsageError("corpus holds fewer cells than one batch");
    std::vector<std::size_t> idx(corpus_size);
    std::iota(idx.begin(), idx.end(), 0);
    RngStream r{seed, substream(seed, ad::stream_tag::data, step), 0};
    for (std::int64_t j = 0; j < batch_size; ++j) {
        const auto pick = static_cast<std::size_t>(j) +
                          static_cast<std::size_t>(r.next_u64() %
                                                   (corpus_size - static_cast<std::size_t>(j)));
        std::swap(idx[static_cast<std::size_t>(j)], idx[pick]);
    }
    idx.resize(static_cast<std::size_t>(batch_size));
    return idx;
}

std::vector<StepMetrics> pretrain(const std::vector<pre::SparseProfile>& cells,
                                  const std::vector<pre::Label>& labels, TrainConfig cfg,
                                  std::int64_t n_steps, const std::string& metrics_path,
                                  Trainer* reuse) {
    cfg.validate();
    if (cells.empty()) throw EmptyCellError("the training corpus is empty");
    if (!labels.empty() && labels.size() != cells.size())
        throw UsageError("label list does not match the corpus");

    std::optional<Trainer> local;
    if (!reuse)
        local.emplace(cfg, enc::EncoderParams::init(cfg.encoder, cfg.seed, cfg.precision),
                      obj::PretrainHeads::init(cfg.encoder.feature_size, pre::BinSpec{}.n_bins(),
                                               cfg.seed, cfg.precision));
    Trainer& trainer = reuse ? *reuse : *local;

    std::ofstream log;
    if (!metrics_path.empty()) {
        log.open(metrics_path, std::ios::app);
        if (!log) throw ParseError("cannot open metrics log " + metrics_path);
    }

    std::vector<StepMetrics> history;
    history.reserve(static_cast<std::size_t>(n_steps));
    for (std::int64_t s = 0; s < n_steps; ++s) {
        const auto pick = sample_batch_indices(cells.size(), cfg.batch_size, cfg.seed,
                                               static_cast<std::uint64_t>(trainer.step_count()));
        Batch batch;
        for (auto i : pick) {
            batch.cells.push_back(cells[i]);
            batch.labels.push_back(labels.empty() ? -1
                                                  : static_cast<std::int64_t>(labels[i]));
        }
        history.push_back(trainer.train_step(batch));
        if (log) log << history.back().line() << "\n";
    }
    if (log) log.flush();
    return history;
}

void MemoryModel::validate() const {
    if (bytes_per_token_per_layer <= 0.0 || fixed_overhead_bytes <= 0.0 || budget_bytes <= 0.0)
        throw ConfigError("memory model constants must all be positive");
}

double memory_estimate(const MemoryModel& m, std::int64_t seq_len, std::int64_t mini_batch,
                       const enc::EncoderConfig& cfg) {
    m.validate();
    if (seq_len < 1 || mini_batch < 1)
        throw UsageError("memory estimate needs positive length and mini-batch");
    return m.fixed_overhead_bytes + static_cast<double>(mini_batch) *
                                        static_cast<double>(seq_len) *
                                        m.bytes_per_token_per_layer *
                                        static_cast<double>(cfg.n_layers);
}

std::int64_t max_len_for_budget(const MemoryModel& m, double budget, std::int64_t mini_batch,
                                const enc::EncoderConfig& cfg) {
    m.validate();
    if (mini_batch < 1) throw UsageError("mini-batch must be positive");
    if (budget < m.fixed_overhead_bytes)
        throw InfeasibleError("memory budget does not even cover the fixed overhead");
    const double per_len = static_cast<double>(mini_batch) * m.bytes_per_token_per_layer *
                           static_cast<double>(cfg.n_layers);
    return static_cast<std::int64_t>((budget - m.fixed_overhead_bytes) / per_len);
}

MemoryModel published_memory_preset() {
    // reproduces the published 40 GB curve for the 10-layer model:
    // mini-batch 256 -> length 50, mini-batch 1 -> length 12,800
    return {306250.0, 0.8e9, 40e9};
}

double measured_activation_bytes(enc::EncoderConfig cfg, std::int64_t seq_len,
                                 std::int64_t mini_batch, std::uint64_t seed) {
    cfg.n_genes = std::max(cfg.n_genes, seq_len);
    cfg.max_seq_len = std::max(cfg.max_seq_len, seq_len + 1);
    auto params = enc::EncoderParams::init(cfg, seed, Dtype::f32);
    pre::BinSpec spec;

    pre::SparseProfile cell;
    for (std::int64_t g = 0; g < seq_len; ++g) {
        cell.positions.push_back(g);
        cell.values.push_back(0.5 + static_cast<double>(g % 9));
    }

    Tape tape;
    for (std::int64_t i = 0; i < mini_batch; ++i)
        obj::make_positive_pair(tape, cell, spec, params, seed, static_cast<std::uint64_t>(i));
    return static_cast<double>(tape.saved_bytes());
}

MemoryModel calibrate_memory_model(const enc::EncoderConfig& cfg,
                                   const std::vector<std::pair<std::int64_t, std::int64_t>>& probes,
                                   std::uint64_t seed, double budget) {
    if (probes.size() < 2) throw UsageError("calibration needs at least two probe points");

    std::vector<double> xs, ys;
    for (const auto& [len, mini] : probes) {
        xs.push_back(static_cast<double>(mini) * static_cast<double>(len) *
                     static_cast<double>(cfg.n_layers));
        ys.push_back(measured_activation_bytes(cfg, len, mini, seed));
    }
    const double n = static_cast<double>(xs.size());
    const double xbar = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double ybar = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - xbar) * (xs[i] - xbar);
        sxy += (xs[i] - xbar) * (ys[i] - ybar);
    }
    if (sxx == 0.0) throw UsageError("calibration probes must differ in size");

    MemoryModel m;
    m.bytes_per_token_per_layer = sxy / sxx;
    // the engine's fixed overhead is near zero, so the intercept can dip
    // below it; clamp so the model stays usable
    m.fixed_overhead_bytes = std::max(ybar - m.bytes_per_token_per_layer * xbar, 1.0);
    m.budget_bytes = budget;
    m.validate();
    return m;
}

}  // namespace gradcell::dac
