#include "gradcell/encoder.hpp"

#include <cmath>

#include "gradcell/errors.hpp"

namespace gradcell::enc {

using ad::Dtype;
using ad::RngStream;
using ad::Shape;
using ad::substream;

void EncoderConfig::validate() const {
    if (feature_size <= 0) throw ConfigError("feature_size must be positive");
    if (n_layers < 0) throw ConfigError("n_layers cannot be negative");
    if (n_heads <= 0) throw ConfigError("n_heads must be positive");
    if (feature_size % n_heads != 0)
        throw ConfigError("feature_size must be divisible by n_heads");
    if (max_seq_len <= 0) throw ConfigError("max_seq_len must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
    if (n_random_features < 1) throw ConfigError("n_random_features must be at least 1");
    if (exact_attention_cap <= 0) throw ConfigError("exact_attention_cap must be positive");
    if (n_genes <= 0) throw ConfigError("n_genes must be positive");
    if (n_tokens < 4) throw ConfigError("n_tokens must cover at least one bin plus specials");
    if (proj_dim < 0) throw ConfigError("proj_dim cannot be negative");
}

namespace {

Tensor randn(Shape shape, Dtype dt, RngStream& r, double std) {
    Tensor t = Tensor::zeros(std::move(shape), dt);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, std * r.normal());
    return t;
}

Tensor filled(Shape shape, Dtype dt, double v) {
    Tensor t = Tensor::zeros(std::move(shape), dt);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, v);
    return t;
}

Parameter linear_w(const std::string& name, std::int64_t out, std::int64_t in, Dtype dt,
                   std::uint64_t seed, std::uint64_t tag) {
    RngStream r{seed, substream(seed, ad::stream_tag::init, tag), 0};
    return Parameter(name, randn({out, in}, dt, r, 1.0 / std::sqrt(static_cast<double>(in))));
}

// y = x Wt + b for W stored [out x in]
Value linear(const Value& x, Parameter& w, Parameter& b, Tape& tape) {
    return ad::add_rowvec(ad::matmul(x, tape.leaf(w), false, true), tape.leaf(b));
}

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& cfg, std::uint64_t seed, Dtype dt) {
    cfg.validate();
    EncoderParams p;
    p.cfg = cfg;
    const auto d = cfg.feature_size;
    const auto hidden = 4 * d;

    {
        RngStream r{seed, substream(seed, ad::stream_tag::init, 1), 0};
        p.expression_embedding =
            Parameter("expression_embedding", randn({cfg.n_tokens, d}, dt, r, 0.02));
    }
    {
        RngStream r{seed, substream(seed, ad::stream_tag::init, 2), 0};
        p.gene_embedding = Parameter("gene_embedding", randn({cfg.n_genes + 1, d}, dt, r, 0.02));
    }

    p.layers.reserve(static_cast<std::size_t>(cfg.n_layers));
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        const auto tag = static_cast<std::uint64_t>(100 + l * 16);
        Layer layer{
            Parameter(pre + "ln1.g", filled({1, d}, dt, 1.0)),
            Parameter(pre + "ln1.b", filled({1, d}, dt, 0.0)),
            linear_w(pre + "attn.wq", d, d, dt, seed, tag + 0),
            Parameter(pre + "attn.bq", filled({1, d}, dt, 0.0)),
            linear_w(pre + "attn.wk", d, d, dt, seed, tag + 1),
            Parameter(pre + "attn.bk", filled({1, d}, dt, 0.0)),
            linear_w(pre + "attn.wv", d, d, dt, seed, tag + 2),
            Parameter(pre + "attn.bv", filled({1, d}, dt, 0.0)),
            linear_w(pre + "attn.wo", d, d, dt, seed, tag + 3),
            Parameter(pre + "attn.bo", filled({1, d}, dt, 0.0)),
            Parameter(pre + "ln2.g", filled({1, d}, dt, 1.0)),
            Parameter(pre + "ln2.b", filled({1, d}, dt, 0.0)),
            linear_w(pre + "ffn.w1", hidden, d, dt, seed, tag + 4),
            Parameter(pre + "ffn.b1", filled({1, hidden}, dt, 0.0)),
            linear_w(pre + "ffn.w2", d, hidden, dt, seed, tag + 5),
            Parameter(pre + "ffn.b2", filled({1, d}, dt, 0.0)),
        };
        p.layers.push_back(std::move(layer));
    }

    p.pool_conv_w = linear_w("pool.conv_w", d, d, dt, seed, 9000);
    p.pool_conv_b = Parameter("pool.conv_b", filled({1, d}, dt, 0.0));
    p.pool_ff_w = linear_w("pool.ff_w", cfg.pooled_dim(), d, dt, seed, 9001);
    p.pool_ff_b = Parameter("pool.ff_b", filled({1, cfg.pooled_dim()}, dt, 0.0));
    return p;
}

void EncoderParams::set_gene_embeddings(const Tensor& table) {
    if (table.rank() != 2 || table.rows() != cfg.n_genes || table.cols() != cfg.feature_size)
        throw SchemaError("gene embedding table shape does not match the encoder");
    Tensor conv = table.astype(dtype());
    for (std::int64_t g = 0; g < cfg.n_genes; ++g)
        for (std::int64_t j = 0; j < cfg.feature_size; ++j)
            gene_embedding.value.set(g, j, conv.at(g, j));
}

std::vector<Parameter*> EncoderParams::all() {
    std::vector<Parameter*> out{&expression_embedding, &gene_embedding};
    for (auto& l : layers)
        for (Parameter* p : {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                             &l.bo, &l.ln2_g, &l.ln2_b, &l.ffn_w1, &l.ffn_b1, &l.ffn_w2, &l.ffn_b2})
            out.push_back(p);
    for (Parameter* p : {&pool_conv_w, &pool_conv_b, &pool_ff_w, &pool_ff_b}) out.push_back(p);
    return out;
}

std::vector<const Parameter*> EncoderParams::all() const {
    auto mut = const_cast<EncoderParams*>(this)->all();
    return std::vector<const Parameter*>(mut.begin(), mut.end());
}

EncoderParams EncoderParams::astype(Dtype dt) const {
    EncoderParams out = *this;
    for (Parameter* p : out.all()) {
        p->value = p->value.astype(dt);
        p->grad = Tensor::zeros(p->value.shape(), dt);
    }
    return out;
}

Value embed_tokens(Tape& tape, const std::vector<std::int64_t>& gene_ids,
                   const std::vector<std::int64_t>& expr_tokens, EncoderParams& params) {
    if (gene_ids.size() != expr_tokens.size())
        throw UsageError("embed_tokens: one expression token per gene id expected");
    if (gene_ids.empty()) throw UsageError("embed_tokens: empty input");
    const auto gene_rows = params.gene_embedding.value.rows();
    const auto tok_rows = params.expression_embedding.value.rows();
    for (auto g : gene_ids)
        if (g < 0 || g >= gene_rows)
            throw IndexError("embed_tokens: gene position " + std::to_string(g) +
                             " outside table of " + std::to_string(gene_rows) + " rows");
    for (auto t : expr_tokens)
        if (t < 0 || t >= tok_rows)
            throw IndexError("embed_tokens: expression token " + std::to_string(t) +
                             " outside vocabulary of " + std::to_string(tok_rows));
    Value ge = ad::gather_rows(tape.leaf(params.gene_embedding), gene_ids);
    Value ee = ad::gather_rows(tape.leaf(params.expression_embedding), expr_tokens);
    return ad::add(ge, ee);
}

Value embed_input(Tape& tape, const pre::SparseProfile& profile, const pre::BinSpec& spec,
                  EncoderParams& params) {
    if (profile.positions.empty()) throw EmptyCellError("embed_input: profile has no positions");
    if (static_cast<std::int64_t>(profile.positions.size()) > params.cfg.max_seq_len)
        throw UsageError("embed_input: profile longer than max_seq_len; truncate first");
    std::vector<std::int64_t> gene_ids{params.cfg.n_genes};  // CLS slot, last table row
    std::vector<std::int64_t> expr_tokens{spec.cls_token()};
    for (std::size_t k = 0; k < profile.positions.size(); ++k) {
        const auto pos = profile.positions[k];
        if (pos < 0 || pos >= params.cfg.n_genes)
            throw IndexError("embed_input: gene position " + std::to_string(pos) +
                             " outside 0.." + std::to_string(params.cfg.n_genes - 1));
        gene_ids.push_back(pos);
        expr_tokens.push_back(pre::bin(profile.values[k], spec));
    }
    return embed_tokens(tape, gene_ids, expr_tokens, params);
}

namespace {

// Random feature matrix [m x dh]: orthogonal d-dim blocks with rows
// rescaled to gaussian-vector norms, the standard positive-feature draw.
Tensor draw_features(std::int64_t m, std::int64_t dh, Dtype dt, RngStream rng) {
    std::vector<std::vector<double>> rows;
    rows.reserve(static_cast<std::size_t>(m));
    while (static_cast<std::int64_t>(rows.size()) < m) {
        // one gaussian block, Gram-Schmidt to orthonormal
        std::vector<std::vector<double>> block;
        for (std::int64_t i = 0; i < dh; ++i) {
            std::vector<double> v(static_cast<std::size_t>(dh));
            for (auto& x : v) x = rng.normal();
            for (const auto& u : block) {
                double dot = 0.0;
                for (std::size_t j = 0; j < v.size(); ++j) dot += v[j] * u[j];
                for (std::size_t j = 0; j < v.size(); ++j) v[j] -= dot * u[j];
            }
            double norm = 0.0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
                // astronomically unlikely degenerate draw; retry this row
                --i;
                continue;
            }
            for (auto& x : v) x /= norm;
            block.push_back(std::move(v));
        }
        // rescale rows to chi-distributed norms so moments match iid gaussians
        for (auto& u : block) {
            double norm2 = 0.0;
            for (std::int64_t j = 0; j < dh; ++j) {
                const double g = rng.normal();
                norm2 += g * g;
            }
            const double target = std::sqrt(norm2);
            for (auto& x : u) x *= target;
            rows.push_back(std::move(u));
            if (static_cast<std::int64_t>(rows.size()) == m) break;
        }
    }
    Tensor t = Tensor::zeros({m, dh}, dt);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < dh; ++j)
            t.set(i, j, rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    return t;
}

// exp(x W^T - |x|^2/2 - stabilizer) / sqrt(m), the positive feature map.
// Per-row stabilizers are detached and cancel in the attention ratio.
Value feature_map(const Value& x, const Value& w, bool per_row_stabilizer, double m_features) {
    Value logits = ad::matmul(x, w, false, true);                       // [L x m]
    Value half_sq = ad::scale(ad::row_sum(ad::mul(x, x)), 0.5);         // [L x 1]
    Value shifted = ad::sub_colvec(logits, half_sq);
    if (per_row_stabilizer) {
        Value mx = ad::row_max_detached(shifted);
        shifted = ad::sub_colvec(shifted, mx);
    } else {
        shifted = ad::add_scalar(shifted, -ad::max_all_detached(shifted));
    }
    return ad::scale(ad::vexp(shifted), 1.0 / std::sqrt(m_features));
}

}  // namespace

Value favor_attention(const Value& q, const Value& k, const Value& v, std::int64_t m,
                      RngStream rng) {
    if (q.tensor().rank() != 2 || k.tensor().rank() != 2 || v.tensor().rank() != 2)
        throw UsageError("favor_attention: rank-2 inputs expected");
    if (q.cols() != k.cols() || k.rows() != v.rows())
        throw UsageError("favor_attention: Q/K/V shapes disagree");
    if (m < 1) throw UsageError("favor_attention: at least one random feature required");

    const auto dh = q.cols();
    const double scale_in = std::pow(static_cast<double>(dh), -0.25);
    Value qs = ad::scale(q, scale_in);
    Value ks = ad::scale(k, scale_in);

    Tape* tape = q.tape;
    Value w = tape->constant(draw_features(m, dh, q.dtype(), rng));

    Value phi_q = feature_map(qs, w, true, static_cast<double>(m));    // [Lq x m]
    Value phi_k = feature_map(ks, w, false, static_cast<double>(m));   // [Lk x m]

    Value kv = ad::matmul(phi_k, v, true, false);                      // [m x dh]
    Value numer = ad::matmul(phi_q, kv);                               // [Lq x dh]
    Value key_mass = ad::col_sum(phi_k);                               // [1 x m]
    Value denom = ad::matmul(phi_q, key_mass, false, true);            // [Lq x 1]
    return ad::div_colvec(numer, denom);
}

std::pair<Value, Value> exact_attention(const Value& q, const Value& k, const Value& v,
                                        std::int64_t cap) {
    if (q.cols() != k.cols() || k.rows() != v.rows())
        throw UsageError("exact_attention: Q/K/V shapes disagree");
    const auto len = std::max(q.rows(), k.rows());
    if (len > cap)
        throw ConfigError("exact_attention: sequence length " + std::to_string(len) +
                          " exceeds the quadratic-mode cap " + std::to_string(cap) +
                          "; use the linear attention mode");
    const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Value scores = ad::scale(ad::matmul(q, k, false, true), s);
    Value probs = ad::softmax_rows(scores);
    return {ad::matmul(probs, v), probs};
}

namespace {

Value attention_block(Value x, EncoderParams::Layer& layer, const EncoderConfig& cfg,
                      const EncodeRng& rng, std::int64_t layer_idx, Tape& tape) {
    Value xn = ad::layernorm_rows(x, tape.leaf(layer.ln1_g), tape.leaf(layer.ln1_b));
    Value q = linear(xn, layer.wq, layer.bq, tape);
    Value k = linear(xn, layer.wk, layer.bk, tape);
    Value v = linear(xn, layer.wv, layer.bv, tape);

    const auto dh = cfg.head_dim();
    std::vector<Value> heads;
    heads.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (std::int64_t h = 0; h < cfg.n_heads; ++h) {
        Value qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        Value kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        Value vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        if (cfg.attention_mode == AttentionMode::exact) {
            heads.push_back(exact_attention(qh, kh, vh, cfg.exact_attention_cap).first);
        } else {
            const std::uint64_t draw = cfg.favor_redraw ? rng.favor_draw : 0;
            RngStream fr{rng.seed,
                         substream(rng.seed, ad::stream_tag::favor,
                                   static_cast<std::uint64_t>(layer_idx),
                                   static_cast<std::uint64_t>(h), draw),
                         0};
            heads.push_back(favor_attention(qh, kh, vh, cfg.n_random_features, fr));
        }
    }
    Value merged = cfg.n_heads == 1 ? heads[0] : ad::concat_cols(heads);
    Value out = linear(merged, layer.wo, layer.bo, tape);
    if (cfg.dropout_p > 0.0) {
        RngStream dr{rng.seed,
                     substream(rng.seed, ad::stream_tag::dropout, rng.sample,
                               static_cast<std::uint64_t>(layer_idx) * 2, rng.pass),
                     0};
        out = ad::dropout(out, cfg.dropout_p, dr);
    }
    return ad::add(x, out);
}

Value ffn_block(Value x, EncoderParams::Layer& layer, const EncoderConfig& cfg,
                const EncodeRng& rng, std::int64_t layer_idx, Tape& tape) {
    Value xn = ad::layernorm_rows(x, tape.leaf(layer.ln2_g), tape.leaf(layer.ln2_b));
    Value h = ad::gelu(linear(xn, layer.ffn_w1, layer.ffn_b1, tape));
    Value out = linear(h, layer.ffn_w2, layer.ffn_b2, tape);
    if (cfg.dropout_p > 0.0) {
        RngStream dr{rng.seed,
                     substream(rng.seed, ad::stream_tag::dropout, rng.sample,
                               static_cast<std::uint64_t>(layer_idx) * 2 + 1, rng.pass),
                     0};
        out = ad::dropout(out, cfg.dropout_p, dr);
    }
    return ad::add(x, out);
}

}  // namespace

Value run_layers(Value x, EncoderParams& params, const EncodeRng& rng) {
    Tape& tape = *x.tape;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        x = attention_block(x, params.layers[l], params.cfg, rng, static_cast<std::int64_t>(l),
                            tape);
        x = ffn_block(x, params.layers[l], params.cfg, rng, static_cast<std::int64_t>(l), tape);
    }
    return x;
}

Value encode(Tape& tape, const pre::SparseProfile& profile, const pre::BinSpec& spec,
             EncoderParams& params, const EncodeRng& rng) {
    Value c = embed_input(tape, profile, spec, params);
    return run_layers(c, params, rng);
}

Value restore_full(const Value& h, const pre::SparseProfile& profile, std::int64_t n_genes) {
    const auto len = static_cast<std::int64_t>(profile.positions.size());
    if (h.rows() != len + 1)
        throw UsageError("restore_full: hidden rows do not match profile length plus CLS");
    Value tokens = ad::slice_rows(h, 1, len + 1);
    return ad::scatter_rows(tokens, profile.positions, n_genes);
}

Value pool_full_sequence(const Value& h, const pre::SparseProfile& profile,
                         EncoderParams& params) {
    Tape& tape = *h.tape;
    Value full = restore_full(h, profile, params.cfg.n_genes);         // [n_genes x d]
    Value mixed = linear(full, params.pool_conv_w, params.pool_conv_b, tape);
    Value pooled = ad::col_mean(mixed);                                // [1 x d]
    return linear(pooled, params.pool_ff_w, params.pool_ff_b, tape);   // [1 x pooled]
}

const char* attention_mode_name(AttentionMode m) {
    return m == AttentionMode::exact ? "exact" : "favor_plus";
}

AttentionMode attention_mode_from(const std::string& name) {
    if (name == "exact") return AttentionMode::exact;
    if (name == "favor_plus") return AttentionMode::favor_plus;
    throw ConfigError("attention_mode must be 'favor_plus' or 'exact', got '" + name + "'");
}

}  // namespace gradcell::enc
