#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradcell/ops.hpp"
#include "gradcell/preprocess.hpp"
#include "gradcell/tape.hpp"

namespace gradcell::enc {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Value;

enum class AttentionMode { favor_plus, exact };

struct EncoderConfig {
    std::int64_t feature_size = 512;
    std::int64_t n_layers = 10;
    std::int64_t n_heads = 16;
    std::int64_t max_seq_len = 6000;
    double dropout_p = 0.1;
    std::int64_t n_random_features = 256;
    AttentionMode attention_mode = AttentionMode::favor_plus;
    std::int64_t exact_attention_cap = 2048;

    // data-dependent extents
    std::int64_t n_genes = 0;
    std::int64_t n_tokens = 8;

    // width of the pooled cell embedding; 0 means feature_size
    std::int64_t proj_dim = 0;

    // redraw attention features every forward instead of once per run
    bool favor_redraw = false;

    std::int64_t head_dim() const { return feature_size / n_heads; }
    std::int64_t pooled_dim() const { return proj_dim > 0 ? proj_dim : feature_size; }

    void validate() const;  // throws ConfigError
};

// Identifies one stochastic forward pass. Dropout masks and (in redraw
// mode) attention features are pure functions of these plus the config,
// which is what makes recomputation exact.
struct EncodeRng {
    std::uint64_t seed = 0;
    std::uint64_t sample = 0;  // unique per cell per step
    std::uint64_t pass = 0;    // 0/1 = the two contrastive views, 2 = masked pass
    std::uint64_t favor_draw = 0;  // only consulted when favor_redraw is on
};

struct EncoderParams {
    struct Layer {
        Parameter ln1_g, ln1_b;
        Parameter wq, bq, wk, bk, wv, bv, wo, bo;
        Parameter ln2_g, ln2_b;
        Parameter ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };

    EncoderConfig cfg;
    Parameter expression_embedding;  // [n_tokens x d]
    Parameter gene_embedding;        // [n_genes + 1 x d]; last row is the CLS slot
    std::vector<Layer> layers;
    Parameter pool_conv_w, pool_conv_b;  // 1x1 convolution over restored rows
    Parameter pool_ff_w, pool_ff_b;      // reduction to the pooled width

    // Deterministic initialization from the run seed.
    static EncoderParams init(const EncoderConfig& cfg, std::uint64_t seed,
                              ad::Dtype dt = ad::Dtype::f32);

    // Replaces the gene rows (not the CLS row) with an external table.
    void set_gene_embeddings(const Tensor& table);

    // Every trainable tensor in a stable order with stable names.
    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;

    ad::Dtype dtype() const { return expression_embedding.value.dtype(); }
    EncoderParams astype(ad::Dtype dt) const;
};

// Input embedding: row 0 is CLS, row k >= 1 is gene_embedding[position] +
// expression_embedding[bin(value)].
Value embed_input(Tape& tape, const pre::SparseProfile& profile, const pre::BinSpec& spec,
                  EncoderParams& params);

// Same, from explicit token ids (no ordering requirement). gene_ids and
// expr_tokens must have equal length; CLS is NOT implied.
Value embed_tokens(Tape& tape, const std::vector<std::int64_t>& gene_ids,
                   const std::vector<std::int64_t>& expr_tokens, EncoderParams& params);

// Softmax-kernel positive-random-feature attention. Output approximates
// softmax(Q Kt / sqrt(d_head)) V without forming the L x L matrix. The
// feature matrix is a detached constant drawn from `rng`.
Value favor_attention(const Value& q, const Value& k, const Value& v, std::int64_t m,
                      ad::RngStream rng);

// Standard softmax attention; also returns the row-stochastic attention
// matrix. Sequence length above `cap` raises ConfigError.
std::pair<Value, Value> exact_attention(const Value& q, const Value& k, const Value& v,
                                        std::int64_t cap);

// The layer stack alone (no embedding): pre-layernorm blocks, identity
// when n_layers is zero.
Value run_layers(Value x, EncoderParams& params, const EncodeRng& rng);

// Full forward: embed, prepend CLS, run the stack. Deterministic given
// (params, rng).
Value encode(Tape& tape, const pre::SparseProfile& profile, const pre::BinSpec& spec,
             EncoderParams& params, const EncodeRng& rng);

// Scatters the non-CLS rows of H back onto the full gene axis (zeros
// elsewhere), exposed separately so tests can see the restored matrix.
Value restore_full(const Value& h, const pre::SparseProfile& profile, std::int64_t n_genes);

// Restore, 1x1-convolve, average over genes, project: [1 x pooled_dim].
Value pool_full_sequence(const Value& h, const pre::SparseProfile& profile,
                         EncoderParams& params);

const char* attention_mode_name(AttentionMode m);
AttentionMode attention_mode_from(const std::string& name);  // ConfigError on junk

}  // namespace gradcell::enc
