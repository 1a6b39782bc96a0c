#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "fd_check.hpp"
#include "gradcell/checkpoint.hpp"
#include "gradcell/encoder.hpp"
#include "gradcell/errors.hpp"
#include "gradcell/ops.hpp"

using namespace gradcell;
using namespace gradcell::ad;
using namespace gradcell::enc;

namespace {

EncoderConfig tiny_config(std::int64_t layers = 2, AttentionMode mode = AttentionMode::exact) {
    EncoderConfig cfg;
    cfg.feature_size = 16;
    cfg.n_layers = layers;
    cfg.n_heads = 2;
    cfg.max_seq_len = 64;
    cfg.dropout_p = 0.0;
    cfg.n_random_features = 32;
    cfg.attention_mode = mode;
    cfg.exact_attention_cap = 512;
    cfg.n_genes = 20;
    cfg.n_tokens = 8;
    return cfg;
}

pre::SparseProfile demo_profile() {
    pre::SparseProfile p;
    p.positions = {1, 4, 7, 13};
    p.values = {0.5, 1.5, 3.0, 8.0};
    return p;
}

Tensor randu(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    RngStream r{seed, 1234, 0};
    Tensor t = Tensor::zeros(std::move(shape), Dtype::f64);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, lo + (hi - lo) * r.uniform());
    return t;
}

double frob_rel_err(const Tensor& a, const Tensor& b) {
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = a.at(i) - b.at(i);
        num += d * d;
        den += b.at(i) * b.at(i);
    }
    return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("config validation") {
    EncoderConfig c = tiny_config();
    c.validate();
    c.n_heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.n_random_features = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.dropout_p = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(tiny_config().head_dim() == 8);
}

TEST_CASE("embedding rows are the sum of the two table lookups") {
    auto cfg = tiny_config(0);
    auto params = EncoderParams::init(cfg, 7, Dtype::f64);
    pre::BinSpec spec;
    auto profile = demo_profile();

    Tape tape;
    Value c = embed_input(tape, profile, spec, params);
    REQUIRE(c.rows() == 5);  // CLS + 4 tokens
    REQUIRE(c.cols() == 16);

    // hand lookup for token k=2 (position 4, value 1.5 -> bin 1)
    const auto tok = pre::bin(1.5, spec);
    CHECK(tok == 1);
    for (std::int64_t j = 0; j < 16; ++j) {
        const double want = params.gene_embedding.value.at(4, j) +
                            params.expression_embedding.value.at(tok, j);
        CHECK(c.tensor().at(2, j) == want);
    }
    // CLS row = last gene row + cls token embedding
    for (std::int64_t j = 0; j < 16; ++j) {
        const double want = params.gene_embedding.value.at(cfg.n_genes, j) +
                            params.expression_embedding.value.at(spec.cls_token(), j);
        CHECK(c.tensor().at(0, j) == want);
    }

    // zero gene table -> rows equal pure expression embeddings
    params.gene_embedding.value.zero();
    Tape t2;
    Value c2 = embed_input(t2, profile, spec, params);
    for (std::int64_t j = 0; j < 16; ++j)
        CHECK(c2.tensor().at(1, j) == params.expression_embedding.value.at(pre::bin(0.5, spec), j));

    // zero expression table -> rows equal gene embeddings
    auto params3 = EncoderParams::init(cfg, 7, Dtype::f64);
    params3.expression_embedding.value.zero();
    Tape t3;
    Value c3 = embed_input(t3, profile, spec, params3);
    for (std::int64_t j = 0; j < 16; ++j)
        CHECK(c3.tensor().at(3, j) == params3.gene_embedding.value.at(7, j));
}

TEST_CASE("out-of-range positions are an indexing error") {
    auto cfg = tiny_config(0);
    auto params = EncoderParams::init(cfg, 7, Dtype::f64);
    pre::BinSpec spec;
    pre::SparseProfile bad;
    bad.positions = {25};  // n_genes is 20
    bad.values = {1.0};
    Tape tape;
    CHECK_THROWS_AS(embed_input(tape, bad, spec, params), IndexError);
}

TEST_CASE("exact attention is row-stochastic and uniform on constant inputs") {
    Tape tape;
    Value q = tape.constant(randu({6, 4}, 1));
    Value k = tape.constant(randu({6, 4}, 2));
    Value v = tape.constant(randu({6, 4}, 3));
    auto [out, probs] = exact_attention(q, k, v, 512);
    REQUIRE(probs.rows() == 6);
    for (std::int64_t i = 0; i < 6; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < 6; ++j) s += probs.tensor().at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }

    // constant Q and K give uniform rows
    Value qc = tape.constant(Tensor::from(std::vector<double>(8, 0.3), {2, 4}));
    Value kc = tape.constant(Tensor::from(std::vector<double>(8, 0.3), {2, 4}));
    Value vc = tape.constant(randu({2, 4}, 4));
    auto [out2, probs2] = exact_attention(qc, kc, vc, 512);
    (void)out2;
    CHECK(probs2.cols() == 2);
    for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 2; ++j)
            CHECK(probs2.tensor().at(i, j) == doctest::Approx(0.5).epsilon(1e-15));

    CHECK_THROWS_AS(exact_attention(q, k, v, 4), ConfigError);
}

TEST_CASE("single-key attention returns V in both modes") {
    Tape tape;
    Value q = tape.constant(randu({1, 8}, 11));
    Value k = tape.constant(randu({1, 8}, 12));
    Value v = tape.constant(randu({1, 8}, 13));

    auto [exact, probs] = exact_attention(q, k, v, 512);
    CHECK(probs.tensor().at(0) == 1.0);
    for (std::int64_t j = 0; j < 8; ++j) CHECK(exact.tensor().at(j) == v.tensor().at(j));

    RngStream fr{3, 3, 0};
    Value approx = favor_attention(q, k, v, 64, fr);
    for (std::int64_t j = 0; j < 8; ++j)
        CHECK(approx.tensor().at(j) == doctest::Approx(v.tensor().at(j)).epsilon(1e-12));
}

TEST_CASE("random-feature attention approximates exact attention") {
    // L=32, d_head=8, m=2048: mean relative Frobenius error over 10 draws <= 0.1
    Tape tape;
    Value q = tape.constant(randu({32, 8}, 21));
    Value k = tape.constant(randu({32, 8}, 22));
    Value v = tape.constant(randu({32, 8}, 23));
    auto [exact, probs] = exact_attention(q, k, v, 512);
    (void)probs;

    auto mean_err = [&](std::int64_t m) {
        double acc = 0.0;
        for (std::uint64_t draw = 0; draw < 10; ++draw) {
            RngStream fr{99, substream(99, stream_tag::favor, draw, static_cast<std::uint64_t>(m)),
                         0};
            Value approx = favor_attention(q, k, v, m, fr);
            acc += frob_rel_err(approx.tensor(), exact.tensor());
        }
        return acc / 10.0;
    };

    const double e64 = mean_err(64);
    const double e256 = mean_err(256);
    const double e1024 = mean_err(1024);
    const double e2048 = mean_err(2048);
    const double e4096 = mean_err(4096);
    CHECK(e2048 <= 0.1);
    // error shrinks as features grow
    CHECK(e256 < e64);
    CHECK(e1024 < e256);
    CHECK(e4096 < e1024);
    CHECK(e4096 < e64);
}

TEST_CASE("random-feature attention never materializes the sequence-squared matrix") {
    // recorded activation bytes grow ~linearly in L at fixed m
    auto bytes_at = [](std::int64_t len) {
        Tape tape;
        Parameter p("q", randu({len, 8}, 31));
        Value q = tape.leaf(p);
        RngStream fr{5, 5, 0};
        Value out = favor_attention(q, q, q, 16, fr);
        (void)out;
        return static_cast<double>(tape.saved_bytes());
    };
    const double b64 = bytes_at(64);
    const double b128 = bytes_at(128);
    const double b256 = bytes_at(256);
    CHECK(b128 / b64 == doctest::Approx(2.0).epsilon(0.15));
    CHECK(b256 / b128 == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("encode is deterministic and replayable") {
    auto cfg = tiny_config(2);
    cfg.dropout_p = 0.1;
    auto params = EncoderParams::init(cfg, 17, Dtype::f64);
    pre::BinSpec spec;
    auto profile = demo_profile();

    EncodeRng rng{42, 3, 1, 0};
    Tape t1(Tape::Mode::no_grad);
    Value h1 = encode(t1, profile, spec, params, rng);
    Tape t2(Tape::Mode::no_grad);
    Value h2 = encode(t2, profile, spec, params, rng);
    for (std::int64_t i = 0; i < h1.numel(); ++i) CHECK(h1.tensor().at(i) == h2.tensor().at(i));

    // recording pass produces bitwise the same values as the silent pass
    Tape t3(Tape::Mode::grad);
    Value h3 = encode(t3, profile, spec, params, rng);
    for (std::int64_t i = 0; i < h1.numel(); ++i) CHECK(h1.tensor().at(i) == h3.tensor().at(i));

    // a different pass index gives a different view
    EncodeRng rng2{42, 3, 0, 0};
    Tape t4(Tape::Mode::no_grad);
    Value h4 = encode(t4, profile, spec, params, rng2);
    bool differs = false;
    for (std::int64_t i = 0; i < h1.numel() && !differs; ++i)
        differs = h1.tensor().at(i) != h4.tensor().at(i);
    CHECK(differs);

    // with dropout off, rng is irrelevant
    cfg.dropout_p = 0.0;
    auto params0 = EncoderParams::init(cfg, 17, Dtype::f64);
    Tape t5(Tape::Mode::no_grad), t6(Tape::Mode::no_grad);
    Value h5 = encode(t5, profile, spec, params0, EncodeRng{1, 1, 0, 0});
    Value h6 = encode(t6, profile, spec, params0, EncodeRng{2, 9, 1, 0});
    for (std::int64_t i = 0; i < h5.numel(); ++i) CHECK(h5.tensor().at(i) == h6.tensor().at(i));
}

TEST_CASE("zero layers pass the embedding through untouched") {
    auto cfg = tiny_config(0);
    auto params = EncoderParams::init(cfg, 23, Dtype::f64);
    pre::BinSpec spec;
    auto profile = demo_profile();

    Tape tape;
    Value c = embed_input(tape, profile, spec, params);
    Tape tape2;
    Value h = encode(tape2, profile, spec, params, EncodeRng{});
    REQUIRE(h.numel() == c.numel());
    for (std::int64_t i = 0; i < c.numel(); ++i) CHECK(h.tensor().at(i) == c.tensor().at(i));
}

TEST_CASE("token order does not change the hidden states (exact mode, no dropout)") {
    auto cfg = tiny_config(2, AttentionMode::exact);
    auto params = EncoderParams::init(cfg, 29, Dtype::f64);

    std::vector<std::int64_t> gene_ids{cfg.n_genes, 3, 8, 11, 15, 19};
    std::vector<std::int64_t> expr_tokens{6, 0, 2, 1, 4, 3};

    Tape t1(Tape::Mode::no_grad);
    Value h1 = run_layers(embed_tokens(t1, gene_ids, expr_tokens, params), params, EncodeRng{});

    // permute the non-CLS tokens
    std::vector<std::size_t> perm{3, 1, 4, 2, 5};
    std::vector<std::int64_t> pg{cfg.n_genes}, pe{6};
    for (auto i : perm) {
        pg.push_back(gene_ids[i]);
        pe.push_back(expr_tokens[i]);
    }
    Tape t2(Tape::Mode::no_grad);
    Value h2 = run_layers(embed_tokens(t2, pg, pe, params), params, EncodeRng{});

    // CLS rows agree; permuted rows match their originals
    for (std::int64_t j = 0; j < cfg.feature_size; ++j)
        CHECK(h1.tensor().at(0, j) == doctest::Approx(h2.tensor().at(0, j)).epsilon(1e-12));
    for (std::size_t r = 0; r < perm.size(); ++r)
        for (std::int64_t j = 0; j < cfg.feature_size; ++j)
            CHECK(h1.tensor().at(static_cast<std::int64_t>(perm[r]), j) ==
                  doctest::Approx(h2.tensor().at(static_cast<std::int64_t>(r) + 1, j))
                      .epsilon(1e-12));
}

TEST_CASE("restoration scatters hidden rows to gene positions and zeros the rest") {
    auto cfg = tiny_config(1);
    auto params = EncoderParams::init(cfg, 31, Dtype::f64);
    pre::BinSpec spec;
    auto profile = demo_profile();

    Tape tape;
    Value h = encode(tape, profile, spec, params, EncodeRng{});
    Value full = restore_full(h, profile, cfg.n_genes);
    REQUIRE(full.rows() == cfg.n_genes);

    std::vector<char> expressed(static_cast<std::size_t>(cfg.n_genes), 0);
    for (std::size_t k = 0; k < profile.positions.size(); ++k) {
        const auto pos = profile.positions[k];
        expressed[static_cast<std::size_t>(pos)] = 1;
        for (std::int64_t j = 0; j < cfg.feature_size; ++j)
            CHECK(full.tensor().at(pos, j) == h.tensor().at(static_cast<std::int64_t>(k) + 1, j));
    }
    for (std::int64_t g = 0; g < cfg.n_genes; ++g) {
        if (expressed[static_cast<std::size_t>(g)]) continue;
        for (std::int64_t j = 0; j < cfg.feature_size; ++j) CHECK(full.tensor().at(g, j) == 0.0);
    }

    // profiles with disjoint positions restore to disjoint nonzero rows
    pre::SparseProfile other;
    other.positions = {0, 2, 3};
    other.values = {1.0, 2.0, 3.0};
    Tape t2;
    Value h2 = encode(t2, other, spec, params, EncodeRng{});
    Value full2 = restore_full(h2, other, cfg.n_genes);
    for (auto pos : profile.positions) {
        bool other_has = std::find(other.positions.begin(), other.positions.end(), pos) !=
                         other.positions.end();
        if (other_has) continue;
        for (std::int64_t j = 0; j < cfg.feature_size; ++j)
            CHECK(full2.tensor().at(pos, j) == 0.0);
    }
}

TEST_CASE("pooling with an identity convolution is restore-and-average") {
    // 3 expressed genes out of 4, d=2, identity conv, identity reduction
    EncoderConfig cfg = tiny_config(0);
    cfg.feature_size = 2;
    cfg.n_heads = 1;
    cfg.n_genes = 4;
    auto params = EncoderParams::init(cfg, 37, Dtype::f64);

    // identity 1x1 conv and identity feed-forward
    params.pool_conv_w.value = Tensor::from({1, 0, 0, 1}, {2, 2});
    params.pool_conv_b.value.zero();
    params.pool_ff_w.value = Tensor::from({1, 0, 0, 1}, {2, 2});
    params.pool_ff_b.value.zero();

    pre::SparseProfile p;
    p.positions = {0, 2, 3};
    p.values = {1.0, 2.0, 3.0};
    pre::BinSpec spec;

    Tape tape;
    Value h = encode(tape, p, spec, params, EncodeRng{});  // == embeddings (0 layers)
    Value pooled = pool_full_sequence(h, p, params);
    REQUIRE(pooled.rows() == 1);
    REQUIRE(pooled.cols() == 2);

    for (std::int64_t j = 0; j < 2; ++j) {
        double want = 0.0;  // zero row for gene 1 included in the mean
        for (std::size_t k = 0; k < p.positions.size(); ++k)
            want += h.tensor().at(static_cast<std::int64_t>(k) + 1, j);
        want /= 4.0;
        CHECK(pooled.tensor().at(j) == doctest::Approx(want).epsilon(1e-15));
    }
}

TEST_CASE("full encoder with pooling passes finite differences over 20 seeds") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        CAPTURE(seed);
        EncoderConfig cfg = tiny_config(1, seed % 2 == 0 ? AttentionMode::exact
                                                         : AttentionMode::favor_plus);
        cfg.feature_size = 8;
        cfg.n_heads = 2;
        cfg.n_genes = 10;
        cfg.n_random_features = 8;
        cfg.dropout_p = seed % 3 == 0 ? 0.2 : 0.0;
        auto params = EncoderParams::init(cfg, 1000 + seed, Dtype::f64);

        pre::SparseProfile p;
        p.positions = {1, 4, 6, 9};
        p.values = {0.5, 1.7, 3.3, 9.0};
        pre::BinSpec spec;
        EncodeRng rng{seed, 5, 1, 0};

        auto all = params.all();
        auto rep = fd::check(
            all,
            [&](Tape& tape) {
                Value h = encode(tape, p, spec, params, rng);
                Value pooled = pool_full_sequence(h, p, params);
                return ad::mean_all(ad::mul(pooled, pooled));
            },
            /*stride=*/7, /*h_scale=*/1e-5);
        CHECK(rep.coords_checked > 100);
        CHECK_MESSAGE(rep.max_rel_err <= 1e-4, "seed ", seed, " worst ", rep.worst, " err ",
                      rep.max_rel_err);
    }
}

TEST_CASE("external gene tables replace gene rows but not the CLS slot") {
    auto cfg = tiny_config(0);
    auto params = EncoderParams::init(cfg, 41, Dtype::f64);
    const double cls_before = params.gene_embedding.value.at(cfg.n_genes, 0);

    Tensor table = Tensor::zeros({cfg.n_genes, cfg.feature_size}, Dtype::f32);
    for (std::int64_t i = 0; i < table.numel(); ++i) table.set(i, 0.5);
    params.set_gene_embeddings(table);
    CHECK(params.gene_embedding.value.at(0, 0) == 0.5);
    CHECK(params.gene_embedding.value.at(cfg.n_genes, 0) == cls_before);

    Tensor bad = Tensor::zeros({cfg.n_genes, cfg.feature_size + 1}, Dtype::f32);
    CHECK_THROWS_AS(params.set_gene_embeddings(bad), SchemaError);
}

TEST_CASE("checkpoints round-trip bit-exactly in f32") {
    namespace fs = std::filesystem;
    auto cfg = tiny_config(2, AttentionMode::favor_plus);
    cfg.dropout_p = 0.1;
    cfg.proj_dim = 12;
    auto params = EncoderParams::init(cfg, 43, Dtype::f32);

    auto dir = fs::temp_directory_path() / "gradcell_enc_tests";
    fs::create_directories(dir);
    const auto path = (dir / "model.ckpt").string();

    std::map<std::string, Tensor> extra;
    extra.emplace("adam.t", Tensor::scalar(17.0, Dtype::f32));
    ckpt::save_checkpoint(path, cfg, 123, params.all(), extra);

    auto loaded = ckpt::load_checkpoint(path);
    CHECK(loaded.step == 123);
    CHECK(loaded.config.feature_size == cfg.feature_size);
    CHECK(loaded.config.n_layers == cfg.n_layers);
    CHECK(loaded.config.dropout_p == cfg.dropout_p);
    CHECK(loaded.config.proj_dim == 12);
    CHECK(loaded.config.attention_mode == AttentionMode::favor_plus);
    CHECK(loaded.blobs.count("adam.t") == 1);

    auto params2 = EncoderParams::init(cfg, 99, Dtype::f32);  // different init
    ckpt::load_params(loaded, params2.all());
    auto a = params.all();
    auto b = params2.all();
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i]->value.numel() == b[i]->value.numel());
        auto xs = a[i]->value.data<float>();
        auto ys = b[i]->value.data<float>();
        for (std::size_t j = 0; j < xs.size(); ++j) CHECK(xs[j] == ys[j]);
    }

    // corrupted magic is rejected
    {
        std::ofstream out(path, std::ios::binary);
        out << "garbage";
    }
    CHECK_THROWS_AS(ckpt::load_checkpoint(path), ParseError);

    // missing parameter is a schema violation
    ckpt::save_checkpoint((dir / "partial.ckpt").string(), cfg, 1,
                          {params.all()[0]}, {});
    auto partial = ckpt::load_checkpoint((dir / "partial.ckpt").string());
    CHECK_THROWS_AS(ckpt::load_params(partial, params2.all()), SchemaError);
}

TEST_CASE("attention mode names parse both ways") {
    CHECK(attention_mode_from("exact") == AttentionMode::exact);
    CHECK(attention_mode_from("favor_plus") == AttentionMode::favor_plus);
    CHECK_THROWS_AS(attention_mode_from("quadratic"), ConfigError);
    CHECK(std::string(attention_mode_name(AttentionMode::exact)) == "exact");
}
