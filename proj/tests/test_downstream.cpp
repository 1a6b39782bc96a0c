#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "fd_check.hpp"
#include "gradcell/downstream.hpp"
#include "gradcell/errors.hpp"
#include "gradcell/ops.hpp"

using namespace gradcell;
using namespace gradcell::ad;
using namespace gradcell::down;

namespace {

std::filesystem::path tmp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "gradcell_down_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

using I64 = std::vector<std::int64_t>;
using F64 = std::vector<double>;

// independent scorer: builds per-class tp/fp/fn with plain counting loops
struct OracleScores {
    std::map<std::int64_t, double> f1;
    std::map<std::int64_t, std::int64_t> support;
    double accuracy = 0.0, macro = 0.0, weighted = 0.0;
};

OracleScores score_oracle(const I64& yt, const I64& yp) {
    OracleScores o;
    std::set<std::int64_t> classes(yt.begin(), yt.end());
    classes.insert(yp.begin(), yp.end());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < yt.size(); ++i)
        if (yt[i] == yp[i]) ++hits;
    o.accuracy = double(hits) / double(yt.size());
    for (auto c : classes) {
        std::int64_t tp = 0, fp = 0, fn = 0, sup = 0;
        for (std::size_t i = 0; i < yt.size(); ++i) {
            if (yt[i] == c) ++sup;
            if (yt[i] == c && yp[i] == c) ++tp;
            if (yt[i] != c && yp[i] == c) ++fp;
            if (yt[i] == c && yp[i] != c) ++fn;
        }
        const double p = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
        const double r = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
        o.f1[c] = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
        o.support[c] = sup;
    }
    double wsum = 0.0;
    for (auto& [c, f] : o.f1) {
        o.macro += f;
        wsum += double(o.support[c]) * f;
    }
    o.macro /= double(o.f1.size());
    o.weighted = wsum / double(yt.size());
    return o;
}

double pearson_oracle(const F64& y, const F64& yh) {
    const double n = double(y.size());
    double my = 0, mh = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        my += y[i];
        mh += yh[i];
    }
    my /= n;
    mh /= n;
    double cov = 0, vy = 0, vh = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        cov += (y[i] - my) * (yh[i] - mh);
        vy += (y[i] - my) * (y[i] - my);
        vh += (yh[i] - mh) * (yh[i] - mh);
    }
    cov /= n - 1;
    const double sy = std::sqrt(vy / (n - 1));
    const double sh = std::sqrt(vh / (n - 1));
    return cov / (sy * sh);
}

enc::EncoderConfig tiny_encoder(std::int64_t n_genes) {
    enc::EncoderConfig cfg;
    cfg.feature_size = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 16;
    cfg.dropout_p = 0.1;
    cfg.attention_mode = enc::AttentionMode::exact;
    cfg.exact_attention_cap = 64;
    cfg.n_genes = n_genes;
    cfg.n_tokens = 8;
    return cfg;
}

// two classes with disjoint gene support, tightly clustered within class
LabeledCells separable_cells(std::size_t n_per_class) {
    LabeledCells data;
    data.class_names = {"healthy", "tumor"};
    for (std::size_t i = 0; i < 2 * n_per_class; ++i) {
        const std::int64_t cls = static_cast<std::int64_t>(i % 2);
        pre::SparseProfile p;
        if (cls == 0) {
            p.positions = {0, 1, 2, 3, 4};
            p.values = {1.5, 1.5, 1.5, 1.5, 1.5 + 0.05 * double(i % 5)};
        } else {
            p.positions = {6, 7, 8, 9, 10};
            p.values = {6.0, 6.0, 6.0, 6.0, 6.0 + 0.05 * double(i % 5)};
        }
        data.cells.push_back(p);
        data.labels.push_back(cls);
    }
    return data;
}

std::vector<Tensor> snapshot(const std::vector<Parameter*>& ps) {
    std::vector<Tensor> out;
    for (auto* p : ps) out.push_back(p->value);
    return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (a.at(i) != b.at(i)) return false;
    return true;
}

}  // namespace

TEST_CASE("classification scores match hand-built confusion counts") {
    const I64 yt{1, 1, 0, 0}, yp{1, 0, 0, 0};
    auto s = class_scores(yt, yp);
    REQUIRE(s.classes == I64{0, 1});
    CHECK(s.f1[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(s.f1[0] == doctest::Approx(4.0 / 5.0).epsilon(1e-12));
    CHECK(s.precision[1] == 1.0);
    CHECK(s.recall[1] == 0.5);
    CHECK(s.support == I64{2, 2});
    CHECK(macro_f1(yt, yp) == doctest::Approx(11.0 / 15.0).epsilon(1e-12));
    // equal support, so the weighted average coincides with the macro one
    CHECK(weighted_f1(yt, yp) == doctest::Approx(11.0 / 15.0).epsilon(1e-12));
    CHECK(accuracy(yt, yp) == 0.75);

    CHECK(s.confusion[0][0] == 2);
    CHECK(s.confusion[0][1] == 0);
    CHECK(s.confusion[1][0] == 1);
    CHECK(s.confusion[1][1] == 1);
}

TEST_CASE("perfect prediction scores one on every classification metric") {
    for (const I64& y : {I64{0, 1, 2, 1, 0}, I64{5, 5, 9}, I64{3}}) {
        CHECK(accuracy(y, y) == 1.0);
        CHECK(macro_f1(y, y) == 1.0);
        CHECK(weighted_f1(y, y) == 1.0);
    }
}

TEST_CASE("classification metrics agree with an independent loop oracle") {
    RngStream r{2024, 11, 0};
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 5 + r.next_u64() % 56;
        // sparse non-contiguous ids make sure nothing assumes 0..C-1
        const I64 ids{0, 2, 5, 9};
        I64 yt(n), yp(n);
        for (std::size_t i = 0; i < n; ++i) {
            yt[i] = ids[r.next_u64() % ids.size()];
            yp[i] = ids[r.next_u64() % ids.size()];
        }
        const auto o = score_oracle(yt, yp);
        CHECK(std::abs(accuracy(yt, yp) - o.accuracy) <= 1e-12);
        CHECK(std::abs(macro_f1(yt, yp) - o.macro) <= 1e-12);
        CHECK(std::abs(weighted_f1(yt, yp) - o.weighted) <= 1e-12);
        auto s = class_scores(yt, yp);
        for (std::size_t c = 0; c < s.classes.size(); ++c) {
            CHECK(std::abs(s.f1[c] - o.f1.at(s.classes[c])) <= 1e-12);
            CHECK(s.support[c] == o.support.at(s.classes[c]));
        }
        // scores stay in [0, 1]
        CHECK(macro_f1(yt, yp) >= 0.0);
        CHECK(macro_f1(yt, yp) <= 1.0);
        CHECK(weighted_f1(yt, yp) <= 1.0);
    }
}

TEST_CASE("weighted f1 equals macro f1 under equal support") {
    RngStream r{77, 3, 0};
    for (int trial = 0; trial < 20; ++trial) {
        // 4 classes x 8 samples each, predictions random
        I64 yt, yp;
        for (std::int64_t c = 0; c < 4; ++c)
            for (int k = 0; k < 8; ++k) {
                yt.push_back(c);
                yp.push_back(static_cast<std::int64_t>(r.next_u64() % 4));
            }
        // predictions drawn from the same id set keep the union equal-support
        CHECK(std::abs(weighted_f1(yt, yp) - macro_f1(yt, yp)) <= 1e-12);
    }
}

TEST_CASE("classes absent from both vectors stay out of the average") {
    // only classes 0 and 1 appear; a three-class world is irrelevant
    const I64 yt{0, 1, 0, 1}, yp{0, 1, 1, 1};
    auto s = class_scores(yt, yp);
    CHECK(s.classes == I64{0, 1});
    // class 7 present only in predictions still joins (it has fp)
    const I64 yp2{0, 7, 1, 1};
    auto s2 = class_scores(yt, yp2);
    CHECK(s2.classes == I64{0, 1, 7});
    CHECK(s2.support == I64{2, 2, 0});
    CHECK(s2.f1[2] == 0.0);
}

TEST_CASE("classification metrics reject empty or misaligned input") {
    CHECK_THROWS_AS(accuracy({}, {}), UsageError);
    CHECK_THROWS_AS(macro_f1({}, {}), UsageError);
    CHECK_THROWS_AS(weighted_f1({}, {}), UsageError);
    CHECK_THROWS_AS(class_scores({}, {}), UsageError);
    CHECK_THROWS_AS(accuracy({1, 2}, {1}), UsageError);
    CHECK_THROWS_AS(macro_f1({1}, {1, 2}), UsageError);
}

TEST_CASE("correlation hits the exact endpoints") {
    const F64 y{-2.0, -1.0, 0.0, 1.0, 2.0};
    CHECK(pearson(y, y) == doctest::Approx(1.0).epsilon(1e-15));
    F64 neg(y);
    for (auto& v : neg) v = -v;
    CHECK(pearson(y, neg) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(r2(y, y) == 1.0);
    CHECK(rmse(y, y) == 0.0);
    CHECK(mae(y, y) == 0.0);
}

TEST_CASE("regression metrics evaluate the written formulas") {
    const F64 y{1.0, 2.0, 3.0}, yh{2.0, 2.0, 2.0};
    // prediction equals the target mean, so no variance is explained
    CHECK(r2(y, yh) == 0.0);
    CHECK(rmse(y, yh) == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-15));
    CHECK(mae(y, yh) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("degenerate regression inputs raise the right errors") {
    CHECK_THROWS_AS(pearson({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}), DegenerateInputError);
    CHECK_THROWS_AS(pearson({1.0, 2.0, 3.0}, {5.0, 5.0, 5.0}), DegenerateInputError);
    CHECK_THROWS_AS(r2({4.0, 4.0}, {1.0, 2.0}), DegenerateInputError);
    CHECK_THROWS_AS(pearson({1.0}, {1.0}), UsageError);
    CHECK_THROWS_AS(r2({1.0}, {1.0}), UsageError);
    CHECK_THROWS_AS(rmse({}, {}), UsageError);
    CHECK_THROWS_AS(mae({1.0}, {1.0, 2.0}), UsageError);
}

TEST_CASE("regression metrics agree with naive loops on random data") {
    RngStream r{555, 1, 0};
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + r.next_u64() % 40;
        F64 y(n), yh(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = 10.0 * (r.uniform() - 0.5);
            yh[i] = y[i] + 3.0 * (r.uniform() - 0.5);
        }
        CHECK(std::abs(pearson(y, yh) - pearson_oracle(y, yh)) <= 1e-12);
        double se = 0, ae = 0, my = 0;
        for (std::size_t i = 0; i < n; ++i) {
            se += (y[i] - yh[i]) * (y[i] - yh[i]);
            ae += std::abs(y[i] - yh[i]);
            my += y[i];
        }
        my /= double(n);
        double var = 0;
        for (double v : y) var += (v - my) * (v - my);
        CHECK(std::abs(rmse(y, yh) - std::sqrt(se / double(n))) <= 1e-12);
        CHECK(std::abs(mae(y, yh) - ae / double(n)) <= 1e-12);
        CHECK(std::abs(r2(y, yh) - (1.0 - se / var)) <= 1e-12);
        // power-mean inequality
        CHECK(rmse(y, yh) >= mae(y, yh));
        CHECK(pearson(y, yh) <= 1.0);
        CHECK(pearson(y, yh) >= -1.0);
    }
}

TEST_CASE("correlation ignores positive affine rescaling") {
    RngStream r{808, 2, 0};
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t n = 3 + r.next_u64() % 30;
        F64 y(n), yh(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = r.normal();
            yh[i] = r.normal();
        }
        const double a = 0.1 + 5.0 * r.uniform();
        const double b = 10.0 * (r.uniform() - 0.5);
        F64 ys(n), yhs(n);
        for (std::size_t i = 0; i < n; ++i) {
            ys[i] = a * y[i] + b;
            yhs[i] = a * yh[i] + b;
        }
        const double base = pearson(y, yh);
        CHECK(std::abs(pearson(ys, yh) - base) <= 1e-12);
        CHECK(std::abs(pearson(y, yhs) - base) <= 1e-12);
    }
}

TEST_CASE("head factories build the published shapes") {
    auto annot = annotation_head(512, 11, 1);
    REQUIRE(annot.mlp.weights.size() == 3);
    CHECK(annot.mlp.weights[0].value.rows() == 512);
    CHECK(annot.mlp.weights[0].value.cols() == 512);
    CHECK(annot.mlp.weights[1].value.rows() == 128);
    CHECK(annot.mlp.weights[2].value.rows() == 11);
    CHECK(annot.n_classes() == 11);
    CHECK(annot.mlp.act == Activation::relu);
    CHECK(annot.dropout_p == 0.1);

    auto drug = drug_sensitivity_head(512, 1);
    REQUIRE(drug.mlp.weights.size() == 3);
    CHECK(drug.mlp.weights[1].value.rows() == 32);
    CHECK(drug.n_classes() == 2);
    CHECK(drug.mlp.act == Activation::leaky_relu);

    auto reg = cell_line_head(512, 256, 1);
    REQUIRE(reg.cell.weights.size() == 2);
    CHECK(reg.cell.weights[0].value.rows() == 1024);
    CHECK(reg.cell.weights[1].value.rows() == 256);
    REQUIRE(reg.fusion.weights.size() == 3);
    CHECK(reg.fusion.in_width() == 512);  // 256 cell + 256 drug
    CHECK(reg.fusion.out_width() == 1);
    CHECK(reg.drug_width() == 256);
    CHECK(reg.fusion.act == Activation::elu);
    CHECK(reg.dropout_p == 0.2);

    CHECK_THROWS_AS(annotation_head(512, 1, 1), ConfigError);
    CHECK_THROWS_AS(cell_line_head(512, 0, 1), ConfigError);
    CHECK_THROWS_AS(Mlp::init("x", {16}, Activation::relu, 1), ConfigError);
    CHECK_THROWS_AS(Mlp::init("x", {16, 0, 4}, Activation::relu, 1), ConfigError);
}

TEST_CASE("head init is deterministic and distinct across branches") {
    auto a = cell_line_head(32, 8, 9);
    auto b = cell_line_head(32, 8, 9);
    for (std::size_t i = 0; i < a.cell.weights.size(); ++i)
        CHECK(bitwise_equal(a.cell.weights[i].value, b.cell.weights[i].value));
    // the cell and fusion stacks must not share weights despite one seed
    CHECK_FALSE(bitwise_equal(a.cell.weights[0].value, a.fusion.weights[0].value));
    auto c = cell_line_head(32, 8, 10);
    CHECK_FALSE(bitwise_equal(a.cell.weights[0].value, c.cell.weights[0].value));
}

TEST_CASE("zero weights classify as the uniform distribution") {
    ClassifierHead head;
    head.mlp = Mlp::init("annot", {6, 8, 4}, Activation::relu, 3, Dtype::f64);
    for (auto* p : head.mlp.all())
        for (std::int64_t i = 0; i < p->value.numel(); ++i) p->value.set(i, 0.0);
    Tape tape(Tape::Mode::no_grad);
    Tensor x = Tensor::zeros({5, 6}, Dtype::f64);
    RngStream r{4, 4, 0};
    for (std::int64_t i = 0; i < x.numel(); ++i) x.set(i, r.normal());
    Value probs = classify(tape, tape.constant(std::move(x)), head);
    for (std::int64_t i = 0; i < 5; ++i)
        for (std::int64_t j = 0; j < 4; ++j) CHECK(probs.tensor().at(i, j) == 0.25);
}

TEST_CASE("class probabilities sum to one") {
    ClassifierHead head;
    head.mlp = Mlp::init("annot", {6, 12, 5}, Activation::relu, 17, Dtype::f64);
    Tape tape(Tape::Mode::no_grad);
    Tensor x = Tensor::zeros({9, 6}, Dtype::f64);
    RngStream r{5, 6, 0};
    for (std::int64_t i = 0; i < x.numel(); ++i) x.set(i, 2.0 * r.normal());
    Value probs = classify(tape, tape.constant(std::move(x)), head);
    for (std::int64_t i = 0; i < 9; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < 5; ++j) {
            s += probs.tensor().at(i, j);
            CHECK(probs.tensor().at(i, j) >= 0.0);
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
    }
}

TEST_CASE("width mismatches are schema errors") {
    ClassifierHead head;
    head.mlp = Mlp::init("annot", {6, 8, 3}, Activation::relu, 3);
    Tape tape(Tape::Mode::no_grad);
    Value bad = tape.constant(Tensor::zeros({2, 7}, Dtype::f64));
    CHECK_THROWS_AS(classify(tape, bad, head), SchemaError);

    auto reg = cell_line_head(16, 8, 3);
    Value cells = tape.constant(Tensor::zeros({2, 16}, Dtype::f64));
    Value drugs_bad = tape.constant(Tensor::zeros({2, 9}, Dtype::f64));
    CHECK_THROWS_AS(regress(tape, cells, drugs_bad, reg), SchemaError);
    Value drugs_misrows = tape.constant(Tensor::zeros({3, 8}, Dtype::f64));
    CHECK_THROWS_AS(regress(tape, cells, drugs_misrows, reg), UsageError);
    Value cells_bad = tape.constant(Tensor::zeros({2, 15}, Dtype::f64));
    Value drugs = tape.constant(Tensor::zeros({2, 8}, Dtype::f64));
    CHECK_THROWS_AS(regress(tape, cells_bad, drugs, reg), SchemaError);
}

TEST_CASE("head gradients match finite differences") {
    Tensor x = Tensor::zeros({4, 5}, Dtype::f64);
    RngStream r{31, 8, 0};
    for (std::int64_t i = 0; i < x.numel(); ++i) x.set(i, r.normal());

    SUBCASE("classifier with relu") {
        ClassifierHead head;
        head.mlp = Mlp::init("annot", {5, 7, 3}, Activation::relu, 21, Dtype::f64);
        const I64 labels{0, 2, 1, 2};
        auto build = [&](Tape& tape) {
            Value probs = classify(tape, tape.constant(x), head);
            Tensor onehot = Tensor::zeros({4, 3}, Dtype::f64);
            for (std::size_t i = 0; i < labels.size(); ++i)
                onehot.set(static_cast<std::int64_t>(i), labels[i], 1.0);
            return ad::scale(ad::mean_all(ad::mul(ad::vlog(probs), tape.constant(onehot))), -3.0);
        };
        auto rep = fd::check(head.mlp.all(), build);
        CHECK(rep.max_rel_err <= 1e-4);
        CHECK(rep.coords_checked > 50);
    }

    SUBCASE("classifier with leaky relu") {
        ClassifierHead head;
        head.mlp = Mlp::init("drugsens", {5, 6, 2}, Activation::leaky_relu, 22, Dtype::f64);
        auto build = [&](Tape& tape) {
            Value logits = head.mlp.forward(tape, tape.constant(x));
            return ad::mean_all(ad::mul(logits, logits));
        };
        auto rep = fd::check(head.mlp.all(), build);
        CHECK(rep.max_rel_err <= 1e-4);
    }

    SUBCASE("regression head with elu fusion") {
        RegressionHead head;
        head.cell = Mlp::init("cellbranch", {5, 9, 4}, Activation::relu, 23, Dtype::f64);
        head.fusion = Mlp::init("fusion", {4 + 3, 8, 1}, Activation::elu, 23, Dtype::f64);
        Tensor dr = Tensor::zeros({4, 3}, Dtype::f64);
        for (std::int64_t i = 0; i < dr.numel(); ++i) dr.set(i, r.normal());
        std::vector<Parameter*> ps = head.cell.all();
        for (auto* p : head.fusion.all()) ps.push_back(p);
        auto build = [&](Tape& tape) {
            Value pred = regress(tape, tape.constant(x), tape.constant(dr), head);
            return ad::mean_all(ad::mul(pred, pred));
        };
        auto rep = fd::check(ps, build);
        CHECK(rep.max_rel_err <= 1e-4);
        CHECK(rep.coords_checked > 100);
    }
}

TEST_CASE("head dropout is reproducible and off by default") {
    ClassifierHead head;
    head.mlp = Mlp::init("annot", {6, 32, 3}, Activation::relu, 40, Dtype::f64);
    Tensor x = Tensor::zeros({3, 6}, Dtype::f64);
    RngStream r{41, 9, 0};
    for (std::int64_t i = 0; i < x.numel(); ++i) x.set(i, r.normal());

    auto run = [&](double p, RngStream base) {
        Tape tape(Tape::Mode::no_grad);
        Value probs = classify(tape, tape.constant(x), head, p, base);
        return probs.tensor();
    };
    Tensor a = run(0.5, {7, 100, 0});
    Tensor b = run(0.5, {7, 100, 0});
    CHECK(bitwise_equal(a, b));
    Tensor c = run(0.5, {7, 101, 0});
    CHECK_FALSE(bitwise_equal(a, c));
    CHECK(bitwise_equal(run(0.0, {7, 100, 0}), run(0.0, {7, 999, 0})));
}

TEST_CASE("report text carries every metric key") {
    EvalReport rep;
    rep.is_classification = true;
    rep.accuracy = 0.75;
    rep.macro_f1 = 11.0 / 15.0;
    rep.weighted_f1 = 11.0 / 15.0;
    rep.scores = class_scores({1, 1, 0, 0}, {1, 0, 0, 0});
    rep.n_train = 10;
    rep.n_val = 2;
    rep.n_test = 4;
    const std::string text = rep.to_text();
    CHECK(text.find("kind=classification\n") != std::string::npos);
    CHECK(text.find("accuracy=0.75\n") != std::string::npos);
    CHECK(text.find("class.0.f1=") != std::string::npos);
    CHECK(text.find("class.1.support=2\n") != std::string::npos);
    CHECK(text.find("confusion.1.0=1\n") != std::string::npos);
    CHECK(text.find("n_train=10\n") != std::string::npos);
    CHECK(text.find("pearson") == std::string::npos);

    EvalReport reg;
    reg.is_classification = false;
    reg.pearson = 0.5;
    reg.r2 = 0.25;
    reg.rmse = 1.5;
    reg.mae = 1.0;
    const std::string rtext = reg.to_text();
    CHECK(rtext.find("kind=regression\n") != std::string::npos);
    CHECK(rtext.find("pearson=0.5\n") != std::string::npos);
    CHECK(rtext.find("rmse=1.5\n") != std::string::npos);
    CHECK(rtext.find("accuracy") == std::string::npos);
}

TEST_CASE("random splits are disjoint, exhaustive and seeded") {
    SplitSpec spec;
    spec.train_frac = 0.8;
    spec.val_frac = 0.1;
    spec.seed = 3;
    auto s = make_split(100, spec);
    CHECK(s.train.size() == 80);
    CHECK(s.val.size() == 10);
    CHECK(s.test.size() == 10);
    std::set<std::size_t> seen(s.train.begin(), s.train.end());
    seen.insert(s.val.begin(), s.val.end());
    seen.insert(s.test.begin(), s.test.end());
    CHECK(seen.size() == 100);

    auto again = make_split(100, spec);
    CHECK(again.train == s.train);
    spec.seed = 4;
    CHECK(make_split(100, spec).train != s.train);

    SplitSpec bad;
    bad.train_frac = 0.0;
    CHECK_THROWS_AS(make_split(10, bad), ConfigError);
    bad.train_frac = 0.9;
    bad.val_frac = 0.2;
    CHECK_THROWS_AS(make_split(10, bad), ConfigError);
    SplitSpec ok;
    CHECK_THROWS_AS(make_split(0, ok), UsageError);

    // few-shot knob: a small train fraction shrinks only the train part
    SplitSpec few;
    few.train_frac = 0.05;
    few.val_frac = 0.05;
    auto f = make_split(100, few);
    CHECK(f.train.size() == 5);
    CHECK(f.test.size() == 90);
}

TEST_CASE("group splits never tear a group apart") {
    // 10 groups of increasing size, 55 samples total
    std::vector<std::int64_t> gids;
    for (std::int64_t g = 0; g < 10; ++g)
        for (std::int64_t k = 0; k <= g; ++k) gids.push_back(g);
    SplitSpec spec;
    spec.train_frac = 0.6;
    spec.val_frac = 0.2;
    spec.seed = 12;
    auto s = make_group_split(gids, spec);
    CHECK(s.train.size() + s.val.size() + s.test.size() == gids.size());
    CHECK(!s.train.empty());
    CHECK(!s.test.empty());

    auto part_groups = [&](const std::vector<std::size_t>& part) {
        std::set<std::int64_t> out;
        for (auto i : part) out.insert(gids[i]);
        return out;
    };
    auto tg = part_groups(s.train), vg = part_groups(s.val), eg = part_groups(s.test);
    for (auto g : tg) {
        CHECK(vg.count(g) == 0);
        CHECK(eg.count(g) == 0);
    }
    for (auto g : vg) CHECK(eg.count(g) == 0);

    auto again = make_group_split(gids, spec);
    CHECK(again.train == s.train);
    CHECK_THROWS_AS(make_group_split({}, spec), UsageError);
}

TEST_CASE("labeled cells load from a matrix and its sidecar") {
    const auto mpath = tmp_file("labeled.mtx");
    {
        std::ofstream out(mpath);
        out << "4 6 5\n";
        out << "1 1 4\n1 2 2\n2 3 9\n4 5 1\n4 6 3\n";  // cell 3 empty -> dropped
    }
    const auto lpath = tmp_file("labeled.tsv");
    {
        std::ofstream out(lpath);
        out << "# cell_id label\n";
        out << "1 tumor\n2 healthy\n3 ignored_dropped\n4 tumor\n";
    }
    auto data = load_labeled_cells(mpath.string(), lpath.string());
    REQUIRE(data.cells.size() == 3);
    // the dropped cell's label never reaches the class list
    REQUIRE(data.class_names == std::vector<std::string>{"healthy", "tumor"});
    CHECK(data.labels == I64{1, 0, 1});

    const auto missing = tmp_file("labeled_missing.tsv");
    {
        std::ofstream out(missing);
        out << "1 tumor\n2 healthy\n";  // cell 4 unlabeled
    }
    CHECK_THROWS_AS(load_labeled_cells(mpath.string(), missing.string()), SchemaError);

    const auto dup = tmp_file("labeled_dup.tsv");
    {
        std::ofstream out(dup);
        out << "1 a\n1 b\n2 a\n4 a\n";
    }
    CHECK_THROWS_AS(load_labeled_cells(mpath.string(), dup.string()), SchemaError);

    const auto trailing = tmp_file("labeled_trailing.tsv");
    {
        std::ofstream out(trailing);
        out << "1 tumor extra\n";
    }
    CHECK_THROWS_AS(load_labeled_cells(mpath.string(), trailing.string()), ParseError);
    CHECK_THROWS_AS(load_labeled_cells(mpath.string(), "/nonexistent/labels.tsv"), ParseError);
}

TEST_CASE("fine-tuning separates a linearly separable corpus") {
    auto data = separable_cells(30);
    auto params = enc::EncoderParams::init(tiny_encoder(12), 5, Dtype::f64);
    ClassifierHead head;
    head.mlp = Mlp::init("annot", {16, 16, 2}, Activation::relu, 6, Dtype::f64);
    FineTuneConfig cfg;
    cfg.split.train_frac = 0.7;
    cfg.split.val_frac = 0.1;
    cfg.adam.lr = 1e-2;
    cfg.batch_size = 8;
    cfg.n_epochs = 30;
    cfg.freeze_encoder = true;
    cfg.seed = 9;
    auto rep = fine_tune_classifier(data, pre::BinSpec{}, params, head, cfg);
    CHECK(rep.is_classification);
    CHECK(rep.accuracy >= 0.95);
    CHECK(rep.n_train == 42);
    CHECK(rep.n_val == 6);
    CHECK(rep.n_test == 12);
    CHECK(rep.macro_f1 >= 0.9);
    CHECK(rep.weighted_f1 <= 1.0);
}

TEST_CASE("fine-tuning is deterministic and freezing keeps the encoder intact") {
    auto data = separable_cells(12);
    FineTuneConfig cfg;
    cfg.split.train_frac = 0.7;
    cfg.split.val_frac = 0.1;
    cfg.adam.lr = 1e-2;
    cfg.batch_size = 4;
    cfg.n_epochs = 4;
    cfg.head_dropout = 0.1;
    cfg.seed = 11;

    auto run = [&]() {
        auto params = enc::EncoderParams::init(tiny_encoder(12), 5, Dtype::f64);
        ClassifierHead head;
        head.mlp = Mlp::init("annot", {16, 12, 2}, Activation::relu, 6, Dtype::f64);
        auto rep = fine_tune_classifier(data, pre::BinSpec{}, params, head, cfg);
        return rep.to_text();
    };
    CHECK(run() == run());

    auto params = enc::EncoderParams::init(tiny_encoder(12), 5, Dtype::f64);
    const auto before = snapshot(params.all());
    ClassifierHead head;
    head.mlp = Mlp::init("annot", {16, 12, 2}, Activation::relu, 6, Dtype::f64);
    const auto head_before = snapshot(head.mlp.all());
    fine_tune_classifier(data, pre::BinSpec{}, params, head, cfg);
    const auto after = snapshot(params.all());
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i], after[i]));
    // the head itself must have moved
    bool moved = false;
    const auto head_after = snapshot(head.mlp.all());
    for (std::size_t i = 0; i < head_before.size(); ++i)
        if (!bitwise_equal(head_before[i], head_after[i])) moved = true;
    CHECK(moved);
    // dropout restored after the guard
    CHECK(params.cfg.dropout_p == 0.1);
}

TEST_CASE("unfreezing lets gradients reach the encoder") {
    auto data = separable_cells(6);
    auto params = enc::EncoderParams::init(tiny_encoder(12), 5, Dtype::f64);
    const auto before = snapshot(params.all());
    ClassifierHead head;
    head.mlp = Mlp::init("annot", {16, 8, 2}, Activation::relu, 6, Dtype::f64);
    FineTuneConfig cfg;
    cfg.split.train_frac = 0.7;
    cfg.split.val_frac = 0.0;
    cfg.adam.lr = 1e-3;
    cfg.batch_size = 4;
    cfg.n_epochs = 1;
    cfg.freeze_encoder = false;
    cfg.seed = 13;
    fine_tune_classifier(data, pre::BinSpec{}, params, head, cfg);
    const auto after = snapshot(params.all());
    bool moved = false;
    for (std::size_t i = 0; i < before.size(); ++i)
        if (!bitwise_equal(before[i], after[i])) moved = true;
    CHECK(moved);
}

TEST_CASE("fine-tune validation catches mismatched heads and labels") {
    auto data = separable_cells(10);
    auto params = enc::EncoderParams::init(tiny_encoder(12), 5, Dtype::f64);
    FineTuneConfig cfg;

    ClassifierHead three;
    three.mlp = Mlp::init("annot", {16, 8, 3}, Activation::relu, 6);
    CHECK_THROWS_AS(fine_tune_classifier(data, pre::BinSpec{}, params, three, cfg), SchemaError);

    ClassifierHead narrow;
    narrow.mlp = Mlp::init("annot", {8, 8, 2}, Activation::relu, 6);
    CHECK_THROWS_AS(fine_tune_classifier(data, pre::BinSpec{}, params, narrow, cfg), SchemaError);

    ClassifierHead fine;
    fine.mlp = Mlp::init("annot", {16, 8, 2}, Activation::relu, 6);
    auto bad_labels = data;
    bad_labels.labels[0] = 7;
    CHECK_THROWS_AS(fine_tune_classifier(bad_labels, pre::BinSpec{}, params, fine, cfg),
                    IndexError);
    auto short_labels = data;
    short_labels.labels.pop_back();
    CHECK_THROWS_AS(fine_tune_classifier(short_labels, pre::BinSpec{}, params, fine, cfg),
                    UsageError);
    LabeledCells empty;
    empty.class_names = {"a", "b"};
    CHECK_THROWS_AS(fine_tune_classifier(empty, pre::BinSpec{}, params, fine, cfg),
                    EmptyCellError);
}

namespace {

DrugResponsePairs synthetic_response(std::size_t n_cells, std::int64_t n_drugs,
                                     std::int64_t drug_width) {
    DrugResponsePairs data;
    RngStream r{99, 77, 0};
    for (std::size_t i = 0; i < n_cells; ++i) {
        pre::SparseProfile p;
        for (std::int64_t g = 0; g < 4; ++g) {
            p.positions.push_back(g * 2 + static_cast<std::int64_t>(i % 2));
            p.values.push_back(1.0 + 5.0 * r.uniform());
        }
        data.cells.push_back(p);
    }
    data.drug_features = Tensor::zeros({n_drugs, drug_width}, Dtype::f64);
    for (std::int64_t i = 0; i < data.drug_features.numel(); ++i)
        data.drug_features.set(i, r.next_u64() % 2 ? 1.0 : 0.0);
    for (std::size_t c = 0; c < n_cells; ++c)
        for (std::int64_t d = 0; d < n_drugs; ++d) {
            double base = 0.0;
            for (double v : data.cells[c].values) base += v;
            data.pairs.push_back({static_cast<std::int64_t>(c), d,
                                  0.3 * base + 1.5 * double(d) + 0.1 * double(c % 3)});
        }
    return data;
}

}  // namespace

TEST_CASE("regression fine-tuning beats an untrained head") {
    auto data = synthetic_response(10, 3, 6);
    auto params = enc::EncoderParams::init(tiny_encoder(12), 5, Dtype::f64);

    auto run = [&](double lr, std::int64_t epochs) {
        RegressionHead head;
        head.cell = Mlp::init("cellbranch", {16, 24, 8}, Activation::relu, 15, Dtype::f64);
        head.fusion = Mlp::init("fusion", {8 + 6, 16, 1}, Activation::elu, 15, Dtype::f64);
        FineTuneConfig cfg;
        cfg.split.train_frac = 0.7;
        cfg.split.val_frac = 0.1;
        cfg.adam.lr = lr;
        cfg.batch_size = 6;
        cfg.n_epochs = epochs;
        cfg.seed = 21;
        return fine_tune_regressor(data, pre::BinSpec{}, params, head, cfg);
    };

    auto untrained = run(0.0, 1);
    auto trained = run(1e-2, 60);
    CHECK(trained.rmse < untrained.rmse);
    CHECK(trained.rmse >= trained.mae);
    CHECK(trained.mae >= 0.0);
    CHECK(trained.pearson <= 1.0);
    CHECK(trained.pearson >= -1.0);
    CHECK(trained.r2 > untrained.r2);
    CHECK(!trained.is_classification);
    CHECK(trained.n_train + trained.n_val + trained.n_test ==
          static_cast<std::int64_t>(data.pairs.size()));

    // determinism of the whole path
    auto again = run(1e-2, 60);
    CHECK(again.to_text() == trained.to_text());
}

TEST_CASE("cold cell splits hold out whole cell lines") {
    auto data = synthetic_response(8, 3, 6);
    data.cold_cell_split = true;
    auto params = enc::EncoderParams::init(tiny_encoder(12), 5, Dtype::f64);
    RegressionHead head;
    head.cell = Mlp::init("cellbranch", {16, 12, 4}, Activation::relu, 15, Dtype::f64);
    head.fusion = Mlp::init("fusion", {4 + 6, 8, 1}, Activation::elu, 15, Dtype::f64);
    FineTuneConfig cfg;
    cfg.split.train_frac = 0.6;
    cfg.split.val_frac = 0.15;
    cfg.adam.lr = 1e-2;
    cfg.batch_size = 6;
    cfg.n_epochs = 5;
    cfg.seed = 23;
    auto rep = fine_tune_regressor(data, pre::BinSpec{}, params, head, cfg);
    CHECK(rep.n_train + rep.n_val + rep.n_test == static_cast<std::int64_t>(data.pairs.size()));
    // every pair of one cell line shares its part, so sizes are multiples of 3
    CHECK(rep.n_train % 3 == 0);
    CHECK(rep.n_val % 3 == 0);
    CHECK(rep.n_test % 3 == 0);
    CHECK(rep.n_test > 0);
}

TEST_CASE("regression fine-tune validation") {
    auto data = synthetic_response(6, 2, 6);
    auto params = enc::EncoderParams::init(tiny_encoder(12), 5, Dtype::f64);
    RegressionHead head;
    head.cell = Mlp::init("cellbranch", {16, 12, 4}, Activation::relu, 15, Dtype::f64);
    head.fusion = Mlp::init("fusion", {4 + 6, 8, 1}, Activation::elu, 15, Dtype::f64);
    FineTuneConfig cfg;

    auto bad_width = data;
    bad_width.drug_features = Tensor::zeros({2, 5}, Dtype::f64);
    CHECK_THROWS_AS(fine_tune_regressor(bad_width, pre::BinSpec{}, params, head, cfg),
                    SchemaError);
    auto bad_pair = data;
    bad_pair.pairs[0].drug = 99;
    CHECK_THROWS_AS(fine_tune_regressor(bad_pair, pre::BinSpec{}, params, head, cfg), IndexError);
    auto bad_cell = data;
    bad_cell.pairs[0].cell = -1;
    CHECK_THROWS_AS(fine_tune_regressor(bad_cell, pre::BinSpec{}, params, head, cfg), IndexError);
    auto no_pairs = data;
    no_pairs.pairs.clear();
    CHECK_THROWS_AS(fine_tune_regressor(no_pairs, pre::BinSpec{}, params, head, cfg), UsageError);
    DrugResponsePairs no_cells;
    no_cells.drug_features = data.drug_features;
    CHECK_THROWS_AS(fine_tune_regressor(no_cells, pre::BinSpec{}, params, head, cfg),
                    EmptyCellError);
}
