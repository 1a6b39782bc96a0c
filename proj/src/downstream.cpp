#include "gradcell/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "gradcell/errors.hpp"
#include "gradcell/ops.hpp"

namespace gradcell::down {

using ad::Dtype;
using ad::RngStream;
using ad::substream;

namespace {

Tensor randn(ad::Shape shape, Dtype dt, RngStream& r, double std) {
    Tensor t = Tensor::zeros(std::move(shape), dt);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, std * r.normal());
    return t;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Value apply_act(const Value& x, Activation act) {
    switch (act) {
        case Activation::relu: return ad::relu(x);
        case Activation::leaky_relu: return ad::leaky_relu(x);
        case Activation::elu: return ad::elu(x);
    }
    throw ConfigError("unknown activation");
}

}  // namespace

Mlp Mlp::init(const std::string& prefix, const std::vector<std::int64_t>& widths, Activation act,
              std::uint64_t seed, Dtype dt) {
    if (widths.size() < 2) throw ConfigError("mlp needs an input and an output width");
    for (auto w : widths)
        if (w <= 0) throw ConfigError("mlp widths must be positive");
    Mlp m;
    m.act = act;
    const std::uint64_t tag = fnv1a(prefix);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const auto in = widths[i];
        const auto out = widths[i + 1];
        RngStream r{seed, substream(seed, ad::stream_tag::init, tag, i), 0};
        m.weights.emplace_back(prefix + ".w" + std::to_string(i),
                               randn({out, in}, dt, r, 1.0 / std::sqrt(static_cast<double>(in))));
        m.biases.emplace_back(prefix + ".b" + std::to_string(i), Tensor::zeros({1, out}, dt));
    }
    return m;
}

std::int64_t Mlp::in_width() const {
    if (weights.empty()) throw UsageError("mlp has no layers");
    return weights.front().value.cols();
}

std::int64_t Mlp::out_width() const {
    if (weights.empty()) throw UsageError("mlp has no layers");
    return weights.back().value.rows();
}

std::vector<ad::Parameter*> Mlp::all() {
    std::vector<ad::Parameter*> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        out.push_back(&weights[i]);
        out.push_back(&biases[i]);
    }
    return out;
}

Value Mlp::forward(Tape& tape, Value x, double dropout_p, RngStream dropout_base) {
    if (weights.empty()) throw UsageError("mlp has no layers");
    if (x.tensor().cols() != in_width())
        throw SchemaError("mlp input width mismatch: got " + std::to_string(x.tensor().cols()) +
                          ", head expects " + std::to_string(in_width()));
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must lie in [0, 1)");
    for (std::size_t i = 0; i < weights.size(); ++i) {
        x = ad::add_rowvec(ad::matmul(x, tape.leaf(weights[i]), false, true),
                           tape.leaf(biases[i]));
        if (i + 1 < weights.size()) {
            x = apply_act(x, act);
            if (dropout_p > 0.0) {
                RngStream layer{dropout_base.seed, substream(dropout_base.stream_id, 7001, i), 0};
                x = ad::dropout(x, dropout_p, layer);
            }
        }
    }
    return x;
}

ClassifierHead annotation_head(std::int64_t in_width, std::int64_t n_classes, std::uint64_t seed,
                               Dtype dt) {
    if (n_classes < 2) throw ConfigError("classification needs at least two classes");
    ClassifierHead h;
    h.mlp = Mlp::init("annot", {in_width, 512, 128, n_classes}, Activation::relu, seed, dt);
    h.dropout_p = 0.1;
    return h;
}

ClassifierHead drug_sensitivity_head(std::int64_t in_width, std::uint64_t seed, Dtype dt) {
    ClassifierHead h;
    h.mlp = Mlp::init("drugsens", {in_width, 512, 32, 2}, Activation::leaky_relu, seed, dt);
    h.dropout_p = 0.1;
    return h;
}

RegressionHead cell_line_head(std::int64_t in_width, std::int64_t drug_width, std::uint64_t seed,
                              Dtype dt) {
    if (drug_width <= 0) throw ConfigError("drug_width must be positive");
    RegressionHead h;
    h.cell = Mlp::init("cellbranch", {in_width, 1024, 256}, Activation::relu, seed, dt);
    h.fusion = Mlp::init("fusion", {256 + drug_width, 512, 512, 1}, Activation::elu, seed, dt);
    h.dropout_p = 0.2;
    return h;
}

Value classify(Tape& tape, Value cell_embedding, ClassifierHead& head, double dropout_p,
               RngStream dropout_base) {
    return ad::softmax_rows(head.mlp.forward(tape, cell_embedding, dropout_p, dropout_base));
}

Value regress(Tape& tape, Value cell_embedding, Value drug_features, RegressionHead& head,
              double dropout_p, RngStream dropout_base) {
    if (drug_features.tensor().cols() != head.drug_width())
        throw SchemaError("drug feature width mismatch: got " +
                          std::to_string(drug_features.tensor().cols()) + ", head expects " +
                          std::to_string(head.drug_width()));
    if (cell_embedding.tensor().rows() != drug_features.tensor().rows())
        throw UsageError("cell and drug rows must align");
    RngStream cell_base{dropout_base.seed, substream(dropout_base.stream_id, 7002, 0), 0};
    RngStream fuse_base{dropout_base.seed, substream(dropout_base.stream_id, 7002, 1), 0};
    Value c = head.cell.forward(tape, cell_embedding, dropout_p, cell_base);
    Value fused = ad::concat_cols({c, drug_features});
    return head.fusion.forward(tape, fused, dropout_p, fuse_base);
}

namespace {

void check_labels(const std::vector<std::int64_t>& y_true,
                  const std::vector<std::int64_t>& y_pred) {
    if (y_true.empty()) throw UsageError("metrics need at least one sample");
    if (y_true.size() != y_pred.size()) throw UsageError("label vectors must have equal length");
}

void check_reals(const std::vector<double>& y, const std::vector<double>& yhat,
                 std::size_t min_n) {
    if (y.size() != yhat.size()) throw UsageError("value vectors must have equal length");
    if (y.size() < min_n)
        throw UsageError("metric needs at least " + std::to_string(min_n) + " samples");
}

}  // namespace

ClassScores class_scores(const std::vector<std::int64_t>& y_true,
                         const std::vector<std::int64_t>& y_pred) {
    check_labels(y_true, y_pred);
    std::map<std::int64_t, std::size_t> index;
    for (auto c : y_true) index.emplace(c, 0);
    for (auto c : y_pred) index.emplace(c, 0);
    ClassScores s;
    for (auto& [c, i] : index) {
        i = s.classes.size();
        s.classes.push_back(c);
    }
    const std::size_t n_cls = s.classes.size();
    s.confusion.assign(n_cls, std::vector<std::int64_t>(n_cls, 0));
    for (std::size_t i = 0; i < y_true.size(); ++i)
        ++s.confusion[index.at(y_true[i])][index.at(y_pred[i])];

    s.precision.resize(n_cls);
    s.recall.resize(n_cls);
    s.f1.resize(n_cls);
    s.support.resize(n_cls);
    for (std::size_t i = 0; i < n_cls; ++i) {
        std::int64_t tp = s.confusion[i][i], row = 0, col = 0;
        for (std::size_t j = 0; j < n_cls; ++j) {
            row += s.confusion[i][j];
            col += s.confusion[j][i];
        }
        const std::int64_t fp = col - tp, fn = row - tp;
        s.support[i] = row;
        const double p = (tp + fp) > 0 ? double(tp) / double(tp + fp) : 0.0;
        const double r = (tp + fn) > 0 ? double(tp) / double(tp + fn) : 0.0;
        s.precision[i] = p;
        s.recall[i] = r;
        s.f1[i] = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    }
    return s;
}

double accuracy(const std::vector<std::int64_t>& y_true, const std::vector<std::int64_t>& y_pred) {
    check_labels(y_true, y_pred);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i)
        if (y_true[i] == y_pred[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(y_true.size());
}

double macro_f1(const std::vector<std::int64_t>& y_true, const std::vector<std::int64_t>& y_pred) {
    const auto s = class_scores(y_true, y_pred);
    double sum = 0.0;
    for (double f : s.f1) sum += f;
    return sum / static_cast<double>(s.f1.size());
}

double weighted_f1(const std::vector<std::int64_t>& y_true,
                   const std::vector<std::int64_t>& y_pred) {
    const auto s = class_scores(y_true, y_pred);
    double sum = 0.0, total = 0.0;
    for (std::size_t i = 0; i < s.f1.size(); ++i) {
        sum += static_cast<double>(s.support[i]) * s.f1[i];
        total += static_cast<double>(s.support[i]);
    }
    return sum / total;  // total == sample count, never zero here
}

double pearson(const std::vector<double>& y, const std::vector<double>& yhat) {
    check_reals(y, yhat, 2);
    const auto n = static_cast<double>(y.size());
    double my = 0.0, mh = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        my += y[i];
        mh += yhat[i];
    }
    my /= n;
    mh /= n;
    // sample covariance over sample deviations; the 1/(n-1) factors cancel
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double a = y[i] - my, b = yhat[i] - mh;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw DegenerateInputError("correlation is undefined for a constant sequence");
    // roundoff can push a perfectly correlated pair a few ulp past 1
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double r2(const std::vector<double>& y, const std::vector<double>& yhat) {
    check_reals(y, yhat, 2);
    double my = 0.0;
    for (double v : y) my += v;
    my /= static_cast<double>(y.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        num += (y[i] - yhat[i]) * (y[i] - yhat[i]);
        den += (y[i] - my) * (y[i] - my);
    }
    if (den == 0.0)
        throw DegenerateInputError("explained variance is undefined when targets are constant");
    return 1.0 - num / den;
}

double rmse(const std::vector<double>& y, const std::vector<double>& yhat) {
    check_reals(y, yhat, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    return std::sqrt(s / static_cast<double>(y.size()));
}

double mae(const std::vector<double>& y, const std::vector<double>& yhat) {
    check_reals(y, yhat, 1);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
    return s / static_cast<double>(y.size());
}

std::string EvalReport::to_text() const {
    std::string out;
    char buf[128];
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%s=%.17g\n", key, v);
        out += buf;
    };
    auto puti = [&](const std::string& key, std::int64_t v) {
        out += key + "=" + std::to_string(v) + "\n";
    };
    out += std::string("kind=") + (is_classification ? "classification" : "regression") + "\n";
    puti("n_train", n_train);
    puti("n_val", n_val);
    puti("n_test", n_test);
    if (is_classification) {
        put("accuracy", accuracy);
        put("macro_f1", macro_f1);
        put("weighted_f1", weighted_f1);
        for (std::size_t i = 0; i < scores.classes.size(); ++i) {
            const std::string pre = "class." + std::to_string(scores.classes[i]) + ".";
            put((pre + "precision").c_str(), scores.precision[i]);
            put((pre + "recall").c_str(), scores.recall[i]);
            put((pre + "f1").c_str(), scores.f1[i]);
            puti(pre + "support", scores.support[i]);
        }
        for (std::size_t i = 0; i < scores.classes.size(); ++i)
            for (std::size_t j = 0; j < scores.classes.size(); ++j)
                puti("confusion." + std::to_string(scores.classes[i]) + "." +
                         std::to_string(scores.classes[j]),
                     scores.confusion[i][j]);
    } else {
        put("pearson", pearson);
        put("r2", r2);
        put("rmse", rmse);
        put("mae", mae);
    }
    return out;
}

void SplitSpec::validate() const {
    if (train_frac <= 0.0) throw ConfigError("train fraction must be positive");
    if (val_frac < 0.0) throw ConfigError("val fraction cannot be negative");
    if (train_frac + val_frac >= 1.0)
        throw ConfigError("train and val fractions must leave room for a test part");
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, RngStream r) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const std::size_t j = i + r.next_u64() % (n - i);
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

}  // namespace

Split make_split(std::size_t n, const SplitSpec& spec) {
    spec.validate();
    if (n == 0) throw UsageError("cannot split an empty dataset");
    const auto idx = shuffled_indices(n, {spec.seed, substream(spec.seed, ad::stream_tag::split, 0), 0});
    const auto n_train = static_cast<std::size_t>(spec.train_frac * static_cast<double>(n));
    const auto n_val = static_cast<std::size_t>(spec.val_frac * static_cast<double>(n));
    Split s;
    s.train.assign(idx.begin(), idx.begin() + n_train);
    s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    s.test.assign(idx.begin() + n_train + n_val, idx.end());
    return s;
}

Split make_group_split(const std::vector<std::int64_t>& groups, const SplitSpec& spec) {
    spec.validate();
    if (groups.empty()) throw UsageError("cannot split an empty dataset");
    std::vector<std::int64_t> ids(groups);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    const auto order =
        shuffled_indices(ids.size(), {spec.seed, substream(spec.seed, ad::stream_tag::split, 1), 0});
    std::map<std::int64_t, std::size_t> count;
    for (auto g : groups) ++count[g];
    const double n = static_cast<double>(groups.size());
    // greedy fill: whole groups go to train until its quota is met, then val
    std::map<std::int64_t, int> part;  // 0 train, 1 val, 2 test
    double in_train = 0.0, in_val = 0.0;
    for (auto oi : order) {
        const auto g = ids[oi];
        const auto c = static_cast<double>(count.at(g));
        if (in_train < spec.train_frac * n) {
            part[g] = 0;
            in_train += c;
        } else if (in_val < spec.val_frac * n) {
            part[g] = 1;
            in_val += c;
        } else {
            part[g] = 2;
        }
    }
    Split s;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        switch (part.at(groups[i])) {
            case 0: s.train.push_back(i); break;
            case 1: s.val.push_back(i); break;
            default: s.test.push_back(i); break;
        }
    }
    return s;
}

namespace {

// Fine-tuning treats the encoder as a feature extractor: its own dropout
// is switched off so a cell embeds to one vector, and the head's dropout
// is the regularizer. Restores the old rate on scope exit.
struct DropoutOff {
    enc::EncoderParams& p;
    double saved;
    explicit DropoutOff(enc::EncoderParams& params) : p(params), saved(params.cfg.dropout_p) {
        p.cfg.dropout_p = 0.0;
    }
    ~DropoutOff() { p.cfg.dropout_p = saved; }
};

Value embed_cell(Tape& tape, const pre::SparseProfile& profile, const pre::BinSpec& spec,
                 enc::EncoderParams& params, std::uint64_t seed, std::uint64_t sample) {
    Value h = enc::encode(tape, profile, spec, params, enc::EncodeRng{seed, sample, 0, 0});
    return enc::pool_full_sequence(h, profile, params);
}

// Mean of -log softmax picked at each row's label.
Value softmax_ce(Tape& tape, const Value& logits, const std::vector<std::int64_t>& labels) {
    const auto rows = logits.tensor().rows();
    const auto cols = logits.tensor().cols();
    if (static_cast<std::int64_t>(labels.size()) != rows)
        throw UsageError("one label per logit row required");
    Tensor onehot = Tensor::zeros({rows, cols}, logits.tensor().dtype());
    for (std::int64_t i = 0; i < rows; ++i) {
        if (labels[i] < 0 || labels[i] >= cols)
            throw IndexError("label out of range for logit width");
        onehot.set(i, labels[i], 1.0);
    }
    Value z = ad::sub_colvec(logits, ad::row_max_detached(logits));
    Value lse = ad::vlog(ad::row_sum(ad::vexp(z)));
    Value picked = ad::row_sum(ad::mul(z, tape.constant(std::move(onehot))));
    return ad::mean_all(ad::sub(lse, picked));
}

std::int64_t argmax_row(const Tensor& t, std::int64_t row) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < t.cols(); ++j)
        if (t.at(row, j) > t.at(row, best)) best = j;
    return best;
}

void check_finetune_config(const FineTuneConfig& cfg) {
    cfg.split.validate();
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (cfg.n_epochs < 1) throw ConfigError("n_epochs must be at least 1");
    if (cfg.head_dropout < 0.0 || cfg.head_dropout >= 1.0)
        throw ConfigError("head_dropout must lie in [0, 1)");
    if (cfg.adam.lr < 0.0) throw ConfigError("learning rate cannot be negative");
}

}  // namespace

LabeledCells load_labeled_cells(const std::string& matrix_path, const std::string& labels_path) {
    const pre::CountMatrix m = pre::ingest_count_matrix(matrix_path);

    std::ifstream in(labels_path);
    if (!in) throw ParseError("cannot open label file: " + labels_path);
    std::map<std::int64_t, std::string> by_id;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::int64_t id = 0;
        std::string label;
        if (!(ls >> id)) continue;  // blank or comment-only line
        if (!(ls >> label))
            throw ParseError("label file line " + std::to_string(lineno) + ": missing label");
        std::string extra;
        if (ls >> extra)
            throw ParseError("label file line " + std::to_string(lineno) + ": trailing tokens");
        if (!by_id.emplace(id, label).second)
            throw SchemaError("label file: duplicate entry for cell " + std::to_string(id));
    }

    LabeledCells out;
    out.cells = pre::profiles_from_counts(m);
    std::vector<std::string> raw(out.cells.size());
    for (std::size_t i = 0; i < out.cells.size(); ++i) {
        const auto file_id = m.original_cell_ids[i] + 1;  // files are 1-indexed
        const auto it = by_id.find(file_id);
        if (it == by_id.end()) throw SchemaError("no label for cell " + std::to_string(file_id));
        raw[i] = it->second;
    }
    std::vector<std::string> names(raw);
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    out.class_names = names;
    for (const auto& r : raw)
        out.labels.push_back(
            std::lower_bound(names.begin(), names.end(), r) - names.begin());
    return out;
}

EvalReport fine_tune_classifier(const LabeledCells& data, const pre::BinSpec& spec,
                                enc::EncoderParams& params, ClassifierHead& head,
                                const FineTuneConfig& cfg) {
    if (data.cells.empty()) throw EmptyCellError("no cells to fine-tune on");
    if (data.labels.size() != data.cells.size())
        throw UsageError("one label per cell required");
    const auto n_classes = static_cast<std::int64_t>(data.class_names.size());
    if (n_classes < 2) throw UsageError("need at least two classes");
    for (auto l : data.labels)
        if (l < 0 || l >= n_classes) throw IndexError("label id outside the class list");
    if (head.n_classes() != n_classes)
        throw SchemaError("head emits " + std::to_string(head.n_classes()) +
                          " classes but the label set has " + std::to_string(n_classes));
    if (head.mlp.in_width() != params.cfg.pooled_dim())
        throw SchemaError("head input width does not match the pooled embedding");
    check_finetune_config(cfg);

    const auto n = data.cells.size();
    const Split split = make_split(n, cfg.split);
    if (split.train.empty()) throw UsageError("train split is empty at this dataset size");
    if (split.test.empty()) throw UsageError("test split is empty at this dataset size");

    DropoutOff guard(params);

    const Dtype dt = params.dtype();
    // Frozen encoder: embed every cell once up front.
    Tensor cached;
    if (cfg.freeze_encoder) {
        cached = Tensor::zeros({static_cast<std::int64_t>(n), params.cfg.pooled_dim()}, dt);
        Tape tape(Tape::Mode::no_grad);
        for (std::size_t i = 0; i < n; ++i) {
            Value e = embed_cell(tape, data.cells[i], spec, params, cfg.seed, i);
            for (std::int64_t j = 0; j < e.tensor().cols(); ++j)
                cached.set(static_cast<std::int64_t>(i), j, e.tensor().at(0, j));
        }
    }

    std::vector<ad::Parameter*> trainable = head.mlp.all();
    if (!cfg.freeze_encoder)
        for (auto* p : params.all()) trainable.push_back(p);
    ad::Adam opt(cfg.adam);

    for (std::int64_t epoch = 0; epoch < cfg.n_epochs; ++epoch) {
        auto order = split.train;
        RngStream shuffle{cfg.seed, substream(cfg.seed, ad::stream_tag::data, 1000, epoch), 0};
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            const std::size_t j = i + shuffle.next_u64() % (order.size() - i);
            std::swap(order[i], order[j]);
        }
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Tape tape(Tape::Mode::grad);
            Value x;
            std::vector<std::int64_t> labels;
            if (cfg.freeze_encoder) {
                Tensor xb = Tensor::zeros(
                    {static_cast<std::int64_t>(stop - start), params.cfg.pooled_dim()}, dt);
                for (std::size_t k = start; k < stop; ++k) {
                    for (std::int64_t j = 0; j < xb.cols(); ++j)
                        xb.set(static_cast<std::int64_t>(k - start), j,
                               cached.at(static_cast<std::int64_t>(order[k]), j));
                    labels.push_back(data.labels[order[k]]);
                }
                x = tape.constant(std::move(xb));
            } else {
                std::vector<Value> rows;
                for (std::size_t k = start; k < stop; ++k) {
                    rows.push_back(embed_cell(tape, data.cells[order[k]], spec, params, cfg.seed,
                                              order[k]));
                    labels.push_back(data.labels[order[k]]);
                }
                x = rows.size() == 1 ? rows[0] : ad::concat_rows(rows);
            }
            RngStream drop{cfg.seed,
                           substream(cfg.seed, ad::stream_tag::dropout, 2000, epoch, start), 0};
            Value logits = head.mlp.forward(tape, x, cfg.head_dropout, drop);
            tape.backward(softmax_ce(tape, logits, labels));
            opt.step(trainable);
            ad::zero_grads(trainable);
        }
    }

    // Evaluate on the held-out test part, dropout off everywhere.
    std::vector<std::int64_t> y_true, y_pred;
    {
        Tape tape(Tape::Mode::no_grad);
        for (auto i : split.test) {
            Value e;
            if (cfg.freeze_encoder) {
                Tensor row = Tensor::zeros({1, params.cfg.pooled_dim()}, dt);
                for (std::int64_t j = 0; j < row.cols(); ++j)
                    row.set(0, j, cached.at(static_cast<std::int64_t>(i), j));
                e = tape.constant(std::move(row));
            } else {
                e = embed_cell(tape, data.cells[i], spec, params, cfg.seed, i);
            }
            Value logits = head.mlp.forward(tape, e, 0.0, {});
            y_true.push_back(data.labels[i]);
            y_pred.push_back(argmax_row(logits.tensor(), 0));
        }
    }

    EvalReport rep;
    rep.is_classification = true;
    rep.scores = class_scores(y_true, y_pred);
    rep.accuracy = down::accuracy(y_true, y_pred);
    rep.macro_f1 = down::macro_f1(y_true, y_pred);
    rep.weighted_f1 = down::weighted_f1(y_true, y_pred);
    rep.n_train = static_cast<std::int64_t>(split.train.size());
    rep.n_val = static_cast<std::int64_t>(split.val.size());
    rep.n_test = static_cast<std::int64_t>(split.test.size());
    return rep;
}

EvalReport fine_tune_regressor(const DrugResponsePairs& data, const pre::BinSpec& spec,
                               enc::EncoderParams& params, RegressionHead& head,
                               const FineTuneConfig& cfg) {
    if (data.cells.empty()) throw EmptyCellError("no cells to fine-tune on");
    if (data.pairs.empty()) throw UsageError("no response pairs to fit");
    if (data.drug_features.cols() != head.drug_width())
        throw SchemaError("drug feature width does not match the head");
    if (head.cell.in_width() != params.cfg.pooled_dim())
        throw SchemaError("head input width does not match the pooled embedding");
    for (const auto& pr : data.pairs) {
        if (pr.cell < 0 || pr.cell >= static_cast<std::int64_t>(data.cells.size()))
            throw IndexError("pair references a cell outside the table");
        if (pr.drug < 0 || pr.drug >= data.drug_features.rows())
            throw IndexError("pair references a drug outside the table");
    }
    check_finetune_config(cfg);

    const auto n = data.pairs.size();
    Split split;
    if (data.cold_cell_split) {
        std::vector<std::int64_t> groups(n);
        for (std::size_t i = 0; i < n; ++i) groups[i] = data.pairs[i].cell;
        split = make_group_split(groups, cfg.split);
    } else {
        split = make_split(n, cfg.split);
    }
    if (split.train.empty()) throw UsageError("train split is empty at this dataset size");
    if (split.test.empty()) throw UsageError("test split is empty at this dataset size");

    DropoutOff guard(params);

    const Dtype dt = params.dtype();
    Tensor cached;
    if (cfg.freeze_encoder) {
        cached = Tensor::zeros(
            {static_cast<std::int64_t>(data.cells.size()), params.cfg.pooled_dim()}, dt);
        Tape tape(Tape::Mode::no_grad);
        for (std::size_t i = 0; i < data.cells.size(); ++i) {
            Value e = embed_cell(tape, data.cells[i], spec, params, cfg.seed, i);
            for (std::int64_t j = 0; j < e.tensor().cols(); ++j)
                cached.set(static_cast<std::int64_t>(i), j, e.tensor().at(0, j));
        }
    }

    std::vector<ad::Parameter*> trainable = head.cell.all();
    for (auto* p : head.fusion.all()) trainable.push_back(p);
    if (!cfg.freeze_encoder)
        for (auto* p : params.all()) trainable.push_back(p);
    ad::Adam opt(cfg.adam);

    auto batch_values = [&](Tape& tape, const std::vector<std::size_t>& order, std::size_t start,
                            std::size_t stop, Tensor* targets) {
        const auto rows = static_cast<std::int64_t>(stop - start);
        Tensor drugs = Tensor::zeros({rows, head.drug_width()}, dt);
        if (targets) *targets = Tensor::zeros({rows, 1}, dt);
        Value cells;
        std::vector<Value> cell_rows;
        Tensor xb;
        if (cfg.freeze_encoder)
            xb = Tensor::zeros({rows, params.cfg.pooled_dim()}, dt);
        for (std::size_t k = start; k < stop; ++k) {
            const auto& pr = data.pairs[order[k]];
            const auto r = static_cast<std::int64_t>(k - start);
            for (std::int64_t j = 0; j < drugs.cols(); ++j)
                drugs.set(r, j, data.drug_features.at(pr.drug, j));
            if (targets) targets->set(r, 0, pr.ic50);
            if (cfg.freeze_encoder) {
                for (std::int64_t j = 0; j < xb.cols(); ++j) xb.set(r, j, cached.at(pr.cell, j));
            } else {
                cell_rows.push_back(embed_cell(tape, data.cells[pr.cell], spec, params, cfg.seed,
                                               static_cast<std::size_t>(pr.cell)));
            }
        }
        if (cfg.freeze_encoder)
            cells = tape.constant(std::move(xb));
        else
            cells = cell_rows.size() == 1 ? cell_rows[0] : ad::concat_rows(cell_rows);
        return std::pair<Value, Value>(cells, tape.constant(std::move(drugs)));
    };

    for (std::int64_t epoch = 0; epoch < cfg.n_epochs; ++epoch) {
        auto order = split.train;
        RngStream shuffle{cfg.seed, substream(cfg.seed, ad::stream_tag::data, 1001, epoch), 0};
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            const std::size_t j = i + shuffle.next_u64() % (order.size() - i);
            std::swap(order[i], order[j]);
        }
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Tape tape(Tape::Mode::grad);
            Tensor targets;
            auto [cells, drugs] = batch_values(tape, order, start, stop, &targets);
            RngStream drop{cfg.seed,
                           substream(cfg.seed, ad::stream_tag::dropout, 2001, epoch, start), 0};
            Value pred = regress(tape, cells, drugs, head, cfg.head_dropout, drop);
            Value diff = ad::sub(pred, tape.constant(std::move(targets)));
            tape.backward(ad::mean_all(ad::mul(diff, diff)));
            opt.step(trainable);
            ad::zero_grads(trainable);
        }
    }

    std::vector<double> y, yhat;
    {
        Tape tape(Tape::Mode::no_grad);
        auto [cells, drugs] = batch_values(tape, split.test, 0, split.test.size(), nullptr);
        Value pred = regress(tape, cells, drugs, head, 0.0, {});
        for (std::size_t i = 0; i < split.test.size(); ++i) {
            y.push_back(data.pairs[split.test[i]].ic50);
            yhat.push_back(pred.tensor().at(static_cast<std::int64_t>(i), 0));
        }
    }

    EvalReport rep;
    rep.is_classification = false;
    rep.pearson = down::pearson(y, yhat);
    rep.r2 = down::r2(y, yhat);
    rep.rmse = down::rmse(y, yhat);
    rep.mae = down::mae(y, yhat);
    rep.n_train = static_cast<std::int64_t>(split.train.size());
    rep.n_val = static_cast<std::int64_t>(split.val.size());
    rep.n_test = static_cast<std::int64_t>(split.test.size());
    return rep;
}

}  // namespace gradcell::down
