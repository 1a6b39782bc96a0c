#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "gradcell/encoder.hpp"
#include "gradcell/optim.hpp"

namespace gradcell::down {

using ad::Tape;
using ad::Tensor;
using ad::Value;

enum class Activation { relu, leaky_relu, elu };

// A stack of linear layers with a fixed activation between them (none
// after the last). Dropout, when enabled, sits after each activation.
struct Mlp {
    std::vector<ad::Parameter> weights;  // [out x in] each
    std::vector<ad::Parameter> biases;
    Activation act = Activation::relu;

    // widths = {input, hidden..., output}
    static Mlp init(const std::string& prefix, const std::vector<std::int64_t>& widths,
                    Activation act, std::uint64_t seed, ad::Dtype dt = ad::Dtype::f32);

    Value forward(Tape& tape, Value x, double dropout_p = 0.0, ad::RngStream dropout_base = {});
    std::vector<ad::Parameter*> all();
    std::int64_t in_width() const;
    std::int64_t out_width() const;
};

// Classification head over pooled cell embeddings.
struct ClassifierHead {
    Mlp mlp;
    double dropout_p = 0.1;
    std::int64_t n_classes() const { return mlp.out_width(); }
};

// Published defaults: 512 -> 128 -> n_classes with ReLU for annotation,
// 512 -> 32 -> 2 with LeakyReLU for single-cell drug sensitivity.
ClassifierHead annotation_head(std::int64_t in_width, std::int64_t n_classes, std::uint64_t seed,
                               ad::Dtype dt = ad::Dtype::f32);
ClassifierHead drug_sensitivity_head(std::int64_t in_width, std::uint64_t seed,
                                     ad::Dtype dt = ad::Dtype::f32);

// Regression head: a cell branch reduces the pooled embedding, the
// result is concatenated with a precomputed drug vector and fused down
// to one predicted IC50.
struct RegressionHead {
    Mlp cell;    // in -> 1024 -> 256, ReLU
    Mlp fusion;  // (cell_out + drug) -> 512 -> 512 -> 1, ELU
    double dropout_p = 0.2;
    std::int64_t drug_width() const { return fusion.in_width() - cell.out_width(); }
};

RegressionHead cell_line_head(std::int64_t in_width, std::int64_t drug_width, std::uint64_t seed,
                              ad::Dtype dt = ad::Dtype::f32);

// Softmax class probabilities, rows summing to one. Training passes
// supply dropout_p > 0 and a stream; evaluation leaves them off. Heads
// are taken mutably because their parameters join the tape as leaves.
Value classify(Tape& tape, Value cell_embedding, ClassifierHead& head, double dropout_p = 0.0,
               ad::RngStream dropout_base = {});

// Predicted IC50 per row. drug_features must be [B x drug_width],
// row-aligned with the cell embeddings; widths are checked.
Value regress(Tape& tape, Value cell_embedding, Value drug_features, RegressionHead& head,
              double dropout_p = 0.0, ad::RngStream dropout_base = {});

// Classification metrics. The class set is the union of classes seen in
// either argument; per-class F1 uses the confusion-matrix counts, the
// weighted average uses true-label support and divides by total support
// so it stays within [0, 1] (the usual definition; the source formula's
// 1/N normalizer reads like a typo).
double accuracy(const std::vector<std::int64_t>& y_true, const std::vector<std::int64_t>& y_pred);
double macro_f1(const std::vector<std::int64_t>& y_true, const std::vector<std::int64_t>& y_pred);
double weighted_f1(const std::vector<std::int64_t>& y_true,
                   const std::vector<std::int64_t>& y_pred);

struct ClassScores {
    std::vector<std::int64_t> classes;  // sorted
    std::vector<double> precision, recall, f1;
    std::vector<std::int64_t> support;               // true-label counts
    std::vector<std::vector<std::int64_t>> confusion;  // [true][pred]
};
ClassScores class_scores(const std::vector<std::int64_t>& y_true,
                         const std::vector<std::int64_t>& y_pred);

// Regression metrics; the correlation uses sample (n-1) deviations.
double pearson(const std::vector<double>& y, const std::vector<double>& yhat);
double r2(const std::vector<double>& y, const std::vector<double>& yhat);
double rmse(const std::vector<double>& y, const std::vector<double>& yhat);
double mae(const std::vector<double>& y, const std::vector<double>& yhat);

struct EvalReport {
    static constexpr double unset = std::numeric_limits<double>::quiet_NaN();
    // classification (NaN when not applicable)
    double accuracy = unset, macro_f1 = unset, weighted_f1 = unset;
    ClassScores scores;
    // regression (NaN when not applicable)
    double pearson = unset, r2 = unset, rmse = unset, mae = unset;
    bool is_classification = false;
    std::int64_t n_train = 0, n_val = 0, n_test = 0;

    std::string to_text() const;  // flat key=value lines
};

struct SplitSpec {
    double train_frac = 0.8;
    double val_frac = 0.1;  // test gets the rest
    std::uint64_t seed = 0;
    void validate() const;
};

struct Split {
    std::vector<std::size_t> train, val, test;
};

// Random split by shuffled index.
Split make_split(std::size_t n, const SplitSpec& spec);

// Cold split: every sample of a group lands in the same part, so test
// groups are never seen in training.
Split make_group_split(const std::vector<std::int64_t>& groups, const SplitSpec& spec);

struct FineTuneConfig {
    SplitSpec split;
    ad::AdamConfig adam{1e-4, 0.9, 0.999, 1e-8, 0.0};
    std::int64_t batch_size = 32;
    std::int64_t n_epochs = 10;
    bool freeze_encoder = true;
    double head_dropout = 0.0;
    std::uint64_t seed = 0;
};

struct LabeledCells {
    std::vector<pre::SparseProfile> cells;
    std::vector<std::string> class_names;  // index = class id
    std::vector<std::int64_t> labels;      // per cell
};

// Count matrix plus a sidecar label file: '#' comments allowed, then one
// "cell_id label" line per cell using the 1-indexed ids of the matrix
// file. Every ingested cell needs a label; labels for cells the ingest
// dropped are ignored. Class ids follow the sorted distinct label names.
LabeledCells load_labeled_cells(const std::string& matrix_path, const std::string& labels_path);

// Trains the head (and, unless frozen, the encoder) on the train part
// and reports metrics on the test part. The head's output width must
// match the label set.
EvalReport fine_tune_classifier(const LabeledCells& data, const pre::BinSpec& spec,
                                enc::EncoderParams& params, ClassifierHead& head,
                                const FineTuneConfig& cfg);

struct DrugResponsePairs {
    std::vector<pre::SparseProfile> cells;
    Tensor drug_features;  // [n_drugs x drug_width]
    struct Pair {
        std::int64_t cell = 0;
        std::int64_t drug = 0;
        double ic50 = 0.0;
    };
    std::vector<Pair> pairs;
    bool cold_cell_split = false;  // hold out whole cell lines
};

EvalReport fine_tune_regressor(const DrugResponsePairs& data, const pre::BinSpec& spec,
                               enc::EncoderParams& params, RegressionHead& head,
                               const FineTuneConfig& cfg);

}  // namespace gradcell::down
