#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gradcell/tensor.hpp"

namespace gradcell::pre {

// Cell phenotype label carried alongside a profile. unknown means the
// source data had no annotation; the discriminative loss refuses to train
// on unknowns rather than guessing.
enum class Label : int { normal = 0, cancer = 1, unknown = -1 };

struct CountEntry {
    std::int64_t cell;
    std::int64_t gene;
    std::int64_t count;
};

// Sparse cells x genes table of raw transcript counts. Cells with no
// non-zero count are dropped at ingest; original_cell_ids maps the kept
// row order back to source row indices.
struct CountMatrix {
    std::int64_t n_cells = 0;
    std::int64_t n_genes = 0;
    std::vector<CountEntry> entries;                // sorted by (cell, gene)
    std::vector<std::string> gene_ids;              // stable identifiers, size n_genes
    std::vector<std::int64_t> original_cell_ids;    // size n_cells
};

// One cell after normalization and sparsification: strictly increasing
// gene positions and the matching positive normalized expressions.
struct SparseProfile {
    std::vector<std::int64_t> positions;
    std::vector<double> values;
    Label label = Label::unknown;
};

// Expression-token vocabulary: value bins plus mask/cls/pad specials.
// Bin b covers [edges[b-1], edges[b]); values past the last edge saturate.
struct BinSpec {
    std::int64_t n_tokens = 8;
    std::vector<double> edges = {1.0, 2.0, 4.0, 6.0};

    std::int64_t n_bins() const { return static_cast<std::int64_t>(edges.size()) + 1; }
    std::int64_t mask_token() const { return n_bins(); }
    std::int64_t cls_token() const { return n_bins() + 1; }
    std::int64_t pad_token() const { return n_bins() + 2; }

    void validate() const;  // throws ConfigError on inconsistency
};

// Count normalization: x_k = ln(1 + 10000 * n_k / sum(n)). Zeros stay
// exactly zero; an all-zero cell raises EmptyCellError. Depends only on
// proportions, so scaling all counts by a positive integer is a no-op.
std::vector<double> normalize(const std::vector<std::int64_t>& counts);

// Keeps the non-zero coordinates of a normalized vector.
SparseProfile sparsify(const std::vector<double>& x);

// Inverse of sparsify onto a dense length-n vector.
std::vector<double> densify(const SparseProfile& p, std::int64_t n_genes);

// Token id of the bin containing a positive normalized value.
std::int64_t bin(double value, const BinSpec& spec);

// Caps a profile at max_len positions, keeping the highest expressions
// (ties broken toward lower positions), order restored afterwards.
SparseProfile truncate_profile(const SparseProfile& p, std::int64_t max_len);

// Text ingestion: optional %-comment banner, a "cells genes nnz" header
// line, then 1-indexed "cell gene count" triplets. Cells without a single
// positive count are dropped with a warning on stderr.
CountMatrix ingest_count_matrix(const std::string& path);
void write_count_matrix(const std::string& path, const CountMatrix& m);

// Binary embedding table: 16-byte header (magic, version, rows, cols as
// little-endian u32) followed by row-major f32 data.
ad::Tensor ingest_gene_embeddings(const std::string& path);
ad::Tensor ingest_gene_embeddings(const std::string& path, std::int64_t expect_rows,
                                  std::int64_t expect_cols);
void write_gene_embeddings(const std::string& path, const ad::Tensor& table);

// Normalize + sparsify every cell of a matrix; labels optional per cell.
std::vector<SparseProfile> profiles_from_counts(const CountMatrix& m,
                                                const std::vector<Label>* labels = nullptr);

// Profile corpus files: "gradcell-profiles 1" header, a "count genes"
// line, then one "label k positions... values..." line per cell with
// values printed to full double precision.
void write_profiles(const std::string& path, const std::vector<SparseProfile>& profiles,
                    std::int64_t n_genes);
std::pair<std::vector<SparseProfile>, std::int64_t> read_profiles(const std::string& path);

void write_binspec(const std::string& path, const BinSpec& spec);
BinSpec read_binspec(const std::string& path);

// Deterministic synthetic data for demos and smoke tests.
CountMatrix synth_counts(std::int64_t n_cells, std::int64_t n_genes, double density,
                         std::uint64_t seed);
std::vector<Label> synth_labels(std::int64_t n_cells, std::uint64_t seed);
ad::Tensor synth_gene_embeddings(std::int64_t n_genes, std::int64_t dim, std::uint64_t seed);

}  // namespace gradcell::pre
