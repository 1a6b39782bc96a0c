#include "gradcell/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "gradcell/errors.hpp"
#include "gradcell/rng.hpp"

namespace gradcell::pre {

using gradcell::ad::RngStream;
using gradcell::ad::Tensor;

void BinSpec::validate() const {
    if (edges.empty()) throw ConfigError("bin spec: at least one edge required");
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (!(edges[i] > edges[i - 1])) throw ConfigError("bin spec: edges must be strictly increasing");
    if (n_bins() + 3 != n_tokens)
        throw ConfigError("bin spec: bins plus mask/cls/pad specials must equal the token count");
}

std::vector<double> normalize(const std::vector<std::int64_t>& counts) {
    std::int64_t total = 0;
    for (std::int64_t c : counts) {
        if (c < 0) throw UsageError("normalize: counts must be non-negative");
        total += c;
    }
    if (total == 0) throw EmptyCellError("normalize: cell has no transcripts");
    std::vector<double> out(counts.size(), 0.0);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] == 0) continue;  // zeros stay exactly zero
        // ratio form: scaling every count by the same integer leaves the
        // rational n_k/total unchanged, so the rounded double is identical
        const double ratio = static_cast<double>(counts[i]) / static_cast<double>(total);
        out[i] = std::log1p(10000.0 * ratio);
    }
    return out;
}

SparseProfile sparsify(const std::vector<double>& x) {
    SparseProfile p;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] == 0.0) continue;
        if (x[i] < 0.0) throw UsageError("sparsify: normalized expressions cannot be negative");
        p.positions.push_back(static_cast<std::int64_t>(i));
        p.values.push_back(x[i]);
    }
    return p;
}

std::vector<double> densify(const SparseProfile& p, std::int64_t n_genes) {
    std::vector<double> out(static_cast<std::size_t>(n_genes), 0.0);
    for (std::size_t k = 0; k < p.positions.size(); ++k) {
        const auto pos = p.positions[k];
        if (pos < 0 || pos >= n_genes) throw UsageError("densify: position out of range");
        out[static_cast<std::size_t>(pos)] = p.values[k];
    }
    return out;
}

std::int64_t bin(double value, const BinSpec& spec) {
    if (!(value > 0.0)) throw UsageError("bin: only positive normalized values are tokenized");
    const auto it = std::upper_bound(spec.edges.begin(), spec.edges.end(), value);
    const auto idx = static_cast<std::int64_t>(it - spec.edges.begin());
    return std::min(idx, spec.n_bins() - 1);
}

SparseProfile truncate_profile(const SparseProfile& p, std::int64_t max_len) {
    if (max_len <= 0) throw UsageError("truncate_profile: cap must be positive");
    const auto len = static_cast<std::int64_t>(p.positions.size());
    if (len <= max_len) return p;

    std::vector<std::int64_t> order(static_cast<std::size_t>(len));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        if (p.values[static_cast<std::size_t>(a)] != p.values[static_cast<std::size_t>(b)])
            return p.values[static_cast<std::size_t>(a)] > p.values[static_cast<std::size_t>(b)];
        return p.positions[static_cast<std::size_t>(a)] < p.positions[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(max_len));
    std::sort(order.begin(), order.end());  // restore position order

    SparseProfile out;
    out.label = p.label;
    for (std::int64_t k : order) {
        out.positions.push_back(p.positions[static_cast<std::size_t>(k)]);
        out.values.push_back(p.values[static_cast<std::size_t>(k)]);
    }
    return out;
}

namespace {

[[noreturn]] void parse_fail(const std::string& path, std::size_t line_no, const std::string& what) {
    throw ParseError(path + ":" + std::to_string(line_no) + ": " + what);
}

std::int64_t parse_i64(const std::string& tok, const std::string& path, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(tok, &used);
        if (used != tok.size()) parse_fail(path, line_no, "trailing characters in integer '" + tok + "'");
        return static_cast<std::int64_t>(v);
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception&) {
        parse_fail(path, line_no, "expected integer, got '" + tok + "'");
    }
}

double parse_f64(const std::string& tok, const std::string& path, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) parse_fail(path, line_no, "trailing characters in number '" + tok + "'");
        return v;
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception&) {
        parse_fail(path, line_no, "expected number, got '" + tok + "'");
    }
}

std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

}  // namespace

CountMatrix ingest_count_matrix(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(path + ": cannot open");

    std::string line;
    std::size_t line_no = 0;
    // skip banner and comment lines
    do {
        if (!std::getline(in, line)) throw ParseError(path + ": missing header line");
        ++line_no;
    } while (!line.empty() && line[0] == '%');

    auto header = split_ws(line);
    if (header.size() != 3) parse_fail(path, line_no, "header must be 'cells genes nnz'");
    const auto n_cells_raw = parse_i64(header[0], path, line_no);
    const auto n_genes = parse_i64(header[1], path, line_no);
    const auto nnz = parse_i64(header[2], path, line_no);
    if (n_cells_raw <= 0 || n_genes <= 0 || nnz < 0)
        parse_fail(path, line_no, "header dimensions must be positive");

    std::vector<CountEntry> entries;
    entries.reserve(static_cast<std::size_t>(nnz));
    for (std::int64_t k = 0; k < nnz; ++k) {
        if (!std::getline(in, line)) throw ParseError(path + ": expected " + std::to_string(nnz) +
                                                      " entries, file ended after " + std::to_string(k));
        ++line_no;
        auto toks = split_ws(line);
        if (toks.size() != 3) parse_fail(path, line_no, "entry must be 'cell gene count'");
        const auto cell = parse_i64(toks[0], path, line_no);
        const auto gene = parse_i64(toks[1], path, line_no);
        const auto count = parse_i64(toks[2], path, line_no);
        if (cell < 1 || cell > n_cells_raw) parse_fail(path, line_no, "cell index out of range");
        if (gene < 1 || gene > n_genes) parse_fail(path, line_no, "gene index out of range");
        if (count < 0) parse_fail(path, line_no, "counts must be non-negative");
        if (count == 0) continue;
        entries.push_back(CountEntry{cell - 1, gene - 1, count});
    }

    std::sort(entries.begin(), entries.end(), [](const CountEntry& a, const CountEntry& b) {
        return a.cell != b.cell ? a.cell < b.cell : a.gene < b.gene;
    });
    // merge duplicate (cell, gene) coordinates by summation
    std::vector<CountEntry> merged;
    for (const auto& e : entries) {
        if (!merged.empty() && merged.back().cell == e.cell && merged.back().gene == e.gene)
            merged.back().count += e.count;
        else
            merged.push_back(e);
    }

    std::vector<char> has_data(static_cast<std::size_t>(n_cells_raw), 0);
    for (const auto& e : merged) has_data[static_cast<std::size_t>(e.cell)] = 1;

    CountMatrix m;
    m.n_genes = n_genes;
    std::vector<std::int64_t> remap(static_cast<std::size_t>(n_cells_raw), -1);
    for (std::int64_t c = 0; c < n_cells_raw; ++c) {
        if (has_data[static_cast<std::size_t>(c)]) {
            remap[static_cast<std::size_t>(c)] = m.n_cells++;
            m.original_cell_ids.push_back(c);
        } else {
            std::cerr << path << ": dropping cell " << (c + 1) << " (no transcripts)\n";
        }
    }
    if (m.n_cells == 0) throw EmptyCellError(path + ": every cell is empty");

    m.entries.reserve(merged.size());
    for (const auto& e : merged)
        m.entries.push_back(CountEntry{remap[static_cast<std::size_t>(e.cell)], e.gene, e.count});

    m.gene_ids.reserve(static_cast<std::size_t>(n_genes));
    for (std::int64_t g = 0; g < n_genes; ++g) m.gene_ids.push_back("g" + std::to_string(g + 1));
    return m;
}

void write_count_matrix(const std::string& path, const CountMatrix& m) {
    std::ofstream out(path);
    if (!out) throw UsageError(path + ": cannot write");
    out << "% cells x genes sparse counts\n";
    out << m.n_cells << " " << m.n_genes << " " << m.entries.size() << "\n";
    for (const auto& e : m.entries)
        out << (e.cell + 1) << " " << (e.gene + 1) << " " << e.count << "\n";
    if (!out) throw UsageError(path + ": write failed");
}

namespace {

constexpr std::uint32_t kEmbMagic = 0x4743454DU;  // "GCEM" little-endian bytes
constexpr std::uint32_t kEmbVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw ParseError(path + ": truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

Tensor ingest_gene_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(path + ": cannot open");
    if (get_u32(in, path) != kEmbMagic) throw ParseError(path + ": not an embedding table (bad magic)");
    if (get_u32(in, path) != kEmbVersion) throw ParseError(path + ": unsupported version");
    const auto rows = static_cast<std::int64_t>(get_u32(in, path));
    const auto cols = static_cast<std::int64_t>(get_u32(in, path));
    if (rows <= 0 || cols <= 0) throw ParseError(path + ": degenerate dimensions");

    Tensor t = Tensor::zeros({rows, cols}, ad::Dtype::f32);
    auto dst = t.data<float>();
    if (!in.read(reinterpret_cast<char*>(dst.data()),
                 static_cast<std::streamsize>(dst.size() * sizeof(float))))
        throw ParseError(path + ": truncated payload");
    char extra;
    if (in.read(&extra, 1)) throw ParseError(path + ": trailing bytes after payload");
    if (!t.all_finite()) throw ParseError(path + ": non-finite embedding values");
    return t;
}

Tensor ingest_gene_embeddings(const std::string& path, std::int64_t expect_rows,
                              std::int64_t expect_cols) {
    Tensor t = ingest_gene_embeddings(path);
    if (t.rows() != expect_rows)
        throw SchemaError(path + ": expected " + std::to_string(expect_rows) + " gene rows, found " +
                          std::to_string(t.rows()));
    if (t.cols() != expect_cols)
        throw SchemaError(path + ": embedding width " + std::to_string(t.cols()) +
                          " does not match model feature size " + std::to_string(expect_cols));
    return t;
}

void write_gene_embeddings(const std::string& path, const Tensor& table) {
    if (table.rank() != 2) throw UsageError("write_gene_embeddings: rank-2 table expected");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError(path + ": cannot write");
    put_u32(out, kEmbMagic);
    put_u32(out, kEmbVersion);
    put_u32(out, static_cast<std::uint32_t>(table.rows()));
    put_u32(out, static_cast<std::uint32_t>(table.cols()));
    Tensor f = table.astype(ad::Dtype::f32);
    auto src = f.data<float>();
    out.write(reinterpret_cast<const char*>(src.data()),
              static_cast<std::streamsize>(src.size() * sizeof(float)));
    if (!out) throw UsageError(path + ": write failed");
}

std::vector<SparseProfile> profiles_from_counts(const CountMatrix& m,
                                                const std::vector<Label>* labels) {
    if (labels && static_cast<std::int64_t>(labels->size()) != m.n_cells)
        throw UsageError("profiles_from_counts: one label per cell expected");

    std::vector<SparseProfile> out(static_cast<std::size_t>(m.n_cells));
    std::size_t i = 0;
    while (i < m.entries.size()) {
        const auto cell = m.entries[i].cell;
        std::int64_t total = 0;
        std::size_t j = i;
        while (j < m.entries.size() && m.entries[j].cell == cell) total += m.entries[j++].count;
        if (total == 0) throw EmptyCellError("profiles_from_counts: cell has no transcripts");

        auto& p = out[static_cast<std::size_t>(cell)];
        for (std::size_t k = i; k < j; ++k) {
            const double ratio =
                static_cast<double>(m.entries[k].count) / static_cast<double>(total);
            p.positions.push_back(m.entries[k].gene);
            p.values.push_back(std::log1p(10000.0 * ratio));
        }
        i = j;
    }
    for (std::size_t c = 0; c < out.size(); ++c) {
        if (out[c].positions.empty())
            throw EmptyCellError("profiles_from_counts: cell " + std::to_string(c) + " is empty");
        if (labels) out[c].label = (*labels)[c];
    }
    return out;
}

void write_profiles(const std::string& path, const std::vector<SparseProfile>& profiles,
                    std::int64_t n_genes) {
    std::ofstream out(path);
    if (!out) throw UsageError(path + ": cannot write");
    out << "gradcell-profiles 1\n";
    out << profiles.size() << " " << n_genes << "\n";
    char buf[64];
    for (const auto& p : profiles) {
        if (p.positions.size() != p.values.size())
            throw UsageError("write_profiles: positions and values disagree in length");
        out << static_cast<int>(p.label) << " " << p.positions.size();
        for (auto pos : p.positions) out << " " << pos;
        for (double v : p.values) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            out << " " << buf;
        }
        out << "\n";
    }
    if (!out) throw UsageError(path + ": write failed");
}

std::pair<std::vector<SparseProfile>, std::int64_t> read_profiles(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(path + ": cannot open");
    std::string line;
    std::size_t line_no = 0;

    if (!std::getline(in, line)) throw ParseError(path + ": empty file");
    ++line_no;
    if (line != "gradcell-profiles 1") parse_fail(path, line_no, "unrecognized profile header");

    if (!std::getline(in, line)) throw ParseError(path + ": missing dimensions line");
    ++line_no;
    auto dims = split_ws(line);
    if (dims.size() != 2) parse_fail(path, line_no, "expected 'count genes'");
    const auto n_profiles = parse_i64(dims[0], path, line_no);
    const auto n_genes = parse_i64(dims[1], path, line_no);
    if (n_profiles < 0 || n_genes <= 0) parse_fail(path, line_no, "bad dimensions");

    std::vector<SparseProfile> profiles;
    profiles.reserve(static_cast<std::size_t>(n_profiles));
    for (std::int64_t r = 0; r < n_profiles; ++r) {
        if (!std::getline(in, line)) throw ParseError(path + ": file ends before profile " +
                                                      std::to_string(r + 1));
        ++line_no;
        auto toks = split_ws(line);
        if (toks.size() < 2) parse_fail(path, line_no, "profile line too short");
        SparseProfile p;
        const auto lab = parse_i64(toks[0], path, line_no);
        if (lab != 0 && lab != 1 && lab != -1) parse_fail(path, line_no, "label must be 0, 1 or -1");
        p.label = static_cast<Label>(lab);
        const auto k = parse_i64(toks[1], path, line_no);
        if (k <= 0) parse_fail(path, line_no, "profile must have at least one position");
        if (static_cast<std::int64_t>(toks.size()) != 2 + 2 * k)
            parse_fail(path, line_no, "expected " + std::to_string(2 + 2 * k) + " fields");
        for (std::int64_t i = 0; i < k; ++i) {
            const auto pos = parse_i64(toks[static_cast<std::size_t>(2 + i)], path, line_no);
            if (pos < 0 || pos >= n_genes) parse_fail(path, line_no, "position out of range");
            if (!p.positions.empty() && pos <= p.positions.back())
                parse_fail(path, line_no, "positions must be strictly increasing");
            p.positions.push_back(pos);
        }
        for (std::int64_t i = 0; i < k; ++i) {
            const double v = parse_f64(toks[static_cast<std::size_t>(2 + k + i)], path, line_no);
            if (!(v > 0.0) || !std::isfinite(v))
                parse_fail(path, line_no, "expression values must be positive and finite");
            p.values.push_back(v);
        }
        profiles.push_back(std::move(p));
    }
    return {std::move(profiles), n_genes};
}

void write_binspec(const std::string& path, const BinSpec& spec) {
    spec.validate();
    std::ofstream out(path);
    if (!out) throw UsageError(path + ": cannot write");
    out << "gradcell-bins 1\n";
    out << "n_tokens " << spec.n_tokens << "\n";
    out << "edges";
    char buf[64];
    for (double e : spec.edges) {
        std::snprintf(buf, sizeof(buf), "%.17g", e);
        out << " " << buf;
    }
    out << "\n";
    if (!out) throw UsageError(path + ": write failed");
}

BinSpec read_binspec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(path + ": cannot open");
    std::string line;
    if (!std::getline(in, line) || line != "gradcell-bins 1")
        throw ParseError(path + ":1: unrecognized bin header");

    BinSpec spec;
    spec.edges.clear();
    if (!std::getline(in, line)) throw ParseError(path + ": missing n_tokens line");
    auto t1 = split_ws(line);
    if (t1.size() != 2 || t1[0] != "n_tokens") parse_fail(path, 2, "expected 'n_tokens <count>'");
    spec.n_tokens = parse_i64(t1[1], path, 2);

    if (!std::getline(in, line)) throw ParseError(path + ": missing edges line");
    auto t2 = split_ws(line);
    if (t2.size() < 2 || t2[0] != "edges") parse_fail(path, 3, "expected 'edges <e1> <e2> ...'");
    for (std::size_t i = 1; i < t2.size(); ++i) spec.edges.push_back(parse_f64(t2[i], path, 3));

    spec.validate();
    return spec;
}

CountMatrix synth_counts(std::int64_t n_cells, std::int64_t n_genes, double density,
                         std::uint64_t seed) {
    if (n_cells <= 0 || n_genes <= 0) throw UsageError("synth_counts: dimensions must be positive");
    if (!(density > 0.0) || density > 1.0) throw UsageError("synth_counts: density must be in (0, 1]");
    CountMatrix m;
    m.n_cells = n_cells;
    m.n_genes = n_genes;
    for (std::int64_t c = 0; c < n_cells; ++c) {
        RngStream r{seed, ad::substream(seed, ad::stream_tag::data, static_cast<std::uint64_t>(c)), 0};
        bool any = false;
        for (std::int64_t g = 0; g < n_genes; ++g) {
            if (r.uniform() >= density) continue;
            // heavy-tailed counts, mostly small with occasional spikes
            const double u = r.uniform();
            const auto count = static_cast<std::int64_t>(1.0 + std::floor(std::pow(u, -0.6)));
            m.entries.push_back(CountEntry{c, g, std::min<std::int64_t>(count, 5000)});
            any = true;
        }
        if (!any) {
            const auto g = static_cast<std::int64_t>(r.uniform() * static_cast<double>(n_genes));
            m.entries.push_back(CountEntry{c, std::min(g, n_genes - 1), 1});
        }
        m.original_cell_ids.push_back(c);
    }
    m.gene_ids.reserve(static_cast<std::size_t>(n_genes));
    for (std::int64_t g = 0; g < n_genes; ++g) m.gene_ids.push_back("g" + std::to_string(g + 1));
    return m;
}

std::vector<Label> synth_labels(std::int64_t n_cells, std::uint64_t seed) {
    RngStream r{seed, ad::substream(seed, ad::stream_tag::data, 0x1AB), 0};
    std::vector<Label> out;
    out.reserve(static_cast<std::size_t>(n_cells));
    for (std::int64_t c = 0; c < n_cells; ++c)
        out.push_back(r.uniform() < 0.5 ? Label::normal : Label::cancer);
    return out;
}

ad::Tensor synth_gene_embeddings(std::int64_t n_genes, std::int64_t dim, std::uint64_t seed) {
    RngStream r{seed, ad::substream(seed, ad::stream_tag::data, 0xE), 0};
    Tensor t = Tensor::zeros({n_genes, dim}, ad::Dtype::f32);
    auto d = t.data<float>();
    for (auto& v : d) v = static_cast<float>(0.05 * r.normal());
    return t;
}

}  // namespace gradcell::pre
