#include "gradcell/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "gradcell/errors.hpp"

namespace gradcell::ckpt {

using ad::Dtype;
using ad::Shape;
using ad::Tensor;

namespace {

constexpr std::uint32_t kMagic = 0x4B434347U;  // "GCCK"
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v & 0xFFFFFFFFULL));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(out, bits);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw ParseError(path + ": truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
    const std::uint64_t lo = get_u32(in, path);
    const std::uint64_t hi = get_u32(in, path);
    return lo | (hi << 32);
}

double get_f64(std::istream& in, const std::string& path) {
    const std::uint64_t bits = get_u64(in, path);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

void put_config(std::ostream& out, const enc::EncoderConfig& c) {
    put_u32(out, static_cast<std::uint32_t>(c.feature_size));
    put_u32(out, static_cast<std::uint32_t>(c.n_layers));
    put_u32(out, static_cast<std::uint32_t>(c.n_heads));
    put_u32(out, static_cast<std::uint32_t>(c.max_seq_len));
    put_f64(out, c.dropout_p);
    put_u32(out, static_cast<std::uint32_t>(c.n_random_features));
    put_u32(out, c.attention_mode == enc::AttentionMode::exact ? 1U : 0U);
    put_u32(out, static_cast<std::uint32_t>(c.exact_attention_cap));
    put_u32(out, static_cast<std::uint32_t>(c.n_genes));
    put_u32(out, static_cast<std::uint32_t>(c.n_tokens));
    put_u32(out, static_cast<std::uint32_t>(c.proj_dim));
    put_u32(out, c.favor_redraw ? 1U : 0U);
}

enc::EncoderConfig get_config(std::istream& in, const std::string& path) {
    enc::EncoderConfig c;
    c.feature_size = get_u32(in, path);
    c.n_layers = get_u32(in, path);
    c.n_heads = get_u32(in, path);
    c.max_seq_len = get_u32(in, path);
    c.dropout_p = get_f64(in, path);
    c.n_random_features = get_u32(in, path);
    c.attention_mode = get_u32(in, path) == 1U ? enc::AttentionMode::exact
                                               : enc::AttentionMode::favor_plus;
    c.exact_attention_cap = get_u32(in, path);
    c.n_genes = get_u32(in, path);
    c.n_tokens = get_u32(in, path);
    c.proj_dim = get_u32(in, path);
    c.favor_redraw = get_u32(in, path) == 1U;
    return c;
}

void put_blob(std::ostream& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = t.shape();
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    Tensor f = t.astype(Dtype::f32);
    auto data = f.data<float>();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
}

std::pair<std::string, Tensor> get_blob(std::istream& in, const std::string& path) {
    const auto name_len = get_u32(in, path);
    if (name_len == 0 || name_len > 4096) throw ParseError(path + ": implausible blob name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw ParseError(path + ": truncated blob name");
    const auto rank = get_u32(in, path);
    if (rank > 2) throw SchemaError(path + ": blob '" + name + "' has unsupported rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i)
        shape.push_back(static_cast<std::int64_t>(get_u32(in, path)));
    Tensor t = Tensor::zeros(shape, Dtype::f32);
    auto data = t.data<float>();
    if (!in.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(float))))
        throw ParseError(path + ": truncated payload for blob '" + name + "'");
    return {std::move(name), std::move(t)};
}

}  // namespace

void save_checkpoint(const std::string& path, const enc::EncoderConfig& config, std::int64_t step,
                     const std::vector<ad::Parameter*>& params,
                     const std::map<std::string, Tensor>& extra) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError(path + ": cannot write");
    put_u32(out, kMagic);
    put_u32(out, kVersion);
    put_config(out, config);
    put_u64(out, static_cast<std::uint64_t>(step));
    put_u32(out, static_cast<std::uint32_t>(params.size() + extra.size()));
    for (const ad::Parameter* p : params) put_blob(out, p->name, p->value);
    for (const auto& [name, t] : extra) put_blob(out, name, t);
    if (!out) throw UsageError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(path + ": cannot open");
    if (get_u32(in, path) != kMagic) throw ParseError(path + ": not a checkpoint (bad magic)");
    if (get_u32(in, path) != kVersion) throw ParseError(path + ": unsupported checkpoint version");
    Checkpoint c;
    c.config = get_config(in, path);
    c.step = static_cast<std::int64_t>(get_u64(in, path));
    const auto n = get_u32(in, path);
    for (std::uint32_t i = 0; i < n; ++i) {
        auto [name, t] = get_blob(in, path);
        if (!c.blobs.emplace(std::move(name), std::move(t)).second)
            throw SchemaError(path + ": duplicate blob name");
    }
    char extra_byte;
    if (in.read(&extra_byte, 1)) throw ParseError(path + ": trailing bytes");
    return c;
}

void load_params(const Checkpoint& c, const std::vector<ad::Parameter*>& params) {
    for (ad::Parameter* p : params) {
        auto it = c.blobs.find(p->name);
        if (it == c.blobs.end()) throw SchemaError("checkpoint is missing parameter " + p->name);
        const Tensor& src = it->second;
        if (src.shape() != p->value.shape())
            throw SchemaError("checkpoint shape mismatch for " + p->name);
        p->value = src.astype(p->value.dtype());
        p->grad = Tensor::zeros(p->value.shape(), p->value.dtype());
    }
}

}  // namespace gradcell::ckpt
