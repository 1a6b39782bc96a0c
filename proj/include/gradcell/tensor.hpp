#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gradcell/errors.hpp"

namespace gradcell::ad {

enum class Dtype : std::uint8_t { f32, f64 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::f64 ? "f64" : "f32"; }
inline std::size_t dtype_size(Dtype dt) { return dt == Dtype::f64 ? 8 : 4; }

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

// Dense row-major tensor, rank 0..2 in practice. Element type is a runtime
// choice: f64 in verification mode, f32 allowed in training mode.
class Tensor {
public:
    Tensor() : shape_{0} {}

    static Tensor zeros(Shape shape, Dtype dt) {
        Tensor t;
        t.shape_ = std::move(shape);
        const auto n = static_cast<std::size_t>(shape_numel(t.shape_));
        if (dt == Dtype::f64)
            t.data_ = std::vector<double>(n, 0.0);
        else
            t.data_ = std::vector<float>(n, 0.0f);
        return t;
    }

    static Tensor scalar(double v, Dtype dt) {
        Tensor t = zeros({}, dt);
        t.set(0, v);
        return t;
    }

    static Tensor from(std::vector<double> vals, Shape shape, Dtype dt = Dtype::f64) {
        if (shape_numel(shape) != static_cast<std::int64_t>(vals.size()))
            throw UsageError("Tensor::from: shape does not match value count");
        Tensor t;
        t.shape_ = std::move(shape);
        if (dt == Dtype::f64) {
            t.data_ = std::move(vals);
        } else {
            std::vector<float> f(vals.size());
            for (std::size_t i = 0; i < vals.size(); ++i) f[i] = static_cast<float>(vals[i]);
            t.data_ = std::move(f);
        }
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return shape_numel(shape_); }
    std::size_t bytes() const { return static_cast<std::size_t>(numel()) * dtype_size(dtype()); }

    std::int64_t rows() const {
        if (rank() != 2) throw UsageError("rows(): tensor is not rank-2");
        return shape_[0];
    }
    std::int64_t cols() const {
        if (rank() != 2) throw UsageError("cols(): tensor is not rank-2");
        return shape_[1];
    }

    Dtype dtype() const {
        return std::holds_alternative<std::vector<double>>(data_) ? Dtype::f64 : Dtype::f32;
    }

    template <typename T>
    std::span<T> data() {
        return std::span<T>(std::get<std::vector<T>>(data_));
    }
    template <typename T>
    std::span<const T> data() const {
        return std::span<const T>(std::get<std::vector<T>>(data_));
    }

    double at(std::int64_t i) const {
        return dtype() == Dtype::f64 ? data<double>()[static_cast<std::size_t>(i)]
                                     : static_cast<double>(data<float>()[static_cast<std::size_t>(i)]);
    }
    double at(std::int64_t r, std::int64_t c) const { return at(r * cols() + c); }

    void set(std::int64_t i, double v) {
        if (dtype() == Dtype::f64)
            data<double>()[static_cast<std::size_t>(i)] = v;
        else
            data<float>()[static_cast<std::size_t>(i)] = static_cast<float>(v);
    }
    void set(std::int64_t r, std::int64_t c, double v) { set(r * cols() + c, v); }

    void zero() {
        if (dtype() == Dtype::f64)
            std::fill(std::get<std::vector<double>>(data_).begin(),
                      std::get<std::vector<double>>(data_).end(), 0.0);
        else
            std::fill(std::get<std::vector<float>>(data_).begin(),
                      std::get<std::vector<float>>(data_).end(), 0.0f);
    }

    bool all_finite() const {
        if (dtype() == Dtype::f64) {
            for (double v : data<double>())
                if (!std::isfinite(v)) return false;
        } else {
            for (float v : data<float>())
                if (!std::isfinite(v)) return false;
        }
        return true;
    }

    Tensor astype(Dtype dt) const {
        if (dt == dtype()) return *this;
        Tensor t = zeros(shape_, dt);
        const auto n = static_cast<std::int64_t>(numel());
        for (std::int64_t i = 0; i < n; ++i) t.set(i, at(i));
        return t;
    }

    std::vector<double> to_doubles() const {
        std::vector<double> out(static_cast<std::size_t>(numel()));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(static_cast<std::int64_t>(i));
        return out;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel()) throw UsageError("reshaped: element count mismatch");
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    const void* raw() const {
        return dtype() == Dtype::f64 ? static_cast<const void*>(data<double>().data())
                                     : static_cast<const void*>(data<float>().data());
    }

private:
    Shape shape_;
    std::variant<std::vector<double>, std::vector<float>> data_ = std::vector<double>{};
};

// Runs f with a value of the tensor's element type as a tag:
//   dispatch(t.dtype(), [&](auto tag) { using T = decltype(tag); ... });
template <typename F>
decltype(auto) dispatch(Dtype dt, F&& f) {
    return dt == Dtype::f64 ? f(double{}) : f(float{});
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

}  // namespace gradcell::ad
