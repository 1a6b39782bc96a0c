#include "gradcell/kernels.hpp"

#include <algorithm>
#include <cmath>

// Reference kernels. axpy and dot accumulate through std::fma so the scalar
// and AVX2 paths differ only by reduction order, not per-element rounding.

namespace gradcell::kernels {
namespace {

template <typename T>
void add_s(const T* a, const T* b, T* o, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
}
template <typename T>
void sub_s(const T* a, const T* b, T* o, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
}
template <typename T>
void mul_s(const T* a, const T* b, T* o, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
}
template <typename T>
void div_s(const T* a, const T* b, T* o, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = a[i] / b[i];
}
template <typename T>
void scale_s(const T* a, T c, T* o, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = a[i] * c;
}
template <typename T>
void axpy_s(T c, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(c, x[i], y[i]);
}
template <typename T>
T dot_s(const T* a, const T* b, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc = std::fma(a[i], b[i], acc);
    return acc;
}
template <typename T>
T sum_s(const T* a, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}
template <typename T>
T max_s(const T* a, std::size_t n) {
    T m = a[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, a[i]);
    return m;
}
template <typename T>
void relu_s(const T* a, T* o, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) o[i] = a[i] > T(0) ? a[i] : T(0);
}

template <typename T>
constexpr Ops<T> make_table() {
    return Ops<T>{add_s<T>, sub_s<T>, mul_s<T>, div_s<T>, scale_s<T>,
                  axpy_s<T>, dot_s<T>, sum_s<T>, max_s<T>, relu_s<T>};
}

}  // namespace

const Ops<float>* scalar_ops_f32() {
    static constexpr Ops<float> t = make_table<float>();
    return &t;
}
const Ops<double>* scalar_ops_f64() {
    static constexpr Ops<double> t = make_table<double>();
    return &t;
}

}  // namespace gradcell::kernels
