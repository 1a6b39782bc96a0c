// AVX2/FMA variants of the dense kernels. This translation unit is compiled
// with -mavx2 -mfma; callers must gate on runtime CPU support (the dispatch
// in kernels.cpp does).

#include "gradcell/kernels.hpp"

#ifdef __AVX2__

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace gradcell::kernels {
namespace {

// ---- double, 4 lanes ----

void add_d(const double* a, const double* b, double* o, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(o + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) o[i] = a[i] + b[i];
}
void sub_d(const double* a, const double* b, double* o, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(o + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) o[i] = a[i] - b[i];
}
void mul_d(const double* a, const double* b, double* o, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(o + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) o[i] = a[i] * b[i];
}
void div_d(const double* a, const double* b, double* o, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(o + i, _mm256_div_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) o[i] = a[i] / b[i];
}
void scale_d(const double* a, double c, double* o, std::size_t n) {
    const __m256d vc = _mm256_set1_pd(c);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(o + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vc));
    for (; i < n; ++i) o[i] = a[i] * c;
}
void axpy_d(double c, const double* x, double* y, std::size_t n) {
    const __m256d vc = _mm256_set1_pd(c);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(vc, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] = std::fma(c, x[i], y[i]);
}
double hsum_d(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}
double dot_d(const double* a, const double* b, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
    double r = hsum_d(acc);
    for (; i < n; ++i) r = std::fma(a[i], b[i], r);
    return r;
}
double sum_d(const double* a, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
    double r = hsum_d(acc);
    for (; i < n; ++i) r += a[i];
    return r;
}
double max_d(const double* a, std::size_t n) {
    std::size_t i = 0;
    double m = a[0];
    if (n >= 4) {
        __m256d vm = _mm256_loadu_pd(a);
        for (i = 4; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(a + i));
        __m128d lo = _mm_max_pd(_mm256_castpd256_pd128(vm), _mm256_extractf128_pd(vm, 1));
        m = _mm_cvtsd_f64(_mm_max_sd(lo, _mm_unpackhi_pd(lo, lo)));
    } else {
        i = 1;
    }
    for (; i < n; ++i) m = std::max(m, a[i]);
    return m;
}
void relu_d(const double* a, double* o, std::size_t n) {
    const __m256d z = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(o + i, _mm256_max_pd(z, _mm256_loadu_pd(a + i)));
    for (; i < n; ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
}

// ---- float, 8 lanes ----

void add_f(const float* a, const float* b, float* o, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) o[i] = a[i] + b[i];
}
void sub_f(const float* a, const float* b, float* o, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) o[i] = a[i] - b[i];
}
void mul_f(const float* a, const float* b, float* o, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) o[i] = a[i] * b[i];
}
void div_f(const float* a, const float* b, float* o, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_div_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) o[i] = a[i] / b[i];
}
void scale_f(const float* a, float c, float* o, std::size_t n) {
    const __m256 vc = _mm256_set1_ps(c);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), vc));
    for (; i < n; ++i) o[i] = a[i] * c;
}
void axpy_f(float c, const float* x, float* y, std::size_t n) {
    const __m256 vc = _mm256_set1_ps(c);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(vc, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] = std::fma(c, x[i], y[i]);
}
float hsum_f(__m256 v) {
    __m128 lo = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
    return _mm_cvtss_f32(lo);
}
float dot_f(const float* a, const float* b, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
    float r = hsum_f(acc);
    for (; i < n; ++i) r = std::fma(a[i], b[i], r);
    return r;
}
float sum_f(const float* a, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(a + i));
    float r = hsum_f(acc);
    for (; i < n; ++i) r += a[i];
    return r;
}
float max_f(const float* a, std::size_t n) {
    std::size_t i = 0;
    float m = a[0];
    if (n >= 8) {
        __m256 vm = _mm256_loadu_ps(a);
        for (i = 8; i + 8 <= n; i += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(a + i));
        __m128 lo = _mm_max_ps(_mm256_castps256_ps128(vm), _mm256_extractf128_ps(vm, 1));
        lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
        lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
        m = _mm_cvtss_f32(lo);
    } else {
        i = 1;
    }
    for (; i < n; ++i) m = std::max(m, a[i]);
    return m;
}
void relu_f(const float* a, float* o, std::size_t n) {
    const __m256 z = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_max_ps(z, _mm256_loadu_ps(a + i)));
    for (; i < n; ++i) o[i] = a[i] > 0.0f ? a[i] : 0.0f;
}

}  // namespace

const Ops<float>* avx2_ops_f32() {
    static constexpr Ops<float> t{add_f, sub_f, mul_f, div_f, scale_f,
                                  axpy_f, dot_f, sum_f, max_f, relu_f};
    return &t;
}
const Ops<double>* avx2_ops_f64() {
    static constexpr Ops<double> t{add_d, sub_d, mul_d, div_d, scale_d,
                                   axpy_d, dot_d, sum_d, max_d, relu_d};
    return &t;
}

}  // namespace gradcell::kernels

#else

namespace gradcell::kernels {
const Ops<float>* avx2_ops_f32() { return nullptr; }
const Ops<double>* avx2_ops_f64() { return nullptr; }
}  // namespace gradcell::kernels

#endif
