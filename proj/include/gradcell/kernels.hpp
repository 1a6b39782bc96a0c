#pragma once

#include <cstddef>
#include <cstring>

namespace gradcell::kernels {

enum class Backend { scalar, avx2 };

// Active backend is picked once at startup: AVX2+FMA when the CPU has it,
// scalar otherwise. GRADCELL_KERNELS=scalar|avx2 overrides.
Backend active_backend();
void set_backend(Backend b);
bool backend_available(Backend b);
const char* backend_name(Backend b);

// Dense kernel table. Scalar versions are the reference semantics; SIMD
// variants must agree elementwise exactly for the map kernels and within
// reassociation error for the reductions (tested in test_kernels).
template <typename T>
struct Ops {
    void (*add)(const T*, const T*, T*, std::size_t);
    void (*sub)(const T*, const T*, T*, std::size_t);
    void (*mul)(const T*, const T*, T*, std::size_t);
    void (*div)(const T*, const T*, T*, std::size_t);
    void (*scale)(const T*, T, T*, std::size_t);   // out = x * a
    void (*axpy)(T, const T*, T*, std::size_t);    // y += a * x (fused rounding)
    T (*dot)(const T*, const T*, std::size_t);
    T (*sum)(const T*, std::size_t);
    T (*max)(const T*, std::size_t);               // n >= 1
    void (*relu)(const T*, T*, std::size_t);
};

template <typename T>
const Ops<T>& ops();

template <typename T>
const Ops<T>* ops_for(Backend b);  // nullptr if unavailable

// Row-major gemm built on axpy/dot microkernels of the active backend.
//   trans_a=false, trans_b=false:  C[m,n] = A[m,k] * B[k,n]
//   trans_a=false, trans_b=true:   C[m,n] = A[m,k] * B[n,k]^T
//   trans_a=true,  trans_b=false:  C[m,n] = A[k,m]^T * B[k,n]
// accumulate=false zeroes C first; true adds into it.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate) {
    const Ops<T>& k_ = ops<T>();
    if (!accumulate) std::memset(c, 0, m * n * sizeof(T));
    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l)
                k_.axpy(a[i * k + l], b + l * n, c + i * n, n);
    } else if (!trans_a && trans_b) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                c[i * n + j] += k_.dot(a + i * k, b + j * k, k);
    } else if (trans_a && !trans_b) {
        for (std::size_t l = 0; l < k; ++l)
            for (std::size_t i = 0; i < m; ++i)
                k_.axpy(a[l * m + i], b + l * n, c + i * n, n);
    } else {
        // C = A^T B^T never appears in the op set.
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                T acc = 0;
                for (std::size_t l = 0; l < k; ++l) acc += a[l * m + i] * b[j * k + l];
                c[i * n + j] += acc;
            }
    }
}

}  // namespace gradcell::kernels
