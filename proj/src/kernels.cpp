#include "gradcell/kernels.hpp"

#include <cstdlib>
#include <string>

namespace gradcell::kernels {

const Ops<float>* scalar_ops_f32();
const Ops<double>* scalar_ops_f64();
const Ops<float>* avx2_ops_f32();
const Ops<double>* avx2_ops_f64();

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend pick_initial() {
    if (const char* env = std::getenv("GRADCELL_KERNELS")) {
        std::string v(env);
        if (v == "scalar") return Backend::scalar;
        if (v == "avx2" && backend_available(Backend::avx2)) return Backend::avx2;
    }
    return backend_available(Backend::avx2) ? Backend::avx2 : Backend::scalar;
}

Backend& current() {
    static Backend b = pick_initial();
    return b;
}

}  // namespace

bool backend_available(Backend b) {
    switch (b) {
        case Backend::scalar: return true;
        case Backend::avx2: return avx2_ops_f64() != nullptr && cpu_has_avx2();
    }
    return false;
}

Backend active_backend() { return current(); }

void set_backend(Backend b) {
    if (backend_available(b)) current() = b;
}

const char* backend_name(Backend b) {
    return b == Backend::avx2 ? "avx2" : "scalar";
}

template <>
const Ops<float>* ops_for<float>(Backend b) {
    return b == Backend::avx2 ? avx2_ops_f32() : scalar_ops_f32();
}
template <>
const Ops<double>* ops_for<double>(Backend b) {
    return b == Backend::avx2 ? avx2_ops_f64() : scalar_ops_f64();
}

template <>
const Ops<float>& ops<float>() {
    return *ops_for<float>(current());
}
template <>
const Ops<double>& ops<double>() {
    return *ops_for<double>(current());
}

}  // namespace gradcell::kernels
