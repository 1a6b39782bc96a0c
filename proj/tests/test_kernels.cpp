#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "gradcell/kernels.hpp"
#include "gradcell/rng.hpp"

using namespace gradcell::kernels;
using gradcell::ad::RngStream;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::uint64_t stream, double lo = -2.0, double hi = 2.0) {
    RngStream r{99, stream, 0};
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * r.uniform());
    return v;
}

// Sizes straddle the vector width so remainder lanes get exercised.
const std::size_t kSizes[] = {1, 3, 4, 7, 8, 9, 16, 31, 64, 257};

template <typename T>
void check_elementwise_identical() {
    const Ops<T>* sc = ops_for<T>(Backend::scalar);
    const Ops<T>* wide = ops_for<T>(Backend::avx2);
    REQUIRE(sc != nullptr);
    if (wide == nullptr) return;  // host lacks the ISA; dispatch path covers it

    for (std::size_t n : kSizes) {
        auto a = random_vec<T>(n, n * 2 + 1);
        auto b = random_vec<T>(n, n * 2 + 2, 0.5, 3.0);  // away from zero for div
        std::vector<T> r1(n), r2(n);

        sc->add(a.data(), b.data(), r1.data(), n);
        wide->add(a.data(), b.data(), r2.data(), n);
        CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(T)) == 0);

        sc->sub(a.data(), b.data(), r1.data(), n);
        wide->sub(a.data(), b.data(), r2.data(), n);
        CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(T)) == 0);

        sc->mul(a.data(), b.data(), r1.data(), n);
        wide->mul(a.data(), b.data(), r2.data(), n);
        CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(T)) == 0);

        sc->div(a.data(), b.data(), r1.data(), n);
        wide->div(a.data(), b.data(), r2.data(), n);
        CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(T)) == 0);

        sc->scale(a.data(), static_cast<T>(1.7), r1.data(), n);
        wide->scale(a.data(), static_cast<T>(1.7), r2.data(), n);
        CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(T)) == 0);

        sc->relu(a.data(), r1.data(), n);
        wide->relu(a.data(), r2.data(), n);
        CHECK(std::memcmp(r1.data(), r2.data(), n * sizeof(T)) == 0);
    }
}

template <typename T>
void check_reductions_close(double tol) {
    const Ops<T>* sc = ops_for<T>(Backend::scalar);
    const Ops<T>* wide = ops_for<T>(Backend::avx2);
    REQUIRE(sc != nullptr);
    if (wide == nullptr) return;

    for (std::size_t n : kSizes) {
        auto a = random_vec<T>(n, n * 3 + 1);
        auto b = random_vec<T>(n, n * 3 + 2);

        const double d1 = static_cast<double>(sc->dot(a.data(), b.data(), n));
        const double d2 = static_cast<double>(wide->dot(a.data(), b.data(), n));
        CHECK(d1 == doctest::Approx(d2).epsilon(tol));

        const double s1 = static_cast<double>(sc->sum(a.data(), n));
        const double s2 = static_cast<double>(wide->sum(a.data(), n));
        CHECK(s1 == doctest::Approx(s2).epsilon(tol));

        // max picks one element; no rounding is involved
        CHECK(sc->max(a.data(), n) == wide->max(a.data(), n));

        auto y1 = a;
        auto y2 = a;
        sc->axpy(static_cast<T>(0.37), b.data(), y1.data(), n);
        wide->axpy(static_cast<T>(0.37), b.data(), y2.data(), n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(static_cast<double>(y1[i]) ==
                  doctest::Approx(static_cast<double>(y2[i])).epsilon(tol));
    }
}

template <typename T>
void naive_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a,
                const T* b, double* c) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) {
                const double av = static_cast<double>(ta ? a[l * m + i] : a[i * k + l]);
                const double bv = static_cast<double>(tb ? b[j * k + l] : b[l * n + j]);
                acc += av * bv;
            }
            c[i * n + j] = acc;
        }
}

}  // namespace

TEST_CASE("a baseline implementation always exists") {
    CHECK(backend_available(Backend::scalar));
    CHECK(ops_for<float>(Backend::scalar) != nullptr);
    CHECK(ops_for<double>(Backend::scalar) != nullptr);
    CHECK(backend_name(active_backend()) != nullptr);
}

TEST_CASE("scalar oracle spot checks") {
    const auto& o = *ops_for<double>(Backend::scalar);
    const double a[] = {1.0, -2.0, 3.0};
    const double b[] = {4.0, 5.0, -6.0};
    double r[3];

    o.add(a, b, r, 3);
    CHECK(r[0] == 5.0);
    CHECK(r[1] == 3.0);
    CHECK(r[2] == -3.0);

    CHECK(o.dot(a, b, 3) == doctest::Approx(4.0 - 10.0 - 18.0));
    CHECK(o.sum(b, 3) == doctest::Approx(3.0));
    CHECK(o.max(a, 3) == 3.0);

    o.relu(a, r, 3);
    CHECK(r[0] == 1.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 3.0);

    double y[] = {1.0, 1.0, 1.0};
    o.axpy(2.0, a, y, 3);
    CHECK(y[0] == 3.0);
    CHECK(y[1] == -3.0);
    CHECK(y[2] == 7.0);
}

TEST_CASE("wide and scalar elementwise kernels agree bit for bit") {
    check_elementwise_identical<float>();
    check_elementwise_identical<double>();
}

TEST_CASE("wide and scalar reductions agree within tolerance") {
    check_reductions_close<float>(1e-5);
    check_reductions_close<double>(1e-12);
}

TEST_CASE("gemm matches a naive triple loop in every transpose form") {
    struct Dim {
        std::size_t m, n, k;
    };
    for (Dim d : {Dim{1, 1, 1}, Dim{2, 3, 4}, Dim{5, 5, 5}, Dim{7, 3, 9}, Dim{16, 16, 16},
                  Dim{13, 31, 8}}) {
        for (int form = 0; form < 3; ++form) {
            const bool ta = form == 2;
            const bool tb = form == 1;
            const std::size_t a_elems = d.m * d.k;
            const std::size_t b_elems = d.k * d.n;
            auto a = random_vec<double>(a_elems, 1000 + d.m * 7 + form);
            auto b = random_vec<double>(b_elems, 2000 + d.n * 7 + form);

            std::vector<double> want(d.m * d.n);
            naive_gemm(ta, tb, d.m, d.n, d.k, a.data(), b.data(), want.data());

            std::vector<double> got(d.m * d.n, 0.0);
            gemm<double>(ta, tb, d.m, d.n, d.k, a.data(), b.data(), got.data(), false);
            for (std::size_t i = 0; i < want.size(); ++i)
                CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));

            // accumulate=true adds on top of existing contents
            std::vector<double> acc(d.m * d.n, 1.0);
            gemm<double>(ta, tb, d.m, d.n, d.k, a.data(), b.data(), acc.data(), true);
            for (std::size_t i = 0; i < want.size(); ++i)
                CHECK(acc[i] == doctest::Approx(want[i] + 1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("backend can be forced to scalar") {
    const Backend before = active_backend();
    set_backend(Backend::scalar);
    CHECK(active_backend() == Backend::scalar);
    const auto& o = ops<double>();
    const double a[] = {1.0, 2.0};
    const double b[] = {3.0, 4.0};
    double r[2];
    o.add(a, b, r, 2);
    CHECK(r[0] == 4.0);
    CHECK(r[1] == 6.0);
    set_backend(before);
}
