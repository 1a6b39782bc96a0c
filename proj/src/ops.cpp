#include "gradcell/ops.hpp"

#include <cmath>
#include <cstring>
#include <initializer_list>

#include "gradcell/errors.hpp"
#include "gradcell/kernels.hpp"

namespace gradcell::ad {

namespace {

void require(bool ok, const char* op, const char* what) {
    if (!ok) throw UsageError(std::string(op) + ": " + what);
}

void check2(const Value& a, const char* op) { require(a.tensor().rank() == 2, op, "rank-2 tensor expected"); }

void check_match(const Value& a, const Value& b, const char* op) {
    require(a.dtype() == b.dtype(), op, "dtype mismatch");
    require(a.shape() == b.shape(), op, "shape mismatch");
}

// Backward flows to the tape that owns a grad-requiring input; mixing two
// recording tapes in one op is a caller bug.
Tape* pick_tape(std::initializer_list<const Value*> ins, const char* op) {
    Tape* t = nullptr;
    for (const Value* v : ins) {
        if (v->needs_grad()) {
            if (t != nullptr && t != v->tape) throw UsageError(std::string(op) + ": inputs from different tapes");
            t = v->tape;
        }
    }
    if (t == nullptr)
        for (const Value* v : ins)
            if (v->tape != nullptr) return v->tape;
    require(t != nullptr, op, "inputs carry no tape");
    return t;
}

using Saved = std::initializer_list<std::shared_ptr<Tensor>>;

Value emit(Tape* tp, std::shared_ptr<Tensor> out, const char* op, bool want_grad, Saved saved,
           BackwardFn fn) {
    if (!out->all_finite()) throw NumericalError(std::string(op) + ": produced non-finite values");
    if (tp->recording() && want_grad) {
        for (const auto& s : saved) tp->account(s);
        return tp->record(std::move(out), op, std::move(fn));
    }
    return Value{std::move(out), tp, -1};
}

Value emit(Tape* tp, Tensor out, const char* op, bool want_grad, Saved saved, BackwardFn fn) {
    return emit(tp, std::make_shared<Tensor>(std::move(out)), op, want_grad, saved, std::move(fn));
}

// Elementwise map computed in double, stored in the input dtype.
template <typename F>
Tensor map_unary(const Tensor& a, F f) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto y = out.data<T>();
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(f(static_cast<double>(x[i])));
    });
    return out;
}

// dA = g * f(a_i) elementwise, for unary backward rules.
template <typename F>
Tensor mul_map(const Tensor& g, const Tensor& a, F f) {
    Tensor out = Tensor::zeros(g.shape(), g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto gs = g.data<T>();
        auto as = a.data<T>();
        auto y = out.data<T>();
        for (std::size_t i = 0; i < gs.size(); ++i)
            y[i] = static_cast<T>(static_cast<double>(gs[i]) * f(static_cast<double>(as[i])));
    });
    return out;
}

Tensor ew_kernel(const Tensor& a, const Tensor& b,
                 void (*f32)(const float*, const float*, float*, std::size_t),
                 void (*f64)(const double*, const double*, double*, std::size_t)) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    const auto n = static_cast<std::size_t>(a.numel());
    if (a.dtype() == Dtype::f64)
        f64(a.data<double>().data(), b.data<double>().data(), out.data<double>().data(), n);
    else
        f32(a.data<float>().data(), b.data<float>().data(), out.data<float>().data(), n);
    return out;
}

Tensor ew_mul(const Tensor& a, const Tensor& b) {
    return ew_kernel(a, b, kernels::ops<float>().mul, kernels::ops<double>().mul);
}
Tensor ew_div(const Tensor& a, const Tensor& b) {
    return ew_kernel(a, b, kernels::ops<float>().div, kernels::ops<double>().div);
}

Tensor scaled(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::ops<T>().scale(a.data<T>().data(), static_cast<T>(s), out.data<T>().data(),
                                static_cast<std::size_t>(a.numel()));
    });
    return out;
}

Tensor row_sum_tensor(const Tensor& a) {
    const auto m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({m, 1}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        for (std::int64_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) acc += static_cast<double>(x[static_cast<std::size_t>(i * n + j)]);
            out.set(i, acc);
        }
    });
    return out;
}

Tensor col_sum_tensor(const Tensor& a) {
    const auto m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({1, n}, a.dtype());
    std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                acc[static_cast<std::size_t>(j)] += static_cast<double>(x[static_cast<std::size_t>(i * n + j)]);
    });
    for (std::int64_t j = 0; j < n; ++j) out.set(j, acc[static_cast<std::size_t>(j)]);
    return out;
}

Tensor gemm_tensor(bool ta, bool tb, const Tensor& a, const Tensor& b, const char* op) {
    const auto m = ta ? a.cols() : a.rows();
    const auto k = ta ? a.rows() : a.cols();
    const auto kb = tb ? b.cols() : b.rows();
    const auto n = tb ? b.rows() : b.cols();
    require(k == kb, op, "inner dimensions disagree");
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::gemm<T>(ta, tb, static_cast<std::size_t>(m), static_cast<std::size_t>(n),
                         static_cast<std::size_t>(k), a.data<T>().data(), b.data<T>().data(),
                         out.data<T>().data(), false);
    });
    return out;
}

}  // namespace

Value matmul(const Value& a, const Value& b, bool trans_a, bool trans_b) {
    const char* op = "matmul";
    check2(a, op);
    check2(b, op);
    require(a.dtype() == b.dtype(), op, "dtype mismatch");
    require(!(trans_a && trans_b), op, "double-transpose form not supported");
    Tape* tp = pick_tape({&a, &b}, op);

    Tensor out = gemm_tensor(trans_a, trans_b, a.tensor(), b.tensor(), op);
    const bool want = a.needs_grad() || b.needs_grad();
    auto at = a.t;
    auto bt = b.t;
    const int an = a.node, bn = b.node;
    return emit(
        tp, std::move(out), op, want, {at, bt},
        [at, bt, an, bn, trans_a, trans_b, op](const Tensor& g, Tape& tape) {
            if (!trans_a && !trans_b) {
                if (an >= 0) tape.accum_grad(an, gemm_tensor(false, true, g, *bt, op));
                if (bn >= 0) tape.accum_grad(bn, gemm_tensor(true, false, *at, g, op));
            } else if (!trans_a && trans_b) {
                if (an >= 0) tape.accum_grad(an, gemm_tensor(false, false, g, *bt, op));
                if (bn >= 0) tape.accum_grad(bn, gemm_tensor(true, false, g, *at, op));
            } else {  // trans_a && !trans_b
                if (an >= 0) tape.accum_grad(an, gemm_tensor(false, true, *bt, g, op));
                if (bn >= 0) tape.accum_grad(bn, gemm_tensor(false, false, *at, g, op));
            }
        });
}

Value add(const Value& a, const Value& b) {
    const char* op = "add";
    check_match(a, b, op);
    Tape* tp = pick_tape({&a, &b}, op);
    Tensor out = ew_kernel(a.tensor(), b.tensor(), kernels::ops<float>().add, kernels::ops<double>().add);
    const int an = a.node, bn = b.node;
    return emit(tp, std::move(out), op, a.needs_grad() || b.needs_grad(), {},
                [an, bn](const Tensor& g, Tape& tape) {
                    tape.accum_grad(an, g);
                    tape.accum_grad(bn, g);
                });
}

Value sub(const Value& a, const Value& b) {
    const char* op = "sub";
    check_match(a, b, op);
    Tape* tp = pick_tape({&a, &b}, op);
    Tensor out = ew_kernel(a.tensor(), b.tensor(), kernels::ops<float>().sub, kernels::ops<double>().sub);
    const int an = a.node, bn = b.node;
    return emit(tp, std::move(out), op, a.needs_grad() || b.needs_grad(), {},
                [an, bn](const Tensor& g, Tape& tape) {
                    tape.accum_grad(an, g);
                    tape.accum_grad(bn, g, -1.0);
                });
}

Value mul(const Value& a, const Value& b) {
    const char* op = "mul";
    check_match(a, b, op);
    Tape* tp = pick_tape({&a, &b}, op);
    Tensor out = ew_mul(a.tensor(), b.tensor());
    auto at = a.t;
    auto bt = b.t;
    const int an = a.node, bn = b.node;
    return emit(tp, std::move(out), op, a.needs_grad() || b.needs_grad(), {at, bt},
                [at, bt, an, bn](const Tensor& g, Tape& tape) {
                    if (an >= 0) tape.accum_grad(an, ew_mul(g, *bt));
                    if (bn >= 0) tape.accum_grad(bn, ew_mul(g, *at));
                });
}

Value div(const Value& a, const Value& b) {
    const char* op = "div";
    check_match(a, b, op);
    Tape* tp = pick_tape({&a, &b}, op);
    auto out_p = std::make_shared<Tensor>(ew_div(a.tensor(), b.tensor()));
    auto bt = b.t;
    const int an = a.node, bn = b.node;
    return emit(tp, out_p, op, a.needs_grad() || b.needs_grad(), {out_p, bt},
                [out_p, bt, an, bn](const Tensor& g, Tape& tape) {
                    if (an >= 0) tape.accum_grad(an, ew_div(g, *bt));
                    if (bn >= 0) tape.accum_grad(bn, ew_div(ew_mul(g, *out_p), *bt), -1.0);
                });
}

Value scale(const Value& a, double s) {
    Tape* tp = pick_tape({&a}, "scale");
    Tensor out = scaled(a.tensor(), s);
    const int an = a.node;
    return emit(tp, std::move(out), "scale", a.needs_grad(), {},
                [an, s](const Tensor& g, Tape& tape) { tape.accum_grad(an, g, s); });
}

Value add_scalar(const Value& a, double s) {
    Tape* tp = pick_tape({&a}, "add_scalar");
    Tensor out = map_unary(a.tensor(), [s](double x) { return x + s; });
    const int an = a.node;
    return emit(tp, std::move(out), "add_scalar", a.needs_grad(), {},
                [an](const Tensor& g, Tape& tape) { tape.accum_grad(an, g); });
}

Value add_rowvec(const Value& a, const Value& v) {
    const char* op = "add_rowvec";
    check2(a, op);
    check2(v, op);
    require(v.rows() == 1 && v.cols() == a.cols(), op, "vector must be [1 x cols(a)]");
    require(a.dtype() == v.dtype(), op, "dtype mismatch");
    Tape* tp = pick_tape({&a, &v}, op);
    const auto m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        auto w = v.tensor().data<T>();
        auto y = out.data<T>();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                y[static_cast<std::size_t>(i * n + j)] =
                    x[static_cast<std::size_t>(i * n + j)] + w[static_cast<std::size_t>(j)];
    });
    const int an = a.node, vn = v.node;
    return emit(tp, std::move(out), op, a.needs_grad() || v.needs_grad(), {},
                [an, vn](const Tensor& g, Tape& tape) {
                    tape.accum_grad(an, g);
                    if (vn >= 0) tape.accum_grad(vn, col_sum_tensor(g));
                });
}

namespace {

// Shared body for ops that combine [m x n] with a [m x 1] column vector.
template <typename F>
Tensor colvec_combine(const Tensor& a, const Tensor& v, F f) {
    const auto m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.data<T>();
        auto w = v.data<T>();
        auto y = out.data<T>();
        for (std::int64_t i = 0; i < m; ++i) {
            const double vi = static_cast<double>(w[static_cast<std::size_t>(i)]);
            for (std::int64_t j = 0; j < n; ++j)
                y[static_cast<std::size_t>(i * n + j)] =
                    static_cast<T>(f(static_cast<double>(x[static_cast<std::size_t>(i * n + j)]), vi));
        }
    });
    return out;
}

void check_colvec(const Value& a, const Value& v, const char* op) {
    check2(a, op);
    check2(v, op);
    require(v.cols() == 1 && v.rows() == a.rows(), op, "vector must be [rows(a) x 1]");
    require(a.dtype() == v.dtype(), op, "dtype mismatch");
}

}  // namespace

Value sub_colvec(const Value& a, const Value& v) {
    const char* op = "sub_colvec";
    check_colvec(a, v, op);
    Tape* tp = pick_tape({&a, &v}, op);
    Tensor out = colvec_combine(a.tensor(), v.tensor(), [](double x, double w) { return x - w; });
    const int an = a.node, vn = v.node;
    return emit(tp, std::move(out), op, a.needs_grad() || v.needs_grad(), {},
                [an, vn](const Tensor& g, Tape& tape) {
                    tape.accum_grad(an, g);
                    if (vn >= 0) tape.accum_grad(vn, row_sum_tensor(g), -1.0);
                });
}

Value div_colvec(const Value& a, const Value& v) {
    const char* op = "div_colvec";
    check_colvec(a, v, op);
    Tape* tp = pick_tape({&a, &v}, op);
    auto out_p =
        std::make_shared<Tensor>(colvec_combine(a.tensor(), v.tensor(), [](double x, double w) { return x / w; }));
    auto vt = v.t;
    const int an = a.node, vn = v.node;
    return emit(tp, out_p, op, a.needs_grad() || v.needs_grad(), {out_p, vt},
                [out_p, vt, an, vn](const Tensor& g, Tape& tape) {
                    if (an >= 0)
                        tape.accum_grad(an, colvec_combine(g, *vt, [](double x, double w) { return x / w; }));
                    if (vn >= 0) {
                        Tensor rs = row_sum_tensor(ew_mul(g, *out_p));  // [m x 1]
                        tape.accum_grad(vn, ew_div(rs, *vt), -1.0);
                    }
                });
}

Value mul_colvec(const Value& a, const Value& v) {
    const char* op = "mul_colvec";
    check_colvec(a, v, op);
    Tape* tp = pick_tape({&a, &v}, op);
    Tensor out = colvec_combine(a.tensor(), v.tensor(), [](double x, double w) { return x * w; });
    auto at = a.t;
    auto vt = v.t;
    const int an = a.node, vn = v.node;
    return emit(tp, std::move(out), op, a.needs_grad() || v.needs_grad(), {at, vt},
                [at, vt, an, vn](const Tensor& g, Tape& tape) {
                    if (an >= 0)
                        tape.accum_grad(an, colvec_combine(g, *vt, [](double x, double w) { return x * w; }));
                    if (vn >= 0) tape.accum_grad(vn, row_sum_tensor(ew_mul(g, *at)));
                });
}

Value div_rowvec(const Value& a, const Value& v) {
    const char* op = "div_rowvec";
    check2(a, op);
    check2(v, op);
    require(v.rows() == 1 && v.cols() == a.cols(), op, "vector must be [1 x cols(a)]");
    require(a.dtype() == v.dtype(), op, "dtype mismatch");
    Tape* tp = pick_tape({&a, &v}, op);
    const auto m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        auto w = v.tensor().data<T>();
        auto y = out.data<T>();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                y[static_cast<std::size_t>(i * n + j)] = static_cast<T>(
                    static_cast<double>(x[static_cast<std::size_t>(i * n + j)]) /
                    static_cast<double>(w[static_cast<std::size_t>(j)]));
    });
    auto out_p = std::make_shared<Tensor>(std::move(out));
    auto vt = v.t;
    const int an = a.node, vn = v.node;
    return emit(tp, out_p, op, a.needs_grad() || v.needs_grad(), {out_p, vt},
                [out_p, vt, an, vn, m, n](const Tensor& g, Tape& tape) {
                    if (an >= 0) {
                        Tensor da = Tensor::zeros(g.shape(), g.dtype());
                        dispatch(g.dtype(), [&](auto tag) {
                            using T = decltype(tag);
                            auto gs = g.data<T>();
                            auto w = vt->data<T>();
                            auto y = da.data<T>();
                            for (std::int64_t i = 0; i < m; ++i)
                                for (std::int64_t j = 0; j < n; ++j)
                                    y[static_cast<std::size_t>(i * n + j)] = static_cast<T>(
                                        static_cast<double>(gs[static_cast<std::size_t>(i * n + j)]) /
                                        static_cast<double>(w[static_cast<std::size_t>(j)]));
                        });
                        tape.accum_grad(an, da);
                    }
                    if (vn >= 0) {
                        Tensor cs = col_sum_tensor(ew_mul(g, *out_p));  // [1 x n]
                        tape.accum_grad(vn, ew_div(cs, *vt), -1.0);
                    }
                });
}

Value vexp(const Value& a) {
    Tape* tp = pick_tape({&a}, "exp");
    auto out_p = std::make_shared<Tensor>(map_unary(a.tensor(), [](double x) { return std::exp(x); }));
    const int an = a.node;
    return emit(tp, out_p, "exp", a.needs_grad(), {out_p},
                [out_p, an](const Tensor& g, Tape& tape) {
                    if (an >= 0) tape.accum_grad(an, ew_mul(g, *out_p));
                });
}

Value vlog(const Value& a) {
    Tape* tp = pick_tape({&a}, "log");
    Tensor out = map_unary(a.tensor(), [](double x) { return std::log(x); });
    auto at = a.t;
    const int an = a.node;
    return emit(tp, std::move(out), "log", a.needs_grad(), {at},
                [at, an](const Tensor& g, Tape& tape) {
                    if (an >= 0) tape.accum_grad(an, ew_div(g, *at));
                });
}

Value relu(const Value& a) {
    Tape* tp = pick_tape({&a}, "relu");
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kernels::ops<T>().relu(a.tensor().data<T>().data(), out.data<T>().data(),
                               static_cast<std::size_t>(a.numel()));
    });
    auto at = a.t;
    const int an = a.node;
    return emit(tp, std::move(out), "relu", a.needs_grad(), {at},
                [at, an](const Tensor& g, Tape& tape) {
                    if (an >= 0) tape.accum_grad(an, mul_map(g, *at, [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
                });
}

Value gelu(const Value& a) {
    Tape* tp = pick_tape({&a}, "gelu");
    Tensor out = map_unary(a.tensor(), [](double x) {
        return x * 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    });
    auto at = a.t;
    const int an = a.node;
    return emit(tp, std::move(out), "gelu", a.needs_grad(), {at},
                [at, an](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    tape.accum_grad(an, mul_map(g, *at, [](double x) {
                                        const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                                        const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
                                        return cdf + x * pdf;
                                    }));
                });
}

Value leaky_relu(const Value& a, double slope) {
    Tape* tp = pick_tape({&a}, "leaky_relu");
    Tensor out = map_unary(a.tensor(), [slope](double x) { return x > 0.0 ? x : slope * x; });
    auto at = a.t;
    const int an = a.node;
    return emit(tp, std::move(out), "leaky_relu", a.needs_grad(), {at},
                [at, an, slope](const Tensor& g, Tape& tape) {
                    if (an >= 0)
                        tape.accum_grad(an, mul_map(g, *at, [slope](double x) { return x > 0.0 ? 1.0 : slope; }));
                });
}

Value elu(const Value& a, double alpha) {
    Tape* tp = pick_tape({&a}, "elu");
    Tensor out = map_unary(a.tensor(), [alpha](double x) { return x > 0.0 ? x : alpha * std::expm1(x); });
    auto at = a.t;
    const int an = a.node;
    return emit(tp, std::move(out), "elu", a.needs_grad(), {at},
                [at, an, alpha](const Tensor& g, Tape& tape) {
                    if (an >= 0)
                        tape.accum_grad(an, mul_map(g, *at, [alpha](double x) {
                                            return x > 0.0 ? 1.0 : alpha * std::exp(x);
                                        }));
                });
}

Value sigmoid(const Value& a) {
    Tape* tp = pick_tape({&a}, "sigmoid");
    auto out_p = std::make_shared<Tensor>(map_unary(a.tensor(), [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }));
    const int an = a.node;
    return emit(tp, out_p, "sigmoid", a.needs_grad(), {out_p},
                [out_p, an](const Tensor& g, Tape& tape) {
                    if (an >= 0)
                        tape.accum_grad(an, mul_map(g, *out_p, [](double s) { return s * (1.0 - s); }));
                });
}

Value clamp_min(const Value& a, double lo) {
    Tape* tp = pick_tape({&a}, "clamp_min");
    Tensor out = map_unary(a.tensor(), [lo](double x) { return x < lo ? lo : x; });
    auto at = a.t;
    const int an = a.node;
    return emit(tp, std::move(out), "clamp_min", a.needs_grad(), {at},
                [at, an, lo](const Tensor& g, Tape& tape) {
                    if (an >= 0)
                        tape.accum_grad(an, mul_map(g, *at, [lo](double x) { return x > lo ? 1.0 : 0.0; }));
                });
}

Value clamp_max(const Value& a, double hi) {
    Tape* tp = pick_tape({&a}, "clamp_max");
    Tensor out = map_unary(a.tensor(), [hi](double x) { return x > hi ? hi : x; });
    auto at = a.t;
    const int an = a.node;
    return emit(tp, std::move(out), "clamp_max", a.needs_grad(), {at},
                [at, an, hi](const Tensor& g, Tape& tape) {
                    if (an >= 0)
                        tape.accum_grad(an, mul_map(g, *at, [hi](double x) { return x < hi ? 1.0 : 0.0; }));
                });
}

Value softmax_rows(const Value& a) {
    const char* op = "softmax_rows";
    check2(a, op);
    Tape* tp = pick_tape({&a}, op);
    const auto m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        auto y = out.data<T>();
        for (std::int64_t i = 0; i < m; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < n; ++j)
                mx = std::max(mx, static_cast<double>(x[static_cast<std::size_t>(i * n + j)]));
            double z = 0.0;
            for (std::int64_t j = 0; j < n; ++j)
                z += std::exp(static_cast<double>(x[static_cast<std::size_t>(i * n + j)]) - mx);
            for (std::int64_t j = 0; j < n; ++j)
                y[static_cast<std::size_t>(i * n + j)] = static_cast<T>(
                    std::exp(static_cast<double>(x[static_cast<std::size_t>(i * n + j)]) - mx) / z);
        }
    });
    auto out_p = std::make_shared<Tensor>(std::move(out));
    const int an = a.node;
    return emit(tp, out_p, op, a.needs_grad(), {out_p},
                [out_p, an, m, n](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros(g.shape(), g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto s = out_p->data<T>();
                        auto y = da.data<T>();
                        for (std::int64_t i = 0; i < m; ++i) {
                            double dot = 0.0;
                            for (std::int64_t j = 0; j < n; ++j)
                                dot += static_cast<double>(gs[static_cast<std::size_t>(i * n + j)]) *
                                       static_cast<double>(s[static_cast<std::size_t>(i * n + j)]);
                            for (std::int64_t j = 0; j < n; ++j) {
                                const auto k = static_cast<std::size_t>(i * n + j);
                                y[k] = static_cast<T>(static_cast<double>(s[k]) *
                                                      (static_cast<double>(gs[k]) - dot));
                            }
                        }
                    });
                    tape.accum_grad(an, da);
                });
}

Value layernorm_rows(const Value& x, const Value& gamma, const Value& beta, double eps) {
    const char* op = "layernorm_rows";
    check2(x, op);
    check2(gamma, op);
    check2(beta, op);
    require(gamma.rows() == 1 && gamma.cols() == x.cols(), op, "gamma must be [1 x cols(x)]");
    require(beta.rows() == 1 && beta.cols() == x.cols(), op, "beta must be [1 x cols(x)]");
    require(x.dtype() == gamma.dtype() && x.dtype() == beta.dtype(), op, "dtype mismatch");
    Tape* tp = pick_tape({&x, &gamma, &beta}, op);

    const auto m = x.rows(), n = x.cols();
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    auto xhat_p = std::make_shared<Tensor>(Tensor::zeros(x.shape(), x.dtype()));
    auto inv_p = std::make_shared<Tensor>(Tensor::zeros(Shape{m, 1}, x.dtype()));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.tensor().data<T>();
        auto gs = gamma.tensor().data<T>();
        auto bs = beta.tensor().data<T>();
        auto ys = out.data<T>();
        auto hs = xhat_p->data<T>();
        for (std::int64_t i = 0; i < m; ++i) {
            double mean = 0.0;
            for (std::int64_t j = 0; j < n; ++j) mean += static_cast<double>(xs[static_cast<std::size_t>(i * n + j)]);
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                const double d = static_cast<double>(xs[static_cast<std::size_t>(i * n + j)]) - mean;
                var += d * d;
            }
            var /= static_cast<double>(n);
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_p->set(i, inv);
            for (std::int64_t j = 0; j < n; ++j) {
                const auto k = static_cast<std::size_t>(i * n + j);
                const double h = (static_cast<double>(xs[k]) - mean) * inv;
                hs[k] = static_cast<T>(h);
                ys[k] = static_cast<T>(h * static_cast<double>(gs[static_cast<std::size_t>(j)]) +
                                       static_cast<double>(bs[static_cast<std::size_t>(j)]));
            }
        }
    });
    auto gt = gamma.t;
    const int xn = x.node, gn = gamma.node, bn = beta.node;
    const bool want = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    return emit(tp, std::move(out), op, want, {xhat_p, inv_p, gt},
                [xhat_p, inv_p, gt, xn, gn, bn, m, n](const Tensor& g, Tape& tape) {
                    if (bn >= 0) tape.accum_grad(bn, col_sum_tensor(g));
                    if (gn >= 0) tape.accum_grad(gn, col_sum_tensor(ew_mul(g, *xhat_p)));
                    if (xn < 0) return;
                    Tensor dx = Tensor::zeros(g.shape(), g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto hs = xhat_p->data<T>();
                        auto gm = gt->data<T>();
                        auto y = dx.data<T>();
                        for (std::int64_t i = 0; i < m; ++i) {
                            double s1 = 0.0, s2 = 0.0;
                            for (std::int64_t j = 0; j < n; ++j) {
                                const auto k = static_cast<std::size_t>(i * n + j);
                                const double gg = static_cast<double>(gs[k]) *
                                                  static_cast<double>(gm[static_cast<std::size_t>(j)]);
                                s1 += gg;
                                s2 += gg * static_cast<double>(hs[k]);
                            }
                            s1 /= static_cast<double>(n);
                            s2 /= static_cast<double>(n);
                            const double inv = inv_p->at(i);
                            for (std::int64_t j = 0; j < n; ++j) {
                                const auto k = static_cast<std::size_t>(i * n + j);
                                const double gg = static_cast<double>(gs[k]) *
                                                  static_cast<double>(gm[static_cast<std::size_t>(j)]);
                                y[k] = static_cast<T>(inv * (gg - s1 - static_cast<double>(hs[k]) * s2));
                            }
                        }
                    });
                    tape.accum_grad(xn, dx);
                });
}

Value gather_rows(const Value& a, const std::vector<std::int64_t>& idx) {
    const char* op = "gather_rows";
    check2(a, op);
    Tape* tp = pick_tape({&a}, op);
    const auto src_rows = a.rows(), n = a.cols();
    for (auto r : idx) require(r >= 0 && r < src_rows, op, "row index out of range");
    const auto m = static_cast<std::int64_t>(idx.size());
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        auto y = out.data<T>();
        for (std::int64_t r = 0; r < m; ++r)
            std::memcpy(y.data() + r * n, x.data() + idx[static_cast<std::size_t>(r)] * n,
                        static_cast<std::size_t>(n) * sizeof(T));
    });
    const int an = a.node;
    auto ashape = a.shape();
    auto adt = a.dtype();
    return emit(tp, std::move(out), op, a.needs_grad(), {},
                [an, idx, ashape, adt, m, n](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros(ashape, adt);
                    dispatch(adt, [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto y = da.data<T>();
                        for (std::int64_t r = 0; r < m; ++r) {
                            T* dst = y.data() + idx[static_cast<std::size_t>(r)] * n;
                            const T* src = gs.data() + r * n;
                            for (std::int64_t j = 0; j < n; ++j) dst[j] += src[j];
                        }
                    });
                    tape.accum_grad(an, da);
                });
}

Value scatter_rows(const Value& a, const std::vector<std::int64_t>& idx, std::int64_t out_rows) {
    const char* op = "scatter_rows";
    check2(a, op);
    require(static_cast<std::int64_t>(idx.size()) == a.rows(), op, "one index per input row expected");
    Tape* tp = pick_tape({&a}, op);
    const auto n = a.cols();
    std::vector<char> seen(static_cast<std::size_t>(out_rows), 0);
    for (auto r : idx) {
        require(r >= 0 && r < out_rows, op, "row index out of range");
        require(!seen[static_cast<std::size_t>(r)], op, "duplicate destination row");
        seen[static_cast<std::size_t>(r)] = 1;
    }
    Tensor out = Tensor::zeros({out_rows, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        auto y = out.data<T>();
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::memcpy(y.data() + idx[r] * n, x.data() + static_cast<std::int64_t>(r) * n,
                        static_cast<std::size_t>(n) * sizeof(T));
    });
    const int an = a.node;
    return emit(tp, std::move(out), op, a.needs_grad(), {},
                [an, idx, n](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros({static_cast<std::int64_t>(idx.size()), n}, g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto y = da.data<T>();
                        for (std::size_t r = 0; r < idx.size(); ++r)
                            std::memcpy(y.data() + static_cast<std::int64_t>(r) * n, gs.data() + idx[r] * n,
                                        static_cast<std::size_t>(n) * sizeof(T));
                    });
                    tape.accum_grad(an, da);
                });
}

Value concat_rows(const std::vector<Value>& parts) {
    const char* op = "concat_rows";
    require(!parts.empty(), op, "no parts");
    std::vector<const Value*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    Tape* tp = nullptr;
    {
        // pick_tape wants an initializer_list; replicate its logic for a vector
        for (const Value* v : ptrs)
            if (v->needs_grad()) {
                require(tp == nullptr || tp == v->tape, op, "inputs from different tapes");
                tp = v->tape;
            }
        if (tp == nullptr) tp = parts.front().tape;
        require(tp != nullptr, op, "inputs carry no tape");
    }
    const auto n = parts.front().cols();
    const auto dt = parts.front().dtype();
    std::int64_t m = 0;
    bool want = false;
    for (const auto& p : parts) {
        check2(p, op);
        require(p.cols() == n && p.dtype() == dt, op, "parts disagree in cols or dtype");
        m += p.rows();
        want = want || p.needs_grad();
    }
    Tensor out = Tensor::zeros({m, n}, dt);
    std::vector<std::int64_t> offs;
    std::vector<int> nodes;
    std::vector<std::int64_t> rows;
    std::int64_t off = 0;
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto y = out.data<T>();
        for (const auto& p : parts) {
            auto x = p.tensor().data<T>();
            std::memcpy(y.data() + off * n, x.data(), static_cast<std::size_t>(p.rows() * n) * sizeof(T));
            offs.push_back(off);
            nodes.push_back(p.node);
            rows.push_back(p.rows());
            off += p.rows();
        }
    });
    return emit(tp, std::move(out), op, want, {},
                [offs, nodes, rows, n](const Tensor& g, Tape& tape) {
                    for (std::size_t k = 0; k < nodes.size(); ++k) {
                        if (nodes[k] < 0) continue;
                        Tensor part = Tensor::zeros({rows[k], n}, g.dtype());
                        dispatch(g.dtype(), [&](auto tag) {
                            using T = decltype(tag);
                            std::memcpy(part.data<T>().data(), g.data<T>().data() + offs[k] * n,
                                        static_cast<std::size_t>(rows[k] * n) * sizeof(T));
                        });
                        tape.accum_grad(nodes[k], part);
                    }
                });
}

Value slice_rows(const Value& a, std::int64_t begin, std::int64_t end) {
    const char* op = "slice_rows";
    check2(a, op);
    require(begin >= 0 && begin <= end && end <= a.rows(), op, "row range out of bounds");
    Tape* tp = pick_tape({&a}, op);
    const auto n = a.cols();
    const auto m = end - begin;
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::memcpy(out.data<T>().data(), a.tensor().data<T>().data() + begin * n,
                    static_cast<std::size_t>(m * n) * sizeof(T));
    });
    const int an = a.node;
    auto ashape = a.shape();
    return emit(tp, std::move(out), op, a.needs_grad(), {},
                [an, ashape, begin, m, n](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros(ashape, g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        std::memcpy(da.data<T>().data() + begin * n, g.data<T>().data(),
                                    static_cast<std::size_t>(m * n) * sizeof(T));
                    });
                    tape.accum_grad(an, da);
                });
}

Value concat_cols(const std::vector<Value>& parts) {
    const char* op = "concat_cols";
    require(!parts.empty(), op, "no parts");
    Tape* tp = nullptr;
    for (const auto& p : parts)
        if (p.needs_grad()) {
            require(tp == nullptr || tp == p.tape, op, "inputs from different tapes");
            tp = p.tape;
        }
    if (tp == nullptr) tp = parts.front().tape;
    require(tp != nullptr, op, "inputs carry no tape");
    const auto m = parts.front().rows();
    const auto dt = parts.front().dtype();
    std::int64_t n = 0;
    bool want = false;
    for (const auto& p : parts) {
        check2(p, op);
        require(p.rows() == m && p.dtype() == dt, op, "parts disagree in rows or dtype");
        n += p.cols();
        want = want || p.needs_grad();
    }
    Tensor out = Tensor::zeros({m, n}, dt);
    std::vector<std::int64_t> offs, widths;
    std::vector<int> nodes;
    std::int64_t off = 0;
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        auto y = out.data<T>();
        for (const auto& p : parts) {
            auto x = p.tensor().data<T>();
            const auto w = p.cols();
            for (std::int64_t i = 0; i < m; ++i)
                std::memcpy(y.data() + i * n + off, x.data() + i * w, static_cast<std::size_t>(w) * sizeof(T));
            offs.push_back(off);
            widths.push_back(w);
            nodes.push_back(p.node);
            off += w;
        }
    });
    return emit(tp, std::move(out), op, want, {},
                [offs, widths, nodes, m, n](const Tensor& g, Tape& tape) {
                    for (std::size_t k = 0; k < nodes.size(); ++k) {
                        if (nodes[k] < 0) continue;
                        Tensor part = Tensor::zeros({m, widths[k]}, g.dtype());
                        dispatch(g.dtype(), [&](auto tag) {
                            using T = decltype(tag);
                            auto gs = g.data<T>();
                            auto y = part.data<T>();
                            for (std::int64_t i = 0; i < m; ++i)
                                std::memcpy(y.data() + i * widths[k], gs.data() + i * n + offs[k],
                                            static_cast<std::size_t>(widths[k]) * sizeof(T));
                        });
                        tape.accum_grad(nodes[k], part);
                    }
                });
}

Value slice_cols(const Value& a, std::int64_t begin, std::int64_t end) {
    const char* op = "slice_cols";
    check2(a, op);
    require(begin >= 0 && begin <= end && end <= a.cols(), op, "column range out of bounds");
    Tape* tp = pick_tape({&a}, op);
    const auto m = a.rows(), n = a.cols();
    const auto w = end - begin;
    Tensor out = Tensor::zeros({m, w}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        auto y = out.data<T>();
        for (std::int64_t i = 0; i < m; ++i)
            std::memcpy(y.data() + i * w, x.data() + i * n + begin, static_cast<std::size_t>(w) * sizeof(T));
    });
    const int an = a.node;
    return emit(tp, std::move(out), op, a.needs_grad(), {},
                [an, m, n, w, begin](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros({m, n}, g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto y = da.data<T>();
                        for (std::int64_t i = 0; i < m; ++i)
                            std::memcpy(y.data() + i * n + begin, gs.data() + i * w,
                                        static_cast<std::size_t>(w) * sizeof(T));
                    });
                    tape.accum_grad(an, da);
                });
}

Value row_sum(const Value& a) {
    check2(a, "row_sum");
    Tape* tp = pick_tape({&a}, "row_sum");
    Tensor out = row_sum_tensor(a.tensor());
    const int an = a.node;
    const auto m = a.rows(), n = a.cols();
    return emit(tp, std::move(out), "row_sum", a.needs_grad(), {},
                [an, m, n](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros({m, n}, g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto y = da.data<T>();
                        for (std::int64_t i = 0; i < m; ++i)
                            for (std::int64_t j = 0; j < n; ++j)
                                y[static_cast<std::size_t>(i * n + j)] = gs[static_cast<std::size_t>(i)];
                    });
                    tape.accum_grad(an, da);
                });
}

namespace {

Value col_reduce(const Value& a, const char* op, double denom) {
    Tape* tp = pick_tape({&a}, op);
    Tensor out = col_sum_tensor(a.tensor());
    if (denom != 1.0) out = scaled(out, 1.0 / denom);
    const int an = a.node;
    const auto m = a.rows(), n = a.cols();
    return emit(tp, std::move(out), op, a.needs_grad(), {},
                [an, m, n, denom](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros({m, n}, g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto y = da.data<T>();
                        for (std::int64_t i = 0; i < m; ++i)
                            for (std::int64_t j = 0; j < n; ++j)
                                y[static_cast<std::size_t>(i * n + j)] = static_cast<T>(
                                    static_cast<double>(gs[static_cast<std::size_t>(j)]) / denom);
                    });
                    tape.accum_grad(an, da);
                });
}

}  // namespace

Value col_sum(const Value& a) {
    check2(a, "col_sum");
    return col_reduce(a, "col_sum", 1.0);
}

Value col_mean(const Value& a) {
    check2(a, "col_mean");
    require(a.rows() > 0, "col_mean", "empty tensor");
    return col_reduce(a, "col_mean", static_cast<double>(a.rows()));
}

namespace {

Value full_reduce(const Value& a, const char* op, double denom) {
    Tape* tp = pick_tape({&a}, op);
    double acc = 0.0;
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (T v : a.tensor().data<T>()) acc += static_cast<double>(v);
    });
    Tensor out = Tensor::scalar(acc / denom, a.dtype());
    const int an = a.node;
    auto ashape = a.shape();
    return emit(tp, std::move(out), op, a.needs_grad(), {},
                [an, ashape, denom](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros(ashape, g.dtype());
                    const double gv = g.at(0) / denom;
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto y = da.data<T>();
                        std::fill(y.begin(), y.end(), static_cast<T>(gv));
                    });
                    tape.accum_grad(an, da);
                });
}

}  // namespace

Value sum_all(const Value& a) { return full_reduce(a, "sum_all", 1.0); }

Value mean_all(const Value& a) {
    require(a.numel() > 0, "mean_all", "empty tensor");
    return full_reduce(a, "mean_all", static_cast<double>(a.numel()));
}

Value l2norm_rows(const Value& a) {
    const char* op = "l2norm_rows";
    check2(a, op);
    Tape* tp = pick_tape({&a}, op);
    const auto m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({m, 1}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        for (std::int64_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                const double v = static_cast<double>(x[static_cast<std::size_t>(i * n + j)]);
                acc += v * v;
            }
            if (acc == 0.0) throw NumericalError("l2norm_rows: zero-norm row has no direction");
            out.set(i, std::sqrt(acc));
        }
    });
    auto out_p = std::make_shared<Tensor>(std::move(out));
    auto at = a.t;
    const int an = a.node;
    return emit(tp, out_p, op, a.needs_grad(), {out_p, at},
                [out_p, at, an, m, n](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    Tensor da = Tensor::zeros({m, n}, g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto x = at->data<T>();
                        auto y = da.data<T>();
                        for (std::int64_t i = 0; i < m; ++i) {
                            const double c = static_cast<double>(gs[static_cast<std::size_t>(i)]) / out_p->at(i);
                            for (std::int64_t j = 0; j < n; ++j) {
                                const auto k = static_cast<std::size_t>(i * n + j);
                                y[k] = static_cast<T>(c * static_cast<double>(x[k]));
                            }
                        }
                    });
                    tape.accum_grad(an, da);
                });
}

Value reshape(const Value& a, Shape s) {
    require(shape_numel(s) == a.numel(), "reshape", "element count mismatch");
    Tape* tp = pick_tape({&a}, "reshape");
    Tensor out = a.tensor().reshaped(s);
    const int an = a.node;
    auto ashape = a.shape();
    return emit(tp, std::move(out), "reshape", a.needs_grad(), {},
                [an, ashape](const Tensor& g, Tape& tape) {
                    if (an >= 0) tape.accum_grad(an, g.reshaped(ashape));
                });
}

Value row_max_detached(const Value& a) {
    check2(a, "row_max_detached");
    const auto m = a.rows(), n = a.cols();
    require(n > 0, "row_max_detached", "empty rows");
    Tensor out = Tensor::zeros({m, 1}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        for (std::int64_t i = 0; i < m; ++i) {
            double mx = static_cast<double>(x[static_cast<std::size_t>(i * n)]);
            for (std::int64_t j = 1; j < n; ++j)
                mx = std::max(mx, static_cast<double>(x[static_cast<std::size_t>(i * n + j)]));
            out.set(i, mx);
        }
    });
    return Value{std::make_shared<Tensor>(std::move(out)), a.tape, -1};
}

double max_all_detached(const Value& a) {
    require(a.numel() > 0, "max_all_detached", "empty tensor");
    double mx = -std::numeric_limits<double>::infinity();
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (T v : a.tensor().data<T>()) mx = std::max(mx, static_cast<double>(v));
    });
    return mx;
}

Value detach(const Value& a) { return Value{a.t, a.tape, -1}; }

Value dropout(const Value& a, double p, const RngStream& stream) {
    const char* op = "dropout";
    require(p >= 0.0 && p < 1.0, op, "rate must lie in [0, 1)");
    if (p == 0.0) return a;
    Tape* tp = pick_tape({&a}, op);
    const double keep_scale = 1.0 / (1.0 - p);
    const auto count = static_cast<std::size_t>(a.numel());

    auto fill_mask = [p, keep_scale, count](const RngStream& base, std::vector<double>& mask) {
        RngStream r = base;  // replay always starts from the captured triple
        mask.resize(count);
        for (std::size_t i = 0; i < count; ++i) mask[i] = r.uniform() < p ? 0.0 : keep_scale;
    };

    std::vector<double> mask;
    fill_mask(stream, mask);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = a.tensor().data<T>();
        auto y = out.data<T>();
        for (std::size_t i = 0; i < count; ++i)
            y[i] = static_cast<T>(static_cast<double>(x[i]) * mask[i]);
    });
    const int an = a.node;
    const RngStream saved = stream;
    return emit(tp, std::move(out), op, a.needs_grad(), {},
                [an, saved, fill_mask](const Tensor& g, Tape& tape) {
                    if (an < 0) return;
                    std::vector<double> mask;
                    fill_mask(saved, mask);
                    Tensor da = Tensor::zeros(g.shape(), g.dtype());
                    dispatch(g.dtype(), [&](auto tag) {
                        using T = decltype(tag);
                        auto gs = g.data<T>();
                        auto y = da.data<T>();
                        for (std::size_t i = 0; i < mask.size(); ++i)
                            y[i] = static_cast<T>(static_cast<double>(gs[i]) * mask[i]);
                    });
                    tape.accum_grad(an, da);
                });
}

}  // namespace gradcell::ad
