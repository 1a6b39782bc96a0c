#pragma once

#include <cstdint>
#include <vector>

#include "gradcell/rng.hpp"
#include "gradcell/tape.hpp"

namespace gradcell::ad {

// Differentiable ops over rank-2 (and scalar) tensors. Every op validates
// shapes and dtypes, fails fast on non-finite results, and registers an
// exact reverse rule on the tape.

// C = op(A) * op(B) with optional transposes. trans_a && trans_b unsupported.
Value matmul(const Value& a, const Value& b, bool trans_a = false, bool trans_b = false);

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value div(const Value& a, const Value& b);

Value scale(const Value& a, double s);
Value add_scalar(const Value& a, double s);

// Broadcast arithmetic. rowvec: [1 x n] against [m x n]; colvec: [m x 1].
Value add_rowvec(const Value& a, const Value& v);
Value sub_colvec(const Value& a, const Value& v);
Value div_colvec(const Value& a, const Value& v);
Value div_rowvec(const Value& a, const Value& v);
Value mul_colvec(const Value& a, const Value& v);

Value vexp(const Value& a);
Value vlog(const Value& a);
Value relu(const Value& a);
Value gelu(const Value& a);
Value leaky_relu(const Value& a, double slope = 0.01);
Value elu(const Value& a, double alpha = 1.0);
Value sigmoid(const Value& a);
Value clamp_min(const Value& a, double lo);
Value clamp_max(const Value& a, double hi);

Value softmax_rows(const Value& a);

// Per-row standardization with learned scale/shift (both [1 x n]).
Value layernorm_rows(const Value& x, const Value& gamma, const Value& beta, double eps = 1e-5);

// out[r, :] = a[idx[r], :]. Backward scatter-adds, so repeated indices
// accumulate correctly (embedding lookups rely on this).
Value gather_rows(const Value& a, const std::vector<std::int64_t>& idx);

// out[idx[r], :] = a[r, :]; all other rows zero. Indices must be unique.
Value scatter_rows(const Value& a, const std::vector<std::int64_t>& idx, std::int64_t out_rows);

Value concat_rows(const std::vector<Value>& parts);
Value slice_rows(const Value& a, std::int64_t begin, std::int64_t end);
Value concat_cols(const std::vector<Value>& parts);
Value slice_cols(const Value& a, std::int64_t begin, std::int64_t end);

Value row_sum(const Value& a);   // [m x n] -> [m x 1]
Value col_sum(const Value& a);   // [m x n] -> [1 x n]
Value col_mean(const Value& a);  // [m x n] -> [1 x n]
Value sum_all(const Value& a);   // -> scalar
Value mean_all(const Value& a);  // -> scalar

// Per-row Euclidean norm, [m x n] -> [m x 1]. A zero row has no defined
// direction, so it raises NumericalError rather than dividing by zero later.
Value l2norm_rows(const Value& a);

Value reshape(const Value& a, Shape s);

// Detached helpers: results carry no gradient by construction.
Value row_max_detached(const Value& a);  // [m x n] -> [m x 1]
double max_all_detached(const Value& a);
Value detach(const Value& a);

// Inverted dropout: keep with probability 1-p, scale kept entries by
// 1/(1-p). The mask is a pure function of the stream triple, regenerated
// bit-identically in backward and across grad / no_grad passes.
Value dropout(const Value& a, double p, const RngStream& stream);

}  // namespace gradcell::ad
