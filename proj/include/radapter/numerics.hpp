#pragma once

#include <functional>

#include "radapter/rng.hpp"
#include "radapter/tensor.hpp"

namespace radapter {

// Thrown by l2_normalize_rows when a row has zero norm and no direction can
// be assigned.
struct DegenerateEmbeddingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Standard matrix product with 64-bit accumulation. a: MxK, b: KxN.
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);

// a * b^T. a: MxK, b: NxK -> MxN.
Tensor2D matmul_nt(const Tensor2D& a, const Tensor2D& b);

// a^T * b. a: KxM, b: KxN -> MxN.
Tensor2D matmul_tn(const Tensor2D& a, const Tensor2D& b);

Tensor2D transpose(const Tensor2D& a);

// Row-wise softmax with per-row max subtraction.
Tensor2D softmax_rows(const Tensor2D& x);

// Gradient of softmax_rows: given probs p = softmax(x) and upstream dp,
// returns dx = p .* (dp - rowdot(dp, p)).
Tensor2D softmax_rows_backward(const Tensor2D& probs, const Tensor2D& upstream);

struct LayerNormResult {
    Tensor2D out;
    Tensor2D xhat;     // normalized rows before the affine map
    Tensor2D inv_std;  // 1 x rows, 1/sqrt(var + eps) per row
};

// Per-row normalization followed by the affine map xhat*gain + bias.
// gain and bias are 1 x cols.
Tensor2D layer_norm(const Tensor2D& x, const Tensor2D& gain, const Tensor2D& bias, double eps);
LayerNormResult layer_norm_cached(const Tensor2D& x, const Tensor2D& gain, const Tensor2D& bias,
                                  double eps);

struct LayerNormGrads {
    Tensor2D d_x;
    Tensor2D d_gain;
    Tensor2D d_bias;
};

LayerNormGrads layer_norm_backward(const LayerNormResult& cache, const Tensor2D& gain,
                                   const Tensor2D& upstream);

// Elementwise tanh-approximation GELU:
// 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
Tensor2D gelu(const Tensor2D& x);

struct GeluResult {
    Tensor2D act;
    Tensor2D th;  // the inner tanh values, reusable by the backward pass
};

GeluResult gelu_cached(const Tensor2D& x);

// Elementwise derivative of the same approximation, evaluated at x.
Tensor2D gelu_grad(const Tensor2D& x);

// Same derivative with the inner tanh supplied from the forward pass.
Tensor2D gelu_grad_cached(const Tensor2D& x, const Tensor2D& th);

// Scales each row to unit Euclidean norm. A row of exact zeros throws
// DegenerateEmbeddingError.
Tensor2D l2_normalize_rows(const Tensor2D& x);

// std == 0 returns the constant matrix without consuming the stream.
Tensor2D gaussian_sample(SeededRng& rng, std::size_t rows, std::size_t cols, double mean,
                         double std);

// Central-difference gradient check. Perturbs param in place (restoring it),
// re-evaluates f per coordinate and returns the max over coordinates of
// |fd - analytic| / max(1e-8, |fd| + |analytic|).
double finite_diff_check(const std::function<double()>& f, Tensor2D& param,
                         const Tensor2D& analytic_grad, double h);

}  // namespace radapter
