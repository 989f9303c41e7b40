#pragma once

#include "capsgan/tensor.hpp"

namespace capsgan {

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor neg(const Tensor& a);
Tensor one_minus(const Tensor& a);  // 1 - a

Tensor sum(const Tensor& a);   // -> [1]
Tensor mean(const Tensor& a);  // -> [1]

// log(max(x, floor)); zero subgradient below the clamp
Tensor log_clamped(const Tensor& a, float floor = 1e-7f);

Tensor reshape(const Tensor& a, Shape shape);

enum class Activation { relu, leaky_relu, tanh, sigmoid };
Tensor activate(const Tensor& x, Activation kind, float alpha = 0.2f);
inline Tensor relu(const Tensor& x) { return activate(x, Activation::relu); }
inline Tensor leaky_relu(const Tensor& x, float alpha = 0.2f) {
    return activate(x, Activation::leaky_relu, alpha);
}
inline Tensor tanh_act(const Tensor& x) { return activate(x, Activation::tanh); }
inline Tensor sigmoid(const Tensor& x) { return activate(x, Activation::sigmoid); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);                        // [m,k]x[k,n]
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias);     // [N,p]x[p,q]+[q]

// x [N,C,H,W], kernels [F,C,kh,kw] -> [N,F,OH,OW]; OH = (H+2p-k)/s + 1
Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride, int pad);
// x [N,C,H,W], kernels [C,F,kh,kw] -> [N,F,OH,OW]; OH = (H-1)s - 2p + k.
// Exact linear adjoint of conv2d with the same (k, stride, pad).
Tensor conv_transpose2d(const Tensor& x, const Tensor& kernels, int stride, int pad);

Tensor bias_channel(const Tensor& x, const Tensor& bias);  // + bias[C] over axis 1

// ---------------------------------------------------------------------------
// Normalization / regularization / softmax
// ---------------------------------------------------------------------------

// Per-channel (axis 1) batch normalization. Train mode uses batch statistics
// and updates the running buffers in place: run = momentum*run + (1-m)*batch.
// Eval mode normalizes with the running buffers.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, float eps, float momentum,
                  bool train);

Tensor dropout(const Tensor& x, float rate, Rng& rng, bool train);

Tensor softmax_lastdim(const Tensor& x);

// mean over rows of -log softmax(logits)[label]
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Structured ops for capsule and GAN layers
// ---------------------------------------------------------------------------

// a [B,p], b [B,q] -> [B,p,q]
Tensor outer_product(const Tensor& a, const Tensor& b);
// x [B,p,q], w [p] -> [B,q]: out[b,c] = sum_i w[i] * x[b,i,c]
Tensor contract_axis1(const Tensor& x, const Tensor& w);

}  // namespace capsgan
