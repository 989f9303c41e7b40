#pragma once

#include "capsgan/ops.hpp"

namespace capsgan {

// v = (|s|^2 / (1 + |s|^2)) * s / (|s| + eps), applied over the last axis.
// Norms land in [0,1); direction is preserved; eps makes s = 0 well defined.
Tensor squash(const Tensor& s, float eps = 1e-8f);

// Prediction vectors: u [B,I,d_in] x w [I,J,d_in,d_out] -> [B,I,J,d_out],
// u_hat[b,i,j,:] = u[b,i,:] . w[i,j,:,:]
Tensor caps_predict(const Tensor& u, const Tensor& w);

// Coupling coefficients: softmax of the logits over the output-capsule axis,
// independently for every (batch, input capsule). b [B,I,J] -> c [B,I,J].
Tensor routing_softmax(const Tensor& b);

// s[b,j,:] = sum_i c[b,i,j] * u_hat[b,i,j,:], summed in ascending i
Tensor route_weighted_sum(const Tensor& c, const Tensor& u_hat);

// agreement[b,i,j] = u_hat[b,i,j,:] . v[b,j,:]
Tensor route_agreement(const Tensor& u_hat, const Tensor& v);

// Routing by agreement over u_hat [B,I,J,D]: logits start at zero; each
// iteration takes c = softmax(b), v = squash(sum_i c*u_hat) and adds the
// agreement onto b. Returns the final v [B,J,D]. Fully unrolled, so
// gradients flow through every iteration.
Tensor dynamic_routing(const Tensor& u_hat, int iterations);

// caps_predict followed by dynamic_routing. Covers both the recognition
// direction (many capsules -> few class capsules) and the generative
// direction (few latent capsules -> many feature capsules).
Tensor routed_capsules(const Tensor& u, const Tensor& w, int iterations);

// Regroups conv features [B,C,H,W] (C divisible by dim) into
// (C/dim)*H*W capsules of length dim and squashes each: capsule
// t*H*W + y*W + x takes channels [t*dim, (t+1)*dim) at position (y,x).
Tensor primary_caps(const Tensor& features, int64_t dim = 8);

// Inverse of the primary_caps regrouping (without squash):
// [B,J,D] -> [B,C,H,W] with J = (C/D)*H*W.
Tensor capsules_to_features(const Tensor& caps, int64_t channels, int64_t height, int64_t width);

// Euclidean norms over the last axis: [...,D] -> [...]
Tensor norm_lastdim(const Tensor& x);

// Selects the capsule with the largest norm per batch row; ties go to the
// lowest index. v [B,J,D] -> [B,D].
Tensor mask_by_norm(const Tensor& v);

}  // namespace capsgan
