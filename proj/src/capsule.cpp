#include "capsgan/capsule.hpp"

#include <cmath>

namespace capsgan {

Tensor squash(const Tensor& s, float eps) {
    if (s.rank() < 1) throw ShapeError("squash: rank must be >= 1");
    int64_t D = s.dim(s.rank() - 1), R = s.numel() / D;
    std::vector<float> out(s.data().size());
    for (int64_t r = 0; r < R; ++r) {
        const float* src = s.data().data() + r * D;
        double q = 0.0;
        for (int64_t i = 0; i < D; ++i) q += static_cast<double>(src[i]) * src[i];
        double rt = std::sqrt(q);
        float f = static_cast<float>(q / ((1.0 + q) * (rt + static_cast<double>(eps))));
        float* dst = out.data() + r * D;
        for (int64_t i = 0; i < D; ++i) dst[i] = f * src[i];
    }
    Tensor y = make_node(s.shape(), std::move(out));
    record_op(y, {s}, [&](TensorNode* on) {
        auto sn = s.node();
        return [on, sn, R, D, eps]() {
            sn->ensure_grad();
            for (int64_t r = 0; r < R; ++r) {
                const float* sv = sn->data.data() + r * D;
                const float* g = on->grad.data() + r * D;
                float* ds = sn->grad.data() + r * D;
                double q = 0.0, dot = 0.0;
                for (int64_t i = 0; i < D; ++i) {
                    q += static_cast<double>(sv[i]) * sv[i];
                    dot += static_cast<double>(g[i]) * sv[i];
                }
                double rt = std::sqrt(q);
                double den = (1.0 + q) * (rt + static_cast<double>(eps));
                double f = q / den;
                // d/dq of q / ((1+q)(sqrt(q)+eps)), written so q = 0 stays finite
                double qdp = q * (rt + static_cast<double>(eps)) + 0.5 * rt * (1.0 + q);
                double fp = (den - qdp) / (den * den);
                float coeff = static_cast<float>(2.0 * fp * dot);
                float ff = static_cast<float>(f);
                for (int64_t i = 0; i < D; ++i) ds[i] += ff * g[i] + coeff * sv[i];
            }
        };
    });
    return y;
}

Tensor caps_predict(const Tensor& u, const Tensor& w) {
    if (u.rank() != 3 || w.rank() != 4)
        throw ShapeError("caps_predict: expects u[B,I,d_in], w[I,J,d_in,d_out]");
    int64_t B = u.dim(0), I = u.dim(1), di = u.dim(2);
    int64_t J = w.dim(1), djo = w.dim(3);
    if (w.dim(0) != I || w.dim(2) != di)
        throw ShapeError("caps_predict: w " + shape_str(w.shape()) + " does not match u " +
                         shape_str(u.shape()));
    std::vector<float> out(static_cast<size_t>(B * I * J * djo), 0.0f);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < I; ++i) {
            const float* uv = u.data().data() + (b * I + i) * di;
            for (int64_t j = 0; j < J; ++j) {
                const float* wp = w.data().data() + ((i * J + j) * di) * djo;
                float* dst = out.data() + ((b * I + i) * J + j) * djo;
                for (int64_t d = 0; d < di; ++d) {
                    float uvd = uv[d];
                    const float* wr = wp + d * djo;
                    for (int64_t e = 0; e < djo; ++e) dst[e] += uvd * wr[e];
                }
            }
        }
    Tensor y = make_node({B, I, J, djo}, std::move(out));
    record_op(y, {u, w}, [&](TensorNode* on) {
        auto un = u.node(), wn = w.node();
        return [on, un, wn, B, I, J, di, djo]() {
            if (un->needs_grad) un->ensure_grad();
            if (wn->needs_grad) wn->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < I; ++i) {
                    const float* uv = un->data.data() + (b * I + i) * di;
                    float* du = un->needs_grad ? un->grad.data() + (b * I + i) * di : nullptr;
                    for (int64_t j = 0; j < J; ++j) {
                        const float* g = on->grad.data() + ((b * I + i) * J + j) * djo;
                        const float* wp = wn->data.data() + ((i * J + j) * di) * djo;
                        float* dw = wn->needs_grad ? wn->grad.data() + ((i * J + j) * di) * djo
                                                   : nullptr;
                        for (int64_t d = 0; d < di; ++d) {
                            const float* wr = wp + d * djo;
                            if (du) {
                                double acc = 0.0;
                                for (int64_t e = 0; e < djo; ++e)
                                    acc += static_cast<double>(g[e]) * wr[e];
                                du[d] += static_cast<float>(acc);
                            }
                            if (dw) {
                                float uvd = uv[d];
                                float* dwr = dw + d * djo;
                                for (int64_t e = 0; e < djo; ++e) dwr[e] += uvd * g[e];
                            }
                        }
                    }
                }
        };
    });
    return y;
}

Tensor routing_softmax(const Tensor& b) {
    if (b.rank() != 3) throw ShapeError("routing_softmax: expects logits [B,I,J]");
    return softmax_lastdim(b);
}

Tensor route_weighted_sum(const Tensor& c, const Tensor& u_hat) {
    if (c.rank() != 3 || u_hat.rank() != 4)
        throw ShapeError("route_weighted_sum: expects c[B,I,J], u_hat[B,I,J,D]");
    int64_t B = c.dim(0), I = c.dim(1), J = c.dim(2), D = u_hat.dim(3);
    if (u_hat.dim(0) != B || u_hat.dim(1) != I || u_hat.dim(2) != J)
        throw ShapeError("route_weighted_sum: c " + shape_str(c.shape()) + " vs u_hat " +
                         shape_str(u_hat.shape()));
    std::vector<float> out(static_cast<size_t>(B * J * D), 0.0f);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < I; ++i)
            for (int64_t j = 0; j < J; ++j) {
                float cv = c.data()[static_cast<size_t>((b * I + i) * J + j)];
                const float* uh = u_hat.data().data() + ((b * I + i) * J + j) * D;
                float* dst = out.data() + (b * J + j) * D;
                for (int64_t d = 0; d < D; ++d) dst[d] += cv * uh[d];
            }
    Tensor y = make_node({B, J, D}, std::move(out));
    record_op(y, {c, u_hat}, [&](TensorNode* on) {
        auto cn = c.node(), un = u_hat.node();
        return [on, cn, un, B, I, J, D]() {
            if (cn->needs_grad) cn->ensure_grad();
            if (un->needs_grad) un->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < I; ++i)
                    for (int64_t j = 0; j < J; ++j) {
                        const float* g = on->grad.data() + (b * J + j) * D;
                        const float* uh = un->data.data() + ((b * I + i) * J + j) * D;
                        if (cn->needs_grad) {
                            double acc = 0.0;
                            for (int64_t d = 0; d < D; ++d)
                                acc += static_cast<double>(g[d]) * uh[d];
                            cn->grad[static_cast<size_t>((b * I + i) * J + j)] +=
                                static_cast<float>(acc);
                        }
                        if (un->needs_grad) {
                            float cv = cn->data[static_cast<size_t>((b * I + i) * J + j)];
                            float* du = un->grad.data() + ((b * I + i) * J + j) * D;
                            for (int64_t d = 0; d < D; ++d) du[d] += cv * g[d];
                        }
                    }
        };
    });
    return y;
}

Tensor route_agreement(const Tensor& u_hat, const Tensor& v) {
    if (u_hat.rank() != 4 || v.rank() != 3)
        throw ShapeError("route_agreement: expects u_hat[B,I,J,D], v[B,J,D]");
    int64_t B = u_hat.dim(0), I = u_hat.dim(1), J = u_hat.dim(2), D = u_hat.dim(3);
    if (v.dim(0) != B || v.dim(1) != J || v.dim(2) != D)
        throw ShapeError("route_agreement: u_hat " + shape_str(u_hat.shape()) + " vs v " +
                         shape_str(v.shape()));
    std::vector<float> out(static_cast<size_t>(B * I * J));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < I; ++i)
            for (int64_t j = 0; j < J; ++j) {
                const float* uh = u_hat.data().data() + ((b * I + i) * J + j) * D;
                const float* vv = v.data().data() + (b * J + j) * D;
                double acc = 0.0;
                for (int64_t d = 0; d < D; ++d) acc += static_cast<double>(uh[d]) * vv[d];
                out[static_cast<size_t>((b * I + i) * J + j)] = static_cast<float>(acc);
            }
    Tensor y = make_node({B, I, J}, std::move(out));
    record_op(y, {u_hat, v}, [&](TensorNode* on) {
        auto un = u_hat.node(), vn = v.node();
        return [on, un, vn, B, I, J, D]() {
            if (un->needs_grad) un->ensure_grad();
            if (vn->needs_grad) vn->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < I; ++i)
                    for (int64_t j = 0; j < J; ++j) {
                        float g = on->grad[static_cast<size_t>((b * I + i) * J + j)];
                        const float* uh = un->data.data() + ((b * I + i) * J + j) * D;
                        const float* vv = vn->data.data() + (b * J + j) * D;
                        if (un->needs_grad) {
                            float* du = un->grad.data() + ((b * I + i) * J + j) * D;
                            for (int64_t d = 0; d < D; ++d) du[d] += g * vv[d];
                        }
                        if (vn->needs_grad) {
                            float* dv = vn->grad.data() + (b * J + j) * D;
                            for (int64_t d = 0; d < D; ++d) dv[d] += g * uh[d];
                        }
                    }
        };
    });
    return y;
}

Tensor dynamic_routing(const Tensor& u_hat, int iterations) {
    if (iterations < 1) throw UsageError("dynamic_routing: iterations must be >= 1");
    if (u_hat.rank() != 4) throw ShapeError("dynamic_routing: expects u_hat[B,I,J,D]");
    int64_t B = u_hat.dim(0), I = u_hat.dim(1), J = u_hat.dim(2);
    Tensor b = Tensor::zeros({B, I, J});
    Tensor v;
    for (int it = 0; it < iterations; ++it) {
        Tensor c = routing_softmax(b);
        Tensor s = route_weighted_sum(c, u_hat);
        v = squash(s);
        if (it + 1 < iterations) b = add(b, route_agreement(u_hat, v));
    }
    return v;
}

Tensor routed_capsules(const Tensor& u, const Tensor& w, int iterations) {
    return dynamic_routing(caps_predict(u, w), iterations);
}

Tensor primary_caps(const Tensor& features, int64_t dim) {
    if (features.rank() != 4) throw ShapeError("primary_caps: expects features [B,C,H,W]");
    int64_t B = features.dim(0), C = features.dim(1), H = features.dim(2), W = features.dim(3);
    if (dim < 1 || C % dim != 0)
        throw ShapeError("primary_caps: channel count " + std::to_string(C) +
                         " not divisible by capsule dim " + std::to_string(dim));
    int64_t T = C / dim, HW = H * W, J = T * HW;
    std::vector<float> out(static_cast<size_t>(B * J * dim));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < T; ++t)
            for (int64_t p = 0; p < HW; ++p) {
                float* dst = out.data() + ((b * J) + t * HW + p) * dim;
                for (int64_t d = 0; d < dim; ++d)
                    dst[d] = features.data()[static_cast<size_t>(((b * C) + t * dim + d) * HW + p)];
            }
    Tensor grouped = make_node({B, J, dim}, std::move(out));
    record_op(grouped, {features}, [&](TensorNode* on) {
        auto fn = features.node();
        return [on, fn, B, T, HW, dim, C, J]() {
            fn->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t p = 0; p < HW; ++p) {
                        const float* g = on->grad.data() + ((b * J) + t * HW + p) * dim;
                        for (int64_t d = 0; d < dim; ++d)
                            fn->grad[static_cast<size_t>(((b * C) + t * dim + d) * HW + p)] += g[d];
                    }
        };
    });
    return squash(grouped);
}

Tensor capsules_to_features(const Tensor& caps, int64_t channels, int64_t height, int64_t width) {
    if (caps.rank() != 3) throw ShapeError("capsules_to_features: expects caps [B,J,D]");
    int64_t B = caps.dim(0), J = caps.dim(1), D = caps.dim(2);
    int64_t HW = height * width;
    if (channels % D != 0 || (channels / D) * HW != J)
        throw ShapeError("capsules_to_features: " + shape_str(caps.shape()) +
                         " cannot fill [C,H,W] = [" + std::to_string(channels) + "," +
                         std::to_string(height) + "," + std::to_string(width) + "]");
    int64_t T = channels / D;
    std::vector<float> out(static_cast<size_t>(B * channels * HW));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < T; ++t)
            for (int64_t p = 0; p < HW; ++p) {
                const float* src = caps.data().data() + ((b * J) + t * HW + p) * D;
                for (int64_t d = 0; d < D; ++d)
                    out[static_cast<size_t>(((b * channels) + t * D + d) * HW + p)] = src[d];
            }
    Tensor y = make_node({B, channels, height, width}, std::move(out));
    record_op(y, {caps}, [&](TensorNode* on) {
        auto cn = caps.node();
        int64_t C = channels;
        return [on, cn, B, T, HW, D, C, J]() {
            cn->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t p = 0; p < HW; ++p) {
                        float* dg = cn->grad.data() + ((b * J) + t * HW + p) * D;
                        for (int64_t d = 0; d < D; ++d)
                            dg[d] += on->grad[static_cast<size_t>(((b * C) + t * D + d) * HW + p)];
                    }
        };
    });
    return y;
}

Tensor norm_lastdim(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("norm_lastdim: rank must be >= 2");
    int64_t D = x.dim(x.rank() - 1), R = x.numel() / D;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    std::vector<float> out(static_cast<size_t>(R));
    for (int64_t r = 0; r < R; ++r) {
        const float* src = x.data().data() + r * D;
        double q = 0.0;
        for (int64_t d = 0; d < D; ++d) q += static_cast<double>(src[d]) * src[d];
        out[static_cast<size_t>(r)] = static_cast<float>(std::sqrt(q));
    }
    Tensor y = make_node(std::move(out_shape), std::move(out));
    record_op(y, {x}, [&](TensorNode* on) {
        auto xn = x.node();
        return [on, xn, R, D]() {
            xn->ensure_grad();
            for (int64_t r = 0; r < R; ++r) {
                float n = std::max(on->data[static_cast<size_t>(r)], 1e-12f);
                float g = on->grad[static_cast<size_t>(r)] / n;
                const float* src = xn->data.data() + r * D;
                float* dst = xn->grad.data() + r * D;
                for (int64_t d = 0; d < D; ++d) dst[d] += g * src[d];
            }
        };
    });
    return y;
}

Tensor mask_by_norm(const Tensor& v) {
    if (v.rank() != 3) throw ShapeError("mask_by_norm: expects v[B,J,D]");
    int64_t B = v.dim(0), J = v.dim(1), D = v.dim(2);
    auto chosen = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(B));
    std::vector<float> out(static_cast<size_t>(B * D));
    for (int64_t b = 0; b < B; ++b) {
        double best = -1.0;
        int64_t best_j = 0;
        for (int64_t j = 0; j < J; ++j) {
            const float* src = v.data().data() + (b * J + j) * D;
            double q = 0.0;
            for (int64_t d = 0; d < D; ++d) q += static_cast<double>(src[d]) * src[d];
            if (q > best) {
                best = q;
                best_j = j;
            }
        }
        (*chosen)[static_cast<size_t>(b)] = best_j;
        const float* src = v.data().data() + (b * J + best_j) * D;
        std::copy(src, src + D, out.data() + b * D);
    }
    Tensor y = make_node({B, D}, std::move(out));
    record_op(y, {v}, [&](TensorNode* on) {
        auto vn = v.node();
        return [on, vn, chosen, B, J, D]() {
            vn->ensure_grad();
            for (int64_t b = 0; b < B; ++b) {
                int64_t j = (*chosen)[static_cast<size_t>(b)];
                const float* g = on->grad.data() + b * D;
                float* dv = vn->grad.data() + (b * J + j) * D;
                for (int64_t d = 0; d < D; ++d) dv[d] += g[d];
            }
        };
    });
    return y;
}

}  // namespace capsgan
