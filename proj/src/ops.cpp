#include "capsgan/ops.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>

extern "C" void openblas_set_num_threads(int);

namespace capsgan {

namespace {

// All BLAS work is pinned to one thread so every result is a fixed function
// of its inputs.
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit g_blas_init;

void sgemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha,
           const float* a, int64_t lda, const float* b, int64_t ldb, float beta, float* c,
           int64_t ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void accumulate(std::vector<float>& dst, const std::vector<float>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    Tensor y = make_node(a.shape(), std::move(out));
    record_op(y, {a, b}, [&](TensorNode* on) {
        auto an = a.node(), bn = b.node();
        return [on, an, bn]() {
            if (an->needs_grad) {
                an->ensure_grad();
                accumulate(an->grad, on->grad);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                accumulate(bn->grad, on->grad);
            }
        };
    });
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    Tensor y = make_node(a.shape(), std::move(out));
    record_op(y, {a, b}, [&](TensorNode* on) {
        auto an = a.node(), bn = b.node();
        return [on, an, bn]() {
            if (an->needs_grad) {
                an->ensure_grad();
                accumulate(an->grad, on->grad);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        };
    });
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    Tensor y = make_node(a.shape(), std::move(out));
    record_op(y, {a, b}, [&](TensorNode* on) {
        auto an = a.node(), bn = b.node();
        return [on, an, bn]() {
            if (an->needs_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->data[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->data[i];
            }
        };
    });
    return y;
}

Tensor add_scalar(const Tensor& a, float s) {
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    Tensor y = make_node(a.shape(), std::move(out));
    record_op(y, {a}, [&](TensorNode* on) {
        auto an = a.node();
        return [on, an]() {
            an->ensure_grad();
            accumulate(an->grad, on->grad);
        };
    });
    return y;
}

Tensor mul_scalar(const Tensor& a, float s) {
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    Tensor y = make_node(a.shape(), std::move(out));
    record_op(y, {a}, [&](TensorNode* on) {
        auto an = a.node();
        return [on, an, s]() {
            an->ensure_grad();
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
        };
    });
    return y;
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

Tensor one_minus(const Tensor& a) {
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0f - a.data()[i];
    Tensor y = make_node(a.shape(), std::move(out));
    record_op(y, {a}, [&](TensorNode* on) {
        auto an = a.node();
        return [on, an]() {
            an->ensure_grad();
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] -= on->grad[i];
        };
    });
    return y;
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    Tensor y = make_node({1}, {static_cast<float>(acc)});
    record_op(y, {a}, [&](TensorNode* on) {
        auto an = a.node();
        return [on, an]() {
            an->ensure_grad();
            float g = on->grad[0];
            for (auto& v : an->grad) v += g;
        };
    });
    return y;
}

Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    float inv_n = 1.0f / static_cast<float>(a.numel());
    Tensor y = make_node({1}, {static_cast<float>(acc / static_cast<double>(a.numel()))});
    record_op(y, {a}, [&](TensorNode* on) {
        auto an = a.node();
        return [on, an, inv_n]() {
            an->ensure_grad();
            float g = on->grad[0] * inv_n;
            for (auto& v : an->grad) v += g;
        };
    });
    return y;
}

Tensor log_clamped(const Tensor& a, float floor) {
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a.data()[i], floor));
    Tensor y = make_node(a.shape(), std::move(out));
    record_op(y, {a}, [&](TensorNode* on) {
        auto an = a.node();
        return [on, an, floor]() {
            an->ensure_grad();
            for (size_t i = 0; i < an->grad.size(); ++i)
                if (an->data[i] > floor) an->grad[i] += on->grad[i] / an->data[i];
        };
    });
    return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor y = make_node(std::move(shape), a.data());
    record_op(y, {a}, [&](TensorNode* on) {
        auto an = a.node();
        return [on, an]() {
            an->ensure_grad();
            accumulate(an->grad, on->grad);
        };
    });
    return y;
}

Tensor activate(const Tensor& x, Activation kind, float alpha) {
    std::vector<float> out(x.data().size());
    const auto& xv = x.data();
    switch (kind) {
        case Activation::relu:
            for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
            break;
        case Activation::leaky_relu:
            for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : alpha * xv[i];
            break;
        case Activation::tanh:
            for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
            break;
        case Activation::sigmoid:
            for (size_t i = 0; i < out.size(); ++i) {
                float v = xv[i];
                if (v >= 0.0f) {
                    out[i] = 1.0f / (1.0f + std::exp(-v));
                } else {
                    float e = std::exp(v);
                    out[i] = e / (1.0f + e);
                }
            }
            break;
    }
    Tensor y = make_node(x.shape(), std::move(out));
    record_op(y, {x}, [&](TensorNode* on) {
        auto xn = x.node();
        return [on, xn, kind, alpha]() {
            xn->ensure_grad();
            const auto& g = on->grad;
            switch (kind) {
                case Activation::relu:
                    for (size_t i = 0; i < g.size(); ++i)
                        if (xn->data[i] > 0.0f) xn->grad[i] += g[i];
                    break;
                case Activation::leaky_relu:
                    for (size_t i = 0; i < g.size(); ++i)
                        xn->grad[i] += g[i] * (xn->data[i] > 0.0f ? 1.0f : alpha);
                    break;
                case Activation::tanh:
                    for (size_t i = 0; i < g.size(); ++i) {
                        float y_i = on->data[i];
                        xn->grad[i] += g[i] * (1.0f - y_i * y_i);
                    }
                    break;
                case Activation::sigmoid:
                    for (size_t i = 0; i < g.size(); ++i) {
                        float y_i = on->data[i];
                        xn->grad[i] += g[i] * y_i * (1.0f - y_i);
                    }
                    break;
            }
        };
    });
    return y;
}

// ---------------------------------------------------------------------------
// matmul / dense
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    std::vector<float> out(static_cast<size_t>(m * n), 0.0f);
    sgemm(false, false, m, n, k, 1.0f, a.data().data(), k, b.data().data(), n, 0.0f, out.data(), n);
    Tensor y = make_node({m, n}, std::move(out));
    record_op(y, {a, b}, [&](TensorNode* on) {
        auto an = a.node(), bn = b.node();
        return [on, an, bn, m, n, k]() {
            if (an->needs_grad) {
                an->ensure_grad();
                // dA += dC * B^T
                sgemm(false, true, m, k, n, 1.0f, on->grad.data(), n, bn->data.data(), n, 1.0f,
                      an->grad.data(), k);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                // dB += A^T * dC
                sgemm(true, false, k, n, m, 1.0f, an->data.data(), k, on->grad.data(), n, 1.0f,
                      bn->grad.data(), n);
            }
        };
    });
    return y;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1)
        throw ShapeError("dense: expects x[N,p], w[p,q], bias[q]");
    int64_t n = x.dim(0), p = x.dim(1), q = w.dim(1);
    if (w.dim(0) != p || bias.dim(0) != q)
        throw ShapeError("dense: mismatched shapes x" + shape_str(x.shape()) + " w" +
                         shape_str(w.shape()) + " bias" + shape_str(bias.shape()));
    std::vector<float> out(static_cast<size_t>(n * q));
    for (int64_t i = 0; i < n; ++i)
        std::memcpy(out.data() + i * q, bias.data().data(), static_cast<size_t>(q) * sizeof(float));
    sgemm(false, false, n, q, p, 1.0f, x.data().data(), p, w.data().data(), q, 1.0f, out.data(), q);
    Tensor y = make_node({n, q}, std::move(out));
    record_op(y, {x, w, bias}, [&](TensorNode* on) {
        auto xn = x.node(), wn = w.node(), bn = bias.node();
        return [on, xn, wn, bn, n, p, q]() {
            if (xn->needs_grad) {
                xn->ensure_grad();
                sgemm(false, true, n, p, q, 1.0f, on->grad.data(), q, wn->data.data(), q, 1.0f,
                      xn->grad.data(), p);
            }
            if (wn->needs_grad) {
                wn->ensure_grad();
                sgemm(true, false, p, q, n, 1.0f, xn->data.data(), p, on->grad.data(), q, 1.0f,
                      wn->grad.data(), q);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < q; ++j) bn->grad[static_cast<size_t>(j)] += on->grad[static_cast<size_t>(i * q + j)];
            }
        };
    });
    return y;
}

// ---------------------------------------------------------------------------
// Convolution via im2col + GEMM, processed in sample groups to bound the
// scratch size.
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
    int64_t C, H, W;      // input
    int64_t F, kh, kw;    // kernels
    int64_t OH, OW;       // conv output
    int64_t stride, pad;
    int64_t ckk() const { return C * kh * kw; }
    int64_t pos() const { return OH * OW; }
};

// col is [CKK, G*P]; sample g occupies columns [g*P, (g+1)*P)
void im2col(const float* x, const ConvGeom& g, float* col, int64_t group, int64_t group_size) {
    int64_t P = g.pos(), cols = group_size * P;
    for (int64_t c = 0; c < g.C; ++c) {
        const float* xc = x + c * g.H * g.W;
        for (int64_t ki = 0; ki < g.kh; ++ki) {
            for (int64_t kj = 0; kj < g.kw; ++kj) {
                float* row = col + ((c * g.kh + ki) * g.kw + kj) * cols + group * P;
                for (int64_t oy = 0; oy < g.OH; ++oy) {
                    int64_t iy = oy * g.stride - g.pad + ki;
                    float* dst = row + oy * g.OW;
                    if (iy < 0 || iy >= g.H) {
                        std::memset(dst, 0, static_cast<size_t>(g.OW) * sizeof(float));
                        continue;
                    }
                    const float* src = xc + iy * g.W;
                    for (int64_t ox = 0; ox < g.OW; ++ox) {
                        int64_t ix = ox * g.stride - g.pad + kj;
                        dst[ox] = (ix >= 0 && ix < g.W) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

// scatter-add transpose of im2col
void col2im_add(const float* col, const ConvGeom& g, float* x, int64_t group,
                int64_t group_size) {
    int64_t P = g.pos(), cols = group_size * P;
    for (int64_t c = 0; c < g.C; ++c) {
        float* xc = x + c * g.H * g.W;
        for (int64_t ki = 0; ki < g.kh; ++ki) {
            for (int64_t kj = 0; kj < g.kw; ++kj) {
                const float* row = col + ((c * g.kh + ki) * g.kw + kj) * cols + group * P;
                for (int64_t oy = 0; oy < g.OH; ++oy) {
                    int64_t iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.H) continue;
                    float* dst = xc + iy * g.W;
                    const float* src = row + oy * g.OW;
                    for (int64_t ox = 0; ox < g.OW; ++ox) {
                        int64_t ix = ox * g.stride - g.pad + kj;
                        if (ix >= 0 && ix < g.W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

int64_t conv_group_size(const ConvGeom& g, int64_t batch) {
    int64_t per_sample_bytes = g.ckk() * g.pos() * static_cast<int64_t>(sizeof(float));
    int64_t target = 48ll * 1024 * 1024;
    int64_t gs = std::max<int64_t>(1, target / std::max<int64_t>(per_sample_bytes, 1));
    return std::min<int64_t>({gs, batch, 32});
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride, int pad) {
    if (x.rank() != 4 || kernels.rank() != 4)
        throw ShapeError("conv2d: expects x[N,C,H,W], kernels[F,C,kh,kw]");
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t F = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    if (kernels.dim(1) != C)
        throw ShapeError("conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                         " != input channels " + std::to_string(C));
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        throw ShapeError("conv2d: kernel larger than padded input");
    ConvGeom geom{C, H, W, F, kh, kw, (H + 2 * pad - kh) / stride + 1,
                  (W + 2 * pad - kw) / stride + 1, stride, pad};
    int64_t P = geom.pos(), CKK = geom.ckk();
    int64_t GS = conv_group_size(geom, N);

    std::vector<float> out(static_cast<size_t>(N * F * P));
    {
        std::vector<float> col;
        std::vector<float> block;
        for (int64_t n0 = 0; n0 < N; n0 += GS) {
            int64_t g_count = std::min(GS, N - n0);
            col.assign(static_cast<size_t>(CKK * g_count * P), 0.0f);
            block.assign(static_cast<size_t>(F * g_count * P), 0.0f);
            for (int64_t g = 0; g < g_count; ++g)
                im2col(x.data().data() + (n0 + g) * C * H * W, geom, col.data(), g, g_count);
            sgemm(false, false, F, g_count * P, CKK, 1.0f, kernels.data().data(), CKK, col.data(),
                  g_count * P, 0.0f, block.data(), g_count * P);
            // block[f, g*P + p] -> out[n0+g, f, p]
            for (int64_t g = 0; g < g_count; ++g)
                for (int64_t f = 0; f < F; ++f)
                    std::memcpy(out.data() + ((n0 + g) * F + f) * P,
                                block.data() + (f * g_count + g) * P,
                                static_cast<size_t>(P) * sizeof(float));
        }
    }
    Tensor y = make_node({N, F, geom.OH, geom.OW}, std::move(out));
    record_op(y, {x, kernels}, [&](TensorNode* on) {
        auto xn = x.node(), kn = kernels.node();
        return [on, xn, kn, geom, N, GS]() {
            int64_t C = geom.C, H = geom.H, W = geom.W, F = geom.F;
            int64_t P = geom.pos(), CKK = geom.ckk();
            if (xn->needs_grad) xn->ensure_grad();
            if (kn->needs_grad) kn->ensure_grad();
            std::vector<float> col, dy_block, dcol;
            for (int64_t n0 = 0; n0 < N; n0 += GS) {
                int64_t g_count = std::min(GS, N - n0);
                dy_block.assign(static_cast<size_t>(F * g_count * P), 0.0f);
                for (int64_t g = 0; g < g_count; ++g)
                    for (int64_t f = 0; f < F; ++f)
                        std::memcpy(dy_block.data() + (f * g_count + g) * P,
                                    on->grad.data() + ((n0 + g) * F + f) * P,
                                    static_cast<size_t>(P) * sizeof(float));
                if (kn->needs_grad) {
                    col.assign(static_cast<size_t>(CKK * g_count * P), 0.0f);
                    for (int64_t g = 0; g < g_count; ++g)
                        im2col(xn->data.data() + (n0 + g) * C * H * W, geom, col.data(), g,
                               g_count);
                    // dW += dY_block * col^T
                    sgemm(false, true, F, CKK, g_count * P, 1.0f, dy_block.data(), g_count * P,
                          col.data(), g_count * P, 1.0f, kn->grad.data(), CKK);
                }
                if (xn->needs_grad) {
                    dcol.assign(static_cast<size_t>(CKK * g_count * P), 0.0f);
                    // dcol = W^T * dY_block
                    sgemm(true, false, CKK, g_count * P, F, 1.0f, kn->data.data(), CKK,
                          dy_block.data(), g_count * P, 0.0f, dcol.data(), g_count * P);
                    for (int64_t g = 0; g < g_count; ++g)
                        col2im_add(dcol.data(), geom, xn->grad.data() + (n0 + g) * C * H * W, g,
                                   g_count);
                }
            }
        };
    });
    return y;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& kernels, int stride, int pad) {
    if (x.rank() != 4 || kernels.rank() != 4)
        throw ShapeError("conv_transpose2d: expects x[N,C,H,W], kernels[C,F,kh,kw]");
    if (stride < 1 || pad < 0)
        throw ShapeError("conv_transpose2d: stride must be >= 1 and pad >= 0");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t F = kernels.dim(1), kh = kernels.dim(2), kw = kernels.dim(3);
    if (kernels.dim(0) != C)
        throw ShapeError("conv_transpose2d: kernel leading dim " + std::to_string(kernels.dim(0)) +
                         " != input channels " + std::to_string(C));
    int64_t OH = (H - 1) * stride - 2 * pad + kh;
    int64_t OW = (W - 1) * stride - 2 * pad + kw;
    if (OH < 1 || OW < 1) throw ShapeError("conv_transpose2d: output size below 1");

    // Geometry of the conv this op is adjoint to: maps [F,OH,OW] -> [C,H,W].
    ConvGeom geom{F, OH, OW, C, kh, kw, H, W, stride, pad};
    int64_t P = geom.pos();      // = H*W
    int64_t FKK = geom.ckk();    // = F*kh*kw
    int64_t GS = conv_group_size(geom, N);

    std::vector<float> out(static_cast<size_t>(N * F * OH * OW), 0.0f);
    {
        std::vector<float> xblock, coly;
        for (int64_t n0 = 0; n0 < N; n0 += GS) {
            int64_t g_count = std::min(GS, N - n0);
            // xblock[c, g*P + p] = x[n0+g, c, p]
            xblock.assign(static_cast<size_t>(C * g_count * P), 0.0f);
            for (int64_t g = 0; g < g_count; ++g)
                for (int64_t c = 0; c < C; ++c)
                    std::memcpy(xblock.data() + (c * g_count + g) * P,
                                x.data().data() + ((n0 + g) * C + c) * P,
                                static_cast<size_t>(P) * sizeof(float));
            coly.assign(static_cast<size_t>(FKK * g_count * P), 0.0f);
            // col_y = K^T * x  with K viewed as [C, FKK]
            sgemm(true, false, FKK, g_count * P, C, 1.0f, kernels.data().data(), FKK,
                  xblock.data(), g_count * P, 0.0f, coly.data(), g_count * P);
            for (int64_t g = 0; g < g_count; ++g)
                col2im_add(coly.data(), geom, out.data() + (n0 + g) * F * OH * OW, g, g_count);
        }
    }
    Tensor y = make_node({N, F, OH, OW}, std::move(out));
    record_op(y, {x, kernels}, [&](TensorNode* on) {
        auto xn = x.node(), kn = kernels.node();
        return [on, xn, kn, geom, N, GS, C, F, OH, OW]() {
            int64_t P = geom.pos(), FKK = geom.ckk();
            if (xn->needs_grad) xn->ensure_grad();
            if (kn->needs_grad) kn->ensure_grad();
            std::vector<float> dycol, dxblock, xblock;
            for (int64_t n0 = 0; n0 < N; n0 += GS) {
                int64_t g_count = std::min(GS, N - n0);
                dycol.assign(static_cast<size_t>(FKK * g_count * P), 0.0f);
                for (int64_t g = 0; g < g_count; ++g)
                    im2col(on->grad.data() + (n0 + g) * F * OH * OW, geom, dycol.data(), g,
                           g_count);
                if (xn->needs_grad) {
                    // dx = K * im2col(dy)
                    dxblock.assign(static_cast<size_t>(C * g_count * P), 0.0f);
                    sgemm(false, false, C, g_count * P, FKK, 1.0f, kn->data.data(), FKK,
                          dycol.data(), g_count * P, 0.0f, dxblock.data(), g_count * P);
                    for (int64_t g = 0; g < g_count; ++g)
                        for (int64_t c = 0; c < C; ++c) {
                            const float* src = dxblock.data() + (c * g_count + g) * P;
                            float* dst = xn->grad.data() + ((n0 + g) * C + c) * P;
                            for (int64_t p = 0; p < P; ++p) dst[p] += src[p];
                        }
                }
                if (kn->needs_grad) {
                    // dK += x * im2col(dy)^T
                    xblock.assign(static_cast<size_t>(C * g_count * P), 0.0f);
                    for (int64_t g = 0; g < g_count; ++g)
                        for (int64_t c = 0; c < C; ++c)
                            std::memcpy(xblock.data() + (c * g_count + g) * P,
                                        xn->data.data() + ((n0 + g) * C + c) * P,
                                        static_cast<size_t>(P) * sizeof(float));
                    sgemm(false, true, C, FKK, g_count * P, 1.0f, xblock.data(), g_count * P,
                          dycol.data(), g_count * P, 1.0f, kn->grad.data(), FKK);
                }
            }
        };
    });
    return y;
}

Tensor bias_channel(const Tensor& x, const Tensor& bias) {
    if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw ShapeError("bias_channel: expects x[N,C,...], bias[C]");
    int64_t N = x.dim(0), C = x.dim(1), S = x.numel() / (N * C);
    std::vector<float> out(x.data().size());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            float b = bias.data()[static_cast<size_t>(c)];
            const float* src = x.data().data() + (n * C + c) * S;
            float* dst = out.data() + (n * C + c) * S;
            for (int64_t s = 0; s < S; ++s) dst[s] = src[s] + b;
        }
    Tensor y = make_node(x.shape(), std::move(out));
    record_op(y, {x, bias}, [&](TensorNode* on) {
        auto xn = x.node(), bn = bias.node();
        return [on, xn, bn, N, C, S]() {
            if (xn->needs_grad) {
                xn->ensure_grad();
                accumulate(xn->grad, on->grad);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const float* g = on->grad.data() + (n * C + c) * S;
                        double acc = 0.0;
                        for (int64_t s = 0; s < S; ++s) acc += g[s];
                        bn->grad[static_cast<size_t>(c)] += static_cast<float>(acc);
                    }
            }
        };
    });
    return y;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, float eps, float momentum, bool train) {
    if (x.rank() < 2) throw ShapeError("batch_norm: expects x[N,C,...]");
    int64_t N = x.dim(0), C = x.dim(1), S = x.numel() / (N * C);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        throw ShapeError("batch_norm: parameter length != channel count");
    if (eps <= 0.0f) throw UsageError("batch_norm: eps must be positive");

    int64_t M = N * S;
    std::vector<float> mean_c(static_cast<size_t>(C)), inv_std_c(static_cast<size_t>(C));
    if (train) {
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const float* src = x.data().data() + (n * C + c) * S;
                for (int64_t s = 0; s < S; ++s) acc += src[s];
            }
            double mu = acc / static_cast<double>(M);
            double var_acc = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const float* src = x.data().data() + (n * C + c) * S;
                for (int64_t s = 0; s < S; ++s) {
                    double d = src[s] - mu;
                    var_acc += d * d;
                }
            }
            double var = var_acc / static_cast<double>(M);
            mean_c[static_cast<size_t>(c)] = static_cast<float>(mu);
            inv_std_c[static_cast<size_t>(c)] =
                static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            running_mean.data()[static_cast<size_t>(c)] =
                momentum * running_mean.data()[static_cast<size_t>(c)] +
                (1.0f - momentum) * static_cast<float>(mu);
            running_var.data()[static_cast<size_t>(c)] =
                momentum * running_var.data()[static_cast<size_t>(c)] +
                (1.0f - momentum) * static_cast<float>(var);
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean_c[static_cast<size_t>(c)] = running_mean.data()[static_cast<size_t>(c)];
            inv_std_c[static_cast<size_t>(c)] = 1.0f / std::sqrt(running_var.data()[static_cast<size_t>(c)] + eps);
        }
    }

    auto xhat = std::make_shared<std::vector<float>>(x.data().size());
    std::vector<float> out(x.data().size());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            float mu = mean_c[static_cast<size_t>(c)], is = inv_std_c[static_cast<size_t>(c)];
            float gm = gamma.data()[static_cast<size_t>(c)], bt = beta.data()[static_cast<size_t>(c)];
            const float* src = x.data().data() + (n * C + c) * S;
            float* xh = xhat->data() + (n * C + c) * S;
            float* dst = out.data() + (n * C + c) * S;
            for (int64_t s = 0; s < S; ++s) {
                xh[s] = (src[s] - mu) * is;
                dst[s] = gm * xh[s] + bt;
            }
        }
    Tensor y = make_node(x.shape(), std::move(out));
    record_op(y, {x, gamma, beta}, [&](TensorNode* on) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node();
        auto inv_std = std::make_shared<std::vector<float>>(inv_std_c);
        return [on, xn, gn, bn, xhat, inv_std, N, C, S, M, train]() {
            if (gn->needs_grad) gn->ensure_grad();
            if (bn->needs_grad) bn->ensure_grad();
            if (xn->needs_grad) xn->ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const float* g = on->grad.data() + (n * C + c) * S;
                    const float* xh = xhat->data() + (n * C + c) * S;
                    for (int64_t s = 0; s < S; ++s) {
                        sum_g += g[s];
                        sum_gx += static_cast<double>(g[s]) * xh[s];
                    }
                }
                if (bn->needs_grad) bn->grad[static_cast<size_t>(c)] += static_cast<float>(sum_g);
                if (gn->needs_grad) gn->grad[static_cast<size_t>(c)] += static_cast<float>(sum_gx);
                if (!xn->needs_grad) continue;
                float gm = gn->data[static_cast<size_t>(c)];
                float is = (*inv_std)[static_cast<size_t>(c)];
                if (train) {
                    float k = gm * is / static_cast<float>(M);
                    float mg = static_cast<float>(sum_g), mgx = static_cast<float>(sum_gx);
                    for (int64_t n = 0; n < N; ++n) {
                        const float* g = on->grad.data() + (n * C + c) * S;
                        const float* xh = xhat->data() + (n * C + c) * S;
                        float* dx = xn->grad.data() + (n * C + c) * S;
                        for (int64_t s = 0; s < S; ++s)
                            dx[s] += k * (static_cast<float>(M) * g[s] - mg - xh[s] * mgx);
                    }
                } else {
                    float k = gm * is;
                    for (int64_t n = 0; n < N; ++n) {
                        const float* g = on->grad.data() + (n * C + c) * S;
                        float* dx = xn->grad.data() + (n * C + c) * S;
                        for (int64_t s = 0; s < S; ++s) dx[s] += k * g[s];
                    }
                }
            }
        };
    });
    return y;
}

Tensor dropout(const Tensor& x, float rate, Rng& rng, bool train) {
    if (rate < 0.0f || rate >= 1.0f) throw UsageError("dropout: rate must be in [0,1)");
    if (!train || rate == 0.0f) return x;
    float scale = 1.0f / (1.0f - rate);
    auto mask = std::make_shared<std::vector<float>>(x.data().size());
    std::vector<float> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        float m = rng.uniform() >= rate ? scale : 0.0f;
        (*mask)[i] = m;
        out[i] = x.data()[i] * m;
    }
    Tensor y = make_node(x.shape(), std::move(out));
    record_op(y, {x}, [&](TensorNode* on) {
        auto xn = x.node();
        return [on, xn, mask]() {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i] * (*mask)[i];
        };
    });
    return y;
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax_lastdim: rank must be >= 1");
    int64_t D = x.dim(x.rank() - 1), R = x.numel() / D;
    std::vector<float> out(x.data().size());
    for (int64_t r = 0; r < R; ++r) {
        const float* src = x.data().data() + r * D;
        float* dst = out.data() + r * D;
        float mx = src[0];
        for (int64_t i = 1; i < D; ++i) mx = std::max(mx, src[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < D; ++i) {
            dst[i] = std::exp(src[i] - mx);
            denom += dst[i];
        }
        float inv = static_cast<float>(1.0 / denom);
        for (int64_t i = 0; i < D; ++i) dst[i] *= inv;
    }
    Tensor y = make_node(x.shape(), std::move(out));
    record_op(y, {x}, [&](TensorNode* on) {
        auto xn = x.node();
        return [on, xn, R, D]() {
            xn->ensure_grad();
            for (int64_t r = 0; r < R; ++r) {
                const float* p = on->data.data() + r * D;
                const float* g = on->grad.data() + r * D;
                float* dx = xn->grad.data() + r * D;
                double dot = 0.0;
                for (int64_t i = 0; i < D; ++i) dot += static_cast<double>(g[i]) * p[i];
                float d = static_cast<float>(dot);
                for (int64_t i = 0; i < D; ++i) dx[i] += p[i] * (g[i] - d);
            }
        };
    });
    return y;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: expects logits[N,K]");
    int64_t N = logits.dim(0), K = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != N)
        throw ShapeError("softmax_cross_entropy: label count != rows");
    for (int lb : labels)
        if (lb < 0 || lb >= K) throw UsageError("softmax_cross_entropy: label out of range");

    auto probs = std::make_shared<std::vector<float>>(logits.data().size());
    double loss_acc = 0.0;
    for (int64_t r = 0; r < N; ++r) {
        const float* src = logits.data().data() + r * K;
        float* p = probs->data() + r * K;
        float mx = src[0];
        for (int64_t i = 1; i < K; ++i) mx = std::max(mx, src[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < K; ++i) {
            p[i] = std::exp(src[i] - mx);
            denom += p[i];
        }
        float inv = static_cast<float>(1.0 / denom);
        for (int64_t i = 0; i < K; ++i) p[i] *= inv;
        loss_acc -= std::log(std::max(static_cast<double>(p[labels[static_cast<size_t>(r)]]), 1e-12));
    }
    Tensor y = make_node({1}, {static_cast<float>(loss_acc / static_cast<double>(N))});
    record_op(y, {logits}, [&](TensorNode* on) {
        auto xn = logits.node();
        auto lbl = std::make_shared<std::vector<int>>(labels);
        return [on, xn, probs, lbl, N, K]() {
            xn->ensure_grad();
            float g = on->grad[0] / static_cast<float>(N);
            for (int64_t r = 0; r < N; ++r) {
                const float* p = probs->data() + r * K;
                float* dx = xn->grad.data() + r * K;
                int target = (*lbl)[static_cast<size_t>(r)];
                for (int64_t i = 0; i < K; ++i)
                    dx[i] += g * (p[i] - (i == target ? 1.0f : 0.0f));
            }
        };
    });
    return y;
}

// ---------------------------------------------------------------------------
// Structured ops
// ---------------------------------------------------------------------------

Tensor outer_product(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw ShapeError("outer_product: expects a[B,p], b[B,q]");
    int64_t B = a.dim(0), p = a.dim(1), q = b.dim(1);
    std::vector<float> out(static_cast<size_t>(B * p * q));
    for (int64_t n = 0; n < B; ++n)
        for (int64_t i = 0; i < p; ++i) {
            float av = a.data()[static_cast<size_t>(n * p + i)];
            const float* bv = b.data().data() + n * q;
            float* dst = out.data() + (n * p + i) * q;
            for (int64_t j = 0; j < q; ++j) dst[j] = av * bv[j];
        }
    Tensor y = make_node({B, p, q}, std::move(out));
    record_op(y, {a, b}, [&](TensorNode* on) {
        auto an = a.node(), bn = b.node();
        return [on, an, bn, B, p, q]() {
            if (an->needs_grad) {
                an->ensure_grad();
                for (int64_t n = 0; n < B; ++n)
                    for (int64_t i = 0; i < p; ++i) {
                        const float* g = on->grad.data() + (n * p + i) * q;
                        const float* bv = bn->data.data() + n * q;
                        double acc = 0.0;
                        for (int64_t j = 0; j < q; ++j) acc += static_cast<double>(g[j]) * bv[j];
                        an->grad[static_cast<size_t>(n * p + i)] += static_cast<float>(acc);
                    }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t n = 0; n < B; ++n)
                    for (int64_t i = 0; i < p; ++i) {
                        const float* g = on->grad.data() + (n * p + i) * q;
                        float av = an->data[static_cast<size_t>(n * p + i)];
                        float* db = bn->grad.data() + n * q;
                        for (int64_t j = 0; j < q; ++j) db[j] += g[j] * av;
                    }
            }
        };
    });
    return y;
}

Tensor contract_axis1(const Tensor& x, const Tensor& w) {
    if (x.rank() != 3 || w.rank() != 1 || w.dim(0) != x.dim(1))
        throw ShapeError("contract_axis1: expects x[B,p,q], w[p]");
    int64_t B = x.dim(0), p = x.dim(1), q = x.dim(2);
    std::vector<float> out(static_cast<size_t>(B * q), 0.0f);
    for (int64_t n = 0; n < B; ++n)
        for (int64_t i = 0; i < p; ++i) {
            float wv = w.data()[static_cast<size_t>(i)];
            const float* src = x.data().data() + (n * p + i) * q;
            float* dst = out.data() + n * q;
            for (int64_t j = 0; j < q; ++j) dst[j] += wv * src[j];
        }
    Tensor y = make_node({B, q}, std::move(out));
    record_op(y, {x, w}, [&](TensorNode* on) {
        auto xn = x.node(), wn = w.node();
        return [on, xn, wn, B, p, q]() {
            if (xn->needs_grad) {
                xn->ensure_grad();
                for (int64_t n = 0; n < B; ++n)
                    for (int64_t i = 0; i < p; ++i) {
                        float wv = wn->data[static_cast<size_t>(i)];
                        const float* g = on->grad.data() + n * q;
                        float* dx = xn->grad.data() + (n * p + i) * q;
                        for (int64_t j = 0; j < q; ++j) dx[j] += wv * g[j];
                    }
            }
            if (wn->needs_grad) {
                wn->ensure_grad();
                for (int64_t i = 0; i < p; ++i) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < B; ++n) {
                        const float* g = on->grad.data() + n * q;
                        const float* src = xn->data.data() + (n * p + i) * q;
                        for (int64_t j = 0; j < q; ++j) acc += static_cast<double>(g[j]) * src[j];
                    }
                    wn->grad[static_cast<size_t>(i)] += static_cast<float>(acc);
                }
            }
        };
    });
    return y;
}

}  // namespace capsgan
