#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "fogseg/tensor.hpp"

namespace fogseg::ops {

struct ConvGeom {
    int sh = 1, sw = 1;  // stride
    int ph = 0, pw = 0;  // zero padding
    int dh = 1, dw = 1;  // dilation
};

struct DeconvGeom {
    int sh = 1, sw = 1;
    int ph = 0, pw = 0;
    int oph = 0, opw = 0;  // output padding
};

namespace detail {
using fogseg::detail::check_finite;
using fogseg::detail::grad_acc;
using fogseg::detail::record_op;

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int M, int K, int N, const T* __restrict__ A, const T* __restrict__ B,
             T* __restrict__ C) {
    for (int i = 0; i < M; ++i) {
        T* __restrict__ c = C + static_cast<size_t>(i) * N;
        const T* arow = A + static_cast<size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const T a = arow[k];
            const T* __restrict__ b = B + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(int M, int K, int N, const T* __restrict__ A, const T* __restrict__ B,
             T* __restrict__ C) {
    for (int i = 0; i < M; ++i) {
        const T* arow = A + static_cast<size_t>(i) * K;
        T* crow = C + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* brow = B + static_cast<size_t>(j) * K;
            T acc = T(0);
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int M, int K, int N, const T* __restrict__ A, const T* __restrict__ B,
             T* __restrict__ C) {
    for (int k = 0; k < K; ++k) {
        const T* arow = A + static_cast<size_t>(k) * M;
        const T* __restrict__ b = B + static_cast<size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const T a = arow[i];
            T* __restrict__ c = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

inline int conv_out_dim(int in, int k, int stride, int pad, int dil) {
    return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

// Unfolds one [C,H,W] plane into col[C*kh*kw, Hout*Wout].
template <typename T>
void im2col(const T* src, int C, int H, int W, int kh, int kw, const ConvGeom& g,
            int Hout, int Wout, T* col) {
    const int P = Hout * Wout;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                T* dst = col + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) * P;
                for (int oy = 0; oy < Hout; ++oy) {
                    const int iy = oy * g.sh - g.ph + ki * g.dh;
                    T* drow = dst + static_cast<size_t>(oy) * Wout;
                    if (iy < 0 || iy >= H) {
                        std::fill(drow, drow + Wout, T(0));
                        continue;
                    }
                    const T* srow = src + (static_cast<size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wout; ++ox) {
                        const int ix = ox * g.sw - g.pw + kj * g.dw;
                        drow[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add of col[C*kh*kw, Hout*Wout] back into a [C,H,W] plane.
template <typename T>
void col2im(const T* col, int C, int H, int W, int kh, int kw, const ConvGeom& g,
            int Hout, int Wout, T* dst) {
    const int P = Hout * Wout;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const T* srcrow = col + (static_cast<size_t>(c) * kh * kw + ki * kw + kj) * P;
                for (int oy = 0; oy < Hout; ++oy) {
                    const int iy = oy * g.sh - g.ph + ki * g.dh;
                    if (iy < 0 || iy >= H) continue;
                    T* drow = dst + (static_cast<size_t>(c) * H + iy) * W;
                    const T* srow = srcrow + static_cast<size_t>(oy) * Wout;
                    for (int ox = 0; ox < Wout; ++ox) {
                        const int ix = ox * g.sw - g.pw + kj * g.dw;
                        if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

inline bool unit_geom(const ConvGeom& g, int kh, int kw) {
    return kh == 1 && kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0;
}

template <typename T>
void expect_rank(const Tensor<T>& t, int r, const char* op, const char* arg) {
    check(t.defined(), op, ": ", arg, " is undefined");
    check(t.rank() == r, op, ": ", arg, " must be rank-", r, ", got shape ", shape_str(t));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

// weight layout [Cout, Cin, kh, kw]; bias [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 ConvGeom g = {}) {
    using namespace detail;
    expect_rank(x, 4, "conv2d", "input");
    expect_rank(w, 4, "conv2d", "weight");
    check(g.sh >= 1 && g.sw >= 1, "conv2d: stride must be >= 1");
    check(g.dh >= 1 && g.dw >= 1, "conv2d: dilation must be >= 1");
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(1) == Cin, "conv2d: input channel dimension ", Cin,
          " does not match weight channel dimension ", w.dim(1));
    if (bias.defined())
        check(bias.rank() == 1 && bias.dim(0) == Cout,
              "conv2d: bias dimension must be [", Cout, "], got ", shape_str(bias));
    const int Hout = conv_out_dim(H, kh, g.sh, g.ph, g.dh);
    const int Wout = conv_out_dim(W, kw, g.sw, g.pw, g.dw);
    check(Hout >= 1, "conv2d: kernel height ", kh, " (dilation ", g.dh,
          ") does not fit padded input height ", H + 2 * g.ph);
    check(Wout >= 1, "conv2d: kernel width ", kw, " (dilation ", g.dw,
          ") does not fit padded input width ", W + 2 * g.pw);

    const int CKK = Cin * kh * kw, P = Hout * Wout;
    const bool direct = unit_geom(g, kh, kw);
    Tensor<T> y({N, Cout, Hout, Wout});
    std::vector<T> col(direct ? 0 : static_cast<size_t>(CKK) * P);
    for (int n = 0; n < N; ++n) {
        const T* xn = x.data() + static_cast<size_t>(n) * Cin * H * W;
        const T* colp = xn;
        if (!direct) {
            im2col(xn, Cin, H, W, kh, kw, g, Hout, Wout, col.data());
            colp = col.data();
        }
        T* yn = y.data() + static_cast<size_t>(n) * Cout * P;
        gemm_nn(Cout, CKK, P, w.data(), colp, yn);
        if (bias.defined()) {
            for (int c = 0; c < Cout; ++c) {
                const T b = bias.data()[c];
                T* row = yn + static_cast<size_t>(c) * P;
                for (int p = 0; p < P; ++p) row[p] += b;
            }
        }
    }
    check_finite("conv2d", y);

    auto xd = x.ptr();
    auto wd = w.ptr();
    auto bd = bias.defined() ? bias.ptr() : nullptr;
    auto yd = y.ptr();
    record_op("conv2d", {&x, &w, &bias}, y, [=]() {
        const std::vector<T>& gy = yd->grad;
        std::vector<T> col(static_cast<size_t>(CKK) * P);
        std::vector<T> dcol;
        for (int n = 0; n < N; ++n) {
            const T* xn = xd->values.data() + static_cast<size_t>(n) * Cin * H * W;
            const T* gyn = gy.data() + static_cast<size_t>(n) * Cout * P;
            const T* colp = xn;
            if (!direct) {
                im2col(xn, Cin, H, W, kh, kw, g, Hout, Wout, col.data());
                colp = col.data();
            }
            if (wd->requires_grad)
                gemm_nt(Cout, P, CKK, gyn, colp, grad_acc(wd).data());
            if (xd->requires_grad) {
                T* gx = grad_acc(xd).data() + static_cast<size_t>(n) * Cin * H * W;
                if (direct) {
                    // col2im is an identity scatter for the 1x1 geometry
                    gemm_tn(CKK, Cout, P, wd->values.data(), gyn, gx);
                } else {
                    dcol.assign(static_cast<size_t>(CKK) * P, T(0));
                    gemm_tn(CKK, Cout, P, wd->values.data(), gyn, dcol.data());
                    col2im(dcol.data(), Cin, H, W, kh, kw, g, Hout, Wout, gx);
                }
            }
        }
        if (bd && bd->requires_grad) {
            T* gb = grad_acc(bd).data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < Cout; ++c) {
                    const T* row = gy.data() + (static_cast<size_t>(n) * Cout + c) * P;
                    T acc = T(0);
                    for (int p = 0; p < P; ++p) acc += row[p];
                    gb[c] += acc;
                }
        }
    });
    return y;
}

// Adjoint of conv2d: <conv2d(x,w), y> == <x, conv_transpose2d(y,w)> with the
// same [Cout, Cin, kh, kw] weight; input channels = Cout, output = Cin.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           DeconvGeom dg = {}) {
    using namespace detail;
    expect_rank(x, 4, "conv_transpose2d", "input");
    expect_rank(w, 4, "conv_transpose2d", "weight");
    check(dg.sh >= 1 && dg.sw >= 1, "conv_transpose2d: stride must be >= 1");
    check(dg.oph >= 0 && dg.oph < dg.sh && dg.opw >= 0 && dg.opw < dg.sw,
          "conv_transpose2d: output padding must be in [0, stride)");
    const int N = x.dim(0), OC = x.dim(1), Hs = x.dim(2), Ws = x.dim(3);
    const int IC = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    check(w.dim(0) == OC, "conv_transpose2d: input channel dimension ", OC,
          " does not match weight dimension 0 (", w.dim(0), ")");
    if (bias.defined())
        check(bias.rank() == 1 && bias.dim(0) == IC,
              "conv_transpose2d: bias dimension must be [", IC, "], got ", shape_str(bias));
    const int Hb = (Hs - 1) * dg.sh - 2 * dg.ph + kh + dg.oph;
    const int Wb = (Ws - 1) * dg.sw - 2 * dg.pw + kw + dg.opw;
    check(Hb >= 1 && Wb >= 1, "conv_transpose2d: output dims ", Hb, "x", Wb,
          " must be positive");

    // Geometry of the adjoint forward convolution.
    const ConvGeom cg{dg.sh, dg.sw, dg.ph, dg.pw, 1, 1};
    const int CKK = IC * kh * kw, P = Hs * Ws;
    Tensor<T> y({N, IC, Hb, Wb});
    std::vector<T> dcol(static_cast<size_t>(CKK) * P);
    for (int n = 0; n < N; ++n) {
        const T* xn = x.data() + static_cast<size_t>(n) * OC * P;
        T* yn = y.data() + static_cast<size_t>(n) * IC * Hb * Wb;
        std::fill(dcol.begin(), dcol.end(), T(0));
        gemm_tn(CKK, OC, P, w.data(), xn, dcol.data());
        col2im(dcol.data(), IC, Hb, Wb, kh, kw, cg, Hs, Ws, yn);
        if (bias.defined()) {
            for (int c = 0; c < IC; ++c) {
                const T b = bias.data()[c];
                T* row = yn + static_cast<size_t>(c) * Hb * Wb;
                for (int p = 0; p < Hb * Wb; ++p) row[p] += b;
            }
        }
    }
    check_finite("conv_transpose2d", y);

    auto xd = x.ptr();
    auto wd = w.ptr();
    auto bd = bias.defined() ? bias.ptr() : nullptr;
    auto yd = y.ptr();
    record_op("conv_transpose2d", {&x, &w, &bias}, y, [=]() {
        const std::vector<T>& gy = yd->grad;
        std::vector<T> col(static_cast<size_t>(CKK) * P);
        for (int n = 0; n < N; ++n) {
            const T* gyn = gy.data() + static_cast<size_t>(n) * IC * Hb * Wb;
            im2col(gyn, IC, Hb, Wb, kh, kw, cg, Hs, Ws, col.data());
            if (xd->requires_grad) {
                T* gx = grad_acc(xd).data() + static_cast<size_t>(n) * OC * P;
                gemm_nn(OC, CKK, P, wd->values.data(), col.data(), gx);
            }
            if (wd->requires_grad) {
                const T* xn = xd->values.data() + static_cast<size_t>(n) * OC * P;
                gemm_nt(OC, P, CKK, xn, col.data(), grad_acc(wd).data());
            }
        }
        if (bd && bd->requires_grad) {
            T* gb = grad_acc(bd).data();
            const int PB = Hb * Wb;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < IC; ++c) {
                    const T* row = gy.data() + (static_cast<size_t>(n) * IC + c) * PB;
                    T acc = T(0);
                    for (int p = 0; p < PB; ++p) acc += row[p];
                    gb[c] += acc;
                }
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 pooling. Odd spatial dims are an error by contract; the
// architecture only meets even dims for inputs whose H,W are multiples of 8.

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
    using namespace detail;
    expect_rank(x, 4, "max_pool2d", "input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % 2 == 0, "max_pool2d: height ", H, " is odd");
    check(W % 2 == 0, "max_pool2d: width ", W, " is odd");
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> y({N, C, Ho, Wo});
    const T* xv = x.data();
    T* yv = y.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* plane = xv + static_cast<size_t>(nc) * H * W;
        T* out = yv + static_cast<size_t>(nc) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                const T* p = plane + (2 * oy) * W + 2 * ox;
                T m = p[0];
                if (p[1] > m) m = p[1];
                if (p[W] > m) m = p[W];
                if (p[W + 1] > m) m = p[W + 1];
                out[oy * Wo + ox] = m;
            }
    }
    check_finite("max_pool2d", y);

    auto xd = x.ptr();
    auto yd = y.ptr();
    record_op("max_pool2d", {&x}, y, [=]() {
        // Ties route to the first index in scan order.
        T* gx = grad_acc(xd).data();
        const std::vector<T>& gy = yd->grad;
        const T* xv = xd->values.data();
        for (int nc = 0; nc < N * C; ++nc) {
            const T* plane = xv + static_cast<size_t>(nc) * H * W;
            T* gp = gx + static_cast<size_t>(nc) * H * W;
            const T* go = gy.data() + static_cast<size_t>(nc) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const size_t base = static_cast<size_t>(2 * oy) * W + 2 * ox;
                    const size_t offs[4] = {base, base + 1, base + W, base + W + 1};
                    size_t best = offs[0];
                    for (int k = 1; k < 4; ++k)
                        if (plane[offs[k]] > plane[best]) best = offs[k];
                    gp[best] += go[oy * Wo + ox];
                }
        }
    });
    return y;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x) {
    using namespace detail;
    expect_rank(x, 4, "avg_pool2d", "input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % 2 == 0, "avg_pool2d: height ", H, " is odd");
    check(W % 2 == 0, "avg_pool2d: width ", W, " is odd");
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> y({N, C, Ho, Wo});
    const T* xv = x.data();
    T* yv = y.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* plane = xv + static_cast<size_t>(nc) * H * W;
        T* out = yv + static_cast<size_t>(nc) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                const T* p = plane + (2 * oy) * W + 2 * ox;
                out[oy * Wo + ox] = (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
            }
    }
    check_finite("avg_pool2d", y);

    auto xd = x.ptr();
    auto yd = y.ptr();
    record_op("avg_pool2d", {&x}, y, [=]() {
        T* gx = grad_acc(xd).data();
        const std::vector<T>& gy = yd->grad;
        for (int nc = 0; nc < N * C; ++nc) {
            T* gp = gx + static_cast<size_t>(nc) * H * W;
            const T* go = gy.data() + static_cast<size_t>(nc) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const T q = go[oy * Wo + ox] * T(0.25);
                    T* p = gp + (2 * oy) * W + 2 * ox;
                    p[0] += q;
                    p[1] += q;
                    p[W] += q;
                    p[W + 1] += q;
                }
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class BnMode {
    train,   // batch statistics, running stats updated by EMA
    eval,    // running statistics
    frozen,  // batch statistics, running stats left untouched
};

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, BnMode mode,
                       T momentum = T(0.1), T eps = T(1e-5)) {
    using namespace detail;
    expect_rank(x, 4, "batch_norm2d", "input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(gamma.defined() && gamma.numel() == static_cast<size_t>(C),
          "batch_norm2d: gamma must have ", C, " elements, got ", shape_str(gamma));
    check(beta.defined() && beta.numel() == static_cast<size_t>(C),
          "batch_norm2d: beta must have ", C, " elements, got ", shape_str(beta));
    check(running_mean.numel() == static_cast<size_t>(C) &&
              running_var.numel() == static_cast<size_t>(C),
          "batch_norm2d: running stats must have ", C, " elements");
    const size_t M = static_cast<size_t>(N) * H * W;
    const bool use_batch_stats = mode != BnMode::eval;
    if (use_batch_stats)
        check(M >= 2, "batch_norm2d: batch x spatial count must be >= 2 in train mode, got ", M);

    std::vector<T> mean(C), inv_std(C);
    const size_t plane = static_cast<size_t>(H) * W;
    const T* xv = x.data();
    if (use_batch_stats) {
        for (int c = 0; c < C; ++c) {
            double s = 0;
            for (int n = 0; n < N; ++n) {
                const T* p = xv + (static_cast<size_t>(n) * C + c) * plane;
                for (size_t i = 0; i < plane; ++i) s += p[i];
            }
            const double mu = s / static_cast<double>(M);
            double v = 0;
            for (int n = 0; n < N; ++n) {
                const T* p = xv + (static_cast<size_t>(n) * C + c) * plane;
                for (size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - mu;
                    v += d * d;
                }
            }
            const double var = v / static_cast<double>(M);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            if (mode == BnMode::train) {
                running_mean.data()[c] =
                    (T(1) - momentum) * running_mean.data()[c] + momentum * static_cast<T>(mu);
                running_var.data()[c] =
                    (T(1) - momentum) * running_var.data()[c] + momentum * static_cast<T>(var);
            }
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = running_mean.data()[c];
            inv_std[c] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) +
                                static_cast<double>(eps)));
        }
    }

    Tensor<T> y(x.shape());
    T* yv = y.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = xv + (static_cast<size_t>(n) * C + c) * plane;
            T* q = yv + (static_cast<size_t>(n) * C + c) * plane;
            const T mu = mean[c], is = inv_std[c];
            const T gm = gamma.data()[c], bt = beta.data()[c];
            for (size_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * is * gm + bt;
        }
    check_finite("batch_norm2d", y);

    auto xd = x.ptr();
    auto gd = gamma.ptr();
    auto bd = beta.ptr();
    auto yd = y.ptr();
    record_op("batch_norm2d", {&x, &gamma, &beta}, y, [=]() {
        const std::vector<T>& gy = yd->grad;
        for (int c = 0; c < C; ++c) {
            const T mu = mean[c], is = inv_std[c], gm = gd->values[c];
            double s1 = 0, s2 = 0;  // sum(dy), sum(dy * xhat)
            for (int n = 0; n < N; ++n) {
                const size_t off = (static_cast<size_t>(n) * C + c) * plane;
                const T* p = xd->values.data() + off;
                const T* go = gy.data() + off;
                for (size_t i = 0; i < plane; ++i) {
                    s1 += go[i];
                    s2 += go[i] * (p[i] - mu) * is;
                }
            }
            if (bd->requires_grad) grad_acc(bd)[c] += static_cast<T>(s1);
            if (gd->requires_grad) grad_acc(gd)[c] += static_cast<T>(s2);
            if (!xd->requires_grad) continue;
            T* gx = grad_acc(xd).data();
            if (use_batch_stats) {
                const T m1 = static_cast<T>(s1 / static_cast<double>(M));
                const T m2 = static_cast<T>(s2 / static_cast<double>(M));
                for (int n = 0; n < N; ++n) {
                    const size_t off = (static_cast<size_t>(n) * C + c) * plane;
                    const T* p = xd->values.data() + off;
                    const T* go = gy.data() + off;
                    T* gp = gx + off;
                    for (size_t i = 0; i < plane; ++i) {
                        const T xh = (p[i] - mu) * is;
                        gp[i] += gm * is * (go[i] - m1 - xh * m2);
                    }
                }
            } else {
                for (int n = 0; n < N; ++n) {
                    const size_t off = (static_cast<size_t>(n) * C + c) * plane;
                    const T* go = gy.data() + off;
                    T* gp = gx + off;
                    for (size_t i = 0; i < plane; ++i) gp[i] += go[i] * gm * is;
                }
            }
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_elementwise(const char* name, const Tensor<T>& x, Fwd fwd, Bwd dydx) {
    check(x.defined(), name, ": input undefined");
    Tensor<T> y(x.shape());
    const T* xv = x.data();
    T* yv = y.data();
    const size_t n = x.numel();
    for (size_t i = 0; i < n; ++i) yv[i] = fwd(xv[i]);
    check_finite(name, y);
    auto xd = x.ptr();
    auto yd = y.ptr();
    record_op(name, {&x}, y, [=]() {
        T* gx = grad_acc(xd).data();
        const std::vector<T>& gy = yd->grad;
        for (size_t i = 0; i < n; ++i)
            gx[i] += gy[i] * dydx(xd->values[i], yd->values[i]);
    });
    return y;
}

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_elementwise<T>(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); },
        [](T xv, T) { return xv > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
    return detail::unary_elementwise<T>(
        "leaky_relu", x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T xv, T) { return xv > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
    return detail::unary_elementwise<T>(
        "tanh", x, [](T v) { return std::tanh(v); },
        [](T, T yv) { return T(1) - yv * yv; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_elementwise<T>(
        "sigmoid", x,
        [](T v) {
            return v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                             : std::exp(v) / (T(1) + std::exp(v));
        },
        [](T, T yv) { return yv * (T(1) - yv); });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& x) {
    return detail::unary_elementwise<T>(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T yv) { return yv; });
}

// log(x + eps); the epsilon guards the open interval ends of sigmoid outputs.
template <typename T>
Tensor<T> log_guarded(const Tensor<T>& x, T eps = T(1e-8)) {
    return detail::unary_elementwise<T>(
        "log_guarded", x, [eps](T v) { return std::log(v + eps); },
        [eps](T xv, T) { return T(1) / (xv + eps); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary_elementwise<T>(
        "scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary_elementwise<T>(
        "add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

namespace detail {

template <typename T>
void expect_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    check(a.defined() && b.defined(), op, ": undefined operand");
    check(a.rank() == b.rank(), op, ": rank mismatch (", shape_str(a), " vs ",
          shape_str(b), ")");
    for (int i = 0; i < a.rank(); ++i)
        check(a.dim(i) == b.dim(i), op, ": dimension ", i, " mismatch (", a.dim(i),
              " vs ", b.dim(i), ")");
}

}  // namespace detail

template <typename T>
Tensor<T> elementwise_add(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    expect_same_shape("elementwise_add", a, b);
    Tensor<T> y(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] + b.data()[i];
    check_finite("elementwise_add", y);
    auto ad = a.ptr();
    auto bd = b.ptr();
    auto yd = y.ptr();
    record_op("elementwise_add", {&a, &b}, y, [=]() {
        const std::vector<T>& gy = yd->grad;
        if (ad->requires_grad) {
            T* ga = grad_acc(ad).data();
            for (size_t i = 0; i < n; ++i) ga[i] += gy[i];
        }
        if (bd->requires_grad) {
            T* gb = grad_acc(bd).data();
            for (size_t i = 0; i < n; ++i) gb[i] += gy[i];
        }
    });
    return y;
}

template <typename T>
Tensor<T> elementwise_sub(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    expect_same_shape("elementwise_sub", a, b);
    Tensor<T> y(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] - b.data()[i];
    check_finite("elementwise_sub", y);
    auto ad = a.ptr();
    auto bd = b.ptr();
    auto yd = y.ptr();
    record_op("elementwise_sub", {&a, &b}, y, [=]() {
        const std::vector<T>& gy = yd->grad;
        if (ad->requires_grad) {
            T* ga = grad_acc(ad).data();
            for (size_t i = 0; i < n; ++i) ga[i] += gy[i];
        }
        if (bd->requires_grad) {
            T* gb = grad_acc(bd).data();
            for (size_t i = 0; i < n; ++i) gb[i] -= gy[i];
        }
    });
    return y;
}

template <typename T>
Tensor<T> elementwise_mul(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    expect_same_shape("elementwise_mul", a, b);
    Tensor<T> y(a.shape());
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * b.data()[i];
    check_finite("elementwise_mul", y);
    auto ad = a.ptr();
    auto bd = b.ptr();
    auto yd = y.ptr();
    record_op("elementwise_mul", {&a, &b}, y, [=]() {
        const std::vector<T>& gy = yd->grad;
        if (ad->requires_grad) {
            T* ga = grad_acc(ad).data();
            for (size_t i = 0; i < n; ++i) ga[i] += gy[i] * bd->values[i];
        }
        if (bd->requires_grad) {
            T* gb = grad_acc(bd).data();
            for (size_t i = 0; i < n; ++i) gb[i] += gy[i] * ad->values[i];
        }
    });
    return y;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    expect_rank(a, 4, "concat_channels", "a");
    expect_rank(b, 4, "concat_channels", "b");
    check(a.dim(0) == b.dim(0), "concat_channels: batch dimension mismatch (",
          a.dim(0), " vs ", b.dim(0), ")");
    check(a.dim(2) == b.dim(2), "concat_channels: height mismatch (", a.dim(2),
          " vs ", b.dim(2), ")");
    check(a.dim(3) == b.dim(3), "concat_channels: width mismatch (", a.dim(3),
          " vs ", b.dim(3), ")");
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const size_t plane = static_cast<size_t>(H) * W;
    Tensor<T> y({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data() + static_cast<size_t>(n) * Ca * plane, Ca * plane,
                    y.data() + static_cast<size_t>(n) * (Ca + Cb) * plane);
        std::copy_n(b.data() + static_cast<size_t>(n) * Cb * plane, Cb * plane,
                    y.data() + (static_cast<size_t>(n) * (Ca + Cb) + Ca) * plane);
    }
    check_finite("concat_channels", y);
    auto ad = a.ptr();
    auto bd = b.ptr();
    auto yd = y.ptr();
    record_op("concat_channels", {&a, &b}, y, [=]() {
        const std::vector<T>& gy = yd->grad;
        for (int n = 0; n < N; ++n) {
            const T* gyn = gy.data() + static_cast<size_t>(n) * (Ca + Cb) * plane;
            if (ad->requires_grad) {
                T* ga = grad_acc(ad).data() + static_cast<size_t>(n) * Ca * plane;
                for (size_t i = 0; i < Ca * plane; ++i) ga[i] += gyn[i];
            }
            if (bd->requires_grad) {
                T* gb = grad_acc(bd).data() + static_cast<size_t>(n) * Cb * plane;
                const T* src = gyn + Ca * plane;
                for (size_t i = 0; i < Cb * plane; ++i) gb[i] += src[i];
            }
        }
    });
    return y;
}

// Channel-wise dropout; identity when p == 0 or not training.
template <typename T>
Tensor<T> dropout2d(const Tensor<T>& x, double p, bool training, std::mt19937* rng = nullptr) {
    using namespace detail;
    expect_rank(x, 4, "dropout2d", "input");
    check(p >= 0.0 && p < 1.0, "dropout2d: p must be in [0, 1), got ", p);
    if (p == 0.0 || !training) return x;
    check(rng != nullptr, "dropout2d: active dropout requires an rng");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const size_t plane = static_cast<size_t>(H) * W;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<uint8_t> keep(static_cast<size_t>(N) * C);
    for (auto& k : keep) k = uniform_unit(*rng) >= p ? 1 : 0;
    Tensor<T> y(x.shape());
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = x.data() + static_cast<size_t>(nc) * plane;
        T* dst = y.data() + static_cast<size_t>(nc) * plane;
        if (keep[nc])
            for (size_t i = 0; i < plane; ++i) dst[i] = src[i] * keep_scale;
        else
            std::fill_n(dst, plane, T(0));
    }
    check_finite("dropout2d", y);
    auto xd = x.ptr();
    auto yd = y.ptr();
    record_op("dropout2d", {&x}, y, [=]() {
        T* gx = grad_acc(xd).data();
        const std::vector<T>& gy = yd->grad;
        for (int nc = 0; nc < N * C; ++nc) {
            if (!keep[nc]) continue;
            const T* go = gy.data() + static_cast<size_t>(nc) * plane;
            T* gp = gx + static_cast<size_t>(nc) * plane;
            for (size_t i = 0; i < plane; ++i) gp[i] += go[i] * keep_scale;
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    using namespace detail;
    check(x.defined(), "sum: input undefined");
    double acc = 0;
    for (T v : x.values()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc));
    check_finite("sum", y);
    auto xd = x.ptr();
    auto yd = y.ptr();
    record_op("sum", {&x}, y, [=]() {
        const T g = yd->grad[0];
        T* gx = grad_acc(xd).data();
        for (size_t i = 0; i < xd->values.size(); ++i) gx[i] += g;
    });
    return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    using namespace detail;
    check(x.defined(), "mean: input undefined");
    const size_t n = x.numel();
    double acc = 0;
    for (T v : x.values()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    check_finite("mean", y);
    auto xd = x.ptr();
    auto yd = y.ptr();
    record_op("mean", {&x}, y, [=]() {
        const T g = yd->grad[0] / static_cast<T>(n);
        T* gx = grad_acc(xd).data();
        for (size_t i = 0; i < n; ++i) gx[i] += g;
    });
    return y;
}

// mean |a - b|; subgradient 0 at exact ties.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    expect_same_shape("l1_loss", a, b);
    const size_t n = a.numel();
    double acc = 0;
    for (size_t i = 0; i < n; ++i)
        acc += std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]));
    Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    check_finite("l1_loss", y);
    auto ad = a.ptr();
    auto bd = b.ptr();
    auto yd = y.ptr();
    record_op("l1_loss", {&a, &b}, y, [=]() {
        const T g = yd->grad[0] / static_cast<T>(n);
        T* ga = ad->requires_grad ? grad_acc(ad).data() : nullptr;
        T* gb = bd->requires_grad ? grad_acc(bd).data() : nullptr;
        for (size_t i = 0; i < n; ++i) {
            const T d = ad->values[i] - bd->values[i];
            const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
            if (ga) ga[i] += s;
            if (gb) gb[i] -= s;
        }
    });
    return y;
}

}  // namespace fogseg::ops
