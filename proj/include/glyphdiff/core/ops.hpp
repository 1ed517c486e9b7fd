#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemm.hpp"
#include "tape.hpp"
#include "tensor.hpp"

// Differentiable op set. Every op computes its forward pass eagerly and, when
// a tape is supplied and any input requires grad, records a closure that
// accumulates into input->g. Tensors are per-sample (no batch dimension);
// batching is a loop plus a 1/B backward seed.

namespace glyphdiff::ops {

template <typename T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a->shape, b->shape, "add");
    auto out = make_tensor<T>(a->shape);
    for (int64_t i = 0; i < out->numel(); i++) out->v[i] = a->v[i] + b->v[i];
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out] {
            for (int64_t i = 0; i < out->numel(); i++) {
                if (a->rg) a->g[i] += out->g[i];
                if (b->rg) b->g[i] += out->g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a->shape, b->shape, "mul");
    auto out = make_tensor<T>(a->shape);
    for (int64_t i = 0; i < out->numel(); i++) out->v[i] = a->v[i] * b->v[i];
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out] {
            for (int64_t i = 0; i < out->numel(); i++) {
                if (a->rg) a->g[i] += out->g[i] * b->v[i];
                if (b->rg) b->g[i] += out->g[i] * a->v[i];
            }
        });
    }
    return out;
}

// ca*a + cb*b with scalar constants
template <typename T>
TensorPtr<T> lincomb(Tape<T>* tape, T ca, const TensorPtr<T>& a, T cb, const TensorPtr<T>& b) {
    check_same_shape(a->shape, b->shape, "lincomb");
    auto out = make_tensor<T>(a->shape);
    for (int64_t i = 0; i < out->numel(); i++) out->v[i] = ca * a->v[i] + cb * b->v[i];
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out, ca, cb] {
            for (int64_t i = 0; i < out->numel(); i++) {
                if (a->rg) a->g[i] += ca * out->g[i];
                if (b->rg) b->g[i] += cb * out->g[i];
            }
        });
    }
    return out;
}

// x*mul + add elementwise with scalar constants
template <typename T>
TensorPtr<T> affine_const(Tape<T>* tape, const TensorPtr<T>& x, T mul, T add) {
    auto out = make_tensor<T>(x->shape);
    for (int64_t i = 0; i < out->numel(); i++) out->v[i] = x->v[i] * mul + add;
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, mul] {
            for (int64_t i = 0; i < out->numel(); i++)
                if (x->rg) x->g[i] += mul * out->g[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> silu(Tape<T>* tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    for (int64_t i = 0; i < out->numel(); i++) {
        T s = T(1) / (T(1) + std::exp(-x->v[i]));
        out->v[i] = x->v[i] * s;
    }
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out] {
            if (!x->rg) return;
            for (int64_t i = 0; i < out->numel(); i++) {
                T s = T(1) / (T(1) + std::exp(-x->v[i]));
                x->g[i] += out->g[i] * s * (T(1) + x->v[i] * (T(1) - s));
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> relu(Tape<T>* tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    for (int64_t i = 0; i < out->numel(); i++) out->v[i] = x->v[i] > T(0) ? x->v[i] : T(0);
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out] {
            if (!x->rg) return;
            for (int64_t i = 0; i < out->numel(); i++)
                if (x->v[i] > T(0)) x->g[i] += out->g[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>* tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    for (int64_t i = 0; i < out->numel(); i++) out->v[i] = T(1) / (T(1) + std::exp(-x->v[i]));
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out] {
            if (!x->rg) return;
            for (int64_t i = 0; i < out->numel(); i++)
                x->g[i] += out->g[i] * out->v[i] * (T(1) - out->v[i]);
        });
    }
    return out;
}

// ---- shape plumbing ----

template <typename T>
TensorPtr<T> reshape(Tape<T>* tape, const TensorPtr<T>& x, std::vector<int> shape) {
    if (numel_of(shape) != x->numel())
        throw ShapeError("reshape: " + shape_str(x->shape) + " -> " + shape_str(shape));
    auto out = make_tensor<T>(std::move(shape));
    out->v = x->v;
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out] {
            if (!x->rg) return;
            for (int64_t i = 0; i < out->numel(); i++) x->g[i] += out->g[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> concat_channels(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->ndim() != 3 || b->ndim() != 3 || a->dim(1) != b->dim(1) || a->dim(2) != b->dim(2))
        throw ShapeError("concat_channels: want CxHxW with equal spatial, got " + shape_str(a->shape) +
                         " and " + shape_str(b->shape));
    auto out = make_tensor<T>({a->dim(0) + b->dim(0), a->dim(1), a->dim(2)});
    std::copy(a->v.begin(), a->v.end(), out->v.begin());
    std::copy(b->v.begin(), b->v.end(), out->v.begin() + a->numel());
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out] {
            if (a->rg)
                for (int64_t i = 0; i < a->numel(); i++) a->g[i] += out->g[i];
            if (b->rg)
                for (int64_t i = 0; i < b->numel(); i++) b->g[i] += out->g[a->numel() + i];
        });
    }
    return out;
}

// CxHxW -> (H*W)xC token matrix
template <typename T>
TensorPtr<T> chw_to_tokens(Tape<T>* tape, const TensorPtr<T>& x) {
    if (x->ndim() != 3) throw ShapeError("chw_to_tokens: want CxHxW, got " + shape_str(x->shape));
    int c = x->dim(0), hw = x->dim(1) * x->dim(2);
    auto out = make_tensor<T>({hw, c});
    for (int ci = 0; ci < c; ci++)
        for (int p = 0; p < hw; p++) out->v[static_cast<int64_t>(p) * c + ci] = x->v[static_cast<int64_t>(ci) * hw + p];
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, c, hw] {
            if (!x->rg) return;
            for (int ci = 0; ci < c; ci++)
                for (int p = 0; p < hw; p++)
                    x->g[static_cast<int64_t>(ci) * hw + p] += out->g[static_cast<int64_t>(p) * c + ci];
        });
    }
    return out;
}

// (H*W)xC token matrix -> CxHxW
template <typename T>
TensorPtr<T> tokens_to_chw(Tape<T>* tape, const TensorPtr<T>& x, int h, int w) {
    if (x->ndim() != 2 || x->dim(0) != h * w)
        throw ShapeError("tokens_to_chw: want (H*W)xC, got " + shape_str(x->shape));
    int c = x->dim(1), hw = h * w;
    auto out = make_tensor<T>({c, h, w});
    for (int ci = 0; ci < c; ci++)
        for (int p = 0; p < hw; p++) out->v[static_cast<int64_t>(ci) * hw + p] = x->v[static_cast<int64_t>(p) * c + ci];
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, c, hw] {
            if (!x->rg) return;
            for (int ci = 0; ci < c; ci++)
                for (int p = 0; p < hw; p++)
                    x->g[static_cast<int64_t>(p) * c + ci] += out->g[static_cast<int64_t>(ci) * hw + p];
        });
    }
    return out;
}

// NxM -> MxN
template <typename T>
TensorPtr<T> transpose(Tape<T>* tape, const TensorPtr<T>& x) {
    if (x->ndim() != 2) throw ShapeError("transpose: want NxM");
    int n = x->dim(0), m = x->dim(1);
    auto out = make_tensor<T>({m, n});
    for (int r = 0; r < n; r++)
        for (int j = 0; j < m; j++) out->v[static_cast<int64_t>(j) * n + r] = x->v[static_cast<int64_t>(r) * m + j];
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, n, m] {
            if (!x->rg) return;
            for (int r = 0; r < n; r++)
                for (int j = 0; j < m; j++)
                    x->g[static_cast<int64_t>(r) * m + j] += out->g[static_cast<int64_t>(j) * n + r];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> slice_cols(Tape<T>* tape, const TensorPtr<T>& x, int lo, int n) {
    if (x->ndim() != 2 || lo < 0 || lo + n > x->dim(1)) throw ShapeError("slice_cols: bad range");
    int rows = x->dim(0), cols = x->dim(1);
    auto out = make_tensor<T>({rows, n});
    for (int r = 0; r < rows; r++)
        for (int j = 0; j < n; j++) out->v[static_cast<int64_t>(r) * n + j] = x->v[static_cast<int64_t>(r) * cols + lo + j];
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, lo, n, rows, cols] {
            if (!x->rg) return;
            for (int r = 0; r < rows; r++)
                for (int j = 0; j < n; j++)
                    x->g[static_cast<int64_t>(r) * cols + lo + j] += out->g[static_cast<int64_t>(r) * n + j];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> concat_cols(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty list");
    int rows = xs[0]->dim(0), total = 0;
    for (auto& x : xs) {
        if (x->ndim() != 2 || x->dim(0) != rows) throw ShapeError("concat_cols: row mismatch");
        total += x->dim(1);
    }
    auto out = make_tensor<T>({rows, total});
    int off = 0;
    for (auto& x : xs) {
        int n = x->dim(1);
        for (int r = 0; r < rows; r++)
            for (int j = 0; j < n; j++)
                out->v[static_cast<int64_t>(r) * total + off + j] = x->v[static_cast<int64_t>(r) * n + j];
        off += n;
    }
    bool track = false;
    for (auto& x : xs)
        if (tape && x->rg) track = true;
    if (track) {
        out->set_rg(true);
        tape->record([xs, out, rows, total] {
            int off2 = 0;
            for (auto& x : xs) {
                int n = x->dim(1);
                if (x->rg)
                    for (int r = 0; r < rows; r++)
                        for (int j = 0; j < n; j++)
                            x->g[static_cast<int64_t>(r) * n + j] += out->g[static_cast<int64_t>(r) * total + off2 + j];
                off2 += n;
            }
        });
    }
    return out;
}

// ---- dense linear algebra ----

template <typename T>
TensorPtr<T> matmul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->dim(1) != b->dim(0))
        throw ShapeError("matmul: " + shape_str(a->shape) + " x " + shape_str(b->shape));
    int m = a->dim(0), k = a->dim(1), n = b->dim(1);
    auto out = make_tensor<T>({m, n});
    gemm_nn(a->v.data(), b->v.data(), out->v.data(), m, k, n);
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out, m, k, n] {
            if (a->rg) gemm_nt_acc(out->g.data(), b->v.data(), a->g.data(), m, n, k);
            if (b->rg) gemm_tn_acc(a->v.data(), out->g.data(), b->g.data(), k, m, n);
        });
    }
    return out;
}

// A (LxK) * B^T (MxK) -> LxM
template <typename T>
TensorPtr<T> matmul_nt(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->dim(1) != b->dim(1))
        throw ShapeError("matmul_nt: " + shape_str(a->shape) + " x " + shape_str(b->shape) + "^T");
    int l = a->dim(0), k = a->dim(1), m = b->dim(0);
    auto out = make_tensor<T>({l, m});
    gemm_nt(a->v.data(), b->v.data(), out->v.data(), l, k, m);
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out, l, k, m] {
            if (a->rg) gemm_nn_acc(out->g.data(), b->v.data(), a->g.data(), l, m, k);
            if (b->rg) gemm_tn_acc(out->g.data(), a->v.data(), b->g.data(), m, l, k);
        });
    }
    return out;
}

// x (NxK) * w (KxM) + b(M), b may be null
template <typename T>
TensorPtr<T> linear(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b) {
    if (x->ndim() != 2 || w->ndim() != 2 || x->dim(1) != w->dim(0))
        throw ShapeError("linear: " + shape_str(x->shape) + " x " + shape_str(w->shape));
    int n = x->dim(0), k = x->dim(1), m = w->dim(1);
    auto out = make_tensor<T>({n, m});
    gemm_nn(x->v.data(), w->v.data(), out->v.data(), n, k, m);
    if (b) {
        if (b->numel() != m) throw ShapeError("linear: bias size");
        for (int r = 0; r < n; r++)
            for (int j = 0; j < m; j++) out->v[static_cast<int64_t>(r) * m + j] += b->v[j];
    }
    bool track = tape && (x->rg || w->rg || (b && b->rg));
    if (track) {
        out->set_rg(true);
        tape->record([x, w, b, out, n, k, m] {
            if (x->rg) gemm_nt_acc(out->g.data(), w->v.data(), x->g.data(), n, m, k);
            if (w->rg) gemm_tn_acc(x->v.data(), out->g.data(), w->g.data(), k, n, m);
            if (b && b->rg)
                for (int r = 0; r < n; r++)
                    for (int j = 0; j < m; j++) b->g[j] += out->g[static_cast<int64_t>(r) * m + j];
        });
    }
    return out;
}

namespace detail {

// im2col for CxHxW input, kernel kxk, producing (C*k*k) x (Ho*Wo)
template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* cols) {
    for (int ci = 0; ci < c; ci++)
        for (int ky = 0; ky < k; ky++)
            for (int kx = 0; kx < k; kx++) {
                T* dst = cols + ((static_cast<int64_t>(ci) * k + ky) * k + kx) * (static_cast<int64_t>(ho) * wo);
                for (int oy = 0; oy < ho; oy++) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < wo; ox++) dst[static_cast<int64_t>(oy) * wo + ox] = T(0);
                        continue;
                    }
                    for (int ox = 0; ox < wo; ox++) {
                        int ix = ox * stride - pad + kx;
                        dst[static_cast<int64_t>(oy) * wo + ox] =
                            (ix >= 0 && ix < w) ? x[(static_cast<int64_t>(ci) * h + iy) * w + ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_acc(const T* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* dx) {
    for (int ci = 0; ci < c; ci++)
        for (int ky = 0; ky < k; ky++)
            for (int kx = 0; kx < k; kx++) {
                const T* src = cols + ((static_cast<int64_t>(ci) * k + ky) * k + kx) * (static_cast<int64_t>(ho) * wo);
                for (int oy = 0; oy < ho; oy++) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ox++) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dx[(static_cast<int64_t>(ci) * h + iy) * w + ix] += src[static_cast<int64_t>(oy) * wo + ox];
                    }
                }
            }
}

}  // namespace detail

// x CxHxW, w (Co x Ci x k x k), b (Co) or null
template <typename T>
TensorPtr<T> conv2d(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b,
                    int stride, int pad) {
    if (x->ndim() != 3 || w->ndim() != 4 || w->dim(1) != x->dim(0))
        throw ShapeError("conv2d: " + shape_str(x->shape) + " with " + shape_str(w->shape));
    int ci = x->dim(0), h = x->dim(1), wd = x->dim(2);
    int co = w->dim(0), k = w->dim(2);
    int ho = (h + 2 * pad - k) / stride + 1;
    int wo = (wd + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output");
    auto out = make_tensor<T>({co, ho, wo});
    int64_t n = static_cast<int64_t>(ho) * wo;
    int kk = ci * k * k;

    bool plain1x1 = (k == 1 && stride == 1 && pad == 0);
    if (plain1x1) {
        gemm_nn(w->v.data(), x->v.data(), out->v.data(), co, ci, static_cast<int>(n));
    } else {
        std::vector<T> cols(static_cast<int64_t>(kk) * n);
        detail::im2col(x->v.data(), ci, h, wd, k, stride, pad, ho, wo, cols.data());
        gemm_nn(w->v.data(), cols.data(), out->v.data(), co, kk, static_cast<int>(n));
    }
    if (b) {
        if (b->numel() != co) throw ShapeError("conv2d: bias size");
        for (int o = 0; o < co; o++)
            for (int64_t p = 0; p < n; p++) out->v[o * n + p] += b->v[o];
    }

    bool track = tape && (x->rg || w->rg || (b && b->rg));
    if (track) {
        out->set_rg(true);
        tape->record([x, w, b, out, ci, h, wd, co, k, stride, pad, ho, wo, n, kk, plain1x1] {
            if (plain1x1) {
                if (w->rg) gemm_nt_acc(out->g.data(), x->v.data(), w->g.data(), co, static_cast<int>(n), ci);
                if (x->rg) gemm_tn_acc(w->v.data(), out->g.data(), x->g.data(), ci, co, static_cast<int>(n));
            } else {
                // recompute cols (memory for compute)
                std::vector<T> cols(static_cast<int64_t>(kk) * n);
                detail::im2col(x->v.data(), ci, h, wd, k, stride, pad, ho, wo, cols.data());
                if (w->rg) gemm_nt_acc(out->g.data(), cols.data(), w->g.data(), co, static_cast<int>(n), kk);
                if (x->rg) {
                    std::vector<T> dcols(static_cast<int64_t>(kk) * n, T(0));
                    gemm_tn_acc(w->v.data(), out->g.data(), dcols.data(), kk, co, static_cast<int>(n));
                    detail::col2im_acc(dcols.data(), ci, h, wd, k, stride, pad, ho, wo, x->g.data());
                }
            }
            if (b && b->rg)
                for (int o = 0; o < co; o++)
                    for (int64_t p = 0; p < n; p++) b->g[o] += out->g[o * n + p];
        });
    }
    return out;
}

// ---- normalization ----

template <typename T>
TensorPtr<T> group_norm(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, int groups, T eps = T(1e-5)) {
    if (x->ndim() != 3 || x->dim(0) % groups != 0)
        throw ShapeError("group_norm: channels " + shape_str(x->shape) + " not divisible by groups");
    int c = x->dim(0), hw = x->dim(1) * x->dim(2), cg = c / groups;
    int64_t gs = static_cast<int64_t>(cg) * hw;
    auto out = make_tensor<T>(x->shape);
    std::vector<T> mean(groups), istd(groups);
    for (int g = 0; g < groups; g++) {
        const T* px = x->v.data() + g * gs;
        T mu = 0;
        for (int64_t i = 0; i < gs; i++) mu += px[i];
        mu /= static_cast<T>(gs);
        T var = 0;
        for (int64_t i = 0; i < gs; i++) var += (px[i] - mu) * (px[i] - mu);
        var /= static_cast<T>(gs);
        mean[g] = mu;
        istd[g] = T(1) / std::sqrt(var + eps);
    }
    for (int chan = 0; chan < c; chan++) {
        int g = chan / cg;
        for (int p = 0; p < hw; p++) {
            int64_t i = static_cast<int64_t>(chan) * hw + p;
            out->v[i] = (x->v[i] - mean[g]) * istd[g] * gamma->v[chan] + beta->v[chan];
        }
    }
    bool track = tape && (x->rg || gamma->rg || beta->rg);
    if (track) {
        out->set_rg(true);
        tape->record([x, gamma, beta, out, mean, istd, c, hw, cg, gs, groups] {
            for (int g = 0; g < groups; g++) {
                T sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int chan = g * cg; chan < (g + 1) * cg; chan++)
                    for (int p = 0; p < hw; p++) {
                        int64_t i = static_cast<int64_t>(chan) * hw + p;
                        T xhat = (x->v[i] - mean[g]) * istd[g];
                        T dxhat = out->g[i] * gamma->v[chan];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        if (gamma->rg) gamma->g[chan] += out->g[i] * xhat;
                        if (beta->rg) beta->g[chan] += out->g[i];
                    }
                if (x->rg) {
                    T inv_n = T(1) / static_cast<T>(gs);
                    for (int chan = g * cg; chan < (g + 1) * cg; chan++)
                        for (int p = 0; p < hw; p++) {
                            int64_t i = static_cast<int64_t>(chan) * hw + p;
                            T xhat = (x->v[i] - mean[g]) * istd[g];
                            T dxhat = out->g[i] * gamma->v[chan];
                            x->g[i] += istd[g] * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                }
            }
        });
    }
    return out;
}

// per-row layer norm on NxD tokens
template <typename T>
TensorPtr<T> layer_norm(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                        const TensorPtr<T>& beta, T eps = T(1e-5)) {
    if (x->ndim() != 2 || gamma->numel() != x->dim(1))
        throw ShapeError("layer_norm: " + shape_str(x->shape));
    int n = x->dim(0), d = x->dim(1);
    auto out = make_tensor<T>(x->shape);
    std::vector<T> mean(n), istd(n);
    for (int r = 0; r < n; r++) {
        const T* px = x->v.data() + static_cast<int64_t>(r) * d;
        T mu = 0;
        for (int j = 0; j < d; j++) mu += px[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (int j = 0; j < d; j++) var += (px[j] - mu) * (px[j] - mu);
        var /= static_cast<T>(d);
        mean[r] = mu;
        istd[r] = T(1) / std::sqrt(var + eps);
        for (int j = 0; j < d; j++)
            out->v[static_cast<int64_t>(r) * d + j] = (px[j] - mu) * istd[r] * gamma->v[j] + beta->v[j];
    }
    bool track = tape && (x->rg || gamma->rg || beta->rg);
    if (track) {
        out->set_rg(true);
        tape->record([x, gamma, beta, out, mean, istd, n, d] {
            for (int r = 0; r < n; r++) {
                T sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int j = 0; j < d; j++) {
                    int64_t i = static_cast<int64_t>(r) * d + j;
                    T xhat = (x->v[i] - mean[r]) * istd[r];
                    T dxhat = out->g[i] * gamma->v[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gamma->rg) gamma->g[j] += out->g[i] * xhat;
                    if (beta->rg) beta->g[j] += out->g[i];
                }
                if (x->rg) {
                    T inv_d = T(1) / static_cast<T>(d);
                    for (int j = 0; j < d; j++) {
                        int64_t i = static_cast<int64_t>(r) * d + j;
                        T xhat = (x->v[i] - mean[r]) * istd[r];
                        T dxhat = out->g[i] * gamma->v[j];
                        x->g[i] += istd[r] * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> softmax_rows(Tape<T>* tape, const TensorPtr<T>& x) {
    if (x->ndim() != 2) throw ShapeError("softmax_rows: want NxM");
    int n = x->dim(0), m = x->dim(1);
    auto out = make_tensor<T>(x->shape);
    for (int r = 0; r < n; r++) {
        const T* px = x->v.data() + static_cast<int64_t>(r) * m;
        T* po = out->v.data() + static_cast<int64_t>(r) * m;
        T mx = px[0];
        for (int j = 1; j < m; j++) mx = std::max(mx, px[j]);
        T sum = 0;
        for (int j = 0; j < m; j++) {
            po[j] = std::exp(px[j] - mx);
            sum += po[j];
        }
        T inv = T(1) / sum;
        for (int j = 0; j < m; j++) po[j] *= inv;
    }
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, n, m] {
            if (!x->rg) return;
            for (int r = 0; r < n; r++) {
                const T* po = out->v.data() + static_cast<int64_t>(r) * m;
                const T* pg = out->g.data() + static_cast<int64_t>(r) * m;
                T dot = 0;
                for (int j = 0; j < m; j++) dot += pg[j] * po[j];
                for (int j = 0; j < m; j++) x->g[static_cast<int64_t>(r) * m + j] += po[j] * (pg[j] - dot);
            }
        });
    }
    return out;
}

// ---- pooling / resampling ----

template <typename T>
TensorPtr<T> global_avg_pool(Tape<T>* tape, const TensorPtr<T>& x) {
    if (x->ndim() != 3) throw ShapeError("global_avg_pool: want CxHxW");
    int c = x->dim(0), hw = x->dim(1) * x->dim(2);
    auto out = make_tensor<T>({c});
    for (int ci = 0; ci < c; ci++) {
        T s = 0;
        for (int p = 0; p < hw; p++) s += x->v[static_cast<int64_t>(ci) * hw + p];
        out->v[ci] = s / static_cast<T>(hw);
    }
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, c, hw] {
            if (!x->rg) return;
            for (int ci = 0; ci < c; ci++) {
                T d = out->g[ci] / static_cast<T>(hw);
                for (int p = 0; p < hw; p++) x->g[static_cast<int64_t>(ci) * hw + p] += d;
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> global_max_pool(Tape<T>* tape, const TensorPtr<T>& x) {
    if (x->ndim() != 3) throw ShapeError("global_max_pool: want CxHxW");
    int c = x->dim(0), hw = x->dim(1) * x->dim(2);
    auto out = make_tensor<T>({c});
    std::vector<int> arg(c, 0);
    for (int ci = 0; ci < c; ci++) {
        const T* px = x->v.data() + static_cast<int64_t>(ci) * hw;
        int best = 0;
        for (int p = 1; p < hw; p++)
            if (px[p] > px[best]) best = p;
        arg[ci] = best;
        out->v[ci] = px[best];
    }
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, arg, c, hw] {
            if (!x->rg) return;
            for (int ci = 0; ci < c; ci++) x->g[static_cast<int64_t>(ci) * hw + arg[ci]] += out->g[ci];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> maxpool2(Tape<T>* tape, const TensorPtr<T>& x) {
    if (x->ndim() != 3 || x->dim(1) % 2 || x->dim(2) % 2)
        throw ShapeError("maxpool2: want even CxHxW, got " + shape_str(x->shape));
    int c = x->dim(0), h = x->dim(1), w = x->dim(2), ho = h / 2, wo = w / 2;
    auto out = make_tensor<T>({c, ho, wo});
    std::vector<int64_t> arg(out->numel());
    for (int ci = 0; ci < c; ci++)
        for (int oy = 0; oy < ho; oy++)
            for (int ox = 0; ox < wo; ox++) {
                int64_t best = -1;
                T bv = -std::numeric_limits<T>::infinity();
                for (int dy = 0; dy < 2; dy++)
                    for (int dx = 0; dx < 2; dx++) {
                        int64_t i = (static_cast<int64_t>(ci) * h + oy * 2 + dy) * w + ox * 2 + dx;
                        if (x->v[i] > bv) {
                            bv = x->v[i];
                            best = i;
                        }
                    }
                int64_t o = (static_cast<int64_t>(ci) * ho + oy) * wo + ox;
                out->v[o] = bv;
                arg[o] = best;
            }
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, arg] {
            if (!x->rg) return;
            for (int64_t o = 0; o < out->numel(); o++) x->g[arg[o]] += out->g[o];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> upsample_nearest2(Tape<T>* tape, const TensorPtr<T>& x) {
    if (x->ndim() != 3) throw ShapeError("upsample_nearest2: want CxHxW");
    int c = x->dim(0), h = x->dim(1), w = x->dim(2);
    auto out = make_tensor<T>({c, h * 2, w * 2});
    for (int ci = 0; ci < c; ci++)
        for (int y = 0; y < h * 2; y++)
            for (int xx = 0; xx < w * 2; xx++)
                out->v[(static_cast<int64_t>(ci) * h * 2 + y) * w * 2 + xx] =
                    x->v[(static_cast<int64_t>(ci) * h + y / 2) * w + xx / 2];
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, c, h, w] {
            if (!x->rg) return;
            for (int ci = 0; ci < c; ci++)
                for (int y = 0; y < h * 2; y++)
                    for (int xx = 0; xx < w * 2; xx++)
                        x->g[(static_cast<int64_t>(ci) * h + y / 2) * w + xx / 2] +=
                            out->g[(static_cast<int64_t>(ci) * h * 2 + y) * w * 2 + xx];
        });
    }
    return out;
}

// ---- broadcast helpers ----

// out[c,h,w] = x[c,h,w] * s[c]
template <typename T>
TensorPtr<T> channel_scale(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& s) {
    if (x->ndim() != 3 || s->numel() != x->dim(0)) throw ShapeError("channel_scale: shapes");
    int c = x->dim(0), hw = x->dim(1) * x->dim(2);
    auto out = make_tensor<T>(x->shape);
    for (int ci = 0; ci < c; ci++)
        for (int p = 0; p < hw; p++) {
            int64_t i = static_cast<int64_t>(ci) * hw + p;
            out->v[i] = x->v[i] * s->v[ci];
        }
    if (tracking(tape, {x.get(), s.get()})) {
        out->set_rg(true);
        tape->record([x, s, out, c, hw] {
            for (int ci = 0; ci < c; ci++) {
                T ds = 0;
                for (int p = 0; p < hw; p++) {
                    int64_t i = static_cast<int64_t>(ci) * hw + p;
                    if (x->rg) x->g[i] += out->g[i] * s->v[ci];
                    ds += out->g[i] * x->v[i];
                }
                if (s->rg) s->g[ci] += ds;
            }
        });
    }
    return out;
}

// ss holds (scale, shift), each length C: out[c] = x[c]*(1+scale[c]) + shift[c]
template <typename T>
TensorPtr<T> scale_shift(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& ss) {
    if (x->ndim() != 3 || ss->numel() != 2 * x->dim(0)) throw ShapeError("scale_shift: shapes");
    int c = x->dim(0), hw = x->dim(1) * x->dim(2);
    auto out = make_tensor<T>(x->shape);
    for (int ci = 0; ci < c; ci++)
        for (int p = 0; p < hw; p++) {
            int64_t i = static_cast<int64_t>(ci) * hw + p;
            out->v[i] = x->v[i] * (T(1) + ss->v[ci]) + ss->v[c + ci];
        }
    if (tracking(tape, {x.get(), ss.get()})) {
        out->set_rg(true);
        tape->record([x, ss, out, c, hw] {
            for (int ci = 0; ci < c; ci++) {
                T dsc = 0, dsh = 0;
                for (int p = 0; p < hw; p++) {
                    int64_t i = static_cast<int64_t>(ci) * hw + p;
                    if (x->rg) x->g[i] += out->g[i] * (T(1) + ss->v[ci]);
                    dsc += out->g[i] * x->v[i];
                    dsh += out->g[i];
                }
                if (ss->rg) {
                    ss->g[ci] += dsc;
                    ss->g[c + ci] += dsh;
                }
            }
        });
    }
    return out;
}

// ---- reductions / losses ----

template <typename T>
TensorPtr<T> mse_loss(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a->shape, b->shape, "mse_loss");
    auto out = make_tensor<T>({1});
    T s = 0;
    for (int64_t i = 0; i < a->numel(); i++) {
        T d = a->v[i] - b->v[i];
        s += d * d;
    }
    out->v[0] = s / static_cast<T>(a->numel());
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out] {
            T c = T(2) * out->g[0] / static_cast<T>(a->numel());
            for (int64_t i = 0; i < a->numel(); i++) {
                T d = a->v[i] - b->v[i];
                if (a->rg) a->g[i] += c * d;
                if (b->rg) b->g[i] -= c * d;
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mean_abs_diff(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a->shape, b->shape, "mean_abs_diff");
    auto out = make_tensor<T>({1});
    T s = 0;
    for (int64_t i = 0; i < a->numel(); i++) s += std::abs(a->v[i] - b->v[i]);
    out->v[0] = s / static_cast<T>(a->numel());
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out] {
            T c = out->g[0] / static_cast<T>(a->numel());
            for (int64_t i = 0; i < a->numel(); i++) {
                T d = a->v[i] - b->v[i];
                T sg = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                if (a->rg) a->g[i] += c * sg;
                if (b->rg) b->g[i] -= c * sg;
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mean_abs(Tape<T>* tape, const TensorPtr<T>& a) {
    auto zero = make_tensor<T>(a->shape, T(0));
    return mean_abs_diff(tape, a, zero);
}

// dot product of two equal-length vectors -> scalar
template <typename T>
TensorPtr<T> dot(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a->shape, b->shape, "dot");
    auto out = make_tensor<T>({1});
    T s = 0;
    for (int64_t i = 0; i < a->numel(); i++) s += a->v[i] * b->v[i];
    out->v[0] = s;
    if (tracking(tape, {a.get(), b.get()})) {
        out->set_rg(true);
        tape->record([a, b, out] {
            for (int64_t i = 0; i < a->numel(); i++) {
                if (a->rg) a->g[i] += out->g[0] * b->v[i];
                if (b->rg) b->g[i] += out->g[0] * a->v[i];
            }
        });
    }
    return out;
}

// y = x / sqrt(sum x^2 + eps)
template <typename T>
TensorPtr<T> l2_normalize(Tape<T>* tape, const TensorPtr<T>& x, T eps = T(1e-12)) {
    auto out = make_tensor<T>(x->shape);
    T ss = 0;
    for (int64_t i = 0; i < x->numel(); i++) ss += x->v[i] * x->v[i];
    T n = std::sqrt(ss + eps), inv = T(1) / n;
    for (int64_t i = 0; i < x->numel(); i++) out->v[i] = x->v[i] * inv;
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out, inv] {
            if (!x->rg) return;
            T dotv = 0;
            for (int64_t i = 0; i < x->numel(); i++) dotv += out->g[i] * out->v[i];
            for (int64_t i = 0; i < x->numel(); i++) x->g[i] += inv * (out->g[i] - out->v[i] * dotv);
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> stack_scalars(Tape<T>* tape, const std::vector<TensorPtr<T>>& xs) {
    auto out = make_tensor<T>({static_cast<int>(xs.size())});
    for (size_t i = 0; i < xs.size(); i++) {
        if (xs[i]->numel() != 1) throw ShapeError("stack_scalars: non-scalar input");
        out->v[i] = xs[i]->v[0];
    }
    bool track = false;
    for (auto& x : xs)
        if (tape && x->rg) track = true;
    if (track) {
        out->set_rg(true);
        tape->record([xs, out] {
            for (size_t i = 0; i < xs.size(); i++)
                if (xs[i]->rg) xs[i]->g[0] += out->g[i];
        });
    }
    return out;
}

// log(sum(exp(x))) over a vector, stabilized
template <typename T>
TensorPtr<T> logsumexp(Tape<T>* tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>({1});
    T mx = x->v[0];
    for (int64_t i = 1; i < x->numel(); i++) mx = std::max(mx, x->v[i]);
    T s = 0;
    for (int64_t i = 0; i < x->numel(); i++) s += std::exp(x->v[i] - mx);
    out->v[0] = mx + std::log(s);
    if (tracking(tape, {x.get()})) {
        out->set_rg(true);
        tape->record([x, out] {
            if (!x->rg) return;
            for (int64_t i = 0; i < x->numel(); i++)
                x->g[i] += out->g[0] * std::exp(x->v[i] - out->v[0]);
        });
    }
    return out;
}

// weighted sum of scalar tensors -> scalar
template <typename T>
TensorPtr<T> weighted_sum_scalars(Tape<T>* tape, const std::vector<std::pair<T, TensorPtr<T>>>& terms) {
    auto out = make_tensor<T>({1});
    for (auto& [w, t] : terms) {
        if (t->numel() != 1) throw ShapeError("weighted_sum_scalars: non-scalar");
        out->v[0] += w * t->v[0];
    }
    bool track = false;
    for (auto& [w, t] : terms)
        if (tape && t->rg) track = true;
    if (track) {
        out->set_rg(true);
        tape->record([terms, out] {
            for (auto& [w, t] : terms)
                if (t->rg) t->g[0] += w * out->g[0];
        });
    }
    return out;
}

// ---- deformable convolution (v1) ----

namespace detail {

// bilinear sample with zero outside the image; returns value and derivatives
template <typename T>
struct BilinearTap {
    T value;
    T dpy, dpx;        // d value / d position
    int64_t idx[4];    // corner indices into plane, -1 when out of bounds
    T wgt[4];          // corner weights
};

template <typename T>
void deform_im2col(const Tensor<T>& x, const Tensor<T>& offsets, int k, T* cols);

template <typename T>
BilinearTap<T> bilinear_tap(const T* plane, int h, int w, T py, T px) {
    BilinearTap<T> r{};
    T fy0 = std::floor(py), fx0 = std::floor(px);
    int y0 = static_cast<int>(fy0), x0 = static_cast<int>(fx0);
    T fy = py - fy0, fx = px - fx0;
    auto at = [&](int yy, int xx, int slot) -> T {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) {
            r.idx[slot] = -1;
            return T(0);
        }
        r.idx[slot] = static_cast<int64_t>(yy) * w + xx;
        return plane[r.idx[slot]];
    };
    T v00 = at(y0, x0, 0), v01 = at(y0, x0 + 1, 1), v10 = at(y0 + 1, x0, 2), v11 = at(y0 + 1, x0 + 1, 3);
    r.wgt[0] = (T(1) - fy) * (T(1) - fx);
    r.wgt[1] = (T(1) - fy) * fx;
    r.wgt[2] = fy * (T(1) - fx);
    r.wgt[3] = fy * fx;
    r.value = r.wgt[0] * v00 + r.wgt[1] * v01 + r.wgt[2] * v10 + r.wgt[3] * v11;
    r.dpy = (T(1) - fx) * (v10 - v00) + fx * (v11 - v01);
    r.dpx = (T(1) - fy) * (v01 - v00) + fy * (v11 - v10);
    return r;
}

// sampled columns for the deformable conv, (Ci*k*k) x (H*W)
template <typename T>
void deform_im2col(const Tensor<T>& x, const Tensor<T>& offsets, int k, T* cols) {
    int ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
    int taps = k * k, pad = k / 2;
    int64_t n = static_cast<int64_t>(h) * wd;
    for (int c2 = 0; c2 < ci; c2++) {
        const T* plane = x.v.data() + static_cast<int64_t>(c2) * n;
        for (int tap = 0; tap < taps; tap++) {
            int ky = tap / k, kx = tap % k;
            const T* ody = offsets.v.data() + static_cast<int64_t>(2 * tap) * n;
            const T* odx = offsets.v.data() + static_cast<int64_t>(2 * tap + 1) * n;
            T* out_row = cols + (static_cast<int64_t>(c2) * taps + tap) * n;
            for (int oy = 0; oy < h; oy++)
                for (int ox = 0; ox < wd; ox++) {
                    int64_t p = static_cast<int64_t>(oy) * wd + ox;
                    T py = static_cast<T>(oy - pad + ky) + ody[p];
                    T px = static_cast<T>(ox - pad + kx) + odx[p];
                    out_row[p] = bilinear_tap(plane, h, wd, py, px).value;
                }
        }
    }
}

}  // namespace detail

// Deformable conv, stride 1, pad k/2, per-position offsets shared across input
// channels. offsets is (2*k*k)xHxW laid out [tap][dy,dx] with tap = ky*k+kx.
template <typename T>
TensorPtr<T> deform_conv2d(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& offsets,
                           const TensorPtr<T>& w, const TensorPtr<T>& b) {
    if (x->ndim() != 3 || w->ndim() != 4 || w->dim(1) != x->dim(0))
        throw ShapeError("deform_conv2d: " + shape_str(x->shape) + " with " + shape_str(w->shape));
    int ci = x->dim(0), h = x->dim(1), wd = x->dim(2);
    int co = w->dim(0), k = w->dim(2), pad = k / 2;
    int taps = k * k;
    if (offsets->ndim() != 3 || offsets->dim(0) != 2 * taps || offsets->dim(1) != h || offsets->dim(2) != wd)
        throw ShapeError("deform_conv2d: offsets " + shape_str(offsets->shape));
    int64_t n = static_cast<int64_t>(h) * wd;
    int kk = ci * taps;

    std::vector<T> cols(static_cast<int64_t>(kk) * n);
    detail::deform_im2col(*x, *offsets, k, cols.data());

    auto out = make_tensor<T>({co, h, wd});
    gemm_nn(w->v.data(), cols.data(), out->v.data(), co, kk, static_cast<int>(n));
    if (b) {
        if (b->numel() != co) throw ShapeError("deform_conv2d: bias size");
        for (int o = 0; o < co; o++)
            for (int64_t p = 0; p < n; p++) out->v[o * n + p] += b->v[o];
    }

    bool track = tape && (x->rg || offsets->rg || w->rg || (b && b->rg));
    if (track) {
        out->set_rg(true);
        tape->record([x, offsets, w, b, out, ci, h, wd, co, k, pad, taps, n, kk] {
            std::vector<T> cols2(static_cast<int64_t>(kk) * n);
            detail::deform_im2col(*x, *offsets, k, cols2.data());
            if (w->rg) gemm_nt_acc(out->g.data(), cols2.data(), w->g.data(), co, static_cast<int>(n), kk);
            if (b && b->rg)
                for (int o = 0; o < co; o++)
                    for (int64_t p = 0; p < n; p++) b->g[o] += out->g[o * n + p];
            if (x->rg || offsets->rg) {
                std::vector<T> dcols(static_cast<int64_t>(kk) * n, T(0));
                gemm_tn_acc(w->v.data(), out->g.data(), dcols.data(), kk, co, static_cast<int>(n));
                for (int c2 = 0; c2 < ci; c2++) {
                    const T* plane = x->v.data() + static_cast<int64_t>(c2) * n;
                    T* dplane = x->rg ? x->g.data() + static_cast<int64_t>(c2) * n : nullptr;
                    for (int tap = 0; tap < taps; tap++) {
                        int ky = tap / k, kx = tap % k;
                        const T* ody = offsets->v.data() + static_cast<int64_t>(2 * tap) * n;
                        const T* odx = offsets->v.data() + static_cast<int64_t>(2 * tap + 1) * n;
                        T* gdy = offsets->rg ? offsets->g.data() + static_cast<int64_t>(2 * tap) * n : nullptr;
                        T* gdx = offsets->rg ? offsets->g.data() + static_cast<int64_t>(2 * tap + 1) * n : nullptr;
                        const T* drow = dcols.data() + (static_cast<int64_t>(c2) * taps + tap) * n;
                        for (int oy = 0; oy < h; oy++)
                            for (int ox = 0; ox < wd; ox++) {
                                int64_t p = static_cast<int64_t>(oy) * wd + ox;
                                T gcol = drow[p];
                                if (gcol == T(0)) continue;
                                T py = static_cast<T>(oy - pad + ky) + ody[p];
                                T px = static_cast<T>(ox - pad + kx) + odx[p];
                                auto tp = detail::bilinear_tap(plane, h, wd, py, px);
                                if (dplane)
                                    for (int s = 0; s < 4; s++)
                                        if (tp.idx[s] >= 0) dplane[tp.idx[s]] += gcol * tp.wgt[s];
                                if (gdy) {
                                    gdy[p] += gcol * tp.dpy;
                                    gdx[p] += gcol * tp.dpx;
                                }
                            }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace glyphdiff::ops
