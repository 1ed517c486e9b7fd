#pragma once

#include <string>
#include <utility>

#include "core/ops.hpp"
#include "core/params.hpp"

// Differentiable building blocks. Every block owns named parameters inside a
// ParamStore and evaluates as a pure function of (inputs, params). Residual
// output projections (attention out-proj, offset head, second resblock conv)
// start at zero so a fresh block is near-identity.

namespace glyphdiff {

// sinusoidal timestep embedding, first half sin, second half cos
template <typename T>
TensorPtr<T> sinusoidal_embed(int t, int dim) {
    if (dim % 2) throw ShapeError("sinusoidal_embed: dim must be even");
    auto out = make_tensor<T>({1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; i++) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        out->v[i] = static_cast<T>(std::sin(t * freq));
        out->v[half + i] = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

template <typename T>
struct CrossAttentionParams {
    TensorPtr<T> wq, wk, wv;  // (Dq x d), (Dkv x d), (Dkv x d)
    int heads = 1;
};

// softmax(Q K^T / sqrt(d_head)) V over token matrices; no output projection
template <typename T>
TensorPtr<T> cross_attention(Tape<T>* tape, const TensorPtr<T>& q_tokens,
                             const TensorPtr<T>& kv_tokens, const CrossAttentionParams<T>& p) {
    auto Q = ops::matmul(tape, q_tokens, p.wq);
    auto K = ops::matmul(tape, kv_tokens, p.wk);
    auto V = ops::matmul(tape, kv_tokens, p.wv);
    int d = Q->dim(1);
    if (d % p.heads) throw ShapeError("cross_attention: heads must divide attn dim");
    int dh = d / p.heads;
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<TensorPtr<T>> outs;
    for (int h = 0; h < p.heads; h++) {
        auto Qh = p.heads == 1 ? Q : ops::slice_cols(tape, Q, h * dh, dh);
        auto Kh = p.heads == 1 ? K : ops::slice_cols(tape, K, h * dh, dh);
        auto Vh = p.heads == 1 ? V : ops::slice_cols(tape, V, h * dh, dh);
        auto logits = ops::affine_const(tape, ops::matmul_nt(tape, Qh, Kh), scale, T(0));
        auto attn = ops::softmax_rows(tape, logits);
        outs.push_back(ops::matmul(tape, attn, Vh));
    }
    return p.heads == 1 ? outs[0] : ops::concat_cols(tape, outs);
}

// squeeze-excite style gate: x + x * sigmoid(W2 relu(W1 avgpool(x)))
template <typename T>
struct ChannelAttention {
    TensorPtr<T> w1, b1, w2, b2;
    ChannelAttention() = default;
    ChannelAttention(ParamStore<T>& ps, const std::string& p, int channels, int reduction = 4) {
        int hidden = std::max(1, channels / reduction);
        w1 = ps.create(p + ".w1", {channels, hidden}, Init::HeNormal, channels);
        b1 = ps.create(p + ".b1", {hidden}, Init::Zero);
        w2 = ps.create(p + ".w2", {hidden, channels}, Init::HeNormal, hidden);
        b2 = ps.create(p + ".b2", {channels}, Init::Zero);
    }
    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x) const {
        auto pooled_row = ops::reshape(tape, ops::global_avg_pool(tape, x), {1, x->dim(0)});
        auto h = ops::relu(tape, ops::linear(tape, pooled_row, w1, b1));
        auto gate = ops::sigmoid(tape, ops::linear(tape, h, w2, b2));  // {1, C}
        auto gated = ops::channel_scale(tape, x, gate);
        return ops::add(tape, x, gated);
    }
};

// resblock with GroupNorm, SiLU and timestep scale-shift conditioning
template <typename T>
struct ResBlock {
    TensorPtr<T> gn1_g, gn1_b, conv1_w, conv1_b;
    TensorPtr<T> temb_w, temb_b;
    TensorPtr<T> gn2_g, gn2_b, conv2_w, conv2_b;
    TensorPtr<T> skip_w;  // null when channels match
    int groups = 8;
    ResBlock() = default;
    ResBlock(ParamStore<T>& ps, const std::string& p, int c_in, int c_out, int time_dim, int gn_groups)
        : groups(gn_groups) {
        gn1_g = ps.create(p + ".gn1.g", {c_in}, Init::One);
        gn1_b = ps.create(p + ".gn1.b", {c_in}, Init::Zero);
        conv1_w = ps.create(p + ".conv1.w", {c_out, c_in, 3, 3}, Init::HeNormal, c_in * 9);
        conv1_b = ps.create(p + ".conv1.b", {c_out}, Init::Zero);
        temb_w = ps.create(p + ".temb.w", {time_dim, 2 * c_out}, Init::HeNormal, time_dim);
        temb_b = ps.create(p + ".temb.b", {2 * c_out}, Init::Zero);
        gn2_g = ps.create(p + ".gn2.g", {c_out}, Init::One);
        gn2_b = ps.create(p + ".gn2.b", {c_out}, Init::Zero);
        conv2_w = ps.create(p + ".conv2.w", {c_out, c_out, 3, 3}, Init::Zero);
        conv2_b = ps.create(p + ".conv2.b", {c_out}, Init::Zero);
        if (c_in != c_out) skip_w = ps.create(p + ".skip.w", {c_out, c_in, 1, 1}, Init::HeNormal, c_in);
    }
    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& t_emb) const {
        auto h = ops::conv2d(tape, ops::silu(tape, ops::group_norm(tape, x, gn1_g, gn1_b, groups)),
                             conv1_w, conv1_b, 1, 1);
        auto ss = ops::linear(tape, ops::silu(tape, t_emb), temb_w, temb_b);  // {1, 2*c_out}
        h = ops::scale_shift(tape, ops::group_norm(tape, h, gn2_g, gn2_b, groups), ss);
        h = ops::conv2d(tape, ops::silu(tape, h), conv2_w, conv2_b, 1, 1);
        auto skip = skip_w ? ops::conv2d(tape, x, skip_w, TensorPtr<T>(), 1, 0) : x;
        return ops::add(tape, h, skip);
    }
};

// layer-normed cross-attention over flattened space with zero-init out-proj
template <typename T>
struct StyleAttention {
    TensorPtr<T> lnq_g, lnq_b, lnkv_g, lnkv_b, wo;
    CrossAttentionParams<T> attn;
    StyleAttention() = default;
    StyleAttention(ParamStore<T>& ps, const std::string& p, int channels, int d_style, int heads) {
        lnq_g = ps.create(p + ".lnq.g", {channels}, Init::One);
        lnq_b = ps.create(p + ".lnq.b", {channels}, Init::Zero);
        lnkv_g = ps.create(p + ".lnkv.g", {d_style}, Init::One);
        lnkv_b = ps.create(p + ".lnkv.b", {d_style}, Init::Zero);
        attn.wq = ps.create(p + ".wq", {channels, channels}, Init::HeNormal, channels);
        attn.wk = ps.create(p + ".wk", {d_style, channels}, Init::HeNormal, d_style);
        attn.wv = ps.create(p + ".wv", {d_style, channels}, Init::HeNormal, d_style);
        attn.heads = heads;
        wo = ps.create(p + ".wo", {channels, channels}, Init::Zero);
    }
    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& style_tokens) const {
        int h = x->dim(1), w = x->dim(2);
        auto q = ops::layer_norm(tape, ops::chw_to_tokens(tape, x), lnq_g, lnq_b);
        auto kv = ops::layer_norm(tape, style_tokens, lnkv_g, lnkv_b);
        auto att = cross_attention(tape, q, kv, attn);
        auto o = ops::matmul(tape, att, wo);
        return ops::add(tape, x, ops::tokens_to_chw(tape, o, h, w));
    }
};

// Multi-scale content aggregation block: concat content feature, gate by
// channel attention, reduce, resblock, style cross-attention, optional
// stride-2 downsample.
template <typename T>
struct McaBlock {
    ChannelAttention<T> ca;
    TensorPtr<T> reduce_w, reduce_b;
    ResBlock<T> res;
    StyleAttention<T> attn;
    TensorPtr<T> down_w, down_b;  // null unless a down-stage
    McaBlock() = default;
    McaBlock(ParamStore<T>& ps, const std::string& p, int c_r, int c_fc, int c_out, int d_style,
             int time_dim, int gn_groups, int heads, bool down) {
        int c_cat = c_r + c_fc;
        ca = ChannelAttention<T>(ps, p + ".ca", c_cat);
        reduce_w = ps.create(p + ".reduce.w", {c_out, c_cat, 1, 1}, Init::HeNormal, c_cat);
        reduce_b = ps.create(p + ".reduce.b", {c_out}, Init::Zero);
        res = ResBlock<T>(ps, p + ".res", c_out, c_out, time_dim, gn_groups);
        attn = StyleAttention<T>(ps, p + ".attn", c_out, d_style, heads);
        if (down) {
            down_w = ps.create(p + ".down.w", {c_out, c_out, 3, 3}, Init::HeNormal, c_out * 9);
            down_b = ps.create(p + ".down.b", {c_out}, Init::Zero);
        }
    }
    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& r, const TensorPtr<T>& f_c,
                         const TensorPtr<T>& style_tokens, const TensorPtr<T>& t_emb) const {
        if (r->dim(1) != f_c->dim(1) || r->dim(2) != f_c->dim(2))
            throw ShapeError("mca_block: content feature " + shape_str(f_c->shape) +
                             " misaligned with " + shape_str(r->shape));
        auto cat = ops::concat_channels(tape, r, f_c);
        auto gated = ca.forward(tape, cat);
        auto reduced = ops::conv2d(tape, gated, reduce_w, reduce_b, 1, 0);
        auto h = res.forward(tape, reduced, t_emb);
        h = attn.forward(tape, h, style_tokens);
        if (down_w) h = ops::conv2d(tape, h, down_w, down_b, 2, 1);
        return h;
    }
};

// Style insertion block: resblock then style cross-attention, optional x2 up
template <typename T>
struct SiBlock {
    ResBlock<T> res;
    StyleAttention<T> attn;
    TensorPtr<T> up_w, up_b;  // null unless an up-stage
    SiBlock() = default;
    SiBlock(ParamStore<T>& ps, const std::string& p, int c_in, int c_out, int d_style, int time_dim,
            int gn_groups, int heads, bool up) {
        res = ResBlock<T>(ps, p + ".res", c_in, c_out, time_dim, gn_groups);
        attn = StyleAttention<T>(ps, p + ".attn", c_out, d_style, heads);
        if (up) {
            up_w = ps.create(p + ".up.w", {c_out, c_out, 3, 3}, Init::HeNormal, c_out * 9);
            up_b = ps.create(p + ".up.b", {c_out}, Init::Zero);
        }
    }
    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& style_tokens,
                         const TensorPtr<T>& t_emb) const {
        auto h = res.forward(tape, x, t_emb);
        h = attn.forward(tape, h, style_tokens);
        if (up_w) h = ops::conv2d(tape, ops::upsample_nearest2(tape, h), up_w, up_b, 1, 1);
        return h;
    }
};

// attention with space as the contraction axis: tokens are projected to d
// columns, the dxd Gram matrix of (channel row) x (channel row) similarities is
// softmaxed, and the mix is applied back over positions. Any single query pixel
// moves every Gram entry, so the output at every position responds; per-token
// attention would keep the response local to the perturbed row.
template <typename T>
TensorPtr<T> gram_attention(Tape<T>* tape, const TensorPtr<T>& q_tokens,
                            const TensorPtr<T>& kv_tokens, const CrossAttentionParams<T>& p) {
    auto Q = ops::matmul(tape, q_tokens, p.wq);
    auto K = ops::matmul(tape, kv_tokens, p.wk);
    auto V = ops::matmul(tape, kv_tokens, p.wv);
    int d = Q->dim(1);
    if (d % p.heads) throw ShapeError("gram_attention: heads must divide attn dim");
    int dh = d / p.heads;
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<TensorPtr<T>> outs;
    for (int h = 0; h < p.heads; h++) {
        auto Qt = ops::transpose(tape, p.heads == 1 ? Q : ops::slice_cols(tape, Q, h * dh, dh));
        auto Kt = ops::transpose(tape, p.heads == 1 ? K : ops::slice_cols(tape, K, h * dh, dh));
        auto Vt = ops::transpose(tape, p.heads == 1 ? V : ops::slice_cols(tape, V, h * dh, dh));
        auto logits = ops::affine_const(tape, ops::matmul_nt(tape, Qt, Kt), scale, T(0));
        auto attn = ops::softmax_rows(tape, logits);  // dh x dh
        outs.push_back(ops::transpose(tape, ops::matmul(tape, attn, Vt)));
    }
    return p.heads == 1 ? outs[0] : ops::concat_cols(tape, outs);
}

// Reference-structure interaction on a skip connection: global attention from
// structure tokens into skip tokens predicts deformable-conv offsets; the
// offsets are surfaced for the offset penalty.
template <typename T>
struct RsiBlock {
    TensorPtr<T> lns_g, lns_b, lnr_g, lnr_b;
    CrossAttentionParams<T> attn;
    TensorPtr<T> ffn1_w, ffn1_b, ffn2_w, ffn2_b;
    TensorPtr<T> dcn_w, dcn_b;
    int kernel = 3;
    RsiBlock() = default;
    RsiBlock(ParamStore<T>& ps, const std::string& p, int c_r, int c_f, int d_attn, int ffn_hidden,
             int heads, int k = 3)
        : kernel(k) {
        lns_g = ps.create(p + ".lns.g", {c_f}, Init::One);
        lns_b = ps.create(p + ".lns.b", {c_f}, Init::Zero);
        lnr_g = ps.create(p + ".lnr.g", {c_r}, Init::One);
        lnr_b = ps.create(p + ".lnr.b", {c_r}, Init::Zero);
        attn.wq = ps.create(p + ".wq", {c_f, d_attn}, Init::HeNormal, c_f);
        attn.wk = ps.create(p + ".wk", {c_r, d_attn}, Init::HeNormal, c_r);
        attn.wv = ps.create(p + ".wv", {c_r, d_attn}, Init::HeNormal, c_r);
        attn.heads = heads;
        ffn1_w = ps.create(p + ".ffn1.w", {d_attn, ffn_hidden}, Init::HeNormal, d_attn);
        ffn1_b = ps.create(p + ".ffn1.b", {ffn_hidden}, Init::Zero);
        ffn2_w = ps.create(p + ".ffn2.w", {ffn_hidden, 2 * k * k}, Init::Zero);
        ffn2_b = ps.create(p + ".ffn2.b", {2 * k * k}, Init::Zero);
        dcn_w = ps.create(p + ".dcn.w", {c_r, c_r, k, k}, Init::HeNormal, c_r * k * k);
        dcn_b = ps.create(p + ".dcn.b", {c_r}, Init::Zero);
    }
    std::pair<TensorPtr<T>, TensorPtr<T>> forward(Tape<T>* tape, const TensorPtr<T>& r,
                                                  const TensorPtr<T>& f_s) const {
        if (r->dim(1) != f_s->dim(1) || r->dim(2) != f_s->dim(2))
            throw ShapeError("rsi_block: structure map " + shape_str(f_s->shape) +
                             " misaligned with " + shape_str(r->shape));
        int h = r->dim(1), w = r->dim(2);
        auto sq = ops::layer_norm(tape, ops::chw_to_tokens(tape, f_s), lns_g, lns_b);
        auto skv = ops::layer_norm(tape, ops::chw_to_tokens(tape, r), lnr_g, lnr_b);
        auto f_attn = gram_attention(tape, sq, skv, attn);
        auto hidden = ops::silu(tape, ops::linear(tape, f_attn, ffn1_w, ffn1_b));
        auto delta_tok = ops::linear(tape, hidden, ffn2_w, ffn2_b);  // (H*W) x 2k^2
        auto offsets = ops::tokens_to_chw(tape, delta_tok, h, w);
        auto deformed = ops::deform_conv2d(tape, r, offsets, dcn_w, dcn_b);
        return {deformed, offsets};
    }
};

}  // namespace glyphdiff
