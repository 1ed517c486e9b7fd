#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "core/ops.hpp"
#include "core/params.hpp"
#include "glyphset.hpp"
#include "io/checkpoint.hpp"
#include "optim.hpp"

// Style-contrastive refinement: a small VGG-style trunk, a dual-pooling
// projector per stage, the layerwise contrastive loss, standalone
// pretraining, and a retrieval probe for how well styles separate.

namespace glyphdiff {

struct ScrConfig {
    std::vector<int> widths = {32, 64, 128, 256, 256, 256};
    int proj_dim = 128;
};

inline std::vector<TensorRecord> scr_config_records(const ScrConfig& c) {
    TensorRecord w{"config.scr_widths", {static_cast<int>(c.widths.size())}, {}};
    for (int x : c.widths) w.data.push_back(static_cast<float>(x));
    return {std::move(w),
            {"config.scr_proj_dim", {1}, {static_cast<float>(c.proj_dim)}}};
}

inline ScrConfig scr_config_from_records(const std::vector<TensorRecord>& recs) {
    ScrConfig c;
    const auto* w = find_record(recs, "config.scr_widths");
    const auto* d = find_record(recs, "config.scr_proj_dim");
    if (!w || !d || w->data.empty() || d->data.size() != 1)
        throw ConfigError("checkpoint lacks extractor config records");
    c.widths.clear();
    for (float x : w->data) c.widths.push_back(static_cast<int>(x));
    c.proj_dim = static_cast<int>(d->data[0]);
    return c;
}

template <typename T>
struct ScrExtractor {
    ScrConfig cfg;
    ParamStore<T> ps;
    std::vector<TensorPtr<T>> conv_w, conv_b, proj_w, proj_b;

    ScrExtractor(const ScrConfig& c, uint64_t seed) : cfg(c), ps(seed) {
        if (cfg.widths.empty() || cfg.proj_dim < 1) throw ConfigError("bad extractor config");
        int c_in = 3;
        for (size_t l = 0; l < cfg.widths.size(); l++) {
            int c_out = cfg.widths[l];
            std::string p = "scr.s" + std::to_string(l);
            conv_w.push_back(ps.create(p + ".w", {c_out, c_in, 3, 3}, Init::HeNormal, c_in * 9));
            conv_b.push_back(ps.create(p + ".b", {c_out}, Init::Zero));
            proj_w.push_back(ps.create(p + ".proj.w", {2 * c_out, cfg.proj_dim}, Init::HeNormal, 2 * c_out));
            proj_b.push_back(ps.create(p + ".proj.b", {cfg.proj_dim}, Init::Zero));
            c_in = c_out;
        }
    }

    int n_layers() const { return static_cast<int>(cfg.widths.size()); }

    void check_input(const TensorPtr<T>& x) const {
        int halvings = n_layers() - 1;
        int grain = 1 << halvings;
        if (x->ndim() != 3 || x->dim(0) != 3)
            throw ShapeError("extractor: want 3xHxW, got " + shape_str(x->shape));
        if (x->dim(1) % grain || x->dim(2) % grain || x->dim(1) < grain || x->dim(2) < grain)
            throw ShapeError("extractor: spatial size must be a positive multiple of " +
                             std::to_string(grain));
    }

    // per-stage feature maps (post-activation), pooling between stages
    std::vector<TensorPtr<T>> trunk_features(Tape<T>* tape, const TensorPtr<T>& x,
                                             int up_to = -1) const {
        check_input(x);
        int last = up_to < 0 ? n_layers() - 1 : up_to;
        std::vector<TensorPtr<T>> feats;
        auto h = x;
        for (int l = 0; l <= last; l++) {
            h = ops::relu(tape, ops::conv2d(tape, h, conv_w[l], conv_b[l], 1, 1));
            feats.push_back(h);
            if (l + 1 <= last) h = ops::maxpool2(tape, h);
        }
        return feats;
    }

    // unit-norm style vector per requested layer: dual global pooling then a
    // linear head
    std::vector<TensorPtr<T>> style_vectors(Tape<T>* tape, const TensorPtr<T>& x,
                                            const std::vector<int>& layers) const {
        if (layers.empty()) throw DomainError("style_vectors: no layers requested");
        int max_l = 0;
        for (int l : layers) {
            if (l < 0 || l >= n_layers())
                throw DomainError("style_vectors: layer " + std::to_string(l) + " out of range");
            max_l = std::max(max_l, l);
        }
        auto feats = trunk_features(tape, x, max_l);
        std::vector<TensorPtr<T>> out;
        for (int l : layers) {
            int c = feats[l]->dim(0);
            auto avg = ops::reshape(tape, ops::global_avg_pool(tape, feats[l]), {1, c});
            auto mx = ops::reshape(tape, ops::global_max_pool(tape, feats[l]), {1, c});
            auto pooled = ops::concat_cols(tape, std::vector<TensorPtr<T>>{avg, mx});
            out.push_back(ops::l2_normalize(tape, ops::linear(tape, pooled, proj_w[l], proj_b[l])));
        }
        return out;
    }
};

// L = Σ_l −log( e^{v0·vp/τ} / (e^{v0·vp/τ} + Σ_i e^{v0·vn_i/τ}) ), stabilized
template <typename T>
TensorPtr<T> style_contrastive_loss(Tape<T>* tape, const std::vector<TensorPtr<T>>& v0,
                                    const std::vector<TensorPtr<T>>& vp,
                                    const std::vector<std::vector<TensorPtr<T>>>& vn, T tau) {
    if (!(tau > T(0))) throw DomainError("tau must be positive");
    size_t n = v0.size();
    if (n == 0 || vp.size() != n) throw ShapeError("contrastive loss: layer count mismatch");
    if (vn.empty()) throw ShapeError("contrastive loss: need at least one negative");
    for (auto& s : vn)
        if (s.size() != n) throw ShapeError("contrastive loss: negative layer count mismatch");
    T inv_tau = T(1) / tau;
    std::vector<std::pair<T, TensorPtr<T>>> terms;
    for (size_t l = 0; l < n; l++) {
        check_same_shape(v0[l]->shape, vp[l]->shape, "contrastive loss");
        auto lp = ops::affine_const(tape, ops::dot(tape, v0[l], vp[l]), inv_tau, T(0));
        std::vector<TensorPtr<T>> logits{lp};
        for (auto& s : vn) {
            check_same_shape(v0[l]->shape, s[l]->shape, "contrastive loss");
            logits.push_back(ops::affine_const(tape, ops::dot(tape, v0[l], s[l]), inv_tau, T(0)));
        }
        terms.push_back({T(1), ops::logsumexp(tape, ops::stack_scalars(tape, logits))});
        terms.push_back({T(-1), lp});
    }
    return ops::weighted_sum_scalars(tape, terms);
}

struct ScrPretrainConfig {
    int K = 48;  // scaled down to min(K, n_fonts - 2)
    double lr = 1e-4;
    int warmup = 1000;
    int steps = 2000;
    int batch = 4;
    double tau = 0.07;
    double weight_decay = 0.01;
    uint64_t seed = 0;
    std::vector<int> layers = {0, 1, 2, 3, 4, 5};
};

inline double warmup_decay_lr(double lr_max, int step, int warmup, int steps) {
    if (warmup > 0 && step < warmup) return lr_max * (step + 1) / static_cast<double>(warmup);
    if (steps <= warmup) return lr_max;
    return lr_max * (steps - step) / static_cast<double>(steps - warmup);
}

// anchor = clean glyph, positive = its augmented copy, negatives = same
// character in other fonts; returns the per-step mean loss curve
template <typename T>
std::vector<double> pretrain_scr(ScrExtractor<T>& ext, const Corpus& corpus,
                                 const ScrPretrainConfig& cfg) {
    auto font_ids = corpus.font_ids();
    auto char_ids = corpus.char_ids();
    int n_fonts = static_cast<int>(font_ids.size());
    if (n_fonts < 3) throw ConfigError("pretraining needs at least 3 fonts");
    int k = std::min(cfg.K, n_fonts - 2);
    if (cfg.steps < 1 || cfg.batch < 1) throw ConfigError("pretraining needs steps >= 1, batch >= 1");

    // characters covered by enough fonts to supply the target plus K negatives
    std::vector<int> usable;
    std::map<int, std::vector<int>> fonts_with;
    for (int c : char_ids) {
        for (int f : font_ids)
            if (corpus.has(f, c)) fonts_with[c].push_back(f);
        if (static_cast<int>(fonts_with[c].size()) >= k + 1) usable.push_back(c);
    }
    if (usable.empty()) throw ConfigError("no character is shared by K+1 fonts");

    ext.ps.set_trainable(true);
    AdamW<T> opt;
    opt.weight_decay = cfg.weight_decay;
    std::vector<double> losses;
    losses.reserve(cfg.steps);
    for (int step = 0; step < cfg.steps; step++) {
        opt.lr = warmup_decay_lr(cfg.lr, step, cfg.warmup, cfg.steps);
        ext.ps.zero_grads();
        double acc = 0.0;
        for (int i = 0; i < cfg.batch; i++) {
            Rng rng(cfg.seed, RngUse::ScrBatch, {static_cast<uint64_t>(step), static_cast<uint64_t>(i)});
            int c = usable[rng.integer(usable.size())];
            auto& fonts = fonts_with[c];
            int fi = static_cast<int>(rng.integer(fonts.size()));
            int f = fonts[fi];
            std::vector<int> others;
            for (int g : fonts)
                if (g != f) others.push_back(g);
            for (size_t j = others.size(); j > 1; j--)
                std::swap(others[j - 1], others[rng.integer(j)]);
            others.resize(static_cast<size_t>(k));

            Rng arng(cfg.seed, RngUse::Augment, {static_cast<uint64_t>(step), static_cast<uint64_t>(i)});
            auto anchor = cast_tensor<T>(corpus.at(f, c).image);
            auto positive = cast_tensor<T>(augment_positive(corpus.at(f, c).image, arng));

            Tape<T> tape;
            auto v0 = ext.style_vectors(&tape, anchor, cfg.layers);
            auto vp = ext.style_vectors(&tape, positive, cfg.layers);
            std::vector<std::vector<TensorPtr<T>>> vns;
            vns.reserve(others.size());
            for (int g : others)
                vns.push_back(ext.style_vectors(&tape, cast_tensor<T>(corpus.at(g, c).image), cfg.layers));
            auto loss = style_contrastive_loss(&tape, v0, vp, vns, static_cast<T>(cfg.tau));
            acc += static_cast<double>(loss->v[0]);
            tape.backward(loss, static_cast<T>(1.0 / cfg.batch));
        }
        opt.step(ext.ps);
        losses.push_back(acc / cfg.batch);
    }
    return losses;
}

// Per trial: anchor glyph, positive = same font/different char, distractors =
// the positive's character in every other font; a hit means the positive
// strictly outranks all distractors under the summed per-layer dot score.
template <typename T>
double retrieval_eval(const ScrExtractor<T>& ext, const Corpus& corpus, int n_trials, uint64_t seed,
                      const std::vector<int>& layers = {0, 1, 2, 3, 4, 5}) {
    auto font_ids = corpus.font_ids();
    auto char_ids = corpus.char_ids();
    int n_fonts = static_cast<int>(font_ids.size());
    int n_chars = static_cast<int>(char_ids.size());
    if (n_fonts < 1) throw ConfigError("retrieval needs a non-empty corpus");
    if (n_chars < 2) throw ConfigError("retrieval needs at least 2 characters");
    if (n_trials < 1) throw ConfigError("retrieval needs at least one trial");

    std::map<std::pair<int, int>, std::vector<TensorPtr<T>>> cache;
    auto vecs = [&](int f, int c) -> const std::vector<TensorPtr<T>>& {
        auto key = std::make_pair(f, c);
        auto it = cache.find(key);
        if (it == cache.end())
            it = cache.emplace(key, ext.style_vectors(nullptr, cast_tensor<T>(corpus.at(f, c).image),
                                                      layers))
                     .first;
        return it->second;
    };
    auto score = [&](const std::vector<TensorPtr<T>>& a, const std::vector<TensorPtr<T>>& b) {
        double s = 0.0;
        for (size_t l = 0; l < a.size(); l++)
            for (int64_t i = 0; i < a[l]->numel(); i++)
                s += static_cast<double>(a[l]->v[i]) * static_cast<double>(b[l]->v[i]);
        return s;
    };

    int hits = 0;
    for (int trial = 0; trial < n_trials; trial++) {
        Rng rng(seed, RngUse::RetrievalTrial, {static_cast<uint64_t>(trial)});
        int f = 0, c1 = 0, c2 = 0;
        bool found = false;
        for (int attempt = 0; attempt < 64 && !found; attempt++) {
            f = font_ids[rng.integer(font_ids.size())];
            c1 = char_ids[rng.integer(char_ids.size())];
            c2 = char_ids[rng.integer(char_ids.size())];
            found = c1 != c2 && corpus.has(f, c1) && corpus.has(f, c2);
        }
        if (!found) throw ConfigError("could not draw a retrieval trial; corpus too sparse");
        double sp = score(vecs(f, c1), vecs(f, c2));
        bool hit = true;
        for (int g : font_ids) {
            if (g == f || !corpus.has(g, c2)) continue;
            if (score(vecs(f, c1), vecs(g, c2)) >= sp) {
                hit = false;
                break;
            }
        }
        hits += hit;
    }
    return static_cast<double>(hits) / n_trials;
}

}  // namespace glyphdiff
