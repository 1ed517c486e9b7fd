#pragma once
// Inference: guidance noise mixing, ancestral sampling, a deterministic
// few-step ODE sampler in data-prediction form, and PNG generation.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "glyphdiff/glyphset.hpp"
#include "glyphdiff/network.hpp"
#include "glyphdiff/schedule.hpp"
#include "glyphdiff/train.hpp"

namespace glyphdiff {

enum class SamplerKind { Ancestral, FastODE };

struct GuidanceConfig {
    double scale = 7.5;
    int steps = 20;  // model-evaluation count for the fast sampler; the
                     // ancestral sampler always walks the full chain
    SamplerKind sampler = SamplerKind::FastODE;
    uint64_t seed = 0;

    void validate(int total_steps) const {
        if (scale < 0) throw ConfigError("guidance: scale < 0");
        if (steps < 1) throw ConfigError("guidance: steps < 1");
        if (steps > total_steps) throw ConfigError("guidance: steps > schedule length");
    }
};

// (1-s) * unconditional + s * conditional; the null condition is all-white.
// One model call when s == 1, two otherwise.
template <typename T, typename Model>
TensorPtr<T> cfg_noise(Model& model, const TensorPtr<T>& x_t, int t, const TensorPtr<T>& x_c,
                       const TensorPtr<T>& x_s, double s) {
    auto cond = model.predict(nullptr, x_t, t, x_c, x_s).eps;
    if (s == 1.0) return cond;
    auto null_c = make_tensor<T>(x_c->shape, T(1));
    auto null_s = make_tensor<T>(x_s->shape, T(1));
    auto uncond = model.predict(nullptr, x_t, t, null_c, null_s).eps;
    auto out = make_tensor<T>(cond->shape);
    for (int64_t i = 0; i < out->numel(); i++)
        out->v[i] = static_cast<T>((1.0 - s) * static_cast<double>(uncond->v[i]) +
                                   s * static_cast<double>(cond->v[i]));
    return out;
}

template <typename T>
void clamp_unit(const TensorPtr<T>& x) {
    for (auto& v : x->v) v = std::clamp(v, T(-1), T(1));
}

template <typename T>
TensorPtr<T> draw_gaussian(const std::vector<int>& shape, uint64_t seed, RngUse use,
                           uint64_t counter) {
    auto x = make_tensor<T>(shape);
    Rng rng(seed, use, {counter});
    for (auto& v : x->v) v = static_cast<T>(rng.normal());
    return x;
}

// Full-chain stochastic sampling; final image clamped to [-1,1].
template <typename T, typename Model>
TensorPtr<T> ancestral_sample(Model& model, const TensorPtr<T>& x_c, const TensorPtr<T>& x_s,
                              const NoiseSchedule& sched, const GuidanceConfig& g) {
    g.validate(sched.steps());
    auto x = draw_gaussian<T>(x_c->shape, g.seed, RngUse::SampleInit, 0);
    for (int t = sched.steps() - 1; t >= 0; t--) {
        auto eps = cfg_noise(model, x, t, x_c, x_s, g.scale);
        TensorPtr<T> z;
        if (t > 0)
            z = draw_gaussian<T>(x->shape, g.seed, RngUse::SampleStepNoise,
                                 static_cast<uint64_t>(t));
        else
            z = make_tensor<T>(x->shape);  // sigma_0 = 0, value unused
        x = reverse_step(x, t, eps, z, sched);
    }
    clamp_unit(x);
    return x;
}

// `steps` model-evaluation timesteps spread uniformly in half-log-SNR, from
// T-1 down to 0 (for steps >= 2), strictly decreasing, snapped to integers.
inline std::vector<int> lambda_uniform_timesteps(const NoiseSchedule& sched, int steps) {
    int total = sched.steps();
    if (steps < 1) throw ConfigError("fast sampler: steps < 1");
    if (steps > total) throw ConfigError("fast sampler: steps > schedule length");
    std::vector<int> ts(static_cast<size_t>(steps));
    ts[0] = total - 1;
    if (steps == 1) return ts;
    ts[static_cast<size_t>(steps) - 1] = 0;

    std::vector<double> lam(static_cast<size_t>(total));
    for (int t = 0; t < total; t++) lam[static_cast<size_t>(t)] = sched.half_log_snr(t);
    double l_lo = lam[static_cast<size_t>(total) - 1], l_hi = lam[0];
    for (int i = 1; i < steps - 1; i++) {
        double target = l_lo + (l_hi - l_lo) * (static_cast<double>(i) / (steps - 1));
        // keep room: i slots used above, steps-1-i still to place below
        int hi = ts[static_cast<size_t>(i) - 1] - 1;
        int lo = steps - 1 - i;
        int best = lo;
        double best_d = std::abs(lam[static_cast<size_t>(lo)] - target);
        for (int t = lo + 1; t <= hi; t++) {
            double d = std::abs(lam[static_cast<size_t>(t)] - target);
            if (d < best_d) {
                best_d = d;
                best = t;
            }
        }
        ts[static_cast<size_t>(i)] = best;
    }
    return ts;
}

// Second-order multistep solver in data-prediction form, integrating in
// half-log-SNR. The first transition is first-order; the final transition's
// target is the clean limit, so the last evaluation's data prediction is the
// output. No clamping here: callers decide (tests compare against closed
// forms pre-clamp).
template <typename T, typename Model>
TensorPtr<T> fast_sample_from(Model& model, TensorPtr<T> x, const TensorPtr<T>& x_c,
                              const TensorPtr<T>& x_s, const NoiseSchedule& sched,
                              const GuidanceConfig& g) {
    auto ts = lambda_uniform_timesteps(sched, g.steps);
    TensorPtr<T> x0_prev;
    double h_prev = 0;
    for (size_t i = 0; i < ts.size(); i++) {
        int t = ts[i];
        auto eps = cfg_noise(model, x, t, x_c, x_s, g.scale);
        auto x0 = reconstruct_x0(x, t, eps, sched);
        if (i + 1 == ts.size()) return x0;  // clean limit: lambda -> inf

        int t_next = ts[i + 1];
        double h = sched.half_log_snr(t_next) - sched.half_log_snr(t);
        TensorPtr<T> d = x0;
        if (x0_prev) {
            double r = h_prev / h;
            double c0 = 1.0 + 1.0 / (2.0 * r);
            d = make_tensor<T>(x0->shape);
            for (int64_t k = 0; k < d->numel(); k++)
                d->v[k] = static_cast<T>(c0 * static_cast<double>(x0->v[k]) -
                                         (c0 - 1.0) * static_cast<double>(x0_prev->v[k]));
        }
        double sig_ratio = sched.sqrt_one_minus_alpha_bar(t_next) / sched.sqrt_one_minus_alpha_bar(t);
        double gain = sched.sqrt_alpha_bar(t_next) * (std::exp(-h) - 1.0);
        auto nx = make_tensor<T>(x->shape);
        for (int64_t k = 0; k < nx->numel(); k++)
            nx->v[k] = static_cast<T>(sig_ratio * static_cast<double>(x->v[k]) -
                                      gain * static_cast<double>(d->v[k]));
        x = nx;
        x0_prev = x0;
        h_prev = h;
    }
    return x;  // unreachable
}

template <typename T, typename Model>
TensorPtr<T> fast_sample(Model& model, const TensorPtr<T>& x_c, const TensorPtr<T>& x_s,
                         const NoiseSchedule& sched, const GuidanceConfig& g) {
    g.validate(sched.steps());
    auto x = draw_gaussian<T>(x_c->shape, g.seed, RngUse::SampleInit, 0);
    x = fast_sample_from(model, std::move(x), x_c, x_s, sched, g);
    clamp_unit(x);
    return x;
}

template <typename T, typename Model>
TensorPtr<T> run_sampler(Model& model, const TensorPtr<T>& x_c, const TensorPtr<T>& x_s,
                         const NoiseSchedule& sched, const GuidanceConfig& g) {
    if (g.sampler == SamplerKind::Ancestral) return ancestral_sample(model, x_c, x_s, sched, g);
    return fast_sample(model, x_c, x_s, sched, g);
}

// ---- checkpoint-driven generation ----

struct SamplerBundle {
    NetworkConfig net;
    NoiseSchedule sched;
    std::unique_ptr<DiffusionModel<float>> model;
};

inline SamplerBundle load_sampler(const std::string& ckpt_prefix) {
    auto recs = load_records(ckpt_prefix);
    SamplerBundle b;
    b.net = config_from_records(recs);
    b.sched = schedule_from_records(recs);
    b.model = std::make_unique<DiffusionModel<float>>(b.net, 0);
    load_store(b.model->ps, recs);
    return b;
}

inline const char* sampler_name(SamplerKind k) {
    return k == SamplerKind::Ancestral ? "ancestral" : "fast";
}

inline void write_sample_meta(const std::string& path, const GuidanceConfig& g) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write metadata " + path);
    f << "scale=" << g.scale << "\n"
      << "steps=" << g.steps << "\n"
      << "sampler=" << sampler_name(g.sampler) << "\n"
      << "seed=" << g.seed << "\n";
    f.flush();
    if (!f.good()) throw IoError("failed writing metadata " + path);
}

// Square grid, ceil(sqrt(n)) columns, white background, channel 0 of each
// image; all images must share one square resolution.
inline void write_contact_sheet(const std::string& path, const std::vector<GlyphImage>& imgs) {
    if (imgs.empty()) throw ConfigError("contact sheet: no images");
    int r = imgs[0]->dim(1);
    for (auto& im : imgs)
        if (im->dim(1) != r || im->dim(2) != r)
            throw ShapeError("contact sheet: images must share one square size");
    int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(imgs.size()))));
    int rows = static_cast<int>((imgs.size() + static_cast<size_t>(cols) - 1) / static_cast<size_t>(cols));
    std::vector<unsigned char> pix(static_cast<size_t>(rows) * r * cols * r, 255);
    int sheet_w = cols * r;
    for (size_t i = 0; i < imgs.size(); i++) {
        int cy = (static_cast<int>(i) / cols) * r;
        int cx = (static_cast<int>(i) % cols) * r;
        for (int y = 0; y < r; y++)
            for (int x = 0; x < r; x++) {
                double p = std::lround((static_cast<double>(imgs[i]->v[static_cast<int64_t>(y) * r + x]) + 1.0) / 2.0 * 255.0);
                pix[static_cast<size_t>(cy + y) * sheet_w + static_cast<size_t>(cx + x)] =
                    static_cast<unsigned char>(std::clamp(p, 0.0, 255.0));
            }
    }
    write_png_gray(path, pix.data(), sheet_w, rows * r);
}

// One glyph: read the two condition PNGs, sample, write PNG + metadata.
inline GlyphImage generate(const std::string& ckpt_prefix, const std::string& content_png,
                           const std::string& style_png, const GuidanceConfig& g,
                           const std::string& out_png) {
    auto bundle = load_sampler(ckpt_prefix);
    g.validate(bundle.sched.steps());
    auto x_c = load_glyph_png(content_png);
    auto x_s = load_glyph_png(style_png);
    bundle.model->check_image(x_c, "generate content");
    bundle.model->check_image(x_s, "generate style");
    auto out = run_sampler(*bundle.model, x_c, x_s, bundle.sched, g);
    save_glyph_png(out_png, out);
    write_sample_meta(out_png + ".meta.txt", g);
    return out;
}

struct GeneratePair {
    std::string content, style, out;
};

inline std::vector<GeneratePair> load_pair_list(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open pair list " + path);
    std::vector<GeneratePair> pairs;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        lineno++;
        if (line.empty()) continue;
        std::istringstream ss(line);
        GeneratePair p;
        if (!(ss >> p.content >> p.style >> p.out))
            throw IoError("pair list: bad line " + std::to_string(lineno) + " in " + path);
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) throw ConfigError("pair list is empty: " + path);
    return pairs;
}

// Batch mode: one PNG per row plus a contact sheet of all outputs.
inline void generate_batch(const std::string& ckpt_prefix, const std::string& list_path,
                           const GuidanceConfig& g, const std::string& sheet_png) {
    auto pairs = load_pair_list(list_path);
    auto bundle = load_sampler(ckpt_prefix);
    g.validate(bundle.sched.steps());
    std::vector<GlyphImage> outs;
    for (auto& p : pairs) {
        auto x_c = load_glyph_png(p.content);
        auto x_s = load_glyph_png(p.style);
        bundle.model->check_image(x_c, "generate content");
        bundle.model->check_image(x_s, "generate style");
        auto out = run_sampler(*bundle.model, x_c, x_s, bundle.sched, g);
        save_glyph_png(p.out, out);
        write_sample_meta(p.out + ".meta.txt", g);
        outs.push_back(out);
    }
    write_contact_sheet(sheet_png, outs);
}

}  // namespace glyphdiff
