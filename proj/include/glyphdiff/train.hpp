#pragma once
// Two-phase training: condition dropout, loss assembly, step functions, and a
// resumable driver that writes checkpoints plus a loss CSV.

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "glyphdiff/glyphset.hpp"
#include "glyphdiff/io/checkpoint.hpp"
#include "glyphdiff/network.hpp"
#include "glyphdiff/optim.hpp"
#include "glyphdiff/schedule.hpp"
#include "glyphdiff/scr.hpp"

namespace glyphdiff {

struct Phase1Config {
    double lambda_cp = 0.01;
    double lambda_off = 0.5;
    double lr = 1e-4;  // decayed linearly to zero across `steps`
    int batch = 16;
    int steps = 1;
    uint64_t seed = 0;
    double cond_drop = 0.1;
    std::vector<int> scr_layers = {0, 1, 2, 3};  // trunk taps for the content loss

    void validate() const {
        if (lambda_cp < 0 || lambda_off < 0) throw ConfigError("train: negative loss weight");
        if (steps < 1) throw ConfigError("train: steps < 1");
        if (batch < 1) throw ConfigError("train: batch < 1");
        if (cond_drop < 0 || cond_drop >= 1) throw ConfigError("train: cond_drop outside [0,1)");
    }
};

// Phase 2 keeps every phase-1 field; lr is held constant instead of decayed.
struct Phase2Config : Phase1Config {
    double lambda_sc = 0.01;
    int k_negatives = 16;
    double tau = 0.07;

    Phase2Config() { lr = 1e-5; }

    void validate() const {
        Phase1Config::validate();
        if (lambda_sc < 0) throw ConfigError("train: negative lambda_sc");
        if (k_negatives < 1) throw ConfigError("train: k_negatives < 1");
        if (tau <= 0) throw ConfigError("train: tau <= 0");
    }
};

struct LossReport {
    double total = 0, mse = 0, cp = 0, offset = 0, sc = 0;
    bool has_sc = false;  // phase 2 reports the style-contrastive term
    int k = 0;            // negatives per sample (phase 2)
    double tau = 0;       // contrastive temperature (phase 2)
};

// Joint dropout: with probability p both conditions become all-white (+1),
// matching the single joint null the guidance formula evaluates.
template <typename T>
std::pair<TensorPtr<T>, TensorPtr<T>> condition_dropout(const TensorPtr<T>& x_c,
                                                        const TensorPtr<T>& x_s, double p,
                                                        Rng& rng) {
    if (p < 0 || p >= 1) throw DomainError("condition_dropout: p outside [0,1)");
    if (rng.bernoulli(p))
        return {make_tensor<T>(x_c->shape, T(1)), make_tensor<T>(x_s->shape, T(1))};
    return {x_c, x_s};
}

inline double linear_decay_lr(double lr_max, uint64_t step, uint64_t steps) {
    if (steps == 0) throw ConfigError("linear_decay_lr: steps == 0");
    if (step >= steps) return 0.0;
    return lr_max * static_cast<double>(steps - step) / static_cast<double>(steps);
}

namespace detail {

// One optimizer step over a batch. lambda_sc == 0 runs the pure phase-1 path;
// a nonzero lambda_sc adds the style-contrastive term on the x0 estimate.
// Model only needs .ps and .predict(tape, x_t, t, x_c, x_s) -> NoisePrediction.
template <typename T, typename Model>
LossReport diffusion_train_step(const std::vector<TrainTriplet>& batch, Model& model,
                                const NoiseSchedule& sched, std::type_identity_t<ScrExtractor<T>*> scr, AdamW<T>& opt,
                                const Phase1Config& cfg, double lambda_sc, int k_negatives,
                                double tau, uint64_t step, double lr_now) {
    if (batch.empty()) throw ConfigError("train: empty batch");
    if ((cfg.lambda_cp != 0 || lambda_sc != 0) && !scr)
        throw ConfigError("train: feature losses need a style extractor");
    if (cfg.lambda_cp != 0 && cfg.scr_layers.empty())
        throw ConfigError("train: content loss with no trunk layers");

    model.ps.zero_grads();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    LossReport rep;
    rep.has_sc = lambda_sc != 0;
    rep.k = rep.has_sc ? k_negatives : 0;
    rep.tau = rep.has_sc ? tau : 0;

    int cp_top = 0;
    for (int l : cfg.scr_layers) cp_top = std::max(cp_top, l);

    for (size_t i = 0; i < batch.size(); i++) {
        const TrainTriplet& tr = batch[i];
        auto target = cast_tensor<T>(tr.target);
        auto x_c0 = cast_tensor<T>(tr.source);
        auto x_s0 = cast_tensor<T>(tr.reference);

        Rng drop_rng(cfg.seed, RngUse::ConditionDrop, {step, i});
        auto [x_c, x_s] = condition_dropout(x_c0, x_s0, cfg.cond_drop, drop_rng);

        Rng t_rng(cfg.seed, RngUse::Timestep, {step, i});
        int t = static_cast<int>(t_rng.integer(static_cast<uint64_t>(sched.steps())));

        Rng e_rng(cfg.seed, RngUse::DiffusionNoise, {step, i});
        auto eps = make_tensor<T>(target->shape);
        for (auto& v : eps->v) v = static_cast<T>(e_rng.normal());
        auto x_t = forward_diffuse(target, t, eps, sched);

        Tape<T> tape;
        auto pred = model.predict(&tape, x_t, t, x_c, x_s);
        auto l_mse = ops::mse_loss(&tape, pred.eps, eps);

        std::vector<std::pair<T, TensorPtr<T>>> terms{{T(1), l_mse}};

        TensorPtr<T> l_cp, l_sc;
        TensorPtr<T> x0_hat;
        if (cfg.lambda_cp != 0 || lambda_sc != 0) {
            T a = static_cast<T>(sched.sqrt_alpha_bar(t));
            T s = static_cast<T>(sched.sqrt_one_minus_alpha_bar(t));
            x0_hat = ops::lincomb(&tape, T(1) / a, x_t, -s / a, pred.eps);
        }
        if (cfg.lambda_cp != 0) {
            auto gen_feats = scr->trunk_features(&tape, x0_hat, cp_top);
            auto ref_feats = scr->trunk_features(nullptr, target, cp_top);
            std::vector<std::pair<T, TensorPtr<T>>> layer_terms;
            for (int l : cfg.scr_layers) {
                auto idx = static_cast<size_t>(l);
                layer_terms.emplace_back(T(1), ops::mean_abs_diff(&tape, gen_feats[idx],
                                                                  ref_feats[idx]));
            }
            l_cp = ops::weighted_sum_scalars(&tape, layer_terms);
            terms.emplace_back(static_cast<T>(cfg.lambda_cp), l_cp);
        }

        // mean |offset| over every entry of both offset maps
        auto n_lo = static_cast<double>(pred.offsets_lo->numel());
        auto n_hi = static_cast<double>(pred.offsets_hi->numel());
        auto l_off = ops::weighted_sum_scalars(
            &tape, {{static_cast<T>(n_lo / (n_lo + n_hi)), ops::mean_abs(&tape, pred.offsets_lo)},
                    {static_cast<T>(n_hi / (n_lo + n_hi)), ops::mean_abs(&tape, pred.offsets_hi)}});
        terms.emplace_back(static_cast<T>(cfg.lambda_off), l_off);

        if (lambda_sc != 0) {
            if (static_cast<int>(tr.negatives.size()) < k_negatives)
                throw ConfigError("train: triplet carries " + std::to_string(tr.negatives.size()) +
                                  " negatives, need " + std::to_string(k_negatives));
            auto v0 = scr->style_vectors(&tape, x0_hat, cfg.scr_layers);
            Rng aug_rng(cfg.seed, RngUse::Augment, {step, i});
            auto pos_img = cast_tensor<T>(augment_positive(tr.target, aug_rng));
            auto vp = scr->style_vectors(nullptr, pos_img, cfg.scr_layers);
            std::vector<std::vector<TensorPtr<T>>> vn;
            for (int n = 0; n < k_negatives; n++)
                vn.push_back(scr->style_vectors(nullptr, cast_tensor<T>(tr.negatives[static_cast<size_t>(n)]),
                                                cfg.scr_layers));
            l_sc = style_contrastive_loss(&tape, v0, vp, vn, static_cast<T>(tau));
            terms.emplace_back(static_cast<T>(lambda_sc), l_sc);
        }

        auto total_i = ops::weighted_sum_scalars(&tape, terms);
        double mse_i = l_mse->v[0];
        double cp_i = l_cp ? l_cp->v[0] : 0.0;
        double off_i = l_off->v[0];
        double sc_i = l_sc ? l_sc->v[0] : 0.0;
        if (!std::isfinite(static_cast<double>(total_i->v[0]))) {
            char buf[256];
            std::snprintf(buf, sizeof buf,
                          "train: non-finite loss at step %" PRIu64
                          " (t=%d, mse=%g, cp=%g, offset=%g, sc=%g)",
                          step, t, mse_i, cp_i, off_i, sc_i);
            throw DomainError(buf);
        }
        rep.mse += mse_i * inv_b;
        rep.cp += cp_i * inv_b;
        rep.offset += off_i * inv_b;
        rep.sc += sc_i * inv_b;

        // a fully frozen or mock model yields a gradient-free loss; skip
        if (total_i->rg) tape.backward(total_i, static_cast<T>(inv_b));
    }

    rep.total = rep.mse + cfg.lambda_cp * rep.cp + cfg.lambda_off * rep.offset +
                lambda_sc * rep.sc;
    opt.lr = lr_now;
    opt.step(model.ps);
    return rep;
}

}  // namespace detail

template <typename T, typename Model>
LossReport phase1_step(const std::vector<TrainTriplet>& batch, Model& model,
                       const NoiseSchedule& sched, std::type_identity_t<ScrExtractor<T>*> scr, AdamW<T>& opt,
                       const Phase1Config& cfg, uint64_t step) {
    cfg.validate();
    return detail::diffusion_train_step(batch, model, sched, scr, opt, cfg, 0.0, 0, 0.0, step,
                                        linear_decay_lr(cfg.lr, step, static_cast<uint64_t>(cfg.steps)));
}

template <typename T, typename Model>
LossReport phase2_step(const std::vector<TrainTriplet>& batch, Model& model,
                       const NoiseSchedule& sched, std::type_identity_t<ScrExtractor<T>*> scr, AdamW<T>& opt,
                       const Phase2Config& cfg, uint64_t step) {
    cfg.validate();
    auto rep = detail::diffusion_train_step(batch, model, sched, scr, opt, cfg, cfg.lambda_sc,
                                            cfg.k_negatives, cfg.tau, step, cfg.lr);
    rep.has_sc = true;  // reported even when lambda_sc == 0
    rep.k = cfg.k_negatives;
    rep.tau = cfg.tau;
    return rep;
}

inline std::vector<TrainTriplet> draw_batch(const Corpus& corpus, const SplitSpec& split,
                                            uint64_t seed, uint64_t step, int batch,
                                            int k_negatives) {
    std::vector<TrainTriplet> out;
    out.reserve(static_cast<size_t>(batch));
    for (int i = 0; i < batch; i++) {
        Rng rng(seed, RngUse::TripletDraw, {step, static_cast<uint64_t>(i)});
        out.push_back(sample_triplet(corpus, split, rng, k_negatives));
    }
    return out;
}

// Everything a training run needs beyond the corpus itself.
struct TrainJob {
    int phase = 1;
    NetworkConfig net;
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    Phase2Config cfg;  // phase 1 reads the base fields only
    std::string scr_checkpoint;   // frozen extractor for content/style losses
    std::string init_checkpoint;  // warm start (phase 2 from phase-1 final)
    std::string resume_checkpoint;
    std::string out_prefix;  // checkpoint written to out_prefix.{manifest,bin}
    std::string csv_path;    // empty -> out_prefix + ".csv"
    int checkpoint_every = 0;  // also snapshot every N steps (0 = final only)
    SplitSpec split;           // empty seen sets -> whole corpus is seen
};

inline std::vector<TensorRecord> schedule_records(int timesteps, double beta_start,
                                                  double beta_end) {
    auto scalar = [](const std::string& name, double v) {
        TensorRecord r;
        r.name = name;
        r.shape = {1};
        r.data = {static_cast<float>(v)};
        return r;
    };
    return {scalar("config.timesteps", timesteps), scalar("config.beta_start", beta_start),
            scalar("config.beta_end", beta_end)};
}

inline NoiseSchedule schedule_from_records(const std::vector<TensorRecord>& recs) {
    auto* ts = find_record(recs, "config.timesteps");
    auto* b0 = find_record(recs, "config.beta_start");
    auto* b1 = find_record(recs, "config.beta_end");
    if (!ts || !b0 || !b1) throw ConfigError("checkpoint: missing schedule records");
    return make_linear_schedule(static_cast<int>(ts->data.at(0)),
                                static_cast<double>(b0->data.at(0)),
                                static_cast<double>(b1->data.at(0)));
}

struct TrainOutcome {
    std::string checkpoint;
    std::vector<LossReport> losses;  // one per executed step
};

namespace detail {

template <typename T>
void save_train_checkpoint(const std::string& prefix, DiffusionModel<T>& model, AdamW<T>& opt,
                           const TrainJob& job, uint64_t next_step) {
    auto recs = records_from_store(model.ps);
    for (auto& r : config_records(job.net)) recs.push_back(r);
    for (auto& r : schedule_records(job.timesteps, job.beta_start, job.beta_end))
        recs.push_back(r);
    TensorRecord stepr;
    stepr.name = "train.step";
    stepr.shape = {1};
    stepr.data = {static_cast<float>(next_step)};
    recs.push_back(stepr);
    TensorRecord phaser;
    phaser.name = "train.phase";
    phaser.shape = {1};
    phaser.data = {static_cast<float>(job.phase)};
    recs.push_back(phaser);
    for (auto& r : opt_records(opt, model.ps)) recs.push_back(r);
    save_records(prefix, recs);
}

}  // namespace detail

// Runs the configured phase and returns the final checkpoint path. Fresh runs
// write a headered CSV; resumed runs append, so an interrupted-plus-resumed
// pair of runs leaves byte-identical artifacts to one uninterrupted run.
template <typename T>
TrainOutcome train(const TrainJob& job, const Corpus& corpus) {
    if (job.phase != 1 && job.phase != 2) throw ConfigError("train: phase must be 1 or 2");
    if (job.out_prefix.empty()) throw ConfigError("train: empty out_prefix");
    const Phase1Config& p1 = job.cfg;
    if (job.phase == 1)
        p1.validate();
    else
        job.cfg.validate();
    job.net.validate();

    auto sched = make_linear_schedule(job.timesteps, job.beta_start, job.beta_end);

    SplitSpec split = job.split;
    if (split.seen_fonts.empty()) split.seen_fonts = corpus.font_ids();
    if (split.seen_chars.empty()) split.seen_chars = corpus.char_ids();

    const bool need_scr = job.phase == 2 || p1.lambda_cp != 0;
    ScrExtractor<T> scr(ScrConfig{}, 0);
    if (need_scr) {
        if (job.scr_checkpoint.empty())
            throw ConfigError("train: feature losses need scr_checkpoint");
        auto recs = load_records(job.scr_checkpoint);
        scr.cfg = scr_config_from_records(recs);
        scr = ScrExtractor<T>(scr.cfg, 0);
        load_store(scr.ps, recs);
        scr.ps.set_trainable(false);
    }

    DiffusionModel<T> model(job.net, p1.seed);
    AdamW<T> opt;
    opt.weight_decay = 0.01;
    uint64_t start_step = 0;

    if (!job.resume_checkpoint.empty()) {
        auto recs = load_records(job.resume_checkpoint);
        auto net2 = config_from_records(recs);
        if (net2.base != job.net.base || net2.style_dim != job.net.style_dim ||
            net2.temb_dim != job.net.temb_dim || net2.time_dim != job.net.time_dim ||
            net2.gn_groups != job.net.gn_groups || net2.heads != job.net.heads ||
            net2.rsi_kernel != job.net.rsi_kernel)
            throw ConfigError("train: resume checkpoint built for a different network");
        load_store(model.ps, recs);
        load_opt(opt, model.ps, recs);
        auto* sr = find_record(recs, "train.step");
        if (!sr) throw ConfigError("train: resume checkpoint lacks a step counter");
        start_step = static_cast<uint64_t>(sr->data.at(0));
        if (start_step >= static_cast<uint64_t>(p1.steps))
            throw ConfigError("train: resume step beyond configured steps");
    } else if (!job.init_checkpoint.empty()) {
        auto recs = load_records(job.init_checkpoint);
        load_store(model.ps, recs);
    }

    std::string csv_path = job.csv_path.empty() ? job.out_prefix + ".csv" : job.csv_path;
    std::ofstream csv;
    if (start_step > 0) {
        csv.open(csv_path, std::ios::app);
        if (!csv) throw IoError("train: cannot append to " + csv_path);
    } else {
        csv.open(csv_path, std::ios::trunc);
        if (!csv) throw IoError("train: cannot write " + csv_path);
        csv << (job.phase == 2 ? "step,total,mse,cp,offset,sc" : "step,total,mse,cp,offset")
            << "\n";
    }

    TrainOutcome out;
    char line[256];
    for (uint64_t step = start_step; step < static_cast<uint64_t>(p1.steps); step++) {
        int k = job.phase == 2 ? job.cfg.k_negatives : 0;
        auto batch = draw_batch(corpus, split, p1.seed, step, p1.batch, k);
        LossReport rep;
        if (job.phase == 2)
            rep = phase2_step(batch, model, sched, need_scr ? &scr : nullptr, opt, job.cfg, step);
        else
            rep = phase1_step(batch, model, sched, need_scr ? &scr : nullptr, opt, p1, step);

        if (job.phase == 2)
            std::snprintf(line, sizeof line, "%" PRIu64 ",%.9g,%.9g,%.9g,%.9g,%.9g", step,
                          rep.total, rep.mse, rep.cp, rep.offset, rep.sc);
        else
            std::snprintf(line, sizeof line, "%" PRIu64 ",%.9g,%.9g,%.9g,%.9g", step, rep.total,
                          rep.mse, rep.cp, rep.offset);
        csv << line << "\n";
        out.losses.push_back(rep);

        if (job.checkpoint_every > 0 && (step + 1) % static_cast<uint64_t>(job.checkpoint_every) == 0 &&
            step + 1 < static_cast<uint64_t>(p1.steps)) {
            detail::save_train_checkpoint(job.out_prefix + ".step" + std::to_string(step + 1),
                                          model, opt, job, step + 1);
        }
    }
    csv.flush();
    if (!csv.good()) throw IoError("train: failed writing " + csv_path);

    detail::save_train_checkpoint(job.out_prefix, model, opt, job,
                                  static_cast<uint64_t>(p1.steps));
    out.checkpoint = job.out_prefix;
    return out;
}

}  // namespace glyphdiff
