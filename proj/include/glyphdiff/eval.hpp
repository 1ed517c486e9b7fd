#pragma once
// Evaluation: SSIM and L1 against targets, an extractor-based perceptual
// distance and score grid, and a complexity-stratified report driver.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "glyphdiff/glyphset.hpp"
#include "glyphdiff/sample.hpp"
#include "glyphdiff/scr.hpp"

namespace glyphdiff {

// ---- pixel metrics ----

// Mean local SSIM over all fully-interior 11x11 windows of channel 0, with a
// sigma-1.5 Gaussian window and the standard stabilizers for dynamic range 2.
template <typename T>
double ssim(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a->shape, b->shape, "ssim");
    if (a->ndim() != 3) throw ShapeError("ssim: want CxHxW, got " + shape_str(a->shape));
    constexpr int W = 11;
    int h = a->dim(1), w = a->dim(2);
    if (h < W || w < W)
        throw ShapeError("ssim: image smaller than the " + std::to_string(W) + "-pixel window");

    double win[W][W], norm = 0;
    for (int i = 0; i < W; i++)
        for (int j = 0; j < W; j++) {
            double di = i - (W - 1) / 2.0, dj = j - (W - 1) / 2.0;
            win[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
            norm += win[i][j];
        }
    for (int i = 0; i < W; i++)
        for (int j = 0; j < W; j++) win[i][j] /= norm;

    const double c1 = 0.01 * 2.0 * 0.01 * 2.0, c2 = 0.03 * 2.0 * 0.03 * 2.0;
    double total = 0;
    int64_t windows = 0;
    for (int y0 = 0; y0 + W <= h; y0++)
        for (int x0 = 0; x0 + W <= w; x0++) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < W; i++)
                for (int j = 0; j < W; j++) {
                    double va = a->v[static_cast<int64_t>(y0 + i) * w + (x0 + j)];
                    double vb = b->v[static_cast<int64_t>(y0 + i) * w + (x0 + j)];
                    double g = win[i][j];
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                     ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            windows++;
        }
    return total / static_cast<double>(windows);
}

template <typename T>
double l1(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    check_same_shape(a->shape, b->shape, "l1");
    double s = 0;
    for (int64_t i = 0; i < a->numel(); i++)
        s += std::abs(static_cast<double>(a->v[i]) - static_cast<double>(b->v[i]));
    return s / static_cast<double>(a->numel());
}

// ---- extractor-based metrics ----

// Sum over layers of (1 - v_a . v_b); unit vectors keep it in [0, 2*layers].
template <typename T>
double scr_distance(const TensorPtr<T>& a, const TensorPtr<T>& b, const ScrExtractor<T>& ex,
                    const std::vector<int>& layers = {0, 1, 2, 3}) {
    auto va = ex.style_vectors(nullptr, a, layers);
    auto vb = ex.style_vectors(nullptr, b, layers);
    double d = 0;
    for (size_t l = 0; l < va.size(); l++) {
        // renormalize in double so d(x,x) lands at 0 instead of float-norm dust
        double dot = 0, na = 0, nb = 0;
        for (int64_t i = 0; i < va[l]->numel(); i++) {
            double x = va[l]->v[i], y = vb[l]->v[i];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        d += 1.0 - dot / std::sqrt(na * nb);
    }
    return d;
}

// score[i][j] = summed layer dot products between generated i and candidate j;
// the PNG renders scores as gray cells (darker = larger) with thumbnail strips
// along the top and left edges.
template <typename T>
std::vector<std::vector<double>> contrastive_score_grid(const std::vector<TensorPtr<T>>& generated,
                                                        const std::vector<TensorPtr<T>>& candidates,
                                                        const ScrExtractor<T>& ex,
                                                        const std::string& out_png,
                                                        const std::vector<int>& layers = {0, 1, 2, 3}) {
    if (generated.empty() || candidates.empty())
        throw ConfigError("score grid: empty image list");
    int r = generated[0]->dim(1);
    for (auto& im : generated)
        if (im->dim(1) != r || im->dim(2) != r)
            throw ShapeError("score grid: images must share one square size");
    for (auto& im : candidates)
        if (im->dim(1) != r || im->dim(2) != r)
            throw ShapeError("score grid: images must share one square size");

    std::vector<std::vector<TensorPtr<T>>> vg, vc;
    for (auto& im : generated) vg.push_back(ex.style_vectors(nullptr, im, layers));
    for (auto& im : candidates) vc.push_back(ex.style_vectors(nullptr, im, layers));

    size_t nr = generated.size(), nc = candidates.size();
    std::vector<std::vector<double>> score(nr, std::vector<double>(nc, 0.0));
    for (size_t i = 0; i < nr; i++)
        for (size_t j = 0; j < nc; j++) {
            double s = 0;
            for (size_t l = 0; l < layers.size(); l++) {
                double dot = 0, na = 0, nb = 0;
                for (int64_t k = 0; k < vg[i][l]->numel(); k++) {
                    double x = vg[i][l]->v[k], y = vc[j][l]->v[k];
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                s += dot / std::sqrt(na * nb);  // double renorm keeps |s| <= layers
            }
            score[i][j] = s;
        }

    int sheet_w = static_cast<int>(1 + nc) * r, sheet_h = static_cast<int>(1 + nr) * r;
    std::vector<unsigned char> pix(static_cast<size_t>(sheet_w) * sheet_h, 255);
    auto blit = [&](const TensorPtr<T>& im, int cy, int cx) {
        for (int y = 0; y < r; y++)
            for (int x = 0; x < r; x++) {
                double p = std::lround((static_cast<double>(im->v[static_cast<int64_t>(y) * r + x]) + 1.0) / 2.0 * 255.0);
                pix[static_cast<size_t>(cy + y) * sheet_w + (cx + x)] =
                    static_cast<unsigned char>(std::clamp(p, 0.0, 255.0));
            }
    };
    for (size_t j = 0; j < nc; j++) blit(candidates[j], 0, static_cast<int>(1 + j) * r);
    for (size_t i = 0; i < nr; i++) blit(generated[i], static_cast<int>(1 + i) * r, 0);
    double n_layers = static_cast<double>(layers.size());
    for (size_t i = 0; i < nr; i++)
        for (size_t j = 0; j < nc; j++) {
            double t = (score[i][j] + n_layers) / (2.0 * n_layers);  // [-N,N] -> [0,1]
            auto v = static_cast<unsigned char>(std::clamp(std::lround(255.0 * (1.0 - t)), 0l, 255l));
            for (int y = 0; y < r; y++)
                for (int x = 0; x < r; x++)
                    pix[static_cast<size_t>((1 + i) * r + y) * sheet_w + ((1 + j) * r + x)] = v;
        }
    write_png_gray(out_png, pix.data(), sheet_w, sheet_h);
    return score;
}

// ---- stratified report ----

struct MetricCell {
    int64_t n = 0;
    double ssim = 0, l1 = 0, scr_dist = 0;
};

enum class EvalSplit { SFUC, UFSC, UFUC };

inline const char* eval_split_name(EvalSplit s) {
    switch (s) {
        case EvalSplit::SFUC: return "SFUC";
        case EvalSplit::UFSC: return "UFSC";
        default: return "UFUC";
    }
}

// rows: Easy, Medium, Hard, then the sample-weighted Average
struct MetricReport {
    std::array<std::array<MetricCell, 4>, 3> cells{};

    const MetricCell& at(EvalSplit s, int row) const {
        return cells[static_cast<size_t>(s)][static_cast<size_t>(row)];
    }
};

// (font, char) pairs evaluated for one split, in deterministic order
inline std::vector<std::pair<int, int>> eval_pairs(const Corpus& corpus, const SplitSpec& split,
                                                   EvalSplit which) {
    const auto& fonts = which == EvalSplit::SFUC ? split.seen_fonts : split.unseen_fonts;
    const auto& chars = which == EvalSplit::UFSC ? split.seen_chars : split.unseen_chars;
    std::vector<std::pair<int, int>> out;
    for (int f : fonts) {
        if (f == corpus.source_font_id) continue;  // the content provider is not a transfer target
        for (int ch : chars)
            if (corpus.has(f, ch) && corpus.has(corpus.source_font_id, ch)) out.emplace_back(f, ch);
    }
    return out;
}

// One style reference glyph per font, drawn once from the seen chars present
// for that font (any present char when none of the seen ones are).
inline int eval_reference_char(const Corpus& corpus, const SplitSpec& split, int font_id,
                               uint64_t seed) {
    std::vector<int> pool;
    for (int ch : split.seen_chars)
        if (corpus.has(font_id, ch)) pool.push_back(ch);
    if (pool.empty())
        for (int ch : corpus.char_ids())
            if (corpus.has(font_id, ch)) pool.push_back(ch);
    if (pool.empty()) throw ConfigError("evaluate: font " + std::to_string(font_id) + " has no glyphs");
    Rng rng(seed, RngUse::EvalReference, {static_cast<uint64_t>(font_id)});
    return pool[static_cast<size_t>(rng.integer(pool.size()))];
}

namespace detail {

inline void csv_metric(std::string& row, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    row += buf;
}

}  // namespace detail

// Drives any generator (content, style, font, char) -> image over all three
// split protocols, scores against targets, and writes report.csv plus one
// contact sheet per split.
template <typename F>
MetricReport evaluate_core(F&& gen, const ScrExtractor<float>& ex, const Corpus& corpus,
                           const SplitSpec& split, uint64_t seed, const std::string& out_dir,
                           const std::vector<int>& layers = {0, 1, 2, 3}) {
    std::filesystem::create_directories(out_dir);
    MetricReport report;
    for (EvalSplit which : {EvalSplit::SFUC, EvalSplit::UFSC, EvalSplit::UFUC}) {
        auto pairs = eval_pairs(corpus, split, which);
        if (pairs.empty())
            throw ConfigError(std::string("evaluate: split ") + eval_split_name(which) +
                              " has no pairs");
        std::vector<GlyphImage> sheet;
        auto& rows = report.cells[static_cast<size_t>(which)];
        for (auto [f, ch] : pairs) {
            auto content = corpus.at(corpus.source_font_id, ch).image;
            auto style = corpus.at(f, eval_reference_char(corpus, split, f, seed)).image;
            auto img = gen(content, style, f, ch);
            const auto& target = corpus.at(f, ch);
            auto& cell = rows[static_cast<size_t>(classify_complexity(target.stroke_count))];
            cell.n++;
            cell.ssim += ssim(img, target.image);
            cell.l1 += l1(img, target.image);
            cell.scr_dist += scr_distance(img, target.image, ex, layers);
            sheet.push_back(img);
        }
        for (int row = 0; row < 3; row++) {
            rows[3].n += rows[static_cast<size_t>(row)].n;
            rows[3].ssim += rows[static_cast<size_t>(row)].ssim;
            rows[3].l1 += rows[static_cast<size_t>(row)].l1;
            rows[3].scr_dist += rows[static_cast<size_t>(row)].scr_dist;
        }
        for (auto& cell : rows)
            if (cell.n) {
                cell.ssim /= static_cast<double>(cell.n);
                cell.l1 /= static_cast<double>(cell.n);
                cell.scr_dist /= static_cast<double>(cell.n);
            }
        write_contact_sheet(out_dir + "/" + eval_split_name(which) + ".png", sheet);
    }

    // fid stays empty: reserved so external tooling can join its own column
    std::ofstream csv(out_dir + "/report.csv");
    if (!csv) throw IoError("cannot write " + out_dir + "/report.csv");
    csv << "split,complexity,n,ssim,l1,scr_dist,fid\n";
    const char* row_names[4] = {"easy", "medium", "hard", "average"};
    for (EvalSplit which : {EvalSplit::SFUC, EvalSplit::UFSC, EvalSplit::UFUC})
        for (int row = 0; row < 4; row++) {
            const auto& cell = report.at(which, row);
            std::string line = std::string(eval_split_name(which)) + "," + row_names[row] + "," +
                               std::to_string(cell.n);
            if (cell.n) {
                detail::csv_metric(line, cell.ssim);
                detail::csv_metric(line, cell.l1);
                detail::csv_metric(line, cell.scr_dist);
            } else {
                line += ",,,";
            }
            csv << line << ",\n";
        }
    csv.flush();
    if (!csv.good()) throw IoError("failed writing " + out_dir + "/report.csv");
    return report;
}

// Checkpoint-driven evaluation with the real sampler.
inline MetricReport evaluate(const std::string& ckpt_prefix, const std::string& scr_prefix,
                             const Corpus& corpus, const SplitSpec& split, const GuidanceConfig& g,
                             const std::string& out_dir,
                             const std::vector<int>& layers = {0, 1, 2, 3}) {
    auto bundle = load_sampler(ckpt_prefix);
    g.validate(bundle.sched.steps());
    auto recs = load_records(scr_prefix);
    ScrExtractor<float> ex(scr_config_from_records(recs), 0);
    load_store(ex.ps, recs);
    auto gen = [&](const GlyphImage& content, const GlyphImage& style, int, int) {
        return run_sampler(*bundle.model, content, style, bundle.sched, g);
    };
    return evaluate_core(gen, ex, corpus, split, g.seed, out_dir, layers);
}

}  // namespace glyphdiff
