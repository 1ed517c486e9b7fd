#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "core/rng.hpp"
#include "core/tensor.hpp"
#include "io/png_io.hpp"

// Glyph corpus: either rendered procedurally (pseudo-glyphs built from
// seeded stroke primitives, styled per font) or ingested from a PNG
// directory tree. Images are 3xHxW float in [-1, 1], white background = +1,
// all three channels identical.

namespace glyphdiff {

using GlyphImage = TensorPtr<float>;

struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ComplexityLevel { Easy, Medium, Hard };

inline ComplexityLevel classify_complexity(int stroke_count) {
    if (stroke_count < 1) throw DomainError("classify_complexity: stroke_count < 1");
    if (stroke_count <= 10) return ComplexityLevel::Easy;  // includes counts below the Easy band
    if (stroke_count <= 20) return ComplexityLevel::Medium;
    return ComplexityLevel::Hard;
}

inline const char* complexity_name(ComplexityLevel c) {
    switch (c) {
        case ComplexityLevel::Easy: return "easy";
        case ComplexityLevel::Medium: return "medium";
        default: return "hard";
    }
}

// one stroke primitive in the canonical [-1,1]^2 char frame
struct StrokePrim {
    bool is_arc = false;
    // segment endpoints
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    // arc: center, radius, start angle, span
    double cx = 0, cy = 0, r = 0, a0 = 0, span = 0;
};

struct CharGeometry {
    int char_id = 0;
    int stroke_count = 0;
    std::vector<StrokePrim> strokes;
};

// per-font style transform, applied identically to every char
struct FontStyle {
    int font_id = 0;
    double width_px32 = 2.0;  // stroke width in pixels at resolution 32
    double slant = 0.0;       // horizontal shear factor
    double scale = 1.0;       // glyph scale
    double ink = 1.0;         // ink darkness, 1 = black
};

struct Glyph {
    int font_id = 0;
    int char_id = 0;
    int stroke_count = 1;
    GlyphImage image;
};

struct Corpus {
    int resolution = 0;
    int source_font_id = 0;
    std::vector<FontStyle> fonts;      // populated for synthetic corpora
    std::vector<CharGeometry> chars;   // idem
    std::map<std::pair<int, int>, Glyph> glyphs;  // keyed (font_id, char_id)

    bool has(int font_id, int char_id) const { return glyphs.count({font_id, char_id}) != 0; }
    const Glyph& at(int font_id, int char_id) const {
        auto it = glyphs.find({font_id, char_id});
        if (it == glyphs.end())
            throw DomainError("corpus: missing glyph font=" + std::to_string(font_id) +
                              " char=" + std::to_string(char_id));
        return it->second;
    }
    std::vector<int> font_ids() const {
        std::set<int> s;
        for (auto& [k, g] : glyphs) s.insert(k.first);
        return {s.begin(), s.end()};
    }
    std::vector<int> char_ids() const {
        std::set<int> s;
        for (auto& [k, g] : glyphs) s.insert(k.second);
        return {s.begin(), s.end()};
    }
};

struct CorpusConfig {
    int n_fonts = 10;
    int n_chars = 30;
    int resolution = 32;
    uint64_t seed = 0;
};

namespace render_detail {

inline double seg_dist(double px, double py, const StrokePrim& s) {
    double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    double qx = s.x0 + t * dx - px, qy = s.y0 + t * dy - py;
    return std::sqrt(qx * qx + qy * qy);
}

inline double arc_dist(double px, double py, const StrokePrim& s) {
    double vx = px - s.cx, vy = py - s.cy;
    double ang = std::atan2(vy, vx);
    double rel = ang - s.a0;
    const double twopi = 2.0 * 3.14159265358979323846;
    rel -= twopi * std::floor(rel / twopi);  // wrap to [0, 2pi)
    if (rel <= s.span) return std::abs(std::sqrt(vx * vx + vy * vy) - s.r);
    double e0x = s.cx + s.r * std::cos(s.a0), e0y = s.cy + s.r * std::sin(s.a0);
    double e1x = s.cx + s.r * std::cos(s.a0 + s.span), e1y = s.cy + s.r * std::sin(s.a0 + s.span);
    double d0 = std::hypot(px - e0x, py - e0y), d1 = std::hypot(px - e1x, py - e1y);
    return std::min(d0, d1);
}

inline double stroke_dist(double px, double py, const StrokePrim& s) {
    return s.is_arc ? arc_dist(px, py, s) : seg_dist(px, py, s);
}

}  // namespace render_detail

// canonical char frame -> image frame: shear by slant, then uniform scale
inline void font_forward(const FontStyle& f, double qx, double qy, double* ix, double* iy) {
    *ix = f.scale * (qx + f.slant * qy);
    *iy = f.scale * qy;
}
inline void font_inverse(const FontStyle& f, double ix, double iy, double* qx, double* qy) {
    *qy = iy / f.scale;
    *qx = ix / f.scale - f.slant * (*qy);
}

inline CharGeometry make_char_geometry(uint64_t seed, int char_id) {
    Rng rng(seed, RngUse::CorpusGeometry, {static_cast<uint64_t>(char_id)});
    CharGeometry g;
    g.char_id = char_id;
    g.stroke_count = rng.uniform_int(4, 28);
    for (int i = 0; i < g.stroke_count; i++) {
        StrokePrim s;
        s.is_arc = rng.bernoulli(0.3);
        if (s.is_arc) {
            s.cx = rng.uniform(-0.6, 0.6);
            s.cy = rng.uniform(-0.6, 0.6);
            s.r = rng.uniform(0.15, 0.6);
            s.a0 = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            s.span = rng.uniform(0.8, 3.1);
        } else {
            s.x0 = rng.uniform(-0.85, 0.85);
            s.y0 = rng.uniform(-0.85, 0.85);
            s.x1 = rng.uniform(-0.85, 0.85);
            s.y1 = rng.uniform(-0.85, 0.85);
        }
        g.strokes.push_back(s);
    }
    return g;
}

inline FontStyle make_font_style(uint64_t seed, int font_id) {
    Rng rng(seed, RngUse::CorpusTransform, {static_cast<uint64_t>(font_id)});
    FontStyle f;
    f.font_id = font_id;
    f.width_px32 = rng.uniform(1.0, 4.0);
    f.slant = rng.uniform(-0.3, 0.3);
    f.scale = rng.uniform(0.7, 1.0);
    f.ink = rng.uniform(0.6, 1.0);
    return f;
}

// ink coverage in [0,1] at one image-frame point (pixel-center coords in [-1,1])
inline double glyph_coverage(const CharGeometry& geo, const FontStyle& font, int resolution,
                             double ix, double iy) {
    double qx, qy;
    font_inverse(font, ix, iy, &qx, &qy);
    double best = 1e30;
    for (const auto& s : geo.strokes) best = std::min(best, render_detail::stroke_dist(qx, qy, s));
    // canonical distance -> pixels (shear treated as isotropic; slant is small)
    double d_px = best * font.scale * resolution / 2.0;
    double half_w = 0.5 * font.width_px32 * resolution / 32.0;
    const double aa = 1.0;  // one-pixel linear anti-alias ramp
    return std::clamp((half_w + aa / 2.0 - d_px) / aa, 0.0, 1.0);
}

inline GlyphImage render_glyph_image(const CharGeometry& geo, const FontStyle& font, int resolution) {
    auto img = make_tensor<float>({3, resolution, resolution});
    int64_t hw = static_cast<int64_t>(resolution) * resolution;
    for (int y = 0; y < resolution; y++)
        for (int x = 0; x < resolution; x++) {
            double iy = (y + 0.5) * 2.0 / resolution - 1.0;
            double ix = (x + 0.5) * 2.0 / resolution - 1.0;
            double cov = glyph_coverage(geo, font, resolution, ix, iy);
            float v = static_cast<float>(1.0 - 2.0 * font.ink * cov);
            int64_t p = static_cast<int64_t>(y) * resolution + x;
            img->v[p] = img->v[hw + p] = img->v[2 * hw + p] = v;
        }
    return img;
}

inline Corpus render_synthetic(const CorpusConfig& cfg) {
    if (cfg.resolution != 32 && cfg.resolution != 64 && cfg.resolution != 96)
        throw ConfigError("render_synthetic: resolution must be 32, 64 or 96");
    if (cfg.n_fonts < 2 || cfg.n_chars < 2) throw ConfigError("render_synthetic: need >= 2 fonts and chars");
    Corpus c;
    c.resolution = cfg.resolution;
    c.source_font_id = 0;
    for (int ch = 0; ch < cfg.n_chars; ch++) c.chars.push_back(make_char_geometry(cfg.seed, ch));
    for (int f = 0; f < cfg.n_fonts; f++) c.fonts.push_back(make_font_style(cfg.seed, f));
    for (int f = 0; f < cfg.n_fonts; f++)
        for (int ch = 0; ch < cfg.n_chars; ch++) {
            Glyph g;
            g.font_id = f;
            g.char_id = ch;
            g.stroke_count = c.chars[static_cast<size_t>(ch)].stroke_count;
            g.image = render_glyph_image(c.chars[static_cast<size_t>(ch)], c.fonts[static_cast<size_t>(f)], cfg.resolution);
            c.glyphs[{f, ch}] = std::move(g);
        }
    return c;
}

// ---- image utilities ----

// align-corners bilinear; identity when sizes match
inline GlyphImage resize_bilinear(const GlyphImage& in, int out_h, int out_w) {
    int c = in->dim(0), h = in->dim(1), w = in->dim(2);
    auto out = make_tensor<float>({c, out_h, out_w});
    for (int ch = 0; ch < c; ch++)
        for (int y = 0; y < out_h; y++)
            for (int x = 0; x < out_w; x++) {
                double sy = out_h > 1 ? static_cast<double>(y) * (h - 1) / (out_h - 1) : 0.0;
                double sx = out_w > 1 ? static_cast<double>(x) * (w - 1) / (out_w - 1) : 0.0;
                int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
                int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
                double fy = sy - y0, fx = sx - x0;
                auto at = [&](int yy, int xx) { return static_cast<double>(in->v[(static_cast<int64_t>(ch) * h + yy) * w + xx]); };
                double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                           fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
                out->v[(static_cast<int64_t>(ch) * out_h + y) * out_w + x] = static_cast<float>(v);
            }
    return out;
}

// crop the window (y0,x0,ch,cw) then resize back to the input shape
inline GlyphImage crop_resize(const GlyphImage& in, int y0, int x0, int ch, int cw) {
    int c = in->dim(0), h = in->dim(1), w = in->dim(2);
    if (y0 < 0 || x0 < 0 || ch < 1 || cw < 1 || y0 + ch > h || x0 + cw > w)
        throw DomainError("crop_resize: window out of bounds");
    auto win = make_tensor<float>({c, ch, cw});
    for (int cc = 0; cc < c; cc++)
        for (int y = 0; y < ch; y++)
            for (int x = 0; x < cw; x++)
                win->v[(static_cast<int64_t>(cc) * ch + y) * cw + x] =
                    in->v[(static_cast<int64_t>(cc) * h + y0 + y) * w + x0 + x];
    return resize_bilinear(win, h, w);
}

// random crop keeping a per-side fraction in [0.8, 1.0], resized back
inline GlyphImage augment_positive(const GlyphImage& img, Rng& rng) {
    int h = img->dim(1), w = img->dim(2);
    double fy = rng.uniform(0.8, 1.0), fx = rng.uniform(0.8, 1.0);
    int ch = std::max(1, static_cast<int>(std::lround(fy * h)));
    int cw = std::max(1, static_cast<int>(std::lround(fx * w)));
    int y0 = ch < h ? static_cast<int>(rng.integer(static_cast<uint64_t>(h - ch + 1))) : 0;
    int x0 = cw < w ? static_cast<int>(rng.integer(static_cast<uint64_t>(w - cw + 1))) : 0;
    return crop_resize(img, y0, x0, ch, cw);
}

inline GlyphImage blank_image(int resolution, float value = 1.0f) {
    return make_tensor<float>({3, resolution, resolution}, value);
}

// ---- persistence ----

// channel 0 only, mapped [-1,1] -> [0,255]
inline void save_glyph_png(const std::string& path, const GlyphImage& img) {
    int h = img->dim(1), w = img->dim(2);
    std::vector<unsigned char> pix(static_cast<size_t>(h) * w);
    for (int64_t i = 0; i < static_cast<int64_t>(pix.size()); i++) {
        double p = std::lround((static_cast<double>(img->v[i]) + 1.0) / 2.0 * 255.0);
        pix[static_cast<size_t>(i)] = static_cast<unsigned char>(std::clamp(p, 0.0, 255.0));
    }
    write_png_gray(path, pix.data(), w, h);
}

// gray PNG -> [-1,1], replicated to three channels
inline GlyphImage load_glyph_png(const std::string& path) {
    auto gray = read_png_gray(path);
    auto img = make_tensor<float>({3, gray.height, gray.width});
    int64_t hw = static_cast<int64_t>(gray.height) * gray.width;
    for (int64_t i = 0; i < hw; i++) {
        float v = static_cast<float>(2.0 * gray.pixels[static_cast<size_t>(i)] / 255.0 - 1.0);
        img->v[i] = img->v[hw + i] = img->v[2 * hw + i] = v;
    }
    return img;
}

inline void save_corpus(const Corpus& c, const std::string& root) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    for (auto& [key, g] : c.glyphs) {
        fs::create_directories(root + "/" + std::to_string(key.first));
        save_glyph_png(root + "/" + std::to_string(key.first) + "/" + std::to_string(key.second) + ".png",
                       g.image);
    }
    std::ofstream mf(root + "/manifest.tsv");
    mf << "char_id\tstroke_count\n";
    std::map<int, int> strokes;
    for (auto& [key, g] : c.glyphs) strokes[key.second] = g.stroke_count;
    for (auto& [ch, sc] : strokes) mf << ch << "\t" << sc << "\n";
}

// Reads `root/<font_id>/<char_id>.png` with a stroke-count manifest.
// resolution 0 keeps the stored size; otherwise images are resized.
inline Corpus load_corpus(const std::string& root, const std::string& manifest_path, int resolution = 0) {
    namespace fs = std::filesystem;
    std::ifstream mf(manifest_path);
    if (!mf) throw IoError("load_corpus: cannot open manifest " + manifest_path);
    std::map<int, int> strokes;
    std::string line;
    bool header = true;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        if (header) {
            if (line != "char_id\tstroke_count")
                throw IoError("load_corpus: bad manifest header: " + line);
            header = false;
            continue;
        }
        std::istringstream ss(line);
        int ch, sc;
        if (!(ss >> ch >> sc)) throw IoError("load_corpus: bad manifest row: " + line);
        strokes[ch] = sc;
    }

    Corpus c;
    std::vector<std::pair<int, fs::path>> fonts;
    for (auto& e : fs::directory_iterator(root)) {
        if (!e.is_directory()) continue;
        try {
            fonts.push_back({std::stoi(e.path().filename().string()), e.path()});
        } catch (...) {
            continue;  // non-numeric dirs are not font folders
        }
    }
    if (fonts.empty()) throw IoError("load_corpus: no font directories under " + root);
    std::sort(fonts.begin(), fonts.end());
    c.source_font_id = fonts.front().first;

    for (auto& [fid, dir] : fonts) {
        for (auto& e : fs::directory_iterator(dir)) {
            if (e.path().extension() != ".png") continue;
            int ch;
            try {
                ch = std::stoi(e.path().stem().string());
            } catch (...) {
                continue;
            }
            auto it = strokes.find(ch);
            if (it == strokes.end())
                throw IoError("load_corpus: char " + std::to_string(ch) + " missing from manifest");
            auto img = load_glyph_png(e.path().string());
            if (resolution && (img->dim(1) != resolution || img->dim(2) != resolution))
                img = resize_bilinear(img, resolution, resolution);
            Glyph g;
            g.font_id = fid;
            g.char_id = ch;
            g.stroke_count = it->second;
            g.image = img;
            if (c.resolution == 0) c.resolution = g.image->dim(1);
            c.glyphs[{fid, ch}] = std::move(g);
        }
    }
    if (c.glyphs.empty()) throw IoError("load_corpus: no glyphs under " + root);

    // the source font must cover every char seen anywhere
    std::vector<std::string> missing;
    for (int ch : c.char_ids())
        if (!c.has(c.source_font_id, ch)) missing.push_back(std::to_string(ch));
    if (!missing.empty()) {
        std::string what = "load_corpus: source font " + std::to_string(c.source_font_id) + " missing chars:";
        for (auto& m : missing) what += " " + m;
        throw IoError(what);
    }
    return c;
}

// ---- splits & sampling ----

struct SplitSpec {
    std::vector<int> seen_fonts, unseen_fonts;
    std::vector<int> seen_chars, unseen_chars;
};

struct SplitFractions {
    double unseen_font_frac = 0.2;
    double unseen_char_frac = 0.2;
};

inline SplitSpec make_splits(const Corpus& corpus, const SplitFractions& fr, uint64_t seed) {
    if (fr.unseen_font_frac <= 0 || fr.unseen_font_frac >= 1 || fr.unseen_char_frac <= 0 ||
        fr.unseen_char_frac >= 1)
        throw ConfigError("make_splits: fractions must lie in (0,1)");
    auto fonts = corpus.font_ids();
    auto chars = corpus.char_ids();

    // source font is pinned to seen; shuffle the rest
    std::vector<int> pool;
    for (int f : fonts)
        if (f != corpus.source_font_id) pool.push_back(f);
    Rng frng(seed, RngUse::SplitShuffle, {0});
    for (size_t i = pool.size(); i > 1; i--) std::swap(pool[i - 1], pool[frng.integer(i)]);
    size_t n_unseen_f = std::max<size_t>(1, static_cast<size_t>(fr.unseen_font_frac * fonts.size()));
    if (n_unseen_f >= pool.size()) throw ConfigError("make_splits: no seen fonts left");

    Rng crng(seed, RngUse::SplitShuffle, {1});
    std::vector<int> cpool = chars;
    for (size_t i = cpool.size(); i > 1; i--) std::swap(cpool[i - 1], cpool[crng.integer(i)]);
    size_t n_unseen_c = std::max<size_t>(1, static_cast<size_t>(fr.unseen_char_frac * chars.size()));
    if (n_unseen_c >= cpool.size()) throw ConfigError("make_splits: no seen chars left");

    SplitSpec s;
    s.unseen_fonts.assign(pool.begin(), pool.begin() + static_cast<long>(n_unseen_f));
    s.seen_fonts.assign(pool.begin() + static_cast<long>(n_unseen_f), pool.end());
    s.seen_fonts.push_back(corpus.source_font_id);
    s.unseen_chars.assign(cpool.begin(), cpool.begin() + static_cast<long>(n_unseen_c));
    s.seen_chars.assign(cpool.begin() + static_cast<long>(n_unseen_c), cpool.end());
    std::sort(s.seen_fonts.begin(), s.seen_fonts.end());
    std::sort(s.unseen_fonts.begin(), s.unseen_fonts.end());
    std::sort(s.seen_chars.begin(), s.seen_chars.end());
    std::sort(s.unseen_chars.begin(), s.unseen_chars.end());
    return s;
}

inline void save_splits(const SplitSpec& s, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("save_splits: cannot open " + path);
    auto rows = [&](const char* kind, const std::vector<int>& ids) {
        for (int id : ids) f << kind << '\t' << id << '\n';
    };
    rows("seen_font", s.seen_fonts);
    rows("unseen_font", s.unseen_fonts);
    rows("seen_char", s.seen_chars);
    rows("unseen_char", s.unseen_chars);
    f.flush();
    if (!f.good()) throw IoError("save_splits: failed writing " + path);
}

inline SplitSpec load_splits(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_splits: cannot open " + path);
    SplitSpec s;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        lineno++;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string kind;
        int id;
        if (!(ss >> kind >> id))
            throw IoError("load_splits: bad line " + std::to_string(lineno) + " in " + path);
        if (kind == "seen_font")
            s.seen_fonts.push_back(id);
        else if (kind == "unseen_font")
            s.unseen_fonts.push_back(id);
        else if (kind == "seen_char")
            s.seen_chars.push_back(id);
        else if (kind == "unseen_char")
            s.unseen_chars.push_back(id);
        else
            throw IoError("load_splits: unknown kind '" + kind + "' at line " +
                          std::to_string(lineno));
    }
    return s;
}

struct TrainTriplet {
    GlyphImage source;     // content image, source font
    GlyphImage reference;  // style reference, target font, different char
    GlyphImage target;     // ground truth
    std::vector<GlyphImage> negatives;  // same char, other fonts (phase 2)
    int font_id = 0;
    int char_id = 0;
};

// Draws a training triplet from seen fonts x seen chars. The source font is
// never the target style (its transfer would be the identity).
inline TrainTriplet sample_triplet(const Corpus& corpus, const SplitSpec& split, Rng& rng,
                                   int k_negatives) {
    std::vector<int> target_fonts;
    for (int f : split.seen_fonts)
        if (f != corpus.source_font_id) target_fonts.push_back(f);
    if (target_fonts.empty()) throw SamplingError("sample_triplet: no target fonts");

    int font = target_fonts[rng.integer(target_fonts.size())];
    std::vector<int> chars;
    for (int ch : split.seen_chars)
        if (corpus.has(font, ch) && corpus.has(corpus.source_font_id, ch)) chars.push_back(ch);
    if (chars.size() < 2) throw SamplingError("sample_triplet: font " + std::to_string(font) + " has < 2 usable chars");
    int ch = chars[rng.integer(chars.size())];

    std::vector<int> ref_chars;
    for (int rc : corpus.char_ids())
        if (rc != ch && corpus.has(font, rc)) ref_chars.push_back(rc);
    if (ref_chars.empty()) throw SamplingError("sample_triplet: no reference char for font " + std::to_string(font));
    int ref = ref_chars[rng.integer(ref_chars.size())];

    TrainTriplet t;
    t.font_id = font;
    t.char_id = ch;
    t.source = corpus.at(corpus.source_font_id, ch).image;
    t.reference = corpus.at(font, ref).image;
    t.target = corpus.at(font, ch).image;

    if (k_negatives > 0) {
        std::vector<int> neg_fonts;
        for (int f : corpus.font_ids())
            if (f != font && corpus.has(f, ch)) neg_fonts.push_back(f);
        if (static_cast<int>(neg_fonts.size()) < k_negatives)
            throw SamplingError("sample_triplet: only " + std::to_string(neg_fonts.size()) +
                                " negative fonts render char " + std::to_string(ch));
        for (size_t i = neg_fonts.size(); i > 1; i--) std::swap(neg_fonts[i - 1], neg_fonts[rng.integer(i)]);
        for (int i = 0; i < k_negatives; i++) t.negatives.push_back(corpus.at(neg_fonts[static_cast<size_t>(i)], ch).image);
    }
    return t;
}

}  // namespace glyphdiff
