#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "glyphdiff/glyphset.hpp"

using namespace glyphdiff;
namespace fs = std::filesystem;

namespace {
std::string temp_dir(const char* tag) {
    auto p = fs::temp_directory_path() / (std::string("glyphdiff_test_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}
}  // namespace

TEST_CASE("render_synthetic is a pure function of its config") {
    CorpusConfig cfg{4, 10, 32, 7};
    auto a = render_synthetic(cfg);
    auto b = render_synthetic(cfg);
    REQUIRE(a.glyphs.size() == 40);
    for (auto& [key, g] : a.glyphs) {
        auto& h = b.glyphs.at(key);
        REQUIRE(g.stroke_count == h.stroke_count);
        REQUIRE(g.image->v == h.image->v);  // bit-identical
    }
}

TEST_CASE("rendered glyphs stay in range with white background present") {
    auto c = render_synthetic({3, 6, 32, 11});
    for (auto& [key, g] : c.glyphs) {
        float mn = 2, mx = -2;
        for (auto v : g.image->v) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        REQUIRE(mn >= -1.0f);
        REQUIRE(mx == 1.0f);
        // channels identical
        int64_t hw = static_cast<int64_t>(g.image->dim(1)) * g.image->dim(2);
        for (int64_t i = 0; i < hw; i++) {
            REQUIRE(g.image->v[i] == g.image->v[hw + i]);
            REQUIRE(g.image->v[i] == g.image->v[2 * hw + i]);
        }
    }
}

TEST_CASE("same char across two fonts differs only by the style transform") {
    // Undo slant/scale via the known inverse and compare binarized ink masks.
    // Stroke width is part of the style and is not undone, so the check uses
    // the pair of fonts with the closest widths (and similar slant, which
    // bounds clipping differences at the image border).
    CorpusConfig cfg{10, 8, 96, 21};
    auto c = render_synthetic(cfg);
    int fa = -1, fb = -1;
    double best = 1e30;
    for (size_t i = 0; i < c.fonts.size(); i++)
        for (size_t j = i + 1; j < c.fonts.size(); j++) {
            double d = std::abs(c.fonts[i].width_px32 - c.fonts[j].width_px32) +
                       0.5 * std::abs(c.fonts[i].slant - c.fonts[j].slant);
            if (d < best) {
                best = d;
                fa = static_cast<int>(i);
                fb = static_cast<int>(j);
            }
        }
    REQUIRE(fa >= 0);

    auto ink_at = [&](const Glyph& g, const FontStyle& f, double qx, double qy) {
        double ix, iy;
        font_forward(f, qx, qy, &ix, &iy);
        int r = g.image->dim(1);
        int px = static_cast<int>(std::lround((ix + 1.0) / 2.0 * r - 0.5));
        int py = static_cast<int>(std::lround((iy + 1.0) / 2.0 * r - 0.5));
        if (px < 0 || px >= r || py < 0 || py >= r) return false;
        return g.image->v[static_cast<int64_t>(py) * r + px] < 1.0f - static_cast<float>(f.ink);
    };

    double iou_total = 0;
    int iou_count = 0;
    for (int ch = 0; ch < cfg.n_chars; ch++) {
        auto& ga = c.at(fa, ch);
        auto& gb = c.at(fb, ch);
        int64_t inter = 0, uni = 0;
        const int grid = 160;
        for (int y = 0; y < grid; y++)
            for (int x = 0; x < grid; x++) {
                double qx = (x + 0.5) * 2.0 / grid - 1.0;
                double qy = (y + 0.5) * 2.0 / grid - 1.0;
                bool a = ink_at(ga, c.fonts[static_cast<size_t>(fa)], qx, qy);
                bool b = ink_at(gb, c.fonts[static_cast<size_t>(fb)], qx, qy);
                inter += (a && b);
                uni += (a || b);
            }
        REQUIRE(uni > 0);
        iou_total += static_cast<double>(inter) / static_cast<double>(uni);
        iou_count++;
    }
    REQUIRE(iou_total / iou_count > 0.8);
}

TEST_CASE("complexity classification follows the stroke-count bands") {
    REQUIRE(classify_complexity(6) == ComplexityLevel::Easy);
    REQUIRE(classify_complexity(10) == ComplexityLevel::Easy);
    REQUIRE(classify_complexity(11) == ComplexityLevel::Medium);
    REQUIRE(classify_complexity(20) == ComplexityLevel::Medium);
    REQUIRE(classify_complexity(21) == ComplexityLevel::Hard);
    REQUIRE(classify_complexity(1) == ComplexityLevel::Easy);
    REQUIRE(classify_complexity(5) == ComplexityLevel::Easy);
    REQUIRE(classify_complexity(100) == ComplexityLevel::Hard);
    REQUIRE_THROWS_AS(classify_complexity(0), DomainError);
    // monotone step function
    int prev = 0;
    for (int m = 1; m < 60; m++) {
        int level = static_cast<int>(classify_complexity(m));
        REQUIRE(level >= prev);
        prev = level;
    }
}

TEST_CASE("png round trip preserves pixels to quantization accuracy") {
    auto c = render_synthetic({2, 3, 32, 5});
    auto root = temp_dir("roundtrip");
    save_corpus(c, root);
    auto back = load_corpus(root, root + "/manifest.tsv");
    REQUIRE(back.resolution == 32);
    REQUIRE(back.glyphs.size() == c.glyphs.size());
    for (auto& [key, g] : c.glyphs) {
        auto& h = back.glyphs.at(key);
        REQUIRE(h.stroke_count == g.stroke_count);
        float maxd = 0;
        for (int64_t i = 0; i < g.image->numel(); i++)
            maxd = std::max(maxd, std::abs(g.image->v[i] - h.image->v[i]));
        REQUIRE(maxd <= 1.0f / 255.0f + 1e-6f);
    }
    fs::remove_all(root);
}

TEST_CASE("grayscale mapping endpoints and midpoint") {
    auto root = temp_dir("mapping");
    fs::create_directories(root + "/0");
    std::vector<unsigned char> white(9, 255), black(9, 0), mid(9, 128);
    write_png_gray(root + "/0/0.png", white.data(), 3, 3);
    write_png_gray(root + "/0/1.png", black.data(), 3, 3);
    write_png_gray(root + "/0/2.png", mid.data(), 3, 3);
    {
        std::ofstream mf(root + "/manifest.tsv");
        mf << "char_id\tstroke_count\n0\t4\n1\t5\n2\t6\n";
    }
    auto c = load_corpus(root, root + "/manifest.tsv");
    for (auto v : c.at(0, 0).image->v) REQUIRE(v == 1.0f);
    for (auto v : c.at(0, 1).image->v) REQUIRE(v == -1.0f);
    for (auto v : c.at(0, 2).image->v) REQUIRE(v == Catch::Approx(0.003922).margin(1e-6));
    fs::remove_all(root);
}

TEST_CASE("load_corpus reports a source font hole") {
    auto root = temp_dir("hole");
    fs::create_directories(root + "/0");
    fs::create_directories(root + "/1");
    std::vector<unsigned char> px(9, 200);
    write_png_gray(root + "/0/0.png", px.data(), 3, 3);
    write_png_gray(root + "/1/0.png", px.data(), 3, 3);
    write_png_gray(root + "/1/1.png", px.data(), 3, 3);  // char 1 missing from font 0
    {
        std::ofstream mf(root + "/manifest.tsv");
        mf << "char_id\tstroke_count\n0\t4\n1\t7\n";
    }
    try {
        load_corpus(root, root + "/manifest.tsv");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        REQUIRE(std::string(e.what()).find("1") != std::string::npos);
    }
    fs::remove_all(root);
}

TEST_CASE("splits are deterministic, sized by floor, and disjoint") {
    auto c = render_synthetic({10, 20, 32, 3});
    SplitFractions fr{0.2, 0.25};
    auto s1 = make_splits(c, fr, 99);
    auto s2 = make_splits(c, fr, 99);
    REQUIRE(s1.unseen_fonts == s2.unseen_fonts);
    REQUIRE(s1.unseen_chars == s2.unseen_chars);
    REQUIRE(s1.unseen_fonts.size() == 2);  // floor(0.2 * 10)
    REQUIRE(s1.unseen_chars.size() == 5);  // floor(0.25 * 20)
    REQUIRE(s1.seen_fonts.size() + s1.unseen_fonts.size() == 10);

    // source font always trains
    REQUIRE(std::count(s1.seen_fonts.begin(), s1.seen_fonts.end(), c.source_font_id) == 1);

    // pair sets partition: train = seen x seen, eval splits cover the rest
    std::set<std::pair<int, int>> train, sfuc, ufsc, ufuc;
    for (int f : s1.seen_fonts)
        for (int ch : s1.seen_chars) train.insert({f, ch});
    for (int f : s1.seen_fonts)
        for (int ch : s1.unseen_chars) sfuc.insert({f, ch});
    for (int f : s1.unseen_fonts)
        for (int ch : s1.seen_chars) ufsc.insert({f, ch});
    for (int f : s1.unseen_fonts)
        for (int ch : s1.unseen_chars) ufuc.insert({f, ch});
    REQUIRE(train.size() + sfuc.size() + ufsc.size() + ufuc.size() == 200);
    for (auto& p : sfuc) REQUIRE(train.count(p) == 0);
    for (auto& p : ufsc) REQUIRE(train.count(p) == 0);
    for (auto& p : ufuc) REQUIRE(train.count(p) == 0);

    auto s3 = make_splits(c, fr, 100);
    bool same = s3.unseen_fonts == s1.unseen_fonts && s3.unseen_chars == s1.unseen_chars;
    REQUIRE_FALSE(same);  // different seed reshuffles

    REQUIRE_THROWS_AS(make_splits(c, SplitFractions{0.0, 0.2}, 1), ConfigError);
    REQUIRE_THROWS_AS(make_splits(c, SplitFractions{0.95, 0.2}, 1), ConfigError);
}

TEST_CASE("triplet sampling invariants hold over many draws") {
    auto c = render_synthetic({6, 12, 32, 17});
    auto split = make_splits(c, SplitFractions{0.2, 0.25}, 4);
    std::set<int> seen_fonts(split.seen_fonts.begin(), split.seen_fonts.end());
    std::set<int> seen_chars(split.seen_chars.begin(), split.seen_chars.end());

    Rng rng(123, RngUse::TripletDraw, {0});
    for (int i = 0; i < 10000; i++) {
        auto t = sample_triplet(c, split, rng, 3);
        REQUIRE(seen_fonts.count(t.font_id) == 1);
        REQUIRE(seen_chars.count(t.char_id) == 1);
        REQUIRE(t.font_id != c.source_font_id);
        // source/target/reference identity checks by image pointer comparison
        REQUIRE(t.source == c.at(c.source_font_id, t.char_id).image);
        REQUIRE(t.target == c.at(t.font_id, t.char_id).image);
        bool ref_ok = false;
        for (int rc : c.char_ids())
            if (rc != t.char_id && c.has(t.font_id, rc) && t.reference == c.at(t.font_id, rc).image) ref_ok = true;
        REQUIRE(ref_ok);
        REQUIRE(t.negatives.size() == 3);
        std::set<const void*> neg_seen;
        for (auto& n : t.negatives) {
            bool found = false;
            for (int f : c.font_ids())
                if (f != t.font_id && n == c.at(f, t.char_id).image) found = true;
            REQUIRE(found);
            neg_seen.insert(n.get());
        }
        REQUIRE(neg_seen.size() == 3);  // distinct fonts
    }

    auto t0 = sample_triplet(c, split, rng, 0);
    REQUIRE(t0.negatives.empty());
    REQUIRE_THROWS_AS(sample_triplet(c, split, rng, 6), SamplingError);  // only 5 other fonts
}

TEST_CASE("augment_positive crops mildly and reproducibly") {
    auto c = render_synthetic({2, 3, 32, 31});
    auto img = c.at(1, 0).image;

    // identity crop
    auto same = crop_resize(img, 0, 0, 32, 32);
    float maxd = 0;
    for (int64_t i = 0; i < img->numel(); i++) maxd = std::max(maxd, std::abs(same->v[i] - img->v[i]));
    REQUIRE(maxd < 1e-6f);

    Rng r1(5, RngUse::Augment, {0});
    Rng r2(5, RngUse::Augment, {0});
    auto a1 = augment_positive(img, r1);
    auto a2 = augment_positive(img, r2);
    REQUIRE(a1->shape == img->shape);
    REQUIRE(a1->v == a2->v);
    for (auto v : a1->v) {
        REQUIRE(v >= -1.0f);
        REQUIRE(v <= 1.0f);
    }
    Rng r3(6, RngUse::Augment, {0});
    auto a3 = augment_positive(img, r3);
    REQUIRE(a3->v != a1->v);
}

TEST_CASE("bilinear resize is identity at matching size and interpolates midpoints") {
    auto img = make_tensor<float>({1, 2, 2});
    img->v = {0.0f, 1.0f, 2.0f, 3.0f};
    auto same = resize_bilinear(img, 2, 2);
    REQUIRE(same->v == img->v);
    auto up = resize_bilinear(img, 3, 3);
    REQUIRE(up->v[4] == Catch::Approx(1.5));  // center = mean of corners
    REQUIRE(up->v[0] == 0.0f);
    REQUIRE(up->v[8] == 3.0f);
}
