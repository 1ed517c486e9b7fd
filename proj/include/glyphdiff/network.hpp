#pragma once

#include <string>
#include <utility>
#include <vector>

#include "blocks.hpp"
#include "io/checkpoint.hpp"

// Full conditional denoiser: content encoder (multi-scale structure), style
// encoder (token sequence), and a UNet whose down path aggregates content at
// three scales while both skip connections are deformed toward the reference
// structure before rejoining the up path.

namespace glyphdiff {

struct NetworkConfig {
    int base = 64;        // entry width; stages run base, 2x, 4x, 8x
    int style_dim = 256;  // style token dimension (last style-encoder width)
    int temb_dim = 256;   // sinusoidal embedding size fed to the shared MLP
    int time_dim = 256;   // conditioning vector consumed by every resblock
    int gn_groups = 8;
    int heads = 1;
    int rsi_kernel = 3;

    static NetworkConfig canonical() { return {}; }
    static NetworkConfig toy() { return {16, 64, 64, 64, 4, 1, 3}; }

    void validate() const {
        if (base < gn_groups || base % gn_groups)
            throw ConfigError("base width must be a positive multiple of gn_groups");
        if (style_dim % gn_groups) throw ConfigError("style_dim must divide into gn_groups");
        if (temb_dim % 2) throw ConfigError("temb_dim must be even");
        if (heads < 1 || base % heads) throw ConfigError("heads must divide base width");
        if (rsi_kernel % 2 == 0 || rsi_kernel < 1) throw ConfigError("rsi_kernel must be odd");
    }
};

inline std::vector<TensorRecord> config_records(const NetworkConfig& c) {
    auto rec = [](const char* k, int v) {
        return TensorRecord{std::string("config.") + k, {1}, {static_cast<float>(v)}};
    };
    return {rec("base", c.base),         rec("style_dim", c.style_dim),
            rec("temb_dim", c.temb_dim), rec("time_dim", c.time_dim),
            rec("gn_groups", c.gn_groups), rec("heads", c.heads),
            rec("rsi_kernel", c.rsi_kernel)};
}

inline NetworkConfig config_from_records(const std::vector<TensorRecord>& recs) {
    NetworkConfig c;
    auto get = [&](const char* k) {
        auto* r = find_record(recs, std::string("config.") + k);
        if (!r || r->data.size() != 1) throw ConfigError(std::string("checkpoint lacks config.") + k);
        return static_cast<int>(r->data[0]);
    };
    c.base = get("base");
    c.style_dim = get("style_dim");
    c.temb_dim = get("temb_dim");
    c.time_dim = get("time_dim");
    c.gn_groups = get("gn_groups");
    c.heads = get("heads");
    c.rsi_kernel = get("rsi_kernel");
    c.validate();
    return c;
}

template <typename T>
struct ContentFeatures {
    TensorPtr<T> f1, f2, f3;  // base x H/2, 2base x H/4, 4base x H/8
};

template <typename T>
struct StructureMaps {
    TensorPtr<T> f1, f2;  // first two content-encoder scales of the reference
};

template <typename T>
struct NoisePrediction {
    TensorPtr<T> eps;         // 3 x H x W
    TensorPtr<T> offsets_lo;  // deformation field on the 2base x H/4 skip
    TensorPtr<T> offsets_hi;  // deformation field on the base x H/2 skip
};

struct StageTrace {
    std::string stage;
    std::vector<int> shape;
};

// conv3x3 -> GroupNorm -> SiLU
template <typename T>
struct ConvBlock {
    TensorPtr<T> w, b, gn_g, gn_b;
    int stride = 1, groups = 8;
    ConvBlock() = default;
    ConvBlock(ParamStore<T>& ps, const std::string& p, int c_in, int c_out, int stride_, int gn_groups)
        : stride(stride_), groups(gn_groups) {
        w = ps.create(p + ".w", {c_out, c_in, 3, 3}, Init::HeNormal, c_in * 9);
        b = ps.create(p + ".b", {c_out}, Init::Zero);
        gn_g = ps.create(p + ".gn.g", {c_out}, Init::One);
        gn_b = ps.create(p + ".gn.b", {c_out}, Init::Zero);
    }
    TensorPtr<T> forward(Tape<T>* tape, const TensorPtr<T>& x) const {
        auto h = ops::conv2d(tape, x, w, b, stride, 1);
        return ops::silu(tape, ops::group_norm(tape, h, gn_g, gn_b, groups));
    }
};

template <typename T>
struct DiffusionModel {
    NetworkConfig cfg;
    ParamStore<T> ps;

    // content encoder: three stages of (conv-norm-act x2, stride-2 conv)
    struct EncStage {
        ConvBlock<T> a, b;
        TensorPtr<T> down_w, down_b;
    };
    EncStage ec[3];

    // style encoder: four stride-2 conv-norm-act blocks
    ConvBlock<T> es[4];

    // shared timestep MLP
    TensorPtr<T> temb_w1, temb_b1, temb_w2, temb_b2;

    // UNet
    TensorPtr<T> in_w, in_b;
    ResBlock<T> down1_r1, down1_r2;
    TensorPtr<T> down1_w, down1_b;
    McaBlock<T> mca_a1, mca_a2, mca_b1, mca_b2;
    ResBlock<T> down2_r1, down2_r2;
    McaBlock<T> mid;
    ResBlock<T> up1_r1, up1_r2, up1_r3;
    TensorPtr<T> up1_w, up1_b;
    RsiBlock<T> rsi_lo, rsi_hi;
    TensorPtr<T> proj_lo_w, proj_lo_b, proj_hi_w, proj_hi_b;
    SiBlock<T> si1_r1, si1_r2, si1_r3;
    SiBlock<T> si2_r1, si2_r2, si2_r3;
    ResBlock<T> up2_r1, up2_r2, up2_r3;
    TensorPtr<T> out_w, out_b;

    DiffusionModel(const NetworkConfig& c, uint64_t seed) : cfg(c), ps(seed) {
        cfg.validate();
        int b1 = cfg.base, b2 = 2 * cfg.base, b4 = 4 * cfg.base, b8 = 8 * cfg.base;
        int g = cfg.gn_groups, h = cfg.heads, td = cfg.time_dim, ds = cfg.style_dim;

        int ec_w[3] = {b1, b2, b4};
        int c_in = 3;
        for (int s = 0; s < 3; s++) {
            std::string p = "ec.s" + std::to_string(s + 1);
            ec[s].a = ConvBlock<T>(ps, p + ".a", c_in, ec_w[s], 1, g);
            ec[s].b = ConvBlock<T>(ps, p + ".b", ec_w[s], ec_w[s], 1, g);
            ec[s].down_w = ps.create(p + ".down.w", {ec_w[s], ec_w[s], 3, 3}, Init::HeNormal, ec_w[s] * 9);
            ec[s].down_b = ps.create(p + ".down.b", {ec_w[s]}, Init::Zero);
            c_in = ec_w[s];
        }

        int es_w[4] = {b1, b2, b4, ds};
        c_in = 3;
        for (int s = 0; s < 4; s++) {
            es[s] = ConvBlock<T>(ps, "es.s" + std::to_string(s + 1), c_in, es_w[s], 2, g);
            c_in = es_w[s];
        }

        temb_w1 = ps.create("temb.w1", {cfg.temb_dim, td}, Init::HeNormal, cfg.temb_dim);
        temb_b1 = ps.create("temb.b1", {td}, Init::Zero);
        temb_w2 = ps.create("temb.w2", {td, td}, Init::HeNormal, td);
        temb_b2 = ps.create("temb.b2", {td}, Init::Zero);

        in_w = ps.create("unet.in.w", {b1, 3, 3, 3}, Init::HeNormal, 27);
        in_b = ps.create("unet.in.b", {b1}, Init::Zero);

        down1_r1 = ResBlock<T>(ps, "unet.down1.r1", b1, b1, td, g);
        down1_r2 = ResBlock<T>(ps, "unet.down1.r2", b1, b1, td, g);
        down1_w = ps.create("unet.down1.down.w", {b1, b1, 3, 3}, Init::HeNormal, b1 * 9);
        down1_b = ps.create("unet.down1.down.b", {b1}, Init::Zero);

        mca_a1 = McaBlock<T>(ps, "unet.mca_a.r1", b1, b1, b2, ds, td, g, h, false);
        mca_a2 = McaBlock<T>(ps, "unet.mca_a.r2", b2, b1, b2, ds, td, g, h, true);
        mca_b1 = McaBlock<T>(ps, "unet.mca_b.r1", b2, b2, b4, ds, td, g, h, false);
        mca_b2 = McaBlock<T>(ps, "unet.mca_b.r2", b4, b2, b4, ds, td, g, h, true);

        down2_r1 = ResBlock<T>(ps, "unet.down2.r1", b4, b8, td, g);
        down2_r2 = ResBlock<T>(ps, "unet.down2.r2", b8, b8, td, g);
        mid = McaBlock<T>(ps, "unet.mid.r1", b8, b4, b8, ds, td, g, h, false);

        up1_r1 = ResBlock<T>(ps, "unet.up1.r1", b8, b4, td, g);
        up1_r2 = ResBlock<T>(ps, "unet.up1.r2", b4, b4, td, g);
        up1_r3 = ResBlock<T>(ps, "unet.up1.r3", b4, b4, td, g);
        up1_w = ps.create("unet.up1.up.w", {b4, b4, 3, 3}, Init::HeNormal, b4 * 9);
        up1_b = ps.create("unet.up1.up.b", {b4}, Init::Zero);

        rsi_lo = RsiBlock<T>(ps, "unet.rsi_lo", b2, b2, b2, 2 * b2, h, cfg.rsi_kernel);
        proj_lo_w = ps.create("unet.proj_lo.w", {b4, b4 + b2, 1, 1}, Init::HeNormal, b4 + b2);
        proj_lo_b = ps.create("unet.proj_lo.b", {b4}, Init::Zero);
        si1_r1 = SiBlock<T>(ps, "unet.si1.r1", b4, b4, ds, td, g, h, false);
        si1_r2 = SiBlock<T>(ps, "unet.si1.r2", b4, b4, ds, td, g, h, false);
        si1_r3 = SiBlock<T>(ps, "unet.si1.r3", b4, b4, ds, td, g, h, true);

        rsi_hi = RsiBlock<T>(ps, "unet.rsi_hi", b1, b1, b1, 2 * b1, h, cfg.rsi_kernel);
        proj_hi_w = ps.create("unet.proj_hi.w", {b4, b4 + b1, 1, 1}, Init::HeNormal, b4 + b1);
        proj_hi_b = ps.create("unet.proj_hi.b", {b4}, Init::Zero);
        si2_r1 = SiBlock<T>(ps, "unet.si2.r1", b4, b2, ds, td, g, h, false);
        si2_r2 = SiBlock<T>(ps, "unet.si2.r2", b2, b2, ds, td, g, h, false);
        si2_r3 = SiBlock<T>(ps, "unet.si2.r3", b2, b2, ds, td, g, h, true);

        up2_r1 = ResBlock<T>(ps, "unet.up2.r1", b2, b1, td, g);
        up2_r2 = ResBlock<T>(ps, "unet.up2.r2", b1, b1, td, g);
        up2_r3 = ResBlock<T>(ps, "unet.up2.r3", b1, b1, td, g);

        out_w = ps.create("unet.out.w", {3, b1, 3, 3}, Init::Zero);
        out_b = ps.create("unet.out.b", {3}, Init::Zero);
    }

    static void check_image(const TensorPtr<T>& x, const char* what) {
        if (x->ndim() != 3 || x->dim(0) != 3)
            throw ShapeError(std::string(what) + ": want 3xHxW, got " + shape_str(x->shape));
        if (x->dim(1) % 16 || x->dim(2) % 16)
            throw ShapeError(std::string(what) + ": spatial size must be a multiple of 16, got " +
                             shape_str(x->shape));
    }

    TensorPtr<T> time_embedding(Tape<T>* tape, int t) const {
        if (t < 0) throw DomainError("timestep must be non-negative");
        auto e = sinusoidal_embed<T>(t, cfg.temb_dim);
        auto h = ops::silu(tape, ops::linear(tape, e, temb_w1, temb_b1));
        return ops::linear(tape, h, temb_w2, temb_b2);
    }

    ContentFeatures<T> encode_content(Tape<T>* tape, const TensorPtr<T>& x) const {
        check_image(x, "encode_content");
        ContentFeatures<T> out;
        auto h = x;
        TensorPtr<T>* dst[3] = {&out.f1, &out.f2, &out.f3};
        for (int s = 0; s < 3; s++) {
            h = ec[s].b.forward(tape, ec[s].a.forward(tape, h));
            h = ops::conv2d(tape, h, ec[s].down_w, ec[s].down_b, 2, 1);
            *dst[s] = h;
        }
        return out;
    }

    StructureMaps<T> encode_structure(Tape<T>* tape, const TensorPtr<T>& x) const {
        check_image(x, "encode_structure");
        StructureMaps<T> out;
        auto h = ec[0].b.forward(tape, ec[0].a.forward(tape, x));
        out.f1 = ops::conv2d(tape, h, ec[0].down_w, ec[0].down_b, 2, 1);
        h = ec[1].b.forward(tape, ec[1].a.forward(tape, out.f1));
        out.f2 = ops::conv2d(tape, h, ec[1].down_w, ec[1].down_b, 2, 1);
        return out;
    }

    // d_s-dim tokens over the H/16 x W/16 grid
    TensorPtr<T> encode_style(Tape<T>* tape, const TensorPtr<T>& x) const {
        check_image(x, "encode_style");
        auto h = x;
        for (int s = 0; s < 4; s++) h = es[s].forward(tape, h);
        return ops::chw_to_tokens(tape, h);
    }

    NoisePrediction<T> predict(Tape<T>* tape, const TensorPtr<T>& x_t, int t,
                               const TensorPtr<T>& x_c, const TensorPtr<T>& x_s,
                               std::vector<StageTrace>* trace = nullptr) const {
        check_image(x_t, "predict");
        check_image(x_c, "predict content condition");
        check_image(x_s, "predict style condition");
        if (x_c->shape != x_t->shape || x_s->shape != x_t->shape)
            throw ShapeError("predict: conditions must match the noisy image shape");

        auto note = [&](const char* stage, const TensorPtr<T>& v) {
            if (trace) trace->push_back({stage, v->shape});
        };

        auto f_c = encode_content(tape, x_c);
        auto f_s = encode_structure(tape, x_s);
        auto e_s = encode_style(tape, x_s);
        auto temb = time_embedding(tape, t);

        auto h = ops::conv2d(tape, x_t, in_w, in_b, 1, 1);
        note("conv_in", h);
        h = down1_r1.forward(tape, h, temb);
        note("down1.r1", h);
        h = down1_r2.forward(tape, h, temb);
        h = ops::conv2d(tape, h, down1_w, down1_b, 2, 1);
        note("down1.r2", h);
        auto skip_hi = h;  // base x H/2

        h = mca_a1.forward(tape, h, f_c.f1, e_s, temb);
        note("mca_a.r1", h);
        h = mca_a2.forward(tape, h, f_c.f1, e_s, temb);
        note("mca_a.r2", h);
        auto skip_lo = h;  // 2base x H/4

        h = mca_b1.forward(tape, h, f_c.f2, e_s, temb);
        note("mca_b.r1", h);
        h = mca_b2.forward(tape, h, f_c.f2, e_s, temb);
        note("mca_b.r2", h);

        h = down2_r1.forward(tape, h, temb);
        note("down2.r1", h);
        h = down2_r2.forward(tape, h, temb);
        note("down2.r2", h);
        h = mid.forward(tape, h, f_c.f3, e_s, temb);
        note("mid.r1", h);

        h = up1_r1.forward(tape, h, temb);
        note("up1.r1", h);
        h = up1_r2.forward(tape, h, temb);
        note("up1.r2", h);
        h = up1_r3.forward(tape, h, temb);
        h = ops::conv2d(tape, ops::upsample_nearest2(tape, h), up1_w, up1_b, 1, 1);
        note("up1.r3", h);

        auto [def_lo, off_lo] = rsi_lo.forward(tape, skip_lo, f_s.f2);
        if (def_lo->dim(1) != h->dim(1) || def_lo->dim(2) != h->dim(2))
            throw ShapeError("si1 skip join: skip " + shape_str(def_lo->shape) + " vs path " +
                             shape_str(h->shape));
        h = ops::conv2d(tape, ops::concat_channels(tape, h, def_lo), proj_lo_w, proj_lo_b, 1, 0);
        note("si1.join", h);
        h = si1_r1.forward(tape, h, e_s, temb);
        note("si1.r1", h);
        h = si1_r2.forward(tape, h, e_s, temb);
        note("si1.r2", h);
        h = si1_r3.forward(tape, h, e_s, temb);
        note("si1.r3", h);

        auto [def_hi, off_hi] = rsi_hi.forward(tape, skip_hi, f_s.f1);
        if (def_hi->dim(1) != h->dim(1) || def_hi->dim(2) != h->dim(2))
            throw ShapeError("si2 skip join: skip " + shape_str(def_hi->shape) + " vs path " +
                             shape_str(h->shape));
        h = ops::conv2d(tape, ops::concat_channels(tape, h, def_hi), proj_hi_w, proj_hi_b, 1, 0);
        note("si2.join", h);
        h = si2_r1.forward(tape, h, e_s, temb);
        note("si2.r1", h);
        h = si2_r2.forward(tape, h, e_s, temb);
        note("si2.r2", h);
        h = si2_r3.forward(tape, h, e_s, temb);
        note("si2.r3", h);

        h = up2_r1.forward(tape, h, temb);
        note("up2.r1", h);
        h = up2_r2.forward(tape, h, temb);
        note("up2.r2", h);
        h = up2_r3.forward(tape, h, temb);
        note("up2.r3", h);

        auto eps = ops::conv2d(tape, h, out_w, out_b, 1, 1);
        note("conv_out", eps);
        return {eps, off_lo, off_hi};
    }
};

}  // namespace glyphdiff
