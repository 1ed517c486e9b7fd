#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>

#include "glyphdiff/network.hpp"
#include "gradcheck.hpp"

using namespace glyphdiff;

namespace {

template <typename T>
double max_abs_diff(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    REQUIRE(a->shape == b->shape);
    double m = 0.0;
    for (int64_t i = 0; i < a->numel(); i++)
        m = std::max(m, std::abs(static_cast<double>(a->v[i]) - static_cast<double>(b->v[i])));
    return m;
}

template <typename T>
void randomize_params(ParamStore<T>& ps, uint64_t seed, double scale = 0.2) {
    for (auto& [name, t] : ps.items()) {
        Rng rng(Rng::make_key(seed, RngUse::Gradcheck, {ParamStore<T>::hash_name(name)}));
        for (auto& v : t->v) v = static_cast<T>(rng.uniform(-scale, scale));
    }
}

template <typename T>
TensorPtr<T> image(int res, uint64_t key, T lo = T(-1), T hi = T(1)) {
    auto t = make_tensor<T>({3, res, res});
    Rng rng(key, RngUse::Gradcheck, {0x17});
    for (auto& v : t->v) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
TensorPtr<T> white(int res) {
    auto t = make_tensor<T>({3, res, res});
    for (auto& v : t->v) v = T(1);
    return t;
}

}  // namespace

TEST_CASE("content encoder emits three halved scales") {
    DiffusionModel<float> m(NetworkConfig::canonical(), 3);
    auto f96 = m.encode_content(nullptr, image<float>(96, 1));
    REQUIRE(f96.f1->shape == std::vector<int>{64, 48, 48});
    REQUIRE(f96.f2->shape == std::vector<int>{128, 24, 24});
    REQUIRE(f96.f3->shape == std::vector<int>{256, 12, 12});
    auto f32 = m.encode_content(nullptr, image<float>(32, 2));
    REQUIRE(f32.f1->shape == std::vector<int>{64, 16, 16});
    REQUIRE(f32.f2->shape == std::vector<int>{128, 8, 8});
    REQUIRE(f32.f3->shape == std::vector<int>{256, 4, 4});

    auto bad = make_tensor<float>({1, 96, 96});
    REQUIRE_THROWS_AS(m.encode_content(nullptr, bad), ShapeError);
    REQUIRE_THROWS_AS(m.encode_content(nullptr, make_tensor<float>({3, 40, 40})), ShapeError);

    // purity
    auto x = image<float>(32, 4);
    auto a = m.encode_content(nullptr, x);
    auto b = m.encode_content(nullptr, x);
    REQUIRE(max_abs_diff(a.f3, b.f3) == 0.0);
}

TEST_CASE("structure maps share the content encoder") {
    DiffusionModel<float> m(NetworkConfig::toy(), 5);
    randomize_params(m.ps, 50);
    auto x = image<float>(32, 6);
    auto fc = m.encode_content(nullptr, x);
    auto fs = m.encode_structure(nullptr, x);
    REQUIRE(max_abs_diff(fs.f1, fc.f1) == 0.0);
    REQUIRE(max_abs_diff(fs.f2, fc.f2) == 0.0);
    REQUIRE(fs.f1->shape == std::vector<int>{16, 16, 16});
    REQUIRE(fs.f2->shape == std::vector<int>{32, 8, 8});
}

TEST_CASE("style encoder tokens") {
    DiffusionModel<float> m(NetworkConfig::canonical(), 7);
    auto t96 = m.encode_style(nullptr, image<float>(96, 8));
    REQUIRE(t96->shape == std::vector<int>{36, 256});
    auto t32 = m.encode_style(nullptr, image<float>(32, 9));
    REQUIRE(t32->shape == std::vector<int>{4, 256});
    auto tw = m.encode_style(nullptr, white<float>(32));
    for (int64_t i = 0; i < tw->numel(); i++) REQUIRE(std::isfinite(tw->v[i]));
}

TEST_CASE("denoiser stack shapes follow the architecture table") {
    DiffusionModel<float> m(NetworkConfig::canonical(), 11);
    std::vector<StageTrace> trace;
    auto pred = m.predict(nullptr, image<float>(96, 10), 17, image<float>(96, 11),
                          image<float>(96, 12), &trace);
    REQUIRE(pred.eps->shape == std::vector<int>{3, 96, 96});
    REQUIRE(pred.offsets_lo->shape == std::vector<int>{18, 24, 24});
    REQUIRE(pred.offsets_hi->shape == std::vector<int>{18, 48, 48});

    const std::vector<std::pair<std::string, std::vector<int>>> want = {
        {"conv_in", {64, 96, 96}},  {"down1.r1", {64, 96, 96}}, {"down1.r2", {64, 48, 48}},
        {"mca_a.r1", {128, 48, 48}}, {"mca_a.r2", {128, 24, 24}},
        {"mca_b.r1", {256, 24, 24}}, {"mca_b.r2", {256, 12, 12}},
        {"down2.r1", {512, 12, 12}}, {"down2.r2", {512, 12, 12}}, {"mid.r1", {512, 12, 12}},
        {"up1.r1", {256, 12, 12}},  {"up1.r2", {256, 12, 12}},  {"up1.r3", {256, 24, 24}},
        {"si1.join", {256, 24, 24}}, {"si1.r1", {256, 24, 24}}, {"si1.r2", {256, 24, 24}},
        {"si1.r3", {256, 48, 48}},
        {"si2.join", {256, 48, 48}}, {"si2.r1", {128, 48, 48}}, {"si2.r2", {128, 48, 48}},
        {"si2.r3", {128, 96, 96}},
        {"up2.r1", {64, 96, 96}},   {"up2.r2", {64, 96, 96}},  {"up2.r3", {64, 96, 96}},
        {"conv_out", {3, 96, 96}},
    };
    REQUIRE(trace.size() == want.size());
    for (size_t i = 0; i < want.size(); i++) {
        INFO("stage " << want[i].first);
        REQUIRE(trace[i].stage == want[i].first);
        REQUIRE(trace[i].shape == want[i].second);
    }

    // fresh model: zero-init output conv and offset heads
    for (int64_t i = 0; i < pred.eps->numel(); i++) REQUIRE(pred.eps->v[i] == 0.0f);
    for (int64_t i = 0; i < pred.offsets_lo->numel(); i++) REQUIRE(pred.offsets_lo->v[i] == 0.0f);
}

TEST_CASE("denoiser is resolution independent") {
    DiffusionModel<float> m(NetworkConfig::toy(), 13);
    auto pred = m.predict(nullptr, image<float>(32, 20), 3, image<float>(32, 21), image<float>(32, 22));
    REQUIRE(pred.eps->shape == std::vector<int>{3, 32, 32});
    REQUIRE(pred.offsets_lo->shape == std::vector<int>{18, 8, 8});
    REQUIRE(pred.offsets_hi->shape == std::vector<int>{18, 16, 16});

    auto pred48 = m.predict(nullptr, image<float>(48, 23), 3, image<float>(48, 24), image<float>(48, 25));
    REQUIRE(pred48.eps->shape == std::vector<int>{3, 48, 48});
}

TEST_CASE("white-image conditions are valid and finite") {
    DiffusionModel<float> m(NetworkConfig::toy(), 17);
    randomize_params(m.ps, 60);
    auto pred = m.predict(nullptr, image<float>(32, 30), 40, white<float>(32), white<float>(32));
    for (int64_t i = 0; i < pred.eps->numel(); i++) REQUIRE(std::isfinite(pred.eps->v[i]));
}

TEST_CASE("prediction responds to the conditions and the timestep") {
    DiffusionModel<float> m(NetworkConfig::toy(), 19);
    randomize_params(m.ps, 70);
    auto x_t = image<float>(32, 31);
    auto x_c = image<float>(32, 32);
    auto x_s = image<float>(32, 33);
    auto base = m.predict(nullptr, x_t, 5, x_c, x_s);
    auto other_style = m.predict(nullptr, x_t, 5, x_c, image<float>(32, 34));
    REQUIRE(max_abs_diff(base.eps, other_style.eps) > 1e-7);
    auto other_content = m.predict(nullptr, x_t, 5, image<float>(32, 35), x_s);
    REQUIRE(max_abs_diff(base.eps, other_content.eps) > 1e-7);
    auto other_t = m.predict(nullptr, x_t, 99, x_c, x_s);
    REQUIRE(max_abs_diff(base.eps, other_t.eps) > 1e-7);

    // mismatched condition shape is rejected with a shape error
    REQUIRE_THROWS_AS(m.predict(nullptr, x_t, 5, image<float>(48, 36), x_s), ShapeError);
    REQUIRE_THROWS_AS(m.predict(nullptr, x_t, -1, x_c, x_s), DomainError);
}

TEST_CASE("denoiser is deterministic in seed and params") {
    auto run = [](uint64_t seed) {
        DiffusionModel<float> m(NetworkConfig::toy(), seed);
        return m.predict(nullptr, image<float>(32, 41), 7, image<float>(32, 42), image<float>(32, 43));
    };
    REQUIRE(max_abs_diff(run(23).eps, run(23).eps) == 0.0);

    DiffusionModel<float> a(NetworkConfig::toy(), 1);
    DiffusionModel<float> b(NetworkConfig::toy(), 2);
    REQUIRE(max_abs_diff(a.ps.get("unet.in.w"), b.ps.get("unet.in.w")) > 0.0);
}

TEST_CASE("full forward pass is differentiable") {
    DiffusionModel<double> m(NetworkConfig::toy(), 29);
    randomize_params(m.ps, 80);
    auto x_t = image<double>(32, 44);
    auto x_c = image<double>(32, 45);
    auto x_s = image<double>(32, 46);
    auto target = make_tensor<double>({3, 32, 32});

    auto make_loss = [&](Tape<double>* tape) {
        auto pred = m.predict(tape, x_t, 12, x_c, x_s);
        return ops::mse_loss(tape, pred.eps, target);
    };
    std::vector<TensorPtr<double>> leaves = {
        m.ps.get("ec.s1.a.w"),          m.ps.get("es.s2.w"),
        m.ps.get("temb.w1"),            m.ps.get("unet.in.w"),
        m.ps.get("unet.mca_a.r1.attn.wq"), m.ps.get("unet.rsi_lo.ffn2.w"),
        m.ps.get("unet.rsi_hi.dcn.w"),  m.ps.get("unet.si2.r1.res.conv1.w"),
        m.ps.get("unet.proj_hi.w"),     m.ps.get("unet.out.w"),
    };
    auto res = gradcheck::check(make_loss, leaves, 1e-5, 4);
    REQUIRE(res.probes == 40);
    REQUIRE(res.max_err < 1e-3);
}

TEST_CASE("checkpoint round trip restores the model bit for bit") {
    auto cfg = NetworkConfig::toy();
    DiffusionModel<float> a(cfg, 31);
    randomize_params(a.ps, 90);
    auto recs = records_from_store(a.ps);
    for (auto& r : config_records(cfg)) recs.push_back(r);
    std::string prefix = "/tmp/glyphdiff_ckpt_test";
    save_records(prefix, recs);

    auto loaded = load_records(prefix);
    auto cfg2 = config_from_records(loaded);
    REQUIRE(cfg2.base == cfg.base);
    REQUIRE(cfg2.style_dim == cfg.style_dim);
    REQUIRE(cfg2.time_dim == cfg.time_dim);

    DiffusionModel<float> b(cfg2, 777);  // different seed, same shapes
    load_store(b.ps, loaded);
    auto x_t = image<float>(32, 47);
    auto x_c = image<float>(32, 48);
    auto x_s = image<float>(32, 49);
    REQUIRE(max_abs_diff(a.predict(nullptr, x_t, 9, x_c, x_s).eps,
                         b.predict(nullptr, x_t, 9, x_c, x_s).eps) == 0.0);

    // missing tensor rejected
    auto missing = loaded;
    missing.erase(missing.begin() + 5);
    DiffusionModel<float> c(cfg, 1);
    REQUIRE_THROWS_AS(load_store(c.ps, missing), ConfigError);

    // shape mismatch rejected
    auto wrong = loaded;
    wrong[0].shape[0] += 1;
    wrong[0].data.resize(wrong[0].data.size() + wrong[0].data.size() / wrong[0].shape[0]);
    REQUIRE_THROWS_AS(load_store(c.ps, wrong), ConfigError);

    // truncated blob rejected on read
    save_records(prefix, recs);
    std::ofstream trunc(prefix + ".bin", std::ios::binary | std::ios::trunc);
    trunc << "xx";
    trunc.close();
    REQUIRE_THROWS_AS(load_records(prefix), IoError);

    // malformed manifest rejected
    save_records(prefix, recs);
    std::ofstream mf(prefix + ".manifest", std::ios::app);
    mf << "broken line without fields\n";
    mf.close();
    REQUIRE_THROWS_AS(load_records(prefix), IoError);
    std::remove((prefix + ".manifest").c_str());
    std::remove((prefix + ".bin").c_str());
}

TEST_CASE("canonical parameter count matches the golden record") {
    DiffusionModel<float> m(NetworkConfig::canonical(), 1);
    std::ifstream gf(std::string(GLYPHDIFF_TEST_DIR) + "/golden/param_count.txt");
    REQUIRE(gf.good());
    long long want = 0;
    gf >> want;
    INFO("actual parameter count: " << m.ps.total_numel());
    REQUIRE(static_cast<long long>(m.ps.total_numel()) == want);
}

TEST_CASE("config validation rejects impossible configs") {
    NetworkConfig c = NetworkConfig::toy();
    c.base = 18;  // not a multiple of gn_groups=4
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = NetworkConfig::toy();
    c.heads = 3;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = NetworkConfig::toy();
    c.rsi_kernel = 2;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = NetworkConfig::toy();
    c.temb_dim = 31;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
}
