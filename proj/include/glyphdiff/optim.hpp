#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "core/params.hpp"
#include "io/checkpoint.hpp"

namespace glyphdiff {

// Adam with decoupled weight decay. Update math runs in double; first/second
// moments are stored in the parameter precision so checkpoints round-trip
// exactly. Parameters with requires-grad off are frozen and skipped entirely.
template <typename T>
struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t step_count = 0;
    std::map<std::string, std::vector<T>> m, v;

    void step(ParamStore<T>& ps) {
        step_count++;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (auto& [name, t] : ps.items()) {
            if (!t->rg) continue;
            auto& ms = m[name];
            auto& vs = v[name];
            if (ms.empty()) {
                ms.assign(static_cast<size_t>(t->numel()), T(0));
                vs.assign(static_cast<size_t>(t->numel()), T(0));
            }
            for (int64_t i = 0; i < t->numel(); i++) {
                double g = static_cast<double>(t->g[i]);
                double mi = beta1 * static_cast<double>(ms[i]) + (1.0 - beta1) * g;
                double vi = beta2 * static_cast<double>(vs[i]) + (1.0 - beta2) * g * g;
                ms[i] = static_cast<T>(mi);
                vs[i] = static_cast<T>(vi);
                double w = static_cast<double>(t->v[i]);
                w -= lr * weight_decay * w;                              // decoupled decay
                w -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);      // eps outside the sqrt
                t->v[i] = static_cast<T>(w);
            }
        }
    }
};

template <typename T>
std::vector<TensorRecord> opt_records(const AdamW<T>& opt, const ParamStore<T>& ps) {
    std::vector<TensorRecord> recs;
    recs.push_back({"opt.step", {1}, {static_cast<float>(opt.step_count)}});
    for (auto& [name, t] : ps.items()) {
        auto mi = opt.m.find(name);
        auto vi = opt.v.find(name);
        if (mi == opt.m.end() || vi == opt.v.end()) continue;
        TensorRecord rm{"opt.m." + name, t->shape, {}}, rv{"opt.v." + name, t->shape, {}};
        rm.data.reserve(mi->second.size());
        rv.data.reserve(vi->second.size());
        for (auto x : mi->second) rm.data.push_back(static_cast<float>(x));
        for (auto x : vi->second) rv.data.push_back(static_cast<float>(x));
        recs.push_back(std::move(rm));
        recs.push_back(std::move(rv));
    }
    return recs;
}

template <typename T>
void load_opt(AdamW<T>& opt, const ParamStore<T>& ps, const std::vector<TensorRecord>& recs) {
    const auto* st = find_record(recs, "opt.step");
    if (!st || st->data.size() != 1) throw ConfigError("checkpoint has no optimizer step record");
    opt.step_count = static_cast<int64_t>(st->data[0]);
    opt.m.clear();
    opt.v.clear();
    for (auto& [name, t] : ps.items()) {
        const auto* rm = find_record(recs, "opt.m." + name);
        const auto* rv = find_record(recs, "opt.v." + name);
        if (!rm && !rv) continue;
        if (!rm || !rv) throw ConfigError("optimizer state for " + name + " is incomplete");
        if (rm->shape != t->shape || rv->shape != t->shape)
            throw ConfigError("optimizer state shape mismatch for " + name);
        auto& ms = opt.m[name];
        auto& vs = opt.v[name];
        ms.reserve(rm->data.size());
        vs.reserve(rv->data.size());
        for (auto x : rm->data) ms.push_back(static_cast<T>(x));
        for (auto x : rv->data) vs.push_back(static_cast<T>(x));
    }
}

}  // namespace glyphdiff
