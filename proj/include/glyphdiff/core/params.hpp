#pragma once

#include <cstring>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace glyphdiff {

enum class Init { Zero, One, HeNormal, NormalScaled };

// Named parameter registry. Iteration follows registration order, which is
// deterministic because model construction is; the optimizer and checkpoint
// writer both rely on that. Initial values depend only on (seed, name), never
// on registration order, so adding a parameter elsewhere does not reshuffle
// everyone else's init.
template <typename T>
class ParamStore {
  public:
    explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

    TensorPtr<T> create(const std::string& name, std::vector<int> shape, Init init, int fan_in = 0,
                        double gain = 1.0) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        auto t = make_tensor<T>(std::move(shape));
        t->set_rg(true);
        if (init == Init::One) {
            for (auto& v : t->v) v = T(1);
        } else if (init != Init::Zero) {
            Rng rng(Rng::make_key(seed_, RngUse::ParamInit, {hash_name(name)}));
            double std = init == Init::HeNormal ? std::sqrt(2.0 / std::max(1, fan_in)) : gain;
            for (auto& v : t->v) v = static_cast<T>(rng.normal() * std);
        }
        index_[name] = items_.size();
        items_.push_back({name, t});
        return t;
    }

    TensorPtr<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return items_[it->second].second;
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::pair<std::string, TensorPtr<T>>>& items() const { return items_; }
    size_t size() const { return items_.size(); }

    int64_t total_numel() const {
        int64_t n = 0;
        for (auto& [name, t] : items_) n += t->numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : items_) t->zero_grad();
    }

    void set_trainable(bool on) {
        for (auto& [name, t] : items_) t->set_rg(on);
    }

    static uint64_t hash_name(const std::string& name) {
        // FNV-1a, then mixed by the caller
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : name) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

  private:
    uint64_t seed_;
    std::vector<std::pair<std::string, TensorPtr<T>>> items_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace glyphdiff
