#pragma once

#include <cassert>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace glyphdiff {

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s;
    for (size_t i = 0; i < shape.size(); i++) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s.empty() ? "scalar" : s;
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor. Gradient storage is allocated only for tensors
// that participate in a recorded backward pass.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> v;
    std::vector<T> g;
    bool rg = false;  // requires grad

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), T(0)) {}
    Tensor(std::vector<int> s, T fill) : shape(std::move(s)), v(numel_of(shape), fill) {}

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    void set_rg(bool on) {
        rg = on;
        if (on)
            g.assign(v.size(), T(0));
        else
            g.clear();
    }
    void zero_grad() {
        if (rg) g.assign(v.size(), T(0));
    }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(std::vector<int> shape) {
    return std::make_shared<Tensor<T>>(std::move(shape));
}

template <typename T>
TensorPtr<T> make_tensor(std::vector<int> shape, T fill) {
    return std::make_shared<Tensor<T>>(std::move(shape), fill);
}

template <typename T>
TensorPtr<T> clone_values(const TensorPtr<T>& a) {
    auto out = make_tensor<T>(a->shape);
    out->v = a->v;
    return out;
}

// precision change; same-type casts share the input tensor
template <typename To, typename From>
TensorPtr<To> cast_tensor(const TensorPtr<From>& a) {
    if constexpr (std::is_same_v<To, From>) {
        return a;
    } else {
        auto out = make_tensor<To>(a->shape);
        for (int64_t i = 0; i < a->numel(); i++) out->v[i] = static_cast<To>(a->v[i]);
        return out;
    }
}

inline void check_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* where) {
    if (a != b)
        throw ShapeError(std::string(where) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace glyphdiff
