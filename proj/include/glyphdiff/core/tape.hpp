#pragma once

#include <functional>
#include <vector>

#include "tensor.hpp"

namespace glyphdiff {

// Eager reverse-mode tape. Ops append a closure while computing their forward
// pass; backward() replays them in reverse. Closures capture shared_ptrs, so
// intermediate activations stay alive until clear().
template <typename T>
class Tape {
  public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    // Seeds d(loss)/d(loss) = seed and propagates. The seed parameter lets a
    // per-sample loss contribute 1/batch to accumulated parameter grads.
    void backward(const TensorPtr<T>& loss, T seed = T(1)) {
        if (!loss->rg) throw DomainError("backward: loss does not require grad");
        for (auto& gi : loss->g) gi += seed;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

  private:
    std::vector<std::function<void()>> nodes_;
};

// True when an op invoked with this tape should track gradients.
template <typename T>
inline bool tracking(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape) return false;
    for (const auto* t : inputs)
        if (t->rg) return true;
    return false;
}

}  // namespace glyphdiff
