#pragma once

// Reverse-mode autodiff tape. Ops append backward closures in execution
// order; backward() replays them in reverse, so each closure sees the
// complete gradient of its result before touching its operands. Gradients
// accumulate additively across multiple uses of a tensor.
//
// A tape must stay on one thread for its lifetime. A disabled tape records
// nothing, which is the inference mode.

#include <functional>
#include <utility>
#include <vector>

#include "mmrag/tensor.hpp"

namespace mmrag {

class Tape {
  public:
    explicit Tape(bool enabled = true) : enabled_(enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool enabled() const { return enabled_; }

    template <typename F>
    void record(F&& backward_fn) {
        records_.emplace_back(std::forward<F>(backward_fn));
    }

    std::size_t size() const { return records_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape backward. Every
    // requires_grad ancestor of the loss ends up with a populated grad.
    void backward(Tensor loss) {
        if (loss.numel() != 1)
            throw ContractError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
        loss.ensure_grad();
        loss.grad()[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

    void clear() { records_.clear(); }

  private:
    bool enabled_;
    std::vector<std::function<void()>> records_;
};

}  // namespace mmrag
