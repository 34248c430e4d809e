#pragma once

// Dense f64 tensor with optional gradient buffer. Row-major storage, no
// broadcasting beyond the explicitly provided ops. Handles share storage;
// copy a Tensor and you alias the same node.

#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mmrag/common.hpp"

namespace mmrag {

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // same length as values once allocated
    bool requires_grad = false;
};

}  // namespace detail

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<detail::TensorNode>();
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
            n *= d;
        }
        t.n_->shape = std::move(shape);
        t.n_->values.assign(n, 0.0);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_values(std::vector<std::size_t> shape, std::vector<double> values,
                              bool requires_grad = false) {
        Tensor t = zeros(shape, requires_grad);
        if (values.size() != t.numel())
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(t.shape()));
        t.n_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_values({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<std::size_t>& shape() const { return n_->shape; }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t numel() const { return n_->values.size(); }

    std::size_t rows() const {
        if (rank() != 2) throw ShapeError("rows() on rank-" + std::to_string(rank()) + " tensor");
        return n_->shape[0];
    }
    std::size_t cols() const {
        if (rank() != 2) throw ShapeError("cols() on rank-" + std::to_string(rank()) + " tensor");
        return n_->shape[1];
    }

    double* data() { return n_->values.data(); }
    const double* data() const { return n_->values.data(); }
    std::vector<double>& values() { return n_->values; }
    const std::vector<double>& values() const { return n_->values; }

    double& at(std::size_t i) { return n_->values[i]; }
    double at(std::size_t i) const { return n_->values[i]; }
    double& at(std::size_t r, std::size_t c) { return n_->values[r * cols_unchecked() + c]; }
    double at(std::size_t r, std::size_t c) const { return n_->values[r * cols_unchecked() + c]; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->values[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    bool has_grad() const { return !n_->grad.empty(); }
    void ensure_grad() {
        if (n_->grad.empty()) n_->grad.assign(n_->values.size(), 0.0);
    }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }
    double* grad() { return n_->grad.data(); }
    const double* grad() const { return n_->grad.data(); }
    std::vector<double>& grad_values() { return n_->grad; }

    // Identity of the underlying node; two handles compare equal iff they
    // alias the same storage.
    const void* id() const { return n_.get(); }
    bool same_node(const Tensor& other) const { return n_.get() == other.n_.get(); }

    // Deep copy; the clone never aliases the source.
    Tensor clone() const {
        Tensor t = zeros(n_->shape, n_->requires_grad);
        t.n_->values = n_->values;
        return t;
    }

  private:
    std::size_t cols_unchecked() const { return n_->shape[1]; }
    std::shared_ptr<detail::TensorNode> n_;
};

inline void check_finite(const Tensor& t, const char* where) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) throw ContractError(std::string("non-finite value in ") + where);
    }
}

}  // namespace mmrag
