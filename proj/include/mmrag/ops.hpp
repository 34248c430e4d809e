#pragma once

// Differentiable tensor operations. Every op validates shapes up front,
// computes the forward value, and (when the tape is enabled and some
// operand needs gradients) records a backward closure.
//
// Shapes must match exactly; the only broadcasts are add_bias_rows and
// scale_by_scalar.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mmrag/tape.hpp"
#include "mmrag/tensor.hpp"

namespace mmrag {
namespace ops {

namespace kernel {

// c[m,n] += or = a[m,k] * b[k,n]
inline void mm_nn(const double* __restrict__ a, const double* __restrict__ b,
                  double* __restrict__ c, std::size_t m, std::size_t k, std::size_t n,
                  bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m,n] += or = a[m,k] * b[n,k]^T
inline void mm_nt(const double* __restrict__ a, const double* __restrict__ b,
                  double* __restrict__ c, std::size_t m, std::size_t k, std::size_t n,
                  bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + s : s;
        }
    }
}

// c[m,n] += or = a[k,m]^T * b[k,n]
inline void mm_tn(const double* __restrict__ a, const double* __restrict__ b,
                  double* __restrict__ c, std::size_t m, std::size_t k, std::size_t n,
                  bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace kernel

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
}

inline void require_rank1(const Tensor& t, const char* op) {
    if (t.rank() != 1)
        throw ShapeError(std::string(op) + " expects a rank-1 tensor, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
}

inline bool want_grad(const Tape& tape, const Tensor& a) {
    return tape.enabled() && a.requires_grad();
}
inline bool want_grad(const Tape& tape, const Tensor& a, const Tensor& b) {
    return tape.enabled() && (a.requires_grad() || b.requires_grad());
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    bool rg = want_grad(tape, a, b);
    Tensor out = Tensor::zeros({m, n}, rg);
    kernel::mm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    if (rg) {
        Tensor ca = a, cb = b, co = out;
        tape.record([ca, cb, co, m, k, n]() mutable {
            if (!co.has_grad()) return;
            if (ca.requires_grad()) {
                ca.ensure_grad();
                kernel::mm_nt(co.grad(), cb.data(), ca.grad(), m, n, k, true);
            }
            if (cb.requires_grad()) {
                cb.ensure_grad();
                kernel::mm_tn(ca.data(), co.grad(), cb.grad(), k, m, n, true);
            }
        });
    }
    return out;
}

// a[m,k] * b[n,k]^T -> [m,n]; the natural form for attention scores.
inline Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    bool rg = want_grad(tape, a, b);
    Tensor out = Tensor::zeros({m, n}, rg);
    kernel::mm_nt(a.data(), b.data(), out.data(), m, k, n, false);
    if (rg) {
        Tensor ca = a, cb = b, co = out;
        tape.record([ca, cb, co, m, k, n]() mutable {
            if (!co.has_grad()) return;
            if (ca.requires_grad()) {
                ca.ensure_grad();
                kernel::mm_nn(co.grad(), cb.data(), ca.grad(), m, n, k, true);
            }
            if (cb.requires_grad()) {
                cb.ensure_grad();
                kernel::mm_tn(co.grad(), ca.data(), cb.grad(), n, m, k, true);
            }
        });
    }
    return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros({n, m}, rg);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, m, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ca.grad()[i * n + j] += co.grad()[j * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    bool rg = want_grad(tape, a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    if (rg) {
        Tensor ca = a, cb = b, co = out;
        tape.record([ca, cb, co, n]() mutable {
            if (!co.has_grad()) return;
            if (ca.requires_grad()) {
                ca.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += co.grad()[i];
            }
            if (cb.requires_grad()) {
                cb.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) cb.grad()[i] += co.grad()[i];
            }
        });
    }
    return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    bool rg = want_grad(tape, a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    if (rg) {
        Tensor ca = a, cb = b, co = out;
        tape.record([ca, cb, co, n]() mutable {
            if (!co.has_grad()) return;
            if (ca.requires_grad()) {
                ca.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += co.grad()[i];
            }
            if (cb.requires_grad()) {
                cb.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) cb.grad()[i] -= co.grad()[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    bool rg = want_grad(tape, a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    if (rg) {
        Tensor ca = a, cb = b, co = out;
        tape.record([ca, cb, co, n]() mutable {
            if (!co.has_grad()) return;
            if (ca.requires_grad()) {
                ca.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += co.grad()[i] * cb.at(i);
            }
            if (cb.requires_grad()) {
                cb.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) cb.grad()[i] += co.grad()[i] * ca.at(i);
            }
        });
    }
    return out;
}

inline Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    bool rg = want_grad(tape, a, b);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) / b.at(i);
    if (rg) {
        Tensor ca = a, cb = b, co = out;
        tape.record([ca, cb, co, n]() mutable {
            if (!co.has_grad()) return;
            if (ca.requires_grad()) {
                ca.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += co.grad()[i] / cb.at(i);
            }
            if (cb.requires_grad()) {
                cb.ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    cb.grad()[i] -= co.grad()[i] * ca.at(i) / (cb.at(i) * cb.at(i));
            }
        });
    }
    return out;
}

// out = scale * a + shift, with compile-time-constant coefficients.
inline Tensor affine(Tape& tape, const Tensor& a, double scale, double shift) {
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = scale * a.at(i) + shift;
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, scale, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += scale * co.grad()[i];
        });
    }
    return out;
}

inline Tensor exp(Tape& tape, const Tensor& a) {
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = std::exp(a.at(i));
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += co.grad()[i] * co.at(i);
        });
    }
    return out;
}

inline Tensor log(Tape& tape, const Tensor& a) {
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = std::log(a.at(i));
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += co.grad()[i] / ca.at(i);
        });
    }
    return out;
}

inline Tensor sqrt(Tape& tape, const Tensor& a) {
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = std::sqrt(a.at(i));
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) ca.grad()[i] += co.grad()[i] * 0.5 / co.at(i);
        });
    }
    return out;
}

// Elementwise 1/(1+e^{-x}); numerically stable on both tails.
inline Tensor sigmoid(Tape& tape, const Tensor& a) {
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.at(i);
        out.at(i) = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double s = co.at(i);
                ca.grad()[i] += co.grad()[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

inline Tensor relu(Tape& tape, const Tensor& a) {
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                if (ca.at(i) > 0.0) ca.grad()[i] += co.grad()[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row-structured ops
// ---------------------------------------------------------------------------

// X[m,n] + bias[n] broadcast over rows; the one sanctioned broadcast.
inline Tensor add_bias_rows(Tape& tape, const Tensor& x, const Tensor& bias) {
    require_rank2(x, "add_bias_rows");
    require_rank1(bias, "add_bias_rows");
    if (x.cols() != bias.shape()[0])
        throw ShapeError("add_bias_rows: " + shape_str(x.shape()) + " vs bias " +
                         shape_str(bias.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    bool rg = want_grad(tape, x, bias);
    Tensor out = Tensor::zeros({m, n}, rg);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + bias.at(j);
    if (rg) {
        Tensor cx = x, cb = bias, co = out;
        tape.record([cx, cb, co, m, n]() mutable {
            if (!co.has_grad()) return;
            if (cx.requires_grad()) {
                cx.ensure_grad();
                const std::size_t total = m * n;
                for (std::size_t i = 0; i < total; ++i) cx.grad()[i] += co.grad()[i];
            }
            if (cb.requires_grad()) {
                cb.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) cb.grad()[j] += co.grad()[i * n + j];
            }
        });
    }
    return out;
}

// x * s where s is a scalar tensor; broadcast over all of x.
inline Tensor scale_by_scalar(Tape& tape, const Tensor& x, const Tensor& s) {
    if (s.numel() != 1)
        throw ShapeError("scale_by_scalar: scale must be scalar, got " + shape_str(s.shape()));
    bool rg = want_grad(tape, x, s);
    Tensor out = Tensor::zeros(x.shape(), rg);
    const std::size_t n = x.numel();
    const double sv = s.at(0);
    for (std::size_t i = 0; i < n; ++i) out.at(i) = x.at(i) * sv;
    if (rg) {
        Tensor cx = x, cs = s, co = out;
        tape.record([cx, cs, co, n]() mutable {
            if (!co.has_grad()) return;
            if (cx.requires_grad()) {
                cx.ensure_grad();
                const double sv2 = cs.at(0);
                for (std::size_t i = 0; i < n; ++i) cx.grad()[i] += co.grad()[i] * sv2;
            }
            if (cs.requires_grad()) {
                cs.ensure_grad();
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += co.grad()[i] * cx.at(i);
                cs.grad()[0] += acc;
            }
        });
    }
    return out;
}

// Per-row softmax with max subtraction. Rows sum to 1 within 1e-12.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
    require_rank2(a, "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros({m, n}, rg);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = a.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(a.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, m, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double gdot = 0.0;
                for (std::size_t j = 0; j < n; ++j) gdot += co.grad()[i * n + j] * co.at(i, j);
                for (std::size_t j = 0; j < n; ++j)
                    ca.grad()[i * n + j] += co.at(i, j) * (co.grad()[i * n + j] - gdot);
            }
        });
    }
    return out;
}

// Per-row log-softmax; stable form for cross-entropy style losses.
inline Tensor log_softmax_rows(Tape& tape, const Tensor& a) {
    require_rank2(a, "log_softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros({m, n}, rg);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = a.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(a.at(i, j) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) - lse;
    }
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, m, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < n; ++j) gsum += co.grad()[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    ca.grad()[i * n + j] += co.grad()[i * n + j] - std::exp(co.at(i, j)) * gsum;
            }
        });
    }
    return out;
}

constexpr double kLayerNormEps = 1e-5;

// Per-row standardization followed by an affine map. eps sits inside the
// sqrt so constant rows come out as plain bias.
inline Tensor layer_norm(Tape& tape, const Tensor& a, const Tensor& gain, const Tensor& bias) {
    require_rank2(a, "layer_norm");
    require_rank1(gain, "layer_norm");
    require_rank1(bias, "layer_norm");
    const std::size_t m = a.rows(), n = a.cols();
    if (n < 2) throw ShapeError("layer_norm requires row width >= 2, got " + shape_str(a.shape()));
    if (gain.shape()[0] != n || bias.shape()[0] != n)
        throw ShapeError("layer_norm: row width " + std::to_string(n) + " vs gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
    bool rg = tape.enabled() && (a.requires_grad() || gain.requires_grad() || bias.requires_grad());
    Tensor out = Tensor::zeros({m, n}, rg);
    Tensor xhat = Tensor::zeros({m, n});
    Tensor inv_std = Tensor::zeros({m});
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += a.at(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = a.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double istd = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std.at(i) = istd;
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (a.at(i, j) - mean) * istd;
            xhat.at(i, j) = xh;
            out.at(i, j) = gain.at(j) * xh + bias.at(j);
        }
    }
    if (rg) {
        Tensor ca = a, cg = gain, cb = bias, co = out;
        tape.record([ca, cg, cb, co, xhat, inv_std, m, n]() mutable {
            if (!co.has_grad()) return;
            const double dn = static_cast<double>(n);
            if (cg.requires_grad()) {
                cg.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        cg.grad()[j] += co.grad()[i * n + j] * xhat.at(i, j);
            }
            if (cb.requires_grad()) {
                cb.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) cb.grad()[j] += co.grad()[i * n + j];
            }
            if (ca.requires_grad()) {
                ca.ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = co.grad()[i * n + j] * cg.at(j);
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat.at(i, j);
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = co.grad()[i * n + j] * cg.at(j);
                        ca.grad()[i * n + j] +=
                            inv_std.at(i) *
                            (dxh - sum_dxh / dn - xhat.at(i, j) * sum_dxh_xh / dn);
                    }
                }
            }
        });
    }
    return out;
}

// Arithmetic mean over the row axis: [N,d] -> [d].
inline Tensor mean_pool_rows(Tape& tape, const Tensor& a) {
    require_rank2(a, "mean_pool_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (m == 0) throw ContractError("mean_pool_rows: empty input");
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros({n}, rg);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j) += a.at(i, j);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t j = 0; j < n; ++j) out.at(j) *= inv;
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, m, n, inv]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ca.grad()[i * n + j] += co.grad()[j] * inv;
        });
    }
    return out;
}

inline Tensor sum_all(Tape& tape, const Tensor& a) {
    bool rg = want_grad(tape, a);
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.at(i);
    Tensor out = Tensor::from_values({1}, {s}, rg);
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            const double g = co.grad()[0];
            for (std::size_t i = 0; i < ca.numel(); ++i) ca.grad()[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(Tape& tape, const Tensor& a) {
    Tensor s = sum_all(tape, a);
    return affine(tape, s, 1.0 / static_cast<double>(a.numel()), 0.0);
}

inline Tensor dot(Tape& tape, const Tensor& u, const Tensor& v) {
    require_rank1(u, "dot");
    require_rank1(v, "dot");
    require_same_shape(u, v, "dot");
    const std::size_t n = u.numel();
    bool rg = want_grad(tape, u, v);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += u.at(i) * v.at(i);
    Tensor out = Tensor::from_values({1}, {s}, rg);
    if (rg) {
        Tensor cu = u, cv = v, co = out;
        tape.record([cu, cv, co, n]() mutable {
            if (!co.has_grad()) return;
            const double g = co.grad()[0];
            if (cu.requires_grad()) {
                cu.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) cu.grad()[i] += g * cv.at(i);
            }
            if (cv.requires_grad()) {
                cv.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) cv.grad()[i] += g * cu.at(i);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Structural ops (concat / slice / gather / reshape)
// ---------------------------------------------------------------------------

inline Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.cols() != n)
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()) + " vs width " +
                             std::to_string(n));
        m += p.rows();
        rg = rg || p.requires_grad();
    }
    rg = rg && tape.enabled();
    Tensor out = Tensor::zeros({m, n}, rg);
    std::size_t r = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + r * n);
        r += p.rows();
    }
    if (rg) {
        std::vector<Tensor> cp = parts;
        Tensor co = out;
        tape.record([cp, co, n]() mutable {
            if (!co.has_grad()) return;
            std::size_t r2 = 0;
            for (Tensor& p : cp) {
                if (p.requires_grad()) {
                    p.ensure_grad();
                    const std::size_t cnt = p.numel();
                    for (std::size_t i = 0; i < cnt; ++i) p.grad()[i] += co.grad()[r2 * n + i];
                }
                r2 += p.rows();
            }
        });
    }
    return out;
}

inline Tensor concat_vec(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_vec: no parts");
    std::size_t n = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_rank1(p, "concat_vec");
        n += p.numel();
        rg = rg || p.requires_grad();
    }
    rg = rg && tape.enabled();
    Tensor out = Tensor::zeros({n}, rg);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + off);
        off += p.numel();
    }
    if (rg) {
        std::vector<Tensor> cp = parts;
        Tensor co = out;
        tape.record([cp, co]() mutable {
            if (!co.has_grad()) return;
            std::size_t off2 = 0;
            for (Tensor& p : cp) {
                if (p.requires_grad()) {
                    p.ensure_grad();
                    for (std::size_t i = 0; i < p.numel(); ++i)
                        p.grad()[i] += co.grad()[off2 + i];
                }
                off2 += p.numel();
            }
        });
    }
    return out;
}

inline Tensor slice_rows(Tape& tape, const Tensor& a, std::size_t r0, std::size_t r1) {
    require_rank2(a, "slice_rows");
    if (r0 >= r1 || r1 > a.rows())
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") out of " + shape_str(a.shape()));
    const std::size_t n = a.cols(), m = r1 - r0;
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros({m, n}, rg);
    std::copy(a.data() + r0 * n, a.data() + r1 * n, out.data());
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, r0, m, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < m * n; ++i) ca.grad()[r0 * n + i] += co.grad()[i];
        });
    }
    return out;
}

inline Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t c0, std::size_t c1) {
    require_rank2(a, "slice_cols");
    if (c0 >= c1 || c1 > a.cols())
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") out of " + shape_str(a.shape()));
    const std::size_t m = a.rows(), nc = c1 - c0, n = a.cols();
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros({m, nc}, rg);
    for (std::size_t i = 0; i < m; ++i)
        std::copy(a.data() + i * n + c0, a.data() + i * n + c1, out.data() + i * nc);
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co, c0, m, nc, n]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < nc; ++j)
                    ca.grad()[i * n + c0 + j] += co.grad()[i * nc + j];
        });
    }
    return out;
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != m)
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        n += p.cols();
        rg = rg || p.requires_grad();
    }
    rg = rg && tape.enabled();
    Tensor out = Tensor::zeros({m, n}, rg);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            std::copy(p.data() + i * p.cols(), p.data() + (i + 1) * p.cols(),
                      out.data() + i * n + off);
        off += p.cols();
    }
    if (rg) {
        std::vector<Tensor> cp = parts;
        Tensor co = out;
        tape.record([cp, co, m, n]() mutable {
            if (!co.has_grad()) return;
            std::size_t off2 = 0;
            for (Tensor& p : cp) {
                if (p.requires_grad()) {
                    p.ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < p.cols(); ++j)
                            p.grad()[i * p.cols() + j] += co.grad()[i * n + off2 + j];
                }
                off2 += p.cols();
            }
        });
    }
    return out;
}

// Row lookup: out[t,:] = table[ids[t],:]. Backward scatter-adds, so repeated
// ids accumulate. This is the embedding-lookup primitive.
inline Tensor gather_rows(Tape& tape, const Tensor& table, const std::vector<std::size_t>& ids) {
    require_rank2(table, "gather_rows");
    if (ids.empty()) throw ContractError("gather_rows: empty id list");
    const std::size_t n = table.cols();
    for (std::size_t id : ids)
        if (id >= table.rows())
            throw ContractError("gather_rows: id " + std::to_string(id) + " out of " +
                                std::to_string(table.rows()) + " rows");
    bool rg = want_grad(tape, table);
    Tensor out = Tensor::zeros({ids.size(), n}, rg);
    for (std::size_t t = 0; t < ids.size(); ++t)
        std::copy(table.data() + ids[t] * n, table.data() + (ids[t] + 1) * n, out.data() + t * n);
    if (rg) {
        Tensor ct = table, co = out;
        std::vector<std::size_t> cids = ids;
        tape.record([ct, co, cids, n]() mutable {
            if (!co.has_grad()) return;
            ct.ensure_grad();
            for (std::size_t t = 0; t < cids.size(); ++t)
                for (std::size_t j = 0; j < n; ++j)
                    ct.grad()[cids[t] * n + j] += co.grad()[t * n + j];
        });
    }
    return out;
}

// Arbitrary flat-index gather; index -1 yields 0. The backbone's im2col is
// built on this, so convolution backward is pure scatter-add.
inline Tensor gather_flat(Tape& tape, const Tensor& src, std::vector<std::size_t> out_shape,
                          const std::vector<std::int64_t>& idx) {
    std::size_t total = 1;
    for (std::size_t d : out_shape) total *= d;
    if (idx.size() != total)
        throw ShapeError("gather_flat: index count " + std::to_string(idx.size()) +
                         " vs shape " + shape_str(out_shape));
    const std::int64_t limit = static_cast<std::int64_t>(src.numel());
    for (std::int64_t i : idx)
        if (i >= limit) throw ContractError("gather_flat: index out of range");
    bool rg = want_grad(tape, src);
    Tensor out = Tensor::zeros(std::move(out_shape), rg);
    for (std::size_t t = 0; t < total; ++t)
        out.at(t) = idx[t] < 0 ? 0.0 : src.at(static_cast<std::size_t>(idx[t]));
    if (rg) {
        Tensor cs = src, co = out;
        std::vector<std::int64_t> cidx = idx;
        tape.record([cs, co, cidx, total]() mutable {
            if (!co.has_grad()) return;
            cs.ensure_grad();
            for (std::size_t t = 0; t < total; ++t)
                if (cidx[t] >= 0) cs.grad()[static_cast<std::size_t>(cidx[t])] += co.grad()[t];
        });
    }
    return out;
}

// Copy-semantics reshape (row-major reinterpretation).
inline Tensor reshape(Tape& tape, const Tensor& a, std::vector<std::size_t> new_shape) {
    std::size_t total = 1;
    for (std::size_t d : new_shape) total *= d;
    if (total != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape));
    bool rg = want_grad(tape, a);
    Tensor out = Tensor::zeros(std::move(new_shape), rg);
    std::copy(a.data(), a.data() + a.numel(), out.data());
    if (rg) {
        Tensor ca = a, co = out;
        tape.record([ca, co]() mutable {
            if (!co.has_grad()) return;
            ca.ensure_grad();
            for (std::size_t i = 0; i < ca.numel(); ++i) ca.grad()[i] += co.grad()[i];
        });
    }
    return out;
}

inline Tensor as_row(Tape& tape, const Tensor& v) {
    require_rank1(v, "as_row");
    return reshape(tape, v, {1, v.numel()});
}

inline Tensor as_vec(Tape& tape, const Tensor& m) {
    return reshape(tape, m, {m.numel()});
}

}  // namespace ops
}  // namespace mmrag
