#pragma once

// Differentiable operations used by the classifier and by trigger inversion.
// All operate on rank-1 or rank-2 row-major tensors; rank-1 tensors are
// treated as a single row where that makes sense.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dbs/tensor.hpp"

namespace dbs::ops {

namespace detail {

inline void require_rank2(const Tensor& t, const char* op, const char* name) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": " + name + " must be a matrix, got " + shape_string(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

} // namespace detail

using dbs::detail::make_result;
using dbs::detail::Node;

// out = x * w + b, x: [B x in], w: [in x out], b: [out]
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_rank2(x, "affine", "x");
    detail::require_rank2(w, "affine", "weight");
    const std::size_t batch = x.rows(), in = x.cols(), out = w.cols();
    if (w.rows() != in || b.size() != out) {
        throw ShapeError("affine: x " + shape_string(x.shape()) + ", weight " + shape_string(w.shape()) +
                         ", bias " + shape_string(b.shape()) + " do not conform");
    }
    auto xv = x.values(), wv = w.values(), bv = b.values();
    std::vector<float> y(batch * out);
    std::vector<double> acc(out);
    for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t o = 0; o < out; ++o) acc[o] = bv[o];
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xv[r * in + i];
            if (xi == 0.0) continue;
            const float* wrow = &wv[i * out];
            for (std::size_t o = 0; o < out; ++o) acc[o] += xi * wrow[o];
        }
        for (std::size_t o = 0; o < out; ++o) y[r * out + o] = static_cast<float>(acc[o]);
    }
    return make_result("affine", {batch, out}, std::move(y), {x, w, b},
                       [x, w, b, batch, in, out](Node& self) {
                           const auto& g = self.grad;
                           auto* xn = x.node().get();
                           auto* wn = w.node().get();
                           auto* bn = b.node().get();
                           if (xn->requires_grad) {
                               xn->ensure_grad();
                               for (std::size_t r = 0; r < batch; ++r)
                                   for (std::size_t i = 0; i < in; ++i) {
                                       double s = 0.0;
                                       for (std::size_t o = 0; o < out; ++o)
                                           s += static_cast<double>(g[r * out + o]) * wn->values[i * out + o];
                                       xn->grad[r * in + i] += static_cast<float>(s);
                                   }
                           }
                           if (wn->requires_grad) {
                               wn->ensure_grad();
                               for (std::size_t i = 0; i < in; ++i)
                                   for (std::size_t o = 0; o < out; ++o) {
                                       double s = 0.0;
                                       for (std::size_t r = 0; r < batch; ++r)
                                           s += static_cast<double>(xn->values[r * in + i]) * g[r * out + o];
                                       wn->grad[i * out + o] += static_cast<float>(s);
                                   }
                           }
                           if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (std::size_t o = 0; o < out; ++o) {
                                   double s = 0.0;
                                   for (std::size_t r = 0; r < batch; ++r) s += g[r * out + o];
                                   bn->grad[o] += static_cast<float>(s);
                               }
                           }
                       });
}

// out = a * b, a: [R x K], b: [K x C]. With `a` holding simplex rows and `b`
// an embedding table this is the weighted-sum embedding of a relaxed trigger.
inline Tensor matmul(const Tensor& a, const Tensor& b, const char* op = "matmul") {
    detail::require_rank2(a, op, "lhs");
    detail::require_rank2(b, op, "rhs");
    const std::size_t rows = a.rows(), inner = a.cols(), cols = b.cols();
    if (b.rows() != inner) {
        throw ShapeError(std::string(op) + ": " + shape_string(a.shape()) + " x " + shape_string(b.shape()) +
                         " do not conform");
    }
    auto av = a.values(), bv = b.values();
    std::vector<float> y(rows * cols);
    std::vector<double> acc(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < inner; ++k) {
            const double ak = av[r * inner + k];
            if (ak == 0.0) continue;
            const float* brow = &bv[k * cols];
            for (std::size_t c = 0; c < cols; ++c) acc[c] += ak * brow[c];
        }
        for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = static_cast<float>(acc[c]);
    }
    return make_result(op, {rows, cols}, std::move(y), {a, b}, [a, b, rows, inner, cols](Node& self) {
        const auto& g = self.grad;
        auto* an = a.node().get();
        auto* bn = b.node().get();
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t k = 0; k < inner; ++k) {
                    double s = 0.0;
                    const float* brow = &bn->values[k * cols];
                    for (std::size_t c = 0; c < cols; ++c) s += static_cast<double>(g[r * cols + c]) * brow[c];
                    an->grad[r * inner + k] += static_cast<float>(s);
                }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t k = 0; k < inner; ++k)
                for (std::size_t c = 0; c < cols; ++c) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < rows; ++r)
                        s += static_cast<double>(an->values[r * inner + k]) * g[r * cols + c];
                    bn->grad[k * cols + c] += static_cast<float>(s);
                }
        }
    });
}

inline Tensor tanh(const Tensor& x) {
    std::vector<float> y(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(xv[i]);
    return make_result("tanh", x.shape(), std::move(y), {x}, [x](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.values.size(); ++i) {
            const double t = self.values[i];
            xn->grad[i] += static_cast<float>(self.grad[i] * (1.0 - t * t));
        }
    });
}

// Each row divided by its root mean square: x / sqrt(mean(x^2) + eps).
inline Tensor rms_normalize_rows(const Tensor& x, double eps) {
    if (x.rank() != 2) throw ShapeError("rms_normalize_rows: expected a matrix, got " + shape_string(x.shape()));
    const std::size_t rows = x.rows(), cols = x.cols();
    auto xv = x.values();
    std::vector<float> y(x.size());
    std::vector<double> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ms = 0.0;
        for (std::size_t c = 0; c < cols; ++c) ms += static_cast<double>(xv[r * cols + c]) * xv[r * cols + c];
        inv[r] = 1.0 / std::sqrt(ms / static_cast<double>(cols) + eps);
        for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = static_cast<float>(xv[r * cols + c] * inv[r]);
    }
    return make_result("rms_normalize_rows", x.shape(), std::move(y), {x}, [x, inv, rows, cols](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        // dy_c/dx_k = inv * (delta_ck - y_c * y_k / cols)
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
                dot += static_cast<double>(self.grad[r * cols + c]) * self.values[r * cols + c];
            for (std::size_t k = 0; k < cols; ++k) {
                const double g = self.grad[r * cols + k] - self.values[r * cols + k] * dot / static_cast<double>(cols);
                xn->grad[r * cols + k] += static_cast<float>(inv[r] * g);
            }
        }
    });
}

// log(1 + exp(x)), evaluated without overflow.
inline Tensor softplus(const Tensor& x) {
    std::vector<float> y(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double v = xv[i];
        y[i] = static_cast<float>(std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))));
    }
    return make_result("softplus", x.shape(), std::move(y), {x}, [x](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        auto xv = x.values();
        for (std::size_t i = 0; i < self.values.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(xv[i])));
            xn->grad[i] += static_cast<float>(self.grad[i] * sig);
        }
    });
}

// Row-wise softmax of x / temperature. Columns flagged in `mask` receive
// exactly zero probability (equivalent to a -inf logit) and zero gradient.
inline Tensor softmax_rows(const Tensor& x, double temperature, const std::vector<bool>& mask = {}) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ContractError("softmax_rows: temperature must be strictly positive and finite, got " +
                            std::to_string(temperature));
    }
    const std::size_t rows = x.rows(), cols = x.cols();
    if (!mask.empty() && mask.size() != cols) {
        throw ShapeError("softmax_rows: mask length " + std::to_string(mask.size()) + " vs " +
                         std::to_string(cols) + " columns");
    }
    auto masked = [&](std::size_t c) { return !mask.empty() && mask[c]; };
    auto xv = x.values();
    std::vector<float> y(rows * cols, 0.0f);
    std::vector<double> e(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c)
            if (!masked(c)) mx = std::max(mx, static_cast<double>(xv[r * cols + c]));
        if (!std::isfinite(mx)) throw ContractError("softmax_rows: every column is masked");
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            e[c] = masked(c) ? 0.0 : std::exp((xv[r * cols + c] - mx) / temperature);
            sum += e[c];
        }
        for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = static_cast<float>(e[c] / sum);
    }
    return make_result("softmax_rows", x.shape(), std::move(y), {x}, [x, rows, cols, temperature](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
                dot += static_cast<double>(self.grad[r * cols + c]) * self.values[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
                const double yv = self.values[r * cols + c];
                xn->grad[r * cols + c] += static_cast<float>(yv * (self.grad[r * cols + c] - dot) / temperature);
            }
        }
    });
}

struct BagEntry {
    std::int32_t id;
    float weight;
};
using Bag = std::vector<BagEntry>;

// out[b] = sum_k weight_k * table[id_k]; one output row per bag.
inline Tensor embedding_bag(const Tensor& table, const std::vector<Bag>& bags) {
    detail::require_rank2(table, "embedding_bag", "table");
    if (bags.empty()) throw ShapeError("embedding_bag: no bags");
    const std::size_t vocab = table.rows(), dim = table.cols();
    auto tv = table.values();
    std::vector<float> y(bags.size() * dim);
    std::vector<double> acc(dim);
    for (std::size_t b = 0; b < bags.size(); ++b) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (const auto& entry : bags[b]) {
            if (entry.id < 0 || static_cast<std::size_t>(entry.id) >= vocab) {
                throw ContractError("embedding_bag: id " + std::to_string(entry.id) + " out of range [0, " +
                                    std::to_string(vocab) + ")");
            }
            const float* row = &tv[entry.id * dim];
            for (std::size_t c = 0; c < dim; ++c) acc[c] += static_cast<double>(entry.weight) * row[c];
        }
        for (std::size_t c = 0; c < dim; ++c) y[b * dim + c] = static_cast<float>(acc[c]);
    }
    return make_result("embedding_bag", {bags.size(), dim}, std::move(y), {table}, [table, bags, dim](Node& self) {
        auto* tn = table.node().get();
        tn->ensure_grad();
        for (std::size_t b = 0; b < bags.size(); ++b)
            for (const auto& entry : bags[b])
                for (std::size_t c = 0; c < dim; ++c)
                    tn->grad[entry.id * dim + c] += entry.weight * self.grad[b * dim + c];
    });
}

// Column sums: [R x C] -> [1 x C].
inline Tensor sum_rows(const Tensor& x) {
    const std::size_t rows = x.rows(), cols = x.cols();
    auto xv = x.values();
    std::vector<float> y(cols);
    for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += xv[r * cols + c];
        y[c] = static_cast<float>(s);
    }
    return make_result("sum_rows", {1, cols}, std::move(y), {x}, [x, rows, cols](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) xn->grad[r * cols + c] += self.grad[c];
    });
}

// Arithmetic mean over rows: [n x e] -> [1 x e].
inline Tensor mean_pool(const Tensor& x) {
    const std::size_t rows = x.rows(), cols = x.cols();
    auto xv = x.values();
    std::vector<float> y(cols);
    for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += xv[r * cols + c];
        y[c] = static_cast<float>(s / static_cast<double>(rows));
    }
    return make_result("mean_pool", {1, cols}, std::move(y), {x}, [x, rows, cols](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                xn->grad[r * cols + c] += static_cast<float>(self.grad[c] * inv);
    });
}

// Inserts the rows of `block` before row `at` of `x`.
inline Tensor insert_rows(const Tensor& x, const Tensor& block, std::size_t at) {
    detail::require_rank2(x, "insert_rows", "x");
    detail::require_rank2(block, "insert_rows", "block");
    if (x.cols() != block.cols()) {
        throw ShapeError("insert_rows: width " + std::to_string(x.cols()) + " vs " + std::to_string(block.cols()));
    }
    if (at > x.rows()) throw ShapeError("insert_rows: position past the end");
    const std::size_t cols = x.cols(), n = x.rows(), m = block.rows();
    auto xv = x.values(), bv = block.values();
    std::vector<float> y;
    y.reserve((n + m) * cols);
    y.insert(y.end(), xv.begin(), xv.begin() + at * cols);
    y.insert(y.end(), bv.begin(), bv.end());
    y.insert(y.end(), xv.begin() + at * cols, xv.end());
    return make_result("insert_rows", {n + m, cols}, std::move(y), {x, block}, [x, block, at, n, m, cols](Node& self) {
        auto* xn = x.node().get();
        auto* bn = block.node().get();
        for (std::size_t r = 0; r < n + m; ++r) {
            const bool in_block = r >= at && r < at + m;
            auto* dst = in_block ? bn : xn;
            if (!dst->requires_grad) continue;
            dst->ensure_grad();
            const std::size_t src_row = in_block ? r - at : (r < at ? r : r - m);
            for (std::size_t c = 0; c < cols; ++c) dst->grad[src_row * cols + c] += self.grad[r * cols + c];
        }
    });
}

// out[r] = a[r] + v, v: [1 x C].
inline Tensor add_row_vector(const Tensor& a, const Tensor& v) {
    const std::size_t rows = a.rows(), cols = a.cols();
    if (v.size() != cols) {
        throw ShapeError("add_row_vector: " + shape_string(a.shape()) + " + " + shape_string(v.shape()));
    }
    auto av = a.values(), vv = v.values();
    std::vector<float> y(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            y[r * cols + c] = static_cast<float>(static_cast<double>(av[r * cols + c]) + vv[c]);
    return make_result("add_row_vector", a.shape(), std::move(y), {a, v}, [a, v, rows, cols](Node& self) {
        auto* an = a.node().get();
        auto* vn = v.node().get();
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < rows * cols; ++i) an->grad[i] += self.grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (std::size_t c = 0; c < cols; ++c) {
                double s = 0.0;
                for (std::size_t r = 0; r < rows; ++r) s += self.grad[r * cols + c];
                vn->grad[c] += static_cast<float>(s);
            }
        }
    });
}

// out[r] = coeff[r] * a[r] with constant coefficients.
inline Tensor scale_rows(const Tensor& a, std::vector<float> coeff) {
    const std::size_t rows = a.rows(), cols = a.cols();
    if (coeff.size() != rows) {
        throw ShapeError("scale_rows: " + std::to_string(coeff.size()) + " coefficients for " +
                         std::to_string(rows) + " rows");
    }
    auto av = a.values();
    std::vector<float> y(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = av[r * cols + c] * coeff[r];
    return make_result("scale_rows", a.shape(), std::move(y), {a}, [a, coeff, rows, cols](Node& self) {
        auto* an = a.node().get();
        an->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) an->grad[r * cols + c] += self.grad[r * cols + c] * coeff[r];
    });
}

// Per-row softmax cross-entropy of raw logits against integer labels: [B x K] -> [B].
inline Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> labels) {
    const std::size_t rows = logits.rows(), k = logits.cols();
    if (labels.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows");
    }
    auto lv = logits.values();
    std::vector<float> y(rows);
    std::vector<float> probs(rows * k);
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
            throw ContractError("cross_entropy: label " + std::to_string(labels[r]) + " out of range [0, " +
                                std::to_string(k) + ")");
        }
        double mx = lv[r * k];
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(lv[r * k + c]));
        double sum = 0.0;
        for (std::size_t c = 0; c < k; ++c) sum += std::exp(lv[r * k + c] - mx);
        const double log_z = mx + std::log(sum);
        y[r] = static_cast<float>(log_z - lv[r * k + labels[r]]);
        for (std::size_t c = 0; c < k; ++c) probs[r * k + c] = static_cast<float>(std::exp(lv[r * k + c] - log_z));
    }
    std::vector<int> owned(labels.begin(), labels.end());
    return make_result("cross_entropy", {rows}, std::move(y), {logits},
                       [logits, owned = std::move(owned), probs = std::move(probs), rows, k](Node& self) {
                           auto* ln = logits.node().get();
                           ln->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < k; ++c) {
                                   const double target = static_cast<std::size_t>(owned[r]) == c ? 1.0 : 0.0;
                                   ln->grad[r * k + c] += static_cast<float>(self.grad[r] * (probs[r * k + c] - target));
                               }
                       });
}

// max(x - phi, 0) elementwise; the hinge used by adaptive poisoning.
inline Tensor hinge(const Tensor& x, double phi) {
    auto xv = x.values();
    std::vector<float> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<float>(std::max(xv[i] - phi, 0.0));
    return make_result("hinge", x.shape(), std::move(y), {x}, [x, phi](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.values.size(); ++i)
            if (xn->values[i] - phi > 0.0) xn->grad[i] += self.grad[i];
    });
}

// Scalar sum_i w_i x_i with constant weights.
inline Tensor weighted_sum(const Tensor& x, std::vector<float> weights) {
    if (weights.size() != x.size()) {
        throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(x.size()) + " values");
    }
    auto xv = x.values();
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<double>(weights[i]) * xv[i];
    return make_result("weighted_sum", {1}, {static_cast<float>(s)}, {x}, [x, weights](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        for (std::size_t i = 0; i < weights.size(); ++i) xn->grad[i] += self.grad[0] * weights[i];
    });
}

inline Tensor sum(const Tensor& x) { return weighted_sum(x, std::vector<float>(x.size(), 1.0f)); }

inline Tensor mean(const Tensor& x) {
    return weighted_sum(x, std::vector<float>(x.size(), static_cast<float>(1.0 / static_cast<double>(x.size()))));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    auto av = a.values(), bv = b.values();
    std::vector<float> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<float>(static_cast<double>(av[i]) + bv[i]);
    return make_result("add", a.shape(), std::move(y), {a, b}, [a, b](Node& self) {
        for (auto* n : {a.node().get(), b.node().get()}) {
            if (!n->requires_grad) continue;
            n->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) n->grad[i] += self.grad[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double factor) {
    auto xv = x.values();
    std::vector<float> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<float>(xv[i] * factor);
    return make_result("scale", x.shape(), std::move(y), {x}, [x, factor](Node& self) {
        auto* xn = x.node().get();
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += static_cast<float>(self.grad[i] * factor);
    });
}

// Shannon entropy of each row of a (simplex) matrix: [R x C] -> [R].
inline Tensor row_entropy(const Tensor& p) {
    const std::size_t rows = p.rows(), cols = p.cols();
    auto pv = p.values();
    std::vector<float> y(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double h = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = pv[r * cols + c];
            if (v > 0.0) h -= v * std::log(v);
        }
        y[r] = static_cast<float>(h);
    }
    return make_result("row_entropy", {rows}, std::move(y), {p}, [p, rows, cols](Node& self) {
        auto* pn = p.node().get();
        pn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const double v = pn->values[r * cols + c];
                // d(-v log v)/dv = -(log v + 1); zero-probability entries get no push.
                if (v > 0.0) pn->grad[r * cols + c] += static_cast<float>(self.grad[r] * -(std::log(v) + 1.0));
            }
    });
}

} // namespace dbs::ops
