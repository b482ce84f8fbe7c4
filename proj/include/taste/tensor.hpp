#pragma once

// Dense f64 tensors with reverse-mode differentiation. The graph is the tape:
// nodes carry a creation-order id, so creation order is a valid topological
// order and backward walks it in reverse exactly once.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "taste/common.hpp"

namespace taste {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

// Opt-in per-primitive finite check (tests enable it; training checks the
// loss and gradients instead to keep kernels lean).
inline bool& finite_checks() {
    static bool enabled = false;
    return enabled;
}

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    uint64_t id = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // scatters node.grad into parents

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
}

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> value, bool requires_grad = false) {
        n_ = std::make_shared<TensorNode>();
        TASTE_CHECK(static_cast<int64_t>(value.size()) == numel(shape), Errc::shape_error,
                    "value count " + std::to_string(value.size()) + " != numel" + shape_str(shape));
        n_->shape = std::move(shape);
        n_->value = std::move(value);
        n_->requires_grad = requires_grad;
        n_->id = next_node_id();
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double v) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t size() const { return static_cast<int64_t>(n_->value.size()); }
    std::vector<double>& values() { return n_->value; }
    const std::vector<double>& values() const { return n_->value; }
    double item() const {
        TASTE_CHECK(size() == 1, Errc::shape_error, "item() on non-scalar " + shape_str(shape()));
        return n_->value[0];
    }
    bool requires_grad() const { return n_->requires_grad; }
    std::vector<double>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() {
        n_->grad.assign(n_->value.size(), 0.0);
    }

    std::shared_ptr<TensorNode> node() const { return n_; }

private:
    std::shared_ptr<TensorNode> n_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    if (!finite_checks()) return;
    for (double v : t.values())
        TASTE_CHECK(std::isfinite(v), Errc::non_finite_value,
                    std::string("non-finite output of ") + op);
}

inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backprop) {
    bool track = false;
    for (const auto& p : parents) track = track || p.requires_grad();
    Tensor out(std::move(shape), std::move(value), track);
    if (track) {
        auto node = out.node();
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backprop = std::move(backprop);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    TASTE_CHECK(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[0],
                Errc::shape_error,
                "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    std::vector<double> out(static_cast<size_t>(n * m), 0.0);
    const double* __restrict pa = a.values().data();
    const double* __restrict pb = b.values().data();
    double* __restrict pc = out.data();
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = pa + i * k;
        double* crow = pc + i * m;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    auto an = a.node(), bn = b.node();
    Tensor res = detail::make_result(
        {n, m}, std::move(out), {a, b}, [an, bn, n, k, m](TensorNode& node) {
            const double* __restrict g = node.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                double* __restrict da = an->grad.data();
                const double* __restrict pb2 = bn->value.data();
                // dA[i,kk] += sum_j g[i,j] * B[kk,j]
                for (int64_t i = 0; i < n; ++i) {
                    const double* grow = g + i * m;
                    double* darow = da + i * k;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const double* brow = pb2 + kk * m;
                        double acc = 0.0;
                        for (int64_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
                        darow[kk] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* __restrict db = bn->grad.data();
                const double* __restrict pa2 = an->value.data();
                // dB[kk,j] += sum_i A[i,kk] * g[i,j]
                for (int64_t i = 0; i < n; ++i) {
                    const double* arow = pa2 + i * k;
                    const double* grow = g + i * m;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const double av = arow[kk];
                        if (av == 0.0) continue;
                        double* dbrow = db + kk * m;
                        for (int64_t j = 0; j < m; ++j) dbrow[j] += av * grow[j];
                    }
                }
            }
        });
    detail::check_finite(res, "matmul");
    return res;
}

namespace detail {

enum class Broadcast { none, suffix, row_scalar };

inline Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return Broadcast::none;
    // b is (n,1) against a (n,m): per-row scalar.
    if (a.size() == 2 && b.size() == 2 && a[0] == b[0] && b[1] == 1 && a[1] != 1)
        return Broadcast::row_scalar;
    // b broadcast over leading dims: b's shape (leading 1s dropped) is a
    // suffix of a's, e.g. (B,n)+(n) or (B,n)+(1,n).
    Shape bs(b.begin(), b.end());
    while (!bs.empty() && bs.front() == 1) bs.erase(bs.begin());
    if (bs.size() <= a.size() &&
        std::equal(bs.begin(), bs.end(), a.end() - static_cast<long>(bs.size())))
        return Broadcast::suffix;
    fail(Errc::shape_error, std::string(op) + " " + shape_str(a) + " vs " + shape_str(b));
}

template <typename FwdFn, typename DaFn, typename DbFn>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, const char* op, FwdFn fwd, DaFn dfa,
                        DbFn dfb) {
    Broadcast kind = broadcast_kind(a.shape(), b.shape(), op);
    const int64_t n = a.size();
    const int64_t bn_size = b.size();
    const int64_t cols = (kind == Broadcast::row_scalar) ? a.shape()[1] : 0;
    std::vector<double> out(static_cast<size_t>(n));
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    auto bindex = [kind, bn_size, cols](int64_t i) -> int64_t {
        switch (kind) {
            case Broadcast::none: return i;
            case Broadcast::suffix: return i % bn_size;
            case Broadcast::row_scalar: return i / cols;
        }
        return 0;
    };
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(pa[i], pb[bindex(i)]);
    auto an = a.node(), bnn = b.node();
    Tensor res = make_result(
        a.shape(), std::move(out), {a, b},
        [an, bnn, bindex, n, dfa, dfb](TensorNode& node) {
            const double* g = node.grad.data();
            const double* pa2 = an->value.data();
            const double* pb2 = bnn->value.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    an->grad[static_cast<size_t>(i)] += g[i] * dfa(pa2[i], pb2[bindex(i)]);
            }
            if (bnn->requires_grad) {
                bnn->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    bnn->grad[static_cast<size_t>(bindex(i))] += g[i] * dfb(pa2[i], pb2[bindex(i)]);
            }
        });
    check_finite(res, op);
    return res;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_broadcast(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_broadcast(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_broadcast(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (double& v : out) v *= c;
    auto an = a.node();
    Tensor res = detail::make_result(a.shape(), std::move(out), {a}, [an, c](TensorNode& node) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += c * node.grad[i];
    });
    detail::check_finite(res, "scale");
    return res;
}

// Reduction over one axis. keepdims=false drops the axis (scalars keep {1}).
inline Tensor sum(const Tensor& a, int axis, bool keepdims = false) {
    const Shape& s = a.shape();
    TASTE_CHECK(axis >= 0 && axis < static_cast<int>(s.size()), Errc::shape_error,
                "sum axis " + std::to_string(axis) + " of " + shape_str(s));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const int64_t n_axis = s[axis];
    Shape out_shape;
    for (int i = 0; i < static_cast<int>(s.size()); ++i) {
        if (i == axis) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(s[i]);
        }
    }
    if (out_shape.empty()) out_shape = {1};
    std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
    const double* pa = a.values().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t x = 0; x < n_axis; ++x) {
            const double* src = pa + (o * n_axis + x) * inner;
            double* dst = out.data() + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    auto an = a.node();
    Tensor res = detail::make_result(
        std::move(out_shape), std::move(out), {a},
        [an, outer, inner, n_axis](TensorNode& node) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const double* g = node.grad.data();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t x = 0; x < n_axis; ++x) {
                    double* dst = an->grad.data() + (o * n_axis + x) * inner;
                    const double* src = g + o * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
        });
    detail::check_finite(res, "sum");
    return res;
}

inline Tensor mean(const Tensor& a, int axis, bool keepdims = false) {
    return scale(sum(a, axis, keepdims), 1.0 / static_cast<double>(a.shape()[axis]));
}

inline Tensor sum_all(const Tensor& a) {
    std::vector<double> out(1, 0.0);
    for (double v : a.values()) out[0] += v;
    auto an = a.node();
    Tensor res = detail::make_result({1}, std::move(out), {a}, [an](TensorNode& node) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = node.grad[0];
        for (double& d : an->grad) d += g;
    });
    detail::check_finite(res, "sum_all");
    return res;
}

inline Tensor mean_all(const Tensor& a) {
    double inv = 1.0 / static_cast<double>(a.size());
    std::vector<double> out(1, 0.0);
    for (double v : a.values()) out[0] += v;
    out[0] *= inv;
    auto an = a.node();
    Tensor res = detail::make_result({1}, std::move(out), {a}, [an, inv](TensorNode& node) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = node.grad[0] * inv;
        for (double& d : an->grad) d += g;
    });
    detail::check_finite(res, "mean_all");
    return res;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    TASTE_CHECK(numel(new_shape) == a.size(), Errc::shape_error,
                "reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
    auto an = a.node();
    Tensor res = detail::make_result(std::move(new_shape), a.values(), {a}, [an](TensorNode& node) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    });
    return res;
}

// Concatenate 2-D tensors over the last axis.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
    TASTE_CHECK(!parts.empty(), Errc::shape_error, "concat of zero tensors");
    const int64_t rows = parts[0].shape()[0];
    int64_t total = 0;
    for (const auto& p : parts) {
        TASTE_CHECK(p.shape().size() == 2 && p.shape()[0] == rows, Errc::shape_error,
                    "concat_last row mismatch " + shape_str(p.shape()));
        total += p.shape()[1];
    }
    std::vector<double> out(static_cast<size_t>(rows * total));
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t c = p.shape()[1];
        const double* src = p.values().data();
        for (int64_t r = 0; r < rows; ++r)
            std::copy(src + r * c, src + (r + 1) * c, out.data() + r * total + off);
        off += c;
    }
    std::vector<std::shared_ptr<TensorNode>> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    Tensor res = detail::make_result(
        {rows, total}, std::move(out), parts, [pnodes, rows, total](TensorNode& node) {
            int64_t off2 = 0;
            for (auto& pn : pnodes) {
                const int64_t c = pn->shape[1];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (int64_t r = 0; r < rows; ++r) {
                        const double* g = node.grad.data() + r * total + off2;
                        double* dst = pn->grad.data() + r * c;
                        for (int64_t j = 0; j < c; ++j) dst[j] += g[j];
                    }
                }
                off2 += c;
            }
        });
    detail::check_finite(res, "concat_last");
    return res;
}

// Columns [lo, hi) of a 2-D tensor.
inline Tensor slice_last(const Tensor& a, int64_t lo, int64_t hi) {
    TASTE_CHECK(a.shape().size() == 2 && 0 <= lo && lo < hi && hi <= a.shape()[1],
                Errc::shape_error, "slice_last [" + std::to_string(lo) + "," + std::to_string(hi) +
                                       ") of " + shape_str(a.shape()));
    const int64_t rows = a.shape()[0], cols = a.shape()[1], w = hi - lo;
    std::vector<double> out(static_cast<size_t>(rows * w));
    const double* src = a.values().data();
    for (int64_t r = 0; r < rows; ++r)
        std::copy(src + r * cols + lo, src + r * cols + hi, out.data() + r * w);
    auto an = a.node();
    Tensor res = detail::make_result(
        {rows, w}, std::move(out), {a}, [an, rows, cols, lo, w](TensorNode& node) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* g = node.grad.data() + r * w;
                double* dst = an->grad.data() + r * cols + lo;
                for (int64_t j = 0; j < w; ++j) dst[j] += g[j];
            }
        });
    detail::check_finite(res, "slice_last");
    return res;
}

// Embedding gather: stacked rows of `table` at `indices`. Backward is a
// scatter-add into the table grad.
inline Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& indices) {
    TASTE_CHECK(table.shape().size() == 2, Errc::shape_error,
                "gather_rows table " + shape_str(table.shape()));
    const int64_t card = table.shape()[0], d = table.shape()[1];
    const int64_t n = static_cast<int64_t>(indices.size());
    std::vector<double> out(static_cast<size_t>(n * d));
    const double* src = table.values().data();
    for (int64_t i = 0; i < n; ++i) {
        TASTE_CHECK(indices[i] >= 0 && indices[i] < card, Errc::shape_error,
                    "gather index " + std::to_string(indices[i]) + " out of " +
                        std::to_string(card));
        std::copy(src + indices[i] * d, src + (indices[i] + 1) * d, out.data() + i * d);
    }
    auto tn = table.node();
    Tensor res = detail::make_result(
        {n, d}, std::move(out), {table}, [tn, indices, d, n](TensorNode& node) {
            if (!tn->requires_grad) return;
            tn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double* g = node.grad.data() + i * d;
                double* dst = tn->grad.data() + indices[i] * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
    detail::check_finite(res, "gather_rows");
    return res;
}

// Bag gather: row b of the output is the sum of table rows at
// flat[offsets[b] .. offsets[b+1]). Covers one-hot (bag size 1) and
// multi-hot fields in a single primitive.
inline Tensor embedding_bag(const Tensor& table, const std::vector<int64_t>& flat,
                            const std::vector<int64_t>& offsets) {
    TASTE_CHECK(table.shape().size() == 2, Errc::shape_error,
                "embedding_bag table " + shape_str(table.shape()));
    TASTE_CHECK(!offsets.empty() && offsets.front() == 0 &&
                    offsets.back() == static_cast<int64_t>(flat.size()),
                Errc::shape_error, "embedding_bag offsets malformed");
    const int64_t card = table.shape()[0], d = table.shape()[1];
    const int64_t batch = static_cast<int64_t>(offsets.size()) - 1;
    std::vector<double> out(static_cast<size_t>(batch * d), 0.0);
    const double* src = table.values().data();
    for (int64_t b = 0; b < batch; ++b) {
        double* dst = out.data() + b * d;
        for (int64_t p = offsets[b]; p < offsets[b + 1]; ++p) {
            TASTE_CHECK(flat[p] >= 0 && flat[p] < card, Errc::shape_error,
                        "bag index " + std::to_string(flat[p]) + " out of " + std::to_string(card));
            const double* row = src + flat[p] * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += row[j];
        }
    }
    auto tn = table.node();
    Tensor res = detail::make_result(
        {batch, d}, std::move(out), {table}, [tn, flat, offsets, d, batch](TensorNode& node) {
            if (!tn->requires_grad) return;
            tn->ensure_grad();
            for (int64_t b = 0; b < batch; ++b) {
                const double* g = node.grad.data() + b * d;
                for (int64_t p = offsets[b]; p < offsets[b + 1]; ++p) {
                    double* dst = tn->grad.data() + flat[p] * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
                }
            }
        });
    detail::check_finite(res, "embedding_bag");
    return res;
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    auto an = a.node();
    Tensor res = detail::make_result(a.shape(), std::move(out), {a}, [an](TensorNode& node) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i)
            if (an->value[i] > 0.0) an->grad[i] += node.grad[i];
    });
    detail::check_finite(res, "relu");
    return res;
}

inline double sigmoid_scalar(double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(a.values()[i]);
    auto an = a.node();
    Tensor res = detail::make_result(a.shape(), std::move(out), {a}, [an](TensorNode& node) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const double s = node.value[i];
            an->grad[i] += node.grad[i] * s * (1.0 - s);
        }
    });
    detail::check_finite(res, "sigmoid");
    return res;
}

inline Tensor softmax_last(const Tensor& a) {
    TASTE_CHECK(!a.shape().empty(), Errc::shape_error, "softmax on empty shape");
    const int64_t cols = a.shape().back();
    const int64_t rows = a.size() / cols;
    std::vector<double> out(a.values().size());
    const double* src = a.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = src + r * cols;
        double* y = out.data() + r * cols;
        double mx = x[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (int64_t j = 0; j < cols; ++j) y[j] /= z;
    }
    auto an = a.node();
    Tensor res = detail::make_result(
        a.shape(), std::move(out), {a}, [an, rows, cols](TensorNode& node) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* s = node.value.data() + r * cols;
                const double* g = node.grad.data() + r * cols;
                double dot = 0.0;
                for (int64_t j = 0; j < cols; ++j) dot += g[j] * s[j];
                double* dst = an->grad.data() + r * cols;
                for (int64_t j = 0; j < cols; ++j) dst[j] += s[j] * (g[j] - dot);
            }
        });
    detail::check_finite(res, "softmax_last");
    return res;
}

// Elementwise binary cross-entropy on logits, numerically stable form:
// loss = max(z,0) - z*y + log(1 + exp(-|z|)).  Targets carry no gradient.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    TASTE_CHECK(logits.shape() == targets.shape(), Errc::shape_error,
                "bce_with_logits " + shape_str(logits.shape()) + " vs " +
                    shape_str(targets.shape()));
    std::vector<double> out(logits.values().size());
    const double* z = logits.values().data();
    const double* y = targets.values().data();
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = std::max(z[i], 0.0) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
    auto ln = logits.node(), tn = targets.node();
    Tensor res = detail::make_result(
        logits.shape(), std::move(out), {logits, targets}, [ln, tn](TensorNode& node) {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i)
                ln->grad[i] += node.grad[i] * (sigmoid_scalar(ln->value[i]) - tn->value[i]);
        });
    detail::check_finite(res, "bce_with_logits");
    return res;
}

// ---------------------------------------------------------------------------
// Reverse pass

inline void backward(const Tensor& loss) {
    TASTE_CHECK(loss.size() == 1, Errc::non_scalar_loss,
                "backward needs a scalar, got " + shape_str(loss.shape()));
    // Collect the reachable graph; creation ids give the topological order.
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<std::shared_ptr<TensorNode>> pending{loss.node()};
    std::unordered_set<const TensorNode*> seen;
    while (!pending.empty()) {
        auto cur = pending.back();
        pending.pop_back();
        if (!seen.insert(cur.get()).second) continue;
        nodes.push_back(cur);
        for (auto& p : cur->parents)
            if (!seen.count(p.get())) pending.push_back(p);
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });
    for (auto& n : nodes) n->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto& n : nodes)
        if (n->backprop) n->backprop(*n);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker.
//
// `f` rebuilds the scalar loss from the current parameter values. Returns the
// max relative error between reverse-mode and central differences.
inline double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                             double eps = 1e-5) {
    for (auto& p : params) p.zero_grad();
    Tensor loss = f();
    backward(loss);
    double max_err = 0.0;
    for (auto& p : params) {
        std::vector<double> analytic = p.grad();
        for (int64_t i = 0; i < p.size(); ++i) {
            const double orig = p.values()[static_cast<size_t>(i)];
            p.values()[static_cast<size_t>(i)] = orig + eps;
            const double up = f().item();
            p.values()[static_cast<size_t>(i)] = orig - eps;
            const double dn = f().item();
            p.values()[static_cast<size_t>(i)] = orig;
            const double numeric = (up - dn) / (2.0 * eps);
            const double a = analytic[static_cast<size_t>(i)];
            const double denom = std::max(1e-12, std::abs(a) + std::abs(numeric));
            max_err = std::max(max_err, std::abs(a - numeric) / denom);
        }
    }
    return max_err;
}

}  // namespace taste
