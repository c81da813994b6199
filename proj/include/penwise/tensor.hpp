#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "penwise/error.hpp"
#include "penwise/rng.hpp"

namespace penwise {

using Shape = std::vector<std::size_t>;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents that require it.
    std::function<void(const Node&)> backward;

    void ensure_grad()
    {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), 0.0);
        }
    }
};

inline bool& grad_mode()
{
    thread_local bool enabled = true;
    return enabled;
}

inline std::size_t numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape)
{
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out += (i ? "," : "") + std::to_string(shape[i]);
    }
    return out + "]";
}

/// Returns the parent's grad buffer, or nullptr if it does not take gradients.
inline double* grad_of(const std::shared_ptr<Node>& parent)
{
    if (!parent->requires_grad) {
        return nullptr;
    }
    parent->ensure_grad();
    return parent->grad.data();
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard() : m_prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = m_prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool m_prev;
};

/// Dense row-major array of doubles with optional reverse-mode gradient.
/// Copies share the underlying node; use clone() for a deep copy.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false)
    {
        std::vector<double> values(detail::numel(shape), 0.0);
        return from(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false)
    {
        if (detail::numel(shape) != values.size()) {
            throw InvalidArgument("tensor: shape " + detail::shape_str(shape) + " does not hold "
                                  + std::to_string(values.size()) + " values");
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    static Tensor vector(std::vector<double> values, bool requires_grad = false)
    {
        Shape shape{values.size()};
        return from(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = true)
    {
        std::vector<double> values(detail::numel(shape));
        for (auto& v : values) {
            v = rng.normal() * stddev;
        }
        return from(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor filled(Shape shape, double v, bool requires_grad = true)
    {
        std::vector<double> values(detail::numel(shape), v);
        return from(std::move(shape), std::move(values), requires_grad);
    }

    bool defined() const { return m_node != nullptr; }
    const Shape& shape() const { return m_node->shape; }
    std::size_t rank() const { return m_node->shape.size(); }
    std::size_t size() const { return m_node->value.size(); }
    std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape()[1] : size(); }

    std::span<const double> data() const { return m_node->value; }
    std::span<double> mutable_data() { return m_node->value; }
    double operator[](std::size_t i) const { return m_node->value[i]; }
    double at(std::size_t r, std::size_t c) const { return m_node->value[r * cols() + c]; }
    std::span<const double> row(std::size_t r) const { return data().subspan(r * cols(), cols()); }

    double item() const
    {
        if (size() != 1) {
            throw InvalidArgument("tensor: item() on tensor of shape " + detail::shape_str(shape()));
        }
        return m_node->value[0];
    }

    bool requires_grad() const { return m_node->requires_grad; }
    void set_requires_grad(bool v) { m_node->requires_grad = v; }

    bool has_grad() const { return m_node->grad.size() == m_node->value.size(); }
    std::span<const double> grad() const { return m_node->grad; }
    std::span<double> mutable_grad()
    {
        m_node->ensure_grad();
        return m_node->grad;
    }
    void zero_grad()
    {
        if (m_node->requires_grad) {
            m_node->grad.assign(m_node->value.size(), 0.0);
        }
    }

    /// Fresh leaf holding a copy of the values.
    Tensor clone(bool requires_grad = false) const { return from(shape(), m_node->value, requires_grad); }
    Tensor detach() const { return clone(false); }

    /// Populates grads of every tensor in the recorded graph that requires them.
    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return m_node; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : m_node(std::move(node)) {}

  private:
    std::shared_ptr<detail::Node> m_node;
};

using NamedTensor = std::pair<std::string, Tensor>;
using ParamList = std::vector<NamedTensor>;

namespace detail {

/// Builds a result tensor, wiring it into the graph when recording is on
/// and some parent requires gradients.
inline Tensor record(Shape shape, std::vector<double> value, std::initializer_list<Tensor> parents,
                     std::function<void(const Node&)> backward)
{
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (grad_mode()) {
        bool any = false;
        for (const auto& p : parents) {
            any = any || p.requires_grad();
        }
        if (any) {
            node->requires_grad = true;
            for (const auto& p : parents) {
                node->parents.push_back(p.node());
            }
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

inline Tensor record_many(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                          std::function<void(const Node&)> backward)
{
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (grad_mode()) {
        bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            for (const auto& p : parents) {
                node->parents.push_back(p.node());
            }
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

inline void require_rank2(const Tensor& t, const char* op)
{
    if (t.rank() != 2) {
        throw InvalidArgument(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.shape() != b.shape()) {
        throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs "
                              + shape_str(b.shape()));
    }
}

// out[m,n] (+)= a[m,k] * b[k,n]; each output sums over k in ascending order.
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate)
{
    if (!accumulate) {
        std::fill(out, out + m * n, 0.0);
    }
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m,n] (+)= a[m,k] * b[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate)
{
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = accumulate ? out[i * n + j] + acc : acc;
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
inline void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n)
{
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* orow = out + p * n;
            const double* brow = b + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace detail

inline void Tensor::backward() const
{
    if (size() != 1) {
        throw InvalidArgument("backward: loss must be a scalar, got shape " + detail::shape_str(shape()));
    }
    // Iterative post-order DFS gives a deterministic topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{m_node.get(), 0}};
    visited.insert(m_node.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto* node : order) {
        if (node->backward) {
            node->grad.assign(node->value.size(), 0.0);
        }
    }
    m_node->ensure_grad();
    m_node->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) {
            (*it)->backward(**it);
        }
    }
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m,k] * b[k,n]
inline Tensor matmul(const Tensor& a, const Tensor& b)
{
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw InvalidArgument("matmul: inner dimensions differ " + detail::shape_str(a.shape()) + " x "
                              + detail::shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
    return detail::record({m, n}, std::move(out), {a, b}, [m, k, n](const detail::Node& o) {
        const auto& pa = o.parents[0];
        const auto& pb = o.parents[1];
        if (double* ga = detail::grad_of(pa)) {
            detail::gemm_nt(o.grad.data(), pb->value.data(), ga, m, n, k, true);
        }
        if (double* gb = detail::grad_of(pb)) {
            detail::gemm_tn_acc(pa->value.data(), o.grad.data(), gb, m, k, n);
        }
    });
}

/// a[m,k] * b[n,k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b)
{
    detail::require_rank2(a, "matmul_nt");
    detail::require_rank2(b, "matmul_nt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw InvalidArgument("matmul_nt: inner dimensions differ " + detail::shape_str(a.shape()) + " x "
                              + detail::shape_str(b.shape()) + "^T");
    }
    std::vector<double> out(m * n);
    detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
    return detail::record({m, n}, std::move(out), {a, b}, [m, k, n](const detail::Node& o) {
        const auto& pa = o.parents[0];
        const auto& pb = o.parents[1];
        if (double* ga = detail::grad_of(pa)) {
            detail::gemm_nn(o.grad.data(), pb->value.data(), ga, m, n, k, true);
        }
        if (double* gb = detail::grad_of(pb)) {
            detail::gemm_tn_acc(o.grad.data(), pa->value.data(), gb, m, n, k);
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b)
{
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] + b[i];
    }
    return detail::record(a.shape(), std::move(out), {a, b}, [](const detail::Node& o) {
        for (const auto& p : o.parents) {
            if (double* g = detail::grad_of(p)) {
                for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    g[i] += o.grad[i];
                }
            }
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b)
{
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] - b[i];
    }
    return detail::record(a.shape(), std::move(out), {a, b}, [](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
        if (double* g = detail::grad_of(o.parents[1])) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] -= o.grad[i];
            }
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b)
{
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * b[i];
    }
    return detail::record(a.shape(), std::move(out), {a, b}, [](const detail::Node& o) {
        const auto& pa = o.parents[0];
        const auto& pb = o.parents[1];
        if (double* g = detail::grad_of(pa)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * pb->value[i];
            }
        }
        if (double* g = detail::grad_of(pb)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * pa->value[i];
            }
        }
    });
}

inline Tensor scale(const Tensor& a, double c)
{
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * c;
    }
    return detail::record(a.shape(), std::move(out), {a}, [c](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * c;
            }
        }
    });
}

/// a[m,n] + bias[n] broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& bias)
{
    detail::require_rank2(a, "add_row");
    const std::size_t m = a.rows(), n = a.cols();
    if (bias.size() != n) {
        throw InvalidArgument("add_row: bias of size " + std::to_string(bias.size()) + " for "
                              + std::to_string(n) + " columns");
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = a[i * n + j] + bias[j];
        }
    }
    return detail::record(a.shape(), std::move(out), {a, bias}, [m, n](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
        if (double* g = detail::grad_of(o.parents[1])) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    g[j] += o.grad[i * n + j];
                }
            }
        }
    });
}

namespace detail {

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv)
{
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(a[i]);
    }
    return record(a.shape(), std::move(out), {a}, [deriv](const Node& o) {
        const auto& p = o.parents[0];
        if (double* g = grad_of(p)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i] * deriv(p->value[i], o.value[i]);
            }
        }
    });
}

}  // namespace detail

/// Tanh approximation of GELU; smooth everywhere, which keeps
/// finite-difference checks meaningful.
inline Tensor gelu(const Tensor& a)
{
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return detail::unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
        [](double x, double) {
            const double t = std::tanh(c * (x + 0.044715 * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
        });
}

inline Tensor relu(const Tensor& a)
{
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a)
{
    return detail::unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a)
{
    return detail::unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// Reductions and indexing

inline Tensor sum(const Tensor& a)
{
    double total = 0.0;
    for (double v : a.data()) {
        total += v;
    }
    return detail::record({}, {total}, {a}, [](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            const std::size_t n = o.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) {
                g[i] += o.grad[0];
            }
        }
    });
}

inline Tensor mean(const Tensor& a)
{
    if (a.size() == 0) {
        throw InvalidArgument("mean: empty tensor");
    }
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Adds scalars (or equal-shaped tensors) in order; empty input is an error.
inline Tensor add_all(const std::vector<Tensor>& terms)
{
    if (terms.empty()) {
        throw InvalidArgument("add_all: no terms");
    }
    Tensor acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) {
        acc = add(acc, terms[i]);
    }
    return acc;
}

/// Gathers flat elements: out[i] = a.flat[index[i]].
inline Tensor pick(const Tensor& a, std::vector<std::size_t> index)
{
    std::vector<double> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= a.size()) {
            throw InvalidArgument("pick: index " + std::to_string(index[i]) + " out of range");
        }
        out[i] = a[index[i]];
    }
    Shape shape{index.size()};
    return detail::record(std::move(shape), std::move(out), {a}, [index = std::move(index)](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < index.size(); ++i) {
                g[index[i]] += o.grad[i];
            }
        }
    });
}

/// out[i] = a[i, cols[i]]
inline Tensor pick_per_row(const Tensor& a, const std::vector<std::size_t>& cols)
{
    detail::require_rank2(a, "pick_per_row");
    if (cols.size() != a.rows()) {
        throw InvalidArgument("pick_per_row: " + std::to_string(cols.size()) + " indices for "
                              + std::to_string(a.rows()) + " rows");
    }
    std::vector<std::size_t> flat(cols.size());
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] >= a.cols()) {
            throw InvalidArgument("pick_per_row: column " + std::to_string(cols[i]) + " out of range");
        }
        flat[i] = i * a.cols() + cols[i];
    }
    return pick(a, std::move(flat));
}

inline Tensor reshape(const Tensor& a, Shape shape)
{
    if (detail::numel(shape) != a.size()) {
        throw InvalidArgument("reshape: " + detail::shape_str(a.shape()) + " to " + detail::shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return detail::record(std::move(shape), std::move(out), {a}, [](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[i] += o.grad[i];
            }
        }
    });
}

/// Rows of a lookup table: out[i] = table[ids[i]].
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids)
{
    detail::require_rank2(table, "gather_rows");
    const std::size_t d = table.cols();
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= table.rows()) {
            throw InvalidArgument("gather_rows: id " + std::to_string(ids[i]) + " outside table of "
                                  + std::to_string(table.rows()) + " rows");
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return detail::record({ids.size(), d}, std::move(out), {table}, [ids, d](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < ids.size(); ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    g[ids[i] * d + j] += o.grad[i * d + j];
                }
            }
        }
    });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count)
{
    detail::require_rank2(a, "slice_rows");
    if (start + count > a.rows()) {
        throw InvalidArgument("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count)
                              + ") out of " + std::to_string(a.rows()));
    }
    const std::size_t n = a.cols();
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(start * n),
                            a.data().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
    return detail::record({count, n}, std::move(out), {a}, [start, n](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                g[start * n + i] += o.grad[i];
            }
        }
    });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t width)
{
    detail::require_rank2(a, "slice_cols");
    if (start + width > a.cols()) {
        throw InvalidArgument("slice_cols: columns out of range");
    }
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * width);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
            out[i * width + j] = a[i * n + start + j];
        }
    }
    return detail::record({m, width}, std::move(out), {a}, [m, n, start, width](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < width; ++j) {
                    g[i * n + start + j] += o.grad[i * width + j];
                }
            }
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts)
{
    if (parts.empty()) {
        throw InvalidArgument("concat_cols: no parts");
    }
    const std::size_t m = parts.front().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != m) {
            throw InvalidArgument("concat_cols: row counts differ");
        }
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<double> out(m * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < widths[k]; ++j) {
                out[i * total + offset + j] = parts[k][i * widths[k] + j];
            }
        }
        offset += widths[k];
    }
    return detail::record_many({m, total}, std::move(out), parts, [m, total, widths](const detail::Node& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (double* g = detail::grad_of(o.parents[k])) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < widths[k]; ++j) {
                        g[i * widths[k] + j] += o.grad[i * total + off + j];
                    }
                }
            }
            off += widths[k];
        }
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts)
{
    if (parts.empty()) {
        throw InvalidArgument("concat_rows: no parts");
    }
    const std::size_t n = parts.front().cols();
    std::vector<double> out;
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.cols() != n) {
            throw InvalidArgument("concat_rows: column counts differ");
        }
        out.insert(out.end(), p.data().begin(), p.data().end());
        sizes.push_back(p.size());
    }
    const std::size_t m = out.size() / n;
    return detail::record_many({m, n}, std::move(out), parts, [sizes](const detail::Node& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            if (double* g = detail::grad_of(o.parents[k])) {
                for (std::size_t i = 0; i < sizes[k]; ++i) {
                    g[i] += o.grad[off + i];
                }
            }
            off += sizes[k];
        }
    });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Row-wise softmax with max subtraction. With a causal offset, row i only
/// sees columns j <= i + offset; hidden entries are exactly zero.
inline Tensor softmax_rows(const Tensor& a, std::optional<std::size_t> causal_offset = std::nullopt)
{
    detail::require_rank2(a, "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t width = causal_offset ? std::min(n, i + *causal_offset + 1) : n;
        const double* x = a.data().data() + i * n;
        double* y = out.data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < width; ++j) {
            mx = std::max(mx, x[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < width; ++j) {
            y[j] /= z;
        }
    }
    return detail::record(a.shape(), std::move(out), {a}, [m, n](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* y = o.value.data() + i * n;
                const double* gy = o.grad.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += y[j] * gy[j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    g[i * n + j] += y[j] * (gy[j] - dot);
                }
            }
        }
    });
}

inline Tensor log_softmax_rows(const Tensor& a)
{
    detail::require_rank2(a, "log_softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = a.data().data() + i * n;
        double mx = *std::max_element(x, x + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            z += std::exp(x[j] - mx);
        }
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = x[j] - lse;
        }
    }
    return detail::record(a.shape(), std::move(out), {a}, [m, n](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < m; ++i) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    gsum += o.grad[i * n + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    g[i * n + j] += o.grad[i * n + j] - std::exp(o.value[i * n + j]) * gsum;
                }
            }
        }
    });
}

inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5)
{
    detail::require_rank2(x, "layer_norm_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n) {
        throw InvalidArgument("layer_norm_rows: gain/bias width differs from input");
    }
    std::vector<double> out(m * n);
    std::vector<double> xhat(m * n);
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* r = x.data().data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mu += r[j];
        }
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            var += (r[j] - mu) * (r[j] - mu);
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (r[j] - mu) * inv_std[i];
            out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
        }
    }
    return detail::record(x.shape(), std::move(out), {x, gain, bias},
                          [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](const detail::Node& o) {
                              const auto& pg = o.parents[1];
                              if (double* gx = detail::grad_of(o.parents[0])) {
                                  std::vector<double> dxhat(n);
                                  for (std::size_t i = 0; i < m; ++i) {
                                      double mean_d = 0.0, mean_dx = 0.0;
                                      for (std::size_t j = 0; j < n; ++j) {
                                          dxhat[j] = o.grad[i * n + j] * pg->value[j];
                                          mean_d += dxhat[j];
                                          mean_dx += dxhat[j] * xhat[i * n + j];
                                      }
                                      mean_d /= static_cast<double>(n);
                                      mean_dx /= static_cast<double>(n);
                                      for (std::size_t j = 0; j < n; ++j) {
                                          gx[i * n + j]
                                              += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                                      }
                                  }
                              }
                              if (double* gg = detail::grad_of(pg)) {
                                  for (std::size_t i = 0; i < m; ++i) {
                                      for (std::size_t j = 0; j < n; ++j) {
                                          gg[j] += o.grad[i * n + j] * xhat[i * n + j];
                                      }
                                  }
                              }
                              if (double* gb = detail::grad_of(o.parents[2])) {
                                  for (std::size_t i = 0; i < m; ++i) {
                                      for (std::size_t j = 0; j < n; ++j) {
                                          gb[j] += o.grad[i * n + j];
                                      }
                                  }
                              }
                          });
}

/// Scales each row to unit Euclidean norm.
inline Tensor normalize_rows(const Tensor& a)
{
    detail::require_rank2(a, "normalize_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            ss += a[i * n + j] * a[i * n + j];
        }
        norms[i] = std::sqrt(ss);
        if (!(norms[i] > 0.0)) {
            throw DegenerateInput("normalize_rows: row " + std::to_string(i) + " has zero norm");
        }
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = a[i * n + j] / norms[i];
        }
    }
    return detail::record(a.shape(), std::move(out), {a}, [m, n, norms = std::move(norms)](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += o.value[i * n + j] * o.grad[i * n + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    g[i * n + j] += (o.grad[i * n + j] - o.value[i * n + j] * dot) / norms[i];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Similarity

/// Plain cosine similarity of two equal-length vectors.
inline double cosine(std::span<const double> u, std::span<const double> v)
{
    if (u.size() != v.size()) {
        throw InvalidArgument("cosine: lengths " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
    }
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    if (!(uu > 0.0) || !(vv > 0.0)) {
        throw DegenerateInput("cosine: zero-norm vector");
    }
    return uv / (std::sqrt(uu) * std::sqrt(vv));
}

/// Differentiable cosine similarity of two same-size tensors (flattened).
inline Tensor cosine(const Tensor& u, const Tensor& v)
{
    if (u.size() != v.size()) {
        throw InvalidArgument("cosine: sizes differ " + detail::shape_str(u.shape()) + " vs "
                              + detail::shape_str(v.shape()));
    }
    const double c = cosine(u.data(), v.data());
    double uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    return detail::record({}, {c}, {u, v}, [c, nu, nv](const detail::Node& o) {
        const auto& pu = o.parents[0];
        const auto& pv = o.parents[1];
        const double go = o.grad[0];
        const std::size_t n = pu->value.size();
        if (double* g = detail::grad_of(pu)) {
            for (std::size_t i = 0; i < n; ++i) {
                g[i] += go * (pv->value[i] / (nu * nv) - c * pu->value[i] / (nu * nu));
            }
        }
        if (double* g = detail::grad_of(pv)) {
            for (std::size_t i = 0; i < n; ++i) {
                g[i] += go * (pu->value[i] / (nu * nv) - c * pv->value[i] / (nv * nv));
            }
        }
    });
}

/// Mean over ordered pairs i != j of max{0, rho - 1 + min(S_ij, 1)} for a
/// square similarity matrix S. Self-similarity is taken to be exactly 1, and
/// S_ij is clamped at 1 so rounding above 1 never opens the hinge.
inline Tensor pairwise_hinge_mean(const Tensor& sim, double rho)
{
    detail::require_rank2(sim, "pairwise_hinge_mean");
    const std::size_t t = sim.rows();
    if (sim.cols() != t || t < 2) {
        throw InvalidArgument("pairwise_hinge_mean: need a square matrix with at least 2 rows");
    }
    const double norm = 1.0 / (static_cast<double>(t) * static_cast<double>(t - 1));
    double total = 0.0;
    std::vector<double> active(t * t, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
            if (i == j) {
                continue;
            }
            const double s = sim[i * t + j];
            const double margin = rho - 1.0 + std::min(s, 1.0);
            if (margin > 0.0) {
                total += margin;
                if (s < 1.0) {
                    active[i * t + j] = norm;
                }
            }
        }
    }
    return detail::record({}, {total * norm}, {sim}, [active = std::move(active)](const detail::Node& o) {
        if (double* g = detail::grad_of(o.parents[0])) {
            for (std::size_t i = 0; i < active.size(); ++i) {
                g[i] += o.grad[0] * active[i];
            }
        }
    });
}

/// Elementwise focal negative log-likelihood from log-probabilities:
/// out = -(1 - p)^gamma * log p with p = exp(logp).
inline Tensor focal_nll(const Tensor& logp, double gamma)
{
    if (gamma < 0.0) {
        throw InvalidArgument("focal_nll: gamma must be nonnegative");
    }
    std::vector<double> out(logp.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double q = std::max(0.0, -std::expm1(logp[i]));
        out[i] = -std::pow(q, gamma) * logp[i];
    }
    return detail::record(logp.shape(), std::move(out), {logp}, [gamma](const detail::Node& o) {
        const auto& p = o.parents[0];
        if (double* g = detail::grad_of(p)) {
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                const double lp = p->value[i];
                const double q = std::max(0.0, -std::expm1(lp));
                double d = -std::pow(q, gamma);
                if (gamma != 0.0 && q > 0.0) {
                    d += gamma * std::pow(q, gamma - 1.0) * std::exp(lp) * lp;
                }
                g[i] += o.grad[0 + i] * d;
            }
        }
    });
}

}  // namespace penwise
