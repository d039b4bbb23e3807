#pragma once

// Dense double-precision tensors recorded on a reverse-mode differentiation
// tape. The op set is exactly what the network needs: matrix products,
// softmax, layernorm, a few elementwise maps, row/column splicing, and an
// SGD-with-momentum step. No broadcasting beyond row vectors, no views.
//
// Recording model: a Graph is made active with a GraphScope; while active,
// every op whose inputs touch the gradient path appends one node (op id,
// input node ids, backward closure). Nodes are appended in forward order, so
// the list is topologically sorted and backward() is a single reverse sweep.
// Leaf tensors (requires_grad) accumulate into a persistent .grad buffer
// across backward() calls until clear_grads() is invoked; intermediate
// gradients live in per-sweep scratch storage, so calling backward() twice
// adds exactly two full contributions.
//
// Tensors without a graph attachment are immutable value types and safe for
// concurrent reads; the active graph is thread-local, so independent forward
// evaluations on separate threads never share a tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stvq/errors.hpp"

namespace stvq {

class Graph;

namespace detail {

struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad; // leaves only; lazily sized
    bool requires_grad = false;
    Graph* graph = nullptr; // tape this value was recorded on
    int node = -1;          // node id within that tape
};

using TensorDataPtr = std::shared_ptr<TensorData>;

inline Graph*& active_graph_slot() {
    thread_local Graph* g = nullptr;
    return g;
}

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// Multiply-accumulate counter for the analytic cost estimator. Only the
// matrix-product kernels below report into it; enable around a forward pass
// to measure exactly the events the closed-form count models.
struct MacCounter {
    static bool& enabled() {
        thread_local bool on = false;
        return on;
    }
    static unsigned long long& count() {
        thread_local unsigned long long c = 0;
        return c;
    }
};

struct MacCountScope {
    MacCountScope() {
        MacCounter::enabled() = true;
        MacCounter::count() = 0;
    }
    ~MacCountScope() { MacCounter::enabled() = false; }
    unsigned long long total() const { return MacCounter::count(); }
};

// C[m x n] = A[m x k] * B[k x n]   (+= when accumulate)
inline void mm_nn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (MacCounter::enabled()) MacCounter::count() += static_cast<unsigned long long>(m) * k * n;
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] = A[m x k] * B[n x k]^T
inline void mm_nt(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (MacCounter::enabled()) MacCounter::count() += static_cast<unsigned long long>(m) * k * n;
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C[k x n] = A[m x k]^T * B[m x n]
inline void mm_tn(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (MacCounter::enabled()) MacCounter::count() += static_cast<unsigned long long>(m) * k * n;
    if (!accumulate) std::fill(c, c + k * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            double* crow = c + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0, bool requires_grad = false)
        : d_(std::make_shared<detail::TensorData>()) {
        d_->shape = std::move(shape);
        d_->data.assign(detail::shape_product(d_->shape), fill);
        d_->requires_grad = requires_grad;
    }

    static Tensor from(std::vector<double> data, std::vector<std::size_t> shape,
                       bool requires_grad = false) {
        if (detail::shape_product(shape) != data.size())
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not fill shape " + detail::shape_str(shape));
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->data = std::move(data);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({v}, {1}, requires_grad);
    }

    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->data.size(); }
    std::size_t rows() const { return d_->shape.empty() ? 0 : d_->shape[0]; }
    std::size_t cols() const { return d_->shape.size() < 2 ? (d_->shape.empty() ? 0 : 1) : d_->shape[1]; }

    double* data() { return d_->data.data(); }
    const double* data() const { return d_->data.data(); }
    std::vector<double>& vec() { return d_->data; }
    const std::vector<double>& vec() const { return d_->data; }

    double at(std::size_t i) const { return d_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return d_->data[r * cols() + c]; }

    double value() const {
        if (size() != 1) throw ContractError("value(): tensor is not scalar, shape " + detail::shape_str(shape()));
        return d_->data[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        d_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<double>& grad() const { return d_->grad; }
    std::vector<double>& mutable_grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->data.size(), 0.0);
        return d_->grad;
    }
    void clear_grad() { d_->grad.clear(); }

    // Graph bookkeeping (used by ops and tests).
    Graph* graph() const { return d_->graph; }
    int node() const { return d_->node; }

    detail::TensorDataPtr ptr() const { return d_; }

private:
    detail::TensorDataPtr d_;
};

// Reverse-mode tape. Appended in forward order; every node's inputs precede
// it, which backward() relies on.
class Graph {
public:
    struct Node {
        const char* op;
        std::vector<int> inputs; // node ids; -1 marks a leaf or constant
        detail::TensorDataPtr output;
        std::function<void(Graph&)> backward;
    };

    int record(const char* op, std::vector<int> inputs, const detail::TensorDataPtr& output,
               std::function<void(Graph&)> backward) {
        int id = static_cast<int>(nodes_.size());
        output->graph = this;
        output->node = id;
        nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
        return id;
    }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_[i]; }

    // Reverse sweep from the loss node; each node is visited exactly once.
    void backward(const Tensor& loss) {
        if (loss.size() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                detail::shape_str(loss.shape()));
        const auto& td = *loss.ptr();
        if (td.graph != this || td.node < 0)
            throw ContractError("backward: loss tensor was not recorded on this graph");
        scratch_.assign(nodes_.size(), {});
        scratch_[static_cast<std::size_t>(td.node)] = {1.0};
        for (int i = td.node; i >= 0; --i) {
            if (!scratch_[static_cast<std::size_t>(i)].empty()) nodes_[static_cast<std::size_t>(i)].backward(*this);
        }
        scratch_.clear();
    }

    // --- used by backward closures ---

    // Gradient flowing into a node's output; null when the node is unreachable
    // from the loss.
    const std::vector<double>* output_grad(const detail::TensorData& out) const {
        if (out.node < 0 || static_cast<std::size_t>(out.node) >= scratch_.size()) return nullptr;
        const auto& g = scratch_[static_cast<std::size_t>(out.node)];
        return g.empty() ? nullptr : &g;
    }

    // Routes a gradient contribution to per-sweep scratch (intermediates) or
    // the persistent leaf buffer.
    void accumulate(detail::TensorData& t, const double* g, std::size_t n) {
        if (t.graph == this && t.node >= 0) {
            auto& dst = scratch_[static_cast<std::size_t>(t.node)];
            if (dst.empty()) dst.assign(t.data.size(), 0.0);
            for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
        } else if (t.requires_grad) {
            if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
            for (std::size_t i = 0; i < n; ++i) t.grad[i] += g[i];
        }
    }

private:
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> scratch_;
};

// RAII activation of a tape on this thread.
class GraphScope {
public:
    explicit GraphScope(Graph& g) : prev_(detail::active_graph_slot()) {
        detail::active_graph_slot() = &g;
    }
    ~GraphScope() { detail::active_graph_slot() = prev_; }
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

private:
    Graph* prev_;
};

namespace detail {

inline Graph* active_graph() { return active_graph_slot(); }

// A tensor participates in the gradient path if it is a leaf that wants
// gradients or was itself produced on the active tape.
inline bool tracked(const Tensor& t, Graph* g) {
    return t.requires_grad() || (t.graph() == g && t.node() >= 0);
}

inline int node_id(const Tensor& t, Graph* g) {
    return (t.graph() == g && t.node() >= 0) ? t.node() : -1;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expects rank-2 operands, got " + detail::shape_str(a.shape()) +
                         " and " + detail::shape_str(b.shape()));
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner extents disagree: " + detail::shape_str(a.shape()) +
                         " * " + detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    detail::mm_nn(a.data(), b.data(), out.data(), m, k, n, false);

    Graph* g = detail::active_graph();
    if (g && (detail::tracked(a, g) || detail::tracked(b, g))) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        const bool ga = detail::tracked(a, g), gb = detail::tracked(b, g);
        g->record("matmul", {detail::node_id(a, g), detail::node_id(b, g)}, od,
                  [=](Graph& gr) {
                      const auto* go = gr.output_grad(*od);
                      if (!go) return;
                      if (ga) {
                          std::vector<double> da(m * k);
                          detail::mm_nt(go->data(), bd->data.data(), da.data(), m, n, k, false);
                          gr.accumulate(*ad, da.data(), da.size());
                      }
                      if (gb) {
                          std::vector<double> db(k * n);
                          detail::mm_tn(ad->data.data(), go->data(), db.data(), m, k, n, false);
                          gr.accumulate(*bd, db.data(), db.size());
                      }
                  });
    }
    return out;
}

// a * b^T; the natural form for attention scores (rows of a against rows of b).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw ShapeError("matmul_nt: incompatible shapes: " + detail::shape_str(a.shape()) +
                         " * " + detail::shape_str(b.shape()) + "^T");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out({m, n});
    detail::mm_nt(a.data(), b.data(), out.data(), m, k, n, false);

    Graph* g = detail::active_graph();
    if (g && (detail::tracked(a, g) || detail::tracked(b, g))) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        const bool ga = detail::tracked(a, g), gb = detail::tracked(b, g);
        g->record("matmul_nt", {detail::node_id(a, g), detail::node_id(b, g)}, od,
                  [=](Graph& gr) {
                      const auto* go = gr.output_grad(*od);
                      if (!go) return;
                      if (ga) { // dA = dC * B
                          std::vector<double> da(m * k);
                          detail::mm_nn(go->data(), bd->data.data(), da.data(), m, n, k, false);
                          gr.accumulate(*ad, da.data(), da.size());
                      }
                      if (gb) { // dB = dC^T * A
                          std::vector<double> db(n * k);
                          detail::mm_tn(go->data(), ad->data.data(), db.data(), m, n, k, false);
                          gr.accumulate(*bd, db.data(), db.size());
                      }
                  });
    }
    return out;
}

// Softmax along `axis` (0 or 1 for matrices, 0 for vectors), guarded by
// max subtraction so arbitrarily large finite inputs stay finite.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (x.rank() < 1 || x.rank() > 2 || axis >= x.rank())
        throw IndexError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         detail::shape_str(x.shape()));
    const std::size_t nrows = x.rank() == 2 ? x.rows() : 1;
    const std::size_t ncols = x.rank() == 2 ? x.cols() : x.size();
    // normalize over columns (axis==1 or vector); axis==0 walks columns instead
    const bool over_cols = (x.rank() == 1) || axis == 1;
    const std::size_t slices = over_cols ? nrows : ncols;
    const std::size_t len = over_cols ? ncols : nrows;
    const std::size_t stride = over_cols ? 1 : ncols;

    Tensor out(x.shape());
    for (std::size_t s = 0; s < slices; ++s) {
        const double* src = x.data() + (over_cols ? s * ncols : s);
        double* dst = out.data() + (over_cols ? s * ncols : s);
        double mx = src[0];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, src[i * stride]);
        double sum = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            double e = std::exp(src[i * stride] - mx);
            dst[i * stride] = e;
            sum += e;
        }
        for (std::size_t i = 0; i < len; ++i) dst[i * stride] /= sum;
    }

    Graph* g = detail::active_graph();
    if (g && detail::tracked(x, g)) {
        auto xd = x.ptr(), od = out.ptr();
        g->record("softmax", {detail::node_id(x, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> dx(od->data.size());
            for (std::size_t s = 0; s < slices; ++s) {
                const std::size_t base = over_cols ? s * ncols : s;
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i)
                    dot += (*go)[base + i * stride] * od->data[base + i * stride];
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t idx = base + i * stride;
                    dx[idx] = od->data[idx] * ((*go)[idx] - dot);
                }
            }
            gr.accumulate(*xd, dx.data(), dx.size());
        });
    }
    return out;
}

// Row-wise layer normalization with affine output: per row, subtract the mean,
// divide by sqrt(biased variance + eps), then gamma * xhat + beta.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) throw ConfigError("layernorm: eps must be positive");
    const std::size_t nrows = x.rank() == 2 ? x.rows() : 1;
    const std::size_t d = x.rank() == 2 ? x.cols() : x.size();
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("layernorm: affine params " + detail::shape_str(gamma.shape()) + "/" +
                         detail::shape_str(beta.shape()) + " do not match extent " + std::to_string(d));

    Tensor out(x.shape());
    std::vector<double> inv_sigma(nrows), xhat(nrows * d);
    for (std::size_t r = 0; r < nrows; ++r) {
        const double* src = x.data() + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += src[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double c = src[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        double* dst = out.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = (src[i] - mean) * is;
            xhat[r * d + i] = xh;
            dst[i] = gamma.at(i) * xh + beta.at(i);
        }
    }

    Graph* g = detail::active_graph();
    if (g && (detail::tracked(x, g) || detail::tracked(gamma, g) || detail::tracked(beta, g))) {
        auto xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), od = out.ptr();
        const bool gx = detail::tracked(x, g), gg = detail::tracked(gamma, g), gb = detail::tracked(beta, g);
        auto saved_inv = std::make_shared<std::vector<double>>(std::move(inv_sigma));
        auto saved_xhat = std::make_shared<std::vector<double>>(std::move(xhat));
        g->record("layernorm",
                  {detail::node_id(x, g), detail::node_id(gamma, g), detail::node_id(beta, g)}, od,
                  [=](Graph& gr) {
                      const auto* go = gr.output_grad(*od);
                      if (!go) return;
                      if (gg || gb) {
                          std::vector<double> dgamma(d, 0.0), dbeta(d, 0.0);
                          for (std::size_t r = 0; r < nrows; ++r)
                              for (std::size_t i = 0; i < d; ++i) {
                                  dgamma[i] += (*go)[r * d + i] * (*saved_xhat)[r * d + i];
                                  dbeta[i] += (*go)[r * d + i];
                              }
                          if (gg) gr.accumulate(*gd, dgamma.data(), d);
                          if (gb) gr.accumulate(*bd, dbeta.data(), d);
                      }
                      if (gx) {
                          std::vector<double> dx(nrows * d);
                          for (std::size_t r = 0; r < nrows; ++r) {
                              double sum_dy = 0.0, sum_dy_xhat = 0.0;
                              for (std::size_t i = 0; i < d; ++i) {
                                  const double dy = (*go)[r * d + i] * gd->data[i];
                                  sum_dy += dy;
                                  sum_dy_xhat += dy * (*saved_xhat)[r * d + i];
                              }
                              const double inv_d = 1.0 / static_cast<double>(d);
                              for (std::size_t i = 0; i < d; ++i) {
                                  const double dy = (*go)[r * d + i] * gd->data[i];
                                  dx[r * d + i] = (*saved_inv)[r] *
                                      (dy - sum_dy * inv_d - (*saved_xhat)[r * d + i] * sum_dy_xhat * inv_d);
                              }
                          }
                          gr.accumulate(*xd, dx.data(), dx.size());
                      }
                  });
    }
    return out;
}

// add: same-shape, or b a length-cols(a) vector broadcast over every row of a.
inline Tensor add(const Tensor& a, const Tensor& b) {
    const bool rowwise = (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols());
    if (!rowwise) detail::check_same_shape("add", a, b);

    Tensor out(a.shape());
    const std::size_t n = a.size(), c = a.cols();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + (rowwise ? b.data()[i % c] : b.data()[i]);

    Graph* g = detail::active_graph();
    if (g && (detail::tracked(a, g) || detail::tracked(b, g))) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        const bool ga = detail::tracked(a, g), gb = detail::tracked(b, g);
        g->record("add", {detail::node_id(a, g), detail::node_id(b, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            if (ga) gr.accumulate(*ad, go->data(), go->size());
            if (gb) {
                if (rowwise) {
                    std::vector<double> db(c, 0.0);
                    for (std::size_t i = 0; i < n; ++i) db[i % c] += (*go)[i];
                    gr.accumulate(*bd, db.data(), c);
                } else {
                    gr.accumulate(*bd, go->data(), go->size());
                }
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];

    Graph* g = detail::active_graph();
    if (g && (detail::tracked(a, g) || detail::tracked(b, g))) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        const bool ga = detail::tracked(a, g), gb = detail::tracked(b, g);
        g->record("sub", {detail::node_id(a, g), detail::node_id(b, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            if (ga) gr.accumulate(*ad, go->data(), go->size());
            if (gb) {
                std::vector<double> db(go->size());
                for (std::size_t i = 0; i < db.size(); ++i) db[i] = -(*go)[i];
                gr.accumulate(*bd, db.data(), db.size());
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];

    Graph* g = detail::active_graph();
    if (g && (detail::tracked(a, g) || detail::tracked(b, g))) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        const bool ga = detail::tracked(a, g), gb = detail::tracked(b, g);
        g->record("mul", {detail::node_id(a, g), detail::node_id(b, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> d(go->size());
            if (ga) {
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = (*go)[i] * bd->data[i];
                gr.accumulate(*ad, d.data(), d.size());
            }
            if (gb) {
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = (*go)[i] * ad->data[i];
                gr.accumulate(*bd, d.data(), d.size());
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double s) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * s;

    Graph* g = detail::active_graph();
    if (g && detail::tracked(x, g)) {
        auto xd = x.ptr(), od = out.ptr();
        g->record("scale", {detail::node_id(x, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> dx(go->size());
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = (*go)[i] * s;
            gr.accumulate(*xd, dx.data(), dx.size());
        });
    }
    return out;
}

// GELU, tanh form:
//   gelu(x) = 0.5 x (1 + tanh(c1 (x + c2 x^3))),  c1 = sqrt(2/pi), c2 = 0.044715
inline constexpr double kGeluC1 = 0.7978845608028654;
inline constexpr double kGeluC2 = 0.044715;

inline double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC1 * (x + kGeluC2 * x * x * x)));
}

inline double gelu_derivative(double x) {
    const double u = kGeluC1 * (x + kGeluC2 * x * x * x);
    const double t = std::tanh(u);
    const double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kGeluC1 * (1.0 + 3.0 * kGeluC2 * x * x);
}

inline Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = gelu_value(x.data()[i]);

    Graph* g = detail::active_graph();
    if (g && detail::tracked(x, g)) {
        auto xd = x.ptr(), od = out.ptr();
        g->record("gelu", {detail::node_id(x, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> dx(go->size());
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = (*go)[i] * gelu_derivative(xd->data[i]);
            gr.accumulate(*xd, dx.data(), dx.size());
        });
    }
    return out;
}

// -(a - b)^2 elementwise; a may be a scalar broadcast against b.
inline Tensor neg_sq_dist(const Tensor& a, const Tensor& b) {
    const bool a_scalar = (a.size() == 1 && b.size() > 1);
    if (!a_scalar) detail::check_same_shape("neg_sq_dist", a, b);

    Tensor out(b.shape());
    for (std::size_t i = 0; i < b.size(); ++i) {
        const double diff = (a_scalar ? a.data()[0] : a.data()[i]) - b.data()[i];
        out.data()[i] = -diff * diff;
    }

    Graph* g = detail::active_graph();
    if (g && (detail::tracked(a, g) || detail::tracked(b, g))) {
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        const bool ga = detail::tracked(a, g), gb = detail::tracked(b, g);
        g->record("neg_sq_dist", {detail::node_id(a, g), detail::node_id(b, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            if (ga) {
                if (a_scalar) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < go->size(); ++i)
                        acc += (*go)[i] * -2.0 * (ad->data[0] - bd->data[i]);
                    gr.accumulate(*ad, &acc, 1);
                } else {
                    std::vector<double> da(go->size());
                    for (std::size_t i = 0; i < da.size(); ++i)
                        da[i] = (*go)[i] * -2.0 * (ad->data[i] - bd->data[i]);
                    gr.accumulate(*ad, da.data(), da.size());
                }
            }
            if (gb) {
                std::vector<double> db(go->size());
                for (std::size_t i = 0; i < db.size(); ++i) {
                    const double av = a_scalar ? ad->data[0] : ad->data[i];
                    db[i] = (*go)[i] * 2.0 * (av - bd->data[i]);
                }
                gr.accumulate(*bd, db.data(), db.size());
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
    Tensor out = Tensor::scalar(s);

    Graph* g = detail::active_graph();
    if (g && detail::tracked(x, g)) {
        auto xd = x.ptr(), od = out.ptr();
        g->record("sum", {detail::node_id(x, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> dx(xd->data.size(), (*go)[0]);
            gr.accumulate(*xd, dx.data(), dx.size());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row/column splicing; gradients route back into the source slices.
// ---------------------------------------------------------------------------

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.cols() != c)
            throw ShapeError("concat_rows: trailing extents disagree: " +
                             detail::shape_str(parts[0].shape()) + " vs " + detail::shape_str(p.shape()));
        total += p.rows();
    }
    Tensor out({total, c});
    std::size_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + row * c);
        row += p.rows();
    }

    Graph* g = detail::active_graph();
    bool any = false;
    if (g)
        for (const auto& p : parts)
            if (detail::tracked(p, g)) any = true;
    if (g && any) {
        std::vector<detail::TensorDataPtr> srcs;
        std::vector<int> ids;
        std::vector<bool> want;
        for (const auto& p : parts) {
            srcs.push_back(p.ptr());
            ids.push_back(detail::node_id(p, g));
            want.push_back(detail::tracked(p, g));
        }
        auto od = out.ptr();
        g->record("concat_rows", ids, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::size_t r = 0;
            for (std::size_t i = 0; i < srcs.size(); ++i) {
                const std::size_t nr = srcs[i]->data.size() / c;
                if (want[i]) gr.accumulate(*srcs[i], go->data() + r * c, nr * c);
                r += nr;
            }
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.rows() != r)
            throw ShapeError("concat_cols: row extents disagree: " +
                             detail::shape_str(parts[0].shape()) + " vs " + detail::shape_str(p.shape()));
        total += p.cols();
    }
    Tensor out({r, total});
    std::size_t col = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < r; ++i)
            std::copy(p.data() + i * p.cols(), p.data() + (i + 1) * p.cols(),
                      out.data() + i * total + col);
        col += p.cols();
    }

    Graph* g = detail::active_graph();
    bool any = false;
    if (g)
        for (const auto& p : parts)
            if (detail::tracked(p, g)) any = true;
    if (g && any) {
        std::vector<detail::TensorDataPtr> srcs;
        std::vector<int> ids;
        std::vector<bool> want;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            srcs.push_back(p.ptr());
            ids.push_back(detail::node_id(p, g));
            want.push_back(detail::tracked(p, g));
            widths.push_back(p.cols());
        }
        auto od = out.ptr();
        g->record("concat_cols", ids, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::size_t c0 = 0;
            for (std::size_t i = 0; i < srcs.size(); ++i) {
                if (want[i]) {
                    std::vector<double> d(r * widths[i]);
                    for (std::size_t rr = 0; rr < r; ++rr)
                        for (std::size_t cc = 0; cc < widths[i]; ++cc)
                            d[rr * widths[i] + cc] = (*go)[rr * total + c0 + cc];
                    gr.accumulate(*srcs[i], d.data(), d.size());
                }
                c0 += widths[i];
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    if (x.rank() != 2 || r0 >= r1 || r1 > x.rows())
        throw IndexError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") out of range for shape " + detail::shape_str(x.shape()));
    const std::size_t c = x.cols(), n = r1 - r0;
    Tensor out({n, c});
    std::copy(x.data() + r0 * c, x.data() + r1 * c, out.data());

    Graph* g = detail::active_graph();
    if (g && detail::tracked(x, g)) {
        auto xd = x.ptr(), od = out.ptr();
        g->record("slice_rows", {detail::node_id(x, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> dx(xd->data.size(), 0.0);
            std::copy(go->data(), go->data() + n * c, dx.data() + r0 * c);
            gr.accumulate(*xd, dx.data(), dx.size());
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2 || c0 >= c1 || c1 > x.cols())
        throw IndexError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") out of range for shape " + detail::shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols(), n = c1 - c0;
    Tensor out({r, n});
    for (std::size_t i = 0; i < r; ++i)
        std::copy(x.data() + i * c + c0, x.data() + i * c + c1, out.data() + i * n);

    Graph* g = detail::active_graph();
    if (g && detail::tracked(x, g)) {
        auto xd = x.ptr(), od = out.ptr();
        g->record("slice_cols", {detail::node_id(x, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> dx(xd->data.size(), 0.0);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < n; ++j) dx[i * c + c0 + j] = (*go)[i * n + j];
            gr.accumulate(*xd, dx.data(), dx.size());
        });
    }
    return out;
}

// out row i = x row idx[i]; duplicate indices accumulate gradient into the
// shared source row.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
    if (x.rank() != 2) throw ShapeError("gather_rows: expects rank-2 input");
    const std::size_t c = x.cols();
    for (std::size_t i : idx)
        if (i >= x.rows())
            throw IndexError("gather_rows: row " + std::to_string(i) + " out of range for shape " +
                             detail::shape_str(x.shape()));
    Tensor out({idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(x.data() + idx[i] * c, x.data() + (idx[i] + 1) * c, out.data() + i * c);

    Graph* g = detail::active_graph();
    if (g && detail::tracked(x, g)) {
        auto xd = x.ptr(), od = out.ptr();
        auto shared_idx = std::make_shared<std::vector<std::size_t>>(std::move(idx));
        g->record("gather_rows", {detail::node_id(x, g)}, od, [=](Graph& gr) {
            const auto* go = gr.output_grad(*od);
            if (!go) return;
            std::vector<double> dx(xd->data.size(), 0.0);
            for (std::size_t i = 0; i < shared_idx->size(); ++i) {
                const std::size_t src = (*shared_idx)[i];
                for (std::size_t j = 0; j < c; ++j) dx[src * c + j] += (*go)[i * c + j];
            }
            gr.accumulate(*xd, dx.data(), dx.size());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// v <- momentum * v + g;  p <- p - lr * v. Parameters without an accumulated
// gradient are treated as zero-gradient.
inline void sgd_momentum_step(std::span<Tensor> params, std::span<Tensor> velocity,
                              double lr, double momentum) {
    if (lr <= 0.0) throw ConfigError("sgd_momentum_step: lr must be positive");
    if (params.size() != velocity.size())
        throw ShapeError("sgd_momentum_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(velocity.size()) + " velocity slots");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        Tensor& v = velocity[i];
        if (p.shape() != v.shape())
            throw ShapeError("sgd_momentum_step: param " + detail::shape_str(p.shape()) +
                             " vs velocity " + detail::shape_str(v.shape()));
        const std::vector<double>& g = p.grad();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            v.data()[j] = momentum * v.data()[j] + gj;
            p.data()[j] -= lr * v.data()[j];
        }
    }
}

inline void clear_grads(std::span<Tensor> params) {
    for (Tensor& p : params) p.clear_grad();
}

} // namespace stvq
