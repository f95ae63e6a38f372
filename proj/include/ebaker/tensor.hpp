#pragma once

// Dense double-precision tensors with a dynamically built reverse-mode tape.
// Every op records its parents and a pull-style backward closure; backward()
// replays the tape in exact reverse topological order. The tape is rebuilt on
// every forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace ebaker {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += "x";
    }
    return out + "]";
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool swept = false;  // set once backward has visited this node
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pulls own grad into parents

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII switch that disables tape construction (inference paths).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return full(shape, 0.0, requires_grad);
    }

    static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node>();
        n->shape = shape;
        n->data.assign(shape_numel(shape), v);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false) {
        if (data.size() != shape_numel(shape)) {
            throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                        " values for shape " + shape_str(shape));
        }
        auto n = std::make_shared<detail::Node>();
        n->shape = shape;
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> data,
                         bool requires_grad = false) {
        return from_data({r, c}, std::move(data), requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return node_ref().shape; }
    std::size_t rank() const { return node_ref().shape.size(); }
    std::size_t numel() const { return node_ref().data.size(); }

    std::size_t rows() const {
        require_rank2("rows()");
        return shape()[0];
    }
    std::size_t cols() const {
        require_rank2("cols()");
        return shape()[1];
    }

    const std::vector<double>& values() const { return node_ref().data; }
    // Direct mutation is for leaf initialization and optimizer updates only;
    // mutating an interior tape node invalidates recorded gradients.
    std::vector<double>& mutable_values() { return node_ref().data; }

    double value() const {
        if (numel() != 1)
            throw std::logic_error("value(): tensor has " + std::to_string(numel()) +
                                   " elements");
        return node_ref().data[0];
    }

    double at(std::size_t i, std::size_t j) const {
        require_rank2("at()");
        return node_ref().data[i * shape()[1] + j];
    }

    bool requires_grad() const { return node_ref().requires_grad; }
    void set_requires_grad(bool b) { node_ref().requires_grad = b; }

    bool has_grad() const { return defined() && !n_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw std::logic_error("grad(): no gradient present");
        return n_->grad;
    }
    std::vector<double>& mutable_grad() {
        node_ref().ensure_grad();
        return n_->grad;
    }
    void zero_grad() {
        if (defined() && !n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }

    std::shared_ptr<detail::Node> node() const { return n_; }

  private:
    detail::Node& node_ref() const {
        if (!n_) throw std::logic_error("empty tensor");
        return *n_;
    }
    void require_rank2(const char* what) const {
        if (rank() != 2)
            throw std::logic_error(std::string(what) + " needs rank-2, got " +
                                   shape_str(shape()));
    }

    std::shared_ptr<detail::Node> n_;
};

// Builds an op node. `backprop` receives the result node with grad populated
// and must accumulate (+=) into parents that require grad. When grad mode is
// off or no parent participates, the closure and parent links are dropped.
inline Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backprop) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    if (n->data.size() != shape_numel(n->shape))
        throw std::logic_error("make_op: data/shape mismatch");
    bool track = grad_enabled();
    if (track) {
        track = false;
        for (const auto& p : parents)
            if (p.defined() && p.node()->requires_grad) {
                track = true;
                break;
            }
    }
    if (track) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(std::move(n));
}

// Reverse sweep from a scalar root. A second sweep over the same tape without
// a fresh forward pass is an error.
inline void backward(const Tensor& root) {
    if (!root.defined()) throw std::logic_error("backward: empty tensor");
    if (root.numel() != 1) throw std::logic_error("backward: root must be scalar");
    detail::Node* r = root.node().get();
    if (r->swept)
        throw std::logic_error("backward: tape already consumed; rerun the forward pass");

    // iterative post-order DFS
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    struct Frame {
        detail::Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({r, 0});
    visited.insert(r);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::Node* p = f.node->parents[f.next_parent++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    r->ensure_grad();
    r->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
        n->swept = true;
    }
}

// Explicit NaN/Inf barrier; values and any present gradient are scanned.
inline void check_finite(const Tensor& t, std::string_view what) {
    for (double v : t.values())
        if (!std::isfinite(v))
            throw std::runtime_error("non-finite value in " + std::string(what));
    if (t.has_grad())
        for (double v : t.grad())
            if (!std::isfinite(v))
                throw std::runtime_error("non-finite gradient in " + std::string(what));
}

// ---------------------------------------------------------------------------
// Seeded RNG. splitmix64 is used to derive decorrelated sub-streams so that
// e.g. per-epoch shuffles do not perturb weight-init draws.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(eng_);
    }
    double uniform() {
        std::uniform_real_distribution<double> d(0.0, 1.0);
        return d(eng_);
    }
    std::uint64_t integer(std::uint64_t n) {
        std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
        return d(eng_);
    }
    std::mt19937_64& engine() { return eng_; }

  private:
    std::mt19937_64 eng_;
};

// Decorrelated sub-stream for (seed, stream) so e.g. per-epoch shuffles do not
// perturb weight-init draws.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
    return Rng(splitmix64(seed) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1));
}

inline void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (double& v : t.mutable_values()) v = rng.normal(0.0, stddev);
}

// Truncated normal: resample outside two standard deviations.
inline void fill_trunc_normal(Tensor& t, Rng& rng, double stddev) {
    for (double& v : t.mutable_values()) {
        double x;
        do {
            x = rng.normal(0.0, stddev);
        } while (std::abs(x) > 2.0 * stddev);
        v = x;
    }
}

// ---------------------------------------------------------------------------
// Leaf registry: named trainable parameters in registration order.

class ParameterStore {
  public:
    Tensor add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter: " + name);
        t.set_requires_grad(true);
        index_[name] = tensors_.size();
        names_.push_back(name);
        tensors_.push_back(t);
        return t;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter: " + name);
        return tensors_[it->second];
    }

    std::size_t size() const { return tensors_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }
    std::vector<Tensor>& tensors() { return tensors_; }

    void zero_grad() {
        for (auto& t : tensors_) t.zero_grad();
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Primitives

namespace ops {

namespace impl {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": needs rank-2, got " +
                                    shape_str(t.shape()));
}

inline void accumulate(detail::Node& dst, const std::vector<double>& g) {
    dst.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace impl

inline Tensor add(const Tensor& a, const Tensor& b) {
    impl::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) impl::accumulate(*an, n.grad);
        if (bn->requires_grad) impl::accumulate(*bn, n.grad);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    impl::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) impl::accumulate(*an, n.grad);
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
        }
    });
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
    impl::require_same_shape(a, b, "multiply");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                an->grad[i] += n.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                bn->grad[i] += n.grad[i] * an->data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an, c](detail::Node& n) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
    });
}

// Multiply every element by a one-element tensor; gradient reaches both sides.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must be one element");
    double sv = s.values()[0];
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sv;
    auto an = a.node(), sn = s.node();
    return make_op(a.shape(), std::move(out), {a, s}, [an, sn, sv](detail::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * sv;
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * an->data[i];
            sn->grad[0] += acc;
        }
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    impl::require_rank2(a, "matmul");
    impl::require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                    shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
            double aik = av[i * k + kk];
            if (aik == 0.0) continue;
            const double* brow = bv.data() + kk * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    auto an = a.node(), bn = b.node();
    return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node& nd) {
        if (an->requires_grad) {
            an->ensure_grad();
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* grow = nd.grad.data() + i * n;
                    const double* brow = bn->data.data() + kk * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    an->grad[i * k + kk] += acc;
                }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double aik = an->data[i * k + kk];
                    if (aik == 0.0) continue;
                    const double* grow = nd.grad.data() + i * n;
                    double* brow = bn->grad.data() + kk * n;
                    for (std::size_t j = 0; j < n; ++j) brow[j] += aik * grow[j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    impl::require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    auto an = a.node();
    return make_op({n, m}, std::move(out), {a}, [an, m, n](detail::Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += nd.grad[j * m + i];
    });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an](detail::Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i)
            an->grad[i] += nd.grad[i] * nd.data[i];
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an](detail::Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i)
            an->grad[i] += nd.grad[i] / an->data[i];
    });
}

inline Tensor sqrt(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
    auto an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an](detail::Node& nd) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i)
            an->grad[i] += nd.grad[i] * 0.5 / nd.data[i];
    });
}

// Row-wise softmax, stabilized by row-max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    impl::require_rank2(x, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xv.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        double* orow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    auto xn = x.node();
    return make_op({m, n}, std::move(out), {x}, [xn, m, n](detail::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            const double* p = nd.data.data() + i * n;
            const double* g = nd.grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
            double* gx = xn->grad.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) gx[j] += p[j] * (g[j] - dot);
        }
    });
}

// Per-row normalization to zero mean / unit variance followed by the affine
// transform gain*x_hat + bias. Population variance, epsilon inside the sqrt.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    impl::require_rank2(x, "layer_norm");
    const std::size_t m = x.rows(), d = x.cols();
    if (gain.numel() != d || bias.numel() != d)
        throw std::invalid_argument("layer_norm: gain/bias must have " + std::to_string(d) +
                                    " elements");
    std::vector<double> out(m * d);
    std::vector<double> xhat(m * d);
    std::vector<double> inv_sigma(m);
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xv.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            double h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gv[j] + bv[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return make_op(
        {m, d}, std::move(out), {x, gain, bias},
        [xn, gn, bn, m, d, xhat = std::move(xhat),
         inv_sigma = std::move(inv_sigma)](detail::Node& nd) {
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        gn->grad[j] += nd.grad[i * d + j] * xhat[i * d + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += nd.grad[i * d + j];
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* g = nd.grad.data() + i * d;
                    const double* h = xhat.data() + i * d;
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    std::vector<double> dh(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        dh[j] = g[j] * gn->data[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * h[j];
                    }
                    mean_dh /= static_cast<double>(d);
                    mean_dh_h /= static_cast<double>(d);
                    double* gx = xn->grad.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j)
                        gx[j] += inv_sigma[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                }
            }
        });
}

inline constexpr double kQuickGeluSlope = 1.702;

// x * sigmoid(1.702 x)
inline Tensor quick_gelu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-kQuickGeluSlope * xv[i]));
        out[i] = xv[i] * s;
    }
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](detail::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) {
            double v = xn->data[i];
            double s = 1.0 / (1.0 + std::exp(-kQuickGeluSlope * v));
            xn->grad[i] += nd.grad[i] * (s + kQuickGeluSlope * v * s * (1.0 - s));
        }
    });
}

// Pairwise cosine similarity between the rows of a [m x d] and b [n x d].
// A zero-norm row is an explicit error, never a silent division.
inline Tensor cosine_rows(const Tensor& a, const Tensor& b) {
    impl::require_rank2(a, "cosine_rows");
    impl::require_rank2(b, "cosine_rows");
    const std::size_t m = a.rows(), d = a.cols(), n = b.rows();
    if (b.cols() != d)
        throw std::invalid_argument("cosine_rows: feature dims differ, " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto normalize = [d](const std::vector<double>& v, std::size_t count, const char* side) {
        std::vector<double> unit(v.size());
        std::vector<double> norms(count);
        for (std::size_t i = 0; i < count; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += v[i * d + j] * v[i * d + j];
            double nrm = std::sqrt(s);
            if (nrm == 0.0)
                throw std::domain_error(std::string("cosine_rows: zero-norm row ") +
                                        std::to_string(i) + " on " + side + " side");
            norms[i] = nrm;
            for (std::size_t j = 0; j < d; ++j) unit[i * d + j] = v[i * d + j] / nrm;
        }
        return std::pair(std::move(unit), std::move(norms));
    };
    auto left = normalize(a.values(), m, "left");
    auto right = normalize(b.values(), n, "right");
    std::vector<double> ua = std::move(left.first), na = std::move(left.second);
    std::vector<double> ub = std::move(right.first), nb = std::move(right.second);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            const double* ar = ua.data() + i * d;
            const double* br = ub.data() + j * d;
            for (std::size_t t = 0; t < d; ++t) acc += ar[t] * br[t];
            out[i * n + j] = acc;
        }
    auto an = a.node(), bn = b.node();
    return make_op({m, n}, std::move(out), {a, b},
                   [an, bn, m, n, d, ua = std::move(ua), ub = std::move(ub),
                    na = std::move(na), nb = std::move(nb)](detail::Node& nd) {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < m; ++i) {
                               double* ga = an->grad.data() + i * d;
                               const double* ai = ua.data() + i * d;
                               for (std::size_t j = 0; j < n; ++j) {
                                   double g = nd.grad[i * n + j];
                                   if (g == 0.0) continue;
                                   double c = nd.data[i * n + j];
                                   const double* bj = ub.data() + j * d;
                                   double w = g / na[i];
                                   for (std::size_t t = 0; t < d; ++t)
                                       ga[t] += w * (bj[t] - c * ai[t]);
                               }
                           }
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (std::size_t j = 0; j < n; ++j) {
                               double* gb = bn->grad.data() + j * d;
                               const double* bj = ub.data() + j * d;
                               for (std::size_t i = 0; i < m; ++i) {
                                   double g = nd.grad[i * n + j];
                                   if (g == 0.0) continue;
                                   double c = nd.data[i * n + j];
                                   const double* ai = ua.data() + i * d;
                                   double w = g / nb[j];
                                   for (std::size_t t = 0; t < d; ++t)
                                       gb[t] += w * (ai[t] - c * bj[t]);
                               }
                           }
                       }
                   });
}

// Gathers rows of `table` at `ids`; also serves as generic row selection.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
    impl::require_rank2(table, "embedding_lookup");
    const std::size_t v = table.rows(), d = table.cols();
    std::vector<double> out(ids.size() * d);
    const auto& tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= v)
            throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) +
                                    " out of range " + std::to_string(v));
        std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
    }
    auto tn = table.node();
    return make_op({ids.size(), d}, std::move(out), {table}, [tn, ids, d](detail::Node& nd) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            double* dst = tn->grad.data() + ids[i] * d;
            const double* g = nd.grad.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
        }
    });
}

inline Tensor take_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    return embedding_lookup(x, rows);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t d = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        impl::require_rank2(p, "concat_rows");
        if (p.cols() != d) throw std::invalid_argument("concat_rows: column counts differ");
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(total * d);
    for (const auto& p : parts) {
        const auto& v = p.values();
        out.insert(out.end(), v.begin(), v.end());
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return make_op({total, d}, std::move(out), parts, [nodes](detail::Node& nd) {
        std::size_t off = 0;
        for (auto& pn : nodes) {
            std::size_t cnt = pn->data.size();
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (std::size_t i = 0; i < cnt; ++i) pn->grad[i] += nd.grad[off + i];
            }
            off += cnt;
        }
    });
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
    impl::require_rank2(x, "slice_cols");
    const std::size_t m = x.rows(), n = x.cols();
    if (start + len > n) throw std::out_of_range("slice_cols: range exceeds columns");
    std::vector<double> out(m * len);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(xv.data() + i * n + start, len, out.data() + i * len);
    auto xn = x.node();
    return make_op({m, len}, std::move(out), {x}, [xn, m, n, start, len](detail::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < len; ++j)
                xn->grad[i * n + start + j] += nd.grad[i * len + j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        impl::require_rank2(p, "concat_cols");
        if (p.rows() != m) throw std::invalid_argument("concat_cols: row counts differ");
        total += p.cols();
    }
    std::vector<double> out(m * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        const auto& v = p.values();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(v.data() + i * w, w, out.data() + i * total + off);
        off += w;
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.cols());
    }
    return make_op({m, total}, std::move(out), parts,
                   [nodes, widths, m, total](detail::Node& nd) {
                       std::size_t off = 0;
                       for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                           auto& pn = nodes[pi];
                           std::size_t w = widths[pi];
                           if (pn->requires_grad) {
                               pn->ensure_grad();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < w; ++j)
                                       pn->grad[i * w + j] += nd.grad[i * total + off + j];
                           }
                           off += w;
                       }
                   });
}

// Broadcast-add a length-d vector to every row of x [m x d].
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    impl::require_rank2(x, "add_rowvec");
    const std::size_t m = x.rows(), d = x.cols();
    if (b.numel() != d)
        throw std::invalid_argument("add_rowvec: vector length " + std::to_string(b.numel()) +
                                    " vs columns " + std::to_string(d));
    std::vector<double> out(m * d);
    const auto& xv = x.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] + bv[j];
    auto xn = x.node(), bn = b.node();
    return make_op({m, d}, std::move(out), {x, b}, [xn, bn, m, d](detail::Node& nd) {
        if (xn->requires_grad) impl::accumulate(*xn, nd.grad);
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) bn->grad[j] += nd.grad[i * d + j];
        }
    });
}

// Mean over rows: [m x d] -> [1 x d].
inline Tensor mean_pool(const Tensor& x) {
    impl::require_rank2(x, "mean_pool");
    const std::size_t m = x.rows(), d = x.cols();
    if (m == 0) throw std::invalid_argument("mean_pool: no rows");
    std::vector<double> out(d, 0.0);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += xv[i * d + j];
    for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(m);
    auto xn = x.node();
    return make_op({1, d}, std::move(out), {x}, [xn, m, d](detail::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        double inv = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) xn->grad[i * d + j] += nd.grad[j] * inv;
    });
}

// Euclidean norm of each row: [m x d] -> [m x 1].
inline Tensor l2_norm_rows(const Tensor& x) {
    impl::require_rank2(x, "l2_norm_rows");
    const std::size_t m = x.rows(), d = x.cols();
    std::vector<double> out(m);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
        out[i] = std::sqrt(s);
    }
    auto xn = x.node();
    return make_op({m, 1}, std::move(out), {x}, [xn, m, d](detail::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            if (nd.data[i] == 0.0) continue;  // subgradient 0 at the origin
            double w = nd.grad[i] / nd.data[i];
            for (std::size_t j = 0; j < d; ++j)
                xn->grad[i * d + j] += w * xn->data[i * d + j];
        }
    });
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto xn = x.node();
    return make_op({1}, {s}, {x}, [xn](detail::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (double& g : xn->grad) g += nd.grad[0];
    });
}

inline Tensor mean_all(const Tensor& x) {
    if (x.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
    double s = 0.0;
    for (double v : x.values()) s += v;
    double inv = 1.0 / static_cast<double>(x.numel());
    auto xn = x.node();
    return make_op({1}, {s * inv}, {x}, [xn, inv](detail::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (double& g : xn->grad) g += nd.grad[0] * inv;
    });
}

// Diagonal of a square matrix as an [n x 1] column.
inline Tensor diag(const Tensor& x) {
    impl::require_rank2(x, "diag");
    const std::size_t n = x.rows();
    if (x.cols() != n) throw std::invalid_argument("diag: matrix not square");
    std::vector<double> out(n);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = xv[i * n + i];
    auto xn = x.node();
    return make_op({n, 1}, std::move(out), {x}, [xn, n](detail::Node& nd) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) xn->grad[i * n + i] += nd.grad[i];
    });
}

// Mean cross-entropy between softmax(logits) rows and integer targets.
// Fused softmax for the usual (p - onehot) backward.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
    impl::require_rank2(logits, "cross_entropy");
    const std::size_t m = logits.rows(), v = logits.cols();
    if (targets.size() != m)
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(m) + " rows");
    if (m == 0) throw std::invalid_argument("cross_entropy: no rows");
    std::vector<double> probs(m * v);
    const auto& lv = logits.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] >= v) throw std::out_of_range("cross_entropy: target out of range");
        const double* row = lv.data() + i * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        double* prow = probs.data() + i * v;
        for (std::size_t j = 0; j < v; ++j) {
            prow[j] = std::exp(row[j] - mx);
            sum += prow[j];
        }
        for (std::size_t j = 0; j < v; ++j) prow[j] /= sum;
        loss -= std::log(prow[targets[i]]);
    }
    loss /= static_cast<double>(m);
    auto ln = logits.node();
    return make_op({1}, {loss}, {logits},
                   [ln, m, v, targets, probs = std::move(probs)](detail::Node& nd) {
                       if (!ln->requires_grad) return;
                       ln->ensure_grad();
                       double w = nd.grad[0] / static_cast<double>(m);
                       for (std::size_t i = 0; i < m; ++i) {
                           double* g = ln->grad.data() + i * v;
                           const double* p = probs.data() + i * v;
                           for (std::size_t j = 0; j < v; ++j) g[j] += w * p[j];
                           g[targets[i]] -= w;
                       }
                   });
}

// Additive attention bias: 0 where attending is allowed, -1e9 where blocked.
// key_padding[j] == true blocks key j for every query; causal blocks j > i.
struct AttentionMask {
    std::vector<bool> key_padding;
    bool causal = false;
};

inline Tensor attention_bias(std::size_t n_q, std::size_t n_k, const AttentionMask& mask) {
    constexpr double kBlocked = -1e9;
    std::vector<double> bias(n_q * n_k, 0.0);
    if (!mask.key_padding.empty() && mask.key_padding.size() != n_k)
        throw std::invalid_argument("attention_bias: padding mask length mismatch");
    for (std::size_t i = 0; i < n_q; ++i)
        for (std::size_t j = 0; j < n_k; ++j) {
            bool blocked = (!mask.key_padding.empty() && mask.key_padding[j]) ||
                           (mask.causal && j > i);
            if (blocked) bias[i * n_k + j] = kBlocked;
        }
    return Tensor::from_data({n_q, n_k}, std::move(bias));
}

// Scaled dot-product attention over h heads. q/k/v are already projected
// [S x d] with d divisible by n_heads; composed from primitives so gradients
// follow for free.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t n_heads, const AttentionMask* mask = nullptr) {
    impl::require_rank2(q, "multi_head_attention");
    impl::require_rank2(k, "multi_head_attention");
    impl::require_rank2(v, "multi_head_attention");
    const std::size_t d = q.cols();
    if (k.cols() != d || v.cols() != d)
        throw std::invalid_argument("multi_head_attention: feature dims differ");
    if (k.rows() != v.rows())
        throw std::invalid_argument("multi_head_attention: key/value row counts differ");
    if (n_heads == 0 || d % n_heads != 0)
        throw std::invalid_argument("multi_head_attention: heads must divide feature dim");
    const std::size_t dh = d / n_heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor bias;
    if (mask) bias = attention_bias(q.rows(), k.rows(), *mask);
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_scale);
        if (mask) scores = add(scores, bias);
        heads.push_back(matmul(softmax_rows(scores), vh));
    }
    return n_heads == 1 ? heads[0] : concat_cols(heads);
}

}  // namespace ops

}  // namespace ebaker
