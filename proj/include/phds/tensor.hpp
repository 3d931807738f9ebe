#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "phds/errors.hpp"
#include "phds/rng.hpp"

namespace phds {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// Grad mode. Evaluation wraps forward passes in NoGradGuard so no graph is
// recorded and no grad buffers are allocated.
// ---------------------------------------------------------------------------

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

// ---------------------------------------------------------------------------
// Tensor: a handle onto a node of the compute graph. Each op records its
// parents and a backward closure; backward() walks the DAG in reverse
// topological order, visiting every node exactly once. All loops below run
// in a fixed index order so a forward pass is bit-reproducible.
// ---------------------------------------------------------------------------

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // same length as data iff requires_grad
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
};

template <typename S>
class TensorT {
public:
    using Node = TensorNode<S>;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data.assign(size_t(numel_of(n->shape)), S(0));
        set_requires_grad(*n, requires_grad);
        return TensorT(std::move(n));
    }

    static TensorT full(Shape shape, S value, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    static TensorT from_vector(Shape shape, std::vector<S> values, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        if (int64_t(values.size()) != numel_of(n->shape))
            throw ShapeError("from_vector: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(n->shape));
        n->data = std::move(values);
        set_requires_grad(*n, requires_grad);
        return TensorT(std::move(n));
    }

    static TensorT randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (S& v : t.node_->data) v = S(rng.next_normal() * stddev);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return int64_t(node_->data.size()); }
    int64_t rows() const { return node_->shape.size() == 2 ? node_->shape[0] : node_->shape[0]; }
    int64_t cols() const { return node_->shape.size() == 2 ? node_->shape[1] : 1; }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<S>& data() { return node_->data; }
    const std::vector<S>& data() const { return node_->data; }
    std::vector<S>& grad() { return node_->grad; }
    const std::vector<S>& grad() const { return node_->grad; }

    S item() const {
        if (node_->data.size() != 1)
            throw ShapeError("item: tensor has " + std::to_string(node_->data.size()) + " elements");
        return node_->data[0];
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    std::shared_ptr<Node> node() const { return node_; }

    static void set_requires_grad(Node& n, bool rg) {
        n.requires_grad = rg;
        if (rg)
            n.grad.assign(n.data.size(), S(0));
        else
            n.grad.clear();
    }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

template <typename S>
void check_finite(const TensorNode<S>& n, const char* op) {
    for (S v : n.data) {
        if (!std::isfinite(double(v)))
            throw NumericError(std::string(op) + ": non-finite value in output");
    }
}

// Allocates the result node, wires parents and flags, and runs the finite
// scan. `fn` is only attached when grad recording is active.
template <typename S>
TensorT<S> make_op(const char* op, Shape shape,
                   std::vector<std::shared_ptr<TensorNode<S>>> parents,
                   std::function<void(TensorNode<S>&)> fn,
                   std::vector<S> data) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    bool track = grad_enabled();
    bool rg = false;
    if (track) {
        for (auto& p : parents)
            if (p->requires_grad) rg = true;
    }
    if (rg) {
        TensorT<S>::set_requires_grad(*n, true);
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    check_finite(*n, op);
    return TensorT<S>(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward(): reverse-mode sweep from a scalar loss.
// ---------------------------------------------------------------------------

template <typename S>
void backward(const TensorT<S>& loss) {
    auto root = loss.node();
    if (root->data.size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!root->requires_grad) throw DomainError("backward: loss does not require grad");

    // Iterative DFS post-order; gives a topological order of the DAG.
    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> seen;
    std::vector<std::pair<TensorNode<S>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode<S>* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_op<S>("add", a.shape(), {a.node(), b.node()},
        [](TensorNode<S>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i];
        },
        std::move(out));
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_op<S>("sub", a.shape(), {a.node(), b.node()},
        [](TensorNode<S>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        },
        std::move(out));
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_op<S>("mul", a.shape(), {a.node(), b.node()},
        [](TensorNode<S>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad)
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
            if (pb.requires_grad)
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
        },
        std::move(out));
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    std::vector<S> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_op<S>("scale", a.shape(), {a.node()},
        [c](TensorNode<S>& self) {
            auto& pa = *self.parents[0];
            if (pa.requires_grad)
                for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * c;
        },
        std::move(out));
}

// a[m x k] * b[k x n]
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul: expects 2-d tensors");
    const int64_t m = a.shape()[0], k = a.shape()[1];
    const int64_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(size_t(m * n), S(0));
    const S* ad = a.data().data();
    const S* bd = b.data().data();
    for (int64_t i = 0; i < m; ++i) {
        S* orow = out.data() + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const S av = ad[i * k + p];
            const S* brow = bd + p * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return detail::make_op<S>("matmul", {m, n}, {a.node(), b.node()},
        [m, k, n](TensorNode<S>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const S* g = self.grad.data();
            if (pa.requires_grad) {
                // da[i,p] += sum_j g[i,j] * b[p,j]
                const S* bd = pb.data.data();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        S acc = 0;
                        const S* grow = g + i * n;
                        const S* brow = bd + p * n;
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        pa.grad[i * k + p] += acc;
                    }
            }
            if (pb.requires_grad) {
                // db[p,j] += sum_i a[i,p] * g[i,j]
                const S* ad = pa.data.data();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        const S av = ad[i * k + p];
                        const S* grow = g + i * n;
                        S* brow = pb.grad.data() + p * n;
                        for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
            }
        },
        std::move(out));
}

// a[m x k] * b[n x k]^T -> [m x n]; used for tied-embedding logits.
template <typename S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul_nt: expects 2-d tensors");
    const int64_t m = a.shape()[0], k = a.shape()[1];
    const int64_t n = b.shape()[0], k2 = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul_nt: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(size_t(m * n), S(0));
    const S* ad = a.data().data();
    const S* bd = b.data().data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            S acc = 0;
            const S* arow = ad + i * k;
            const S* brow = bd + j * k;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            out[i * n + j] = acc;
        }
    return detail::make_op<S>("matmul_nt", {m, n}, {a.node(), b.node()},
        [m, k, n](TensorNode<S>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const S* g = self.grad.data();
            if (pa.requires_grad) {
                // da[i,p] += sum_j g[i,j] * b[j,p]
                const S* bd = pb.data.data();
                for (int64_t i = 0; i < m; ++i) {
                    S* arow = pa.grad.data() + i * k;
                    for (int64_t j = 0; j < n; ++j) {
                        const S gv = g[i * n + j];
                        const S* brow = bd + j * k;
                        for (int64_t p = 0; p < k; ++p) arow[p] += gv * brow[p];
                    }
                }
            }
            if (pb.requires_grad) {
                // db[j,p] += sum_i g[i,j] * a[i,p]
                const S* ad = pa.data.data();
                for (int64_t i = 0; i < m; ++i) {
                    const S* arow = ad + i * k;
                    for (int64_t j = 0; j < n; ++j) {
                        const S gv = g[i * n + j];
                        S* brow = pb.grad.data() + j * k;
                        for (int64_t p = 0; p < k; ++p) brow[p] += gv * arow[p];
                    }
                }
            }
        },
        std::move(out));
}

template <typename S>
TensorT<S> silu(const TensorT<S>& a) {
    std::vector<S> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const S x = a.data()[i];
        out[i] = x / (S(1) + std::exp(-x));
    }
    return detail::make_op<S>("silu", a.shape(), {a.node()},
        [](TensorNode<S>& self) {
            auto& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const S x = pa.data[i];
                const S sig = S(1) / (S(1) + std::exp(-x));
                pa.grad[i] += self.grad[i] * sig * (S(1) + x * (S(1) - sig));
            }
        },
        std::move(out));
}

// Softmax along `axis` of a 2-d tensor (axis 1 = per row, the default).
// Stabilized by max-subtraction; each slice sums to 1.
template <typename S>
TensorT<S> softmax(const TensorT<S>& a, int axis = 1) {
    if (a.shape().size() != 2) throw ShapeError("softmax: expects a 2-d tensor");
    if (axis != 0 && axis != 1) throw DomainError("softmax: axis must be 0 or 1");
    const int64_t r = a.shape()[0], c = a.shape()[1];
    const int64_t slices = axis == 1 ? r : c;
    const int64_t n = axis == 1 ? c : r;
    const int64_t step = axis == 1 ? 1 : c;
    const int64_t slice_stride = axis == 1 ? c : 1;
    std::vector<S> out(a.data().size());
    const S* ad = a.data().data();
    for (int64_t s = 0; s < slices; ++s) {
        const S* in = ad + s * slice_stride;
        S* o = out.data() + s * slice_stride;
        S mx = in[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i * step]);
        S sum = 0;
        for (int64_t i = 0; i < n; ++i) {
            const S e = std::exp(in[i * step] - mx);
            o[i * step] = e;
            sum += e;
        }
        for (int64_t i = 0; i < n; ++i) o[i * step] /= sum;
    }
    return detail::make_op<S>("softmax", a.shape(), {a.node()},
        [slices, n, step, slice_stride](TensorNode<S>& self) {
            auto& pa = *self.parents[0];
            if (!pa.requires_grad) return;
            for (int64_t s = 0; s < slices; ++s) {
                const S* p = self.data.data() + s * slice_stride;
                const S* g = self.grad.data() + s * slice_stride;
                S dot = 0;
                for (int64_t i = 0; i < n; ++i) dot += g[i * step] * p[i * step];
                S* dst = pa.grad.data() + s * slice_stride;
                for (int64_t i = 0; i < n; ++i)
                    dst[i * step] += p[i * step] * (g[i * step] - dot);
            }
        },
        std::move(out));
}

// y = (x - mean) / sqrt(var + eps) * scale + offset, per row.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& scale_t,
                      const TensorT<S>& offset_t, S eps) {
    if (x.shape().size() != 2) throw ShapeError("layer_norm: expects a 2-d tensor");
    const int64_t r = x.shape()[0], c = x.shape()[1];
    if (scale_t.numel() != c || offset_t.numel() != c)
        throw ShapeError("layer_norm: scale/offset length must equal row width");
    std::vector<S> out(x.data().size());
    // saved layout: r*c normalized values then r inverse stddevs
    std::vector<S> saved(x.data().size() + size_t(r));
    const S* xd = x.data().data();
    const S* sc = scale_t.data().data();
    const S* of = offset_t.data().data();
    for (int64_t i = 0; i < r; ++i) {
        const S* row = xd + i * c;
        S mean = 0;
        for (int64_t j = 0; j < c; ++j) mean += row[j];
        mean /= S(c);
        S var = 0;
        for (int64_t j = 0; j < c; ++j) {
            const S d = row[j] - mean;
            var += d * d;
        }
        var /= S(c);
        const S iv = S(1) / std::sqrt(var + eps);
        saved[size_t(r * c + i)] = iv;
        for (int64_t j = 0; j < c; ++j) {
            const S h = (row[j] - mean) * iv;
            saved[i * c + j] = h;
            out[i * c + j] = h * sc[j] + of[j];
        }
    }
    return detail::make_op<S>("layer_norm", x.shape(),
        {x.node(), scale_t.node(), offset_t.node()},
        [r, c, saved = std::move(saved)](TensorNode<S>& self) {
            const S* xhat = saved.data();
            const S* inv = saved.data() + r * c;
            auto& px = *self.parents[0];
            auto& ps = *self.parents[1];
            auto& po = *self.parents[2];
            const S* g = self.grad.data();
            if (ps.requires_grad || po.requires_grad) {
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < c; ++j) {
                        if (ps.requires_grad) ps.grad[j] += g[i * c + j] * xhat[i * c + j];
                        if (po.requires_grad) po.grad[j] += g[i * c + j];
                    }
            }
            if (px.requires_grad) {
                const S* sc = ps.data.data();
                for (int64_t i = 0; i < r; ++i) {
                    S gy_mean = 0, gyxh_mean = 0;
                    for (int64_t j = 0; j < c; ++j) {
                        const S gy = g[i * c + j] * sc[j];
                        gy_mean += gy;
                        gyxh_mean += gy * xhat[i * c + j];
                    }
                    gy_mean /= S(c);
                    gyxh_mean /= S(c);
                    const S iv = inv[size_t(i)];
                    for (int64_t j = 0; j < c; ++j) {
                        const S gy = g[i * c + j] * sc[j];
                        px.grad[i * c + j] += iv * (gy - gy_mean - xhat[i * c + j] * gyxh_mean);
                    }
                }
            }
        },
        std::move(out));
}

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& scale_t, const TensorT<S>& offset_t) {
    return layer_norm(x, scale_t, offset_t, S(1e-5));
}

// Mean negative log-likelihood in nats over all rows.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int64_t>& targets) {
    if (logits.shape().size() != 2) throw ShapeError("cross_entropy: expects 2-d logits");
    const int64_t r = logits.shape()[0], v = logits.shape()[1];
    if (int64_t(targets.size()) != r)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(r) + " rows");
    std::vector<S> probs(logits.data().size());
    const S* ld = logits.data().data();
    S nll = 0;
    for (int64_t i = 0; i < r; ++i) {
        const int64_t t = targets[size_t(i)];
        if (t < 0 || t >= v) throw DomainError("cross_entropy: target id out of range");
        const S* row = ld + i * v;
        S mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        S sum = 0;
        for (int64_t j = 0; j < v; ++j) {
            const S e = std::exp(row[j] - mx);
            probs[i * v + j] = e;
            sum += e;
        }
        for (int64_t j = 0; j < v; ++j) probs[i * v + j] /= sum;
        nll -= std::log(probs[i * v + t]);
    }
    nll /= S(r);
    return detail::make_op<S>("cross_entropy", {1}, {logits.node()},
        [r, v, targets, probs = std::move(probs)](TensorNode<S>& self) {
            auto& pl = *self.parents[0];
            if (!pl.requires_grad) return;
            const S g = self.grad[0] / S(r);
            for (int64_t i = 0; i < r; ++i) {
                const int64_t t = targets[size_t(i)];
                for (int64_t j = 0; j < v; ++j) {
                    S d = probs[i * v + j];
                    if (j == t) d -= S(1);
                    pl.grad[i * v + j] += g * d;
                }
            }
        },
        {nll});
}

// Gather rows by index; also serves as the embedding lookup.
template <typename S>
TensorT<S> take_rows(const TensorT<S>& x, const std::vector<int64_t>& idx) {
    if (x.shape().size() != 2) throw ShapeError("take_rows: expects a 2-d tensor");
    const int64_t n = x.shape()[0], c = x.shape()[1];
    std::vector<S> out(idx.size() * size_t(c));
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n) throw DomainError("take_rows: row index out of range");
        std::copy_n(x.data().data() + idx[i] * c, c, out.data() + int64_t(i) * c);
    }
    return detail::make_op<S>("take_rows", {int64_t(idx.size()), c}, {x.node()},
        [c, idx](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            for (size_t i = 0; i < idx.size(); ++i) {
                const S* g = self.grad.data() + int64_t(i) * c;
                S* dst = px.grad.data() + idx[i] * c;
                for (int64_t j = 0; j < c; ++j) dst[j] += g[j];
            }
        },
        std::move(out));
}

// out = base with rows[i] added at row idx[i]. Functional: base is copied.
template <typename S>
TensorT<S> scatter_add_rows(const TensorT<S>& base, const TensorT<S>& rows,
                            const std::vector<int64_t>& idx) {
    if (base.shape().size() != 2 || rows.shape().size() != 2)
        throw ShapeError("scatter_add_rows: expects 2-d tensors");
    const int64_t n = base.shape()[0], c = base.shape()[1];
    if (rows.shape()[1] != c || int64_t(idx.size()) != rows.shape()[0])
        throw ShapeError("scatter_add_rows: rows/index mismatch");
    std::vector<S> out = base.data();
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n) throw DomainError("scatter_add_rows: row index out of range");
        const S* src = rows.data().data() + int64_t(i) * c;
        S* dst = out.data() + idx[i] * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    return detail::make_op<S>("scatter_add_rows", base.shape(), {base.node(), rows.node()},
        [c, idx](TensorNode<S>& self) {
            auto& pb = *self.parents[0];
            auto& pr = *self.parents[1];
            if (pb.requires_grad)
                for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i];
            if (pr.requires_grad) {
                for (size_t i = 0; i < idx.size(); ++i) {
                    const S* g = self.grad.data() + idx[i] * c;
                    S* dst = pr.grad.data() + int64_t(i) * c;
                    for (int64_t j = 0; j < c; ++j) dst[j] += g[j];
                }
            }
        },
        std::move(out));
}

// Gather x[rows[i], col] into a vector (per-token gate weight extraction).
template <typename S>
TensorT<S> take_elems(const TensorT<S>& x, const std::vector<int64_t>& rows, int64_t col) {
    if (x.shape().size() != 2) throw ShapeError("take_elems: expects a 2-d tensor");
    const int64_t r = x.shape()[0], c = x.shape()[1];
    if (col < 0 || col >= c) throw DomainError("take_elems: column out of range");
    std::vector<S> out(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= r) throw DomainError("take_elems: row index out of range");
        out[i] = x.data()[rows[i] * c + col];
    }
    return detail::make_op<S>("take_elems", {int64_t(rows.size())}, {x.node()},
        [c, col, rows](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            for (size_t i = 0; i < rows.size(); ++i)
                px.grad[rows[i] * c + col] += self.grad[i];
        },
        std::move(out));
}

// Multiply row i of x by v[i] (per-token gate weights onto expert outputs).
template <typename S>
TensorT<S> mul_rows(const TensorT<S>& x, const TensorT<S>& v) {
    if (x.shape().size() != 2) throw ShapeError("mul_rows: expects a 2-d tensor");
    const int64_t r = x.shape()[0], c = x.shape()[1];
    if (v.numel() != r) throw ShapeError("mul_rows: vector length must equal row count");
    std::vector<S> out(x.data().size());
    for (int64_t i = 0; i < r; ++i) {
        const S w = v.data()[size_t(i)];
        for (int64_t j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] * w;
    }
    return detail::make_op<S>("mul_rows", x.shape(), {x.node(), v.node()},
        [r, c](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            auto& pv = *self.parents[1];
            for (int64_t i = 0; i < r; ++i) {
                const S w = pv.data[size_t(i)];
                for (int64_t j = 0; j < c; ++j) {
                    if (px.requires_grad) px.grad[i * c + j] += self.grad[i * c + j] * w;
                    if (pv.requires_grad) pv.grad[size_t(i)] += self.grad[i * c + j] * px.data[i * c + j];
                }
            }
        },
        std::move(out));
}

// Divide row i of x by v[i] (renormalization of masked gates).
template <typename S>
TensorT<S> div_rows(const TensorT<S>& x, const TensorT<S>& v) {
    if (x.shape().size() != 2) throw ShapeError("div_rows: expects a 2-d tensor");
    const int64_t r = x.shape()[0], c = x.shape()[1];
    if (v.numel() != r) throw ShapeError("div_rows: vector length must equal row count");
    std::vector<S> out(x.data().size());
    for (int64_t i = 0; i < r; ++i) {
        const S w = v.data()[size_t(i)];
        for (int64_t j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] / w;
    }
    return detail::make_op<S>("div_rows", x.shape(), {x.node(), v.node()},
        [r, c](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            auto& pv = *self.parents[1];
            for (int64_t i = 0; i < r; ++i) {
                const S w = pv.data[size_t(i)];
                for (int64_t j = 0; j < c; ++j) {
                    const S g = self.grad[i * c + j];
                    if (px.requires_grad) px.grad[i * c + j] += g / w;
                    if (pv.requires_grad)
                        pv.grad[size_t(i)] -= g * px.data[i * c + j] / (w * w);
                }
            }
        },
        std::move(out));
}

// Row sums of a 2-d tensor -> 1-d.
template <typename S>
TensorT<S> row_sum(const TensorT<S>& x) {
    if (x.shape().size() != 2) throw ShapeError("row_sum: expects a 2-d tensor");
    const int64_t r = x.shape()[0], c = x.shape()[1];
    std::vector<S> out(size_t(r), S(0));
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[size_t(i)] += x.data()[i * c + j];
    return detail::make_op<S>("row_sum", {r}, {x.node()},
        [r, c](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) px.grad[i * c + j] += self.grad[size_t(i)];
        },
        std::move(out));
}

// Column means of a 2-d tensor -> 1-d (the P_i statistic of the LB loss).
template <typename S>
TensorT<S> col_mean(const TensorT<S>& x) {
    if (x.shape().size() != 2) throw ShapeError("col_mean: expects a 2-d tensor");
    const int64_t r = x.shape()[0], c = x.shape()[1];
    std::vector<S> out(size_t(c), S(0));
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[size_t(j)] += x.data()[i * c + j];
    for (int64_t j = 0; j < c; ++j) out[size_t(j)] /= S(r);
    return detail::make_op<S>("col_mean", {c}, {x.node()},
        [r, c](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j)
                    px.grad[i * c + j] += self.grad[size_t(j)] / S(r);
        },
        std::move(out));
}

// Dot product with a constant weight vector -> scalar.
template <typename S>
TensorT<S> dot_const(const TensorT<S>& x, std::vector<S> w) {
    if (x.numel() != int64_t(w.size()))
        throw ShapeError("dot_const: length mismatch");
    S acc = 0;
    for (size_t i = 0; i < w.size(); ++i) acc += x.data()[i] * w[i];
    return detail::make_op<S>("dot_const", {1}, {x.node()},
        [w = std::move(w)](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            for (size_t i = 0; i < w.size(); ++i) px.grad[i] += self.grad[0] * w[i];
        },
        {acc});
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
    const int64_t n = x.numel();
    S acc = 0;
    for (S v : x.data()) acc += v;
    acc /= S(n);
    return detail::make_op<S>("mean_all", {1}, {x.node()},
        [n](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            const S g = self.grad[0] / S(n);
            for (size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += g;
        },
        {acc});
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
    S acc = 0;
    for (S v : x.data()) acc += v;
    return detail::make_op<S>("sum_all", {1}, {x.node()},
        [](TensorNode<S>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            const S g = self.grad[0];
            for (size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += g;
        },
        {acc});
}

// Causal multi-head self-attention over row blocks of length seq_len.
// q/k/v are [T x d] with T a multiple of seq_len; heads split d evenly.
template <typename S>
TensorT<S> causal_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                            int64_t n_heads, int64_t seq_len) {
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("causal_attention: q/k/v shapes differ");
    const int64_t t = q.shape()[0], d = q.shape()[1];
    if (d % n_heads != 0) throw ShapeError("causal_attention: d not divisible by n_heads");
    if (t % seq_len != 0) throw ShapeError("causal_attention: rows not divisible by seq_len");
    const int64_t dh = d / n_heads;
    const int64_t n_seq = t / seq_len;
    const S alpha = S(1) / std::sqrt(S(dh));

    std::vector<S> out(q.data().size(), S(0));
    // Attention weights kept for the backward pass: [n_seq][n_heads][L x L].
    std::vector<S> attn(size_t(n_seq * n_heads * seq_len * seq_len), S(0));

    const S* qd = q.data().data();
    const S* kd = k.data().data();
    const S* vd = v.data().data();
    for (int64_t s = 0; s < n_seq; ++s) {
        const int64_t base = s * seq_len;
        for (int64_t h = 0; h < n_heads; ++h) {
            const int64_t off = h * dh;
            S* p = attn.data() + ((s * n_heads + h) * seq_len * seq_len);
            for (int64_t i = 0; i < seq_len; ++i) {
                // scores for positions 0..i, then softmax over them
                S mx = -std::numeric_limits<S>::infinity();
                for (int64_t j = 0; j <= i; ++j) {
                    S acc = 0;
                    const S* qrow = qd + (base + i) * d + off;
                    const S* krow = kd + (base + j) * d + off;
                    for (int64_t e = 0; e < dh; ++e) acc += qrow[e] * krow[e];
                    acc *= alpha;
                    p[i * seq_len + j] = acc;
                    mx = std::max(mx, acc);
                }
                S sum = 0;
                for (int64_t j = 0; j <= i; ++j) {
                    const S e = std::exp(p[i * seq_len + j] - mx);
                    p[i * seq_len + j] = e;
                    sum += e;
                }
                for (int64_t j = 0; j <= i; ++j) p[i * seq_len + j] /= sum;
                S* orow = out.data() + (base + i) * d + off;
                for (int64_t j = 0; j <= i; ++j) {
                    const S w = p[i * seq_len + j];
                    const S* vrow = vd + (base + j) * d + off;
                    for (int64_t e = 0; e < dh; ++e) orow[e] += w * vrow[e];
                }
            }
        }
    }
    return detail::make_op<S>("causal_attention", q.shape(),
        {q.node(), k.node(), v.node()},
        [n_seq, n_heads, seq_len, d, dh, alpha, attn = std::move(attn)](TensorNode<S>& self) {
            auto& pq = *self.parents[0];
            auto& pk = *self.parents[1];
            auto& pv = *self.parents[2];
            const S* g = self.grad.data();
            std::vector<S> ds(size_t(seq_len * seq_len));
            for (int64_t s = 0; s < n_seq; ++s) {
                const int64_t base = s * seq_len;
                for (int64_t h = 0; h < n_heads; ++h) {
                    const int64_t off = h * dh;
                    const S* p = attn.data() + ((s * n_heads + h) * seq_len * seq_len);
                    // ds = p o (dp - rowdot(dp, p)), dp[i,j] = g_i . v_j
                    for (int64_t i = 0; i < seq_len; ++i) {
                        const S* grow = g + (base + i) * d + off;
                        S rowdot = 0;
                        for (int64_t j = 0; j <= i; ++j) {
                            S acc = 0;
                            const S* vrow = pv.data.data() + (base + j) * d + off;
                            for (int64_t e = 0; e < dh; ++e) acc += grow[e] * vrow[e];
                            ds[i * seq_len + j] = acc;
                            rowdot += acc * p[i * seq_len + j];
                        }
                        for (int64_t j = 0; j <= i; ++j)
                            ds[i * seq_len + j] = p[i * seq_len + j] * (ds[i * seq_len + j] - rowdot);
                    }
                    if (pv.requires_grad) {
                        for (int64_t i = 0; i < seq_len; ++i) {
                            const S* grow = g + (base + i) * d + off;
                            for (int64_t j = 0; j <= i; ++j) {
                                const S w = p[i * seq_len + j];
                                S* dvrow = pv.grad.data() + (base + j) * d + off;
                                for (int64_t e = 0; e < dh; ++e) dvrow[e] += w * grow[e];
                            }
                        }
                    }
                    if (pq.requires_grad) {
                        for (int64_t i = 0; i < seq_len; ++i) {
                            S* dqrow = pq.grad.data() + (base + i) * d + off;
                            for (int64_t j = 0; j <= i; ++j) {
                                const S w = ds[i * seq_len + j] * alpha;
                                const S* krow = pk.data.data() + (base + j) * d + off;
                                for (int64_t e = 0; e < dh; ++e) dqrow[e] += w * krow[e];
                            }
                        }
                    }
                    if (pk.requires_grad) {
                        for (int64_t i = 0; i < seq_len; ++i) {
                            const S* qrow = pq.data.data() + (base + i) * d + off;
                            for (int64_t j = 0; j <= i; ++j) {
                                const S w = ds[i * seq_len + j] * alpha;
                                S* dkrow = pk.grad.data() + (base + j) * d + off;
                                for (int64_t e = 0; e < dh; ++e) dkrow[e] += w * qrow[e];
                            }
                        }
                    }
                }
            }
        },
        std::move(out));
}

// ---------------------------------------------------------------------------
// top_k_indices: indices of the k largest entries per row, rank order,
// ties broken toward the lower index. Not differentiable.
// ---------------------------------------------------------------------------

template <typename S>
std::vector<int> top_k_row(const S* row, int64_t n, int64_t k) {
    if (k < 1 || k > n) throw DomainError("top_k: k=" + std::to_string(k) +
                                          " out of range for n=" + std::to_string(n));
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [row](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    idx.resize(size_t(k));
    return idx;
}

template <typename S>
std::vector<std::vector<int>> top_k_indices(const TensorT<S>& x, int64_t k) {
    if (x.shape().size() == 1) {
        return {top_k_row(x.data().data(), x.shape()[0], k)};
    }
    if (x.shape().size() != 2) throw ShapeError("top_k_indices: expects 1-d or 2-d tensor");
    const int64_t r = x.shape()[0], c = x.shape()[1];
    std::vector<std::vector<int>> out;
    out.reserve(size_t(r));
    for (int64_t i = 0; i < r; ++i) out.push_back(top_k_row(x.data().data() + i * c, c, k));
    return out;
}

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace phds
