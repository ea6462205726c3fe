#pragma once

// Reverse-mode automatic differentiation on dense row-major tensors.
//
// Backward functions are expressed with the same differentiable ops as the
// forward pass, so gradients of gradients (needed by the discriminator
// gradient penalty) come out of the one mechanism. Heavy lifting (matmul and
// the im2col convolution products) is delegated to Eigen.

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "counterfax/common.hpp"

namespace counterfax {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
    std::string r = "(";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + ")";
}

// Grad recording is on by default; backward passes that do not need a graph
// of their own run inside a NoGradGuard.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct GradModeGuard {
    bool prev;
    explicit GradModeGuard(bool on) : prev(grad_mode()) { grad_mode() = on; }
    ~GradModeGuard() { grad_mode() = prev; }
};

struct NoGradGuard : GradModeGuard {
    NoGradGuard() : GradModeGuard(false) {}
};

template <typename T>
class Tensor;

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> v;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    // Maps the upstream gradient to one gradient per parent (undefined Tensor
    // for parents that do not need one).
    std::function<std::vector<Tensor<T>>(const Tensor<T>&)> vjp;
};

template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<T> data) {
        if (int64_t(data.size()) != shape_numel(shape))
            throw ShapeError("Tensor::from: data size does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->v = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape) {
        return from(shape, std::vector<T>(size_t(shape_numel(shape)), T(0)));
    }

    static Tensor full(Shape shape, T value) {
        return from(shape, std::vector<T>(size_t(shape_numel(shape)), value));
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor scalar(T value) { return from({}, {value}); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int ndim() const { return int(n_->shape.size()); }
    int dim(int i) const { return n_->shape[size_t(i)]; }
    int64_t size() const { return int64_t(n_->v.size()); }

    std::vector<T>& data() { return n_->v; }
    const std::vector<T>& data() const { return n_->v; }

    T item() const {
        if (n_->v.size() != 1) throw ShapeError("item() on non-scalar tensor");
        return n_->v[0];
    }

    bool requires_grad() const { return n_ && n_->requires_grad; }

    Tensor& set_requires_grad(bool b) {
        n_->requires_grad = b;
        return *this;
    }

    /// Same values, detached from the graph.
    Tensor detach() const {
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = n_->shape;
        n->v = n_->v;
        return Tensor(std::move(n));
    }

    std::shared_ptr<TensorNode<T>> node() const { return n_; }
    TensorNode<T>* raw() const { return n_.get(); }

private:
    std::shared_ptr<TensorNode<T>> n_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> vals,
                  std::vector<Tensor<T>> parents,
                  std::function<std::vector<Tensor<T>>(const Tensor<T>&)> vjp) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->v = std::move(vals);
    n->op = name;
    bool track = false;
    if (grad_mode()) {
        for (const auto& p : parents)
            if (p.defined() && p.requires_grad()) track = true;
    }
    if (track) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->vjp = std::move(vjp);
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!same_shape(a.shape(), b.shape()))
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::make_op<T>("add", a.shape(), std::move(out), {a, b},
                              [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return detail::make_op<T>("sub", a.shape(), std::move(out), {a, b}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{g, neg(g)};
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return detail::make_op<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{mul(g, b), mul(g, a)};
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    return detail::make_op<T>("div", a.shape(), std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        Tensor<T> ga = div(g, b);
        Tensor<T> gb = neg(div(mul(g, a), mul(b, b)));
        return std::vector<Tensor<T>>{ga, gb};
    });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = -av[i];
    return detail::make_op<T>("neg", a.shape(), std::move(out), {a},
                              [](const Tensor<T>& g) { return std::vector<Tensor<T>>{neg(g)}; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    return detail::make_op<T>("add_scalar", a.shape(), std::move(out), {a},
                              [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g}; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return detail::make_op<T>("mul_scalar", a.shape(), std::move(out), {a},
                              [c](const Tensor<T>& g) { return std::vector<Tensor<T>>{mul_scalar(g, c)}; });
}

/// c - a, elementwise.
template <typename T>
Tensor<T> rsub_scalar(T c, const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = c - av[i];
    return detail::make_op<T>("rsub_scalar", a.shape(), std::move(out), {a},
                              [](const Tensor<T>& g) { return std::vector<Tensor<T>>{neg(g)}; });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> abs_t(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::abs(av[i]);
    return detail::make_op<T>("abs", a.shape(), std::move(out), {a}, [a](const Tensor<T>& g) {
        // Subgradient 0 at exactly 0.
        std::vector<T> sign(a.data().size());
        const auto& av = a.data();
        for (size_t i = 0; i < sign.size(); ++i)
            sign[i] = av[i] > T(0) ? T(1) : (av[i] < T(0) ? T(-1) : T(0));
        return std::vector<Tensor<T>>{mul(g, Tensor<T>::from(a.shape(), std::move(sign)))};
    });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
    return detail::make_op<T>("square", a.shape(), std::move(out), {a}, [a](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{mul(g, mul_scalar(a, T(2)))};
    });
}

/// Elementwise square root with subgradient 0 at exactly 0, so that exact
/// zero distances stay quiet instead of producing infinities.
template <typename T>
Tensor<T> sqrt0(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
    Tensor<T> result = detail::make_op<T>(
        "sqrt", a.shape(), std::move(out), {a}, [a](const Tensor<T>& g) -> std::vector<Tensor<T>> {
            std::vector<T> d(a.data().size());
            const auto& av = a.data();
            for (size_t i = 0; i < d.size(); ++i)
                d[i] = av[i] > T(0) ? T(0.5) / std::sqrt(av[i]) : T(0);
            return {mul(g, Tensor<T>::from(a.shape(), std::move(d)))};
        });
    return result;
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    return detail::make_op<T>("exp", a.shape(), std::move(out), {a}, [a](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{mul(g, exp_t(a))};
    });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    return detail::make_op<T>("log", a.shape(), std::move(out), {a}, [a](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{div(g, a)};
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    return detail::make_op<T>("relu", a.shape(), std::move(out), {a}, [a](const Tensor<T>& g) {
        std::vector<T> m(a.data().size());
        const auto& av = a.data();
        for (size_t i = 0; i < m.size(); ++i) m[i] = av[i] > T(0) ? T(1) : T(0);
        return std::vector<Tensor<T>>{mul(g, Tensor<T>::from(a.shape(), std::move(m)))};
    });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : slope * av[i];
    return detail::make_op<T>("leaky_relu", a.shape(), std::move(out), {a},
                              [a, slope](const Tensor<T>& g) {
                                  std::vector<T> m(a.data().size());
                                  const auto& av = a.data();
                                  for (size_t i = 0; i < m.size(); ++i)
                                      m[i] = av[i] > T(0) ? T(1) : slope;
                                  return std::vector<Tensor<T>>{
                                      mul(g, Tensor<T>::from(a.shape(), std::move(m)))};
                              });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) {
        T x = av[i];
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    }
    return detail::make_op<T>("sigmoid", a.shape(), std::move(out), {a}, [a](const Tensor<T>& g) {
        Tensor<T> y = sigmoid(a);
        return std::vector<Tensor<T>>{mul(g, mul(y, rsub_scalar(T(1), y)))};
    });
}

/// Clamp to [lo, hi] with a leaky subgradient outside the interval, so that
/// saturated values stay trainable. Values are hard-clipped regardless.
template <typename T>
Tensor<T> clamp_leaky(const Tensor<T>& a, T lo, T hi, T leak) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, av[i]));
    return detail::make_op<T>("clamp_leaky", a.shape(), std::move(out), {a},
                              [a, lo, hi, leak](const Tensor<T>& g) {
                                  std::vector<T> m(a.data().size());
                                  const auto& av = a.data();
                                  for (size_t i = 0; i < m.size(); ++i)
                                      m[i] = (av[i] > lo && av[i] < hi) ? T(1) : leak;
                                  return std::vector<Tensor<T>>{
                                      mul(g, Tensor<T>::from(a.shape(), std::move(m)))};
                              });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    std::vector<T> out(a.data().size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, av[i]));
    return detail::make_op<T>("clamp", a.shape(), std::move(out), {a},
                              [a, lo, hi](const Tensor<T>& g) {
                                  std::vector<T> m(a.data().size());
                                  const auto& av = a.data();
                                  for (size_t i = 0; i < m.size(); ++i)
                                      m[i] = (av[i] > lo && av[i] < hi) ? T(1) : T(0);
                                  return std::vector<Tensor<T>>{
                                      mul(g, Tensor<T>::from(a.shape(), std::move(m)))};
                              });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = T(0);
    for (T x : a.data()) s += x;
    Shape ash = a.shape();
    return detail::make_op<T>("sum_all", {}, {s}, {a}, [ash](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{broadcast_scalar(g, ash)};
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    if (a.size() == 0) throw ShapeError("mean_all of empty tensor");
    T inv = T(1) / T(a.size());
    return mul_scalar(sum_all(a), inv);
}

/// Fill `shape` with the scalar g (adjoint of sum_all).
template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& g, const Shape& shape) {
    T val = g.item();
    std::vector<T> out(size_t(shape_numel(shape)), val);
    return detail::make_op<T>("broadcast_scalar", shape, std::move(out), {g},
                              [](const Tensor<T>& up) { return std::vector<Tensor<T>>{sum_all(up)}; });
}

// Sum over all axes except the leading (sample) one: (N, ...) -> (N).
template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& a) {
    if (a.ndim() < 1) throw ShapeError("sum_per_sample needs at least 1 dim");
    int n = a.dim(0);
    int64_t inner = a.size() / n;
    std::vector<T> out(size_t(n), T(0));
    const auto& av = a.data();
    for (int i = 0; i < n; ++i) {
        T s = T(0);
        for (int64_t j = 0; j < inner; ++j) s += av[size_t(i * inner + j)];
        out[size_t(i)] = s;
    }
    Shape ash = a.shape();
    return detail::make_op<T>("sum_per_sample", {n}, std::move(out), {a},
                              [ash](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{broadcast_per_sample(g, ash)};
                              });
}

template <typename T>
Tensor<T> mean_per_sample(const Tensor<T>& a) {
    int64_t inner = a.size() / a.dim(0);
    return mul_scalar(sum_per_sample(a), T(1) / T(inner));
}

/// (N) -> shape, replicating each sample's value over its inner block.
template <typename T>
Tensor<T> broadcast_per_sample(const Tensor<T>& w, const Shape& shape) {
    int n = shape[0];
    if (w.ndim() != 1 || w.dim(0) != n) throw ShapeError("broadcast_per_sample: bad weight shape");
    int64_t inner = shape_numel(shape) / n;
    std::vector<T> out(size_t(shape_numel(shape)));
    const auto& wv = w.data();
    for (int i = 0; i < n; ++i)
        for (int64_t j = 0; j < inner; ++j) out[size_t(i * inner + j)] = wv[size_t(i)];
    return detail::make_op<T>("broadcast_per_sample", shape, std::move(out), {w},
                              [](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{sum_per_sample(g)};
                              });
}

/// x:(N,...) scaled per sample by w:(N).
template <typename T>
Tensor<T> mul_per_sample(const Tensor<T>& x, const Tensor<T>& w) {
    int n = x.dim(0);
    if (w.ndim() != 1 || w.dim(0) != n) throw ShapeError("mul_per_sample: bad weight shape");
    int64_t inner = x.size() / n;
    std::vector<T> out(size_t(x.size()));
    const auto& xv = x.data();
    const auto& wv = w.data();
    for (int i = 0; i < n; ++i)
        for (int64_t j = 0; j < inner; ++j) out[size_t(i * inner + j)] = xv[size_t(i * inner + j)] * wv[size_t(i)];
    return detail::make_op<T>("mul_per_sample", x.shape(), std::move(out), {x, w},
                              [x, w](const Tensor<T>& g) {
                                  Tensor<T> gx = mul_per_sample(g, w);
                                  Tensor<T> gw = sum_per_sample(mul(g, x));
                                  return std::vector<Tensor<T>>{gx, gw};
                              });
}

// Channel reductions / broadcasts on (N, C, H, W).

namespace detail {
template <typename T>
void check_nchw(const Tensor<T>& x, const char* what) {
    if (x.ndim() != 4) throw ShapeError(std::string(what) + ": expected (N,C,H,W)");
}
}  // namespace detail

/// Sum over N, H, W -> (C).
template <typename T>
Tensor<T> sum_channels(const Tensor<T>& x) {
    detail::check_nchw(x, "sum_channels");
    int n = x.dim(0), c = x.dim(1);
    int64_t hw = int64_t(x.dim(2)) * x.dim(3);
    std::vector<T> out(size_t(c), T(0));
    const auto& xv = x.data();
    for (int ci = 0; ci < c; ++ci) {
        T s = T(0);
        for (int ni = 0; ni < n; ++ni) {
            const T* p = xv.data() + (int64_t(ni) * c + ci) * hw;
            for (int64_t k = 0; k < hw; ++k) s += p[k];
        }
        out[size_t(ci)] = s;
    }
    Shape xsh = x.shape();
    return detail::make_op<T>("sum_channels", {c}, std::move(out), {x}, [xsh](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{broadcast_channel(g, xsh)};
    });
}

template <typename T>
Tensor<T> mean_channels(const Tensor<T>& x) {
    detail::check_nchw(x, "mean_channels");
    int64_t cnt = int64_t(x.dim(0)) * x.dim(2) * x.dim(3);
    return mul_scalar(sum_channels(x), T(1) / T(cnt));
}

/// (C) -> (N,C,H,W), replicated over N, H, W.
template <typename T>
Tensor<T> broadcast_channel(const Tensor<T>& b, const Shape& shape) {
    int n = shape[0], c = shape[1];
    int64_t hw = int64_t(shape[2]) * shape[3];
    if (b.ndim() != 1 || b.dim(0) != c) throw ShapeError("broadcast_channel: bad shape");
    std::vector<T> out(size_t(shape_numel(shape)));
    const auto& bv = b.data();
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            T val = bv[size_t(ci)];
            T* p = out.data() + (int64_t(ni) * c + ci) * hw;
            for (int64_t k = 0; k < hw; ++k) p[k] = val;
        }
    return detail::make_op<T>("broadcast_channel", shape, std::move(out), {b},
                              [](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{sum_channels(g)};
                              });
}

template <typename T>
Tensor<T> add_bias_channel(const Tensor<T>& x, const Tensor<T>& b) {
    detail::check_nchw(x, "add_bias_channel");
    int n = x.dim(0), c = x.dim(1);
    if (b.ndim() != 1 || b.dim(0) != c) throw ShapeError("add_bias_channel: bad bias shape");
    int64_t hw = int64_t(x.dim(2)) * x.dim(3);
    std::vector<T> out(size_t(x.size()));
    const auto& xv = x.data();
    const auto& bv = b.data();
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const T* xp = xv.data() + (int64_t(ni) * c + ci) * hw;
            T* op = out.data() + (int64_t(ni) * c + ci) * hw;
            T bias = bv[size_t(ci)];
            for (int64_t k = 0; k < hw; ++k) op[k] = xp[k] + bias;
        }
    return detail::make_op<T>("add_bias_channel", x.shape(), std::move(out), {x, b},
                              [](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{g, sum_channels(g)};
                              });
}

template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& s) {
    detail::check_nchw(x, "mul_channel");
    int n = x.dim(0), c = x.dim(1);
    if (s.ndim() != 1 || s.dim(0) != c) throw ShapeError("mul_channel: bad scale shape");
    int64_t hw = int64_t(x.dim(2)) * x.dim(3);
    std::vector<T> out(size_t(x.size()));
    const auto& xv = x.data();
    const auto& sv = s.data();
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const T* xp = xv.data() + (int64_t(ni) * c + ci) * hw;
            T* op = out.data() + (int64_t(ni) * c + ci) * hw;
            T scale = sv[size_t(ci)];
            for (int64_t k = 0; k < hw; ++k) op[k] = xp[k] * scale;
        }
    return detail::make_op<T>("mul_channel", x.shape(), std::move(out), {x, s},
                              [x, s](const Tensor<T>& g) {
                                  Tensor<T> gx = mul_channel(g, s);
                                  Tensor<T> gs = sum_channels(mul(g, x));
                                  return std::vector<Tensor<T>>{gx, gs};
                              });
}

/// (x - m) * scale per channel in one pass; the batch-norm fast path.
template <typename T>
Tensor<T> normalize_channel(const Tensor<T>& x, const Tensor<T>& m, const Tensor<T>& scale) {
    detail::check_nchw(x, "normalize_channel");
    int n = x.dim(0), c = x.dim(1);
    if (m.ndim() != 1 || m.dim(0) != c || scale.ndim() != 1 || scale.dim(0) != c)
        throw ShapeError("normalize_channel: bad stat shapes");
    int64_t hw = int64_t(x.dim(2)) * x.dim(3);
    std::vector<T> out(size_t(x.size()));
    const auto& xv = x.data();
    const auto& mv = m.data();
    const auto& sv = scale.data();
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const T* xp = xv.data() + (int64_t(ni) * c + ci) * hw;
            T* op = out.data() + (int64_t(ni) * c + ci) * hw;
            T mean = mv[size_t(ci)], sc = sv[size_t(ci)];
            for (int64_t k = 0; k < hw; ++k) op[k] = (xp[k] - mean) * sc;
        }
    return detail::make_op<T>("normalize_channel", x.shape(), std::move(out), {x, m, scale},
                              [x, m, scale](const Tensor<T>& g) {
                                  Tensor<T> gx = mul_channel(g, scale);
                                  Tensor<T> gm = neg(mul(scale, sum_channels(g)));
                                  Tensor<T> centered_sum = sub(sum_channels(mul(g, x)),
                                                               mul(m, sum_channels(g)));
                                  return std::vector<Tensor<T>>{gx, gm, centered_sum};
                              });
}

/// (N,F) + (F) row bias.
template <typename T>
Tensor<T> add_bias_row(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.ndim() != 2) throw ShapeError("add_bias_row: expected (N,F)");
    int n = x.dim(0), f = x.dim(1);
    if (b.ndim() != 1 || b.dim(0) != f) throw ShapeError("add_bias_row: bad bias shape");
    std::vector<T> out(size_t(x.size()));
    const auto& xv = x.data();
    const auto& bv = b.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < f; ++j) out[size_t(i) * f + j] = xv[size_t(i) * f + j] + bv[size_t(j)];
    return detail::make_op<T>("add_bias_row", x.shape(), std::move(out), {x, b},
                              [](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{g, sum_rows(g)};
                              });
}

/// (N,F) -> (F), summed over rows.
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
    if (x.ndim() != 2) throw ShapeError("sum_rows: expected (N,F)");
    int n = x.dim(0), f = x.dim(1);
    std::vector<T> out(size_t(f), T(0));
    const auto& xv = x.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < f; ++j) out[size_t(j)] += xv[size_t(i) * f + j];
    int nn = n;
    return detail::make_op<T>("sum_rows", {f}, std::move(out), {x}, [nn, f](const Tensor<T>& g) {
        std::vector<T> out2(size_t(nn) * f);
        const auto& gv = g.data();
        for (int i = 0; i < nn; ++i)
            for (int j = 0; j < f; ++j) out2[size_t(i) * f + j] = gv[size_t(j)];
        Tensor<T> rep = detail::make_op<T>("rep_rows", {nn, f}, std::move(out2), {g},
                                           [](const Tensor<T>& up) {
                                               return std::vector<Tensor<T>>{sum_rows(up)};
                                           });
        return std::vector<Tensor<T>>{rep};
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
    Shape orig = a.shape();
    std::vector<T> vals = a.data();
    return detail::make_op<T>("reshape", std::move(shape), std::move(vals), {a},
                              [orig](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{reshape(g, orig)};
                              });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_nchw(a, "concat_channels");
    detail::check_nchw(b, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: incompatible shapes");
    int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    int64_t hw = int64_t(a.dim(2)) * a.dim(3);
    Shape osh = {n, ca + cb, a.dim(2), a.dim(3)};
    std::vector<T> out(size_t(shape_numel(osh)));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int ni = 0; ni < n; ++ni) {
        std::copy_n(av.data() + int64_t(ni) * ca * hw, ca * hw,
                    out.data() + int64_t(ni) * (ca + cb) * hw);
        std::copy_n(bv.data() + int64_t(ni) * cb * hw, cb * hw,
                    out.data() + int64_t(ni) * (ca + cb) * hw + ca * hw);
    }
    return detail::make_op<T>("concat_channels", osh, std::move(out), {a, b},
                              [ca, cb](const Tensor<T>& g) {
                                  Tensor<T> ga = slice_channels(g, 0, ca);
                                  Tensor<T> gb = slice_channels(g, ca, ca + cb);
                                  return std::vector<Tensor<T>>{ga, gb};
                              });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
    detail::check_nchw(x, "slice_channels");
    int n = x.dim(0), c = x.dim(1);
    if (c0 < 0 || c1 > c || c0 >= c1) throw ShapeError("slice_channels: bad range");
    int64_t hw = int64_t(x.dim(2)) * x.dim(3);
    Shape osh = {n, c1 - c0, x.dim(2), x.dim(3)};
    std::vector<T> out(size_t(shape_numel(osh)));
    const auto& xv = x.data();
    for (int ni = 0; ni < n; ++ni)
        std::copy_n(xv.data() + (int64_t(ni) * c + c0) * hw, int64_t(c1 - c0) * hw,
                    out.data() + int64_t(ni) * (c1 - c0) * hw);
    int ctotal = c;
    return detail::make_op<T>("slice_channels", osh, std::move(out), {x},
                              [c0, c1, ctotal](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{embed_channels(g, c0, ctotal)};
                              });
}

/// Place g:(N,c1-c0,H,W) into a zero tensor with `ctotal` channels at offset c0.
template <typename T>
Tensor<T> embed_channels(const Tensor<T>& g, int c0, int ctotal) {
    detail::check_nchw(g, "embed_channels");
    int n = g.dim(0), cs = g.dim(1);
    int64_t hw = int64_t(g.dim(2)) * g.dim(3);
    Shape osh = {n, ctotal, g.dim(2), g.dim(3)};
    std::vector<T> out(size_t(shape_numel(osh)), T(0));
    const auto& gv = g.data();
    for (int ni = 0; ni < n; ++ni)
        std::copy_n(gv.data() + int64_t(ni) * cs * hw, int64_t(cs) * hw,
                    out.data() + (int64_t(ni) * ctotal + c0) * hw);
    return detail::make_op<T>("embed_channels", osh, std::move(out), {g},
                              [c0, cs](const Tensor<T>& up) {
                                  return std::vector<Tensor<T>>{slice_channels(up, c0, c0 + cs)};
                              });
}

// ---------------------------------------------------------------------------
// Matrix multiply (Eigen-backed)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: expected 2-D tensors");
    int am = a.dim(0), an = a.dim(1);
    int bm = b.dim(0), bn = b.dim(1);
    int m = ta ? an : am, k = ta ? am : an;
    int k2 = tb ? bn : bm, n = tb ? bm : bn;
    if (k != k2) throw ShapeError("matmul: inner dimension mismatch");

    // Row-major buffers viewed column-major are transposes, so compute
    // C^T = op(B)^T * op(A)^T entirely on Eigen's ColMajor fast path.
    using CMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
    using CMap = Eigen::Map<const CMat>;
    std::vector<T> out(size_t(m) * n);
    CMap At(a.data().data(), an, am);  // = A^T
    CMap Bt(b.data().data(), bn, bm);  // = B^T
    Eigen::Map<CMat> Ct(out.data(), n, m);
    if (!ta && !tb)
        Ct.noalias() = Bt * At;
    else if (ta && !tb)
        Ct.noalias() = Bt * At.transpose();
    else if (!ta && tb)
        Ct.noalias() = Bt.transpose() * At;
    else
        Ct.noalias() = Bt.transpose() * At.transpose();

    return detail::make_op<T>("matmul", {m, n}, std::move(out), {a, b},
                              [a, b, ta, tb](const Tensor<T>& g) {
                                  Tensor<T> ga = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                                  Tensor<T> gb = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                                  return std::vector<Tensor<T>>{ga, gb};
                              });
}

// ---------------------------------------------------------------------------
// Autodiff driver
// ---------------------------------------------------------------------------

/// Gradients of a scalar `output` w.r.t. `inputs`. With create_graph the
/// returned tensors are differentiable again (used by the gradient penalty).
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs,
                            bool create_graph = false, Tensor<T> seed = {}) {
    using NodeP = TensorNode<T>*;
    std::vector<Tensor<T>> result(inputs.size());

    if (!seed.defined()) seed = Tensor<T>::ones(output.shape());

    if (!output.requires_grad()) {
        for (size_t i = 0; i < inputs.size(); ++i) result[i] = Tensor<T>::zeros(inputs[i].shape());
        return result;
    }

    // Iterative DFS topological order over grad-requiring nodes.
    std::vector<NodeP> topo;
    std::unordered_map<NodeP, int> state;  // 0 unseen, 1 in progress, 2 done
    std::vector<std::pair<NodeP, size_t>> stack;
    stack.push_back({output.raw(), 0});
    state[output.raw()] = 1;
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NodeP p = node->parents[idx++].get();
            if (p->requires_grad && state[p] == 0) {
                state[p] = 1;
                stack.push_back({p, 0});
            }
        } else {
            state[node] = 2;
            topo.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_map<NodeP, Tensor<T>> grads;
    grads[output.raw()] = seed;

    std::unordered_map<NodeP, bool> wanted;
    for (const auto& in : inputs) wanted[in.raw()] = true;

    GradModeGuard guard(create_graph);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        NodeP node = *it;
        auto git = grads.find(node);
        if (git == grads.end() || !node->vjp) continue;
        Tensor<T> g = git->second;
        std::vector<Tensor<T>> pg = node->vjp(g);
        for (size_t i = 0; i < node->parents.size() && i < pg.size(); ++i) {
            NodeP p = node->parents[i].get();
            if (!p->requires_grad || !pg[i].defined()) continue;
            auto p_it = grads.find(p);
            if (p_it == grads.end())
                grads[p] = pg[i];
            else
                p_it->second = add(p_it->second, pg[i]);
        }
        if (!wanted.count(node)) grads.erase(node);  // consumed; keeps peak memory in check
    }

    for (size_t i = 0; i < inputs.size(); ++i) {
        auto it2 = grads.find(inputs[i].raw());
        result[i] = it2 != grads.end() ? it2->second : Tensor<T>::zeros(inputs[i].shape());
    }
    return result;
}

}  // namespace counterfax
