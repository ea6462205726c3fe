#pragma once

// Layer building blocks over the autodiff tensors: named parameter store,
// conv / dense / batch-norm layers, dropout, and the Adam optimizer.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "counterfax/nn_ops.hpp"

namespace counterfax {

/// Ordered collection of named parameters and (non-trained) buffers.
/// Order is the serialization and hashing order, so it must be stable.
template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, Tensor<T>>> params;
    std::vector<std::pair<std::string, Tensor<T>>> buffers;

    Tensor<T> add_param(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        params.emplace_back(name, t);
        return t;
    }

    Tensor<T> add_buffer(const std::string& name, Tensor<T> t) {
        buffers.emplace_back(name, t);
        return t;
    }

    std::vector<Tensor<T>> param_list() const {
        std::vector<Tensor<T>> out;
        out.reserve(params.size());
        for (const auto& [_, t] : params) out.push_back(t);
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [_, t] : params) n += t.size();
        return n;
    }

    uint64_t param_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : params) {
            h = fnv1a64(name, h);
            h = hash_values(t.data(), h);
        }
        return h;
    }

    void absorb(const ParamStore<T>& other) {
        for (const auto& p : other.params) params.push_back(p);
        for (const auto& b : other.buffers) buffers.push_back(b);
    }
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> he_normal(Shape shape, int64_t fan_in, RandomStream& rng) {
    double stddev = std::sqrt(2.0 / double(fan_in));
    std::vector<T> v(size_t(shape_numel(shape)));
    for (auto& x : v) x = T(rng.normal(0.0, stddev));
    return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> xavier_uniform(Shape shape, int64_t fan_in, int64_t fan_out, RandomStream& rng) {
    double lim = std::sqrt(6.0 / double(fan_in + fan_out));
    std::vector<T> v(size_t(shape_numel(shape)));
    for (auto& x : v) x = T(rng.uniform(-lim, lim));
    return Tensor<T>::from(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct TrainContext {
    bool training = false;
    RandomStream* rng = nullptr;  // required when training with dropout
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> w, b;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& store, const std::string& name, int cin, int cout, int k, int stride_,
                int pad_, RandomStream& rng)
        : stride(stride_), pad(pad_) {
        w = store.add_param(name + ".w", he_normal<T>({cout, cin, k, k}, int64_t(cin) * k * k, rng));
        b = store.add_param(name + ".b", Tensor<T>::zeros({cout}));
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return add_bias_channel(conv2d(x, w, stride, pad), b);
    }
};

template <typename T>
struct DenseLayer {
    Tensor<T> w, b;  // w: (in, out)

    DenseLayer() = default;
    DenseLayer(ParamStore<T>& store, const std::string& name, int in, int out, RandomStream& rng) {
        w = store.add_param(name + ".w", he_normal<T>({in, out}, in, rng));
        b = store.add_param(name + ".b", Tensor<T>::zeros({out}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return add_bias_row(matmul(x, w), b); }
};

/// Per-channel batch normalization. Training mode uses batch statistics and
/// updates running averages; inference mode uses the stored running stats.
template <typename T>
struct BatchNorm2dLayer {
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;  // buffers, updated outside the graph
    T momentum = T(0.9);
    T eps = T(1e-5);

    BatchNorm2dLayer() = default;
    BatchNorm2dLayer(ParamStore<T>& store, const std::string& name, int c) {
        gamma = store.add_param(name + ".gamma", Tensor<T>::ones({c}));
        beta = store.add_param(name + ".beta", Tensor<T>::zeros({c}));
        running_mean = store.add_buffer(name + ".running_mean", Tensor<T>::zeros({c}));
        running_var = store.add_buffer(name + ".running_var", Tensor<T>::ones({c}));
    }

    Tensor<T> forward(const Tensor<T>& x, const TrainContext& ctx) {
        if (ctx.training) {
            Tensor<T> m = mean_channels(x);
            Tensor<T> centered = normalize_channel(x, m, Tensor<T>::ones({x.dim(1)}));
            Tensor<T> var = mean_channels(square(centered));
            {
                NoGradGuard ng;
                auto& rm = running_mean.data();
                auto& rv = running_var.data();
                const auto& mv = m.data();
                const auto& vv = var.data();
                for (size_t i = 0; i < rm.size(); ++i) {
                    rm[i] = momentum * rm[i] + (T(1) - momentum) * mv[i];
                    rv[i] = momentum * rv[i] + (T(1) - momentum) * vv[i];
                }
            }
            Tensor<T> scale = div(gamma, sqrt0(add_scalar(var, eps)));
            return add_bias_channel(normalize_channel(x, m, scale), beta);
        }
        Tensor<T> scale = div(gamma, sqrt0(add_scalar(running_var.detach(), eps)));
        return add_bias_channel(normalize_channel(x, running_mean.detach(), scale), beta);
    }
};

/// Inverted dropout; identity in inference mode or at rate 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, const TrainContext& ctx) {
    if (!ctx.training || rate <= T(0)) return x;
    if (!ctx.rng) throw ConfigError("dropout: training context has no RNG");
    SplitMix64 sm{ctx.rng->next_u64()};
    std::vector<T> mask(size_t(x.size()));
    T scale = T(1) / (T(1) - rate);
    for (auto& m : mask) m = sm.uniform() < double(rate) ? T(0) : scale;
    return mul(x, Tensor<T>::from(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
public:
    Adam() = default;
    explicit Adam(std::vector<Tensor<T>> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
                  T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(size_t(params_[i].size()), T(0));
            v_[i].assign(size_t(params_[i].size()), T(0));
        }
    }

    T learning_rate() const { return lr_; }
    void set_learning_rate(T lr) { lr_ = lr; }
    int64_t step_count() const { return t_; }

    void step(const std::vector<Tensor<T>>& grads) {
        if (grads.size() != params_.size()) throw ShapeError("Adam::step: gradient count mismatch");
        ++t_;
        T bc1 = T(1) - T(std::pow(double(beta1_), double(t_)));
        T bc2 = T(1) - T(std::pow(double(beta2_), double(t_)));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].data();
            const auto& g = grads[i].data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t k = 0; k < p.size(); ++k) {
                m[k] = beta1_ * m[k] + (T(1) - beta1_) * g[k];
                v[k] = beta2_ * v[k] + (T(1) - beta2_) * g[k] * g[k];
                T mhat = m[k] / bc1;
                T vhat = v[k] / bc2;
                p[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> m_, v_;
    T lr_ = T(1e-3), beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
    int64_t t_ = 0;
};

}  // namespace counterfax
