#pragma once

// Loss terms of the min-max training objective: adversarial classification,
// GAN real/fake terms, symmetry and cycle distances, consistency
// classifications, discriminator gradient penalty, parameter proximity, and
// the weighted total. Classifier / generator / discriminator forwards are
// supplied as callables so each term stays testable in isolation.

#include <optional>
#include <string>

#include "counterfax/nn.hpp"
#include "counterfax/nn_ops.hpp"

namespace counterfax {

// ---------------------------------------------------------------------------
// Methods and weights
// ---------------------------------------------------------------------------

enum class ExplainerMethod { SyCE, CyCE, CyCE_noFc, SSyE, CyCSAE };

inline const char* method_name(ExplainerMethod m) {
    switch (m) {
        case ExplainerMethod::SyCE: return "SyCE";
        case ExplainerMethod::CyCE: return "CyCE";
        case ExplainerMethod::CyCE_noFc: return "CyCE_noFc";
        case ExplainerMethod::SSyE: return "SSyE";
        case ExplainerMethod::CyCSAE: return "CyCSAE";
    }
    return "?";
}

inline ExplainerMethod parse_method(const std::string& s) {
    if (s == "SyCE") return ExplainerMethod::SyCE;
    if (s == "CyCE") return ExplainerMethod::CyCE;
    if (s == "CyCE_noFc") return ExplainerMethod::CyCE_noFc;
    if (s == "SSyE") return ExplainerMethod::SSyE;
    if (s == "CyCSAE") return ExplainerMethod::CyCSAE;
    throw ConfigError("unknown explainer method '" + s +
                      "' (valid: SyCE, CyCE, CyCE_noFc, SSyE, CyCSAE)");
}

struct LossWeights {
    double lambda_d_s = 10.0;
    double lambda_d_cy = 2.0;
    double lambda_fc_a = 0.2;
    double lambda_fc_s = 0.01;
    double lambda_fc_cy = 0.005;
    double lambda_D = 0.25;
    double lambda_D_d = 1.0;
    double lambda_gp_d = 1.0;
    std::optional<double> lambda_w;  // CyCSAE only

    void validate(ExplainerMethod method) const {
        auto check = [](double v, const char* name) {
            if (v < 0) throw ConfigError(std::string("loss weight ") + name + " must be >= 0");
        };
        check(lambda_d_s, "lambda_d_s");
        check(lambda_d_cy, "lambda_d_cy");
        check(lambda_fc_a, "lambda_fc_a");
        check(lambda_fc_s, "lambda_fc_s");
        check(lambda_fc_cy, "lambda_fc_cy");
        check(lambda_D, "lambda_D");
        check(lambda_D_d, "lambda_D_d");
        check(lambda_gp_d, "lambda_gp_d");
        if (lambda_w) check(*lambda_w, "lambda_w");
        if (method == ExplainerMethod::CyCSAE && !lambda_w)
            throw ConfigError("CyCSAE requires lambda_w");
    }
};

/// Per-term loss values for one training phase. Terms a method does not use
/// are zero; `total` is the exact weighted sum in canonical order
/// (d_s, d_cy, fc_a, fc_s, fc_cy, D, w).
struct LossBreakdown {
    double L_fc_a = 0, L_D_g = 0, L_d_s = 0, L_fc_s = 0, L_d_cy = 0, L_fc_cy = 0, L_w = 0;
    double total = 0;
};

struct MethodTerms {
    bool d_s = false, d_cy = false, fc_a = false, fc_s = false, fc_cy = false, w = false;
};

inline MethodTerms active_terms(ExplainerMethod m) {
    switch (m) {
        case ExplainerMethod::SyCE: return {true, true, true, true, true, false};
        case ExplainerMethod::CyCE: return {false, true, true, false, true, false};
        case ExplainerMethod::CyCE_noFc: return {false, true, false, false, false, false};
        case ExplainerMethod::SSyE: return {true, false, true, true, false, false};
        case ExplainerMethod::CyCSAE: return {true, true, true, true, true, true};
    }
    return {};
}

inline LossBreakdown compose_total(const LossBreakdown& terms, const LossWeights& weights,
                                   ExplainerMethod method) {
    weights.validate(method);
    MethodTerms on = active_terms(method);
    LossBreakdown out;
    out.L_d_s = on.d_s ? terms.L_d_s : 0.0;
    out.L_d_cy = on.d_cy ? terms.L_d_cy : 0.0;
    out.L_fc_a = on.fc_a ? terms.L_fc_a : 0.0;
    out.L_fc_s = on.fc_s ? terms.L_fc_s : 0.0;
    out.L_fc_cy = on.fc_cy ? terms.L_fc_cy : 0.0;
    out.L_D_g = terms.L_D_g;
    out.L_w = on.w ? terms.L_w : 0.0;
    out.total = weights.lambda_d_s * out.L_d_s + weights.lambda_d_cy * out.L_d_cy +
                weights.lambda_fc_a * out.L_fc_a + weights.lambda_fc_s * out.L_fc_s +
                weights.lambda_fc_cy * out.L_fc_cy + weights.lambda_D * out.L_D_g +
                (on.w ? weights.lambda_w.value() * out.L_w : 0.0);
    return out;
}

// ---------------------------------------------------------------------------
// Scalar building blocks
// ---------------------------------------------------------------------------

/// Binary cross entropy on probabilities clamped to [1e-7, 1-1e-7],
/// batch-averaged. Targets may be hard {0,1} or soft probabilities.
template <typename T>
Tensor<T> bce(const Tensor<T>& target, const Tensor<T>& prob) {
    detail::check_same_shape(target, prob, "bce");
    Tensor<T> p = clamp(prob, T(1e-7), T(1) - T(1e-7));
    Tensor<T> ll = add(mul(target, log_t(p)), mul(rsub_scalar(T(1), target), log_t(rsub_scalar(T(1), p))));
    return neg(mean_all(ll));
}

template <typename T>
Tensor<T> bce_const_target(T target, const Tensor<T>& prob) {
    return bce(Tensor<T>::full(prob.shape(), target), prob);
}

/// ||a-b||_{1,2}: per image, half of (mean absolute difference + root mean
/// squared difference), then averaged over the batch.
template <typename T>
Tensor<T> l12_distance(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "l12_distance");
    Tensor<T> d = sub(a, b);
    Tensor<T> l1 = mean_per_sample(abs_t(d));
    Tensor<T> l2 = sqrt0(mean_per_sample(square(d)));
    return mean_all(mul_scalar(add(l1, l2), T(0.5)));
}

template <typename T>
Tensor<T> decisions_to_targets(const std::vector<int>& decisions, bool flipped) {
    int n = int(decisions.size());
    std::vector<T> t(decisions.size());
    for (size_t i = 0; i < t.size(); ++i)
        t[i] = flipped ? T(1 - decisions[i]) : T(decisions[i]);
    return Tensor<T>::from({n}, std::move(t));
}

// ---------------------------------------------------------------------------
// Full loss terms. `fc` maps an image batch to probabilities; `g0`/`g1` map
// image batches to image batches; `d` maps an image batch to logits. Either
// batch may be undefined, meaning that domain contributes nothing.
// ---------------------------------------------------------------------------

/// Attack term: generated images must be classified opposite to the recorded
/// decision of their source.
template <typename T, typename FC, typename G0, typename G1>
Tensor<T> adversarial_classification_loss(const FC& fc, const G0& g0, const G1& g1,
                                          const Tensor<T>& batch0, const Tensor<T>& batch1,
                                          const std::vector<int>& dec0,
                                          const std::vector<int>& dec1) {
    if (!batch0.defined() && !batch1.defined())
        throw UndefinedError("adversarial_classification_loss: both batches empty");
    Tensor<T> loss;
    if (batch0.defined()) {
        Tensor<T> t = decisions_to_targets<T>(dec0, /*flipped=*/true);
        loss = bce(t, fc(g0(batch0)));
    }
    if (batch1.defined()) {
        Tensor<T> t = decisions_to_targets<T>(dec1, /*flipped=*/true);
        Tensor<T> term = bce(t, fc(g1(batch1)));
        loss = loss.defined() ? add(loss, term) : term;
    }
    return loss;
}

/// Classical GAN discriminator term: BCE(1, D(real)) + BCE(0, D(fake)),
/// probabilities via sigmoid of the logits.
template <typename T, typename D>
Tensor<T> gan_discriminator_term(const D& d, const Tensor<T>& real_batch,
                                 const Tensor<T>& fake_batch) {
    Tensor<T> lr = bce_const_target(T(1), sigmoid(d(real_batch)));
    Tensor<T> lf = bce_const_target(T(0), sigmoid(d(fake_batch)));
    return add(lr, lf);
}

/// Non-saturating generator objective: BCE(1, D(fake)).
template <typename T, typename D>
Tensor<T> generator_gan_loss(const D& d, const Tensor<T>& fake_batch) {
    return bce_const_target(T(1), sigmoid(d(fake_batch)));
}

/// Symmetry terms: L_d_s is the l12 distance between x and g_i^2(x);
/// L_fc_s drives the classification of g_i^2(x) back to the recorded decision.
template <typename T, typename FC, typename G0, typename G1>
std::pair<Tensor<T>, Tensor<T>> symmetry_losses(const FC& fc, const G0& g0, const G1& g1,
                                                const Tensor<T>& batch0, const Tensor<T>& batch1,
                                                const std::vector<int>& dec0,
                                                const std::vector<int>& dec1) {
    Tensor<T> l_d, l_fc;
    if (batch0.defined()) {
        Tensor<T> gg = g0(g0(batch0));
        l_d = l12_distance(batch0, gg);
        l_fc = bce(decisions_to_targets<T>(dec0, false), fc(gg));
    }
    if (batch1.defined()) {
        Tensor<T> gg = g1(g1(batch1));
        Tensor<T> td = l12_distance(batch1, gg);
        Tensor<T> tf = bce(decisions_to_targets<T>(dec1, false), fc(gg));
        l_d = l_d.defined() ? add(l_d, td) : td;
        l_fc = l_fc.defined() ? add(l_fc, tf) : tf;
    }
    if (!l_d.defined()) throw UndefinedError("symmetry_losses: both batches empty");
    return {l_d, l_fc};
}

/// Cycle terms: g1(g0(x)) must return to x for x in chi0 (and symmetrically),
/// both in pixels (l12) and in classification.
template <typename T, typename FC, typename G0, typename G1>
std::pair<Tensor<T>, Tensor<T>> cycle_losses(const FC& fc, const G0& g0, const G1& g1,
                                             const Tensor<T>& batch0, const Tensor<T>& batch1,
                                             const std::vector<int>& dec0,
                                             const std::vector<int>& dec1) {
    Tensor<T> l_d, l_fc;
    if (batch0.defined()) {
        Tensor<T> cyc = g1(g0(batch0));
        l_d = l12_distance(batch0, cyc);
        l_fc = bce(decisions_to_targets<T>(dec0, false), fc(cyc));
    }
    if (batch1.defined()) {
        Tensor<T> cyc = g0(g1(batch1));
        Tensor<T> td = l12_distance(batch1, cyc);
        Tensor<T> tf = bce(decisions_to_targets<T>(dec1, false), fc(cyc));
        l_d = l_d.defined() ? add(l_d, td) : td;
        l_fc = l_fc.defined() ? add(l_fc, tf) : tf;
    }
    if (!l_d.defined()) throw UndefinedError("cycle_losses: both batches empty");
    return {l_d, l_fc};
}

/// Gradient penalty on real/fake interpolates: mean (||grad_x D(x_hat)|| - 1)^2.
/// Exact parameter gradients come from differentiating through the backward
/// pass (second-order autodiff).
template <typename T, typename D>
Tensor<T> gradient_penalty(const D& d, const Tensor<T>& real_batch, const Tensor<T>& fake_batch,
                           RandomStream& rng) {
    detail::check_same_shape(real_batch, fake_batch, "gradient_penalty");
    int n = real_batch.dim(0);
    std::vector<T> eps(size_t(n), T(0));
    for (auto& e : eps) e = T(rng.uniform());
    Tensor<T> xhat;
    {
        NoGradGuard ng;
        Tensor<T> epsv = Tensor<T>::from({n}, eps);
        Tensor<T> mixed = add(mul_per_sample(real_batch.detach(), epsv),
                              mul_per_sample(fake_batch.detach(), rsub_scalar(T(1), epsv)));
        xhat = mixed.detach();
    }
    xhat.set_requires_grad(true);

    Tensor<T> logits = d(xhat);
    Tensor<T> gx = grad(sum_all(logits), {xhat}, /*create_graph=*/true)[0];
    Tensor<T> norms = sqrt0(sum_per_sample(square(gx)));
    return mean_all(square(add_scalar(norms, T(-1))));
}

template <typename T, typename D>
Tensor<T> gradient_penalty(const D& d, const Tensor<T>& real_batch, const Tensor<T>& fake_batch,
                           uint64_t seed) {
    RandomStream rng(seed, "gradient_penalty");
    return gradient_penalty(d, real_batch, fake_batch, rng);
}

/// Mean squared distance between two parameter collections, averaged over
/// the total parameter count so the weight is architecture-size independent.
template <typename T>
Tensor<T> weight_proximity(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
    if (a.size() != b.size()) throw ShapeError("weight_proximity: collection size mismatch");
    if (a.empty()) throw ShapeError("weight_proximity: empty collections");
    Tensor<T> acc;
    int64_t count = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        detail::check_same_shape(a[i], b[i], "weight_proximity");
        Tensor<T> s = sum_all(square(sub(a[i], b[i])));
        acc = acc.defined() ? add(acc, s) : s;
        count += a[i].size();
    }
    return mul_scalar(acc, T(1) / T(count));
}

}  // namespace counterfax
