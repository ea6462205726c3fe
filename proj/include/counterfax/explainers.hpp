#pragma once

// The explainer embodiments: SyCE, CyCE, the CyCE-without-classification
// ablation, SSyE (single generator), and CyCSAE (stable/adversarial head
// pairs on shared trunks). Covers generator wiring, stable / adversarial
// generation, explanation-map extraction, and the three-phase alternating
// training loop (generators driven by chi0, generators driven by chi1,
// then both discriminators).

#include <optional>

#include "counterfax/losses.hpp"
#include "counterfax/nets.hpp"

namespace counterfax {

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Nonnegative per-pixel relevance map, |stable - adversary|.
struct ExplanationMap {
    int height = 0, width = 0;
    std::vector<float> values;

    float at(int r, int c) const { return values[size_t(r) * width + c]; }
};

struct TrainSchedule {
    int epochs = 10;
    int batch_size = 64;
    double gen_lr = 1e-4;
    double disc_lr = 2e-4;
    uint64_t seed = 0;
    // Same geometric transformations as classifier training.
    AugmentConfig augment;

    void validate() const {
        if (epochs < 0) throw ConfigError("train schedule: epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("train schedule: batch_size must be >= 1");
        if (gen_lr <= 0 || disc_lr <= 0) throw ConfigError("train schedule: learning rates must be > 0");
    }
};

/// Stable + adversarial generator pair sharing one UNet trunk, with two
/// separated final conv blocks whose parameters the proximity term couples.
template <typename T>
struct GeneratorPair {
    GeneratorSpec spec;
    int input_size = 28;
    ParamStore<T> store;
    UNetTrunk<T> trunk;
    GeneratorHead<T> head_s, head_a;
    std::vector<Tensor<T>> head_s_params, head_a_params;

    void build(const GeneratorSpec& s, int input_size_, uint64_t seed) {
        spec = s;
        input_size = input_size_;
        GeneratorSpec head_spec = s;
        head_spec.tail_convs = std::max(1, s.tail_convs);  // the separated final block
        RandomStream rng(seed, "generator_pair/init");
        trunk.build(store, "trunk.", s, input_size_, rng);
        size_t mark = store.params.size();
        head_s.build(store, "head_s.", head_spec, rng);
        for (size_t i = mark; i < store.params.size(); ++i)
            head_s_params.push_back(store.params[i].second);
        mark = store.params.size();
        head_a.build(store, "head_a.", head_spec, rng);
        for (size_t i = mark; i < store.params.size(); ++i)
            head_a_params.push_back(store.params[i].second);
    }

    Tensor<T> forward_stable(const Tensor<T>& x, TrainContext& ctx) {
        return head_s.forward(trunk.forward(x, ctx), x, ctx);
    }
    Tensor<T> forward_adv(const Tensor<T>& x, TrainContext& ctx) {
        return head_a.forward(trunk.forward(x, ctx), x, ctx);
    }
    std::pair<Tensor<T>, Tensor<T>> forward_both(const Tensor<T>& x, TrainContext& ctx) {
        Tensor<T> f = trunk.forward(x, ctx);
        return {head_s.forward(f, x, ctx), head_a.forward(f, x, ctx)};
    }
};

template <typename T = float>
struct Explainer {
    ExplainerMethod method = ExplainerMethod::SyCE;
    GeneratorSpec gen_spec;
    DiscriminatorSpec disc_spec;
    LossWeights weights;
    double threshold = 0.5;
    uint64_t seed = 0;
    int input_size = 28;

    const LeNetClassifier<T>* classifier = nullptr;
    uint64_t classifier_hash = 0;

    // Role-keyed generators; exactly the roles the method requires are set.
    std::optional<Generator<T>> g0, g1, g;
    std::optional<GeneratorPair<T>> pair0, pair1;
    Discriminator<T> D0, D1;

    std::vector<std::pair<std::string, ParamStore<T>*>> stores() {
        std::vector<std::pair<std::string, ParamStore<T>*>> out;
        if (g0) out.push_back({"g0/", &g0->store});
        if (g1) out.push_back({"g1/", &g1->store});
        if (g) out.push_back({"g/", &g->store});
        if (pair0) out.push_back({"pair0/", &pair0->store});
        if (pair1) out.push_back({"pair1/", &pair1->store});
        out.push_back({"D0/", &D0.store});
        out.push_back({"D1/", &D1.store});
        return out;
    }

    std::vector<Tensor<T>> generator_params() {
        std::vector<Tensor<T>> out;
        for (auto& [name, store] : stores()) {
            if (name[0] != 'g' && name[0] != 'p') continue;
            for (auto& [_, t] : store->params) out.push_back(t);
        }
        return out;
    }

    uint64_t generators_hash() {
        uint64_t h = 0xcbf29ce484222325ull;
        for (auto& [name, store] : stores()) {
            if (name[0] != 'g' && name[0] != 'p') continue;
            h = fnv1a64(name, h);
            for (const auto& [pname, t] : store->params) {
                h = fnv1a64(pname, h);
                h = hash_values(t.data(), h);
            }
        }
        return h;
    }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

template <typename T = float>
Explainer<T> build_explainer(ExplainerMethod method, const GeneratorSpec& gen_spec,
                             const DiscriminatorSpec& disc_spec,
                             const LeNetClassifier<T>* classifier, const LossWeights& weights,
                             double threshold, uint64_t seed) {
    if (!classifier) throw ConfigError("build_explainer: classifier is required");
    if (!classifier->frozen) throw ConfigError("build_explainer: classifier must be frozen");
    if (threshold <= 0 || threshold >= 1) throw ConfigError("build_explainer: threshold in (0,1)");
    weights.validate(method);
    gen_spec.validate();
    disc_spec.validate();

    Explainer<T> e;
    e.method = method;
    e.gen_spec = gen_spec;
    e.disc_spec = disc_spec;
    e.weights = weights;
    e.threshold = threshold;
    e.seed = seed;
    e.input_size = classifier->input_size;
    e.classifier = classifier;
    e.classifier_hash = classifier->param_hash();

    switch (method) {
        case ExplainerMethod::SyCE:
        case ExplainerMethod::CyCE:
        case ExplainerMethod::CyCE_noFc:
            e.g0 = build_generator<T>(gen_spec, e.input_size, seed ^ fnv1a64("g0"));
            e.g1 = build_generator<T>(gen_spec, e.input_size, seed ^ fnv1a64("g1"));
            break;
        case ExplainerMethod::SSyE:
            e.g = build_generator<T>(gen_spec, e.input_size, seed ^ fnv1a64("g"));
            break;
        case ExplainerMethod::CyCSAE:
            e.pair0.emplace();
            e.pair0->build(gen_spec, e.input_size, seed ^ fnv1a64("pair0"));
            e.pair1.emplace();
            e.pair1->build(gen_spec, e.input_size, seed ^ fnv1a64("pair1"));
            break;
    }
    e.D0 = build_discriminator<T>(disc_spec, e.input_size, seed ^ fnv1a64("D0"));
    e.D1 = build_discriminator<T>(disc_spec, e.input_size, seed ^ fnv1a64("D1"));
    return e;
}

// ---------------------------------------------------------------------------
// Generation and explanation maps (inference mode throughout)
// ---------------------------------------------------------------------------

namespace explainerdetail {

template <typename T>
void check_classifier_unchanged(const Explainer<T>& e) {
    if (e.classifier->param_hash() != e.classifier_hash)
        throw NumericError("frozen-classifier contract violated: parameter hash changed");
}

/// Adversarial generation for a whole batch known to be in domain `side`.
template <typename T>
Tensor<T> adversary_forward(Explainer<T>& e, int side, const Tensor<T>& x, TrainContext ctx) {
    switch (e.method) {
        case ExplainerMethod::SyCE:
        case ExplainerMethod::CyCE:
        case ExplainerMethod::CyCE_noFc:
            return (side == 0 ? *e.g0 : *e.g1).forward(x, ctx);
        case ExplainerMethod::SSyE:
            return e.g->forward(x, ctx);
        case ExplainerMethod::CyCSAE:
            return (side == 0 ? *e.pair0 : *e.pair1).forward_adv(x, ctx);
    }
    throw ConfigError("adversary_forward: bad method");
}

template <typename T>
Tensor<T> stable_forward(Explainer<T>& e, int side, const Tensor<T>& x, TrainContext ctx) {
    switch (e.method) {
        case ExplainerMethod::SyCE: {
            auto& gen = side == 0 ? *e.g0 : *e.g1;
            return gen.forward(gen.forward(x, ctx), ctx);
        }
        case ExplainerMethod::CyCE:
        case ExplainerMethod::CyCE_noFc:
            return x;
        case ExplainerMethod::SSyE:
            return e.g->forward(e.g->forward(x, ctx), ctx);
        case ExplainerMethod::CyCSAE:
            return (side == 0 ? *e.pair0 : *e.pair1).forward_stable(x, ctx);
    }
    throw ConfigError("stable_forward: bad method");
}

template <typename T>
std::vector<int> decide_batch(const Explainer<T>& e, const std::vector<Image>& images) {
    auto probs = predict_prob(*e.classifier, images);
    std::vector<int> sides(images.size());
    for (size_t i = 0; i < images.size(); ++i) sides[i] = decide_prob(probs[i], e.threshold);
    return sides;
}

enum class GenKind { adversary, stable };

template <typename T>
std::vector<Image> route_batch(Explainer<T>& e, const std::vector<Image>& images, GenKind kind,
                               int chunk = 64) {
    std::vector<Image> out(images.size());
    auto sides = decide_batch(e, images);
    NoGradGuard ng;
    TrainContext ctx{false, nullptr};
    for (int side = 0; side <= 1; ++side) {
        std::vector<size_t> idx;
        for (size_t i = 0; i < images.size(); ++i)
            if (sides[i] == side) idx.push_back(i);
        // CyCE's stable generation is the input itself, bit-exactly.
        if (kind == GenKind::stable &&
            (e.method == ExplainerMethod::CyCE || e.method == ExplainerMethod::CyCE_noFc)) {
            for (size_t i : idx) out[i] = images[i];
            continue;
        }
        for (size_t o = 0; o < idx.size(); o += size_t(chunk)) {
            size_t hi = std::min(idx.size(), o + size_t(chunk));
            std::vector<Image> batch;
            for (size_t k = o; k < hi; ++k) batch.push_back(images[idx[k]]);
            Tensor<T> x = images_to_tensor<T>(batch);
            Tensor<T> y = kind == GenKind::adversary ? adversary_forward(e, side, x, ctx)
                                                     : stable_forward(e, side, x, ctx);
            for (size_t k = o; k < hi; ++k) out[idx[k]] = image_from_tensor(y, int(k - o));
        }
    }
    return out;
}

}  // namespace explainerdetail

template <typename T>
std::vector<Image> adversary_batch(Explainer<T>& e, const std::vector<Image>& images) {
    return explainerdetail::route_batch(e, images, explainerdetail::GenKind::adversary);
}

template <typename T>
std::vector<Image> stable_batch(Explainer<T>& e, const std::vector<Image>& images) {
    return explainerdetail::route_batch(e, images, explainerdetail::GenKind::stable);
}

template <typename T>
Image adversary(Explainer<T>& e, const Image& x) {
    return adversary_batch(e, std::vector<Image>{x})[0];
}

template <typename T>
Image stable(Explainer<T>& e, const Image& x) {
    return stable_batch(e, std::vector<Image>{x})[0];
}

inline ExplanationMap map_from_images(const Image& stable_img, const Image& adv_img) {
    ExplanationMap m;
    m.height = stable_img.height;
    m.width = stable_img.width;
    m.values.resize(stable_img.pixels.size());
    for (size_t i = 0; i < m.values.size(); ++i)
        m.values[i] = std::abs(stable_img.pixels[i] - adv_img.pixels[i]);
    return m;
}

template <typename T>
std::vector<ExplanationMap> explanation_map_batch(Explainer<T>& e, const std::vector<Image>& images) {
    auto stables = stable_batch(e, images);
    auto advs = adversary_batch(e, images);
    std::vector<ExplanationMap> maps(images.size());
    for (size_t i = 0; i < images.size(); ++i) maps[i] = map_from_images(stables[i], advs[i]);
    return maps;
}

template <typename T>
ExplanationMap explanation_map(Explainer<T>& e, const Image& x) {
    return explanation_map_batch(e, std::vector<Image>{x})[0];
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

template <typename T>
struct ExplainerOptState {
    Adam<T> gen, d0, d1;
    RandomStream rng;
    std::vector<Tensor<T>> gen_params, d0_params, d1_params;

    ExplainerOptState(Explainer<T>& e, const TrainSchedule& sched)
        : rng(sched.seed, "explainer/train") {
        gen_params = e.generator_params();
        d0_params = e.D0.store.param_list();
        d1_params = e.D1.store.param_list();
        gen = Adam<T>(gen_params, T(sched.gen_lr));
        d0 = Adam<T>(d0_params, T(sched.disc_lr));
        d1 = Adam<T>(d1_params, T(sched.disc_lr));
    }
};

struct StepResult {
    LossBreakdown phase0, phase1;  // generator phases driven by chi0 / chi1
    double d0_loss = 0, d1_loss = 0;
    double d0_gp = 0, d1_gp = 0;
};

namespace explainerdetail {

/// One generator optimization phase driven by a batch from domain `side`.
template <typename T>
LossBreakdown generator_phase(Explainer<T>& e, int side, const Tensor<T>& batch,
                              ExplainerOptState<T>& opt) {
    TrainContext ctx{true, &opt.rng};
    const LeNetClassifier<T>& fc = *e.classifier;
    Discriminator<T>& d_target = side == 0 ? e.D1 : e.D0;
    MethodTerms on = active_terms(e.method);
    int n = batch.dim(0);

    Tensor<T> adv, stab, cyc;
    if (e.method == ExplainerMethod::CyCSAE) {
        auto& pair = side == 0 ? *e.pair0 : *e.pair1;
        auto& pair_other = side == 0 ? *e.pair1 : *e.pair0;
        auto [s, a] = pair.forward_both(batch, ctx);
        stab = s;
        adv = a;
        cyc = pair_other.forward_adv(adv, ctx);
    } else if (e.method == ExplainerMethod::SSyE) {
        adv = e.g->forward(batch, ctx);
        stab = e.g->forward(adv, ctx);
    } else {
        auto& g_src = side == 0 ? *e.g0 : *e.g1;
        auto& g_oth = side == 0 ? *e.g1 : *e.g0;
        adv = g_src.forward(batch, ctx);
        if (on.d_s) stab = g_src.forward(adv, ctx);
        cyc = g_oth.forward(adv, ctx);
    }

    Tensor<T> dec = Tensor<T>::full({n}, T(side));
    Tensor<T> flipped = Tensor<T>::full({n}, T(1 - side));

    Tensor<T> L_fc_a, L_D_g, L_d_s, L_fc_s, L_d_cy, L_fc_cy, L_w;
    if (on.fc_a) L_fc_a = bce(flipped, fc.prob_forward(adv));
    L_D_g = bce_const_target(T(1), sigmoid(d_target.forward(adv)));
    if (on.d_s) {
        L_d_s = l12_distance(batch, stab);
        if (on.fc_s) L_fc_s = bce(dec, fc.prob_forward(stab));
    }
    if (on.d_cy) {
        L_d_cy = l12_distance(batch, cyc);
        if (on.fc_cy) L_fc_cy = bce(dec, fc.prob_forward(cyc));
    }
    if (on.w) {
        L_w = add(weight_proximity(e.pair0->head_s_params, e.pair0->head_a_params),
                  weight_proximity(e.pair1->head_s_params, e.pair1->head_a_params));
    }

    // Weighted total, canonical term order: d_s, d_cy, fc_a, fc_s, fc_cy, D, w.
    Tensor<T> total;
    auto acc = [&](const Tensor<T>& term, double lambda) {
        if (!term.defined()) return;
        Tensor<T> wterm = mul_scalar(term, T(lambda));
        total = total.defined() ? add(total, wterm) : wterm;
    };
    acc(L_d_s, e.weights.lambda_d_s);
    acc(L_d_cy, e.weights.lambda_d_cy);
    acc(L_fc_a, e.weights.lambda_fc_a);
    acc(L_fc_s, e.weights.lambda_fc_s);
    acc(L_fc_cy, e.weights.lambda_fc_cy);
    acc(L_D_g, e.weights.lambda_D);
    acc(L_w, e.weights.lambda_w.value_or(0.0));

    auto grads = grad(total, opt.gen_params);
    opt.gen.step(grads);

    LossBreakdown terms;
    terms.L_fc_a = L_fc_a.defined() ? double(L_fc_a.item()) : 0.0;
    terms.L_D_g = double(L_D_g.item());
    terms.L_d_s = L_d_s.defined() ? double(L_d_s.item()) : 0.0;
    terms.L_fc_s = L_fc_s.defined() ? double(L_fc_s.item()) : 0.0;
    terms.L_d_cy = L_d_cy.defined() ? double(L_d_cy.item()) : 0.0;
    terms.L_fc_cy = L_fc_cy.defined() ? double(L_fc_cy.item()) : 0.0;
    terms.L_w = L_w.defined() ? double(L_w.item()) : 0.0;
    return compose_total(terms, e.weights, e.method);
}

/// Discriminator update: D learns real `side` images against adversaries
/// generated from the opposite domain, with the gradient penalty.
template <typename T>
std::pair<double, double> discriminator_phase(Explainer<T>& e, int side, const Tensor<T>& real_batch,
                                              const Tensor<T>& opposite_batch,
                                              ExplainerOptState<T>& opt) {
    Tensor<T> fake;
    {
        NoGradGuard ng;
        TrainContext ctx{true, &opt.rng};
        fake = adversary_forward(e, 1 - side, opposite_batch, ctx).detach();
    }
    Discriminator<T>& D = side == 0 ? e.D0 : e.D1;
    auto d_fn = [&D](const Tensor<T>& x) { return D.forward(x); };

    Tensor<T> L_D = gan_discriminator_term(d_fn, real_batch, fake);
    Tensor<T> L_gp = gradient_penalty(d_fn, real_batch, fake, opt.rng);
    Tensor<T> total = add(mul_scalar(L_D, T(e.weights.lambda_D_d)),
                          mul_scalar(L_gp, T(e.weights.lambda_gp_d)));

    auto& params = side == 0 ? opt.d0_params : opt.d1_params;
    auto grads = grad(total, params);
    (side == 0 ? opt.d0 : opt.d1).step(grads);
    return {double(L_D.item()), double(L_gp.item())};
}

}  // namespace explainerdetail

/// One full optimization step: generator phase on batch0, generator phase on
/// batch1, then both discriminators. The classifier is never touched.
template <typename T>
StepResult train_step(Explainer<T>& e, const Tensor<T>& batch0, const Tensor<T>& batch1,
                      ExplainerOptState<T>& opt) {
    if (!batch0.defined() || batch0.dim(0) == 0 || !batch1.defined() || batch1.dim(0) == 0)
        throw UndefinedError("train_step: both domain batches must be non-empty");
    explainerdetail::check_classifier_unchanged(e);

    StepResult r;
    r.phase0 = explainerdetail::generator_phase(e, 0, batch0, opt);
    r.phase1 = explainerdetail::generator_phase(e, 1, batch1, opt);
    std::tie(r.d0_loss, r.d0_gp) = explainerdetail::discriminator_phase(e, 0, batch0, batch1, opt);
    std::tie(r.d1_loss, r.d1_gp) = explainerdetail::discriminator_phase(e, 1, batch1, batch0, opt);

    explainerdetail::check_classifier_unchanged(e);
    return r;
}

struct ExplainerEpochStats {
    LossBreakdown gen_mean;          // mean over both generator phases
    double disc_loss = 0, disc_gp = 0;
    double flip_rate0 = 0, flip_rate1 = 0;  // validation adversarial flip rates
};

namespace explainerdetail {

class IndexCycler {
public:
    IndexCycler(size_t n, RandomStream* rng) : idx_(n), rng_(rng) {
        for (size_t i = 0; i < n; ++i) idx_[i] = i;
        reshuffle();
    }
    size_t next() {
        if (pos_ >= idx_.size()) {
            reshuffle();
        }
        return idx_[pos_++];
    }
    void new_epoch() {
        reshuffle();
    }

private:
    void reshuffle() {
        rng_->shuffle(idx_.begin(), idx_.end());
        pos_ = 0;
    }
    std::vector<size_t> idx_;
    size_t pos_ = 0;
    RandomStream* rng_;
};

template <typename T>
double flip_rate(Explainer<T>& e, const std::vector<Image>& images, int side) {
    if (images.empty()) return 0.0;
    auto advs = adversary_batch(e, images);
    auto probs = predict_prob(*e.classifier, advs);
    int flips = 0;
    for (double p : probs) flips += decide_prob(p, e.threshold) != side;
    return double(flips) / double(images.size());
}

}  // namespace explainerdetail

/// Train on a decision partition. A separate validation partition may be
/// given for flip-rate reporting; otherwise a slice of min(256, side) images
/// is held out from the end of each side.
template <typename T>
std::vector<ExplainerEpochStats> fit(Explainer<T>& e, const DecisionPartition& partition,
                                     const TrainSchedule& sched,
                                     const DecisionPartition* val_partition = nullptr,
                                     bool verbose = true) {
    sched.validate();
    if (partition.chi0.empty() || partition.chi1.empty())
        throw ConfigError("fit: both partition sides must be non-empty");

    std::vector<Image> train0 = partition.chi0, train1 = partition.chi1;
    std::vector<Image> val0, val1;
    if (val_partition) {
        val0 = val_partition->chi0;
        val1 = val_partition->chi1;
    } else {
        size_t h0 = std::min<size_t>(256, train0.size());
        size_t h1 = std::min<size_t>(256, train1.size());
        if (h0 < train0.size() && h1 < train1.size()) {
            val0.assign(train0.end() - std::ptrdiff_t(h0), train0.end());
            val1.assign(train1.end() - std::ptrdiff_t(h1), train1.end());
            train0.resize(train0.size() - h0);
            train1.resize(train1.size() - h1);
        }
    }
    if (sched.epochs == 0) return {};

    uint64_t cls_hash_before = e.classifier->param_hash();
    ExplainerOptState<T> opt(e, sched);
    RandomStream data_rng(sched.seed, "explainer/data");
    explainerdetail::IndexCycler cyc0(train0.size(), &data_rng);
    explainerdetail::IndexCycler cyc1(train1.size(), &data_rng);

    size_t nmax = std::max(train0.size(), train1.size());
    size_t steps_per_epoch = (nmax + size_t(sched.batch_size) - 1) / size_t(sched.batch_size);

    std::vector<ExplainerEpochStats> history;
    for (int epoch = 0; epoch < sched.epochs; ++epoch) {
        cyc0.new_epoch();
        cyc1.new_epoch();
        ExplainerEpochStats stats;
        size_t remaining = nmax;
        for (size_t step = 0; step < steps_per_epoch; ++step) {
            size_t kb = std::min<size_t>(size_t(sched.batch_size), remaining);
            remaining -= kb;
            std::vector<Image> b0, b1;
            for (size_t k = 0; k < kb; ++k) {
                const Image& i0 = train0[cyc0.next()];
                const Image& i1 = train1[cyc1.next()];
                b0.push_back(sched.augment.enabled ? augment(i0, sched.augment, data_rng) : i0);
                b1.push_back(sched.augment.enabled ? augment(i1, sched.augment, data_rng) : i1);
            }
            StepResult r = train_step(e, images_to_tensor<T>(b0), images_to_tensor<T>(b1), opt);
            auto acc = [&](const LossBreakdown& b) {
                stats.gen_mean.L_fc_a += b.L_fc_a;
                stats.gen_mean.L_D_g += b.L_D_g;
                stats.gen_mean.L_d_s += b.L_d_s;
                stats.gen_mean.L_fc_s += b.L_fc_s;
                stats.gen_mean.L_d_cy += b.L_d_cy;
                stats.gen_mean.L_fc_cy += b.L_fc_cy;
                stats.gen_mean.L_w += b.L_w;
                stats.gen_mean.total += b.total;
            };
            acc(r.phase0);
            acc(r.phase1);
            stats.disc_loss += r.d0_loss + r.d1_loss;
            stats.disc_gp += r.d0_gp + r.d1_gp;
        }
        double inv = 1.0 / (2.0 * double(steps_per_epoch));
        stats.gen_mean.L_fc_a *= inv;
        stats.gen_mean.L_D_g *= inv;
        stats.gen_mean.L_d_s *= inv;
        stats.gen_mean.L_fc_s *= inv;
        stats.gen_mean.L_d_cy *= inv;
        stats.gen_mean.L_fc_cy *= inv;
        stats.gen_mean.L_w *= inv;
        stats.gen_mean.total *= inv;
        stats.disc_loss *= inv;
        stats.disc_gp *= inv;

        stats.flip_rate0 = explainerdetail::flip_rate(e, val0, 0);
        stats.flip_rate1 = explainerdetail::flip_rate(e, val1, 1);
        history.push_back(stats);
        if (verbose)
            std::cout << "[" << method_name(e.method) << "] epoch " << epoch + 1 << "/"
                      << sched.epochs << " gen_total=" << stats.gen_mean.total
                      << " d_s=" << stats.gen_mean.L_d_s << " d_cy=" << stats.gen_mean.L_d_cy
                      << " fc_a=" << stats.gen_mean.L_fc_a << " disc=" << stats.disc_loss
                      << " flip0=" << stats.flip_rate0 << " flip1=" << stats.flip_rate1 << std::endl;
    }

    if (e.classifier->param_hash() != cls_hash_before)
        throw NumericError("fit: frozen-classifier contract violated");
    return history;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

template <typename T>
void save_explainer(Explainer<T>& e, const fs::path& path) {
    ArrayContainer c;
    std::vector<int64_t> meta = {int64_t(e.method),
                                 int64_t(e.seed),
                                 e.input_size,
                                 int64_t(e.classifier_hash),
                                 e.gen_spec.n_scales,
                                 e.gen_spec.base_channels,
                                 e.gen_spec.output_mode == GeneratorOutputMode::sigmoid ? 1 : 0,
                                 e.gen_spec.tail_convs,
                                 e.disc_spec.n_blocks,
                                 e.disc_spec.base_channels};
    c.put("meta", NamedArray::from_vector<int64_t>(meta, {int64_t(meta.size())}));
    std::vector<double> wts = {e.threshold,
                               e.gen_spec.dropout_rate,
                               e.disc_spec.leaky_slope,
                               e.weights.lambda_d_s,
                               e.weights.lambda_d_cy,
                               e.weights.lambda_fc_a,
                               e.weights.lambda_fc_s,
                               e.weights.lambda_fc_cy,
                               e.weights.lambda_D,
                               e.weights.lambda_D_d,
                               e.weights.lambda_gp_d,
                               e.weights.lambda_w.value_or(-1.0)};
    c.put("weights", NamedArray::from_vector<double>(wts, {int64_t(wts.size())}));
    for (auto& [prefix, store] : e.stores()) save_params(*store, c, prefix);
    c.save(path);
}

template <typename T = float>
Explainer<T> load_explainer(const fs::path& path, const LeNetClassifier<T>* classifier) {
    auto c = ArrayContainer::load(path);
    auto meta = c.get("meta").to_vector<int64_t>();
    auto wts = c.get("weights").to_vector<double>();

    GeneratorSpec gs;
    gs.n_scales = int(meta[4]);
    gs.base_channels = int(meta[5]);
    gs.output_mode = meta[6] ? GeneratorOutputMode::sigmoid : GeneratorOutputMode::clip;
    gs.tail_convs = int(meta[7]);
    gs.dropout_rate = wts[1];
    DiscriminatorSpec ds;
    ds.n_blocks = int(meta[8]);
    ds.base_channels = int(meta[9]);
    ds.leaky_slope = wts[2];
    LossWeights w;
    w.lambda_d_s = wts[3];
    w.lambda_d_cy = wts[4];
    w.lambda_fc_a = wts[5];
    w.lambda_fc_s = wts[6];
    w.lambda_fc_cy = wts[7];
    w.lambda_D = wts[8];
    w.lambda_D_d = wts[9];
    w.lambda_gp_d = wts[10];
    if (wts[11] >= 0) w.lambda_w = wts[11];

    Explainer<T> e = build_explainer<T>(ExplainerMethod(meta[0]), gs, ds, classifier, w, wts[0],
                                        uint64_t(meta[1]));
    if (e.classifier_hash != uint64_t(meta[3]))
        throw ConfigError("load_explainer: checkpoint was trained against a different classifier");
    for (auto& [prefix, store] : e.stores()) load_params(*store, c, prefix);
    return e;
}

}  // namespace counterfax
