#pragma once

// The frozen binary classifier under explanation: a LeNet-style CNN with a
// sigmoid scalar head, its training loop (Adam, BCE, plateau learning-rate
// decay, geometric augmentation), and evaluation (rank-statistic AUC).

#include <iostream>

#include "counterfax/data.hpp"
#include "counterfax/losses.hpp"
#include "counterfax/nn.hpp"

namespace counterfax {

struct ClassifierTrainConfig {
    int epochs = 10;
    int batch_size = 128;
    double learning_rate = 1e-4;
    double lr_decay_factor = 3.0;
    int plateau_patience = 3;
    double plateau_min_delta = 1e-4;
    uint64_t seed = 0;
    AugmentConfig augment;

    void validate() const {
        if (epochs < 1) throw ConfigError("classifier config: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("classifier config: batch_size must be >= 1");
        if (learning_rate <= 0) throw ConfigError("classifier config: learning_rate must be > 0");
    }
};

struct ClassifierEpochStats {
    double train_loss = 0, val_loss = 0, lr = 0;
};

template <typename T = float>
struct LeNetClassifier {
    int input_size = 28;
    uint64_t init_seed = 0;
    bool frozen = false;

    ParamStore<T> store;
    Conv2dLayer<T> conv1, conv2;
    DenseLayer<T> fc1, fc2, fc3;
    int flat_dim = 0;
    std::vector<ClassifierEpochStats> history;

    /// Probability head on a (N,1,H,W) batch -> (N) in [0,1].
    Tensor<T> prob_forward(const Tensor<T>& x) const {
        if (x.ndim() != 4 || x.dim(2) != input_size || x.dim(3) != input_size)
            throw ShapeError("classifier: expected (N,1," + std::to_string(input_size) + "," +
                             std::to_string(input_size) + ") input");
        Tensor<T> h = maxpool2(relu(conv1.forward(x)));
        h = maxpool2(relu(conv2.forward(h)));
        h = reshape(h, {x.dim(0), flat_dim});
        h = relu(fc1.forward(h));
        h = relu(fc2.forward(h));
        h = sigmoid(fc3.forward(h));
        return reshape(h, {x.dim(0)});
    }

    uint64_t param_hash() const { return store.param_hash(); }
    std::string id() const { return "lenet-" + hash_hex(param_hash()); }
};

/// Canonical LeNet-5 with a binary head:
/// conv(6,5x5) -> pool -> conv(16,5x5) -> pool -> 120 -> 84 -> 1 (sigmoid).
template <typename T = float>
LeNetClassifier<T> build_lenet(int input_size, uint64_t seed = 0) {
    if (input_size < 16) throw ConfigError("build_lenet: input_size must be >= 16");
    int s1 = input_size - 4;
    if (s1 % 2) throw ConfigError("build_lenet: input_size - 4 must be even");
    int s2 = s1 / 2 - 4;
    if (s2 % 2) throw ConfigError("build_lenet: pooled size must stay even");

    LeNetClassifier<T> m;
    m.input_size = input_size;
    m.init_seed = seed;
    RandomStream rng(seed, "classifier/init");
    m.conv1 = Conv2dLayer<T>(m.store, "conv1", 1, 6, 5, 1, 0, rng);
    m.conv2 = Conv2dLayer<T>(m.store, "conv2", 6, 16, 5, 1, 0, rng);
    m.flat_dim = 16 * (s2 / 2) * (s2 / 2);
    m.fc1 = DenseLayer<T>(m.store, "fc1", m.flat_dim, 120, rng);
    m.fc2 = DenseLayer<T>(m.store, "fc2", 120, 84, rng);
    m.fc3 = DenseLayer<T>(m.store, "fc3", 84, 1, rng);
    // Small head so an untrained model sits near probability 0.5.
    for (auto& w : m.fc3.w.data()) w *= T(0.1);
    return m;
}

template <typename T>
std::vector<double> predict_prob(const LeNetClassifier<T>& model, const std::vector<Image>& images,
                                 int chunk = 256) {
    NoGradGuard ng;
    std::vector<double> probs;
    probs.reserve(images.size());
    for (size_t i = 0; i < images.size(); i += size_t(chunk)) {
        std::vector<Image> batch(images.begin() + std::ptrdiff_t(i),
                                 images.begin() + std::ptrdiff_t(std::min(images.size(), i + size_t(chunk))));
        auto p = model.prob_forward(images_to_tensor<T>(batch));
        for (T v : p.data()) probs.push_back(double(v));
    }
    return probs;
}

/// Thresholded decision: 1 iff probability >= threshold.
inline int decide_prob(double prob, double threshold) { return prob >= threshold ? 1 : 0; }

template <typename T>
int decide(const LeNetClassifier<T>& model, const Image& image, double threshold) {
    if (threshold <= 0 || threshold >= 1) throw ConfigError("decide: threshold must be in (0,1)");
    return decide_prob(predict_prob(model, {image})[0], threshold);
}

struct ClassifierMetrics {
    double auc = 0, accuracy = 0;
};

/// Rank-statistic AUC with midrank tie handling, plus thresholded accuracy.
inline ClassifierMetrics evaluate_probs(const std::vector<double>& probs,
                                        const std::vector<int>& labels, double threshold) {
    size_t n = probs.size();
    int64_t n1 = 0;
    for (int l : labels) n1 += l;
    int64_t n0 = int64_t(n) - n1;
    if (n0 == 0 || n1 == 0) throw UndefinedError("AUC undefined: needs both labels present");

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return probs[a] < probs[b]; });

    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && probs[order[j + 1]] == probs[order[i]]) ++j;
        double mid = (double(i) + double(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }

    double rank_sum_pos = 0;
    int64_t correct = 0;
    for (size_t k = 0; k < n; ++k) {
        if (labels[k] == 1) rank_sum_pos += rank[k];
        if (decide_prob(probs[k], threshold) == labels[k]) ++correct;
    }
    ClassifierMetrics m;
    m.auc = (rank_sum_pos - double(n1) * (double(n1) + 1) / 2.0) / (double(n0) * double(n1));
    m.accuracy = double(correct) / double(n);
    return m;
}

template <typename T>
ClassifierMetrics evaluate_classifier(const LeNetClassifier<T>& model,
                                      const std::vector<LabeledSample>& samples, double threshold) {
    std::vector<Image> images;
    std::vector<int> labels;
    for (const auto& s : samples) {
        images.push_back(s.image);
        labels.push_back(s.label);
    }
    return evaluate_probs(predict_prob(model, images), labels, threshold);
}

namespace classifierdetail {

template <typename T>
double dataset_loss(const LeNetClassifier<T>& model, const std::vector<LabeledSample>& samples,
                    int chunk = 256) {
    NoGradGuard ng;
    if (samples.empty()) return 0.0;
    double total = 0;
    for (size_t i = 0; i < samples.size(); i += size_t(chunk)) {
        size_t hi = std::min(samples.size(), i + size_t(chunk));
        std::vector<Image> images;
        std::vector<T> targets;
        for (size_t k = i; k < hi; ++k) {
            images.push_back(samples[k].image);
            targets.push_back(T(samples[k].label));
        }
        auto probs = model.prob_forward(images_to_tensor<T>(images));
        auto t = Tensor<T>::from({int(targets.size())}, targets);
        total += double(bce(t, probs).item()) * double(hi - i);
    }
    return total / double(samples.size());
}

}  // namespace classifierdetail

/// Train with Adam + BCE; learning rate divides by lr_decay_factor when the
/// validation loss stops improving for plateau_patience epochs. Returns the
/// model frozen.
template <typename T>
void train_classifier(LeNetClassifier<T>& model, const DatasetSplit& split,
                      const ClassifierTrainConfig& config, bool verbose = true) {
    config.validate();
    if (split.train.empty()) throw ConfigError("train_classifier: empty training set");
    if (model.frozen) throw ConfigError("train_classifier: model is frozen");

    RandomStream rng(config.seed, "classifier/train");
    Adam<T> opt(model.store.param_list(), T(config.learning_rate));

    double best_val = std::numeric_limits<double>::infinity();
    int stale = 0;
    std::vector<size_t> order(split.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainContext ctx{true, &rng};
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0;
        int64_t seen = 0;
        for (size_t i = 0; i < order.size(); i += size_t(config.batch_size)) {
            size_t hi = std::min(order.size(), i + size_t(config.batch_size));
            std::vector<Image> images;
            std::vector<T> targets;
            for (size_t k = i; k < hi; ++k) {
                const auto& s = split.train[order[k]];
                images.push_back(config.augment.enabled ? augment(s.image, config.augment, rng)
                                                        : s.image);
                targets.push_back(T(s.label));
            }
            auto x = images_to_tensor<T>(images);
            auto probs = model.prob_forward(x);
            auto loss = bce(Tensor<T>::from({int(targets.size())}, targets), probs);
            auto grads = grad(loss, model.store.param_list());
            opt.step(grads);
            epoch_loss += double(loss.item()) * double(hi - i);
            seen += int64_t(hi - i);
            (void)ctx;
        }
        epoch_loss /= double(seen);

        double val_loss = split.val.empty() ? epoch_loss
                                            : classifierdetail::dataset_loss(model, split.val);
        model.history.push_back({epoch_loss, val_loss, double(opt.learning_rate())});
        if (verbose)
            std::cout << "[classifier] epoch " << epoch + 1 << "/" << config.epochs
                      << " train_loss=" << epoch_loss << " val_loss=" << val_loss
                      << " lr=" << opt.learning_rate() << std::endl;

        if (val_loss < best_val - config.plateau_min_delta) {
            best_val = val_loss;
            stale = 0;
        } else if (++stale >= config.plateau_patience) {
            opt.set_learning_rate(T(double(opt.learning_rate()) / config.lr_decay_factor));
            stale = 0;
        }
    }
    model.frozen = true;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

template <typename T>
void save_params(const ParamStore<T>& store, ArrayContainer& c, const std::string& prefix = "") {
    for (const auto& [name, t] : store.params) {
        std::vector<int64_t> dims(t.shape().begin(), t.shape().end());
        c.put(prefix + name, NamedArray::from_vector<T>(t.data(), dims));
    }
    for (const auto& [name, t] : store.buffers) {
        std::vector<int64_t> dims(t.shape().begin(), t.shape().end());
        c.put(prefix + name, NamedArray::from_vector<T>(t.data(), dims));
    }
}

template <typename T>
void load_params(ParamStore<T>& store, const ArrayContainer& c, const std::string& prefix = "") {
    for (auto& [name, t] : store.params) {
        auto v = c.get(prefix + name).template to_vector<T>();
        if (int64_t(v.size()) != t.size())
            throw FormatError("checkpoint: size mismatch for " + prefix + name);
        t.data() = std::move(v);
    }
    for (auto& [name, t] : store.buffers) {
        auto v = c.get(prefix + name).template to_vector<T>();
        if (int64_t(v.size()) != t.size())
            throw FormatError("checkpoint: size mismatch for " + prefix + name);
        t.data() = std::move(v);
    }
}

template <typename T>
void save_classifier(const LeNetClassifier<T>& model, const fs::path& path) {
    ArrayContainer c;
    std::vector<int64_t> meta = {model.input_size, int64_t(model.init_seed),
                                 model.frozen ? 1 : 0};
    c.put("meta", NamedArray::from_vector<int64_t>(meta, {int64_t(meta.size())}));
    save_params(model.store, c);
    c.save(path);
}

template <typename T = float>
LeNetClassifier<T> load_classifier(const fs::path& path) {
    auto c = ArrayContainer::load(path);
    auto meta = c.get("meta").to_vector<int64_t>();
    LeNetClassifier<T> m = build_lenet<T>(int(meta[0]), uint64_t(meta[1]));
    load_params(m.store, c);
    m.frozen = meta[2] != 0;
    return m;
}

}  // namespace counterfax
