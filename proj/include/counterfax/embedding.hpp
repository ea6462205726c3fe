#pragma once

// Evaluation-only embedding: a convolutional VAE whose mean vector feeds the
// domain-translation metrics, trained jointly with a small MLP head that
// separates the two decision domains in latent space.

#include <iostream>

#include "counterfax/data.hpp"
#include "counterfax/losses.hpp"
#include "counterfax/nn.hpp"

namespace counterfax {

struct VaeConfig {
    int latent_dim = 16;
    int base_channels = 16;
    int epochs = 10;
    int batch_size = 128;
    double learning_rate = 1e-3;
    double kl_weight = 1.0;
    double head_weight = 1.0;
    uint64_t seed = 0;

    void validate() const {
        if (latent_dim < 2) throw ConfigError("vae config: latent_dim must be >= 2");
        if (epochs < 1 || batch_size < 1) throw ConfigError("vae config: bad schedule");
        if (learning_rate <= 0) throw ConfigError("vae config: learning_rate must be > 0");
    }
};

template <typename T = float>
struct EmbeddingModel {
    VaeConfig config;
    int input_size = 28;
    bool frozen = false;
    double head_val_accuracy = 0;

    ParamStore<T> store;
    Conv2dLayer<T> enc1, enc2;
    DenseLayer<T> fc_mu, fc_logvar;
    DenseLayer<T> dec_fc;
    Conv2dLayer<T> dec_conv1, dec_conv2;
    DenseLayer<T> head1, head2;
    int flat_dim = 0, half_size = 0, quarter_size = 0;

    std::pair<Tensor<T>, Tensor<T>> encode(const Tensor<T>& x) const {
        Tensor<T> h = relu(enc1.forward(x));
        h = relu(enc2.forward(h));
        h = reshape(h, {x.dim(0), flat_dim});
        return {fc_mu.forward(h), fc_logvar.forward(h)};
    }

    Tensor<T> decode(const Tensor<T>& z) const {
        int n = z.dim(0);
        Tensor<T> h = relu(dec_fc.forward(z));
        h = reshape(h, {n, 2 * config.base_channels, quarter_size, quarter_size});
        h = relu(dec_conv1.forward(upsample_nearest2(h)));
        h = dec_conv2.forward(upsample_nearest2(h));
        return sigmoid(h);
    }

    /// Domain probability from the mean vector.
    Tensor<T> head_prob(const Tensor<T>& mu) const {
        Tensor<T> h = relu(head1.forward(mu));
        return reshape(sigmoid(head2.forward(h)), {mu.dim(0)});
    }

    uint64_t param_hash() const { return store.param_hash(); }
};

template <typename T = float>
EmbeddingModel<T> build_embedding(const VaeConfig& config, int input_size) {
    config.validate();
    if (input_size % 4 != 0) throw ConfigError("build_embedding: input_size must be divisible by 4");

    EmbeddingModel<T> m;
    m.config = config;
    m.input_size = input_size;
    m.half_size = input_size / 2;
    m.quarter_size = input_size / 4;
    RandomStream rng(config.seed, "embedding/init");
    int c = config.base_channels;
    m.enc1 = Conv2dLayer<T>(m.store, "enc1", 1, c, 3, 2, 1, rng);
    m.enc2 = Conv2dLayer<T>(m.store, "enc2", c, 2 * c, 3, 2, 1, rng);
    m.flat_dim = 2 * c * m.quarter_size * m.quarter_size;
    m.fc_mu = DenseLayer<T>(m.store, "fc_mu", m.flat_dim, config.latent_dim, rng);
    m.fc_logvar = DenseLayer<T>(m.store, "fc_logvar", m.flat_dim, config.latent_dim, rng);
    // Start near N(0, I): small logvar head output.
    for (auto& w : m.fc_logvar.w.data()) w *= T(0.1);
    m.dec_fc = DenseLayer<T>(m.store, "dec_fc", config.latent_dim, m.flat_dim, rng);
    m.dec_conv1 = Conv2dLayer<T>(m.store, "dec_conv1", 2 * c, c, 3, 1, 1, rng);
    m.dec_conv2 = Conv2dLayer<T>(m.store, "dec_conv2", c, 1, 3, 1, 1, rng);
    m.head1 = DenseLayer<T>(m.store, "head1", config.latent_dim, 32, rng);
    m.head2 = DenseLayer<T>(m.store, "head2", 32, 1, rng);
    return m;
}

/// Deterministic mean-vector embedding (no sampling).
template <typename T>
std::vector<std::vector<double>> embed_mu(const EmbeddingModel<T>& model,
                                          const std::vector<Image>& images, int chunk = 256) {
    NoGradGuard ng;
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    for (size_t i = 0; i < images.size(); i += size_t(chunk)) {
        size_t hi = std::min(images.size(), i + size_t(chunk));
        std::vector<Image> batch(images.begin() + std::ptrdiff_t(i), images.begin() + std::ptrdiff_t(hi));
        auto [mu, logvar] = model.encode(images_to_tensor<T>(batch));
        int d = mu.dim(1);
        for (size_t k = 0; k < hi - i; ++k) {
            std::vector<double> v(size_t(d), 0.0);
            for (int j = 0; j < d; ++j) v[size_t(j)] = double(mu.data()[k * size_t(d) + size_t(j)]);
            out.push_back(std::move(v));
        }
    }
    return out;
}

struct EmbeddingEpochStats {
    double total = 0, recon = 0, kl = 0, head = 0;
};

/// Train on real images only (both decision domains). The head learns to
/// classify mu into chi0 vs chi1; its accuracy on a held-out slice is
/// recorded on the returned (frozen) model.
template <typename T>
std::vector<EmbeddingEpochStats> train_embedding(EmbeddingModel<T>& model,
                                                 const DecisionPartition& partition,
                                                 bool verbose = true) {
    const VaeConfig& cfg = model.config;
    if (partition.chi0.empty() || partition.chi1.empty())
        throw ConfigError("train_embedding: both partition sides must be non-empty");

    std::vector<const Image*> images;
    std::vector<T> labels;
    for (const auto& im : partition.chi0) {
        images.push_back(&im);
        labels.push_back(T(0));
    }
    for (const auto& im : partition.chi1) {
        images.push_back(&im);
        labels.push_back(T(1));
    }

    RandomStream rng(cfg.seed, "embedding/train");
    std::vector<size_t> order(images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());

    size_t val_n = std::min<size_t>(std::max<size_t>(images.size() / 10, 1), 512);
    std::vector<size_t> val_idx(order.end() - std::ptrdiff_t(val_n), order.end());
    order.resize(order.size() - val_n);

    Adam<T> opt(model.store.param_list(), T(cfg.learning_rate));
    int64_t hw = int64_t(model.input_size) * model.input_size;
    std::vector<EmbeddingEpochStats> history;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        EmbeddingEpochStats stats;
        size_t batches = 0;
        for (size_t i = 0; i < order.size(); i += size_t(cfg.batch_size)) {
            size_t hi = std::min(order.size(), i + size_t(cfg.batch_size));
            std::vector<Image> batch;
            std::vector<T> y;
            for (size_t k = i; k < hi; ++k) {
                batch.push_back(*images[order[k]]);
                y.push_back(labels[order[k]]);
            }
            int n = int(batch.size());
            Tensor<T> x = images_to_tensor<T>(batch);
            auto [mu, logvar] = model.encode(x);

            // Reparameterized sample.
            std::vector<T> noise(size_t(n) * cfg.latent_dim);
            for (auto& v : noise) v = T(rng.normal());
            Tensor<T> eps = Tensor<T>::from({n, cfg.latent_dim}, std::move(noise));
            Tensor<T> z = add(mu, mul(exp_t(mul_scalar(logvar, T(0.5))), eps));
            Tensor<T> recon_img = model.decode(z);

            // Per-pixel BCE summed over pixels, averaged over the batch.
            Tensor<T> xt = reshape(x, {n, int(hw)});
            Tensor<T> pt = reshape(recon_img, {n, int(hw)});
            Tensor<T> recon = mul_scalar(bce(xt.detach(), pt), T(hw));
            // KL(q || N(0,I)), averaged over the batch.
            Tensor<T> kl = mul_scalar(
                sum_all(sub(mul_scalar(add(square(mu), exp_t(logvar)), T(0.5)),
                            mul_scalar(add_scalar(logvar, T(1)), T(0.5)))),
                T(1.0 / n));
            Tensor<T> head = bce(Tensor<T>::from({n}, y), model.head_prob(mu));
            Tensor<T> total = add(add(recon, mul_scalar(kl, T(cfg.kl_weight))),
                                  mul_scalar(head, T(cfg.head_weight)));

            auto grads = grad(total, model.store.param_list());
            opt.step(grads);
            stats.total += double(total.item());
            stats.recon += double(recon.item());
            stats.kl += double(kl.item());
            stats.head += double(head.item());
            ++batches;
        }
        stats.total /= double(batches);
        stats.recon /= double(batches);
        stats.kl /= double(batches);
        stats.head /= double(batches);
        history.push_back(stats);
        if (verbose)
            std::cout << "[embedding] epoch " << epoch + 1 << "/" << cfg.epochs
                      << " total=" << stats.total << " recon=" << stats.recon << " kl=" << stats.kl
                      << " head=" << stats.head << std::endl;
    }

    // Held-out head accuracy on mean vectors.
    {
        NoGradGuard ng;
        int correct = 0;
        for (size_t k : val_idx) {
            auto [mu, lv] = model.encode(images_to_tensor<T>({*images[k]}));
            double p = double(model.head_prob(mu).item());
            correct += (p >= 0.5 ? 1 : 0) == int(labels[k]);
        }
        model.head_val_accuracy = double(correct) / double(val_idx.size());
        if (verbose)
            std::cout << "[embedding] held-out head accuracy " << model.head_val_accuracy
                      << std::endl;
    }
    model.frozen = true;
    return history;
}

template <typename T>
void save_embedding(const EmbeddingModel<T>& model, const fs::path& path) {
    ArrayContainer c;
    std::vector<int64_t> meta = {model.input_size,       model.config.latent_dim,
                                 model.config.base_channels, int64_t(model.config.seed),
                                 model.frozen ? 1 : 0};
    c.put("meta", NamedArray::from_vector<int64_t>(meta, {int64_t(meta.size())}));
    std::vector<double> stats = {model.head_val_accuracy};
    c.put("stats", NamedArray::from_vector<double>(stats, {1}));
    save_params(model.store, c);
    c.save(path);
}

template <typename T = float>
EmbeddingModel<T> load_embedding(const fs::path& path) {
    auto c = ArrayContainer::load(path);
    auto meta = c.get("meta").to_vector<int64_t>();
    VaeConfig cfg;
    cfg.latent_dim = int(meta[1]);
    cfg.base_channels = int(meta[2]);
    cfg.seed = uint64_t(meta[3]);
    EmbeddingModel<T> m = build_embedding<T>(cfg, int(meta[0]));
    load_params(m.store, c);
    m.head_val_accuracy = c.get("stats").to_vector<double>()[0];
    m.frozen = meta[4] != 0;
    return m;
}

}  // namespace counterfax
