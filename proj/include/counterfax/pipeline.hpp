#pragma once

// End-to-end workflow behind the CLI verbs: structured run configuration,
// stage artifacts with manifests, and the prepare-data / train-classifier /
// train-explainer / explain / evaluate / report commands. Stages talk to
// each other only through files under the run's output directory.

#include <chrono>
#include <iomanip>
#include <sstream>

#include "counterfax/digits.hpp"
#include "counterfax/metrics.hpp"

namespace counterfax {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class DatasetSource { synthetic_digits, mnist_idx, patches, folder };

inline DatasetSource parse_source(const std::string& s) {
    if (s == "synthetic-digits") return DatasetSource::synthetic_digits;
    if (s == "mnist-idx") return DatasetSource::mnist_idx;
    if (s == "patches") return DatasetSource::patches;
    if (s == "folder") return DatasetSource::folder;
    throw ConfigError("unknown dataset source '" + s +
                      "' (valid: synthetic-digits, mnist-idx, patches, folder)");
}

inline const char* source_name(DatasetSource s) {
    switch (s) {
        case DatasetSource::synthetic_digits: return "synthetic-digits";
        case DatasetSource::mnist_idx: return "mnist-idx";
        case DatasetSource::patches: return "patches";
        case DatasetSource::folder: return "folder";
    }
    return "?";
}

struct DatasetConfig {
    DatasetSource source = DatasetSource::synthetic_digits;
    int image_size = 28;
    std::array<double, 3> fractions = {0.8, 0.2, 0.0};
    // mnist-idx
    fs::path mnist_dir;
    int test_raw_limit = 5000;
    // synthetic-digits (mirrors the MNIST 3/8 class counts)
    int synth_train3 = 6131, synth_train8 = 5851, synth_test3 = 508, synth_test8 = 495;
    // patches
    int patch_n_per_class = 1000, patch_size = 6;
    double patch_noise = 0.2;
    // folder
    fs::path folder_root;
};

struct ExplainerConfig {
    std::string method = "SyCE";
    int images_per_domain = 2000;
    TrainSchedule schedule;
    GeneratorSpec generator;
    DiscriminatorSpec discriminator;
    LossWeights weights;
    bool weights_explicit = false;
    double threshold = 0.5;
};

struct EvalConfig {
    VaeConfig vae;
    std::vector<double> percentiles = {90.0, 95.0};
    bool add_mask_matched_percentile = true;
    JsGridConfig js_grid;
    int images_per_domain = 0;  // 0 = full test partition
    int ig_steps = 64;
};

struct RunConfig {
    uint64_t seed = 7;
    fs::path output_dir = "runs/default";
    DatasetConfig dataset;
    ClassifierTrainConfig classifier;
    ExplainerConfig explainer;
    EvalConfig evaluation;

    uint64_t substream(const char* stage) const { return seed ^ fnv1a64(stage); }

    fs::path data_dir() const { return output_dir / "data"; }
    fs::path classifier_dir() const { return output_dir / "classifier"; }
    fs::path explainer_dir(const std::string& method) const {
        return output_dir / "explainers" / method;
    }
    fs::path eval_dir() const { return output_dir / "eval"; }
};

/// Default loss weights per method (the digits training-parameter sets).
inline LossWeights default_weights(ExplainerMethod m) {
    LossWeights w;  // SyCE digits values
    switch (m) {
        case ExplainerMethod::SyCE:
        case ExplainerMethod::SSyE:
            break;
        case ExplainerMethod::CyCSAE:
            w.lambda_w = 1.0;
            break;
        case ExplainerMethod::CyCE:
        case ExplainerMethod::CyCE_noFc:
            w.lambda_d_s = 0.0;
            w.lambda_d_cy = 10.0;
            w.lambda_fc_s = 0.0;
            break;
    }
    return w;
}

namespace configdetail {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError("unknown config key '" + where + "." + it.key() + "'");
    }
}

inline AugmentConfig augment_from_json(const json& j, const AugmentConfig& defaults,
                                       const std::string& where) {
    reject_unknown(j, {"enabled", "max_translate", "max_rotate", "max_zoom", "horizontal_flip"},
                   where);
    AugmentConfig a = defaults;
    a.enabled = get_or(j, "enabled", a.enabled);
    a.max_translate = get_or(j, "max_translate", a.max_translate);
    a.max_rotate = get_or(j, "max_rotate", a.max_rotate);
    a.max_zoom = get_or(j, "max_zoom", a.max_zoom);
    a.horizontal_flip = get_or(j, "horizontal_flip", a.horizontal_flip);
    return a;
}

}  // namespace configdetail

inline RunConfig config_from_json(const json& j) {
    using namespace configdetail;
    reject_unknown(j, {"seed", "output_dir", "dataset", "classifier", "explainer", "evaluation"},
                   "config");
    RunConfig c;
    c.seed = get_or<uint64_t>(j, "seed", c.seed);
    c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir.string());

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        reject_unknown(d,
                       {"source", "image_size", "fractions", "mnist_dir", "test_raw_limit",
                        "synthetic", "patches", "folder_root"},
                       "dataset");
        c.dataset.source = parse_source(get_or<std::string>(d, "source", "synthetic-digits"));
        c.dataset.image_size = get_or(d, "image_size", c.dataset.image_size);
        if (d.contains("fractions")) {
            auto f = d.at("fractions").get<std::vector<double>>();
            if (f.size() != 3) throw ConfigError("dataset.fractions must have 3 entries");
            double sum = f[0] + f[1] + f[2];
            if (f[0] < 0 || f[1] < 0 || f[2] < 0 || std::abs(sum - 1.0) > 1e-9)
                throw ConfigError("dataset.fractions must be nonnegative and sum to 1");
            c.dataset.fractions = {f[0], f[1], f[2]};
        }
        c.dataset.mnist_dir = get_or<std::string>(d, "mnist_dir", "");
        c.dataset.test_raw_limit = get_or(d, "test_raw_limit", c.dataset.test_raw_limit);
        if (d.contains("synthetic")) {
            const json& s = d.at("synthetic");
            reject_unknown(s, {"train3", "train8", "test3", "test8"}, "dataset.synthetic");
            c.dataset.synth_train3 = get_or(s, "train3", c.dataset.synth_train3);
            c.dataset.synth_train8 = get_or(s, "train8", c.dataset.synth_train8);
            c.dataset.synth_test3 = get_or(s, "test3", c.dataset.synth_test3);
            c.dataset.synth_test8 = get_or(s, "test8", c.dataset.synth_test8);
        }
        if (d.contains("patches")) {
            const json& p = d.at("patches");
            reject_unknown(p, {"n_per_class", "patch_size", "noise_level"}, "dataset.patches");
            c.dataset.patch_n_per_class = get_or(p, "n_per_class", c.dataset.patch_n_per_class);
            c.dataset.patch_size = get_or(p, "patch_size", c.dataset.patch_size);
            c.dataset.patch_noise = get_or(p, "noise_level", c.dataset.patch_noise);
        }
        c.dataset.folder_root = get_or<std::string>(d, "folder_root", "");
    }

    if (j.contains("classifier")) {
        const json& k = j.at("classifier");
        reject_unknown(k,
                       {"epochs", "batch_size", "learning_rate", "lr_decay_factor",
                        "plateau_patience", "augment"},
                       "classifier");
        c.classifier.epochs = get_or(k, "epochs", c.classifier.epochs);
        c.classifier.batch_size = get_or(k, "batch_size", c.classifier.batch_size);
        c.classifier.learning_rate = get_or(k, "learning_rate", c.classifier.learning_rate);
        c.classifier.lr_decay_factor = get_or(k, "lr_decay_factor", c.classifier.lr_decay_factor);
        c.classifier.plateau_patience = get_or(k, "plateau_patience", c.classifier.plateau_patience);
        if (k.contains("augment"))
            c.classifier.augment =
                augment_from_json(k.at("augment"), c.classifier.augment, "classifier.augment");
    }

    if (j.contains("explainer")) {
        const json& e = j.at("explainer");
        reject_unknown(e,
                       {"method", "images_per_domain", "schedule", "generator", "discriminator",
                        "weights", "threshold"},
                       "explainer");
        c.explainer.method = get_or<std::string>(e, "method", c.explainer.method);
        parse_method(c.explainer.method);  // validate early
        c.explainer.images_per_domain = get_or(e, "images_per_domain", c.explainer.images_per_domain);
        c.explainer.threshold = get_or(e, "threshold", c.explainer.threshold);
        if (e.contains("schedule")) {
            const json& s = e.at("schedule");
            reject_unknown(s, {"epochs", "batch_size", "gen_lr", "disc_lr", "augment"},
                           "explainer.schedule");
            c.explainer.schedule.epochs = get_or(s, "epochs", c.explainer.schedule.epochs);
            c.explainer.schedule.batch_size = get_or(s, "batch_size", c.explainer.schedule.batch_size);
            c.explainer.schedule.gen_lr = get_or(s, "gen_lr", c.explainer.schedule.gen_lr);
            c.explainer.schedule.disc_lr = get_or(s, "disc_lr", c.explainer.schedule.disc_lr);
            if (s.contains("augment"))
                c.explainer.schedule.augment = augment_from_json(
                    s.at("augment"), c.explainer.schedule.augment, "explainer.schedule.augment");
        }
        if (e.contains("generator")) {
            const json& g = e.at("generator");
            reject_unknown(g, {"n_scales", "base_channels", "dropout_rate", "output_mode", "tail_convs"},
                           "explainer.generator");
            c.explainer.generator.n_scales = get_or(g, "n_scales", c.explainer.generator.n_scales);
            c.explainer.generator.base_channels =
                get_or(g, "base_channels", c.explainer.generator.base_channels);
            c.explainer.generator.dropout_rate =
                get_or(g, "dropout_rate", c.explainer.generator.dropout_rate);
            std::string mode = get_or<std::string>(g, "output_mode", "clip");
            if (mode != "clip" && mode != "sigmoid")
                throw ConfigError("explainer.generator.output_mode must be clip or sigmoid");
            c.explainer.generator.output_mode =
                mode == "clip" ? GeneratorOutputMode::clip : GeneratorOutputMode::sigmoid;
            c.explainer.generator.tail_convs = get_or(g, "tail_convs", c.explainer.generator.tail_convs);
        }
        if (e.contains("discriminator")) {
            const json& d2 = e.at("discriminator");
            reject_unknown(d2, {"n_blocks", "base_channels", "leaky_slope"}, "explainer.discriminator");
            c.explainer.discriminator.n_blocks =
                get_or(d2, "n_blocks", c.explainer.discriminator.n_blocks);
            c.explainer.discriminator.base_channels =
                get_or(d2, "base_channels", c.explainer.discriminator.base_channels);
            c.explainer.discriminator.leaky_slope =
                get_or(d2, "leaky_slope", c.explainer.discriminator.leaky_slope);
        }
        if (e.contains("weights")) {
            const json& w = e.at("weights");
            reject_unknown(w,
                           {"lambda_d_s", "lambda_d_cy", "lambda_fc_a", "lambda_fc_s",
                            "lambda_fc_cy", "lambda_D", "lambda_D_d", "lambda_gp_d", "lambda_w"},
                           "explainer.weights");
            c.explainer.weights_explicit = true;
            LossWeights& lw = c.explainer.weights;
            lw.lambda_d_s = get_or(w, "lambda_d_s", lw.lambda_d_s);
            lw.lambda_d_cy = get_or(w, "lambda_d_cy", lw.lambda_d_cy);
            lw.lambda_fc_a = get_or(w, "lambda_fc_a", lw.lambda_fc_a);
            lw.lambda_fc_s = get_or(w, "lambda_fc_s", lw.lambda_fc_s);
            lw.lambda_fc_cy = get_or(w, "lambda_fc_cy", lw.lambda_fc_cy);
            lw.lambda_D = get_or(w, "lambda_D", lw.lambda_D);
            lw.lambda_D_d = get_or(w, "lambda_D_d", lw.lambda_D_d);
            lw.lambda_gp_d = get_or(w, "lambda_gp_d", lw.lambda_gp_d);
            if (w.contains("lambda_w")) lw.lambda_w = w.at("lambda_w").get<double>();
        }
    }

    if (j.contains("evaluation")) {
        const json& e = j.at("evaluation");
        reject_unknown(e,
                       {"vae", "percentiles", "add_mask_matched_percentile", "js_grid",
                        "images_per_domain", "ig_steps"},
                       "evaluation");
        if (e.contains("vae")) {
            const json& v = e.at("vae");
            reject_unknown(v,
                           {"latent_dim", "base_channels", "epochs", "batch_size", "learning_rate",
                            "kl_weight", "head_weight"},
                           "evaluation.vae");
            VaeConfig& vc = c.evaluation.vae;
            vc.latent_dim = get_or(v, "latent_dim", vc.latent_dim);
            vc.base_channels = get_or(v, "base_channels", vc.base_channels);
            vc.epochs = get_or(v, "epochs", vc.epochs);
            vc.batch_size = get_or(v, "batch_size", vc.batch_size);
            vc.learning_rate = get_or(v, "learning_rate", vc.learning_rate);
            vc.kl_weight = get_or(v, "kl_weight", vc.kl_weight);
            vc.head_weight = get_or(v, "head_weight", vc.head_weight);
        }
        if (e.contains("percentiles"))
            c.evaluation.percentiles = e.at("percentiles").get<std::vector<double>>();
        c.evaluation.add_mask_matched_percentile =
            get_or(e, "add_mask_matched_percentile", c.evaluation.add_mask_matched_percentile);
        if (e.contains("js_grid")) {
            const json& g = e.at("js_grid");
            reject_unknown(g, {"grid_size", "pad_bandwidths"}, "evaluation.js_grid");
            c.evaluation.js_grid.grid_size = get_or(g, "grid_size", c.evaluation.js_grid.grid_size);
            c.evaluation.js_grid.pad_bandwidths =
                get_or(g, "pad_bandwidths", c.evaluation.js_grid.pad_bandwidths);
        }
        c.evaluation.images_per_domain = get_or(e, "images_per_domain", c.evaluation.images_per_domain);
        c.evaluation.ig_steps = get_or(e, "ig_steps", c.evaluation.ig_steps);
    }

    for (double p : c.evaluation.percentiles)
        if (p <= 0 || p >= 100) throw ConfigError("evaluation.percentiles must lie in (0,100)");
    return c;
}

struct ConfigOverrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> method;
    std::optional<std::string> output_dir;
};

inline RunConfig load_run_config(const fs::path& path, const ConfigOverrides& ov = {}) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(read_file_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    RunConfig c = config_from_json(j);
    if (const char* env = std::getenv("COUNTERFAX_OUTPUT_DIR")) c.output_dir = env;
    if (ov.output_dir) c.output_dir = *ov.output_dir;
    if (ov.seed) c.seed = *ov.seed;
    if (ov.method) {
        parse_method(*ov.method);
        c.explainer.method = *ov.method;
    }
    // Referenced input paths must exist up front.
    if (c.dataset.source == DatasetSource::mnist_idx && !fs::is_directory(c.dataset.mnist_dir))
        throw ConfigError("dataset.mnist_dir does not exist: " + c.dataset.mnist_dir.string());
    if (c.dataset.source == DatasetSource::folder && !fs::is_directory(c.dataset.folder_root))
        throw ConfigError("dataset.folder_root does not exist: " + c.dataset.folder_root.string());
    return c;
}

// ---------------------------------------------------------------------------
// Config snapshots and manifests
// ---------------------------------------------------------------------------

inline json augment_to_json(const AugmentConfig& a) {
    return json{{"enabled", a.enabled},
                {"max_translate", a.max_translate},
                {"max_rotate", a.max_rotate},
                {"max_zoom", a.max_zoom},
                {"horizontal_flip", a.horizontal_flip}};
}

inline json dataset_to_json(const DatasetConfig& d) {
    json j{{"source", source_name(d.source)},
           {"image_size", d.image_size},
           {"fractions", {d.fractions[0], d.fractions[1], d.fractions[2]}}};
    if (d.source == DatasetSource::mnist_idx) {
        j["mnist_dir"] = d.mnist_dir.string();
        j["test_raw_limit"] = d.test_raw_limit;
    }
    if (d.source == DatasetSource::synthetic_digits)
        j["synthetic"] = {{"train3", d.synth_train3},
                          {"train8", d.synth_train8},
                          {"test3", d.synth_test3},
                          {"test8", d.synth_test8}};
    if (d.source == DatasetSource::patches)
        j["patches"] = {{"n_per_class", d.patch_n_per_class},
                        {"patch_size", d.patch_size},
                        {"noise_level", d.patch_noise}};
    if (d.source == DatasetSource::folder) j["folder_root"] = d.folder_root.string();
    return j;
}

inline json classifier_to_json(const ClassifierTrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"lr_decay_factor", c.lr_decay_factor},
                {"plateau_patience", c.plateau_patience},
                {"augment", augment_to_json(c.augment)}};
}

inline json weights_to_json(const LossWeights& w) {
    json j{{"lambda_d_s", w.lambda_d_s},   {"lambda_d_cy", w.lambda_d_cy},
           {"lambda_fc_a", w.lambda_fc_a}, {"lambda_fc_s", w.lambda_fc_s},
           {"lambda_fc_cy", w.lambda_fc_cy}, {"lambda_D", w.lambda_D},
           {"lambda_D_d", w.lambda_D_d},   {"lambda_gp_d", w.lambda_gp_d}};
    if (w.lambda_w) j["lambda_w"] = *w.lambda_w;
    return j;
}

inline json explainer_to_json(const ExplainerConfig& e, const LossWeights& effective) {
    return json{{"method", e.method},
                {"images_per_domain", e.images_per_domain},
                {"threshold", e.threshold},
                {"schedule",
                 {{"epochs", e.schedule.epochs},
                  {"batch_size", e.schedule.batch_size},
                  {"gen_lr", e.schedule.gen_lr},
                  {"disc_lr", e.schedule.disc_lr},
                  {"augment", augment_to_json(e.schedule.augment)}}},
                {"generator",
                 {{"n_scales", e.generator.n_scales},
                  {"base_channels", e.generator.base_channels},
                  {"dropout_rate", e.generator.dropout_rate},
                  {"output_mode",
                   e.generator.output_mode == GeneratorOutputMode::clip ? "clip" : "sigmoid"},
                  {"tail_convs", e.generator.tail_convs}}},
                {"discriminator",
                 {{"n_blocks", e.discriminator.n_blocks},
                  {"base_channels", e.discriminator.base_channels},
                  {"leaky_slope", e.discriminator.leaky_slope}}},
                {"weights", weights_to_json(effective)}};
}

inline json eval_to_json(const EvalConfig& e) {
    return json{{"vae",
                 {{"latent_dim", e.vae.latent_dim},
                  {"base_channels", e.vae.base_channels},
                  {"epochs", e.vae.epochs},
                  {"batch_size", e.vae.batch_size},
                  {"learning_rate", e.vae.learning_rate},
                  {"kl_weight", e.vae.kl_weight},
                  {"head_weight", e.vae.head_weight}}},
                {"percentiles", e.percentiles},
                {"add_mask_matched_percentile", e.add_mask_matched_percentile},
                {"js_grid",
                 {{"grid_size", e.js_grid.grid_size}, {"pad_bandwidths", e.js_grid.pad_bandwidths}}},
                {"images_per_domain", e.images_per_domain},
                {"ig_steps", e.ig_steps}};
}

inline std::string now_iso8601() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%FT%TZ");
    return os.str();
}

/// Stage manifest: config snapshot + hash, artifact hashes, metric summary.
/// The creation timestamp never participates in any hash.
struct StageManifest {
    std::string stage;
    json config;
    uint64_t seed = 0;
    std::map<std::string, std::string> artifact_hashes;
    json metrics;

    std::string config_hash() const {
        return hash_hex(fnv1a64(config.dump() + std::to_string(seed)));
    }

    void save(const fs::path& path) const {
        json j{{"stage", stage},
               {"tool_version", kVersion},
               {"config", config},
               {"config_hash", config_hash()},
               {"seed", seed},
               {"artifacts", artifact_hashes},
               {"metrics", metrics},
               {"created_at", now_iso8601()}};
        write_file_text_atomic(path, j.dump(2) + "\n");
    }

    static std::optional<StageManifest> load(const fs::path& path) {
        if (!fs::exists(path)) return std::nullopt;
        StageManifest m;
        json j = json::parse(read_file_text(path));
        m.stage = j.value("stage", "");
        m.config = j.value("config", json::object());
        m.seed = j.value("seed", uint64_t(0));
        if (j.contains("artifacts"))
            for (auto& [k, v] : j.at("artifacts").items())
                m.artifact_hashes[k] = v.get<std::string>();
        m.metrics = j.value("metrics", json::object());
        return m;
    }
};

inline std::string file_hash_hex(const fs::path& p) {
    auto bytes = read_file_bytes(p);
    return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

// ---------------------------------------------------------------------------
// Dataset containers
// ---------------------------------------------------------------------------

inline void save_labeled(const fs::path& path, const std::vector<LabeledSample>& samples) {
    if (samples.empty()) throw ConfigError("save_labeled: empty sample list");
    int h = samples[0].image.height, w = samples[0].image.width;
    std::vector<float> images;
    images.reserve(samples.size() * size_t(h) * w);
    std::vector<uint8_t> labels;
    for (const auto& s : samples) {
        images.insert(images.end(), s.image.pixels.begin(), s.image.pixels.end());
        labels.push_back(uint8_t(s.label));
    }
    ArrayContainer c;
    c.put("images", NamedArray::from_vector<float>(images, {int64_t(samples.size()), h, w}));
    c.put("labels", NamedArray::from_vector<uint8_t>(labels, {int64_t(samples.size())}));
    c.save(path);
}

inline std::vector<LabeledSample> load_labeled(const fs::path& path) {
    auto c = ArrayContainer::load(path);
    const auto& ia = c.get("images");
    auto images = ia.to_vector<float>();
    auto labels = c.get("labels").to_vector<uint8_t>();
    int h = int(ia.dims[1]), w = int(ia.dims[2]);
    size_t hw = size_t(h) * w;
    std::vector<LabeledSample> out(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        out[i].label = labels[i];
        out[i].image.height = h;
        out[i].image.width = w;
        out[i].image.pixels.assign(images.begin() + std::ptrdiff_t(i * hw),
                                   images.begin() + std::ptrdiff_t((i + 1) * hw));
    }
    return out;
}

inline void save_masked(const fs::path& path, const std::vector<MaskedSample>& samples) {
    if (samples.empty()) throw ConfigError("save_masked: empty sample list");
    int h = samples[0].image.height, w = samples[0].image.width;
    std::vector<float> images;
    std::vector<uint8_t> labels, masks;
    for (const auto& s : samples) {
        images.insert(images.end(), s.image.pixels.begin(), s.image.pixels.end());
        labels.push_back(uint8_t(s.label));
        masks.insert(masks.end(), s.mask.begin(), s.mask.end());
    }
    ArrayContainer c;
    c.put("images", NamedArray::from_vector<float>(images, {int64_t(samples.size()), h, w}));
    c.put("labels", NamedArray::from_vector<uint8_t>(labels, {int64_t(samples.size())}));
    c.put("masks", NamedArray::from_vector<uint8_t>(masks, {int64_t(samples.size()), h, w}));
    c.save(path);
}

inline std::vector<MaskedSample> load_masked(const fs::path& path) {
    auto c = ArrayContainer::load(path);
    const auto& ia = c.get("images");
    auto images = ia.to_vector<float>();
    auto labels = c.get("labels").to_vector<uint8_t>();
    auto masks = c.get("masks").to_vector<uint8_t>();
    int h = int(ia.dims[1]), w = int(ia.dims[2]);
    size_t hw = size_t(h) * w;
    std::vector<MaskedSample> out(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        out[i].label = labels[i];
        out[i].image.height = h;
        out[i].image.width = w;
        out[i].image.pixels.assign(images.begin() + std::ptrdiff_t(i * hw),
                                   images.begin() + std::ptrdiff_t((i + 1) * hw));
        out[i].mask.assign(masks.begin() + std::ptrdiff_t(i * hw),
                           masks.begin() + std::ptrdiff_t((i + 1) * hw));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Materialize train/val/test containers (plus masks for the patch source).
/// Re-running with an unchanged config is a no-op.
inline void cmd_prepare_data(const RunConfig& cfg, bool verbose = true) {
    fs::path dir = cfg.data_dir();
    json snapshot = dataset_to_json(cfg.dataset);
    auto existing = StageManifest::load(dir / "manifest.json");
    StageManifest m;
    m.stage = "prepare-data";
    m.config = snapshot;
    m.seed = cfg.substream("data");
    if (existing && existing->config_hash() == m.config_hash() &&
        fs::exists(dir / "train.cfx")) {
        if (verbose) std::cout << "[prepare-data] up to date, skipping" << std::endl;
        return;
    }
    fs::create_directories(dir);
    uint64_t seed = cfg.substream("data");

    DatasetSplit split;
    std::vector<MaskedSample> masked;
    switch (cfg.dataset.source) {
        case DatasetSource::synthetic_digits: {
            fs::path idx = dir / "idx";
            write_synthetic_digit_idx(idx, cfg.dataset.synth_train3, cfg.dataset.synth_train8,
                                      cfg.dataset.synth_test3, cfg.dataset.synth_test8,
                                      cfg.dataset.image_size, seed);
            auto train = load_idx_digits(idx / "train-images-idx3-ubyte",
                                         idx / "train-labels-idx1-ubyte", {3, 8},
                                         {{3, 0}, {8, 1}});
            auto test = load_idx_digits(idx / "t10k-images-idx3-ubyte",
                                        idx / "t10k-labels-idx1-ubyte", {3, 8}, {{3, 0}, {8, 1}});
            std::array<double, 3> fr = {cfg.dataset.fractions[0], cfg.dataset.fractions[1], 0.0};
            split = split_dataset(train, fr, seed);
            split.test = std::move(test);
            break;
        }
        case DatasetSource::mnist_idx: {
            auto pick = [&](const std::string& stem, const std::string& kind) {
                for (const char* suffix : {"", ".gz"}) {
                    fs::path p = cfg.dataset.mnist_dir / (stem + "-" + kind + "-idx" +
                                                          (kind == "images" ? "3" : "1") +
                                                          "-ubyte" + suffix);
                    if (fs::exists(p)) return p;
                }
                throw ConfigError("MNIST file missing under " + cfg.dataset.mnist_dir.string() +
                                  ": " + stem + "-" + kind);
            };
            auto train = load_idx_digits(pick("train", "images"), pick("train", "labels"), {3, 8},
                                         {{3, 0}, {8, 1}});
            auto test = load_idx_digits(pick("t10k", "images"), pick("t10k", "labels"), {3, 8},
                                        {{3, 0}, {8, 1}}, cfg.dataset.test_raw_limit);
            std::array<double, 3> fr = {cfg.dataset.fractions[0], cfg.dataset.fractions[1], 0.0};
            split = split_dataset(train, fr, seed);
            split.test = std::move(test);
            break;
        }
        case DatasetSource::patches: {
            masked = make_patch_dataset(cfg.dataset.patch_n_per_class, cfg.dataset.image_size,
                                        cfg.dataset.patch_size, cfg.dataset.patch_noise, seed);
            std::vector<LabeledSample> flat;
            for (const auto& s : masked) flat.push_back({s.image, s.label});
            split = split_dataset(flat, cfg.dataset.fractions, seed);
            break;
        }
        case DatasetSource::folder: {
            auto all = load_image_folder(cfg.dataset.folder_root, cfg.dataset.image_size);
            split = split_dataset(all, cfg.dataset.fractions, seed);
            break;
        }
    }
    if (split.train.empty() || split.test.empty())
        throw ConfigError("prepare-data: produced an empty train or test split");

    save_labeled(dir / "train.cfx", split.train);
    if (!split.val.empty()) save_labeled(dir / "val.cfx", split.val);
    save_labeled(dir / "test.cfx", split.test);
    if (!masked.empty()) {
        // Masks for the test samples only are needed downstream, but the full
        // set is exported with its generation config for reproducibility.
        save_masked(dir / "masked.cfx", masked);
    }

    m.artifact_hashes["train.cfx"] = file_hash_hex(dir / "train.cfx");
    if (!split.val.empty()) m.artifact_hashes["val.cfx"] = file_hash_hex(dir / "val.cfx");
    m.artifact_hashes["test.cfx"] = file_hash_hex(dir / "test.cfx");
    if (!masked.empty()) m.artifact_hashes["masked.cfx"] = file_hash_hex(dir / "masked.cfx");
    m.metrics = {{"train_count", split.train.size()},
                 {"val_count", split.val.size()},
                 {"test_count", split.test.size()}};
    m.save(dir / "manifest.json");
    if (verbose)
        std::cout << "[prepare-data] train/val/test = " << split.train.size() << "/"
                  << split.val.size() << "/" << split.test.size() << std::endl;
}

inline DatasetSplit load_split(const RunConfig& cfg) {
    fs::path dir = cfg.data_dir();
    if (!fs::exists(dir / "train.cfx"))
        throw ConfigError("prepared data not found under " + dir.string() +
                          "; run prepare-data first");
    DatasetSplit split;
    split.train = load_labeled(dir / "train.cfx");
    if (fs::exists(dir / "val.cfx")) split.val = load_labeled(dir / "val.cfx");
    split.test = load_labeled(dir / "test.cfx");
    return split;
}

inline void cmd_train_classifier(const RunConfig& cfg, bool verbose = true) {
    DatasetSplit split = load_split(cfg);
    ClassifierTrainConfig cc = cfg.classifier;
    cc.seed = cfg.substream("classifier");

    auto model = build_lenet<float>(cfg.dataset.image_size, cc.seed);
    train_classifier(model, split, cc, verbose);
    auto metrics = evaluate_classifier(model, split.test, cfg.explainer.threshold);

    fs::path dir = cfg.classifier_dir();
    fs::create_directories(dir);
    save_classifier(model, dir / "classifier.cfx");

    StageManifest m;
    m.stage = "train-classifier";
    m.config = classifier_to_json(cc);
    m.seed = cc.seed;
    m.artifact_hashes["classifier.cfx"] = file_hash_hex(dir / "classifier.cfx");
    m.metrics = {{"test_auc", metrics.auc},
                 {"test_accuracy", metrics.accuracy},
                 {"param_hash", hash_hex(model.param_hash())}};
    m.save(dir / "manifest.json");
    if (verbose)
        std::cout << "[train-classifier] test auc=" << metrics.auc << " acc=" << metrics.accuracy
                  << std::endl;
}

inline LeNetClassifier<float> load_run_classifier(const RunConfig& cfg) {
    fs::path p = cfg.classifier_dir() / "classifier.cfx";
    if (!fs::exists(p))
        throw ConfigError("classifier checkpoint not found at " + p.string() +
                          "; run train-classifier first");
    return load_classifier<float>(p);
}

/// Decision partitions for explainer training: train-split images for the
/// training pool (clipped per side), val-split images for flip-rate
/// reporting (clipped to 256 per side).
template <typename T>
std::pair<DecisionPartition, DecisionPartition> make_explainer_partitions(
    const RunConfig& cfg, const LeNetClassifier<T>& cls, const DatasetSplit& split) {
    auto predict = [&](const std::vector<Image>& b) { return predict_prob(cls, b); };
    std::vector<Image> train_images;
    for (const auto& s : split.train) train_images.push_back(s.image);
    DecisionPartition part =
        partition_by_decision(train_images, predict, cfg.explainer.threshold, cls.id());
    if (part.chi0.empty() || part.chi1.empty())
        throw ConfigError("decision partition has an empty side; classifier may be degenerate");

    int cap = cfg.explainer.images_per_domain;
    if (cap > 0) {
        if (int(part.chi0.size()) > cap) part.chi0.resize(size_t(cap));
        if (int(part.chi1.size()) > cap) part.chi1.resize(size_t(cap));
    }

    DecisionPartition val;
    if (!split.val.empty()) {
        std::vector<Image> val_images;
        for (const auto& s : split.val) val_images.push_back(s.image);
        val = partition_by_decision(val_images, predict, cfg.explainer.threshold, cls.id());
        if (val.chi0.size() > 256) val.chi0.resize(256);
        if (val.chi1.size() > 256) val.chi1.resize(256);
    }
    return {part, val};
}

inline void cmd_train_explainer(const RunConfig& cfg, const std::string& method_name_str,
                                bool verbose = true) {
    ExplainerMethod method = parse_method(method_name_str);
    auto cls = load_run_classifier(cfg);
    DatasetSplit split = load_split(cfg);
    auto [part, val] = make_explainer_partitions(cfg, cls, split);

    LossWeights weights =
        cfg.explainer.weights_explicit ? cfg.explainer.weights : default_weights(method);
    GeneratorSpec gen_spec = cfg.explainer.generator;
    if (method == ExplainerMethod::SSyE && gen_spec.tail_convs == 0) gen_spec.tail_convs = 2;

    TrainSchedule sched = cfg.explainer.schedule;
    sched.seed = cfg.substream("explainer") ^ fnv1a64(method_name_str);

    auto explainer = build_explainer<float>(method, gen_spec, cfg.explainer.discriminator, &cls,
                                            weights, cfg.explainer.threshold, sched.seed);
    auto history = fit(explainer, part, sched, val.chi0.empty() ? nullptr : &val, verbose);

    fs::path dir = cfg.explainer_dir(method_name_str);
    fs::create_directories(dir);
    save_explainer(explainer, dir / "explainer.cfx");

    // Per-epoch loss log, one line per epoch.
    std::ostringstream log;
    log << "epoch,L_d_s,L_d_cy,L_fc_a,L_fc_s,L_fc_cy,L_D_g,L_w,total,disc_loss,disc_gp,"
           "flip_rate0,flip_rate1\n";
    for (size_t i = 0; i < history.size(); ++i) {
        const auto& h = history[i];
        log << i + 1 << "," << h.gen_mean.L_d_s << "," << h.gen_mean.L_d_cy << ","
            << h.gen_mean.L_fc_a << "," << h.gen_mean.L_fc_s << "," << h.gen_mean.L_fc_cy << ","
            << h.gen_mean.L_D_g << "," << h.gen_mean.L_w << "," << h.gen_mean.total << ","
            << h.disc_loss << "," << h.disc_gp << "," << h.flip_rate0 << "," << h.flip_rate1
            << "\n";
    }
    write_file_text(dir / "loss_log.csv", log.str());

    StageManifest m;
    m.stage = "train-explainer";
    ExplainerConfig snap = cfg.explainer;
    snap.method = method_name_str;
    snap.generator = gen_spec;
    m.config = explainer_to_json(snap, weights);
    m.seed = sched.seed;
    m.artifact_hashes["explainer.cfx"] = file_hash_hex(dir / "explainer.cfx");
    m.metrics = {{"classifier_hash", hash_hex(cls.param_hash())},
                 {"chi0", part.chi0.size()},
                 {"chi1", part.chi1.size()}};
    if (!history.empty()) {
        m.metrics["final_flip_rate0"] = history.back().flip_rate0;
        m.metrics["final_flip_rate1"] = history.back().flip_rate1;
    }
    m.save(dir / "manifest.json");
}

inline Explainer<float> load_run_explainer(const RunConfig& cfg, const std::string& method,
                                           const LeNetClassifier<float>* cls) {
    fs::path p = cfg.explainer_dir(method) / "explainer.cfx";
    if (!fs::exists(p))
        throw ConfigError("explainer checkpoint not found at " + p.string() +
                          "; run train-explainer --method " + method + " first");
    return load_explainer<float>(p, cls);
}

inline GrayImage8 to_gray8(const Image& im, bool minmax_scale) {
    GrayImage8 g;
    g.height = im.height;
    g.width = im.width;
    g.pixels.resize(im.pixels.size());
    float lo = 0, hi = 1;
    if (minmax_scale) {
        lo = 1e30f;
        hi = -1e30f;
        for (float v : im.pixels) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi <= lo) hi = lo + 1;
    }
    for (size_t i = 0; i < im.pixels.size(); ++i) {
        float v = (im.pixels[i] - lo) / (hi - lo);
        g.pixels[i] = uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
    return g;
}

/// Export stable / adversary / map files for a set of images plus one grid
/// sheet (rows: original, stable, adversary, scaled map).
inline void cmd_explain(const RunConfig& cfg, const std::string& method,
                        const std::optional<fs::path>& input, const std::optional<fs::path>& out,
                        int count = 8, bool verbose = true) {
    auto cls = load_run_classifier(cfg);
    auto explainer = load_run_explainer(cfg, method, &cls);

    std::vector<Image> images;
    std::vector<std::string> stems;
    if (input) {
        if (!fs::exists(*input)) throw ConfigError("explain input not found: " + input->string());
        std::vector<fs::path> files;
        if (fs::is_directory(*input)) {
            for (const auto& e : fs::directory_iterator(*input)) {
                auto ext = e.path().extension().string();
                if (ext == ".png" || ext == ".pgm") files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
        } else {
            files.push_back(*input);
        }
        for (const auto& f : files) {
            GrayImage8 g = f.extension() == ".png" ? read_png(f) : read_pgm(f);
            Image im;
            im.height = g.height;
            im.width = g.width;
            im.pixels.resize(g.pixels.size());
            for (size_t i = 0; i < g.pixels.size(); ++i) im.pixels[i] = float(g.pixels[i]) / 255.0f;
            if (im.height != cfg.dataset.image_size || im.width != cfg.dataset.image_size)
                im = resize_bilinear(im, cfg.dataset.image_size, cfg.dataset.image_size);
            images.push_back(std::move(im));
            stems.push_back(f.stem().string());
        }
    } else {
        DatasetSplit split = load_split(cfg);
        for (int i = 0; i < count && i < int(split.test.size()); ++i) {
            images.push_back(split.test[size_t(i)].image);
            stems.push_back("test" + std::to_string(i));
        }
    }
    if (images.empty()) throw ConfigError("explain: no input images");

    fs::path dir = out.value_or(cfg.explainer_dir(method) / "explanations");
    fs::create_directories(dir);

    auto stables = stable_batch(explainer, images);
    auto advs = adversary_batch(explainer, images);

    int h = images[0].height, w = images[0].width, sep = 2;
    GrayImage8 sheet;
    sheet.height = int(images.size()) * (h + sep) - sep;
    sheet.width = 4 * (w + sep) - sep;
    sheet.pixels.assign(size_t(sheet.height) * sheet.width, 32);

    auto blit = [&](const GrayImage8& tile, int row, int col) {
        for (int r = 0; r < tile.height; ++r)
            for (int c2 = 0; c2 < tile.width; ++c2)
                sheet.pixels[size_t(row * (h + sep) + r) * sheet.width + col * (w + sep) + c2] =
                    tile.pixels[size_t(r) * tile.width + c2];
    };

    for (size_t i = 0; i < images.size(); ++i) {
        ExplanationMap map = map_from_images(stables[i], advs[i]);
        write_pgm(dir / (stems[i] + "_stable.pgm"), to_gray8(stables[i], false));
        write_pgm(dir / (stems[i] + "_adversary.pgm"), to_gray8(advs[i], false));
        Image map_img;
        map_img.height = map.height;
        map_img.width = map.width;
        map_img.pixels = map.values;
        write_pgm(dir / (stems[i] + "_map.pgm"), to_gray8(map_img, true));
        ArrayContainer mc;
        mc.put("map", NamedArray::from_vector<float>(map.values, {map.height, map.width}));
        mc.save(dir / (stems[i] + "_map.cfx"));

        blit(to_gray8(images[i], false), int(i), 0);
        blit(to_gray8(stables[i], false), int(i), 1);
        blit(to_gray8(advs[i], false), int(i), 2);
        blit(to_gray8(map_img, true), int(i), 3);
    }
    write_pgm(dir / "sheet.pgm", sheet);
    if (verbose)
        std::cout << "[explain] wrote " << images.size() << " explanations to " << dir
                  << std::endl;
}

/// Train (or reuse) the evaluation embedding on the train-split partition.
inline EmbeddingModel<float> ensure_embedding(const RunConfig& cfg,
                                              const LeNetClassifier<float>& cls,
                                              const DatasetSplit& split, bool verbose) {
    fs::path dir = cfg.eval_dir();
    fs::create_directories(dir);
    fs::path ckpt = dir / "embedding.cfx";
    json snapshot = eval_to_json(cfg.evaluation);
    snapshot["classifier_hash"] = hash_hex(cls.param_hash());
    auto existing = StageManifest::load(dir / "embedding_manifest.json");
    StageManifest m;
    m.stage = "embedding";
    m.config = snapshot;
    m.seed = cfg.substream("eval");
    if (existing && existing->config_hash() == m.config_hash() && fs::exists(ckpt)) {
        if (verbose) std::cout << "[evaluate] reusing cached embedding" << std::endl;
        return load_embedding<float>(ckpt);
    }

    auto predict = [&](const std::vector<Image>& b) { return predict_prob(cls, b); };
    std::vector<Image> train_images;
    for (const auto& s : split.train) train_images.push_back(s.image);
    DecisionPartition part =
        partition_by_decision(train_images, predict, cfg.explainer.threshold, cls.id());

    VaeConfig vc = cfg.evaluation.vae;
    vc.seed = cfg.substream("eval");
    auto model = build_embedding<float>(vc, cfg.dataset.image_size);
    train_embedding(model, part, verbose);
    save_embedding(model, ckpt);

    m.artifact_hashes["embedding.cfx"] = file_hash_hex(ckpt);
    m.metrics = {{"head_val_accuracy", model.head_val_accuracy}};
    m.save(dir / "embedding_manifest.json");
    return model;
}

inline void cmd_evaluate(const RunConfig& cfg, const std::string& method, bool verbose = true) {
    auto cls = load_run_classifier(cfg);
    auto explainer = load_run_explainer(cfg, method, &cls);
    DatasetSplit split = load_split(cfg);
    auto embedding = ensure_embedding(cfg, cls, split, verbose);

    auto predict = [&](const std::vector<Image>& b) { return predict_prob(cls, b); };
    std::vector<Image> test_images;
    for (const auto& s : split.test) test_images.push_back(s.image);
    DecisionPartition test_part =
        partition_by_decision(test_images, predict, cfg.explainer.threshold, cls.id());
    int cap = cfg.evaluation.images_per_domain;
    if (cap > 0) {
        if (int(test_part.chi0.size()) > cap) test_part.chi0.resize(size_t(cap));
        if (int(test_part.chi1.size()) > cap) test_part.chi1.resize(size_t(cap));
    }

    MetricReport report;
    report.method = method;
    report.dataset = source_name(cfg.dataset.source);
    report.classifier_hash = hash_hex(cls.param_hash());
    report.acc_a = adversarial_accuracy(cls, explainer, test_images, cfg.explainer.threshold);
    bool has_stable = explainer.method == ExplainerMethod::SyCE ||
                      explainer.method == ExplainerMethod::SSyE ||
                      explainer.method == ExplainerMethod::CyCSAE;
    if (has_stable) {
        report.has_acc_s = true;
        report.acc_s = stable_accuracy(cls, explainer, test_images, cfg.explainer.threshold);
    }
    domain_translation_report(cls, explainer, embedding, test_part, report);

    json baselines;
    if (cfg.dataset.source == DatasetSource::patches) {
        auto masked = load_masked(cfg.data_dir() / "masked.cfx");
        // Localization runs on held-out class-1 samples (their masks exist).
        DatasetSplit msplit;  // reproduce the split indices deterministically
        std::vector<LabeledSample> flat;
        for (const auto& s : masked) flat.push_back({s.image, s.label});
        // Match samples back to masks by content hash.
        std::map<uint64_t, const MaskedSample*> by_hash;
        for (const auto& s : masked) by_hash[hash_image(s.image)] = &s;

        std::vector<const MaskedSample*> eval_samples;
        for (const auto& s : split.test) {
            if (s.label != 1) continue;
            auto it = by_hash.find(hash_image(s.image));
            if (it != by_hash.end()) eval_samples.push_back(it->second);
        }
        if (!eval_samples.empty()) {
            report.has_loc = true;
            std::vector<double> percentiles = cfg.evaluation.percentiles;
            if (cfg.evaluation.add_mask_matched_percentile) {
                double mean_frac = 0;
                for (const auto* s : eval_samples)
                    mean_frac += double(s->mask_area()) / double(s->mask.size());
                mean_frac /= double(eval_samples.size());
                percentiles.push_back(100.0 * (1.0 - mean_frac));
            }

            std::vector<Image> loc_images;
            for (const auto* s : eval_samples) loc_images.push_back(s->image);
            auto maps = explanation_map_batch(explainer, loc_images);

            Image zero_baseline = Image::zeros(cfg.dataset.image_size, cfg.dataset.image_size);
            std::vector<ExplanationMap> grad_maps, ig_maps;
            for (const auto* s : eval_samples) {
                grad_maps.push_back(gradient_map(cls, s->image));
                ig_maps.push_back(
                    integrated_gradients_map(cls, s->image, zero_baseline, cfg.evaluation.ig_steps));
            }

            auto mean_loc = [&](const std::vector<ExplanationMap>& ms, double p) {
                double acc = 0;
                for (size_t i = 0; i < ms.size(); ++i)
                    acc += iou_at_percentile(ms[i], eval_samples[i]->mask, p);
                return acc / double(ms.size());
            };
            auto mean_ncc = [&](const std::vector<ExplanationMap>& ms) {
                double acc = 0;
                for (size_t i = 0; i < ms.size(); ++i) acc += ncc(ms[i], eval_samples[i]->mask).value;
                return acc / double(ms.size());
            };

            for (double p : percentiles) report.iou[p] = mean_loc(maps, p);
            report.ncc_mean = mean_ncc(maps);

            for (auto& [bname, bmaps] :
                 std::vector<std::pair<std::string, std::vector<ExplanationMap>*>>{
                     {"gradient", &grad_maps}, {"ig", &ig_maps}}) {
                json b;
                for (double p : percentiles) {
                    std::string key = std::to_string(p);
                    key.erase(key.find_last_not_of('0') + 1);
                    if (!key.empty() && key.back() == '.') key.pop_back();
                    b["iou"][key] = mean_loc(*bmaps, p);
                }
                b["ncc"] = mean_ncc(*bmaps);
                baselines[bname] = b;
            }
        }
    }

    json out = report_to_json(report);
    if (!baselines.is_null()) out["baselines"] = baselines;
    fs::path dir = cfg.eval_dir();
    fs::create_directories(dir);
    fs::path report_path = dir / ("report_" + method + ".json");
    write_file_text(report_path, out.dump(2) + "\n");

    // PCA scatter export for external plotting: x, y, group.
    {
        LatentSet mu0 = embed_mu(embedding, test_part.chi0);
        LatentSet mu1 = embed_mu(embedding, test_part.chi1);
        LatentSet ref = mu0;
        ref.insert(ref.end(), mu1.begin(), mu1.end());
        std::ostringstream csv;
        csv << "x,y,group\n";
        auto dump_pts = [&](const LatentSet& mu, const std::string& group) {
            for (const auto& p : pca_project_2d(ref, mu))
                csv << p[0] << "," << p[1] << "," << group << "\n";
        };
        dump_pts(mu0, "real_chi0");
        dump_pts(mu1, "real_chi1");
        auto adv0 = adversary_batch(explainer, test_part.chi0);
        auto adv1 = adversary_batch(explainer, test_part.chi1);
        dump_pts(embed_mu(embedding, adv0), "adv_0to1");
        dump_pts(embed_mu(embedding, adv1), "adv_1to0");
        if (has_stable) {
            dump_pts(embed_mu(embedding, stable_batch(explainer, test_part.chi0)), "stable_chi0");
            dump_pts(embed_mu(embedding, stable_batch(explainer, test_part.chi1)), "stable_chi1");
        }
        write_file_text(dir / ("scatter_" + method + ".csv"), csv.str());
    }

    StageManifest m;
    m.stage = "evaluate";
    m.config = eval_to_json(cfg.evaluation);
    m.seed = cfg.substream("eval");
    m.artifact_hashes["report_" + method + ".json"] = file_hash_hex(report_path);
    m.metrics = {{"acc_a", report.acc_a}};
    if (report.has_acc_s) m.metrics["acc_s"] = report.acc_s;
    m.save(dir / ("manifest_" + method + ".json"));
    if (verbose) {
        std::cout << "[evaluate] " << method << " acc_a=" << report.acc_a;
        if (report.has_acc_s) std::cout << " acc_s=" << report.acc_s;
        std::cout << " fd(0to1 adv)=" << report.to1.fd_adv << " fd(1to0 adv)=" << report.to0.fd_adv
                  << std::endl;
    }
}

/// Aggregate evaluation reports into a method-by-metric comparison table.
inline std::string cmd_report(const RunConfig& cfg, const std::vector<std::string>& runs,
                              bool verbose = true) {
    std::vector<json> reports;
    for (const auto& r : runs) {
        fs::path p = r;
        if (fs::is_directory(p)) {
            bool found = false;
            // A run directory: pick up every evaluation report inside it.
            fs::path ed = p / "eval";
            if (fs::is_directory(ed)) {
                std::vector<fs::path> files;
                for (const auto& e : fs::directory_iterator(ed))
                    if (e.path().filename().string().starts_with("report_") &&
                        e.path().extension() == ".json")
                        files.push_back(e.path());
                std::sort(files.begin(), files.end());
                for (const auto& f : files) {
                    reports.push_back(json::parse(read_file_text(f)));
                    found = true;
                }
            }
            if (!found) throw ConfigError("no evaluation reports under run directory " + r);
        } else if (fs::exists(p)) {
            reports.push_back(json::parse(read_file_text(p)));
        } else {
            throw ConfigError("report input not found: " + r);
        }
    }
    if (reports.empty()) throw ConfigError("report: no inputs");

    auto fmt = [](const json& j, const char* a, const char* b, const char* c2 = nullptr) {
        const json* p = &j;
        for (const char* key : {a, b, c2}) {
            if (!key) break;
            if (!p->contains(key)) return std::string("-");
            p = &p->at(key);
        }
        std::ostringstream os;
        os << std::fixed << std::setprecision(3) << p->get<double>();
        return os.str();
    };

    std::vector<std::string> cols = {"method",    "acc_a",     "acc_s",    "fd_0to1_a",
                                     "fd_0to1_s", "fd_1to0_a", "fd_1to0_s", "js_0to1_a",
                                     "js_1to0_a", "ncc"};
    std::ostringstream text, csv;
    for (size_t i = 0; i < cols.size(); ++i) {
        text << std::setw(i == 0 ? 10 : 10) << cols[i];
        csv << (i ? "," : "") << cols[i];
    }
    text << "\n";
    csv << "\n";
    for (const auto& r : reports) {
        std::vector<std::string> row = {r.value("method", std::string("?")),
                                        fmt(r, "acc", "a"),
                                        fmt(r, "acc", "s"),
                                        fmt(r, "fd", "0to1", "adv"),
                                        fmt(r, "fd", "0to1", "stable"),
                                        fmt(r, "fd", "1to0", "adv"),
                                        fmt(r, "fd", "1to0", "stable"),
                                        fmt(r, "js", "0to1", "adv"),
                                        fmt(r, "js", "1to0", "adv"),
                                        fmt(r, "loc", "ncc")};
        for (size_t i = 0; i < row.size(); ++i) {
            text << std::setw(10) << row[i];
            csv << (i ? "," : "") << row[i];
        }
        text << "\n";
        csv << "\n";
    }

    fs::path dir = cfg.eval_dir();
    fs::create_directories(dir);
    write_file_text(dir / "comparison.csv", csv.str());
    if (verbose) std::cout << text.str();
    return text.str();
}

}  // namespace counterfax
