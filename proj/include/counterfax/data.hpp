#pragma once

// Dataset ingestion and preparation: IDX digit files (plain or gzipped),
// generic labeled image folders, deterministic splits, classifier-decision
// partitions, the synthetic patch dataset with ground-truth masks, and
// geometric augmentation.

#include <algorithm>
#include <array>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "counterfax/io.hpp"
#include "counterfax/tensor.hpp"

namespace counterfax {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Single-channel image with intensities in [0, 1].
struct Image {
    int height = 0, width = 0;
    std::vector<float> pixels;  // row-major, height * width

    float& at(int r, int c) { return pixels[size_t(r) * width + c]; }
    float at(int r, int c) const { return pixels[size_t(r) * width + c]; }

    static Image zeros(int h, int w) {
        Image im;
        im.height = h;
        im.width = w;
        im.pixels.assign(size_t(h) * w, 0.0f);
        return im;
    }
};

struct LabeledSample {
    Image image;
    int label = 0;  // in {0, 1}
};

struct DatasetSplit {
    std::vector<LabeledSample> train, val, test;
};

/// Real images split by the frozen classifier's thresholded decision.
struct DecisionPartition {
    std::vector<Image> chi0, chi1;
    std::string classifier_id;
    double threshold = 0.5;
    bool empty_side_warning = false;
};

struct MaskedSample {
    Image image;
    int label = 0;
    std::vector<uint8_t> mask;  // same shape as image, values in {0, 1}

    int64_t mask_area() const {
        int64_t n = 0;
        for (uint8_t m : mask) n += m;
        return n;
    }
};

inline uint64_t hash_image(const Image& im, uint64_t h = 0xcbf29ce484222325ull) {
    h = fnv1a64(&im.height, sizeof im.height, h);
    h = fnv1a64(&im.width, sizeof im.width, h);
    return fnv1a64(im.pixels.data(), im.pixels.size() * sizeof(float), h);
}

inline uint64_t hash_images(const std::vector<Image>& images) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& im : images) h = hash_image(im, h);
    return h;
}

// ---------------------------------------------------------------------------
// Tensor bridging
// ---------------------------------------------------------------------------

template <typename T = float>
Tensor<T> images_to_tensor(const std::vector<Image>& images) {
    if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
    int h = images[0].height, w = images[0].width;
    std::vector<T> v;
    v.reserve(images.size() * size_t(h) * w);
    for (const auto& im : images) {
        if (im.height != h || im.width != w) throw ShapeError("images_to_tensor: ragged batch");
        for (float p : im.pixels) v.push_back(T(p));
    }
    return Tensor<T>::from({int(images.size()), 1, h, w}, std::move(v));
}

template <typename T>
Image image_from_tensor(const Tensor<T>& t, int n = 0) {
    if (t.ndim() != 4 || t.dim(1) != 1) throw ShapeError("image_from_tensor: expected (N,1,H,W)");
    Image im = Image::zeros(t.dim(2), t.dim(3));
    int64_t hw = int64_t(im.height) * im.width;
    const auto& v = t.data();
    for (int64_t i = 0; i < hw; ++i) im.pixels[size_t(i)] = float(v[size_t(n * hw + i)]);
    return im;
}

// ---------------------------------------------------------------------------
// IDX ubyte loading / writing
// ---------------------------------------------------------------------------

namespace idxdetail {

inline uint32_t be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline std::vector<uint8_t> load_maybe_gzip(const fs::path& path) {
    auto bytes = read_file_bytes(path);
    if (path.extension() == ".gz" || is_gzip(bytes)) return gzip_inflate(bytes);
    return bytes;
}

}  // namespace idxdetail

struct IdxImages {
    int count = 0, height = 0, width = 0;
    std::vector<uint8_t> pixels;
};

inline IdxImages load_idx_images(const fs::path& path) {
    auto bytes = idxdetail::load_maybe_gzip(path);
    if (bytes.size() < 16) throw FormatError("IDX image file truncated: " + path.string());
    if (idxdetail::be32(bytes.data()) != 0x00000803u)
        throw FormatError("bad IDX image magic in " + path.string());
    IdxImages out;
    out.count = int(idxdetail::be32(bytes.data() + 4));
    out.height = int(idxdetail::be32(bytes.data() + 8));
    out.width = int(idxdetail::be32(bytes.data() + 12));
    size_t need = 16 + size_t(out.count) * out.height * out.width;
    if (bytes.size() < need) throw FormatError("IDX image payload truncated: " + path.string());
    out.pixels.assign(bytes.begin() + 16, bytes.begin() + std::ptrdiff_t(need));
    return out;
}

inline std::vector<uint8_t> load_idx_labels(const fs::path& path) {
    auto bytes = idxdetail::load_maybe_gzip(path);
    if (bytes.size() < 8) throw FormatError("IDX label file truncated: " + path.string());
    if (idxdetail::be32(bytes.data()) != 0x00000801u)
        throw FormatError("bad IDX label magic in " + path.string());
    size_t count = idxdetail::be32(bytes.data() + 4);
    if (bytes.size() < 8 + count) throw FormatError("IDX label payload truncated: " + path.string());
    return std::vector<uint8_t>(bytes.begin() + 8, bytes.begin() + std::ptrdiff_t(8 + count));
}

inline void write_idx_images(const fs::path& path, const IdxImages& imgs) {
    std::vector<uint8_t> out(16);
    auto be = [&](size_t o, uint32_t v) {
        out[o] = uint8_t(v >> 24);
        out[o + 1] = uint8_t(v >> 16);
        out[o + 2] = uint8_t(v >> 8);
        out[o + 3] = uint8_t(v);
    };
    be(0, 0x00000803u);
    be(4, uint32_t(imgs.count));
    be(8, uint32_t(imgs.height));
    be(12, uint32_t(imgs.width));
    out.insert(out.end(), imgs.pixels.begin(), imgs.pixels.end());
    write_file_bytes(path, out.data(), out.size());
}

inline void write_idx_labels(const fs::path& path, const std::vector<uint8_t>& labels) {
    std::vector<uint8_t> out(8);
    out[0] = 0;
    out[1] = 0;
    out[2] = 0x08;
    out[3] = 0x01;
    out[4] = uint8_t(labels.size() >> 24);
    out[5] = uint8_t(labels.size() >> 16);
    out[6] = uint8_t(labels.size() >> 8);
    out[7] = uint8_t(labels.size());
    out.insert(out.end(), labels.begin(), labels.end());
    write_file_bytes(path, out.data(), out.size());
}

/// Load an IDX digit pair, keep only `keep_digits`, relabel into {0,1}.
/// `max_raw` limits how many leading raw records are scanned (0 = all).
inline std::vector<LabeledSample> load_idx_digits(const fs::path& images_path,
                                                  const fs::path& labels_path,
                                                  const std::set<int>& keep_digits,
                                                  const std::map<int, int>& relabel,
                                                  int max_raw = 0) {
    if (keep_digits.empty()) throw ConfigError("load_idx_digits: keep_digits is empty");
    for (int d : keep_digits)
        if (!relabel.count(d))
            throw ConfigError("load_idx_digits: relabel map missing digit " + std::to_string(d));

    IdxImages imgs = load_idx_images(images_path);
    auto labels = load_idx_labels(labels_path);
    if (int(labels.size()) != imgs.count)
        throw FormatError("IDX image/label counts differ: " + images_path.string());

    int limit = max_raw > 0 ? std::min(max_raw, imgs.count) : imgs.count;
    std::vector<LabeledSample> out;
    size_t hw = size_t(imgs.height) * imgs.width;
    for (int i = 0; i < limit; ++i) {
        int digit = labels[size_t(i)];
        if (!keep_digits.count(digit)) continue;
        LabeledSample s;
        s.label = relabel.at(digit);
        s.image.height = imgs.height;
        s.image.width = imgs.width;
        s.image.pixels.resize(hw);
        const uint8_t* p = imgs.pixels.data() + size_t(i) * hw;
        for (size_t k = 0; k < hw; ++k) s.image.pixels[k] = float(p[k]) / 255.0f;
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generic labeled image folders: <root>/<class_name>/*.png|*.pgm, class names
// sorted lexicographically and mapped to labels 0 and 1.
// ---------------------------------------------------------------------------

inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
    Image out = Image::zeros(out_h, out_w);
    double sy = double(src.height) / out_h;
    double sx = double(src.width) / out_w;
    for (int r = 0; r < out_h; ++r) {
        double fy = (r + 0.5) * sy - 0.5;
        int y0 = int(std::floor(fy));
        double wy = fy - y0;
        for (int c = 0; c < out_w; ++c) {
            double fx = (c + 0.5) * sx - 0.5;
            int x0 = int(std::floor(fx));
            double wx = fx - x0;
            auto sample = [&](int y, int x) -> double {
                y = std::clamp(y, 0, src.height - 1);
                x = std::clamp(x, 0, src.width - 1);
                return src.at(y, x);
            };
            double v = (1 - wy) * ((1 - wx) * sample(y0, x0) + wx * sample(y0, x0 + 1)) +
                       wy * ((1 - wx) * sample(y0 + 1, x0) + wx * sample(y0 + 1, x0 + 1));
            out.at(r, c) = float(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

inline std::vector<LabeledSample> load_image_folder(const fs::path& root, int target_size) {
    if (!fs::is_directory(root)) throw ConfigError("dataset root is not a directory: " + root.string());
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.size() != 2)
        throw ConfigError("expected exactly 2 class subdirectories under " + root.string() +
                          ", found " + std::to_string(class_dirs.size()));

    std::vector<LabeledSample> out;
    for (int label = 0; label < 2; ++label) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(root / class_dirs[size_t(label)])) {
            auto ext = e.path().extension().string();
            if (ext == ".png" || ext == ".pgm") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            GrayImage8 g = f.extension() == ".png" ? read_png(f) : read_pgm(f);
            Image im;
            im.height = g.height;
            im.width = g.width;
            im.pixels.resize(g.pixels.size());
            for (size_t i = 0; i < g.pixels.size(); ++i) im.pixels[i] = float(g.pixels[i]) / 255.0f;
            if (im.height != target_size || im.width != target_size)
                im = resize_bilinear(im, target_size, target_size);
            out.push_back({std::move(im), label});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splitting and partitioning
// ---------------------------------------------------------------------------

/// Deterministic shuffle + contiguous partition. Boundaries use cumulative
/// floors, so fractions (0.8, 0.2, 0) of 11982 samples give 9585/2397/0.
inline DatasetSplit split_dataset(const std::vector<LabeledSample>& samples,
                                  const std::array<double, 3>& fractions, uint64_t seed) {
    double sum = 0;
    for (double f : fractions) {
        if (f < 0) throw ConfigError("split_dataset: negative fraction");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split_dataset: fractions must sum to 1");

    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    RandomStream rng(seed, "split");
    rng.shuffle(order.begin(), order.end());

    size_t n = samples.size();
    size_t c1 = size_t(std::floor(double(n) * fractions[0]));
    size_t c2 = size_t(std::floor(double(n) * (fractions[0] + fractions[1])));
    c2 = std::max(c2, c1);

    DatasetSplit split;
    for (size_t i = 0; i < n; ++i) {
        const auto& s = samples[order[i]];
        if (i < c1)
            split.train.push_back(s);
        else if (i < c2)
            split.val.push_back(s);
        else
            split.test.push_back(s);
    }
    return split;
}

/// Split images by a thresholded probability. `predict` maps a batch of
/// images to one probability per image; decision 1 iff prob >= threshold.
inline DecisionPartition partition_by_decision(
    const std::vector<Image>& images,
    const std::function<std::vector<double>(const std::vector<Image>&)>& predict, double threshold,
    const std::string& classifier_id) {
    DecisionPartition part;
    part.threshold = threshold;
    part.classifier_id = classifier_id;
    if (images.empty()) {
        part.empty_side_warning = true;
        return part;
    }
    auto probs = predict(images);
    if (probs.size() != images.size())
        throw ShapeError("partition_by_decision: predictor returned wrong count");
    for (size_t i = 0; i < images.size(); ++i) {
        if (probs[i] >= threshold)
            part.chi1.push_back(images[i]);
        else
            part.chi0.push_back(images[i]);
    }
    part.empty_side_warning = part.chi0.empty() || part.chi1.empty();
    return part;
}

// ---------------------------------------------------------------------------
// Synthetic patch dataset: class 0 is background noise, class 1 adds one
// bright square whose pixels form the ground-truth mask.
// ---------------------------------------------------------------------------

inline std::vector<MaskedSample> make_patch_dataset(int n_per_class, int image_size, int patch_size,
                                                    double noise_level, uint64_t seed) {
    if (patch_size >= image_size) throw ConfigError("make_patch_dataset: patch_size must be < image_size");
    if (noise_level < 0 || noise_level >= 0.5)
        throw ConfigError("make_patch_dataset: noise_level must be in [0, 0.5)");
    if (n_per_class < 0) throw ConfigError("make_patch_dataset: negative n_per_class");

    RandomStream rng(seed, "patch_dataset");
    std::vector<MaskedSample> out;
    out.reserve(size_t(n_per_class) * 2);
    for (int i = 0; i < n_per_class; ++i) {
        for (int label = 0; label <= 1; ++label) {
            MaskedSample s;
            s.label = label;
            s.image = Image::zeros(image_size, image_size);
            s.mask.assign(size_t(image_size) * image_size, 0);
            for (auto& p : s.image.pixels) p = float(rng.uniform(0.0, noise_level));
            if (label == 1) {
                int py = rng.uniform_int(0, image_size - patch_size);
                int px = rng.uniform_int(0, image_size - patch_size);
                for (int r = py; r < py + patch_size; ++r)
                    for (int c = px; c < px + patch_size; ++c) {
                        s.image.at(r, c) = float(rng.uniform(0.8, 1.0));
                        s.mask[size_t(r) * image_size + c] = 1;
                    }
            }
            out.push_back(std::move(s));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Geometric augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
    int max_translate = 2;     // pixels, per axis
    double max_rotate = 10.0;  // degrees
    double max_zoom = 0.1;     // relative, zoom factor in [1-z, 1+z]
    bool horizontal_flip = false;
    bool enabled = true;
};

namespace augdetail {

inline AugmentConfig sanitize(const AugmentConfig& cfg, int h, int w) {
    AugmentConfig c = cfg;
    int lim = std::min(h, w) / 2;
    bool clamped = false;
    if (c.max_translate < 0 || c.max_translate > lim) {
        c.max_translate = std::clamp(c.max_translate, 0, lim);
        clamped = true;
    }
    if (c.max_rotate < 0 || c.max_rotate > 180.0) {
        c.max_rotate = std::clamp(c.max_rotate, 0.0, 180.0);
        clamped = true;
    }
    if (c.max_zoom < 0 || c.max_zoom > 0.5) {
        c.max_zoom = std::clamp(c.max_zoom, 0.0, 0.5);
        clamped = true;
    }
    if (clamped) std::fprintf(stderr, "[counterfax] warning: augment config out of range, clamped\n");
    return c;
}

}  // namespace augdetail

/// Random translate/rotate/zoom/flip with bilinear resampling; the output
/// stays in [0, 1] and is deterministic for a given stream state.
inline Image augment(const Image& src, const AugmentConfig& cfg_in, RandomStream& rng) {
    AugmentConfig cfg = augdetail::sanitize(cfg_in, src.height, src.width);
    if (!cfg.enabled) return src;

    double tx = cfg.max_translate > 0 ? rng.uniform(-double(cfg.max_translate), cfg.max_translate) : 0;
    double ty = cfg.max_translate > 0 ? rng.uniform(-double(cfg.max_translate), cfg.max_translate) : 0;
    double theta = cfg.max_rotate > 0 ? rng.uniform(-cfg.max_rotate, cfg.max_rotate) * M_PI / 180.0 : 0;
    double zoom = cfg.max_zoom > 0 ? rng.uniform(1.0 - cfg.max_zoom, 1.0 + cfg.max_zoom) : 1.0;
    bool flip = cfg.horizontal_flip && rng.uniform() < 0.5;

    if (tx == 0 && ty == 0 && theta == 0 && zoom == 1.0 && !flip) return src;

    double cy = (src.height - 1) / 2.0, cx = (src.width - 1) / 2.0;
    double cos_t = std::cos(theta), sin_t = std::sin(theta);
    Image out = Image::zeros(src.height, src.width);
    for (int r = 0; r < src.height; ++r) {
        for (int c = 0; c < src.width; ++c) {
            // Inverse map: undo translation, then rotation and zoom about center.
            double yr = r - cy - ty;
            double xr = c - cx - tx;
            double ys = (cos_t * yr + sin_t * xr) / zoom + cy;
            double xs = (-sin_t * yr + cos_t * xr) / zoom + cx;
            if (flip) xs = (src.width - 1) - xs;
            int y0 = int(std::floor(ys)), x0 = int(std::floor(xs));
            double wy = ys - y0, wx = xs - x0;
            auto sample = [&](int y, int x) -> double {
                if (y < 0 || y >= src.height || x < 0 || x >= src.width) return 0.0;
                return src.at(y, x);
            };
            double v = (1 - wy) * ((1 - wx) * sample(y0, x0) + wx * sample(y0, x0 + 1)) +
                       wy * ((1 - wx) * sample(y0 + 1, x0) + wx * sample(y0 + 1, x0 + 1));
            out.at(r, c) = float(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

inline Image augment(const Image& src, const AugmentConfig& cfg, uint64_t seed) {
    RandomStream rng(seed, "augment");
    return augment(src, cfg, rng);
}

}  // namespace counterfax
