#pragma once

// Procedural 28x28 renderings of handwritten-style "3" and "8" digits.
// Both digits share the same two-lobe skeleton; an "8" closes both loops
// while a "3" leaves the left side open. Randomized geometry, stroke width,
// wobble and intensity give a learnable but non-trivial binary task, and the
// generator can emit MNIST-shaped IDX files so the ingestion path is
// identical to the real dataset.

#include "counterfax/data.hpp"

namespace counterfax {

namespace digitdetail {

inline void stamp(Image& img, double y, double x, double sigma, double intensity) {
    int r0 = std::max(0, int(std::floor(y - 3 * sigma)));
    int r1 = std::min(img.height - 1, int(std::ceil(y + 3 * sigma)));
    int c0 = std::max(0, int(std::floor(x - 3 * sigma)));
    int c1 = std::min(img.width - 1, int(std::ceil(x + 3 * sigma)));
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            double d2 = (r - y) * (r - y) + (c - x) * (c - x);
            float v = float(intensity * std::exp(-d2 / (2 * sigma * sigma)));
            img.at(r, c) = std::max(img.at(r, c), v);
        }
}

// Angle convention: 0 at the top of a lobe, 90 degrees at its right.
inline bool angle_in_gap(double deg, double gap_lo, double gap_hi) {
    double a = std::fmod(deg + 360.0, 360.0);
    return a > gap_lo && a < gap_hi;
}

}  // namespace digitdetail

/// Render one digit ("3" or "8") onto a size x size canvas.
inline Image render_digit(int digit, int size, RandomStream& rng) {
    if (digit != 3 && digit != 8) throw ConfigError("render_digit: only digits 3 and 8 supported");

    Image img = Image::zeros(size, size);
    double s = size / 28.0;

    double total_h = rng.uniform(16.0, 21.0) * s;
    double cy = (size - 1) / 2.0 + rng.uniform(-1.2, 1.2) * s;
    double cx = (size - 1) / 2.0 + rng.uniform(-1.2, 1.2) * s;
    double upper_frac = rng.uniform(0.42, 0.50);
    double ry1 = total_h * upper_frac / 2.0;
    double ry2 = total_h * (1.0 - upper_frac) / 2.0;
    double rx1 = ry1 * rng.uniform(0.78, 1.15);
    double rx2 = ry2 * rng.uniform(0.80, 1.15);
    double sigma = rng.uniform(0.85, 1.30) * s;
    double rot = rng.uniform(-10.0, 10.0) * M_PI / 180.0;
    double wob_a = rng.uniform(0.0, 0.07);
    double wob_p = rng.uniform(0.0, 2 * M_PI);
    // Most scans saturate the stroke core; some are fainter throughout.
    double peak = rng.uniform() < 0.8 ? 1.0 : rng.uniform(0.9, 1.0);

    // Left-side gaps that turn an "8" skeleton into a "3".
    double gap1_lo = 0, gap1_hi = 0, gap2_lo = 0, gap2_hi = 0;
    if (digit == 3) {
        gap1_lo = rng.uniform(235.0, 255.0);
        gap1_hi = rng.uniform(335.0, 355.0);
        gap2_lo = rng.uniform(185.0, 205.0);
        gap2_hi = rng.uniform(300.0, 320.0);
    }

    double cos_r = std::cos(rot), sin_r = std::sin(rot);
    auto draw_lobe = [&](double lobe_cy, double ry, double rx, double gap_lo, double gap_hi) {
        int steps = 180;
        for (int i = 0; i < steps; ++i) {
            double deg = 360.0 * i / steps;
            if (digit == 3 && digitdetail::angle_in_gap(deg, gap_lo, gap_hi)) continue;
            double th = deg * M_PI / 180.0;
            double wob = 1.0 + wob_a * std::sin(2 * th + wob_p);
            double py = lobe_cy - ry * wob * std::cos(th);
            double px = cx + rx * wob * std::sin(th);
            // rotate about the digit center
            double yr = py - cy, xr = px - cx;
            double y = cy + cos_r * yr - sin_r * xr;
            double x = cx + sin_r * yr + cos_r * xr;
            digitdetail::stamp(img, y, x, sigma, peak);
        }
    };

    draw_lobe(cy - ry1, ry1, rx1, gap1_lo, gap1_hi);  // upper
    draw_lobe(cy + ry2, ry2, rx2, gap2_lo, gap2_hi);  // lower

    // Normalize the stroke core to the target peak, then quantize like an
    // 8-bit scan.
    float maxv = 0;
    for (float p : img.pixels) maxv = std::max(maxv, p);
    if (maxv > 0)
        for (auto& p : img.pixels) p = float(p * peak / maxv);
    for (auto& p : img.pixels) p = float(std::round(std::clamp(p, 0.0f, 1.0f) * 255.0f) / 255.0f);
    return img;
}

/// Write a train/test IDX file pair of synthetic "3"/"8" digits with raw
/// digit labels, shuffled deterministically. Layout matches the MNIST
/// filenames so the same ingestion config works for either source.
inline void write_synthetic_digit_idx(const fs::path& dir, int train3, int train8, int test3,
                                      int test8, int size, uint64_t seed) {
    fs::create_directories(dir);
    auto emit = [&](const std::string& stem, int n3, int n8, RandomStream& rng) {
        std::vector<int> digits;
        digits.insert(digits.end(), size_t(n3), 3);
        digits.insert(digits.end(), size_t(n8), 8);
        rng.shuffle(digits.begin(), digits.end());

        IdxImages imgs;
        imgs.count = int(digits.size());
        imgs.height = size;
        imgs.width = size;
        imgs.pixels.reserve(digits.size() * size_t(size) * size);
        std::vector<uint8_t> labels;
        labels.reserve(digits.size());
        for (int d : digits) {
            Image im = render_digit(d, size, rng);
            for (float p : im.pixels)
                imgs.pixels.push_back(uint8_t(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f)));
            labels.push_back(uint8_t(d));
        }
        write_idx_images(dir / (stem + "-images-idx3-ubyte"), imgs);
        write_idx_labels(dir / (stem + "-labels-idx1-ubyte"), labels);
    };
    RandomStream rng_train(seed, "synthetic_digits/train");
    RandomStream rng_test(seed, "synthetic_digits/test");
    emit("train", train3, train8, rng_train);
    emit("t10k", test3, test8, rng_test);
}

}  // namespace counterfax
