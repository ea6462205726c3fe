#include <catch2/catch.hpp>

#include <zlib.h>

#include "counterfax/data.hpp"
#include "counterfax/digits.hpp"

using namespace counterfax;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("cfx_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<LabeledSample> dummy_samples(size_t n) {
    std::vector<LabeledSample> out(n);
    for (size_t i = 0; i < n; ++i) {
        out[i].image = Image::zeros(1, 1);
        out[i].image.pixels[0] = float(i) / float(n);
        out[i].label = int(i % 2);
    }
    return out;
}

// Minimal 8-bit grayscale PNG writer (filter 0 rows), used only to exercise
// the reader.
void write_test_png(const fs::path& path, const GrayImage8& img) {
    std::vector<uint8_t> out;
    const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.insert(out.end(), sig, sig + 8);
    auto be32 = [](uint32_t v) {
        return std::array<uint8_t, 4>{uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8),
                                      uint8_t(v)};
    };
    auto chunk = [&](const char* type, const std::vector<uint8_t>& data) {
        auto len = be32(uint32_t(data.size()));
        out.insert(out.end(), len.begin(), len.end());
        std::vector<uint8_t> td(type, type + 4);
        td.insert(td.end(), data.begin(), data.end());
        uint32_t crc = uint32_t(crc32(0, td.data(), uInt(td.size())));
        out.insert(out.end(), td.begin(), td.end());
        auto c = be32(crc);
        out.insert(out.end(), c.begin(), c.end());
    };
    std::vector<uint8_t> ihdr;
    for (auto b : be32(uint32_t(img.width))) ihdr.push_back(b);
    for (auto b : be32(uint32_t(img.height))) ihdr.push_back(b);
    ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, gray, default, no interlace
    chunk("IHDR", ihdr);
    std::vector<uint8_t> raw;
    for (int r = 0; r < img.height; ++r) {
        raw.push_back(0);  // filter: none
        for (int c = 0; c < img.width; ++c)
            raw.push_back(img.pixels[size_t(r) * img.width + c]);
    }
    // zlib (not gzip) stream, as PNG requires
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> comp(bound);
    REQUIRE(compress(comp.data(), &bound, raw.data(), uLong(raw.size())) == Z_OK);
    comp.resize(bound);
    chunk("IDAT", comp);
    chunk("IEND", {});
    write_file_bytes(path, out.data(), out.size());
}

}  // namespace

TEST_CASE("synthetic IDX loads with pixels in range and preserved order", "[data][idx]") {
    fs::path dir = temp_dir("idx");
    write_synthetic_digit_idx(dir, 30, 25, 10, 8, 28, 42);

    auto samples = load_idx_digits(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
                                   {3, 8}, {{3, 0}, {8, 1}});
    REQUIRE(samples.size() == 55);
    int ones = 0;
    float maxpix = 0;
    for (const auto& s : samples) {
        CHECK((s.label == 0 || s.label == 1));
        ones += s.label;
        for (float p : s.image.pixels) {
            REQUIRE(p >= 0.0f);
            REQUIRE(p <= 1.0f);
            maxpix = std::max(maxpix, p);
        }
    }
    CHECK(ones == 25);
    CHECK(maxpix == 1.0f);  // at least one saturated pixel across the set

    SECTION("digit filter and relabel map") {
        auto only3 = load_idx_digits(dir / "train-images-idx3-ubyte",
                                     dir / "train-labels-idx1-ubyte", {3}, {{3, 0}});
        CHECK(only3.size() == 30);
        CHECK_THROWS_AS(load_idx_digits(dir / "train-images-idx3-ubyte",
                                        dir / "train-labels-idx1-ubyte", {}, {}),
                        ConfigError);
        CHECK_THROWS_AS(load_idx_digits(dir / "train-images-idx3-ubyte",
                                        dir / "train-labels-idx1-ubyte", {3, 8}, {{3, 0}}),
                        ConfigError);
    }

    SECTION("max_raw limits the scanned prefix") {
        auto limited = load_idx_digits(dir / "train-images-idx3-ubyte",
                                       dir / "train-labels-idx1-ubyte", {3, 8}, {{3, 0}, {8, 1}}, 10);
        CHECK(limited.size() == 10);
        for (size_t i = 0; i < limited.size(); ++i)
            CHECK(limited[i].image.pixels == samples[i].image.pixels);
    }
}

TEST_CASE("gzip-compressed IDX variants load identically", "[data][idx]") {
    fs::path dir = temp_dir("idxgz");
    write_synthetic_digit_idx(dir, 5, 5, 2, 2, 28, 1);
    auto plain = load_idx_digits(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
                                 {3, 8}, {{3, 0}, {8, 1}});

    for (const char* stem : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte"}) {
        auto bytes = read_file_bytes(dir / stem);
        auto gz = gzip_deflate(bytes);
        write_file_bytes(dir / (std::string(stem) + ".gz"), gz.data(), gz.size());
    }
    auto zipped = load_idx_digits(dir / "train-images-idx3-ubyte.gz",
                                  dir / "train-labels-idx1-ubyte.gz", {3, 8}, {{3, 0}, {8, 1}});
    REQUIRE(zipped.size() == plain.size());
    for (size_t i = 0; i < plain.size(); ++i) {
        CHECK(zipped[i].label == plain[i].label);
        CHECK(zipped[i].image.pixels == plain[i].image.pixels);
    }
}

TEST_CASE("malformed IDX magic is a format error", "[data][idx]") {
    fs::path dir = temp_dir("idxbad");
    std::vector<uint8_t> junk = {0, 0, 9, 9, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4};
    write_file_bytes(dir / "bad-images", junk.data(), junk.size());
    CHECK_THROWS_AS(load_idx_images(dir / "bad-images"), FormatError);
}

TEST_CASE("split_dataset reproduces the 9585/2397 boundary and is deterministic", "[data][split]") {
    auto samples = dummy_samples(11982);
    auto s1 = split_dataset(samples, {0.8, 0.2, 0.0}, 7);
    CHECK(s1.train.size() == 9585);
    CHECK(s1.val.size() == 2397);
    CHECK(s1.test.size() == 0);

    auto s2 = split_dataset(samples, {0.8, 0.2, 0.0}, 7);
    for (size_t i = 0; i < s1.train.size(); ++i)
        REQUIRE(s1.train[i].image.pixels[0] == s2.train[i].image.pixels[0]);

    auto s3 = split_dataset(samples, {0.8, 0.2, 0.0}, 8);
    bool identical = true;
    for (size_t i = 0; i < s1.train.size() && identical; ++i)
        identical = s1.train[i].image.pixels[0] == s3.train[i].image.pixels[0];
    CHECK_FALSE(identical);

    SECTION("all-train and invalid fractions") {
        auto all = split_dataset(samples, {1.0, 0.0, 0.0}, 3);
        CHECK(all.train.size() == samples.size());
        CHECK_THROWS_AS(split_dataset(samples, {0.5, 0.5, 0.1}, 3), ConfigError);
        CHECK_THROWS_AS(split_dataset(samples, {1.2, -0.2, 0.0}, 3), ConfigError);
    }
}

TEST_CASE("partition_by_decision invariants", "[data][partition]") {
    std::vector<Image> images;
    for (int i = 0; i < 20; ++i) {
        Image im = Image::zeros(2, 2);
        im.pixels[0] = float(i) / 19.0f;
        images.push_back(im);
    }
    auto predict = [](const std::vector<Image>& b) {
        std::vector<double> out;
        for (const auto& im : b) out.push_back(double(im.pixels[0]));
        return out;
    };

    auto part = partition_by_decision(images, predict, 0.5, "test");
    CHECK(part.chi0.size() + part.chi1.size() == images.size());
    CHECK_FALSE(part.empty_side_warning);
    for (const auto& im : part.chi0) CHECK(predict({im})[0] < 0.5);
    for (const auto& im : part.chi1) CHECK(predict({im})[0] >= 0.5);

    SECTION("boundary probability goes to chi1") {
        Image im = Image::zeros(2, 2);
        im.pixels[0] = 0.5f;
        auto p = partition_by_decision({im}, predict, 0.5, "test");
        CHECK(p.chi1.size() == 1);
        CHECK(p.chi0.empty());
        CHECK(p.empty_side_warning);
    }

    SECTION("empty input is an empty partition, not an error") {
        auto p = partition_by_decision({}, predict, 0.5, "test");
        CHECK(p.chi0.empty());
        CHECK(p.chi1.empty());
        CHECK(p.empty_side_warning);
    }

    SECTION("single confident image lands in chi1") {
        Image im = Image::zeros(2, 2);
        im.pixels[0] = 0.9f;
        auto p = partition_by_decision({im}, predict, 0.5, "test");
        CHECK(p.chi1.size() == 1);
    }
}

TEST_CASE("patch dataset geometry, determinism, and mask exactness", "[data][patches]") {
    auto set = make_patch_dataset(500, 28, 6, 0.2, 1);
    REQUIRE(set.size() == 1000);
    int pos = 0;
    for (const auto& s : set) {
        if (s.label == 1) {
            ++pos;
            CHECK(s.mask_area() == 36);
        } else {
            CHECK(s.mask_area() == 0);
        }
        for (float p : s.image.pixels) {
            REQUIRE(p >= 0.0f);
            REQUIRE(p <= 1.0f);
        }
    }
    CHECK(pos == 500);

    SECTION("bit-identical reruns") {
        auto again = make_patch_dataset(500, 28, 6, 0.2, 1);
        uint64_t h1 = 0xcbf29ce484222325ull, h2 = h1;
        for (const auto& s : set) h1 = hash_image(s.image, h1);
        for (const auto& s : again) h2 = hash_image(s.image, h2);
        CHECK(h1 == h2);
    }

    SECTION("mask equals the bright-pixel set above background") {
        for (size_t i = 0; i < 40; ++i) {
            const auto& s = set[i];
            if (s.label != 1) continue;
            float bg_max = 0;
            for (size_t k = 0; k < s.image.pixels.size(); ++k)
                if (!s.mask[k]) bg_max = std::max(bg_max, s.image.pixels[k]);
            int64_t inter = 0, uni = 0;
            for (size_t k = 0; k < s.image.pixels.size(); ++k) {
                bool bright = s.image.pixels[k] >= 0.8f && s.image.pixels[k] > bg_max;
                inter += bright && s.mask[k];
                uni += bright || s.mask[k];
            }
            CHECK(double(inter) / double(uni) == 1.0);
        }
    }

    SECTION("edge cases") {
        CHECK(make_patch_dataset(0, 28, 6, 0.2, 1).empty());
        CHECK_THROWS_AS(make_patch_dataset(5, 28, 28, 0.2, 1), ConfigError);
        CHECK_THROWS_AS(make_patch_dataset(5, 28, 6, 0.7, 1), ConfigError);
    }
}

TEST_CASE("augment determinism, identity, and range", "[data][augment]") {
    RandomStream rng(5);
    Image digit = render_digit(8, 28, rng);

    SECTION("all transforms disabled is the identity") {
        AugmentConfig off;
        off.enabled = false;
        Image out = augment(digit, off, uint64_t(3));
        CHECK(out.pixels == digit.pixels);
        AugmentConfig zeros{.max_translate = 0, .max_rotate = 0, .max_zoom = 0};
        CHECK(augment(digit, zeros, uint64_t(3)).pixels == digit.pixels);
    }

    SECTION("same seed twice gives identical output") {
        AugmentConfig cfg{.max_translate = 2, .max_rotate = 0, .max_zoom = 0};
        Image a = augment(digit, cfg, uint64_t(9));
        Image b = augment(digit, cfg, uint64_t(9));
        CHECK(a.pixels == b.pixels);
        CHECK(a.pixels != digit.pixels);
    }

    SECTION("outputs stay in range over many draws") {
        AugmentConfig cfg;
        cfg.horizontal_flip = true;
        RandomStream draws(17);
        for (int i = 0; i < 1000; ++i) {
            Image out = augment(digit, cfg, draws);
            REQUIRE(out.height == digit.height);
            for (float p : out.pixels) {
                REQUIRE(p >= 0.0f);
                REQUIRE(p <= 1.0f);
            }
        }
    }

    SECTION("out-of-range config is clamped, not fatal") {
        AugmentConfig wild{.max_translate = 99, .max_rotate = 900.0, .max_zoom = 3.0};
        Image out = augment(digit, wild, uint64_t(4));
        for (float p : out.pixels) REQUIRE((p >= 0.0f && p <= 1.0f));
    }
}

TEST_CASE("image folder ingestion with PGM and PNG", "[data][folder]") {
    fs::path root = temp_dir("folder");
    fs::create_directories(root / "class_a");
    fs::create_directories(root / "class_b");

    RandomStream rng(2);
    GrayImage8 g;
    g.height = 28;
    g.width = 28;
    g.pixels.resize(784);
    for (auto& p : g.pixels) p = uint8_t(rng.uniform_int(0, 255));
    write_pgm(root / "class_a" / "im0.pgm", g);
    write_test_png(root / "class_a" / "im1.png", g);
    GrayImage8 g2 = g;
    for (auto& p : g2.pixels) p = uint8_t(255 - p);
    write_pgm(root / "class_b" / "im0.pgm", g2);

    auto samples = load_image_folder(root, 28);
    REQUIRE(samples.size() == 3);
    CHECK(samples[0].label == 0);
    CHECK(samples[2].label == 1);
    // PNG decodes to the same pixels as the PGM copy of the same image
    CHECK(samples[0].image.pixels == samples[1].image.pixels);

    SECTION("resizing to target size") {
        auto resized = load_image_folder(root, 14);
        CHECK(resized[0].image.height == 14);
        CHECK(resized[0].image.width == 14);
    }

    SECTION("wrong class count is a config error") {
        fs::create_directories(root / "class_c");
        write_pgm(root / "class_c" / "x.pgm", g);
        CHECK_THROWS_AS(load_image_folder(root, 28), ConfigError);
    }
}

TEST_CASE("array container round trip", "[data][io]") {
    fs::path dir = temp_dir("cont");
    ArrayContainer c;
    std::vector<float> f = {1.5f, -2.25f, 0.0f};
    std::vector<int64_t> meta = {42, -7};
    std::vector<uint8_t> bytes = {0, 128, 255};
    c.put("floats", NamedArray::from_vector<float>(f, {3}));
    c.put("meta", NamedArray::from_vector<int64_t>(meta, {2}));
    c.put("bytes", NamedArray::from_vector<uint8_t>(bytes, {3}));
    c.save(dir / "t.cfx");

    auto back = ArrayContainer::load(dir / "t.cfx");
    CHECK(back.get("floats").to_vector<float>() == f);
    CHECK(back.get("meta").to_vector<int64_t>() == meta);
    CHECK(back.get("bytes").to_vector<uint8_t>() == bytes);
    CHECK(back.content_hash() == c.content_hash());
    CHECK_THROWS_AS(back.get("missing"), FormatError);

    std::vector<uint8_t> junk = {'X', 'X'};
    write_file_bytes(dir / "junk.cfx", junk.data(), junk.size());
    CHECK_THROWS_AS(ArrayContainer::load(dir / "junk.cfx"), FormatError);
}
