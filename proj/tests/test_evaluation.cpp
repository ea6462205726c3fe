#include <catch2/catch.hpp>

#include "counterfax/digits.hpp"
#include "counterfax/metrics.hpp"
#include "testutil.hpp"

using namespace counterfax;

namespace {

LatentSet gaussian_set(int n, int d, const std::vector<double>& mean, uint64_t seed) {
    RandomStream rng(seed);
    LatentSet out(size_t(n), std::vector<double>(size_t(d), 0.0));
    for (auto& v : out)
        for (int j = 0; j < d; ++j) v[size_t(j)] = rng.normal() + (j < int(mean.size()) ? mean[size_t(j)] : 0.0);
    return out;
}

// Exact hypergeometric expectation of IoU for a random map: the binarized
// foreground has b pixels out of N; overlap K ~ Hypergeom(N, mask, b).
double hypergeometric_iou_expectation(int N, int mask, int b) {
    auto logfact = [](int n) {
        double s = 0;
        for (int i = 2; i <= n; ++i) s += std::log(double(i));
        return s;
    };
    auto logchoose = [&](int n, int k) { return logfact(n) - logfact(k) - logfact(n - k); };
    double expect = 0;
    for (int k = std::max(0, b + mask - N); k <= std::min(mask, b); ++k) {
        double logp = logchoose(mask, k) + logchoose(N - mask, b - k) - logchoose(N, b);
        expect += std::exp(logp) * double(k) / double(mask + b - k);
    }
    return expect;
}

}  // namespace

TEST_CASE("frechet distance oracles", "[evaluation][fd]") {
    SECTION("identical sets are at distance zero") {
        auto a = gaussian_set(200, 4, {}, 3);
        CHECK(frechet_distance(a, a) <= 1e-6);
    }

    SECTION("unit mean shift between standard normals gives distance one") {
        auto a = gaussian_set(10000, 2, {0.0, 0.0}, 5);
        auto b = gaussian_set(10000, 2, {1.0, 0.0}, 6);
        double fd = frechet_distance(a, b);
        CHECK(fd == Approx(1.0).margin(0.1));
    }

    SECTION("symmetry") {
        auto a = gaussian_set(300, 3, {0.5, 0.0, 0.0}, 7);
        auto b = gaussian_set(300, 3, {0.0, 0.7, 0.0}, 8);
        CHECK(frechet_distance(a, b) == Approx(frechet_distance(b, a)).margin(1e-9));
    }

    SECTION("too small a set is a config error") {
        auto a = gaussian_set(3, 4, {}, 9);
        auto b = gaussian_set(300, 4, {}, 10);
        CHECK_THROWS_AS(frechet_distance(a, b), ConfigError);
    }
}

TEST_CASE("pca projection properties", "[evaluation][pca]") {
    RandomStream rng(11);
    LatentSet ref(400, std::vector<double>(5));
    for (auto& v : ref) {
        v[0] = rng.normal() * 3.0;
        v[1] = rng.normal() * 1.5;
        v[2] = rng.normal() * 0.2;
        v[3] = rng.normal() * 0.1;
        v[4] = rng.normal() * 0.05;
    }

    SECTION("first axis captures at least as much variance as the second") {
        auto pts = pca_project_2d(ref, ref);
        double v1 = 0, v2 = 0, m1 = 0, m2 = 0;
        for (const auto& p : pts) {
            m1 += p[0];
            m2 += p[1];
        }
        m1 /= double(pts.size());
        m2 /= double(pts.size());
        for (const auto& p : pts) {
            v1 += (p[0] - m1) * (p[0] - m1);
            v2 += (p[1] - m2) * (p[1] - m2);
        }
        CHECK(v1 >= v2);
    }

    SECTION("the reference mean projects to the origin") {
        std::vector<double> mean(5, 0.0);
        for (const auto& v : ref)
            for (int j = 0; j < 5; ++j) mean[size_t(j)] += v[size_t(j)];
        for (auto& m : mean) m /= double(ref.size());
        auto pts = pca_project_2d(ref, {mean});
        CHECK(std::abs(pts[0][0]) <= 1e-9);
        CHECK(std::abs(pts[0][1]) <= 1e-9);
    }

    SECTION("a rank-1 reference is a numerical error") {
        LatentSet degenerate(50, std::vector<double>(3));
        RandomStream r2(1);
        for (auto& v : degenerate) {
            double t = r2.normal();
            v = {t, 2 * t, -t};
        }
        CHECK_THROWS_AS(pca_project_2d(degenerate, degenerate), NumericError);
    }
}

TEST_CASE("js distance oracles", "[evaluation][js]") {
    RandomStream rng(21);
    std::vector<Point2> a, b;
    for (int i = 0; i < 400; ++i) {
        a.push_back({rng.normal(), rng.normal()});
        b.push_back({rng.normal(), rng.normal()});
    }

    SECTION("identical point sets have distance zero") {
        CHECK(js_distance(a, a) <= 1e-9);
    }

    SECTION("well-separated clusters approach distance one") {
        std::vector<Point2> far = a;
        // Scott bandwidth here is ~n^(-1/6); shift by 20 bandwidths
        double h = std::pow(400.0, -1.0 / 6.0);
        for (auto& p : far) p[0] += 20.0 * h * 1.0;
        double js = js_distance(a, far);
        CHECK(js >= 0.98);
        CHECK(js <= 1.0);
    }

    SECTION("symmetry") {
        std::vector<Point2> shifted = b;
        for (auto& p : shifted) p[0] += 1.0;
        CHECK(js_distance(a, shifted) == Approx(js_distance(shifted, a)).margin(1e-12));
    }

    SECTION("fewer than 3 points is a sample-size error") {
        std::vector<Point2> tiny = {{0, 0}, {1, 1}};
        CHECK_THROWS_AS(js_distance(tiny, a), UndefinedError);
    }
}

TEST_CASE("iou at percentile", "[evaluation][iou]") {
    SECTION("the mask itself scores 1.0 at the matched percentile") {
        ExplanationMap m;
        m.height = 28;
        m.width = 28;
        m.values.assign(784, 0.0f);
        std::vector<uint8_t> gt(784, 0);
        for (int i = 0; i < 36; ++i) {
            m.values[size_t(i)] = 1.0f;
            gt[size_t(i)] = 1;
        }
        double matched = 100.0 * (1.0 - 36.0 / 784.0);
        CHECK(iou_at_percentile(m, gt, matched) == 1.0);
    }

    SECTION("disjoint foreground and mask scores 0") {
        ExplanationMap m;
        m.height = 4;
        m.width = 4;
        m.values = {9, 9, 9, 9, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
        std::vector<uint8_t> gt(16, 0);
        gt[15] = 1;
        CHECK(iou_at_percentile(m, gt, 75.0) == 0.0);
    }

    SECTION("random maps match the hypergeometric expectation within 2 sigma") {
        const int N = 784, mask_px = 36, trials = 1000;
        std::vector<uint8_t> gt(size_t(N), 0);
        for (int i = 0; i < mask_px; ++i) gt[size_t(i * 21 % N)] = 1;  // scattered mask
        int actual_mask = 0;
        for (auto g : gt) actual_mask += g;
        REQUIRE(actual_mask == mask_px);

        RandomStream rng(31);
        std::vector<double> ious;
        int foreground = 0;
        for (int t = 0; t < trials; ++t) {
            ExplanationMap m;
            m.height = 28;
            m.width = 28;
            m.values.resize(size_t(N));
            for (auto& v : m.values) v = float(rng.uniform());
            ious.push_back(iou_at_percentile(m, gt, 95.0));
            if (t == 0) {
                double thr = percentile_value(m.values, 95.0);
                for (float v : m.values) foreground += v > thr;
            }
        }
        double mean = 0;
        for (double v : ious) mean += v;
        mean /= trials;
        double var = 0;
        for (double v : ious) var += (v - mean) * (v - mean);
        var /= (trials - 1);
        double sigma_mean = std::sqrt(var / trials);

        double expected = hypergeometric_iou_expectation(N, mask_px, foreground);
        CHECK(std::abs(mean - expected) <= 2 * sigma_mean + 1e-12);
    }

    SECTION("percentile thresholding keeps the right foreground fraction") {
        RandomStream rng(41);
        ExplanationMap m;
        m.height = 20;
        m.width = 20;
        m.values.resize(400);
        for (auto& v : m.values) v = float(rng.uniform());  // distinct w.p. 1
        for (double p : {50.0, 80.0, 95.0}) {
            double thr = percentile_value(m.values, p);
            int fg = 0;
            for (float v : m.values) fg += v > thr;
            CHECK(std::abs(double(fg) / 400.0 - (100.0 - p) / 100.0) <= 1.0 / 400.0 + 1e-12);
        }
    }

    SECTION("error paths") {
        ExplanationMap m;
        m.height = 2;
        m.width = 2;
        m.values = {1, 2, 3, 4};
        std::vector<uint8_t> empty_gt(4, 0);
        CHECK_THROWS_AS(iou_at_percentile(m, empty_gt, 90.0), UndefinedError);
        std::vector<uint8_t> gt = {1, 0, 0, 0};
        CHECK_THROWS_AS(iou_at_percentile(m, gt, 0.0), ConfigError);
        // constant map: empty foreground, IoU 0
        ExplanationMap c;
        c.height = 2;
        c.width = 2;
        c.values = {1, 1, 1, 1};
        CHECK(iou_at_percentile(c, gt, 90.0) == 0.0);
    }
}

TEST_CASE("ncc properties", "[evaluation][ncc]") {
    std::vector<uint8_t> mask(100, 0);
    for (int i = 40; i < 60; ++i) mask[size_t(i)] = 1;

    ExplanationMap as_map;
    as_map.height = 10;
    as_map.width = 10;
    as_map.values.resize(100);
    for (size_t i = 0; i < 100; ++i) as_map.values[i] = float(mask[i]);

    SECTION("map equal to the mask correlates perfectly") {
        auto r = ncc(as_map, mask);
        CHECK_FALSE(r.degenerate);
        CHECK(r.value == Approx(1.0));
    }

    SECTION("inverted map anti-correlates") {
        ExplanationMap inv = as_map;
        for (auto& v : inv.values) v = 1.0f - v;
        CHECK(ncc(inv, mask).value == Approx(-1.0));
    }

    SECTION("small noise keeps the correlation high") {
        RandomStream rng(51);
        ExplanationMap noisy = as_map;
        for (auto& v : noisy.values) v += float(rng.uniform(0.0, 0.1));
        CHECK(ncc(noisy, mask).value >= 0.9);
    }

    SECTION("positive affine rescaling leaves ncc unchanged") {
        RandomStream rng(52);
        ExplanationMap m = as_map;
        for (auto& v : m.values) v += float(rng.uniform(0.0, 0.5));
        double base = ncc(m, mask).value;
        ExplanationMap scaled = m;
        for (auto& v : scaled.values) v = 3.5f * v + 0.7f;
        CHECK(ncc(scaled, mask).value == Approx(base).margin(1e-5));
    }

    SECTION("constant map is degenerate and returns 0") {
        ExplanationMap flat;
        flat.height = 10;
        flat.width = 10;
        flat.values.assign(100, 0.25f);
        auto r = ncc(flat, mask);
        CHECK(r.degenerate);
        CHECK(r.value == 0.0);
    }
}

TEST_CASE("gradient map oracles", "[evaluation][gradmap]") {
    SECTION("a constant classifier yields a zero map") {
        auto cls = build_lenet<float>(28, 3);
        for (auto& [name, t] : cls.store.params)
            for (auto& v : t.data()) v = 0.0f;
        RandomStream rng(3);
        Image x = render_digit(8, 28, rng);
        auto m = gradient_map(cls, x);
        for (float v : m.values) CHECK(v == 0.0f);
    }

    SECTION("gradient values match finite differences at random pixels") {
        auto cls = build_lenet<double>(28, 7);
        RandomStream rng(9);
        Image x = render_digit(3, 28, rng);

        Tensor<double> xt = images_to_tensor<double>({x});
        xt.set_requires_grad(true);
        auto gx = grad(sum_all(cls.prob_forward(xt)), {xt})[0];

        for (int trial = 0; trial < 10; ++trial) {
            size_t k = size_t(rng.uniform_int(0, 783));
            double h = 1e-4;
            Image xp = x, xm = x;
            xp.pixels[k] += float(h);
            xm.pixels[k] -= float(h);
            double fp = predict_prob(cls, {xp})[0];
            double fm = predict_prob(cls, {xm})[0];
            double num = (fp - fm) / (2 * h);
            double ana = gx.data()[k];
            double denom = std::max({0.05, std::abs(num), std::abs(ana)});
            CHECK(std::abs(num - ana) / denom < 1e-2);
        }
    }
}

TEST_CASE("integrated gradients", "[evaluation][ig]") {
    auto cls = build_lenet<double>(28, 5);
    RandomStream rng(5);
    Image x = render_digit(8, 28, rng);
    Image baseline = Image::zeros(28, 28);

    SECTION("x equal to the baseline yields a zero map") {
        auto m = integrated_gradients_map(cls, x, x, 16);
        for (float v : m.values) CHECK(v == 0.0f);
    }

    SECTION("completeness: attributions sum to f(x) - f(baseline)") {
        auto attr = integrated_gradients_attributions(cls, x, baseline, 128);
        double total = 0;
        for (double a : attr) total += a;
        double fx = predict_prob(cls, {x})[0];
        double fb = predict_prob(cls, {baseline})[0];
        double target = fx - fb;
        CHECK(std::abs(total - target) <= 0.02 * std::max(std::abs(target), 1e-3));
    }

    SECTION("one step is the gradient at the midpoint") {
        auto attr = integrated_gradients_attributions(cls, x, baseline, 1);
        Image mid = x;
        for (size_t i = 0; i < mid.pixels.size(); ++i)
            mid.pixels[i] = 0.5f * (x.pixels[i] + baseline.pixels[i]);
        Tensor<double> mt = images_to_tensor<double>({mid});
        mt.set_requires_grad(true);
        auto gx = grad(sum_all(cls.prob_forward(mt)), {mt})[0];
        for (size_t i = 0; i < attr.size(); ++i) {
            double expected = (double(x.pixels[i]) - double(baseline.pixels[i])) * gx.data()[i];
            CHECK(attr[i] == Approx(expected).margin(1e-12));
        }
    }
}

TEST_CASE("embedding basics", "[evaluation][embedding]") {
    RandomStream rng(61);
    DecisionPartition part;
    for (int i = 0; i < 60; ++i) {
        part.chi0.push_back(render_digit(3, 28, rng));
        part.chi1.push_back(render_digit(8, 28, rng));
    }

    VaeConfig vc;
    vc.epochs = 3;
    vc.batch_size = 32;
    vc.seed = 2;
    auto model = build_embedding<float>(vc, 28);
    auto history = train_embedding(model, part, false);

    SECTION("reconstruction improves over training") {
        REQUIRE(history.size() == 3);
        CHECK(history.back().recon < history.front().recon);
        CHECK(model.frozen);
    }

    SECTION("mu is deterministic and batch-consistent") {
        auto mu_one = embed_mu(model, {part.chi0[0]});
        auto mu_two = embed_mu(model, {part.chi0[0], part.chi0[0], part.chi0[1]});
        REQUIRE(mu_one[0].size() == size_t(vc.latent_dim));
        for (int j = 0; j < vc.latent_dim; ++j) {
            CHECK(mu_two[0][size_t(j)] == mu_two[1][size_t(j)]);
            CHECK(mu_one[0][size_t(j)] == Approx(mu_two[0][size_t(j)]).margin(1e-5));
        }
    }

    SECTION("one-sided partitions are config errors") {
        DecisionPartition bad;
        bad.chi0 = part.chi0;
        auto fresh = build_embedding<float>(vc, 28);
        CHECK_THROWS_AS(train_embedding(fresh, bad, false), ConfigError);
    }

    SECTION("checkpoint round trip") {
        fs::path dir = fs::temp_directory_path() / "cfx_test_vae";
        fs::create_directories(dir);
        save_embedding(model, dir / "v.cfx");
        auto back = load_embedding<float>(dir / "v.cfx");
        CHECK(back.head_val_accuracy == model.head_val_accuracy);
        auto a = embed_mu(model, {part.chi1[0]});
        auto b = embed_mu(back, {part.chi1[0]});
        CHECK(a[0] == b[0]);
    }
}

TEST_CASE("decision accuracies", "[evaluation][acc]") {
    RandomStream rng(71);
    std::vector<LabeledSample> samples;
    for (int i = 0; i < 50; ++i) {
        samples.push_back({render_digit(3, 28, rng), 0});
        samples.push_back({render_digit(8, 28, rng), 1});
    }
    auto split = split_dataset(samples, {0.8, 0.2, 0.0}, 5);
    auto cls = build_lenet<float>(28, 5);
    ClassifierTrainConfig cc;
    cc.epochs = 3;
    cc.batch_size = 32;
    cc.learning_rate = 1e-3;
    cc.seed = 5;
    cc.augment.enabled = false;
    train_classifier(cls, split, cc, false);

    auto e = build_explainer<float>(ExplainerMethod::CyCE, GeneratorSpec{}, DiscriminatorSpec{},
                                    &cls, LossWeights{}, 0.5, 3);

    std::vector<Image> images;
    for (const auto& s : split.val) images.push_back(s.image);

    // CyCE stable generation is the identity, so stable accuracy is exactly 1.
    CHECK(stable_accuracy(cls, e, images, 0.5) == 1.0);
    double adv = adversarial_accuracy(cls, e, images, 0.5);
    CHECK(adv >= 0.0);
    CHECK(adv <= 1.0);
    CHECK_THROWS_AS(adversarial_accuracy(cls, e, {}, 0.5), UndefinedError);
    CHECK_THROWS_AS(stable_accuracy(cls, e, {}, 0.5), UndefinedError);
}
