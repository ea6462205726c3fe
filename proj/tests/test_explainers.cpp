#include <catch2/catch.hpp>

#include "counterfax/digits.hpp"
#include "counterfax/explainers.hpp"

using namespace counterfax;

namespace {

struct Setup {
    LeNetClassifier<float> cls;
    std::vector<Image> images3, images8;
    DecisionPartition part;

    Setup() {
        RandomStream rng(51);
        std::vector<LabeledSample> samples;
        for (int i = 0; i < 80; ++i) {
            samples.push_back({render_digit(3, 28, rng), 0});
            samples.push_back({render_digit(8, 28, rng), 1});
        }
        auto split = split_dataset(samples, {0.8, 0.2, 0.0}, 5);
        cls = build_lenet<float>(28, 5);
        ClassifierTrainConfig cc;
        cc.epochs = 4;
        cc.batch_size = 32;
        cc.learning_rate = 1e-3;
        cc.seed = 5;
        cc.augment.enabled = false;
        train_classifier(cls, split, cc, false);

        for (int i = 0; i < 24; ++i) {
            images3.push_back(render_digit(3, 28, rng));
            images8.push_back(render_digit(8, 28, rng));
        }
        std::vector<Image> all = images3;
        all.insert(all.end(), images8.begin(), images8.end());
        part = partition_by_decision(
            all, [&](const std::vector<Image>& b) { return predict_prob(cls, b); }, 0.5, cls.id());
    }
};

Setup& setup() {
    static Setup s;
    return s;
}

LossWeights weights_for(ExplainerMethod m) {
    LossWeights w;
    if (m == ExplainerMethod::CyCSAE) w.lambda_w = 1.0;
    return w;
}

}  // namespace

TEST_CASE("build_explainer populates exactly the required roles", "[explainers][build]") {
    auto& s = setup();
    GeneratorSpec gs;
    DiscriminatorSpec ds;

    auto syce = build_explainer<float>(ExplainerMethod::SyCE, gs, ds, &s.cls,
                                       weights_for(ExplainerMethod::SyCE), 0.5, 2);
    CHECK(syce.g0.has_value());
    CHECK(syce.g1.has_value());
    CHECK_FALSE(syce.g.has_value());
    CHECK_FALSE(syce.pair0.has_value());

    auto ssye = build_explainer<float>(ExplainerMethod::SSyE, gs, ds, &s.cls,
                                       weights_for(ExplainerMethod::SSyE), 0.5, 2);
    CHECK(ssye.g.has_value());
    CHECK_FALSE(ssye.g0.has_value());

    auto cycsae = build_explainer<float>(ExplainerMethod::CyCSAE, gs, ds, &s.cls,
                                         weights_for(ExplainerMethod::CyCSAE), 0.5, 2);
    CHECK(cycsae.pair0.has_value());
    CHECK(cycsae.pair1.has_value());
    // shared trunk: the two heads have identically shaped parameter lists
    REQUIRE(cycsae.pair0->head_s_params.size() == cycsae.pair0->head_a_params.size());
    for (size_t i = 0; i < cycsae.pair0->head_s_params.size(); ++i)
        CHECK(cycsae.pair0->head_s_params[i].shape() == cycsae.pair0->head_a_params[i].shape());

    SECTION("CyCSAE without lambda_w is a config error") {
        LossWeights w;  // lambda_w unset
        CHECK_THROWS_AS(
            build_explainer<float>(ExplainerMethod::CyCSAE, gs, ds, &s.cls, w, 0.5, 2),
            ConfigError);
    }

    SECTION("unfrozen classifier is refused") {
        auto fresh = build_lenet<float>(28, 9);
        CHECK_THROWS_AS(build_explainer<float>(ExplainerMethod::SyCE, gs, ds, &fresh,
                                               weights_for(ExplainerMethod::SyCE), 0.5, 2),
                        ConfigError);
    }
}

TEST_CASE("generation routing per method", "[explainers][routing]") {
    auto& s = setup();
    GeneratorSpec gs;
    DiscriminatorSpec ds;
    auto e = build_explainer<float>(ExplainerMethod::SyCE, gs, ds, &s.cls,
                                    weights_for(ExplainerMethod::SyCE), 0.5, 3);

    // find one test image per decided domain
    Image x0, x1;
    bool got0 = false, got1 = false;
    for (const auto& im : s.part.chi0)
        if (!got0) {
            x0 = im;
            got0 = true;
        }
    for (const auto& im : s.part.chi1)
        if (!got1) {
            x1 = im;
            got1 = true;
        }
    REQUIRE((got0 && got1));

    SECTION("SyCE uses g_i for domain i, and g_i^2 for the stable image") {
        Image adv = adversary(e, x0);
        auto direct = generator_forward(*e.g0, images_to_tensor<float>({x0}));
        CHECK(adv.pixels == image_from_tensor(direct, 0).pixels);

        Image adv1 = adversary(e, x1);
        auto direct1 = generator_forward(*e.g1, images_to_tensor<float>({x1}));
        CHECK(adv1.pixels == image_from_tensor(direct1, 0).pixels);

        Image st = stable(e, x0);
        auto twice = generator_forward(*e.g0, generator_forward(*e.g0, images_to_tensor<float>({x0})));
        CHECK(st.pixels == image_from_tensor(twice, 0).pixels);
    }

    SECTION("untrained adversary is still a valid image") {
        Image adv = adversary(e, x0);
        REQUIRE(adv.height == 28);
        for (float p : adv.pixels) REQUIRE((p >= 0.0f && p <= 1.0f));
    }

    SECTION("CyCE stable is the input, bit-exactly, and the map is |x - g(x)|") {
        auto cy = build_explainer<float>(ExplainerMethod::CyCE, gs, ds, &s.cls,
                                         weights_for(ExplainerMethod::CyCE), 0.5, 3);
        Image st = stable(cy, x0);
        CHECK(st.pixels == x0.pixels);

        ExplanationMap m = explanation_map(cy, x0);
        Image adv = adversary(cy, x0);
        for (size_t i = 0; i < m.values.size(); ++i)
            CHECK(m.values[i] == std::abs(x0.pixels[i] - adv.pixels[i]));
    }

    SECTION("maps recompose bit-exactly from stable and adversary for all methods") {
        for (auto method : {ExplainerMethod::SyCE, ExplainerMethod::CyCE, ExplainerMethod::CyCE_noFc,
                            ExplainerMethod::SSyE, ExplainerMethod::CyCSAE}) {
            auto ex = build_explainer<float>(method, gs, ds, &s.cls, weights_for(method), 0.5, 4);
            ExplanationMap m = explanation_map(ex, x1);
            Image st = stable(ex, x1);
            Image ad = adversary(ex, x1);
            REQUIRE(m.height == 28);
            REQUIRE(m.width == 28);
            for (size_t i = 0; i < m.values.size(); ++i) {
                REQUIRE(m.values[i] >= 0.0f);
                REQUIRE(m.values[i] == std::abs(st.pixels[i] - ad.pixels[i]));
            }
        }
    }
}

TEST_CASE("train_step contract", "[explainers][train]") {
    auto& s = setup();
    GeneratorSpec gs;
    DiscriminatorSpec ds;
    auto batch0 = images_to_tensor<float>(std::vector<Image>(s.part.chi0.begin(),
                                                            s.part.chi0.begin() + 8));
    auto batch1 = images_to_tensor<float>(std::vector<Image>(s.part.chi1.begin(),
                                                            s.part.chi1.begin() + 8));
    TrainSchedule sched;
    sched.seed = 77;

    SECTION("classifier hash is untouched and phases carry the right terms") {
        auto e = build_explainer<float>(ExplainerMethod::SyCE, gs, ds, &s.cls,
                                        weights_for(ExplainerMethod::SyCE), 0.5, 7);
        ExplainerOptState<float> opt(e, sched);
        uint64_t before = s.cls.param_hash();
        StepResult r = train_step(e, batch0, batch1, opt);
        CHECK(s.cls.param_hash() == before);
        // Identity-initialized generators (clip mode): the symmetry and cycle
        // distances of the very first phase are exactly zero.
        CHECK(r.phase0.L_d_s == 0.0);
        CHECK(r.phase0.L_d_cy == 0.0);
        CHECK(r.phase0.L_fc_a > 0.0);
        CHECK(r.phase0.total > 0.0);
        CHECK(r.d0_gp >= 0.0);

        // breakdown total is the exact weighted recombination
        auto again = compose_total(r.phase0, e.weights, e.method);
        CHECK(again.total == r.phase0.total);
    }

    SECTION("a fresh clip-mode generator is exactly the identity") {
        auto g = build_generator<float>(gs, 28, 123);
        auto y = generator_forward(g, batch0);
        CHECK(y.data() == batch0.data());
    }

    SECTION("CyCE_noFc drops the classification terms") {
        auto e = build_explainer<float>(ExplainerMethod::CyCE_noFc, gs, ds, &s.cls,
                                        weights_for(ExplainerMethod::CyCE_noFc), 0.5, 7);
        ExplainerOptState<float> opt(e, sched);
        StepResult r = train_step(e, batch0, batch1, opt);
        CHECK(r.phase0.L_fc_a == 0.0);
        CHECK(r.phase0.L_fc_cy == 0.0);
        CHECK(r.phase0.L_d_s == 0.0);
        CHECK(r.phase0.L_d_cy > 0.0);
    }

    SECTION("empty batches are step errors") {
        auto e = build_explainer<float>(ExplainerMethod::SyCE, gs, ds, &s.cls,
                                        weights_for(ExplainerMethod::SyCE), 0.5, 7);
        ExplainerOptState<float> opt(e, sched);
        CHECK_THROWS_AS(train_step(e, Tensor<float>{}, batch1, opt), UndefinedError);
    }

    SECTION("steps are deterministic given seed and batches") {
        auto run_once = [&](uint64_t seed) {
            auto e = build_explainer<float>(ExplainerMethod::SyCE, gs, ds, &s.cls,
                                            weights_for(ExplainerMethod::SyCE), 0.5, seed);
            TrainSchedule sc;
            sc.seed = 13;
            ExplainerOptState<float> opt(e, sc);
            train_step(e, batch0, batch1, opt);
            train_step(e, batch0, batch1, opt);
            return e.generators_hash();
        };
        CHECK(run_once(7) == run_once(7));
        CHECK(run_once(7) != run_once(8));
    }
}

TEST_CASE("fit contract", "[explainers][fit]") {
    auto& s = setup();
    GeneratorSpec gs;
    DiscriminatorSpec ds;
    TrainSchedule sched;
    sched.epochs = 1;
    sched.batch_size = 16;
    sched.seed = 3;

    SECTION("zero epochs returns an empty history and leaves the explainer unchanged") {
        auto e = build_explainer<float>(ExplainerMethod::CyCE, gs, ds, &s.cls,
                                        weights_for(ExplainerMethod::CyCE), 0.5, 5);
        uint64_t before = e.generators_hash();
        TrainSchedule zero = sched;
        zero.epochs = 0;
        auto hist = fit(e, s.part, zero, nullptr, false);
        CHECK(hist.empty());
        CHECK(e.generators_hash() == before);
    }

    SECTION("an empty partition side is a config error") {
        auto e = build_explainer<float>(ExplainerMethod::CyCE, gs, ds, &s.cls,
                                        weights_for(ExplainerMethod::CyCE), 0.5, 5);
        DecisionPartition bad = s.part;
        bad.chi1.clear();
        CHECK_THROWS_AS(fit(e, bad, sched, nullptr, false), ConfigError);
    }

    SECTION("training runs are reproducible and report flip rates") {
        auto run_once = [&] {
            auto e = build_explainer<float>(ExplainerMethod::CyCE, gs, ds, &s.cls,
                                            weights_for(ExplainerMethod::CyCE), 0.5, 5);
            auto hist = fit(e, s.part, sched, &s.part, false);
            REQUIRE(hist.size() == 1);
            CHECK(hist[0].flip_rate0 >= 0.0);
            CHECK(hist[0].flip_rate1 <= 1.0);
            return e.generators_hash();
        };
        CHECK(run_once() == run_once());
    }
}

TEST_CASE("explainer checkpoints round trip", "[explainers][io]") {
    auto& s = setup();
    GeneratorSpec gs;
    gs.tail_convs = 1;
    DiscriminatorSpec ds;
    LossWeights w = weights_for(ExplainerMethod::CyCSAE);
    auto e = build_explainer<float>(ExplainerMethod::CyCSAE, gs, ds, &s.cls, w, 0.4, 21);

    fs::path dir = fs::temp_directory_path() / "cfx_test_exp";
    fs::create_directories(dir);
    save_explainer(e, dir / "e.cfx");
    auto back = load_explainer<float>(dir / "e.cfx", &s.cls);

    CHECK(back.method == ExplainerMethod::CyCSAE);
    CHECK(back.threshold == 0.4);
    CHECK(back.weights.lambda_w.value() == 1.0);
    CHECK(back.generators_hash() == e.generators_hash());

    Image probe = s.part.chi0[0];
    CHECK(adversary(back, probe).pixels == adversary(e, probe).pixels);
    CHECK(stable(back, probe).pixels == stable(e, probe).pixels);

    SECTION("a different classifier is rejected") {
        auto other = build_lenet<float>(28, 99);
        other.frozen = true;
        CHECK_THROWS_AS(load_explainer<float>(dir / "e.cfx", &other), ConfigError);
    }
}
