#include <catch2/catch.hpp>

#include "counterfax/nets.hpp"
#include "testutil.hpp"

using namespace counterfax;

TEST_CASE("generator shape, range, and seed determinism", "[nets][generator]") {
    GeneratorSpec spec;  // 2 scales, clip output
    auto g = build_generator<float>(spec, 28, 11);

    RandomStream rng(4);
    std::vector<float> xv(2 * 784);
    for (auto& v : xv) v = float(rng.uniform());
    auto x = Tensor<float>::from({2, 1, 28, 28}, xv);
    auto y = generator_forward(g, x);
    REQUIRE(y.shape() == x.shape());
    for (float v : y.data()) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }

    SECTION("sigmoid output mode also stays in range") {
        GeneratorSpec s2 = spec;
        s2.output_mode = GeneratorOutputMode::sigmoid;
        auto g2 = build_generator<float>(s2, 28, 11);
        auto y2 = generator_forward(g2, x);
        for (float v : y2.data()) REQUIRE((v > 0.0f && v < 1.0f));
    }

    SECTION("indivisible input size is a config error") {
        GeneratorSpec s3 = spec;
        s3.n_scales = 3;
        CHECK_THROWS_AS(build_generator<float>(s3, 28, 1), ConfigError);
    }

    SECTION("same seed builds identical parameters") {
        auto g2 = build_generator<float>(spec, 28, 11);
        CHECK(g.param_hash() == g2.param_hash());
        auto g3 = build_generator<float>(spec, 28, 12);
        CHECK(g.param_hash() != g3.param_hash());
    }

    SECTION("architecture symmetry: same spec, same parameter count") {
        auto a = build_generator<float>(spec, 28, 1);
        auto b = build_generator<float>(spec, 28, 99);
        CHECK(a.store.param_count() == b.store.param_count());
    }

    SECTION("tail convolutions add parameters") {
        GeneratorSpec s4 = spec;
        s4.tail_convs = 2;
        auto g4 = build_generator<float>(s4, 28, 1);
        CHECK(g4.store.param_count() > g.store.param_count());
    }
}

TEST_CASE("generator inference is batch-consistent", "[nets][generator]") {
    auto g = build_generator<float>(GeneratorSpec{}, 28, 3);
    RandomStream rng(5);
    std::vector<Image> images;
    for (int i = 0; i < 5; ++i) {
        Image im = Image::zeros(28, 28);
        for (auto& p : im.pixels) p = float(rng.uniform());
        images.push_back(im);
    }
    auto batch = generator_forward(g, images_to_tensor<float>(images));
    for (int i = 0; i < 5; ++i) {
        auto single = generator_forward(g, images_to_tensor<float>({images[size_t(i)]}));
        for (int64_t k = 0; k < single.size(); ++k)
            REQUIRE(batch.data()[size_t(i * 784 + k)] ==
                    Approx(single.data()[size_t(k)]).margin(1e-5));
    }
}

TEST_CASE("toy generator input gradient matches finite differences", "[nets][generator][grad]") {
    GeneratorSpec spec;
    spec.n_scales = 1;
    spec.base_channels = 2;
    spec.dropout_rate = 0.0;
    spec.output_mode = GeneratorOutputMode::sigmoid;  // smooth for differencing
    auto g = build_generator<double>(spec, 8, 21);

    RandomStream rng(6);
    auto x = cfxtest::randt({1, 1, 8, 8}, rng, 0.2, 0.8);
    RandomStream ctx_rng(1);
    double err = cfxtest::gradcheck(
        [&] {
            TrainContext ctx{true, &ctx_rng};
            return mean_all(g.forward(x, ctx));
        },
        {x}, 1e-5);
    CHECK(err < 1e-3);
}

TEST_CASE("discriminator logits, zero-parameter case, and determinism", "[nets][discriminator]") {
    DiscriminatorSpec spec;
    auto d = build_discriminator<float>(spec, 28, 17);

    RandomStream rng(7);
    std::vector<float> xv(3 * 784);
    for (auto& v : xv) v = float(rng.uniform());
    auto x = Tensor<float>::from({3, 1, 28, 28}, xv);
    auto logits = discriminator_forward(d, x);
    REQUIRE(logits.shape() == Shape{3});

    auto again = discriminator_forward(d, x);
    CHECK(logits.data() == again.data());  // purity

    SECTION("constant-zero parameters give logit 0, probability one half") {
        for (auto& [name, t] : d.store.params)
            for (auto& v : t.data()) v = 0.0f;
        auto z = discriminator_forward(d, x);
        for (float v : z.data()) CHECK(v == 0.0f);
    }

    SECTION("seed determinism") {
        auto d2 = build_discriminator<float>(spec, 28, 17);
        CHECK(d.param_hash() == d2.param_hash());
    }

    SECTION("too many blocks for the input errors") {
        DiscriminatorSpec s2;
        s2.n_blocks = 6;
        CHECK_THROWS_AS(build_discriminator<float>(s2, 28, 1), ConfigError);
    }
}

TEST_CASE("discriminator input gradient matches finite differences", "[nets][discriminator][grad]") {
    DiscriminatorSpec spec;
    spec.n_blocks = 2;
    spec.base_channels = 2;
    auto d = build_discriminator<double>(spec, 8, 23);

    RandomStream rng(8);
    auto x = cfxtest::randt({2, 1, 8, 8}, rng, 0.1, 0.9);
    double err = cfxtest::gradcheck([&] { return sum_all(d.forward(x)); }, {x}, 1e-5);
    CHECK(err < 1e-3);
}

TEST_CASE("network checkpoints restore forwards exactly", "[nets][io]") {
    auto g = build_generator<float>(GeneratorSpec{}, 28, 31);
    RandomStream rng(9);
    std::vector<float> xv(784);
    for (auto& v : xv) v = float(rng.uniform());
    auto x = Tensor<float>::from({1, 1, 28, 28}, xv);
    auto before = generator_forward(g, x);

    fs::path dir = fs::temp_directory_path() / "cfx_test_nets";
    fs::create_directories(dir);
    ArrayContainer c;
    save_params(g.store, c);
    c.save(dir / "g.cfx");

    auto g2 = build_generator<float>(GeneratorSpec{}, 28, 99);
    auto loaded = ArrayContainer::load(dir / "g.cfx");
    load_params(g2.store, loaded);
    auto after = generator_forward(g2, x);
    CHECK(before.data() == after.data());
}
