#pragma once

// Generator and discriminator architectures shared by every explainer
// embodiment. The generator is UNet-like: residual downsampling blocks with
// skip connections into an upsampling decoder; convolution blocks are
// batch-norm -> ReLU -> conv (pre-activation). The trunk/head split exists
// because one embodiment shares a trunk between a stable and an adversarial
// head. Discriminators are stride-2 conv stacks with LeakyReLU and a
// single-logit dense head.

#include <iostream>

#include "counterfax/classifier.hpp"
#include "counterfax/nn.hpp"

namespace counterfax {

enum class GeneratorOutputMode { sigmoid, clip };

struct GeneratorSpec {
    int n_scales = 2;
    int base_channels = 16;
    double dropout_rate = 0.1;
    GeneratorOutputMode output_mode = GeneratorOutputMode::clip;
    int tail_convs = 0;

    void validate() const {
        if (n_scales < 1) throw ConfigError("generator spec: n_scales must be >= 1");
        if (dropout_rate < 0 || dropout_rate > 0.5)
            throw ConfigError("generator spec: dropout_rate must be in [0, 0.5]");
        if (base_channels < 1) throw ConfigError("generator spec: base_channels must be >= 1");
        if (tail_convs < 0) throw ConfigError("generator spec: tail_convs must be >= 0");
    }
};

struct DiscriminatorSpec {
    int n_blocks = 2;
    int base_channels = 16;
    double leaky_slope = 0.2;

    void validate() const {
        if (n_blocks < 1) throw ConfigError("discriminator spec: n_blocks must be >= 1");
        if (base_channels < 1) throw ConfigError("discriminator spec: base_channels must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// batch-norm -> ReLU -> conv (pad keeps the spatial size).
template <typename T>
struct ConvBlock {
    BatchNorm2dLayer<T> bn;
    Conv2dLayer<T> conv;

    ConvBlock() = default;
    ConvBlock(ParamStore<T>& store, const std::string& name, int cin, int cout, int k,
              RandomStream& rng)
        : bn(store, name + ".bn", cin), conv(store, name + ".conv", cin, cout, k, 1, k / 2, rng) {}

    Tensor<T> forward(const Tensor<T>& x, TrainContext& ctx) {
        return conv.forward(relu(bn.forward(x, ctx)));
    }
};

/// Two conv blocks with an identity skip (1x1 projection when the channel
/// count changes).
template <typename T>
struct ResidualBlock {
    ConvBlock<T> b1, b2;
    Conv2dLayer<T> proj;
    bool has_proj = false;

    ResidualBlock() = default;
    ResidualBlock(ParamStore<T>& store, const std::string& name, int cin, int cout,
                  RandomStream& rng)
        : b1(store, name + ".c1", cin, cout, 3, rng), b2(store, name + ".c2", cout, cout, 3, rng) {
        if (cin != cout) {
            proj = Conv2dLayer<T>(store, name + ".proj", cin, cout, 1, 1, 0, rng);
            has_proj = true;
        }
    }

    Tensor<T> forward(const Tensor<T>& x, TrainContext& ctx) {
        Tensor<T> h = b2.forward(b1.forward(x, ctx), ctx);
        Tensor<T> skip = has_proj ? proj.forward(x) : x;
        return add(h, skip);
    }
};

// ---------------------------------------------------------------------------
// UNet trunk: encoder (residual block + maxpool per scale), bottom block,
// decoder (nearest upsample + conv, skip concat, two conv blocks per scale).
// Output is a base_channels feature map at input resolution.
// ---------------------------------------------------------------------------

template <typename T>
struct UNetTrunk {
    GeneratorSpec spec;
    int input_size = 28;

    std::vector<ResidualBlock<T>> enc;
    ResidualBlock<T> bottom;
    std::vector<Conv2dLayer<T>> up_conv;
    std::vector<ConvBlock<T>> dec_a, dec_b;

    void build(ParamStore<T>& store, const std::string& prefix, const GeneratorSpec& s,
               int input_size_, RandomStream& rng) {
        spec = s;
        input_size = input_size_;
        int div = 1 << spec.n_scales;
        if (input_size % div != 0)
            throw ConfigError("generator: input_size " + std::to_string(input_size) +
                              " not divisible by 2^" + std::to_string(spec.n_scales));
        int cin = 1;
        std::vector<int> widths;
        for (int sc = 0; sc < spec.n_scales; ++sc) {
            int cout = spec.base_channels << sc;
            enc.emplace_back(store, prefix + "enc" + std::to_string(sc), cin, cout, rng);
            widths.push_back(cout);
            cin = cout;
        }
        bottom = ResidualBlock<T>(store, prefix + "bottom", cin, spec.base_channels << spec.n_scales,
                                  rng);
        up_conv.resize(size_t(spec.n_scales));
        dec_a.resize(size_t(spec.n_scales));
        dec_b.resize(size_t(spec.n_scales));
        int above = spec.base_channels << spec.n_scales;
        for (int sc = spec.n_scales - 1; sc >= 0; --sc) {
            int cskip = widths[size_t(sc)];
            up_conv[size_t(sc)] = Conv2dLayer<T>(store, prefix + "up" + std::to_string(sc), above,
                                                 cskip, 3, 1, 1, rng);
            dec_a[size_t(sc)] = ConvBlock<T>(store, prefix + "dec" + std::to_string(sc) + "a",
                                             2 * cskip, cskip, 3, rng);
            dec_b[size_t(sc)] = ConvBlock<T>(store, prefix + "dec" + std::to_string(sc) + "b", cskip,
                                             cskip, 3, rng);
            above = cskip;
        }
    }

    Tensor<T> forward(const Tensor<T>& x, TrainContext& ctx) {
        if (x.ndim() != 4 || x.dim(1) != 1 || x.dim(2) != input_size || x.dim(3) != input_size)
            throw ShapeError("generator: expected (N,1," + std::to_string(input_size) + "," +
                             std::to_string(input_size) + ") input");
        std::vector<Tensor<T>> skips;
        Tensor<T> h = x;
        for (auto& block : enc) {
            h = block.forward(h, ctx);
            h = dropout(h, T(spec.dropout_rate), ctx);
            skips.push_back(h);
            h = maxpool2(h);
        }
        h = bottom.forward(h, ctx);
        h = dropout(h, T(spec.dropout_rate), ctx);
        for (int sc = spec.n_scales - 1; sc >= 0; --sc) {
            h = up_conv[size_t(sc)].forward(upsample_nearest2(h));
            h = concat_channels(h, skips[size_t(sc)]);
            h = dec_a[size_t(sc)].forward(h, ctx);
            h = dec_b[size_t(sc)].forward(h, ctx);
            h = dropout(h, T(spec.dropout_rate), ctx);
        }
        return h;
    }
};

/// Optional extra conv blocks, an output conv, and the [0,1] output stage.
/// Clip mode predicts a residual against the input with a zero-initialized
/// output conv, so a fresh generator is exactly the identity; training then
/// only moves the pixels the objectives care about.
template <typename T>
struct GeneratorHead {
    GeneratorSpec spec;
    std::vector<ConvBlock<T>> tail;
    Conv2dLayer<T> out_conv;

    void build(ParamStore<T>& store, const std::string& prefix, const GeneratorSpec& s,
               RandomStream& rng) {
        spec = s;
        for (int t = 0; t < spec.tail_convs; ++t)
            tail.emplace_back(store, prefix + "tail" + std::to_string(t), spec.base_channels,
                              spec.base_channels, 3, rng);
        out_conv = Conv2dLayer<T>(store, prefix + "out", spec.base_channels, 1, 3, 1, 1, rng);
        if (spec.output_mode == GeneratorOutputMode::clip)
            for (auto& w : out_conv.w.data()) w = T(0);
    }

    Tensor<T> forward(const Tensor<T>& features, const Tensor<T>& x, TrainContext& ctx) {
        Tensor<T> h = features;
        for (auto& tblock : tail) h = tblock.forward(h, ctx);
        h = out_conv.forward(h);
        if (spec.output_mode == GeneratorOutputMode::sigmoid) return sigmoid(h);
        // Saturated pixels stay trainable through a small gradient leak.
        return clamp_leaky(add(x, h), T(0), T(1), T(0.1));
    }
};

template <typename T = float>
struct Generator {
    GeneratorSpec spec;
    int input_size = 28;
    uint64_t init_seed = 0;
    ParamStore<T> store;
    UNetTrunk<T> trunk;
    GeneratorHead<T> head;

    Tensor<T> forward(const Tensor<T>& x, TrainContext ctx) {
        return head.forward(trunk.forward(x, ctx), x, ctx);
    }

    uint64_t param_hash() const { return store.param_hash(); }
};

template <typename T = float>
Generator<T> build_generator(const GeneratorSpec& spec, int input_size, uint64_t seed) {
    spec.validate();
    Generator<T> g;
    g.spec = spec;
    g.input_size = input_size;
    g.init_seed = seed;
    RandomStream rng(seed, "generator/init");
    g.trunk.build(g.store, "", spec, input_size, rng);
    g.head.build(g.store, "", spec, rng);
    return g;
}

/// Inference-mode generation (running batch-norm statistics, no dropout).
template <typename T>
Tensor<T> generator_forward(Generator<T>& g, const Tensor<T>& images) {
    NoGradGuard ng;
    TrainContext ctx{false, nullptr};
    return g.forward(images, ctx);
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

template <typename T = float>
struct Discriminator {
    DiscriminatorSpec spec;
    int input_size = 28;
    uint64_t init_seed = 0;
    ParamStore<T> store;

    std::vector<Conv2dLayer<T>> blocks;
    DenseLayer<T> head;
    int flat_dim = 0;

    /// (N,1,H,W) -> (N) logits.
    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.ndim() != 4 || x.dim(2) != input_size || x.dim(3) != input_size)
            throw ShapeError("discriminator: expected (N,1," + std::to_string(input_size) + "," +
                             std::to_string(input_size) + ") input");
        Tensor<T> h = x;
        for (const auto& block : blocks) h = leaky_relu(block.forward(h), T(spec.leaky_slope));
        h = reshape(h, {x.dim(0), flat_dim});
        return reshape(head.forward(h), {x.dim(0)});
    }

    uint64_t param_hash() const { return store.param_hash(); }
};

template <typename T = float>
Discriminator<T> build_discriminator(const DiscriminatorSpec& spec, int input_size, uint64_t seed) {
    spec.validate();
    if (input_size < (1 << spec.n_blocks))
        throw ConfigError("build_discriminator: input smaller than 2^n_blocks");

    Discriminator<T> d;
    d.spec = spec;
    d.input_size = input_size;
    d.init_seed = seed;
    RandomStream rng(seed, "discriminator/init");

    int cin = 1, size = input_size;
    for (int b = 0; b < spec.n_blocks; ++b) {
        int cout = spec.base_channels << b;
        d.blocks.emplace_back(d.store, "blk" + std::to_string(b), cin, cout, 3, 2, 1, rng);
        cin = cout;
        size = (size + 2 - 3) / 2 + 1;
    }
    d.flat_dim = cin * size * size;
    d.head = DenseLayer<T>(d.store, "head", d.flat_dim, 1, rng);
    return d;
}

template <typename T>
Tensor<T> discriminator_forward(const Discriminator<T>& d, const Tensor<T>& images) {
    NoGradGuard ng;
    return d.forward(images);
}

}  // namespace counterfax
