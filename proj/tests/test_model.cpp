#include <gtest/gtest.h>

#include <cmath>

#include "carn/grad_check.hpp"
#include "carn/model.hpp"
#include "test_util.hpp"

namespace carn {
namespace {

using testing::D;
using testing::probe;
using testing::rand_t;

CarnConfig mini(Variant v = Variant::plain) {
    CarnConfig c;
    c.enc_channels = {2, 2, 2, 2, 2, 2};
    c.freq_bins = 64;
    c.lstm_hidden = 2;
    c.variant = v;
    c.seed = 3;
    return c;
}

CarnConfig small() {
    CarnConfig c;
    c.enc_channels = {4, 8, 8, 16, 16, 16};
    c.lstm_hidden = 64;
    c.seed = 5;
    return c;
}

template <typename T>
MaskVars<T> run(CarnModel<T>& m, Tape<T>& tape, const Tensor<T>& x, Mode mode = Mode::eval,
                ForwardTrace<T>* trace = nullptr) {
    Context<T> ctx{tape, mode};
    return m.forward(ctx, tape.leaf(x), trace);
}

// Random running statistics so eval-mode batch-norm is not the identity.
template <typename T>
void randomize_buffers(CarnModel<T>& m, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : m.parameters()) {
        if (p->trainable) continue;
        const bool var = p->name.ends_with("running_var");
        for (auto& v : p->value.vec()) v = static_cast<T>(var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.3, 0.3));
    }
}

TEST(CarnConfig, DefaultsValidate) {
    CarnConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.lstm_input(), 512u);
    EXPECT_NO_THROW(mini().validate());
}

TEST(CarnConfig, RejectsBadShapes) {
    CarnConfig c;
    c.enc_channels = {16, 32, 64, 128, 128};
    EXPECT_THROW(c.validate(), ConfigError);
    c.enc_channels.clear();
    EXPECT_THROW(CarnModel<float>{c}, ConfigError);
    c = CarnConfig{};
    c.freq_bins = 257;
    EXPECT_THROW(c.validate(), ConfigError);
    c = CarnConfig{};
    c.lstm_hidden = 256;
    EXPECT_THROW(c.validate(), ConfigError);
    c = CarnConfig{};
    c.enc_channels[2] = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = CarnConfig{};
    c.kernel_f = 4;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(CarnConfig, TextRoundTrip) {
    CarnConfig c = small();
    c.variant = Variant::gated;
    c.gate_target = GateTarget::decoder;
    EXPECT_EQ(CarnConfig::from_text(c.to_text()), c);
    EXPECT_THROW(CarnConfig::from_text("bogus=1\n"), ConfigError);
    EXPECT_THROW(CarnConfig::from_text("seed=abc\n"), ConfigError);
    EXPECT_THROW(CarnConfig::from_text("variant=fancy\n"), ConfigError);
}

class ShapeLadder : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ShapeLadder, EncoderAndDecoder) {
    const std::size_t t = GetParam();
    CarnModel<float> m(CarnConfig{});
    Tape<float> tape(false);
    ForwardTrace<float> trace;
    const auto mask = run(m, tape, Tensor<float>(Shape{1, 2, t, 256}, 0.1f), Mode::eval, &trace);
    const std::vector<Shape> enc = {{1, 16, t, 128}, {1, 32, t, 64}, {1, 64, t, 32},
                                    {1, 128, t, 16}, {1, 128, t, 8}, {1, 128, t, 4}};
    const std::vector<Shape> dec = {{1, 128, t, 8}, {1, 128, t, 16}, {1, 64, t, 32},
                                    {1, 32, t, 64}, {1, 16, t, 128}, {1, 2, t, 256}};
    EXPECT_EQ(trace.encoder_shapes, enc);
    EXPECT_EQ(trace.decoder_shapes, dec);
    EXPECT_EQ(mask.real.shape(), (Shape{1, t, 256}));
    EXPECT_EQ(mask.imag.shape(), (Shape{1, t, 256}));
    for (float v : mask.real.value().vec()) ASSERT_TRUE(std::isfinite(v));
}

INSTANTIATE_TEST_SUITE_P(Frames, ShapeLadder, ::testing::Values(1u, 7u, 50u, 200u));

TEST(CarnModel, RejectsWrongInputLayout) {
    CarnModel<float> m(CarnConfig{});
    Tape<float> tape(false);
    EXPECT_THROW(run(m, tape, Tensor<float>(Shape{1, 2, 4, 257})), ShapeError);
    EXPECT_THROW(run(m, tape, Tensor<float>(Shape{1, 3, 4, 256})), ShapeError);
    EXPECT_THROW(run(m, tape, Tensor<float>(Shape{2, 4, 256})), ShapeError);
}

TEST(CarnModel, DecoderInputIsTwiceSkipChannels) {
    CarnModel<float> m(CarnConfig{});
    const auto& ch = m.config().enc_channels;
    for (std::size_t i = 0; i < kLevels; ++i) {
        EXPECT_EQ(m.decoder_block(i).conv.weight->value.dim(0), 2 * ch[i]);
        EXPECT_EQ(m.decoder_block(i).conv.weight->value.dim(1), i == 0 ? 2u : ch[i - 1]);
    }
}

TEST(CarnModel, BridgePreservesShapeAndZeroWeightsGiveZero) {
    CarnModel<D> m(small());
    for (auto& p : m.parameters()) {
        if (p->name.starts_with("bridge.")) p->value = Tensor<D>(p->value.shape());
    }
    Tape<D> tape(false);
    Context<D> ctx{tape, Mode::eval};
    const auto y = m.bridge_forward(ctx, Var<D>(rand_t({2, 16, 5, 4}, 1)));
    EXPECT_EQ(y.shape(), (Shape{2, 16, 5, 4}));
    for (double v : y.value().vec()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(m.bridge_forward(ctx, Var<D>(rand_t({1, 16, 5, 3}, 1))), ShapeError);
}

TEST(CarnModel, ParameterCountFrozen) {
    EXPECT_EQ(CarnModel<float>(CarnConfig{}).count_parameters(), 8587416u);
    CarnConfig g;
    g.variant = Variant::gated;
    EXPECT_EQ(CarnModel<float>(g).count_parameters(), 9764186u);
    EXPECT_GT(CarnModel<float>(g).count_parameters(), CarnModel<float>(CarnConfig{}).count_parameters());
    // Running statistics are stored but not counted.
    CarnModel<float> m(CarnConfig{});
    std::size_t buffers = 0;
    for (const auto& p : m.parameters()) buffers += p->trainable ? 0 : p->value.numel();
    EXPECT_EQ(buffers, 2u * (16 + 32 + 64 + 128 + 128 + 128 + 2 + 16 + 32 + 64 + 128 + 128));
}

TEST(CarnModel, InitIsSeededAndDeterministic) {
    CarnModel<float> a(small()), b(small());
    CarnConfig other = small();
    other.seed = 6;
    CarnModel<float> c(other);
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
        differs |= a.parameters()[i].value != c.parameters()[i].value;
    }
    EXPECT_TRUE(differs);
}

TEST(CarnModel, ForwardIsPure) {
    CarnModel<D> m(small());
    randomize_buffers(m, 2);
    std::vector<Tensor<D>> before;
    for (const auto& p : m.parameters()) before.push_back(p->value);
    const auto x = rand_t({2, 2, 6, 256}, 3);
    Tape<D> t1, t2;
    const auto y1 = run(m, t1, x), y2 = run(m, t2, x);
    EXPECT_EQ(y1.real.value(), y2.real.value());
    EXPECT_EQ(y1.imag.value(), y2.imag.value());
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(m.parameters()[i].value, before[i]);
}

TEST(CarnModel, TrainModeOnlyTouchesRunningStats) {
    CarnModel<D> m(mini());
    std::vector<Tensor<D>> before;
    for (const auto& p : m.parameters()) before.push_back(p->value);
    Tape<D> tape;
    run(m, tape, rand_t({2, 2, 4, 64}, 4), Mode::train);
    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto& p = m.parameters()[i];
        if (p.trainable) EXPECT_EQ(p.value, before[i]) << p.name;
        else EXPECT_NE(p.value, before[i]) << p.name;
    }
}

TEST(CarnModel, CausalInEvalMode) {
    CarnModel<D> m(small());
    randomize_buffers(m, 7);
    const std::size_t frames = 12, cut = 5;
    const auto x = rand_t({1, 2, frames, 256}, 8);
    Tape<D> t0(false);
    const auto ref = run(m, t0, x);
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
        auto y = x;
        Rng rng(20 + trial);
        for (std::size_t c = 0; c < 2; ++c) {
            for (std::size_t t = cut + 1; t < frames; ++t) {
                for (std::size_t f = 0; f < 256; ++f) y[(c * frames + t) * 256 + f] += rng.uniform(-5.0, 5.0);
            }
        }
        Tape<D> t1(false);
        const auto out = run(m, t1, y);
        double past = 0.0, future = 0.0;
        for (std::size_t t = 0; t < frames; ++t) {
            for (std::size_t f = 0; f < 256; ++f) {
                const std::size_t i = t * 256 + f;
                const double d = std::abs(out.real.value()[i] - ref.real.value()[i]) +
                                 std::abs(out.imag.value()[i] - ref.imag.value()[i]);
                (t <= cut ? past : future) += d;
            }
        }
        EXPECT_EQ(past, 0.0);
        EXPECT_GT(future, 0.0);
    }
}

TEST(AttentionGate, OutputsStrictlyBetweenZeroAndOne) {
    CarnModel<D> m(small());
    Tape<D> tape(false);
    ForwardTrace<D> trace;
    run(m, tape, rand_t({2, 2, 9, 256}, 9, -3.0, 3.0), Mode::eval, &trace);
    ASSERT_EQ(trace.gates.size(), kLevels);
    for (const auto& g : trace.gates) {
        for (double v : g.value().vec()) {
            ASSERT_GT(v, 0.0);
            ASSERT_LT(v, 1.0);
        }
    }
}

TEST(AttentionGate, SaturatedBiasPassesOrBlocksSkip) {
    CarnModel<D> m(small());
    Tape<D> tape(false);
    Context<D> ctx{tape, Mode::eval};
    const Var<D> u(rand_t({1, 8, 4, 64}, 10)), c(rand_t({1, 8, 4, 64}, 11));
    auto& gate = m.attention(1);
    gate.w_f.weight->value = Tensor<D>(gate.w_f.weight->value.shape());
    for (double bias : {20.0, -20.0}) {
        gate.w_f.bias->value = Tensor<D>(gate.w_f.bias->value.shape(), bias);
        const auto out = m.attention_gate(ctx, u, c, gate).output;
        for (std::size_t i = 0; i < u.numel(); ++i) {
            const double want = bias > 0 ? u.value()[i] : 0.0;
            EXPECT_NEAR(out.value()[i], want, 1e-8);
        }
    }
    EXPECT_THROW(m.attention_gate(ctx, u, Var<D>(rand_t({1, 8, 4, 32}, 1)), gate), ShapeError);
}

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Kernels with only the current-frame, centre-frequency tap reduce the gate
// to per-element scalar arithmetic.
TEST(AttentionGate, MatchesScalarEvaluation) {
    for (GateTarget target : {GateTarget::encoder, GateTarget::decoder}) {
        CarnConfig cfg;
        cfg.enc_channels = {1, 2, 2, 2, 2, 2};
        cfg.freq_bins = 64;
        cfg.lstm_hidden = 2;
        cfg.gate_target = target;
        CarnModel<D> m(cfg);
        auto& gate = m.attention(0);
        const double wg[2] = {0.7, -1.1}, wx[2] = {0.4, 0.9}, bg[2] = {0.1, -0.2}, bx[2] = {0.05, 0.3};
        const double wf[2] = {1.3, -0.8}, bf = 0.25;
        auto centre = [](Parameter<D>* p, std::size_t o, std::size_t i, double v) {
            const auto& s = p->value.shape();
            p->value[((o * s[1] + i) * s[2] + 2) * s[3] + 1] = v;
        };
        for (auto* p : {gate.w_g.weight, gate.w_x.weight, gate.w_f.weight}) p->value = Tensor<D>(p->value.shape());
        for (std::size_t k = 0; k < 2; ++k) {
            centre(gate.w_g.weight, k, 0, wg[k]);
            centre(gate.w_x.weight, k, 0, wx[k]);
            centre(gate.w_f.weight, 0, k, wf[k]);
            gate.w_g.bias->value[k] = bg[k];
            gate.w_x.bias->value[k] = bx[k];
        }
        gate.w_f.bias->value[0] = bf;
        const auto u = rand_t({1, 1, 3, 5}, 12, -0.5, 0.5), c = rand_t({1, 1, 3, 5}, 13, -0.5, 0.5);
        Tape<D> tape(false);
        const auto out = m.attention_gate(Context<D>{tape, Mode::eval}, Var<D>(u), Var<D>(c), gate);
        for (std::size_t i = 0; i < u.numel(); ++i) {
            double z = bf;
            for (std::size_t k = 0; k < 2; ++k) z += wf[k] * sig(wg[k] * u[i] + bg[k] + wx[k] * c[i] + bx[k]);
            const double g = sig(z);
            EXPECT_NEAR(out.gate.value()[i], g, 1e-12);
            EXPECT_NEAR(out.output.value()[i], g * (target == GateTarget::encoder ? u[i] : c[i]), 1e-12);
        }
    }
}

TEST(OutputMask, IdentitySelectionReproducesDecoderChannels) {
    CarnModel<D> m(mini());
    auto& lin = m.output_linear();
    lin.weight->value = Tensor<D>(lin.weight->value.shape());
    for (std::size_t i = 0; i < 128; ++i) lin.weight->value[i * 128 + i] = 1.0;
    lin.bias->value = Tensor<D>(lin.bias->value.shape());
    const auto dec = rand_t({2, 2, 3, 64}, 14);
    Tape<D> tape(false);
    const auto mask = m.output_mask(Context<D>{tape, Mode::eval}, Var<D>(dec));
    EXPECT_EQ(mask.real.shape(), (Shape{2, 3, 64}));
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t t = 0; t < 3; ++t) {
            for (std::size_t f = 0; f < 64; ++f) {
                const std::size_t o = (b * 3 + t) * 64 + f;
                EXPECT_EQ(mask.real.value()[o], dec[((b * 2 + 0) * 3 + t) * 64 + f]);
                EXPECT_EQ(mask.imag.value()[o], dec[((b * 2 + 1) * 3 + t) * 64 + f]);
            }
        }
    }
}

// Central differences on a sample of entries from every trainable tensor.
// PReLU kinks make wide steps straddle a breakpoint now and then, hence the
// small default step for whole-model checks.
TEST(OutputMask, IdentityInitPassesDecoderChannels) {
    CarnModel<D> m(mini());
    const Tensor<D> before = m.output_linear().weight->value;
    identity_output_init(m, 0.0);
    auto& lin = m.output_linear();
    for (auto& v : lin.bias->value.vec()) v = 0.0;
    const auto dec = rand_t({1, 2, 2, 64}, 40);
    Tape<D> tape(false);
    const auto mask = m.output_mask(Context<D>{tape, Mode::eval}, Var<D>(dec));
    for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t f = 0; f < 64; ++f) {
            EXPECT_EQ(mask.real.value()[t * 64 + f], dec[(0 * 2 + t) * 64 + f]);
            EXPECT_EQ(mask.imag.value()[t * 64 + f], dec[(1 * 2 + t) * 64 + f]);
        }
    }
    CarnModel<D> k(mini());
    identity_output_init(k, 0.1);
    const auto& w = k.output_linear().weight->value;
    EXPECT_DOUBLE_EQ(w[5], 0.1 * before[5]);
    EXPECT_DOUBLE_EQ(w[3 * 128 + 3], 0.1 * before[3 * 128 + 3] + 1.0);
}

double model_grad_error(CarnModel<D>& m, const Tensor<D>& x, std::size_t per_tensor, std::uint64_t seed,
                        double step = 1e-6) {
    auto loss = [&](Tape<D>& tape) {
        const auto mask = run(m, tape, x, Mode::train);
        return add(probe(mask.real, 31), probe(mask.imag, 32));
    };
    for (auto& p : m.parameters()) p->zero_grad();
    {
        Tape<D> tape;
        tape.backward(loss(tape));
    }
    auto value = [&] {
        Tape<D> tape(false);
        return loss(tape).value()[0];
    };
    Rng rng(seed);
    double worst = 0.0;
    for (auto& p : m.parameters()) {
        if (!p->trainable) continue;
        const std::size_t n = p->value.numel();
        for (std::size_t s = 0; s < std::min(per_tensor, n); ++s) {
            const std::size_t i = n <= per_tensor ? s : rng.index(n);
            const double v = p->value[i], h = step * std::max(1.0, std::abs(v));
            p->value[i] = v + h;
            const double up = value();
            p->value[i] = v - h;
            const double down = value();
            p->value[i] = v;
            const double err = relative_error(p->grad[i], (up - down) / (2.0 * h));
            EXPECT_LT(err, 1e-3) << p->name << "[" << i << "]";
            worst = std::max(worst, err);
        }
    }
    return worst;
}

TEST(ModelGradient, MiniatureFullModel) {
    CarnModel<D> m(mini());
    EXPECT_LT(model_grad_error(m, rand_t({2, 2, 4, 64}, 15), 20, 16), 1e-3);
}

TEST(ModelGradient, MiniatureGatedModel) {
    CarnModel<D> m(mini(Variant::gated));
    EXPECT_LT(model_grad_error(m, rand_t({2, 2, 4, 64}, 17), 20, 18), 1e-3);
}

TEST(ModelGradient, InputGradient) {
    CarnModel<D> m(mini());
    const auto r = grad_check(
        [&](Tape<D>& tape, const std::vector<Var<D>>& in) {
            const auto mask = m.forward(Context<D>{tape, Mode::train}, in[0]);
            return add(probe(mask.real, 33), probe(mask.imag, 34));
        },
        {rand_t({1, 2, 3, 64}, 19)});
    EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GatedConv, SaturatedGateBehavesAsPlainOrZero) {
    const Var<D> x(rand_t({1, 3, 4, 8}, 20)), wa(rand_t({2, 3, 3, 3}, 21)), ba(rand_t({2}, 22));
    const Var<D> wb(Tensor<D>(Shape{2, 3, 3, 3}));
    const Stride2d st{1, 2};
    const Padding2d pad{2, 0, 1, 1};
    const auto plain = conv2d(x, wa, ba, st, pad);
    const auto on = gated_conv_block(x, wa, ba, wb, Var<D>(Tensor<D>(Shape{2}, 20.0)), st, pad);
    const auto off = gated_conv_block(x, wa, ba, wb, Var<D>(Tensor<D>(Shape{2}, -20.0)), st, pad);
    for (std::size_t i = 0; i < plain.numel(); ++i) {
        EXPECT_NEAR(on.value()[i], plain.value()[i], 1e-7);
        EXPECT_NEAR(off.value()[i], 0.0, 1e-7);
    }
}

TEST(GatedConv, GradientCheck) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto r = grad_check(
            [](Tape<D>&, const std::vector<Var<D>>& in) {
                return probe(gated_conv_block(in[0], in[1], in[2], in[3], in[4], {1, 2}, {2, 0, 1, 1}), 35);
            },
            {rand_t({1, 2, 4, 6}, seed), rand_t({3, 2, 3, 3}, seed + 10), rand_t({3}, seed + 20),
             rand_t({3, 2, 3, 3}, seed + 30), rand_t({3}, seed + 40)});
        EXPECT_LT(r.max_rel_error, 1e-4);
    }
}

}  // namespace
}  // namespace carn
