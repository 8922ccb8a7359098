#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "carn/batchnorm.hpp"
#include "carn/conv.hpp"
#include "carn/lstm.hpp"
#include "carn/ops.hpp"

namespace carn {

enum class Variant { plain, gated };

// Which operand the attention gate multiplies: the encoder skip (default)
// or the decoder-side input.
enum class GateTarget { encoder, decoder };

inline constexpr std::size_t kLevels = 6;

class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

struct CarnConfig {
    std::vector<std::size_t> enc_channels{16, 32, 64, 128, 128, 128};
    std::size_t kernel_t = 3;
    std::size_t kernel_f = 3;
    std::size_t stride_t = 1;
    std::size_t stride_f = 2;
    std::size_t input_channels = 2;
    std::size_t lstm_layers = 2;
    std::size_t lstm_hidden = 512;
    Variant variant = Variant::plain;
    GateTarget gate_target = GateTarget::encoder;
    std::size_t freq_bins = 256;
    std::uint64_t seed = 0;

    std::size_t bottleneck_bins() const { return freq_bins >> kLevels; }
    std::size_t lstm_input() const { return enc_channels.empty() ? 0 : enc_channels.back() * bottleneck_bins(); }

    void validate() const {
        if (enc_channels.size() != kLevels) {
            throw ConfigError("config: enc_channels must list exactly 6 entries, got " +
                              std::to_string(enc_channels.size()));
        }
        for (std::size_t c : enc_channels) {
            if (c == 0) throw ConfigError("config: encoder channel counts must be positive");
        }
        if (freq_bins == 0 || freq_bins % (std::size_t{1} << kLevels) != 0) {
            throw ConfigError("config: freq_bins " + std::to_string(freq_bins) + " is not divisible by 64");
        }
        if (stride_t != 1 || stride_f != 2) throw ConfigError("config: stride must be 1x2");
        if (kernel_t == 0 || kernel_f % 2 == 0) throw ConfigError("config: kernel must be positive with odd width");
        if (input_channels == 0) throw ConfigError("config: input_channels must be positive");
        if (lstm_layers == 0) throw ConfigError("config: lstm_layers must be at least 1");
        if (lstm_hidden != lstm_input()) {
            throw ConfigError("config: lstm_hidden " + std::to_string(lstm_hidden) + " must equal enc_channels[5] * " +
                              "freq_bins / 64 = " + std::to_string(lstm_input()));
        }
    }

    // Line-oriented key=value text, used by checkpoints and config files.
    std::string to_text() const {
        std::ostringstream os;
        os << "enc_channels=";
        for (std::size_t i = 0; i < enc_channels.size(); ++i) os << (i ? "," : "") << enc_channels[i];
        os << "\nkernel=" << kernel_t << ',' << kernel_f << "\nstride=" << stride_t << ',' << stride_f
           << "\ninput_channels=" << input_channels << "\nlstm_layers=" << lstm_layers
           << "\nlstm_hidden=" << lstm_hidden << "\nvariant=" << (variant == Variant::plain ? "plain" : "gated")
           << "\ngate_target=" << (gate_target == GateTarget::encoder ? "encoder" : "decoder")
           << "\nfreq_bins=" << freq_bins << "\nseed=" << seed << '\n';
        return os.str();
    }

    // Applies one key; returns false for keys this struct does not own.
    bool set(const std::string& key, const std::string& value) {
        auto list = [&](const std::string& v) {
            std::vector<std::size_t> out;
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
            return out;
        };
        if (key == "enc_channels") {
            enc_channels = list(value);
        } else if (key == "kernel" || key == "stride") {
            auto v = list(value);
            if (v.size() != 2) throw ConfigError("config: " + key + " needs two comma-separated values");
            (key == "kernel" ? kernel_t : stride_t) = v[0];
            (key == "kernel" ? kernel_f : stride_f) = v[1];
        } else if (key == "input_channels") {
            input_channels = parse_size(key, value);
        } else if (key == "lstm_layers") {
            lstm_layers = parse_size(key, value);
        } else if (key == "lstm_hidden") {
            lstm_hidden = parse_size(key, value);
        } else if (key == "freq_bins") {
            freq_bins = parse_size(key, value);
        } else if (key == "seed") {
            seed = parse_size(key, value);
        } else if (key == "variant") {
            if (value == "plain") {
                variant = Variant::plain;
            } else if (value == "gated") {
                variant = Variant::gated;
            } else {
                throw ConfigError("config: variant must be plain or gated, got '" + value + "'");
            }
        } else if (key == "gate_target") {
            if (value == "encoder") {
                gate_target = GateTarget::encoder;
            } else if (value == "decoder") {
                gate_target = GateTarget::decoder;
            } else {
                throw ConfigError("config: gate_target must be encoder or decoder, got '" + value + "'");
            }
        } else {
            return false;
        }
        return true;
    }

    static CarnConfig from_text(const std::string& text) {
        CarnConfig cfg;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("config: malformed line '" + line + "'");
            if (!cfg.set(line.substr(0, eq), line.substr(eq + 1))) {
                throw ConfigError("config: unknown key '" + line.substr(0, eq) + "'");
            }
        }
        cfg.validate();
        return cfg;
    }

    static std::size_t parse_size(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const unsigned long long out = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return static_cast<std::size_t>(out);
        } catch (const std::exception&) {
            throw ConfigError("config: " + key + " expects a non-negative integer, got '" + v + "'");
        }
    }

    bool operator==(const CarnConfig&) const = default;
};

// Owns parameters and buffers in registration order; addresses are stable.
template <typename T>
class ParameterStore {
   public:
    Parameter<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
        index_[name] = items_.size();
        items_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{name, std::move(value), {}, trainable}));
        return *items_.back();
    }

    Parameter<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : items_[it->second].get();
    }

    std::size_t size() const { return items_.size(); }
    Parameter<T>& operator[](std::size_t i) { return *items_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return *items_[i]; }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

   private:
    std::vector<std::unique_ptr<Parameter<T>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct Context {
    Tape<T>& tape;
    Mode mode;

    Var<T> operator()(Parameter<T>* p) const { return tape.param(*p); }
};

template <typename T>
struct ConvUnit {
    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;
};

template <typename T>
struct BatchNormUnit {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    Parameter<T>* running_mean = nullptr;
    Parameter<T>* running_var = nullptr;
};

// Encoder (strided conv) or decoder (transposed conv) stage.
template <typename T>
struct ConvBlock {
    ConvUnit<T> conv;
    ConvUnit<T> gate;  // only for the gated variant
    BatchNormUnit<T> bn;
    Parameter<T>* prelu = nullptr;
};

template <typename T>
struct AttentionGate {
    ConvUnit<T> w_g;  // C -> 2C, applied to the encoder skip
    ConvUnit<T> w_x;  // C -> 2C, applied to the decoder-side input
    ConvUnit<T> w_f;  // 2C -> C
};

template <typename T>
struct LstmLayerParams {
    Parameter<T>* w_ih = nullptr;
    Parameter<T>* w_hh = nullptr;
    Parameter<T>* bias = nullptr;
};

template <typename T>
struct EncoderOutput {
    Var<T> bottleneck;
    std::vector<Var<T>> skips;  // U_1..U_6; skips.back() is the bottleneck
};

template <typename T>
struct GateOutput {
    Var<T> output;  // B_i
    Var<T> gate;    // sigmoid(W_f * A_i), values in (0, 1)
};

template <typename T>
struct ForwardTrace {
    std::vector<Shape> encoder_shapes;
    std::vector<Shape> decoder_shapes;  // outputs in execution order (deepest first)
    std::vector<Var<T>> gates;          // attention gate maps, deepest first
};

template <typename T>
struct MaskVars {
    Var<T> real;  // [B, T, F]
    Var<T> imag;  // [B, T, F]
};

namespace detail {

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_tensor<T>(std::move(shape), rng, -bound, bound);
}

}  // namespace detail

template <typename T>
class CarnModel {
   public:
    explicit CarnModel(CarnConfig config) : config_(std::move(config)) {
        config_.validate();
        Rng rng(config_.seed);
        const auto& ch = config_.enc_channels;
        std::size_t in_ch = config_.input_channels;
        for (std::size_t i = 0; i < kLevels; ++i) {
            encoder_.push_back(make_block("encoder." + std::to_string(i), in_ch, ch[i], false, rng));
            in_ch = ch[i];
        }
        const std::size_t width = config_.lstm_input();
        for (std::size_t l = 0; l < config_.lstm_layers; ++l) {
            const std::string base = "bridge.lstm." + std::to_string(l);
            const std::size_t h = config_.lstm_hidden, d = l == 0 ? width : h;
            LstmLayerParams<T> layer;
            layer.w_ih = &params_.add(base + ".w_ih", detail::fan_in_uniform<T>({4 * h, d}, h, rng));
            layer.w_hh = &params_.add(base + ".w_hh", detail::fan_in_uniform<T>({4 * h, h}, h, rng));
            Tensor<T> b(Shape{4 * h});
            for (std::size_t j = h; j < 2 * h; ++j) b[j] = T{1};  // forget gate
            layer.bias = &params_.add(base + ".bias", std::move(b));
            lstm_.push_back(layer);
        }
        attention_.resize(kLevels);
        decoder_.resize(kLevels);
        for (std::size_t i = kLevels; i-- > 0;) {
            const std::string base = "attention." + std::to_string(i);
            attention_[i].w_g = make_conv(base + ".w_g", ch[i], 2 * ch[i], rng);
            attention_[i].w_x = make_conv(base + ".w_x", ch[i], 2 * ch[i], rng);
            attention_[i].w_f = make_conv(base + ".w_f", 2 * ch[i], ch[i], rng);
            const std::size_t out = i == 0 ? config_.input_channels : ch[i - 1];
            decoder_[i] = make_block("decoder." + std::to_string(i), 2 * ch[i], out, true, rng);
        }
        const std::size_t flat = config_.input_channels * config_.freq_bins;
        const std::size_t mask_width = 2 * config_.freq_bins;
        output_.weight = &params_.add("output.weight", detail::fan_in_uniform<T>({mask_width, flat}, flat, rng));
        output_.bias = &params_.add("output.bias", Tensor<T>(Shape{mask_width}));
    }

    CarnModel(const CarnModel&) = delete;
    CarnModel& operator=(const CarnModel&) = delete;
    CarnModel(CarnModel&&) noexcept = default;
    CarnModel& operator=(CarnModel&&) noexcept = default;

    const CarnConfig& config() const { return config_; }
    ParameterStore<T>& parameters() { return params_; }
    const ParameterStore<T>& parameters() const { return params_; }

    std::size_t count_parameters() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            if (p->trainable) n += p->value.numel();
        }
        return n;
    }

    const AttentionGate<T>& attention(std::size_t level) const { return attention_.at(level); }
    AttentionGate<T>& attention(std::size_t level) { return attention_.at(level); }
    ConvUnit<T>& output_linear() { return output_; }
    ConvBlock<T>& encoder_block(std::size_t level) { return encoder_.at(level); }
    ConvBlock<T>& decoder_block(std::size_t level) { return decoder_.at(level); }

    // x: [B, input_channels, T, freq_bins].
    EncoderOutput<T> encoder_forward(const Context<T>& ctx, const Var<T>& x, ForwardTrace<T>* trace = nullptr) {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[1] != config_.input_channels || s[3] != config_.freq_bins) {
            throw ShapeError("carn: input must be [B," + std::to_string(config_.input_channels) + ",T," +
                             std::to_string(config_.freq_bins) + "], got " + to_string(s));
        }
        EncoderOutput<T> out;
        Var<T> h = x;
        for (auto& block : encoder_) {
            h = block_forward(ctx, block, h, false);
            out.skips.push_back(h);
            if (trace) trace->encoder_shapes.push_back(h.shape());
        }
        out.bottleneck = h;
        return out;
    }

    // [B, C, T, F_b] -> sequence [B, T, C*F_b] -> LSTM stack -> back.
    Var<T> bridge_forward(const Context<T>& ctx, const Var<T>& bottleneck) {
        const Shape s = bottleneck.shape();
        if (s.size() != 4 || s[1] * s[3] != config_.lstm_input()) {
            throw ShapeError("carn: bridge input " + to_string(s) + " does not flatten to the LSTM width " +
                             std::to_string(config_.lstm_input()));
        }
        const std::size_t batch = s[0], ch = s[1], steps = s[2], bins = s[3];
        auto seq = reshape(permute(bottleneck, {0, 2, 1, 3}), {batch, steps, ch * bins});
        std::vector<LstmLayerWeights<T>> layers;
        for (auto& l : lstm_) layers.push_back({ctx(l.w_ih), ctx(l.w_hh), ctx(l.bias)});
        auto y = lstm_forward(seq, layers).output;
        return permute(reshape(y, {batch, steps, ch, bins}), {0, 2, 1, 3});
    }

    // A = sigmoid(W_g*U + W_x*C); G = sigmoid(W_f*A); B = G (.) U (or C).
    GateOutput<T> attention_gate(const Context<T>& ctx, const Var<T>& skip, const Var<T>& current,
                                 const AttentionGate<T>& gate) const {
        if (skip.shape() != current.shape()) {
            throw ShapeError("attention gate: skip " + to_string(skip.shape()) + " and decoder input " +
                             to_string(current.shape()) + " differ");
        }
        auto a = sigmoid(add(same_conv(ctx, gate.w_g, skip), same_conv(ctx, gate.w_x, current)));
        auto g = sigmoid(same_conv(ctx, gate.w_f, a));
        const Var<T>& target = config_.gate_target == GateTarget::encoder ? skip : current;
        return {mul(g, target), g};
    }

    Var<T> decoder_forward(const Context<T>& ctx, const Var<T>& bridge_out, const std::vector<Var<T>>& skips,
                           ForwardTrace<T>* trace = nullptr) {
        if (skips.size() != kLevels) throw ShapeError("carn: decoder needs 6 skip connections");
        Var<T> current = bridge_out;
        for (std::size_t i = kLevels; i-- > 0;) {
            auto gated = attention_gate(ctx, skips[i], current, attention_[i]);
            if (trace) trace->gates.push_back(gated.gate);
            auto joined = concat<T>({gated.output, current}, 1);
            current = block_forward(ctx, decoder_[i], joined, true);
            if (trace) trace->decoder_shapes.push_back(current.shape());
        }
        return current;
    }

    // Per-frame affine map of the flattened (channel, frequency) features to
    // the two mask planes.
    MaskVars<T> output_mask(const Context<T>& ctx, const Var<T>& decoded) {
        const Shape s = decoded.shape();
        if (s.size() != 4 || s[1] != config_.input_channels || s[3] != config_.freq_bins) {
            throw ShapeError("carn: decoder output " + to_string(s) + " has the wrong layout");
        }
        const std::size_t batch = s[0], steps = s[2], bins = s[3];
        auto flat = reshape(permute(decoded, {0, 2, 1, 3}), {batch, steps, s[1] * bins});
        auto m = linear(flat, ctx(output_.weight), ctx(output_.bias));
        return {slice(m, 2, 0, bins), slice(m, 2, bins, bins)};
    }

    MaskVars<T> forward(const Context<T>& ctx, const Var<T>& x, ForwardTrace<T>* trace = nullptr) {
        auto enc = encoder_forward(ctx, x, trace);
        auto bridged = bridge_forward(ctx, enc.bottleneck);
        auto decoded = decoder_forward(ctx, bridged, enc.skips, trace);
        return output_mask(ctx, decoded);
    }

    // Conv (or gated pair) -> batch-norm -> PReLU.
    Var<T> block_forward(const Context<T>& ctx, const ConvBlock<T>& block, const Var<T>& x, bool transposed) const {
        Var<T> h;
        auto conv = [&](const ConvUnit<T>& u) {
            return transposed ? conv_transpose2d(x, ctx(u.weight), ctx(u.bias), stride(), decoder_crop(),
                                                 OutputPadding2d{0, config_.stride_f - 1})
                              : conv2d(x, ctx(u.weight), ctx(u.bias), stride(), encoder_padding());
        };
        if (config_.variant == Variant::gated) {
            h = mul(conv(block.conv), sigmoid(conv(block.gate)));
        } else {
            h = conv(block.conv);
        }
        h = batchnorm2d(h, ctx(block.bn.gamma), ctx(block.bn.beta),
                        BatchNormStats<T>{&block.bn.running_mean->value, &block.bn.running_var->value}, ctx.mode);
        return prelu(h, ctx(block.prelu));
    }

    Stride2d stride() const { return {config_.stride_t, config_.stride_f}; }
    // Causal in time (all padding on the past side), symmetric in frequency.
    Padding2d encoder_padding() const {
        return {config_.kernel_t - 1, 0, (config_.kernel_f - 1) / 2, (config_.kernel_f - 1) / 2};
    }
    Padding2d decoder_crop() const {
        return {0, config_.kernel_t - 1, (config_.kernel_f - 1) / 2, (config_.kernel_f - 1) / 2};
    }

   private:
    Var<T> same_conv(const Context<T>& ctx, const ConvUnit<T>& u, const Var<T>& x) const {
        return conv2d(x, ctx(u.weight), ctx(u.bias), {1, 1}, encoder_padding());
    }

    ConvUnit<T> make_conv(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
        const std::size_t kt = config_.kernel_t, kf = config_.kernel_f;
        ConvUnit<T> u;
        u.weight = &params_.add(name + ".weight", detail::fan_in_uniform<T>({out, in, kt, kf}, in * kt * kf, rng));
        u.bias = &params_.add(name + ".bias", Tensor<T>(Shape{out}));
        return u;
    }

    ConvUnit<T> make_transposed(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
        const std::size_t kt = config_.kernel_t, kf = config_.kernel_f;
        ConvUnit<T> u;
        u.weight = &params_.add(name + ".weight", detail::fan_in_uniform<T>({in, out, kt, kf}, in * kt * kf, rng));
        u.bias = &params_.add(name + ".bias", Tensor<T>(Shape{out}));
        return u;
    }

    ConvBlock<T> make_block(const std::string& base, std::size_t in, std::size_t out, bool transposed, Rng& rng) {
        ConvBlock<T> b;
        auto make = [&](const std::string& n) {
            return transposed ? make_transposed(n, in, out, rng) : make_conv(n, in, out, rng);
        };
        b.conv = make(base + ".conv");
        if (config_.variant == Variant::gated) b.gate = make(base + ".gate_conv");
        b.bn.gamma = &params_.add(base + ".bn.weight", Tensor<T>(Shape{out}, T{1}));
        b.bn.beta = &params_.add(base + ".bn.bias", Tensor<T>(Shape{out}));
        b.bn.running_mean = &params_.add(base + ".bn.running_mean", Tensor<T>(Shape{out}), false);
        b.bn.running_var = &params_.add(base + ".bn.running_var", Tensor<T>(Shape{out}, T{1}), false);
        b.prelu = &params_.add(base + ".prelu.weight", Tensor<T>(Shape{out}, T(0.25)));
        return b;
    }

    CarnConfig config_;
    ParameterStore<T> params_;
    std::vector<ConvBlock<T>> encoder_;
    std::vector<LstmLayerParams<T>> lstm_;
    std::vector<AttentionGate<T>> attention_;
    std::vector<ConvBlock<T>> decoder_;
    ConvUnit<T> output_;
};

// Alternative start for the output layer: the fan-in random weights shrunk by
// `keep`, plus a unit diagonal so decoder channel 0 feeds the real mask and
// channel 1 the imaginary mask bin for bin. With a random dense start the
// mask first settles on a fixed per-frequency gain and picks up the input
// only very slowly.
template <typename T>
void identity_output_init(CarnModel<T>& model, double keep = 0.1) {
    auto& w = model.output_linear().weight->value;
    if (w.dim(0) != w.dim(1)) {
        throw ConfigError("identity_output_init: needs input_channels == 2, output weight is " + to_string(w.shape()));
    }
    for (auto& v : w.vec()) v = static_cast<T>(keep * static_cast<double>(v));
    for (std::size_t i = 0; i < w.dim(0); ++i) w[i * w.dim(1) + i] += T{1};
}

// Stand-alone GLU convolution: conv_a(x) (.) sigmoid(conv_b(x)).
template <typename T>
Var<T> gated_conv_block(const Var<T>& x, const Var<T>& w_a, const Var<T>& b_a, const Var<T>& w_b, const Var<T>& b_b,
                        Stride2d stride, Padding2d pad) {
    return mul(conv2d(x, w_a, b_a, stride, pad), sigmoid(conv2d(x, w_b, b_b, stride, pad)));
}

}  // namespace carn
