#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "carn/cli.hpp"

namespace carn {
namespace {

namespace fs = std::filesystem;

// Hand-built RIFF image with arbitrary format fields.
std::string make_wav(std::uint16_t format, std::uint16_t channels, std::uint32_t rate, std::uint16_t bits,
                     const std::vector<std::int16_t>& samples, bool extra_chunk = false) {
    std::string b = "RIFF";
    detail::put_u32(b, 0);
    b += "WAVE";
    if (extra_chunk) {
        b += "LIST";
        detail::put_u32(b, 3);
        b += "abc";
        b.push_back('\0');  // pad byte
    }
    b += "fmt ";
    detail::put_u32(b, 16);
    detail::put_u16(b, format);
    detail::put_u16(b, channels);
    detail::put_u32(b, rate);
    detail::put_u32(b, rate * channels * bits / 8);
    detail::put_u16(b, static_cast<std::uint16_t>(channels * bits / 8));
    detail::put_u16(b, bits);
    b += "data";
    detail::put_u32(b, static_cast<std::uint32_t>(2 * samples.size()));
    for (auto s : samples) detail::put_u16(b, static_cast<std::uint16_t>(s));
    return b;
}

class TempDir : public ::testing::Test {
   protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() /
               (std::string("carn_") + info->test_suite_name() + "_" + info->name() + "_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    fs::path dir_;
};

TEST(Pcm, RoundingAndClamping) {
    EXPECT_EQ(pcm_round(2.5), 3);
    EXPECT_EQ(pcm_round(-2.5), -3);
    EXPECT_EQ(pcm_round(0.5), 1);
    EXPECT_EQ(pcm_round(0.49), 0);
    EXPECT_EQ(to_pcm16(1.0), 32767);
    EXPECT_EQ(to_pcm16(-1.0), -32767);
    EXPECT_EQ(to_pcm16(2.0), 32767);
    EXPECT_EQ(to_pcm16(-2.0), -32768);
    EXPECT_THROW(to_pcm16(std::nan("")), WavError);
    EXPECT_THROW(to_pcm16(INFINITY), WavError);
}

TEST(Wav, RoundTripIsExactOnTheGrid) {
    dsp::Waveform<float> w;
    for (int k = -32767; k <= 32767; k += 97) w.samples.push_back(static_cast<float>(k / 32767.0));
    const auto back = decode_wav(encode_wav(w));
    ASSERT_EQ(back.size(), w.size());
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(to_pcm16(back.samples[i]), to_pcm16(w.samples[i]));
    EXPECT_EQ(encode_wav(back), encode_wav(w));
}

TEST(Wav, QuantisationErrorBounded) {
    Rng rng(1);
    dsp::Waveform<double> w;
    for (int i = 0; i < 1000; ++i) w.samples.push_back(rng.uniform(-1.0, 1.0));
    const auto back = decode_wav(encode_wav(w));
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_LE(std::abs(back.samples[i] - w.samples[i]), 0.5 / 32767 + 1e-7);
}

TEST(Wav, RejectionMatrixNamesTheField) {
    const std::vector<std::int16_t> s{1, 2, 3};
    auto message = [](const std::string& bytes) {
        try {
            decode_wav(bytes);
        } catch (const WavError& e) {
            return std::string(e.what());
        }
        return std::string("accepted");
    };
    EXPECT_NE(message(make_wav(1, 1, 44100, 16, s)).find("sample rate"), std::string::npos);
    EXPECT_NE(message(make_wav(1, 1, 8000, 16, s)).find("sample rate"), std::string::npos);
    EXPECT_NE(message(make_wav(1, 2, 16000, 16, s)).find("channels"), std::string::npos);
    EXPECT_NE(message(make_wav(1, 1, 16000, 24, s)).find("bits per sample"), std::string::npos);
    EXPECT_NE(message(make_wav(1, 1, 16000, 8, s)).find("bits per sample"), std::string::npos);
    EXPECT_NE(message(make_wav(3, 1, 16000, 32, s)).find("audio format"), std::string::npos);
    EXPECT_NE(message("not a wav file at all").find("RIFF"), std::string::npos);
    std::string cut = make_wav(1, 1, 16000, 16, s);
    cut.resize(cut.size() - 2);
    EXPECT_NE(message(cut).find("truncated"), std::string::npos);
    EXPECT_EQ(message(make_wav(1, 1, 16000, 16, s)), "accepted");
}

TEST(Wav, SkipsUnknownChunks) {
    const auto w = decode_wav(make_wav(1, 1, 16000, 16, {100, -200}, true));
    ASSERT_EQ(w.size(), 2u);
    EXPECT_FLOAT_EQ(w.samples[1], -200.0f / 32767.0f);
}

CarnConfig small_config() {
    CarnConfig c;
    c.enc_channels = {2, 4, 4, 4, 4, 4};
    c.lstm_hidden = 16;
    c.seed = 4;
    return c;
}

CarnModel<float> perturbed(CarnConfig cfg) {
    CarnModel<float> m(cfg);
    Rng rng(99);
    for (auto& p : m.parameters()) {
        for (auto& v : p->value.vec()) v += static_cast<float>(rng.uniform(0.0, 0.5));
    }
    return m;
}

TEST(Checkpoint, SaveLoadSaveIsBitIdentical) {
    for (Variant v : {Variant::plain, Variant::gated}) {
        auto cfg = small_config();
        cfg.variant = v;
        const auto m = perturbed(cfg);
        const std::string a = encode_checkpoint(m);
        const auto loaded = decode_checkpoint(a);
        EXPECT_EQ(loaded.config(), m.config());
        for (std::size_t i = 0; i < m.parameters().size(); ++i) {
            EXPECT_EQ(loaded.parameters()[i].value, m.parameters()[i].value);
        }
        EXPECT_EQ(encode_checkpoint(loaded), a);
    }
}

TEST(Checkpoint, Rejections) {
    const std::string good = encode_checkpoint(CarnModel<float>(small_config()));
    auto fails_with = [](const std::string& bytes, const std::string& needle) {
        try {
            decode_checkpoint(bytes);
        } catch (const CheckpointError& e) {
            return std::string(e.what()).find(needle) != std::string::npos;
        }
        return false;
    };
    std::string bad = good;
    bad[0] = 'X';
    EXPECT_TRUE(fails_with(bad, "magic"));
    std::string future = good;
    future[4] = 7;
    EXPECT_TRUE(fails_with(future, "upgrade"));
    EXPECT_TRUE(fails_with(good.substr(0, good.size() - 3), "truncated"));
    EXPECT_TRUE(fails_with(good + "x", "trailing"));
    // Same layout, different config text: the shapes no longer match.
    std::string other = good;
    const auto at = other.find("enc_channels=2,4");
    other.replace(at, 16, "enc_channels=3,4");
    EXPECT_TRUE(fails_with(other, "shape"));
}

struct CliResult {
    int code;
    std::string out, err;
};

CliResult cli_run(std::vector<std::string> args) {
    args.insert(args.begin(), "carn");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::string& p) { return detail::slurp(p); }

class Cli : public TempDir {
   protected:
    std::string tiny_config() {
        const std::string p = path("tiny.cfg");
        std::ofstream(p) << "# tiny model for fast tests\n"
                         << "enc_channels=2,2,2,2,2,2\nlstm_hidden=8\n"
                         << "batch=1\nclip_samples=2048\neval_clips=1\neval_interval=10\nwarmup_steps=5\n"
                         << "early_stopping=false\n";
        return p;
    }

    dsp::Waveform<float> tone(std::size_t n, double amp = 0.3) {
        dsp::Waveform<float> w;
        for (std::size_t i = 0; i < n; ++i) w.samples.push_back(static_cast<float>(amp * std::sin(0.05 * i)));
        return w;
    }
};

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(cli_run({}).code, 1);
    EXPECT_EQ(cli_run({"frobnicate"}).code, 1);
    EXPECT_EQ(cli_run({"enhance", "--model", "x"}).code, 1);
    EXPECT_EQ(cli_run({"train", "--out", path("m.carn"), "--variant", "fancy"}).code, 1);
    EXPECT_EQ(cli_run({"--help"}).code, 0);
}

TEST_F(Cli, TrainIsDeterministic) {
    const auto cfg = tiny_config();
    auto a = cli_run({"train", "--config", cfg, "--out", path("a.carn"), "--steps", "50", "--seed", "7"});
    auto b = cli_run({"train", "--config", cfg, "--out", path("b.carn"), "--steps", "50", "--seed", "7"});
    ASSERT_EQ(a.code, 0) << a.err;
    ASSERT_EQ(b.code, 0) << b.err;
    const auto ta = slurp(path("a.carn.loss.csv")), tb = slurp(path("b.carn.loss.csv"));
    EXPECT_EQ(ta, tb);
    EXPECT_EQ(ta.substr(0, ta.find('\n')), "step,lr,train_loss,eval_loss");
    EXPECT_EQ(std::count(ta.begin(), ta.end(), '\n'), 51);
    EXPECT_EQ(slurp(path("a.carn")), slurp(path("b.carn")));
}

TEST_F(Cli, TrainRecordsVariantAndRejectsMissingDir) {
    const auto cfg = tiny_config();
    auto r = cli_run({"train", "--config", cfg, "--out", path("g.carn"), "--steps", "2", "--variant", "gated"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto info = cli_run({"info", "--model", path("g.carn")});
    EXPECT_EQ(info.code, 0);
    EXPECT_NE(info.out.find("variant=gated"), std::string::npos);
    EXPECT_NE(info.out.find("gate_conv"), std::string::npos);

    r = cli_run({"train", "--config", cfg, "--out", path("missing/dir/m.carn"), "--steps", "2"});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("does not exist"), std::string::npos);

    std::ofstream(path("bad.cfg")) << "lstm_hidden=7\n";
    EXPECT_NE(cli_run({"train", "--config", path("bad.cfg"), "--out", path("x.carn")}).code, 0);
}

// Output layer set to emit mask 1 + 0j regardless of features.
void write_identity_model(const std::string& p) {
    CarnModel<float> m(small_config());
    auto& out = m.output_linear();
    out.weight->value = Tensor<float>(out.weight->value.shape());
    out.bias->value = Tensor<float>(out.bias->value.shape());
    for (std::size_t k = 0; k < m.config().freq_bins; ++k) out.bias->value[k] = 1.0f;
    save_checkpoint(p, m);
}

TEST_F(Cli, EnhanceIdentityStubPreservesAudio) {
    write_identity_model(path("id.carn"));
    const auto in = tone(21920);  // 1.37 s
    write_wav(path("in.wav"), in);
    const auto r = cli_run({"enhance", "--model", path("id.carn"), "--in", path("in.wav"), "--out", path("out.wav")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto src = read_wav(path("in.wav")), out = read_wav(path("out.wav"));
    ASSERT_EQ(out.size(), src.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        num += std::pow(double(out.samples[i]) - src.samples[i], 2);
        den += double(src.samples[i]) * src.samples[i];
    }
    EXPECT_LT(std::sqrt(num / den), 1e-3);
}

TEST_F(Cli, EnhanceIsDeterministicAndFinite) {
    save_checkpoint(path("m.carn"), perturbed(small_config()));
    write_wav(path("in.wav"), tone(9000));
    ASSERT_EQ(cli_run({"enhance", "--model", path("m.carn"), "--in", path("in.wav"), "--out", path("a.wav")}).code, 0);
    ASSERT_EQ(cli_run({"enhance", "--model", path("m.carn"), "--in", path("in.wav"), "--out", path("b.wav")}).code, 0);
    EXPECT_EQ(slurp(path("a.wav")), slurp(path("b.wav")));

    write_wav(path("silent.wav"), tone(5000, 0.0));
    ASSERT_EQ(cli_run({"enhance", "--model", path("m.carn"), "--in", path("silent.wav"), "--out", path("s.wav")}).code,
              0);
    for (float v : read_wav(path("s.wav")).samples) EXPECT_LE(std::abs(v), 1e-3f);
}

TEST_F(Cli, EnhanceErrorCodes) {
    write_identity_model(path("id.carn"));
    std::ofstream(path("rate.wav"), std::ios::binary) << make_wav(1, 1, 44100, 16, {1, 2, 3});
    auto r = cli_run({"enhance", "--model", path("id.carn"), "--in", path("rate.wav"), "--out", path("o.wav")});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("sample rate"), std::string::npos);

    write_wav(path("long.wav"), tone(61 * 16000));
    r = cli_run({"enhance", "--model", path("id.carn"), "--in", path("long.wav"), "--out", path("o.wav")});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("60 s"), std::string::npos);

    write_wav(path("ok.wav"), tone(1000));
    std::ofstream(path("junk.carn")) << "JUNKJUNK";
    r = cli_run({"enhance", "--model", path("junk.carn"), "--in", path("ok.wav"), "--out", path("o.wav")});
    EXPECT_EQ(r.code, 3);

    CarnModel<float> nan_model(small_config());
    nan_model.output_linear().bias->value[0] = std::nanf("");
    save_checkpoint(path("nan.carn"), nan_model);
    r = cli_run({"enhance", "--model", path("nan.carn"), "--in", path("ok.wav"), "--out", path("o.wav")});
    EXPECT_EQ(r.code, 3);
    EXPECT_FALSE(fs::exists(path("o.wav")));
}

TEST_F(Cli, EvalReport) {
    write_wav(path("a.wav"), tone(8000));
    auto r = cli_run({"eval", "--ref", path("a.wav"), "--deg", path("a.wav")});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream lines(r.out);
    std::string header, row;
    std::getline(lines, header);
    std::getline(lines, row);
    EXPECT_EQ(header, "si_sdr_db,seg_snr_db,lsd");
    EXPECT_EQ(row.substr(0, row.find(',')), "100");

    write_wav(path("b.wav"), tone(8001));
    EXPECT_NE(cli_run({"eval", "--ref", path("a.wav"), "--deg", path("b.wav")}).code, 0);
}

TEST_F(Cli, InfoReportsFrozenCountAndRejectsBadFiles) {
    save_checkpoint(path("default.carn"), CarnModel<float>(CarnConfig{}));
    auto r = cli_run({"info", "--model", path("default.carn")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("parameters=8587416"), std::string::npos);
    EXPECT_NE(r.out.find("encoder.0.conv.weight [16,2,3,3]"), std::string::npos);

    std::string bytes = slurp(path("default.carn"));
    bytes[1] = 'Z';
    std::ofstream(path("magic.carn"), std::ios::binary) << bytes;
    r = cli_run({"info", "--model", path("magic.carn")});
    EXPECT_EQ(r.code, 3);

    bytes = encode_checkpoint(CarnModel<float>(small_config()));
    bytes[4] = 9;
    std::ofstream(path("future.carn"), std::ios::binary) << bytes;
    r = cli_run({"info", "--model", path("future.carn")});
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("upgrade"), std::string::npos);
}

}  // namespace
}  // namespace carn
