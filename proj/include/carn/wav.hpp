#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "carn/dsp.hpp"

namespace carn {

// Malformed or unsupported audio file.
class WavError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kPcmScale = 32767.0;

namespace detail {

inline std::uint32_t read_u32(const std::string& b, std::size_t at) {
    return std::uint32_t(std::uint8_t(b[at])) | std::uint32_t(std::uint8_t(b[at + 1])) << 8 |
           std::uint32_t(std::uint8_t(b[at + 2])) << 16 | std::uint32_t(std::uint8_t(b[at + 3])) << 24;
}

inline std::uint16_t read_u16(const std::string& b, std::size_t at) {
    return std::uint16_t(std::uint8_t(b[at]) | std::uint8_t(b[at + 1]) << 8);
}

inline void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xFF));
}

inline void put_u16(std::string& b, std::uint16_t v) {
    b.push_back(char(v & 0xFF));
    b.push_back(char(v >> 8));
}

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace detail

// Round half away from zero, clamp to the int16 range.
inline std::int16_t pcm_round(double scaled) {
    return static_cast<std::int16_t>(std::clamp(std::round(scaled), -32768.0, 32767.0));
}

inline std::int16_t to_pcm16(double v) {
    if (!std::isfinite(v)) throw WavError("wav: refusing to encode a non-finite sample");
    return pcm_round(v * kPcmScale);
}

inline double from_pcm16(std::int16_t v) { return static_cast<double>(v) / kPcmScale; }

// Parses a RIFF/WAVE image. Only 16-bit PCM mono at 16 kHz is accepted.
inline dsp::Waveform<float> decode_wav(const std::string& b) {
    if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0) {
        throw WavError("wav: missing RIFF/WAVE header");
    }
    bool have_fmt = false;
    std::size_t at = 12;
    while (at + 8 <= b.size()) {
        const std::string id = b.substr(at, 4);
        const std::uint32_t size = detail::read_u32(b, at + 4);
        const std::size_t body = at + 8;
        if (id == "fmt ") {
            if (size < 16 || body + 16 > b.size()) throw WavError("wav: truncated fmt chunk");
            const std::uint16_t format = detail::read_u16(b, body);
            const std::uint16_t channels = detail::read_u16(b, body + 2);
            const std::uint32_t rate = detail::read_u32(b, body + 4);
            const std::uint16_t bits = detail::read_u16(b, body + 14);
            if (format != 1) throw WavError("wav: audio format " + std::to_string(format) + ", expected 1 (PCM)");
            if (channels != 1) throw WavError("wav: channels " + std::to_string(channels) + ", expected 1 (mono)");
            if (rate != dsp::kSampleRate) {
                throw WavError("wav: sample rate " + std::to_string(rate) + " Hz, expected 16000 Hz");
            }
            if (bits != 16) throw WavError("wav: bits per sample " + std::to_string(bits) + ", expected 16");
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw WavError("wav: data chunk before fmt chunk");
            if (body + size > b.size()) throw WavError("wav: data chunk is truncated");
            if (size % 2 != 0) throw WavError("wav: data chunk has an odd byte count");
            dsp::Waveform<float> w;
            w.samples.resize(size / 2);
            for (std::size_t i = 0; i < w.samples.size(); ++i) {
                w.samples[i] = static_cast<float>(from_pcm16(static_cast<std::int16_t>(detail::read_u16(b, body + 2 * i))));
            }
            return w;
        }
        at = body + size + (size & 1);
    }
    throw WavError(have_fmt ? "wav: no data chunk" : "wav: no fmt chunk");
}

template <typename T>
std::string encode_wav(const dsp::Waveform<T>& w) {
    dsp::require_pipeline_rate(w.sample_rate);
    const std::uint64_t data = 2 * static_cast<std::uint64_t>(w.size());
    if (data + 36 > 0xFFFFFFFFULL) throw WavError("wav: too many samples for a RIFF file");
    std::string b;
    b.reserve(44 + data);
    b += "RIFF";
    detail::put_u32(b, static_cast<std::uint32_t>(36 + data));
    b += "WAVEfmt ";
    detail::put_u32(b, 16);
    detail::put_u16(b, 1);
    detail::put_u16(b, 1);
    detail::put_u32(b, dsp::kSampleRate);
    detail::put_u32(b, dsp::kSampleRate * 2);
    detail::put_u16(b, 2);
    detail::put_u16(b, 16);
    b += "data";
    detail::put_u32(b, static_cast<std::uint32_t>(data));
    for (T v : w.samples) detail::put_u16(b, static_cast<std::uint16_t>(to_pcm16(static_cast<double>(v))));
    return b;
}

inline dsp::Waveform<float> read_wav(const std::string& path) { return decode_wav(detail::slurp(path)); }

template <typename T>
void write_wav(const std::string& path, const dsp::Waveform<T>& w) {
    detail::spit(path, encode_wav(w));
}

}  // namespace carn
