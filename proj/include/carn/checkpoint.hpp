#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "carn/model.hpp"
#include "carn/wav.hpp"

namespace carn {

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'C', 'A', 'R', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian):
//   "CARN" | u32 version | u32 n, config text[n] | u32 records |
//   records x { u32 len, name[len] | u32 rank | u32 dims[rank] | f32 data }
// Records follow registry order and include batch-norm running statistics.
template <typename T>
std::string encode_checkpoint(const CarnModel<T>& model) {
    std::string b(kCheckpointMagic, 4);
    detail::put_u32(b, kCheckpointVersion);
    const std::string text = model.config().to_text();
    detail::put_u32(b, static_cast<std::uint32_t>(text.size()));
    b += text;
    detail::put_u32(b, static_cast<std::uint32_t>(model.parameters().size()));
    for (const auto& p : model.parameters()) {
        detail::put_u32(b, static_cast<std::uint32_t>(p->name.size()));
        b += p->name;
        detail::put_u32(b, static_cast<std::uint32_t>(p->value.rank()));
        for (std::size_t d : p->value.shape()) detail::put_u32(b, static_cast<std::uint32_t>(d));
        for (T v : p->value.data()) detail::put_u32(b, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    return b;
}

namespace detail {

class Reader {
   public:
    explicit Reader(const std::string& b) : b_(b) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        const auto v = read_u32(b_, at_);
        at_ += 4;
        return v;
    }

    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        auto s = b_.substr(at_, n);
        at_ += n;
        return s;
    }

    bool done() const { return at_ == b_.size(); }

   private:
    void need(std::size_t n, const char* what) const {
        if (b_.size() - at_ < n) throw CheckpointError(std::string("checkpoint: truncated while reading ") + what);
    }

    const std::string& b_;
    std::size_t at_ = 0;
};

}  // namespace detail

// Rebuilds the model from its stored config, then overwrites every
// parameter, checking names and shapes against the registry.
template <typename T = float>
CarnModel<T> decode_checkpoint(const std::string& b) {
    detail::Reader r(b);
    if (b.size() < 4 || b.compare(0, 4, kCheckpointMagic, 4) != 0) {
        throw CheckpointError("checkpoint: bad magic (not a CARN checkpoint)");
    }
    r.bytes(4, "magic");
    const std::uint32_t version = r.u32("version");
    if (version > kCheckpointVersion) {
        throw CheckpointError("checkpoint: format version " + std::to_string(version) +
                              " is newer than this build supports (" + std::to_string(kCheckpointVersion) +
                              "); upgrade carn to read it");
    }
    if (version == 0) throw CheckpointError("checkpoint: invalid format version 0");
    const std::string text = r.bytes(r.u32("config length"), "config");
    CarnConfig cfg;
    try {
        cfg = CarnConfig::from_text(text);
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint: stored ") + e.what());
    }
    CarnModel<T> model(cfg);
    auto& params = model.parameters();
    const std::uint32_t count = r.u32("record count");
    if (count != params.size()) {
        throw CheckpointError("checkpoint: " + std::to_string(count) + " parameter records, config implies " +
                              std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter<T>& p = params[i];
        const std::string name = r.bytes(r.u32("name length"), "name");
        if (name != p.name) throw CheckpointError("checkpoint: record " + std::to_string(i) + " is '" + name +
                                                  "', expected '" + p.name + "'");
        const std::uint32_t rank = r.u32("rank");
        if (rank > 8) throw CheckpointError("checkpoint: " + name + " has implausible rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = r.u32("dims");
        if (shape != p.value.shape()) {
            throw CheckpointError("checkpoint: " + name + " has shape " + to_string(shape) + ", config implies " +
                                  to_string(p.value.shape()));
        }
        const std::string data = r.bytes(4 * p.value.numel(), "parameter data");
        for (std::size_t k = 0; k < p.value.numel(); ++k) {
            p.value[k] = static_cast<T>(std::bit_cast<float>(detail::read_u32(data, 4 * k)));
        }
    }
    if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after the last record");
    return model;
}

template <typename T>
void save_checkpoint(const std::string& path, const CarnModel<T>& model) {
    detail::spit(path, encode_checkpoint(model));
}

template <typename T = float>
CarnModel<T> load_checkpoint(const std::string& path) {
    std::string bytes;
    try {
        bytes = detail::slurp(path);
    } catch (const std::runtime_error& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    return decode_checkpoint<T>(bytes);
}

}  // namespace carn
