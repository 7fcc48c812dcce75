#pragma once

// Parameter checkpoints. Binary layout, all integers and floats
// little-endian:
//   magic "FXCH", u32 version (currently 1), then one record per entry:
//   u16 name length, name bytes, u8 role, u8 rank, u32 dims[rank],
//   f64 values[product(dims)].
// Records run to end of file; a truncated tail is a format error.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "flexchill/errors.hpp"
#include "flexchill/model.hpp"
#include "flexchill/params.hpp"

namespace flexchill {

namespace detail {

inline void put_bytes(std::string& out, std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    put_bytes(out, bits, 8);
}

class ByteReader {
public:
    ByteReader(std::string bytes, std::string origin)
        : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

    bool at_end() const { return pos_ == bytes_.size(); }

    std::uint64_t read_uint(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    double read_f64() {
        const std::uint64_t bits = read_uint(8);
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string read_string(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n) {
        if (bytes_.size() - pos_ < n)
            throw format_error("checkpoint: " + origin_ + " is truncated at byte " +
                               std::to_string(pos_));
    }
    std::string bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
    std::string out;
    out += "FXCH";
    detail::put_bytes(out, kCheckpointVersion, 4);
    for (const auto& e : params) {
        if (e.name.size() > 0xFFFF)
            throw std::invalid_argument("checkpoint: entry name too long: " + e.name);
        detail::put_bytes(out, e.name.size(), 2);
        out += e.name;
        out.push_back(static_cast<char>(e.role));
        const auto& shape = e.tensor.shape();
        if (shape.size() > 0xFF) throw std::invalid_argument("checkpoint: rank too large");
        out.push_back(static_cast<char>(shape.size()));
        for (std::size_t d : shape) detail::put_bytes(out, d, 4);
        for (double v : e.tensor.data()) detail::put_f64(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw format_error("checkpoint: cannot open " + path.string() + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw format_error("checkpoint: failed writing " + path.string());
}

inline ParamSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw format_error("checkpoint: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::ByteReader r(std::move(bytes), path.string());

    if (r.read_string(4) != "FXCH")
        throw format_error("checkpoint: " + path.string() + " has a bad magic header");
    const std::uint32_t version = static_cast<std::uint32_t>(r.read_uint(4));
    if (version != kCheckpointVersion)
        throw format_error("checkpoint: " + path.string() + " has unsupported version " +
                           std::to_string(version));

    ParamSet out;
    while (!r.at_end()) {
        const std::size_t name_len = static_cast<std::size_t>(r.read_uint(2));
        const std::string name = r.read_string(name_len);
        const std::uint64_t role_raw = r.read_uint(1);
        if (role_raw > static_cast<std::uint64_t>(ParamRole::bias))
            throw format_error("checkpoint: " + path.string() + " entry '" + name +
                               "' has invalid role " + std::to_string(role_raw));
        const auto role = static_cast<ParamRole>(role_raw);
        const std::size_t rank = static_cast<std::size_t>(r.read_uint(1));
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(r.read_uint(4));
            if (d == 0)
                throw format_error("checkpoint: " + path.string() + " entry '" + name +
                                   "' has a zero dimension");
            numel *= d;
        }
        std::vector<double> values(numel);
        for (auto& v : values) v = r.read_f64();
        Tensor t(std::move(shape), std::move(values), role != ParamRole::batchnorm_stat);
        out.add(name, std::move(t), role);
    }
    return out;
}

// Replaces the model's parameter values with a congruent checkpoint.
inline void load_checkpoint_into(Model& m, const std::filesystem::path& path) {
    ParamSet loaded = load_checkpoint(path);
    if (loaded.size() != m.params.size())
        throw format_error("checkpoint: " + path.string() + " holds " +
                           std::to_string(loaded.size()) + " entries, model has " +
                           std::to_string(m.params.size()));
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        const auto& src = loaded[i];
        auto& dst = m.params[i];
        if (src.name != dst.name || src.role != dst.role ||
            src.tensor.shape() != dst.tensor.shape())
            throw format_error("checkpoint: " + path.string() + " entry '" + src.name +
                               "' does not match model entry '" + dst.name + "'");
        dst.tensor.data() = src.tensor.data();
    }
}

}  // namespace flexchill
