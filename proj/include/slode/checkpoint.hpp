#pragma once

// Binary checkpoint:
//   "SLODE1" | u32 version | u32 n | n bytes of key=value manifest lines |
//   u32 parameter count | per parameter: u32 name length, name, u32 rank, u64 dims..., f64 values...
// All integers and reals little-endian.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "trainer.hpp"

namespace slode {

inline constexpr char kCheckpointMagic[6] = {'S', 'L', 'O', 'D', 'E', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class CheckpointMagicError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class CheckpointParameterError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T> void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    template <class T> T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (data_.size() - pos_ < n) {
            throw CheckpointTruncatedError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                                           std::to_string(pos_));
        }
    }

    std::string data_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string checkpoint_manifest(const Checkpoint& c) {
    std::string m;
    for (const auto& [k, v] : to_key_values(c.config)) m += k + "=" + v + "\n";
    m += "normalization_shift=" + join_reals(c.norm.shift) + "\n";
    m += "normalization_scale=" + join_reals(c.norm.scale) + "\n";
    m += "t_max=" + format_real(c.t_max) + "\n";
    m += "epoch=" + std::to_string(c.epoch) + "\n";
    m += "best_val_elbo=" + format_real(c.best_val_elbo) + "\n";
    return m;
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    const std::string manifest = checkpoint_manifest(c);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(manifest.size()));
    out += manifest;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.params.size()));
    for (const auto& [name, a] : c.params) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(a.rank()));
        for (std::size_t d : a.shape()) detail::put<std::uint64_t>(out, d);
        for (double v : a.values()) detail::put<double>(out, v);
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(std::string bytes) {
    detail::Reader r(std::move(bytes));
    if (r.bytes(sizeof(kCheckpointMagic), "magic") != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
        throw CheckpointMagicError("not a checkpoint file (bad magic)");
    }
    const auto version = r.get<std::uint32_t>("format version");
    if (version != kCheckpointVersion) {
        throw CheckpointVersionError("checkpoint format version " + std::to_string(version) +
                                     " is not supported (this reader handles version " +
                                     std::to_string(kCheckpointVersion) + ")");
    }
    const auto manifest_len = r.get<std::uint32_t>("manifest length");
    const std::string manifest = r.bytes(manifest_len, "manifest");

    Checkpoint c;
    std::istringstream in(manifest);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("checkpoint manifest: expected key=value", line_no);
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (set_key(c.config, key, value)) continue;
        if (key == "normalization_shift") c.norm.shift = parse_real_list(value, key);
        else if (key == "normalization_scale") c.norm.scale = parse_real_list(value, key);
        else if (key == "t_max") c.t_max = parse_real(value, key, line_no);
        else if (key == "epoch") c.epoch = static_cast<std::size_t>(parse_int(value, key, line_no));
        else if (key == "best_val_elbo") c.best_val_elbo = parse_real(value, key, line_no);
        else throw ParseError("checkpoint manifest: unknown key '" + key + "'", line_no);
    }
    c.config.validate();

    const SlOdeModel reference(c.config.model);
    const auto count = r.get<std::uint32_t>("parameter count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>("parameter name length");
        const std::string name = r.bytes(name_len, "parameter name");
        if (!reference.parameters().contains(name)) {
            throw CheckpointParameterError("checkpoint holds unknown parameter '" + name + "'");
        }
        const auto rank = r.get<std::uint32_t>("parameter rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>("parameter dims"));
        if (shape != reference.parameters().get(name).shape()) {
            throw CheckpointParameterError("parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                           shape_str(reference.parameters().get(name).shape()));
        }
        std::vector<double> values(shape_size(shape));
        for (auto& v : values) v = r.get<double>("parameter values");
        c.params.emplace(name, Array(shape, std::move(values)));
    }
    for (const auto& n : reference.parameters().names()) {
        if (!c.params.count(n)) throw CheckpointParameterError("checkpoint is missing parameter '" + n + "'");
    }
    if (!r.done()) throw CheckpointError("trailing bytes after the last parameter");
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    return deserialize_checkpoint(std::move(bytes));
}

} // namespace slode
