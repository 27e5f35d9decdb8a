#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "piilab/common.hpp"
#include "piilab/tensor.hpp"

namespace piilab {

// Binary checkpoint container: magic, version, a config blob, then named
// parameter tensors in declaration order as 64-bit little-endian floats.
// Writers are deterministic, so identical state yields identical bytes.
namespace ckpt {

constexpr char kMagic[8] = {'P', 'I', 'I', 'L', 'A', 'B', 'C', 'K'};
constexpr uint32_t kVersion = 1;

inline void write_u32(std::ostream& o, uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& o, uint64_t v) { o.write(reinterpret_cast<const char*>(&v), 8); }
inline uint32_t read_u32(std::istream& i) {
    uint32_t v = 0;
    i.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline uint64_t read_u64(std::istream& i) {
    uint64_t v = 0;
    i.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

inline void write(const std::string& path, const std::string& config_json,
                  const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write(kMagic, 8);
    write_u32(out, kVersion);
    write_u32(out, static_cast<uint32_t>(config_json.size()));
    out.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
    write_u64(out, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_u32(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<uint32_t>(t->shape.size()));
        for (int d : t->shape) write_u32(out, static_cast<uint32_t>(d));
        write_u64(out, t->data.size());
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    }
    if (!out) throw IoError("short write on checkpoint " + path);
}

// Reads config and tensors; tensor order and names must match the writer's
// declaration order (checked by the caller against its own parameter list).
inline std::string read(const std::string& path, const std::vector<std::pair<std::string, Tensor*>>& tensors) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IoError("bad checkpoint magic in " + path);
    const uint32_t version = read_u32(in);
    if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const uint32_t cfg_len = read_u32(in);
    std::string config(cfg_len, '\0');
    in.read(config.data(), cfg_len);
    const uint64_t n = read_u64(in);
    if (n != tensors.size())
        throw IoError("checkpoint has " + std::to_string(n) + " tensors, expected " +
                      std::to_string(tensors.size()));
    for (auto& [want_name, t] : tensors) {
        const uint32_t name_len = read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (name != want_name) throw IoError("checkpoint tensor order mismatch: got " + name + ", expected " + want_name);
        const uint32_t ndim = read_u32(in);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(read_u32(in));
        const uint64_t count = read_u64(in);
        Tensor loaded(shape);
        if (static_cast<uint64_t>(loaded.numel()) != count) throw IoError("checkpoint tensor size mismatch: " + name);
        in.read(reinterpret_cast<char*>(loaded.data.data()), static_cast<std::streamsize>(count * sizeof(double)));
        *t = std::move(loaded);
    }
    if (!in) throw IoError("short read on checkpoint " + path);
    return config;
}

}  // namespace ckpt
}  // namespace piilab
