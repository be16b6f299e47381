#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ssanet/errors.hpp"
#include "ssanet/tensor.hpp"

namespace ssanet {

// Flat named-tensor archive with a versioned header. Little-endian, doubles.
//   "SSNT" | u32 version | u32 count | entries...
//   entry: u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 data[]

constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ContractError("checkpoint: truncated file");
    return v;
}

}  // namespace detail

// Atomic write: temp file in the target directory, then rename.
inline void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw ConfigError("checkpoint: cannot open " + tmp.string() + " for writing");
        os.write("SSNT", 4);
        detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
            for (std::size_t d = 0; d < t.rank(); ++d)
                detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(t.dim(d)));
            os.write(reinterpret_cast<const char*>(t.data()),
                     static_cast<std::streamsize>(t.numel() * sizeof(double)));
        }
        if (!os) throw ContractError("checkpoint: write failed for " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "SSNT")
        throw ConfigError("checkpoint: bad magic in " + path);
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::read_pod<std::uint32_t>(is);
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rank = detail::read_pod<std::uint32_t>(is);
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d)
            shape[d] = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!is) throw ContractError("checkpoint: truncated tensor data in " + path);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace ssanet
