#pragma once

// Checkpoint layout (all integers little-endian u32):
//   "DNASCKPT" | version=1 | tensor-count
//   per tensor: name-length | UTF-8 name | rank | dims[rank] | f32 data (LE)

#include <dnas/tensor.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace dnas {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'N', 'A', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

} // namespace detail

/// Serializes tensors to the checkpoint byte layout. Values are narrowed to f32.
template <class T>
std::string encode_checkpoint(const std::vector<NamedTensor<T>>& tensors) {
    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (T v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    return out;
}

template <class T>
std::vector<NamedTensor<T>> decode_checkpoint(std::string_view bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t off = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (off + n > bytes.size()) {
            throw FormatError("checkpoint truncated reading " + std::string(what) + " at byte " + std::to_string(off));
        }
    };
    auto u32 = [&](const char* what) {
        need(4, what);
        auto v = detail::get_u32(p + off);
        off += 4;
        return v;
    };
    need(8, "magic");
    if (std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0) throw FormatError("bad checkpoint magic");
    off = 8;
    if (auto v = u32("version"); v != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(v));
    }
    const auto count = u32("tensor count");
    std::vector<NamedTensor<T>> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = u32("name length");
        need(len, "name");
        std::string name(bytes.substr(off, len));
        off += len;
        const auto rank = u32("rank");
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(u32("dims"));
        const std::size_t n = numel(shape);
        need(4 * n, "tensor data");
        std::vector<T> data(n);
        for (std::size_t j = 0; j < n; ++j) data[j] = static_cast<T>(std::bit_cast<float>(detail::get_u32(p + off + 4 * j)));
        off += 4 * n;
        out.push_back({std::move(name), Tensor<T>(std::move(shape), std::move(data))});
    }
    if (off != bytes.size()) throw FormatError("trailing bytes after checkpoint at byte " + std::to_string(off));
    return out;
}

template <class T>
void save_checkpoint(const std::string& path, const std::vector<NamedTensor<T>>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path + " for writing");
    const auto bytes = encode_checkpoint(tensors);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <class T>
std::vector<NamedTensor<T>> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint<T>(bytes);
}

} // namespace dnas
