#pragma once

// WTNS binary tensor container:
//   "WTNS" | version u8 = 1 | dtype u8 (1 = f32, 2 = f64) | rank u8 |
//   rank x u32 LE extents | row-major LE data

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>

#include "waca/tensor.hpp"

namespace waca {

inline constexpr std::array<unsigned char, 4> kWtnsMagic{0x57, 0x54, 0x4E, 0x53};
inline constexpr std::uint8_t kWtnsVersion = 1;

enum class Dtype : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
constexpr Dtype dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "WTNS stores f32 or f64 only");
    return std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("unexpected end of stream reading u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <class U>
void put_le(std::ostream& os, U v) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    const auto bits = std::bit_cast<Bits>(v);
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(const unsigned char* b) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(b[i]) << (8 * i);
    return std::bit_cast<U>(bits);
}

}  // namespace detail

template <class T>
void write_wtns(std::ostream& os, const Tensor<T>& t) {
    if (t.rank() > 255) throw FormatError("wtns: rank exceeds 255");
    os.write(reinterpret_cast<const char*>(kWtnsMagic.data()), 4);
    const std::uint8_t head[3] = {kWtnsVersion, static_cast<std::uint8_t>(dtype_of<T>()),
                                  static_cast<std::uint8_t>(t.rank())};
    os.write(reinterpret_cast<const char*>(head), 3);
    for (auto e : t.shape()) {
        if (e > 0xFFFFFFFFu) throw FormatError("wtns: extent exceeds u32");
        detail::put_u32(os, static_cast<std::uint32_t>(e));
    }
    for (T v : t.data()) detail::put_le(os, v);
}

// Reads a tensor of either stored dtype, converting to T.
template <class T>
Tensor<T> read_wtns(std::istream& is) {
    unsigned char magic[4];
    if (!is.read(reinterpret_cast<char*>(magic), 4)) throw FormatError("wtns: truncated header");
    if (std::memcmp(magic, kWtnsMagic.data(), 4) != 0) throw FormatError("wtns: bad magic");
    std::uint8_t head[3];
    if (!is.read(reinterpret_cast<char*>(head), 3)) throw FormatError("wtns: truncated header");
    if (head[0] != kWtnsVersion) throw FormatError("wtns: unsupported version " + std::to_string(head[0]));
    const std::uint8_t dtype = head[1];
    if (dtype != 1 && dtype != 2) throw FormatError("wtns: unknown dtype " + std::to_string(dtype));
    Shape shape(head[2]);
    for (auto& e : shape) e = detail::get_u32(is);
    const std::size_t n = shape_numel(shape);
    const std::size_t width = dtype == 1 ? 4 : 8;
    std::vector<unsigned char> raw(n * width);
    if (n && !is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw FormatError("wtns: truncated data for shape " + shape_str(shape));
    }
    std::vector<T> values(n);
    for (std::size_t i = 0; i < n; ++i) {
        values[i] = dtype == 1 ? static_cast<T>(detail::get_le<float>(&raw[i * 4]))
                               : static_cast<T>(detail::get_le<double>(&raw[i * 8]));
    }
    return Tensor<T>(std::move(shape), std::move(values));
}

template <class T>
void save_wtns(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("wtns: cannot open '" + path.string() + "' for writing");
    write_wtns(os, t);
    if (!os) throw FormatError("wtns: write failed for '" + path.string() + "'");
}

template <class T>
Tensor<T> load_wtns(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("wtns: cannot open '" + path.string() + "'");
    return read_wtns<T>(is);
}

}  // namespace waca
