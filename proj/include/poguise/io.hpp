#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "poguise/errors.hpp"
#include "poguise/tensor.hpp"

namespace poguise {

// PTNSR: tiny single-tensor container.
//   magic  "PTNSR\0"            6 bytes
//   version u8 = 1
//   dtype   u8 (0 = float32, 1 = float64)
//   ndim    u8
//   dims    ndim x u64, little-endian
//   payload row-major values, little-endian
inline constexpr char kPtnsrMagic[6] = {'P', 'T', 'N', 'S', 'R', '\0'};
inline constexpr std::uint8_t kPtnsrVersion = 1;

template <typename T>
constexpr std::uint8_t ptnsr_dtype() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

namespace detail {
inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
} // namespace detail

template <typename T>
void write_ptnsr(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path.string());
    os.write(kPtnsrMagic, 6);
    os.put(static_cast<char>(kPtnsrVersion));
    os.put(static_cast<char>(ptnsr_dtype<T>()));
    os.put(static_cast<char>(t.dims.size()));
    for (int d : t.dims) detail::write_u64_le(os, static_cast<std::uint64_t>(d));
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    // host is little-endian on every supported target; write raw
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!os) throw FormatError("short write: " + path.string());
}

template <typename T>
TensorPtr<T> read_ptnsr(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path.string());
    char magic[6];
    is.read(magic, 6);
    if (!is || std::memcmp(magic, kPtnsrMagic, 6) != 0)
        throw FormatError("bad magic in " + path.string());
    const int version = is.get();
    if (version != kPtnsrVersion)
        throw FormatError("unsupported version " + std::to_string(version) + " in " + path.string());
    const int dtype = is.get();
    if (dtype != ptnsr_dtype<T>())
        throw FormatError("dtype mismatch in " + path.string() + ": file has " +
                          (dtype == 0 ? std::string("float32") : dtype == 1 ? std::string("float64")
                                                                            : std::to_string(dtype)));
    const int ndim = is.get();
    if (ndim <= 0 || ndim > 8) throw FormatError("implausible ndim in " + path.string());
    std::vector<int> dims(ndim);
    std::uint64_t total = 1;
    for (int i = 0; i < ndim; ++i) {
        const std::uint64_t d = detail::read_u64_le(is);
        if (!is || d == 0 || d > (1u << 30)) throw FormatError("implausible dim in " + path.string());
        dims[i] = static_cast<int>(d);
        total *= d;
    }
    auto t = tensor<T>(dims);
    is.read(reinterpret_cast<char*>(t->data.data()),
            static_cast<std::streamsize>(total * sizeof(T)));
    if (!is || static_cast<std::uint64_t>(is.gcount()) != total * sizeof(T))
        throw FormatError("truncated payload in " + path.string());
    return t;
}

} // namespace poguise
