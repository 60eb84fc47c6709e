#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffmorph/tensor.hpp"

namespace diffmorph {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public IoError {
public:
    using IoError::IoError;
};

namespace detail {

template <class U>
void write_le(std::ostream& os, U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U read_le(std::istream& is) {
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw FormatError("unexpected end of stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return is;
}

}  // namespace detail

// DMT layout: "DMT1", u32 rank, rank x u32 extents, f32 LE payload.
inline constexpr char kDmtMagic[4] = {'D', 'M', 'T', '1'};

inline void write_tensor_body(std::ostream& os, const Tensor& t) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (float v : t.data()) detail::write_le<float>(os, v);
}

inline Tensor read_tensor_body(std::istream& is) {
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& e : shape) {
        e = detail::read_le<std::uint32_t>(is);
        if (e == 0) throw FormatError("zero tensor extent");
        n *= e;
        if (n > (1ull << 32)) throw FormatError("tensor too large");
    }
    std::vector<float> data(n);
    for (auto& v : data) v = detail::read_le<float>(is);
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    auto os = detail::open_out(path);
    os.write(kDmtMagic, 4);
    write_tensor_body(os, t);
    if (!os) throw IoError("write failed: " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kDmtMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a DMT1 tensor file");
    }
    try {
        return read_tensor_body(is);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Saves a displacement field plus the `<path>.txt` sidecar describing its units.
inline void save_field(const std::filesystem::path& path, const Tensor& field) {
    save_tensor(path, field);
    std::ofstream os(path.string() + ".txt", std::ios::binary);
    os << "displacement, voxel units\n";
    if (!os) throw IoError("write failed: " + path.string() + ".txt");
}

/// Writes the last two axes of `image` (values in [-1,1]) as an 8-bit P5 PGM;
/// leading axes must be singleton.
inline void save_image(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() < 2) throw ShapeError("save_image: need at least 2 axes, got " + shape_str(image.shape()));
    const std::size_t H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
    if (H * W != image.numel()) throw ShapeError("save_image: expected a single plane, got " + shape_str(image.shape()));
    auto os = detail::open_out(path);
    os << "P5\n" << W << ' ' << H << "\n255\n";
    std::vector<unsigned char> bytes(H * W);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const double v = std::clamp((static_cast<double>(image[i]) + 1.0) * 0.5, 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed: " + path.string());
}

/// Reads an 8-bit P5 PGM into a [1,H,W] tensor in [-1,1].
inline Tensor load_image(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    auto token = [&]() {
        std::string tok;
        char c;
        while (is.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(is, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!tok.empty()) break;
                continue;
            }
            tok.push_back(c);
        }
        return tok;
    };
    if (token() != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
    std::size_t W = 0, H = 0, maxval = 0;
    try {
        W = std::stoul(token());
        H = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw FormatError(path.string() + ": malformed PGM header");
    }
    if (W == 0 || H == 0 || maxval == 0 || maxval > 255) throw FormatError(path.string() + ": unsupported PGM header");
    std::vector<unsigned char> bytes(W * H);
    if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
        throw FormatError(path.string() + ": truncated PGM payload");
    }
    std::vector<float> data(W * H);
    for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = static_cast<float>(bytes[i]) / static_cast<float>(maxval) * 2.0f - 1.0f;
    }
    return Tensor({1, H, W}, std::move(data));
}

}  // namespace diffmorph
