#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include <zlib.h>

#include "cipa/errors.hpp"
#include "cipa/tensor.hpp"

namespace cipa {

// ---------------------------------------------------------------------------
// Minimal 8-bit RGB PNG writer/reader (zlib-backed) and the evaluation
// overlay renderer. The reader handles the five standard scanline filters,
// enough to round-trip our own files and typical grayscale-as-RGB images.
// ---------------------------------------------------------------------------

struct RgbImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB

    std::uint8_t* at(std::size_t y, std::size_t x) { return pixels.data() + 3 * (y * width + x); }
    const std::uint8_t* at(std::size_t y, std::size_t x) const {
        return pixels.data() + 3 * (y * width + x);
    }
};

namespace detail {

inline void png_chunk(std::ostream& os, const char type[4], const std::uint8_t* data,
                      std::size_t len) {
    auto be32 = [&](std::uint32_t v) {
        std::uint8_t b[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16), std::uint8_t(v >> 8),
                             std::uint8_t(v)};
        os.write(reinterpret_cast<char*>(b), 4);
    };
    be32(std::uint32_t(len));
    os.write(type, 4);
    if (len) os.write(reinterpret_cast<const char*>(data), std::streamsize(len));
    std::uint32_t crc = crc32(0, reinterpret_cast<const Bytef*>(type), 4);
    if (len) crc = crc32(crc, reinterpret_cast<const Bytef*>(data), uInt(len));
    be32(crc);
}

inline std::uint32_t read_be32(std::istream& is) {
    std::uint8_t b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline std::uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return std::uint8_t(a);
    if (pb <= pc) return std::uint8_t(b);
    return std::uint8_t(c);
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("write_png: cannot open " + path.string());
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::uint8_t ihdr[13];
    auto be32 = [](std::uint8_t* p, std::uint32_t v) {
        p[0] = std::uint8_t(v >> 24);
        p[1] = std::uint8_t(v >> 16);
        p[2] = std::uint8_t(v >> 8);
        p[3] = std::uint8_t(v);
    };
    be32(ihdr, std::uint32_t(img.width));
    be32(ihdr + 4, std::uint32_t(img.height));
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // RGB
    ihdr[10] = ihdr[11] = ihdr[12] = 0;
    detail::png_chunk(os, "IHDR", ihdr, 13);

    // filter byte 0 per scanline
    std::vector<std::uint8_t> raw;
    raw.reserve(img.height * (1 + 3 * img.width));
    for (std::size_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), img.pixels.begin() + std::ptrdiff_t(3 * y * img.width),
                   img.pixels.begin() + std::ptrdiff_t(3 * (y + 1) * img.width));
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> z(bound);
    if (compress(z.data(), &bound, raw.data(), uLong(raw.size())) != Z_OK)
        throw IoError("write_png: deflate failed");
    detail::png_chunk(os, "IDAT", z.data(), bound);
    detail::png_chunk(os, "IEND", nullptr, 0);
    if (!os) throw IoError("write_png: write failed for " + path.string());
}

inline RgbImage read_png(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_png: cannot open " + path.string());
    std::uint8_t sig[8];
    is.read(reinterpret_cast<char*>(sig), 8);
    static const std::uint8_t want[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (!is || std::memcmp(sig, want, 8) != 0)
        throw IoError("read_png: not a PNG file: " + path.string());

    RgbImage img;
    std::vector<std::uint8_t> idat;
    while (is) {
        const std::uint32_t len = detail::read_be32(is);
        char type[5] = {};
        is.read(type, 4);
        if (!is) break;
        std::vector<std::uint8_t> data(len);
        if (len) is.read(reinterpret_cast<char*>(data.data()), len);
        is.seekg(4, std::ios::cur);  // skip CRC
        if (std::strncmp(type, "IHDR", 4) == 0) {
            img.width = (std::size_t(data[0]) << 24) | (std::size_t(data[1]) << 16) |
                        (std::size_t(data[2]) << 8) | data[3];
            img.height = (std::size_t(data[4]) << 24) | (std::size_t(data[5]) << 16) |
                         (std::size_t(data[6]) << 8) | data[7];
            if (data[8] != 8 || data[9] != 2)
                throw IoError("read_png: only 8-bit RGB supported: " + path.string());
        } else if (std::strncmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data.begin(), data.end());
        } else if (std::strncmp(type, "IEND", 4) == 0) {
            break;
        }
    }
    const std::size_t stride = 3 * img.width;
    std::vector<std::uint8_t> raw(img.height * (stride + 1));
    uLongf out_len = uLongf(raw.size());
    if (uncompress(raw.data(), &out_len, idat.data(), uLong(idat.size())) != Z_OK ||
        out_len != raw.size())
        throw IoError("read_png: inflate failed for " + path.string());

    img.pixels.assign(img.height * stride, 0);
    std::vector<std::uint8_t> prev(stride, 0);
    for (std::size_t y = 0; y < img.height; ++y) {
        const std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* dst = img.pixels.data() + y * stride;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= 3 ? dst[i - 3] : 0;
            const int b = prev[i];
            const int c = i >= 3 ? prev[i - 3] : 0;
            int v = src[i];
            switch (filter) {
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: break;
            }
            dst[i] = std::uint8_t(v);
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Qualitative overlay: CT grayscale base with TP green, FP red, FN blue.
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kOverlayTP[3] = {0, 255, 0};
inline constexpr std::uint8_t kOverlayFP[3] = {255, 0, 0};
inline constexpr std::uint8_t kOverlayFN[3] = {0, 0, 255};

inline RgbImage render_overlay(const Tensor<float>& ct, const Tensor<float>& pred,
                               const Tensor<float>& gt) {
    if (ct.shape() != pred.shape() || ct.shape() != gt.shape() || ct.rank() != 2)
        throw ShapeError("render_overlay: shape mismatch");
    RgbImage img;
    img.height = ct.extent(0);
    img.width = ct.extent(1);
    img.pixels.assign(3 * img.width * img.height, 0);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const bool p = pred.at({y, x}) != 0.0f, g = gt.at({y, x}) != 0.0f;
            std::uint8_t* px = img.at(y, x);
            if (p && g) std::memcpy(px, kOverlayTP, 3);
            else if (p) std::memcpy(px, kOverlayFP, 3);
            else if (g) std::memcpy(px, kOverlayFN, 3);
            else {
                const std::uint8_t v =
                    std::uint8_t(std::clamp(ct.at({y, x}), 0.0f, 255.0f));
                px[0] = px[1] = px[2] = v;
            }
        }
    return img;
}

}  // namespace cipa
