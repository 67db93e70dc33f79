// SPDX-License-Identifier: Apache-2.0
//
// File formats:
//  - PNG, 8-bit, written as color type 2 (RGB) with filter 0 scanlines; the
//    reader additionally accepts gray and RGBA. Fixed zlib level keeps the
//    encoder byte-deterministic.
//  - PGM (P5) for router maps.
//  - "MOAT" latent dumps: 16-byte header (magic, version u32, dims u32 x2)
//    followed by little-endian f32 values; channel count is implied by size.

#pragma once

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "moa/common.hpp"
#include "moa/synthdata.hpp"
#include "moa/tensor.hpp"

namespace moa {

namespace detail_io {

inline void put_u32_be(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

inline uint32_t get_u32_be(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void put_u32_le(std::ostream& out, uint32_t x) {
    uint8_t b[4] = {static_cast<uint8_t>(x), static_cast<uint8_t>(x >> 8),
                    static_cast<uint8_t>(x >> 16), static_cast<uint8_t>(x >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32_le(std::istream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

inline void write_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data,
                        size_t len) {
    put_u32_be(out, static_cast<uint32_t>(len));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data, data + len);
    const uLong crc = crc32(crc32(0L, nullptr, 0), out.data() + start, static_cast<uInt>(len + 4));
    put_u32_be(out, static_cast<uint32_t>(crc));
}

inline std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& in) {
    uLongf bound = compressBound(static_cast<uLong>(in.size()));
    std::vector<uint8_t> out(bound);
    if (compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK)
        throw IoError("zlib compress failed");
    out.resize(bound);
    return out;
}

inline std::vector<uint8_t> zlib_inflate(const uint8_t* data, size_t len, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf out_len = static_cast<uLongf>(expected);
    if (uncompress(out.data(), &out_len, data, static_cast<uLong>(len)) != Z_OK ||
        out_len != expected)
        throw IoError("zlib inflate failed");
    return out;
}

inline uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
    if (pb <= pc) return static_cast<uint8_t>(b);
    return static_cast<uint8_t>(c);
}

}  // namespace detail_io

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

inline void write_png_rgb8(const std::string& path, const ImageU8& img) {
    using namespace detail_io;
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.h) * (1 + static_cast<size_t>(img.w) * 3));
    for (int y = 0; y < img.h; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), img.rgb.begin() + static_cast<size_t>(y) * img.w * 3,
                   img.rgb.begin() + (static_cast<size_t>(y) + 1) * img.w * 3);
    }
    const std::vector<uint8_t> idat = zlib_deflate(raw);

    std::vector<uint8_t> file = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(img.w));
    put_u32_be(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    write_chunk(file, "IHDR", ihdr.data(), ihdr.size());
    write_chunk(file, "IDAT", idat.data(), idat.size());
    write_chunk(file, "IEND", nullptr, 0);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
}

inline ImageU8 read_png_rgb8(const std::string& path) {
    using namespace detail_io;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::vector<uint8_t> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
        throw IoError(path + ": not a PNG file");

    uint32_t w = 0, h = 0;
    int color_type = -1, bit_depth = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    while (pos + 8 <= file.size()) {
        const uint32_t len = get_u32_be(file.data() + pos);
        const char* type = reinterpret_cast<const char*>(file.data() + pos + 4);
        const uint8_t* data = file.data() + pos + 8;
        if (pos + 12 + len > file.size()) throw IoError(path + ": truncated chunk");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            w = get_u32_be(data);
            h = get_u32_be(data + 4);
            bit_depth = data[8];
            color_type = data[9];
            if (bit_depth != 8) throw IoError(path + ": only 8-bit PNG supported");
            if (color_type != 0 && color_type != 2 && color_type != 6)
                throw IoError(path + ": unsupported color type");
            if (data[12] != 0) throw IoError(path + ": interlaced PNG unsupported");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (w == 0 || h == 0 || idat.empty()) throw IoError(path + ": missing image data");

    const int channels = color_type == 2 ? 3 : (color_type == 6 ? 4 : 1);
    const size_t stride = static_cast<size_t>(w) * channels;
    auto raw = zlib_inflate(idat.data(), idat.size(), (stride + 1) * h);

    std::vector<uint8_t> pixels(stride * h);
    for (uint32_t y = 0; y < h; ++y) {
        const uint8_t filter = raw[y * (stride + 1)];
        const uint8_t* src = raw.data() + y * (stride + 1) + 1;
        uint8_t* dst = pixels.data() + y * stride;
        const uint8_t* up = y > 0 ? pixels.data() + (y - 1) * stride : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<size_t>(channels) ? dst[i - channels] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= static_cast<size_t>(channels)) ? up[i - channels] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError(path + ": bad filter type");
            }
            dst[i] = static_cast<uint8_t>(v);
        }
    }

    ImageU8 img;
    img.w = static_cast<int>(w);
    img.h = static_cast<int>(h);
    img.rgb.resize(static_cast<size_t>(w) * h * 3);
    for (size_t p = 0; p < static_cast<size_t>(w) * h; ++p) {
        if (channels == 1) {
            img.rgb[3 * p] = img.rgb[3 * p + 1] = img.rgb[3 * p + 2] = pixels[p];
        } else {
            img.rgb[3 * p] = pixels[p * channels];
            img.rgb[3 * p + 1] = pixels[p * channels + 1];
            img.rgb[3 * p + 2] = pixels[p * channels + 2];
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// PGM (P5), 8-bit grayscale.
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, int w, int h, const std::vector<uint8_t>& gray) {
    if (gray.size() != static_cast<size_t>(w) * h) throw ShapeError("pgm: size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

inline std::vector<uint8_t> read_pgm(const std::string& path, int& w, int& h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::string magic;
    int maxv = 0;
    in >> magic >> w >> h >> maxv;
    if (magic != "P5" || maxv != 255) throw IoError(path + ": unsupported PGM");
    in.get();  // single whitespace after header
    std::vector<uint8_t> gray(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    if (!in) throw IoError(path + ": truncated PGM");
    return gray;
}

// ---------------------------------------------------------------------------
// MOAT latent dumps.
// ---------------------------------------------------------------------------

template <class S>
void write_latent(const std::string& path, const TensorT<S>& x, int h, int w) {
    using namespace detail_io;
    if (x.numel() % (static_cast<size_t>(h) * w) != 0)
        throw ShapeError("latent dump: values not divisible by h*w");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out.write("MOAT", 4);
    put_u32_le(out, 1);  // version
    put_u32_le(out, static_cast<uint32_t>(h));
    put_u32_le(out, static_cast<uint32_t>(w));
    for (const S v : *x.data) {
        const float f = static_cast<float>(v);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32_le(out, bits);
    }
}

template <class S>
TensorT<S> read_latent(const std::string& path, int& h, int& w) {
    using namespace detail_io;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, "MOAT", 4) != 0) throw IoError(path + ": bad latent magic");
    const uint32_t version = get_u32_le(in);
    if (version != 1) throw IoError(path + ": unsupported latent version");
    h = static_cast<int>(get_u32_le(in));
    w = static_cast<int>(get_u32_le(in));
    std::vector<S> values;
    while (true) {
        uint8_t b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        if (!in) break;
        uint32_t bits = uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
                        (uint32_t(b[3]) << 24);
        float f;
        std::memcpy(&f, &bits, 4);
        values.push_back(static_cast<S>(f));
    }
    if (values.empty() || values.size() % (static_cast<size_t>(h) * w) != 0)
        throw IoError(path + ": latent payload size mismatch");
    const int c = static_cast<int>(values.size() / (static_cast<size_t>(h) * w));
    return TensorT<S>::from({h * w, c}, std::move(values));
}

// Router-map export: prior weight quantized to 8-bit PGM plus a raw sidecar.
template <class S>
void export_router_map(const std::string& dir, int t, int layer, const TensorT<S>& r, int grid_h,
                       int grid_w) {
    std::vector<uint8_t> gray(static_cast<size_t>(grid_h) * grid_w);
    std::vector<S> raw(static_cast<size_t>(grid_h) * grid_w);
    for (int i = 0; i < grid_h * grid_w; ++i) {
        const S v = (*r.data)[static_cast<size_t>(i) * 2];  // column 0 = prior
        raw[static_cast<size_t>(i)] = v;
        gray[static_cast<size_t>(i)] =
            static_cast<uint8_t>(std::lround(255.0 * std::min(1.0, std::max(0.0, static_cast<double>(v)))));
    }
    const std::string stem = dir + "/router_t" + std::to_string(t) + "_l" + std::to_string(layer);
    write_pgm(stem + ".pgm", grid_w, grid_h, gray);
    write_latent(stem + ".f32", TensorT<S>::from({grid_h * grid_w, 1}, raw), grid_h, grid_w);
}

}  // namespace moa
