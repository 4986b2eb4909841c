#pragma once

// Image file formats for guidance packs and outputs: 8-bit PNG (libpng) and
// 32-bit float PFM (little-endian, bottom-up rows per the format spec).

#include "r2v/tensor.hpp"

#include <bit>
#include <cstdio>
#include <png.h>

static_assert(std::endian::native == std::endian::little,
              "PFM writer assumes a little-endian host");

namespace r2v {

namespace io_detail {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace io_detail

// (H,W,3) in [0,1] -> 8-bit RGB PNG
inline void write_png_rgb8(const std::string& path, const Tensor& img) {
    R2V_CHECK(img.ndim() == 3 && img.shape[2] == 3, "png: image must be HxWx3");
    int64_t h = img.shape[0], w = img.shape[1];
    io_detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw ConfigError("png: cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("png: allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("png: write failed for " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    for (int64_t y = 0; y < h; y++) {
        for (int64_t x = 0; x < w; x++) {
            for (int c = 0; c < 3; c++) {
                double v = img.at3(y, x, c);
                v = std::min(1.0, std::max(0.0, v));
                row[static_cast<size_t>(x * 3 + c)] = static_cast<png_byte>(std::lround(v * 255.0));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// 8-bit RGB/RGBA/gray PNG -> (H,W,3) in [0,1]
inline Tensor read_png_rgb8(const std::string& path) {
    io_detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ConfigError("png: cannot open: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("png: allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ConfigError("png: failed to read " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_gray_to_rgb(png);
    }
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int64_t w = png_get_image_width(png, info);
    int64_t h = png_get_image_height(png, info);
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    Tensor img({h, w, 3});
    for (int64_t y = 0; y < h; y++) {
        png_read_row(png, row.data(), nullptr);
        for (int64_t x = 0; x < w; x++) {
            for (int c = 0; c < 3; c++) {
                img.at3(y, x, c) = row[static_cast<size_t>(x * 3 + c)] / 255.0;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline void write_png_mask(const std::string& path, const Mask& m) {
    Tensor img({m.h, m.w, 3});
    for (int64_t y = 0; y < m.h; y++) {
        for (int64_t x = 0; x < m.w; x++) {
            double v = m.at(y, x) ? 1.0 : 0.0;
            for (int c = 0; c < 3; c++) img.at3(y, x, c) = v;
        }
    }
    write_png_rgb8(path, img);
}

inline Mask read_png_mask(const std::string& path) {
    Tensor img = read_png_rgb8(path);
    Mask m(img.shape[0], img.shape[1]);
    for (int64_t y = 0; y < m.h; y++) {
        for (int64_t x = 0; x < m.w; x++) {
            m.at(y, x) = img.at3(y, x, 0) > 0.5 ? 1 : 0;
        }
    }
    return m;
}

// (H,W) float depth -> grayscale PFM ("Pf", negative scale = little endian)
inline void write_pfm(const std::string& path, const Tensor& depth) {
    R2V_CHECK(depth.ndim() == 2, "pfm: depth must be HxW");
    int64_t h = depth.shape[0], w = depth.shape[1];
    io_detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw ConfigError("pfm: cannot open for writing: " + path);
    std::fprintf(fp.get(), "Pf\n%lld %lld\n-1.0\n", static_cast<long long>(w),
                 static_cast<long long>(h));
    // PFM stores rows bottom-to-top
    std::vector<float> row(static_cast<size_t>(w));
    for (int64_t y = h - 1; y >= 0; y--) {
        for (int64_t x = 0; x < w; x++) {
            row[static_cast<size_t>(x)] = static_cast<float>(depth.at2(y, x));
        }
        if (std::fwrite(row.data(), sizeof(float), static_cast<size_t>(w), fp.get()) !=
            static_cast<size_t>(w)) {
            throw Error("pfm: short write to " + path);
        }
    }
}

inline Tensor read_pfm(const std::string& path) {
    io_detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ConfigError("pfm: cannot open: " + path);
    char magic[3] = {0, 0, 0};
    if (std::fscanf(fp.get(), "%2s", magic) != 1 || std::string(magic) != "Pf") {
        throw ConfigError("pfm: not a grayscale PFM: " + path);
    }
    long long w = 0, h = 0;
    double scale = 0.0;
    if (std::fscanf(fp.get(), "%lld %lld %lf", &w, &h, &scale) != 3 || w <= 0 || h <= 0) {
        throw ConfigError("pfm: bad header in " + path);
    }
    if (scale >= 0.0) throw ConfigError("pfm: big-endian PFM unsupported: " + path);
    std::fgetc(fp.get());  // single whitespace after the header
    Tensor depth({h, w});
    std::vector<float> row(static_cast<size_t>(w));
    for (int64_t y = h - 1; y >= 0; y--) {
        if (std::fread(row.data(), sizeof(float), static_cast<size_t>(w), fp.get()) !=
            static_cast<size_t>(w)) {
            throw ConfigError("pfm: truncated data in " + path);
        }
        for (int64_t x = 0; x < w; x++) {
            depth.at2(y, x) = row[static_cast<size_t>(x)];
        }
    }
    return depth;
}

}  // namespace r2v
