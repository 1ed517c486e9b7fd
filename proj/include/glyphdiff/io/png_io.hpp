#pragma once

#include <png.h>

#include <cstring>
#include <string>
#include <vector>

#include "../core/tensor.hpp"

namespace glyphdiff {

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> pixels;  // row-major
};

inline GrayImage read_png_gray(const std::string& path) {
    png_image im;
    std::memset(&im, 0, sizeof(im));
    im.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&im, path.c_str()))
        throw IoError("png read failed: " + path + " (" + im.message + ")");
    im.format = PNG_FORMAT_GRAY;
    GrayImage out;
    out.width = static_cast<int>(im.width);
    out.height = static_cast<int>(im.height);
    out.pixels.resize(PNG_IMAGE_SIZE(im));
    if (!png_image_finish_read(&im, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&im);
        throw IoError("png decode failed: " + path + " (" + im.message + ")");
    }
    return out;
}

inline void write_png_gray(const std::string& path, const unsigned char* pixels, int width, int height) {
    png_image im;
    std::memset(&im, 0, sizeof(im));
    im.version = PNG_IMAGE_VERSION;
    im.width = static_cast<png_uint_32>(width);
    im.height = static_cast<png_uint_32>(height);
    im.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&im, path.c_str(), 0, pixels, 0, nullptr))
        throw IoError("png write failed: " + path + " (" + im.message + ")");
}

}  // namespace glyphdiff
