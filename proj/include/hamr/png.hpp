#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hamr/tensor.hpp"

// Minimal 8-bit grayscale PNG output for diagnostic panels. Linear scaling,
// filter type 0 everywhere, one zlib stream; nothing here is metric-bearing.
namespace hamr::png {

struct Gray8 {
    int64_t h = 0, w = 0;
    std::vector<uint8_t> px;  // row-major, h*w bytes
};

// Real [H,W] -> bytes, scaled by the image's own max (nonpositive max -> all
// zero). Values are clamped below at 0.
Gray8 to_gray8(const Tensor& img);

// Frame t of a real [T,H,W] stack.
Gray8 frame_gray8(const Tensor& stack, int64_t t);

// log(1 + |fft2(frame)|) (centered transform, DC mid-panel), to_gray8 scaled.
Gray8 kspace_log_gray8(const Tensor& stack, int64_t t);

// Rectangular grid of equally sized panels separated by `gap` black pixels.
Gray8 tile(const std::vector<std::vector<Gray8>>& grid, int64_t gap = 2);

// Complete PNG byte stream (signature, IHDR, one IDAT, IEND).
std::vector<uint8_t> encode(const Gray8& img);

void write_file(const std::string& path, const Gray8& img);

}  // namespace hamr::png
