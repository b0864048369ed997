#include "hamr/png.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "hamr/fft.hpp"

namespace hamr::png {

Gray8 to_gray8(const Tensor& img) {
    ensure(!img.is_complex() && img.rank() == 2, "to_gray8: want a real [H,W] image");
    Gray8 g;
    g.h = img.dim(0);
    g.w = img.dim(1);
    g.px.assign(static_cast<size_t>(g.h * g.w), 0);
    const double mx = img.max_value();
    if (mx <= 0.0) return g;
    for (int64_t i = 0; i < img.numel(); ++i) {
        double v = img.r(i);
        if (v < 0.0) v = 0.0;
        g.px[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(255.0 * v / mx));
    }
    return g;
}

namespace {

Tensor frame_of(const Tensor& stack, int64_t t) {
    ensure(stack.rank() == 3, "panel: want a [T,H,W] stack");
    ensure(t >= 0 && t < stack.dim(0), "panel: frame out of range");
    const int64_t H = stack.dim(1), W = stack.dim(2);
    Tensor f({H, W}, stack.dtype());
    if (stack.is_complex())
        for (int64_t i = 0; i < H * W; ++i) f.set_c(i, stack.c(t * H * W + i));
    else
        for (int64_t i = 0; i < H * W; ++i) f.r(i) = stack.r(t * H * W + i);
    return f;
}

} // namespace

Gray8 frame_gray8(const Tensor& stack, int64_t t) {
    Tensor f = frame_of(stack, t);
    if (!f.is_complex()) return to_gray8(f);
    Tensor mag({f.dim(0), f.dim(1)}, Dtype::Real64);
    for (int64_t i = 0; i < f.numel(); ++i) mag.r(i) = std::abs(f.c(i));
    return to_gray8(mag);
}

Gray8 kspace_log_gray8(const Tensor& stack, int64_t t) {
    Tensor f = frame_of(stack, t).to_complex();
    const int64_t H = f.dim(0), W = f.dim(1);
    Tensor k({H, W}, Dtype::Complex128);
    fft::fft2_centered(f.cdata(), k.cdata(), H, W);
    Tensor logmag({H, W}, Dtype::Real64);
    for (int64_t i = 0; i < k.numel(); ++i) logmag.r(i) = std::log1p(std::abs(k.c(i)));
    return to_gray8(logmag);
}

Gray8 tile(const std::vector<std::vector<Gray8>>& grid, int64_t gap) {
    ensure(!grid.empty() && !grid[0].empty(), "tile: empty grid");
    ensure(gap >= 0, "tile: negative gap");
    const size_t cols = grid[0].size();
    const int64_t ph = grid[0][0].h, pw = grid[0][0].w;
    for (const auto& row : grid) {
        ensure(row.size() == cols, "tile: ragged grid");
        for (const Gray8& p : row)
            ensure(p.h == ph && p.w == pw, "tile: panels must share one size");
    }
    Gray8 out;
    out.h = static_cast<int64_t>(grid.size()) * ph + (static_cast<int64_t>(grid.size()) - 1) * gap;
    out.w = static_cast<int64_t>(cols) * pw + (static_cast<int64_t>(cols) - 1) * gap;
    out.px.assign(static_cast<size_t>(out.h * out.w), 0);
    for (size_t gr = 0; gr < grid.size(); ++gr)
        for (size_t gc = 0; gc < cols; ++gc) {
            const Gray8& p = grid[gr][gc];
            const int64_t y0 = static_cast<int64_t>(gr) * (ph + gap);
            const int64_t x0 = static_cast<int64_t>(gc) * (pw + gap);
            for (int64_t y = 0; y < ph; ++y)
                for (int64_t x = 0; x < pw; ++x)
                    out.px[static_cast<size_t>((y0 + y) * out.w + x0 + x)] =
                        p.px[static_cast<size_t>(y * pw + x)];
        }
    return out;
}

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& body) {
    put_u32(out, static_cast<uint32_t>(body.size()));
    const size_t crc_from = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    uLong crc = crc32(0L, out.data() + crc_from, static_cast<uInt>(out.size() - crc_from));
    put_u32(out, static_cast<uint32_t>(crc));
}

} // namespace

std::vector<uint8_t> encode(const Gray8& img) {
    ensure(img.h > 0 && img.w > 0, "png: empty image");
    ensure(img.px.size() == static_cast<size_t>(img.h * img.w), "png: pixel buffer size mismatch");

    // filter byte 0 in front of every scanline
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.h * (img.w + 1)));
    for (int64_t y = 0; y < img.h; ++y) {
        raw.push_back(0);
        const uint8_t* row = img.px.data() + y * img.w;
        raw.insert(raw.end(), row, row + img.w);
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> z(zlen);
    int rc = compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9);
    ensure(rc == Z_OK, "png: deflate failed");
    z.resize(zlen);

    std::vector<uint8_t> out{137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(img.w));
    put_u32(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);  // deflate
    ihdr.push_back(0);  // adaptive filtering, per-line type bytes
    ihdr.push_back(0);  // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", z);
    put_chunk(out, "IEND", {});
    return out;
}

void write_file(const std::string& path, const Gray8& img) {
    std::vector<uint8_t> bytes = encode(img);
    std::ofstream f(path, std::ios::binary);
    ensure(f.good(), "png: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    ensure(f.good(), "png: write failed for " + path);
}

}  // namespace hamr::png
