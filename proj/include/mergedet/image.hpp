#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mergedet {

// 8-bit RGB raster, row-major, interleaved channels.
struct ImageBuffer {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // width*height*3

    ImageBuffer() = default;
    ImageBuffer(int w, int h, std::array<uint8_t, 3> fill = {0, 0, 0});

    uint8_t* at(int x, int y) { return pixels.data() + 3 * (static_cast<size_t>(y) * width + x); }
    const uint8_t* at(int x, int y) const {
        return pixels.data() + 3 * (static_cast<size_t>(y) * width + x);
    }
    bool empty() const { return width <= 0 || height <= 0; }
};

// PPM (P6) is used as the on-disk 8-bit RGB format: lossless, dependency-free
// and byte-stable, which the determinism contracts rely on.
void save_ppm(const ImageBuffer& img, const std::filesystem::path& path);
ImageBuffer load_ppm(const std::filesystem::path& path);

// Pixel-rect extraction; the rect must be non-degenerate and inside the image.
ImageBuffer extract_rect(const ImageBuffer& img, int x0, int y0, int w, int h);

// 1-px rectangle outline, clamped to the image bounds.
void draw_rect(ImageBuffer& img, int x0, int y0, int x1, int y1, std::array<uint8_t, 3> color);

}  // namespace mergedet
