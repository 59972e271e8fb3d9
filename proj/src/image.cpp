#include "mergedet/image.hpp"

#include <algorithm>
#include <fstream>

#include "mergedet/common.hpp"

namespace mergedet {

ImageBuffer::ImageBuffer(int w, int h, std::array<uint8_t, 3> fill)
    : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3) {
    for (size_t p = 0; p < pixels.size(); p += 3) {
        pixels[p] = fill[0];
        pixels[p + 1] = fill[1];
        pixels[p + 2] = fill[2];
    }
}

void save_ppm(const ImageBuffer& img, const std::filesystem::path& path) {
    check(!img.empty(), "save_ppm: empty image");
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "save_ppm: cannot open " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    check(out.good(), "save_ppm: write failed for " + path.string());
}

ImageBuffer load_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "load_ppm: cannot open " + path.string());
    std::string magic;
    in >> magic;
    check(magic == "P6", "load_ppm: not a P6 file: " + path.string());
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    check(w > 0 && h > 0 && maxval == 255, "load_ppm: bad header in " + path.string());
    in.get();  // single whitespace after header
    ImageBuffer img(w, h);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    check(in.good(), "load_ppm: truncated pixel data in " + path.string());
    return img;
}

ImageBuffer extract_rect(const ImageBuffer& img, int x0, int y0, int w, int h) {
    check_arg(w > 0 && h > 0, "extract_rect: degenerate rect");
    check_arg(x0 >= 0 && y0 >= 0 && x0 + w <= img.width && y0 + h <= img.height,
              "extract_rect: rect outside image");
    ImageBuffer out(w, h);
    for (int y = 0; y < h; ++y) {
        std::copy_n(img.at(x0, y0 + y), static_cast<size_t>(w) * 3, out.at(0, y));
    }
    return out;
}

void draw_rect(ImageBuffer& img, int x0, int y0, int x1, int y1, std::array<uint8_t, 3> color) {
    if (x1 < x0) std::swap(x0, x1);
    if (y1 < y0) std::swap(y0, y1);
    auto put = [&](int x, int y) {
        if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
        uint8_t* p = img.at(x, y);
        p[0] = color[0];
        p[1] = color[1];
        p[2] = color[2];
    };
    for (int x = x0; x <= x1; ++x) {
        put(x, y0);
        put(x, y1);
    }
    for (int y = y0; y <= y1; ++y) {
        put(x0, y);
        put(x1, y);
    }
}

}  // namespace mergedet
