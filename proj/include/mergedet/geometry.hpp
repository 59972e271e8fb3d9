#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace mergedet {

// Axis-aligned box in normalized center format: center and size as fractions
// of the image dimensions. Corner format appears only in file I/O converters.
struct Box {
    double cx = 0.0;
    double cy = 0.0;
    double w = 0.0;
    double h = 0.0;

    double xmin() const { return cx - w / 2.0; }
    double xmax() const { return cx + w / 2.0; }
    double ymin() const { return cy - h / 2.0; }
    double ymax() const { return cy + h / 2.0; }
    double area() const { return w * h; }
};

// Grid-relative box: x, y are offsets from the cell's top-left corner as
// fractions of the full image (in [0, 1/g] after squashing); w, h are
// log-scale factors relative to an anchor.
struct RelBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;
};

struct GridCell {
    int i = 0;  // row
    int j = 0;  // column
    int g = 1;  // grid resolution

    double x() const { return static_cast<double>(j) / g; }  // top-left corner
    double y() const { return static_cast<double>(i) / g; }
};

struct AnchorSpec {
    int a = 0;       // anchor index
    double w = 0.0;  // anchor size, fraction of image
    double h = 0.0;
};

// Intersection-over-union. Zero-area intersection and zero-area union both
// return 0 by convention. Throws std::domain_error on degenerate inputs.
double iou(const Box& a, const Box& b);

// Maximum IoU of `box` against a reference set, with the argmax index.
// Empty refs -> (0.0, nullopt).
std::pair<double, std::optional<std::size_t>> max_iou(const Box& box, std::span<const Box> refs);

// Grid -> image coordinate transfer: cx = x_G + x, cy = y_G + y,
// w = anchor.w * exp(rel.w), h = anchor.h * exp(rel.h).
Box decode_to_image(const RelBox& rel, const GridCell& cell, const AnchorSpec& anchor);

// Exact inverse of decode_to_image. The box center must lie in the cell.
RelBox encode_from_image(const Box& box, const GridCell& cell, const AnchorSpec& anchor);

// Clamps corners to [0,1] and re-expresses in center format. Throws
// std::domain_error if nothing remains.
Box clip(const Box& box);

// Corner-format converters for file I/O: (x_min, y_min, x_max, y_max).
Box box_from_corners(double x0, double y0, double x1, double y1);
std::array<double, 4> box_to_corners(const Box& b);

}  // namespace mergedet
