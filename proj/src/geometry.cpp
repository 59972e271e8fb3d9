#include "mergedet/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "mergedet/common.hpp"

namespace mergedet {

double iou(const Box& a, const Box& b) {
    check_domain(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0,
                 "iou: degenerate box (w or h <= 0)");
    // Everything is derived from the corners so that equal boxes give exactly
    // 1 despite center/size rounding.
    const double ax0 = a.xmin(), ax1 = a.xmax(), ay0 = a.ymin(), ay1 = a.ymax();
    const double bx0 = b.xmin(), bx1 = b.xmax(), by0 = b.ymin(), by1 = b.ymax();
    const double ix = std::min(ax1, bx1) - std::max(ax0, bx0);
    const double iy = std::min(ay1, by1) - std::max(ay0, by0);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    const double uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

std::pair<double, std::optional<std::size_t>> max_iou(const Box& box, std::span<const Box> refs) {
    double best = 0.0;
    std::optional<std::size_t> arg;
    for (std::size_t k = 0; k < refs.size(); ++k) {
        const double v = iou(box, refs[k]);
        if (!arg.has_value() || v > best) {
            best = v;
            arg = k;
        }
    }
    if (!arg.has_value()) return {0.0, std::nullopt};
    return {best, arg};
}

Box decode_to_image(const RelBox& rel, const GridCell& cell, const AnchorSpec& anchor) {
    check_domain(std::isfinite(rel.w) && std::isfinite(rel.h),
                 "decode_to_image: non-finite size exponent");
    Box out;
    out.cx = cell.x() + rel.x;
    out.cy = cell.y() + rel.y;
    out.w = anchor.w * std::exp(rel.w);
    out.h = anchor.h * std::exp(rel.h);
    check_domain(std::isfinite(out.w) && std::isfinite(out.h),
                 "decode_to_image: decoded size overflowed");
    return out;
}

RelBox encode_from_image(const Box& box, const GridCell& cell, const AnchorSpec& anchor) {
    check_domain(box.w > 0.0 && box.h > 0.0, "encode_from_image: box has non-positive size");
    const double span = 1.0 / cell.g;
    const double dx = box.cx - cell.x();
    const double dy = box.cy - cell.y();
    check_domain(dx >= 0.0 && dx <= span && dy >= 0.0 && dy <= span,
                 "encode_from_image: box center outside cell");
    RelBox rel;
    rel.x = dx;
    rel.y = dy;
    rel.w = std::log(box.w / anchor.w);
    rel.h = std::log(box.h / anchor.h);
    return rel;
}

Box clip(const Box& box) {
    const double x0 = std::clamp(box.xmin(), 0.0, 1.0);
    const double x1 = std::clamp(box.xmax(), 0.0, 1.0);
    const double y0 = std::clamp(box.ymin(), 0.0, 1.0);
    const double y1 = std::clamp(box.ymax(), 0.0, 1.0);
    check_domain(x1 - x0 > 0.0 && y1 - y0 > 0.0, "clip: box entirely outside [0,1]^2");
    return box_from_corners(x0, y0, x1, y1);
}

Box box_from_corners(double x0, double y0, double x1, double y1) {
    Box b;
    b.cx = (x0 + x1) / 2.0;
    b.cy = (y0 + y1) / 2.0;
    b.w = x1 - x0;
    b.h = y1 - y0;
    return b;
}

std::array<double, 4> box_to_corners(const Box& b) {
    return {b.xmin(), b.ymin(), b.xmax(), b.ymax()};
}

}  // namespace mergedet
