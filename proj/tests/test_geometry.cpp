#include <doctest.h>

#include <cmath>

#include "mergedet/geometry.hpp"
#include "mergedet/rng.hpp"
#include "oracles.hpp"

using namespace mergedet;

TEST_CASE("iou identity and disjoint cases") {
    const Box b{0.5, 0.5, 0.2, 0.3};
    CHECK(iou(b, b) == 1.0);
    const Box left{0.2, 0.2, 0.1, 0.1};
    const Box right{0.8, 0.8, 0.1, 0.1};
    CHECK(iou(left, right) == 0.0);
}

TEST_CASE("iou on corner boxes (0,0,2,2) and (1,1,3,3) over a 4x4 canvas") {
    const Box a = box_from_corners(0.0 / 4, 0.0 / 4, 2.0 / 4, 2.0 / 4);
    const Box b = box_from_corners(1.0 / 4, 1.0 / 4, 3.0 / 4, 3.0 / 4);
    CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    CHECK(iou(a, b) == doctest::Approx(oracles::raster_iou(0, 0, 2, 2, 1, 1, 3, 3, 4)));
}

TEST_CASE("iou rejects degenerate boxes") {
    const Box ok{0.5, 0.5, 0.2, 0.2};
    const Box bad{0.5, 0.5, 0.0, 0.2};
    CHECK_THROWS_AS(iou(ok, bad), std::domain_error);
}

TEST_CASE("iou matches the pixel-rasterization oracle on random integer-aligned boxes") {
    Rng rng(42);
    const int canvas = 16;
    for (int trial = 0; trial < 1000; ++trial) {
        auto random_corners = [&](int& x0, int& y0, int& x1, int& y1) {
            x0 = rng.uniform_range(0, canvas - 2);
            y0 = rng.uniform_range(0, canvas - 2);
            x1 = rng.uniform_range(x0 + 1, canvas);
            y1 = rng.uniform_range(y0 + 1, canvas);
        };
        int ax0, ay0, ax1, ay1, bx0, by0, bx1, by1;
        random_corners(ax0, ay0, ax1, ay1);
        random_corners(bx0, by0, bx1, by1);
        const Box a = box_from_corners(double(ax0) / canvas, double(ay0) / canvas,
                                       double(ax1) / canvas, double(ay1) / canvas);
        const Box b = box_from_corners(double(bx0) / canvas, double(by0) / canvas,
                                       double(bx1) / canvas, double(by1) / canvas);
        const double expected = oracles::raster_iou(ax0, ay0, ax1, ay1, bx0, by0, bx1, by1, canvas);
        CHECK(iou(a, b) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(iou(a, b) == iou(b, a));
        CHECK(iou(a, b) >= 0.0);
        CHECK(iou(a, b) <= 1.0);
    }
}

TEST_CASE("max_iou over a reference set") {
    const Box b{0.5, 0.5, 0.2, 0.2};
    SUBCASE("empty refs") {
        const auto [v, idx] = max_iou(b, {});
        CHECK(v == 0.0);
        CHECK_FALSE(idx.has_value());
    }
    SUBCASE("self reference") {
        const std::vector<Box> refs = {b};
        const auto [v, idx] = max_iou(b, refs);
        CHECK(v == 1.0);
        CHECK(idx == 0);
    }
    SUBCASE("argmax over precomputed overlaps") {
        // Shifted copies with increasing offsets give decreasing IoU; the
        // middle one overlaps most.
        const std::vector<Box> refs = {Box{0.62, 0.5, 0.2, 0.2}, Box{0.54, 0.5, 0.2, 0.2},
                                       Box{0.58, 0.5, 0.2, 0.2}};
        std::vector<double> ious;
        for (const auto& r : refs) ious.push_back(iou(b, r));
        const auto [v, idx] = max_iou(b, refs);
        CHECK(v == std::max({ious[0], ious[1], ious[2]}));
        CHECK(idx == 1);
    }
}

TEST_CASE("decode_to_image transfer equations") {
    const GridCell cell{1, 2, 4};  // x_G = 2/4, y_G = 1/4
    const AnchorSpec anchor{0, 0.1, 0.2};
    SUBCASE("zero offsets reproduce the anchor at the cell corner") {
        const Box b = decode_to_image(RelBox{0, 0, 0, 0}, cell, anchor);
        CHECK(b.cx == doctest::Approx(0.5));
        CHECK(b.cy == doctest::Approx(0.25));
        CHECK(b.w == doctest::Approx(0.1));
        CHECK(b.h == doctest::Approx(0.2));
    }
    SUBCASE("offset adds to the corner") {
        const GridCell c2{0, 1, 4};  // x_G = 0.25
        const Box b = decode_to_image(RelBox{0.1, 0.05, 0, 0}, c2, anchor);
        CHECK(b.cx == doctest::Approx(0.35));
        CHECK(b.cy == doctest::Approx(0.05));
    }
    SUBCASE("log-scale width") {
        const Box b = decode_to_image(RelBox{0, 0, std::log(2.0), 0}, cell, anchor);
        CHECK(b.w == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("non-finite exponent is a domain error") {
        CHECK_THROWS_AS(decode_to_image(RelBox{0, 0, INFINITY, 0}, cell, anchor),
                        std::domain_error);
    }
}

TEST_CASE("encode_from_image inverts decode") {
    const GridCell cell{1, 2, 4};
    const AnchorSpec anchor{0, 0.1, 0.2};
    SUBCASE("identity case") {
        const Box b = decode_to_image(RelBox{0, 0, 0, 0}, cell, anchor);
        const RelBox r = encode_from_image(b, cell, anchor);
        CHECK(r.x == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(r.y == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(r.w == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(r.h == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("doubled width encodes to log 2") {
        Box b = decode_to_image(RelBox{0, 0, 0, 0}, cell, anchor);
        b.w *= 2.0;
        const RelBox r = encode_from_image(b, cell, anchor);
        CHECK(r.w == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("center outside the cell is a domain error") {
        const Box outside{0.1, 0.1, 0.05, 0.05};
        CHECK_THROWS_AS(encode_from_image(outside, cell, anchor), std::domain_error);
    }
    SUBCASE("round trip on 1000 random boxes within 1e-9") {
        Rng rng(7);
        const int g = 6;
        double worst = 0.0;
        for (int trial = 0; trial < 1000; ++trial) {
            const int i = rng.uniform_range(0, g - 1);
            const int j = rng.uniform_range(0, g - 1);
            const GridCell c{i, j, g};
            const AnchorSpec a{0, rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)};
            Box b;
            b.cx = c.x() + rng.uniform(0.0, 1.0 / g);
            b.cy = c.y() + rng.uniform(0.0, 1.0 / g);
            b.w = rng.uniform(0.02, 0.6);
            b.h = rng.uniform(0.02, 0.6);
            const Box back = decode_to_image(encode_from_image(b, c, a), c, a);
            worst = std::max({worst, std::abs(back.cx - b.cx), std::abs(back.cy - b.cy),
                              std::abs(back.w - b.w), std::abs(back.h - b.h)});
        }
        CHECK(worst < 1e-9);
    }
}

TEST_CASE("decode width is monotone in the log-scale factor") {
    const GridCell cell{0, 0, 4};
    const AnchorSpec anchor{0, 0.15, 0.15};
    double prev = 0.0;
    for (int step = 0; step <= 20; ++step) {
        const double rel_w = -2.0 + 0.2 * step;
        const double w = decode_to_image(RelBox{0, 0, rel_w, 0}, cell, anchor).w;
        if (step > 0) CHECK(w > prev);
        prev = w;
    }
}

TEST_CASE("clip clamps corners and rejects outside boxes") {
    SUBCASE("interior box unchanged") {
        const Box b{0.5, 0.5, 0.2, 0.2};
        const Box c = clip(b);
        CHECK(c.cx == doctest::Approx(b.cx));
        CHECK(c.w == doctest::Approx(b.w));
    }
    SUBCASE("right edge clamped and center recomputed") {
        const Box b{1.0, 0.5, 0.4, 0.2};  // right edge 1.2
        const Box c = clip(b);
        CHECK(c.xmax() == doctest::Approx(1.0));
        CHECK(c.xmin() == doctest::Approx(0.8));
        CHECK(c.cx == doctest::Approx(0.9));
        CHECK(c.w == doctest::Approx(0.2));
    }
    SUBCASE("fully outside is a domain error") {
        CHECK_THROWS_AS(clip(Box{1.5, 1.5, 0.2, 0.2}), std::domain_error);
    }
}

TEST_CASE("corner converters round trip") {
    const Box b{0.4, 0.6, 0.2, 0.3};
    const auto [x0, y0, x1, y1] = box_to_corners(b);
    const Box back = box_from_corners(x0, y0, x1, y1);
    CHECK(back.cx == doctest::Approx(b.cx).epsilon(1e-12));
    CHECK(back.h == doctest::Approx(b.h).epsilon(1e-12));
}
