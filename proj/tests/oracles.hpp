// Test-only reference implementations, kept independent of the library's
// computation paths so they can serve as oracles.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mergedet/detector.hpp"
#include "mergedet/geometry.hpp"
#include "mergedet/pseudolabel.hpp"
#include "mergedet/rng.hpp"

namespace oracles {

// IoU by counting raster cells on an integer-aligned pair of boxes given in
// corner format on a canvas x canvas grid.
inline double raster_iou(int ax0, int ay0, int ax1, int ay1, int bx0, int by0, int bx1, int by1,
                         int canvas) {
    long inter = 0, in_a = 0, in_b = 0;
    for (int y = 0; y < canvas; ++y) {
        for (int x = 0; x < canvas; ++x) {
            const bool a = x >= ax0 && x < ax1 && y >= ay0 && y < ay1;
            const bool b = x >= bx0 && x < bx1 && y >= by0 && y < by1;
            in_a += a;
            in_b += b;
            inter += a && b;
        }
    }
    const long uni = in_a + in_b - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Naive per-(i,j,a) transcription of the grid-detector losses, structured as
// direct sums over every cell and anchor. Returns the component losses and
// the number of objectness terms that were accumulated.
struct NaiveLosses {
    double cls = 0.0;
    double coord = 0.0;
    double obj = 0.0;
    long obj_terms = 0;
    double total(const mergedet::DetectorConfig& cfg) const {
        return cfg.lambda_cls * cls + cfg.lambda_coor * coord + cfg.lambda_obj * obj;
    }
};

inline double naive_log_floor(double p) { return std::log(std::max(p, 1e-7)); }

inline NaiveLosses naive_losses(const mergedet::DetectorOutput& out,
                                std::span<const mergedet::Annotation> gts,
                                const mergedet::DetectorConfig& cfg) {
    using namespace mergedet;
    NaiveLosses res;
    const int g = cfg.g;

    // Ground truth ownership per cell: center cell, larger area wins.
    std::vector<int> owner(static_cast<size_t>(g) * g, -1);
    for (size_t n = 0; n < gts.size(); ++n) {
        const Box& b = gts[n].box;
        const int i = std::clamp(static_cast<int>(std::floor(b.cy * g)), 0, g - 1);
        const int j = std::clamp(static_cast<int>(std::floor(b.cx * g)), 0, g - 1);
        const size_t cell = static_cast<size_t>(i) * g + j;
        if (owner[cell] < 0 || gts[static_cast<size_t>(owner[cell])].box.area() < b.area()) {
            owner[cell] = static_cast<int>(n);
        }
    }

    for (int i = 0; i < g; ++i) {
        for (int j = 0; j < g; ++j) {
            const size_t cell = static_cast<size_t>(i) * g + j;
            int resp_anchor = -1;
            if (owner[cell] >= 0) {
                const Box& b = gts[static_cast<size_t>(owner[cell])].box;
                double best = -1.0;
                for (int a = 0; a < cfg.A; ++a) {
                    const double aw = cfg.anchors[static_cast<size_t>(a)].w;
                    const double ah = cfg.anchors[static_cast<size_t>(a)].h;
                    const double inter = std::min(b.w, aw) * std::min(b.h, ah);
                    const double uni = b.w * b.h + aw * ah - inter;
                    const double v = uni > 0 ? inter / uni : 0.0;
                    if (v > best) {
                        best = v;
                        resp_anchor = a;
                    }
                }
                if (best <= cfg.tau) resp_anchor = -1;
            }

            for (int a = 0; a < cfg.A; ++a) {
                const size_t n = out.anchor_index(i, j, a);
                const bool responsible = (a == resp_anchor);
                const double t = responsible ? 1.0 : 0.0;
                res.obj += -(t * naive_log_floor(out.p_obj[n]) +
                             (1.0 - t) * naive_log_floor(1.0 - out.p_obj[n]));
                ++res.obj_terms;
                if (responsible) {
                    const Annotation& gt = gts[static_cast<size_t>(owner[cell])];
                    res.cls += -naive_log_floor(out.p_cls[n * out.K + (gt.class_id - 1)]);
                    const Box dec = decode_to_image(out.rel[n], GridCell{i, j, g},
                                                    cfg.anchors[static_cast<size_t>(a)]);
                    res.coord += (gt.box.cx - dec.cx) * (gt.box.cx - dec.cx) +
                                 (gt.box.cy - dec.cy) * (gt.box.cy - dec.cy) +
                                 (gt.box.w - dec.w) * (gt.box.w - dec.w) +
                                 (gt.box.h - dec.h) * (gt.box.h - dec.h);
                }
            }
        }
    }
    return res;
}

// Straight-line transcription of the pseudo-label generation pass: every one
// of the A*g^2 boxes in flat order, the gt-overlap test, padding and scoring
// through the same scorer, the confidence gate, then the label fields.
inline mergedet::PseudoLabelSet transcribed_generation(
    const mergedet::ImageBuffer& image, const mergedet::DetectorOutput& out,
    const mergedet::DetectorConfig& cfg, std::span<const mergedet::Annotation> gts,
    const mergedet::ProxyScorer& proxy, const mergedet::PseudoLabelParams& params, int epoch,
    mergedet::Rng& rng) {
    using namespace mergedet;
    PseudoLabelSet set;
    if (epoch < params.warmup_epochs) return set;
    std::vector<Box> gt_boxes;
    for (const auto& g : gts) gt_boxes.push_back(g.box);

    const int K = proxy.num_classes();
    for (int i = 0; i < cfg.g; ++i) {
        for (int j = 0; j < cfg.g; ++j) {
            for (int a = 0; a < cfg.A; ++a) {
                const size_t n = out.anchor_index(i, j, a);
                const Box box = decode_to_image(out.rel[n], GridCell{i, j, cfg.g},
                                                cfg.anchors[static_cast<size_t>(a)]);
                double overlap = 0.0;
                for (const auto& gb : gt_boxes) overlap = std::max(overlap, iou(box, gb));
                if (overlap > params.theta1) continue;

                int x0, y0, w, h;
                if (!box_pixel_rect(box, image.width, image.height, x0, y0, w, h)) continue;
                const ImageBuffer crop = extract_rect(image, x0, y0, w, h);
                const std::vector<double> hbar = proxy.score(crop, rng);

                int arg = 0;
                for (int k = 1; k <= K; ++k) {
                    if (hbar[static_cast<size_t>(k)] > hbar[static_cast<size_t>(arg)]) arg = k;
                }
                double max_in = 0.0;
                for (int k = 0; k < K; ++k) max_in = std::max(max_in, hbar[static_cast<size_t>(k)]);
                if (arg == K || max_in < params.theta2) continue;

                PseudoLabel pl;
                pl.box = box;
                double in_mass = 0.0;
                for (int k = 0; k < K; ++k) in_mass += hbar[static_cast<size_t>(k)];
                pl.class_probs.resize(static_cast<size_t>(K));
                for (int k = 0; k < K; ++k) {
                    pl.class_probs[static_cast<size_t>(k)] =
                        params.beta * out.p_cls[n * static_cast<size_t>(K) + static_cast<size_t>(k)] +
                        (1.0 - params.beta) * hbar[static_cast<size_t>(k)] / in_mass;
                }
                pl.obj_prob = max_in;
                pl.i = i;
                pl.j = j;
                pl.a = a;
                pl.epoch = epoch;
                pl.hbar = hbar;
                set.push_back(std::move(pl));
            }
        }
    }
    return set;
}

// Precision/recall enumeration for average precision, walking an explicit
// recall grid instead of the implementation's envelope-sum form.
inline double enumerated_ap(const std::vector<uint8_t>& flags, int n_gt) {
    if (n_gt == 0) return flags.empty() ? 0.0 : NAN;
    std::vector<double> precision, recall;
    int tp = 0;
    for (size_t d = 0; d < flags.size(); ++d) {
        if (flags[d]) ++tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(d + 1));
        recall.push_back(static_cast<double>(tp) / n_gt);
    }
    double ap = 0.0;
    double prev_r = 0.0;
    for (size_t d = 0; d < flags.size(); ++d) {
        if (!flags[d]) continue;
        double best = 0.0;
        for (size_t e = d; e < flags.size(); ++e) best = std::max(best, precision[e]);
        ap += (recall[d] - prev_r) * best;
        prev_r = recall[d];
    }
    return ap;
}

}  // namespace oracles
