#include "mergedet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mergedet/common.hpp"
#include "mergedet/rng.hpp"

namespace mergedet {

namespace {

constexpr int kMaxPlacementTries = 60;
constexpr int kMaxImageAttempts = 25;

bool shape_inside(int kind, double dx, double dy, double half) {
    switch (kind) {
        case 0:  // circle
            return dx * dx + dy * dy <= half * half;
        case 1:  // square
            return std::abs(dx) <= half * 0.9 && std::abs(dy) <= half * 0.9;
        case 2:  // triangle, apex up
            return dy >= -half && dy <= half && std::abs(dx) <= (dy + half) / 2.0;
        case 3: {  // ring
            const double d2 = dx * dx + dy * dy;
            return d2 <= half * half && d2 >= (0.60 * half) * (0.60 * half);
        }
        case 4:  // plus
            return (std::abs(dx) <= 0.30 * half && std::abs(dy) <= half) ||
                   (std::abs(dy) <= 0.30 * half && std::abs(dx) <= half);
        case 5:  // diamond
            return std::abs(dx) + std::abs(dy) <= half;
        case 6:  // frame (clutter)
            return std::abs(dx) <= half && std::abs(dy) <= half &&
                   !(std::abs(dx) <= 0.55 * half && std::abs(dy) <= 0.55 * half);
        case 7:  // diagonal cross (clutter)
            return std::abs(dx) <= half && std::abs(dy) <= half &&
                   (std::abs(dx - dy) <= 0.42 * half || std::abs(dx + dy) <= 0.42 * half);
        case 8:  // flat bar (clutter)
            return std::abs(dy) <= 0.28 * half && std::abs(dx) <= half;
        case 9:  // half disc (clutter shaped like a shape fragment)
            return dy <= 0.0 && dx * dx + dy * dy <= half * half;
        case 10:  // solid block, half height (clutter)
            return std::abs(dx) <= half * 0.9 && dy >= 0.0 && dy <= half * 0.9;
        case 11: {  // arc, half of a ring (clutter)
            const double d2 = dx * dx + dy * dy;
            return dx >= 0.0 && d2 <= half * half && d2 >= (0.60 * half) * (0.60 * half);
        }
        default:
            return false;
    }
}

struct PlacedShape {
    int kind = 0;       // 0..8 (6..8 are clutter kinds)
    int class_id = 0;   // annotation class for the master manifest
    double cx = 0, cy = 0, size = 0;
    uint8_t color[3] = {0, 0, 0};
    std::vector<std::pair<int, int>> mask;  // occupied pixels
    Box tight;                              // normalized tight box
};

// Base colors for the in-distribution classes; each draw jitters around its
// base. Clutter shapes get fully random bright colors so the rejection class
// cannot key on color alone.
constexpr uint8_t kClassColors[6][3] = {{220, 60, 60},  {60, 200, 60},  {70, 90, 230},
                                        {230, 200, 50}, {200, 70, 210}, {60, 210, 210}};

// Rasterizes the shape's mask and tight box. Returns false if the mask would
// be empty or would leave the canvas.
bool rasterize(PlacedShape& s, int canvas) {
    s.mask.clear();
    const double half = s.size / 2.0;
    const int x0 = static_cast<int>(std::floor(s.cx - half)) - 1;
    const int x1 = static_cast<int>(std::ceil(s.cx + half)) + 1;
    const int y0 = static_cast<int>(std::floor(s.cy - half)) - 1;
    const int y1 = static_cast<int>(std::ceil(s.cy + half)) + 1;
    int mnx = canvas, mny = canvas, mxx = -1, mxy = -1;
    for (int y = std::max(0, y0); y <= std::min(canvas - 1, y1); ++y) {
        for (int x = std::max(0, x0); x <= std::min(canvas - 1, x1); ++x) {
            const double dx = (x + 0.5) - s.cx;
            const double dy = (y + 0.5) - s.cy;
            if (!shape_inside(s.kind, dx, dy, half)) continue;
            s.mask.emplace_back(x, y);
            mnx = std::min(mnx, x);
            mny = std::min(mny, y);
            mxx = std::max(mxx, x);
            mxy = std::max(mxy, y);
        }
    }
    if (s.mask.empty()) return false;
    if (mnx == 0 || mny == 0 || mxx == canvas - 1 || mxy == canvas - 1) return false;
    s.tight.cx = (mnx + mxx + 1) / 2.0 / canvas;
    s.tight.cy = (mny + mxy + 1) / 2.0 / canvas;
    s.tight.w = static_cast<double>(mxx - mnx + 1) / canvas;
    s.tight.h = static_cast<double>(mxy - mny + 1) / canvas;
    return true;
}

bool layout_ok(const PlacedShape& cand, const std::vector<PlacedShape>& placed, double max_iou) {
    for (const auto& p : placed) {
        if (iou(cand.tight, p.tight) > max_iou) return false;
    }
    return true;
}

// One image; false when the layout constraint could not be satisfied.
bool generate_image(const SynthConfig& cfg, Rng& rng, ImageBuffer& img,
                    std::vector<PlacedShape>& shapes) {
    const int canvas = cfg.canvas;
    img = ImageBuffer(canvas, canvas);
    for (int y = 0; y < canvas; ++y) {
        for (int x = 0; x < canvas; ++x) {
            uint8_t* p = img.at(x, y);
            for (int c = 0; c < 3; ++c) {
                const double base = rng.uniform(15.0, 60.0);
                p[c] = static_cast<uint8_t>(std::clamp(base, 0.0, 255.0));
            }
        }
    }

    const int n_in = rng.uniform_range(cfg.min_objects, cfg.max_objects);
    const int n_ood = rng.uniform_range(cfg.min_ood_objects, cfg.max_ood_objects);

    std::vector<int> classes(static_cast<size_t>(n_in));
    for (auto& c : classes) c = rng.uniform_range(1, cfg.num_classes);
    if (n_in >= 2 && rng.uniform() < cfg.co_occur) {
        const auto a = cfg.split_a;
        const auto b = cfg.split_b();
        classes[0] = a[rng.uniform_int(a.size())];
        classes[1] = b[rng.uniform_int(b.size())];
    }

    shapes.clear();
    for (int n = 0; n < n_in + n_ood; ++n) {
        PlacedShape s;
        if (n < n_in) {
            s.class_id = classes[static_cast<size_t>(n)];
            s.kind = s.class_id - 1;
        } else {
            const int ood_kind = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.num_ood)));
            s.kind = 6 + ood_kind;
            s.class_id = cfg.num_classes + 1 + ood_kind;
        }
        if (n < n_in) {
            const uint8_t* base = kClassColors[s.kind];
            for (int c = 0; c < 3; ++c) {
                const double v = base[c] + rng.uniform(-cfg.color_jitter, cfg.color_jitter);
                s.color[c] = static_cast<uint8_t>(std::clamp(v, 40.0, 255.0));
            }
        } else {
            for (int c = 0; c < 3; ++c) {
                s.color[c] = static_cast<uint8_t>(rng.uniform_range(110, 255));
            }
        }
        bool placed_ok = false;
        for (int t = 0; t < kMaxPlacementTries; ++t) {
            s.size = rng.uniform(cfg.min_size, cfg.max_size);
            const double margin = s.size / 2.0 + 1.5;
            s.cx = rng.uniform(margin, canvas - margin);
            s.cy = rng.uniform(margin, canvas - margin);
            if (!rasterize(s, canvas)) continue;
            if (!layout_ok(s, shapes, cfg.max_overlap_iou)) continue;
            placed_ok = true;
            break;
        }
        if (!placed_ok) return false;
        for (const auto& [x, y] : s.mask) {
            uint8_t* p = img.at(x, y);
            p[0] = s.color[0];
            p[1] = s.color[1];
            p[2] = s.color[2];
        }
        shapes.push_back(std::move(s));
    }
    return true;
}

}  // namespace

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = nlohmann::json{{"canvas", c.canvas},
                       {"num_classes", c.num_classes},
                       {"num_ood", c.num_ood},
                       {"images", c.images},
                       {"min_objects", c.min_objects},
                       {"max_objects", c.max_objects},
                       {"min_ood_objects", c.min_ood_objects},
                       {"max_ood_objects", c.max_ood_objects},
                       {"min_size", c.min_size},
                       {"max_size", c.max_size},
                       {"color_jitter", c.color_jitter},
                       {"co_occur", c.co_occur},
                       {"split_a", c.split_a},
                       {"max_overlap_iou", c.max_overlap_iou},
                       {"seed", c.seed},
                       {"id_prefix", c.id_prefix}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    SynthConfig def;
    c.canvas = j.value("canvas", def.canvas);
    c.num_classes = j.value("num_classes", def.num_classes);
    c.num_ood = j.value("num_ood", def.num_ood);
    c.images = j.value("images", def.images);
    c.min_objects = j.value("min_objects", def.min_objects);
    c.max_objects = j.value("max_objects", def.max_objects);
    c.min_ood_objects = j.value("min_ood_objects", def.min_ood_objects);
    c.max_ood_objects = j.value("max_ood_objects", def.max_ood_objects);
    c.min_size = j.value("min_size", def.min_size);
    c.max_size = j.value("max_size", def.max_size);
    c.color_jitter = j.value("color_jitter", def.color_jitter);
    c.co_occur = j.value("co_occur", def.co_occur);
    c.split_a = j.value("split_a", def.split_a);
    c.max_overlap_iou = j.value("max_overlap_iou", def.max_overlap_iou);
    c.seed = j.value("seed", def.seed);
    c.id_prefix = j.value("id_prefix", def.id_prefix);
}

const std::vector<std::string>& synth_class_names() {
    static const std::vector<std::string> names = {"circle", "square",  "triangle",
                                                   "ring",   "plus",    "diamond"};
    return names;
}

const std::vector<std::string>& synth_ood_names() {
    static const std::vector<std::string> names = {"ood_frame",    "ood_xcross", "ood_bar",
                                                   "ood_halfdisc", "ood_block",  "ood_arc"};
    return names;
}

void SynthConfig::validate() const {
    check_arg(num_classes >= 2 && num_classes <= static_cast<int>(synth_class_names().size()),
              "SynthConfig: num_classes out of range");
    check_arg(num_ood >= 0 && num_ood <= static_cast<int>(synth_ood_names().size()),
              "SynthConfig: num_ood out of range");
    check_arg(canvas >= 16, "SynthConfig: canvas too small");
    check_arg(images >= 1, "SynthConfig: images must be positive");
    check_arg(min_objects >= 1 && max_objects >= min_objects, "SynthConfig: bad object range");
    check_arg(min_ood_objects >= 0 && max_ood_objects >= min_ood_objects,
              "SynthConfig: bad clutter range");
    check_arg(min_size >= 6.0 && max_size >= min_size && max_size < canvas / 1.5,
              "SynthConfig: bad size range");
    check_arg(co_occur >= 0.0 && co_occur <= 1.0, "SynthConfig: co_occur out of [0,1]");
    check_arg(!split_a.empty(), "SynthConfig: split_a empty");
    for (int c : split_a) {
        check_arg(c >= 1 && c <= num_classes, "SynthConfig: split_a class out of range");
    }
    check_arg(!split_b().empty(), "SynthConfig: split_a must be a proper subset of {1..K}");
}

std::vector<int> SynthConfig::split_b() const {
    std::vector<int> out;
    for (int c = 1; c <= num_classes; ++c) {
        if (std::find(split_a.begin(), split_a.end(), c) == split_a.end()) out.push_back(c);
    }
    return out;
}

SynthResult synth_generate(const SynthConfig& cfg, ImageStore& store) {
    cfg.validate();
    SynthResult res;
    for (int c = 1; c <= cfg.num_classes; ++c) {
        res.detection.class_table[c] = synth_class_names()[static_cast<size_t>(c - 1)];
        res.master.class_table[c] = synth_class_names()[static_cast<size_t>(c - 1)];
    }
    for (int k = 0; k < cfg.num_ood; ++k) {
        res.master.class_table[cfg.num_classes + 1 + k] = synth_ood_names()[static_cast<size_t>(k)];
    }
    res.detection.provenance.push_back("synth seed=" + std::to_string(cfg.seed) +
                                       " images=" + std::to_string(cfg.images));
    res.master.provenance = res.detection.provenance;
    res.master.provenance.push_back("clutter annotated for proxy crop extraction");

    for (int idx = 0; idx < cfg.images; ++idx) {
        ImageBuffer img;
        std::vector<PlacedShape> shapes;
        bool ok = false;
        for (int attempt = 0; attempt < kMaxImageAttempts && !ok; ++attempt) {
            Rng rng = Rng::stream(cfg.seed, "synth-img", static_cast<uint64_t>(idx),
                                  static_cast<uint64_t>(attempt));
            ok = generate_image(cfg, rng, img, shapes);
        }
        check(ok, "synth_generate: layout constraint unsatisfiable for image " +
                      std::to_string(idx) + " after bounded retries");

        char id_buf[32];
        std::snprintf(id_buf, sizeof(id_buf), "%s%06d", cfg.id_prefix.c_str(), idx);
        ImageRecord rec;
        rec.id = id_buf;
        rec.path = "images/" + rec.id + ".ppm";
        rec.width = cfg.canvas;
        rec.height = cfg.canvas;

        ImageRecord master_rec = rec;
        for (const auto& s : shapes) {
            Annotation ann;
            ann.box = s.tight;
            ann.class_id = s.class_id;
            master_rec.annotations.push_back(ann);
            if (s.class_id <= cfg.num_classes) rec.annotations.push_back(ann);
        }
        res.detection.records.push_back(std::move(rec));
        res.master.records.push_back(std::move(master_rec));
        store.put(id_buf, std::move(img));
    }
    return res;
}

}  // namespace mergedet
