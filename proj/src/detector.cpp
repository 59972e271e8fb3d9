#include "mergedet/detector.hpp"

#include <algorithm>
#include <cmath>

#include "mergedet/binio.hpp"
#include "mergedet/common.hpp"

namespace mergedet {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Shape-only IoU: both boxes centered at the same point.
double shape_iou(double w1, double h1, double w2, double h2) {
    const double inter = std::min(w1, w2) * std::min(h1, h2);
    const double uni = w1 * h1 + w2 * h2 - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace

void DetectorConfig::validate() const {
    check_arg(g >= 2, "DetectorConfig: g must be >= 2");
    check_arg(A >= 1, "DetectorConfig: A must be >= 1");
    check_arg(K >= 2, "DetectorConfig: K must be >= 2");
    check_arg(tau > 0.0 && tau < 1.0, "DetectorConfig: tau must be in (0,1)");
    check_arg(lambda_cls >= 0.0 && lambda_coor >= 0.0 && lambda_obj >= 0.0,
              "DetectorConfig: loss weights must be >= 0");
    check_arg(static_cast<int>(anchors.size()) == A, "DetectorConfig: anchor table size != A");
    for (const auto& an : anchors) {
        check_arg(an.w > 0.0 && an.h > 0.0, "DetectorConfig: anchor with non-positive size");
    }
    check_arg(!channels.empty(), "DetectorConfig: empty backbone");
    check_arg(input_size == g << channels.size(),
              "DetectorConfig: input_size must equal g * 2^|channels|");
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
    j = nlohmann::json{{"input_size", c.input_size}, {"g", c.g},       {"A", c.A},
                       {"K", c.K},                   {"tau", c.tau},   {"lambda_cls", c.lambda_cls},
                       {"lambda_coor", c.lambda_coor},                 {"lambda_obj", c.lambda_obj},
                       {"channels", c.channels}};
    nlohmann::json anchors = nlohmann::json::array();
    for (const auto& a : c.anchors) anchors.push_back({a.w, a.h});
    j["anchors"] = anchors;
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
    DetectorConfig def;
    c.input_size = j.value("input_size", def.input_size);
    c.g = j.value("g", def.g);
    c.A = j.value("A", def.A);
    c.K = j.value("K", def.K);
    c.tau = j.value("tau", def.tau);
    c.lambda_cls = j.value("lambda_cls", def.lambda_cls);
    c.lambda_coor = j.value("lambda_coor", def.lambda_coor);
    c.lambda_obj = j.value("lambda_obj", def.lambda_obj);
    c.channels = j.value("channels", def.channels);
    if (j.contains("anchors")) {
        c.anchors.clear();
        int idx = 0;
        for (const auto& a : j["anchors"]) {
            c.anchors.push_back({idx++, a.at(0).get<double>(), a.at(1).get<double>()});
        }
        c.A = idx;
    }
}

DetectorOutput activate(const nn::Tensor& raw, const DetectorConfig& cfg) {
    const int g = cfg.g, A = cfg.A, K = cfg.K, F = cfg.features();
    check(raw.c == A * F && raw.h == g && raw.w == g, "activate: raw tensor shape mismatch");
    DetectorOutput out;
    out.g = g;
    out.A = A;
    out.K = K;
    out.rel.resize(static_cast<size_t>(g) * g * A);
    out.p_obj.resize(out.rel.size());
    out.p_cls.resize(out.rel.size() * static_cast<size_t>(K));
    for (int i = 0; i < g; ++i) {
        for (int j = 0; j < g; ++j) {
            for (int a = 0; a < A; ++a) {
                const size_t n = out.anchor_index(i, j, a);
                const int base = a * F;
                RelBox rel;
                rel.x = sigmoid(raw.at(base + 0, i, j)) / g;
                rel.y = sigmoid(raw.at(base + 1, i, j)) / g;
                rel.w = raw.at(base + 2, i, j);
                rel.h = raw.at(base + 3, i, j);
                out.rel[n] = rel;
                out.p_obj[n] = sigmoid(raw.at(base + 4, i, j));
                // softmax with max subtraction
                double mx = -1e300;
                for (int k = 0; k < K; ++k) mx = std::max(mx, raw.at(base + 5 + k, i, j));
                double sum = 0.0;
                for (int k = 0; k < K; ++k) {
                    const double e = std::exp(raw.at(base + 5 + k, i, j) - mx);
                    out.p_cls[n * K + k] = e;
                    sum += e;
                }
                for (int k = 0; k < K; ++k) out.p_cls[n * K + k] /= sum;
            }
        }
    }
    return out;
}

TargetAssignment assign_targets(std::span<const Annotation> gts, const DetectorConfig& cfg) {
    TargetAssignment ta;
    ta.g = cfg.g;
    ta.A = cfg.A;
    ta.cells.assign(static_cast<size_t>(cfg.g) * cfg.g, std::nullopt);
    ta.t.assign(static_cast<size_t>(cfg.g) * cfg.g * cfg.A, 0);

    // Centers first: per cell keep the larger-area gt.
    std::vector<int> owner(static_cast<size_t>(cfg.g) * cfg.g, -1);
    for (size_t n = 0; n < gts.size(); ++n) {
        const Box& b = gts[n].box;
        check_domain(b.w > 0.0 && b.h > 0.0, "assign_targets: degenerate gt box");
        const int i = std::clamp(static_cast<int>(std::floor(b.cy * cfg.g)), 0, cfg.g - 1);
        const int j = std::clamp(static_cast<int>(std::floor(b.cx * cfg.g)), 0, cfg.g - 1);
        const size_t cell = static_cast<size_t>(i) * cfg.g + j;
        if (owner[cell] >= 0) {
            ++ta.collisions;
            if (gts[static_cast<size_t>(owner[cell])].box.area() >= b.area()) continue;
        }
        owner[cell] = static_cast<int>(n);
    }

    for (int i = 0; i < cfg.g; ++i) {
        for (int j = 0; j < cfg.g; ++j) {
            const size_t cell = static_cast<size_t>(i) * cfg.g + j;
            if (owner[cell] < 0) continue;
            const Box& b = gts[static_cast<size_t>(owner[cell])].box;
            double best = -1.0;
            int best_a = -1;
            for (int a = 0; a < cfg.A; ++a) {
                const double v = shape_iou(b.w, b.h, cfg.anchors[static_cast<size_t>(a)].w,
                                           cfg.anchors[static_cast<size_t>(a)].h);
                if (v > best) {
                    best = v;
                    best_a = a;
                }
            }
            if (best > cfg.tau) {
                ta.cells[cell] = CellAssign{owner[cell], best_a};
                ta.t[ta.anchor_index(i, j, best_a)] = 1;
            }
        }
    }
    return ta;
}

double loss_class(const TargetAssignment& ta, const DetectorOutput& out,
                  std::span<const Annotation> gts) {
    double total = 0.0;
    for (int i = 0; i < ta.g; ++i) {
        for (int j = 0; j < ta.g; ++j) {
            const auto& cell = ta.cells[static_cast<size_t>(i) * ta.g + j];
            if (!cell) continue;
            const int k_star = gts[static_cast<size_t>(cell->gt_index)].class_id - 1;
            const size_t n = out.anchor_index(i, j, cell->anchor);
            total += -safe_log(out.p_cls[n * out.K + k_star]);
        }
    }
    return total;
}

double loss_coord(const TargetAssignment& ta, const DetectorOutput& out,
                  std::span<const Annotation> gts, const DetectorConfig& cfg) {
    double total = 0.0;
    for (int i = 0; i < ta.g; ++i) {
        for (int j = 0; j < ta.g; ++j) {
            const auto& cell = ta.cells[static_cast<size_t>(i) * ta.g + j];
            if (!cell) continue;
            const size_t n = out.anchor_index(i, j, cell->anchor);
            const Box dec = decode_to_image(out.rel[n], GridCell{i, j, cfg.g},
                                            cfg.anchors[static_cast<size_t>(cell->anchor)]);
            const Box& gt = gts[static_cast<size_t>(cell->gt_index)].box;
            const double dx = gt.cx - dec.cx;
            const double dy = gt.cy - dec.cy;
            const double dw = gt.w - dec.w;
            const double dh = gt.h - dec.h;
            total += dx * dx + dy * dy + dw * dw + dh * dh;
        }
    }
    return total;
}

double loss_object(const TargetAssignment& ta, const DetectorOutput& out) {
    double total = 0.0;
    const size_t n_anchors = out.p_obj.size();
    for (size_t n = 0; n < n_anchors; ++n) {
        const double p = out.p_obj[n];
        if (ta.t[n]) {
            total += -safe_log(p);
        } else {
            total += -safe_log(1.0 - p);
        }
    }
    return total;
}

double loss_total(const TargetAssignment& ta, const DetectorOutput& out,
                  std::span<const Annotation> gts, const DetectorConfig& cfg) {
    return cfg.lambda_cls * loss_class(ta, out, gts) + cfg.lambda_coor * loss_coord(ta, out, gts, cfg) +
           cfg.lambda_obj * loss_object(ta, out);
}

double loss_total_grad(const TargetAssignment& ta, const nn::Tensor& raw,
                       const DetectorOutput& act, std::span<const Annotation> gts,
                       const DetectorConfig& cfg, nn::Tensor& graw) {
    const int g = cfg.g, A = cfg.A, K = cfg.K, F = cfg.features();
    check(graw.c == raw.c && graw.h == raw.h && graw.w == raw.w,
          "loss_total_grad: gradient tensor shape mismatch");

    // Objectness covers every anchor.
    for (int i = 0; i < g; ++i) {
        for (int j = 0; j < g; ++j) {
            for (int a = 0; a < A; ++a) {
                const size_t n = act.anchor_index(i, j, a);
                const double t = ta.t[n] ? 1.0 : 0.0;
                graw.at(a * F + 4, i, j) += cfg.lambda_obj * (act.p_obj[n] - t);
            }
        }
    }

    // Class and coordinate terms only at responsible anchors.
    for (int i = 0; i < g; ++i) {
        for (int j = 0; j < g; ++j) {
            const auto& cell = ta.cells[static_cast<size_t>(i) * g + j];
            if (!cell) continue;
            const int a = cell->anchor;
            const size_t n = act.anchor_index(i, j, a);
            const int base = a * F;
            const int k_star = gts[static_cast<size_t>(cell->gt_index)].class_id - 1;
            for (int k = 0; k < K; ++k) {
                const double delta = act.p_cls[n * K + k] - (k == k_star ? 1.0 : 0.0);
                graw.at(base + 5 + k, i, j) += cfg.lambda_cls * delta;
            }

            const AnchorSpec& anchor = cfg.anchors[static_cast<size_t>(a)];
            const Box dec = decode_to_image(act.rel[n], GridCell{i, j, g}, anchor);
            const Box& gt = gts[static_cast<size_t>(cell->gt_index)].box;
            const double sx = act.rel[n].x * g;  // sigmoid value of the raw x
            const double sy = act.rel[n].y * g;
            graw.at(base + 0, i, j) +=
                cfg.lambda_coor * 2.0 * (dec.cx - gt.cx) * sx * (1.0 - sx) / g;
            graw.at(base + 1, i, j) +=
                cfg.lambda_coor * 2.0 * (dec.cy - gt.cy) * sy * (1.0 - sy) / g;
            graw.at(base + 2, i, j) += cfg.lambda_coor * 2.0 * (dec.w - gt.w) * dec.w;
            graw.at(base + 3, i, j) += cfg.lambda_coor * 2.0 * (dec.h - gt.h) * dec.h;
        }
    }
    return loss_total(ta, act, gts, cfg);
}

std::vector<Detection> decode(const DetectorOutput& out, const DetectorConfig& cfg,
                              double obj_threshold, double dedup_iou) {
    std::vector<Detection> all;
    all.reserve(out.p_obj.size());
    for (int i = 0; i < out.g; ++i) {
        for (int j = 0; j < out.g; ++j) {
            for (int a = 0; a < out.A; ++a) {
                const size_t n = out.anchor_index(i, j, a);
                if (out.p_obj[n] < obj_threshold) continue;
                Detection d;
                d.box = decode_to_image(out.rel[n], GridCell{i, j, out.g},
                                        cfg.anchors[static_cast<size_t>(a)]);
                int best_k = 0;
                double best_p = out.p_cls[n * out.K];
                for (int k = 1; k < out.K; ++k) {
                    if (out.p_cls[n * out.K + k] > best_p) {
                        best_p = out.p_cls[n * out.K + k];
                        best_k = k;
                    }
                }
                d.class_id = best_k + 1;
                d.p_obj = out.p_obj[n];
                d.score = d.p_obj * best_p;
                d.i = i;
                d.j = j;
                d.a = a;
                all.push_back(d);
            }
        }
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (dedup_iou >= kDedupDisabled) return all;
    std::vector<Detection> kept;
    for (const auto& d : all) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.class_id == d.class_id && iou(k.box, d.box) > dedup_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

nn::NetSpec DetectorModel::build_net(const DetectorConfig& cfg) {
    nn::NetSpec net;
    int in_c = 3;
    for (int c : cfg.channels) {
        net.conv(in_c, c, 3, 1).relu().maxpool2();
        in_c = c;
    }
    net.conv(in_c, in_c, 3, 1).relu();
    net.conv(in_c, cfg.A * cfg.features(), 1, 0);
    net.finalize();
    return net;
}

DetectorModel DetectorModel::init(const DetectorConfig& cfg, uint64_t seed) {
    cfg.validate();
    DetectorModel m;
    m.cfg = cfg;
    m.net = build_net(cfg);
    Rng rng = Rng::stream(seed, "detector-init");
    m.params = m.net.init_params(rng);
    return m;
}

nn::Tensor DetectorModel::forward_raw(const nn::Tensor& input, nn::Workspace* ws) const {
    check(input.c == 3 && input.h == cfg.input_size && input.w == cfg.input_size,
          "DetectorModel: input size mismatch");
    nn::Tensor raw = nn::net_forward(net, params, input, ws);
    check(raw.c == cfg.A * cfg.features() && raw.h == cfg.g && raw.w == cfg.g,
          "DetectorModel: head shape mismatch");
    return raw;
}

DetectorOutput DetectorModel::forward(const ImageBuffer& img) const {
    return activate(forward_raw(nn::image_to_tensor(img)), cfg);
}

void save_detector_checkpoint(const DetectorCheckpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "save_detector_checkpoint: cannot open " + path.string());
    out.write("MDETCKP1", 8);
    nlohmann::json header;
    header["kind"] = "detector";
    header["config"] = ckpt.model.cfg;
    header["epochs_done"] = ckpt.epochs_done;
    binio::write_string(out, header.dump());
    binio::write_doubles(out, ckpt.model.params);
    binio::write_doubles(out, ckpt.velocity);
    check(out.good(), "save_detector_checkpoint: write failed");
}

DetectorCheckpoint load_detector_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "load_detector_checkpoint: cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    check(in.good() && std::string(magic, 8) == "MDETCKP1",
          "load_detector_checkpoint: bad magic in " + path.string());
    nlohmann::json header = nlohmann::json::parse(binio::read_string(in));
    check(header.value("kind", "") == "detector",
          "load_detector_checkpoint: not a detector checkpoint");
    DetectorCheckpoint ckpt;
    ckpt.model.cfg = header.at("config").get<DetectorConfig>();
    ckpt.model.cfg.validate();
    ckpt.model.net = DetectorModel::build_net(ckpt.model.cfg);
    ckpt.epochs_done = header.value("epochs_done", 0);
    ckpt.model.params = binio::read_doubles(in);
    check(ckpt.model.params.size() == ckpt.model.net.n_params,
          "load_detector_checkpoint: parameter count mismatch");
    ckpt.velocity = binio::read_doubles(in);
    return ckpt;
}

}  // namespace mergedet
