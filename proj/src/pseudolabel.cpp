#include "mergedet/pseudolabel.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "mergedet/common.hpp"
#include "mergedet/crops.hpp"

namespace mergedet {

using nlohmann::json;

void PseudoLabelParams::validate() const {
    check_arg(theta1 >= 0.0 && theta1 <= 1.0, "PseudoLabelParams: theta1 outside [0,1]");
    check_arg(theta2 > 0.0 && theta2 <= 1.0, "PseudoLabelParams: theta2 outside (0,1]");
    check_arg(beta >= 0.0 && beta <= 1.0, "PseudoLabelParams: beta outside [0,1]");
    check_arg(m >= 0, "PseudoLabelParams: m must be >= 0");
    check_arg(s >= 1, "PseudoLabelParams: s must be >= 1");
    check_arg(obj_prefilter >= 0.0 && obj_prefilter <= 1.0,
              "PseudoLabelParams: obj_prefilter outside [0,1]");
    check_arg(dedup_iou >= 0.0, "PseudoLabelParams: dedup_iou must be >= 0");
    check_arg(warmup_epochs >= 0, "PseudoLabelParams: warmup_epochs must be >= 0");
}

PseudoLabelParams PseudoLabelParams::strict() const {
    PseudoLabelParams p = *this;
    p.obj_prefilter = 0.0;
    p.dedup_iou = kDedupDisabled;
    return p;
}

void to_json(json& j, const PseudoLabelParams& p) {
    j = json{{"theta1", p.theta1},
             {"theta2", p.theta2},
             {"beta", p.beta},
             {"m", p.m},
             {"s", p.s},
             {"obj_prefilter", p.obj_prefilter},
             {"dedup_iou", p.dedup_iou},
             {"warmup_epochs", p.warmup_epochs}};
}

void from_json(const json& j, PseudoLabelParams& p) {
    PseudoLabelParams def;
    p.theta1 = j.value("theta1", def.theta1);
    p.theta2 = j.value("theta2", def.theta2);
    p.beta = j.value("beta", def.beta);
    p.m = j.value("m", def.m);
    p.s = j.value("s", def.s);
    p.obj_prefilter = j.value("obj_prefilter", def.obj_prefilter);
    p.dedup_iou = j.value("dedup_iou", def.dedup_iou);
    p.warmup_epochs = j.value("warmup_epochs", def.warmup_epochs);
}

std::vector<Detection> candidate_rois(std::span<const Detection> dets,
                                      std::span<const Annotation> gts,
                                      const PseudoLabelParams& params) {
    std::vector<Box> gt_boxes;
    gt_boxes.reserve(gts.size());
    for (const auto& g : gts) gt_boxes.push_back(g.box);

    std::vector<Detection> passed;
    for (const auto& d : dets) {
        if (d.p_obj < params.obj_prefilter) continue;
        const auto [overlap, idx] = max_iou(d.box, gt_boxes);
        if (overlap > params.theta1) continue;
        passed.push_back(d);
    }
    if (params.dedup_iou >= kDedupDisabled) return passed;

    // Class-agnostic greedy suppression in score order.
    std::stable_sort(passed.begin(), passed.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const auto& d : passed) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (iou(k.box, d.box) > params.dedup_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

std::vector<double> mix_class(std::span<const double> p_det, std::span<const double> hbar,
                              double beta) {
    check_arg(hbar.size() == p_det.size() + 1, "mix_class: h-bar must have K+1 entries");
    const size_t K = p_det.size();
    double in_mass = 0.0;
    for (size_t k = 0; k < K; ++k) in_mass += hbar[k];
    check(in_mass > 0.0, "mix_class: h-bar carries no in-distribution mass past the gate");
    std::vector<double> out(K);
    for (size_t k = 0; k < K; ++k) {
        out[k] = beta * p_det[k] + (1.0 - beta) * (hbar[k] / in_mass);
    }
    return out;
}

double pseudo_object(std::span<const double> hbar) {
    check_arg(hbar.size() >= 2, "pseudo_object: h-bar too short");
    double best = 0.0;
    for (size_t k = 0; k + 1 < hbar.size(); ++k) best = std::max(best, hbar[k]);
    return best;
}

PseudoLabelSet generate(const ImageBuffer& image, const DetectorOutput& out,
                        const DetectorConfig& cfg, std::span<const Annotation> gts,
                        const ProxyScorer& proxy, const PseudoLabelParams& params, int epoch,
                        Rng& rng, GenerateStats* stats) {
    params.validate();
    PseudoLabelSet result;
    if (epoch < params.warmup_epochs) return result;

    const std::vector<Detection> all = decode(out, cfg, 0.0, kDedupDisabled);
    std::vector<Detection> cands = candidate_rois(all, gts, params);
    if (stats) stats->filtered += static_cast<long>(all.size() - cands.size());

    // Canonical scoring order so rng consumption does not depend on scores.
    std::sort(cands.begin(), cands.end(), [&](const Detection& x, const Detection& y) {
        return out.anchor_index(x.i, x.j, x.a) < out.anchor_index(y.i, y.j, y.a);
    });

    const int K = proxy.num_classes();
    check(K == cfg.K, "generate: proxy and detector class counts differ");
    for (const auto& cand : cands) {
        int x0, y0, w, h;
        if (!box_pixel_rect(cand.box, image.width, image.height, x0, y0, w, h)) {
            if (stats) ++stats->skipped_degenerate;
            continue;
        }
        const ImageBuffer crop = extract_rect(image, x0, y0, w, h);
        const std::vector<double> hbar = proxy.score(crop, rng);
        check(static_cast<int>(hbar.size()) == K + 1, "generate: scorer returned wrong size");

        int arg = 0;
        for (int k = 1; k <= K; ++k) {
            if (hbar[static_cast<size_t>(k)] > hbar[static_cast<size_t>(arg)]) arg = k;
        }
        double max_in = 0.0;
        for (int k = 0; k < K; ++k) max_in = std::max(max_in, hbar[static_cast<size_t>(k)]);
        if (arg == K || max_in < params.theta2) {
            if (stats) ++stats->gated_out;
            continue;
        }

        PseudoLabel pl;
        pl.box = cand.box;
        const size_t n = out.anchor_index(cand.i, cand.j, cand.a);
        pl.class_probs = mix_class(out.cls_at(n), hbar, params.beta);
        pl.obj_prob = pseudo_object(hbar);
        pl.i = cand.i;
        pl.j = cand.j;
        pl.a = cand.a;
        pl.epoch = epoch;
        pl.hbar = hbar;
        result.push_back(std::move(pl));
    }
    return result;
}

void append_audit(std::ostream& out, const std::string& image_id, const PseudoLabel& label) {
    json j;
    j["epoch"] = label.epoch;
    j["image"] = image_id;
    j["cell"] = {label.i, label.j};
    j["anchor"] = label.a;
    j["box"] = {{"cx", label.box.cx}, {"cy", label.box.cy}, {"w", label.box.w}, {"h", label.box.h}};
    j["pobj"] = label.obj_prob;
    j["pcls"] = label.class_probs;
    j["hbar"] = label.hbar;
    out << j.dump() << "\n";
}

std::vector<AuditRecord> load_audit(const std::filesystem::path& path) {
    std::ifstream in(path);
    check(in.good(), "load_audit: cannot open " + path.string());
    std::vector<AuditRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        AuditRecord rec;
        rec.epoch = j.at("epoch").get<int>();
        rec.image = j.at("image").get<std::string>();
        rec.i = j.at("cell").at(0).get<int>();
        rec.j = j.at("cell").at(1).get<int>();
        rec.a = j.at("anchor").get<int>();
        rec.box.cx = j.at("box").at("cx").get<double>();
        rec.box.cy = j.at("box").at("cy").get<double>();
        rec.box.w = j.at("box").at("w").get<double>();
        rec.box.h = j.at("box").at("h").get<double>();
        rec.pobj = j.at("pobj").get<double>();
        rec.pcls = j.at("pcls").get<std::vector<double>>();
        rec.hbar = j.at("hbar").get<std::vector<double>>();
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace mergedet
