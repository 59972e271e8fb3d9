#include "mergedet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "mergedet/common.hpp"

namespace mergedet {

std::vector<uint8_t> match_detections(std::span<const Detection> dets,
                                      std::span<const Annotation> gts, double iou_thr) {
    for (size_t d = 1; d < dets.size(); ++d) {
        check_arg(dets[d - 1].score >= dets[d].score,
                  "match_detections: detections must be sorted by descending score");
    }
    std::vector<uint8_t> matched(gts.size(), 0);
    std::vector<uint8_t> flags(dets.size(), 0);
    for (size_t d = 0; d < dets.size(); ++d) {
        double best = -1.0;
        int best_g = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (matched[g] || gts[g].class_id != dets[d].class_id) continue;
            const double v = iou(dets[d].box, gts[g].box);
            if (v >= iou_thr && v > best) {
                best = v;
                best_g = static_cast<int>(g);
            }
        }
        if (best_g >= 0) {
            matched[static_cast<size_t>(best_g)] = 1;
            flags[d] = 1;
        }
    }
    return flags;
}

double average_precision(std::span<const uint8_t> flags, int n_gt) {
    check_arg(n_gt >= 0, "average_precision: negative gt count");
    if (n_gt == 0) {
        return flags.empty() ? 0.0 : std::numeric_limits<double>::quiet_NaN();
    }
    if (flags.empty()) return 0.0;
    std::vector<double> precision(flags.size());
    int tp = 0;
    for (size_t d = 0; d < flags.size(); ++d) {
        if (flags[d]) ++tp;
        precision[d] = static_cast<double>(tp) / static_cast<double>(d + 1);
    }
    // Monotone envelope from the right, then one recall step of 1/n_gt per TP.
    for (size_t d = flags.size() - 1; d-- > 0;) {
        precision[d] = std::max(precision[d], precision[d + 1]);
    }
    double ap = 0.0;
    for (size_t d = 0; d < flags.size(); ++d) {
        if (flags[d]) ap += precision[d];
    }
    return ap / static_cast<double>(n_gt);
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& per_image,
                               const DatasetManifest& test, const EvalParams& params) {
    check_arg(per_image.size() == test.records.size(),
              "evaluate_detections: detection list not aligned with records");
    EvalReport report;
    report.class_names = test.class_table;
    report.fingerprint = {{"obj_threshold", params.obj_threshold},
                          {"dedup_iou", params.dedup_iou},
                          {"iou_thr", params.iou_thr}};

    for (const auto& [cls, name] : test.class_table) report.gt_counts[cls] = 0;
    for (const auto& rec : test.records) {
        for (const auto& ann : rec.annotations) report.gt_counts[ann.class_id] += 1;
    }

    // (score, flag) pooled per class across images; per-image matching first.
    std::map<int, std::vector<std::pair<double, uint8_t>>> pooled;
    for (size_t r = 0; r < test.records.size(); ++r) {
        const auto& dets = per_image[r];
        const auto flags = match_detections(dets, test.records[r].annotations, params.iou_thr);
        for (size_t d = 0; d < dets.size(); ++d) {
            pooled[dets[d].class_id].emplace_back(dets[d].score, flags[d]);
            ++report.n_detections;
        }
    }

    double sum = 0.0;
    int classes_in_mean = 0;
    for (const auto& [cls, n_gt] : report.gt_counts) {
        auto it = pooled.find(cls);
        std::vector<uint8_t> flags;
        if (it != pooled.end()) {
            std::stable_sort(it->second.begin(), it->second.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            for (const auto& [score, f] : it->second) flags.push_back(f);
        }
        if (n_gt == 0) {
            if (!flags.empty()) {
                report.undefined_classes.push_back(cls);
                std::fprintf(stderr,
                             "warning: class %d has detections but no ground truth; AP undefined, "
                             "excluded from the mean\n",
                             cls);
            }
            continue;
        }
        const double ap = average_precision(flags, n_gt);
        report.ap[cls] = ap;
        sum += ap;
        ++classes_in_mean;
    }
    report.mean_ap = classes_in_mean > 0 ? sum / classes_in_mean : 0.0;
    return report;
}

EvalReport evaluate(const DetectorModel& model, const DatasetManifest& test,
                    const ImageStore& store, const EvalParams& params) {
    check_arg(!test.records.empty(), "evaluate: empty test manifest");
    for (const auto& [cls, name] : test.class_table) {
        check_arg(cls >= 1 && cls <= model.cfg.K,
                  "evaluate: test class " + std::to_string(cls) + " outside the model's 1..K");
    }
    std::vector<std::vector<Detection>> per_image(test.records.size());
    std::exception_ptr failure;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(test.records.size()); ++r) {
        try {
            const auto& rec = test.records[static_cast<size_t>(r)];
            const DetectorOutput out = model.forward(store.get(rec));
            per_image[static_cast<size_t>(r)] =
                decode(out, model.cfg, params.obj_threshold, params.dedup_iou);
        } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    return evaluate_detections(per_image, test, params);
}

ComparisonTable compare(const std::vector<std::pair<std::string, EvalReport>>& reports) {
    check_arg(!reports.empty(), "compare: no reports");
    ComparisonTable table;
    const auto& first = reports.front().second;
    for (const auto& [cls, ap] : first.ap) table.class_ids.push_back(cls);
    table.class_names = first.class_names;
    for (const auto& [name, rep] : reports) {
        table.arms.push_back(name);
        check_arg(rep.ap.size() == first.ap.size(), "compare: reports have mismatched classes");
        for (int cls : table.class_ids) {
            check_arg(rep.ap.count(cls) > 0,
                      "compare: class " + std::to_string(cls) + " missing from report " + name);
        }
    }
    table.ap.assign(table.class_ids.size(), std::vector<double>(reports.size(), 0.0));
    table.avg.assign(reports.size(), 0.0);
    for (size_t arm = 0; arm < reports.size(); ++arm) {
        for (size_t c = 0; c < table.class_ids.size(); ++c) {
            table.ap[c][arm] = reports[arm].second.ap.at(table.class_ids[c]);
        }
        table.avg[arm] = reports[arm].second.mean_ap;
    }
    return table;
}

std::string table_text(const ComparisonTable& table) {
    std::ostringstream out;
    size_t name_w = 6;
    for (int cls : table.class_ids) {
        auto it = table.class_names.find(cls);
        if (it != table.class_names.end()) name_w = std::max(name_w, it->second.size());
    }
    out << std::string(name_w, ' ');
    for (const auto& arm : table.arms) {
        out << "  " << arm;
        if (arm.size() < 10) out << std::string(10 - arm.size(), ' ');
    }
    out << "\n";
    auto row = [&](const std::string& label, const std::vector<double>& values) {
        out << label << std::string(name_w - label.size(), ' ');
        double best = -1.0;
        for (double v : values) best = std::max(best, v);
        for (double v : values) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "  %6.2f%s", 100.0 * v, v == best ? "*" : " ");
            out << buf;
            out << "   ";
        }
        out << "\n";
    };
    for (size_t c = 0; c < table.class_ids.size(); ++c) {
        auto it = table.class_names.find(table.class_ids[c]);
        const std::string label =
            it != table.class_names.end() ? it->second : std::to_string(table.class_ids[c]);
        row(label, table.ap[c]);
    }
    row("Avg", table.avg);
    return out.str();
}

nlohmann::json table_json(const ComparisonTable& table) {
    nlohmann::json j;
    j["arms"] = table.arms;
    nlohmann::json rows = nlohmann::json::object();
    for (size_t c = 0; c < table.class_ids.size(); ++c) {
        const int cls = table.class_ids[c];
        auto it = table.class_names.find(cls);
        const std::string label = it != table.class_names.end() ? it->second : std::to_string(cls);
        rows[label] = table.ap[c];
    }
    j["per_class"] = rows;
    j["avg"] = table.avg;
    return j;
}

}  // namespace mergedet
