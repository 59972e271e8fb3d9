#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergedet/detector.hpp"
#include "mergedet/manifest.hpp"

namespace mergedet {

// Greedy matching: detections must arrive sorted by descending score; each
// matches the highest-IoU unmatched same-class gt at or above iou_thr (TP),
// otherwise FP. A gt matches at most once.
std::vector<uint8_t> match_detections(std::span<const Detection> dets,
                                      std::span<const Annotation> gts, double iou_thr);

// All-point interpolated area under precision-recall, from score-ordered
// TP/FP flags. n_gt == 0 with detections present is undefined (NaN).
double average_precision(std::span<const uint8_t> flags, int n_gt);

struct EvalParams {
    double obj_threshold = 0.01;
    double dedup_iou = 0.45;
    double iou_thr = 0.5;
};

struct EvalReport {
    std::map<int, double> ap;        // class -> AP, classes with gts only
    double mean_ap = 0.0;
    std::map<int, int> gt_counts;
    std::map<int, std::string> class_names;
    int n_detections = 0;
    std::vector<int> undefined_classes;  // detections but zero gts, excluded with a warning
    nlohmann::json fingerprint;
};

// Core evaluator over already-decoded per-image detections (index-aligned
// with test.records); the model wrapper below decodes with EvalParams.
EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& per_image,
                               const DatasetManifest& test, const EvalParams& params);

EvalReport evaluate(const DetectorModel& model, const DatasetManifest& test,
                    const ImageStore& store, const EvalParams& params = {});

struct ComparisonTable {
    std::vector<std::string> arms;
    std::vector<int> class_ids;
    std::map<int, std::string> class_names;
    std::vector<std::vector<double>> ap;  // [class][arm]
    std::vector<double> avg;              // [arm]
};

ComparisonTable compare(const std::vector<std::pair<std::string, EvalReport>>& reports);
std::string table_text(const ComparisonTable& table);
nlohmann::json table_json(const ComparisonTable& table);

}  // namespace mergedet
