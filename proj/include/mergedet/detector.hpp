#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "mergedet/geometry.hpp"
#include "mergedet/manifest.hpp"
#include "mergedet/nn.hpp"

namespace mergedet {

struct DetectorConfig {
    int input_size = 48;  // square input, must equal g * 2^|channels|
    int g = 6;            // grid resolution
    int A = 2;            // anchors per cell
    int K = 6;            // class count
    std::vector<AnchorSpec> anchors = {{0, 0.26, 0.26}, {1, 0.38, 0.38}};
    double tau = 0.4;  // IoU gate for class/coordinate losses
    double lambda_cls = 1.0;
    double lambda_coor = 1.0;
    double lambda_obj = 1.0;
    std::vector<int> channels = {12, 24, 32};  // backbone widths, one per pooling stage

    void validate() const;
    int features() const { return 5 + K; }
    int num_anchors_total() const { return g * g * A; }
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

// Activated prediction volume: one RelBox, objectness probability and a
// normalized K-way class distribution per (cell, anchor).
struct DetectorOutput {
    int g = 0, A = 0, K = 0;
    std::vector<RelBox> rel;     // g*g*A
    std::vector<double> p_obj;   // g*g*A
    std::vector<double> p_cls;   // g*g*A*K

    size_t anchor_index(int i, int j, int a) const {
        return (static_cast<size_t>(i) * g + j) * A + a;
    }
    std::span<const double> cls_at(size_t anchor_idx) const {
        return {p_cls.data() + anchor_idx * K, static_cast<size_t>(K)};
    }
};

// Raw head tensor -> activated output. Raw layout: channel a*(5+K)+f at
// spatial (i, j); f = {x, y, w, h, obj, class logits}. x, y are squashed to
// [0, 1/g]; w, h pass through as log-scale factors.
DetectorOutput activate(const nn::Tensor& raw, const DetectorConfig& cfg);

struct CellAssign {
    int gt_index = -1;
    int anchor = -1;  // responsible anchor a'
};

struct TargetAssignment {
    int g = 0, A = 0;
    std::vector<std::optional<CellAssign>> cells;  // g*g
    std::vector<uint8_t> t;                        // g*g*A objectness targets
    int collisions = 0;

    size_t anchor_index(int i, int j, int a) const {
        return (static_cast<size_t>(i) * g + j) * A + a;
    }
};

// Ground truths are assigned to the cell holding their center; within the
// cell the anchor with the largest shape IoU is solely responsible, and only
// when that IoU exceeds tau. Colliding centers keep the larger-area gt.
TargetAssignment assign_targets(std::span<const Annotation> gts, const DetectorConfig& cfg);

double loss_class(const TargetAssignment& ta, const DetectorOutput& out,
                  std::span<const Annotation> gts);
double loss_coord(const TargetAssignment& ta, const DetectorOutput& out,
                  std::span<const Annotation> gts, const DetectorConfig& cfg);
double loss_object(const TargetAssignment& ta, const DetectorOutput& out);
double loss_total(const TargetAssignment& ta, const DetectorOutput& out,
                  std::span<const Annotation> gts, const DetectorConfig& cfg);

// Gradient of loss_total with respect to the raw head tensor, through the
// activation chain. Adds into graw; returns the loss value.
double loss_total_grad(const TargetAssignment& ta, const nn::Tensor& raw,
                       const DetectorOutput& act, std::span<const Annotation> gts,
                       const DetectorConfig& cfg, nn::Tensor& graw);

struct Detection {
    Box box;
    int class_id = 0;    // 1..K
    double score = 0.0;  // p_obj * max_k p_cls
    double p_obj = 0.0;
    int i = 0, j = 0, a = 0;  // producing anchor
};

// Suppression uses strict comparison, so a dedup threshold of 1.0 disables it.
inline constexpr double kDedupDisabled = 1.0;

// Decodes every (cell, anchor) to image coordinates, keeps p_obj >=
// obj_threshold, then greedy same-class suppression at IoU > dedup_iou.
// Result sorted by descending score.
std::vector<Detection> decode(const DetectorOutput& out, const DetectorConfig& cfg,
                              double obj_threshold, double dedup_iou);

struct DetectorModel {
    DetectorConfig cfg;
    nn::NetSpec net;
    std::vector<double> params;

    static DetectorModel init(const DetectorConfig& cfg, uint64_t seed);
    static nn::NetSpec build_net(const DetectorConfig& cfg);

    nn::Tensor forward_raw(const nn::Tensor& input, nn::Workspace* ws = nullptr) const;
    DetectorOutput forward(const ImageBuffer& img) const;
};

struct DetectorCheckpoint {
    DetectorModel model;
    int epochs_done = 0;
    std::vector<double> velocity;  // optimizer state, kept for resume
};

void save_detector_checkpoint(const DetectorCheckpoint& ckpt, const std::filesystem::path& path);
DetectorCheckpoint load_detector_checkpoint(const std::filesystem::path& path);

}  // namespace mergedet
