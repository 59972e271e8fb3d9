#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mergedet/detector.hpp"
#include "mergedet/proxy.hpp"

namespace mergedet {

struct PseudoLabelParams {
    double theta1 = 0.5;        // gt-overlap exclusion: keep iff max IoU <= theta1
    double theta2 = 0.8;        // confidence gate on max in-distribution mass
    double beta = 0.0;          // class mixing toward the detector's own estimate
    int m = 2;                  // patch-drop ensemble size
    int s = 3;                  // patch grid per side
    double obj_prefilter = 0.25;
    double dedup_iou = 0.45;    // class-agnostic; >= 1 disables
    int warmup_epochs = 2;

    void validate() const;
    // Prefilter off, dedup off: one proxy query per surviving box.
    PseudoLabelParams strict() const;
};

void to_json(nlohmann::json& j, const PseudoLabelParams& p);
void from_json(const nlohmann::json& j, PseudoLabelParams& p);

struct PseudoLabel {
    Box box;                          // the producing detection
    std::vector<double> class_probs;  // K entries, sums to 1
    double obj_prob = 0.0;
    int i = 0, j = 0, a = 0;          // source anchor
    int epoch = 0;
    std::vector<double> hbar;         // gating vector, kept for audits
};

using PseudoLabelSet = std::vector<PseudoLabel>;

// Pixel -> h-bar abstraction so the generation engine can be driven by the
// real patch-drop ensemble or by test stubs.
class ProxyScorer {
public:
    virtual ~ProxyScorer() = default;
    virtual std::vector<double> score(const ImageBuffer& crop, Rng& rng) const = 0;
    virtual int num_classes() const = 0;  // K
};

class EnsembleScorer : public ProxyScorer {
public:
    EnsembleScorer(const ProxyModel& model, int m, int s) : model_(&model), m_(m), s_(s) {}
    std::vector<double> score(const ImageBuffer& crop, Rng& rng) const override {
        return ensemble_predict(*model_, crop, m_, s_, rng).p;
    }
    int num_classes() const override { return model_->cfg.K; }

private:
    const ProxyModel* model_;
    int m_;
    int s_;
};

// Drops detections overlapping a ground truth (max IoU > theta1) or below the
// objectness prefilter, then class-agnostic greedy dedup. Sources preserved.
std::vector<Detection> candidate_rois(std::span<const Detection> dets,
                                      std::span<const Annotation> gts,
                                      const PseudoLabelParams& params);

// Convex mix of the detector's class estimate with h-bar after dropping the
// rejection entry and renormalizing the first K.
std::vector<double> mix_class(std::span<const double> p_det, std::span<const double> hbar,
                              double beta);

// Pseudo objectness: max over the first K entries of the raw h-bar.
double pseudo_object(std::span<const double> hbar);

struct GenerateStats {
    long filtered = 0;            // removed by theta1 / prefilter / dedup
    long gated_out = 0;           // rejected by the confidence gate
    long skipped_degenerate = 0;  // crop collapsed after pixel rounding
};

// The full per-image generation pass for one epoch. Candidates are scored in
// canonical (i, j, a) order; returns the empty set during warmup.
PseudoLabelSet generate(const ImageBuffer& image, const DetectorOutput& out,
                        const DetectorConfig& cfg, std::span<const Annotation> gts,
                        const ProxyScorer& proxy, const PseudoLabelParams& params, int epoch,
                        Rng& rng, GenerateStats* stats = nullptr);

// Audit dump: one JSON line per emitted pseudo-label.
struct AuditRecord {
    int epoch = 0;
    std::string image;
    int i = 0, j = 0, a = 0;
    Box box;
    double pobj = 0.0;
    std::vector<double> pcls;
    std::vector<double> hbar;
};

void append_audit(std::ostream& out, const std::string& image_id, const PseudoLabel& label);
std::vector<AuditRecord> load_audit(const std::filesystem::path& path);

}  // namespace mergedet
