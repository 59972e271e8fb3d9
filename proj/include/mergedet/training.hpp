#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mergedet/detector.hpp"
#include "mergedet/manifest.hpp"
#include "mergedet/pseudolabel.hpp"

namespace mergedet {

enum class TrainMode { kBaseline, kOurs, kUpper };

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s);

struct OptimConfig {
    double lr = 0.02;
    double momentum = 0.9;
    std::vector<int> milestones;  // epochs at which lr is multiplied by gamma
    double gamma = 0.1;
    double clip_norm = 10.0;  // global gradient-norm clip; <= 0 disables

    double lr_at(int epoch) const;
};

struct TrainConfig {
    TrainMode mode = TrainMode::kBaseline;
    int epochs = 10;
    OptimConfig optim;
    int batch_size = 16;
    uint64_t seed = 1;
    double lambda_pcls = 1.0;
    double lambda_pobj = 1.0;
    // Keep the plain objectness term alongside the pseudo BCE instead of
    // replacing it at pseudo-labeled anchors.
    bool pseudo_keep_both = false;
    PseudoLabelParams pseudo;
    DetectorConfig det;

    void validate() const;
};

// KL(p_tilde || p) with 0*log 0 = 0 and the probability floor on p.
double loss_pseudo_class(std::span<const double> p_tilde, std::span<const double> p_det);

// Soft-target binary cross-entropy, floor inside both logs.
double loss_pseudo_object(double pt, double p);

struct EpochMetrics {
    int epoch = 0;
    double loss_cls = 0.0;
    double loss_coord = 0.0;
    double loss_obj = 0.0;
    double loss_pcls = 0.0;
    double loss_pobj = 0.0;
    long pseudo_emitted = 0;
    long pseudo_gated_out = 0;
    long pseudo_filtered = 0;
    long pseudo_skipped = 0;
    long assign_collisions = 0;
    // Wall time is reported separately from the deterministic metrics line.
    double wall_s = 0.0;

    double loss_sum() const { return loss_cls + loss_coord + loss_obj + loss_pcls + loss_pobj; }
};

struct TrainSinks {
    std::function<void(const EpochMetrics&)> on_epoch;
    std::function<void(const std::string& image_id, const PseudoLabel&)> on_pseudo;
};

struct StepStats {
    double loss_cls = 0.0, loss_coord = 0.0, loss_obj = 0.0, loss_pcls = 0.0, loss_pobj = 0.0;
    long emitted = 0, gated_out = 0, filtered = 0, skipped = 0, collisions = 0;
};

// One optimizer update over a batch of record indices into `train`. Pseudo
// terms appear only in mode ours at or past warmup; their targets carry no
// gradient. Audit entries (image id, label) are appended when given.
StepStats train_step(DetectorModel& model, nn::SgdMomentum& opt, const DatasetManifest& train,
                     const ImageStore& store, std::span<const size_t> batch,
                     const TrainConfig& cfg, const ProxyScorer* proxy, int epoch,
                     std::vector<std::pair<std::string, PseudoLabel>>* audit = nullptr);

struct TrainResult {
    DetectorModel model;
    std::vector<EpochMetrics> metrics;
    std::vector<double> velocity;
    int epochs_done = 0;
};

TrainResult run_training(const DatasetManifest& train, const ImageStore& store,
                         const TrainConfig& cfg, const ProxyScorer* proxy,
                         const TrainSinks& sinks = {}, const DetectorCheckpoint* resume = nullptr);

}  // namespace mergedet
