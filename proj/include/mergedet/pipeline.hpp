#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergedet/evaluation.hpp"
#include "mergedet/proxy.hpp"
#include "mergedet/synth.hpp"
#include "mergedet/training.hpp"

namespace mergedet {

struct ReproduceParams {
    std::vector<uint64_t> seeds = {101, 202, 303};  // one training run per seed per arm
    double min_gain_points = 2.0;         // required (ours - baseline) in mAP points
    double max_upper_deficit_points = 1.0;  // allowed (ours - upper) in mAP points
    double missing_rate_lo = 0.45;
    double missing_rate_hi = 0.55;
};

struct TrainOptions {
    int epochs = 10;
    OptimConfig optim;
    int batch_size = 16;
    double lambda_pcls = 1.0;
    double lambda_pobj = 1.0;
    bool pseudo_keep_both = false;
};

// The single CLI-facing config file; flags override individual values.
struct RunConfig {
    uint64_t seed = 0;
    SynthConfig synth;
    int train_images = 200;
    int test_images = 60;
    int proxy_images = 100;
    DetectorConfig det;
    ProxyConfig proxy;
    PseudoLabelParams pseudo;
    TrainOptions train;
    EvalParams eval;
    ReproduceParams repro;
    std::filesystem::path data_dir;     // paths.data
    std::filesystem::path crops_dir;    // paths.crops
    std::filesystem::path proxy_path;   // paths.proxy
    nlohmann::json raw;  // effective config, echoed into every output directory

    TrainConfig train_config(TrainMode mode, uint64_t train_seed) const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Output directories are built in "<out>.staging" and renamed into place on
// commit, so interrupted commands never leave a partial result at <out>.
class StagedDir {
public:
    StagedDir(std::filesystem::path final_path, bool force);
    ~StagedDir();
    const std::filesystem::path& dir() const { return staging_; }
    void commit();

private:
    std::filesystem::path final_;
    std::filesystem::path staging_;
    bool committed_ = false;
};

struct SynthOutputs {
    double missing_rate = 0.0;
    size_t crop_count = 0;
    std::filesystem::path dir;
};

// Generates the train/test/proxy splits, builds the merged training set from
// the two stripped halves, extracts proxy crops, writes everything under
// <out> and reports the measured missing-label rate.
SynthOutputs cmd_synth(const RunConfig& cfg, const std::filesystem::path& out, bool force = false);

struct ProxyOutputs {
    double holdout_accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::filesystem::path checkpoint;
};

ProxyOutputs cmd_train_proxy(const RunConfig& cfg, const std::filesystem::path& crops_dir,
                             const std::filesystem::path& out, bool force = false);

struct TrainOutputs {
    std::filesystem::path checkpoint;
    std::filesystem::path metrics;
    int epochs_done = 0;
};

TrainOutputs cmd_train(const RunConfig& cfg, TrainMode mode, const std::filesystem::path& data_dir,
                       const std::filesystem::path& proxy_ckpt, const std::filesystem::path& out,
                       uint64_t train_seed, bool force = false,
                       const std::optional<std::filesystem::path>& resume = std::nullopt);

struct EvaluateOutputs {
    ComparisonTable table;
    std::vector<EvalReport> reports;
    std::filesystem::path dir;
};

EvaluateOutputs cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& data_dir,
                             const std::vector<std::pair<std::string, std::filesystem::path>>& ckpts,
                             const std::filesystem::path& out, bool force = false);

// Renders the audit dump over the source images: ground truths in green,
// pseudo-labels in violet. Returns the number of overlays written.
int cmd_inspect_pseudo(const std::filesystem::path& audit_path,
                       const std::filesystem::path& manifest_path,
                       const std::filesystem::path& out, bool force = false);

struct ReproduceOutcome {
    ComparisonTable table;
    double baseline_avg = 0.0;   // mean over seeds, mAP points (x100)
    double ours_avg = 0.0;
    double upper_avg = 0.0;
    double missing_rate = 0.0;
    bool missing_rate_ok = false;
    bool ordering_ok = false;
    std::filesystem::path dir;
};

// synth -> train-proxy -> 3 arms x seeds -> evaluate -> compare.
ReproduceOutcome cmd_reproduce(const RunConfig& cfg, const std::filesystem::path& out,
                               bool force = false);

}  // namespace mergedet
