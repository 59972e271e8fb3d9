#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mergedet/crops.hpp"
#include "mergedet/nn.hpp"
#include "mergedet/rng.hpp"

namespace mergedet {

struct ProxyConfig {
    int K = 6;                              // in-distribution classes; head is K+1-way
    std::vector<int> spp_levels = {1, 2, 4};
    int kc = 5;                             // aspect-ratio cluster count
    int epochs = 30;
    double lr = 0.02;
    double momentum = 0.9;
    int batch_size = 32;
    uint64_t seed = 1;
    std::vector<int> channels = {16, 32};   // stem width, post-residual width
    double holdout_frac = 0.15;
    int min_input = 12;                     // inputs are padded up to at least this
    bool allow_missing_reject = false;      // override the missing-K+1 refusal

    void validate() const;
    int reject_label() const { return K + 1; }
};

void to_json(nlohmann::json& j, const ProxyConfig& c);
void from_json(const nlohmann::json& j, ProxyConfig& c);

// Probability vector over K+1 classes; the last entry is the rejection class.
struct ProxyPrediction {
    std::vector<double> p;

    int argmax_label() const;          // 1..K+1
    double max_in_distribution() const;  // max over the first K entries
};

struct AspectCenters {
    std::vector<std::pair<int, int>> wh;  // sorted (width, height) pairs
};

// k-means (Euclidean on width/height pairs, Lloyd iterations, seeded
// initialization from the sorted distinct sizes, lowest-index tie break).
// Centers are rounded up so padding, never cropping, reaches a center.
// Fewer distinct sizes than kc returns the distinct sizes.
AspectCenters fit_aspect_clusters(std::span<const std::pair<int, int>> sizes, int kc,
                                  uint64_t seed);

// Pads with zeros at the right/bottom to elementwise max(crop size, nearest
// center); never discards a pixel.
ImageBuffer pad_to_nearest(const ImageBuffer& crop, const AspectCenters& centers,
                           std::pair<int, int>* chosen = nullptr);

// Zeroes one of the s x s near-equal patches, chosen uniformly. Crops smaller
// than s pixels in either dimension are returned unchanged with the flag set.
ImageBuffer patch_drop(const ImageBuffer& crop, int s, Rng& rng, bool* degenerate = nullptr);

struct ProxyModel {
    ProxyConfig cfg;
    AspectCenters centers;
    nn::NetSpec net;
    std::vector<double> params;

    static nn::NetSpec build_net(const ProxyConfig& cfg);
    static ProxyModel init(const ProxyConfig& cfg, AspectCenters centers, uint64_t seed);

    // pad_to_nearest, then pad further to the even minimum the backbone needs.
    ImageBuffer prepare(const ImageBuffer& crop) const;

    ProxyPrediction predict_one(const ImageBuffer& prepared) const;
    // All crops must share one prepared size (shape-homogeneous batch).
    std::vector<ProxyPrediction> predict(std::span<const ImageBuffer> batch) const;
};

// Mean of the prediction on the original crop and on m patch-drop variants.
ProxyPrediction ensemble_predict(const ProxyModel& model, const ImageBuffer& crop, int m, int s,
                                 Rng& rng);

struct ProxyTrainResult {
    ProxyModel model;
    double holdout_accuracy = 0.0;
    std::vector<double> per_class_accuracy;  // index 0 -> label 1, ..., K -> label K+1
    std::vector<std::string> log;
};

// Observes every training batch (the prepared sizes of its members).
using BatchProbe = std::function<void(std::span<const std::pair<int, int>>)>;

// (K+1)-way cross-entropy training with batches grouped by prepared size.
ProxyTrainResult train_proxy(const std::vector<CropRecord>& crops, const ProxyConfig& cfg,
                             const BatchProbe& probe = nullptr);

void save_proxy_checkpoint(const ProxyModel& model, const std::filesystem::path& path);
ProxyModel load_proxy_checkpoint(const std::filesystem::path& path);

}  // namespace mergedet
