#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergedet/manifest.hpp"

namespace mergedet {

// Desk-scale benchmark generator: colored geometric shapes on a dark noisy
// canvas. Shape geometry carries the class signal (colors are jittered across
// all classes); a pool of extra shape kinds is drawn as unannotated clutter
// so the rejection class has something to reject.
struct SynthConfig {
    int canvas = 48;
    int num_classes = 6;  // K, uses the first K of the built-in shape set (max 6)
    int num_ood = 3;      // clutter shape kinds (max 3)
    int images = 100;
    int min_objects = 2;  // in-distribution objects per image
    int max_objects = 4;
    int min_ood_objects = 1;
    int max_ood_objects = 2;
    double min_size = 11.0;  // object extent in pixels
    double max_size = 20.0;
    double color_jitter = 45.0;  // per-channel jitter around the class base color
    double co_occur = 0.9;       // probability of forcing classes from both halves
    std::vector<int> split_a = {1, 2, 3};
    double max_overlap_iou = 0.3;
    uint64_t seed = 1;
    std::string id_prefix = "im";

    void validate() const;
    std::vector<int> split_b() const;  // complement of split_a in {1..K}
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct SynthResult {
    DatasetManifest detection;  // classes 1..K; clutter drawn but unannotated
    DatasetManifest master;     // clutter annotated with class ids K+1.. (proxy source)
};

// Deterministic in cfg (per-image derived streams, so parallel and serial
// generation agree). Pixels go into `store`, keyed by record id.
SynthResult synth_generate(const SynthConfig& cfg, ImageStore& store);

const std::vector<std::string>& synth_class_names();
const std::vector<std::string>& synth_ood_names();

}  // namespace mergedet
