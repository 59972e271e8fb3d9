#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "mergedet/manifest.hpp"

namespace mergedet {

// A proxy-classifier training sample: the pixels under one annotation box.
// Labels are re-indexed 1..K for the in-distribution classes; K+1 marks an
// uninteresting / out-of-distribution object.
struct CropRecord {
    ImageBuffer patch;
    int label = 0;
    std::string source_id;
};

struct CropStats {
    int skipped_degenerate = 0;
};

// One crop per qualifying annotation. in_classes and ood_classes must be
// disjoint; annotations in neither set are ignored.
std::vector<CropRecord> proxy_crops(const DatasetManifest& m, const ImageStore& store,
                                    const std::set<int>& in_classes,
                                    const std::set<int>& ood_classes, CropStats* stats = nullptr);

// Pixel rect of a normalized box on a W x H raster, clamped to the image.
// Returns false when the rect is degenerate after rounding.
bool box_pixel_rect(const Box& box, int width, int height, int& x0, int& y0, int& w, int& h);

// Crop store: <dir>/index.jsonl plus one PPM per crop.
void save_crops(const std::vector<CropRecord>& crops, const std::filesystem::path& dir);
std::vector<CropRecord> load_crops(const std::filesystem::path& dir);

}  // namespace mergedet
