#include "mergedet/crops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

#include "mergedet/common.hpp"

namespace mergedet {

using nlohmann::json;

bool box_pixel_rect(const Box& box, int width, int height, int& x0, int& y0, int& w, int& h) {
    x0 = static_cast<int>(std::lround(box.xmin() * width));
    y0 = static_cast<int>(std::lround(box.ymin() * height));
    int x1 = static_cast<int>(std::lround(box.xmax() * width));
    int y1 = static_cast<int>(std::lround(box.ymax() * height));
    x0 = std::clamp(x0, 0, width);
    x1 = std::clamp(x1, 0, width);
    y0 = std::clamp(y0, 0, height);
    y1 = std::clamp(y1, 0, height);
    w = x1 - x0;
    h = y1 - y0;
    return w > 0 && h > 0;
}

std::vector<CropRecord> proxy_crops(const DatasetManifest& m, const ImageStore& store,
                                    const std::set<int>& in_classes,
                                    const std::set<int>& ood_classes, CropStats* stats) {
    for (int c : in_classes) {
        check_arg(ood_classes.count(c) == 0, "proxy_crops: class sets intersect at " +
                                                 std::to_string(c));
    }
    std::map<int, int> reindex;
    int next = 1;
    for (int c : in_classes) reindex[c] = next++;
    const int reject_label = next;  // K+1

    std::vector<CropRecord> out;
    int skipped = 0;
    for (const auto& rec : m.records) {
        const ImageBuffer* img = nullptr;
        for (const auto& ann : rec.annotations) {
            int label;
            if (in_classes.count(ann.class_id)) {
                label = reindex.at(ann.class_id);
            } else if (ood_classes.count(ann.class_id)) {
                label = reject_label;
            } else {
                continue;
            }
            int x0, y0, w, h;
            if (!box_pixel_rect(ann.box, rec.width, rec.height, x0, y0, w, h)) {
                ++skipped;
                continue;
            }
            if (!img) img = &store.get(rec);
            CropRecord crop;
            crop.patch = extract_rect(*img, x0, y0, w, h);
            crop.label = label;
            crop.source_id = rec.id;
            out.push_back(std::move(crop));
        }
    }
    if (skipped > 0) {
        std::fprintf(stderr, "warning: proxy_crops skipped %d degenerate boxes\n", skipped);
    }
    if (stats) stats->skipped_degenerate = skipped;
    return out;
}

void save_crops(const std::vector<CropRecord>& crops, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "patches");
    std::ofstream index(dir / "index.jsonl");
    check(index.good(), "save_crops: cannot open index in " + dir.string());
    for (size_t k = 0; k < crops.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "patches/%06zu.ppm", k);
        save_ppm(crops[k].patch, dir / name);
        json j;
        j["path"] = name;
        j["label"] = crops[k].label;
        j["source"] = crops[k].source_id;
        j["w"] = crops[k].patch.width;
        j["h"] = crops[k].patch.height;
        index << j.dump() << "\n";
    }
    check(index.good(), "save_crops: write failed in " + dir.string());
}

std::vector<CropRecord> load_crops(const std::filesystem::path& dir) {
    std::ifstream index(dir / "index.jsonl");
    check(index.good(), "load_crops: cannot open " + (dir / "index.jsonl").string());
    std::vector<CropRecord> out;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        CropRecord crop;
        crop.label = j.at("label").get<int>();
        crop.source_id = j.value("source", std::string());
        crop.patch = load_ppm(dir / j.at("path").get<std::string>());
        check(crop.patch.width == j.at("w").get<int>() && crop.patch.height == j.at("h").get<int>(),
              "load_crops: size mismatch for " + j.at("path").get<std::string>());
        out.push_back(std::move(crop));
    }
    return out;
}

}  // namespace mergedet
