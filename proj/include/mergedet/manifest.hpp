#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "mergedet/geometry.hpp"
#include "mergedet/image.hpp"

namespace mergedet {

struct Annotation {
    Box box;
    int class_id = 0;
};

struct ImageRecord {
    std::string id;
    std::string path;  // relative to the manifest directory; empty in in-memory mode
    int width = 0;
    int height = 0;
    std::vector<Annotation> annotations;
};

struct DatasetManifest {
    std::map<int, std::string> class_table;
    std::vector<ImageRecord> records;
    std::vector<std::string> provenance;

    std::set<int> class_ids() const;
    size_t annotation_count() const;
};

// JSON Lines manifest file. Header line carries the schema tag and class
// table, then one record object per line. Round-trips losslessly.
inline constexpr const char* kManifestSchema = "mergetrain-manifest-v1";

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Keeps the records having at least one annotation in class_set, drops the
// other annotations from them, and restricts the class table to class_set.
DatasetManifest split_and_strip(const DatasetManifest& full, const std::set<int>& class_set);

// Union of records and class tables; colliding record ids in `b` are
// re-prefixed so duplicates survive as distinct records.
DatasetManifest merge(const DatasetManifest& a, const DatasetManifest& b);

// 1 - |partial annotations| / |full annotations restricted to partial's
// images and class set|. Counted over annotation instances, not images.
double missing_rate(const DatasetManifest& partial, const DatasetManifest& full);

// Record slice [begin, end) with the same class table; plumbing used to form
// the two halves of the benchmark from one generated pool.
DatasetManifest slice_records(const DatasetManifest& m, size_t begin, size_t end);

// Pixel access for manifest records: in-memory map first, then the root
// directory. Call preload() before concurrent use; get() is read-only after.
class ImageStore {
public:
    void put(const std::string& id, ImageBuffer img);
    void set_root(const std::filesystem::path& root);
    const std::filesystem::path& root() const { return root_; }

    const ImageBuffer& get(const ImageRecord& rec) const;
    void preload(const DatasetManifest& m);
    void save_all(const DatasetManifest& m, const std::filesystem::path& root) const;
    size_t size() const { return images_.size(); }

private:
    mutable std::map<std::string, ImageBuffer> images_;
    mutable std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
    std::filesystem::path root_;
};

}  // namespace mergedet
