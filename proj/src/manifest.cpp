#include "mergedet/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "mergedet/common.hpp"

namespace mergedet {

using nlohmann::json;

std::set<int> DatasetManifest::class_ids() const {
    std::set<int> out;
    for (const auto& [id, name] : class_table) out.insert(id);
    return out;
}

size_t DatasetManifest::annotation_count() const {
    size_t n = 0;
    for (const auto& r : records) n += r.annotations.size();
    return n;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    check(out.good(), "save_manifest: cannot open " + path.string());
    json header;
    header["schema"] = kManifestSchema;
    json classes = json::object();
    for (const auto& [id, name] : m.class_table) classes[std::to_string(id)] = name;
    header["classes"] = classes;
    if (!m.provenance.empty()) header["provenance"] = m.provenance;
    out << header.dump() << "\n";
    for (const auto& rec : m.records) {
        json j;
        j["id"] = rec.id;
        j["path"] = rec.path;
        j["w"] = rec.width;
        j["h"] = rec.height;
        json anns = json::array();
        for (const auto& a : rec.annotations) {
            anns.push_back({{"cx", a.box.cx},
                            {"cy", a.box.cy},
                            {"w", a.box.w},
                            {"h", a.box.h},
                            {"cls", a.class_id}});
        }
        j["ann"] = anns;
        out << j.dump() << "\n";
    }
    check(out.good(), "save_manifest: write failed for " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    check(in.good(), "load_manifest: cannot open " + path.string());
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "load_manifest: empty file " + path.string());

    DatasetManifest m;
    json header = json::parse(line);
    check(header.contains("schema") && header["schema"] == kManifestSchema,
          "load_manifest: unknown schema version in " + path.string());
    check(header.contains("classes"), "load_manifest: header missing class table");
    for (const auto& [key, name] : header["classes"].items()) {
        m.class_table[std::stoi(key)] = name.get<std::string>();
    }
    if (header.contains("provenance")) {
        m.provenance = header["provenance"].get<std::vector<std::string>>();
    }

    std::set<std::string> seen_ids;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::runtime_error("load_manifest: malformed JSON at line " +
                                     std::to_string(line_no) + ": " + e.what());
        }
        ImageRecord rec;
        check(j.contains("id"), "load_manifest: record missing id at line " + std::to_string(line_no));
        rec.id = j["id"].get<std::string>();
        check(seen_ids.insert(rec.id).second, "load_manifest: duplicate record id " + rec.id);
        rec.path = j.value("path", std::string());
        rec.width = j.value("w", 0);
        rec.height = j.value("h", 0);
        check(rec.width > 0 && rec.height > 0,
              "load_manifest: record " + rec.id + " has non-positive dimensions");
        for (const auto& a : j.value("ann", json::array())) {
            check(a.contains("cls"), "load_manifest: record " + rec.id + " has annotation missing cls");
            Annotation ann;
            ann.class_id = a["cls"].get<int>();
            check(m.class_table.count(ann.class_id) > 0,
                  "load_manifest: record " + rec.id + " references unknown class " +
                      std::to_string(ann.class_id));
            ann.box.cx = a.at("cx").get<double>();
            ann.box.cy = a.at("cy").get<double>();
            ann.box.w = a.at("w").get<double>();
            ann.box.h = a.at("h").get<double>();
            check(ann.box.w > 0.0 && ann.box.h > 0.0,
                  "load_manifest: record " + rec.id + " has degenerate box");
            rec.annotations.push_back(ann);
        }
        m.records.push_back(std::move(rec));
    }
    if (m.records.empty()) {
        std::cerr << "warning: manifest " << path.string() << " has 0 records\n";
    }
    return m;
}

DatasetManifest split_and_strip(const DatasetManifest& full, const std::set<int>& class_set) {
    check_arg(!class_set.empty(), "split_and_strip: empty class set");
    for (int c : class_set) {
        check_arg(full.class_table.count(c) > 0,
                  "split_and_strip: class " + std::to_string(c) + " not in manifest");
    }
    DatasetManifest out;
    for (int c : class_set) out.class_table[c] = full.class_table.at(c);
    for (const auto& rec : full.records) {
        ImageRecord kept = rec;
        kept.annotations.clear();
        for (const auto& a : rec.annotations) {
            if (class_set.count(a.class_id)) kept.annotations.push_back(a);
        }
        if (!kept.annotations.empty()) out.records.push_back(std::move(kept));
    }
    check(!out.records.empty(), "split_and_strip: no record contains the requested classes");
    out.provenance = full.provenance;
    std::string classes;
    for (int c : class_set) classes += (classes.empty() ? "" : ",") + std::to_string(c);
    out.provenance.push_back("split_and_strip keep={" + classes + "}");
    return out;
}

DatasetManifest merge(const DatasetManifest& a, const DatasetManifest& b) {
    DatasetManifest out;
    out.class_table = a.class_table;
    for (const auto& [id, name] : b.class_table) {
        auto it = out.class_table.find(id);
        if (it != out.class_table.end()) {
            check(it->second == name, "merge: conflicting names for class " + std::to_string(id) +
                                          ": '" + it->second + "' vs '" + name + "'");
        } else {
            out.class_table[id] = name;
        }
    }
    std::set<std::string> used;
    out.records = a.records;
    for (const auto& r : out.records) used.insert(r.id);
    for (const auto& rec : b.records) {
        ImageRecord copy = rec;
        while (used.count(copy.id)) copy.id = "dup:" + copy.id;
        used.insert(copy.id);
        out.records.push_back(std::move(copy));
    }
    out.provenance = a.provenance;
    out.provenance.insert(out.provenance.end(), b.provenance.begin(), b.provenance.end());
    out.provenance.push_back("merge");
    return out;
}

namespace {
bool same_annotation(const Annotation& x, const Annotation& y) {
    return x.class_id == y.class_id && x.box.cx == y.box.cx && x.box.cy == y.box.cy &&
           x.box.w == y.box.w && x.box.h == y.box.h;
}
}  // namespace

double missing_rate(const DatasetManifest& partial, const DatasetManifest& full) {
    std::map<std::string, const ImageRecord*> by_id;
    for (const auto& r : full.records) by_id[r.id] = &r;
    const std::set<int> classes = partial.class_ids();

    size_t partial_count = 0;
    size_t full_count = 0;
    for (const auto& rec : partial.records) {
        auto it = by_id.find(rec.id);
        check_arg(it != by_id.end(),
                  "missing_rate: partial record " + rec.id + " absent from full manifest");
        const ImageRecord& src = *it->second;
        for (const auto& a : rec.annotations) {
            const bool found = std::any_of(src.annotations.begin(), src.annotations.end(),
                                           [&](const Annotation& s) { return same_annotation(a, s); });
            check_arg(found, "missing_rate: partial annotation in record " + rec.id +
                                 " is not present in the full manifest");
        }
        partial_count += rec.annotations.size();
        for (const auto& a : src.annotations) {
            if (classes.count(a.class_id)) ++full_count;
        }
    }
    check(full_count > 0, "missing_rate: zero reference annotations");
    return 1.0 - static_cast<double>(partial_count) / static_cast<double>(full_count);
}

DatasetManifest slice_records(const DatasetManifest& m, size_t begin, size_t end) {
    check_arg(begin <= end && end <= m.records.size(), "slice_records: bad range");
    DatasetManifest out;
    out.class_table = m.class_table;
    out.provenance = m.provenance;
    out.records.assign(m.records.begin() + static_cast<std::ptrdiff_t>(begin),
                       m.records.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

void ImageStore::put(const std::string& id, ImageBuffer img) {
    std::lock_guard<std::mutex> lock(*mu_);
    images_[id] = std::move(img);
}

void ImageStore::set_root(const std::filesystem::path& root) { root_ = root; }

const ImageBuffer& ImageStore::get(const ImageRecord& rec) const {
    {
        std::lock_guard<std::mutex> lock(*mu_);
        auto it = images_.find(rec.id);
        if (it != images_.end()) return it->second;
    }
    check(!rec.path.empty(), "ImageStore: record " + rec.id + " has no pixels and no path");
    ImageBuffer img = load_ppm(root_ / rec.path);
    std::lock_guard<std::mutex> lock(*mu_);
    auto [it, inserted] = images_.emplace(rec.id, std::move(img));
    return it->second;
}

void ImageStore::preload(const DatasetManifest& m) {
    for (const auto& rec : m.records) get(rec);
}

void ImageStore::save_all(const DatasetManifest& m, const std::filesystem::path& root) const {
    for (const auto& rec : m.records) {
        check(!rec.path.empty(), "ImageStore::save_all: record " + rec.id + " has no path");
        const auto target = root / rec.path;
        std::filesystem::create_directories(target.parent_path());
        save_ppm(get(rec), target);
    }
}

}  // namespace mergedet
