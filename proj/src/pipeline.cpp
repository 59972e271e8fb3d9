#include "mergedet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "mergedet/common.hpp"
#include "mergedet/crops.hpp"

namespace mergedet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    check(out.good(), "cannot write " + path.string());
    out << text;
    check(out.good(), "write failed for " + path.string());
}

void echo_config(const RunConfig& cfg, const fs::path& dir) {
    write_text(dir / "effective_config.json", cfg.raw.dump(2) + "\n");
}

json metrics_line(const EpochMetrics& em) {
    // Deterministic fields only; wall time goes to the timing sidecar.
    return json{{"epoch", em.epoch},
                {"loss_cls", em.loss_cls},
                {"loss_coord", em.loss_coord},
                {"loss_obj", em.loss_obj},
                {"loss_pcls", em.loss_pcls},
                {"loss_pobj", em.loss_pobj},
                {"pseudo_emitted", em.pseudo_emitted},
                {"pseudo_gated_out", em.pseudo_gated_out},
                {"pseudo_filtered", em.pseudo_filtered},
                {"pseudo_skipped", em.pseudo_skipped},
                {"assign_collisions", em.assign_collisions}};
}

uint64_t derive_seed(uint64_t seed, const char* tag) { return Rng::stream(seed, tag).next(); }

}  // namespace

TrainConfig RunConfig::train_config(TrainMode mode, uint64_t train_seed) const {
    TrainConfig tc;
    tc.mode = mode;
    tc.epochs = train.epochs;
    tc.optim = train.optim;
    tc.batch_size = train.batch_size;
    tc.seed = train_seed;
    tc.lambda_pcls = train.lambda_pcls;
    tc.lambda_pobj = train.lambda_pobj;
    tc.pseudo_keep_both = train.pseudo_keep_both;
    tc.pseudo = pseudo;
    tc.det = det;
    return tc;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig cfg;
    check_arg(j.contains("seed"), "config: seed is mandatory");
    cfg.seed = j.at("seed").get<uint64_t>();
    if (j.contains("synth")) cfg.synth = j.at("synth").get<SynthConfig>();
    cfg.train_images = j.value("train_images", cfg.train_images);
    cfg.test_images = j.value("test_images", cfg.test_images);
    cfg.proxy_images = j.value("proxy_images", cfg.proxy_images);
    if (j.contains("detector")) cfg.det = j.at("detector").get<DetectorConfig>();
    if (j.contains("proxy")) cfg.proxy = j.at("proxy").get<ProxyConfig>();
    if (j.contains("pseudo")) cfg.pseudo = j.at("pseudo").get<PseudoLabelParams>();
    if (j.contains("train")) {
        const json& t = j.at("train");
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.optim.lr = t.value("lr", cfg.train.optim.lr);
        cfg.train.optim.momentum = t.value("momentum", cfg.train.optim.momentum);
        cfg.train.optim.milestones = t.value("milestones", cfg.train.optim.milestones);
        cfg.train.optim.gamma = t.value("gamma", cfg.train.optim.gamma);
        cfg.train.optim.clip_norm = t.value("clip_norm", cfg.train.optim.clip_norm);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.lambda_pcls = t.value("lambda_pcls", cfg.train.lambda_pcls);
        cfg.train.lambda_pobj = t.value("lambda_pobj", cfg.train.lambda_pobj);
        cfg.train.pseudo_keep_both = t.value("pseudo_keep_both", cfg.train.pseudo_keep_both);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        cfg.eval.obj_threshold = e.value("obj_threshold", cfg.eval.obj_threshold);
        cfg.eval.dedup_iou = e.value("dedup_iou", cfg.eval.dedup_iou);
        cfg.eval.iou_thr = e.value("iou_thr", cfg.eval.iou_thr);
    }
    if (j.contains("reproduce")) {
        const json& r = j.at("reproduce");
        cfg.repro.seeds = r.value("seeds", cfg.repro.seeds);
        cfg.repro.min_gain_points = r.value("min_gain_points", cfg.repro.min_gain_points);
        cfg.repro.max_upper_deficit_points =
            r.value("max_upper_deficit_points", cfg.repro.max_upper_deficit_points);
        if (r.contains("missing_rate_bounds")) {
            cfg.repro.missing_rate_lo = r.at("missing_rate_bounds").at(0).get<double>();
            cfg.repro.missing_rate_hi = r.at("missing_rate_bounds").at(1).get<double>();
        }
        check_arg(!cfg.repro.seeds.empty(), "config: reproduce.seeds must be non-empty");
    }
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        if (p.contains("data")) cfg.data_dir = p.at("data").get<std::string>();
        if (p.contains("crops")) cfg.crops_dir = p.at("crops").get<std::string>();
        if (p.contains("proxy")) cfg.proxy_path = p.at("proxy").get<std::string>();
    }
    // Keep subordinate seeds and class counts coherent with the top level.
    cfg.synth.seed = derive_seed(cfg.seed, "synth");
    cfg.proxy.seed = derive_seed(cfg.seed, "proxy");
    cfg.proxy.K = cfg.synth.num_classes;
    cfg.det.K = cfg.synth.num_classes;
    cfg.det.validate();
    cfg.proxy.validate();
    cfg.pseudo.validate();
    cfg.raw = j;
    return cfg;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    check_arg(in.good(), "config file not found: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config parse error in " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

StagedDir::StagedDir(fs::path final_path, bool force) : final_(std::move(final_path)) {
    if (fs::exists(final_)) {
        check_arg(force, "output already exists: " + final_.string() + " (use --force)");
    }
    staging_ = final_;
    staging_ += ".staging";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
}

StagedDir::~StagedDir() {
    if (!committed_) {
        std::error_code ec;
        fs::remove_all(staging_, ec);
    }
}

void StagedDir::commit() {
    fs::remove_all(final_);
    fs::create_directories(final_.parent_path().empty() ? fs::path(".") : final_.parent_path());
    fs::rename(staging_, final_);
    committed_ = true;
}

SynthOutputs cmd_synth(const RunConfig& cfg, const fs::path& out, bool force) {
    StagedDir staged(out, force);
    const fs::path dir = staged.dir();

    auto make = [&](const char* tag, const char* prefix, int count) {
        SynthConfig sc = cfg.synth;
        sc.seed = derive_seed(cfg.synth.seed, tag);
        sc.id_prefix = prefix;
        sc.images = count;
        return sc;
    };

    ImageStore store;
    const SynthResult train_split = synth_generate(make("train", "tr", cfg.train_images), store);
    const SynthResult test_split = synth_generate(make("test", "te", cfg.test_images), store);
    const SynthResult proxy_split = synth_generate(make("proxy", "px", cfg.proxy_images), store);

    // Two disjoint halves, each stripped to its own class set, then merged.
    const size_t half = train_split.detection.records.size() / 2;
    const std::set<int> set_a(cfg.synth.split_a.begin(), cfg.synth.split_a.end());
    const auto b_vec = cfg.synth.split_b();
    const std::set<int> set_b(b_vec.begin(), b_vec.end());
    const DatasetManifest half_a =
        split_and_strip(slice_records(train_split.detection, 0, half), set_a);
    const DatasetManifest half_b = split_and_strip(
        slice_records(train_split.detection, half, train_split.detection.records.size()), set_b);
    const DatasetManifest merged = merge(half_a, half_b);
    const double rate = missing_rate(merged, train_split.detection);

    save_manifest(train_split.detection, dir / "full_train.jsonl");
    save_manifest(merged, dir / "merged_train.jsonl");
    save_manifest(test_split.detection, dir / "test.jsonl");
    store.save_all(train_split.detection, dir);
    store.save_all(test_split.detection, dir);

    std::set<int> in_classes, ood_classes;
    for (int c = 1; c <= cfg.synth.num_classes; ++c) in_classes.insert(c);
    for (int k = 0; k < cfg.synth.num_ood; ++k) ood_classes.insert(cfg.synth.num_classes + 1 + k);
    CropStats crop_stats;
    const auto crops = proxy_crops(proxy_split.master, store, in_classes, ood_classes, &crop_stats);
    save_crops(crops, dir / "crops");

    json summary;
    summary["missing_rate"] = rate;
    summary["train_records"] = train_split.detection.records.size();
    summary["merged_records"] = merged.records.size();
    summary["test_records"] = test_split.detection.records.size();
    summary["proxy_crops"] = crops.size();
    summary["proxy_crops_skipped"] = crop_stats.skipped_degenerate;
    write_text(dir / "synth_summary.json", summary.dump(2) + "\n");
    echo_config(cfg, dir);

    std::printf("missing rate %.4f (merged %zu records, full %zu records, %zu proxy crops)\n",
                rate, merged.records.size(), train_split.detection.records.size(), crops.size());
    staged.commit();
    return SynthOutputs{rate, crops.size(), out};
}

ProxyOutputs cmd_train_proxy(const RunConfig& cfg, const fs::path& crops_dir, const fs::path& out,
                             bool force) {
    check_arg(fs::exists(crops_dir / "index.jsonl"),
              "crop index not found: " + (crops_dir / "index.jsonl").string());
    const auto crops = load_crops(crops_dir);
    StagedDir staged(out, force);
    const fs::path dir = staged.dir();

    const ProxyTrainResult res = train_proxy(crops, cfg.proxy);
    save_proxy_checkpoint(res.model, dir / "proxy.ckpt");

    json log;
    log["holdout_accuracy"] = res.holdout_accuracy;
    json per_class = json::object();
    for (size_t k = 0; k < res.per_class_accuracy.size(); ++k) {
        const std::string label = std::to_string(k + 1);
        per_class[label + (static_cast<int>(k) == cfg.proxy.K ? " (reject)" : "")] =
            res.per_class_accuracy[k];
    }
    log["per_class_accuracy"] = per_class;
    log["train_log"] = res.log;
    write_text(dir / "proxy_log.json", log.dump(2) + "\n");
    echo_config(cfg, dir);

    std::printf("proxy holdout accuracy %.4f\n", res.holdout_accuracy);
    staged.commit();
    return ProxyOutputs{res.holdout_accuracy, res.per_class_accuracy, out / "proxy.ckpt"};
}

TrainOutputs cmd_train(const RunConfig& cfg, TrainMode mode, const fs::path& data_dir,
                       const fs::path& proxy_ckpt, const fs::path& out, uint64_t train_seed,
                       bool force, const std::optional<fs::path>& resume) {
    const fs::path manifest_path =
        data_dir / (mode == TrainMode::kUpper ? "full_train.jsonl" : "merged_train.jsonl");
    check_arg(fs::exists(manifest_path), "manifest not found: " + manifest_path.string());
    DatasetManifest train = load_manifest(manifest_path);
    check_arg(!train.records.empty(), "training manifest has no records");
    ImageStore store;
    store.set_root(data_dir);
    store.preload(train);

    // The proxy checkpoint is opened only in mode ours.
    std::optional<ProxyModel> proxy_model;
    std::optional<EnsembleScorer> scorer;
    if (mode == TrainMode::kOurs) {
        check_arg(!proxy_ckpt.empty(), "mode ours requires a proxy checkpoint path");
        check_arg(fs::exists(proxy_ckpt), "proxy checkpoint not found: " + proxy_ckpt.string());
        proxy_model = load_proxy_checkpoint(proxy_ckpt);
        scorer.emplace(*proxy_model, cfg.pseudo.m, cfg.pseudo.s);
    }

    DetectorCheckpoint resume_ckpt;
    const DetectorCheckpoint* resume_ptr = nullptr;
    if (resume) {
        resume_ckpt = load_detector_checkpoint(*resume);
        resume_ptr = &resume_ckpt;
    }

    StagedDir staged(out, force);
    const fs::path dir = staged.dir();
    std::ofstream metrics(dir / "metrics.jsonl");
    std::ofstream timing(dir / "timing.log");
    std::ofstream audit;
    if (mode == TrainMode::kOurs) audit.open(dir / "audit.jsonl");

    TrainSinks sinks;
    sinks.on_epoch = [&](const EpochMetrics& em) {
        metrics << metrics_line(em).dump() << "\n";
        timing << "epoch " << em.epoch << " wall_s " << em.wall_s << "\n";
    };
    if (mode == TrainMode::kOurs) {
        sinks.on_pseudo = [&](const std::string& id, const PseudoLabel& pl) {
            append_audit(audit, id, pl);
        };
    }

    const TrainConfig tc = cfg.train_config(mode, train_seed);
    const TrainResult res =
        run_training(train, store, tc, scorer ? &*scorer : nullptr, sinks, resume_ptr);

    DetectorCheckpoint ckpt;
    ckpt.model = res.model;
    ckpt.epochs_done = res.epochs_done;
    ckpt.velocity = res.velocity;
    save_detector_checkpoint(ckpt, dir / "detector.ckpt");
    echo_config(cfg, dir);
    staged.commit();
    return TrainOutputs{out / "detector.ckpt", out / "metrics.jsonl", res.epochs_done};
}

EvaluateOutputs cmd_evaluate(const RunConfig& cfg, const fs::path& data_dir,
                             const std::vector<std::pair<std::string, fs::path>>& ckpts,
                             const fs::path& out, bool force) {
    check_arg(!ckpts.empty(), "cmd_evaluate: no checkpoints given");
    const fs::path manifest_path = data_dir / "test.jsonl";
    check_arg(fs::exists(manifest_path), "manifest not found: " + manifest_path.string());
    const DatasetManifest test = load_manifest(manifest_path);
    ImageStore store;
    store.set_root(data_dir);
    store.preload(test);

    EvaluateOutputs outputs;
    std::vector<std::pair<std::string, EvalReport>> named;
    for (const auto& [name, path] : ckpts) {
        check_arg(fs::exists(path), "checkpoint not found: " + path.string());
        const DetectorCheckpoint ckpt = load_detector_checkpoint(path);
        EvalReport report = evaluate(ckpt.model, test, store, cfg.eval);
        named.emplace_back(name, report);
        outputs.reports.push_back(std::move(report));
    }
    outputs.table = compare(named);

    StagedDir staged(out, force);
    const fs::path dir = staged.dir();
    const std::string text = table_text(outputs.table);
    write_text(dir / "report.txt", text);
    json j = table_json(outputs.table);
    j["fingerprint"] = named.front().second.fingerprint;
    write_text(dir / "report.json", j.dump(2) + "\n");
    echo_config(cfg, dir);
    std::printf("%s", text.c_str());
    staged.commit();
    outputs.dir = out;
    return outputs;
}

int cmd_inspect_pseudo(const fs::path& audit_path, const fs::path& manifest_path,
                       const fs::path& out, bool force) {
    check_arg(fs::exists(audit_path), "audit dump not found: " + audit_path.string());
    check_arg(fs::exists(manifest_path), "manifest not found: " + manifest_path.string());
    const auto records = load_audit(audit_path);
    StagedDir staged(out, force);
    if (records.empty()) {
        staged.commit();
        return 0;
    }
    const DatasetManifest manifest = load_manifest(manifest_path);
    ImageStore store;
    store.set_root(manifest_path.parent_path());
    std::map<std::string, const ImageRecord*> by_id;
    for (const auto& rec : manifest.records) by_id[rec.id] = &rec;

    constexpr std::array<uint8_t, 3> kViolet = {180, 60, 255};
    constexpr std::array<uint8_t, 3> kGreen = {40, 220, 40};

    std::map<std::pair<std::string, int>, std::vector<const AuditRecord*>> grouped;
    for (const auto& rec : records) grouped[{rec.image, rec.epoch}].push_back(&rec);

    int written = 0;
    for (const auto& [key, labels] : grouped) {
        const auto& [image_id, epoch] = key;
        auto it = by_id.find(image_id);
        check(it != by_id.end(), "inspect-pseudo: image " + image_id + " not in manifest");
        ImageBuffer img = store.get(*it->second);
        for (const auto& ann : it->second->annotations) {
            int x0, y0, w, h;
            if (!box_pixel_rect(ann.box, img.width, img.height, x0, y0, w, h)) continue;
            draw_rect(img, x0, y0, x0 + w - 1, y0 + h - 1, kGreen);
        }
        for (const AuditRecord* rec : labels) {
            int x0, y0, w, h;
            if (!box_pixel_rect(rec->box, img.width, img.height, x0, y0, w, h)) continue;
            draw_rect(img, x0, y0, x0 + w - 1, y0 + h - 1, kViolet);
        }
        save_ppm(img, staged.dir() / (image_id + "_e" + std::to_string(epoch) + ".ppm"));
        ++written;
    }
    staged.commit();
    return written;
}

ReproduceOutcome cmd_reproduce(const RunConfig& cfg, const fs::path& out, bool force) {
    StagedDir staged(out, force);
    const fs::path dir = staged.dir();

    const SynthOutputs synth = cmd_synth(cfg, dir / "data");
    const ProxyOutputs proxy = cmd_train_proxy(cfg, dir / "data" / "crops", dir / "proxy");

    const std::vector<TrainMode> arms = {TrainMode::kBaseline, TrainMode::kOurs, TrainMode::kUpper};
    std::map<TrainMode, std::vector<EvalReport>> reports;

    const DatasetManifest test = load_manifest(dir / "data" / "test.jsonl");
    ImageStore store;
    store.set_root(dir / "data");
    store.preload(test);

    json runs = json::object();
    for (const TrainMode mode : arms) {
        for (const uint64_t seed : cfg.repro.seeds) {
            const std::string run_name = to_string(mode) + "_s" + std::to_string(seed);
            const fs::path run_dir = dir / "runs" / run_name;
            fs::create_directories(run_dir.parent_path());
            const TrainOutputs t = cmd_train(cfg, mode, dir / "data",
                                             mode == TrainMode::kOurs ? proxy.checkpoint
                                                                      : fs::path(),
                                             run_dir, seed);
            const DetectorCheckpoint ckpt = load_detector_checkpoint(t.checkpoint);
            EvalReport report = evaluate(ckpt.model, test, store, cfg.eval);
            runs[run_name] = {{"mean_ap", report.mean_ap}};
            reports[mode].push_back(std::move(report));
        }
    }

    // Mean-over-seeds report per arm.
    auto mean_report = [&](const std::vector<EvalReport>& rs) {
        EvalReport m = rs.front();
        for (auto& [cls, ap] : m.ap) {
            double sum = 0.0;
            for (const auto& r : rs) sum += r.ap.at(cls);
            ap = sum / static_cast<double>(rs.size());
        }
        double sum = 0.0;
        for (const auto& r : rs) sum += r.mean_ap;
        m.mean_ap = sum / static_cast<double>(rs.size());
        return m;
    };

    std::vector<std::pair<std::string, EvalReport>> named;
    named.emplace_back("baseline", mean_report(reports[TrainMode::kBaseline]));
    named.emplace_back("ours", mean_report(reports[TrainMode::kOurs]));
    named.emplace_back("upper", mean_report(reports[TrainMode::kUpper]));

    ReproduceOutcome outcome;
    outcome.table = compare(named);
    outcome.baseline_avg = 100.0 * named[0].second.mean_ap;
    outcome.ours_avg = 100.0 * named[1].second.mean_ap;
    outcome.upper_avg = 100.0 * named[2].second.mean_ap;
    outcome.missing_rate = synth.missing_rate;
    outcome.missing_rate_ok = synth.missing_rate >= cfg.repro.missing_rate_lo &&
                              synth.missing_rate <= cfg.repro.missing_rate_hi;
    const double gain = outcome.ours_avg - outcome.baseline_avg;
    const double deficit = outcome.ours_avg - outcome.upper_avg;
    outcome.ordering_ok = gain >= cfg.repro.min_gain_points &&
                          deficit <= cfg.repro.max_upper_deficit_points;

    const std::string text = table_text(outcome.table);
    write_text(dir / "compare.txt", text);
    json summary;
    summary["table"] = table_json(outcome.table);
    summary["runs"] = runs;
    summary["missing_rate"] = outcome.missing_rate;
    summary["missing_rate_ok"] = outcome.missing_rate_ok;
    summary["baseline_avg"] = outcome.baseline_avg;
    summary["ours_avg"] = outcome.ours_avg;
    summary["upper_avg"] = outcome.upper_avg;
    summary["gain_points"] = gain;
    summary["upper_deficit_points"] = deficit;
    summary["ordering_ok"] = outcome.ordering_ok;
    write_text(dir / "compare.json", summary.dump(2) + "\n");
    echo_config(cfg, dir);

    std::printf("%s", text.c_str());
    std::printf("missing rate %.4f  gain %.2f  upper-deficit %.2f  ordering %s\n",
                outcome.missing_rate, gain, deficit, outcome.ordering_ok ? "ok" : "FAILED");
    staged.commit();
    outcome.dir = out;
    return outcome;
}

}  // namespace mergedet
