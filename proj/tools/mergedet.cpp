// Command-line surface for the merged-dataset detector pipeline.
// Exit codes: 0 success, 1 validation error, 2 runtime failure,
// 3 acceptance-ordering failure (reproduce only).

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mergedet/pipeline.hpp"

namespace {

using mergedet::RunConfig;
namespace fs = std::filesystem;

RunConfig load_config(const std::string& path, std::optional<uint64_t> seed_override) {
    RunConfig cfg = mergedet::load_run_config(path);
    if (seed_override) {
        nlohmann::json j = cfg.raw;
        j["seed"] = *seed_override;
        cfg = mergedet::run_config_from_json(j);
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mergedet: train one grid detector on merged partially-labeled datasets\n"
                 "with on-the-fly pseudo-labels gated by a rejection-class proxy"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::optional<uint64_t> seed;
    bool force = false;

    auto add_common = [&](CLI::App* cmd, bool needs_config = true) {
        if (needs_config) {
            cmd->add_option("--config", config_path, "run configuration file (JSON)")->required();
        }
        cmd->add_option("--out", out_dir, "output directory")->required();
        cmd->add_option("--seed", seed, "override the config seed");
        cmd->add_flag("--force", force, "replace an existing output directory");
    };

    auto* synth = app.add_subcommand("synth", "generate the benchmark datasets and proxy crops");
    add_common(synth);

    auto* train_proxy = app.add_subcommand("train-proxy", "train the rejection-class proxy");
    add_common(train_proxy);
    std::string crops_dir;
    train_proxy->add_option("--crops", crops_dir, "crop store directory (default from config paths.crops)");

    auto* train = app.add_subcommand("train", "train one detector arm");
    add_common(train);
    std::string data_dir, mode_str = "baseline", proxy_ckpt, resume_path;
    train->add_option("--data", data_dir, "data directory from `synth` (default from config paths.data)");
    train->add_option("--mode", mode_str, "baseline | ours | upper")->required();
    train->add_option("--proxy", proxy_ckpt, "proxy checkpoint (required for mode ours)");
    train->add_option("--resume", resume_path, "detector checkpoint to continue from");

    auto* evaluate = app.add_subcommand("evaluate", "evaluate checkpoints on the test split");
    add_common(evaluate);
    std::vector<std::string> ckpt_args;
    evaluate->add_option("--data", data_dir, "data directory from `synth` (default from config paths.data)");
    evaluate->add_option("checkpoints", ckpt_args, "checkpoints as name=path or path")->required();

    auto* inspect = app.add_subcommand("inspect-pseudo", "render pseudo-label overlays");
    add_common(inspect, /*needs_config=*/false);
    std::string audit_path, manifest_path;
    inspect->add_option("--audit", audit_path, "audit dump (audit.jsonl)")->required();
    inspect->add_option("--manifest", manifest_path, "manifest the training run used")->required();

    auto* reproduce = app.add_subcommand("reproduce", "full pipeline: synth, proxy, 3 arms, compare");
    add_common(reproduce);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            cmd_synth(load_config(config_path, seed), out_dir, force);
        } else if (train_proxy->parsed()) {
            const RunConfig cfg = load_config(config_path, seed);
            fs::path crops = crops_dir.empty() ? cfg.crops_dir : fs::path(crops_dir);
            if (crops.empty()) throw std::invalid_argument("no crop directory (--crops or paths.crops)");
            cmd_train_proxy(cfg, crops, out_dir, force);
        } else if (train->parsed()) {
            const RunConfig cfg = load_config(config_path, {});
            fs::path data = data_dir.empty() ? cfg.data_dir : fs::path(data_dir);
            if (data.empty()) throw std::invalid_argument("no data directory (--data or paths.data)");
            fs::path proxy = proxy_ckpt.empty() ? cfg.proxy_path : fs::path(proxy_ckpt);
            const mergedet::TrainMode mode = mergedet::train_mode_from_string(mode_str);
            std::optional<fs::path> resume;
            if (!resume_path.empty()) resume = resume_path;
            cmd_train(cfg, mode, data, proxy, out_dir, seed.value_or(cfg.seed), force, resume);
        } else if (evaluate->parsed()) {
            const RunConfig cfg = load_config(config_path, seed);
            fs::path data = data_dir.empty() ? cfg.data_dir : fs::path(data_dir);
            if (data.empty()) throw std::invalid_argument("no data directory (--data or paths.data)");
            std::vector<std::pair<std::string, fs::path>> ckpts;
            for (const auto& arg : ckpt_args) {
                const auto eq = arg.find('=');
                if (eq != std::string::npos) {
                    ckpts.emplace_back(arg.substr(0, eq), arg.substr(eq + 1));
                } else {
                    const fs::path p(arg);
                    ckpts.emplace_back(p.parent_path().filename().string(), p);
                }
            }
            cmd_evaluate(cfg, data, ckpts, out_dir, force);
        } else if (inspect->parsed()) {
            const int n = mergedet::cmd_inspect_pseudo(audit_path, manifest_path, out_dir, force);
            std::printf("wrote %d overlays\n", n);
        } else if (reproduce->parsed()) {
            const auto outcome = cmd_reproduce(load_config(config_path, seed), out_dir, force);
            if (!outcome.ordering_ok) return 3;
        }
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
