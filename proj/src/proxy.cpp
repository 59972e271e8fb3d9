#include "mergedet/proxy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "mergedet/binio.hpp"
#include "mergedet/common.hpp"

namespace mergedet {

void ProxyConfig::validate() const {
    check_arg(K >= 2, "ProxyConfig: K must be >= 2");
    check_arg(!spp_levels.empty(), "ProxyConfig: empty SPP level list");
    check_arg(kc >= 1, "ProxyConfig: kc must be >= 1");
    check_arg(epochs >= 0 && batch_size >= 1, "ProxyConfig: bad training budget");
    check_arg(holdout_frac >= 0.0 && holdout_frac < 1.0, "ProxyConfig: bad holdout fraction");
    check_arg(channels.size() == 2, "ProxyConfig: expects {stem, head} channel widths");
    int max_level = 0;
    for (int l : spp_levels) max_level = std::max(max_level, l);
    check_arg(min_input >= 2 * max_level, "ProxyConfig: min_input too small for the SPP levels");
}

void to_json(nlohmann::json& j, const ProxyConfig& c) {
    j = nlohmann::json{{"K", c.K},
                       {"spp_levels", c.spp_levels},
                       {"kc", c.kc},
                       {"epochs", c.epochs},
                       {"lr", c.lr},
                       {"momentum", c.momentum},
                       {"batch_size", c.batch_size},
                       {"seed", c.seed},
                       {"channels", c.channels},
                       {"holdout_frac", c.holdout_frac},
                       {"min_input", c.min_input},
                       {"allow_missing_reject", c.allow_missing_reject}};
}

void from_json(const nlohmann::json& j, ProxyConfig& c) {
    ProxyConfig def;
    c.K = j.value("K", def.K);
    c.spp_levels = j.value("spp_levels", def.spp_levels);
    c.kc = j.value("kc", def.kc);
    c.epochs = j.value("epochs", def.epochs);
    c.lr = j.value("lr", def.lr);
    c.momentum = j.value("momentum", def.momentum);
    c.batch_size = j.value("batch_size", def.batch_size);
    c.seed = j.value("seed", def.seed);
    c.channels = j.value("channels", def.channels);
    c.holdout_frac = j.value("holdout_frac", def.holdout_frac);
    c.min_input = j.value("min_input", def.min_input);
    c.allow_missing_reject = j.value("allow_missing_reject", def.allow_missing_reject);
}

int ProxyPrediction::argmax_label() const {
    int best = 0;
    for (size_t k = 1; k < p.size(); ++k) {
        if (p[k] > p[static_cast<size_t>(best)]) best = static_cast<int>(k);
    }
    return best + 1;
}

double ProxyPrediction::max_in_distribution() const {
    double best = 0.0;
    for (size_t k = 0; k + 1 < p.size(); ++k) best = std::max(best, p[k]);
    return best;
}

AspectCenters fit_aspect_clusters(std::span<const std::pair<int, int>> sizes, int kc,
                                  uint64_t seed) {
    check_arg(kc >= 1, "fit_aspect_clusters: kc must be >= 1");
    check_arg(static_cast<int>(sizes.size()) >= kc,
              "fit_aspect_clusters: need at least kc sizes");

    std::vector<std::pair<int, int>> distinct(sizes.begin(), sizes.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    AspectCenters out;
    if (static_cast<int>(distinct.size()) <= kc) {
        out.wh = distinct;
        return out;
    }

    // Seeded init: kc distinct sizes by partial Fisher-Yates over the sorted list.
    Rng rng = Rng::stream(seed, "kmeans-init");
    std::vector<size_t> order(distinct.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = 0; i < static_cast<size_t>(kc); ++i) {
        const size_t j = i + rng.uniform_int(order.size() - i);
        std::swap(order[i], order[j]);
    }
    std::vector<std::pair<double, double>> centers(static_cast<size_t>(kc));
    for (int c = 0; c < kc; ++c) {
        centers[static_cast<size_t>(c)] = {
            static_cast<double>(distinct[order[static_cast<size_t>(c)]].first),
            static_cast<double>(distinct[order[static_cast<size_t>(c)]].second)};
    }

    std::vector<int> assign(sizes.size(), -1);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (size_t n = 0; n < sizes.size(); ++n) {
            double best = 1e300;
            int best_c = 0;
            for (int c = 0; c < kc; ++c) {
                const double dw = sizes[n].first - centers[static_cast<size_t>(c)].first;
                const double dh = sizes[n].second - centers[static_cast<size_t>(c)].second;
                const double d = dw * dw + dh * dh;
                if (d < best) {
                    best = d;
                    best_c = c;
                }
            }
            if (assign[n] != best_c) {
                assign[n] = best_c;
                changed = true;
            }
        }
        if (!changed) break;
        for (int c = 0; c < kc; ++c) {
            double sw = 0, sh = 0;
            size_t cnt = 0;
            for (size_t n = 0; n < sizes.size(); ++n) {
                if (assign[n] != c) continue;
                sw += sizes[n].first;
                sh += sizes[n].second;
                ++cnt;
            }
            if (cnt > 0) {
                centers[static_cast<size_t>(c)] = {sw / cnt, sh / cnt};
            }
        }
    }

    std::set<std::pair<int, int>> rounded;
    for (const auto& [w, h] : centers) {
        rounded.insert({static_cast<int>(std::ceil(w)), static_cast<int>(std::ceil(h))});
    }
    out.wh.assign(rounded.begin(), rounded.end());
    return out;
}

ImageBuffer pad_to_nearest(const ImageBuffer& crop, const AspectCenters& centers,
                           std::pair<int, int>* chosen) {
    check_arg(!crop.empty(), "pad_to_nearest: empty crop");
    check_arg(!centers.wh.empty(), "pad_to_nearest: no centers");
    double best = 1e300;
    std::pair<int, int> target = centers.wh.front();
    for (const auto& c : centers.wh) {
        const double dw = crop.width - c.first;
        const double dh = crop.height - c.second;
        const double d = dw * dw + dh * dh;
        if (d < best) {
            best = d;
            target = c;
        }
    }
    if (chosen) *chosen = target;
    const int out_w = std::max(crop.width, target.first);
    const int out_h = std::max(crop.height, target.second);
    ImageBuffer out(out_w, out_h);
    for (int y = 0; y < crop.height; ++y) {
        std::copy_n(crop.at(0, y), static_cast<size_t>(crop.width) * 3, out.at(0, y));
    }
    return out;
}

ImageBuffer patch_drop(const ImageBuffer& crop, int s, Rng& rng, bool* degenerate) {
    check_arg(s >= 1, "patch_drop: s must be >= 1");
    if (degenerate) *degenerate = false;
    if (crop.width < s || crop.height < s) {
        if (degenerate) *degenerate = true;
        return crop;
    }
    ImageBuffer out = crop;
    const int idx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(s) * s));
    const int r = idx / s;
    const int c = idx % s;
    const int y0 = r * crop.height / s;
    const int y1 = (r + 1) * crop.height / s;
    const int x0 = c * crop.width / s;
    const int x1 = (c + 1) * crop.width / s;
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            uint8_t* p = out.at(x, y);
            p[0] = p[1] = p[2] = 0;
        }
    }
    return out;
}

nn::NetSpec ProxyModel::build_net(const ProxyConfig& cfg) {
    const int c0 = cfg.channels[0];
    const int c1 = cfg.channels[1];
    nn::NetSpec branch;
    branch.conv(c0, c0, 3, 1).relu().conv(c0, c0, 3, 1);
    nn::NetSpec net;
    net.conv(3, c0, 3, 1).relu().maxpool2();
    net.residual(std::move(branch));
    net.relu();
    net.conv(c0, c1, 3, 1).relu();
    int spp_bins = 0;
    for (int l : cfg.spp_levels) spp_bins += l * l;
    net.spp(cfg.spp_levels);
    net.dense(c1 * spp_bins, cfg.K + 1);
    net.finalize();
    return net;
}

ProxyModel ProxyModel::init(const ProxyConfig& cfg, AspectCenters centers, uint64_t seed) {
    cfg.validate();
    ProxyModel m;
    m.cfg = cfg;
    m.centers = std::move(centers);
    m.net = build_net(cfg);
    Rng rng = Rng::stream(seed, "proxy-init");
    m.params = m.net.init_params(rng);
    return m;
}

ImageBuffer ProxyModel::prepare(const ImageBuffer& crop) const {
    ImageBuffer padded = pad_to_nearest(crop, centers);
    int w = std::max(padded.width, cfg.min_input);
    int h = std::max(padded.height, cfg.min_input);
    if (w % 2) ++w;  // the stem pools once
    if (h % 2) ++h;
    if (w == padded.width && h == padded.height) return padded;
    ImageBuffer out(w, h);
    for (int y = 0; y < padded.height; ++y) {
        std::copy_n(padded.at(0, y), static_cast<size_t>(padded.width) * 3, out.at(0, y));
    }
    return out;
}

ProxyPrediction ProxyModel::predict_one(const ImageBuffer& prepared) const {
    nn::Tensor logits = nn::net_forward(net, params, nn::image_to_tensor(prepared), nullptr);
    ProxyPrediction pred;
    pred.p.resize(logits.v.size());
    double mx = -1e300;
    for (double v : logits.v) mx = std::max(mx, v);
    double sum = 0.0;
    for (size_t k = 0; k < logits.v.size(); ++k) {
        pred.p[k] = std::exp(logits.v[k] - mx);
        sum += pred.p[k];
    }
    for (auto& v : pred.p) v /= sum;
    return pred;
}

std::vector<ProxyPrediction> ProxyModel::predict(std::span<const ImageBuffer> batch) const {
    std::vector<ProxyPrediction> out;
    if (batch.empty()) return out;
    for (const auto& img : batch) {
        check_arg(img.width == batch.front().width && img.height == batch.front().height,
                  "ProxyModel::predict: heterogeneous batch");
    }
    out.reserve(batch.size());
    for (const auto& img : batch) out.push_back(predict_one(img));
    return out;
}

ProxyPrediction ensemble_predict(const ProxyModel& model, const ImageBuffer& crop, int m, int s,
                                 Rng& rng) {
    check_arg(m >= 0, "ensemble_predict: m must be >= 0");
    const ImageBuffer prepared = model.prepare(crop);
    ProxyPrediction mean = model.predict_one(prepared);
    for (int i = 0; i < m; ++i) {
        const ImageBuffer variant = patch_drop(prepared, s, rng);
        const ProxyPrediction pred = model.predict_one(variant);
        for (size_t k = 0; k < mean.p.size(); ++k) mean.p[k] += pred.p[k];
    }
    for (auto& v : mean.p) v /= (m + 1);
    return mean;
}

ProxyTrainResult train_proxy(const std::vector<CropRecord>& crops, const ProxyConfig& cfg,
                             const BatchProbe& probe) {
    cfg.validate();
    check_arg(!crops.empty(), "train_proxy: no crops");
    bool has_reject = false;
    bool has_in = false;
    for (const auto& c : crops) {
        check_arg(c.label >= 1 && c.label <= cfg.reject_label(),
                  "train_proxy: label " + std::to_string(c.label) + " outside 1..K+1");
        if (c.label == cfg.reject_label()) has_reject = true;
        if (c.label < cfg.reject_label()) has_in = true;
    }
    check_arg(has_in, "train_proxy: no in-distribution crops");
    if (!has_reject) {
        check_arg(cfg.allow_missing_reject,
                  "train_proxy: no K+1 crops; the rejection class would be untrained "
                  "(set allow_missing_reject to override)");
        std::fprintf(stderr, "warning: train_proxy running without rejection-class samples\n");
    }

    std::vector<std::pair<int, int>> sizes;
    sizes.reserve(crops.size());
    for (const auto& c : crops) sizes.emplace_back(c.patch.width, c.patch.height);
    AspectCenters centers = fit_aspect_clusters(sizes, std::min<int>(cfg.kc, static_cast<int>(sizes.size())),
                                                cfg.seed);

    ProxyTrainResult res;
    res.model = ProxyModel::init(cfg, std::move(centers), cfg.seed);
    ProxyModel& model = res.model;

    std::vector<ImageBuffer> prepared(crops.size());
    for (size_t n = 0; n < crops.size(); ++n) prepared[n] = model.prepare(crops[n].patch);

    // Stratified holdout split.
    std::map<int, std::vector<size_t>> by_label;
    for (size_t n = 0; n < crops.size(); ++n) by_label[crops[n].label].push_back(n);
    std::vector<size_t> train_idx, hold_idx;
    Rng split_rng = Rng::stream(cfg.seed, "proxy-holdout");
    for (auto& [label, idxs] : by_label) {
        for (size_t i = idxs.size(); i > 1; --i) {
            std::swap(idxs[i - 1], idxs[split_rng.uniform_int(i)]);
        }
        const size_t n_hold = static_cast<size_t>(std::floor(cfg.holdout_frac * idxs.size()));
        for (size_t i = 0; i < idxs.size(); ++i) {
            (i < n_hold ? hold_idx : train_idx).push_back(idxs[i]);
        }
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(hold_idx.begin(), hold_idx.end());

    // Group the training crops by prepared size.
    std::map<std::pair<int, int>, std::vector<size_t>> groups;
    for (size_t n : train_idx) {
        groups[{prepared[n].width, prepared[n].height}].push_back(n);
    }

    nn::SgdMomentum opt;
    opt.lr = cfg.lr;
    opt.momentum = cfg.momentum;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng = Rng::stream(cfg.seed, "proxy-order", static_cast<uint64_t>(epoch));
        std::vector<std::vector<size_t>> batches;
        for (auto& [size, idxs] : groups) {
            std::vector<size_t> shuffled = idxs;
            for (size_t i = shuffled.size(); i > 1; --i) {
                std::swap(shuffled[i - 1], shuffled[order_rng.uniform_int(i)]);
            }
            for (size_t start = 0; start < shuffled.size(); start += static_cast<size_t>(cfg.batch_size)) {
                const size_t end = std::min(shuffled.size(), start + static_cast<size_t>(cfg.batch_size));
                batches.emplace_back(shuffled.begin() + static_cast<std::ptrdiff_t>(start),
                                     shuffled.begin() + static_cast<std::ptrdiff_t>(end));
            }
        }
        for (size_t i = batches.size(); i > 1; --i) {
            std::swap(batches[i - 1], batches[order_rng.uniform_int(i)]);
        }

        double epoch_loss = 0.0;
        for (const auto& batch : batches) {
            if (probe) {
                std::vector<std::pair<int, int>> batch_sizes;
                for (size_t n : batch) batch_sizes.emplace_back(prepared[n].width, prepared[n].height);
                probe(batch_sizes);
            }
            std::vector<std::vector<double>> slot_grads(batch.size());
            std::vector<double> slot_loss(batch.size(), 0.0);
            std::exception_ptr failure;
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(batch.size()); ++b) {
                try {
                const size_t n = batch[static_cast<size_t>(b)];
                nn::Workspace ws;
                nn::Tensor logits =
                    nn::net_forward(model.net, model.params, nn::image_to_tensor(prepared[n]), &ws);
                // softmax + cross-entropy
                double mx = -1e300;
                for (double v : logits.v) mx = std::max(mx, v);
                double sum = 0.0;
                std::vector<double> soft(logits.v.size());
                for (size_t k = 0; k < soft.size(); ++k) {
                    soft[k] = std::exp(logits.v[k] - mx);
                    sum += soft[k];
                }
                for (auto& v : soft) v /= sum;
                const int label0 = crops[n].label - 1;
                slot_loss[static_cast<size_t>(b)] = -safe_log(soft[static_cast<size_t>(label0)]);
                nn::Tensor glogits(logits.c, logits.h, logits.w);
                for (size_t k = 0; k < soft.size(); ++k) {
                    glogits.v[k] = soft[k] - (static_cast<int>(k) == label0 ? 1.0 : 0.0);
                }
                slot_grads[static_cast<size_t>(b)].assign(model.net.n_params, 0.0);
                nn::net_backward(model.net, model.params, ws, glogits,
                                 slot_grads[static_cast<size_t>(b)]);
                } catch (...) {
#pragma omp critical
                    if (!failure) failure = std::current_exception();
                }
            }
            if (failure) std::rethrow_exception(failure);
            // Mean reduction over the batch so the step size is independent
            // of the (group-dependent) batch length.
            std::vector<double> grads(model.net.n_params, 0.0);
            for (const auto& slot : slot_grads) {
                for (size_t i = 0; i < grads.size(); ++i) grads[i] += slot[i];
            }
            const double scale = 1.0 / static_cast<double>(batch.size());
            for (auto& g : grads) g *= scale;
            for (double l : slot_loss) epoch_loss += l;
            opt.step(model.params, grads);
        }
        res.log.push_back("epoch " + std::to_string(epoch) + " loss " + std::to_string(epoch_loss));
    }

    // Held-out accuracy, overall and per class.
    std::vector<long> correct(static_cast<size_t>(cfg.reject_label()), 0);
    std::vector<long> total(static_cast<size_t>(cfg.reject_label()), 0);
    long all_correct = 0;
    for (size_t n : hold_idx) {
        const ProxyPrediction pred = model.predict_one(prepared[n]);
        const int truth = crops[n].label;
        ++total[static_cast<size_t>(truth - 1)];
        if (pred.argmax_label() == truth) {
            ++correct[static_cast<size_t>(truth - 1)];
            ++all_correct;
        }
    }
    res.holdout_accuracy = hold_idx.empty() ? 0.0
                                            : static_cast<double>(all_correct) /
                                                  static_cast<double>(hold_idx.size());
    res.per_class_accuracy.resize(static_cast<size_t>(cfg.reject_label()), 0.0);
    for (size_t k = 0; k < res.per_class_accuracy.size(); ++k) {
        res.per_class_accuracy[k] =
            total[k] > 0 ? static_cast<double>(correct[k]) / static_cast<double>(total[k]) : 0.0;
    }
    res.log.push_back("holdout accuracy " + std::to_string(res.holdout_accuracy) + " over " +
                      std::to_string(hold_idx.size()) + " crops");
    return res;
}

void save_proxy_checkpoint(const ProxyModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "save_proxy_checkpoint: cannot open " + path.string());
    out.write("MDETCKP1", 8);
    nlohmann::json header;
    header["kind"] = "proxy";
    header["config"] = model.cfg;
    nlohmann::json centers = nlohmann::json::array();
    for (const auto& [w, h] : model.centers.wh) centers.push_back({w, h});
    header["centers"] = centers;
    binio::write_string(out, header.dump());
    binio::write_doubles(out, model.params);
    check(out.good(), "save_proxy_checkpoint: write failed");
}

ProxyModel load_proxy_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "load_proxy_checkpoint: cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    check(in.good() && std::string(magic, 8) == "MDETCKP1",
          "load_proxy_checkpoint: bad magic in " + path.string());
    nlohmann::json header = nlohmann::json::parse(binio::read_string(in));
    check(header.value("kind", "") == "proxy", "load_proxy_checkpoint: not a proxy checkpoint");
    ProxyModel model;
    model.cfg = header.at("config").get<ProxyConfig>();
    model.cfg.validate();
    for (const auto& c : header.at("centers")) {
        model.centers.wh.emplace_back(c.at(0).get<int>(), c.at(1).get<int>());
    }
    model.net = ProxyModel::build_net(model.cfg);
    model.params = binio::read_doubles(in);
    check(model.params.size() == model.net.n_params,
          "load_proxy_checkpoint: parameter count mismatch");
    return model;
}

}  // namespace mergedet
