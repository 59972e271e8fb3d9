#include "mergedet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "mergedet/common.hpp"

namespace mergedet {

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::kBaseline: return "baseline";
        case TrainMode::kOurs: return "ours";
        case TrainMode::kUpper: return "upper";
    }
    return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "baseline") return TrainMode::kBaseline;
    if (s == "ours") return TrainMode::kOurs;
    if (s == "upper") return TrainMode::kUpper;
    throw std::invalid_argument("unknown training mode: " + s);
}

double OptimConfig::lr_at(int epoch) const {
    double v = lr;
    for (int m : milestones) {
        if (epoch >= m) v *= gamma;
    }
    return v;
}

void TrainConfig::validate() const {
    check_arg(epochs >= 0, "TrainConfig: epochs must be >= 0");
    check_arg(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    check_arg(lambda_pcls >= 0.0 && lambda_pobj >= 0.0,
              "TrainConfig: pseudo loss weights must be >= 0");
    check_arg(optim.lr > 0.0, "TrainConfig: lr must be positive");
    pseudo.validate();
    det.validate();
}

double loss_pseudo_class(std::span<const double> p_tilde, std::span<const double> p_det) {
    check_arg(p_tilde.size() == p_det.size(), "loss_pseudo_class: size mismatch");
    double total = 0.0;
    for (size_t k = 0; k < p_tilde.size(); ++k) {
        if (p_tilde[k] <= 0.0) continue;  // 0 * log 0 = 0
        total += p_tilde[k] * (std::log(p_tilde[k]) - safe_log(p_det[k]));
    }
    return total;
}

double loss_pseudo_object(double pt, double p) {
    return -(pt * safe_log(p) + (1.0 - pt) * safe_log(1.0 - p));
}

namespace {

struct ImageResult {
    double loss_cls = 0.0, loss_coord = 0.0, loss_obj = 0.0, loss_pcls = 0.0, loss_pobj = 0.0;
    GenerateStats gen;
    long emitted = 0;
    long collisions = 0;
    PseudoLabelSet labels;
};

// Forward, pseudo-label generation, loss gradients and backward for one
// image. When the pseudo set is empty this follows exactly the plain-loss
// code path, so a rejecting proxy reproduces the baseline bitwise.
ImageResult process_image(const DetectorModel& model, const ImageRecord& rec,
                          const ImageStore& store, const TrainConfig& cfg,
                          const ProxyScorer* proxy, int epoch, size_t global_idx,
                          std::span<double> grads) {
    ImageResult res;
    const ImageBuffer& img = store.get(rec);
    nn::Workspace ws;
    const nn::Tensor raw = model.forward_raw(nn::image_to_tensor(img), &ws);
    const DetectorOutput act = activate(raw, cfg.det);
    const TargetAssignment ta = assign_targets(rec.annotations, cfg.det);
    res.collisions = ta.collisions;

    if (cfg.mode == TrainMode::kOurs && epoch >= cfg.pseudo.warmup_epochs) {
        Rng rng = Rng::stream(cfg.seed, "pseudo", static_cast<uint64_t>(epoch), global_idx);
        res.labels = generate(img, act, cfg.det, rec.annotations, *proxy, cfg.pseudo, epoch, rng,
                              &res.gen);
        res.emitted = static_cast<long>(res.labels.size());
    }

    res.loss_cls = cfg.det.lambda_cls * loss_class(ta, act, rec.annotations);
    res.loss_coord = cfg.det.lambda_coor * loss_coord(ta, act, rec.annotations, cfg.det);

    nn::Tensor graw(raw.c, raw.h, raw.w);
    const int F = cfg.det.features();

    // With both pseudo weights at zero the labels carry no signal at all, so
    // the update must equal the baseline's exactly.
    const bool consume_labels =
        !res.labels.empty() && (cfg.lambda_pcls > 0.0 || cfg.lambda_pobj > 0.0);
    if (!consume_labels) {
        res.loss_obj = cfg.det.lambda_obj * loss_object(ta, act);
        loss_total_grad(ta, raw, act, rec.annotations, cfg.det, graw);
    } else {
        // Anchors owned by a pseudo-label exchange their plain objectness
        // term for the pseudo BCE, unless configured to keep both. The
        // exchange belongs to the pseudo-object pathway, so it is off when
        // that weight is zero.
        std::vector<uint8_t> replaced(act.p_obj.size(), 0);
        if (!cfg.pseudo_keep_both && cfg.lambda_pobj > 0.0) {
            for (const auto& pl : res.labels) replaced[act.anchor_index(pl.i, pl.j, pl.a)] = 1;
        }
        loss_total_grad(ta, raw, act, rec.annotations, cfg.det, graw);
        double obj = 0.0;
        for (size_t n = 0; n < act.p_obj.size(); ++n) {
            if (replaced[n]) continue;
            obj += ta.t[n] ? -safe_log(act.p_obj[n]) : -safe_log(1.0 - act.p_obj[n]);
        }
        res.loss_obj = cfg.det.lambda_obj * obj;
        // Back out the gradient of the replaced plain terms.
        for (const auto& pl : res.labels) {
            const size_t n = act.anchor_index(pl.i, pl.j, pl.a);
            if (!replaced[n]) continue;
            const double t = ta.t[n] ? 1.0 : 0.0;
            graw.at(pl.a * F + 4, pl.i, pl.j) -= cfg.det.lambda_obj * (act.p_obj[n] - t);
        }

        for (const auto& pl : res.labels) {
            const size_t n = act.anchor_index(pl.i, pl.j, pl.a);
            const auto p_det = act.cls_at(n);
            res.loss_pcls += cfg.lambda_pcls * loss_pseudo_class(pl.class_probs, p_det);
            for (int k = 0; k < cfg.det.K; ++k) {
                graw.at(pl.a * F + 5 + k, pl.i, pl.j) +=
                    cfg.lambda_pcls * (p_det[static_cast<size_t>(k)] - pl.class_probs[static_cast<size_t>(k)]);
            }
            const double p = act.p_obj[n];
            res.loss_pobj += cfg.lambda_pobj * loss_pseudo_object(pl.obj_prob, p);
            graw.at(pl.a * F + 4, pl.i, pl.j) += cfg.lambda_pobj * (p - pl.obj_prob);
        }
    }

    nn::Workspace& mutable_ws = ws;
    nn::net_backward(model.net, model.params, mutable_ws, graw, grads);
    return res;
}

}  // namespace

StepStats train_step(DetectorModel& model, nn::SgdMomentum& opt, const DatasetManifest& train,
                     const ImageStore& store, std::span<const size_t> batch,
                     const TrainConfig& cfg, const ProxyScorer* proxy, int epoch,
                     std::vector<std::pair<std::string, PseudoLabel>>* audit) {
    const size_t B = batch.size();
    std::vector<std::vector<double>> slot_grads(B);
    std::vector<ImageResult> slot_res(B);

    std::exception_ptr failure;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(B); ++b) {
        try {
            const size_t idx = batch[static_cast<size_t>(b)];
            slot_grads[static_cast<size_t>(b)].assign(model.net.n_params, 0.0);
            slot_res[static_cast<size_t>(b)] =
                process_image(model, train.records[idx], store, cfg, proxy, epoch, idx,
                              slot_grads[static_cast<size_t>(b)]);
        } catch (...) {
#pragma omp critical
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);

    // Fixed-order reduction keeps updates independent of thread count.
    std::vector<double> grads(model.net.n_params, 0.0);
    StepStats stats;
    for (size_t b = 0; b < B; ++b) {
        const auto& slot = slot_grads[b];
        for (size_t i = 0; i < grads.size(); ++i) grads[i] += slot[i];
        const auto& r = slot_res[b];
        stats.loss_cls += r.loss_cls;
        stats.loss_coord += r.loss_coord;
        stats.loss_obj += r.loss_obj;
        stats.loss_pcls += r.loss_pcls;
        stats.loss_pobj += r.loss_pobj;
        stats.emitted += r.emitted;
        stats.gated_out += r.gen.gated_out;
        stats.filtered += r.gen.filtered;
        stats.skipped += r.gen.skipped_degenerate;
        stats.collisions += r.collisions;
        if (audit) {
            for (const auto& pl : r.labels) {
                audit->emplace_back(train.records[batch[b]].id, pl);
            }
        }
    }
    const double total = stats.loss_cls + stats.loss_coord + stats.loss_obj + stats.loss_pcls +
                         stats.loss_pobj;
    check(std::isfinite(total), "train_step: non-finite loss (epoch " + std::to_string(epoch) +
                                    "); lr too high or inputs corrupt");
    // Metrics report loss sums; the update itself is mean-reduced over the
    // batch and norm-clipped so the step size does not ride on batch length.
    const double scale = 1.0 / static_cast<double>(B);
    for (auto& g : grads) g *= scale;
    if (cfg.optim.clip_norm > 0.0) {
        double sq = 0.0;
        for (double g : grads) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.optim.clip_norm) {
            const double shrink = cfg.optim.clip_norm / norm;
            for (auto& g : grads) g *= shrink;
        }
    }
    opt.step(model.params, grads);
    return stats;
}

TrainResult run_training(const DatasetManifest& train, const ImageStore& store,
                         const TrainConfig& cfg, const ProxyScorer* proxy, const TrainSinks& sinks,
                         const DetectorCheckpoint* resume) {
    cfg.validate();
    check_arg(!train.records.empty(), "run_training: empty training manifest");
    for (const auto& [cls, name] : train.class_table) {
        check_arg(cls >= 1 && cls <= cfg.det.K,
                  "run_training: manifest class " + std::to_string(cls) +
                      " outside the detector's 1.." + std::to_string(cfg.det.K));
    }
    if (cfg.mode == TrainMode::kOurs) {
        check_arg(proxy != nullptr, "run_training: mode ours requires a proxy");
    }

    TrainResult res;
    int start_epoch = 0;
    if (resume) {
        res.model = resume->model;
        start_epoch = resume->epochs_done;
    } else {
        res.model = DetectorModel::init(cfg.det, cfg.seed);
    }
    nn::SgdMomentum opt;
    opt.momentum = cfg.optim.momentum;
    if (resume && !resume->velocity.empty()) opt.velocity = resume->velocity;

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        opt.lr = cfg.optim.lr_at(epoch);

        std::vector<size_t> order(train.records.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = Rng::stream(cfg.seed, "order", static_cast<uint64_t>(epoch));
        for (size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        }

        EpochMetrics em;
        em.epoch = epoch;
        std::vector<std::pair<std::string, PseudoLabel>> audit;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const std::span<const size_t> batch(order.data() + start, end - start);
            const StepStats s = train_step(res.model, opt, train, store, batch, cfg, proxy, epoch,
                                           sinks.on_pseudo ? &audit : nullptr);
            em.loss_cls += s.loss_cls;
            em.loss_coord += s.loss_coord;
            em.loss_obj += s.loss_obj;
            em.loss_pcls += s.loss_pcls;
            em.loss_pobj += s.loss_pobj;
            em.pseudo_emitted += s.emitted;
            em.pseudo_gated_out += s.gated_out;
            em.pseudo_filtered += s.filtered;
            em.pseudo_skipped += s.skipped;
            em.assign_collisions += s.collisions;
        }
        em.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (sinks.on_pseudo) {
            for (const auto& [id, pl] : audit) sinks.on_pseudo(id, pl);
        }
        if (sinks.on_epoch) sinks.on_epoch(em);
        res.metrics.push_back(em);
    }
    res.velocity = opt.velocity;
    res.epochs_done = cfg.epochs;
    return res;
}

}  // namespace mergedet
