#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mergedet/pseudolabel.hpp"
#include "mergedet/rng.hpp"
#include "oracles.hpp"

using namespace mergedet;

namespace {

DetectorConfig small_config() {
    DetectorConfig cfg;
    cfg.input_size = 32;
    cfg.g = 4;
    cfg.A = 2;
    cfg.K = 3;
    cfg.anchors = {{0, 0.2, 0.2}, {1, 0.4, 0.4}};
    cfg.tau = 0.4;
    cfg.channels = {6, 8, 10};
    return cfg;
}

DetectorOutput random_output(const DetectorConfig& cfg, Rng& rng) {
    nn::Tensor raw(cfg.A * cfg.features(), cfg.g, cfg.g);
    for (auto& v : raw.v) v = rng.uniform(-3.0, 3.0);
    return activate(raw, cfg);
}

ImageBuffer flat_image(int size) {
    ImageBuffer img(size, size, {80, 80, 80});
    return img;
}

// Deterministic stub: h-bar depends on the crop's size so different
// candidates see different vectors; `mode` picks the regime.
class StubScorer : public ProxyScorer {
public:
    enum class Mode { kAlwaysReject, kConfident, kMixed };
    StubScorer(int K, Mode mode) : K_(K), mode_(mode) {}

    std::vector<double> score(const ImageBuffer& crop, Rng& rng) const override {
        (void)rng;
        std::vector<double> h(static_cast<size_t>(K_) + 1, 0.0);
        switch (mode_) {
            case Mode::kAlwaysReject:
                h[static_cast<size_t>(K_)] = 1.0;
                break;
            case Mode::kConfident: {
                const int k = (crop.width + crop.height) % K_;
                h[static_cast<size_t>(k)] = 0.9;
                for (int i = 0; i <= K_; ++i) {
                    if (i != k) h[static_cast<size_t>(i)] = 0.1 / K_;
                }
                break;
            }
            case Mode::kMixed: {
                // Cycle: confident class, low confidence, reject.
                const int phase = (crop.width * 31 + crop.height * 17) % 3;
                if (phase == 0) {
                    h[static_cast<size_t>((crop.width + crop.height) % K_)] = 0.85;
                    h[static_cast<size_t>(K_)] = 0.15 - 0.15 / (K_ + 1);
                    double rest = 1.0;
                    for (double v : h) rest -= v;
                    h[1] += rest;  // keep it a distribution
                } else if (phase == 1) {
                    for (int i = 0; i < K_; ++i) h[static_cast<size_t>(i)] = 0.5 / K_;
                    h[static_cast<size_t>(K_)] = 0.5;
                } else {
                    h[static_cast<size_t>(K_)] = 0.9;
                    for (int i = 0; i < K_; ++i) h[static_cast<size_t>(i)] = 0.1 / K_;
                }
                break;
            }
        }
        return h;
    }
    int num_classes() const override { return K_; }

private:
    int K_;
    Mode mode_;
};

}  // namespace

TEST_CASE("candidate selection") {
    DetectorConfig cfg = small_config();
    Rng rng(3);
    const DetectorOutput out = random_output(cfg, rng);
    const auto dets = decode(out, cfg, 0.0, kDedupDisabled);
    PseudoLabelParams params;

    SUBCASE("empty gts with vacuous filters keeps all A*g^2 boxes") {
        params.obj_prefilter = 0.0;
        params.dedup_iou = kDedupDisabled;
        const auto cands = candidate_rois(dets, {}, params);
        CHECK(cands.size() == static_cast<size_t>(cfg.num_anchors_total()));
    }
    SUBCASE("a detection overlapping a gt beyond theta1 is excluded") {
        params.obj_prefilter = 0.0;
        params.dedup_iou = kDedupDisabled;
        const Detection& probe = dets.front();
        const Annotation gt{probe.box, 1};  // IoU 1 > 0.5
        const auto cands = candidate_rois(dets, {&gt, 1}, params);
        for (const auto& c : cands) {
            CHECK(iou(c.box, gt.box) <= params.theta1);
        }
        CHECK(cands.size() < dets.size());
    }
    SUBCASE("prefilter keeps confident boxes that stay clear of gts") {
        params.obj_prefilter = 0.3;
        params.dedup_iou = kDedupDisabled;
        const auto cands = candidate_rois(dets, {}, params);
        for (const auto& c : cands) CHECK(c.p_obj >= 0.3);
        Detection d = dets.front();
        d.p_obj = 0.9;
        d.box = Box{0.9, 0.9, 0.05, 0.05};
        const Annotation far_gt{Box{0.1, 0.1, 0.1, 0.1}, 1};
        const auto kept = candidate_rois({&d, 1}, {&far_gt, 1}, params);
        CHECK(kept.size() == 1);
    }
    SUBCASE("class-agnostic dedup keeps the higher-scored of two overlapping boxes") {
        Detection d1, d2;
        d1.box = d2.box = Box{0.5, 0.5, 0.2, 0.2};
        d1.class_id = 1;
        d2.class_id = 2;  // different classes still dedup
        d1.score = 0.9;
        d1.p_obj = 0.9;
        d2.score = 0.8;
        d2.p_obj = 0.8;
        params.obj_prefilter = 0.0;
        params.dedup_iou = 0.45;
        const std::vector<Detection> two = {d1, d2};
        const auto kept = candidate_rois(two, {}, params);
        REQUIRE(kept.size() == 1);
        CHECK(kept[0].score == doctest::Approx(0.9));
    }
}

TEST_CASE("class mixing") {
    SUBCASE("beta=1 returns the detector's estimate") {
        const std::vector<double> p_det = {0.7, 0.2, 0.1};
        const std::vector<double> hbar = {0.1, 0.7, 0.1, 0.1};
        CHECK(mix_class(p_det, hbar, 1.0) == p_det);
    }
    SUBCASE("beta=0 returns the renormalized first K of h-bar") {
        const std::vector<double> p_det = {0.7, 0.2, 0.1};
        const std::vector<double> hbar = {0.6, 0.2, 0.1, 0.1};
        const auto out = mix_class(p_det, hbar, 0.0);
        CHECK(out[0] == doctest::Approx(0.6 / 0.9));
        CHECK(out[1] == doctest::Approx(0.2 / 0.9));
        CHECK(out[2] == doctest::Approx(0.1 / 0.9));
    }
    SUBCASE("beta=0.5 averages the two distributions") {
        const std::vector<double> p_det = {0.8, 0.2};
        const std::vector<double> hbar = {0.3, 0.2, 0.5};  // renormalizes to {0.6, 0.4}
        const auto out = mix_class(p_det, hbar, 0.5);
        CHECK(out[0] == doctest::Approx(0.7));
        CHECK(out[1] == doctest::Approx(0.3));
    }
    SUBCASE("output remains a distribution on random inputs") {
        Rng rng(5);
        for (int trial = 0; trial < 1000; ++trial) {
            const int K = 4;
            std::vector<double> p_det(K), hbar(K + 1);
            double sp = 0.0, sh = 0.0;
            for (auto& v : p_det) sp += (v = rng.uniform(0.01, 1.0));
            for (auto& v : hbar) sh += (v = rng.uniform(0.01, 1.0));
            for (auto& v : p_det) v /= sp;
            for (auto& v : hbar) v /= sh;
            const auto out = mix_class(p_det, hbar, rng.uniform(0.0, 1.0));
            double sum = 0.0;
            for (double v : out) sum += v;
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("pseudo objectness is the raw in-distribution max") {
    SUBCASE("one-hot in-distribution gives 1") {
        const std::vector<double> hbar = {0.0, 0.0, 1.0, 0.0};
        CHECK(pseudo_object(hbar) == 1.0);
    }
    SUBCASE("direct max without renormalization") {
        const std::vector<double> hbar = {0.85, 0.05, 0.08, 0.02};
        CHECK(pseudo_object(hbar) == 0.85);
    }
    SUBCASE("anything past the gate clears theta2") {
        Rng rng(6);
        const double theta2 = 0.8;
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<double> hbar(5);
            double s = 0.0;
            for (auto& v : hbar) s += (v = rng.uniform(0.0, 1.0));
            for (auto& v : hbar) v /= s;
            double max_in = 0.0;
            for (size_t k = 0; k + 1 < hbar.size(); ++k) max_in = std::max(max_in, hbar[k]);
            if (max_in >= theta2) CHECK(pseudo_object(hbar) >= theta2);
        }
    }
}

TEST_CASE("generation pass") {
    DetectorConfig cfg = small_config();
    Rng out_rng(7);
    const DetectorOutput out = random_output(cfg, out_rng);
    const ImageBuffer img = flat_image(cfg.input_size);
    PseudoLabelParams params;
    params.warmup_epochs = 0;
    params.obj_prefilter = 0.0;
    params.dedup_iou = kDedupDisabled;

    SUBCASE("an always-rejecting proxy yields the empty set") {
        const StubScorer stub(cfg.K, StubScorer::Mode::kAlwaysReject);
        Rng rng(1);
        GenerateStats stats;
        const auto set = generate(img, out, cfg, {}, stub, params, 0, rng, &stats);
        CHECK(set.empty());
        CHECK(stats.gated_out > 0);
    }
    SUBCASE("warmup epochs return the empty set by contract") {
        const StubScorer stub(cfg.K, StubScorer::Mode::kConfident);
        PseudoLabelParams warm = params;
        warm.warmup_epochs = 3;
        Rng rng(1);
        CHECK(generate(img, out, cfg, {}, stub, warm, 2, rng).empty());
        CHECK(!generate(img, out, cfg, {}, stub, warm, 3, rng).empty());
    }
    SUBCASE("a confident proxy labels the surviving candidates with its own distribution") {
        const StubScorer stub(cfg.K, StubScorer::Mode::kConfident);
        Rng rng(1);
        const auto set = generate(img, out, cfg, {}, stub, params, 4, rng);
        REQUIRE(!set.empty());
        for (const auto& pl : set) {
            CHECK(pl.obj_prob == doctest::Approx(0.9));
            CHECK(pl.epoch == 4);
            double sum = 0.0;
            for (double v : pl.class_probs) sum += v;
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            // beta = 0: renormalized h-bar
            const double expected_top = 0.9 / (0.9 + 0.1 * (cfg.K - 1) / cfg.K);
            double top = 0.0;
            for (double v : pl.class_probs) top = std::max(top, v);
            CHECK(top == doctest::Approx(expected_top).epsilon(1e-9));
        }
    }
    SUBCASE("fully-covered detections produce nothing") {
        // Ground truths identical to every decoded box: line-7 filter removes all.
        std::vector<Annotation> gts;
        for (const auto& det : decode(out, cfg, 0.0, kDedupDisabled)) {
            gts.push_back({det.box, 1});
        }
        const StubScorer stub(cfg.K, StubScorer::Mode::kConfident);
        Rng rng(1);
        GenerateStats stats;
        const auto set = generate(img, out, cfg, gts, stub, params, 4, rng, &stats);
        CHECK(set.empty());
        CHECK(stats.filtered == cfg.num_anchors_total());
    }
    SUBCASE("raising theta2 never grows the set") {
        const StubScorer stub(cfg.K, StubScorer::Mode::kMixed);
        size_t prev = SIZE_MAX;
        for (double theta2 : {0.5, 0.7, 0.84, 0.9, 0.99}) {
            PseudoLabelParams p2 = params;
            p2.theta2 = theta2;
            Rng rng(11);
            const auto set = generate(img, out, cfg, {}, stub, p2, 4, rng);
            CHECK(set.size() <= prev);
            prev = set.size();
        }
    }
    SUBCASE("deterministic given fixed inputs and seed") {
        const StubScorer stub(cfg.K, StubScorer::Mode::kMixed);
        Rng r1(13), r2(13);
        const auto a = generate(img, out, cfg, {}, stub, params, 4, r1);
        const auto b = generate(img, out, cfg, {}, stub, params, 4, r2);
        REQUIRE(a.size() == b.size());
        for (size_t n = 0; n < a.size(); ++n) {
            CHECK(a[n].box.cx == b[n].box.cx);
            CHECK(a[n].class_probs == b[n].class_probs);
            CHECK(a[n].obj_prob == b[n].obj_prob);
        }
    }
    SUBCASE("output is canonically ordered by source anchor") {
        const StubScorer stub(cfg.K, StubScorer::Mode::kConfident);
        Rng rng(17);
        const auto set = generate(img, out, cfg, {}, stub, params, 4, rng);
        for (size_t n = 1; n < set.size(); ++n) {
            const size_t prev_idx = out.anchor_index(set[n - 1].i, set[n - 1].j, set[n - 1].a);
            const size_t cur_idx = out.anchor_index(set[n].i, set[n].j, set[n].a);
            CHECK(prev_idx < cur_idx);
        }
    }
}

TEST_CASE("strict mode matches the straight-line transcription on random scenarios") {
    DetectorConfig cfg = small_config();
    Rng scenario_rng(29);
    for (int scenario = 0; scenario < 50; ++scenario) {
        const DetectorOutput out = random_output(cfg, scenario_rng);
        const ImageBuffer img = flat_image(cfg.input_size);
        std::vector<Annotation> gts;
        const int n_gts = static_cast<int>(scenario_rng.uniform_int(4));
        for (int n = 0; n < n_gts; ++n) {
            Annotation a;
            a.box = Box{scenario_rng.uniform(0.2, 0.8), scenario_rng.uniform(0.2, 0.8),
                        scenario_rng.uniform(0.1, 0.4), scenario_rng.uniform(0.1, 0.4)};
            a.class_id = 1;
            gts.push_back(a);
        }
        PseudoLabelParams params;
        params.warmup_epochs = 0;
        const PseudoLabelParams strict = params.strict();
        const StubScorer stub(cfg.K, StubScorer::Mode::kMixed);

        Rng engine_rng(1000 + scenario);
        const auto engine = generate(img, out, cfg, gts, stub, strict, 5, engine_rng);
        Rng oracle_rng(1000 + scenario);
        const auto oracle =
            oracles::transcribed_generation(img, out, cfg, gts, stub, strict, 5, oracle_rng);

        REQUIRE(engine.size() == oracle.size());
        for (size_t n = 0; n < engine.size(); ++n) {
            CHECK(engine[n].i == oracle[n].i);
            CHECK(engine[n].j == oracle[n].j);
            CHECK(engine[n].a == oracle[n].a);
            CHECK(engine[n].box.cx == doctest::Approx(oracle[n].box.cx).epsilon(1e-12));
            CHECK(engine[n].obj_prob == doctest::Approx(oracle[n].obj_prob).epsilon(1e-12));
            REQUIRE(engine[n].class_probs.size() == oracle[n].class_probs.size());
            for (size_t k = 0; k < engine[n].class_probs.size(); ++k) {
                CHECK(engine[n].class_probs[k] ==
                      doctest::Approx(oracle[n].class_probs[k]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("default-mode output is a gated subset of the transcription") {
    DetectorConfig cfg = small_config();
    Rng rng_src(41);
    const DetectorOutput out = random_output(cfg, rng_src);
    const ImageBuffer img = flat_image(cfg.input_size);
    PseudoLabelParams params;  // prefilter and dedup active
    params.warmup_epochs = 0;
    const StubScorer stub(cfg.K, StubScorer::Mode::kMixed);

    Rng r1(3);
    const auto engine = generate(img, out, cfg, {}, stub, params, 2, r1);
    Rng r2(3);
    const auto superset =
        oracles::transcribed_generation(img, out, cfg, {}, stub, params.strict(), 2, r2);

    for (const auto& pl : engine) {
        bool found = false;
        for (const auto& ref : superset) {
            if (ref.i == pl.i && ref.j == pl.j && ref.a == pl.a) {
                found = true;
                CHECK(pl.obj_prob == doctest::Approx(ref.obj_prob).epsilon(1e-12));
            }
        }
        CHECK(found);
    }
    CHECK(engine.size() <= superset.size());
}

TEST_CASE("every emitted label respects the gt-overlap and confidence invariants") {
    DetectorConfig cfg = small_config();
    Rng rng_src(47);
    PseudoLabelParams params;
    params.warmup_epochs = 0;
    const StubScorer stub(cfg.K, StubScorer::Mode::kMixed);
    for (int trial = 0; trial < 20; ++trial) {
        const DetectorOutput out = random_output(cfg, rng_src);
        const ImageBuffer img = flat_image(cfg.input_size);
        std::vector<Annotation> gts = {{Box{0.5, 0.5, 0.3, 0.3}, 1}};
        std::vector<Box> gt_boxes = {gts[0].box};
        Rng rng(500 + trial);
        const auto set = generate(img, out, cfg, gts, stub, params, 3, rng);
        for (const auto& pl : set) {
            CHECK(max_iou(pl.box, gt_boxes).first <= params.theta1);
            CHECK(pl.obj_prob >= params.theta2);
            int arg = 0;
            for (size_t k = 1; k < pl.hbar.size(); ++k) {
                if (pl.hbar[k] > pl.hbar[static_cast<size_t>(arg)]) arg = static_cast<int>(k);
            }
            CHECK(arg != cfg.K);
        }
    }
}

TEST_CASE("audit dump round trip") {
    PseudoLabel pl;
    pl.box = Box{0.4, 0.5, 0.2, 0.1};
    pl.class_probs = {0.7, 0.2, 0.1};
    pl.obj_prob = 0.87;
    pl.i = 2;
    pl.j = 3;
    pl.a = 1;
    pl.epoch = 6;
    pl.hbar = {0.6, 0.2, 0.1, 0.1};
    const auto dir = std::filesystem::temp_directory_path() / "mergedet_test_audit";
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "audit.jsonl");
        append_audit(out, "img42", pl);
    }
    const auto records = load_audit(dir / "audit.jsonl");
    REQUIRE(records.size() == 1);
    CHECK(records[0].image == "img42");
    CHECK(records[0].epoch == 6);
    CHECK(records[0].i == 2);
    CHECK(records[0].j == 3);
    CHECK(records[0].a == 1);
    CHECK(records[0].pobj == doctest::Approx(0.87));
    CHECK(records[0].pcls == pl.class_probs);
    CHECK(records[0].hbar == pl.hbar);
}
