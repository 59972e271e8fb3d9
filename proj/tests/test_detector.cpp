#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mergedet/detector.hpp"
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

nn::Tensor random_raw(const DetectorConfig& cfg, Rng& rng, double lo = -3.0, double hi = 3.0) {
    nn::Tensor raw(cfg.A * cfg.features(), cfg.g, cfg.g);
    for (auto& v : raw.v) v = rng.uniform(lo, hi);
    return raw;
}

std::vector<Annotation> random_gts(const DetectorConfig& cfg, Rng& rng, int count) {
    std::vector<Annotation> gts;
    for (int n = 0; n < count; ++n) {
        Annotation a;
        a.box.w = rng.uniform(0.12, 0.45);
        a.box.h = rng.uniform(0.12, 0.45);
        a.box.cx = rng.uniform(0.1, 0.9);
        a.box.cy = rng.uniform(0.1, 0.9);
        a.class_id = rng.uniform_range(1, cfg.K);
        gts.push_back(a);
    }
    return gts;
}

}  // namespace

TEST_CASE("forward produces the configured output volume") {
    DetectorConfig cfg = small_config();
    const DetectorModel model = DetectorModel::init(cfg, 77);
    ImageBuffer img(cfg.input_size, cfg.input_size, {40, 90, 120});
    const DetectorOutput out = model.forward(img);
    CHECK(out.g == cfg.g);
    CHECK(out.A == cfg.A);
    CHECK(out.rel.size() == static_cast<size_t>(cfg.g) * cfg.g * cfg.A);
    CHECK(out.p_cls.size() == out.rel.size() * static_cast<size_t>(cfg.K));

    SUBCASE("class rows are normalized") {
        for (size_t n = 0; n < out.rel.size(); ++n) {
            double sum = 0.0;
            for (int k = 0; k < cfg.K; ++k) sum += out.p_cls[n * cfg.K + k];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            CHECK(out.p_obj[n] >= 0.0);
            CHECK(out.p_obj[n] <= 1.0);
        }
    }
    SUBCASE("inference is deterministic") {
        const DetectorOutput again = model.forward(img);
        CHECK(again.p_obj == out.p_obj);
        CHECK(again.p_cls == out.p_cls);
    }
    SUBCASE("offsets are squashed into the cell span") {
        for (const auto& rel : out.rel) {
            CHECK(rel.x >= 0.0);
            CHECK(rel.x <= 1.0 / cfg.g);
            CHECK(rel.y >= 0.0);
            CHECK(rel.y <= 1.0 / cfg.g);
        }
    }
}

TEST_CASE("target assignment") {
    DetectorConfig cfg = small_config();
    SUBCASE("no ground truths means all-zero targets") {
        const TargetAssignment ta = assign_targets({}, cfg);
        for (const auto& cell : ta.cells) CHECK_FALSE(cell.has_value());
        for (uint8_t t : ta.t) CHECK(t == 0);
    }
    SUBCASE("a gt matching anchor 1 exactly owns its center cell") {
        // Center in cell (2,3): cx in [0.75,1.0), cy in [0.5,0.75).
        const Annotation gt{Box{0.8, 0.6, 0.4, 0.4}, 2};
        const TargetAssignment ta = assign_targets({&gt, 1}, cfg);
        const auto& cell = ta.cells[2 * cfg.g + 3];
        REQUIRE(cell.has_value());
        CHECK(cell->anchor == 1);
        CHECK(cell->gt_index == 0);
        size_t ones = 0;
        for (size_t n = 0; n < ta.t.size(); ++n) ones += ta.t[n];
        CHECK(ones == 1);
        CHECK(ta.t[ta.anchor_index(2, 3, 1)] == 1);
    }
    SUBCASE("below-threshold anchor overlap leaves the cell unassigned") {
        DetectorConfig strict = cfg;
        strict.tau = 0.5;
        // 0.2 x 0.08 box: best shape IoU stays under 0.5 for both anchors.
        const Annotation gt{Box{0.5, 0.5, 0.2, 0.08}, 1};
        const TargetAssignment ta = assign_targets({&gt, 1}, strict);
        for (const auto& cell : ta.cells) CHECK_FALSE(cell.has_value());
        for (uint8_t t : ta.t) CHECK(t == 0);
    }
    SUBCASE("center collisions keep the larger gt and are counted") {
        const Annotation small{Box{0.51, 0.51, 0.2, 0.2}, 1};
        const Annotation large{Box{0.55, 0.55, 0.4, 0.4}, 2};
        const TargetAssignment ta = assign_targets(std::vector<Annotation>{small, large}, cfg);
        CHECK(ta.collisions == 1);
        const auto& cell = ta.cells[2 * cfg.g + 2];
        REQUIRE(cell.has_value());
        CHECK(cell->gt_index == 1);
    }
}

TEST_CASE("loss values on pinned cases") {
    DetectorConfig cfg = small_config();
    Rng rng(3);
    const nn::Tensor raw = random_raw(cfg, rng);
    DetectorOutput out = activate(raw, cfg);

    SUBCASE("no responsible anchors zero the class and coordinate losses") {
        const TargetAssignment ta = assign_targets({}, cfg);
        CHECK(loss_class(ta, out, {}) == 0.0);
        CHECK(loss_coord(ta, out, {}, cfg) == 0.0);
        CHECK(loss_object(ta, out) > 0.0);
    }
    SUBCASE("perfect class prediction gives zero class loss; half gives log 2") {
        const Annotation gt{Box{0.8, 0.6, 0.4, 0.4}, 2};
        const TargetAssignment ta = assign_targets({&gt, 1}, cfg);
        const size_t n = out.anchor_index(2, 3, 1);
        out.p_cls[n * cfg.K + 0] = 0.0;
        out.p_cls[n * cfg.K + 1] = 1.0;  // class 2
        out.p_cls[n * cfg.K + 2] = 0.0;
        CHECK(loss_class(ta, out, {&gt, 1}) == doctest::Approx(0.0));
        out.p_cls[n * cfg.K + 1] = 0.5;
        out.p_cls[n * cfg.K + 0] = 0.5;
        CHECK(loss_class(ta, out, {&gt, 1}) == doctest::Approx(std::log(2.0)));
    }
    SUBCASE("coordinate loss is the squared gap in image coordinates") {
        const Annotation gt{Box{0.5, 0.5, 0.2, 0.2}, 1};
        const TargetAssignment ta = assign_targets({&gt, 1}, cfg);
        const auto& cell = ta.cells[2 * cfg.g + 2];
        REQUIRE(cell.has_value());
        const int a = cell->anchor;
        const size_t n = out.anchor_index(2, 2, a);
        const GridCell gc{2, 2, cfg.g};
        out.rel[n] = encode_from_image(Box{0.6, 0.5, 0.2, 0.1}, gc,
                                       cfg.anchors[static_cast<size_t>(a)]);
        CHECK(loss_coord(ta, out, {&gt, 1}, cfg) == doctest::Approx(0.02).epsilon(1e-9));
        out.rel[n] = encode_from_image(gt.box, gc, cfg.anchors[static_cast<size_t>(a)]);
        CHECK(loss_coord(ta, out, {&gt, 1}, cfg) == doctest::Approx(0.0));
    }
    SUBCASE("objectness loss contributions") {
        TargetAssignment ta = assign_targets({}, cfg);
        for (auto& p : out.p_obj) p = 0.0;
        CHECK(loss_object(ta, out) == doctest::Approx(0.0).epsilon(1e-6));
        ta.t[0] = 1;
        out.p_obj[0] = 0.5;
        CHECK(loss_object(ta, out) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
        out.p_obj[0] = 1.0;
        CHECK(loss_object(ta, out) == doctest::Approx(0.0).epsilon(1e-6));
    }
    SUBCASE("total loss weights the components linearly") {
        DetectorConfig weighted = cfg;
        weighted.lambda_obj = 0.0;
        const auto gts = random_gts(cfg, rng, 3);
        const TargetAssignment ta = assign_targets(gts, weighted);
        const double with_obj = loss_total(ta, out, gts, cfg);
        const double without = loss_total(ta, out, gts, weighted);
        CHECK(without ==
              doctest::Approx(loss_class(ta, out, gts) + loss_coord(ta, out, gts, weighted)));
        CHECK(with_obj > without);
    }
}

TEST_CASE("loss total matches the naive per-anchor oracle on random instances") {
    DetectorConfig cfg = small_config();
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const nn::Tensor raw = random_raw(cfg, rng);
        const DetectorOutput out = activate(raw, cfg);
        const auto gts = random_gts(cfg, rng, static_cast<int>(rng.uniform_int(5)));
        const TargetAssignment ta = assign_targets(gts, cfg);
        const oracles::NaiveLosses naive = oracles::naive_losses(out, gts, cfg);
        CHECK(loss_total(ta, out, gts, cfg) == doctest::Approx(naive.total(cfg)).epsilon(1e-6));
        CHECK(naive.obj_terms == cfg.num_anchors_total());
    }
}

TEST_CASE("loss gradient matches central finite differences") {
    DetectorConfig cfg = small_config();
    cfg.g = 3;
    cfg.input_size = 24;
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        const nn::Tensor raw = random_raw(cfg, rng, -2.0, 2.0);
        const auto gts = random_gts(cfg, rng, 2);
        const TargetAssignment ta = assign_targets(gts, cfg);
        nn::Tensor graw(raw.c, raw.h, raw.w);
        loss_total_grad(ta, raw, activate(raw, cfg), gts, cfg, graw);

        double num = 0.0, den = 0.0;
        const double eps = 1e-6;
        for (size_t i = 0; i < raw.v.size(); ++i) {
            nn::Tensor up = raw;
            up.v[i] += eps;
            nn::Tensor dn = raw;
            dn.v[i] -= eps;
            const double fd = (loss_total(ta, activate(up, cfg), gts, cfg) -
                               loss_total(ta, activate(dn, cfg), gts, cfg)) /
                              (2 * eps);
            num += (fd - graw.v[i]) * (fd - graw.v[i]);
            den += fd * fd + graw.v[i] * graw.v[i];
        }
        CHECK(std::sqrt(num) / std::max(std::sqrt(den), 1e-12) < 1e-4);
    }
}

TEST_CASE("decode extracts detections with sources") {
    DetectorConfig cfg = small_config();
    Rng rng(31);
    const nn::Tensor raw = random_raw(cfg, rng);
    const DetectorOutput out = activate(raw, cfg);

    SUBCASE("threshold zero and dedup disabled keeps every anchor") {
        const auto dets = decode(out, cfg, 0.0, kDedupDisabled);
        CHECK(dets.size() == static_cast<size_t>(cfg.num_anchors_total()));
    }
    SUBCASE("threshold above one keeps nothing") {
        CHECK(decode(out, cfg, 1.01, kDedupDisabled).empty());
    }
    SUBCASE("same-class duplicates are suppressed, highest score wins") {
        DetectorOutput two = out;
        const size_t n0 = two.anchor_index(0, 0, 0);
        const size_t n1 = two.anchor_index(0, 0, 1);
        const GridCell gc{0, 0, cfg.g};
        two.rel[n0] = encode_from_image(Box{0.1, 0.1, 0.15, 0.15}, gc, cfg.anchors[0]);
        two.rel[n1] = encode_from_image(Box{0.1, 0.1, 0.15, 0.15}, gc, cfg.anchors[1]);
        for (int k = 0; k < cfg.K; ++k) {
            two.p_cls[n0 * cfg.K + k] = (k == 0) ? 1.0 : 0.0;
            two.p_cls[n1 * cfg.K + k] = (k == 0) ? 1.0 : 0.0;
        }
        two.p_obj[n0] = 0.9;
        two.p_obj[n1] = 0.8;
        const auto dets = decode(two, cfg, 0.0, 0.5);
        int survivors = 0;
        for (const auto& d : dets) {
            if (d.i == 0 && d.j == 0) {
                ++survivors;
                CHECK(d.p_obj == doctest::Approx(0.9));
                CHECK(d.a == 0);
            }
        }
        CHECK(survivors == 1);
    }
    SUBCASE("scores are p_obj times the best class probability") {
        const auto dets = decode(out, cfg, 0.0, kDedupDisabled);
        for (const auto& d : dets) {
            const size_t n = out.anchor_index(d.i, d.j, d.a);
            double best = 0.0;
            for (int k = 0; k < cfg.K; ++k) best = std::max(best, out.p_cls[n * cfg.K + k]);
            CHECK(d.score == doctest::Approx(out.p_obj[n] * best));
        }
    }
}

TEST_CASE("checkpoint round trip preserves parameters and config") {
    DetectorConfig cfg = small_config();
    DetectorCheckpoint ckpt;
    ckpt.model = DetectorModel::init(cfg, 5);
    ckpt.epochs_done = 4;
    ckpt.velocity.assign(ckpt.model.params.size(), 0.25);
    const auto dir = std::filesystem::temp_directory_path() / "mergedet_test_ckpt";
    std::filesystem::create_directories(dir);
    save_detector_checkpoint(ckpt, dir / "d.ckpt");
    const DetectorCheckpoint back = load_detector_checkpoint(dir / "d.ckpt");
    CHECK(back.model.params == ckpt.model.params);
    CHECK(back.epochs_done == 4);
    CHECK(back.velocity == ckpt.velocity);
    CHECK(back.model.cfg.g == cfg.g);
    CHECK(back.model.cfg.anchors.size() == cfg.anchors.size());
}
