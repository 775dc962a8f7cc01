#include <doctest.h>

#include <cmath>

#include "chi/data.hpp"
#include "chi/metrics.hpp"
#include "chi/train.hpp"

#include "../common/gradcheck.hpp"

using namespace chi;

namespace {

DatasetSplit small_moons_split(std::size_t n = 80, double ratio = 0.25, std::uint64_t seed = 3) {
    Dataset ds = gen_two_moons(n, 0.1, seed);
    SplitRequest req;
    req.ratio = ratio;
    return split_labeled(ds, req, seed);
}

ModelBundle small_moons_model(std::uint64_t seed = 1) {
    std::vector<LayerSpec> extractor = {{2, 8, Activation::kRelu}};
    std::vector<LayerSpec> head = {{8, 2, Activation::kSoftmax}};
    return build_bundle(extractor, head, Task::kClassification, 1, seed, seed + 1, seed + 2);
}

TrainConfig moons_config(Method method, std::size_t epochs) {
    TrainConfig cfg;
    cfg.method = method;
    cfg.loss.task = Task::kClassification;
    cfg.policy1 = make_policy(Modality::kPoint2d, AugStrength::kWeak);
    cfg.policy2 = make_policy(Modality::kPoint2d, AugStrength::kWeak);
    cfg.epochs = epochs;
    cfg.labeled_batch = 8;
    cfg.unlabeled_batch = 16;
    cfg.learning_rate = 0.05;
    cfg.master_seed = 11;
    return cfg;
}

bool bundles_bitwise_equal(const ModelBundle& a, const ModelBundle& b) {
    auto pa = chitest::params_of(a);
    auto pb = chitest::params_of(b);
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i].second.values != pb[i].second.values) return false;
    return true;
}

}  // namespace

TEST_CASE("sgd_momentum_step") {
    ModelBundle m = small_moons_model();
    GradientMap velocity;
    SUBCASE("zero momentum is plain gradient descent") {
        ModelBundle updated = m;
        GradientMap grads;
        visit_params(m, [&](const std::string& name, const Tensor& t) {
            grads.emplace(name, Tensor::full(t.shape, 1.0));
        });
        sgd_momentum_step(updated, grads, velocity, 0.1, 1.0, 0.0);
        const double before = m.extractor.layers[0].w.values[0];
        const double after = updated.extractor.layers[0].w.values[0];
        CHECK(after == doctest::Approx(before - 0.1));
    }
    SUBCASE("zero gradient still moves along decayed velocity") {
        ModelBundle updated = m;
        GradientMap grads;  // empty: all-zero gradients
        velocity.emplace("theta.0.w", Tensor::full(m.extractor.layers[0].w.shape, 2.0));
        sgd_momentum_step(updated, grads, velocity, 0.1, 1.0, 0.5);
        const double before = m.extractor.layers[0].w.values[0];
        const double after = updated.extractor.layers[0].w.values[0];
        CHECK(after == doctest::Approx(before - 0.1 * 0.5 * 2.0));
        CHECK(velocity.at("theta.0.w").values[0] == doctest::Approx(1.0));
    }
    SUBCASE("head parameters move by the multiplier") {
        ModelBundle updated = m;
        GradientMap grads;
        grads.emplace("theta.0.w", Tensor::full(m.extractor.layers[0].w.shape, 1.0));
        grads.emplace("phi1.0.0.w", Tensor::full(m.head1[0].layers[0].w.shape, 1.0));
        sgd_momentum_step(updated, grads, velocity, 0.01, 10.0, 0.0);
        const double theta_move =
            m.extractor.layers[0].w.values[0] - updated.extractor.layers[0].w.values[0];
        const double head_move =
            m.head1[0].layers[0].w.values[0] - updated.head1[0].layers[0].w.values[0];
        CHECK(head_move == doctest::Approx(10.0 * theta_move));
    }
}

TEST_CASE("gradient clipping") {
    GradientMap grads;
    grads.emplace("a", Tensor({2}, {3.0, 4.0}));  // norm 5
    SUBCASE("below the threshold is untouched") {
        GradientMap copy = grads;
        clip_gradients(copy, 10.0);
        CHECK(copy.at("a").values == grads.at("a").values);
    }
    SUBCASE("above the threshold scales to the threshold") {
        clip_gradients(grads, 1.0);
        const double norm = std::hypot(grads.at("a").values[0], grads.at("a").values[1]);
        CHECK(norm == doctest::Approx(1.0));
    }
}

TEST_CASE("metrics") {
    SUBCASE("geometric mean of 1,2,4,8") {
        CHECK(geometric_mean_error({1.0, 2.0, 4.0, 8.0}) ==
              doctest::Approx(2.8284271).epsilon(1e-3));
    }
    SUBCASE("zero errors hit the epsilon floor") {
        CHECK(geometric_mean_error({0.0, 0.0}) == doctest::Approx(1e-6).epsilon(1e-9));
    }
    SUBCASE("AM-GM holds on random error sets") {
        RngStream rng(5, "amgm");
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<double> errors(1 + rng.next_below(16));
            for (double& e : errors) e = rng.next_uniform(0.0, 3.0);
            CHECK(geometric_mean_error(errors) <= arithmetic_mean(errors) + 1e-6);
        }
    }
}

TEST_CASE("train determinism and basic contracts") {
    DatasetSplit split = small_moons_split();
    SUBCASE("zero epochs returns the initialized bundle") {
        TrainConfig cfg = moons_config(Method::kChi, 0);
        auto [bundle, history] = train(cfg, small_moons_model(), split);
        CHECK(bundles_bitwise_equal(bundle, small_moons_model()));
        CHECK(history.epochs.empty());
    }
    SUBCASE("identical runs are bitwise identical") {
        TrainConfig cfg = moons_config(Method::kChi, 2);
        auto [b1, h1] = train(cfg, small_moons_model(), split);
        auto [b2, h2] = train(cfg, small_moons_model(), split);
        CHECK(bundles_bitwise_equal(b1, b2));
        REQUIRE(h1.epochs.size() == h2.epochs.size());
        for (std::size_t e = 0; e < h1.epochs.size(); ++e) {
            CHECK(h1.epochs[e].loss_sup == h2.epochs[e].loss_sup);
            CHECK(h1.epochs[e].loss_unsup == h2.epochs[e].loss_unsup);
            CHECK(h1.epochs[e].disagreement == h2.epochs[e].disagreement);
            CHECK(h1.epochs[e].test.error_rate == h2.epochs[e].test.error_rate);
        }
    }
    SUBCASE("chi with eta 0 trains bitwise like label-only on a fully labeled split") {
        Dataset ds = gen_two_moons(60, 0.1, 5);
        SplitRequest req;
        req.ratio = 1.0;
        DatasetSplit full = split_labeled(ds, req, 5);
        TrainConfig chi_cfg = moons_config(Method::kChi, 3);
        chi_cfg.eta = 0.0;
        TrainConfig lo_cfg = moons_config(Method::kLabelOnly, 3);
        auto [chi_bundle, chi_hist] = train(chi_cfg, small_moons_model(), full);
        auto [lo_bundle, lo_hist] = train(lo_cfg, small_moons_model(), full);
        CHECK(bundles_bitwise_equal(chi_bundle, lo_bundle));
        for (std::size_t e = 0; e < chi_hist.epochs.size(); ++e)
            CHECK(chi_hist.epochs[e].loss_sup == lo_hist.epochs[e].loss_sup);
    }
    SUBCASE("per-epoch supervised loss stays finite for every method") {
        for (Method method : {Method::kLabelOnly, Method::kPiModel, Method::kMeanTeacher,
                              Method::kPseudoLabel, Method::kEntropyMin, Method::kChi,
                              Method::kChiNoMinimax, Method::kChiNoAug}) {
            TrainConfig cfg = moons_config(method, 2);
            auto [bundle, history] = train(cfg, small_moons_model(), split);
            for (const EpochRecord& rec : history.epochs) CHECK(std::isfinite(rec.loss_sup));
        }
    }
    SUBCASE("warmup ramps the unlabeled weight from zero") {
        TrainConfig cfg = moons_config(Method::kChi, 10);
        cfg.warmup = true;
        Trainer trainer(cfg, small_moons_model(), split);
        trainer.run_epoch();
        // first epoch of a 10-epoch run ramps at 1/2 of eta (ramp = 2 epochs),
        // so the run must differ from the unwarmed one but stay deterministic
        TrainConfig plain = moons_config(Method::kChi, 10);
        Trainer reference(plain, small_moons_model(), split);
        reference.run_epoch();
        CHECK(!bundles_bitwise_equal(trainer.bundle(), reference.bundle()));
        Trainer again(cfg, small_moons_model(), split);
        again.run_epoch();
        CHECK(bundles_bitwise_equal(trainer.bundle(), again.bundle()));
    }
    SUBCASE("pi-model dropout draws independent masks per branch") {
        // identity views, deterministic net: consistency is zero without
        // dropout and positive with it
        TrainConfig cfg = moons_config(Method::kPiModel, 1);
        cfg.policy1 = make_policy(Modality::kPoint2d, AugStrength::kNone);
        cfg.policy2 = make_policy(Modality::kPoint2d, AugStrength::kNone);
        Trainer no_drop(cfg, small_moons_model(), split);
        no_drop.run_epoch();
        CHECK(no_drop.history().epochs[0].loss_unsup == 0.0);
        cfg.dropout = 0.5;
        Trainer with_drop(cfg, small_moons_model(), split);
        with_drop.run_epoch();
        CHECK(with_drop.history().epochs[0].loss_unsup > 0.0);
    }
    SUBCASE("pseudo-label on regression rejected before the first step") {
        Dataset ds = gen_factor_shapes(20, 1);
        SplitRequest req;
        req.ratio = 0.5;
        DatasetSplit reg_split = split_labeled(ds, req, 1);
        TrainConfig cfg = moons_config(Method::kPseudoLabel, 1);
        cfg.loss.task = Task::kRegression;
        std::vector<LayerSpec> extractor = {{1024, 8, Activation::kRelu}};
        std::vector<LayerSpec> head = {{8, 1, Activation::kSigmoid}};
        ModelBundle m = build_bundle(extractor, head, Task::kRegression, 3, 1, 2, 3);
        CHECK_THROWS_AS(Trainer(cfg, m, reg_split), std::invalid_argument);
    }
}

TEST_CASE("mean teacher twin equals the hand-unrolled recursion") {
    Dataset ds = gen_two_moons(24, 0.1, 7);
    SplitRequest req;
    req.ratio = 0.5;
    DatasetSplit split = split_labeled(ds, req, 7);
    TrainConfig cfg = moons_config(Method::kMeanTeacher, 0);
    cfg.ema_alpha = 0.5;
    cfg.labeled_batch = split.labeled.size();
    cfg.unlabeled_batch = split.unlabeled.size();  // one step per epoch

    ModelBundle init = small_moons_model();
    Trainer trainer(cfg, init, split);
    std::vector<NamedParams> students;
    for (int stepk = 0; stepk < 3; ++stepk) {
        trainer.run_epoch();
        students.push_back(chitest::params_of(trainer.bundle()));
    }

    // phi'_t = alpha phi'_{t-1} + (1 - alpha) phi_t, seeded at the init params
    NamedParams shadow = chitest::params_of(init);
    for (const NamedParams& student : students)
        for (std::size_t p = 0; p < shadow.size(); ++p)
            for (std::size_t i = 0; i < shadow[p].second.values.size(); ++i)
                shadow[p].second.values[i] = 0.5 * shadow[p].second.values[i] +
                                             (1.0 - 0.5) * student[p].second.values[i];

    REQUIRE(trainer.twin() != nullptr);
    NamedParams twin = chitest::params_of(trainer.twin()->shadow);
    for (std::size_t p = 0; p < shadow.size(); ++p)
        CHECK(twin[p].second.values == shadow[p].second.values);
}

TEST_CASE("evaluate") {
    SUBCASE("classification error rate") {
        DatasetSplit split = small_moons_split();
        ModelBundle m = small_moons_model();
        MetricsReport report = evaluate(m, split.test, Task::kClassification);
        CHECK(report.error_rate >= 0.0);
        CHECK(report.error_rate <= 1.0);
    }
    SUBCASE("regression report shapes and ranges") {
        Dataset ds = gen_factor_shapes(24, 2);
        SplitRequest req;
        req.ratio = 0.5;
        DatasetSplit split = split_labeled(ds, req, 2);
        std::vector<LayerSpec> extractor = {{1024, 8, Activation::kRelu}};
        std::vector<LayerSpec> head = {{8, 1, Activation::kSigmoid}};
        ModelBundle m = build_bundle(extractor, head, Task::kRegression, 3, 1, 2, 3);
        MetricsReport report = evaluate(m, split.test, Task::kRegression);
        CHECK(report.mae_per_factor.size() == 3);
        CHECK(report.mae >= 0.0);
        CHECK(report.gm >= 0.0);
        CHECK(report.gm <= arithmetic_mean(report.mae_per_factor) + 1e-6 + 1.0);
        double mean_of_factors = arithmetic_mean(report.mae_per_factor);
        CHECK(report.mae == doctest::Approx(mean_of_factors));
    }
    SUBCASE("empty sample list rejected") {
        ModelBundle m = small_moons_model();
        CHECK_THROWS_AS(evaluate(m, {}, Task::kClassification), std::invalid_argument);
    }
}

TEST_CASE("head_disagreement") {
    DatasetSplit split = small_moons_split();
    LossKind kind{Task::kClassification, RegressionDistance::kL1};
    SUBCASE("copied heads agree everywhere") {
        ModelBundle m = small_moons_model();
        m.head2 = m.head1;
        CHECK(head_disagreement(m, split.unlabeled, kind) == 0.0);
    }
    SUBCASE("equals the consistency loss on the clean prediction pair") {
        ModelBundle m = small_moons_model();
        const double d = head_disagreement(m, split.unlabeled, kind);
        Tape tape;
        ModelBundle bound = bind(tape, m);
        Tensor f = extract_features(tape, bound, stack_inputs(split.unlabeled));
        Tensor y1 = head_forward(tape, bound.head1, f);
        Tensor y2 = head_forward(tape, bound.head2, f);
        CHECK(d == consistency_loss(tape, y1, y2, kind).item());
        CHECK(d >= 0.0);
    }
}

TEST_CASE("decision boundary grid") {
    ModelBundle m = small_moons_model();
    SUBCASE("resolution 2 evaluates exactly the four corners") {
        BoundaryGrid grid = decision_boundary_grid(m, Rect{-1.0, 1.0, -2.0, 2.0}, 2);
        REQUIRE(grid.xs.size() == 4);
        CHECK(grid.xs == std::vector<double>{-1.0, 1.0, -1.0, 1.0});
        CHECK(grid.ys == std::vector<double>{-2.0, -2.0, 2.0, 2.0});
    }
    SUBCASE("grid rows are simplex rows for classification") {
        BoundaryGrid grid = decision_boundary_grid(m, Rect{-1.5, 2.0, -1.5, 1.5}, 5);
        const std::size_t dim = grid.predictions.shape[1];
        for (std::size_t r = 0; r < grid.xs.size(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < dim; ++c) s += grid.predictions.values[r * dim + c];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
    SUBCASE("non-2d models rejected") {
        std::vector<LayerSpec> extractor = {{1024, 8, Activation::kRelu}};
        std::vector<LayerSpec> head = {{8, 1, Activation::kSigmoid}};
        ModelBundle raster = build_bundle(extractor, head, Task::kRegression, 1, 1, 2, 3);
        CHECK_THROWS_AS(decision_boundary_grid(raster, Rect{}, 4), std::invalid_argument);
        CHECK_THROWS_AS(decision_boundary_grid(m, Rect{}, 1), std::invalid_argument);
    }
}

TEST_CASE("dump_features") {
    DatasetSplit split = small_moons_split();
    ModelBundle m = small_moons_model();
    FeatureDump dump = dump_features(m, split);
    CHECK(dump.rows.size() ==
          split.labeled.size() + split.unlabeled.size() + split.test.size());
    CHECK(dump.feature_width == m.feature_width());
    for (const auto& row : dump.rows) CHECK(row.size() == dump.feature_width + 2);
    FeatureDump again = dump_features(m, split);
    CHECK(dump.rows == again.rows);
}
