#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "noisecal/engine.hpp"

using namespace noisecal;

namespace {

// 3×2×2 images whose class shifts the mean of one channel, so a small MLP can learn them.
Dataset tiny_images(std::size_t n, std::uint64_t seed, const std::string& name) {
    RngStream rng{seed};
    Dataset ds;
    ds.name = name;
    ds.channels = 3;
    ds.height = 2;
    ds.width = 2;
    ds.num_classes = 3;
    for (std::size_t i = 0; i < n; ++i) {
        const auto label = static_cast<std::uint16_t>(i % 3);
        ds.labels.push_back(label);
        for (std::size_t k = 0; k < ds.feature_dim(); ++k) {
            const double shift = k / 4 == label ? 60.0 : 0.0;
            ds.pixels.push_back(static_cast<std::uint8_t>(std::clamp(std::round(100.0 + shift + 30.0 * rng.normal()), 0.0, 255.0)));
        }
    }
    return ds;
}

ExperimentSpec tiny_spec() {
    ExperimentSpec spec;
    spec.arch = ArchSpec{.input_dim = 12, .hidden_width = 16, .depth = 2, .num_classes = 3};
    spec.noise.batches_per_epoch = 5;
    spec.noise_phase.epochs = 3;
    spec.noise_phase.batch_size = 16;
    spec.noise_phase.noise_eval_samples = 100;
    spec.noise_phase.optim.learning_rate = 1e-3;
    spec.data_phase.epochs = 3;
    spec.data_phase.batch_size = 16;
    spec.data_phase.optim.learning_rate = 1e-3;
    return spec;
}

struct TinyData {
    EvalSet train;
    EvalSet test;
};

TinyData tiny_data() {
    const Dataset train = tiny_images(120, 1, "train");
    const Dataset test = tiny_images(60, 2, "test");
    const NormStats stats = compute_norm_stats(train);
    return {make_eval_set(train, stats), make_eval_set(test, stats)};
}

bool same_metrics(const EvalMetrics& a, const TrainLogRow& row) {
    return a.loss == row.test_loss && a.accuracy == row.test_acc && a.mean_confidence == row.mean_conf &&
           a.ece == row.ece;
}

} // namespace

TEST(PhaseConfig, Validation) {
    PhaseConfig p;
    EXPECT_NO_THROW(p.validate());
    p.batch_size = 1;
    EXPECT_THROW(p.validate(), InvalidArgument);
}

TEST(TrainData, EpochZeroProbeMatchesUntouchedModel) {
    const auto data = tiny_data();
    const ExperimentSpec spec = tiny_spec();
    const Model start = initial_model(spec, SeedPlan{5});
    Model model = start;
    OptimState state;
    const auto log = train_data(model, data.train, data.test, spec.data_phase, RngStream{1}, state);
    ASSERT_EQ(log.rows.size(), 4U);
    EXPECT_EQ(log.rows[0].epoch, 0U);
    EXPECT_TRUE(same_metrics(evaluate(start, data.test), log.rows[0]));
    const auto train_metrics = evaluate(start, data.train);
    EXPECT_EQ(log.rows[0].train_loss, train_metrics.loss);
    EXPECT_EQ(log.rows[0].train_acc, train_metrics.accuracy);
    for (std::size_t i = 1; i < log.rows.size(); ++i) {
        EXPECT_GT(log.rows[i].epoch, log.rows[i - 1].epoch);
    }
    EXPECT_EQ(log.epochs_run, 3U);
}

TEST(TrainData, ZeroEpochsLeavesModelUntouched) {
    const auto data = tiny_data();
    ExperimentSpec spec = tiny_spec();
    spec.data_phase.epochs = 0;
    const Model start = initial_model(spec, SeedPlan{6});
    Model model = start;
    OptimState state;
    const auto log = train_data(model, data.train, data.test, spec.data_phase, RngStream{1}, state);
    EXPECT_EQ(log.rows.size(), 1U);
    EXPECT_EQ(model, start);
    EXPECT_EQ(model.blocks[0].running_mean, start.blocks[0].running_mean);
}

TEST(TrainData, ProbeCadence) {
    const auto data = tiny_data();
    ExperimentSpec spec = tiny_spec();
    spec.data_phase.epochs = 7;
    spec.data_phase.probe_every = 3;
    Model model = initial_model(spec, SeedPlan{7});
    OptimState state;
    const auto log = train_data(model, data.train, data.test, spec.data_phase, RngStream{1}, state);
    std::vector<std::size_t> epochs;
    for (const auto& r : log.rows) {
        epochs.push_back(r.epoch);
    }
    EXPECT_EQ(epochs, (std::vector<std::size_t>{0, 3, 6, 7}));
}

TEST(TrainData, LearnsSeparableData) {
    const auto data = tiny_data();
    ExperimentSpec spec = tiny_spec();
    spec.data_phase.epochs = 30;
    Model model = initial_model(spec, SeedPlan{8});
    OptimState state;
    const auto log = train_data(model, data.train, data.test, spec.data_phase, RngStream{1}, state);
    EXPECT_GT(log.rows.back().train_acc, 0.9);
    EXPECT_LT(log.rows.back().train_loss, log.rows.front().train_loss);
}

TEST(TrainData, DivergenceCarriesPartialLog) {
    auto data = tiny_data();
    data.train.inputs(3, 2) = std::numeric_limits<double>::quiet_NaN();
    const ExperimentSpec spec = tiny_spec();
    Model model = initial_model(spec, SeedPlan{9});
    OptimState state;
    try {
        train_data(model, data.train, data.test, spec.data_phase, RngStream{1}, state);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_STREQ(e.kind(), "divergence");
        EXPECT_NE(std::string{e.what()}.find("divergence"), std::string::npos);
        EXPECT_NE(std::string{e.what()}.find("epoch 1"), std::string::npos);
        ASSERT_EQ(e.log().rows.size(), 1U);
        EXPECT_EQ(e.log().rows[0].epoch, 0U);
    }
}

TEST(TrainData, DivergenceMidTrainingKeepsEarlierRows) {
    const auto data = tiny_data();
    const ExperimentSpec spec = tiny_spec();
    Model model = initial_model(spec, SeedPlan{10});
    OptimState state;
    // A parameter that is already infinite poisons the first update.
    model.head.bias[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(train_data(model, data.train, data.test, spec.data_phase, RngStream{1}, state), DivergenceError);
}

TEST(NoisePretrain, RowsPerProbeAndNames) {
    const auto data = tiny_data();
    const ExperimentSpec spec = tiny_spec();
    Model model = initial_model(spec, SeedPlan{11});
    OptimState state;
    NoiseSpec noise = spec.noise;
    noise.input_dim = 12;
    noise.num_classes = 3;
    PhaseConfig phase = spec.noise_phase;
    phase.plateau_window = 0;
    const std::vector<EvalSet> probes{data.test, data.train};
    const auto log = pretrain_noise(model, noise, phase, probes, RngStream{3}, state);
    ASSERT_EQ(log.rows.size(), 8U);
    EXPECT_EQ(log.rows[0].dataset, "test");
    EXPECT_EQ(log.rows[1].dataset, "train");
    EXPECT_EQ(log.rows[0].phase, Phase::noise_pretrain);
    EXPECT_EQ(log.rows[6].epoch, 3U);
    EXPECT_EQ(state.step, 15U);

    Model bare = initial_model(spec, SeedPlan{11});
    OptimState bare_state;
    const auto bare_log = pretrain_noise(bare, noise, phase, {}, RngStream{3}, bare_state);
    ASSERT_EQ(bare_log.rows.size(), 4U);
    EXPECT_EQ(bare_log.rows[0].dataset, "noise");
    // Probes do not influence training.
    EXPECT_EQ(bare, model);
}

TEST(NoisePretrain, ZeroEpochsOnlyProbes) {
    const auto data = tiny_data();
    ExperimentSpec spec = tiny_spec();
    spec.noise_phase.epochs = 0;
    const Model start = initial_model(spec, SeedPlan{12});
    const auto out = run_pretraining(spec, start, SeedPlan{12}, std::vector<EvalSet>{data.test});
    EXPECT_EQ(out.model, start);
    EXPECT_EQ(out.model.blocks[1].running_var, start.blocks[1].running_var);
    ASSERT_EQ(out.log.rows.size(), 1U);
    EXPECT_TRUE(same_metrics(evaluate(start, data.test), out.log.rows[0]));
}

TEST(NoisePretrain, PlateauStopsEarly) {
    ExperimentSpec spec = tiny_spec();
    spec.noise_phase.epochs = 20;
    spec.noise_phase.plateau_window = 2;
    spec.noise_phase.plateau_tolerance = 1.0;
    const auto out = run_pretraining(spec, initial_model(spec, SeedPlan{13}), SeedPlan{13});
    EXPECT_TRUE(out.log.stopped_early);
    EXPECT_EQ(out.log.epochs_run, 1U);

    spec.noise_phase.plateau_window = 0;
    const auto full = run_pretraining(spec, initial_model(spec, SeedPlan{13}), SeedPlan{13});
    EXPECT_FALSE(full.log.stopped_early);
    EXPECT_EQ(full.log.epochs_run, 20U);
}

TEST(NoisePretrain, NoiseAccuracyStaysAtChance) {
    ExperimentSpec spec = tiny_spec();
    spec.noise_phase.epochs = 20;
    spec.noise_phase.plateau_window = 0;
    spec.noise_phase.noise_eval_samples = 1000;
    const auto out = run_pretraining(spec, initial_model(spec, SeedPlan{14}), SeedPlan{14});
    const double p = 1.0 / 3.0;
    const double band = 3.0 * std::sqrt(p * (1.0 - p) / 1000.0);
    const auto& rows = out.log.rows;
    for (std::size_t start = 0; start + 10 <= rows.size(); ++start) {
        double mean = 0.0;
        for (std::size_t i = start; i < start + 10; ++i) {
            mean += rows[i].train_acc / 10.0;
        }
        EXPECT_NEAR(mean, p, band) << "window at " << start;
    }
    EXPECT_LT(rows.back().train_loss, rows.front().train_loss);
}

TEST(NoisePretrain, MismatchedSpecRejected) {
    ExperimentSpec spec = tiny_spec();
    Model model = initial_model(spec, SeedPlan{15});
    OptimState state;
    NoiseSpec noise;
    EXPECT_THROW(pretrain_noise(model, noise, spec.noise_phase, {}, RngStream{1}, state), InvalidArgument);
}

TEST(Paired, DeterministicAcrossRuns) {
    const auto data = tiny_data();
    const ExperimentSpec spec = tiny_spec();
    const std::vector<EvalSet> probes{data.test};
    const auto a = run_paired(spec, data.train, data.test, SeedPlan{21}, probes);
    const auto b = run_paired(spec, data.train, data.test, SeedPlan{21}, probes);
    EXPECT_EQ(to_csv(a.pretraining.log), to_csv(b.pretraining.log));
    EXPECT_EQ(to_csv(a.with_pretraining.log), to_csv(b.with_pretraining.log));
    EXPECT_EQ(to_csv(a.without_pretraining.log), to_csv(b.without_pretraining.log));
    EXPECT_EQ(to_json(a.with_pretraining.metrics).dump(), to_json(b.with_pretraining.metrics).dump());
    EXPECT_EQ(a.with_pretraining.model, b.with_pretraining.model);
    const auto c = run_paired(spec, data.train, data.test, SeedPlan{22}, probes);
    EXPECT_NE(to_csv(a.without_pretraining.log), to_csv(c.without_pretraining.log));
}

TEST(Paired, OnlyDifferenceIsTheNoisePhase) {
    const auto data = tiny_data();
    ExperimentSpec spec = tiny_spec();
    spec.noise_phase.epochs = 0;
    const auto out = run_paired(spec, data.train, data.test, SeedPlan{23});
    EXPECT_EQ(to_csv(out.with_pretraining.log), to_csv(out.without_pretraining.log));
    EXPECT_EQ(out.with_pretraining.model, out.without_pretraining.model);
}

TEST(Paired, WithoutArmStartsFromInitialModel) {
    const auto data = tiny_data();
    const ExperimentSpec spec = tiny_spec();
    const auto out = run_paired(spec, data.train, data.test, SeedPlan{24});
    EXPECT_TRUE(same_metrics(evaluate(initial_model(spec, SeedPlan{24}), data.test), out.without_pretraining.log.rows[0]));
    EXPECT_TRUE(same_metrics(evaluate(out.pretraining.model, data.test), out.with_pretraining.log.rows[0]));
}

TEST(Paired, OptimizerResetPolicy) {
    const auto data = tiny_data();
    ExperimentSpec spec = tiny_spec();
    const auto pre = run_pretraining(spec, initial_model(spec, SeedPlan{25}), SeedPlan{25});
    ASSERT_GT(pre.state.step, 0U);
    const auto reset = run_data_phase(spec, pre.model, pre.state, data.train, data.test, SeedPlan{25});
    const auto fresh = run_data_phase(spec, pre.model, OptimState{}, data.train, data.test, SeedPlan{25});
    EXPECT_EQ(reset.model, fresh.model);
    spec.reset_optimizer = false;
    const auto carried = run_data_phase(spec, pre.model, pre.state, data.train, data.test, SeedPlan{25});
    EXPECT_NE(carried.model, fresh.model);
}

TEST(Paired, FeedbackAlignmentKeepsFeedbackFixed) {
    const auto data = tiny_data();
    ExperimentSpec spec = tiny_spec();
    spec.noise_phase.learning_rule = LearningRule::feedback_alignment;
    spec.data_phase.learning_rule = LearningRule::feedback_alignment;
    const Model init = initial_model(spec, SeedPlan{26});
    ASSERT_TRUE(init.has_feedback());
    const auto out = run_paired(spec, data.train, data.test, SeedPlan{26});
    EXPECT_EQ(out.with_pretraining.model.feedback, init.feedback);
    EXPECT_EQ(out.without_pretraining.model.feedback, init.feedback);
    EXPECT_NE(out.with_pretraining.model.blocks, init.blocks);
}

TEST(Paired, AccuracyMatchedRows) {
    TrainLog a;
    TrainLog b;
    a.rows = {TrainLogRow{Phase::data_train, 0, "t", 0, 2.0, 0, 0.1, 0.5, 0.4},
              TrainLogRow{Phase::data_train, 1, "t", 0, 1.0, 0, 0.6, 0.6, 0.1}};
    b.rows = {TrainLogRow{Phase::data_train, 0, "t", 0, 2.5, 0, 0.1, 0.5, 0.4},
              TrainLogRow{Phase::data_train, 1, "t", 0, 1.5, 0, 0.4, 0.7, 0.3},
              TrainLogRow{Phase::data_train, 2, "t", 0, 1.2, 0, 0.65, 0.8, 0.2}};
    const auto m = accuracy_matched(a, b, 0.6);
    ASSERT_TRUE(m.has_value());
    EXPECT_EQ(m->with_pretraining.epoch, 1U);
    EXPECT_EQ(m->without_pretraining.epoch, 2U);
    EXPECT_FALSE(accuracy_matched(a, b, 0.9).has_value());
}

TEST(TrainLogCsv, HeaderAndRows) {
    TrainLog log;
    log.rows.push_back(TrainLogRow{Phase::noise_pretrain, 2, "cifar10-test", 2.5, 2.25, 0.1, 0.125, 0.5, 0.375});
    const std::string csv = to_csv(log);
    EXPECT_EQ(csv,
              "phase,epoch,dataset,train_loss,test_loss,train_acc,test_acc,mean_conf,ece\n"
              "noise-pretrain,2,cifar10-test,2.5,2.25,0.1,0.125,0.5,0.375\n");
}

TEST(Sweep, CardinalityPairingAndDeterminism) {
    const Dataset pool = tiny_images(300, 31, "pool");
    const Dataset test = tiny_images(60, 32, "test");
    ExperimentSpec spec = tiny_spec();
    spec.noise_phase.epochs = 1;
    spec.data_phase.epochs = 2;
    const SweepAxes axes{{1, 2}, {30, 60}, {1, 2}};
    const auto grid = run_sweep(axes, spec, 99, pool, test, 1);
    ASSERT_EQ(grid.cells.size(), 2U * 2U * 2U * 2U);
    for (std::size_t i = 0; i < grid.cells.size(); i += 2) {
        const auto& without = grid.cells[i];
        const auto& with = grid.cells[i + 1];
        EXPECT_FALSE(without.pretrained);
        EXPECT_TRUE(with.pretrained);
        EXPECT_EQ(with.subset_hash, without.subset_hash);
        EXPECT_EQ(with.depth, without.depth);
        EXPECT_EQ(with.size, without.size);
        EXPECT_FALSE(with.failed) << with.error;
    }
    // Subsets depend on (size, seed) only, so every depth trains on the same data.
    std::map<std::pair<std::size_t, std::uint64_t>, std::uint64_t> hashes;
    for (const auto& c : grid.cells) {
        const auto [it, inserted] = hashes.emplace(std::make_pair(c.size, c.seed), c.subset_hash);
        EXPECT_EQ(it->second, c.subset_hash);
    }
    EXPECT_NE(hashes.at({30, 1}), hashes.at({30, 2}));

    const auto threaded = run_sweep(axes, spec, 99, pool, test, 3);
    EXPECT_EQ(to_json(threaded).dump(), to_json(grid).dump());
}

TEST(Sweep, FailedCellsRecordedAndSweepContinues) {
    const Dataset pool = tiny_images(100, 33, "pool");
    const Dataset test = tiny_images(30, 34, "test");
    ExperimentSpec spec = tiny_spec();
    spec.noise_phase.epochs = 1;
    spec.data_phase.epochs = 1;
    const SweepAxes axes{{1}, {30, 500}, {1}};
    const auto grid = run_sweep(axes, spec, 5, pool, test);
    ASSERT_EQ(grid.cells.size(), 4U);
    EXPECT_FALSE(grid.cells[0].failed);
    EXPECT_FALSE(grid.cells[1].failed);
    EXPECT_TRUE(grid.cells[2].failed);
    EXPECT_TRUE(grid.cells[3].failed);
    EXPECT_NE(grid.cells[2].error.find("subset"), std::string::npos);
    const auto j = to_json(grid);
    EXPECT_TRUE(j[2].contains("error"));
    EXPECT_FALSE(j[0].contains("error"));
}

TEST(Sweep, ResumeSkipsDoneCellsAndJsonRoundTrips) {
    const Dataset pool = tiny_images(200, 35, "pool");
    const Dataset test = tiny_images(30, 36, "test");
    ExperimentSpec spec = tiny_spec();
    spec.noise_phase.epochs = 1;
    spec.data_phase.epochs = 1;
    const SweepAxes axes{{1}, {30, 60}, {1}};
    const auto full = run_sweep(axes, spec, 7, pool, test);
    SweepHooks hooks;
    hooks.done.insert({1, 30, 1});
    std::size_t pairs = 0;
    hooks.on_pair = [&](const SweepCell& with, const SweepCell& without) {
        ++pairs;
        EXPECT_EQ(with.size, 60U);
        EXPECT_EQ(without.size, 60U);
    };
    const auto partial = run_sweep(axes, spec, 7, pool, test, 1, hooks);
    EXPECT_EQ(pairs, 1U);
    ASSERT_EQ(partial.cells.size(), 2U);
    EXPECT_EQ(to_json(partial.cells[0]).dump(), to_json(full.cells[2]).dump());
    const SweepCell back = sweep_cell_from_json(to_json(full.cells[1]));
    EXPECT_EQ(to_json(back).dump(), to_json(full.cells[1]).dump());
}

TEST(Sweep, EmptyAxisRejected) {
    const Dataset pool = tiny_images(30, 1, "pool");
    EXPECT_THROW(run_sweep(SweepAxes{{}, {10}, {1}}, tiny_spec(), 1, pool, pool), InvalidArgument);
}

TEST(ConfidenceMapTest, GridCoordinates) {
    const Tensor x = grid_inputs(3);
    ASSERT_EQ(x.shape(), (Shape{9, 2}));
    const std::vector<double> expected{-1.0, 0.0, 1.0};
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(x(i * 3 + j, 0), expected[j]);
            EXPECT_EQ(x(i * 3 + j, 1), expected[i]);
        }
    }
}

TEST(ConfidenceMapTest, ValuesDeterministicAndBounded) {
    RngStream rng{41};
    const Model m = build_model(toy_arch(), InitSpec{}, false, rng);
    const auto a = confidence_map(m, 11);
    const auto b = confidence_map(m, 11);
    EXPECT_EQ(a.values, b.values);
    ASSERT_EQ(a.values.size(), 121U);
    for (const double v : a.values) {
        EXPECT_GE(v, 0.5 - 1e-9);
        EXPECT_LE(v, 1.0 + 1e-9);
    }
    const std::string csv = to_csv(a);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), ','), 11 * 10);
    const auto side = sidecar_json(a);
    EXPECT_EQ(side["resolution"], 11);
    EXPECT_EQ(side["range"][0], -1.0);
    EXPECT_EQ(side["range"][1], 1.0);
}

TEST(ConfidenceMapTest, ConstantModelGivesConstantMap) {
    RngStream rng{42};
    Model m = build_model(toy_arch(), InitSpec{}, false, rng);
    m.head.weight.fill(0.0);
    m.head.bias[0] = 0.3;
    m.head.bias[1] = -0.2;
    const auto map = confidence_map(m, 5);
    for (const double v : map.values) {
        EXPECT_EQ(v, map.values[0]);
    }
}

TEST(ConfidenceMapTest, WrongInputDimensionRejected) {
    RngStream rng{43};
    const Model m = build_model(ArchSpec{.input_dim = 3, .hidden_width = 4, .depth = 1, .num_classes = 2}, InitSpec{},
                                false, rng);
    EXPECT_THROW(confidence_map(m, 5), InvalidArgument);
}

TEST(Toy, DeterministicAndShaped) {
    ToyConfig cfg;
    cfg.epochs = 2;
    cfg.batches_per_epoch = 10;
    cfg.resolution = 21;
    cfg.noise_samples = 200;
    const auto a = run_toy(cfg, RngStream{3});
    const auto b = run_toy(cfg, RngStream{3});
    EXPECT_EQ(a.pretrained.values, b.pretrained.values);
    EXPECT_EQ(to_csv(a.log), to_csv(b.log));
    EXPECT_EQ(a.untrained.values.size(), 441U);
    EXPECT_EQ(a.noise_conf_before.size(), 200U);
    EXPECT_EQ(a.log.rows.size(), 3U);
    EXPECT_NE(a.untrained.values, a.pretrained.values);
    EXPECT_GE(a.bias_before, 0.0);
    EXPECT_LE(a.bias_before, 0.5);
}

TEST(Ood, ReportShapeAndDeterminism) {
    RngStream rng{51};
    const Model m = build_model(ArchSpec{.input_dim = 6, .hidden_width = 8, .depth = 2, .num_classes = 4}, InitSpec{},
                                false, rng);
    const Tensor id = gaussian_tensor({40, 6}, 0.0, 1.0, rng);
    const Tensor ood = gaussian_tensor({30, 6}, 0.0, 3.0, rng);
    const auto a = run_ood(m, id, ood);
    const auto b = run_ood(m, id, ood);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(a.id_confidences.size(), 40U);
    EXPECT_EQ(a.ood_confidences.size(), 30U);
    const auto j = to_json(a);
    EXPECT_EQ(j["id_count"], 40);
    EXPECT_TRUE(j["roc"][0][0].is_null());
    EXPECT_GE(a.roc.auroc, 0.0);
    EXPECT_LE(a.roc.auroc, 1.0);
    EXPECT_THROW(run_ood(m, id, Tensor{{5, 7}}), InvalidArgument);
}
