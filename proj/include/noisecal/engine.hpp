#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <limits>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisecal/data.hpp"
#include "noisecal/errors.hpp"
#include "noisecal/metrics.hpp"
#include "noisecal/nn.hpp"
#include "noisecal/optim.hpp"
#include "noisecal/rng.hpp"
#include "noisecal/tensor.hpp"

namespace noisecal {

class DivergenceError;

enum class Phase { noise_pretrain, data_train };
enum class LearningRule { backprop, feedback_alignment };

inline const char* to_string(Phase p) { return p == Phase::noise_pretrain ? "noise-pretrain" : "data-train"; }
inline const char* to_string(LearningRule r) {
    return r == LearningRule::backprop ? "backprop" : "feedback-alignment";
}

struct PhaseConfig {
    Phase phase{Phase::data_train};
    std::size_t epochs{50};
    std::size_t batch_size{128};
    OptimConfig optim{};
    LearningRule learning_rule{LearningRule::backprop};
    std::size_t probe_every{1};
    /// Noise phase only: probe mean confidence (first probe set) must move by
    /// at least plateau_tolerance within the last plateau_window probes, or
    /// the phase stops early. plateau_window = 0 disables the rule.
    double plateau_tolerance{0.002};
    std::size_t plateau_window{5};
    /// Noise phase only: size of the fixed noise set used to report loss and
    /// accuracy on noise.
    std::size_t noise_eval_samples{1000};
    std::size_t bins{10};

    void validate() const {
        if (batch_size < 2) {
            throw InvalidArgument("phase batch_size must be >= 2");
        }
        if (probe_every < 1) {
            throw InvalidArgument("phase probe_every must be >= 1");
        }
        optim.validate();
    }

    friend bool operator==(const PhaseConfig&, const PhaseConfig&) = default;
};

/// A normalized evaluation or training set.
struct EvalSet {
    std::string name;
    Tensor inputs;
    Labels labels;
    std::size_t num_classes{10};
};

inline EvalSet make_eval_set(const Dataset& ds, const NormStats& stats, std::string name = {}) {
    return {name.empty() ? ds.name : std::move(name), normalize(ds, stats), ds.labels, ds.num_classes};
}

struct TrainLogRow {
    Phase phase{Phase::data_train};
    std::size_t epoch{0};
    std::string dataset;
    double train_loss{0.0};
    double test_loss{0.0};
    double train_acc{0.0};
    double test_acc{0.0};
    double mean_conf{0.0};
    double ece{0.0};
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
    std::size_t epochs_run{0};
    bool stopped_early{false};

    void append(const TrainLog& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }
};

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, TrainLog partial) : Error{what}, log_{std::move(partial)} {}
    [[nodiscard]] const char* kind() const noexcept override { return "divergence"; }
    [[nodiscard]] const TrainLog& log() const noexcept { return log_; }

private:
    TrainLog log_;
};

namespace detail {

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

} // namespace detail

inline std::string to_csv(const TrainLog& log) {
    std::string out = "phase,epoch,dataset,train_loss,test_loss,train_acc,test_acc,mean_conf,ece\n";
    for (const auto& r : log.rows) {
        out += to_string(r.phase);
        out += ',' + std::to_string(r.epoch) + ',' + r.dataset;
        for (const double v : {r.train_loss, r.test_loss, r.train_acc, r.test_acc, r.mean_conf, r.ece}) {
            out += ',' + detail::format_double(v);
        }
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation and a single optimization step

struct EvalMetrics {
    double loss{0.0};
    double accuracy{0.0};
    double mean_confidence{0.0};
    double ece{0.0};
};

inline EvalMetrics evaluate(const Model& model, const Tensor& inputs, const Labels& labels, std::size_t bins = 10) {
    const Tensor outputs = [&] {
        // Loss needs the raw head outputs (sigmoids for BCE), metrics the
        // confidence distribution.
        Tensor raw{{inputs.rows(), model.arch.num_classes}};
        constexpr std::size_t chunk = 1000;
        for (std::size_t start = 0; start < inputs.rows(); start += chunk) {
            const std::size_t stop = std::min(inputs.rows(), start + chunk);
            std::vector<std::size_t> idx(stop - start);
            std::iota(idx.begin(), idx.end(), start);
            const auto trace = forward_eval(model, gather_rows(inputs, idx));
            std::copy(trace.outputs.data().begin(), trace.outputs.data().end(),
                      raw.data().begin() + static_cast<std::ptrdiff_t>(start * model.arch.num_classes));
        }
        return raw;
    }();
    EvalMetrics m;
    // Non-finite outputs poison every metric; callers treat that as divergence.
    if (!std::all_of(outputs.data().begin(), outputs.data().end(), [](double v) { return std::isfinite(v); })) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        return EvalMetrics{nan, nan, nan, nan};
    }
    m.loss = model_loss(model, outputs, one_hot(labels, model.arch.num_classes));
    const auto preds = predictions_from_probs(confidence_distribution(model, outputs), labels);
    const auto stats = confidence_stats(preds);
    m.accuracy = stats.accuracy;
    m.mean_confidence = stats.mean_confidence;
    m.ece = ece(reliability(preds, bins));
    return m;
}

inline EvalMetrics evaluate(const Model& model, const EvalSet& set, std::size_t bins = 10) {
    return evaluate(model, set.inputs, set.labels, bins);
}

/// Forward (train mode), loss, gradient by the configured rule, Adam update.
/// Returns the batch loss before the update.
inline double train_step(Model& model, const Batch& batch, OptimState& state, const OptimConfig& optim,
                         LearningRule rule) {
    const auto trace = forward(model, batch.inputs, Mode::train);
    const double loss = model_loss(model, trace.outputs, batch.targets);
    if (!std::isfinite(loss)) {
        throw NonFiniteError("non-finite training loss");
    }
    const auto grads = rule == LearningRule::backprop ? backprop(model, trace, batch.targets)
                                                      : feedback_alignment_backward(model, trace, batch.targets);
    adam_step(model, grads, state, optim);
    return loss;
}

namespace detail {

inline void require_finite(const TrainLogRow& row, const TrainLog& log) {
    for (const double v : {row.train_loss, row.test_loss, row.train_acc, row.test_acc, row.mean_conf, row.ece}) {
        if (!std::isfinite(v)) {
            throw DivergenceError(std::string{"divergence: non-finite probe metric in "} + to_string(row.phase) +
                                      " at epoch " + std::to_string(row.epoch) + " on " + row.dataset,
                                  log);
        }
    }
}

inline bool is_probe_epoch(std::size_t epoch, std::size_t last, std::size_t every) {
    return epoch == 0 || epoch == last || epoch % every == 0;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Noise pretraining

/// Trains on fresh Gaussian noise batches with independent uniform labels.
///
/// An epoch is spec.batches_per_epoch batches. Before training and after
/// every probe_every epochs, the model is evaluated (eval mode) on a fixed
/// noise set (train_* columns) and on each probe set (test_*, mean_conf, ece);
/// one row per probe set, or a single "noise" row when there are none.
inline TrainLog pretrain_noise(Model& model, const NoiseSpec& spec, const PhaseConfig& phase,
                               std::span<const EvalSet> probes, const RngStream& rng, OptimState& state) {
    phase.validate();
    if (spec.input_dim != model.arch.input_dim || spec.num_classes != model.arch.num_classes) {
        throw InvalidArgument("pretrain_noise: noise spec does not match the model's input/output size");
    }
    NoiseSpec stream_spec = spec;
    stream_spec.batch_size = phase.batch_size;
    NoiseStream stream{stream_spec, rng.derive("noise-stream")};

    RngStream eval_rng = rng.derive("noise-eval");
    const Tensor eval_x = gaussian_tensor({phase.noise_eval_samples, spec.input_dim}, spec.mean, spec.std, eval_rng);
    const Labels eval_y = uniform_labels(phase.noise_eval_samples, spec.num_classes, eval_rng);

    TrainLog log;
    std::vector<double> confidence_history;
    const auto probe = [&](std::size_t epoch) {
        const auto noise = evaluate(model, eval_x, eval_y, phase.bins);
        const auto emit = [&](const std::string& name, const EvalMetrics& m) {
            TrainLogRow row{Phase::noise_pretrain, epoch,       name,          noise.loss, m.loss, noise.accuracy,
                            m.accuracy,          m.mean_confidence, m.ece};
            detail::require_finite(row, log);
            log.rows.push_back(std::move(row));
        };
        if (probes.empty()) {
            emit("noise", noise);
            confidence_history.push_back(noise.mean_confidence);
        }
        for (std::size_t i = 0; i < probes.size(); ++i) {
            const auto m = evaluate(model, probes[i], phase.bins);
            emit(probes[i].name, m);
            if (i == 0) {
                confidence_history.push_back(m.mean_confidence);
            }
        }
    };

    probe(0);
    for (std::size_t epoch = 1; epoch <= phase.epochs; ++epoch) {
        for (std::size_t b = 0; b < spec.batches_per_epoch; ++b) {
            try {
                train_step(model, stream.next(), state, phase.optim, phase.learning_rule);
            } catch (const NonFiniteError& e) {
                throw DivergenceError(std::string{"divergence in noise pretraining at epoch "} + std::to_string(epoch) +
                                          ", batch " + std::to_string(b) + ": " + e.what(),
                                      log);
            }
        }
        log.epochs_run = epoch;
        if (!detail::is_probe_epoch(epoch, phase.epochs, phase.probe_every)) {
            continue;
        }
        probe(epoch);
        const std::size_t w = phase.plateau_window;
        if (w > 0 && confidence_history.size() >= w && epoch < phase.epochs) {
            const auto tail = std::span{confidence_history}.last(w);
            const auto [lo, hi] = std::minmax_element(tail.begin(), tail.end());
            if (*hi - *lo < phase.plateau_tolerance) {
                log.stopped_early = true;
                break;
            }
        }
    }
    return log;
}

// ---------------------------------------------------------------------------
// Data training

/// Minibatch training on a normalized train set. Epoch e uses the batch order
/// drawn from rng.derive(e). Probes (eval mode) before training and every
/// probe_every epochs: train_* on the train set, the rest on the test set.
inline TrainLog train_data(Model& model, const EvalSet& train, const EvalSet& test, const PhaseConfig& phase,
                           const RngStream& rng, OptimState& state) {
    phase.validate();
    if (train.inputs.rows() < 2) {
        throw InvalidArgument("train_data: need at least 2 training samples");
    }
    if (train.inputs.cols() != model.arch.input_dim || test.inputs.cols() != model.arch.input_dim) {
        throw InvalidArgument("train_data: data dimension does not match the model input");
    }
    TrainLog log;
    const auto probe = [&](std::size_t epoch) {
        const auto tr = evaluate(model, train, phase.bins);
        const auto te = evaluate(model, test, phase.bins);
        TrainLogRow row{Phase::data_train, epoch,       test.name, tr.loss, te.loss, tr.accuracy,
                        te.accuracy,       te.mean_confidence, te.ece};
        detail::require_finite(row, log);
        log.rows.push_back(std::move(row));
    };

    probe(0);
    for (std::size_t epoch = 1; epoch <= phase.epochs; ++epoch) {
        RngStream epoch_rng = rng.derive(epoch);
        const auto batches = epoch_batches(train.inputs.rows(), phase.batch_size, true, epoch_rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            try {
                train_step(model, make_batch(train.inputs, train.labels, train.num_classes, batches[b]), state,
                           phase.optim, phase.learning_rule);
            } catch (const NonFiniteError& e) {
                throw DivergenceError("divergence in data training at epoch " + std::to_string(epoch) + ", batch " +
                                          std::to_string(b) + ": " + e.what(),
                                      log);
            }
        }
        log.epochs_run = epoch;
        if (detail::is_probe_epoch(epoch, phase.epochs, phase.probe_every)) {
            probe(epoch);
        }
    }
    return log;
}

// ---------------------------------------------------------------------------
// Paired experiments

/// Everything that defines one with/without-pretraining comparison except the
/// data and the seed.
struct ExperimentSpec {
    ArchSpec arch{};
    InitSpec init{};
    NoiseSpec noise{};
    PhaseConfig noise_phase{Phase::noise_pretrain, 50, 128};
    PhaseConfig data_phase{Phase::data_train, 50, 128};
    /// Reset Adam moments between the noise and the data phase.
    bool reset_optimizer{true};
    std::size_t bins{10};

    [[nodiscard]] bool needs_feedback() const {
        return noise_phase.learning_rule == LearningRule::feedback_alignment ||
               data_phase.learning_rule == LearningRule::feedback_alignment;
    }
};

/// Named child streams of one experiment seed.
struct SeedPlan {
    std::uint64_t seed;

    [[nodiscard]] RngStream root() const { return RngStream{seed}; }
    [[nodiscard]] RngStream init() const { return root().derive("init"); }
    [[nodiscard]] RngStream noise() const { return root().derive("noise"); }
    [[nodiscard]] RngStream data_phase() const { return root().derive("data-phase"); }
    [[nodiscard]] RngStream subset(std::size_t size) const { return root().derive("subset").derive(size); }
};

inline Model initial_model(const ExperimentSpec& spec, const SeedPlan& seeds) {
    RngStream rng = seeds.init();
    return build_model(spec.arch, spec.init, spec.needs_feedback(), rng);
}

struct PretrainOutcome {
    Model model;
    TrainLog log;
    OptimState state;
};

inline PretrainOutcome run_pretraining(const ExperimentSpec& spec, Model start, const SeedPlan& seeds,
                                       std::span<const EvalSet> probes = {}) {
    PretrainOutcome out{std::move(start), {}, {}};
    NoiseSpec noise = spec.noise;
    noise.input_dim = spec.arch.input_dim;
    noise.num_classes = spec.arch.num_classes;
    PhaseConfig phase = spec.noise_phase;
    phase.phase = Phase::noise_pretrain;
    out.log = pretrain_noise(out.model, noise, phase, probes, seeds.noise(), out.state);
    return out;
}

struct RunOutcome {
    Model model;
    TrainLog log;
    std::vector<Prediction> test_predictions;
    MetricsReport metrics;
};

/// Data phase from a given starting model. Both arms of a pair call this with
/// the same seeds, so they see identical batch orders.
inline RunOutcome run_data_phase(const ExperimentSpec& spec, Model start, OptimState state, const EvalSet& train,
                                 const EvalSet& test, const SeedPlan& seeds) {
    if (spec.reset_optimizer) {
        reset_state(state);
    }
    RunOutcome out{std::move(start), {}, {}, {}};
    PhaseConfig phase = spec.data_phase;
    phase.phase = Phase::data_train;
    out.log = train_data(out.model, train, test, phase, seeds.data_phase(), state);
    out.test_predictions = predict(out.model, test.inputs, test.labels);
    out.metrics = evaluate_predictions(out.test_predictions, spec.arch.num_classes, spec.bins);
    return out;
}

struct PairedOutcome {
    PretrainOutcome pretraining;
    RunOutcome with_pretraining;
    RunOutcome without_pretraining;
};

/// w/ and w/o runs from the same He-init draw, same data, same data-phase
/// stream; the only difference is the noise phase.
inline PairedOutcome run_paired(const ExperimentSpec& spec, const EvalSet& train, const EvalSet& test,
                                const SeedPlan& seeds, std::span<const EvalSet> probes = {}) {
    Model init = initial_model(spec, seeds);
    PairedOutcome out{run_pretraining(spec, init, seeds, probes), {}, {}};
    out.with_pretraining = run_data_phase(spec, out.pretraining.model, out.pretraining.state, train, test, seeds);
    out.without_pretraining = run_data_phase(spec, std::move(init), OptimState{}, train, test, seeds);
    return out;
}

/// Earliest data-phase probe row whose test accuracy reaches `accuracy`.
inline std::optional<TrainLogRow> first_row_reaching(const TrainLog& log, double accuracy) {
    for (const auto& row : log.rows) {
        if (row.phase == Phase::data_train && row.test_acc >= accuracy) {
            return row;
        }
    }
    return std::nullopt;
}

struct MatchedRows {
    TrainLogRow with_pretraining;
    TrainLogRow without_pretraining;
};

/// Accuracy-matched comparison points: the earliest probes at which both runs
/// reach `accuracy`, or nothing if either run never does.
inline std::optional<MatchedRows> accuracy_matched(const TrainLog& with, const TrainLog& without, double accuracy) {
    auto a = first_row_reaching(with, accuracy);
    auto b = first_row_reaching(without, accuracy);
    if (!a || !b) {
        return std::nullopt;
    }
    return MatchedRows{std::move(*a), std::move(*b)};
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
    std::size_t depth{0};
    std::size_t size{0};
    std::uint64_t seed{0};
    bool pretrained{false};
    double ece{0.0};
    double acc{0.0};
    bool failed{false};
    std::string error;
    std::uint64_t subset_hash{0};
};

struct SweepGrid {
    std::vector<std::size_t> depths;
    std::vector<std::size_t> sizes;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepCell> cells;
};

struct SweepAxes {
    std::vector<std::size_t> depths;
    std::vector<std::size_t> sizes;
    std::vector<std::uint64_t> seeds;

    friend bool operator==(const SweepAxes&, const SweepAxes&) = default;
};

inline nlohmann::ordered_json to_json(const SweepCell& c) {
    nlohmann::ordered_json j{{"depth", c.depth}, {"size", c.size},  {"seed", c.seed},
                             {"pretrained", c.pretrained}, {"ece", c.ece}, {"acc", c.acc}};
    if (c.failed) {
        j["failed"] = true;
        j["error"] = c.error;
    }
    return j;
}

inline nlohmann::ordered_json to_json(const SweepGrid& g) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : g.cells) {
        arr.push_back(to_json(c));
    }
    return arr;
}

inline SweepCell sweep_cell_from_json(const nlohmann::json& j) {
    SweepCell c;
    c.depth = j.at("depth").get<std::size_t>();
    c.size = j.at("size").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.pretrained = j.at("pretrained").get<bool>();
    c.ece = j.at("ece").get<double>();
    c.acc = j.at("acc").get<double>();
    c.failed = j.value("failed", false);
    c.error = j.value("error", std::string{});
    return c;
}

/// Seed of a sweep cell: depends on the replicate seed and depth only, so
/// every data size at a given (depth, seed) starts from the same initial model
/// and reuses one pretraining run.
inline SeedPlan sweep_seed_plan(std::uint64_t base_seed, std::size_t depth, std::uint64_t replicate) {
    return SeedPlan{RngStream{base_seed}.derive("sweep").derive(depth).derive(replicate).next_u64()};
}

struct SweepHooks {
    /// Cells (depth, size, seed) already completed; their pairs are skipped.
    std::set<std::tuple<std::size_t, std::size_t, std::uint64_t>> done;
    /// Called (serialized) for every finished pair of cells.
    std::function<void(const SweepCell& with, const SweepCell& without)> on_pair;
};

/// Runs every (depth, size, seed) pair. Work units are (depth, seed) groups:
/// pretraining once, then every size. Training subsets are drawn per
/// (size, replicate) and shared by all depths and both arms. Units run on
/// `jobs` threads; results are ordered by (depth, size, seed, pretrained).
inline SweepGrid run_sweep(const SweepAxes& axes, const ExperimentSpec& base, std::uint64_t base_seed,
                           const Dataset& train_pool, const Dataset& test, std::size_t jobs = 1,
                           const SweepHooks& hooks = {}) {
    if (axes.depths.empty() || axes.sizes.empty() || axes.seeds.empty()) {
        throw InvalidArgument("run_sweep: every axis needs at least one value");
    }
    SweepGrid grid{axes.depths, axes.sizes, axes.seeds, {}};
    const std::size_t nd = axes.depths.size();
    const std::size_t ns = axes.sizes.size();
    const std::size_t nr = axes.seeds.size();
    // Slot layout: ((depth * ns + size) * nr + seed) * 2 + pretrained.
    std::vector<std::optional<SweepCell>> slots(nd * ns * nr * 2);
    std::mutex hook_mutex;

    const auto run_unit = [&](std::size_t di, std::size_t ri) {
        const std::size_t depth = axes.depths[di];
        const std::uint64_t replicate = axes.seeds[ri];
        ExperimentSpec spec = base;
        spec.arch.depth = depth;
        const SeedPlan plan = sweep_seed_plan(base_seed, depth, replicate);
        std::optional<PretrainOutcome> pre;
        std::optional<Model> init;
        std::string unit_error;

        for (std::size_t si = 0; si < ns; ++si) {
            const std::size_t size = axes.sizes[si];
            const std::size_t slot = ((di * ns + si) * nr + ri) * 2;
            SweepCell with;
            with.depth = depth;
            with.size = size;
            with.seed = replicate;
            with.pretrained = true;
            SweepCell without = with;
            without.pretrained = false;
            if (hooks.done.contains({depth, size, replicate})) {
                continue;
            }
            try {
                if (!unit_error.empty()) {
                    throw InvalidState(unit_error);
                }
                if (!init) {
                    init = initial_model(spec, plan);
                }
                if (!pre) {
                    try {
                        pre = run_pretraining(spec, *init, plan);
                    } catch (const Error& e) {
                        unit_error = std::string{"pretraining failed: "} + e.what();
                        throw;
                    }
                }
                RngStream subset_rng = SeedPlan{RngStream{base_seed}.derive("sweep-subset").derive(replicate).next_u64()}
                                           .subset(size);
                const Dataset train_ds = subset(train_pool, size, subset_rng);
                const NormStats stats = compute_norm_stats(train_ds);
                const EvalSet train = make_eval_set(train_ds, stats);
                const EvalSet test_set = make_eval_set(test, stats);
                const std::uint64_t hash = content_hash(train_ds);
                with.subset_hash = hash;
                without.subset_hash = hash;

                const auto fill = [](SweepCell& cell, const std::function<RunOutcome()>& run) {
                    try {
                        const auto r = run();
                        cell.ece = r.metrics.ece;
                        cell.acc = r.metrics.stats.accuracy;
                    } catch (const Error& e) {
                        cell.failed = true;
                        cell.error = e.what();
                    }
                };
                fill(with, [&] { return run_data_phase(spec, pre->model, pre->state, train, test_set, plan); });
                fill(without, [&] { return run_data_phase(spec, *init, OptimState{}, train, test_set, plan); });
            } catch (const Error& e) {
                for (auto* c : {&with, &without}) {
                    if (!c->failed) {
                        c->failed = true;
                        c->error = e.what();
                    }
                }
            }
            slots[slot + 1] = with;
            slots[slot] = without;
            if (hooks.on_pair) {
                const std::lock_guard lock{hook_mutex};
                hooks.on_pair(with, without);
            }
        }
    };

    const std::size_t units = nd * nr;
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t u = next++; u < units; u = next++) {
            run_unit(u / nr, u % nr);
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(jobs, 1, units);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back(worker);
        }
    }
    for (auto& s : slots) {
        if (s) {
            grid.cells.push_back(*s);
        }
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Confidence maps and the 2-D toy model

struct ConfidenceMap {
    std::size_t resolution{0};
    double lo{-1.0};
    double hi{1.0};
    /// values[i * R + j]: row i has x2 = lo + (hi-lo)·i/(R-1), column j has
    /// x1 = lo + (hi-lo)·j/(R-1).
    std::vector<double> values;
    std::vector<Prediction> predictions;

    [[nodiscard]] double at(std::size_t i, std::size_t j) const { return values[i * resolution + j]; }
};

inline double grid_coordinate(std::size_t k, std::size_t resolution, double lo = -1.0, double hi = 1.0) {
    return lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(resolution - 1);
}

inline Tensor grid_inputs(std::size_t resolution, double lo = -1.0, double hi = 1.0) {
    Tensor x{{resolution * resolution, 2}};
    for (std::size_t i = 0; i < resolution; ++i) {
        for (std::size_t j = 0; j < resolution; ++j) {
            x(i * resolution + j, 0) = grid_coordinate(j, resolution, lo, hi);
            x(i * resolution + j, 1) = grid_coordinate(i, resolution, lo, hi);
        }
    }
    return x;
}

/// Confidence on a resolution × resolution grid over [-1, 1]².
inline ConfidenceMap confidence_map(const Model& model, std::size_t resolution) {
    if (model.arch.input_dim != 2) {
        throw InvalidArgument("confidence_map: model input_dim must be 2, got " + std::to_string(model.arch.input_dim));
    }
    if (resolution < 2) {
        throw InvalidArgument("confidence_map: resolution must be >= 2");
    }
    ConfidenceMap map;
    map.resolution = resolution;
    map.predictions = predict(model, grid_inputs(resolution));
    map.values.reserve(map.predictions.size());
    for (const auto& p : map.predictions) {
        map.values.push_back(p.confidence);
    }
    return map;
}

inline std::string to_csv(const ConfidenceMap& map) {
    std::string out;
    for (std::size_t i = 0; i < map.resolution; ++i) {
        for (std::size_t j = 0; j < map.resolution; ++j) {
            if (j > 0) {
                out += ',';
            }
            out += detail::format_double(map.at(i, j));
        }
        out += '\n';
    }
    return out;
}

inline nlohmann::ordered_json sidecar_json(const ConfidenceMap& map) {
    return {{"resolution", map.resolution}, {"range", {map.lo, map.hi}}};
}

struct ToyConfig {
    std::size_t hidden_width{10};
    std::size_t epochs{30};
    std::size_t batches_per_epoch{100};
    std::size_t batch_size{128};
    OptimConfig optim{};
    std::size_t resolution{201};
    std::size_t noise_samples{1000};

    friend bool operator==(const ToyConfig&, const ToyConfig&) = default;
};

struct ToyResult {
    ConfidenceMap untrained;
    ConfidenceMap pretrained;
    double bias_before{0.0};
    double bias_after{0.0};
    /// Confidence on 2-D Gaussian noise samples.
    std::vector<double> noise_conf_before;
    std::vector<double> noise_conf_after;
    TrainLog log;
};

inline ArchSpec toy_arch(std::size_t hidden_width = 10) {
    return {2, hidden_width, 1, 2, OutputKind::sigmoid};
}

/// Two-layer binary toy model (2 → hidden → 2 sigmoids, BCE) pretrained on
/// 2-D Gaussian noise with random binary labels.
inline ToyResult run_toy(const ToyConfig& cfg, const RngStream& rng) {
    RngStream init_rng = rng.derive("init");
    Model model = build_model(toy_arch(cfg.hidden_width), InitSpec{}, false, init_rng);

    RngStream sample_rng = rng.derive("noise-samples");
    const Tensor samples = gaussian_tensor({cfg.noise_samples, 2}, 0.0, 1.0, sample_rng);
    const auto noise_confidences = [&](const Model& m) {
        std::vector<double> out;
        for (const auto& p : predict(m, samples)) {
            out.push_back(p.confidence);
        }
        return out;
    };

    ToyResult result;
    result.untrained = confidence_map(model, cfg.resolution);
    result.bias_before = class_bias(result.untrained.predictions, 2).bias;
    result.noise_conf_before = noise_confidences(model);

    NoiseSpec noise{2, 0.0, 1.0, 2, cfg.batches_per_epoch, cfg.batch_size};
    PhaseConfig phase{Phase::noise_pretrain, cfg.epochs, cfg.batch_size, cfg.optim};
    phase.plateau_window = 0;
    phase.noise_eval_samples = cfg.noise_samples;
    OptimState state;
    result.log = pretrain_noise(model, noise, phase, {}, rng.derive("noise"), state);

    result.pretrained = confidence_map(model, cfg.resolution);
    result.bias_after = class_bias(result.pretrained.predictions, 2).bias;
    result.noise_conf_after = noise_confidences(model);
    return result;
}

// ---------------------------------------------------------------------------
// Out-of-distribution detection

struct OodReport {
    std::vector<double> id_confidences;
    std::vector<double> ood_confidences;
    double mean_id_confidence{0.0};
    double mean_ood_confidence{0.0};
    RocCurve roc;
};

/// Confidence on ID and OOD inputs (both already normalized with the ID
/// statistics), ROC with ID as the positive class.
inline OodReport run_ood(const Model& model, const Tensor& id_inputs, const Tensor& ood_inputs) {
    if (id_inputs.rank() != 2 || ood_inputs.rank() != 2 || id_inputs.cols() != model.arch.input_dim ||
        ood_inputs.cols() != model.arch.input_dim) {
        throw InvalidArgument("run_ood: ID " + shape_string(id_inputs.shape()) + " and OOD " +
                              shape_string(ood_inputs.shape()) + " inputs must both have " +
                              std::to_string(model.arch.input_dim) + " columns");
    }
    OodReport r;
    for (const auto& p : predict(model, id_inputs)) {
        r.id_confidences.push_back(p.confidence);
    }
    for (const auto& p : predict(model, ood_inputs)) {
        r.ood_confidences.push_back(p.confidence);
    }
    const auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    r.mean_id_confidence = mean(r.id_confidences);
    r.mean_ood_confidence = mean(r.ood_confidences);
    r.roc = roc_auroc(r.id_confidences, r.ood_confidences);
    return r;
}

inline nlohmann::ordered_json to_json(const OodReport& r) {
    auto points = nlohmann::ordered_json::array();
    for (const auto& p : r.roc.points) {
        points.push_back({std::isfinite(p.threshold) ? nlohmann::ordered_json(p.threshold) : nlohmann::ordered_json(),
                          p.fpr, p.tpr});
    }
    return {{"auroc", r.roc.auroc},
            {"mean_id_confidence", r.mean_id_confidence},
            {"mean_ood_confidence", r.mean_ood_confidence},
            {"id_count", r.id_confidences.size()},
            {"ood_count", r.ood_confidences.size()},
            {"roc", std::move(points)}};
}

} // namespace noisecal
