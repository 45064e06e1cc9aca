#pragma once

#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "noisecal/config.hpp"
#include "noisecal/data.hpp"
#include "noisecal/engine.hpp"
#include "noisecal/metrics.hpp"

namespace noisecal {

/// Train pool and test split for a config.
struct ExperimentData {
    Dataset train_pool;
    Dataset test;
    /// True for the synthetic stand-in.
    bool surrogate{false};
};

inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
    const auto& d = c.data;
    if (d.source == DataSource::cifar10) {
        return {load_cifar10(d.cifar_dir, Split::train), load_cifar10(d.cifar_dir, Split::test), false};
    }
    const SyntheticImages source{d.synthetic, d.synthetic_seed};
    const RngStream root{d.synthetic_seed};
    RngStream train_rng = root.derive("synthetic-train");
    RngStream test_rng = root.derive("synthetic-test");
    return {source.sample(d.synthetic_train_size, train_rng, "synthetic-train"),
            source.sample(d.synthetic_test_size, test_rng, "synthetic-test"), true};
}

/// Everything one paired run needs: the training subset, its normalization,
/// and the normalized train/test/probe sets.
struct RunData {
    Dataset train;
    NormStats stats;
    EvalSet train_set;
    EvalSet test_set;
    std::vector<EvalSet> probes;
};

inline RunData prepare_run(const ExperimentData& data, const ExperimentConfig& c, const SeedPlan& seeds) {
    RngStream subset_rng = seeds.subset(c.data.subset_size);
    RunData r;
    r.train = subset(data.train_pool, c.data.subset_size, subset_rng);
    r.stats = compute_norm_stats(r.train);
    r.train_set = make_eval_set(r.train, r.stats);
    r.test_set = make_eval_set(data.test, r.stats);
    if (c.data.probe_size == 0 || c.data.probe_size >= data.test.size()) {
        r.probes.push_back(r.test_set);
    } else {
        std::vector<std::size_t> idx(c.data.probe_size);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        r.probes.push_back(make_eval_set(select(data.test, idx, data.test.name + "-probe"), r.stats));
    }
    return r;
}

/// OOD images for a config: the "ood" container, or Gaussian-noise images.
inline Dataset ood_images(const ExperimentConfig& c, const RngStream& rng) {
    const bool container = c.ood.source == OodSource::container ||
                           (c.ood.source == OodSource::automatic && c.data.container_paths.contains("ood"));
    if (container) {
        return load_container(c.data.container_paths.at("ood"));
    }
    RngStream noise_rng = rng.derive("ood-gaussian");
    return gaussian_noise_images(c.ood.gaussian_count, c.ood.gaussian_mean, c.ood.gaussian_std, noise_rng);
}

// ---------------------------------------------------------------------------
// Saved predictions

inline std::string predictions_csv(std::span<const Prediction> preds) {
    std::string out = "index,predicted,confidence,label\n";
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto& p = preds[i];
        out += std::to_string(i) + "," + std::to_string(p.predicted) + "," + detail::format_double(p.confidence) + "," +
               (p.true_label ? std::to_string(*p.true_label) : std::string{}) + "\n";
    }
    return out;
}

/// Inverse of predictions_csv. Throws FormatError naming the line.
inline std::vector<Prediction> parse_predictions_csv(const std::string& text) {
    std::istringstream in{text};
    std::string line;
    if (!std::getline(in, line) || line != "index,predicted,confidence,label") {
        throw FormatError("predictions: missing header index,predicted,confidence,label");
    }
    std::vector<Prediction> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss{line};
        std::string f;
        while (std::getline(ss, f, ',')) {
            fields.push_back(f);
        }
        if (line.back() == ',') {
            fields.emplace_back();
        }
        const auto bad = [&](const std::string& what) {
            return FormatError("predictions line " + std::to_string(line_no) + ": " + what);
        };
        if (fields.size() != 4) {
            throw bad("expected 4 fields");
        }
        const auto parse_count = [&](const std::string& s) {
            std::size_t v = 0;
            const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
            if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
                throw bad("not a non-negative integer: '" + s + "'");
            }
            return v;
        };
        if (parse_count(fields[0]) != out.size()) {
            throw bad("indices must run 0, 1, 2, ...");
        }
        Prediction p;
        p.predicted = parse_count(fields[1]);
        const auto& c = fields[2];
        const auto res = std::from_chars(c.data(), c.data() + c.size(), p.confidence);
        if (res.ec != std::errc{} || res.ptr != c.data() + c.size() || !(p.confidence >= 0.0 && p.confidence <= 1.0)) {
            throw bad("confidence must be a number in [0, 1]: '" + c + "'");
        }
        if (!fields[3].empty()) {
            p.true_label = parse_count(fields[3]);
        }
        out.push_back(p);
    }
    return out;
}

} // namespace noisecal
