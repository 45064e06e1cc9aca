#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisecal/data.hpp"
#include "noisecal/engine.hpp"
#include "noisecal/errors.hpp"
#include "noisecal/nn.hpp"
#include "noisecal/optim.hpp"

namespace noisecal {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "config reader assumes 64-bit size_t");

inline constexpr double kMinLearningRate = 1e-5;
inline constexpr double kMaxLearningRate = 1e-4;

enum class DataSource { cifar10, synthetic };
enum class OodSource { automatic, container, gaussian };

struct DataConfig {
    DataSource source{DataSource::cifar10};
    std::string cifar_dir;
    /// Named RNC1 containers; "ood" is the out-of-distribution set.
    std::map<std::string, std::string> container_paths;
    std::size_t subset_size{4000};
    /// Default run seed (the --seed flag overrides it).
    std::uint64_t seed{0};
    /// Probe set for the noise phase: the first probe_size test samples
    /// (0 = the whole test split).
    std::size_t probe_size{0};
    /// Surrogate only.
    SyntheticSpec synthetic{};
    std::uint64_t synthetic_seed{7};
    std::size_t synthetic_train_size{50000};
    std::size_t synthetic_test_size{10000};

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct OodConfig {
    /// automatic: the "ood" container when configured, Gaussian images otherwise.
    OodSource source{OodSource::automatic};
    std::size_t gaussian_count{10000};
    double gaussian_mean{128.0};
    double gaussian_std{64.0};

    friend bool operator==(const OodConfig&, const OodConfig&) = default;
};

struct ExperimentConfig {
    ArchSpec arch{};
    InitSpec init{};
    /// Noise distribution for pretraining (inputs are drawn in normalized space).
    double noise_mean{0.0};
    double noise_std{1.0};
    std::size_t noise_batches_per_epoch{100};
    PhaseConfig noise_phase{Phase::noise_pretrain};
    PhaseConfig data_phase{Phase::data_train};
    bool reset_optimizer{true};
    DataConfig data{};
    std::size_t bins{10};
    std::string outputs{"runs"};
    std::optional<SweepAxes> sweep;
    ToyConfig toy{};
    OodConfig ood{};

    [[nodiscard]] ExperimentSpec experiment_spec() const {
        ExperimentSpec spec;
        spec.arch = arch;
        spec.init = init;
        spec.noise = NoiseSpec{arch.input_dim,         noise_mean,          noise_std,
                               arch.num_classes,        noise_batches_per_epoch, noise_phase.batch_size};
        spec.noise_phase = noise_phase;
        spec.noise_phase.bins = bins;
        spec.data_phase = data_phase;
        spec.data_phase.bins = bins;
        spec.reset_optimizer = reset_optimizer;
        spec.bins = bins;
        return spec;
    }

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

inline const char* to_string(DataSource s) { return s == DataSource::cifar10 ? "cifar10" : "synthetic"; }

inline const char* to_string(OodSource s) {
    switch (s) {
    case OodSource::automatic:
        return "auto";
    case OodSource::container:
        return "container";
    case OodSource::gaussian:
        return "gaussian";
    }
    return "auto";
}

inline const char* to_string(OutputKind k) { return k == OutputKind::softmax ? "softmax" : "sigmoid"; }

/// Reads one JSON object, remembering which keys were consumed so the rest can
/// be reported as unknown. Errors carry the dotted key path.
inline bool is_count(const nlohmann::json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string path) : j_{j}, path_{std::move(path)} {
        if (!j_.is_object()) {
            throw ConfigError(where() + ": expected an object");
        }
    }

    [[nodiscard]] std::string key_path(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    [[nodiscard]] const nlohmann::json* find(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void read(const std::string& key, std::size_t& out) {
        if (const auto* v = find(key)) {
            if (!is_count(*v)) {
                throw ConfigError(key_path(key) + ": expected a non-negative integer");
            }
            out = v->get<std::size_t>();
        }
    }

    void read(const std::string& key, double& out) {
        if (const auto* v = find(key)) {
            if (!v->is_number()) {
                throw ConfigError(key_path(key) + ": expected a number");
            }
            out = v->get<double>();
        }
    }

    void read(const std::string& key, bool& out) {
        if (const auto* v = find(key)) {
            if (!v->is_boolean()) {
                throw ConfigError(key_path(key) + ": expected true or false");
            }
            out = v->get<bool>();
        }
    }

    void read(const std::string& key, std::string& out) {
        if (const auto* v = find(key)) {
            if (!v->is_string()) {
                throw ConfigError(key_path(key) + ": expected a string");
            }
            out = v->get<std::string>();
        }
    }

    template <typename Enum>
    void read_enum(const std::string& key, Enum& out, std::initializer_list<std::pair<const char*, Enum>> options) {
        const auto* v = find(key);
        if (v == nullptr) {
            return;
        }
        std::string allowed;
        if (v->is_string()) {
            for (const auto& [name, value] : options) {
                if (v->get<std::string>() == name) {
                    out = value;
                    return;
                }
            }
        }
        for (const auto& [name, value] : options) {
            allowed += allowed.empty() ? "" : ", ";
            allowed += name;
        }
        throw ConfigError(key_path(key) + ": expected one of " + allowed);
    }

    template <typename T>
    void read_list(const std::string& key, std::vector<T>& out) {
        const auto* v = find(key);
        if (v == nullptr) {
            return;
        }
        if (!v->is_array()) {
            throw ConfigError(key_path(key) + ": expected an array");
        }
        out.clear();
        for (std::size_t i = 0; i < v->size(); ++i) {
            const auto& e = (*v)[i];
            if (!is_count(e)) {
                throw ConfigError(key_path(key) + "[" + std::to_string(i) + "]: expected a non-negative integer");
            }
            out.push_back(e.get<T>());
        }
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.contains(key)) {
                throw ConfigError(key_path(key) + ": unknown key");
            }
        }
    }

private:
    [[nodiscard]] std::string where() const { return path_.empty() ? "config" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_optim(const nlohmann::json& j, const std::string& path, OptimConfig& o) {
    ObjectReader r{j, path};
    r.read("learning_rate", o.learning_rate);
    r.read("beta1", o.beta1);
    r.read("beta2", o.beta2);
    r.read("epsilon", o.epsilon);
    r.read("weight_decay", o.weight_decay);
    r.finish();
}

inline void read_phase(const nlohmann::json& j, const std::string& path, PhaseConfig& p) {
    ObjectReader r{j, path};
    r.read_enum("phase", p.phase, {{"noise-pretrain", Phase::noise_pretrain}, {"data-train", Phase::data_train}});
    r.read("epochs", p.epochs);
    r.read("batch_size", p.batch_size);
    if (const auto* o = r.find("optim")) {
        read_optim(*o, r.key_path("optim"), p.optim);
    }
    r.read_enum("learning_rule", p.learning_rule,
                {{"backprop", LearningRule::backprop}, {"feedback-alignment", LearningRule::feedback_alignment}});
    r.read("probe_every", p.probe_every);
    r.read("plateau_tolerance", p.plateau_tolerance);
    r.read("plateau_window", p.plateau_window);
    r.read("noise_eval_samples", p.noise_eval_samples);
    r.finish();
}

inline void check_optim(const OptimConfig& o, const std::string& path) {
    if (!(o.learning_rate >= kMinLearningRate && o.learning_rate <= kMaxLearningRate)) {
        throw ConfigError(path + ".learning_rate: " + format_double(o.learning_rate) + " is outside [1e-05, 0.0001]");
    }
    if (!(o.beta1 >= 0.0 && o.beta1 < 1.0)) {
        throw ConfigError(path + ".beta1: must be in [0, 1)");
    }
    if (!(o.beta2 >= 0.0 && o.beta2 < 1.0)) {
        throw ConfigError(path + ".beta2: must be in [0, 1)");
    }
    if (!(o.epsilon > 0.0)) {
        throw ConfigError(path + ".epsilon: must be > 0");
    }
    if (!(o.weight_decay >= 0.0)) {
        throw ConfigError(path + ".weight_decay: must be >= 0");
    }
}

inline void check_phase(const PhaseConfig& p, const std::string& path) {
    if (p.batch_size < 2) {
        throw ConfigError(path + ".batch_size: must be >= 2");
    }
    if (p.probe_every < 1) {
        throw ConfigError(path + ".probe_every: must be >= 1");
    }
    if (!(p.plateau_tolerance >= 0.0)) {
        throw ConfigError(path + ".plateau_tolerance: must be >= 0");
    }
    if (p.noise_eval_samples < 1) {
        throw ConfigError(path + ".noise_eval_samples: must be >= 1");
    }
    check_optim(p.optim, path + ".optim");
}

inline nlohmann::ordered_json optim_json(const OptimConfig& o) {
    return {{"learning_rate", o.learning_rate},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"epsilon", o.epsilon},
            {"weight_decay", o.weight_decay}};
}

inline nlohmann::ordered_json phase_json(const PhaseConfig& p) {
    return {{"phase", to_string(p.phase)},
            {"epochs", p.epochs},
            {"batch_size", p.batch_size},
            {"optim", optim_json(p.optim)},
            {"learning_rule", to_string(p.learning_rule)},
            {"probe_every", p.probe_every},
            {"plateau_tolerance", p.plateau_tolerance},
            {"plateau_window", p.plateau_window},
            {"noise_eval_samples", p.noise_eval_samples}};
}

} // namespace detail

/// Size of the training pool the configured source provides.
inline std::size_t train_pool_size(const DataConfig& d) {
    return d.source == DataSource::cifar10 ? kCifarTrainSize : d.synthetic_train_size;
}

/// Checks ranges and referenced paths. Throws ConfigError naming the key.
inline void validate(const ExperimentConfig& c, bool check_paths = true) {
    try {
        c.arch.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string{"arch: "} + e.what());
    }
    if (c.arch.input_dim != 3 * 32 * 32) {
        throw ConfigError("arch.input_dim: image data has 3072 features, got " + std::to_string(c.arch.input_dim));
    }
    if (c.arch.num_classes != 10) {
        throw ConfigError("arch.num_classes: the image datasets have 10 classes, got " +
                          std::to_string(c.arch.num_classes));
    }
    if (!(c.init.gain > 0.0)) {
        throw ConfigError("init.gain: must be > 0");
    }
    if (!(c.noise_std >= 0.0)) {
        throw ConfigError("noise.std: must be >= 0");
    }
    if (c.noise_batches_per_epoch < 1) {
        throw ConfigError("noise.batches_per_epoch: must be >= 1");
    }
    if (c.noise_phase.phase != Phase::noise_pretrain || c.data_phase.phase != Phase::data_train) {
        throw ConfigError("phases: expected one noise-pretrain and one data-train phase");
    }
    detail::check_phase(c.noise_phase, "phases[noise-pretrain]");
    detail::check_phase(c.data_phase, "phases[data-train]");
    if (c.bins < 1) {
        throw ConfigError("metrics.bins: must be >= 1");
    }
    if (c.outputs.empty()) {
        throw ConfigError("outputs: must be a nonempty directory path");
    }

    const auto& d = c.data;
    const std::size_t pool = train_pool_size(d);
    if (d.subset_size < 2) {
        throw ConfigError("data.subset_size: must be >= 2");
    }
    if (d.subset_size > pool) {
        throw ConfigError("data.subset_size: " + std::to_string(d.subset_size) + " exceeds the " +
                          std::to_string(pool) + "-sample " + (d.source == DataSource::cifar10 ? "CIFAR-10" : "synthetic") +
                          " train split");
    }
    if (d.source == DataSource::synthetic) {
        if (d.synthetic_test_size < 1) {
            throw ConfigError("data.synthetic_test_size: must be >= 1");
        }
        if (d.synthetic.octaves < 1 || d.synthetic.octaves > 4) {
            throw ConfigError("data.synthetic.octaves: must be in 1..4");
        }
        if (d.synthetic.modes_per_class < 1) {
            throw ConfigError("data.synthetic.modes_per_class: must be >= 1");
        }
    }
    if (check_paths) {
        if (d.source == DataSource::cifar10) {
            if (d.cifar_dir.empty()) {
                throw ConfigError("data.cifar_dir: required when data.source is cifar10");
            }
            if (!std::filesystem::is_directory(d.cifar_dir)) {
                throw ConfigError("data.cifar_dir: directory does not exist: " + d.cifar_dir);
            }
        }
        for (const auto& [name, path] : d.container_paths) {
            if (!std::filesystem::is_regular_file(path)) {
                throw ConfigError("data.container_paths." + name + ": file does not exist: " + path);
            }
        }
    }
    if (c.ood.source == OodSource::container && !d.container_paths.contains("ood")) {
        throw ConfigError("ood.source: container requires data.container_paths.ood");
    }
    if (c.ood.gaussian_count < 1 || !(c.ood.gaussian_std >= 0.0)) {
        throw ConfigError("ood: gaussian_count must be >= 1 and gaussian_std >= 0");
    }
    if (c.sweep) {
        const auto& s = *c.sweep;
        if (s.depths.empty() || s.sizes.empty() || s.seeds.empty()) {
            throw ConfigError("sweep: depths, sizes and seeds must be nonempty");
        }
        for (std::size_t i = 0; i < s.depths.size(); ++i) {
            if (s.depths[i] < 1) {
                throw ConfigError("sweep.depths[" + std::to_string(i) + "]: must be >= 1");
            }
        }
        for (std::size_t i = 0; i < s.sizes.size(); ++i) {
            if (s.sizes[i] < 2 || s.sizes[i] > pool) {
                throw ConfigError("sweep.sizes[" + std::to_string(i) + "]: must be in [2, " + std::to_string(pool) + "]");
            }
        }
    }
    if (c.toy.hidden_width < 1 || c.toy.batch_size < 2 || c.toy.resolution < 2 || c.toy.noise_samples < 1 ||
        c.toy.batches_per_epoch < 1) {
        throw ConfigError("toy: hidden_width, batches_per_epoch, noise_samples >= 1; batch_size, resolution >= 2");
    }
    detail::check_optim(c.toy.optim, "toy.optim");
}

/// Parses a config document. Missing keys keep their defaults; unknown keys
/// and out-of-range values are ConfigErrors naming the key path.
inline ExperimentConfig parse_config(const nlohmann::json& j, bool check_paths = true) {
    using detail::ObjectReader;
    ExperimentConfig c;
    ObjectReader root{j, ""};

    if (const auto* a = root.find("arch")) {
        ObjectReader r{*a, "arch"};
        r.read("input_dim", c.arch.input_dim);
        r.read("hidden_width", c.arch.hidden_width);
        r.read("depth", c.arch.depth);
        r.read("num_classes", c.arch.num_classes);
        r.read_enum("output", c.arch.output, {{"softmax", OutputKind::softmax}, {"sigmoid", OutputKind::sigmoid}});
        r.finish();
    }
    if (const auto* i = root.find("init")) {
        ObjectReader r{*i, "init"};
        r.read("gain", c.init.gain);
        r.finish();
    }
    if (const auto* n = root.find("noise")) {
        ObjectReader r{*n, "noise"};
        r.read("mean", c.noise_mean);
        r.read("std", c.noise_std);
        r.read("batches_per_epoch", c.noise_batches_per_epoch);
        r.finish();
    }
    if (const auto* ps = root.find("phases")) {
        if (!ps->is_array()) {
            throw ConfigError("phases: expected an array");
        }
        std::set<Phase> seen;
        for (std::size_t i = 0; i < ps->size(); ++i) {
            const std::string path = "phases[" + std::to_string(i) + "]";
            const auto& pj = (*ps)[i];
            if (!pj.is_object() || !pj.contains("phase")) {
                throw ConfigError(path + ".phase: required");
            }
            PhaseConfig probe;
            detail::read_phase(pj, path, probe);
            PhaseConfig& target = probe.phase == Phase::noise_pretrain ? c.noise_phase : c.data_phase;
            if (!seen.insert(probe.phase).second) {
                throw ConfigError(path + ".phase: duplicate " + std::string{to_string(probe.phase)} + " phase");
            }
            detail::read_phase(pj, path, target);
            detail::check_phase(target, path);
        }
    }
    root.read("reset_optimizer", c.reset_optimizer);
    if (const auto* d = root.find("data")) {
        ObjectReader r{*d, "data"};
        r.read_enum("source", c.data.source, {{"cifar10", DataSource::cifar10}, {"synthetic", DataSource::synthetic}});
        r.read("cifar_dir", c.data.cifar_dir);
        if (const auto* cp = r.find("container_paths")) {
            ObjectReader cr{*cp, "data.container_paths"};
            for (const auto& [key, value] : cp->items()) {
                std::string path;
                cr.read(key, path);
                c.data.container_paths[key] = path;
            }
            cr.finish();
        }
        r.read("subset_size", c.data.subset_size);
        r.read("seed", c.data.seed);
        r.read("probe_size", c.data.probe_size);
        if (const auto* s = r.find("synthetic")) {
            ObjectReader sr{*s, "data.synthetic"};
            auto& sp = c.data.synthetic;
            sr.read("modes_per_class", sp.modes_per_class);
            sr.read("octaves", sp.octaves);
            sr.read("class_scale", sp.class_scale);
            sr.read("mode_scale", sp.mode_scale);
            sr.read("texture_scale", sp.texture_scale);
            sr.read("pixel_noise", sp.pixel_noise);
            sr.read("brightness", sp.brightness);
            sr.read("contrast", sp.contrast);
            sr.read("seed", c.data.synthetic_seed);
            sr.read("train_size", c.data.synthetic_train_size);
            sr.read("test_size", c.data.synthetic_test_size);
            sr.finish();
        }
        r.finish();
    }
    if (const auto* m = root.find("metrics")) {
        ObjectReader r{*m, "metrics"};
        r.read("bins", c.bins);
        r.finish();
    }
    root.read("outputs", c.outputs);
    if (const auto* s = root.find("sweep")) {
        ObjectReader r{*s, "sweep"};
        SweepAxes axes;
        r.read_list("depths", axes.depths);
        r.read_list("sizes", axes.sizes);
        r.read_list("seeds", axes.seeds);
        r.finish();
        c.sweep = axes;
    }
    if (const auto* t = root.find("toy")) {
        ObjectReader r{*t, "toy"};
        r.read("hidden_width", c.toy.hidden_width);
        r.read("epochs", c.toy.epochs);
        r.read("batches_per_epoch", c.toy.batches_per_epoch);
        r.read("batch_size", c.toy.batch_size);
        if (const auto* o = r.find("optim")) {
            detail::read_optim(*o, "toy.optim", c.toy.optim);
        }
        r.read("resolution", c.toy.resolution);
        r.read("noise_samples", c.toy.noise_samples);
        r.finish();
    }
    if (const auto* o = root.find("ood")) {
        ObjectReader r{*o, "ood"};
        r.read_enum("source", c.ood.source,
                    {{"auto", OodSource::automatic}, {"container", OodSource::container}, {"gaussian", OodSource::gaussian}});
        r.read("gaussian_count", c.ood.gaussian_count);
        r.read("gaussian_mean", c.ood.gaussian_mean);
        r.read("gaussian_std", c.ood.gaussian_std);
        r.finish();
    }
    root.finish();
    validate(c, check_paths);
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, bool check_paths = true) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string{"config is not valid JSON: "} + e.what());
    }
    return parse_config(j, check_paths);
}

inline ExperimentConfig parse_config_file(const std::filesystem::path& path, bool check_paths = true) {
    std::ifstream in{path, std::ios::binary};
    if (!in) {
        throw ConfigError("cannot open config file " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), check_paths);
}

/// Full config with every default spelled out, in a fixed key order.
inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
    nlohmann::ordered_json j;
    j["arch"] = {{"input_dim", c.arch.input_dim},
                 {"hidden_width", c.arch.hidden_width},
                 {"depth", c.arch.depth},
                 {"num_classes", c.arch.num_classes},
                 {"output", detail::to_string(c.arch.output)}};
    j["init"] = {{"gain", c.init.gain}};
    j["noise"] = {{"mean", c.noise_mean}, {"std", c.noise_std}, {"batches_per_epoch", c.noise_batches_per_epoch}};
    j["phases"] = nlohmann::ordered_json::array({detail::phase_json(c.noise_phase), detail::phase_json(c.data_phase)});
    j["reset_optimizer"] = c.reset_optimizer;
    nlohmann::ordered_json containers = nlohmann::ordered_json::object();
    for (const auto& [name, path] : c.data.container_paths) {
        containers[name] = path;
    }
    const auto& sp = c.data.synthetic;
    j["data"] = {{"source", detail::to_string(c.data.source)},
                 {"cifar_dir", c.data.cifar_dir},
                 {"container_paths", containers},
                 {"subset_size", c.data.subset_size},
                 {"seed", c.data.seed},
                 {"probe_size", c.data.probe_size},
                 {"synthetic",
                  {{"modes_per_class", sp.modes_per_class},
                   {"octaves", sp.octaves},
                   {"class_scale", sp.class_scale},
                   {"mode_scale", sp.mode_scale},
                   {"texture_scale", sp.texture_scale},
                   {"pixel_noise", sp.pixel_noise},
                   {"brightness", sp.brightness},
                   {"contrast", sp.contrast},
                   {"seed", c.data.synthetic_seed},
                   {"train_size", c.data.synthetic_train_size},
                   {"test_size", c.data.synthetic_test_size}}}};
    j["metrics"] = {{"bins", c.bins}};
    j["outputs"] = c.outputs;
    if (c.sweep) {
        j["sweep"] = {{"depths", c.sweep->depths}, {"sizes", c.sweep->sizes}, {"seeds", c.sweep->seeds}};
    }
    j["toy"] = {{"hidden_width", c.toy.hidden_width},
                {"epochs", c.toy.epochs},
                {"batches_per_epoch", c.toy.batches_per_epoch},
                {"batch_size", c.toy.batch_size},
                {"optim", detail::optim_json(c.toy.optim)},
                {"resolution", c.toy.resolution},
                {"noise_samples", c.toy.noise_samples}};
    j["ood"] = {{"source", detail::to_string(c.ood.source)},
                {"gaussian_count", c.ood.gaussian_count},
                {"gaussian_mean", c.ood.gaussian_mean},
                {"gaussian_std", c.ood.gaussian_std}};
    return j;
}

inline std::string write_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

} // namespace noisecal
