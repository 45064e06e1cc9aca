// noisecal: command-line front end for noise pretraining experiments.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "noisecal/checkpoint.hpp"
#include "noisecal/config.hpp"
#include "noisecal/workspace.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace noisecal;

namespace {

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw IoError("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xF];
    }
    return out;
}

std::string read_text(const fs::path& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Output directory with a manifest listing every file written into it.
/// A directory belongs to one (config, seed); reusing it with another is an error.
class RunDir {
public:
    RunDir(fs::path root, json config_hash, json seed) : root_{std::move(root)} {
        fs::create_directories(root_);
        const fs::path path = root_ / "manifest.json";
        if (fs::exists(path)) {
            json old;
            try {
                old = json::parse(read_text(path));
            } catch (const json::parse_error& e) {
                throw FormatError(path.string() + ": not valid JSON: " + e.what());
            }
            if (old.value("config_hash", json{}) != config_hash || old.value("seed", json{}) != seed) {
                throw ConfigError("--out " + root_.string() +
                                  " holds a run with a different config or seed; choose another output directory");
            }
            manifest_ = std::move(old);
        } else {
            manifest_ = json{{"config_hash", config_hash}, {"seed", seed}, {"artifacts", json::array()}};
        }
    }

    [[nodiscard]] const fs::path& root() const { return root_; }
    json& manifest() { return manifest_; }

    void write(const std::string& rel, std::string_view bytes) {
        write_file(root_ / rel, bytes);
        auto& artifacts = manifest_["artifacts"];
        const json entry{{"path", rel}, {"sha256", sha256_hex(bytes)}};
        bool replaced = false;
        for (auto& a : artifacts) {
            if (a["path"] == rel) {
                a = entry;
                replaced = true;
            }
        }
        if (!replaced) {
            artifacts.push_back(entry);
        }
        written_.push_back(rel);
        save();
    }

    void write(const std::string& rel, const std::vector<std::uint8_t>& bytes) {
        write(rel, std::string_view{reinterpret_cast<const char*>(bytes.data()), bytes.size()});
    }

    void save() { write_file(root_ / "manifest.json", manifest_.dump(2) + "\n"); }

    [[nodiscard]] const std::vector<std::string>& written() const { return written_; }

private:
    static void write_file(const fs::path& path, std::string_view bytes) {
        const fs::path tmp = path.string() + ".tmp";
        {
            std::ofstream out{tmp, std::ios::binary | std::ios::trunc};
            out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            if (!out) {
                throw IoError("cannot write " + tmp.string());
            }
        }
        fs::rename(tmp, path);
    }

    fs::path root_;
    json manifest_;
    std::vector<std::string> written_;
};

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t jobs{1};
    bool no_pretrain{false};
    std::string model;
    std::string predictions;
    std::string data_path;
};

struct Context {
    ExperimentConfig config;
    std::uint64_t seed{0};
    RunDir dir;
};

Context open_context(const Options& o) {
    if (o.config.empty()) {
        throw ConfigError("--config is required for this command");
    }
    ExperimentConfig c = parse_config_file(o.config);
    const std::uint64_t seed = o.seed.value_or(c.data.seed);
    const fs::path out = o.out.empty() ? fs::path{c.outputs} : fs::path{o.out};
    RunDir dir{out, sha256_hex(write_config(c)), seed};
    dir.write("config.json", write_config(c));
    return {std::move(c), seed, std::move(dir)};
}

json run_json(const RunOutcome& r) {
    json j = to_json(r.metrics);
    j["epochs_run"] = r.log.epochs_run;
    return j;
}

/// Runs one training arm, saving the partial log if it diverges.
RunOutcome train_arm(RunDir& dir, const std::string& arm, const std::function<RunOutcome()>& run) {
    try {
        RunOutcome r = run();
        dir.write("train_log_" + arm + ".csv", to_csv(r.log));
        dir.write("predictions_" + arm + ".csv", predictions_csv(r.test_predictions));
        dir.write("metrics_" + arm + ".json", run_json(r).dump(2) + "\n");
        dir.write("model_" + arm + ".ckpt", encode_checkpoint(r.model));
        return r;
    } catch (const DivergenceError& e) {
        dir.write("train_log_" + arm + ".csv", to_csv(e.log()));
        throw;
    }
}

PretrainOutcome pretrain_stage(RunDir& dir, const ExperimentSpec& spec, const Model& init, const SeedPlan& plan,
                               std::span<const EvalSet> probes) {
    try {
        PretrainOutcome pre = run_pretraining(spec, init, plan, probes);
        dir.write("pretrain_log.csv", to_csv(pre.log));
        dir.write("pretrained.ckpt", encode_checkpoint(pre.model));
        return pre;
    } catch (const DivergenceError& e) {
        dir.write("pretrain_log.csv", to_csv(e.log()));
        throw;
    }
}

int cmd_pretrain(const Options& o) {
    if (o.no_pretrain) {
        throw InvalidArgument("pretrain: --no-pretrain would skip the only phase this command runs");
    }
    auto ctx = open_context(o);
    const SeedPlan plan{ctx.seed};
    const auto data = load_experiment_data(ctx.config);
    const auto run = prepare_run(data, ctx.config, plan);
    const auto spec = ctx.config.experiment_spec();
    const Model init = initial_model(spec, plan);
    ctx.dir.write("init.ckpt", encode_checkpoint(init));
    const auto pre = pretrain_stage(ctx.dir, spec, init, plan, run.probes);
    const json summary{{"surrogate", data.surrogate},
                       {"epochs_run", pre.log.epochs_run},
                       {"stopped_early", pre.log.stopped_early},
                       {"final_probe", pre.log.rows.empty() ? json{} : json{{"mean_conf", pre.log.rows.back().mean_conf},
                                                                            {"test_acc", pre.log.rows.back().test_acc},
                                                                            {"test_loss", pre.log.rows.back().test_loss}}}};
    ctx.dir.write("pretrain_summary.json", summary.dump(2) + "\n");
    return 0;
}

int cmd_train(const Options& o) {
    auto ctx = open_context(o);
    const SeedPlan plan{ctx.seed};
    const auto data = load_experiment_data(ctx.config);
    const auto run = prepare_run(data, ctx.config, plan);
    const auto spec = ctx.config.experiment_spec();
    const Model init = initial_model(spec, plan);
    json summary{{"surrogate", data.surrogate}, {"subset_hash", hex64(content_hash(run.train))}};
    if (!o.no_pretrain) {
        const auto pre = pretrain_stage(ctx.dir, spec, init, plan, run.probes);
        const auto with = train_arm(ctx.dir, "with", [&] {
            return run_data_phase(spec, pre.model, pre.state, run.train_set, run.test_set, plan);
        });
        summary["with_pretraining"] = run_json(with);
    }
    const auto without = train_arm(ctx.dir, "without", [&] {
        return run_data_phase(spec, init, OptimState{}, run.train_set, run.test_set, plan);
    });
    summary["without_pretraining"] = run_json(without);
    ctx.dir.write("summary.json", summary.dump(2) + "\n");
    return 0;
}

int cmd_sweep(const Options& o) {
    auto ctx = open_context(o);
    if (!ctx.config.sweep) {
        throw ConfigError("sweep: the config has no sweep section");
    }
    if (o.no_pretrain) {
        throw InvalidArgument("sweep: --no-pretrain is not supported; every cell is a with/without pair");
    }
    const SweepAxes& axes = *ctx.config.sweep;
    json& recorded = ctx.dir.manifest()["sweep_cells"];
    if (recorded.is_null()) {
        recorded = json::array();
    }
    std::vector<SweepCell> previous;
    SweepHooks hooks;
    for (const auto& j : recorded) {
        previous.push_back(sweep_cell_from_json(j));
        hooks.done.insert({previous.back().depth, previous.back().size, previous.back().seed});
    }
    hooks.on_pair = [&](const SweepCell& with, const SweepCell& without) {
        if (with.failed || without.failed) {
            return;
        }
        recorded.push_back(to_json(without));
        recorded.push_back(to_json(with));
        ctx.dir.save();
    };
    const auto data = load_experiment_data(ctx.config);
    const auto grid = run_sweep(axes, ctx.config.experiment_spec(), ctx.seed, data.train_pool, data.test, o.jobs, hooks);

    // Merge resumed and fresh cells back into grid order.
    const auto key = [](const SweepCell& c) { return std::tuple{c.depth, c.size, c.seed, c.pretrained}; };
    std::map<std::tuple<std::size_t, std::size_t, std::uint64_t, bool>, SweepCell> cells;
    for (const auto& c : previous) {
        cells[key(c)] = c;
    }
    for (const auto& c : grid.cells) {
        cells[key(c)] = c;
    }
    SweepGrid merged{axes.depths, axes.sizes, axes.seeds, {}};
    std::size_t failed = 0;
    for (const auto d : axes.depths) {
        for (const auto s : axes.sizes) {
            for (const auto r : axes.seeds) {
                for (const bool pre : {false, true}) {
                    const auto it = cells.find({d, s, r, pre});
                    if (it != cells.end()) {
                        merged.cells.push_back(it->second);
                        failed += it->second.failed ? 1 : 0;
                    }
                }
            }
        }
    }
    json out{{"surrogate", data.surrogate},
             {"depths", axes.depths},
             {"sizes", axes.sizes},
             {"seeds", axes.seeds},
             {"cells", to_json(merged)}};
    ctx.dir.write("sweep.json", out.dump(2) + "\n");
    if (failed > 0) {
        throw InvalidState("sweep: " + std::to_string(failed) + " of " + std::to_string(merged.cells.size()) +
                           " cells failed; see sweep.json");
    }
    return 0;
}

int cmd_toy(const Options& o) {
    auto ctx = open_context(o);
    const auto r = run_toy(ctx.config.toy, RngStream{ctx.seed}.derive("toy"));
    ctx.dir.write("toy_untrained.csv", to_csv(r.untrained));
    ctx.dir.write("toy_untrained.json", sidecar_json(r.untrained).dump(2) + "\n");
    ctx.dir.write("toy_pretrained.csv", to_csv(r.pretrained));
    ctx.dir.write("toy_pretrained.json", sidecar_json(r.pretrained).dump(2) + "\n");
    ctx.dir.write("toy_log.csv", to_csv(r.log));
    const auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (const double x : v) {
            s += x;
        }
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    const json summary{{"class_bias_before", r.bias_before},
                       {"class_bias_after", r.bias_after},
                       {"noise_confidence_before", mean(r.noise_conf_before)},
                       {"noise_confidence_after", mean(r.noise_conf_after)}};
    ctx.dir.write("toy_summary.json", summary.dump(2) + "\n");
    return 0;
}

int cmd_ood(const Options& o) {
    if (o.model.empty()) {
        throw InvalidArgument("ood: --model <checkpoint> is required");
    }
    auto ctx = open_context(o);
    const Model model = load_checkpoint(o.model);
    const SeedPlan plan{ctx.seed};
    const auto data = load_experiment_data(ctx.config);
    // Same subset and normalization as `train` with this seed.
    const auto run = prepare_run(data, ctx.config, plan);
    const Dataset ood = ood_images(ctx.config, plan.root());
    if (ood.feature_dim() != data.test.feature_dim()) {
        throw ShapeError("ood: OOD images have " + std::to_string(ood.feature_dim()) + " features, the ID data " +
                         std::to_string(data.test.feature_dim()));
    }
    const auto report = run_ood(model, run.test_set.inputs, normalize(ood, run.stats));
    json j = to_json(report);
    j["surrogate"] = data.surrogate;
    j["ood_source"] = ood.name;
    ctx.dir.write("ood.json", j.dump(2) + "\n");
    return 0;
}

int cmd_report(const Options& o) {
    std::size_t bins = 10;
    std::size_t classes = 10;
    json config_hash;
    if (!o.config.empty()) {
        const auto c = parse_config_file(o.config, false);
        bins = c.bins;
        classes = c.arch.num_classes;
        config_hash = sha256_hex(write_config(c));
    }
    if (o.out.empty()) {
        throw InvalidArgument("report: --out is required");
    }
    const auto preds = parse_predictions_csv(read_text(o.predictions));
    if (preds.empty()) {
        throw InvalidArgument("report: no predictions in " + o.predictions);
    }
    RunDir dir{o.out, config_hash, json{}};
    json j = to_json(evaluate_predictions(preds, classes, bins));
    j["source"] = o.predictions;
    j["source_sha256"] = sha256_hex(read_text(o.predictions));
    dir.write("report.json", j.dump(2) + "\n");
    return 0;
}

json describe(const Dataset& ds) {
    return {{"name", ds.name},
            {"count", ds.size()},
            {"channels", ds.channels},
            {"height", ds.height},
            {"width", ds.width},
            {"num_classes", ds.num_classes},
            {"class_counts", ds.class_counts()},
            {"content_hash", hex64(content_hash(ds))}};
}

int cmd_inspect(const Options& o) {
    if (o.out.empty()) {
        throw InvalidArgument("inspect-data: --out is required");
    }
    json sets = json::array();
    if (fs::is_directory(o.data_path)) {
        sets.push_back(describe(load_cifar10(o.data_path, Split::train)));
        sets.push_back(describe(load_cifar10(o.data_path, Split::test)));
    } else {
        sets.push_back(describe(load_container(o.data_path)));
    }
    RunDir dir{o.out, json{}, json{}};
    dir.write("inspect.json", json{{"path", o.data_path}, {"datasets", sets}}.dump(2) + "\n");
    return 0;
}

void print_error(const std::string& kind, const std::string& message) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"noisecal: noise pretraining and calibration experiments"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--config", o.config, "Experiment config (JSON)");
    app.add_option("--seed", o.seed, "Top-level seed (default: data.seed from the config)");
    app.add_option("--out", o.out, "Output directory (default: outputs from the config)");
    app.add_option("--jobs", o.jobs, "Worker threads for sweep cells")->check(CLI::PositiveNumber);
    app.add_flag("--no-pretrain", o.no_pretrain, "Skip the noise phase (train: run only the baseline arm)");

    auto* pretrain = app.add_subcommand("pretrain", "Noise pretraining only; saves the pretrained model");
    auto* train = app.add_subcommand("train", "Paired run with and without noise pretraining");
    auto* sweep = app.add_subcommand("sweep", "Depth x data-size x seed grid; resumable");
    auto* toy = app.add_subcommand("toy", "2-D binary toy model confidence maps");
    auto* ood = app.add_subcommand("ood", "ID vs OOD confidence and AUROC for a saved model");
    ood->add_option("--model", o.model, "Model checkpoint")->required();
    auto* report = app.add_subcommand("report", "Recompute metrics from saved predictions");
    report->add_option("--predictions", o.predictions, "predictions CSV")->required();
    auto* inspect = app.add_subcommand("inspect-data", "Summarize a CIFAR-10 directory or RNC1 container");
    inspect->add_option("path", o.data_path, "CIFAR-10 directory or .rnc1 file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }

    try {
        int status = 0;
        std::string command;
        if (*pretrain) {
            command = "pretrain";
            status = cmd_pretrain(o);
        } else if (*train) {
            command = "train";
            status = cmd_train(o);
        } else if (*sweep) {
            command = "sweep";
            status = cmd_sweep(o);
        } else if (*toy) {
            command = "toy";
            status = cmd_toy(o);
        } else if (*ood) {
            command = "ood";
            status = cmd_ood(o);
        } else if (*report) {
            command = "report";
            status = cmd_report(o);
        } else if (*inspect) {
            command = "inspect-data";
            status = cmd_inspect(o);
        }
        std::cout << json{{"status", "ok"}, {"command", command}}.dump() << std::endl;
        return status;
    } catch (const Error& e) {
        print_error(e.kind(), e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        print_error("io-error", e.what());
    } catch (const std::exception& e) {
        print_error("internal", e.what());
    }
    return 1;
}
