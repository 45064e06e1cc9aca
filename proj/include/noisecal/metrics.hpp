#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisecal/errors.hpp"
#include "noisecal/nn.hpp"
#include "noisecal/tensor.hpp"

namespace noisecal {

struct Prediction {
    std::size_t predicted{0};
    double confidence{0.0};
    std::optional<std::size_t> true_label;

    [[nodiscard]] bool correct() const { return true_label.has_value() && *true_label == predicted; }
};

/// Per-row class distribution used for confidence: softmax rows as they are,
/// sigmoid rows renormalized to sum to one.
inline Tensor confidence_distribution(const Model& model, const Tensor& outputs) {
    if (model.arch.output == OutputKind::softmax) {
        return outputs;
    }
    Tensor out{outputs.shape()};
    for (std::size_t r = 0; r < outputs.rows(); ++r) {
        const auto src = outputs.row(r);
        double total = 0.0;
        for (const double v : src) {
            total += v;
        }
        auto dst = out.row(r);
        for (std::size_t c = 0; c < src.size(); ++c) {
            dst[c] = src[c] / total;
        }
    }
    return out;
}

/// Argmax (lowest index wins ties) and its probability for every row.
inline std::vector<Prediction> predictions_from_probs(const Tensor& probs, std::span<const std::uint16_t> labels = {}) {
    if (!labels.empty() && labels.size() != probs.rows()) {
        throw ShapeError("predictions: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(probs.rows()) + " rows");
    }
    std::vector<Prediction> out(probs.rows());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        const auto row = probs.row(r);
        std::size_t best = 0;
        for (std::size_t c = 1; c < row.size(); ++c) {
            if (row[c] > row[best]) {
                best = c;
            }
        }
        out[r].predicted = best;
        out[r].confidence = row[best];
        if (!labels.empty()) {
            out[r].true_label = labels[r];
        }
    }
    return out;
}

/// Eval-mode class distributions for inputs, processed in chunks.
inline Tensor predict_probs(const Model& model, const Tensor& inputs, std::size_t chunk = 1000) {
    if (inputs.rank() != 2) {
        throw ShapeError("predict: inputs must be rank 2");
    }
    const std::size_t n = inputs.rows();
    Tensor out{{n, model.arch.num_classes}};
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t stop = std::min(n, start + chunk);
        std::vector<std::size_t> idx(stop - start);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = start + i;
        }
        const auto trace = forward_eval(model, gather_rows(inputs, idx));
        const Tensor probs = confidence_distribution(model, trace.outputs);
        std::copy(probs.data().begin(), probs.data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(start * model.arch.num_classes));
    }
    return out;
}

inline std::vector<Prediction> predict(const Model& model, const Tensor& inputs,
                                       std::span<const std::uint16_t> labels = {}) {
    return predictions_from_probs(predict_probs(model, inputs), labels);
}

// ---------------------------------------------------------------------------
// Reliability and ECE

struct CalibrationBin {
    double lo{0.0};
    double hi{0.0};
    std::size_t count{0};
    double confidence{0.0}; // mean confidence, 0 when empty
    double accuracy{0.0};   // fraction correct, 0 when empty
};

struct CalibrationBins {
    std::vector<CalibrationBin> bins;
    std::size_t total{0};
};

/// Bin m covers (m/M, (m+1)/M]; a confidence of exactly 0 goes to the first bin.
inline std::size_t bin_index(double confidence, std::size_t num_bins) {
    if (!std::isfinite(confidence)) {
        throw InvalidArgument("bin_index: non-finite confidence");
    }
    const double m = static_cast<double>(num_bins);
    auto idx = static_cast<std::ptrdiff_t>(std::ceil(confidence * m)) - 1;
    idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(num_bins) - 1);
    // Settle rounding at the boundaries against the same lo/hi used in reports.
    while (idx > 0 && confidence <= static_cast<double>(idx) / m) {
        --idx;
    }
    while (idx + 1 < static_cast<std::ptrdiff_t>(num_bins) && confidence > static_cast<double>(idx + 1) / m) {
        ++idx;
    }
    return static_cast<std::size_t>(idx);
}

inline CalibrationBins reliability(std::span<const Prediction> preds, std::size_t num_bins = 10) {
    if (preds.empty()) {
        throw InvalidArgument("reliability: no predictions");
    }
    if (num_bins < 1) {
        throw InvalidArgument("reliability: need at least one bin");
    }
    CalibrationBins out;
    out.total = preds.size();
    out.bins.resize(num_bins);
    std::vector<double> conf_sum(num_bins, 0.0);
    std::vector<std::size_t> hits(num_bins, 0);
    for (const auto& p : preds) {
        if (!p.true_label) {
            throw InvalidArgument("reliability: every prediction needs a true label");
        }
        const auto m = bin_index(p.confidence, num_bins);
        out.bins[m].count += 1;
        conf_sum[m] += p.confidence;
        hits[m] += p.correct() ? 1 : 0;
    }
    for (std::size_t m = 0; m < num_bins; ++m) {
        auto& b = out.bins[m];
        b.lo = static_cast<double>(m) / static_cast<double>(num_bins);
        b.hi = static_cast<double>(m + 1) / static_cast<double>(num_bins);
        if (b.count > 0) {
            b.confidence = conf_sum[m] / static_cast<double>(b.count);
            b.accuracy = static_cast<double>(hits[m]) / static_cast<double>(b.count);
        }
    }
    return out;
}

/// Σ_m (B_m / N) · |acc(B_m) − conf(B_m)|
inline double ece(const CalibrationBins& bins) {
    if (bins.total == 0) {
        throw InvalidArgument("ece: no samples");
    }
    double total = 0.0;
    for (const auto& b : bins.bins) {
        if (b.count > 0) {
            total += static_cast<double>(b.count) / static_cast<double>(bins.total) *
                     std::abs(b.accuracy - b.confidence);
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Class bias

struct ClassBiasReport {
    std::vector<std::size_t> counts;
    std::vector<double> ratios;
    double bias{0.0};
};

/// Population standard deviation of the per-class prediction frequencies.
inline ClassBiasReport class_bias(std::span<const Prediction> preds, std::size_t num_classes) {
    if (preds.empty()) {
        throw InvalidArgument("class_bias: no predictions");
    }
    if (num_classes < 1) {
        throw InvalidArgument("class_bias: need at least one class");
    }
    ClassBiasReport r;
    r.counts.assign(num_classes, 0);
    for (const auto& p : preds) {
        if (p.predicted >= num_classes) {
            throw InvalidArgument("class_bias: predicted class " + std::to_string(p.predicted) + " out of range");
        }
        r.counts[p.predicted] += 1;
    }
    const double n = static_cast<double>(preds.size());
    const double mean = 1.0 / static_cast<double>(num_classes);
    double ss = 0.0;
    for (const auto c : r.counts) {
        const double ratio = static_cast<double>(c) / n;
        r.ratios.push_back(ratio);
        ss += (ratio - mean) * (ratio - mean);
    }
    r.bias = std::sqrt(ss / static_cast<double>(num_classes));
    return r;
}

// ---------------------------------------------------------------------------
// Confidence vs accuracy

struct ConfidenceStats {
    double mean_confidence{0.0};
    double accuracy{0.0};
    /// mean_confidence − accuracy; positive means overconfident.
    double gap{0.0};
};

inline ConfidenceStats confidence_stats(std::span<const Prediction> preds) {
    if (preds.empty()) {
        throw InvalidArgument("confidence_stats: no predictions");
    }
    double conf = 0.0;
    std::size_t hits = 0;
    for (const auto& p : preds) {
        if (!p.true_label) {
            throw InvalidArgument("confidence_stats: every prediction needs a true label");
        }
        conf += p.confidence;
        hits += p.correct() ? 1 : 0;
    }
    const double n = static_cast<double>(preds.size());
    ConfidenceStats s;
    s.mean_confidence = conf / n;
    s.accuracy = static_cast<double>(hits) / n;
    s.gap = s.mean_confidence - s.accuracy;
    return s;
}

// ---------------------------------------------------------------------------
// ROC / AUROC with in-distribution as the positive class

struct RocPoint {
    double threshold{0.0};
    double fpr{0.0};
    double tpr{0.0};
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auroc{0.0};
};

/// Midranks (1-based) of values; ties share the mean of their ranks.
inline std::vector<double> midranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }
    return ranks;
}

/// AUROC is the Mann-Whitney statistic P(id > ood) + ½P(id = ood). The curve
/// has one point per distinct confidence value (samples at or above the
/// threshold are predicted in-distribution), framed by (0,0) and (1,1).
inline RocCurve roc_auroc(std::span<const double> id_conf, std::span<const double> ood_conf) {
    if (id_conf.empty() || ood_conf.empty()) {
        throw InvalidArgument("roc_auroc: both score lists must be nonempty");
    }
    const double n_id = static_cast<double>(id_conf.size());
    const double n_ood = static_cast<double>(ood_conf.size());

    std::vector<double> all(id_conf.begin(), id_conf.end());
    all.insert(all.end(), ood_conf.begin(), ood_conf.end());
    const auto ranks = midranks(all);
    double id_rank_sum = 0.0;
    for (std::size_t i = 0; i < id_conf.size(); ++i) {
        id_rank_sum += ranks[i];
    }
    RocCurve curve;
    curve.auroc = (id_rank_sum - n_id * (n_id + 1.0) / 2.0) / (n_id * n_ood);

    std::vector<std::pair<double, bool>> scored;
    scored.reserve(all.size());
    for (const double v : id_conf) {
        scored.emplace_back(v, true);
    }
    for (const double v : ood_conf) {
        scored.emplace_back(v, false);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t i = 0;
    while (i < scored.size()) {
        const double threshold = scored[i].first;
        while (i < scored.size() && scored[i].first == threshold) {
            (scored[i].second ? tp : fp) += 1;
            ++i;
        }
        curve.points.push_back({threshold, static_cast<double>(fp) / n_ood, static_cast<double>(tp) / n_id});
    }
    return curve;
}

/// Trapezoidal area under the emitted curve.
inline double curve_area(const RocCurve& curve) {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const auto& a = curve.points[i - 1];
        const auto& b = curve.points[i];
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    }
    return area;
}

// ---------------------------------------------------------------------------
// JSON report

struct MetricsReport {
    CalibrationBins bins;
    double ece{0.0};
    ConfidenceStats stats;
    double class_bias{0.0};
    std::optional<double> auroc;
};

inline MetricsReport evaluate_predictions(std::span<const Prediction> preds, std::size_t num_classes,
                                          std::size_t num_bins = 10) {
    MetricsReport r;
    r.bins = reliability(preds, num_bins);
    r.ece = ece(r.bins);
    r.stats = confidence_stats(preds);
    r.class_bias = class_bias(preds, num_classes).bias;
    return r;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["ece"] = r.ece;
    j["mean_confidence"] = r.stats.mean_confidence;
    j["accuracy"] = r.stats.accuracy;
    j["gap"] = r.stats.gap;
    j["class_bias"] = r.class_bias;
    if (r.auroc) {
        j["auroc"] = *r.auroc;
    }
    auto bins = nlohmann::ordered_json::array();
    for (const auto& b : r.bins.bins) {
        bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"conf", b.confidence}, {"acc", b.accuracy}});
    }
    j["bins"] = std::move(bins);
    return j;
}

} // namespace noisecal
