#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "noisecal/errors.hpp"
#include "noisecal/metrics.hpp"

namespace noisecal {

enum class TestMethod { rank_sum, signed_rank };

/// exact: null distribution counted over all label/sign assignments.
/// normal: normal approximation with tie and continuity corrections.
/// automatic: exact when the sample is small (see the individual tests).
enum class PValueMethod { automatic, exact, normal };

struct TestResult {
    TestMethod method{TestMethod::rank_sum};
    /// U of the first sample (rank-sum) or W⁺ (signed-rank).
    double statistic{0.0};
    double p_value{1.0};
    bool two_sided{true};
    bool exact{false};
};

inline constexpr std::size_t kExactCutoff = 12;

namespace detail {

inline double normal_upper_tail(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

inline double tie_term(std::span<const double> values) {
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    double total = 0.0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) {
            ++j;
        }
        const double t = static_cast<double>(j - i + 1);
        total += t * t * t - t;
        i = j + 1;
    }
    return total;
}

inline double clamp_p(double p) { return std::clamp(p, 0.0, 1.0); }

} // namespace detail

/// Wilcoxon rank-sum (Mann-Whitney U) test with midrank ties.
///
/// One-sided results test the alternative "a tends to be larger than b".
/// The exact null distribution is counted by dynamic programming over doubled
/// midranks (integers even with ties), so tail comparisons are exact.
inline TestResult rank_sum_test(std::span<const double> a, std::span<const double> b, bool two_sided = true,
                                PValueMethod method = PValueMethod::automatic) {
    if (a.empty() || b.empty()) {
        throw InvalidArgument("rank_sum_test: both samples must be nonempty");
    }
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    const std::size_t n = na + nb;
    std::vector<double> all(a.begin(), a.end());
    all.insert(all.end(), b.begin(), b.end());
    const auto ranks = midranks(all);

    std::vector<std::int64_t> doubled(n);
    for (std::size_t i = 0; i < n; ++i) {
        doubled[i] = std::llround(2.0 * ranks[i]);
    }
    std::int64_t observed2 = 0;
    for (std::size_t i = 0; i < na; ++i) {
        observed2 += doubled[i];
    }

    TestResult r;
    r.method = TestMethod::rank_sum;
    r.two_sided = two_sided;
    const double nad = static_cast<double>(na);
    const double nbd = static_cast<double>(nb);
    r.statistic = static_cast<double>(observed2) / 2.0 - nad * (nad + 1.0) / 2.0;

    const bool exact = method == PValueMethod::exact || (method == PValueMethod::automatic && n <= kExactCutoff);
    if (exact) {
        const std::int64_t max_sum = std::accumulate(doubled.begin(), doubled.end(), std::int64_t{0});
        // ways[k][s]: number of k-subsets whose doubled ranks sum to s.
        std::vector<std::vector<double>> ways(na + 1, std::vector<double>(static_cast<std::size_t>(max_sum) + 1, 0.0));
        ways[0][0] = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto d = static_cast<std::size_t>(doubled[i]);
            for (std::size_t k = std::min(i + 1, na); k >= 1; --k) {
                auto& dst = ways[k];
                const auto& src = ways[k - 1];
                for (std::size_t s = static_cast<std::size_t>(max_sum); s >= d; --s) {
                    dst[s] += src[s - d];
                    if (s == d) {
                        break;
                    }
                }
            }
        }
        const auto mean_doubled = static_cast<std::int64_t>(na * (n + 1));
        const std::int64_t obs_dev = std::llabs(observed2 - mean_doubled);
        double tail = 0.0;
        double total = 0.0;
        for (std::size_t s = 0; s <= static_cast<std::size_t>(max_sum); ++s) {
            const double w = ways[na][s];
            if (w == 0.0) {
                continue;
            }
            total += w;
            const auto s64 = static_cast<std::int64_t>(s);
            if (two_sided ? std::llabs(s64 - mean_doubled) >= obs_dev : s64 >= observed2) {
                tail += w;
            }
        }
        r.p_value = detail::clamp_p(tail / total);
        r.exact = true;
        return r;
    }

    const double mean = nad * nbd / 2.0;
    const double nd = static_cast<double>(n);
    const double var = nad * nbd / 12.0 * ((nd + 1.0) - detail::tie_term(all) / (nd * (nd - 1.0)));
    if (!(var > 0.0)) {
        r.p_value = 1.0;
        return r;
    }
    const double sd = std::sqrt(var);
    if (two_sided) {
        const double z = std::max(0.0, std::abs(r.statistic - mean) - 0.5) / sd;
        r.p_value = detail::clamp_p(2.0 * detail::normal_upper_tail(z));
    } else {
        const double z = (r.statistic - mean - 0.5) / sd;
        r.p_value = detail::clamp_p(detail::normal_upper_tail(z));
    }
    return r;
}

/// Wilcoxon signed-rank test on paired differences. Zeros are dropped; ties in
/// |d| get midranks. One-sided results test "differences tend to be positive".
inline TestResult signed_rank_test(std::span<const double> diffs, bool two_sided = true,
                                   PValueMethod method = PValueMethod::automatic) {
    std::vector<double> nz;
    for (const double d : diffs) {
        if (d != 0.0) {
            nz.push_back(d);
        }
    }
    if (nz.empty()) {
        throw InvalidArgument("signed_rank_test: all differences are zero");
    }
    const std::size_t n = nz.size();
    std::vector<double> mags(n);
    for (std::size_t i = 0; i < n; ++i) {
        mags[i] = std::abs(nz[i]);
    }
    const auto ranks = midranks(mags);
    std::vector<std::int64_t> doubled(n);
    std::int64_t observed2 = 0;
    std::int64_t total2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        doubled[i] = std::llround(2.0 * ranks[i]);
        total2 += doubled[i];
        if (nz[i] > 0.0) {
            observed2 += doubled[i];
        }
    }

    TestResult r;
    r.method = TestMethod::signed_rank;
    r.two_sided = two_sided;
    r.statistic = static_cast<double>(observed2) / 2.0;

    const bool exact = method == PValueMethod::exact || (method == PValueMethod::automatic && n <= kExactCutoff);
    if (exact) {
        std::vector<double> ways(static_cast<std::size_t>(total2) + 1, 0.0);
        ways[0] = 1.0;
        std::int64_t reach = 0;
        for (const auto d : doubled) {
            reach += d;
            for (auto s = reach; s >= d; --s) {
                ways[static_cast<std::size_t>(s)] += ways[static_cast<std::size_t>(s - d)];
            }
        }
        const std::int64_t obs_dev = std::llabs(2 * observed2 - total2);
        double tail = 0.0;
        double total = 0.0;
        for (std::int64_t s = 0; s <= total2; ++s) {
            const double w = ways[static_cast<std::size_t>(s)];
            if (w == 0.0) {
                continue;
            }
            total += w;
            if (two_sided ? std::llabs(2 * s - total2) >= obs_dev : s >= observed2) {
                tail += w;
            }
        }
        r.p_value = detail::clamp_p(tail / total);
        r.exact = true;
        return r;
    }

    const double nd = static_cast<double>(n);
    const double mean = nd * (nd + 1.0) / 4.0;
    const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - detail::tie_term(mags) / 48.0;
    if (!(var > 0.0)) {
        r.p_value = 1.0;
        return r;
    }
    const double sd = std::sqrt(var);
    if (two_sided) {
        const double z = std::max(0.0, std::abs(r.statistic - mean) - 0.5) / sd;
        r.p_value = detail::clamp_p(2.0 * detail::normal_upper_tail(z));
    } else {
        const double z = (r.statistic - mean - 0.5) / sd;
        r.p_value = detail::clamp_p(detail::normal_upper_tail(z));
    }
    return r;
}

/// Spearman rank correlation (Pearson correlation of midranks).
inline double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw InvalidArgument("spearman: need two equally sized samples of length >= 2");
    }
    const auto rx = midranks(x);
    const auto ry = midranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

} // namespace noisecal
