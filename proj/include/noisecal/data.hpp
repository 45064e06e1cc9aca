#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "noisecal/binary_io.hpp"
#include "noisecal/errors.hpp"
#include "noisecal/rng.hpp"
#include "noisecal/tensor.hpp"

namespace noisecal {

/// u8 images in channels-first layout [n × C × H × W] with class labels.
struct Dataset {
    std::string name;
    std::size_t channels{3};
    std::size_t height{32};
    std::size_t width{32};
    std::size_t num_classes{10};
    std::vector<std::uint8_t> pixels;
    Labels labels;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
    [[nodiscard]] std::size_t feature_dim() const noexcept { return channels * height * width; }

    [[nodiscard]] std::span<const std::uint8_t> sample(std::size_t i) const {
        return {pixels.data() + i * feature_dim(), feature_dim()};
    }

    void validate() const {
        if (pixels.size() != labels.size() * feature_dim()) {
            throw InvalidArgument("dataset " + name + ": pixel buffer holds " + std::to_string(pixels.size()) +
                                  " bytes, expected " + std::to_string(labels.size() * feature_dim()));
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] >= num_classes) {
                throw CorruptData("dataset " + name + ": label " + std::to_string(labels[i]) + " at index " +
                                  std::to_string(i) + " is not below num_classes=" + std::to_string(num_classes));
            }
        }
    }

    [[nodiscard]] std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes, 0);
        for (const auto l : labels) {
            counts.at(l) += 1;
        }
        return counts;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// FNV-1a over geometry, labels and pixels. Used to prove that paired runs
/// saw the same data.
inline std::uint64_t content_hash(const Dataset& ds) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    const auto mix = [&h](std::uint8_t b) {
        h ^= b;
        h *= 0x100000001B3ULL;
    };
    for (const std::uint64_t v : {std::uint64_t{ds.channels}, std::uint64_t{ds.height}, std::uint64_t{ds.width},
                                  std::uint64_t{ds.num_classes}, std::uint64_t{ds.size()}}) {
        for (int i = 0; i < 8; ++i) {
            mix(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    for (const auto l : ds.labels) {
        mix(static_cast<std::uint8_t>(l));
        mix(static_cast<std::uint8_t>(l >> 8));
    }
    for (const auto p : ds.pixels) {
        mix(p);
    }
    return h;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarBatchRecords = 10000;
inline constexpr std::size_t kCifarBatchBytes = kCifarRecordBytes * kCifarBatchRecords;
inline constexpr std::size_t kCifarTrainSize = 50000;
inline constexpr std::size_t kCifarTestSize = 10000;

/// Parses a buffer of CIFAR-10 records (1 label byte + 3072 pixel bytes, planes
/// R, G, B, each row-major). expected_records = 0 accepts any whole number of
/// records.
inline Dataset parse_cifar10_records(std::span<const std::uint8_t> bytes, const std::string& what,
                                     std::size_t expected_records = kCifarBatchRecords) {
    const std::size_t expected_bytes = expected_records * kCifarRecordBytes;
    if (expected_records != 0 ? bytes.size() != expected_bytes : bytes.size() % kCifarRecordBytes != 0) {
        throw FormatError(what + ": expected " +
                          (expected_records != 0 ? std::to_string(expected_bytes)
                                                 : std::string{"a multiple of "} + std::to_string(kCifarRecordBytes)) +
                          " bytes, got " + std::to_string(bytes.size()));
    }
    const std::size_t n = bytes.size() / kCifarRecordBytes;
    Dataset ds;
    ds.name = "cifar10";
    ds.labels.resize(n);
    ds.pixels.resize(n * (kCifarRecordBytes - 1));
    for (std::size_t i = 0; i < n; ++i) {
        const auto* rec = bytes.data() + i * kCifarRecordBytes;
        if (rec[0] > 9) {
            throw CorruptData(what + ": record " + std::to_string(i) + " has label byte " + std::to_string(rec[0]));
        }
        ds.labels[i] = rec[0];
        std::copy(rec + 1, rec + kCifarRecordBytes, ds.pixels.begin() + static_cast<std::ptrdiff_t>(i * 3072));
    }
    return ds;
}

enum class Split { train, test };

/// Loads data_batch_1..5.bin (train) or test_batch.bin (test) from dir. All
/// files are size-checked before any is parsed.
inline Dataset load_cifar10(const std::filesystem::path& dir, Split split) {
    std::vector<std::filesystem::path> files;
    if (split == Split::train) {
        for (int i = 1; i <= 5; ++i) {
            files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
        }
    } else {
        files.push_back(dir / "test_batch.bin");
    }
    for (const auto& f : files) {
        std::error_code ec;
        const auto size = std::filesystem::file_size(f, ec);
        if (ec) {
            throw IoError("cifar10: cannot stat " + f.string() + ": " + ec.message());
        }
        if (size != kCifarBatchBytes) {
            throw FormatError("cifar10: " + f.string() + ": expected " + std::to_string(kCifarBatchBytes) +
                              " bytes, got " + std::to_string(size));
        }
    }
    Dataset out;
    out.name = split == Split::train ? "cifar10-train" : "cifar10-test";
    for (const auto& f : files) {
        const auto part = parse_cifar10_records(detail::read_file(f), f.string());
        out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
        out.pixels.insert(out.pixels.end(), part.pixels.begin(), part.pixels.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// RNC1 container
//
//   "RNC1" | version u32 | count u32 | channels u32 | height u32 | width u32 |
//   num_classes u32 | count × label u16 | count × C×H×W pixel bytes
//
// Header is 28 bytes; all integers little-endian.

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 28;

inline std::size_t container_file_size(std::size_t count, std::size_t channels, std::size_t height,
                                       std::size_t width) {
    return kContainerHeaderBytes + 2 * count + count * channels * height * width;
}

inline std::vector<std::uint8_t> encode_container(const Dataset& ds) {
    ds.validate();
    detail::ByteWriter w;
    w.magic("RNC1");
    w.u32(kContainerVersion);
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u32(static_cast<std::uint32_t>(ds.channels));
    w.u32(static_cast<std::uint32_t>(ds.height));
    w.u32(static_cast<std::uint32_t>(ds.width));
    w.u32(static_cast<std::uint32_t>(ds.num_classes));
    for (const auto l : ds.labels) {
        w.u16(l);
    }
    w.raw(ds.pixels);
    return w.bytes();
}

inline Dataset decode_container(std::span<const std::uint8_t> bytes, std::string name = "container") {
    detail::ByteReader r{bytes, "RNC1 container"};
    if (!r.magic("RNC1")) {
        throw FormatError("RNC1 container: bad magic");
    }
    const auto version = r.u32();
    if (version != kContainerVersion) {
        throw FormatError("RNC1 container: unsupported version " + std::to_string(version));
    }
    Dataset ds;
    ds.name = std::move(name);
    const std::size_t count = r.u32();
    ds.channels = r.u32();
    ds.height = r.u32();
    ds.width = r.u32();
    ds.num_classes = r.u32();
    const std::size_t expected = container_file_size(count, ds.channels, ds.height, ds.width);
    if (bytes.size() != expected) {
        throw FormatError("RNC1 container: header declares " + std::to_string(count) + " samples (" +
                          std::to_string(expected) + " bytes) but file has " + std::to_string(bytes.size()) +
                          " bytes");
    }
    ds.labels.resize(count);
    for (auto& l : ds.labels) {
        l = r.u16();
    }
    const auto px = r.take(count * ds.feature_dim());
    ds.pixels.assign(px.begin(), px.end());
    ds.validate();
    return ds;
}

inline void write_container(const Dataset& ds, const std::filesystem::path& path) {
    detail::write_file(path, encode_container(ds));
}

inline Dataset load_container(const std::filesystem::path& path) {
    return decode_container(detail::read_file(path), path.stem().string());
}

// ---------------------------------------------------------------------------
// Subsetting and normalization

/// Rows of ds at the given indices, in order.
inline Dataset select(const Dataset& ds, std::span<const std::size_t> indices, std::string name) {
    Dataset out;
    out.name = std::move(name);
    out.channels = ds.channels;
    out.height = ds.height;
    out.width = ds.width;
    out.num_classes = ds.num_classes;
    out.labels.reserve(indices.size());
    out.pixels.reserve(indices.size() * ds.feature_dim());
    for (const auto i : indices) {
        out.labels.push_back(ds.labels.at(i));
        const auto s = ds.sample(i);
        out.pixels.insert(out.pixels.end(), s.begin(), s.end());
    }
    return out;
}

template <class T>
void shuffle_in_place(std::vector<T>& v, RngStream& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(v[i - 1], v[j]);
    }
}

/// Class-stratified random subset of n samples, returned in shuffled order.
/// Each class receives floor(n/K) or ceil(n/K) samples; which classes get the
/// extra one is drawn from rng. If a class has too few samples its shortfall is
/// spread over the classes that still have spare samples.
inline Dataset subset(const Dataset& ds, std::size_t n, RngStream& rng) {
    if (n > ds.size()) {
        throw InvalidArgument("subset: requested " + std::to_string(n) + " samples from a dataset of " +
                              std::to_string(ds.size()));
    }
    const std::size_t k = ds.num_classes;
    std::vector<std::vector<std::size_t>> by_class(k);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        by_class[ds.labels[i]].push_back(i);
    }
    for (auto& members : by_class) {
        shuffle_in_place(members, rng);
    }
    std::vector<std::size_t> class_order(k);
    std::iota(class_order.begin(), class_order.end(), std::size_t{0});
    shuffle_in_place(class_order, rng);

    std::vector<std::size_t> quota(k, 0);
    std::size_t left = n;
    // Water-filling: repeatedly hand one sample to each class with spare
    // capacity, visiting classes in the random order.
    while (left > 0) {
        std::size_t open = 0;
        for (const auto c : class_order) {
            if (quota[c] < by_class[c].size()) {
                ++open;
            }
        }
        const std::size_t round = std::max<std::size_t>(1, left / std::max<std::size_t>(open, 1));
        for (const auto c : class_order) {
            if (left == 0) {
                break;
            }
            const std::size_t take = std::min({round, by_class[c].size() - quota[c], left});
            quota[c] += take;
            left -= take;
        }
    }
    std::vector<std::size_t> chosen;
    chosen.reserve(n);
    for (std::size_t c = 0; c < k; ++c) {
        chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(quota[c]));
    }
    shuffle_in_place(chosen, rng);
    return select(ds, chosen, ds.name + "-subset" + std::to_string(n));
}

/// Per-channel mean and population std of pixel/255.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;

    friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline NormStats compute_norm_stats(const Dataset& ds) {
    if (ds.size() == 0) {
        throw InvalidArgument("compute_norm_stats: empty dataset");
    }
    const std::size_t plane = ds.height * ds.width;
    NormStats stats{std::vector<double>(ds.channels, 0.0), std::vector<double>(ds.channels, 0.0)};
    // Integer moments are exact, so a constant channel gets std exactly 0.
    const auto count = static_cast<unsigned __int128>(ds.size() * plane);
    for (std::size_t ch = 0; ch < ds.channels; ++ch) {
        std::uint64_t sum = 0;
        unsigned __int128 sum_sq = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto* p = ds.pixels.data() + i * ds.feature_dim() + ch * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                sum += p[k];
                sum_sq += static_cast<std::uint64_t>(p[k]) * p[k];
            }
        }
        const unsigned __int128 spread = count * sum_sq - static_cast<unsigned __int128>(sum) * sum;
        const double n = static_cast<double>(count);
        stats.mean[ch] = static_cast<double>(sum) / n / 255.0;
        stats.std[ch] = std::sqrt(static_cast<double>(spread)) / n / 255.0;
    }
    return stats;
}

/// (pixel/255 - mean_c) / std_c, flattened row-major to [n × C·H·W].
inline Tensor normalize(const Dataset& ds, const NormStats& stats) {
    if (stats.mean.size() != ds.channels || stats.std.size() != ds.channels) {
        throw InvalidArgument("normalize: stats have " + std::to_string(stats.mean.size()) +
                              " channels, dataset has " + std::to_string(ds.channels));
    }
    for (const double s : stats.std) {
        if (!(s > 0.0)) {
            throw InvalidArgument("normalize: per-channel std must be positive");
        }
    }
    const std::size_t plane = ds.height * ds.width;
    Tensor out{{ds.size(), ds.feature_dim()}};
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto src = ds.sample(i);
        auto dst = out.row(i);
        for (std::size_t ch = 0; ch < ds.channels; ++ch) {
            const double mean = stats.mean[ch];
            const double inv = 1.0 / stats.std[ch];
            for (std::size_t k = 0; k < plane; ++k) {
                dst[ch * plane + k] = (src[ch * plane + k] / 255.0 - mean) * inv;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
    Tensor inputs;
    Labels labels;
    Tensor targets; // one-hot
};

/// Noise pretraining source: Gaussian inputs with independent uniform labels.
struct NoiseSpec {
    std::size_t input_dim{3072};
    double mean{0.0};
    double std{1.0};
    std::size_t num_classes{10};
    std::size_t batches_per_epoch{100};
    std::size_t batch_size{128};

    friend bool operator==(const NoiseSpec&, const NoiseSpec&) = default;
};

/// Infinite stream of freshly sampled noise batches. Inputs and labels come
/// from separate child streams, so labels carry no information about inputs.
class NoiseStream {
public:
    NoiseStream(NoiseSpec spec, const RngStream& rng)
        : spec_{spec}, input_rng_{rng.derive("noise-inputs")}, label_rng_{rng.derive("noise-labels")} {
        if (spec_.num_classes < 2 || spec_.batch_size < 1 || spec_.input_dim < 1) {
            throw InvalidArgument("invalid noise spec");
        }
    }

    Batch next() {
        Batch b;
        b.inputs = gaussian_tensor({spec_.batch_size, spec_.input_dim}, spec_.mean, spec_.std, input_rng_);
        b.labels = uniform_labels(spec_.batch_size, spec_.num_classes, label_rng_);
        b.targets = one_hot(b.labels, spec_.num_classes);
        return b;
    }

    [[nodiscard]] const NoiseSpec& spec() const noexcept { return spec_; }

private:
    NoiseSpec spec_;
    RngStream input_rng_;
    RngStream label_rng_;
};

/// Index batches covering 0..n-1 exactly once. With shuffle the order is a
/// permutation drawn from rng. A trailing batch of a single sample is merged
/// into the previous batch so every batch can feed a train-mode forward pass.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, bool shuffle,
                                                           RngStream& rng) {
    if (batch_size < 1) {
        throw InvalidArgument("epoch_batches: batch_size must be >= 1");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle) {
        shuffle_in_place(order, rng);
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

inline Batch make_batch(const Tensor& x, const Labels& y, std::size_t num_classes,
                        std::span<const std::size_t> indices) {
    Batch b;
    b.inputs = gather_rows(x, indices);
    b.labels.reserve(indices.size());
    for (const auto i : indices) {
        b.labels.push_back(y.at(i));
    }
    b.targets = one_hot(b.labels, num_classes);
    return b;
}

// ---------------------------------------------------------------------------
// Synthetic image sources

/// Gaussian-noise images: every pixel independently round(N(mean, std²))
/// clamped to [0, 255]. Labels are all zero.
inline Dataset gaussian_noise_images(std::size_t n, double mean, double std, RngStream& rng,
                                     std::size_t channels = 3, std::size_t height = 32, std::size_t width = 32) {
    Dataset ds;
    ds.name = "gaussian-noise";
    ds.channels = channels;
    ds.height = height;
    ds.width = width;
    ds.labels.assign(n, 0);
    ds.pixels.resize(n * ds.feature_dim());
    for (auto& p : ds.pixels) {
        p = static_cast<std::uint8_t>(std::clamp(std::round(mean + std * rng.normal()), 0.0, 255.0));
    }
    return ds;
}

/// Parameters of the CIFAR-shaped synthetic surrogate. Each class is a mixture
/// of colour prototypes; every sample adds its own random texture (equal
/// power per octave, roughly the 1/f² spectrum of natural images), a global
/// brightness and contrast change, and pixel noise.
struct SyntheticSpec {
    std::size_t num_classes{10};
    std::size_t modes_per_class{4};
    std::size_t octaves{4}; // fields on 2×2, 4×4, ... control grids
    double class_scale{5.0};
    double mode_scale{6.0};
    double texture_scale{40.0};
    double pixel_noise{10.0};
    double brightness{20.0};
    double contrast{0.25};

    friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

namespace detail {

/// Smooth 3×32×32 field: per-channel Gaussian control points on a grid×grid
/// lattice, bilinearly interpolated, with channels correlated through a
/// random colour mix.
inline std::vector<double> smooth_field(std::size_t grid, RngStream& rng) {
    constexpr std::size_t side = 32;
    std::vector<double> ctrl(3 * grid * grid);
    for (auto& v : ctrl) {
        v = rng.normal();
    }
    std::array<double, 9> mix{};
    for (auto& v : mix) {
        v = rng.normal() / std::sqrt(3.0);
    }
    for (std::size_t c = 0; c < 3; ++c) {
        mix[c * 3 + c] += 1.0;
    }
    std::vector<double> field(3 * side * side);
    const double scale = static_cast<double>(grid - 1) / static_cast<double>(side - 1);
    for (std::size_t y = 0; y < side; ++y) {
        const double gy = static_cast<double>(y) * scale;
        const std::size_t y0 = std::min(static_cast<std::size_t>(gy), grid - 2);
        const double fy = gy - static_cast<double>(y0);
        for (std::size_t x = 0; x < side; ++x) {
            const double gx = static_cast<double>(x) * scale;
            const std::size_t x0 = std::min(static_cast<std::size_t>(gx), grid - 2);
            const double fx = gx - static_cast<double>(x0);
            std::array<double, 3> base{};
            for (std::size_t c = 0; c < 3; ++c) {
                const double* g = ctrl.data() + c * grid * grid;
                base[c] = (1 - fy) * ((1 - fx) * g[y0 * grid + x0] + fx * g[y0 * grid + x0 + 1]) +
                          fy * ((1 - fx) * g[(y0 + 1) * grid + x0] + fx * g[(y0 + 1) * grid + x0 + 1]);
            }
            for (std::size_t c = 0; c < 3; ++c) {
                field[c * side * side + y * side + x] =
                    mix[c * 3] * base[0] + mix[c * 3 + 1] * base[1] + mix[c * 3 + 2] * base[2];
            }
        }
    }
    return field;
}

/// Sum of smooth fields on 2, 4, 8, ... control grids, scaled to unit
/// variance per octave count.
inline std::vector<double> multiscale_field(std::size_t octaves, RngStream& rng) {
    std::vector<double> out(3 * 32 * 32, 0.0);
    const double w = 1.0 / std::sqrt(static_cast<double>(octaves));
    for (std::size_t o = 0; o < octaves; ++o) {
        const auto f = smooth_field(std::size_t{2} << o, rng);
        for (std::size_t k = 0; k < out.size(); ++k) {
            out[k] += w * f[k];
        }
    }
    return out;
}

} // namespace detail

/// Generator for the surrogate: the prototypes depend only on the seed, so
/// train and test splits drawn from one generator share a distribution.
class SyntheticImages {
public:
    SyntheticImages(SyntheticSpec spec, std::uint64_t seed) : spec_{spec} {
        if (spec_.octaves < 1 || spec_.octaves > 4 || spec_.num_classes < 2 || spec_.modes_per_class < 1) {
            throw InvalidArgument("invalid synthetic spec: need octaves in 1..4, >= 2 classes, >= 1 mode");
        }
        RngStream rng{seed, 0x5EED};
        for (std::size_t c = 0; c < spec_.num_classes; ++c) {
            class_fields_.push_back(detail::multiscale_field(spec_.octaves, rng));
            for (std::size_t m = 0; m < spec_.modes_per_class; ++m) {
                mode_fields_.push_back(detail::multiscale_field(spec_.octaves, rng));
            }
        }
    }

    [[nodiscard]] const SyntheticSpec& spec() const noexcept { return spec_; }

    /// n samples with balanced labels (i mod K, then shuffled).
    [[nodiscard]] Dataset sample(std::size_t n, RngStream& rng, std::string name) const {
        Dataset ds;
        ds.name = std::move(name);
        ds.num_classes = spec_.num_classes;
        ds.labels.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            ds.labels[i] = static_cast<std::uint16_t>(i % spec_.num_classes);
        }
        shuffle_in_place(ds.labels, rng);
        const std::size_t d = ds.feature_dim();
        ds.pixels.resize(n * d);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = ds.labels[i];
            const std::size_t m = rng.below(spec_.modes_per_class);
            const auto& cls = class_fields_[c];
            const auto& mode = mode_fields_[c * spec_.modes_per_class + m];
            const double offset = 128.0 + spec_.brightness * rng.normal();
            const double gain = std::exp(spec_.contrast * rng.normal());
            const auto texture = detail::multiscale_field(spec_.octaves, rng);
            auto* dst = ds.pixels.data() + i * d;
            for (std::size_t k = 0; k < d; ++k) {
                const double v = offset +
                                 gain * (spec_.class_scale * cls[k] + spec_.mode_scale * mode[k] +
                                         spec_.texture_scale * texture[k]) +
                                 spec_.pixel_noise * rng.normal();
                dst[k] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
            }
        }
        return ds;
    }

private:
    SyntheticSpec spec_;
    std::vector<std::vector<double>> class_fields_;
    std::vector<std::vector<double>> mode_fields_;
};

} // namespace noisecal
