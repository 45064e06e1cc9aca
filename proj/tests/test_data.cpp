#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "noisecal/data.hpp"

using namespace noisecal;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() /
                (std::string{"noisecal-data-"} + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    [[nodiscard]] const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::vector<std::uint8_t> cifar_records(std::size_t n, std::size_t label_offset) {
    std::vector<std::uint8_t> bytes(n * 3073);
    for (std::size_t i = 0; i < n; ++i) {
        bytes[i * 3073] = static_cast<std::uint8_t>((i + label_offset) % 10);
        for (std::size_t k = 0; k < 3072; ++k) {
            bytes[i * 3073 + 1 + k] = static_cast<std::uint8_t>((i * 7 + k) % 251);
        }
    }
    return bytes;
}

Dataset toy_dataset(std::size_t n, std::size_t classes, RngStream& rng) {
    Dataset ds;
    ds.name = "toy";
    ds.channels = 3;
    ds.height = 2;
    ds.width = 2;
    ds.num_classes = classes;
    ds.labels = uniform_labels(n, classes, rng);
    ds.pixels.resize(n * ds.feature_dim());
    for (auto& p : ds.pixels) {
        p = static_cast<std::uint8_t>(rng.below(256));
    }
    return ds;
}

Dataset balanced_dataset(std::size_t per_class, std::size_t classes) {
    Dataset ds;
    ds.name = "balanced";
    ds.channels = 1;
    ds.height = 1;
    ds.width = 2;
    ds.num_classes = classes;
    for (std::size_t i = 0; i < per_class * classes; ++i) {
        ds.labels.push_back(static_cast<std::uint16_t>(i % classes));
        ds.pixels.push_back(static_cast<std::uint8_t>(i % 256));
        ds.pixels.push_back(static_cast<std::uint8_t>(i / 256));
    }
    return ds;
}

std::set<std::vector<std::uint8_t>> sample_set(const Dataset& ds) {
    std::set<std::vector<std::uint8_t>> out;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto s = ds.sample(i);
        std::vector<std::uint8_t> v(s.begin(), s.end());
        v.push_back(static_cast<std::uint8_t>(ds.labels[i]));
        out.insert(std::move(v));
    }
    return out;
}

} // namespace

TEST(Cifar, RecordLayout) {
    EXPECT_EQ(kCifarBatchBytes, 30'730'000U);
    auto bytes = cifar_records(3, 4);
    const Dataset ds = parse_cifar10_records(bytes, "mem", 3);
    ASSERT_EQ(ds.size(), 3U);
    EXPECT_EQ(ds.labels, (Labels{4, 5, 6}));
    EXPECT_EQ(ds.sample(1)[0], bytes[3073 + 1]);
    EXPECT_EQ(ds.sample(2)[3071], bytes[3 * 3073 - 1]);
}

TEST(Cifar, WrongSizeReportsByteCounts) {
    const auto bytes = cifar_records(2, 0);
    try {
        parse_cifar10_records(std::span{bytes}.first(bytes.size() - 1), "batch", 2);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("6146"), std::string::npos) << msg;
        EXPECT_NE(msg.find("6145"), std::string::npos) << msg;
    }
}

TEST(Cifar, BadLabelIsCorruptData) {
    auto bytes = cifar_records(2, 0);
    bytes[3073] = 10;
    EXPECT_THROW(parse_cifar10_records(bytes, "batch", 2), CorruptData);
}

TEST(Cifar, LoadsStandardDirectory) {
    TempDir dir;
    for (int b = 1; b <= 5; ++b) {
        detail::write_file(dir.path() / ("data_batch_" + std::to_string(b) + ".bin"), cifar_records(10000, b));
    }
    detail::write_file(dir.path() / "test_batch.bin", cifar_records(10000, 0));
    const Dataset train = load_cifar10(dir.path(), Split::train);
    EXPECT_EQ(train.size(), 50000U);
    for (const auto c : train.class_counts()) {
        EXPECT_EQ(c, 5000U);
    }
    EXPECT_EQ(train.labels[0], 1);
    EXPECT_EQ(train.labels[10000], 2);
    const Dataset test = load_cifar10(dir.path(), Split::test);
    EXPECT_EQ(test.size(), 10000U);
}

TEST(Cifar, TruncatedFileFailsWithoutPartialResult) {
    TempDir dir;
    for (int b = 1; b <= 5; ++b) {
        auto bytes = cifar_records(10000, 0);
        if (b == 4) {
            bytes.resize(bytes.size() - 100);
        }
        detail::write_file(dir.path() / ("data_batch_" + std::to_string(b) + ".bin"), bytes);
    }
    EXPECT_THROW(load_cifar10(dir.path(), Split::train), FormatError);
    EXPECT_THROW(load_cifar10(dir.path() / "missing", Split::test), Error);
}

TEST(Container, RoundTripIsExact) {
    RngStream rng{1};
    const Dataset ds = toy_dataset(37, 5, rng);
    const auto bytes = encode_container(ds);
    EXPECT_EQ(bytes.size(), container_file_size(37, 3, 2, 2));
    Dataset back = decode_container(bytes, "toy");
    EXPECT_EQ(back, ds);

    TempDir dir;
    write_container(ds, dir.path() / "toy.rnc1");
    back = load_container(dir.path() / "toy.rnc1");
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.pixels, ds.pixels);
}

TEST(Container, HeaderLayout) {
    RngStream rng{2};
    const Dataset ds = toy_dataset(3, 4, rng);
    const auto bytes = encode_container(ds);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RNC1");
    const auto u32_at = [&](std::size_t off) {
        return static_cast<std::uint32_t>(bytes[off]) | static_cast<std::uint32_t>(bytes[off + 1]) << 8U |
               static_cast<std::uint32_t>(bytes[off + 2]) << 16U | static_cast<std::uint32_t>(bytes[off + 3]) << 24U;
    };
    EXPECT_EQ(u32_at(4), 1U);
    EXPECT_EQ(u32_at(8), 3U);
    EXPECT_EQ(u32_at(12), 3U);
    EXPECT_EQ(u32_at(16), 2U);
    EXPECT_EQ(u32_at(20), 2U);
    EXPECT_EQ(u32_at(24), 4U);
    EXPECT_EQ(bytes[28] | bytes[29] << 8U, ds.labels[0]);
    EXPECT_EQ(bytes[34], ds.pixels[0]);
}

TEST(Container, SvhnTestFileSize) {
    EXPECT_EQ(container_file_size(26032, 3, 32, 32), 28U + 2U * 26032U + 26032U * 3072U);
}

TEST(Container, EmptyDatasetLoads) {
    Dataset empty;
    empty.name = "empty";
    const Dataset back = decode_container(encode_container(empty));
    EXPECT_EQ(back.size(), 0U);
    EXPECT_EQ(back.feature_dim(), 3072U);
}

TEST(Container, MalformedInputsRejected) {
    RngStream rng{3};
    const auto bytes = encode_container(toy_dataset(4, 3, rng));
    auto bad_magic = bytes;
    bad_magic[3] = '2';
    EXPECT_THROW(decode_container(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 2;
    EXPECT_THROW(decode_container(bad_version), FormatError);
    auto short_file = bytes;
    short_file.pop_back();
    EXPECT_THROW(decode_container(short_file), FormatError);
    auto long_file = bytes;
    long_file.push_back(0);
    EXPECT_THROW(decode_container(long_file), FormatError);
    auto bad_label = bytes;
    bad_label[28] = 9;
    EXPECT_THROW(decode_container(bad_label), CorruptData);
    EXPECT_THROW(decode_container(std::span{bytes}.first(10)), FormatError);
}

TEST(Subset, ExactlyStratified) {
    const Dataset ds = balanced_dataset(500, 10);
    RngStream rng{4};
    const Dataset s = subset(ds, 1000, rng);
    EXPECT_EQ(s.size(), 1000U);
    for (const auto c : s.class_counts()) {
        EXPECT_EQ(c, 100U);
    }
    RngStream rng2{5};
    const Dataset odd = subset(ds, 1003, rng2);
    for (const auto c : odd.class_counts()) {
        EXPECT_TRUE(c == 100U || c == 101U);
    }
}

TEST(Subset, SamplesAreDistinctMembers) {
    const Dataset ds = balanced_dataset(50, 10);
    RngStream rng{6};
    const Dataset s = subset(ds, 120, rng);
    const auto all = sample_set(ds);
    const auto chosen = sample_set(s);
    EXPECT_EQ(chosen.size(), 120U);
    for (const auto& v : chosen) {
        EXPECT_TRUE(all.contains(v));
    }
}

TEST(Subset, FullSizeIsPermutation) {
    RngStream data_rng{7};
    const Dataset ds = toy_dataset(200, 4, data_rng);
    RngStream rng{8};
    const Dataset s = subset(ds, ds.size(), rng);
    EXPECT_EQ(sample_set(s), sample_set(ds));
    EXPECT_NE(s.pixels, ds.pixels);
}

TEST(Subset, DeterministicGivenStream) {
    const Dataset ds = balanced_dataset(100, 10);
    RngStream a{9};
    RngStream b{9};
    RngStream c{10};
    EXPECT_EQ(subset(ds, 300, a), subset(ds, 300, b));
    EXPECT_NE(subset(ds, 300, a).pixels, subset(ds, 300, c).pixels);
}

TEST(Subset, ImbalancedSourceStillFills) {
    Dataset ds = balanced_dataset(20, 4);
    // Drop most of class 3.
    Dataset trimmed = ds;
    trimmed.labels.clear();
    trimmed.pixels.clear();
    std::size_t kept3 = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] == 3 && kept3++ >= 2) {
            continue;
        }
        trimmed.labels.push_back(ds.labels[i]);
        auto s = ds.sample(i);
        trimmed.pixels.insert(trimmed.pixels.end(), s.begin(), s.end());
    }
    RngStream rng{11};
    const Dataset s = subset(trimmed, 40, rng);
    const auto counts = s.class_counts();
    EXPECT_EQ(counts[3], 2U);
    EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), std::size_t{0}), 40U);
}

TEST(Subset, OfStratifiedSubsetMatchesCounts) {
    const Dataset ds = balanced_dataset(100, 10);
    RngStream a{12};
    const Dataset once = subset(ds, 400, a);
    RngStream b{13};
    const Dataset twice = subset(subset(ds, 400, b), 400, b);
    EXPECT_EQ(once.class_counts(), twice.class_counts());
}

TEST(Subset, TooLargeRejected) {
    const Dataset ds = balanced_dataset(10, 10);
    RngStream rng{14};
    EXPECT_THROW(subset(ds, 101, rng), InvalidArgument);
}

TEST(Normalize, SourceHasZeroMeanUnitStd) {
    RngStream rng{15};
    const Dataset ds = toy_dataset(300, 3, rng);
    const NormStats stats = compute_norm_stats(ds);
    const Tensor x = normalize(ds, stats);
    ASSERT_EQ(x.shape(), (Shape{300, 12}));
    const std::size_t plane = 4;
    for (std::size_t ch = 0; ch < 3; ++ch) {
        double sum = 0.0;
        double sq = 0.0;
        for (std::size_t i = 0; i < 300; ++i) {
            for (std::size_t k = 0; k < plane; ++k) {
                const double v = x(i, ch * plane + k);
                sum += v;
                sq += v * v;
            }
        }
        const double n = 300.0 * plane;
        EXPECT_NEAR(sum / n, 0.0, 1e-10);
        EXPECT_NEAR(std::sqrt(sq / n - (sum / n) * (sum / n)), 1.0, 1e-10);
    }
}

TEST(Normalize, OrderIrrelevantAndConstantRejected) {
    RngStream rng{16};
    Dataset ds = toy_dataset(20, 3, rng);
    const NormStats stats = compute_norm_stats(ds);
    std::vector<std::size_t> rev(ds.size());
    std::iota(rev.rbegin(), rev.rend(), std::size_t{0});
    const Dataset reversed = select(ds, rev, "rev");
    const Tensor a = normalize(ds, stats);
    const Tensor b = normalize(reversed, stats);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            EXPECT_EQ(a(i, k), b(ds.size() - 1 - i, k));
        }
    }
    Dataset flat = ds;
    std::fill(flat.pixels.begin(), flat.pixels.end(), 77);
    EXPECT_THROW(normalize(flat, compute_norm_stats(flat)), InvalidArgument);
}

TEST(NoiseStream, FreshBatchesWithMomentsNearStandard) {
    NoiseSpec spec;
    spec.input_dim = 64;
    RngStream rng{17};
    NoiseStream stream{spec, rng};
    const Batch a = stream.next();
    const Batch b = stream.next();
    EXPECT_NE(a.inputs, b.inputs);
    EXPECT_NE(a.labels, b.labels);
    double sum = 0.0;
    double sq = 0.0;
    std::size_t n = 0;
    for (int i = 0; i < 50; ++i) {
        for (const double v : stream.next().inputs.data()) {
            sum += v;
            sq += v * v;
            ++n;
        }
    }
    const double mean = sum / static_cast<double>(n);
    EXPECT_NEAR(mean, 0.0, 5.0 / std::sqrt(static_cast<double>(n)));
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(n) - mean * mean), 1.0, 0.01);
}

TEST(NoiseStream, LabelsUniformAndIndependentOfInputs) {
    NoiseSpec spec;
    spec.input_dim = 8;
    RngStream rng{18};
    NoiseStream stream{spec, rng};
    // 10 label classes × 2 sign buckets of the first feature.
    std::array<std::array<double, 2>, 10> table{};
    std::array<double, 10> counts{};
    std::size_t n = 0;
    while (n < 10240) {
        const Batch b = stream.next();
        for (std::size_t r = 0; r < b.labels.size(); ++r) {
            table[b.labels[r]][b.inputs(r, 0) > 0.0 ? 1 : 0] += 1.0;
            counts[b.labels[r]] += 1.0;
            ++n;
        }
    }
    const double total = static_cast<double>(n);
    double uniform_chi2 = 0.0;
    for (const double c : counts) {
        uniform_chi2 += (c - total / 10.0) * (c - total / 10.0) / (total / 10.0);
    }
    // 99th percentile of chi-square with 9 degrees of freedom.
    EXPECT_LT(uniform_chi2, 21.666);

    std::array<double, 2> sign_totals{};
    for (const auto& row : table) {
        sign_totals[0] += row[0];
        sign_totals[1] += row[1];
    }
    double independence_chi2 = 0.0;
    for (std::size_t c = 0; c < 10; ++c) {
        for (std::size_t s = 0; s < 2; ++s) {
            const double expected = counts[c] * sign_totals[s] / total;
            independence_chi2 += (table[c][s] - expected) * (table[c][s] - expected) / expected;
        }
    }
    EXPECT_LT(independence_chi2, 21.666);
}

TEST(NoiseStream, DeterministicPerStream) {
    NoiseSpec spec;
    spec.input_dim = 4;
    spec.batch_size = 3;
    RngStream rng{19};
    NoiseStream a{spec, rng};
    NoiseStream b{spec, rng};
    for (int i = 0; i < 3; ++i) {
        const Batch x = a.next();
        const Batch y = b.next();
        EXPECT_EQ(x.inputs, y.inputs);
        EXPECT_EQ(x.labels, y.labels);
        EXPECT_EQ(x.targets, one_hot(x.labels, 10));
    }
}

TEST(EpochBatches, CoverEverySampleOnce) {
    RngStream rng{20};
    for (const bool shuffle : {false, true}) {
        const auto batches = epoch_batches(1001, 128, shuffle, rng);
        std::vector<std::size_t> seen;
        for (const auto& b : batches) {
            EXPECT_GE(b.size(), 2U);
            seen.insert(seen.end(), b.begin(), b.end());
        }
        EXPECT_EQ(seen.size(), 1001U);
        std::vector<std::size_t> sorted = seen;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            EXPECT_EQ(sorted[i], i);
        }
        if (!shuffle) {
            EXPECT_EQ(seen, sorted);
        }
    }
}

TEST(EpochBatches, TrailingSingletonMerged) {
    RngStream rng{21};
    const auto batches = epoch_batches(257, 128, false, rng);
    ASSERT_EQ(batches.size(), 2U);
    EXPECT_EQ(batches[1].size(), 129U);
}

TEST(EpochBatches, SameSeedSameComposition) {
    RngStream a{22};
    RngStream b{22};
    EXPECT_EQ(epoch_batches(500, 64, true, a), epoch_batches(500, 64, true, b));
}

TEST(GaussianImages, MomentsAndClamping) {
    RngStream rng{23};
    const Dataset ds = gaussian_noise_images(200, 128.0, 64.0, rng);
    EXPECT_EQ(ds.size(), 200U);
    double sum = 0.0;
    for (const auto p : ds.pixels) {
        sum += p;
    }
    EXPECT_NEAR(sum / static_cast<double>(ds.pixels.size()), 128.0, 1.0);
    ds.validate();
}

TEST(Synthetic, DeterministicAndBalanced) {
    const SyntheticImages gen{SyntheticSpec{}, 7};
    const SyntheticImages same{SyntheticSpec{}, 7};
    RngStream a{1};
    RngStream b{1};
    const Dataset x = gen.sample(100, a, "x");
    const Dataset y = same.sample(100, b, "x");
    EXPECT_EQ(x, y);
    for (const auto c : x.class_counts()) {
        EXPECT_EQ(c, 10U);
    }
    EXPECT_EQ(content_hash(x), content_hash(y));
    RngStream c{2};
    EXPECT_NE(content_hash(gen.sample(100, c, "x")), content_hash(x));
}

TEST(Synthetic, InvalidSpecRejected) {
    SyntheticSpec spec;
    spec.octaves = 5;
    EXPECT_THROW((SyntheticImages{spec, 1}), InvalidArgument);
}
