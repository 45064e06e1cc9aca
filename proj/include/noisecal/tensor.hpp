#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "noisecal/errors.hpp"
#include "noisecal/rng.hpp"

namespace noisecal {

using Shape = std::vector<std::size_t>;
using Labels = std::vector<std::uint16_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major array of doubles. Rank 1 and rank 2 are the only ranks the
/// arithmetic below needs; higher ranks are carried but not operated on.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_{std::move(shape)}, data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_{std::move(shape)}, data_{std::move(data)} {
        if (data_.size() != shape_size(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor{{values.size()}, std::vector<double>(values)};
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw ShapeError("ragged matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor{{r, c}, std::move(data)};
    }

    static Tensor identity(std::size_t n) {
        Tensor t{{n, n}};
        for (std::size_t i = 0; i < n; ++i) {
            t(i, i) = 1.0;
        }
        return t;
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] std::size_t rows() const {
        require_rank2("rows");
        return shape_[0];
    }
    [[nodiscard]] std::size_t cols() const {
        require_rank2("cols");
        return shape_[1];
    }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    [[nodiscard]] std::span<double> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * shape_[1], shape_[1]};
    }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void require_rank2(const char* what) const {
        if (shape_.size() != 2) {
            throw ShapeError(std::string{what} + "() needs a rank-2 tensor, got shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;
using MatMap = Eigen::Map<RowMajor>;

inline ConstMatMap as_matrix(const Tensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
inline MatMap as_matrix(Tensor& t) {
    return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string{op} + ": expected rank-2 tensor, got " + shape_string(t.shape()));
    }
}

inline void require_inner(std::size_t lhs, std::size_t rhs, const char* op, const Tensor& a, const Tensor& b) {
    if (lhs != rhs) {
        throw ShapeError(std::string{op} + ": inner dimensions differ, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

} // namespace detail

/// a[m×k] · b[k×n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    detail::require_inner(a.cols(), b.rows(), "matmul", a, b);
    Tensor out{{a.rows(), b.cols()}};
    if (a.cols() == 0) {
        return out;
    }
    detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b);
    return out;
}

/// a[m×k] · b[n×k]ᵀ
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_nt");
    detail::require_rank2(b, "matmul_nt");
    detail::require_inner(a.cols(), b.cols(), "matmul_nt", a, b);
    Tensor out{{a.rows(), b.rows()}};
    if (a.cols() == 0) {
        return out;
    }
    detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b).transpose();
    return out;
}

/// a[k×m]ᵀ · b[k×n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_tn");
    detail::require_rank2(b, "matmul_tn");
    detail::require_inner(a.rows(), b.rows(), "matmul_tn", a, b);
    Tensor out{{a.cols(), b.cols()}};
    if (a.rows() == 0) {
        return out;
    }
    detail::as_matrix(out).noalias() = detail::as_matrix(a).transpose() * detail::as_matrix(b);
    return out;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank2(a, "transpose");
    Tensor out{{a.cols(), a.rows()}};
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            out(c, r) = a(r, c);
        }
    }
    return out;
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& logits) {
    detail::require_rank2(logits, "softmax");
    if (logits.cols() < 2) {
        throw ShapeError("softmax: need at least 2 classes, got " + std::to_string(logits.cols()));
    }
    Tensor out{logits.shape()};
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto in = logits.row(r);
        auto dst = out.row(r);
        const double top = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            dst[c] = std::exp(in[c] - top);
            total += dst[c];
        }
        for (double& v : dst) {
            v /= total;
        }
    }
    return out;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor out{x.shape()};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out{x.shape()};
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] > 0.0 ? x[i] : 0.0;
    }
    return out;
}

/// Elementwise i.i.d. Normal(mean, std²).
inline Tensor gaussian_tensor(Shape shape, double mean, double std, RngStream& rng) {
    if (!(std >= 0.0)) {
        throw InvalidArgument("gaussian_tensor: std must be >= 0, got " + std::to_string(std));
    }
    Tensor out{std::move(shape)};
    for (double& v : out.data()) {
        v = mean + std * rng.normal();
    }
    return out;
}

/// n labels drawn i.i.d. uniformly from {0, ..., num_classes-1}.
inline Labels uniform_labels(std::size_t n, std::size_t num_classes, RngStream& rng) {
    if (num_classes < 2) {
        throw InvalidArgument("uniform_labels: num_classes must be >= 2, got " + std::to_string(num_classes));
    }
    if (num_classes > 65536) {
        throw InvalidArgument("uniform_labels: num_classes exceeds the 16-bit label range");
    }
    Labels out(n);
    for (auto& label : out) {
        label = static_cast<std::uint16_t>(rng.below(num_classes));
    }
    return out;
}

/// Dense one-hot encoding, shape [labels.size() × num_classes].
inline Tensor one_hot(std::span<const std::uint16_t> labels, std::size_t num_classes) {
    Tensor out{{labels.size(), num_classes}};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw InvalidArgument("one_hot: label " + std::to_string(labels[i]) + " out of range for " +
                                  std::to_string(num_classes) + " classes");
        }
        out(i, labels[i]) = 1.0;
    }
    return out;
}

/// Rows of x selected by index, in the given order.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
    detail::require_rank2(x, "gather_rows");
    const std::size_t d = x.cols();
    Tensor out{{indices.size(), d}};
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = x.row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

} // namespace noisecal
