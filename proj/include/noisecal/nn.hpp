#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "noisecal/errors.hpp"
#include "noisecal/rng.hpp"
#include "noisecal/tensor.hpp"

namespace noisecal {

/// Output nonlinearity of the classification head. Softmax heads train with
/// cross-entropy; sigmoid heads (the 2-D toy model) train with binary
/// cross-entropy summed over outputs.
enum class OutputKind : std::uint32_t { softmax = 0, sigmoid = 1 };

struct ArchSpec {
    std::size_t input_dim{3072};
    std::size_t hidden_width{256};
    std::size_t depth{6};
    std::size_t num_classes{10};
    OutputKind output{OutputKind::softmax};

    void validate() const {
        if (input_dim < 1 || hidden_width < 1 || depth < 1 || num_classes < 2) {
            throw InvalidArgument("invalid architecture: input_dim=" + std::to_string(input_dim) +
                                  " hidden_width=" + std::to_string(hidden_width) + " depth=" +
                                  std::to_string(depth) + " num_classes=" + std::to_string(num_classes) +
                                  " (need depth>=1, width>=1, classes>=2)");
        }
    }

    /// Trainable parameters: per block W, b, gamma, beta; head W, b.
    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t total = 0;
        std::size_t fan_in = input_dim;
        for (std::size_t l = 0; l < depth; ++l) {
            total += hidden_width * fan_in + 3 * hidden_width;
            fan_in = hidden_width;
        }
        return total + num_classes * fan_in + num_classes;
    }

    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// He-normal initialization: std = gain / sqrt(fan_in), zero biases.
struct InitSpec {
    double gain{std::sqrt(2.0)};

    friend bool operator==(const InitSpec&, const InitSpec&) = default;
};

enum class Mode { train, eval };

struct Dense {
    Tensor weight; // [out × in]
    Tensor bias;   // [out]

    friend bool operator==(const Dense&, const Dense&) = default;
};

struct Block {
    Dense linear;
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;

    friend bool operator==(const Block&, const Block&) = default;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Stack of Linear -> BatchNorm -> ReLU blocks followed by a linear head.
///
/// feedback[i] is the fixed random matrix that replaces the transpose of the
/// forward weights of layer i+1 when propagating error with feedback
/// alignment (layers 1..depth-1 are blocks, layer depth is the head). It has
/// the shape of that layer's Wᵀ, i.e. [in × out]. The first block never sends
/// error further back, so it has no feedback matrix.
struct Model {
    ArchSpec arch;
    std::vector<Block> blocks;
    Dense head;
    std::vector<Tensor> feedback;
    // Bumped on every parameter update; traces remember the revision they saw.
    std::uint64_t revision{0};

    [[nodiscard]] bool has_feedback() const noexcept { return !feedback.empty(); }

    friend bool operator==(const Model& a, const Model& b) {
        return a.arch == b.arch && a.blocks == b.blocks && a.head == b.head && a.feedback == b.feedback;
    }
};

namespace detail {

inline Tensor he_normal(std::size_t out, std::size_t in, double gain, RngStream& rng) {
    return gaussian_tensor({out, in}, 0.0, gain / std::sqrt(static_cast<double>(in)), rng);
}

} // namespace detail

inline Model build_model(const ArchSpec& arch, const InitSpec& init, bool with_feedback, RngStream& rng) {
    arch.validate();
    if (!(init.gain > 0.0)) {
        throw InvalidArgument("init gain must be positive");
    }
    Model model;
    model.arch = arch;
    const std::size_t width = arch.hidden_width;
    std::size_t fan_in = arch.input_dim;
    for (std::size_t l = 0; l < arch.depth; ++l) {
        Block block;
        block.linear.weight = detail::he_normal(width, fan_in, init.gain, rng);
        block.linear.bias = Tensor{{width}};
        block.gamma = Tensor{{width}, 1.0};
        block.beta = Tensor{{width}};
        block.running_mean = Tensor{{width}};
        block.running_var = Tensor{{width}, 1.0};
        model.blocks.push_back(std::move(block));
        fan_in = width;
    }
    model.head.weight = detail::he_normal(arch.num_classes, fan_in, init.gain, rng);
    model.head.bias = Tensor{{arch.num_classes}};

    if (with_feedback) {
        // Drawn after all forward weights so enabling feedback does not change
        // the forward initialization for a given stream.
        for (std::size_t l = 1; l < arch.depth; ++l) {
            model.feedback.push_back(transpose(detail::he_normal(width, width, init.gain, rng)));
        }
        model.feedback.push_back(transpose(detail::he_normal(arch.num_classes, width, init.gain, rng)));
    }
    return model;
}

struct BlockTrace {
    Tensor input;      // [n × in]
    Tensor pre;        // Wx+b
    Tensor normalized; // x̂
    Tensor inv_std;    // [width]
    Tensor post;       // ReLU(γx̂+β)
};

struct ForwardTrace {
    Mode mode{Mode::eval};
    std::uint64_t revision{0};
    std::vector<BlockTrace> blocks;
    Tensor logits;
    /// Softmax probabilities or per-output sigmoids, depending on the head.
    Tensor outputs;

    [[nodiscard]] std::size_t batch_size() const { return logits.rows(); }
};

namespace detail {

inline Tensor affine(const Tensor& x, const Dense& layer) {
    Tensor z = matmul_nt(x, layer.weight);
    const std::size_t out = z.cols();
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        for (std::size_t c = 0; c < out; ++c) {
            row[c] += layer.bias[c];
        }
    }
    return z;
}

template <class ModelRef>
ForwardTrace forward_impl(ModelRef& model, const Tensor& batch, Mode mode) {
    if (batch.rank() != 2 || batch.cols() != model.arch.input_dim) {
        throw ShapeError("forward: expected batch of shape (n," + std::to_string(model.arch.input_dim) + "), got " +
                         shape_string(batch.shape()));
    }
    const std::size_t n = batch.rows();
    if (n == 0) {
        throw InvalidArgument("forward: empty batch");
    }
    if (mode == Mode::train && n < 2) {
        throw InvalidArgument("forward: train mode needs at least 2 samples for batch statistics");
    }

    ForwardTrace trace;
    trace.mode = mode;
    trace.revision = model.revision;
    trace.blocks.reserve(model.blocks.size());

    const Tensor* x = &batch;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        auto& block = model.blocks[l];
        BlockTrace bt;
        bt.input = *x;
        bt.pre = affine(*x, block.linear);
        const std::size_t width = bt.pre.cols();
        bt.normalized = Tensor{bt.pre.shape()};
        bt.inv_std = Tensor{{width}};
        bt.post = Tensor{bt.pre.shape()};

        std::vector<double> mean(width, 0.0);
        std::vector<double> var(width, 0.0);
        if (mode == Mode::train) {
            for (std::size_t r = 0; r < n; ++r) {
                const auto row = bt.pre.row(r);
                for (std::size_t c = 0; c < width; ++c) {
                    mean[c] += row[c];
                }
            }
            for (double& m : mean) {
                m /= static_cast<double>(n);
            }
            for (std::size_t r = 0; r < n; ++r) {
                const auto row = bt.pre.row(r);
                for (std::size_t c = 0; c < width; ++c) {
                    const double d = row[c] - mean[c];
                    var[c] += d * d;
                }
            }
            for (double& v : var) {
                v /= static_cast<double>(n);
            }
            if constexpr (!std::is_const_v<ModelRef>) {
                // Running variance uses the unbiased batch estimate.
                const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
                for (std::size_t c = 0; c < width; ++c) {
                    block.running_mean[c] =
                        (1.0 - kBatchNormMomentum) * block.running_mean[c] + kBatchNormMomentum * mean[c];
                    block.running_var[c] =
                        (1.0 - kBatchNormMomentum) * block.running_var[c] + kBatchNormMomentum * var[c] * unbias;
                }
            }
        } else {
            for (std::size_t c = 0; c < width; ++c) {
                mean[c] = block.running_mean[c];
                var[c] = block.running_var[c];
            }
        }
        for (std::size_t c = 0; c < width; ++c) {
            bt.inv_std[c] = 1.0 / std::sqrt(var[c] + kBatchNormEps);
        }
        for (std::size_t r = 0; r < n; ++r) {
            const auto pre = bt.pre.row(r);
            auto xhat = bt.normalized.row(r);
            auto post = bt.post.row(r);
            for (std::size_t c = 0; c < width; ++c) {
                xhat[c] = (pre[c] - mean[c]) * bt.inv_std[c];
                const double y = block.gamma[c] * xhat[c] + block.beta[c];
                post[c] = y > 0.0 ? y : 0.0;
            }
        }
        trace.blocks.push_back(std::move(bt));
        x = &trace.blocks.back().post;
    }
    trace.logits = affine(*x, model.head);
    trace.outputs = model.arch.output == OutputKind::softmax ? softmax(trace.logits) : sigmoid(trace.logits);
    return trace;
}

} // namespace detail

/// Forward pass. Train mode normalizes with batch statistics and updates the
/// running statistics; eval mode uses the running statistics and leaves the
/// model untouched.
inline ForwardTrace forward(Model& model, const Tensor& batch, Mode mode) {
    return detail::forward_impl(model, batch, mode);
}

/// Eval-mode forward on an immutable model.
inline ForwardTrace forward_eval(const Model& model, const Tensor& batch) {
    return detail::forward_impl(model, batch, Mode::eval);
}

inline constexpr double kProbFloor = 1e-12;

/// Mean over samples of -log p(target). Target probabilities are clamped at 1e-12.
inline double cross_entropy(const Tensor& probs, const Tensor& targets) {
    if (probs.shape() != targets.shape() || probs.rank() != 2) {
        throw ShapeError("cross_entropy: probs " + shape_string(probs.shape()) + " vs targets " +
                         shape_string(targets.shape()));
    }
    const std::size_t n = probs.rows();
    if (n == 0) {
        throw InvalidArgument("cross_entropy: empty batch");
    }
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < probs.cols(); ++c) {
            if (targets(r, c) != 0.0) {
                total -= targets(r, c) * std::log(std::max(probs(r, c), kProbFloor));
            }
        }
    }
    return total / static_cast<double>(n);
}

/// Binary cross-entropy summed over output elements, averaged over samples.
/// Outputs are clamped to [1e-12, 1-1e-12].
inline double bce_loss(const Tensor& outputs, const Tensor& targets) {
    if (outputs.shape() != targets.shape() || outputs.rank() != 2) {
        throw ShapeError("bce_loss: outputs " + shape_string(outputs.shape()) + " vs targets " +
                         shape_string(targets.shape()));
    }
    const std::size_t n = outputs.rows();
    if (n == 0) {
        throw InvalidArgument("bce_loss: empty batch");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const double o = std::clamp(outputs[i], kProbFloor, 1.0 - kProbFloor);
        const double t = targets[i];
        if (t != 0.0) {
            total -= t * std::log(o);
        }
        if (t != 1.0) {
            total -= (1.0 - t) * std::log(1.0 - o);
        }
    }
    return total / static_cast<double>(n);
}

/// Loss matching the model's head: cross-entropy for softmax, BCE for sigmoid.
inline double model_loss(const Model& model, const Tensor& outputs, const Tensor& targets) {
    return model.arch.output == OutputKind::softmax ? cross_entropy(outputs, targets) : bce_loss(outputs, targets);
}

struct BlockGrads {
    Tensor weight;
    Tensor bias;
    Tensor gamma;
    Tensor beta;
};

struct Gradients {
    std::vector<BlockGrads> blocks;
    Dense head;

    [[nodiscard]] bool all_finite() const {
        for (const auto& b : blocks) {
            if (!b.weight.all_finite() || !b.bias.all_finite() || !b.gamma.all_finite() || !b.beta.all_finite()) {
                return false;
            }
        }
        return head.weight.all_finite() && head.bias.all_finite();
    }
};

namespace detail {

inline Tensor column_sums(const Tensor& m) {
    Tensor out{{m.cols()}};
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            out[c] += row[c];
        }
    }
    return out;
}

inline Gradients backward_impl(const Model& model, const ForwardTrace& trace, const Tensor& targets,
                               bool use_feedback) {
    if (trace.mode != Mode::train) {
        throw InvalidState("backward: trace must come from a train-mode forward pass");
    }
    if (trace.revision != model.revision || trace.blocks.size() != model.blocks.size()) {
        throw InvalidState("backward: stale trace (model parameters changed since the forward pass)");
    }
    if (targets.shape() != trace.outputs.shape()) {
        throw ShapeError("backward: targets " + shape_string(targets.shape()) + " vs outputs " +
                         shape_string(trace.outputs.shape()));
    }
    if (use_feedback && model.feedback.size() != model.blocks.size()) {
        throw InvalidState("feedback alignment needs a model built with feedback matrices");
    }

    const std::size_t n = trace.batch_size();
    const double inv_n = 1.0 / static_cast<double>(n);

    // Softmax+CE and sigmoid+BCE share the same logit gradient form.
    Tensor delta{trace.outputs.shape()};
    for (std::size_t i = 0; i < delta.size(); ++i) {
        delta[i] = (trace.outputs[i] - targets[i]) * inv_n;
    }

    Gradients grads;
    grads.blocks.resize(model.blocks.size());
    const Tensor& last_hidden = trace.blocks.back().post;
    grads.head.weight = matmul_tn(delta, last_hidden);
    grads.head.bias = column_sums(delta);
    Tensor upstream =
        use_feedback ? matmul_nt(delta, model.feedback.back()) : matmul(delta, model.head.weight);

    for (std::size_t li = model.blocks.size(); li-- > 0;) {
        const Block& block = model.blocks[li];
        const BlockTrace& bt = trace.blocks[li];
        const std::size_t width = bt.pre.cols();

        // Through ReLU: post > 0 exactly where γx̂+β > 0.
        Tensor dy{bt.pre.shape()};
        for (std::size_t i = 0; i < dy.size(); ++i) {
            dy[i] = bt.post[i] > 0.0 ? upstream[i] : 0.0;
        }

        BlockGrads& g = grads.blocks[li];
        g.gamma = Tensor{{width}};
        g.beta = Tensor{{width}};
        Tensor sum_dxhat{{width}};
        Tensor sum_dxhat_xhat{{width}};
        for (std::size_t r = 0; r < n; ++r) {
            const auto dyr = dy.row(r);
            const auto xr = bt.normalized.row(r);
            for (std::size_t c = 0; c < width; ++c) {
                g.gamma[c] += dyr[c] * xr[c];
                g.beta[c] += dyr[c];
                const double dxhat = dyr[c] * block.gamma[c];
                sum_dxhat[c] += dxhat;
                sum_dxhat_xhat[c] += dxhat * xr[c];
            }
        }

        // Batch-statistics chain rule:
        // dz = inv_std/n * (n·dx̂ - Σdx̂ - x̂·Σ(dx̂·x̂))
        Tensor dz{bt.pre.shape()};
        const double nd = static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
            const auto dyr = dy.row(r);
            const auto xr = bt.normalized.row(r);
            auto dzr = dz.row(r);
            for (std::size_t c = 0; c < width; ++c) {
                const double dxhat = dyr[c] * block.gamma[c];
                dzr[c] = bt.inv_std[c] * inv_n * (nd * dxhat - sum_dxhat[c] - xr[c] * sum_dxhat_xhat[c]);
            }
        }

        g.weight = matmul_tn(dz, bt.input);
        g.bias = column_sums(dz);
        if (li > 0) {
            upstream = use_feedback ? matmul_nt(dz, model.feedback[li - 1]) : matmul(dz, block.linear.weight);
        }
    }
    return grads;
}

} // namespace detail

/// Exact gradient of the mean loss with respect to every trainable parameter.
inline Gradients backprop(const Model& model, const ForwardTrace& trace, const Tensor& targets) {
    return detail::backward_impl(model, trace, targets, false);
}

/// Same as backprop, except the error sent to layer l-1 goes through the fixed
/// matrix B_l instead of W_lᵀ.
inline Gradients feedback_alignment_backward(const Model& model, const ForwardTrace& trace, const Tensor& targets) {
    if (!model.has_feedback()) {
        throw InvalidState("feedback_alignment_backward: model was built without feedback matrices");
    }
    return detail::backward_impl(model, trace, targets, true);
}

} // namespace noisecal
