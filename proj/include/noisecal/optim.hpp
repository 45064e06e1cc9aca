#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "noisecal/errors.hpp"
#include "noisecal/nn.hpp"
#include "noisecal/tensor.hpp"

namespace noisecal {

/// Adam with coupled L2 weight decay (decay term added to the gradient before
/// the moment updates).
struct OptimConfig {
    double learning_rate{1e-4};
    double beta1{0.99};
    double beta2{0.999};
    double epsilon{1e-8};
    double weight_decay{0.001};

    void validate() const {
        if (!(learning_rate > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
            !(epsilon > 0.0) || !(weight_decay >= 0.0)) {
            throw InvalidArgument("invalid optimizer config: need lr>0, 0<=beta1,beta2<1, eps>0, weight_decay>=0");
        }
    }

    friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

struct OptimState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t step{0};
};

inline void reset_state(OptimState& state) {
    state.m.clear();
    state.v.clear();
    state.step = 0;
}

/// One trainable tensor with its gradient. decay=false exempts it from
/// weight decay (biases and batchnorm γ, β).
struct ParamRef {
    std::string name;
    Tensor* value;
    const Tensor* grad;
    bool decay;
};

inline void adam_step(std::span<const ParamRef> params, OptimState& state, const OptimConfig& cfg) {
    cfg.validate();
    if (state.m.empty()) {
        state.m.clear();
        state.v.clear();
        for (const auto& p : params) {
            state.m.emplace_back(p.value->shape());
            state.v.emplace_back(p.value->shape());
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                         " tensors but " + std::to_string(params.size()) + " were given");
    }
    // Validate everything before touching any parameter.
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (p.grad->shape() != p.value->shape() || state.m[i].shape() != p.value->shape()) {
            throw ShapeError("adam_step: shape mismatch for parameter " + p.name + ": value " +
                             shape_string(p.value->shape()) + ", grad " + shape_string(p.grad->shape()));
        }
        if (!p.grad->all_finite()) {
            throw NonFiniteError("adam_step: non-finite gradient in parameter " + p.name);
        }
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(cfg.beta1, t);
    const double correction2 = 1.0 - std::pow(cfg.beta2, t);
    const double step_size = cfg.learning_rate / correction1;
    const double inv_correction2 = 1.0 / correction2;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        auto value = p.value->data();
        const auto grad = p.grad->data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        const double wd = p.decay ? cfg.weight_decay : 0.0;
        const double b1 = cfg.beta1;
        const double b2 = cfg.beta2;
        const double eps = cfg.epsilon;
        double* __restrict vp = value.data();
        const double* __restrict gp = grad.data();
        double* __restrict mp = m.data();
        double* __restrict sp = v.data();
        for (std::size_t k = 0; k < value.size(); ++k) {
            const double g = gp[k] + wd * vp[k];
            mp[k] = b1 * mp[k] + (1.0 - b1) * g;
            sp[k] = b2 * sp[k] + (1.0 - b2) * g * g;
            vp[k] -= step_size * mp[k] / (std::sqrt(sp[k] * inv_correction2) + eps);
        }
    }
}

/// Parameter list of a model paired with its gradients, in a fixed order:
/// per block W, b, γ, β, then head W, b.
inline std::vector<ParamRef> parameter_refs(Model& model, const Gradients& grads) {
    if (grads.blocks.size() != model.blocks.size()) {
        throw ShapeError("gradients do not match model depth");
    }
    std::vector<ParamRef> refs;
    refs.reserve(4 * model.blocks.size() + 2);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        auto& b = model.blocks[l];
        const auto& g = grads.blocks[l];
        const std::string prefix = "block" + std::to_string(l) + ".";
        refs.push_back({prefix + "weight", &b.linear.weight, &g.weight, true});
        refs.push_back({prefix + "bias", &b.linear.bias, &g.bias, false});
        refs.push_back({prefix + "gamma", &b.gamma, &g.gamma, false});
        refs.push_back({prefix + "beta", &b.beta, &g.beta, false});
    }
    refs.push_back({"head.weight", &model.head.weight, &grads.head.weight, true});
    refs.push_back({"head.bias", &model.head.bias, &grads.head.bias, false});
    return refs;
}

/// Applies one Adam step to the model and bumps its revision.
inline void adam_step(Model& model, const Gradients& grads, OptimState& state, const OptimConfig& cfg) {
    const auto refs = parameter_refs(model, grads);
    adam_step(refs, state, cfg);
    model.revision += 1;
}

} // namespace noisecal
