#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "noisecal/binary_io.hpp"
#include "noisecal/errors.hpp"
#include "noisecal/nn.hpp"

namespace noisecal {

// Model checkpoint layout (all integers and floats little-endian):
//
//   "NNCK"                         4 bytes
//   version                        u32 (= 1)
//   input_dim, hidden_width,
//   depth, num_classes, output     u32 × 5
//   has_feedback                   u32 (0 or 1)
//   per block, in order:
//     W [width × fan_in], b, gamma, beta, running_mean, running_var
//   head W [classes × width], head b
//   feedback matrices (if present), in layer order, each [in × out]
//
// Every tensor is written as its elements, row-major, f64; shapes are implied
// by the architecture.
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
    detail::ByteWriter w;
    w.magic("NNCK");
    w.u32(kCheckpointVersion);
    const auto& a = model.arch;
    w.u32(static_cast<std::uint32_t>(a.input_dim));
    w.u32(static_cast<std::uint32_t>(a.hidden_width));
    w.u32(static_cast<std::uint32_t>(a.depth));
    w.u32(static_cast<std::uint32_t>(a.num_classes));
    w.u32(static_cast<std::uint32_t>(a.output));
    w.u32(model.has_feedback() ? 1U : 0U);
    const auto put = [&w](const Tensor& t) {
        for (const double v : t.data()) {
            w.f64(v);
        }
    };
    for (const auto& b : model.blocks) {
        put(b.linear.weight);
        put(b.linear.bias);
        put(b.gamma);
        put(b.beta);
        put(b.running_mean);
        put(b.running_var);
    }
    put(model.head.weight);
    put(model.head.bias);
    for (const auto& f : model.feedback) {
        put(f);
    }
    return w.bytes();
}

inline Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r{bytes, "checkpoint"};
    if (!r.magic("NNCK")) {
        throw FormatError("checkpoint: bad magic (expected NNCK)");
    }
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    Model model;
    model.arch.input_dim = r.u32();
    model.arch.hidden_width = r.u32();
    model.arch.depth = r.u32();
    model.arch.num_classes = r.u32();
    const auto output = r.u32();
    if (output > 1) {
        throw FormatError("checkpoint: unknown output kind " + std::to_string(output));
    }
    model.arch.output = static_cast<OutputKind>(output);
    const auto has_feedback = r.u32();
    if (has_feedback > 1) {
        throw FormatError("checkpoint: bad feedback flag");
    }
    try {
        model.arch.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string{"checkpoint: "} + e.what());
    }

    const auto get = [&r](Shape shape) {
        Tensor t{std::move(shape)};
        for (double& v : t.data()) {
            v = r.f64();
        }
        return t;
    };
    const std::size_t width = model.arch.hidden_width;
    std::size_t fan_in = model.arch.input_dim;
    for (std::size_t l = 0; l < model.arch.depth; ++l) {
        Block b;
        b.linear.weight = get({width, fan_in});
        b.linear.bias = get({width});
        b.gamma = get({width});
        b.beta = get({width});
        b.running_mean = get({width});
        b.running_var = get({width});
        model.blocks.push_back(std::move(b));
        fan_in = width;
    }
    model.head.weight = get({model.arch.num_classes, width});
    model.head.bias = get({model.arch.num_classes});
    if (has_feedback == 1) {
        for (std::size_t l = 1; l < model.arch.depth; ++l) {
            model.feedback.push_back(get({width, width}));
        }
        model.feedback.push_back(get({width, model.arch.num_classes}));
    }
    if (r.remaining() != 0) {
        throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
    }
    return model;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    detail::write_file(path, encode_checkpoint(model));
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path));
}

} // namespace noisecal
