#pragma once

// Model construction and execution. A Model is a ModelSpec, a ParamSet, and a
// linear plan of layer applications; forward() replays the plan. Weights
// initialize uniform in +-1/sqrt(fan_in) from the "init" stream of the given
// seed, biases start at zero, so identical (spec, seed) builds are
// bit-identical.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "flexchill/ops.hpp"
#include "flexchill/params.hpp"
#include "flexchill/rng.hpp"
#include "flexchill/tensor.hpp"

namespace flexchill {

enum class ModelKind {
    mlp_femnist,  // 784 -> 512 -> 256 -> 128 -> 62, ReLU between
    cnn2_cifar,   // two conv+pool blocks on [3,32,32], then 500 -> 256 -> 10
    cnn1d_har,    // four conv+BN blocks on [1,L], global average, 128 -> 6
    logreg_2d,    // single affine map, configurable classes
    mlp,          // flatten + configurable hidden widths
};

inline std::string model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::mlp_femnist: return "mlp_femnist";
        case ModelKind::cnn2_cifar: return "cnn2_cifar";
        case ModelKind::cnn1d_har: return "cnn1d_har";
        case ModelKind::logreg_2d: return "logreg_2d";
        case ModelKind::mlp: return "mlp";
    }
    return "unknown";
}

struct ModelSpec {
    ModelKind kind = ModelKind::logreg_2d;
    std::vector<std::size_t> input_shape;  // per-sample shape, no batch axis
    std::size_t num_classes = 0;
    std::vector<std::size_t> hidden;  // mlp kind only

    static ModelSpec logreg(std::size_t input_dim, std::size_t classes) {
        return {ModelKind::logreg_2d, {input_dim}, classes, {}};
    }
    static ModelSpec mlp_custom(std::size_t input_dim, std::vector<std::size_t> hidden_dims,
                                std::size_t classes) {
        return {ModelKind::mlp, {input_dim}, classes, std::move(hidden_dims)};
    }
    static ModelSpec femnist() { return {ModelKind::mlp_femnist, {784}, 62, {}}; }
    static ModelSpec cifar() { return {ModelKind::cnn2_cifar, {3, 32, 32}, 10, {}}; }
    static ModelSpec har(std::size_t length = 128) {
        return {ModelKind::cnn1d_har, {1, length}, 6, {}};
    }

    std::size_t input_elements() const {
        std::size_t n = 1;
        for (std::size_t d : input_shape) n *= d;
        return n;
    }
};

enum class LayerOp : unsigned char {
    flatten,
    dense,
    relu,
    conv2d,
    maxpool2d,
    conv1d,
    batchnorm1d,
    maxpool1d,
    adaptive_avg_pool1d,
};

// One plan step. Parameter references are indices into the model's ParamSet.
struct LayerDesc {
    LayerOp op;
    std::size_t p0 = 0;  // weight / gamma
    std::size_t p1 = 0;  // bias / beta
    std::size_t p2 = 0;  // running mean
    std::size_t p3 = 0;  // running var
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

struct Model {
    ModelSpec spec;
    ParamSet params;
    std::vector<LayerDesc> plan;

    Model clone() const { return {spec, params.clone(), plan}; }
};

namespace detail {

class ModelBuilder {
public:
    ModelBuilder(Model& m, std::uint64_t seed) : m_(m), seed_(seed) {}

    void flatten() { m_.plan.push_back({LayerOp::flatten}); }
    void relu() { m_.plan.push_back({LayerOp::relu}); }
    void maxpool2d(std::size_t k) { m_.plan.push_back({LayerOp::maxpool2d, 0, 0, 0, 0, k}); }
    void maxpool1d(std::size_t k) { m_.plan.push_back({LayerOp::maxpool1d, 0, 0, 0, 0, k}); }
    void global_avg1d() { m_.plan.push_back({LayerOp::adaptive_avg_pool1d}); }

    void dense(const std::string& name, std::size_t in, std::size_t out) {
        const std::size_t w = add_weight(name + ".weight", {out, in}, in, ParamRole::dense);
        const std::size_t b = add_zeros(name + ".bias", {out}, ParamRole::bias, true);
        m_.plan.push_back({LayerOp::dense, w, b});
    }

    void conv2d(const std::string& name, std::size_t ci, std::size_t co, std::size_t k,
                std::size_t stride) {
        const std::size_t w = add_weight(name + ".weight", {co, ci, k, k}, ci * k * k, ParamRole::conv);
        const std::size_t b = add_zeros(name + ".bias", {co}, ParamRole::bias, true);
        m_.plan.push_back({LayerOp::conv2d, w, b, 0, 0, k, stride});
    }

    void conv1d(const std::string& name, std::size_t ci, std::size_t co, std::size_t k,
                std::size_t stride, std::size_t padding) {
        const std::size_t w = add_weight(name + ".weight", {co, ci, k}, ci * k, ParamRole::conv);
        const std::size_t b = add_zeros(name + ".bias", {co}, ParamRole::bias, true);
        m_.plan.push_back({LayerOp::conv1d, w, b, 0, 0, k, stride, padding});
    }

    void batchnorm1d(const std::string& name, std::size_t c) {
        const std::size_t g = add_const(name + ".gamma", {c}, 1.0, ParamRole::batchnorm_affine, true);
        const std::size_t b = add_const(name + ".beta", {c}, 0.0, ParamRole::batchnorm_affine, true);
        const std::size_t rm = add_const(name + ".running_mean", {c}, 0.0, ParamRole::batchnorm_stat, false);
        const std::size_t rv = add_const(name + ".running_var", {c}, 1.0, ParamRole::batchnorm_stat, false);
        m_.plan.push_back({LayerOp::batchnorm1d, g, b, rm, rv});
    }

private:
    std::size_t add_weight(const std::string& name, std::vector<std::size_t> shape,
                           std::size_t fan_in, ParamRole role) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        Rng rng(seed_, "init", weighted_layers_++);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : t.data()) v = uniform(rng, -bound, bound);
        m_.params.add(name, std::move(t), role);
        return m_.params.size() - 1;
    }

    std::size_t add_zeros(const std::string& name, std::vector<std::size_t> shape, ParamRole role,
                          bool trainable) {
        return add_const(name, std::move(shape), 0.0, role, trainable);
    }

    std::size_t add_const(const std::string& name, std::vector<std::size_t> shape, double value,
                          ParamRole role, bool trainable) {
        Tensor t = Tensor::zeros(std::move(shape), trainable);
        for (auto& v : t.data()) v = value;
        m_.params.add(name, std::move(t), role);
        return m_.params.size() - 1;
    }

    Model& m_;
    std::uint64_t seed_;
    std::size_t weighted_layers_ = 0;
};

inline void validate_spec(const ModelSpec& spec) {
    require(!spec.input_shape.empty(), "model: input shape must be non-empty");
    require(spec.num_classes >= 2, "model: need at least two classes");
    switch (spec.kind) {
        case ModelKind::mlp_femnist:
            require(spec.input_elements() == 784, "mlp_femnist: input must flatten to 784");
            require(spec.num_classes == 62, "mlp_femnist: class count is fixed at 62");
            break;
        case ModelKind::cnn2_cifar:
            require(spec.input_shape == std::vector<std::size_t>{3, 32, 32},
                    "cnn2_cifar: input shape is fixed at [3,32,32]");
            require(spec.num_classes == 10, "cnn2_cifar: class count is fixed at 10");
            break;
        case ModelKind::cnn1d_har:
            require(spec.input_shape.size() == 2 && spec.input_shape[0] == 1,
                    "cnn1d_har: input shape must be [1, length]");
            require(spec.input_shape[1] >= 8, "cnn1d_har: length must be at least 8");
            require(spec.num_classes == 6, "cnn1d_har: class count is fixed at 6");
            break;
        case ModelKind::logreg_2d:
            require(spec.hidden.empty(), "logreg_2d: no hidden layers");
            break;
        case ModelKind::mlp:
            require(!spec.hidden.empty(), "mlp: hidden widths must be non-empty");
            for (std::size_t h : spec.hidden) require(h >= 1, "mlp: hidden widths must be positive");
            break;
    }
}

}  // namespace detail

inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
    detail::validate_spec(spec);
    Model m;
    m.spec = spec;
    detail::ModelBuilder b(m, seed);
    switch (spec.kind) {
        case ModelKind::logreg_2d: {
            b.flatten();
            b.dense("fc1", spec.input_elements(), spec.num_classes);
            break;
        }
        case ModelKind::mlp:
        case ModelKind::mlp_femnist: {
            const std::vector<std::size_t> widths =
                spec.kind == ModelKind::mlp ? spec.hidden
                                            : std::vector<std::size_t>{512, 256, 128};
            b.flatten();
            std::size_t in = spec.input_elements();
            std::size_t i = 1;
            for (std::size_t h : widths) {
                b.dense("fc" + std::to_string(i++), in, h);
                b.relu();
                in = h;
            }
            b.dense("fc" + std::to_string(i), in, spec.num_classes);
            break;
        }
        case ModelKind::cnn2_cifar: {
            b.conv2d("conv1", 3, 10, 5, 1);
            b.relu();
            b.maxpool2d(2);
            b.conv2d("conv2", 10, 20, 5, 1);
            b.relu();
            b.maxpool2d(2);
            b.flatten();
            b.dense("fc1", 500, 256);
            b.relu();
            b.dense("fc2", 256, 10);
            break;
        }
        case ModelKind::cnn1d_har: {
            b.conv1d("conv1", 1, 16, 7, 1, 3);
            b.batchnorm1d("bn1", 16);
            b.relu();
            b.maxpool1d(2);
            b.conv1d("conv2", 16, 32, 5, 1, 2);
            b.batchnorm1d("bn2", 32);
            b.relu();
            b.maxpool1d(2);
            b.conv1d("conv3", 32, 64, 5, 1, 2);
            b.batchnorm1d("bn3", 64);
            b.relu();
            b.maxpool1d(2);
            b.conv1d("conv4", 64, 128, 3, 1, 1);
            b.batchnorm1d("bn4", 128);
            b.relu();
            b.global_avg1d();
            b.flatten();
            b.dense("fc1", 128, 6);
            break;
        }
    }
    return m;
}

// Runs the plan. `capture_ids` are plan indices whose outputs are copied into
// `captured` (aligned with `capture_ids`); pass empty spans for plain runs.
inline Tensor forward(Model& m, const Tensor& x, Tape* tape, bool training,
                      const std::vector<std::size_t>& capture_ids = {},
                      std::vector<Tensor>* captured = nullptr) {
    detail::require(x.rank() >= 2, "forward: input must include a batch axis");
    const std::size_t B = x.dim(0);
    detail::require(x.numel() / B == m.spec.input_elements(),
                    "forward: per-sample size " + std::to_string(x.numel() / B) +
                        " does not match model input " + std::to_string(m.spec.input_elements()));
    for (std::size_t id : capture_ids)
        detail::require(id < m.plan.size(), "forward: capture layer id out of range");
    if (captured) captured->assign(capture_ids.size(), Tensor());

    Tensor h = x;
    {
        // Accept any input layout whose per-sample size matches; convolutional
        // plans need samples in their declared shape.
        bool matches = x.rank() == m.spec.input_shape.size() + 1;
        if (matches)
            for (std::size_t i = 0; i < m.spec.input_shape.size(); ++i)
                if (x.dim(i + 1) != m.spec.input_shape[i]) {
                    matches = false;
                    break;
                }
        if (!matches) h = reshape_batch(tape, x, m.spec.input_shape);
    }
    for (std::size_t li = 0; li < m.plan.size(); ++li) {
        const LayerDesc& d = m.plan[li];
        switch (d.op) {
            case LayerOp::flatten:
                h = flatten(tape, h);
                break;
            case LayerOp::dense:
                h = dense(tape, h, m.params[d.p0].tensor, m.params[d.p1].tensor);
                break;
            case LayerOp::relu:
                h = relu(tape, h);
                break;
            case LayerOp::conv2d:
                h = conv2d(tape, h, m.params[d.p0].tensor, m.params[d.p1].tensor, d.stride);
                break;
            case LayerOp::maxpool2d:
                h = maxpool2d(tape, h, d.kernel);
                break;
            case LayerOp::conv1d:
                h = conv1d(tape, h, m.params[d.p0].tensor, m.params[d.p1].tensor, d.stride,
                           d.padding);
                break;
            case LayerOp::batchnorm1d:
                h = batchnorm1d(tape, h, m.params[d.p0].tensor, m.params[d.p1].tensor,
                                m.params[d.p2].tensor, m.params[d.p3].tensor, training);
                break;
            case LayerOp::maxpool1d:
                h = maxpool1d(tape, h, d.kernel);
                break;
            case LayerOp::adaptive_avg_pool1d:
                h = adaptive_avg_pool1d(tape, h);
                break;
        }
        if (captured)
            for (std::size_t ci = 0; ci < capture_ids.size(); ++ci)
                if (capture_ids[ci] == li) (*captured)[ci] = h;
    }
    return h;
}

// Class decisions straight from raw logits; ties resolve to the lowest index.
// Temperature rescaling never changes these.
inline std::vector<int> predict(Model& m, const Tensor& x) {
    Tensor logits = forward(m, x, nullptr, false);
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    std::vector<int> out(B);
    const auto& v = logits.data();
    for (std::size_t r = 0; r < B; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < C; ++j)
            if (v[r * C + j] > v[r * C + best]) best = j;
        out[r] = static_cast<int>(best);
    }
    return out;
}

inline std::size_t parameter_count(const Model& m) { return m.params.total_elements(); }
inline std::size_t trainable_parameter_count(const Model& m) {
    return m.params.trainable_elements();
}

}  // namespace flexchill
