#pragma once

// Feed-forward networks over a flat parameter vector with analytic gradients.
//
// Parameter layout, per layer in manifest order: the out_dim x in_dim weight
// matrix in row-major order, followed by the out_dim bias vector.

#include "fedsac/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fedsac {

enum class Activation { relu, tanh, softmax, identity };

std::string to_string(Activation a);
Activation activation_from_string(std::string_view s);

struct LayerSpec {
    int in_dim = 1;
    int out_dim = 1;
    Activation activation = Activation::identity;

    std::size_t param_count() const {
        return static_cast<std::size_t>(in_dim) * out_dim + out_dim;
    }
    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

using Manifest = std::vector<LayerSpec>;

/// Throws ShapeError unless dims are positive, consecutive layers chain and
/// softmax appears only on the last layer.
void validate_manifest(const Manifest& manifest);
std::size_t param_count(const Manifest& manifest);

/// widths = {in, h1, ..., out}; hidden layers use `hidden`, the last `output`.
Manifest mlp_manifest(std::span<const int> widths, Activation hidden, Activation output);
inline Manifest mlp_manifest(std::initializer_list<int> widths, Activation hidden, Activation output) {
    return mlp_manifest(std::span<const int>(widths.begin(), widths.size()), hidden, output);
}

struct FlatParams {
    Manifest manifest;
    Vector values;

    FlatParams() = default;
    FlatParams(Manifest m, Vector v);
    /// Zero-filled parameters for the manifest.
    explicit FlatParams(Manifest m);

    std::size_t size() const { return static_cast<std::size_t>(values.size()); }
    std::size_t layer_offset(std::size_t k) const;
    std::size_t layer_size(std::size_t k) const { return manifest.at(k).param_count(); }

    Eigen::Map<const Matrix> weights(std::size_t k) const;
    Eigen::Map<Matrix> weights(std::size_t k);
    Eigen::Map<const Vector> bias(std::size_t k) const;
    Eigen::Map<Vector> bias(std::size_t k);

    bool all_finite() const { return values.allFinite(); }
};

struct Gradients {
    Vector values;
};

struct Batch {
    Matrix inputs;
    std::vector<int> labels;
    std::size_t size() const { return labels.size(); }
};

/// Uniform Glorot weights, zero biases.
FlatParams init_params(const Manifest& manifest, std::uint64_t seed);

struct DenseLayer {
    Matrix weights;
    Vector bias;
};
std::vector<DenseLayer> unflatten(const FlatParams& params);
FlatParams flatten(const Manifest& manifest, const std::vector<DenseLayer>& layers);

Matrix forward(const FlatParams& params, const Matrix& inputs);

/// Activations kept for backpropagation. inputs[k] feeds layer k;
/// outputs[k] is its post-activation result.
struct ForwardTrace {
    std::vector<Matrix> inputs;
    std::vector<Matrix> outputs;
    const Matrix& result() const { return outputs.back(); }
};

ForwardTrace forward_trace(const FlatParams& params, const Matrix& inputs);

/// Backpropagates `grad_output` (dL/d output, B x out_dim) through the network.
/// Parameter gradients are accumulated into `grad_params` (which must already
/// have the parameter layout); the gradient w.r.t. the network inputs is
/// returned. When `wrt_preactivation` is set, `grad_output` is taken as the
/// gradient w.r.t. the final layer's pre-activation.
Matrix backward(const FlatParams& params, const ForwardTrace& trace, const Matrix& grad_output,
                Vector& grad_params, bool wrt_preactivation = false);

enum class LossKind { cross_entropy, mse };

/// Batch-mean loss. For mse the target is the one-hot encoding of the labels
/// and the mean runs over all output elements.
/// Cross-entropy reads the final pre-activation as logits.
std::pair<double, Gradients> loss_and_grad(const FlatParams& params, const Batch& batch, LossKind kind);

/// Mean squared error over every element of the B x out_dim output.
std::pair<double, Gradients> mse_loss_and_grad(const FlatParams& params, const Matrix& inputs,
                                               const Matrix& targets);

FlatParams sgd_step(const FlatParams& params, const Gradients& grads, double lr);

double mse_vec(std::span<const double> a, std::span<const double> b);
inline double mse_vec(const Vector& a, const Vector& b) {
    return mse_vec(std::span<const double>(a.data(), a.size()), std::span<const double>(b.data(), b.size()));
}

class Adam {
  public:
    Adam() = default;
    Adam(std::size_t size, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step(Vector& values, const Vector& grad);
    void step(FlatParams& params, const Vector& grad) { step(params.values, grad); }
    double lr() const { return lr_; }

  private:
    double lr_ = 1e-3;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long t_ = 0;
    Vector m_;
    Vector v_;
};

// Checkpoints: each section is one line of JSON
//   {"name":..., "manifest":[...], "d":N, "seed":S, "meta":{...}}
// followed by N little-endian IEEE-754 doubles. Files hold one or more sections.
struct Checkpoint {
    struct Section {
        std::string name;
        FlatParams params;
        std::uint64_t seed = 0;
        std::string meta_json = "{}";
    };
    std::vector<Section> sections;

    const Section& at(std::string_view name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json manifest_to_json(const Manifest& manifest);
Manifest manifest_from_json(const nlohmann::json& j);

}  // namespace fedsac
