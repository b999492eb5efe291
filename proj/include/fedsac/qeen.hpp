#pragma once

// Quality evaluation embedding network: an encoder from flat model parameters
// to a short embedding, one decoder head per client-model layer that rebuilds
// that layer's parameters, and a small head that predicts the defect degree.

#include "fedsac/defects.hpp"
#include "fedsac/fedcore.hpp"
#include "fedsac/nncore.hpp"

#include <filesystem>
#include <functional>
#include <vector>

namespace fedsac {

using Embedding = Vector;

struct QeenConfig {
    int hidden = 256;
    int embedding = 64;
    int quality_hidden = 32;
};

struct QeenLosses {
    double l1 = 0.0;  // reconstruction
    double l2 = 0.0;  // quality prediction
};

/// l1 = mean over models of the per-model reconstruction MSE; l2 = MSE between
/// predicted and true marks.
QeenLosses qeen_losses(std::span<const FlatParams> originals, std::span<const FlatParams> decoded,
                       std::span<const double> marks, std::span<const double> predictions);

class Qeen {
  public:
    Qeen() = default;
    Qeen(const Manifest& client_manifest, QeenConfig cfg, std::uint64_t seed);

    Embedding encode(const FlatParams& params) const;
    /// One model per row in, one embedding per row out.
    Matrix encode_rows(const Matrix& params_rows) const;
    FlatParams decode(const Embedding& e) const;
    double quality_score(const Embedding& e) const;

    QeenLosses losses(std::span<const FlatParams> models, std::span<const double> marks) const;

    struct StepStats {
        double l1 = 0.0;
        double l2 = 0.0;
        double joint = 0.0;
    };
    struct Grads {
        Vector encoder;
        std::vector<Vector> decoder_heads;
        Vector quality_head;
    };
    /// Gradient of lambda1 * l1 + lambda2 * l2 on a batch of models (rows).
    StepStats joint_gradient(const Matrix& params_rows, const Vector& marks, double lambda1, double lambda2,
                             Grads& grads) const;

    std::size_t param_count() const;

    const Manifest& client_manifest() const { return client_manifest_; }
    const QeenConfig& config() const { return cfg_; }
    int embedding_dim() const { return cfg_.embedding; }
    const FlatParams& encoder() const { return encoder_; }
    const std::vector<FlatParams>& decoder_heads() const { return decoder_heads_; }
    const FlatParams& quality_head() const { return quality_head_; }
    FlatParams& encoder() { return encoder_; }
    std::vector<FlatParams>& decoder_heads() { return decoder_heads_; }
    FlatParams& quality_head() { return quality_head_; }

    void save(const std::filesystem::path& path, std::uint64_t seed = 0) const;
    static Qeen load(const std::filesystem::path& path);

  private:
    Manifest client_manifest_;
    QeenConfig cfg_;
    FlatParams encoder_;
    std::vector<FlatParams> decoder_heads_;
    FlatParams quality_head_;
};

/// One model per row.
Matrix stack_rows(std::span<const FlatParams> models);

/// Min-max normalisation into [0,1]; a constant batch maps to 0.5 everywhere.
std::vector<double> normalize_scores(std::span<const double> scores);

struct QeenSample {
    FlatParams params;
    double mark = 0.0;
};
using QeenCorpus = std::vector<QeenSample>;

struct CorpusConfig {
    std::size_t models = 200;
    /// Generation rounds before the server model is re-initialised; the corpus
    /// then spans several independent training trajectories.
    std::size_t rounds_per_lineage = 5;
    DefectSpec defects;
};

/// Each generation round trains every client for one local round from the
/// current server model, injects the composite defect into a uniformly chosen
/// half, labels each model with its true mark and advances the server by
/// averaging the clean models. Leaves `fed` reset to episode 0.
QeenCorpus generate_corpus(Federation& fed, const CorpusConfig& cfg, std::uint64_t seed);

struct QeenTrainConfig {
    int epochs = 200;
    int batch_size = 32;
    double lr = 1e-3;
    double lambda1 = 0.5;
    double lambda2 = 0.5;
    /// Decoupled weight decay, applied as values *= 1 - lr * weight_decay after each step.
    double weight_decay = 1.0;
};

struct QeenTrainLog {
    std::vector<double> joint;  // one entry per optimisation step
    std::vector<double> l1;
    std::vector<double> l2;
};

/// Adam on lambda1 * l1 + lambda2 * l2. Throws NumericError naming the step if
/// the loss becomes non-finite.
Qeen train_qeen(const QeenCorpus& corpus, const QeenConfig& cfg, const QeenTrainConfig& train, std::uint64_t seed,
                QeenTrainLog* log = nullptr);

}  // namespace fedsac
