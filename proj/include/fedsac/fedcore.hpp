#pragma once

#include "fedsac/data.hpp"
#include "fedsac/defects.hpp"
#include "fedsac/nncore.hpp"
#include "fedsac/simplex.hpp"

#include <functional>
#include <vector>

namespace fedsac {

struct LocalTrainConfig {
    int epochs = 1;
    int batch_size = 32;
    double lr = 0.05;
};

struct ClientState {
    std::size_t id = 0;
    std::vector<std::size_t> local_data;
    FlatParams params;
    double last_local_loss = 0.0;
};

struct LocalUpdate {
    FlatParams params;
    double loss = 0.0;
};

/// SGD on the client's shard starting from `global_params`. If the client is
/// defective under `plan`, each batch is contaminated and/or label-shuffled.
/// Returns the mean batch loss of the final epoch; with epochs == 0 the
/// parameters come back unchanged and the loss is the clean evaluation loss.
LocalUpdate local_train(const ClientState& client, const Dataset& data, const FlatParams& global_params,
                        const LocalTrainConfig& cfg, const DefectPlan& plan, std::uint64_t seed);

/// Weighted sum of parameter vectors.
FlatParams aggregate(std::span<const FlatParams> params_list, const SimplexAction& weights);

SimplexAction fedavg_weights(std::size_t k);

/// 1/(K-M) on clean entries, 0 on defective ones. Falls back to uniform (and
/// logs a warning) when every entry is defective.
SimplexAction rule_based_weights(const std::vector<bool>& defect_flags);

/// Fraction of argmax-correct predictions.
double evaluate(const FlatParams& params, const Dataset& data);
double evaluate_loss(const FlatParams& params, const Dataset& data);

/// The K uploads of one round, before the server picks weights.
struct RoundUploads {
    std::size_t round = 0;
    std::vector<std::size_t> selected_ids;
    std::vector<FlatParams> params;
    std::vector<double> local_losses;
    std::vector<bool> defect_flags;
    std::vector<double> true_marks;
};

struct RoundResult {
    FlatParams global_params;
    std::vector<std::size_t> selected_ids;
    SimplexAction weights;
    double global_accuracy = 0.0;         // delta, on the validation set
    double fedavg_shadow_accuracy = 0.0;  // delta-bar, uniform weights over the same uploads
    double test_accuracy = 0.0;
};

struct FederationConfig {
    std::size_t clients = 100;
    std::size_t per_round = 10;
    LocalTrainConfig local;
};

using WeightStrategy = std::function<SimplexAction(const RoundUploads&)>;

/// Round engine over a fixed client partition. The server model is reset per
/// episode; each round selects K clients, trains them, aggregates with the
/// given weights and broadcasts the result.
class Federation {
  public:
    Federation(const Dataset& train, Partition partition, Dataset validation, Dataset test, Manifest model,
               FederationConfig cfg, std::uint64_t seed);

    /// Fresh global initialisation for an episode.
    void reset(std::uint64_t episode);

    RoundUploads collect(std::size_t round, const DefectPlan& plan);
    RoundResult commit(const RoundUploads& uploads, const SimplexAction& weights);
    RoundResult run_round(std::size_t round, const WeightStrategy& strategy, const DefectPlan& plan);

    /// K ids sampled uniformly without replacement for (episode, round).
    std::vector<std::size_t> select_clients(std::size_t round) const;

    const FlatParams& global_params() const { return global_; }
    const std::vector<ClientState>& clients() const { return clients_; }
    const FederationConfig& config() const { return cfg_; }
    const Manifest& model_manifest() const { return manifest_; }
    const Dataset& train_data() const { return *train_; }
    const Dataset& validation_data() const { return validation_; }
    const Dataset& test_data() const { return test_; }
    std::uint64_t episode() const { return episode_; }
    std::uint64_t seed() const { return seed_; }

  private:
    const Dataset* train_;
    Dataset validation_;
    Dataset test_;
    Manifest manifest_;
    FederationConfig cfg_;
    std::uint64_t seed_;
    std::uint64_t episode_ = 0;
    FlatParams global_;
    std::vector<ClientState> clients_;
};

}  // namespace fedsac
