#include "fedsac/fedcore.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <numeric>

namespace fedsac {

LocalUpdate local_train(const ClientState& client, const Dataset& data, const FlatParams& global_params,
                        const LocalTrainConfig& cfg, const DefectPlan& plan, std::uint64_t seed) {
    if (client.local_data.empty()) throw ConfigError("client " + std::to_string(client.id) + " has no data");
    LocalUpdate out{global_params, 0.0};
    if (cfg.epochs <= 0) {
        out.loss = evaluate_loss(global_params, data.subset(client.local_data));
        return out;
    }
    const bool defective = plan.is_defective(client.id);
    // Batch order and defect noise draw from separate streams so that a clean
    // client's trajectory does not depend on the defect plan.
    Rng order_rng = make_rng(seed, "local.order");
    Rng defect_rng = make_rng(seed, "local.defect");
    std::vector<std::size_t> order = client.local_data;
    const std::size_t bs =
        std::min<std::size_t>(static_cast<std::size_t>(std::max(cfg.batch_size, 1)), order.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), order_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t len = std::min(bs, order.size() - start);
            Batch batch = data.gather(std::span<const std::size_t>(order).subspan(start, len));
            if (defective) batch = apply_training_defects(batch, plan, defect_rng);
            auto [loss, grads] = loss_and_grad(out.params, batch, LossKind::cross_entropy);
            out.params.values -= cfg.lr * grads.values;
            loss_sum += loss;
            ++batches;
        }
        out.loss = loss_sum / static_cast<double>(batches);
    }
    return out;
}

FlatParams aggregate(std::span<const FlatParams> params_list, const SimplexAction& weights) {
    if (params_list.empty()) throw ShapeError("aggregate needs at least one model");
    if (weights.size() != params_list.size())
        throw ShapeError("weight count " + std::to_string(weights.size()) + " does not match model count " +
                         std::to_string(params_list.size()));
    weights.validate();
    const Manifest& m = params_list.front().manifest;
    FlatParams out(m);
    for (std::size_t i = 0; i < params_list.size(); ++i) {
        if (params_list[i].manifest != m) throw ShapeError("manifest mismatch at model " + std::to_string(i));
        out.values += weights[i] * params_list[i].values;
    }
    return out;
}

SimplexAction fedavg_weights(std::size_t k) { return SimplexAction::uniform(k); }

SimplexAction rule_based_weights(const std::vector<bool>& defect_flags) {
    const auto clean = static_cast<std::size_t>(std::count(defect_flags.begin(), defect_flags.end(), false));
    if (clean == 0) {
        spdlog::warn("rule-based weights: all {} selected models are defective, using uniform weights",
                     defect_flags.size());
        return SimplexAction::uniform(defect_flags.size());
    }
    SimplexAction a{std::vector<double>(defect_flags.size(), 0.0)};
    for (std::size_t i = 0; i < defect_flags.size(); ++i)
        if (!defect_flags[i]) a.weights[i] = 1.0 / static_cast<double>(clean);
    return a;
}

double evaluate(const FlatParams& params, const Dataset& data) {
    if (data.size() == 0) throw ShapeError("evaluate on an empty dataset");
    const Matrix out = forward(params, data.inputs);
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        Eigen::Index arg = 0;
        out.row(i).maxCoeff(&arg);
        if (arg == data.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate_loss(const FlatParams& params, const Dataset& data) {
    Batch b{data.inputs, data.labels};
    return loss_and_grad(params, b, LossKind::cross_entropy).first;
}

// ---------------------------------------------------------------------------

Federation::Federation(const Dataset& train, Partition partition, Dataset validation, Dataset test, Manifest model,
                       FederationConfig cfg, std::uint64_t seed)
    : train_(&train), validation_(std::move(validation)), test_(std::move(test)), manifest_(std::move(model)),
      cfg_(cfg), seed_(seed) {
    validate_manifest(manifest_);
    if (partition.num_clients() != cfg_.clients)
        throw ConfigError("partition has " + std::to_string(partition.num_clients()) + " clients, config says " +
                          std::to_string(cfg_.clients));
    if (cfg_.per_round < 1 || cfg_.per_round > cfg_.clients)
        throw ConfigError("K = " + std::to_string(cfg_.per_round) + " must lie in [1, N = " +
                          std::to_string(cfg_.clients) + "]");
    if (manifest_.front().in_dim != train.feature_dim())
        throw ShapeError("model input width " + std::to_string(manifest_.front().in_dim) +
                         " does not match feature dim " + std::to_string(train.feature_dim()));
    clients_.resize(cfg_.clients);
    for (std::size_t i = 0; i < cfg_.clients; ++i) {
        clients_[i].id = i;
        clients_[i].local_data = std::move(partition.client_indices[i]);
    }
    reset(0);
}

void Federation::reset(std::uint64_t episode) {
    episode_ = episode;
    global_ = init_params(manifest_, derive_seed(seed_, "fed.init", episode));
    for (auto& c : clients_) {
        c.params = global_;
        c.last_local_loss = 0.0;
    }
}

std::vector<std::size_t> Federation::select_clients(std::size_t round) const {
    std::vector<std::size_t> ids(cfg_.clients);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng = make_rng(seed_, "fed.select", episode_, round);
    // Partial Fisher-Yates: the first K entries are a uniform K-subset.
    for (std::size_t i = 0; i < cfg_.per_round; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(cfg_.per_round);
    return ids;
}

RoundUploads Federation::collect(std::size_t round, const DefectPlan& plan) {
    RoundUploads up;
    up.round = round;
    up.selected_ids = select_clients(round);
    for (std::size_t id : up.selected_ids) {
        ClientState& c = clients_[id];
        const auto local_seed = derive_seed(seed_, "fed.local", episode_, round, id);
        LocalUpdate u = local_train(c, *train_, global_, cfg_.local, plan, local_seed);
        c.last_local_loss = u.loss;
        const bool defective = plan.is_defective(id);
        if (defective && plan.has(DefectKind::comm_loss)) {
            Rng comm_rng = make_rng(seed_, "fed.comm", episode_, round, id);
            u.params = perturb_comm(u.params, plan.degree, comm_rng);
        }
        up.params.push_back(std::move(u.params));
        up.local_losses.push_back(u.loss);
        up.defect_flags.push_back(defective);
        up.true_marks.push_back(ground_truth_mark(id, plan).value);
    }
    return up;
}

RoundResult Federation::commit(const RoundUploads& uploads, const SimplexAction& weights) {
    RoundResult r;
    r.selected_ids = uploads.selected_ids;
    r.weights = weights;
    r.global_params = aggregate(uploads.params, weights);
    r.global_accuracy = evaluate(r.global_params, validation_);
    const SimplexAction uniform = fedavg_weights(uploads.params.size());
    if (weights.weights == uniform.weights) {
        r.fedavg_shadow_accuracy = r.global_accuracy;
    } else {
        r.fedavg_shadow_accuracy = evaluate(aggregate(uploads.params, uniform), validation_);
    }
    r.test_accuracy = evaluate(r.global_params, test_);
    global_ = r.global_params;
    for (auto& c : clients_) c.params = global_;
    return r;
}

RoundResult Federation::run_round(std::size_t round, const WeightStrategy& strategy, const DefectPlan& plan) {
    RoundUploads up = collect(round, plan);
    return commit(up, strategy(up));
}

}  // namespace fedsac
