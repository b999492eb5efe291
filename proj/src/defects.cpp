#include "fedsac/defects.hpp"

#include <algorithm>
#include <numeric>

namespace fedsac {

std::string to_string(DefectKind k) {
    switch (k) {
        case DefectKind::data_contamination: return "data_contamination";
        case DefectKind::comm_loss: return "comm_loss";
        case DefectKind::label_shuffle: return "label_shuffle";
    }
    return "?";
}

DefectKind defect_kind_from_string(std::string_view s) {
    if (s == "data_contamination") return DefectKind::data_contamination;
    if (s == "comm_loss") return DefectKind::comm_loss;
    if (s == "label_shuffle") return DefectKind::label_shuffle;
    throw ConfigError("unknown defect kind '" + std::string(s) + "'");
}

DefectPlan draw_plan(const DefectSpec& spec, std::size_t clients, std::uint64_t episode) {
    if (spec.m > clients)
        throw ConfigError("defect.m = " + std::to_string(spec.m) + " exceeds client count " + std::to_string(clients));
    if (spec.degree < 0.0) throw ConfigError("defect.degree must be non-negative");
    if (spec.m > 0 && spec.kinds.empty()) throw ConfigError("defect.kinds is empty while defect.m > 0");
    DefectPlan plan;
    plan.degree = spec.degree;
    plan.kinds = spec.kinds;
    plan.seed = derive_seed(spec.seed, "defects.plan", episode);
    std::vector<std::size_t> ids(clients);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(plan.seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    plan.defective_clients.insert(ids.begin(), ids.begin() + static_cast<long>(spec.m));
    return plan;
}

Batch contaminate_batch(const Batch& batch, double degree, Rng& rng) {
    Batch out = batch;
    if (degree == 0.0) return out;
    std::normal_distribution<double> g(0.0, 1.0);
    for (Eigen::Index i = 0; i < out.inputs.size(); ++i) {
        double& p = out.inputs.data()[i];
        p = std::clamp(p + g(rng) * degree, 0.0, 1.0);
    }
    return out;
}

FlatParams perturb_comm(const FlatParams& params, double degree, Rng& rng) {
    const std::size_t L = params.manifest.size();
    if (L < 2) throw ShapeError("communication-loss defect needs at least two layers, got " + std::to_string(L));
    FlatParams out = params;
    if (degree == 0.0) return out;
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto i = static_cast<Eigen::Index>(params.layer_offset(L - 2)); i < out.values.size(); ++i)
        out.values[i] += g(rng) * degree;
    return out;
}

ShuffledBatch shuffle_labels(const Batch& batch, Rng& rng) {
    ShuffledBatch out{batch, false};
    if (batch.size() < 2) {
        out.skipped = true;
        return out;
    }
    std::shuffle(out.batch.labels.begin(), out.batch.labels.end(), rng);
    return out;
}

QualityMark ground_truth_mark(std::size_t client, const DefectPlan& plan) {
    return {plan.is_defective(client) ? plan.degree : 0.0};
}

Batch apply_training_defects(const Batch& batch, const DefectPlan& plan, Rng& rng) {
    Batch out = plan.has(DefectKind::data_contamination) ? contaminate_batch(batch, plan.degree, rng) : batch;
    if (plan.has(DefectKind::label_shuffle)) out = shuffle_labels(out, rng).batch;
    return out;
}

}  // namespace fedsac
