#pragma once

#include "fedsac/common.hpp"
#include "fedsac/nncore.hpp"

#include <set>
#include <string>
#include <vector>

namespace fedsac {

enum class DefectKind { data_contamination, comm_loss, label_shuffle };

std::string to_string(DefectKind k);
DefectKind defect_kind_from_string(std::string_view s);

/// Config-level description: how many clients, how badly, which kinds.
struct DefectSpec {
    std::size_t m = 0;
    double degree = 0.0;
    std::set<DefectKind> kinds{DefectKind::data_contamination, DefectKind::comm_loss, DefectKind::label_shuffle};
    std::uint64_t seed = 0;
};

/// A concrete draw of defective clients, fixed for one episode.
struct DefectPlan {
    std::set<std::size_t> defective_clients;
    double degree = 0.0;
    std::set<DefectKind> kinds;
    std::uint64_t seed = 0;

    bool is_defective(std::size_t client) const { return defective_clients.contains(client); }
    bool has(DefectKind k) const { return kinds.contains(k); }
    static DefectPlan none() { return {}; }
};

/// Draws spec.m distinct clients out of `clients` for the given episode.
DefectPlan draw_plan(const DefectSpec& spec, std::size_t clients, std::uint64_t episode);

struct QualityMark {
    double value = 0.0;
};

/// p_out = clip(p_in + g * degree, 0, 1), g ~ N(0,1) per pixel.
Batch contaminate_batch(const Batch& batch, double degree, Rng& rng);

/// Adds g * degree (g ~ N(0,1)) to every parameter of the final two layers.
FlatParams perturb_comm(const FlatParams& params, double degree, Rng& rng);

struct ShuffledBatch {
    Batch batch;
    bool skipped = false;  // set when B < 2 and nothing was shuffled
};

/// Uniform random permutation of the labels; inputs are untouched.
ShuffledBatch shuffle_labels(const Batch& batch, Rng& rng);

QualityMark ground_truth_mark(std::size_t client, const DefectPlan& plan);

/// Applies the training-time defects (contamination, then label shuffling) of
/// `plan` to one local batch of a defective client.
Batch apply_training_defects(const Batch& batch, const DefectPlan& plan, Rng& rng);

}  // namespace fedsac
