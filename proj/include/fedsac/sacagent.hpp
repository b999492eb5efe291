#pragma once

// Soft actor-critic agent that emits aggregation weights on the simplex, plus
// the MDP glue around it: state construction, the compound reward and the
// per-episode training loop over a Federation.

#include "fedsac/defects.hpp"
#include "fedsac/fedcore.hpp"
#include "fedsac/nncore.hpp"
#include "fedsac/qeen.hpp"
#include "fedsac/replay.hpp"
#include "fedsac/simplex.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <optional>

namespace fedsac {

// --- state -----------------------------------------------------------------

struct DrlState {
    Embedding server_embedding;
    std::vector<Embedding> client_embeddings;
    std::vector<double> local_losses;  // already clipped and scaled to [0, 1]
    SimplexAction prev_action;

    /// (e_g, e_1..e_K, l_1..l_K, a_prev); length (K + 1) * E + 2K.
    Vector flatten() const;
};

using Embedder = std::function<Embedding(const FlatParams&)>;

Embedder qeen_embedder(const Qeen& qeen);
/// Average-pools the flat parameter vector into `width` contiguous chunks.
/// Stand-in for a learned embedding when the agent sees raw parameters.
Embedder pooled_embedder(int width);

DrlState build_state(const Embedder& embed, const FlatParams& global_params, std::span<const FlatParams> uploads,
                     std::span<const double> local_losses, const SimplexAction& prev_action, double loss_clip);

inline std::size_t state_dim(std::size_t k, std::size_t embedding) { return (k + 1) * embedding + 2 * k; }

// --- rewards ---------------------------------------------------------------

struct RewardParts {
    double r1 = 0.0;
    double r2 = 0.0;
    double r3 = 0.0;
    std::array<double, 3> beta{0.5, 0.4, 0.1};
    double total = 0.0;
};

/// Accuracy reward: kappa^(delta - delta_bar) - 1 when delta < 0.5, otherwise
/// kappa^(delta - target) - 1; clamped to (-1, 0].
double reward_r1(double delta, double delta_bar, double target, double kappa);

/// -(1/K) * sum_i (q_i - a_i)^2 with q_i = (1 - nbar_i) / sum_j (1 - nbar_j),
/// the simplex weights implied by the normalised defect scores. If every
/// nbar_i is 1, q is uniform.
double reward_r2(std::span<const double> normalized_marks, const SimplexAction& action);
std::vector<double> quality_targets(std::span<const double> normalized_marks);

/// 0.5 * cos(w_prev, w_next) - 0.5. A zero vector yields -0.5 and sets
/// `degenerate` when provided.
double reward_r3(const FlatParams& w_prev, const FlatParams& w_next, bool* degenerate = nullptr);

double compound_reward(const RewardParts& parts, const std::array<double, 3>& beta);

// --- agent -----------------------------------------------------------------

struct SacConfig {
    std::vector<int> hidden{256, 256};
    double gamma = 0.99;
    double rho = 0.995;  // target <- rho * target + (1 - rho) * online
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    double alpha_lr = 3e-4;
    double init_alpha = 0.01;
    bool auto_alpha = true;
    /// Entropy target; NaN means -K.
    double target_entropy = std::numeric_limits<double>::quiet_NaN();
    double log_std_min = -20.0;
    double log_std_max = 2.0;
    /// Bias of the log-std head at initialisation.
    double init_log_std = 0.0;
    /// Subtract log(K * prod_i a_i) from the Gaussian log-density so that
    /// log pi is a density on the simplex. Off: plain Gaussian density of z.
    bool simplex_jacobian = true;
    /// Relabel the K client slots of each sampled transition by a random
    /// permutation before every update. Rewards are invariant under it.
    bool permute_slots = false;
};

struct ActResult {
    SimplexAction action;
    double log_prob = 0.0;
    Vector pre_action;
};

struct CriticStats {
    double loss = 0.0;
    std::vector<double> td1;
    std::vector<double> td2;
};

struct ActorStats {
    double loss = 0.0;
    double entropy = 0.0;  // batch mean of -log pi
    double alpha = 0.0;
};

class SacAgent {
  public:
    SacAgent() = default;
    SacAgent(std::size_t state_dim, std::size_t k, SacConfig cfg, std::uint64_t seed);

    /// Gaussian pre-action squashed by softmax. log_prob is the Gaussian
    /// density of the pre-action, corrected by the softmax volume factor when
    /// cfg.simplex_jacobian is set.
    ActResult act(const Vector& state, bool deterministic, Rng& rng) const;

    /// Both critics regress to r + gamma (1 - done) (min target Q(s', a') - alpha log pi(a'|s'))
    /// with IS-weighted squared error.
    CriticStats critic_update(const SampledBatch& batch, Rng& rng);
    ActorStats actor_update(const SampledBatch& batch, Rng& rng);
    void soft_target_update(double rho);

    double alpha() const { return std::exp(log_alpha_); }
    double q_value(int which, const Vector& state, const SimplexAction& action) const;
    /// Per-coordinate standard deviation of the pre-action at `state`.
    Vector policy_std(const Vector& state) const;

    std::size_t state_dim() const { return state_dim_; }
    std::size_t action_dim() const { return k_; }
    const SacConfig& config() const { return cfg_; }
    const FlatParams& actor() const { return actor_; }
    const FlatParams& critic(int which) const { return which == 0 ? q1_ : q2_; }
    const FlatParams& target_critic(int which) const { return which == 0 ? q1_target_ : q2_target_; }
    FlatParams& critic(int which) { return which == 0 ? q1_ : q2_; }
    FlatParams& target_critic(int which) { return which == 0 ? q1_target_ : q2_target_; }

    void save(const std::filesystem::path& path, std::uint64_t seed = 0) const;
    static SacAgent load(const std::filesystem::path& path);

  private:
    struct PolicySample {
        Matrix actions;
        Vector log_probs;
    };
    PolicySample sample_policy(const Matrix& states, Rng& rng) const;
    Matrix critic_input(const Matrix& states, const Matrix& actions) const;
    void init_optimizers();

    std::size_t state_dim_ = 0;
    std::size_t k_ = 0;
    SacConfig cfg_;
    double log_alpha_ = 0.0;
    double target_entropy_ = 0.0;
    FlatParams actor_;
    FlatParams q1_, q2_, q1_target_, q2_target_;
    Adam actor_opt_, q1_opt_, q2_opt_, alpha_opt_;
};

// --- episodes --------------------------------------------------------------

struct EpisodeConfig {
    std::size_t rounds = 50;
    double kappa = 64.0;
    double target_accuracy = 0.95;
    std::array<double, 3> beta{0.5, 0.4, 0.1};
    double loss_clip = 5.0;
    std::size_t updates_per_round = 1;
    std::size_t batch_size = 64;
    /// Discount for the reported return G; NaN uses the agent's gamma.
    double return_gamma = std::numeric_limits<double>::quiet_NaN();
};

struct RoundLog {
    std::size_t round = 0;
    RoundResult result;
    RewardParts reward;
    std::vector<bool> defect_flags;
    double wall_ms = 0.0;
};

struct EpisodeResult {
    double episode_return = 0.0;  // G, discounted with the agent's gamma
    std::vector<RoundLog> rounds;
    double final_accuracy() const { return rounds.empty() ? 0.0 : rounds.back().result.test_accuracy; }
};

/// What the agent sees and how r2 is scored. `quality` may be null, in which
/// case r2 is reported as 0 and should carry beta_2 = 0.
struct AgentView {
    Embedder embed;
    const Qeen* quality = nullptr;
};

/// One FL episode driven by the agent. With `train` set, every round's
/// transition is pushed to `replay` and followed by updates_per_round gradient
/// updates (once the buffer holds a full batch). Otherwise actions are
/// deterministic and nothing is learned.
EpisodeResult run_agent_episode(Federation& fed, const DefectPlan& plan, SacAgent& agent, PrioritizedBuffer* replay,
                                const AgentView& view, const EpisodeConfig& cfg, bool train, std::uint64_t seed);

/// Baseline episode with a fixed weight rule; rewards r1 and r3 are still
/// computed so that returns are comparable (r2 needs `quality`).
EpisodeResult run_strategy_episode(Federation& fed, const DefectPlan& plan, const WeightStrategy& strategy,
                                   const AgentView* view, const EpisodeConfig& cfg, double gamma);

}  // namespace fedsac
