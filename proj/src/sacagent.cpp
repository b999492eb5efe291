#include "fedsac/sacagent.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>

namespace fedsac {

// --- state -----------------------------------------------------------------

Vector DrlState::flatten() const {
    const std::size_t K = client_embeddings.size();
    const auto E = server_embedding.size();
    Vector v(static_cast<Eigen::Index>((K + 1) * static_cast<std::size_t>(E) + 2 * K));
    Eigen::Index pos = 0;
    v.segment(pos, E) = server_embedding;
    pos += E;
    for (const auto& e : client_embeddings) {
        if (e.size() != E) throw ShapeError("client embedding length differs from server embedding");
        v.segment(pos, E) = e;
        pos += E;
    }
    for (double l : local_losses) v[pos++] = l;
    for (double a : prev_action.weights) v[pos++] = a;
    return v;
}

Embedder qeen_embedder(const Qeen& qeen) {
    return [&qeen](const FlatParams& p) { return qeen.encode(p); };
}

Embedder pooled_embedder(int width) {
    if (width < 1) throw ConfigError("pooled embedding width must be positive");
    return [width](const FlatParams& p) {
        Embedding e = Embedding::Zero(width);
        const auto d = static_cast<Eigen::Index>(p.size());
        for (int j = 0; j < width; ++j) {
            const Eigen::Index lo = d * j / width;
            const Eigen::Index hi = std::max(d * (j + 1) / width, lo + 1);
            if (lo < d) e[j] = p.values.segment(lo, std::min(hi, d) - lo).mean();
        }
        return e;
    };
}

DrlState build_state(const Embedder& embed, const FlatParams& global_params, std::span<const FlatParams> uploads,
                     std::span<const double> local_losses, const SimplexAction& prev_action, double loss_clip) {
    if (uploads.size() != local_losses.size() || uploads.size() != prev_action.size())
        throw ShapeError("build_state: uploads, losses and previous action must all have K entries");
    if (!(loss_clip > 0.0)) throw ConfigError("loss_clip must be positive");
    DrlState s;
    s.server_embedding = embed(global_params);
    for (const auto& u : uploads) s.client_embeddings.push_back(embed(u));
    for (double l : local_losses) s.local_losses.push_back(std::clamp(l, 0.0, loss_clip) / loss_clip);
    s.prev_action = prev_action;
    return s;
}

// --- rewards ---------------------------------------------------------------

double reward_r1(double delta, double delta_bar, double target, double kappa) {
    const double r = delta < 0.5 ? std::pow(kappa, delta - delta_bar) - 1.0 : std::pow(kappa, delta - target) - 1.0;
    return std::min(r, 0.0);
}

std::vector<double> quality_targets(std::span<const double> normalized_marks) {
    std::vector<double> q(normalized_marks.size());
    double total = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        q[i] = 1.0 - std::clamp(normalized_marks[i], 0.0, 1.0);
        total += q[i];
    }
    if (total <= 0.0) return SimplexAction::uniform(q.size()).weights;
    for (double& x : q) x /= total;
    return q;
}

double reward_r2(std::span<const double> normalized_marks, const SimplexAction& action) {
    if (normalized_marks.size() != action.size()) throw ShapeError("reward_r2: marks and action lengths differ");
    const std::vector<double> q = quality_targets(normalized_marks);
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) s += (q[i] - action[i]) * (q[i] - action[i]);
    return -s / static_cast<double>(q.size());
}

double reward_r3(const FlatParams& w_prev, const FlatParams& w_next, bool* degenerate) {
    if (w_prev.manifest != w_next.manifest) throw ShapeError("reward_r3: manifests differ");
    const double sa = w_prev.values.squaredNorm(), sb = w_next.values.squaredNorm();
    if (degenerate) *degenerate = false;
    if (sa == 0.0 || sb == 0.0) {
        spdlog::warn("reward_r3: zero parameter vector, cosine undefined");
        if (degenerate) *degenerate = true;
        return -0.5;
    }
    // sqrt(sa * sa) == sa exactly, so identical vectors give cos = 1 exactly.
    const double c = std::clamp(w_prev.values.dot(w_next.values) / std::sqrt(sa * sb), -1.0, 1.0);
    return 0.5 * c - 0.5;
}

double compound_reward(const RewardParts& parts, const std::array<double, 3>& beta) {
    return beta[0] * parts.r1 + beta[1] * parts.r2 + beta[2] * parts.r3;
}

// --- agent -----------------------------------------------------------------

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

Manifest net_manifest(int in, const std::vector<int>& hidden, int out) {
    std::vector<int> widths{in};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(out);
    return mlp_manifest(widths, Activation::relu, Activation::identity);
}

void softmax_row(Eigen::Ref<Vector> z) {
    z.array() -= z.maxCoeff();
    z = z.array().exp().matrix();
    z /= z.sum();
}

constexpr double kSimplexFloor = 1e-6;

// log of the softmax volume factor, prod_i a_i * K, restricted to the simplex.
double simplex_log_det(const Eigen::Ref<const Vector>& a) {
    return (a.array() + kSimplexFloor).log().sum() + std::log(static_cast<double>(a.size()));
}

struct Gathered {
    Matrix states, next_states, actions;
    Vector rewards, not_done, weights;
};

Gathered gather(const SampledBatch& batch, std::size_t k) {
    const auto B = static_cast<Eigen::Index>(batch.transitions.size());
    if (B == 0) throw ShapeError("empty SAC batch");
    const auto sd = batch.transitions.front()->state.size();
    Gathered g;
    g.states.resize(B, sd);
    g.next_states.resize(B, sd);
    g.actions.resize(B, static_cast<Eigen::Index>(k));
    g.rewards.resize(B);
    g.not_done.resize(B);
    g.weights.resize(B);
    for (Eigen::Index i = 0; i < B; ++i) {
        const Transition& t = *batch.transitions[static_cast<std::size_t>(i)];
        if (t.action.size() != k) throw ShapeError("transition action has wrong dimension");
        g.states.row(i) = t.state.transpose();
        g.next_states.row(i) = t.next_state.transpose();
        for (std::size_t j = 0; j < k; ++j) g.actions(i, static_cast<Eigen::Index>(j)) = t.action[j];
        g.rewards[i] = t.reward;
        g.not_done[i] = t.done ? 0.0 : 1.0;
        g.weights[i] = batch.is_weights.empty() ? 1.0 : batch.is_weights[static_cast<std::size_t>(i)];
    }
    return g;
}

// Applies one random slot permutation per row to state, action and next state.
// Layout: server embedding, K client embeddings, K losses, K previous weights.
void permute_slots(Gathered& g, std::size_t k, Rng& rng) {
    const auto K = static_cast<Eigen::Index>(k);
    const Eigen::Index E = (g.states.cols() - 2 * K) / (K + 1);
    std::vector<Eigen::Index> perm(k);
    auto shuffle_row = [&](Eigen::Ref<Eigen::RowVectorXd> row) {
        const Eigen::RowVectorXd src = row;
        for (Eigen::Index j = 0; j < K; ++j) {
            const Eigen::Index from = perm[static_cast<std::size_t>(j)];
            row.segment((j + 1) * E, E) = src.segment((from + 1) * E, E);
            row[(K + 1) * E + j] = src[(K + 1) * E + from];
            row[(K + 1) * E + K + j] = src[(K + 1) * E + K + from];
        }
    };
    for (Eigen::Index i = 0; i < g.states.rows(); ++i) {
        std::iota(perm.begin(), perm.end(), Eigen::Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        shuffle_row(g.states.row(i));
        shuffle_row(g.next_states.row(i));
        const Eigen::RowVectorXd a = g.actions.row(i);
        for (Eigen::Index j = 0; j < K; ++j) g.actions(i, j) = a[perm[static_cast<std::size_t>(j)]];
    }
}

}  // namespace

SacAgent::SacAgent(std::size_t state_dim, std::size_t k, SacConfig cfg, std::uint64_t seed)
    : state_dim_(state_dim), k_(k), cfg_(std::move(cfg)) {
    if (k_ < 1 || state_dim_ < 1) throw ConfigError("SAC needs positive state and action dimensions");
    if (!(cfg_.gamma >= 0.0 && cfg_.gamma <= 1.0)) throw ConfigError("sac.gamma must lie in [0, 1]");
    if (!(cfg_.rho > 0.0 && cfg_.rho < 1.0)) throw ConfigError("sac.rho must lie in (0, 1)");
    if (!(cfg_.init_alpha > 0.0)) throw ConfigError("sac.init_alpha must be positive");
    if (cfg_.permute_slots && (state_dim_ < 2 * k_ || (state_dim_ - 2 * k_) % (k_ + 1) != 0))
        throw ConfigError("sac.permute_slots needs a state of length (K + 1) E + 2 K");
    const int sd = static_cast<int>(state_dim_), K = static_cast<int>(k_);
    actor_ = init_params(net_manifest(sd, cfg_.hidden, 2 * K), derive_seed(seed, "sac.actor"));
    // Zero final layer: mean 0 and log-std init_log_std on every state, so the
    // untrained policy is symmetric across the K slots.
    const std::size_t last = actor_.manifest.size() - 1;
    actor_.weights(last).setZero();
    actor_.bias(last).setZero();
    actor_.bias(last).tail(K).setConstant(cfg_.init_log_std);
    q1_ = init_params(net_manifest(sd + K, cfg_.hidden, 1), derive_seed(seed, "sac.q1"));
    q2_ = init_params(net_manifest(sd + K, cfg_.hidden, 1), derive_seed(seed, "sac.q2"));
    q1_target_ = q1_;
    q2_target_ = q2_;
    log_alpha_ = std::log(cfg_.init_alpha);
    target_entropy_ = std::isnan(cfg_.target_entropy) ? -static_cast<double>(k_) : cfg_.target_entropy;
    init_optimizers();
}

void SacAgent::init_optimizers() {
    actor_opt_ = Adam(actor_.size(), cfg_.actor_lr);
    q1_opt_ = Adam(q1_.size(), cfg_.critic_lr);
    q2_opt_ = Adam(q2_.size(), cfg_.critic_lr);
    alpha_opt_ = Adam(1, cfg_.alpha_lr);
}

SacAgent::PolicySample SacAgent::sample_policy(const Matrix& states, Rng& rng) const {
    const Matrix out = forward(actor_, states);
    const auto K = static_cast<Eigen::Index>(k_);
    std::normal_distribution<double> n01(0.0, 1.0);
    PolicySample s{Matrix(states.rows(), K), Vector(states.rows())};
    for (Eigen::Index i = 0; i < states.rows(); ++i) {
        double lp = 0.0;
        Vector z(K);
        for (Eigen::Index j = 0; j < K; ++j) {
            const double log_std = std::clamp(out(i, K + j), cfg_.log_std_min, cfg_.log_std_max);
            const double eps = n01(rng);
            z[j] = out(i, j) + std::exp(log_std) * eps;
            lp += -0.5 * eps * eps - log_std - kHalfLog2Pi;
        }
        softmax_row(z);
        if (cfg_.simplex_jacobian) lp -= simplex_log_det(z);
        s.actions.row(i) = z.transpose();
        s.log_probs[i] = lp;
    }
    return s;
}

ActResult SacAgent::act(const Vector& state, bool deterministic, Rng& rng) const {
    if (static_cast<std::size_t>(state.size()) != state_dim_)
        throw ShapeError("state length " + std::to_string(state.size()) + " != " + std::to_string(state_dim_));
    Matrix row = state.transpose();
    const Matrix out = forward(actor_, row);
    const auto K = static_cast<Eigen::Index>(k_);
    std::normal_distribution<double> n01(0.0, 1.0);
    ActResult r;
    r.pre_action.resize(K);
    for (Eigen::Index j = 0; j < K; ++j) {
        const double log_std = std::clamp(out(0, K + j), cfg_.log_std_min, cfg_.log_std_max);
        const double eps = deterministic ? 0.0 : n01(rng);
        r.pre_action[j] = out(0, j) + std::exp(log_std) * eps;
        r.log_prob += -0.5 * eps * eps - log_std - kHalfLog2Pi;
    }
    Vector a = r.pre_action;
    softmax_row(a);
    if (cfg_.simplex_jacobian) r.log_prob -= simplex_log_det(a);
    r.action.weights.assign(a.data(), a.data() + a.size());
    return r;
}

Vector SacAgent::policy_std(const Vector& state) const {
    Matrix row = state.transpose();
    const Matrix out = forward(actor_, row);
    const auto K = static_cast<Eigen::Index>(k_);
    Vector s(K);
    for (Eigen::Index j = 0; j < K; ++j) s[j] = std::exp(std::clamp(out(0, K + j), cfg_.log_std_min, cfg_.log_std_max));
    return s;
}

Matrix SacAgent::critic_input(const Matrix& states, const Matrix& actions) const {
    Matrix x(states.rows(), states.cols() + actions.cols());
    x << states, actions;
    return x;
}

double SacAgent::q_value(int which, const Vector& state, const SimplexAction& action) const {
    Matrix s = state.transpose();
    Matrix a(1, static_cast<Eigen::Index>(action.size()));
    for (std::size_t j = 0; j < action.size(); ++j) a(0, static_cast<Eigen::Index>(j)) = action[j];
    return forward(critic(which), critic_input(s, a))(0, 0);
}

CriticStats SacAgent::critic_update(const SampledBatch& batch, Rng& rng) {
    Gathered g = gather(batch, k_);
    if (cfg_.permute_slots) permute_slots(g, k_, rng);
    const auto B = g.states.rows();
    const double alpha = this->alpha();

    const PolicySample next = sample_policy(g.next_states, rng);
    const Matrix next_in = critic_input(g.next_states, next.actions);
    const Matrix tq1 = forward(q1_target_, next_in);
    const Matrix tq2 = forward(q2_target_, next_in);
    Vector target(B);
    for (Eigen::Index i = 0; i < B; ++i) {
        const double soft_v = std::min(tq1(i, 0), tq2(i, 0)) - alpha * next.log_probs[i];
        target[i] = g.rewards[i] + cfg_.gamma * g.not_done[i] * soft_v;
    }

    const Matrix in = critic_input(g.states, g.actions);
    CriticStats stats;
    for (int which = 0; which < 2; ++which) {
        FlatParams& net = which == 0 ? q1_ : q2_;
        Adam& opt = which == 0 ? q1_opt_ : q2_opt_;
        const ForwardTrace tr = forward_trace(net, in);
        Matrix grad_out(B, 1);
        double loss = 0.0;
        auto& td = which == 0 ? stats.td1 : stats.td2;
        td.resize(static_cast<std::size_t>(B));
        for (Eigen::Index i = 0; i < B; ++i) {
            const double err = target[i] - tr.result()(i, 0);
            td[static_cast<std::size_t>(i)] = err;
            loss += g.weights[i] * err * err;
            grad_out(i, 0) = -2.0 * g.weights[i] * err / static_cast<double>(B);
        }
        loss /= static_cast<double>(B);
        if (!std::isfinite(loss)) throw NumericError("critic loss is not finite");
        Vector grad = Vector::Zero(static_cast<Eigen::Index>(net.size()));
        backward(net, tr, grad_out, grad);
        opt.step(net, grad);
        stats.loss += loss;
    }
    return stats;
}

ActorStats SacAgent::actor_update(const SampledBatch& batch, Rng& rng) {
    Gathered g = gather(batch, k_);
    if (cfg_.permute_slots) permute_slots(g, k_, rng);
    const auto B = g.states.rows();
    const auto K = static_cast<Eigen::Index>(k_);
    const double alpha = this->alpha();
    const double invB = 1.0 / static_cast<double>(B);

    const ForwardTrace actor_tr = forward_trace(actor_, g.states);
    const Matrix& out = actor_tr.result();
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix eps(B, K), stdev(B, K), actions(B, K);
    Matrix clamp_mask(B, K);
    Vector log_probs(B);
    for (Eigen::Index i = 0; i < B; ++i) {
        double lp = 0.0;
        Vector z(K);
        for (Eigen::Index j = 0; j < K; ++j) {
            const double raw = out(i, K + j);
            const double log_std = std::clamp(raw, cfg_.log_std_min, cfg_.log_std_max);
            clamp_mask(i, j) = (raw >= cfg_.log_std_min && raw <= cfg_.log_std_max) ? 1.0 : 0.0;
            eps(i, j) = n01(rng);
            stdev(i, j) = std::exp(log_std);
            z[j] = out(i, j) + stdev(i, j) * eps(i, j);
            lp += -0.5 * eps(i, j) * eps(i, j) - log_std - kHalfLog2Pi;
        }
        softmax_row(z);
        if (cfg_.simplex_jacobian) lp -= simplex_log_det(z);
        actions.row(i) = z.transpose();
        log_probs[i] = lp;
    }

    // dQ/da through whichever critic is smaller for each row.
    const Matrix in = critic_input(g.states, actions);
    const ForwardTrace t1 = forward_trace(q1_, in);
    const ForwardTrace t2 = forward_trace(q2_, in);
    Matrix sel1 = Matrix::Zero(B, 1), sel2 = Matrix::Zero(B, 1);
    Vector qmin(B);
    for (Eigen::Index i = 0; i < B; ++i) {
        const bool first = t1.result()(i, 0) <= t2.result()(i, 0);
        qmin[i] = first ? t1.result()(i, 0) : t2.result()(i, 0);
        (first ? sel1 : sel2)(i, 0) = 1.0;
    }
    Vector scratch1 = Vector::Zero(static_cast<Eigen::Index>(q1_.size()));
    Vector scratch2 = Vector::Zero(static_cast<Eigen::Index>(q2_.size()));
    const Matrix dq_din = backward(q1_, t1, sel1, scratch1) + backward(q2_, t2, sel2, scratch2);
    const Matrix dq_da = dq_din.rightCols(K);

    ActorStats stats;
    stats.loss = (alpha * log_probs - qmin).mean();
    stats.entropy = -log_probs.mean();
    stats.alpha = alpha;
    if (!std::isfinite(stats.loss)) throw NumericError("actor loss is not finite");

    Matrix grad_out(B, 2 * K);
    for (Eigen::Index i = 0; i < B; ++i) {
        // dL/da = -dQ/da / B, then through softmax: dz = a * (g - <g, a>).
        const Eigen::RowVectorXd a = actions.row(i);
        Eigen::RowVectorXd ga = -invB * dq_da.row(i);
        if (cfg_.simplex_jacobian) ga.array() -= alpha * invB / (a.array() + kSimplexFloor);
        const Eigen::RowVectorXd gz = a.cwiseProduct((ga.array() - ga.dot(a)).matrix());
        for (Eigen::Index j = 0; j < K; ++j) {
            grad_out(i, j) = gz[j];
            // z = mu + sigma * eps and log pi contains -log sigma.
            // Outside the clamp range only gradients that lead back inside pass.
            const double gl = gz[j] * stdev(i, j) * eps(i, j) - alpha * invB;
            const double raw = out(i, K + j);
            const bool pass = clamp_mask(i, j) > 0.0 || (raw > cfg_.log_std_max && gl > 0.0) ||
                              (raw < cfg_.log_std_min && gl < 0.0);
            grad_out(i, K + j) = pass ? gl : 0.0;
        }
    }
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(actor_.size()));
    backward(actor_, actor_tr, grad_out, grad);
    actor_opt_.step(actor_, grad);

    if (cfg_.auto_alpha) {
        // loss_alpha = -log_alpha * mean(log pi + target_entropy)
        Vector la(1), ga(1);
        la[0] = log_alpha_;
        ga[0] = -(log_probs.array() + target_entropy_).mean();
        alpha_opt_.step(la, ga);
        log_alpha_ = std::clamp(la[0], -20.0, 5.0);
    }
    return stats;
}

void SacAgent::soft_target_update(double rho) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("soft target coefficient must lie in [0, 1]");
    q1_target_.values = rho * q1_target_.values + (1.0 - rho) * q1_.values;
    q2_target_.values = rho * q2_target_.values + (1.0 - rho) * q2_.values;
}

void SacAgent::save(const std::filesystem::path& path, std::uint64_t seed) const {
    nlohmann::json meta = {{"state_dim", state_dim_},
                           {"k", k_},
                           {"hidden", cfg_.hidden},
                           {"gamma", cfg_.gamma},
                           {"rho", cfg_.rho},
                           {"actor_lr", cfg_.actor_lr},
                           {"critic_lr", cfg_.critic_lr},
                           {"alpha_lr", cfg_.alpha_lr},
                           {"auto_alpha", cfg_.auto_alpha},
                           {"log_alpha", log_alpha_},
                           {"target_entropy", target_entropy_},
                           {"log_std_min", cfg_.log_std_min},
                           {"log_std_max", cfg_.log_std_max},
                           {"init_log_std", cfg_.init_log_std},
                           {"simplex_jacobian", cfg_.simplex_jacobian},
                           {"permute_slots", cfg_.permute_slots}};
    Checkpoint ck;
    ck.sections.push_back({"actor", actor_, seed, meta.dump()});
    ck.sections.push_back({"q1", q1_, seed, "{}"});
    ck.sections.push_back({"q2", q2_, seed, "{}"});
    ck.sections.push_back({"q1_target", q1_target_, seed, "{}"});
    ck.sections.push_back({"q2_target", q2_target_, seed, "{}"});
    write_checkpoint(path, ck);
}

SacAgent SacAgent::load(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    const auto& a = ck.at("actor");
    const auto meta = nlohmann::json::parse(a.meta_json);
    SacAgent s;
    s.state_dim_ = meta.at("state_dim").get<std::size_t>();
    s.k_ = meta.at("k").get<std::size_t>();
    s.cfg_.hidden = meta.at("hidden").get<std::vector<int>>();
    s.cfg_.gamma = meta.at("gamma").get<double>();
    s.cfg_.rho = meta.at("rho").get<double>();
    s.cfg_.actor_lr = meta.at("actor_lr").get<double>();
    s.cfg_.critic_lr = meta.at("critic_lr").get<double>();
    s.cfg_.alpha_lr = meta.at("alpha_lr").get<double>();
    s.cfg_.auto_alpha = meta.at("auto_alpha").get<bool>();
    s.log_alpha_ = meta.at("log_alpha").get<double>();
    s.cfg_.init_alpha = std::exp(s.log_alpha_);
    s.target_entropy_ = meta.at("target_entropy").get<double>();
    s.cfg_.target_entropy = s.target_entropy_;
    s.cfg_.log_std_min = meta.at("log_std_min").get<double>();
    s.cfg_.log_std_max = meta.at("log_std_max").get<double>();
    s.cfg_.init_log_std = meta.value("init_log_std", 0.0);
    s.cfg_.simplex_jacobian = meta.value("simplex_jacobian", true);
    s.cfg_.permute_slots = meta.value("permute_slots", false);
    s.actor_ = a.params;
    s.q1_ = ck.at("q1").params;
    s.q2_ = ck.at("q2").params;
    s.q1_target_ = ck.at("q1_target").params;
    s.q2_target_ = ck.at("q2_target").params;
    if (static_cast<std::size_t>(s.actor_.manifest.front().in_dim) != s.state_dim_)
        throw FormatError("SAC checkpoint actor width does not match its state_dim");
    s.init_optimizers();
    return s;
}

// --- episodes --------------------------------------------------------------

namespace {

RewardParts score_round(const RoundResult& res, const FlatParams& w_prev, const RoundUploads& uploads,
                        const AgentView* view, const EpisodeConfig& cfg) {
    RewardParts p;
    p.beta = cfg.beta;
    p.r1 = reward_r1(res.global_accuracy, res.fedavg_shadow_accuracy, cfg.target_accuracy, cfg.kappa);
    if (view && view->quality) {
        std::vector<double> scores;
        for (const auto& u : uploads.params) scores.push_back(view->quality->quality_score(view->quality->encode(u)));
        p.r2 = reward_r2(normalize_scores(scores), res.weights);
    }
    p.r3 = reward_r3(w_prev, res.global_params);
    p.total = compound_reward(p, cfg.beta);
    return p;
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

EpisodeResult run_agent_episode(Federation& fed, const DefectPlan& plan, SacAgent& agent, PrioritizedBuffer* replay,
                                const AgentView& view, const EpisodeConfig& cfg, bool train, std::uint64_t seed) {
    if (train && !replay) throw ConfigError("training episode needs a replay buffer");
    const std::size_t K = fed.config().per_round;
    if (agent.action_dim() != K) throw ConfigError("agent action dimension does not match K");
    Rng act_rng = make_rng(seed, "episode.act");
    Rng update_rng = make_rng(seed, "episode.update");
    const std::size_t total_updates = std::max<std::size_t>(cfg.rounds * cfg.updates_per_round, 1);
    std::size_t update_index = 0;

    EpisodeResult ep;
    SimplexAction prev = SimplexAction::uniform(K);
    RoundUploads uploads = fed.collect(0, plan);
    Vector state =
        build_state(view.embed, fed.global_params(), uploads.params, uploads.local_losses, prev, cfg.loss_clip).flatten();
    double discount = 1.0;

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        const auto start = std::chrono::steady_clock::now();
        const ActResult act = agent.act(state, !train, act_rng);
        act.action.validate();
        const FlatParams w_prev = fed.global_params();
        RoundResult res = fed.commit(uploads, act.action);
        RoundLog log;
        log.round = t;
        log.reward = score_round(res, w_prev, uploads, &view, cfg);
        log.defect_flags = uploads.defect_flags;
        ep.episode_return += discount * log.reward.total;
        discount *= std::isnan(cfg.return_gamma) ? agent.config().gamma : cfg.return_gamma;

        const bool done = t + 1 == cfg.rounds;
        Vector next_state = state;
        RoundUploads next_uploads;
        if (!done) {
            next_uploads = fed.collect(t + 1, plan);
            next_state = build_state(view.embed, fed.global_params(), next_uploads.params, next_uploads.local_losses,
                                     act.action, cfg.loss_clip)
                             .flatten();
        }

        if (train) {
            replay->push({state, act.action, log.reward.total, next_state, done, 1.0});
            for (std::size_t u = 0; u < cfg.updates_per_round; ++u) {
                ++update_index;
                if (replay->size() < cfg.batch_size) continue;
                const SampledBatch batch = replay->sample(cfg.batch_size, update_index, total_updates, update_rng);
                const CriticStats cs = agent.critic_update(batch, update_rng);
                std::vector<double> prios(cs.td1.size());
                for (std::size_t i = 0; i < prios.size(); ++i)
                    prios[i] = priority_from_td(cs.td1[i], cs.td2[i], replay->config().epsilon);
                replay->update_priorities(batch.indices, prios);
                agent.actor_update(batch, update_rng);
                agent.soft_target_update(agent.config().rho);
            }
        }

        log.result = std::move(res);
        log.wall_ms = elapsed_ms(start);
        ep.rounds.push_back(std::move(log));
        state = std::move(next_state);
        uploads = std::move(next_uploads);
        prev = act.action;
    }
    return ep;
}

EpisodeResult run_strategy_episode(Federation& fed, const DefectPlan& plan, const WeightStrategy& strategy,
                                   const AgentView* view, const EpisodeConfig& cfg, double gamma) {
    EpisodeResult ep;
    double discount = 1.0;
    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        const auto start = std::chrono::steady_clock::now();
        RoundUploads uploads = fed.collect(t, plan);
        const FlatParams w_prev = fed.global_params();
        RoundResult res = fed.commit(uploads, strategy(uploads));
        RoundLog log;
        log.round = t;
        log.reward = score_round(res, w_prev, uploads, view, cfg);
        log.defect_flags = uploads.defect_flags;
        ep.episode_return += discount * log.reward.total;
        discount *= gamma;
        log.result = std::move(res);
        log.wall_ms = elapsed_ms(start);
        ep.rounds.push_back(std::move(log));
    }
    return ep;
}

}  // namespace fedsac
