// Acceptance suite: one PASS/FAIL line per criterion. Exit status 1 when a
// hard criterion fails; criterion 12 is reported only.

#include "fedsac/expcli.hpp"

#include <CLI11.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <random>

using namespace fedsac;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
    bool hard = true;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Vector normal_vector(Eigen::Index n, Rng& rng, double sigma = 1.0) {
    std::normal_distribution<double> g(0.0, sigma);
    Vector v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

FlatParams random_params(const Manifest& m, Rng& rng, double sigma = 1.0) {
    FlatParams p(m);
    p.values = normal_vector(static_cast<Eigen::Index>(param_count(m)), rng, sigma);
    return p;
}

// 1 ---------------------------------------------------------------------------

Outcome fedavg_equivalence() {
    Rng rng(101);
    std::uniform_int_distribution<int> kd(1, 10), width(1, 12);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const Manifest m = mlp_manifest({width(rng), width(rng), width(rng)}, Activation::relu, Activation::identity);
        const int K = kd(rng);
        std::vector<FlatParams> ps;
        Vector mean = Vector::Zero(static_cast<Eigen::Index>(param_count(m)));
        for (int i = 0; i < K; ++i) {
            ps.push_back(random_params(m, rng, 3.0));
            mean += ps.back().values;
        }
        mean /= K;
        const FlatParams agg = aggregate(ps, fedavg_weights(static_cast<std::size_t>(K)));
        worst = std::max(worst, (agg.values - mean).cwiseAbs().maxCoeff());
    }
    return {worst <= 1e-12, fmt::format("100 sets, max |aggregate - mean| = {:.3g}", worst)};
}

// 2 ---------------------------------------------------------------------------

Outcome gradient_oracle() {
    const Activation acts[] = {Activation::relu, Activation::tanh, Activation::identity};
    double worst = 0.0;
    std::size_t largest = 0;
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(2000 + seed);
        std::uniform_int_distribution<int> width(2, 8);
        const int in = width(rng), h = width(rng), out = width(rng);
        const Activation hidden = acts[seed % 3];
        const Manifest m =
            mlp_manifest({in, h, h, out}, hidden, seed % 2 ? Activation::softmax : Activation::identity);
        largest = std::max(largest, param_count(m));
        FlatParams p = random_params(m, rng, 0.7);
        auto margin = [&](const Matrix& x) {
            const ForwardTrace t = forward_trace(p, x);
            double mg = 1.0;
            for (std::size_t k = 0; k + 1 < m.size(); ++k) {
                const Matrix z = (t.inputs[k] * p.weights(k).transpose()).rowwise() + p.bias(k).transpose();
                mg = std::min(mg, z.cwiseAbs().minCoeff());
            }
            return mg;
        };
        Batch b;
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        do {
            b.inputs.resize(6, in);
            for (Eigen::Index i = 0; i < b.inputs.size(); ++i) b.inputs.data()[i] = u(rng);
        } while (hidden == Activation::relu && margin(b.inputs) < 1e-3);
        for (int i = 0; i < 6; ++i) b.labels.push_back(std::uniform_int_distribution<int>(0, out - 1)(rng));
        for (LossKind kind : {LossKind::cross_entropy, LossKind::mse}) {
            const Vector g = loss_and_grad(p, b, kind).second.values;
            for (Eigen::Index i = 0; i < p.values.size(); ++i) {
                const double eps = 1e-4, keep = p.values[i];
                p.values[i] = keep + eps;
                const double up = loss_and_grad(p, b, kind).first;
                p.values[i] = keep - eps;
                const double down = loss_and_grad(p, b, kind).first;
                p.values[i] = keep;
                const double fd = (up - down) / (2 * eps);
                if (std::abs(fd) < 1e-7 && std::abs(g[i]) < 1e-7) continue;
                worst = std::max(worst, std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), 1e-6}));
            }
        }
    }
    return {worst < 1e-4 && largest <= 500,
            fmt::format("20 nets (<= {} params), worst relative error {:.3g}", largest, worst)};
}

// 3 ---------------------------------------------------------------------------

Outcome reward_bounds() {
    Rng rng(303);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Manifest m = mlp_manifest({4, 3}, Activation::identity, Activation::identity);
    int bad = 0;
    for (int i = 0; i < 10000; ++i) {
        const double r1 = reward_r1(u(rng), u(rng), 0.5 + 0.5 * u(rng), 64.0);
        std::vector<double> nbar(5);
        for (auto& x : nbar) x = u(rng);
        nbar = normalize_scores(nbar);
        Vector a = normal_vector(5, rng, 3.0).array().exp();
        a /= a.sum();
        const double r2 = reward_r2(nbar, SimplexAction{{a.data(), a.data() + 5}});
        const double r3 = reward_r3(random_params(m, rng), random_params(m, rng));
        if (!(r1 > -1.0 && r1 <= 0.0) || !(r2 >= -1.0 && r2 <= 0.0) || !(r3 >= -1.0 && r3 <= 0.0)) ++bad;
    }
    const FlatParams w = random_params(m, rng);
    FlatParams x(m), y(m);
    x.values.setZero();
    y.values.setZero();
    x.values[0] = 2.0;
    y.values[1] = 3.0;
    const double same = reward_r3(w, w), ortho = reward_r3(x, y), at_target = reward_r1(0.9, 0.2, 0.9, 64.0);
    const bool ok = bad == 0 && same == 0.0 && ortho == -0.5 && at_target == 0.0;
    return {ok, fmt::format("{} of 10^4 out of range; r3(w,w) = {}, r3(orthogonal) = {}, r1(delta = target) = {}", bad,
                            same, ortho, at_target)};
}

// 4 ---------------------------------------------------------------------------

Outcome per_oracle() {
    const std::vector<double> p{1, 1, 2, 4, 1, 2, 1, 8};
    PrioritizedBuffer b(BufferConfig{100, 1.0, 1, 1.0, 1.0, 1e-6});
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < p.size(); ++i) {
        Transition t;
        t.state = Vector::Zero(1);
        t.next_state = Vector::Zero(1);
        t.action = SimplexAction::uniform(1);
        ids.push_back(b.push(t));
    }
    b.update_priorities(ids, p);
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    std::vector<double> counts(p.size(), 0.0);
    Rng rng(404);
    std::size_t drawn = 0;
    while (drawn < 100000) {
        const SampledBatch s = b.sample_window(b.size(), b.size(), rng);
        for (auto id : s.indices) {
            if (drawn == 100000) break;
            counts[id - ids.front()] += 1;
            ++drawn;
        }
    }
    double stat = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double e = 1e5 * p[i] / total;
        stat += (counts[i] - e) * (counts[i] - e) / e;
    }
    boost::math::chi_squared dist(static_cast<double>(p.size() - 1));
    const double pval = boost::math::cdf(boost::math::complement(dist, stat));
    return {pval > 0.01, fmt::format("10^5 draws, chi-square {:.2f} on 7 dof, p = {:.3f}", stat, pval)};
}

// 5 ---------------------------------------------------------------------------

Outcome ere_window_check() {
    int violations = 0;
    for (double eta : {0.9, 0.99, 0.996, 1.0}) {
        const BufferConfig cfg{8000, eta, 500, 0.6, 0.6, 1e-3};
        std::size_t prev = std::numeric_limits<std::size_t>::max();
        for (std::size_t t = 1; t <= 1000; ++t) {
            const std::size_t c = ere_window(cfg, t, 1000, 100000);
            if (c > prev || c < cfg.c_min || (eta == 1.0 && c != cfg.capacity)) ++violations;
            prev = c;
        }
    }
    return {violations == 0, fmt::format("eta in {{0.9, 0.99, 0.996, 1}}, t in [1, 1000]: {} violations", violations)};
}

// 6 ---------------------------------------------------------------------------

Outcome simplex_guarantee() {
    SacConfig c;
    c.hidden = {32, 32};
    c.init_log_std = c.log_std_max;
    int bad = 0;
    double worst = 0.0;
    for (int k : {2, 4, 10}) {
        const auto sd = state_dim(static_cast<std::size_t>(k), 8);
        SacAgent agent(sd, static_cast<std::size_t>(k), c, static_cast<std::uint64_t>(k));
        Rng rng(600 + k);
        for (int i = 0; i < 3334; ++i) {
            const Vector s = normal_vector(static_cast<Eigen::Index>(sd), rng, 5.0);
            const ActResult r = agent.act(s, i % 10 == 0, rng);
            const double sum = std::accumulate(r.action.weights.begin(), r.action.weights.end(), 0.0);
            worst = std::max(worst, std::abs(sum - 1.0));
            if (std::abs(sum - 1.0) > 1e-9) ++bad;
            for (double w : r.action.weights)
                if (!(w >= 0.0 && w <= 1.0)) ++bad;
        }
    }
    return {bad == 0, fmt::format("10002 actions for K in {{2, 4, 10}}, max |sum - 1| = {:.2g}, {} violations",
                                  worst, bad)};
}

// 7 ---------------------------------------------------------------------------

Outcome defect_statistics() {
    std::string detail;
    bool ok = true;
    const Manifest m = mlp_manifest({10, 100, 100}, Activation::relu, Activation::identity);
    const FlatParams zero(m);
    for (double dn : {0.1, 0.5, 0.9}) {
        Rng r(static_cast<std::uint64_t>(700 + dn * 10));
        const Vector d = perturb_comm(zero, dn, r).values;
        const double mu = d.mean();
        const double sd = std::sqrt((d.array() - mu).square().sum() / static_cast<double>(d.size() - 1));
        ok = ok && std::abs(sd / dn - 1.0) <= 0.05;
        detail += fmt::format("std {:.4f} at d_N {}; ", sd, dn);
    }

    Rng rng(707);
    Batch b;
    b.inputs = Matrix::Zero(500, 3);
    for (int i = 0; i < 500; ++i) b.labels.push_back(i % 7);
    const ShuffledBatch s = shuffle_labels(b, rng);
    std::vector<int> before = b.labels, after = s.batch.labels;
    std::sort(before.begin(), before.end());
    std::sort(after.begin(), after.end());
    const bool multiset = before == after && s.batch.labels != b.labels;
    ok = ok && multiset;
    detail += fmt::format("label multiset kept: {}; ", multiset ? "yes" : "no");

    const Dataset all = synth_dataset(4, 60, 8, 0.2, 7);
    auto [train, val] = split_holdout(all, 40, 8);
    const Partition part = partition_iid(train, 8, 9);
    const Manifest cm = mlp_manifest({8, 6, 4}, Activation::relu, Activation::identity);
    Federation fed(train, part, val, val, cm, FederationConfig{8, 8, {1, 8, 0.1}}, 10);
    const DefectSpec spec{3, 0.7, {DefectKind::data_contamination, DefectKind::comm_loss, DefectKind::label_shuffle},
                          11};
    int mismatched = 0, defective = 0;
    for (std::size_t round = 0; round < 3; ++round) {
        const DefectPlan plan = draw_plan(spec, 8, round);
        fed.reset(round);
        const RoundUploads clean = fed.collect(0, DefectPlan::none());
        fed.reset(round);
        const RoundUploads dirty = fed.collect(0, plan);
        for (std::size_t i = 0; i < clean.params.size(); ++i) {
            if (plan.is_defective(dirty.selected_ids[i])) {
                ++defective;
                continue;
            }
            if (std::memcmp(clean.params[i].values.data(), dirty.params[i].values.data(),
                            sizeof(double) * clean.params[i].size()) != 0)
                ++mismatched;
        }
    }
    ok = ok && mismatched == 0 && defective == 9;
    detail += fmt::format("clean clients differing from the defect-free run: {}", mismatched);
    return {ok, detail};
}

// shared configs ------------------------------------------------------------------

ExperimentConfig tiny_config(std::uint64_t seed) {
    ExperimentConfig c;
    c.seed = seed;
    c.clients = 10;
    c.per_round = 4;
    c.defect_m = 2;
    c.defect_degree = 0.5;
    c.rounds = 20;
    c.episodes = 60;
    c.sac.hidden = {64, 64};
    c.sac.actor_lr = c.sac.critic_lr = 1e-3;
    c.sac.gamma = 0.0;
    c.return_gamma = 0.99;
    c.sac.permute_slots = true;
    c.updates_per_round = 8;
    c.output_dir = "";
    return c;
}

// 8 ---------------------------------------------------------------------------

Outcome defect_collapse() {
    std::map<double, double> fedavg, rule;
    for (double dn : {0.1, 0.5, 0.9}) {
        std::vector<double> fa, rb;
        for (std::uint64_t seed : {1, 2, 3}) {
            ExperimentConfig c;
            c.seed = seed;
            c.clients = 20;
            c.per_round = 5;
            c.defect_m = 4;
            c.defect_degree = dn;
            c.rounds = 30;
            c.repeats = 1;
            auto env = make_environment(c);
            fa.push_back(run_strategy(c, *env, Strategy::fedavg, nullptr, nullptr).acc_avg());
            rb.push_back(run_strategy(c, *env, Strategy::rule_based, nullptr, nullptr).acc_avg());
        }
        fedavg[dn] = mean(fa);
        rule[dn] = mean(rb);
    }
    const double gap = rule[0.9] - fedavg[0.9];
    const bool monotone = fedavg[0.5] <= fedavg[0.1] + 0.03 && fedavg[0.9] <= fedavg[0.5] + 0.03;
    return {gap >= 0.30 && monotone,
            fmt::format("FedAvg {:.3f}/{:.3f}/{:.3f} at d_N 0.1/0.5/0.9, rule-based {:.3f} at 0.9 (gap {:.1f} points)",
                        fedavg[0.1], fedavg[0.5], fedavg[0.9], rule[0.9], 100 * gap)};
}

// 9 ---------------------------------------------------------------------------

Outcome defectless_baseline(const std::filesystem::path& mnist) {
    ExperimentConfig c;
    c.dataset = "idx";
    c.train_images = mnist / "train-images-idx3-ubyte";
    c.train_labels = mnist / "train-labels-idx1-ubyte";
    c.test_images = mnist / "t10k-images-idx3-ubyte";
    c.test_labels = mnist / "t10k-labels-idx1-ubyte";
    c.validation_size = 200;
    c.clients = 20;
    c.per_round = 5;
    c.defect_m = 0;
    c.rounds = 50;
    c.repeats = 3;
    c.local = {2, 32, 0.1};
    c.episodes = 4;
    c.corpus_models = 100;
    c.qeen_train.epochs = 50;
    auto env = make_environment(c);
    const RunSummary fa = run_strategy(c, *env, Strategy::fedavg, nullptr, nullptr);
    const TrainResult tr = train_agent(c, *env, AgentVariant::full);
    const RunSummary ds = run_strategy(c, *env, Strategy::dearfsac, &*tr.qeen, &tr.agent);
    const double diff = ds.acc_avg() - fa.acc_avg();
    return {fa.acc_avg() >= 0.90 && std::abs(diff) <= 0.02,
            fmt::format("{} train samples, FedAvg {:.4f}, DearFSAC {:.4f} ({:+.1f} points) after {} episodes",
                        env->train.size(), fa.acc_avg(), ds.acc_avg(), 100 * diff, c.episodes)};
}

// 10 --------------------------------------------------------------------------

Outcome quality_separation() {
    ExperimentConfig c = tiny_config(1);
    auto env = make_environment(c);
    CorpusConfig cc;
    cc.models = 200;
    cc.rounds_per_lineage = c.corpus_rounds_per_lineage;
    cc.defects = c.defect_spec();
    const QeenCorpus corpus = generate_corpus(*env->fed, cc, derive_seed(c.seed, "corpus"));
    const Qeen q = train_qeen(corpus, c.qeen, c.qeen_train, derive_seed(c.seed, "qeen"));
    cc.models = 40;
    const QeenCorpus fresh = generate_corpus(*env->fed, cc, derive_seed(c.seed, "corpus.fresh"));
    std::vector<double> score;
    std::vector<bool> defective;
    for (const auto& s : fresh) {
        score.push_back(q.quality_score(q.encode(s.params)));
        defective.push_back(s.mark > 0.0);
    }
    const auto n_def = std::count(defective.begin(), defective.end(), true);
    const double auc = roc_auc(score, defective);
    return {auc >= 0.9, fmt::format("corpus 200 models, fresh 40 ({} defective), AUC {:.4f}", n_def, auc)};
}

// 11 --------------------------------------------------------------------------

double window_mean(const std::vector<EpisodeCurvePoint>& curve, std::size_t from, std::size_t n, bool common) {
    double s = 0.0;
    for (std::size_t i = from; i < from + n; ++i) s += common ? curve[i].g_common : curve[i].g;
    return s / static_cast<double>(n);
}

Outcome drl_signal() {
    ExperimentConfig c = tiny_config(1);
    c.repeats = 5;
    auto env = make_environment(c);
    const TrainResult tr = train_agent(c, *env, AgentVariant::full);
    auto rise = [&](auto member) {
        std::vector<double> first, last;
        for (std::size_t i = 0; i < 10; ++i) {
            first.push_back(tr.curve[i].*member);
            last.push_back(tr.curve[tr.curve.size() - 10 + i].*member);
        }
        return std::array<double, 3>{mean(first), stddev(first), mean(last)};
    };
    const auto train_g = rise(&EpisodeCurvePoint::g);
    const auto eval_g = rise(&EpisodeCurvePoint::g_eval);
    const RunSummary fa = run_strategy(c, *env, Strategy::fedavg, nullptr, nullptr);
    const RunSummary ds = run_strategy(c, *env, Strategy::dearfsac, &*tr.qeen, &tr.agent);
    const bool rises = eval_g[2] - eval_g[0] > 2.0 * eval_g[1];
    const bool beats = ds.acc_avg() - fa.acc_avg() >= 0.10;
    return {rises && beats,
            fmt::format("policy G first-10 {:.3f} (std {:.3f}), last-10 {:.3f}; training-episode G {:.3f} (std {:.3f}) "
                        "-> {:.3f}; final accuracy DearFSAC {:.3f} vs FedAvg {:.3f} over {} evaluation episodes",
                        eval_g[0], eval_g[1], eval_g[2], train_g[0], train_g[1], train_g[2], ds.acc_avg(),
                        fa.acc_avg(), c.repeats)};
}

// 12 --------------------------------------------------------------------------

Outcome ablation_ordering() {
    std::vector<std::string> parts;
    int violations = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        ExperimentConfig c = tiny_config(seed);
        auto env = make_environment(c);
        const auto variants = run_ablation(c, *env);
        double g[3];
        for (int v = 0; v < 3; ++v) g[v] = window_mean(variants[v].curve, variants[v].curve.size() - 10, 10, true);
        if (!(g[0] >= g[1])) ++violations;
        if (!(g[1] >= g[2])) ++violations;
        parts.push_back(fmt::format("seed {}: {:.3f} / {:.3f} / {:.3f}", seed, g[0], g[1], g[2]));
    }
    std::string detail = "final-10 G_common full / embedding / original: ";
    for (std::size_t i = 0; i < parts.size(); ++i) detail += (i ? "; " : "") + parts[i];
    detail += fmt::format("; {} ordering violations", violations);
    return {violations == 0, detail, false};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::vector<int> only;
    std::string mnist = FEDSAC_MNIST_DIR;
    app.add_option("criteria", only, "criterion numbers to run (default: all)");
    app.add_option("--mnist", mnist, "directory holding the MNIST subset in IDX format");
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::warn);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> all{
        {"fedavg equivalence", fedavg_equivalence},
        {"gradient oracle", gradient_oracle},
        {"reward bounds and identities", reward_bounds},
        {"prioritized sampling oracle", per_oracle},
        {"recency window", ere_window_check},
        {"simplex guarantee", simplex_guarantee},
        {"defect injection statistics", defect_statistics},
        {"defect collapse trend", defect_collapse},
        {"defectless baseline", [&] { return defectless_baseline(mnist); }},
        {"quality head separation", quality_separation},
        {"learning signal", drl_signal},
        {"ablation ordering", ablation_ordering},
    };
    if (only.empty()) {
        only.resize(all.size());
        std::iota(only.begin(), only.end(), 1);
    }
    bool failed = false;
    for (int id : only) {
        if (id < 1 || id > static_cast<int>(all.size())) {
            fmt::print(stderr, "no criterion {}\n", id);
            return 2;
        }
        const auto& [name, check] = all[static_cast<std::size_t>(id - 1)];
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const char* tag = o.pass ? "PASS" : (o.hard ? "FAIL" : "REPORT");
        fmt::print("{} criterion {} ({}): {} [{:.1f} s]\n", tag, id, name, o.detail, seconds_since(t0));
        std::fflush(stdout);
        if (!o.pass && o.hard) failed = true;
    }
    return failed ? 1 : 0;
}
