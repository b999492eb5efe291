#include "fedsac/expcli.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace fedsac {

namespace fs = std::filesystem;

namespace {

// Evaluation runs use episode ids far away from the training ones.
constexpr std::uint64_t kEvalEpisodeBase = 1ull << 20;
constexpr std::uint64_t kMonitorEpisodeBase = 1ull << 21;

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    return fmt::format("{}", v);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    throw ConfigError(fmt::format("{}: cannot parse '{}' as {}", key, value, expected));
}

double parse_double(std::string_view key, std::string_view v) {
    const std::string s(v);
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(s, &used);
    } catch (const std::exception&) {
        bad_value(key, v, "a number");
    }
    if (used != s.size()) bad_value(key, v, "a number");
    return out;
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    const std::string s(v);
    if (s.empty() || s.front() == '-') bad_value(key, v, "a non-negative integer");
    std::size_t used = 0;
    std::uint64_t out = 0;
    try {
        out = std::stoull(s, &used);
    } catch (const std::exception&) {
        bad_value(key, v, "a non-negative integer");
    }
    if (used != s.size()) bad_value(key, v, "a non-negative integer");
    return out;
}

int parse_int(std::string_view key, std::string_view v) {
    const std::string s(v);
    std::size_t used = 0;
    long out = 0;
    try {
        out = std::stol(s, &used);
    } catch (const std::exception&) {
        bad_value(key, v, "an integer");
    }
    if (used != s.size() || out < std::numeric_limits<int>::min() || out > std::numeric_limits<int>::max())
        bad_value(key, v, "an integer");
    return static_cast<int>(out);
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    bad_value(key, v, "a boolean");
}

std::vector<int> parse_int_list(std::string_view key, std::string_view v) {
    std::vector<int> out;
    if (trim(v).empty()) return out;
    for (const auto& part : split(v, ',')) out.push_back(parse_int(key, part));
    return out;
}

template <class T>
std::string join(const std::vector<T>& v, std::string_view sep, const std::function<std::string(const T&)>& f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += sep;
        out += f(v[i]);
    }
    return out;
}

struct Field {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, std::string_view key, std::string_view value)> set;
};

template <class T>
Field size_field(std::string key, T ExperimentConfig::*member) {
    return {key, [member](const ExperimentConfig& c) { return std::to_string(c.*member); },
            [member](ExperimentConfig& c, std::string_view k, std::string_view v) {
                c.*member = static_cast<T>(parse_u64(k, v));
            }};
}

Field double_field(std::string key, std::function<double&(ExperimentConfig&)> ref) {
    return {key, [ref](const ExperimentConfig& c) { return fmt_double(ref(const_cast<ExperimentConfig&>(c))); },
            [ref](ExperimentConfig& c, std::string_view k, std::string_view v) { ref(c) = parse_double(k, v); }};
}

Field int_field(std::string key, std::function<int&(ExperimentConfig&)> ref) {
    return {key, [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); },
            [ref](ExperimentConfig& c, std::string_view k, std::string_view v) { ref(c) = parse_int(k, v); }};
}

Field sz_field(std::string key, std::function<std::size_t&(ExperimentConfig&)> ref) {
    return {key, [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); },
            [ref](ExperimentConfig& c, std::string_view k, std::string_view v) {
                ref(c) = static_cast<std::size_t>(parse_u64(k, v));
            }};
}

Field bool_field(std::string key, std::function<bool&(ExperimentConfig&)> ref) {
    return {key,
            [ref](const ExperimentConfig& c) {
                return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
            },
            [ref](ExperimentConfig& c, std::string_view k, std::string_view v) { ref(c) = parse_bool(k, v); }};
}

Field path_field(std::string key, fs::path ExperimentConfig::*member) {
    return {key, [member](const ExperimentConfig& c) { return (c.*member).string(); },
            [member](ExperimentConfig& c, std::string_view, std::string_view v) { c.*member = fs::path(v); }};
}

Field int_list_field(std::string key, std::function<std::vector<int>&(ExperimentConfig&)> ref) {
    return {key,
            [ref](const ExperimentConfig& c) {
                return join<int>(ref(const_cast<ExperimentConfig&>(c)), ",",
                                 [](const int& x) { return std::to_string(x); });
            },
            [ref](ExperimentConfig& c, std::string_view k, std::string_view v) { ref(c) = parse_int_list(k, v); }};
}

const std::vector<Field>& fields() {
    using C = ExperimentConfig;
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back({"dataset", [](const C& c) { return c.dataset; },
                     [](C& c, std::string_view, std::string_view v) { c.dataset = std::string(v); }});
        f.push_back(path_field("dataset.train_images", &C::train_images));
        f.push_back(path_field("dataset.train_labels", &C::train_labels));
        f.push_back(path_field("dataset.test_images", &C::test_images));
        f.push_back(path_field("dataset.test_labels", &C::test_labels));
        f.push_back(int_field("dataset.classes", [](C& c) -> int& { return c.synth_classes; }));
        f.push_back(int_field("dataset.per_class", [](C& c) -> int& { return c.synth_per_class; }));
        f.push_back(int_field("dataset.features", [](C& c) -> int& { return c.synth_features; }));
        f.push_back(double_field("dataset.noise", [](C& c) -> double& { return c.synth_noise; }));
        f.push_back(size_field("dataset.validation", &C::validation_size));
        f.push_back(size_field("dataset.test", &C::test_size));
        f.push_back({"partition", [](const C& c) { return c.partition; },
                     [](C& c, std::string_view, std::string_view v) { c.partition = std::string(v); }});
        f.push_back(size_field("partition.shards_per_client", &C::shards_per_client));
        f.push_back(size_field("clients", &C::clients));
        f.push_back(size_field("per_round", &C::per_round));
        f.push_back(int_list_field("model.hidden", [](C& c) -> std::vector<int>& { return c.hidden; }));
        f.push_back({"model.activation", [](const C& c) { return to_string(c.activation); },
                     [](C& c, std::string_view k, std::string_view v) {
                         try {
                             c.activation = activation_from_string(v);
                         } catch (const std::exception&) {
                             bad_value(k, v, "an activation");
                         }
                     }});
        f.push_back(int_field("local.epochs", [](C& c) -> int& { return c.local.epochs; }));
        f.push_back(int_field("local.batch_size", [](C& c) -> int& { return c.local.batch_size; }));
        f.push_back(double_field("local.lr", [](C& c) -> double& { return c.local.lr; }));
        f.push_back(size_field("defect.m", &C::defect_m));
        f.push_back(double_field("defect.degree", [](C& c) -> double& { return c.defect_degree; }));
        f.push_back({"defect.kinds",
                     [](const C& c) {
                         return join<DefectKind>(c.defect_kinds, ",",
                                                 [](const DefectKind& k) { return to_string(k); });
                     },
                     [](C& c, std::string_view k, std::string_view v) {
                         c.defect_kinds.clear();
                         if (trim(v).empty()) return;
                         for (const auto& part : split(v, ',')) {
                             try {
                                 c.defect_kinds.push_back(defect_kind_from_string(part));
                             } catch (const std::exception&) {
                                 bad_value(k, part, "a defect kind");
                             }
                         }
                     }});
        f.push_back({"strategy", [](const C& c) { return to_string(c.strategy); },
                     [](C& c, std::string_view k, std::string_view v) {
                         try {
                             c.strategy = strategy_from_string(v);
                         } catch (const std::exception&) {
                             bad_value(k, v, "a strategy");
                         }
                     }});
        f.push_back(size_field("rounds", &C::rounds));
        f.push_back(size_field("episodes", &C::episodes));
        f.push_back(size_field("eval_episodes", &C::eval_episodes));
        f.push_back(size_field("repeats", &C::repeats));
        f.push_back({"seed", [](const C& c) { return std::to_string(c.seed); },
                     [](C& c, std::string_view k, std::string_view v) { c.seed = parse_u64(k, v); }});
        f.push_back(double_field("reward.target_accuracy", [](C& c) -> double& { return c.target_accuracy; }));
        f.push_back(double_field("reward.kappa", [](C& c) -> double& { return c.kappa; }));
        f.push_back({"reward.beta",
                     [](const C& c) {
                         return fmt::format("{},{},{}", fmt_double(c.beta[0]), fmt_double(c.beta[1]),
                                            fmt_double(c.beta[2]));
                     },
                     [](C& c, std::string_view k, std::string_view v) {
                         const auto parts = split(v, ',');
                         if (parts.size() != 3) bad_value(k, v, "three comma-separated numbers");
                         for (std::size_t i = 0; i < 3; ++i) c.beta[i] = parse_double(k, parts[i]);
                     }});
        f.push_back(double_field("reward.loss_clip", [](C& c) -> double& { return c.loss_clip; }));
        f.push_back(double_field("reward.return_gamma", [](C& c) -> double& { return c.return_gamma; }));
        f.push_back(int_field("qeen.hidden", [](C& c) -> int& { return c.qeen.hidden; }));
        f.push_back(int_field("qeen.embedding", [](C& c) -> int& { return c.qeen.embedding; }));
        f.push_back(int_field("qeen.quality_hidden", [](C& c) -> int& { return c.qeen.quality_hidden; }));
        f.push_back(int_field("qeen.epochs", [](C& c) -> int& { return c.qeen_train.epochs; }));
        f.push_back(int_field("qeen.batch_size", [](C& c) -> int& { return c.qeen_train.batch_size; }));
        f.push_back(double_field("qeen.lr", [](C& c) -> double& { return c.qeen_train.lr; }));
        f.push_back(double_field("qeen.lambda1", [](C& c) -> double& { return c.qeen_train.lambda1; }));
        f.push_back(double_field("qeen.lambda2", [](C& c) -> double& { return c.qeen_train.lambda2; }));
        f.push_back(double_field("qeen.weight_decay", [](C& c) -> double& { return c.qeen_train.weight_decay; }));
        f.push_back(size_field("qeen.corpus_models", &C::corpus_models));
        f.push_back(size_field("qeen.rounds_per_lineage", &C::corpus_rounds_per_lineage));
        f.push_back(int_list_field("sac.hidden", [](C& c) -> std::vector<int>& { return c.sac.hidden; }));
        f.push_back(double_field("sac.gamma", [](C& c) -> double& { return c.sac.gamma; }));
        f.push_back(double_field("sac.rho", [](C& c) -> double& { return c.sac.rho; }));
        f.push_back(double_field("sac.actor_lr", [](C& c) -> double& { return c.sac.actor_lr; }));
        f.push_back(double_field("sac.critic_lr", [](C& c) -> double& { return c.sac.critic_lr; }));
        f.push_back(double_field("sac.alpha_lr", [](C& c) -> double& { return c.sac.alpha_lr; }));
        f.push_back(double_field("sac.init_alpha", [](C& c) -> double& { return c.sac.init_alpha; }));
        f.push_back(bool_field("sac.auto_alpha", [](C& c) -> bool& { return c.sac.auto_alpha; }));
        f.push_back(double_field("sac.target_entropy", [](C& c) -> double& { return c.sac.target_entropy; }));
        f.push_back(double_field("sac.log_std_min", [](C& c) -> double& { return c.sac.log_std_min; }));
        f.push_back(double_field("sac.log_std_max", [](C& c) -> double& { return c.sac.log_std_max; }));
        f.push_back(double_field("sac.init_log_std", [](C& c) -> double& { return c.sac.init_log_std; }));
        f.push_back(bool_field("sac.simplex_jacobian", [](C& c) -> bool& { return c.sac.simplex_jacobian; }));
        f.push_back(bool_field("sac.permute_slots", [](C& c) -> bool& { return c.sac.permute_slots; }));
        f.push_back(size_field("sac.updates_per_round", &C::updates_per_round));
        f.push_back(size_field("sac.batch_size", &C::sac_batch_size));
        f.push_back(sz_field("replay.capacity", [](C& c) -> std::size_t& { return c.replay.capacity; }));
        f.push_back(double_field("replay.eta", [](C& c) -> double& { return c.replay.eta; }));
        f.push_back(sz_field("replay.c_min", [](C& c) -> std::size_t& { return c.replay.c_min; }));
        f.push_back(double_field("replay.nu1", [](C& c) -> double& { return c.replay.nu1; }));
        f.push_back(double_field("replay.nu2", [](C& c) -> double& { return c.replay.nu2; }));
        f.push_back(double_field("replay.epsilon", [](C& c) -> double& { return c.replay.epsilon; }));
        f.push_back(path_field("checkpoint.qeen", &C::qeen_checkpoint));
        f.push_back(path_field("checkpoint.sac", &C::sac_checkpoint));
        f.push_back(path_field("output.dir", &C::output_dir));
        f.push_back(bool_field("output.timing", [](C& c) -> bool& { return c.record_timing; }));
        return f;
    }();
    return table;
}

const Field& field(std::string_view key) {
    for (const auto& f : fields())
        if (f.key == key) return f;
    throw ConfigError(fmt::format("unknown config key '{}'", key));
}

}  // namespace

// --- enums -------------------------------------------------------------------

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::fedavg: return "fedavg";
        case Strategy::rule_based: return "rule_based";
        case Strategy::dearfsac: return "dearfsac";
        case Strategy::dearfsac_nodefect_shadow: return "dearfsac_nodefect_shadow";
    }
    return "?";
}

Strategy strategy_from_string(std::string_view s) {
    for (Strategy x : {Strategy::fedavg, Strategy::rule_based, Strategy::dearfsac, Strategy::dearfsac_nodefect_shadow})
        if (to_string(x) == s) return x;
    throw ConfigError(fmt::format("unknown strategy '{}'", s));
}

std::string to_string(AgentVariant v) {
    switch (v) {
        case AgentVariant::full: return "dearfsac";
        case AgentVariant::embedding_sac: return "embedding_sac";
        case AgentVariant::original_sac: return "original_sac";
    }
    return "?";
}

SweepAxis sweep_axis_from_string(std::string_view s) {
    if (s == "M" || s == "m") return SweepAxis::m;
    if (s == "d_N" || s == "d_n" || s == "degree") return SweepAxis::d_n;
    throw ConfigError(fmt::format("unknown sweep axis '{}' (expected M or d_N)", s));
}

// --- config ------------------------------------------------------------------

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (dataset != "synthetic" && dataset != "idx") fail("dataset: expected 'synthetic' or 'idx', got '" + dataset + "'");
    if (dataset == "idx") {
        if (train_images.empty()) fail("dataset.train_images: required when dataset = idx");
        if (train_labels.empty()) fail("dataset.train_labels: required when dataset = idx");
        if (test_images.empty()) fail("dataset.test_images: required when dataset = idx");
        if (test_labels.empty()) fail("dataset.test_labels: required when dataset = idx");
    } else {
        if (synth_classes < 2) fail("dataset.classes: need at least 2 classes");
        if (synth_per_class < 1) fail("dataset.per_class: must be positive");
        if (synth_features < 1) fail("dataset.features: must be positive");
        if (synth_noise < 0.0) fail("dataset.noise: must be non-negative");
        if (static_cast<long>(validation_size + test_size) >= static_cast<long>(synth_classes) * synth_per_class)
            fail("dataset.validation + dataset.test: must leave training samples");
    }
    if (validation_size < 1) fail("dataset.validation: must be positive");
    if (partition != "iid" && partition != "noniid") fail("partition: expected 'iid' or 'noniid', got '" + partition + "'");
    if (partition == "noniid" && shards_per_client < 1) fail("partition.shards_per_client: must be positive");
    if (clients < 1) fail("clients: must be positive");
    if (per_round < 1) fail("per_round: must be positive");
    if (per_round > clients)
        fail(fmt::format("per_round (K = {}) exceeds clients (N = {}); K must not exceed N", per_round, clients));
    for (int h : hidden)
        if (h < 1) fail("model.hidden: widths must be positive");
    if (local.epochs < 0) fail("local.epochs: must be non-negative");
    if (local.batch_size < 1) fail("local.batch_size: must be positive");
    if (!(local.lr > 0.0)) fail("local.lr: must be positive");
    if (defect_m > clients) fail(fmt::format("defect.m (M = {}) exceeds clients (N = {})", defect_m, clients));
    if (!(defect_degree >= 0.0)) fail("defect.degree: must be non-negative");
    if (defect_m > 0 && defect_kinds.empty()) fail("defect.kinds: empty while defect.m > 0");
    if (rounds < 1) fail("rounds: must be at least 1");
    if (episodes < 1) fail("episodes: must be at least 1");
    if (repeats < 1) fail("repeats: must be at least 1");
    if (!(target_accuracy > 0.0 && target_accuracy <= 1.0)) fail("reward.target_accuracy: must lie in (0, 1]");
    if (!(kappa > 1.0)) fail("reward.kappa: must exceed 1");
    for (double b : beta)
        if (!(b >= 0.0)) fail("reward.beta: weights must be non-negative");
    if (!(loss_clip > 0.0)) fail("reward.loss_clip: must be positive");
    if (!std::isnan(return_gamma) && !(return_gamma >= 0.0 && return_gamma <= 1.0))
        fail("reward.return_gamma: must lie in [0, 1] or be nan");
    if (qeen.hidden < 1) fail("qeen.hidden: must be positive");
    if (qeen.embedding < 1) fail("qeen.embedding: must be positive");
    if (qeen.quality_hidden < 1) fail("qeen.quality_hidden: must be positive");
    if (qeen_train.epochs < 0) fail("qeen.epochs: must be non-negative");
    if (qeen_train.batch_size < 1) fail("qeen.batch_size: must be positive");
    if (!(qeen_train.lr > 0.0)) fail("qeen.lr: must be positive");
    if (qeen_train.lambda1 < 0.0) fail("qeen.lambda1: must be non-negative");
    if (qeen_train.lambda2 < 0.0) fail("qeen.lambda2: must be non-negative");
    if (qeen_train.weight_decay < 0.0 || qeen_train.lr * qeen_train.weight_decay >= 1.0)
        fail("qeen.weight_decay: must be non-negative with lr * weight_decay < 1");
    if (corpus_models < 1) fail("qeen.corpus_models: must be positive");
    for (int h : sac.hidden)
        if (h < 1) fail("sac.hidden: widths must be positive");
    if (!(sac.gamma >= 0.0 && sac.gamma <= 1.0)) fail("sac.gamma: must lie in [0, 1]");
    if (!(sac.rho >= 0.0 && sac.rho <= 1.0)) fail("sac.rho: must lie in [0, 1]");
    if (!(sac.actor_lr > 0.0)) fail("sac.actor_lr: must be positive");
    if (!(sac.critic_lr > 0.0)) fail("sac.critic_lr: must be positive");
    if (!(sac.alpha_lr > 0.0)) fail("sac.alpha_lr: must be positive");
    if (!(sac.init_alpha > 0.0)) fail("sac.init_alpha: must be positive");
    if (!(sac.log_std_min < sac.log_std_max)) fail("sac.log_std_min: must be below sac.log_std_max");
    if (!(sac.init_log_std >= sac.log_std_min && sac.init_log_std <= sac.log_std_max))
        fail("sac.init_log_std: must lie in [sac.log_std_min, sac.log_std_max]");
    if (sac_batch_size < 1) fail("sac.batch_size: must be positive");
    replay.validate();
}

Manifest ExperimentConfig::client_manifest(int input_dim, int num_classes) const {
    std::vector<int> widths{input_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(num_classes);
    return mlp_manifest(widths, activation, Activation::identity);
}

DefectSpec ExperimentConfig::defect_spec() const {
    DefectSpec s;
    s.m = defect_m;
    s.degree = defect_degree;
    s.kinds = std::set<DefectKind>(defect_kinds.begin(), defect_kinds.end());
    s.seed = derive_seed(seed, "defects");
    return s;
}

EpisodeConfig ExperimentConfig::episode_config() const {
    EpisodeConfig e;
    e.rounds = rounds;
    e.kappa = kappa;
    e.target_accuracy = target_accuracy;
    e.beta = beta;
    e.loss_clip = loss_clip;
    e.updates_per_round = updates_per_round;
    e.batch_size = sac_batch_size;
    e.return_gamma = g_gamma();
    return e;
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& f : fields()) k.push_back(f.key);
        return k;
    }();
    return keys;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
    field(key).set(cfg, key, trim(value));
}

std::string get_config_value(const ExperimentConfig& cfg, std::string_view key) { return field(key).get(cfg); }

std::string serialize_config(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
    return out;
}

ExperimentConfig parse_config_text(std::string_view text, std::string_view origin) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        const std::string body = trim(std::string_view(line).substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError(fmt::format("{}:{}: expected 'key = value', got '{}'", origin, line_no, body));
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        if (!seen.insert(key).second) throw ConfigError(fmt::format("{}:{}: duplicate key '{}'", origin, line_no, key));
        try {
            set_config_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(fmt::format("{}:{}: {}", origin, line_no, e.what()));
        }
    }
    for (const auto& f : fields())
        if (!seen.count(f.key)) spdlog::info("config default: {} = {}", f.key, f.get(cfg));
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.string());
}

// --- environment -------------------------------------------------------------

std::unique_ptr<Environment> make_environment(const ExperimentConfig& cfg) {
    cfg.validate();
    auto env = std::make_unique<Environment>();
    if (cfg.dataset == "idx") {
        env->train = load_idx(cfg.train_images, cfg.train_labels);
        env->test = load_idx(cfg.test_images, cfg.test_labels);
        if (cfg.validation_size >= env->test.size())
            throw ConfigError(fmt::format("dataset.validation ({}) exceeds the test split ({} samples)",
                                          cfg.validation_size, env->test.size()));
        auto [test, val] = split_holdout(env->test, cfg.validation_size, derive_seed(cfg.seed, "data.validation"));
        env->validation = std::move(val);
        env->test = std::move(test);
    } else {
        const Dataset all = synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.synth_features, cfg.synth_noise,
                                          derive_seed(cfg.seed, "data"));
        auto [train, rest] = split_holdout(all, cfg.validation_size + cfg.test_size, derive_seed(cfg.seed, "data.split"));
        auto [val, test] = split_holdout(rest, cfg.test_size, derive_seed(cfg.seed, "data.split.test"));
        env->train = std::move(train);
        env->validation = std::move(val);
        env->test = std::move(test);
    }
    const std::uint64_t pseed = derive_seed(cfg.seed, "partition");
    env->partition = cfg.partition == "iid" ? partition_iid(env->train, cfg.clients, pseed)
                                            : partition_noniid(env->train, cfg.clients, cfg.shards_per_client, pseed);
    const int classes = std::max(env->train.num_classes, env->test.num_classes);
    env->manifest = cfg.client_manifest(static_cast<int>(env->train.inputs.cols()), classes);
    FederationConfig fc{cfg.clients, cfg.per_round, cfg.local};
    env->fed = std::make_unique<Federation>(env->train, env->partition, env->validation, env->test, env->manifest, fc,
                                            derive_seed(cfg.seed, "fed"));
    return env;
}

// --- metrics -----------------------------------------------------------------

std::string round_csv_header() {
    return "variant,strategy,run,round,delta,delta_bar,test_accuracy,r1,r2,r3,reward,weights,defect_flags,wall_ms";
}

std::string to_csv_row(const RoundRecord& r) {
    std::string w = join<double>(r.weights, ";", [](const double& x) { return fmt::format("{:.10g}", x); });
    std::string flags;
    for (std::size_t i = 0; i < r.defect_flags.size(); ++i) {
        if (i) flags += ';';
        flags += r.defect_flags[i] ? '1' : '0';
    }
    return fmt::format("{},{},{},{},{:.10g},{:.10g},{:.10g},{:.10g},{:.10g},{:.10g},{:.10g},{},{},{:.3f}", r.variant,
                       r.strategy, r.run, r.round, r.delta, r.delta_bar, r.test_accuracy, r.reward.r1, r.reward.r2,
                       r.reward.r3, r.reward.total, w, flags, r.wall_ms);
}

std::vector<RoundRecord> to_records(const EpisodeResult& ep, std::string_view strategy, std::string_view variant,
                                    std::size_t run, bool timing) {
    std::vector<RoundRecord> out;
    out.reserve(ep.rounds.size());
    for (const auto& r : ep.rounds) {
        RoundRecord rec;
        rec.variant = std::string(variant);
        rec.strategy = std::string(strategy);
        rec.run = run;
        rec.round = r.round;
        rec.delta = r.result.global_accuracy;
        rec.delta_bar = r.result.fedavg_shadow_accuracy;
        rec.test_accuracy = r.result.test_accuracy;
        rec.reward = r.reward;
        rec.weights = r.result.weights.weights;
        rec.defect_flags = r.defect_flags;
        rec.wall_ms = timing ? r.wall_ms : 0.0;
        out.push_back(std::move(rec));
    }
    return out;
}

std::optional<std::size_t> rounds_to_target(const std::vector<RoundLog>& rounds, double target) {
    for (std::size_t i = 0; i < rounds.size(); ++i)
        if (rounds[i].result.global_accuracy >= target) return i + 1;
    return std::nullopt;
}

std::string format_t_delta(std::optional<std::size_t> t) { return t ? std::to_string(*t) : "-"; }

double mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double roc_auc(std::span<const double> score, const std::vector<bool>& positive) {
    if (score.size() != positive.size()) throw ShapeError("roc_auc: score and label counts differ");
    double pos = 0.0, neg = 0.0, wins = 0.0;
    for (std::size_t i = 0; i < score.size(); ++i) {
        if (!positive[i]) continue;
        for (std::size_t j = 0; j < score.size(); ++j) {
            if (positive[j]) continue;
            wins += score[i] > score[j] ? 1.0 : (score[i] == score[j] ? 0.5 : 0.0);
        }
    }
    for (bool p : positive) (p ? pos : neg) += 1.0;
    if (pos == 0.0 || neg == 0.0) throw std::invalid_argument("roc_auc: need both classes");
    return wins / (pos * neg);
}

double episode_return(const EpisodeResult& ep, const std::array<double, 3>& beta, double gamma) {
    double g = 0.0, discount = 1.0;
    for (const auto& r : ep.rounds) {
        g += discount * compound_reward(r.reward, beta);
        discount *= gamma;
    }
    return g;
}

std::string git_blob_sha1(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot read " + file.string());
    const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string header = "blob " + std::to_string(data.size()) + '\0';

    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
        throw IoError("sha1 failed for " + file.string());
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
    return hex;
}

// --- operations --------------------------------------------------------------

namespace {

void write_lines(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << header << '\n';
    for (const auto& r : rows) out << r << '\n';
}

void write_records(const fs::path& path, const std::vector<RoundRecord>& records) {
    std::vector<std::string> rows;
    rows.reserve(records.size());
    for (const auto& r : records) rows.push_back(to_csv_row(r));
    write_lines(path, round_csv_header(), rows);
}

nlohmann::json config_json(const ExperimentConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& key : config_keys()) j[key] = get_config_value(cfg, key);
    return j;
}

fs::path write_manifest(const ExperimentConfig& cfg, std::string_view command, const std::vector<fs::path>& outputs,
                        const std::vector<fs::path>& checkpoints, nlohmann::json extra = nlohmann::json::object()) {
    nlohmann::json j;
    j["command"] = std::string(command);
    j["seed"] = cfg.seed;
    j["config"] = config_json(cfg);
    j["outputs"] = nlohmann::json::array();
    for (const auto& p : outputs) j["outputs"].push_back(p.string());
    j["checkpoints"] = nlohmann::json::object();
    for (const auto& p : checkpoints) j["checkpoints"][p.string()] = git_blob_sha1(p);
    j["extra"] = std::move(extra);
    const fs::path path = cfg.output_dir / fmt::format("manifest_{}.json", command);
    fs::create_directories(cfg.output_dir);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    return path;
}

void require_file(const fs::path& p, std::string_view key) {
    if (p.empty()) throw MissingFileError(fmt::format("{}: no checkpoint configured", key));
    if (!fs::exists(p)) throw MissingFileError(fmt::format("{}: checkpoint '{}' does not exist", key, p.string()));
}

bool is_agent_strategy(Strategy s) { return s == Strategy::dearfsac || s == Strategy::dearfsac_nodefect_shadow; }

}  // namespace

double RunSummary::acc_avg() const { return mean(final_accuracies); }

RunSummary run_strategy(const ExperimentConfig& cfg, Environment& env, Strategy strategy, const Qeen* qeen,
                        const SacAgent* agent) {
    Federation& fed = *env.fed;
    const DefectSpec spec = cfg.defect_spec();
    const EpisodeConfig ec = cfg.episode_config();
    std::optional<AgentView> view;
    if (qeen) view = AgentView{qeen_embedder(*qeen), qeen};
    if (is_agent_strategy(strategy) && (!qeen || !agent))
        throw MissingFileError("strategy " + to_string(strategy) + " needs QEEN and SAC checkpoints");

    RunSummary summary;
    summary.strategy = strategy;
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
        const std::uint64_t episode = kEvalEpisodeBase + r;
        fed.reset(episode);
        const DefectPlan plan =
            strategy == Strategy::dearfsac_nodefect_shadow ? DefectPlan::none() : draw_plan(spec, cfg.clients, episode);
        EpisodeResult ep;
        switch (strategy) {
            case Strategy::fedavg:
                ep = run_strategy_episode(
                    fed, plan, [](const RoundUploads& u) { return fedavg_weights(u.params.size()); },
                    view ? &*view : nullptr, ec, cfg.g_gamma());
                break;
            case Strategy::rule_based:
                ep = run_strategy_episode(
                    fed, plan, [](const RoundUploads& u) { return rule_based_weights(u.defect_flags); },
                    view ? &*view : nullptr, ec, cfg.g_gamma());
                break;
            case Strategy::dearfsac:
            case Strategy::dearfsac_nodefect_shadow: {
                SacAgent a = *agent;
                ep = run_agent_episode(fed, plan, a, nullptr, *view, ec, false, derive_seed(cfg.seed, "eval", r));
                break;
            }
        }
        summary.final_accuracies.push_back(ep.final_accuracy());
        summary.t_delta.push_back(rounds_to_target(ep.rounds, cfg.target_accuracy));
        summary.episodes.push_back(std::move(ep));
    }
    return summary;
}

RunOutput run_fl(const ExperimentConfig& cfg) {
    cfg.validate();
    std::optional<Qeen> qeen;
    std::optional<SacAgent> agent;
    std::vector<fs::path> ckpts;
    if (is_agent_strategy(cfg.strategy)) {
        require_file(cfg.qeen_checkpoint, "checkpoint.qeen");
        require_file(cfg.sac_checkpoint, "checkpoint.sac");
    }
    if (!cfg.qeen_checkpoint.empty() && fs::exists(cfg.qeen_checkpoint)) {
        qeen = Qeen::load(cfg.qeen_checkpoint);
        ckpts.push_back(cfg.qeen_checkpoint);
    }
    if (is_agent_strategy(cfg.strategy)) {
        agent = SacAgent::load(cfg.sac_checkpoint);
        ckpts.push_back(cfg.sac_checkpoint);
    }
    auto env = make_environment(cfg);
    RunOutput out;
    out.summary = run_strategy(cfg, *env, cfg.strategy, qeen ? &*qeen : nullptr, agent ? &*agent : nullptr);

    std::vector<RoundRecord> records;
    for (std::size_t r = 0; r < out.summary.episodes.size(); ++r) {
        auto rec = to_records(out.summary.episodes[r], to_string(cfg.strategy), "run", r, cfg.record_timing);
        records.insert(records.end(), rec.begin(), rec.end());
    }
    out.metrics = cfg.output_dir / "metrics.csv";
    write_records(out.metrics, records);
    nlohmann::json extra;
    extra["acc_avg"] = out.summary.acc_avg();
    extra["final_accuracies"] = out.summary.final_accuracies;
    std::vector<std::string> td;
    for (const auto& t : out.summary.t_delta) td.push_back(format_t_delta(t));
    extra["t_delta"] = td;
    out.manifest = write_manifest(cfg, "run", {out.metrics}, ckpts, extra);
    return out;
}

TrainResult train_agent(const ExperimentConfig& cfg, Environment& env, AgentVariant variant, const Qeen* reference) {
    cfg.validate();
    Federation& fed = *env.fed;
    const std::size_t K = cfg.per_round;
    const int E = cfg.qeen.embedding;
    const DefectSpec spec = cfg.defect_spec();

    TrainResult tr;
    tr.variant = variant;
    EpisodeConfig ec = cfg.episode_config();
    if (variant != AgentVariant::full) ec.beta[1] = 0.0;

    Embedder embed;
    const Qeen* scorer = reference;
    if (variant == AgentVariant::original_sac) {
        embed = pooled_embedder(E);
    } else {
        CorpusConfig cc;
        cc.models = cfg.corpus_models;
        cc.rounds_per_lineage = cfg.corpus_rounds_per_lineage;
        cc.defects = spec;
        const auto t0 = std::chrono::steady_clock::now();
        const QeenCorpus corpus = generate_corpus(fed, cc, derive_seed(cfg.seed, "corpus"));
        QeenTrainConfig qt = cfg.qeen_train;
        if (variant == AgentVariant::embedding_sac) qt.lambda2 = 0.0;
        tr.qeen = train_qeen(corpus, cfg.qeen, qt, derive_seed(cfg.seed, "qeen"), &tr.qeen_log);
        spdlog::info("{}: QEEN trained on {} models in {:.1f} s, joint loss {:.4g} -> {:.4g}", to_string(variant),
                     corpus.size(), std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                     tr.qeen_log.joint.empty() ? 0.0 : tr.qeen_log.joint.front(),
                     tr.qeen_log.joint.empty() ? 0.0 : tr.qeen_log.joint.back());
        embed = qeen_embedder(*tr.qeen);
        if (!scorer && variant == AgentVariant::full) scorer = &*tr.qeen;
    }
    const AgentView view{embed, scorer};

    tr.state_dim = state_dim(K, static_cast<std::size_t>(E));
    tr.agent = SacAgent(tr.state_dim, K, cfg.sac, derive_seed(cfg.seed, "sac"));
    PrioritizedBuffer replay(cfg.replay);
    for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
        const auto t0 = std::chrono::steady_clock::now();
        fed.reset(ep);
        const DefectPlan plan = draw_plan(spec, cfg.clients, ep);
        EpisodeResult res =
            run_agent_episode(fed, plan, tr.agent, &replay, view, ec, true, derive_seed(cfg.seed, "train.episode", ep));
        EpisodeCurvePoint p;
        p.episode = ep;
        p.g = res.episode_return;
        p.g_common = episode_return(res, cfg.beta, cfg.g_gamma());
        p.final_accuracy = res.final_accuracy();
        for (std::size_t r = 0; r < cfg.eval_episodes; ++r) {
            const std::uint64_t id = kMonitorEpisodeBase + r;
            fed.reset(id);
            const EpisodeResult ev = run_agent_episode(fed, draw_plan(spec, cfg.clients, id), tr.agent, nullptr, view, ec,
                                                       false, derive_seed(cfg.seed, "monitor", r));
            p.g_eval += ev.episode_return / static_cast<double>(cfg.eval_episodes);
            p.eval_accuracy += ev.final_accuracy() / static_cast<double>(cfg.eval_episodes);
        }
        p.alpha = tr.agent.alpha();
        p.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        spdlog::info("{} episode {}: G {:.4f} (common {:.4f}) final accuracy {:.3f}, eval G {:.4f} accuracy {:.3f}, "
                     "alpha {:.3g} {:.1f} s",
                     to_string(variant), ep, p.g, p.g_common, p.final_accuracy, p.g_eval, p.eval_accuracy, p.alpha,
                     p.wall_s);
        tr.curve.push_back(p);
        auto rec = to_records(res, "dearfsac", to_string(variant), ep, cfg.record_timing);
        tr.records.insert(tr.records.end(), rec.begin(), rec.end());
    }
    return tr;
}

std::string curve_csv_header() {
    return "variant,episode,G,G_common,final_accuracy,G_eval,eval_accuracy,alpha,wall_s,state_dim";
}

std::string to_csv_row(const EpisodeCurvePoint& p, std::string_view variant) {
    return fmt::format("{},{},{:.10g},{:.10g},{:.10g},{:.10g},{:.10g},{:.6g},{:.3f}", variant, p.episode, p.g,
                       p.g_common, p.final_accuracy, p.g_eval, p.eval_accuracy, p.alpha, p.wall_s);
}

namespace {

fs::path write_curve(const fs::path& path, const TrainResult& tr, bool timing) {
    std::vector<std::string> rows;
    for (auto p : tr.curve) {
        if (!timing) p.wall_s = 0.0;
        rows.push_back(to_csv_row(p, to_string(tr.variant)) + "," + std::to_string(tr.state_dim));
    }
    write_lines(path, curve_csv_header(), rows);
    return path;
}

}  // namespace

TrainOutput train_dearfsac(const ExperimentConfig& cfg) {
    auto env = make_environment(cfg);
    TrainOutput out;
    out.result = train_agent(cfg, *env, AgentVariant::full);
    fs::create_directories(cfg.output_dir);
    out.qeen_checkpoint = cfg.output_dir / "qeen.ckpt";
    out.sac_checkpoint = cfg.output_dir / "sac.ckpt";
    out.result.qeen->save(out.qeen_checkpoint, derive_seed(cfg.seed, "qeen"));
    out.result.agent.save(out.sac_checkpoint, derive_seed(cfg.seed, "sac"));
    out.reward_curve = write_curve(cfg.output_dir / "reward_curve.csv", out.result, cfg.record_timing);
    out.metrics = cfg.output_dir / "train_metrics.csv";
    write_records(out.metrics, out.result.records);
    nlohmann::json extra;
    extra["state_dim"] = out.result.state_dim;
    if (!out.result.qeen_log.joint.empty()) {
        extra["qeen_joint_first"] = out.result.qeen_log.joint.front();
        extra["qeen_joint_last"] = out.result.qeen_log.joint.back();
    }
    out.manifest = write_manifest(cfg, "train", {out.reward_curve, out.metrics},
                                  {out.qeen_checkpoint, out.sac_checkpoint}, extra);
    return out;
}

std::vector<TrainResult> run_ablation(const ExperimentConfig& cfg, Environment& env) {
    std::vector<TrainResult> out;
    out.reserve(3);
    out.push_back(train_agent(cfg, env, AgentVariant::full));
    const Qeen* reference = &*out.front().qeen;
    out.push_back(train_agent(cfg, env, AgentVariant::embedding_sac, reference));
    out.push_back(train_agent(cfg, env, AgentVariant::original_sac, reference));
    return out;
}

AblationOutput ablation(const ExperimentConfig& cfg) {
    auto env = make_environment(cfg);
    AblationOutput out;
    out.variants = run_ablation(cfg, *env);
    std::vector<fs::path> outputs;
    nlohmann::json extra;
    for (const auto& tr : out.variants) {
        const std::string name = to_string(tr.variant);
        out.curves.push_back(write_curve(cfg.output_dir / ("curve_" + name + ".csv"), tr, cfg.record_timing));
        const fs::path metrics = cfg.output_dir / ("metrics_" + name + ".csv");
        write_records(metrics, tr.records);
        outputs.push_back(out.curves.back());
        outputs.push_back(metrics);
        extra[name]["state_dim"] = tr.state_dim;
        std::vector<double> g;
        for (const auto& p : tr.curve) g.push_back(p.g_common);
        const std::size_t tail = std::min<std::size_t>(10, g.size());
        extra[name]["final10_G_common"] = mean(std::span<const double>(g).last(tail));
    }
    extra["original_sac_state"] = "pooled raw parameters: (K+1)*E + 2K";
    out.manifest = write_manifest(cfg, "ablate", outputs, {}, extra);
    return out;
}

fs::path sweep(const ExperimentConfig& cfg, SweepAxis axis, std::span<const double> values,
               std::span<const Strategy> strategies, std::vector<SweepRow>* rows_out) {
    if (values.empty()) throw ConfigError("sweep: no values given");
    if (strategies.empty()) throw ConfigError("sweep: no strategies given");
    cfg.validate();
    std::optional<Qeen> qeen;
    std::optional<SacAgent> agent;
    std::vector<fs::path> ckpts;
    const bool needs_agent = std::any_of(strategies.begin(), strategies.end(), is_agent_strategy);
    if (needs_agent) {
        require_file(cfg.qeen_checkpoint, "checkpoint.qeen");
        require_file(cfg.sac_checkpoint, "checkpoint.sac");
        qeen = Qeen::load(cfg.qeen_checkpoint);
        agent = SacAgent::load(cfg.sac_checkpoint);
        ckpts = {cfg.qeen_checkpoint, cfg.sac_checkpoint};
    }
    auto env = make_environment(cfg);
    const std::string axis_name = axis == SweepAxis::m ? "M" : "d_N";
    std::vector<std::string> lines;
    std::vector<SweepRow> rows;
    for (double v : values) {
        ExperimentConfig c = cfg;
        if (axis == SweepAxis::m) {
            if (v < 0.0 || v != std::floor(v)) throw ConfigError(fmt::format("sweep: M value {} is not a count", v));
            c.defect_m = static_cast<std::size_t>(v);
        } else {
            c.defect_degree = v;
        }
        c.validate();
        for (Strategy s : strategies) {
            const RunSummary sum = run_strategy(c, *env, s, qeen ? &*qeen : nullptr, agent ? &*agent : nullptr);
            SweepRow row{axis_name, v, s, sum.acc_avg(), sum.final_accuracies.size()};
            lines.push_back(fmt::format("{},{:.10g},{},{:.10g},{},{}", axis_name, v, to_string(s), row.acc_avg, row.runs,
                                        join<double>(sum.final_accuracies, ";", [](const double& x) {
                                            return fmt::format("{:.10g}", x);
                                        })));
            spdlog::info("sweep {} = {} {}: Acc_avg {:.4f}", axis_name, v, to_string(s), row.acc_avg);
            rows.push_back(row);
        }
    }
    const fs::path path = cfg.output_dir / fmt::format("sweep_{}.csv", axis_name);
    write_lines(path, "axis,value,strategy,acc_avg,runs,final_accuracies", lines);
    write_manifest(cfg, "sweep", {path}, ckpts);
    if (rows_out) *rows_out = std::move(rows);
    return path;
}

CheckpointReport inspect_checkpoint(const fs::path& path, std::ostream& out) {
    if (!fs::exists(path)) throw MissingFileError("checkpoint '" + path.string() + "' does not exist");
    CheckpointReport rep;
    rep.checkpoint = read_checkpoint(path);
    rep.sha1 = git_blob_sha1(path);
    out << "file    " << path.string() << "\n";
    out << "blob    " << rep.sha1 << "\n";
    out << "sections " << rep.checkpoint.sections.size() << "\n";
    for (const auto& s : rep.checkpoint.sections) {
        const auto& v = s.params.values;
        const double lo = v.size() ? v.minCoeff() : 0.0;
        const double hi = v.size() ? v.maxCoeff() : 0.0;
        const double mu = v.size() ? v.mean() : 0.0;
        out << fmt::format("[{}] d={} seed={} min={:.6g} max={:.6g} mean={:.6g} l2={:.6g}\n", s.name, v.size(), s.seed,
                           lo, hi, mu, v.norm());
        for (std::size_t k = 0; k < s.params.manifest.size(); ++k) {
            const auto& l = s.params.manifest[k];
            out << fmt::format("    layer {}: {} -> {} {}\n", k, l.in_dim, l.out_dim, to_string(l.activation));
        }
        if (s.meta_json != "{}") out << "    meta " << s.meta_json << "\n";
    }
    return rep;
}

}  // namespace fedsac
