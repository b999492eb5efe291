#include "fedsac/expcli.hpp"
#include "fedsac/data.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <iostream>

using namespace fedsac;

namespace {

enum Exit { ok = 0, other = 1, config = 2, data = 3, numeric = 4, io = 5 };

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::size_t> repeats;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("-c,--config", c.config_path, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", c.overrides, "override a config key, KEY=VALUE (repeatable)");
    sub->add_option("--repeats", c.repeats, "independent runs per strategy");
    sub->add_option("--seed", c.seed, "master seed");
    sub->add_option("-o,--out", c.out, "output directory");
    sub->add_flag("-q,--quiet", c.quiet, "only warnings and errors");
}

ExperimentConfig load(const Common& c) {
    spdlog::set_level(c.quiet ? spdlog::level::warn : spdlog::level::info);
    ExperimentConfig cfg = c.config_path.empty() ? parse_config_text("", "<defaults>") : parse_config(c.config_path);
    for (const auto& kv : c.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (c.repeats) cfg.repeats = *c.repeats;
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

std::vector<double> parse_values(const std::string& s) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto pos = s.find(',', start);
        const std::string part = s.substr(start, pos == std::string::npos ? std::string::npos : pos - start);
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(part, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != part.size()) throw ConfigError("--values: cannot parse '" + part + "'");
        out.push_back(v);
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

int report(const char* kind, const std::exception& e, int code) {
    spdlog::error("{} error: {}", kind, e.what());
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated-learning simulator with a learned aggregation agent"};
    app.require_subcommand(1);

    Common run_opts, train_opts, ablate_opts, sweep_opts;
    auto* run = app.add_subcommand("run", "run FL episodes with one strategy and write metrics.csv");
    add_common(run, run_opts);
    std::string strategy;
    run->add_option("--strategy", strategy, "fedavg | rule_based | dearfsac | dearfsac_nodefect_shadow");

    auto* train = app.add_subcommand("train", "train QEEN and the SAC agent, write checkpoints and reward curve");
    add_common(train, train_opts);
    std::optional<std::size_t> episodes;
    train->add_option("--episodes", episodes, "training episodes");

    auto* ablate = app.add_subcommand("ablate", "train full, embedding-only and raw-parameter agents");
    add_common(ablate, ablate_opts);
    ablate->add_option("--episodes", episodes, "training episodes per variant");

    auto* sweep_cmd = app.add_subcommand("sweep", "Acc_avg per strategy over defect count or degree");
    add_common(sweep_cmd, sweep_opts);
    std::string axis, values, strategies = "fedavg,rule_based";
    sweep_cmd->add_option("--axis", axis, "M or d_N")->required();
    sweep_cmd->add_option("--values", values, "comma-separated values")->required();
    sweep_cmd->add_option("--strategies", strategies, "comma-separated strategies")->capture_default_str();

    auto* inspect = app.add_subcommand("inspect-checkpoint", "print sections, shapes and content hash");
    std::string ckpt_path;
    inspect->add_option("path", ckpt_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : Exit::config;
    }

    try {
        if (*run) {
            ExperimentConfig cfg = load(run_opts);
            if (!strategy.empty()) cfg.strategy = strategy_from_string(strategy);
            const RunOutput out = run_fl(cfg);
            std::string td;
            for (std::size_t i = 0; i < out.summary.t_delta.size(); ++i)
                td += (i ? " " : "") + format_t_delta(out.summary.t_delta[i]);
            fmt::print("strategy {}  Acc_avg {:.4f}  T_delta {}\n", to_string(cfg.strategy), out.summary.acc_avg(), td);
            fmt::print("metrics {}\nmanifest {}\n", out.metrics.string(), out.manifest.string());
        } else if (*train) {
            ExperimentConfig cfg = load(train_opts);
            if (episodes) cfg.episodes = *episodes;
            const TrainOutput out = train_dearfsac(cfg);
            const auto& c = out.result.curve;
            fmt::print("episodes {}  first G {:.4f}  last G {:.4f}\n", c.size(), c.front().g, c.back().g);
            fmt::print("qeen {}\nsac {}\ncurve {}\nmanifest {}\n", out.qeen_checkpoint.string(),
                       out.sac_checkpoint.string(), out.reward_curve.string(), out.manifest.string());
        } else if (*ablate) {
            ExperimentConfig cfg = load(ablate_opts);
            if (episodes) cfg.episodes = *episodes;
            const AblationOutput out = ablation(cfg);
            for (std::size_t i = 0; i < out.variants.size(); ++i) {
                std::vector<double> g;
                for (const auto& p : out.variants[i].curve) g.push_back(p.g_common);
                const std::size_t tail = std::min<std::size_t>(10, g.size());
                fmt::print("{:<14} state_dim {:<5} final-10 G {:.4f}  curve {}\n", to_string(out.variants[i].variant),
                           out.variants[i].state_dim, mean(std::span<const double>(g).last(tail)),
                           out.curves[i].string());
            }
        } else if (*sweep_cmd) {
            ExperimentConfig cfg = load(sweep_opts);
            std::vector<Strategy> strats;
            for (const auto& s : CLI::detail::split(strategies, ',')) strats.push_back(strategy_from_string(s));
            const std::vector<double> vals = parse_values(values);
            std::vector<SweepRow> rows;
            const auto path = sweep(cfg, sweep_axis_from_string(axis), vals, strats, &rows);
            for (const auto& r : rows)
                fmt::print("{} = {:<6} {:<26} Acc_avg {:.4f}\n", r.axis, r.value, to_string(r.strategy), r.acc_avg);
            fmt::print("summary {}\n", path.string());
        } else if (*inspect) {
            inspect_checkpoint(ckpt_path, std::cout);
        }
    } catch (const ConfigError& e) {
        return report("config", e, Exit::config);
    } catch (const IoError& e) {
        return report("io", e, Exit::io);
    } catch (const FormatError& e) {
        return report("data", e, Exit::data);
    } catch (const ShapeError& e) {
        return report("data", e, Exit::data);
    } catch (const NumericError& e) {
        return report("numeric", e, Exit::numeric);
    } catch (const std::filesystem::filesystem_error& e) {
        return report("io", e, Exit::io);
    } catch (const std::exception& e) {
        return report("internal", e, Exit::other);
    }
    return Exit::ok;
}
