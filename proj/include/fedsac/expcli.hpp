#pragma once

// Experiment configuration, orchestration and metrics files behind the
// command-line tool.

#include "fedsac/data.hpp"
#include "fedsac/defects.hpp"
#include "fedsac/fedcore.hpp"
#include "fedsac/qeen.hpp"
#include "fedsac/replay.hpp"
#include "fedsac/sacagent.hpp"

#include <cmath>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fedsac {

enum class Strategy { fedavg, rule_based, dearfsac, dearfsac_nodefect_shadow };

std::string to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

enum class AgentVariant { full, embedding_sac, original_sac };

std::string to_string(AgentVariant v);

struct ExperimentConfig {
    // dataset: "synthetic" or "idx"
    std::string dataset = "synthetic";
    std::filesystem::path train_images, train_labels, test_images, test_labels;
    int synth_classes = 10;
    int synth_per_class = 140;
    int synth_features = 64;
    double synth_noise = 0.2;
    std::size_t validation_size = 200;  // idx: reserved out of the test split; synthetic: held out
    std::size_t test_size = 200;        // synthetic only

    std::string partition = "iid";  // or "noniid"
    std::size_t shards_per_client = 2;

    std::size_t clients = 10;
    std::size_t per_round = 4;
    std::vector<int> hidden{32};
    Activation activation = Activation::relu;
    LocalTrainConfig local{1, 32, 0.1};

    std::size_t defect_m = 2;
    double defect_degree = 0.5;
    std::vector<DefectKind> defect_kinds{DefectKind::data_contamination, DefectKind::comm_loss,
                                         DefectKind::label_shuffle};

    Strategy strategy = Strategy::fedavg;
    std::size_t rounds = 20;
    std::size_t episodes = 60;
    /// Deterministic episodes on fixed seeds scored after every training episode.
    std::size_t eval_episodes = 1;
    std::size_t repeats = 3;
    std::uint64_t seed = 1;

    double target_accuracy = 0.95;
    double kappa = 64.0;
    std::array<double, 3> beta{0.5, 0.4, 0.1};
    double loss_clip = 5.0;
    /// Discount of the reported return G; NaN means sac.gamma.
    double return_gamma = std::numeric_limits<double>::quiet_NaN();

    QeenConfig qeen;
    QeenTrainConfig qeen_train;
    std::size_t corpus_models = 200;
    std::size_t corpus_rounds_per_lineage = 5;

    SacConfig sac;
    std::size_t updates_per_round = 4;
    std::size_t sac_batch_size = 64;
    BufferConfig replay{100000, 0.996, 500, 0.6, 0.6, 1e-3};

    std::filesystem::path qeen_checkpoint;
    std::filesystem::path sac_checkpoint;
    std::filesystem::path output_dir = "out";
    bool record_timing = false;

    /// Throws ConfigError naming the offending key(s).
    void validate() const;

    Manifest client_manifest(int input_dim, int num_classes) const;
    DefectSpec defect_spec() const;
    EpisodeConfig episode_config() const;
    double g_gamma() const { return std::isnan(return_gamma) ? sac.gamma : return_gamma; }
};

/// Plain-text schema: one `key = value` per line, `#` starts a comment, lists
/// are comma separated. Unknown keys are errors. Keys left out keep their
/// defaults, which are echoed to the log.
ExperimentConfig parse_config(const std::filesystem::path& path);
ExperimentConfig parse_config_text(std::string_view text, std::string_view origin = "<text>");
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const ExperimentConfig& cfg, std::string_view key);
const std::vector<std::string>& config_keys();
/// Every key, in schema order; parse_config_text(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& cfg);

// --- environment -------------------------------------------------------------

/// Datasets, partition and federation for one config. Not movable: the
/// federation keeps a pointer to `train`.
struct Environment {
    Dataset train;
    Dataset validation;
    Dataset test;
    Partition partition;
    Manifest manifest;
    std::unique_ptr<Federation> fed;

    Environment() = default;
    Environment(const Environment&) = delete;
    Environment& operator=(const Environment&) = delete;
};

std::unique_ptr<Environment> make_environment(const ExperimentConfig& cfg);

// --- metrics -----------------------------------------------------------------

struct RoundRecord {
    std::string variant;
    std::string strategy;
    std::size_t run = 0;  // repeat index, or training episode
    std::size_t round = 0;
    double delta = 0.0;
    double delta_bar = 0.0;
    double test_accuracy = 0.0;
    RewardParts reward;
    std::vector<double> weights;
    std::vector<bool> defect_flags;
    double wall_ms = 0.0;
};

std::string round_csv_header();
std::string to_csv_row(const RoundRecord& r);
std::vector<RoundRecord> to_records(const EpisodeResult& ep, std::string_view strategy, std::string_view variant,
                                    std::size_t run, bool timing);

/// 1-based index of the first round with validation accuracy >= target.
std::optional<std::size_t> rounds_to_target(const std::vector<RoundLog>& rounds, double target);
std::string format_t_delta(std::optional<std::size_t> t);
double mean(std::span<const double> v);
double stddev(std::span<const double> v);
/// Area under the ROC curve for `positive` ranked by `score` (ties count 1/2).
double roc_auc(std::span<const double> score, const std::vector<bool>& positive);
/// Discounted return recomputed from stored reward parts with another beta.
double episode_return(const EpisodeResult& ep, const std::array<double, 3>& beta, double gamma);

/// SHA-1 of "blob <size>\0" + contents, as git computes object ids.
std::string git_blob_sha1(const std::filesystem::path& file);

// --- operations --------------------------------------------------------------

struct RunSummary {
    Strategy strategy = Strategy::fedavg;
    std::vector<double> final_accuracies;
    std::vector<std::optional<std::size_t>> t_delta;
    std::vector<EpisodeResult> episodes;
    double acc_avg() const;
};

struct RunOutput {
    RunSummary summary;
    std::filesystem::path metrics;
    std::filesystem::path manifest;
};

/// Runs cfg.repeats independent FL runs of cfg.strategy and writes
/// metrics.csv plus manifest.json into cfg.output_dir.
RunOutput run_fl(const ExperimentConfig& cfg);
/// Same, without touching the file system.
RunSummary run_strategy(const ExperimentConfig& cfg, Environment& env, Strategy strategy, const Qeen* qeen,
                        const SacAgent* agent);

struct EpisodeCurvePoint {
    std::size_t episode = 0;
    double g = 0.0;          // return under the variant's own beta
    double g_common = 0.0;   // return under cfg.beta, r2 scored by the reference quality head
    double final_accuracy = 0.0;
    double g_eval = 0.0;          // mean G of the deterministic policy on the fixed evaluation episodes
    double eval_accuracy = 0.0;   // their mean final accuracy
    double alpha = 0.0;
    double wall_s = 0.0;
};

struct TrainResult {
    AgentVariant variant = AgentVariant::full;
    std::optional<Qeen> qeen;
    QeenTrainLog qeen_log;
    SacAgent agent;
    std::size_t state_dim = 0;
    std::vector<EpisodeCurvePoint> curve;
    std::vector<RoundRecord> records;
};

/// QEEN phase (skipped for original SAC) followed by cfg.episodes SAC
/// training episodes. `reference` scores r2 for g_common; null uses the
/// variant's own QEEN, or none.
TrainResult train_agent(const ExperimentConfig& cfg, Environment& env, AgentVariant variant,
                        const Qeen* reference = nullptr);

struct TrainOutput {
    TrainResult result;
    std::filesystem::path qeen_checkpoint;
    std::filesystem::path sac_checkpoint;
    std::filesystem::path reward_curve;
    std::filesystem::path metrics;
    std::filesystem::path manifest;
};

TrainOutput train_dearfsac(const ExperimentConfig& cfg);

std::string curve_csv_header();
std::string to_csv_row(const EpisodeCurvePoint& p, std::string_view variant);

struct AblationOutput {
    std::vector<TrainResult> variants;  // full, embedding_sac, original_sac
    std::vector<std::filesystem::path> curves;
    std::filesystem::path manifest;
};

AblationOutput ablation(const ExperimentConfig& cfg);
/// In-memory ablation over one environment.
std::vector<TrainResult> run_ablation(const ExperimentConfig& cfg, Environment& env);

enum class SweepAxis { m, d_n };
SweepAxis sweep_axis_from_string(std::string_view s);

struct SweepRow {
    std::string axis;
    double value = 0.0;
    Strategy strategy = Strategy::fedavg;
    double acc_avg = 0.0;
    std::size_t runs = 0;
};

std::filesystem::path sweep(const ExperimentConfig& cfg, SweepAxis axis, std::span<const double> values,
                            std::span<const Strategy> strategies, std::vector<SweepRow>* rows = nullptr);

struct CheckpointReport {
    std::string sha1;
    Checkpoint checkpoint;
};
CheckpointReport inspect_checkpoint(const std::filesystem::path& path, std::ostream& out);

}  // namespace fedsac
