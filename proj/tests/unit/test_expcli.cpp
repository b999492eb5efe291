#include "fedsac/expcli.hpp"

#include <doctest.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace fedsac;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
    std::vector<std::string> out;
    std::ifstream in(p);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig tiny(const fs::path& out) {
    ExperimentConfig c;
    c.synth_per_class = 30;
    c.synth_features = 12;
    c.validation_size = 50;
    c.test_size = 50;
    c.clients = 6;
    c.per_round = 3;
    c.hidden = {8};
    c.defect_m = 2;
    c.rounds = 4;
    c.repeats = 2;
    c.output_dir = out;
    c.qeen = QeenConfig{16, 4, 8};
    c.qeen_train.epochs = 3;
    c.corpus_models = 12;
    c.corpus_rounds_per_lineage = 2;
    c.sac.hidden = {16};
    c.sac_batch_size = 4;
    c.replay.c_min = 4;
    return c;
}

}  // namespace

TEST_SUITE("expcli") {

TEST_CASE("minimal config fills defaults") {
    spdlog::set_level(spdlog::level::warn);
    const ExperimentConfig c = parse_config_text("dataset = synthetic\nstrategy = rule_based  # baseline\n");
    const ExperimentConfig d;
    CHECK(c.strategy == Strategy::rule_based);
    CHECK(c.clients == d.clients);
    CHECK(c.kappa == 64.0);
    CHECK(c.beta == std::array<double, 3>{0.5, 0.4, 0.1});
    CHECK(c.qeen_train.lambda1 == 0.5);
    CHECK(c.sac.gamma == 0.99);
    CHECK(c.repeats == 3);
}

TEST_CASE("K > N names both fields") {
    try {
        (void)parse_config_text("clients = 5\nper_round = 6\n");
        FAIL("no throw");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("per_round") != std::string::npos);
        CHECK(msg.find("clients") != std::string::npos);
    }
}

TEST_CASE("unknown, duplicate and malformed keys") {
    CHECK_THROWS_WITH_AS(parse_config_text("\n\nwidgets = 3\n", "cfg"), doctest::Contains("cfg:3"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("rounds = 3\nrounds = 4\n"), doctest::Contains("duplicate"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("rounds = three\n"), doctest::Contains("rounds"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("rounds = 0\n"), doctest::Contains("rounds"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("just words\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("replay.nu1 = 0.5\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("defect.kinds = comm_loss,bitrot\n"), ConfigError);
}

TEST_CASE("serialize then parse is the identity") {
    ExperimentConfig c = tiny("somewhere");
    c.strategy = Strategy::dearfsac_nodefect_shadow;
    c.defect_kinds = {DefectKind::label_shuffle};
    c.beta = {0.1, 0.2, 0.7};
    c.local.lr = 0.1 + 1e-17;
    c.sac.target_entropy = -2.5;
    c.partition = "noniid";
    c.qeen_checkpoint = "a/b.ckpt";
    c.record_timing = true;
    c.seed = 18446744073709551615ull;
    const std::string text = serialize_config(c);
    const ExperimentConfig r = parse_config_text(text);
    CHECK(serialize_config(r) == text);
    for (const auto& key : config_keys()) CHECK(get_config_value(r, key) == get_config_value(c, key));
    CHECK(r.local.lr == c.local.lr);
    CHECK(r.seed == c.seed);
    // NaN entropy target survives too.
    const ExperimentConfig d;
    CHECK(serialize_config(parse_config_text(serialize_config(d))) == serialize_config(d));
}

TEST_CASE("metric helpers") {
    const std::vector<double> s{0.9, 0.8, 0.3, 0.2}, t{0.1, 0.9};
    const std::vector<bool> pos{true, true, false, false}, mixed{true, false, true, false};
    CHECK(roc_auc(s, pos) == 1.0);
    CHECK(roc_auc(s, mixed) == 0.75);
    const std::vector<double> tie{0.5, 0.5};
    const std::vector<bool> tp{true, false};
    CHECK(roc_auc(tie, tp) == 0.5);
    CHECK(mean(t) == 0.5);
    CHECK(stddev(t) == doctest::Approx(std::sqrt(0.32)));
    CHECK(format_t_delta(std::nullopt) == "-");
    CHECK(format_t_delta(7) == "7");

    std::vector<RoundLog> rounds(3);
    rounds[0].result.global_accuracy = 0.5;
    rounds[1].result.global_accuracy = 0.96;
    rounds[2].result.global_accuracy = 0.97;
    CHECK(rounds_to_target(rounds, 0.95) == 2);
    CHECK_FALSE(rounds_to_target(rounds, 0.99).has_value());
}

TEST_CASE("git blob hash") {
    TempDir d("fedsac_unit_sha");
    std::ofstream(d.path / "hello") << "hello\n";
    CHECK(git_blob_sha1(d.path / "hello") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("run_fl is deterministic and reports unreachable targets as a dash") {
    TempDir a("fedsac_unit_run_a"), b("fedsac_unit_run_b");
    ExperimentConfig c = tiny(a.path);
    c.defect_m = 0;
    c.target_accuracy = 1.0;
    const RunOutput ra = run_fl(c);
    c.output_dir = b.path;
    const RunOutput rb = run_fl(c);
    CHECK(slurp(ra.metrics) == slurp(rb.metrics));
    CHECK(lines(ra.metrics).size() == 1 + c.rounds * c.repeats);
    CHECK(lines(ra.metrics)[0] == round_csv_header());
    for (const auto& t : ra.summary.t_delta) CHECK(format_t_delta(t) == "-");
    CHECK(ra.summary.acc_avg() == doctest::Approx(mean(ra.summary.final_accuracies)));
    CHECK(fs::exists(ra.manifest));
}

TEST_CASE("rule-based with M = K - 1 keeps exactly one model") {
    TempDir d("fedsac_unit_rule");
    ExperimentConfig c = tiny(d.path);
    c.clients = 10;
    c.per_round = 10;
    c.defect_m = 9;
    c.synth_per_class = 40;
    c.strategy = Strategy::rule_based;
    const RunOutput out = run_fl(c);
    for (const auto& ep : out.summary.episodes)
        for (const auto& r : ep.rounds) {
            int nonzero = 0;
            for (double w : r.result.weights.weights) nonzero += w != 0.0;
            CHECK(nonzero == 1);
        }
}

TEST_CASE("agent strategies need checkpoints") {
    TempDir d("fedsac_unit_missing");
    ExperimentConfig c = tiny(d.path);
    c.strategy = Strategy::dearfsac;
    CHECK_THROWS_AS(run_fl(c), MissingFileError);
    c.qeen_checkpoint = d.path / "nope.ckpt";
    c.sac_checkpoint = d.path / "nope.ckpt";
    CHECK_THROWS_AS(run_fl(c), MissingFileError);
}

TEST_CASE("train, evaluate, sweep and inspect") {
    TempDir d("fedsac_unit_train");
    ExperimentConfig c = tiny(d.path);
    c.episodes = 1;
    const TrainOutput t = train_dearfsac(c);
    CHECK(lines(t.reward_curve).size() == 2);
    CHECK(lines(t.metrics).size() == 1 + c.rounds);
    CHECK(t.result.state_dim == state_dim(3, 4));

    c.qeen_checkpoint = t.qeen_checkpoint;
    c.sac_checkpoint = t.sac_checkpoint;
    c.strategy = Strategy::dearfsac;
    const RunOutput r = run_fl(c);
    CHECK(r.summary.final_accuracies.size() == c.repeats);
    const std::string manifest = slurp(r.manifest);
    CHECK(manifest.find(git_blob_sha1(t.sac_checkpoint)) != std::string::npos);

    const std::vector<double> values{0.1, 0.5, 0.9};
    const std::vector<Strategy> strategies{Strategy::fedavg, Strategy::rule_based, Strategy::dearfsac};
    std::vector<SweepRow> rows;
    const fs::path summary = sweep(c, SweepAxis::d_n, values, strategies, &rows);
    CHECK(rows.size() == 9);
    CHECK(lines(summary).size() == 10);
    const std::vector<double> ms{0, 2};
    CHECK(lines(sweep(c, SweepAxis::m, ms, strategies)).size() == 7);
    CHECK_THROWS_AS(sweep(c, SweepAxis::m, std::vector<double>{}, strategies), ConfigError);

    std::ostringstream os;
    const CheckpointReport rep = inspect_checkpoint(t.sac_checkpoint, os);
    CHECK(rep.sha1 == git_blob_sha1(t.sac_checkpoint));
    CHECK(os.str().find("[actor]") != std::string::npos);
    CHECK(rep.checkpoint.sections.size() == 5);
}

TEST_CASE("ablation writes three comparable curves") {
    TempDir d("fedsac_unit_ablate");
    ExperimentConfig c = tiny(d.path);
    c.episodes = 2;
    const AblationOutput out = ablation(c);
    REQUIRE(out.curves.size() == 3);
    for (const auto& p : out.curves) {
        const auto l = lines(p);
        CHECK(l.size() == 3);
        CHECK(l[0] == curve_csv_header());
    }
    CHECK(lines(out.curves[2])[1].rfind("original_sac,", 0) == 0);
    for (const auto& v : out.variants) CHECK(v.records.size() == c.episodes * c.rounds);
    CHECK_FALSE(out.variants[2].qeen.has_value());
    CHECK(slurp(out.manifest).find("original_sac_state") != std::string::npos);
}

}
