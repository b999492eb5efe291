#include "fedsac/defects.hpp"
#include "fedsac/data.hpp"
#include "fedsac/fedcore.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <algorithm>

using namespace fedsac;
using namespace testutil;

TEST_SUITE("defects") {

TEST_CASE("contamination at degree zero is the identity") {
    Rng rng(1), data_rng(2);
    Batch b{random_matrix(4, 10, data_rng), {0, 1, 2, 3}};
    const Batch out = contaminate_batch(b, 0.0, rng);
    CHECK(out.inputs == b.inputs);
    CHECK(out.labels == b.labels);
}

TEST_CASE("contamination magnitude with clipping") {
    // Pixels at 0.5 with d_N = 0.5 clip once |g| > 1, so the observed mean
    // |change| is 0.5 * E[min(|g|, 1)] = 0.5 * (2 (phi(0) - phi(1)) + 2 (1 - Phi(1))).
    Batch b{Matrix::Constant(100, 100, 0.5), std::vector<int>(100, 0)};
    Rng rng(11);
    const Batch out = contaminate_batch(b, 0.5, rng);
    CHECK(out.inputs.minCoeff() >= 0.0);
    CHECK(out.inputs.maxCoeff() <= 1.0);
    CHECK((out.inputs - b.inputs).cwiseAbs().mean() == doctest::Approx(0.3156).epsilon(0.02));

    Rng r1(5), r2(5);
    CHECK(contaminate_batch(b, 0.3, r1).inputs == contaminate_batch(b, 0.3, r2).inputs);
}

TEST_CASE("contamination noise is degree-scaled standard normal") {
    Batch b{Matrix::Constant(100, 100, 0.5), std::vector<int>(100, 0)};
    Rng rng(21);
    const Batch out = contaminate_batch(b, 0.1, rng);
    const Matrix diff = out.inputs - b.inputs;
    // With d_N = 0.1 clipping needs |g| > 5, so the raw perturbation is visible.
    CHECK(diff.cwiseAbs().mean() == doctest::Approx(0.1 * std::sqrt(2.0 / M_PI)).epsilon(0.03));
}

TEST_CASE("comm loss touches only the final two layers") {
    Rng rng(3);
    const Manifest m = mlp_manifest({20, 30, 40, 10}, Activation::relu, Activation::identity);
    const FlatParams p = random_params(m, rng);
    Rng r(4);
    const FlatParams q = perturb_comm(p, 0.5, r);
    CHECK(q.values.head(static_cast<Eigen::Index>(m[0].param_count())) ==
          p.values.head(static_cast<Eigen::Index>(m[0].param_count())));
    const auto tail = static_cast<Eigen::Index>(m[1].param_count() + m[2].param_count());
    const Vector d = q.values.tail(tail) - p.values.tail(tail);
    CHECK((d.array() != 0.0).all());
    Rng r0(4);
    CHECK(perturb_comm(p, 0.0, r0).values == p.values);
    CHECK_THROWS(perturb_comm(FlatParams(mlp_manifest({3, 2}, Activation::relu, Activation::identity)), 0.1, r0));
}

TEST_CASE("comm loss perturbation std matches degree within 5%") {
    const Manifest m = mlp_manifest({10, 100, 100}, Activation::relu, Activation::identity);
    REQUIRE(m[0].param_count() + m[1].param_count() >= 10000);
    const FlatParams p(m);
    for (double dn : {0.1, 0.5, 0.9}) {
        Rng r(static_cast<std::uint64_t>(dn * 100));
        const Vector d = perturb_comm(p, dn, r).values;
        const double mu = d.mean();
        const double sd = std::sqrt((d.array() - mu).square().sum() / static_cast<double>(d.size() - 1));
        CHECK(sd == doctest::Approx(dn).epsilon(0.05));
    }
}

TEST_CASE("label shuffle preserves the multiset and the inputs") {
    Rng rng(8), data_rng(9);
    Batch b{random_matrix(32, 3, data_rng), {}};
    for (int i = 0; i < 32; ++i) b.labels.push_back(i % 5);
    const ShuffledBatch s = shuffle_labels(b, rng);
    CHECK_FALSE(s.skipped);
    CHECK(s.batch.inputs == b.inputs);
    auto x = s.batch.labels, y = b.labels;
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    CHECK(x == y);
}

TEST_CASE("label shuffle on two labels is a fair coin") {
    Batch b{Matrix::Zero(2, 1), {0, 1}};
    Rng rng(12);
    int swapped = 0;
    for (int i = 0; i < 10000; ++i) swapped += shuffle_labels(b, rng).batch.labels[0] == 1;
    CHECK(std::abs(swapped / 10000.0 - 0.5) < 0.02);
    Batch one{Matrix::Zero(1, 1), {3}};
    CHECK(shuffle_labels(one, rng).skipped);
}

TEST_CASE("ground truth marks") {
    DefectPlan plan;
    plan.defective_clients = {2, 5};
    plan.degree = 0.1;
    CHECK(ground_truth_mark(0, plan).value == 0.0);
    CHECK(ground_truth_mark(2, plan).value == 0.1);
    plan.degree = 0.9;
    CHECK(ground_truth_mark(5, plan).value == 0.9);
}

TEST_CASE("draw_plan picks exactly M clients, fixed per episode") {
    DefectSpec spec{4, 0.5, {DefectKind::comm_loss}, 77};
    const DefectPlan a = draw_plan(spec, 20, 3), b = draw_plan(spec, 20, 3);
    CHECK(a.defective_clients.size() == 4);
    CHECK(a.defective_clients == b.defective_clients);
    bool differs = false;
    for (std::uint64_t ep = 4; ep < 20; ++ep) differs |= draw_plan(spec, 20, ep).defective_clients != a.defective_clients;
    CHECK(differs);
    CHECK_THROWS(draw_plan(DefectSpec{21, 0.5, {DefectKind::comm_loss}, 1}, 20, 0));
}

TEST_CASE("clean clients are bit-identical to the defect-free run") {
    const Dataset all = synth_dataset(4, 40, 8, 0.2, 1);
    auto [train, val] = split_holdout(all, 40, 2);
    const Partition part = partition_iid(train, 6, 3);
    const Manifest m = mlp_manifest({8, 6, 4}, Activation::relu, Activation::identity);
    Federation fed(train, part, val, val, m, FederationConfig{6, 6, {1, 8, 0.1}}, 9);
    const DefectSpec spec{2, 0.7, {DefectKind::data_contamination, DefectKind::comm_loss, DefectKind::label_shuffle}, 4};
    const DefectPlan plan = draw_plan(spec, 6, 0);
    fed.reset(0);
    const RoundUploads clean = fed.collect(0, DefectPlan::none());
    fed.reset(0);
    const RoundUploads dirty = fed.collect(0, plan);
    REQUIRE(clean.selected_ids == dirty.selected_ids);
    int affected = 0;
    for (std::size_t i = 0; i < clean.params.size(); ++i) {
        if (plan.is_defective(dirty.selected_ids[i])) {
            ++affected;
            CHECK(dirty.params[i].values != clean.params[i].values);
            CHECK(dirty.defect_flags[i]);
        } else {
            CHECK(std::memcmp(dirty.params[i].values.data(), clean.params[i].values.data(),
                              sizeof(double) * clean.params[i].size()) == 0);
            CHECK_FALSE(dirty.defect_flags[i]);
        }
    }
    CHECK(affected == 2);
}

TEST_CASE("kind names round trip") {
    for (auto k : {DefectKind::data_contamination, DefectKind::comm_loss, DefectKind::label_shuffle})
        CHECK(defect_kind_from_string(to_string(k)) == k);
    CHECK_THROWS(defect_kind_from_string("bitflip"));
}

}
