#include "fedsac/data.hpp"
#include "fedsac/defects.hpp"
#include "fedsac/fedcore.hpp"
#include "helpers.hpp"

#include <doctest.h>

using namespace fedsac;
using namespace testutil;

namespace {

struct SmallFed {
    Dataset train, val;
    Partition part;
    Manifest m = mlp_manifest({16, 12, 5}, Activation::relu, Activation::identity);
    std::unique_ptr<Federation> fed;

    SmallFed(std::size_t n, std::size_t k, std::uint64_t seed = 1) {
        const Dataset all = synth_dataset(5, 60, 16, 0.15, seed);
        std::tie(train, val) = split_holdout(all, 60, seed + 1);
        part = partition_iid(train, n, seed + 2);
        fed = std::make_unique<Federation>(train, part, val, val, m, FederationConfig{n, k, {1, 16, 0.1}}, seed + 3);
    }
};

}  // namespace

TEST_SUITE("fedcore") {

TEST_CASE("aggregate identities") {
    Rng rng(1);
    const Manifest m = mlp_manifest({2, 1}, Activation::identity, Activation::identity);
    const FlatParams a = random_params(m, rng);
    CHECK(aggregate(std::vector<FlatParams>{a}, SimplexAction{{1.0}}).values == a.values);

    FlatParams p(m), q(m);
    p.values << 1, 3, 0;
    q.values << 5, 7, 0;
    const FlatParams r = aggregate(std::vector<FlatParams>{p, q}, SimplexAction{{0.25, 0.75}});
    CHECK(r.values[0] == 4.0);
    CHECK(r.values[1] == 6.0);
}

TEST_CASE("uniform aggregation equals the elementwise mean (100 random sets)") {
    Rng rng(2);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t k = 1 + rng() % 10;
        const Manifest m = mlp_manifest({4, 5, 3}, Activation::relu, Activation::identity);
        std::vector<FlatParams> ps;
        Vector sum = Vector::Zero(static_cast<Eigen::Index>(param_count(m)));
        for (std::size_t i = 0; i < k; ++i) {
            ps.push_back(random_params(m, rng));
            sum += ps.back().values;
        }
        worst = std::max(worst, (aggregate(ps, fedavg_weights(k)).values - sum / double(k)).cwiseAbs().maxCoeff());
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("aggregation is linear in the weights and permutation equivariant") {
    Rng rng(3);
    const Manifest m = mlp_manifest({3, 3}, Activation::identity, Activation::identity);
    std::vector<FlatParams> ps{random_params(m, rng), random_params(m, rng), random_params(m, rng)};
    const SimplexAction a{{0.2, 0.3, 0.5}}, b{{0.6, 0.1, 0.3}};
    const double al = 0.35;
    SimplexAction mix{{al * 0.2 + (1 - al) * 0.6, al * 0.3 + (1 - al) * 0.1, al * 0.5 + (1 - al) * 0.3}};
    const Vector lhs = aggregate(ps, mix).values;
    const Vector rhs = al * aggregate(ps, a).values + (1 - al) * aggregate(ps, b).values;
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
    std::vector<FlatParams> perm{ps[2], ps[0], ps[1]};
    CHECK((aggregate(perm, SimplexAction{{0.5, 0.2, 0.3}}).values - aggregate(ps, a).values).cwiseAbs().maxCoeff() <
          1e-15);
}

TEST_CASE("aggregate rejects bad weights and manifests") {
    Rng rng(4);
    const Manifest m = mlp_manifest({2, 2}, Activation::identity, Activation::identity);
    std::vector<FlatParams> ps{random_params(m, rng), random_params(m, rng)};
    CHECK_THROWS_AS(aggregate(ps, SimplexAction{{0.5, 0.6}}), SimplexError);
    CHECK_THROWS_AS(aggregate(ps, SimplexAction{{1.1, -0.1}}), SimplexError);
    ps.push_back(random_params(mlp_manifest({2, 3}, Activation::identity, Activation::identity), rng));
    CHECK_THROWS(aggregate(ps, SimplexAction{{0.2, 0.3, 0.5}}));
}

TEST_CASE("fedavg and rule-based weights") {
    const SimplexAction ten = fedavg_weights(10);
    for (double w : ten.weights) CHECK(w == 0.1);
    CHECK(fedavg_weights(1).weights == std::vector<double>{1.0});
    for (std::size_t k = 1; k <= 100; ++k) CHECK(fedavg_weights(k).is_valid());

    std::vector<bool> flags(10, true);
    flags[6] = false;
    const SimplexAction one = rule_based_weights(flags);
    for (std::size_t i = 0; i < 10; ++i) CHECK(one[i] == (i == 6 ? 1.0 : 0.0));
    CHECK(rule_based_weights(std::vector<bool>(4, false)).weights == fedavg_weights(4).weights);
    CHECK(rule_based_weights(std::vector<bool>(4, true)).weights == fedavg_weights(4).weights);
    const SimplexAction two = rule_based_weights({true, false, true, false});
    CHECK(two.weights == std::vector<double>{0.0, 0.5, 0.0, 0.5});
}

TEST_CASE("evaluate on perfect, constant and random predictors") {
    const Dataset d = synth_dataset(4, 25, 4, 0.0, 2);
    // One-hot inputs per class would make a perfect linear predictor; instead
    // use a constant predictor: bias picks class 0.
    FlatParams c(mlp_manifest({4, 4}, Activation::identity, Activation::identity));
    c.bias(0) << 1, 0, 0, 0;
    CHECK(evaluate(c, d) == doctest::Approx(0.25));

    Dataset eye;
    eye.inputs = Matrix::Identity(4, 4);
    eye.labels = {0, 1, 2, 3};
    eye.num_classes = 4;
    FlatParams id(mlp_manifest({4, 4}, Activation::identity, Activation::identity));
    id.weights(0).setIdentity();
    CHECK(evaluate(id, eye) == 1.0);

    const Dataset ten = synth_dataset(10, 100, 20, 0.2, 3);
    double acc = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s)
        acc += evaluate(init_params(mlp_manifest({20, 32, 10}, Activation::relu, Activation::identity), s), ten);
    CHECK(std::abs(acc / 20 - 0.1) < 0.05);
}

TEST_CASE("local training") {
    SmallFed f(4, 2);
    const FlatParams g = init_params(f.m, 5);
    const ClientState& c = f.fed->clients()[0];
    const LocalUpdate zero = local_train(c, f.train, g, {0, 16, 0.1}, DefectPlan::none(), 1);
    CHECK(zero.params.values == g.values);
    CHECK(zero.loss == doctest::Approx(loss_and_grad(g, f.train.gather(c.local_data), LossKind::cross_entropy).first));

    const LocalUpdate five = local_train(c, f.train, g, {5, 16, 0.1}, DefectPlan::none(), 1);
    CHECK(five.loss < zero.loss);

    DefectPlan shuffled;
    shuffled.defective_clients = {c.id};
    shuffled.kinds = {DefectKind::label_shuffle};
    shuffled.degree = 0.5;
    const LocalUpdate bad = local_train(c, f.train, g, {5, 16, 0.1}, shuffled, 1);
    CHECK(bad.loss >= five.loss);

    ClientState empty;
    CHECK_THROWS(local_train(empty, f.train, g, {1, 16, 0.1}, DefectPlan::none(), 1));
}

TEST_CASE("synthetic data is learnable by the default client network") {
    const Dataset d = synth_dataset(10, 100, 784, 0.1, 4);
    ClientState c;
    for (std::size_t i = 0; i < d.size(); ++i) c.local_data.push_back(i);
    const Manifest m = mlp_manifest({784, 32, 10}, Activation::relu, Activation::identity);
    const LocalUpdate u = local_train(c, d, init_params(m, 1), {5, 32, 0.05}, DefectPlan::none(), 2);
    CHECK(evaluate(u.params, d) >= 0.95);
}

TEST_CASE("fedavg strategy: shadow accuracy equals global accuracy") {
    SmallFed f(6, 3);
    f.fed->reset(0);
    for (std::size_t r = 0; r < 4; ++r) {
        const RoundResult res =
            f.fed->run_round(r, [](const RoundUploads& u) { return fedavg_weights(u.params.size()); }, DefectPlan::none());
        CHECK(res.global_accuracy == res.fedavg_shadow_accuracy);
        CHECK(res.selected_ids.size() == 3);
    }
}

TEST_CASE("rule-based with no defects reproduces fedavg bit for bit") {
    SmallFed f(6, 3);
    std::vector<Vector> a, b;
    f.fed->reset(1);
    for (std::size_t r = 0; r < 3; ++r)
        a.push_back(f.fed->run_round(r, [](const RoundUploads& u) { return fedavg_weights(u.params.size()); },
                                     DefectPlan::none())
                        .global_params.values);
    f.fed->reset(1);
    for (std::size_t r = 0; r < 3; ++r)
        b.push_back(
            f.fed->run_round(r, [](const RoundUploads& u) { return rule_based_weights(u.defect_flags); }, DefectPlan::none())
                .global_params.values);
    CHECK(a == b);
}

TEST_CASE("client selection is uniform without replacement") {
    SmallFed f(100, 10);
    std::vector<int> hits(100, 0);
    const int rounds = 10000;
    for (int r = 0; r < rounds; ++r) {
        const auto ids = f.fed->select_clients(static_cast<std::size_t>(r));
        CHECK(std::set<std::size_t>(ids.begin(), ids.end()).size() == 10);
        for (auto i : ids) ++hits[i];
    }
    for (int h : hits) CHECK(std::abs(h / double(rounds) - 0.1) < 0.01);
}

TEST_CASE("federation rejects K > N") {
    const Dataset all = synth_dataset(3, 10, 4, 0.1, 1);
    const Partition p = partition_iid(all, 3, 1);
    CHECK_THROWS(Federation(all, p, all, all, mlp_manifest({4, 3}, Activation::relu, Activation::identity),
                            FederationConfig{3, 4, {}}, 1));
}

}
