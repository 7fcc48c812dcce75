// Client sampling, temperature schedules, local updates, the four
// aggregation algorithms, and the full loop's determinism.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <set>

#include "flexchill/federated.hpp"

using namespace flexchill;

namespace {

FLConfig small_config() {
    FLConfig cfg;
    cfg.model = ModelSpec::mlp_custom(4, {8}, 3);
    cfg.total_clients = 4;
    cfg.participants_per_round = 2;
    cfg.rounds = 3;
    cfg.local_epochs = 2;
    cfg.batch_size = 8;
    cfg.learning_rate = 0.05;
    cfg.lr_decay = 0.0;
    cfg.temperature = 0.5;
    cfg.seed = 12;
    return cfg;
}

Dataset small_blobs(std::uint64_t seed = 12) { return gen_gaussian_blobs(3, 30, 4, 0.5, seed); }

bool params_equal(const ParamSet& a, const ParamSet& b) {
    if (!a.congruent_with(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& va = a[i].tensor.data();
        const auto& vb = b[i].tensor.data();
        for (std::size_t j = 0; j < va.size(); ++j)
            if (va[j] != vb[j]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("client sampling is sorted, unique, in range, and keyed by round", "[federated]") {
    FLConfig cfg = small_config();
    cfg.total_clients = 10;
    cfg.participants_per_round = 5;

    const auto a = sample_clients(cfg, 3);
    const auto b = sample_clients(cfg, 3);
    CHECK(a == b);
    REQUIRE(a.size() == 5);
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 5);
    for (std::size_t id : a) CHECK(id < 10);

    bool round_changes_draw = false;
    for (std::size_t r = 4; r < 10 && !round_changes_draw; ++r)
        round_changes_draw = sample_clients(cfg, r) != a;
    CHECK(round_changes_draw);

    // Long-run participation is near uniform: 5 of 10 over 1000 rounds
    // puts each client at 500 expected draws.
    std::vector<std::size_t> hits(10, 0);
    for (std::size_t r = 1; r <= 1000; ++r)
        for (std::size_t id : sample_clients(cfg, r)) ++hits[id];
    for (std::size_t id = 0; id < 10; ++id) {
        CHECK(hits[id] > 400);
        CHECK(hits[id] < 600);
    }
}

TEST_CASE("temperature schedule is piecewise constant from each round on", "[federated]") {
    FLConfig cfg = small_config();
    cfg.temperature = 1.0;
    CHECK(effective_temperature(cfg, 1) == 1.0);
    CHECK(effective_temperature(cfg, 500) == 1.0);

    cfg.temperature_schedule = {{5, 0.5}, {10, 0.25}};
    CHECK(effective_temperature(cfg, 1) == 1.0);
    CHECK(effective_temperature(cfg, 4) == 1.0);
    CHECK(effective_temperature(cfg, 5) == 0.5);
    CHECK(effective_temperature(cfg, 9) == 0.5);
    CHECK(effective_temperature(cfg, 10) == 0.25);
    CHECK(effective_temperature(cfg, 99) == 0.25);
}

TEST_CASE("config validation rejects inconsistent setups", "[federated]") {
    FLConfig ok = small_config();
    CHECK_NOTHROW(ok.validate());

    auto expect_invalid = [](FLConfig cfg) {
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    };
    FLConfig c = small_config();
    c.total_clients = 0;
    expect_invalid(c);
    c = small_config();
    c.participants_per_round = 5;  // above total_clients = 4
    expect_invalid(c);
    c = small_config();
    c.temperature = 0.0;
    expect_invalid(c);
    c = small_config();
    c.temperature_schedule = {{3, 0.5}, {3, 0.25}};  // rounds must increase
    expect_invalid(c);
    c = small_config();
    c.temperature_schedule = {{0, 0.5}};  // rounds are 1-based
    expect_invalid(c);
    c = small_config();
    c.fedprox_mu = -1.0;
    expect_invalid(c);
    c = small_config();
    c.target_accuracy = 1.5;
    expect_invalid(c);
    c = small_config();
    c.client_holdout_frac = 1.0;
    expect_invalid(c);
    c = small_config();
    c.algorithm = FLAlgorithm::scaffold;
    c.learning_rate = 0.0;
    expect_invalid(c);
    c = small_config();
    c.batch_size = 0;
    expect_invalid(c);
    c = small_config();
    c.local_epochs = 0;
    expect_invalid(c);
}

TEST_CASE("equal data produces equal local updates for any client id", "[federated]") {
    FLConfig cfg = small_config();
    Model global = build_model(cfg.model, 3);
    Dataset data = small_blobs();

    Model a = client_update(global, data, cfg, 1, 0);
    Model b = client_update(global, data, cfg, 1, 7);
    CHECK(params_equal(a.params, b.params));

    // Training moved the weights.
    CHECK_FALSE(params_equal(a.params, global.params));

    // Empty data returns the broadcast model unchanged.
    Model c = client_update(global, data.subset({}), cfg, 1, 2);
    CHECK(params_equal(c.params, global.params));
}

TEST_CASE("aggregating identical models is an exact no-op", "[federated]") {
    Model m = build_model(ModelSpec::mlp_custom(6, {5}, 3), 9);
    const std::vector<Aggregand> in{{&m.params, 0.3}, {&m.params, 5.0}, {&m.params, 0.01}};
    ParamSet out = aggregate(in, AggregateMode::fedavg);
    CHECK(params_equal(out, m.params));
}

TEST_CASE("aggregation is the weighted mean of parameter values", "[federated]") {
    ParamSet a, b;
    a.add("w", Tensor({2}, {1.0, 2.0}, true), ParamRole::dense);
    b.add("w", Tensor({2}, {3.0, 6.0}, true), ParamRole::dense);
    ParamSet out = aggregate({{&a, 1.0}, {&b, 3.0}}, AggregateMode::fedavg);
    CHECK(out.at("w").tensor.data()[0] == Catch::Approx(2.5).margin(1e-15));
    CHECK(out.at("w").tensor.data()[1] == Catch::Approx(5.0).margin(1e-15));
}

TEST_CASE("aggregation validates its inputs", "[federated]") {
    ParamSet a;
    a.add("w", Tensor({1}, {1.0}, true), ParamRole::dense);
    CHECK_THROWS_AS(aggregate({}, AggregateMode::fedavg), std::invalid_argument);
    CHECK_THROWS_AS(aggregate({{nullptr, 1.0}}, AggregateMode::fedavg), std::invalid_argument);
    CHECK_THROWS_AS(aggregate({{&a, -1.0}}, AggregateMode::fedavg), std::invalid_argument);
    CHECK_THROWS_AS(aggregate({{&a, std::nan("")}}, AggregateMode::fedavg),
                    std::invalid_argument);
    CHECK_THROWS_AS(aggregate({{&a, 0.0}, {&a, 0.0}}, AggregateMode::fedavg),
                    std::invalid_argument);
    ParamSet other;
    other.add("w", Tensor({2}, {1.0, 2.0}, true), ParamRole::dense);
    CHECK_THROWS_AS(aggregate({{&a, 1.0}, {&other, 1.0}}, AggregateMode::fedavg),
                    std::invalid_argument);
}

TEST_CASE("proximal term vanishes at mu zero and has a closed form", "[federated]") {
    FLConfig cfg = small_config();
    cfg.fedprox_mu = 0.0;
    Model global = build_model(cfg.model, 3);
    Dataset data = small_blobs();
    Model plain = client_update(global, data, cfg, 1, 0);
    Model prox = client_update_fedprox(global, data, cfg, 1, 0);
    CHECK(params_equal(plain.params, prox.params));

    ParamSet local, ref;
    local.add("w", Tensor({2}, {2.0, 1.0}, true), ParamRole::dense);
    ref.add("w", Tensor({2}, {1.0, 3.0}, true), ParamRole::dense);
    // 0.5 * mu * ((2-1)^2 + (1-3)^2) = 0.5 * 0.5 * 5
    CHECK(fedprox_penalty(local, ref, 0.5) == Catch::Approx(1.25).margin(1e-15));

    ParamSet incongruent;
    incongruent.add("v", Tensor({2}, {0.0, 0.0}, true), ParamRole::dense);
    CHECK_THROWS_AS(fedprox_penalty(local, incongruent, 0.5), std::invalid_argument);

    // Frozen entries do not contribute.
    ParamSet with_stat = local.clone();
    with_stat.add("s", Tensor({1}, {9.0}, false), ParamRole::batchnorm_stat);
    ParamSet ref_stat = ref.clone();
    ref_stat.add("s", Tensor({1}, {-9.0}, false), ParamRole::batchnorm_stat);
    CHECK(fedprox_penalty(with_stat, ref_stat, 0.5) == Catch::Approx(1.25).margin(1e-15));

    // A positive mu actually changes the trajectory.
    cfg.fedprox_mu = 1.0;
    Model pulled = client_update_fedprox(global, data, cfg, 1, 0);
    CHECK_FALSE(params_equal(pulled.params, plain.params));
}

TEST_CASE("scaffold single-step control lands on the minibatch gradient", "[federated]") {
    // With one local step, c_i' = c_i - c + (w_g - w_l)/eta = c_i - c + (g + c - c_i) = g
    // for any control pair, so the new control equals the full-batch gradient.
    FLConfig cfg = small_config();
    cfg.algorithm = FLAlgorithm::scaffold;
    cfg.local_epochs = 1;
    cfg.batch_size = 1000;  // one batch covers the data
    cfg.lr_decay = 0.0;
    Model global = build_model(cfg.model, 3);
    Dataset data = small_blobs();

    ParamSet server_c = zeros_like(global.params);
    ParamSet client_c = zeros_like(global.params);
    // Nonzero controls exercise the correction path.
    server_c.at("fc1.weight").tensor.data()[0] = 0.25;
    client_c.at("fc1.weight").tensor.data()[0] = -0.5;

    ScaffoldUpdate up = client_update_scaffold(global, data, cfg, server_c, client_c, 1, 0);

    // Reference gradient: one full-batch pass on a clone of the broadcast.
    Model ref = global.clone();
    std::vector<std::size_t> order = data.identity_order();
    Rng shuffle_rng(cfg.seed, "batch-shuffle", 1, 0);
    shuffle(order, shuffle_rng);
    Tensor x = data.gather(order, 0, data.size());
    std::vector<int> labels(data.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = data.labels[order[i]];
    Tape tape;
    backward(tape, ce_loss_t(&tape, forward(ref, x, &tape, true), labels,
                             effective_temperature(cfg, 1)));

    for (std::size_t e = 0; e < up.new_client_control.size(); ++e) {
        if (!ref.params[e].tensor.requires_grad()) continue;
        const auto& got = up.new_client_control[e].tensor.data();
        const auto& g = ref.params[e].tensor.grad();
        for (std::size_t j = 0; j < got.size(); ++j)
            CHECK(got[j] == Catch::Approx(g[j]).margin(1e-9));
    }

    // With zero controls the model itself matches the plain update.
    ParamSet z1 = zeros_like(global.params), z2 = zeros_like(global.params);
    ScaffoldUpdate zero = client_update_scaffold(global, data, cfg, z1, z2, 1, 0);
    Model plain = client_update(global, data, cfg, 1, 0);
    CHECK(params_equal(zero.model.params, plain.params));

    // Nonzero controls steer away from the plain trajectory.
    CHECK_FALSE(params_equal(up.model.params, plain.params));

    // Empty data: broadcast and control come back unchanged.
    ScaffoldUpdate idle = client_update_scaffold(global, data.subset({}), cfg, server_c,
                                                 client_c, 1, 0);
    CHECK(params_equal(idle.model.params, global.params));
    CHECK(params_equal(idle.new_client_control, client_c));

    // Congruence of controls is enforced.
    ParamSet bad;
    bad.add("w", Tensor({1}, {0.0}, false), ParamRole::dense);
    CHECK_THROWS_AS(client_update_scaffold(global, data, cfg, bad, client_c, 1, 0),
                    std::invalid_argument);
}

TEST_CASE("batchnorm entries stay personalized under fedbn aggregation", "[federated]") {
    Model a = build_model(ModelSpec::har(32), 1);
    Model b = build_model(ModelSpec::har(32), 2);
    // Make the BN state visibly different.
    a.params.at("bn1.running_mean").tensor.data()[0] = 10.0;
    b.params.at("bn1.running_mean").tensor.data()[0] = -10.0;
    a.params.at("bn1.gamma").tensor.data()[0] = 3.0;
    b.params.at("bn1.gamma").tensor.data()[0] = 5.0;

    ParamSet out = aggregate({{&a.params, 1.0}, {&b.params, 1.0}}, AggregateMode::fedbn);
    CHECK(out.at("bn1.running_mean").tensor.data()[0] == 10.0);  // first model's value
    CHECK(out.at("bn1.gamma").tensor.data()[0] == 3.0);
    const double wa = a.params.at("conv1.weight").tensor.data()[0];
    const double wb = b.params.at("conv1.weight").tensor.data()[0];
    CHECK(out.at("conv1.weight").tensor.data()[0] ==
          Catch::Approx(0.5 * (wa + wb)).margin(1e-15));

    // In plain mode everything averages.
    ParamSet avg = aggregate({{&a.params, 1.0}, {&b.params, 1.0}}, AggregateMode::fedavg);
    CHECK(avg.at("bn1.running_mean").tensor.data()[0] == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("fedbn on a batchnorm-free model reduces to plain averaging", "[federated]") {
    FLConfig cfg = small_config();
    cfg.rounds = 1;
    Dataset all = small_blobs();
    auto [train, test] = split_train_test(all, 0.2, cfg.seed);
    ClientPartition part = partition_iid(train, cfg.total_clients, cfg.seed);

    cfg.algorithm = FLAlgorithm::fedavg;
    FederatedRun avg = run_federated(cfg, train, part, test);
    cfg.algorithm = FLAlgorithm::fedbn;
    FederatedRun bn = run_federated(cfg, train, part, test);
    CHECK(params_equal(avg.final_model.params, bn.final_model.params));
}

TEST_CASE("the loop emits one record per round with sane fields", "[federated]") {
    FLConfig cfg = small_config();
    Dataset all = small_blobs();
    auto [train, test] = split_train_test(all, 0.2, cfg.seed);
    ClientPartition part = partition_iid(train, cfg.total_clients, cfg.seed);

    std::size_t callbacks = 0;
    FederatedRun run = run_federated(cfg, train, part, test,
                                     [&](const RoundRecord&) { ++callbacks; });
    REQUIRE(run.records.size() == cfg.rounds);
    CHECK(callbacks == cfg.rounds);
    for (std::size_t r = 0; r < run.records.size(); ++r) {
        const RoundRecord& rec = run.records[r];
        CHECK(rec.round == r + 1);
        CHECK(rec.accuracy >= 0.0);
        CHECK(rec.accuracy <= 1.0);
        CHECK(std::isfinite(rec.loss));
        CHECK(rec.entropy_pre_agg >= 0.0);
        CHECK(rec.entropy_post_agg >= 0.0);
        CHECK(std::isfinite(rec.delta_participants));
        CHECK(rec.wall_seconds >= 0.0);
    }

    // Metrics off: the fields stay NaN.
    cfg.measure_entropy = false;
    cfg.measure_deltas = false;
    FederatedRun bare = run_federated(cfg, train, part, test);
    CHECK(std::isnan(bare.records[0].entropy_pre_agg));
    CHECK(std::isnan(bare.records[0].delta_participants));
}

TEST_CASE("zero rounds returns the freshly initialized model", "[federated]") {
    FLConfig cfg = small_config();
    cfg.rounds = 0;
    Dataset all = small_blobs();
    auto [train, test] = split_train_test(all, 0.2, cfg.seed);
    ClientPartition part = partition_iid(train, cfg.total_clients, cfg.seed);
    FederatedRun run = run_federated(cfg, train, part, test);
    CHECK(run.records.empty());
    Model fresh = build_model(cfg.model, cfg.seed);
    CHECK(params_equal(run.final_model.params, fresh.params));
}

TEST_CASE("clients without data are skipped, not fatal", "[federated]") {
    FLConfig cfg = small_config();
    cfg.total_clients = 2;
    cfg.participants_per_round = 2;
    cfg.rounds = 2;
    cfg.client_holdout_frac = 0.0;
    Dataset all = small_blobs();
    auto [train, test] = split_train_test(all, 0.2, cfg.seed);
    ClientPartition part;
    part.assignments.resize(2);
    for (std::size_t r = 0; r < train.size(); ++r) part.assignments[0].push_back(r);
    // Client 1 owns nothing.
    FederatedRun run = run_federated(cfg, train, part, test);
    CHECK(run.records.size() == 2);
    CHECK(run.records[1].accuracy > 0.0);
}

TEST_CASE("run validation checks partition size and test set", "[federated]") {
    FLConfig cfg = small_config();
    Dataset all = small_blobs();
    auto [train, test] = split_train_test(all, 0.2, cfg.seed);
    ClientPartition wrong = partition_iid(train, cfg.total_clients + 1, cfg.seed);
    CHECK_THROWS_AS(run_federated(cfg, train, wrong, test), std::invalid_argument);

    ClientPartition part = partition_iid(train, cfg.total_clients, cfg.seed);
    Dataset empty_test = test.subset({});
    CHECK_THROWS_AS(run_federated(cfg, train, part, empty_test), std::invalid_argument);
}

TEST_CASE("serial and threaded executions are bit-identical", "[federated]") {
    FLConfig cfg = small_config();
    cfg.total_clients = 6;
    cfg.participants_per_round = 4;
    cfg.rounds = 4;
    Dataset all = gen_gaussian_blobs(3, 40, 4, 0.5, 5);
    auto [train, test] = split_train_test(all, 0.2, cfg.seed);
    ClientPartition part = partition_dirichlet(train, cfg.total_clients, 0.5, cfg.seed);

    setenv("FLEXCHILL_THREADS", "1", 1);
    FederatedRun serial = run_federated(cfg, train, part, test);
    setenv("FLEXCHILL_THREADS", "8", 1);
    FederatedRun threaded = run_federated(cfg, train, part, test);
    unsetenv("FLEXCHILL_THREADS");

    REQUIRE(serial.records.size() == threaded.records.size());
    for (std::size_t r = 0; r < serial.records.size(); ++r) {
        const RoundRecord& a = serial.records[r];
        const RoundRecord& b = threaded.records[r];
        CHECK(a.accuracy == b.accuracy);
        CHECK(a.loss == b.loss);
        CHECK(a.entropy_pre_agg == b.entropy_pre_agg);
        CHECK(a.entropy_post_agg == b.entropy_post_agg);
        // Delta fields may be NaN when a side has no members.
        CHECK((a.delta_participants == b.delta_participants ||
               (std::isnan(a.delta_participants) && std::isnan(b.delta_participants))));
    }
    CHECK(params_equal(serial.final_model.params, threaded.final_model.params));
}

TEST_CASE("zeros_like mirrors structure with frozen zero values", "[federated]") {
    Model m = build_model(ModelSpec::har(32), 1);
    ParamSet z = zeros_like(m.params);
    REQUIRE(z.congruent_with(m.params));
    for (const auto& e : z) {
        CHECK_FALSE(e.tensor.requires_grad());
        for (double v : e.tensor.data()) CHECK(v == 0.0);
    }
}
