#include <dnas/pipeline.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

namespace dnas {
namespace {

namespace fs = std::filesystem;

SuperNetSpec conv_spec(std::vector<PrecisionCandidate> candidates, std::size_t blocks = 2, std::size_t classes = 4) {
    SuperNetSpec s;
    s.in_channels = 3;
    s.height = s.width = 8;
    s.classes = classes;
    s.stem_channels = 8;
    for (std::size_t b = 0; b < blocks; ++b) {
        s.blocks.push_back({"b" + std::to_string(b + 1), BlockKind::Conv, 8, 1, candidates});
    }
    return s;
}

std::pair<Dataset, Dataset> toy_data(std::size_t classes = 4, std::size_t train = 50, std::size_t test = 25,
                                     double noise = 1.0, std::uint64_t seed = 3) {
    SyntheticSpec d;
    d.classes = classes;
    d.channels = 3;
    d.image_size = 8;
    d.train_per_class = train;
    d.test_per_class = test;
    d.noise = noise;
    d.jitter = 0.5;
    d.seed = seed;
    return generate_synthetic(d);
}

SearchConfig short_search(int epochs, int warmup) {
    SearchConfig c;
    c.epochs = epochs;
    c.warmup = warmup;
    c.batch_size = 16;
    c.sample_every = 2;
    c.samples_per_event = 3;
    c.weight_opt.lr = 0.05;
    c.theta_opt.lr = 0.05;
    c.split_ratio = 0.5;
    return c;
}

ChildConfig short_child(int epochs) {
    ChildConfig c;
    c.epochs = epochs;
    c.batch_size = 16;
    c.sgd.lr = 0.05;
    c.cutout = false;
    return c;
}

std::vector<std::vector<float>> copy_all(const std::vector<Tensor<float>>& ts) {
    std::vector<std::vector<float>> out;
    for (const auto& t : ts) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

std::vector<double> softmax_of(const std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    std::vector<double> p;
    double z = 0;
    for (double x : v) z += std::exp(x - m);
    for (double x : v) p.push_back(std::exp(x - m) / z);
    return p;
}

const std::vector<PrecisionCandidate> kThree{PrecisionCandidate::quantized(1), PrecisionCandidate::quantized(4),
                                             PrecisionCandidate::full()};

TEST(SearchSchedule, SamplingEvents) {
    SearchConfig c;
    c.epochs = 90;
    c.warmup = 10;
    c.sample_every = 10;
    std::vector<int> after;
    for (int e = 0; e < c.epochs; ++e)
        if (samples_after(c, e)) after.push_back(e);
    EXPECT_EQ(after, (std::vector<int>{19, 29, 39, 49, 59, 69, 79, 89}));
    c.sample_every = 1;
    c.warmup = 0;
    EXPECT_FALSE(samples_after(c, 0));
    EXPECT_TRUE(samples_after(c, 1));
}

TEST(SearchConfigValidation, Rejections) {
    auto c = short_search(5, 1);
    c.warmup = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c.warmup = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = short_search(5, 1);
    c.sample_every = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunSearch, FullWarmupLeavesThetaAtInitialization) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data();
    const auto r = run_search(spec, short_search(4, 3), train);
    for (const auto& snap : r.theta_history) EXPECT_EQ(snap.theta, r.initial_theta.theta);
    EXPECT_EQ(r.final_theta.theta, r.initial_theta.theta);
    for (const auto& m : r.metrics) EXPECT_EQ(m.phase, "w");
}

TEST(RunSearch, PhasesOnlyTouchTheirOwnParameters) {
    const auto spec = conv_spec({PrecisionCandidate::quantized(2, 2), PrecisionCandidate::quantized(4, 4),
                                 PrecisionCandidate::full()});
    auto [train, test] = toy_data();
    std::vector<std::vector<float>> weights, thetas;
    int w_phases = 0, t_phases = 0;
    bool first = true;
    run_search(spec, short_search(5, 1), train, {}, [&](const EpochMetrics& m, const Network<float>& net) {
        const auto w = copy_all(net.weight_tensors()), t = copy_all(net.theta_tensors());
        if (!first) {
            if (m.phase == "w") {
                ++w_phases;
                EXPECT_EQ(t, thetas) << "theta moved in weight epoch " << m.epoch;
                EXPECT_NE(w, weights);
            } else {
                ++t_phases;
                EXPECT_EQ(w, weights) << "weights or alphas moved in theta epoch " << m.epoch;
                EXPECT_NE(t, thetas);
            }
        }
        first = false;
        weights = w;
        thetas = t;
    });
    EXPECT_EQ(w_phases, 4);
    EXPECT_EQ(t_phases, 3);
}

TEST(RunSearch, TemperatureLogFollowsSchedule) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data(4, 20, 5);
    auto cfg = short_search(6, 1);
    cfg.temperature = {3.0, 0.37};
    const auto r = run_search(spec, cfg, train);
    ASSERT_EQ(r.metrics.size(), 6u + 4u);
    for (const auto& m : r.metrics) {
        EXPECT_NEAR(m.tau, 3.0 * std::exp(-0.37 * m.epoch), 1e-9);
    }
}

TEST(RunSearch, QueueReproducibleFromThetaSnapshots) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data();
    const auto cfg = short_search(7, 2);
    const auto r = run_search(spec, cfg, train);
    // Events: before training and after epochs 3 and 5.
    ASSERT_EQ(r.queue.size(), 9u);
    std::vector<int> epochs;
    for (std::size_t n = 0; n < r.queue.size(); n += 3) epochs.push_back(r.queue[n].epoch);
    EXPECT_EQ(epochs, (std::vector<int>{0, 4, 6}));
    for (std::size_t n = 0; n < r.queue.size(); ++n) {
        const auto& e = r.queue[n];
        const auto& snap = e.epoch == 0 ? r.initial_theta : r.theta_history[static_cast<std::size_t>(e.epoch - 1)];
        Rng rng = sampling_rng(cfg.seed, e.epoch);
        Architecture a;
        for (int d = 0; d <= e.draw; ++d) a = sample_architecture(spec, snap, rng);
        a.epoch = e.epoch;
        a.seed = cfg.seed;
        EXPECT_EQ(a, e.arch) << "entry " << n;
        EXPECT_EQ(e.cost.total, cost_report(spec, e.arch, cfg.cost.objective).total);
    }
}

TEST(RunSearch, ResultsCsvIsDeterministic) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data(4, 20, 10);
    const auto cfg = short_search(5, 1);
    auto a = run_search(spec, cfg, train), b = run_search(spec, cfg, train);
    const auto child = short_child(2);
    train_queue(spec, a.queue, train, test, child);
    train_queue(spec, b.queue, train, test, child);
    EXPECT_EQ(results_csv(spec, a.queue), results_csv(spec, b.queue));
    EXPECT_EQ(metrics_csv(a.metrics), metrics_csv(b.metrics));
    EXPECT_EQ(theta_history_csv(a.theta_history), theta_history_csv(b.theta_history));
    auto c = cfg;
    c.seed = 2;
    EXPECT_NE(metrics_csv(run_search(spec, c, train).metrics), metrics_csv(a.metrics));
}

TEST(RunSearch, ResultsCsvLayout) {
    const auto spec = conv_spec({PrecisionCandidate::quantized(2, 8), PrecisionCandidate::full()});
    ArchQueue q(2);
    q[0].arch = Architecture::from_indices(spec, std::vector<std::size_t>{0, 1});
    q[0].cost = cost_report(spec, q[0].arch, CostObjective::ModelSize);
    q[0].accuracy = 0.5;
    q[1].arch = Architecture::uniform(spec, PrecisionCandidate::full());
    q[1].cost = cost_report(spec, q[1].arch, CostObjective::ModelSize);
    q[1].epoch = 10;
    q[1].failed = true;
    const auto csv = results_csv(spec, q);
    std::istringstream in(csv);
    std::string header, r0, r1;
    std::getline(in, header);
    std::getline(in, r0);
    std::getline(in, r1);
    EXPECT_EQ(header, "arch_id,epoch_sampled,w_bits.b1,w_bits.b2,a_bits.b1,a_bits.b2,cost,compression,test_accuracy");
    EXPECT_EQ(r0.substr(0, 14), "0,0,2,32,8,32,");
    EXPECT_EQ(r0.substr(r0.rfind(',') + 1), "0.5");
    EXPECT_EQ(r1.substr(0, 17), "1,10,32,32,32,32,");
    EXPECT_EQ(r1.substr(r1.rfind(',') + 1), "failed");
}

// Two blocks of {8-bit weights, full precision}: 8-bit weights are
// indistinguishable in accuracy and a quarter of the cost. The data is noisy
// enough that CE stays well away from zero (the cost term is multiplied by
// it) and theta has no weight decay pulling it back.
TEST(RunSearch, CheaperEquivalentCandidateWins) {
    const auto spec = conv_spec({PrecisionCandidate::quantized(8), PrecisionCandidate::full()});
    auto [train, test] = toy_data(4, 50, 5, 2.0);
    auto cfg = short_search(30, 2);
    cfg.temperature = {5.0, 0.1};
    cfg.theta_opt.weight_decay = 0.0;
    const auto r = run_search(spec, cfg, train);
    double initial_max = 0;
    for (const auto& t : r.initial_theta.theta) {
        const auto p = softmax_of(t);
        initial_max = std::max(initial_max, *std::max_element(p.begin(), p.end()));
    }
    double final_max = 0;
    for (std::size_t b = 0; b < r.final_theta.theta.size(); ++b) {
        const auto p = softmax_of(r.final_theta.theta[b]);
        EXPECT_GT(p[0], 0.9) << "block " << r.final_theta.ids[b];
        final_max = std::max(final_max, p[0]);
    }
    EXPECT_GT(final_max, initial_max);
    auto want = Architecture::uniform(spec, PrecisionCandidate::quantized(8));
    want.epoch = cfg.epochs;
    want.seed = cfg.seed;
    EXPECT_EQ(r.selected, want);
}

TEST(RunSearch, NonFiniteLossAbortsWithStateDump) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data(4, 10, 2);
    train.images[5] = std::numeric_limits<float>::quiet_NaN();
    const auto dir = fs::temp_directory_path() / "dnas_diverge_test";
    fs::remove_all(dir);
    EXPECT_THROW(run_search(spec, short_search(3, 1), train, dir), DivergenceError);
    ASSERT_TRUE(fs::exists(dir / "diverged.txt"));
    fs::remove_all(dir);
}

TEST(TrainChild, SeparableDataReachesFullAccuracy) {
    SuperNetSpec spec = conv_spec({PrecisionCandidate::full()}, 1, 2);
    auto [train, test] = toy_data(2, 50, 50, 0.2, 4);
    const auto r = train_child(spec, Architecture{}, train, test, short_child(20));
    ASSERT_FALSE(r.failed);
    EXPECT_EQ(r.eval.accuracy, 1.0);
}

TEST(TrainChild, OneBitNoBetterThanFullPrecision) {
    const auto spec = conv_spec(kThree, 3);
    auto [train, test] = toy_data(4, 60, 40, 2.0, 8);
    double one = 0, full = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        auto c = short_child(8);
        c.seed = seed;
        one += train_child(spec, Architecture::uniform(spec, PrecisionCandidate::quantized(1)), train, test, c).eval.accuracy;
        full += train_child(spec, Architecture::uniform(spec, PrecisionCandidate::full()), train, test, c).eval.accuracy;
    }
    EXPECT_LE(one / 3, full / 3);
}

TEST(TrainChild, DivergenceIsRecordedNotThrown) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data(4, 10, 2);
    train.images[0] = std::numeric_limits<float>::infinity();
    const auto r = train_child(spec, Architecture::uniform(spec, PrecisionCandidate::full()), train, test, short_child(2));
    EXPECT_TRUE(r.failed);
    EXPECT_FALSE(r.error.empty());
}

TEST(TrainChild, InvalidArchitectureRejected) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data(4, 4, 2);
    auto arch = Architecture::uniform(spec, PrecisionCandidate::full());
    arch.blocks[1].candidate = PrecisionCandidate::quantized(2);
    EXPECT_THROW(train_child(spec, arch, train, test, short_child(1)), SpecError);
}

TEST(Evaluate, ConstantLogitsGiveOneOverC) {
    const auto spec = conv_spec(kThree, 1, 4);
    auto [train, test] = toy_data(4, 2, 25);
    auto net = build_child<float>(spec, Architecture::uniform(spec, PrecisionCandidate::full()), 1);
    for (auto& t : net.weight_tensors())
        for (auto& v : t.data()) v = 0.0f;
    const auto r = evaluate(net, test);
    EXPECT_DOUBLE_EQ(r.accuracy, 0.25);
    EXPECT_NEAR(r.cross_entropy, std::log(4.0), 1e-6);
}

TEST(Evaluate, DeterministicAndRejectsEmpty) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data(4, 2, 10);
    auto net = build_child<float>(spec, Architecture::uniform(spec, PrecisionCandidate::quantized(4)), 3);
    const auto a = evaluate(net, test), b = evaluate(net, test, 7);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(evaluate(net, test).cross_entropy, a.cross_entropy);
    EXPECT_THROW(evaluate(net, test.empty_like()), std::invalid_argument);
}

TEST(Evaluate, CheckpointRoundTripKeepsAccuracyBitwise) {
    const auto spec = conv_spec(kThree);
    auto [train, test] = toy_data(4, 30, 20);
    const auto arch = Architecture::from_indices(spec, std::vector<std::size_t>{1, 2});
    auto r = train_child(spec, arch, train, test, short_child(3));
    ASSERT_FALSE(r.failed);
    const auto path = fs::temp_directory_path() / "dnas_child_roundtrip.ckpt";
    save_checkpoint(path, r.net->state());
    auto fresh = build_child<float>(spec, arch, 99);
    fresh.load_state(load_checkpoint<float>(path));
    const auto e = evaluate(fresh, test);
    EXPECT_EQ(e.accuracy, r.eval.accuracy);
    EXPECT_EQ(e.cross_entropy, r.eval.cross_entropy);
    fs::remove(path);
}

TEST(Batches, LoneTrailingExampleIsFolded) {
    Rng rng(1);
    const auto b = detail::shuffled_batches(33, 16, rng);
    ASSERT_EQ(b.size(), 2u);
    EXPECT_EQ(b[1].size(), 17u);
    std::vector<std::size_t> all;
    for (const auto& x : b) all.insert(all.end(), x.begin(), x.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> want(33);
    std::iota(want.begin(), want.end(), 0);
    EXPECT_EQ(all, want);
    EXPECT_EQ(detail::shuffled_batches(34, 16, rng).size(), 3u);
}

} // namespace
} // namespace dnas
