#include "gradcheck.hpp"

#include <dnas/cost_model.hpp>

#include <gtest/gtest.h>

#include <cmath>

namespace dnas {
namespace {

using testing::gradcheck;

SuperNetSpec resnet20_weight_search() {
    std::vector<PrecisionCandidate> c{PrecisionCandidate::skip()};
    for (int b : {1, 2, 3, 4, 8}) c.push_back(PrecisionCandidate::quantized(b));
    c.push_back(PrecisionCandidate::full());
    return resnet_spec(3, c);
}

// Independent layer-by-layer count of the ResNet20 layout.
struct HandCount {
    std::vector<std::size_t> block_params;  // both convs of each block
    std::size_t stem = 3 * 16 * 9, head = 64 * 10;
};

HandCount resnet20_hand_count() {
    HandCount h;
    const std::size_t channels[9][2] = {{16, 16}, {16, 16}, {16, 16}, {16, 32}, {32, 32},
                                        {32, 32}, {32, 64}, {64, 64}, {64, 64}};
    for (const auto& c : channels) h.block_params.push_back(c[0] * c[1] * 9 + c[1] * c[1] * 9);
    return h;
}

TEST(ParamCount, Examples) {
    EXPECT_EQ(param_count(OpSpec::conv(16, 16)), 2304u);
    EXPECT_EQ(param_count(OpSpec::conv(3, 16)), 432u);
    EXPECT_EQ(param_count(OpSpec::fc(64, 10)), 640u);
    EXPECT_EQ(param_count(OpSpec::fc(64, 10, true)), 650u);
}

TEST(ParamCount, Resnet20Total) {
    const auto h = resnet20_hand_count();
    std::size_t total = h.stem + h.head;
    for (auto p : h.block_params) total += p;
    EXPECT_EQ(total, 268336u);  // ~0.27M
    const auto spec = resnet20_weight_search();
    const auto fp = cost_report(spec, Architecture::uniform(spec, PrecisionCandidate::full()), CostObjective::ModelSize);
    EXPECT_DOUBLE_EQ(fp.total, 32.0 * total);
}

TEST(FlopCount, Examples) {
    EXPECT_EQ(flop_count(OpSpec::conv(1, 1, 3, 1, 0), 4, 4), 36u);
    const auto s1 = flop_count(OpSpec::conv(8, 8, 3, 1, 1), 16, 16);
    const auto s2 = flop_count(OpSpec::conv(8, 8, 3, 2, 1), 16, 16);
    EXPECT_EQ(s1, 4 * s2);
}

TEST(FlopCount, Resnet20PerLayer) {
    // MACs per layer: Cout*Cin*9*H'*W'.
    double macs = 3 * 16 * 9 * 32 * 32 + 64 * 10;
    const std::size_t layers[][3] = {{16, 16, 32}, {16, 32, 16}, {32, 32, 16}, {32, 64, 8}, {64, 64, 8}};
    const int repeats[] = {6, 1, 5, 1, 5};
    for (int i = 0; i < 5; ++i) macs += repeats[i] * static_cast<double>(layers[i][0] * layers[i][1] * 9 * layers[i][2] * layers[i][2]);
    const auto spec = resnet20_weight_search();
    const auto r = cost_report(spec, Architecture::uniform(spec, PrecisionCandidate::full()), CostObjective::Compute);
    EXPECT_DOUBLE_EQ(r.total, macs * 32 * 32);
    EXPECT_DOUBLE_EQ(r.compression, 1.0);
}

TEST(CostReport, MixedResnet20Compression) {
    const auto spec = resnet20_weight_search();
    const int bits[9] = {4, 4, 3, 3, 3, 4, 4, 3, 1};
    Architecture arch;
    for (std::size_t i = 0; i < 9; ++i) arch.blocks.push_back({spec.blocks[i].id, candidate_from_bits(bits[i])});
    const auto r = cost_report(spec, arch, CostObjective::ModelSize);
    const auto h = resnet20_hand_count();
    double expected = 32.0 * (h.stem + h.head);
    for (std::size_t i = 0; i < 9; ++i) expected += bits[i] * static_cast<double>(h.block_params[i]);
    EXPECT_DOUBLE_EQ(r.total, expected);
    EXPECT_GE(r.compression, 10.0);
    EXPECT_LE(r.compression, 13.0);
    double sum = 0;
    for (const auto& [id, c] : r.breakdown) sum += c;
    EXPECT_DOUBLE_EQ(sum, r.total);
    EXPECT_EQ(r.breakdown.front().first, "stem");
    EXPECT_EQ(r.breakdown.back().first, "head");
}

TEST(CostReport, AllFullPrecisionIsBaseline) {
    const auto spec = resnet20_weight_search();
    for (auto obj : {CostObjective::ModelSize, CostObjective::Compute}) {
        EXPECT_EQ(cost_report(spec, Architecture::uniform(spec, PrecisionCandidate::full()), obj).compression, 1.0);
    }
}

TEST(CostReport, SkipCostsNothing) {
    const auto spec = resnet20_weight_search();
    for (auto obj : {CostObjective::ModelSize, CostObjective::Compute}) {
        const auto r = cost_report(spec, Architecture::uniform(spec, PrecisionCandidate::skip()), obj);
        for (const auto& [id, c] : r.breakdown) {
            const bool skip_legal = id != "g2b1" && id != "g3b1";
            if (id != "stem" && id != "head" && skip_legal) EXPECT_EQ(c, 0.0) << id;
        }
    }
}

TEST(ExpectedCost, SingleBlockMix) {
    SuperNetSpec spec;
    spec.stem_channels = 16;
    spec.blocks.push_back({"x", BlockKind::Conv, 16, 1, {PrecisionCandidate::quantized(4), PrecisionCandidate::quantized(8)}});
    const auto table = build_cost_table(spec, CostObjective::ModelSize);
    Tensor<double> m(Shape{2}, 0.5);
    const double fixed = 32.0 * (432 + 160);
    EXPECT_DOUBLE_EQ(expected_cost(table, std::vector<Tensor<double>>{m}).item() - fixed, 13824.0);
}

TEST(ExpectedCost, OneHotEqualsExactCost) {
    const auto spec = resnet20_weight_search();
    const auto table = build_cost_table(spec, CostObjective::Compute);
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        std::vector<std::size_t> idx;
        for (auto i : spec.choice_blocks()) idx.push_back(rng.below(spec.blocks[i].candidates.size()));
        const auto arch = Architecture::from_indices(spec, idx);
        EXPECT_DOUBLE_EQ(expected_cost(table, hard_masks<double>(spec, arch)).item(), cost_report(spec, arch, CostObjective::Compute).total);
    }
}

TEST(ExpectedCost, LinearInMasks) {
    const auto spec = resnet20_weight_search();
    const auto table = build_cost_table(spec, CostObjective::ModelSize);
    Rng rng(2);
    auto random_masks = [&] {
        std::vector<Tensor<double>> ms;
        for (const auto& c : table.choice_costs) {
            Tensor<double> m(Shape{c.size()});
            for (auto& v : m.values()) v = rng.uniform();
            ms.push_back(m);
        }
        return ms;
    };
    const auto a = random_masks(), b = random_masks();
    std::vector<Tensor<double>> ab;
    for (std::size_t i = 0; i < a.size(); ++i) ab.push_back(add(scale(a[i], 0.3), scale(b[i], 0.7)));
    const double fa = expected_cost(table, a).item() - table.fixed, fb = expected_cost(table, b).item() - table.fixed;
    EXPECT_NEAR(expected_cost(table, ab).item() - table.fixed, 0.3 * fa + 0.7 * fb, 1e-6);
}

TEST(ExpectedCost, MonotoneInBitWidth) {
    const auto spec = resnet20_weight_search();
    for (auto obj : {CostObjective::ModelSize, CostObjective::Compute}) {
        const auto table = build_cost_table(spec, obj);
        for (const auto& costs : table.choice_costs)
            for (std::size_t k = 1; k < costs.size(); ++k) EXPECT_LE(costs[k - 1], costs[k]);
    }
}

TEST(ExpectedCost, PerExampleRows) {
    const auto spec = resnet20_weight_search();
    const auto table = build_cost_table(spec, CostObjective::ModelSize);
    const auto arch = Architecture::uniform(spec, PrecisionCandidate::quantized(2));
    std::vector<Tensor<double>> rows;
    for (const auto& m : hard_masks<double>(spec, arch)) rows.push_back(broadcast_rows(m, 3));
    const auto c = expected_cost(table, rows);
    ASSERT_EQ(c.shape(), (Shape{3}));
    for (std::size_t r = 0; r < 3; ++r) EXPECT_DOUBLE_EQ(c[r], cost_report(spec, arch, CostObjective::ModelSize).total);
}

TEST(CostWeighting, Values) {
    EXPECT_NEAR(cost_weighting(std::exp(10.0), 0.1, 0.9), 0.1 * std::pow(10.0, 0.9), 1e-12);
    EXPECT_NEAR(cost_weighting(std::exp(10.0), 0.1, 0.9), 0.7943282347, 1e-6);
    EXPECT_NEAR(cost_weighting(1234.5, 1.0, 1.0), std::log(1234.5), 1e-12);
    const CostConfig defaults;
    EXPECT_EQ(defaults.beta, 0.1);
    EXPECT_EQ(defaults.gamma, 0.9);
    EXPECT_THROW(cost_weighting(1.0, 0.1, 0.9), CostError);
    EXPECT_THROW(cost_weighting(Tensor<double>(Shape{1}, 0.5), 0.1, 0.9), CostError);
}

TEST(CostWeighting, IncreasingInBetaAndGamma) {
    const double c = std::exp(5.0);  // ln c > 1
    for (double g = 0.1; g < 3; g += 0.1) EXPECT_LT(cost_weighting(c, 0.1, g), cost_weighting(c, 0.1, g + 0.1));
    for (double b = 0.1; b < 3; b += 0.1) EXPECT_LT(cost_weighting(c, b, 0.9), cost_weighting(c, b + 0.1, 0.9));
}

TEST(CostWeighting, TapeMatchesScalarAndGradient) {
    Tensor<double> c(Shape{2}, std::vector<double>{150.0, 9000.0});
    auto w = cost_weighting(c, 0.3, 0.7);
    EXPECT_NEAR(w[0], cost_weighting(150.0, 0.3, 0.7), 1e-12);
    EXPECT_LT(gradcheck([&] { return sum(cost_weighting(c, 0.3, 0.7)); }, {c}, 1e-3), 1e-6);
}

TEST(CostWeighting, CalibrationMakesInitialWeightOne) {
    const auto spec = resnet20_weight_search();
    const auto table = build_cost_table(spec, CostObjective::ModelSize);
    const auto cfg = resolve_cost_config({}, table);
    ThetaSnapshot uniform;
    for (const auto& c : table.choice_costs) uniform.theta.emplace_back(c.size(), 0.0);
    EXPECT_NEAR(cost_weighting(initial_expected_cost(table, uniform), cfg.beta, cfg.gamma), 1.0, 1e-12);
    EXPECT_FALSE(cfg.auto_calibrate_beta);
}

TEST(TotalLoss, UnitWeightAndScaling) {
    Tensor<double> ce(Shape{1}, 2.5), one(Shape{1}, 1.0), two(Shape{1}, 2.0);
    EXPECT_EQ(total_loss(ce, one).item(), 2.5);
    EXPECT_EQ(total_loss(ce, two).item(), 5.0);
}

TEST(TotalLoss, DoublingWeightDoublesWeightGradients) {
    Rng rng(3);
    auto x = testing::random_tensor({4, 3}, rng);
    auto w = testing::random_tensor({5, 3}, rng);
    std::vector<int> y{0, 4, 2, 1};
    w.set_requires_grad(true);
    backward(total_loss(softmax_cross_entropy(linear(x, w), y), Tensor<double>(Shape{1}, 1.3)));
    std::vector<double> g1(w.grad().begin(), w.grad().end());
    w.zero_grad();
    backward(total_loss(softmax_cross_entropy(linear(x, w), y), Tensor<double>(Shape{1}, 2.6)));
    for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2 * g1[i]);
}

// Full search loss on a two-block toy super net: theta enters through the
// masks in both the cross-entropy and the cost factor.
TEST(TotalLoss, ThetaGradientMatchesFiniteDifferences) {
    SuperNetSpec spec;
    spec.in_channels = 2;
    spec.height = spec.width = 6;
    spec.classes = 3;
    spec.stem_channels = 4;
    const std::vector<PrecisionCandidate> cands{PrecisionCandidate::quantized(1), PrecisionCandidate::quantized(4),
                                                PrecisionCandidate::full()};
    spec.blocks.push_back({"p", BlockKind::Residual, 4, 1, cands});
    spec.blocks.push_back({"q", BlockKind::Residual, 8, 2, cands});
    Network<double> net(spec, 4);
    net.set_weights_trainable(false);
    const auto table = build_cost_table(spec, CostObjective::ModelSize);
    const auto cfg = resolve_cost_config({}, table);
    Rng rng(5);
    Tensor<double> x(Shape{3, 2, 6, 6});
    for (auto& v : x.values()) v = rng.normal();
    const std::vector<int> y{2, 0, 1};
    auto& th = net.theta_tensors();
    th[0][1] = 0.4;
    th[1][0] = -0.2;
    for (bool per_example : {false, true}) {
        auto loss = [&] {
            Rng draw(6);
            std::vector<Tensor<double>> masks;
            for (auto& t : th) masks.push_back(sample_soft_masks(t, 1.5, draw, per_example ? 3 : 0));
            auto logits = net.forward(x, masks, {Mode::Train, false});
            auto ce = per_example ? cross_entropy_per_example(logits, y) : softmax_cross_entropy(logits, y);
            return total_loss(ce, cost_weighting(expected_cost(table, masks), cfg.beta, cfg.gamma));
        };
        EXPECT_LT(gradcheck(loss, {th[0], th[1]}), 1e-4) << "per_example=" << per_example;
        for (const auto& t : th)
            for (double g : t.grad()) EXPECT_NE(g, 0.0);
    }
}

} // namespace
} // namespace dnas
