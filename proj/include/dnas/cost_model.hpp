#pragma once

#include <dnas/ops.hpp>
#include <dnas/supernet.hpp>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace dnas {

enum class CostObjective { ModelSize, Compute };

inline const char* to_string(CostObjective o) { return o == CostObjective::ModelSize ? "size" : "flops"; }

struct CostConfig {
    CostObjective objective = CostObjective::ModelSize;
    double beta = 0.1;
    double gamma = 0.9;
    bool auto_calibrate_beta = true;
};

/// Convolution or linear layer, as far as counting is concerned.
struct OpSpec {
    enum class Kind { Conv, Linear } kind = Kind::Conv;
    std::size_t in = 0, out = 0;
    std::size_t kh = 3, kw = 3, stride = 1, padding = 1;
    bool bias = false;

    static OpSpec conv(std::size_t cin, std::size_t cout, std::size_t k = 3, std::size_t stride = 1, std::size_t pad = 1) {
        return {Kind::Conv, cin, cout, k, k, stride, pad, false};
    }
    static OpSpec fc(std::size_t in, std::size_t out, bool bias = false) { return {Kind::Linear, in, out, 1, 1, 1, 0, bias}; }
};

/// Conv: Cout*Cin*kh*kw. Linear: in*out (+out with bias). BN never counted.
inline std::size_t param_count(const OpSpec& op) {
    if (op.kind == OpSpec::Kind::Linear) return op.in * op.out + (op.bias ? op.out : 0);
    return op.out * op.in * op.kh * op.kw;
}

/// Multiply-accumulates for one input of spatial size h x w.
inline std::size_t flop_count(const OpSpec& op, std::size_t h = 1, std::size_t w = 1) {
    if (op.kind == OpSpec::Kind::Linear) return op.in * op.out;
    const std::size_t oh = (h + 2 * op.padding - op.kh) / op.stride + 1;
    const std::size_t ow = (w + 2 * op.padding - op.kw) / op.stride + 1;
    return op.out * op.in * op.kh * op.kw * oh * ow;
}

/// Weight-bearing layers of one block at the given geometry.
inline std::vector<std::pair<OpSpec, std::pair<std::size_t, std::size_t>>> block_ops(BlockKind kind, const BlockGeometry& g) {
    std::vector<std::pair<OpSpec, std::pair<std::size_t, std::size_t>>> ops;
    ops.push_back({OpSpec::conv(g.in_channels, g.out_channels, 3, g.stride, 1), {g.in_h, g.in_w}});
    if (kind == BlockKind::Residual) ops.push_back({OpSpec::conv(g.out_channels, g.out_channels, 3, 1, 1), {g.out_h, g.out_w}});
    return ops;
}

inline double candidate_cost(BlockKind kind, const BlockGeometry& g, const PrecisionCandidate& c, CostObjective obj) {
    if (c.is_skip()) return 0.0;
    double total = 0.0;
    for (const auto& [op, hw] : block_ops(kind, g)) {
        if (obj == CostObjective::ModelSize) {
            total += static_cast<double>(param_count(op)) * c.weight_bits();
        } else {
            total += static_cast<double>(flop_count(op, hw.first, hw.second)) * c.weight_bits() * c.act_bits();
        }
    }
    return total;
}

/// Per-candidate costs of every choice block plus the fixed-layer terms.
/// Stem, head and single-candidate blocks are fixed; stem and head count at
/// 32 bits. The baseline is the same network at 32 bits everywhere.
struct CostTable {
    CostObjective objective = CostObjective::ModelSize;
    std::vector<std::string> choice_ids;
    std::vector<std::vector<double>> choice_costs;
    std::vector<std::pair<std::string, double>> fixed_terms;
    double fixed = 0.0;
    double baseline = 0.0;
};

inline CostTable build_cost_table(const SuperNetSpec& spec, CostObjective obj) {
    spec.validate();
    CostTable table;
    table.objective = obj;
    const double fp_unit = obj == CostObjective::ModelSize ? 32.0 : 32.0 * 32.0;
    auto fixed_op = [&](const std::string& name, const OpSpec& op, std::size_t h, std::size_t w) {
        const double count = obj == CostObjective::ModelSize ? static_cast<double>(param_count(op))
                                                             : static_cast<double>(flop_count(op, h, w));
        table.fixed_terms.push_back({name, count * fp_unit});
        table.fixed += count * fp_unit;
        table.baseline += count * fp_unit;
    };
    fixed_op("stem", OpSpec::conv(spec.in_channels, spec.stem_channels), spec.height, spec.width);
    const auto geo = spec.geometry();
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
        const auto& b = spec.blocks[i];
        table.baseline += candidate_cost(b.kind, geo[i], PrecisionCandidate::full(), obj);
        if (b.searchable()) {
            table.choice_ids.push_back(b.id);
            std::vector<double> costs;
            for (const auto& c : b.candidates) costs.push_back(candidate_cost(b.kind, geo[i], c, obj));
            table.choice_costs.push_back(std::move(costs));
        } else {
            const double c = candidate_cost(b.kind, geo[i], b.candidates.front(), obj);
            table.fixed_terms.push_back({b.id, c});
            table.fixed += c;
        }
    }
    fixed_op("head", OpSpec::fc(spec.final_channels(), spec.classes), 1, 1);
    return table;
}

struct CostReport {
    CostObjective objective = CostObjective::ModelSize;
    double total = 0.0;
    std::vector<std::pair<std::string, double>> breakdown;
    double baseline = 0.0;
    double compression = 1.0;
};

/// Exact cost of a hard architecture, broken down stem / blocks / head.
inline CostReport cost_report(const SuperNetSpec& spec, const Architecture& arch, CostObjective obj) {
    const auto table = build_cost_table(spec, obj);
    const auto idx = arch.indices(spec);
    CostReport r;
    r.objective = obj;
    r.baseline = table.baseline;
    std::size_t fixed = 0, choice = 0;
    r.breakdown.push_back(table.fixed_terms[fixed++]);
    for (const auto& b : spec.blocks) {
        if (b.searchable()) {
            r.breakdown.push_back({b.id, table.choice_costs[choice][idx[choice]]});
            ++choice;
        } else {
            r.breakdown.push_back(table.fixed_terms[fixed++]);
        }
    }
    r.breakdown.push_back(table.fixed_terms[fixed]);
    for (const auto& term : r.breakdown) r.total += term.second;
    r.compression = r.baseline / r.total;
    return r;
}

/// Expected cost under per-block probability vectors, in plain arithmetic.
inline double expected_cost_value(const CostTable& table, const std::vector<std::vector<double>>& probs) {
    if (probs.size() != table.choice_costs.size()) throw SpecError("mask count does not match choice blocks");
    double total = table.fixed;
    for (std::size_t b = 0; b < probs.size(); ++b) {
        if (probs[b].size() != table.choice_costs[b].size()) throw SpecError("mask length mismatch");
        for (std::size_t k = 0; k < probs[b].size(); ++k) total += probs[b][k] * table.choice_costs[b][k];
    }
    return total;
}

/// Expected cost on the tape: fixed + sum_b sum_k m_bk * cost_bk. Masks of
/// shape [K] give a scalar [1]; masks of shape [N,K] give per-example [N].
template <class T>
Tensor<T> expected_cost(const CostTable& table, const std::vector<Tensor<T>>& masks) {
    if (masks.size() != table.choice_costs.size()) throw SpecError("mask count does not match choice blocks");
    const std::size_t rows = masks.empty() || masks.front().rank() == 1 ? 1 : masks.front().dim(0);
    std::vector<T> out(rows, static_cast<T>(table.fixed));
    for (std::size_t b = 0; b < masks.size(); ++b) {
        const auto& costs = table.choice_costs[b];
        if (masks[b].shape().back() != costs.size() || masks[b].numel() != rows * costs.size()) {
            throw ShapeError("expected_cost: mask shape mismatch for block " + table.choice_ids[b]);
        }
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < costs.size(); ++k) out[r] += masks[b][r * costs.size() + k] * static_cast<T>(costs[k]);
    }
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& m : masks) nodes.push_back(m.node());
    return detail::make_result_n<T>(Shape{rows}, std::move(out), "expected_cost", masks,
                                    [nodes, costs = table.choice_costs, rows](Node<T>& self) {
                                        for (std::size_t b = 0; b < nodes.size(); ++b) {
                                            if (!nodes[b]->requires_grad) continue;
                                            auto& g = nodes[b]->ensure_grad();
                                            const std::size_t k = costs[b].size();
                                            for (std::size_t r = 0; r < rows; ++r)
                                                for (std::size_t j = 0; j < k; ++j)
                                                    g[r * k + j] += self.grad[r] * static_cast<T>(costs[b][j]);
                                        }
                                    });
}

class CostError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// C(cost) = beta * (ln cost)^gamma, for cost > 1.
inline double cost_weighting(double cost, double beta, double gamma) {
    if (!(cost > 1.0)) throw CostError("cost weighting needs cost > 1, got " + std::to_string(cost));
    return beta * std::pow(std::log(cost), gamma);
}

/// Tape version, elementwise over a cost tensor.
template <class T>
Tensor<T> cost_weighting(const Tensor<T>& cost, double beta, double gamma) {
    for (T c : cost.data()) {
        if (!(c > T{1})) throw CostError("cost weighting needs cost > 1, got " + std::to_string(static_cast<double>(c)));
    }
    // beta * exp(gamma * ln(ln cost))
    return scale(exp(scale(log(log(cost)), static_cast<T>(gamma))), static_cast<T>(beta));
}

/// beta such that C(initial_cost) == 1.
inline double calibrate_beta(double initial_cost, double gamma) {
    if (!(initial_cost > 1.0)) throw CostError("cannot calibrate beta for cost <= 1");
    return 1.0 / std::pow(std::log(initial_cost), gamma);
}

/// Expected cost of the spec when every choice block follows softmax(theta).
inline double initial_expected_cost(const CostTable& table, const ThetaSnapshot& theta) {
    std::vector<std::vector<double>> probs;
    for (const auto& t : theta.theta) probs.push_back(edge_probabilities<double>(t));
    return expected_cost_value(table, probs);
}

/// Cost config with beta resolved: calibrated against the expected cost at
/// uniform theta when auto-calibration is on.
inline CostConfig resolve_cost_config(const CostConfig& cfg, const CostTable& table) {
    CostConfig out = cfg;
    if (cfg.auto_calibrate_beta) {
        ThetaSnapshot uniform;
        for (const auto& c : table.choice_costs) uniform.theta.emplace_back(c.size(), 0.0);
        out.beta = calibrate_beta(initial_expected_cost(table, uniform), cfg.gamma);
        out.auto_calibrate_beta = false;
    }
    return out;
}

/// CE x C(cost): the search loss. Shapes must match ([1] or per-example [N]);
/// per-example losses are averaged.
template <class T>
Tensor<T> total_loss(const Tensor<T>& cross_entropy, const Tensor<T>& weighted_cost) {
    auto prod = mul(cross_entropy, weighted_cost);
    return prod.numel() == 1 ? prod : mean(prod);
}

} // namespace dnas
