#pragma once

#include <dnas/pipeline.hpp>

#include <algorithm>
#include <limits>

namespace dnas {

/// The choice blocks of a spec and their candidates. Fixed blocks are not part
/// of the space.
struct DesignSpace {
    std::vector<std::string> ids;
    std::vector<std::size_t> sizes;

    static DesignSpace of(const SuperNetSpec& spec) {
        DesignSpace d;
        for (auto i : spec.choice_blocks()) {
            d.ids.push_back(spec.blocks[i].id);
            d.sizes.push_back(spec.blocks[i].candidates.size());
        }
        return d;
    }

    /// Product of the candidate counts, saturating at SIZE_MAX.
    std::size_t size() const {
        std::size_t n = 1;
        for (auto k : sizes) {
            if (n > std::numeric_limits<std::size_t>::max() / k) return std::numeric_limits<std::size_t>::max();
            n *= k;
        }
        return n;
    }
};

class SpaceTooLarge : public std::length_error {
public:
    using std::length_error::length_error;
};

/// Every architecture of the spec, in lexicographic order of candidate
/// indices (the last choice block varies fastest).
inline std::vector<Architecture> enumerate(const SuperNetSpec& spec, std::size_t limit = 4096) {
    const auto space = DesignSpace::of(spec);
    const auto n = space.size();
    if (n > limit) {
        throw SpaceTooLarge("design space has " + std::to_string(n) + " architectures, limit is " + std::to_string(limit));
    }
    std::vector<Architecture> out;
    out.reserve(n);
    std::vector<std::size_t> idx(space.sizes.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(Architecture::from_indices(spec, idx));
        for (std::size_t b = idx.size(); b-- > 0;) {
            if (++idx[b] < space.sizes[b]) break;
            idx[b] = 0;
        }
    }
    return out;
}

struct OracleEntry {
    Architecture arch;
    std::vector<std::size_t> indices;
    double ce = 0, accuracy = 0, cost = 0, loss = 0;
    bool failed = false;
};

/// Sorts by the search objective CE x C(cost); ties go to the lower cost,
/// then to the lexicographically smaller candidate indices.
inline void rank_entries(std::vector<OracleEntry>& entries) {
    std::sort(entries.begin(), entries.end(), [](const OracleEntry& a, const OracleEntry& b) {
        if (a.loss != b.loss) return a.loss < b.loss;
        if (a.cost != b.cost) return a.cost < b.cost;
        return a.indices < b.indices;
    });
}

/// Trains every architecture with the same budget and seed, evaluates it on
/// `test`, and ranks by the search loss with the cost weighting `cost`
/// (beta already resolved). Diverged runs rank with infinite loss.
inline std::vector<OracleEntry> oracle_rank(const SuperNetSpec& spec, const std::vector<Architecture>& archs,
                                            const Dataset& train, const Dataset& test, const ChildConfig& child,
                                            CostObjective objective, const CostConfig& cost) {
    std::vector<OracleEntry> out;
    for (const auto& a : archs) {
        OracleEntry e;
        e.arch = a;
        e.indices = a.indices(spec);
        e.cost = cost_report(spec, a, objective).total;
        auto r = train_child(spec, a, train, test, child);
        e.failed = r.failed;
        if (r.failed) {
            e.ce = e.loss = std::numeric_limits<double>::infinity();
        } else {
            e.ce = r.eval.cross_entropy;
            e.accuracy = r.eval.accuracy;
            e.loss = e.ce * cost_weighting(e.cost, cost.beta, cost.gamma);
        }
        out.push_back(std::move(e));
    }
    rank_entries(out);
    return out;
}

/// rank / (size - 1); 0 is the best architecture.
inline double percentile_of(const SuperNetSpec& spec, const Architecture& arch, const std::vector<OracleEntry>& ranking) {
    const auto idx = arch.indices(spec);
    for (std::size_t r = 0; r < ranking.size(); ++r) {
        if (ranking[r].indices == idx) {
            return ranking.size() == 1 ? 0.0 : static_cast<double>(r) / static_cast<double>(ranking.size() - 1);
        }
    }
    throw std::invalid_argument("architecture not present in the oracle ranking");
}

inline std::string arch_code(const Architecture& a) {
    std::string s;
    for (const auto& b : a.blocks) {
        if (!s.empty()) s += "-";
        s += b.candidate.label();
    }
    return s;
}

inline std::string oracle_csv(const std::vector<OracleEntry>& ranking) {
    std::ostringstream o;
    o << "arch,ce,cost,loss,accuracy,rank\n";
    for (std::size_t r = 0; r < ranking.size(); ++r) {
        const auto& e = ranking[r];
        o << arch_code(e.arch) << "," << format_double(e.ce) << "," << format_double(e.cost) << ","
          << format_double(e.loss) << "," << (e.failed ? std::string("failed") : format_double(e.accuracy)) << "," << r
          << "\n";
    }
    return o.str();
}

} // namespace dnas
