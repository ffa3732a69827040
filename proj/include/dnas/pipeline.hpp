#pragma once

#include <dnas/io.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>

namespace dnas {

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EvalResult {
    double accuracy = 0.0;
    double cross_entropy = 0.0;
};

/// Top-1 accuracy and mean cross-entropy in eval mode. Ties in the logits go
/// to the lowest class index.
template <class T>
EvalResult evaluate(Network<T>& net, const Dataset& data, std::size_t batch_size = 256) {
    if (data.size() == 0) throw std::invalid_argument("evaluate: empty test set");
    NoGradGuard guard;
    std::size_t correct = 0;
    double ce = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        auto [x, y] = make_batch<T>(data, idx);
        const auto logits = net.forward(x, ForwardOptions{Mode::Eval, false});
        const auto losses = cross_entropy_per_example(logits, y);
        const std::size_t c = logits.dim(1);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < c; ++k)
                if (logits[r * c + k] > logits[r * c + best]) best = k;
            correct += static_cast<int>(best) == y[r];
            ce += static_cast<double>(losses[r]);
        }
    }
    return {static_cast<double>(correct) / static_cast<double>(data.size()), ce / static_cast<double>(data.size())};
}

namespace detail {

inline std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch) {
        std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(s),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch)));
        // BatchNorm needs two values per channel; fold a lone trailing example into the previous batch.
        if (b.size() == 1 && !out.empty()) {
            out.back().push_back(b.front());
        } else {
            out.push_back(std::move(b));
        }
    }
    return out;
}

} // namespace detail

// ------------------------------------------------------------------ children

struct ChildResult {
    bool failed = false;
    std::string error;
    EvalResult eval;
    std::unique_ptr<Network<float>> net;
};

/// Fresh child from `arch`, trained with SGD momentum + cosine decay (and
/// cutout when enabled) for a fixed epoch budget, then evaluated on `test`.
/// Divergence is reported in the result, not thrown.
inline ChildResult train_child(const SuperNetSpec& spec, const Architecture& arch, const Dataset& train,
                               const Dataset& test, const ChildConfig& cfg) {
    cfg.validate();
    arch.indices(spec);
    ChildResult res;
    res.net = std::make_unique<Network<float>>(build_child<float>(spec, arch, cfg.seed));
    auto& net = *res.net;
    SgdMomentum<float> opt(net.weight_tensors(), cfg.sgd);
    Rng shuffle(cfg.seed, 0xc41d), aug(cfg.seed, 0xc07);
    const bool cut = cfg.cutout && cfg.cutout_size <= std::min(train.height, train.width);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(cfg.sgd.lr, epoch, cfg.epochs);
        for (const auto& idx : detail::shuffled_batches(train.size(), cfg.batch_size, shuffle)) {
            auto [x, y] = make_batch<float>(train, idx);
            if (cut) {
                const std::size_t per = train.image_size();
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    cutout(x.data().subspan(i * per, per), train.channels, train.height, train.width, cfg.cutout_size, aug);
                }
            }
            opt.zero_grad();
            const auto loss = softmax_cross_entropy(net.forward(x), y);
            if (!std::isfinite(loss.item())) {
                res.failed = true;
                res.error = "non-finite loss at child epoch " + std::to_string(epoch);
                return res;
            }
            backward(loss);
            opt.step(lr);
            net.clamp_alphas();
        }
    }
    res.eval = evaluate(net, test);
    return res;
}

// -------------------------------------------------------------------- search

struct QueueEntry {
    Architecture arch;
    CostReport cost;
    int epoch = 0;  // completed search epochs when sampled
    int draw = 0;
    std::optional<double> accuracy;
    std::optional<double> cross_entropy;
    bool failed = false;
    std::string error;
};

using ArchQueue = std::vector<QueueEntry>;

struct EpochMetrics {
    int epoch = 0;
    std::string phase;  // "w" or "theta"
    double loss = 0, ce = 0, cost = 0, tau = 0, lr = 0;
};

struct SearchResult {
    ArchQueue queue;
    std::vector<EpochMetrics> metrics;
    std::vector<ThetaSnapshot> theta_history;  // after each epoch
    ThetaSnapshot initial_theta, final_theta;
    Architecture selected;  // per-block argmax of the final theta
    CostConfig cost;        // beta resolved
};

/// Sampling events happen before training (epoch 0, the initial theta) and
/// after epoch e (0-based) when e > warmup and (e + 1) % sample_every == 0.
inline bool samples_after(const SearchConfig& cfg, int epoch) {
    return epoch > cfg.warmup && (epoch + 1) % cfg.sample_every == 0;
}

/// The generator for the draws of the sampling event at `epoch`.
inline Rng sampling_rng(std::uint64_t seed, int epoch) { return Rng(seed, 0xa5c0'0000ULL + static_cast<std::uint64_t>(epoch)); }

inline void sample_event(const SuperNetSpec& spec, const SearchConfig& cfg, const ThetaSnapshot& theta, int epoch,
                         ArchQueue& queue) {
    Rng rng = sampling_rng(cfg.seed, epoch);
    for (int d = 0; d < cfg.samples_per_event; ++d) {
        QueueEntry e;
        e.arch = sample_architecture(spec, theta, rng);
        e.arch.epoch = epoch;
        e.arch.seed = cfg.seed;
        e.cost = cost_report(spec, e.arch, cfg.cost.objective);
        e.epoch = epoch;
        e.draw = d;
        queue.push_back(std::move(e));
    }
}

namespace detail {

inline std::string theta_text(const ThetaSnapshot& s) {
    std::ostringstream o;
    for (std::size_t i = 0; i < s.ids.size(); ++i) {
        o << s.ids[i] << ":";
        for (double v : s.theta[i]) o << " " << format_double(v);
        o << "\n";
    }
    return o.str();
}

} // namespace detail

/// Called after every weight or theta epoch with that epoch's metrics.
using PhaseObserver = std::function<void(const EpochMetrics&, const Network<float>&)>;

/// Alternating weight / theta epochs with temperature annealing and periodic
/// architecture sampling. `train` is split into the weight and theta parts.
/// Writes the supernet checkpoint (and diverged.txt on failure) when `out` is
/// non-empty.
inline SearchResult run_search(const SuperNetSpec& spec, const SearchConfig& cfg, const Dataset& train,
                               const std::filesystem::path& out = {}, const PhaseObserver& observe = {}) {
    spec.validate();
    cfg.validate();
    if (spec.choice_blocks().empty()) throw SpecError("spec has no choice blocks");
    auto [xw, xt] = split_search_data(train, cfg.split_ratio, cfg.seed);
    if (xw.size() == 0 || xt.size() == 0) throw std::invalid_argument("search split left one side empty");

    SearchResult res;
    const auto table = build_cost_table(spec, cfg.cost.objective);
    res.cost = resolve_cost_config(cfg.cost, table);
    Network<float> net(spec, cfg.seed);
    SgdMomentum<float> wopt(net.weight_tensors(), cfg.weight_opt);
    Adam<float> topt(net.theta_tensors(), cfg.theta_opt);
    Rng gumbel(cfg.seed, 0x6a3b), shuffle(cfg.seed, 0x5b0f);

    res.initial_theta = net.theta_snapshot();
    sample_event(spec, cfg, res.initial_theta, 0, res.queue);

    auto diverged = [&](int epoch, const char* phase, std::size_t batch, double loss) {
        std::ostringstream msg;
        msg << "non-finite search loss " << loss << " at epoch " << epoch << ", phase " << phase << ", batch " << batch;
        if (!out.empty()) {
            write_text(out / "diverged.txt", msg.str() + "\ntheta:\n" + detail::theta_text(net.theta_snapshot()));
        }
        throw DivergenceError(msg.str());
    };

    // One pass over `data` with the search loss; returns the batch averages.
    auto run_phase = [&](const Dataset& data, int epoch, bool weights, double tau, double lr) {
        net.set_weights_trainable(weights);
        net.set_theta_trainable(!weights);
        const ForwardOptions f{Mode::Train, weights};
        EpochMetrics m;
        m.epoch = epoch;
        m.phase = weights ? "w" : "theta";
        m.tau = tau;
        m.lr = lr;
        std::size_t batches = 0;
        for (const auto& idx : detail::shuffled_batches(data.size(), cfg.batch_size, shuffle)) {
            auto [x, y] = make_batch<float>(data, idx);
            const std::size_t rows = cfg.granularity == MaskGranularity::Example ? idx.size() : 0;
            std::vector<Tensor<float>> masks;
            for (auto& t : net.theta_tensors()) masks.push_back(sample_soft_masks(t, tau, gumbel, rows));
            const auto logits = net.forward(x, masks, f);
            const auto ce = rows ? cross_entropy_per_example(logits, y) : softmax_cross_entropy(logits, y);
            const auto cost = expected_cost(table, masks);
            const auto loss = total_loss(ce, cost_weighting(cost, res.cost.beta, res.cost.gamma));
            if (!std::isfinite(loss.item())) diverged(epoch, m.phase.c_str(), batches, loss.item());
            if (weights) {
                wopt.zero_grad();
                backward(loss);
                wopt.step(lr);
                net.clamp_alphas();
            } else {
                topt.zero_grad();
                backward(loss);
                topt.step(lr);
            }
            double ce_mean = 0, cost_mean = 0;
            for (float v : ce.data()) ce_mean += v;
            for (float v : cost.data()) cost_mean += v;
            m.loss += loss.item();
            m.ce += ce_mean / static_cast<double>(ce.numel());
            m.cost += cost_mean / static_cast<double>(cost.numel());
            ++batches;
        }
        m.loss /= static_cast<double>(batches);
        m.ce /= static_cast<double>(batches);
        m.cost /= static_cast<double>(batches);
        if (observe) observe(m, net);
        return m;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double tau = cfg.temperature.at(epoch);
        res.metrics.push_back(run_phase(xw, epoch, true, tau, cosine_lr(cfg.weight_opt.lr, epoch, cfg.epochs)));
        if (epoch > cfg.warmup) res.metrics.push_back(run_phase(xt, epoch, false, tau, cfg.theta_opt.lr));
        res.theta_history.push_back(net.theta_snapshot());
        if (samples_after(cfg, epoch)) sample_event(spec, cfg, res.theta_history.back(), epoch + 1, res.queue);
    }
    net.set_weights_trainable(true);
    net.set_theta_trainable(false);
    res.final_theta = net.theta_snapshot();
    res.selected = most_likely_architecture(spec, res.final_theta);
    res.selected.epoch = cfg.epochs;
    res.selected.seed = cfg.seed;
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        save_checkpoint(out / "supernet.ckpt", net.state());
    }
    return res;
}

/// Trains and evaluates every queue entry in order.
inline void train_queue(const SuperNetSpec& spec, ArchQueue& queue, const Dataset& train, const Dataset& test,
                        const ChildConfig& cfg) {
    for (auto& e : queue) {
        auto r = train_child(spec, e.arch, train, test, cfg);
        e.failed = r.failed;
        e.error = r.error;
        if (!r.failed) {
            e.accuracy = r.eval.accuracy;
            e.cross_entropy = r.eval.cross_entropy;
        }
    }
}

// ------------------------------------------------------------- run directory

inline std::string results_csv(const SuperNetSpec& spec, const ArchQueue& queue) {
    std::ostringstream o;
    const auto choice = spec.choice_blocks();
    o << "arch_id,epoch_sampled";
    for (auto i : choice) o << ",w_bits." << spec.blocks[i].id;
    for (auto i : choice) o << ",a_bits." << spec.blocks[i].id;
    o << ",cost,compression,test_accuracy\n";
    for (std::size_t n = 0; n < queue.size(); ++n) {
        const auto& e = queue[n];
        o << n << "," << e.epoch;
        for (const auto& b : e.arch.blocks) o << "," << b.candidate.weight_bits();
        for (const auto& b : e.arch.blocks) o << "," << b.candidate.act_bits();
        o << "," << format_double(e.cost.total) << "," << format_double(e.cost.compression) << ",";
        if (e.failed) {
            o << "failed";
        } else if (e.accuracy) {
            o << format_double(*e.accuracy);
        }
        o << "\n";
    }
    return o.str();
}

inline std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
    std::ostringstream o;
    o << "epoch,phase,loss,ce,cost,tau,lr\n";
    for (const auto& m : metrics) {
        o << m.epoch << "," << m.phase << "," << format_double(m.loss) << "," << format_double(m.ce) << ","
          << format_double(m.cost) << "," << format_double(m.tau) << "," << format_double(m.lr) << "\n";
    }
    return o.str();
}

/// One row per (epoch, block): theta after that epoch, entries theta0..
inline std::string theta_history_csv(const std::vector<ThetaSnapshot>& history) {
    std::ostringstream o;
    std::size_t width = 0;
    for (const auto& s : history)
        for (const auto& t : s.theta) width = std::max(width, t.size());
    o << "epoch,block_id";
    for (std::size_t k = 0; k < width; ++k) o << ",theta" << k;
    o << "\n";
    for (std::size_t e = 0; e < history.size(); ++e) {
        for (std::size_t b = 0; b < history[e].ids.size(); ++b) {
            o << e << "," << history[e].ids[b];
            for (std::size_t k = 0; k < width; ++k) {
                o << ",";
                if (k < history[e].theta[b].size()) o << format_double(history[e].theta[b][k]);
            }
            o << "\n";
        }
    }
    return o.str();
}

inline std::string arch_file_name(std::size_t n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03zu.json", n);
    return buf;
}

inline void write_queue(const std::filesystem::path& out, const SuperNetSpec& spec, const ArchQueue& queue) {
    for (std::size_t n = 0; n < queue.size(); ++n) {
        const auto& e = queue[n];
        Json j = to_json(e.arch);
        j["cost"] = to_json(e.cost);
        if (e.accuracy) j["test_accuracy"] = *e.accuracy;
        if (e.failed) j["error"] = e.error;
        write_text(out / "archs" / arch_file_name(n), j.dump(2) + "\n");
    }
    write_text(out / "results.csv", results_csv(spec, queue));
}

inline void write_search_outputs(const std::filesystem::path& out, const ExperimentConfig& cfg, const SearchResult& r) {
    auto resolved = to_json(cfg);
    resolved["search"]["cost"]["beta"] = r.cost.beta;
    resolved["search"]["cost"]["auto_calibrate_beta"] = false;
    write_text(out / "config.json", resolved.dump(2) + "\n");
    write_text(out / "theta_history.csv", theta_history_csv(r.theta_history));
    write_text(out / "metrics.csv", metrics_csv(r.metrics));
    write_text(out / "theta.json", to_json(theta_file(cfg.spec, r.final_theta, cfg.search.epochs)).dump(2) + "\n");
    Json sel = to_json(r.selected);
    sel["cost"] = to_json(cost_report(cfg.spec, r.selected, cfg.search.cost.objective));
    write_text(out / "selected.json", sel.dump(2) + "\n");
    write_queue(out, cfg.spec, r.queue);
}

} // namespace dnas
