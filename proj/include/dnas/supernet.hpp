#pragma once

#include <dnas/checkpoint.hpp>
#include <dnas/ops.hpp>
#include <dnas/quantizers.hpp>
#include <dnas/rng.hpp>

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace dnas {

class SpecError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ------------------------------------------------------------------ search space

enum class CandidateKind { Quantized, Full, Skip };

/// One edge option of a choice block.
struct PrecisionCandidate {
    CandidateKind kind = CandidateKind::Full;
    int w_bits = kFullPrecisionBits;
    int a_bits = kFullPrecisionBits;

    static PrecisionCandidate quantized(int w, int a = kFullPrecisionBits) {
        check_bits(w);
        check_bits(a);
        return {CandidateKind::Quantized, w, a};
    }
    static PrecisionCandidate full() { return {CandidateKind::Full, kFullPrecisionBits, kFullPrecisionBits}; }
    static PrecisionCandidate skip() { return {CandidateKind::Skip, 0, 0}; }

    /// 0 for Skip, 32 for FullPrecision.
    int weight_bits() const { return kind == CandidateKind::Skip ? 0 : w_bits; }
    int act_bits() const { return kind == CandidateKind::Skip ? 0 : a_bits; }
    bool is_skip() const { return kind == CandidateKind::Skip; }

    std::string label() const {
        switch (kind) {
        case CandidateKind::Skip: return "skip";
        case CandidateKind::Full: return "fp";
        case CandidateKind::Quantized: break;
        }
        return "w" + std::to_string(w_bits) + "a" + std::to_string(a_bits);
    }

    friend bool operator==(const PrecisionCandidate& a, const PrecisionCandidate& b) {
        return a.kind == b.kind && a.weight_bits() == b.weight_bits() && a.act_bits() == b.act_bits();
    }
};

/// Maps the bit-width shorthand {0, 1..8, 32} of a weight-only search space
/// onto candidates: 0 skips the block, 32 keeps it full precision.
inline PrecisionCandidate candidate_from_bits(int bits, int act_bits = kFullPrecisionBits) {
    if (bits == 0) return PrecisionCandidate::skip();
    if (bits == kFullPrecisionBits && act_bits == kFullPrecisionBits) return PrecisionCandidate::full();
    return PrecisionCandidate::quantized(bits, act_bits);
}

enum class BlockKind { Residual, Conv };

struct BlockSpec {
    std::string id;
    BlockKind kind = BlockKind::Residual;
    std::size_t out_channels = 16;
    std::size_t stride = 1;
    std::vector<PrecisionCandidate> candidates;

    bool searchable() const { return candidates.size() >= 2; }
};

struct BlockGeometry {
    std::size_t in_channels, out_channels, stride, in_h, in_w, out_h, out_w;

    bool skip_legal() const { return stride == 1 && in_channels == out_channels; }
};

/// Macro-architecture: a fixed full-precision stem (3x3 conv + BN + ReLU),
/// a sequence of blocks, and a fixed full-precision head (global average
/// pool + linear). Blocks with two or more candidates are choice blocks;
/// single-candidate blocks are fixed layers.
struct SuperNetSpec {
    std::size_t in_channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t classes = 10;
    std::size_t stem_channels = 16;
    std::vector<BlockSpec> blocks;

    std::vector<BlockGeometry> geometry() const {
        std::vector<BlockGeometry> out;
        std::size_t c = stem_channels, h = height, w = width;
        for (const auto& b : blocks) {
            const std::size_t s = b.stride == 0 ? 1 : b.stride;
            BlockGeometry g{c, b.out_channels, s, h, w, (h + s - 1) / s, (w + s - 1) / s};
            out.push_back(g);
            c = g.out_channels;
            h = g.out_h;
            w = g.out_w;
        }
        return out;
    }

    std::size_t final_channels() const { return blocks.empty() ? stem_channels : blocks.back().out_channels; }

    /// Indices (into `blocks`) of the choice blocks, in order.
    std::vector<std::size_t> choice_blocks() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < blocks.size(); ++i)
            if (blocks[i].searchable()) out.push_back(i);
        return out;
    }

    void validate() const {
        if (in_channels == 0 || height == 0 || width == 0) throw SpecError("input shape must be positive");
        if (classes < 2) throw SpecError("need at least two classes");
        if (stem_channels == 0) throw SpecError("stem_channels must be positive");
        std::set<std::string> ids;
        const auto geo = geometry();
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            if (b.id.empty()) throw SpecError("block " + std::to_string(i) + " has an empty id");
            if (!ids.insert(b.id).second) throw SpecError("duplicate block id '" + b.id + "'");
            if (b.stride == 0) throw SpecError("block '" + b.id + "': stride must be positive");
            if (b.out_channels == 0) throw SpecError("block '" + b.id + "': out_channels must be positive");
            if (b.candidates.empty()) throw SpecError("block '" + b.id + "' has no candidates");
            if (b.kind == BlockKind::Residual && b.out_channels < geo[i].in_channels) {
                throw SpecError("block '" + b.id + "': residual blocks cannot reduce channels");
            }
            std::set<std::string> labels;
            for (const auto& c : b.candidates) {
                if (c.kind == CandidateKind::Quantized) {
                    check_bits(c.w_bits);
                    check_bits(c.a_bits);
                }
                if (!labels.insert(c.label()).second) {
                    throw SpecError("block '" + b.id + "' lists candidate " + c.label() + " twice");
                }
                if (c.is_skip() && !geo[i].skip_legal()) {
                    throw SpecError("block '" + b.id + "': Skip requires stride 1 and equal channels");
                }
            }
        }
    }
};

/// ResNet-20 style macro-architecture for 32x32 inputs: three groups of three
/// residual blocks (16/32/64 channels, stride 2 entering groups 2 and 3).
/// Skip is dropped from the candidate list of blocks where it is illegal.
inline SuperNetSpec resnet_spec(std::size_t blocks_per_group, const std::vector<PrecisionCandidate>& candidates,
                                std::size_t base_channels = 16, std::size_t image = 32, std::size_t classes = 10) {
    SuperNetSpec spec;
    spec.height = spec.width = image;
    spec.classes = classes;
    spec.stem_channels = base_channels;
    for (std::size_t g = 0; g < 3; ++g) {
        for (std::size_t b = 0; b < blocks_per_group; ++b) {
            BlockSpec block;
            block.id = "g" + std::to_string(g + 1) + "b" + std::to_string(b + 1);
            block.out_channels = base_channels << g;
            block.stride = (g > 0 && b == 0) ? 2 : 1;
            const bool skip_ok = block.stride == 1;
            for (const auto& c : candidates) {
                if (c.is_skip() && !skip_ok) continue;
                block.candidates.push_back(c);
            }
            spec.blocks.push_back(std::move(block));
        }
    }
    return spec;
}

// ---------------------------------------------------------------- architectures

struct BlockChoice {
    std::string id;
    PrecisionCandidate candidate;

    friend bool operator==(const BlockChoice&, const BlockChoice&) = default;
};

/// A hard selection: one candidate per choice block, plus provenance.
struct Architecture {
    std::vector<BlockChoice> blocks;
    int epoch = 0;
    std::uint64_t seed = 0;

    friend bool operator==(const Architecture&, const Architecture&) = default;

    /// Candidate indices in the spec's choice blocks; throws if a choice is
    /// not one of the block's candidates.
    std::vector<std::size_t> indices(const SuperNetSpec& spec) const {
        const auto choice = spec.choice_blocks();
        if (choice.size() != blocks.size()) {
            throw SpecError("architecture has " + std::to_string(blocks.size()) + " choices, spec has " +
                            std::to_string(choice.size()) + " choice blocks");
        }
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < choice.size(); ++i) {
            const auto& b = spec.blocks[choice[i]];
            if (b.id != blocks[i].id) throw SpecError("architecture block '" + blocks[i].id + "' expected '" + b.id + "'");
            auto it = std::find(b.candidates.begin(), b.candidates.end(), blocks[i].candidate);
            if (it == b.candidates.end()) {
                throw SpecError("block '" + b.id + "' has no candidate " + blocks[i].candidate.label());
            }
            out.push_back(static_cast<std::size_t>(it - b.candidates.begin()));
        }
        return out;
    }

    static Architecture from_indices(const SuperNetSpec& spec, std::span<const std::size_t> idx) {
        const auto choice = spec.choice_blocks();
        if (idx.size() != choice.size()) throw SpecError("index count does not match choice blocks");
        Architecture a;
        for (std::size_t i = 0; i < choice.size(); ++i) {
            const auto& b = spec.blocks[choice[i]];
            if (idx[i] >= b.candidates.size()) throw SpecError("candidate index out of range for '" + b.id + "'");
            a.blocks.push_back({b.id, b.candidates[idx[i]]});
        }
        return a;
    }

    /// All choice blocks set to the same candidate (by equality); blocks that
    /// lack it fall back to FullPrecision.
    static Architecture uniform(const SuperNetSpec& spec, const PrecisionCandidate& c) {
        Architecture a;
        for (auto i : spec.choice_blocks()) {
            const auto& b = spec.blocks[i];
            const bool has = std::find(b.candidates.begin(), b.candidates.end(), c) != b.candidates.end();
            a.blocks.push_back({b.id, has ? c : PrecisionCandidate::full()});
        }
        return a;
    }
};

/// The spec restricted to one candidate per block: a plain network.
inline SuperNetSpec restrict_to(const SuperNetSpec& spec, const Architecture& arch) {
    const auto idx = arch.indices(spec);
    SuperNetSpec out = spec;
    const auto choice = spec.choice_blocks();
    for (std::size_t i = 0; i < choice.size(); ++i) {
        auto& b = out.blocks[choice[i]];
        b.candidates = {b.candidates[idx[i]]};
    }
    return out;
}

// ---------------------------------------------------------- stochastic sampling

/// Softmax of the architecture logits, max-shifted.
template <class T>
std::vector<double> edge_probabilities(std::span<const T> theta) {
    std::vector<double> p(theta.size());
    if (theta.empty()) return p;
    const double mx = static_cast<double>(*std::max_element(theta.begin(), theta.end()));
    double s = 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) s += (p[k] = std::exp(static_cast<double>(theta[k]) - mx));
    for (auto& v : p) v /= s;
    return p;
}

/// Gumbel-softmax relaxed one-hot: softmax((theta + g) / tau), g ~ Gumbel(0,1).
/// The draw enters as a constant, so the result is differentiable in theta.
/// With `rows` > 0 an independent draw is made per row -> [rows, K].
template <class T>
Tensor<T> sample_soft_masks(const Tensor<T>& theta, double tau, Rng& rng, std::size_t rows = 0) {
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
    const std::size_t k = theta.numel();
    const std::size_t r = rows == 0 ? 1 : rows;
    std::vector<T> g(r * k);
    for (auto& v : g) v = static_cast<T>(rng.gumbel());
    const T inv_tau = static_cast<T>(1.0 / tau);
    if (rows == 0) return softmax(scale(add(theta, Tensor<T>(Shape{k}, std::move(g))), inv_tau));
    return softmax(scale(add(broadcast_rows(theta, rows), Tensor<T>(Shape{rows, k}, std::move(g))), inv_tau));
}

struct TemperatureSchedule {
    double t0 = 5.0;
    double eta = 0.025;

    /// tau = T0 * exp(-eta * epoch)
    double at(int epoch) const {
        if (epoch < 0) throw std::invalid_argument("epoch must be non-negative");
        return t0 * std::exp(-eta * static_cast<double>(epoch));
    }
};

/// Per-choice-block logits, keyed by block id in spec order.
struct ThetaSnapshot {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> theta;
};

inline std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        acc += probs[k];
        if (u < acc) return k;
    }
    // Round-off: fall back to the last candidate with non-zero mass.
    for (std::size_t k = probs.size(); k-- > 0;)
        if (probs[k] > 0.0) return k;
    return 0;
}

/// Draws each choice block independently from softmax(theta).
inline Architecture sample_architecture(const SuperNetSpec& spec, const ThetaSnapshot& theta, Rng& rng) {
    const auto choice = spec.choice_blocks();
    if (theta.theta.size() != choice.size()) throw SpecError("theta snapshot does not match spec");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < choice.size(); ++i) {
        if (theta.theta[i].size() != spec.blocks[choice[i]].candidates.size()) {
            throw SpecError("theta length mismatch for block '" + spec.blocks[choice[i]].id + "'");
        }
        const auto p = edge_probabilities<double>(theta.theta[i]);
        idx.push_back(sample_categorical(p, rng));
    }
    return Architecture::from_indices(spec, idx);
}

/// Per-block argmax of theta (first maximum on ties).
inline Architecture most_likely_architecture(const SuperNetSpec& spec, const ThetaSnapshot& theta) {
    std::vector<std::size_t> idx;
    for (const auto& t : theta.theta) {
        idx.push_back(static_cast<std::size_t>(std::max_element(t.begin(), t.end()) - t.begin()));
    }
    return Architecture::from_indices(spec, idx);
}

// ------------------------------------------------------------------ network

struct ForwardOptions {
    Mode mode = Mode::Train;
    bool update_stats = true;
};

template <class T>
struct ConvBn {
    std::size_t stride = 1;
    Tensor<T> weight;
    Tensor<T> bn_scale, bn_shift;
    BatchNormStats<T> stats;

    ConvBn() = default;
    ConvBn(std::size_t cin, std::size_t cout, std::size_t s, Rng& rng)
        : stride(s), weight(Shape{cout, cin, 3, 3}), bn_scale(Shape{cout}, T{1}), bn_shift(Shape{cout}, T{0}),
          stats(cout) {
        const double std = std::sqrt(2.0 / static_cast<double>(cin * 9));
        for (auto& v : weight.values()) v = static_cast<T>(rng.normal() * std);
        weight.set_requires_grad(true);
        bn_scale.set_requires_grad(true);
        bn_shift.set_requires_grad(true);
    }

    Tensor<T> forward(const Tensor<T>& x, int w_bits, const ForwardOptions& f) {
        auto y = conv2d(x, dorefa_quantize(weight, w_bits), stride, 1);
        return batchnorm2d(y, bn_scale, bn_shift, stats, f.mode, T(1e-5), f.update_stats);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params,
                 std::vector<NamedTensor<T>>& buffers) const {
        params.push_back({prefix + ".weight", weight});
        params.push_back({prefix + ".bn.scale", bn_scale});
        params.push_back({prefix + ".bn.shift", bn_shift});
        buffers.push_back({prefix + ".bn.running_mean", stats.running_mean});
        buffers.push_back({prefix + ".bn.running_var", stats.running_var});
    }
};

/// The operator on one candidate edge: the block's layers at one precision,
/// owning its own latent weights.
template <class T>
class CandidateOp {
public:
    static constexpr double kInitialAlpha = 8.0;

    CandidateOp(const PrecisionCandidate& c, BlockKind kind, const BlockGeometry& g, Rng& rng)
        : candidate_(c), kind_(kind), geo_(g) {
        if (c.is_skip()) return;
        conv1_ = ConvBn<T>(g.in_channels, g.out_channels, g.stride, rng);
        if (kind == BlockKind::Residual) conv2_ = ConvBn<T>(g.out_channels, g.out_channels, 1, rng);
        if (c.a_bits != kFullPrecisionBits) {
            alpha1_ = Tensor<T>::scalar(static_cast<T>(kInitialAlpha)).set_requires_grad(true);
            if (kind == BlockKind::Residual) alpha2_ = Tensor<T>::scalar(static_cast<T>(kInitialAlpha)).set_requires_grad(true);
        }
    }

    const PrecisionCandidate& candidate() const { return candidate_; }

    Tensor<T> forward(const Tensor<T>& x, const ForwardOptions& f) {
        if (candidate_.is_skip()) return x;
        const int wb = candidate_.w_bits, ab = candidate_.a_bits;
        const bool quant_act = ab != kFullPrecisionBits;
        auto in = quant_act ? pact_activation(x, alpha1_, ab) : x;
        if (kind_ == BlockKind::Conv) return relu(conv1_.forward(in, wb, f));
        auto h = conv1_.forward(in, wb, f);
        h = quant_act ? pact_activation(h, alpha2_, ab) : relu(h);
        h = conv2_.forward(h, wb, f);
        const auto shortcut = geo_.skip_legal() ? x : downsample_pad(x, geo_.stride, geo_.out_channels);
        return relu(add(h, shortcut));
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& params,
                 std::vector<NamedTensor<T>>& buffers) const {
        if (candidate_.is_skip()) return;
        conv1_.collect(prefix + ".conv1", params, buffers);
        if (kind_ == BlockKind::Residual) conv2_.collect(prefix + ".conv2", params, buffers);
        if (alpha1_.defined()) params.push_back({prefix + ".alpha1", alpha1_});
        if (alpha2_.defined()) params.push_back({prefix + ".alpha2", alpha2_});
    }

private:
    PrecisionCandidate candidate_;
    BlockKind kind_;
    BlockGeometry geo_;
    ConvBn<T> conv1_, conv2_;
    Tensor<T> alpha1_, alpha2_;
};

/// Super net (several candidates per choice block) or plain child network
/// (one candidate per block); both share this implementation.
template <class T>
class Network {
public:
    Network(SuperNetSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        spec_.validate();
        Rng rng(seed, 0x5eed);
        stem_ = ConvBn<T>(spec_.in_channels, spec_.stem_channels, 1, rng);
        const auto geo = spec_.geometry();
        for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
            const auto& b = spec_.blocks[i];
            std::vector<CandidateOp<T>> ops;
            for (const auto& c : b.candidates) ops.emplace_back(c, b.kind, geo[i], rng);
            blocks_.push_back(std::move(ops));
            if (b.searchable()) thetas_.push_back(Tensor<T>(Shape{b.candidates.size()}, T{0}));
        }
        const std::size_t in = spec_.final_channels();
        fc_weight_ = Tensor<T>(Shape{spec_.classes, in});
        const double std = std::sqrt(1.0 / static_cast<double>(in));
        for (auto& v : fc_weight_.values()) v = static_cast<T>(rng.normal() * std);
        fc_weight_.set_requires_grad(true);
        fc_bias_ = Tensor<T>(Shape{spec_.classes}, T{0}).set_requires_grad(true);
    }

    const SuperNetSpec& spec() const { return spec_; }

    /// One mask per choice block ([K] or [N,K]); ignored for fixed blocks.
    Tensor<T> forward(const Tensor<T>& x, const std::vector<Tensor<T>>& masks, const ForwardOptions& f = {}) {
        if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.height || x.dim(3) != spec_.width) {
            throw ShapeError("network input " + to_string(x.shape()) + " does not match spec");
        }
        auto h = relu(stem_.forward(x, kFullPrecisionBits, f));
        std::size_t choice = 0;
        for (auto& ops : blocks_) {
            if (ops.size() == 1) {
                h = ops.front().forward(h, f);
                continue;
            }
            if (choice >= masks.size()) throw ShapeError("missing mask for choice block " + std::to_string(choice));
            const auto& m = masks[choice++];
            if (m.shape().back() != ops.size()) throw ShapeError("mask length does not match candidate count");
            std::vector<Tensor<T>> outs;
            outs.reserve(ops.size());
            std::optional<Shape> out_shape;
            for (std::size_t k = 0; k < ops.size(); ++k) {
                if (!m.requires_grad() && mask_is_zero(m, k)) {
                    outs.emplace_back();
                    continue;
                }
                outs.push_back(ops[k].forward(h, f));
                out_shape = outs.back().shape();
            }
            if (!out_shape) throw std::logic_error("all masks zero in a choice block");
            for (auto& o : outs)
                if (!o.defined()) o = Tensor<T>(*out_shape, T{0});
            h = mix(m, outs);
        }
        return linear(global_avg_pool(h), fc_weight_, fc_bias_);
    }

    /// Forward of a plain network (every block has a single candidate).
    Tensor<T> forward(const Tensor<T>& x, const ForwardOptions& f = {}) { return forward(x, {}, f); }

    /// Network weights, BN affine parameters and PACT alphas.
    std::vector<NamedTensor<T>> weights() const {
        std::vector<NamedTensor<T>> params, buffers;
        collect(params, buffers);
        return params;
    }
    std::vector<NamedTensor<T>> buffers() const {
        std::vector<NamedTensor<T>> params, buffers;
        collect(params, buffers);
        return buffers;
    }
    std::vector<NamedTensor<T>> thetas() const {
        std::vector<NamedTensor<T>> out;
        const auto choice = spec_.choice_blocks();
        for (std::size_t i = 0; i < choice.size(); ++i) out.push_back({"theta." + spec_.blocks[choice[i]].id, thetas_[i]});
        return out;
    }
    std::vector<Tensor<T>>& theta_tensors() { return thetas_; }
    const std::vector<Tensor<T>>& theta_tensors() const { return thetas_; }

    std::vector<Tensor<T>> weight_tensors() const {
        std::vector<Tensor<T>> out;
        for (auto& nt : weights()) out.push_back(nt.tensor);
        return out;
    }

    /// Weights, buffers and thetas: everything a checkpoint needs.
    std::vector<NamedTensor<T>> state() const {
        std::vector<NamedTensor<T>> params, buffers;
        collect(params, buffers);
        for (auto& b : buffers) params.push_back(std::move(b));
        for (auto& t : thetas()) params.push_back(std::move(t));
        return params;
    }

    /// Copies every same-named, same-shaped tensor from `source` into this
    /// network's state. Returns the number copied.
    template <class U>
    std::size_t load_matching(const std::vector<NamedTensor<U>>& source) {
        std::map<std::string, const Tensor<U>*> by_name;
        for (const auto& nt : source) by_name[nt.name] = &nt.tensor;
        std::size_t copied = 0;
        for (auto& nt : state()) {
            auto it = by_name.find(nt.name);
            if (it == by_name.end() || it->second->shape() != nt.tensor.shape()) continue;
            auto dst = nt.tensor.data();
            auto src = it->second->data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
            ++copied;
        }
        return copied;
    }

    /// Strict load: every tensor of this network must be present with a matching shape.
    template <class U>
    void load_state(const std::vector<NamedTensor<U>>& source) {
        const auto expected = state().size();
        if (load_matching(source) != expected) {
            throw FormatError("checkpoint does not match the network layout");
        }
    }

    ThetaSnapshot theta_snapshot() const {
        ThetaSnapshot s;
        const auto choice = spec_.choice_blocks();
        for (std::size_t i = 0; i < choice.size(); ++i) {
            s.ids.push_back(spec_.blocks[choice[i]].id);
            s.theta.emplace_back(thetas_[i].data().begin(), thetas_[i].data().end());
        }
        return s;
    }

    /// Applies the PACT floor to every alpha after an update.
    void clamp_alphas() {
        for (auto& nt : weights()) {
            if (nt.name.ends_with(".alpha1") || nt.name.ends_with(".alpha2")) {
                auto& v = nt.tensor[0];
                v = std::max(v, static_cast<T>(kAlphaFloor));
            }
        }
    }

    void set_weights_trainable(bool on) {
        for (auto& t : weight_tensors()) t.set_requires_grad(on);
    }
    void set_theta_trainable(bool on) {
        for (auto& t : thetas_) t.set_requires_grad(on);
    }

private:
    static bool mask_is_zero(const Tensor<T>& m, std::size_t k) {
        const std::size_t kk = m.shape().back(), rows = m.numel() / kk;
        for (std::size_t r = 0; r < rows; ++r)
            if (m[r * kk + k] != T{0}) return false;
        return true;
    }

    void collect(std::vector<NamedTensor<T>>& params, std::vector<NamedTensor<T>>& buffers) const {
        stem_.collect("stem.conv", params, buffers);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            for (const auto& op : blocks_[i]) {
                op.collect("block." + spec_.blocks[i].id + "." + op.candidate().label(), params, buffers);
            }
        }
        params.push_back({"head.fc.weight", fc_weight_});
        params.push_back({"head.fc.bias", fc_bias_});
    }

    SuperNetSpec spec_;
    ConvBn<T> stem_;
    std::vector<std::vector<CandidateOp<T>>> blocks_;
    std::vector<Tensor<T>> thetas_;
    Tensor<T> fc_weight_, fc_bias_;
};

/// One-hot masks selecting `arch` in the super net.
template <class T>
std::vector<Tensor<T>> hard_masks(const SuperNetSpec& spec, const Architecture& arch) {
    const auto idx = arch.indices(spec);
    const auto choice = spec.choice_blocks();
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < choice.size(); ++i) {
        Tensor<T> m(Shape{spec.blocks[choice[i]].candidates.size()}, T{0});
        m[idx[i]] = T{1};
        out.push_back(m);
    }
    return out;
}

/// Plain network containing only the selected candidate of each choice block,
/// freshly initialized from `seed`. Skip selections become identities.
template <class T>
Network<T> build_child(const SuperNetSpec& spec, const Architecture& arch, std::uint64_t seed) {
    return Network<T>(restrict_to(spec, arch), seed);
}

} // namespace dnas
