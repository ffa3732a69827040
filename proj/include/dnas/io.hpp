#pragma once

// JSON and CSV encodings: configs (strict, unknown keys rejected with their
// path), architectures, cost reports, theta snapshots.

#include <dnas/config.hpp>

#include <nlohmann/json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace dnas {

using Json = nlohmann::ordered_json;

/// Shortest decimal that round-trips.
inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

inline Json read_json(const std::filesystem::path& path) {
    try {
        return Json::parse(read_file(path));
    } catch (const Json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

namespace detail {

/// Strict reader over one JSON object: every key must be consumed.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(where() + " must be an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const Json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const Json::exception&) {
            throw ConfigError(child(key) + ": wrong type");
        }
    }

    template <class T>
    T require(const std::string& key) {
        if (!j_.contains(key)) throw ConfigError(child(key) + ": missing");
        T out{};
        get(key, out);
        return out;
    }

    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError("unknown config key: " + child(key));
        }
    }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace detail

// ------------------------------------------------------------- candidates

inline const char* kind_name(CandidateKind k) {
    switch (k) {
    case CandidateKind::Quantized: return "quantized";
    case CandidateKind::Full: return "full";
    case CandidateKind::Skip: return "skip";
    }
    return "?";
}

inline Json to_json(const PrecisionCandidate& c) {
    Json j;
    if (c.is_skip()) {
        j["w_bits"] = nullptr;
        j["a_bits"] = nullptr;
    } else {
        j["w_bits"] = c.w_bits;
        j["a_bits"] = c.a_bits;
    }
    j["kind"] = kind_name(c.kind);
    return j;
}

/// Object form {"w_bits","a_bits","kind"} or the shorthand labels
/// "skip", "fp", "w4a32".
inline PrecisionCandidate candidate_from_json(const Json& j, const std::string& path) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "skip") return PrecisionCandidate::skip();
        if (s == "fp" || s == "full") return PrecisionCandidate::full();
        int w = 0, a = 0;
        char tail = 0;
        if (std::sscanf(s.c_str(), "w%da%d%c", &w, &a, &tail) == 2) {
            try {
                return PrecisionCandidate::quantized(w, a);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(path + ": " + e.what());
            }
        }
        throw ConfigError(path + ": unknown candidate '" + s + "'");
    }
    detail::ObjectReader r(j, path);
    const auto kind = r.require<std::string>("kind");
    auto bits = [&](const char* key) {
        if (!r.has(key) || r.raw(key).is_null()) throw ConfigError(r.child(key) + ": required for kind " + kind);
        const auto& v = r.raw(key);
        if (!v.is_number_integer()) throw ConfigError(r.child(key) + ": wrong type");
        return v.get<int>();
    };
    PrecisionCandidate c;
    if (kind == "skip") {
        for (const char* key : {"w_bits", "a_bits"})
            if (r.has(key) && !r.raw(key).is_null()) throw ConfigError(r.child(key) + ": must be null for skip");
        c = PrecisionCandidate::skip();
    } else if (kind == "full") {
        for (const char* key : {"w_bits", "a_bits"})
            if (r.has(key) && !r.raw(key).is_null() && r.raw(key) != kFullPrecisionBits) {
                throw ConfigError(r.child(key) + ": must be 32 for full");
            }
        c = PrecisionCandidate::full();
    } else if (kind == "quantized") {
        const int w = bits("w_bits"), a = bits("a_bits");
        try {
            c = PrecisionCandidate::quantized(w, a);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(path + ": " + e.what());
        }
    } else {
        throw ConfigError(r.child("kind") + ": unknown kind '" + kind + "'");
    }
    r.finish();
    return c;
}

// ----------------------------------------------------------- architecture

inline Json to_json(const Architecture& a) {
    Json blocks = Json::array();
    for (const auto& b : a.blocks) blocks.push_back(Json{{"id", b.id}, {"choice", to_json(b.candidate)}});
    return Json{{"blocks", blocks}, {"meta", Json{{"epoch", a.epoch}, {"seed", a.seed}}}};
}

inline Architecture architecture_from_json(const Json& j, const std::string& path = "") {
    detail::ObjectReader r(j, path);
    Architecture a;
    const auto& blocks = r.raw("blocks");
    if (!blocks.is_array()) throw ConfigError(r.child("blocks") + ": must be an array");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = r.child("blocks") + "[" + std::to_string(i) + "]";
        detail::ObjectReader br(blocks[i], p);
        BlockChoice c;
        c.id = br.require<std::string>("id");
        c.candidate = candidate_from_json(br.raw("choice"), br.child("choice"));
        br.finish();
        a.blocks.push_back(std::move(c));
    }
    if (r.has("meta")) {
        detail::ObjectReader mr(r.raw("meta"), r.child("meta"));
        mr.get("epoch", a.epoch);
        mr.get("seed", a.seed);
        mr.finish();
    }
    r.finish();
    return a;
}

// ------------------------------------------------------------ cost report

inline Json to_json(const CostReport& c) {
    Json breakdown = Json::array();
    for (const auto& [id, cost] : c.breakdown) breakdown.push_back(Json{{"id", id}, {"cost", cost}});
    return Json{{"objective", to_string(c.objective)},
                {"total", c.total},
                {"baseline", c.baseline},
                {"compression", c.compression},
                {"breakdown", breakdown}};
}

inline CostObjective objective_from_string(const std::string& s, const std::string& path = "objective") {
    if (s == "size") return CostObjective::ModelSize;
    if (s == "flops") return CostObjective::Compute;
    throw ConfigError(path + ": expected 'size' or 'flops', got '" + s + "'");
}

// ------------------------------------------------------------------- spec

inline Json to_json(const SuperNetSpec& s) {
    Json blocks = Json::array();
    for (const auto& b : s.blocks) {
        Json cands = Json::array();
        for (const auto& c : b.candidates) cands.push_back(to_json(c));
        blocks.push_back(Json{{"id", b.id},
                              {"kind", b.kind == BlockKind::Residual ? "residual" : "conv"},
                              {"out_channels", b.out_channels},
                              {"stride", b.stride},
                              {"candidates", cands}});
    }
    return Json{{"in_channels", s.in_channels}, {"height", s.height},       {"width", s.width},
                {"classes", s.classes},         {"stem_channels", s.stem_channels}, {"blocks", blocks}};
}

inline std::vector<PrecisionCandidate> candidates_from_json(const Json& j, const std::string& path) {
    if (!j.is_array() || j.empty()) throw ConfigError(path + ": must be a non-empty array");
    std::vector<PrecisionCandidate> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(candidate_from_json(j[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

/// Explicit block list, or {"preset": "resnet", ...} for the ResNet-20 style
/// layout (blocks_per_group, base_channels, image, classes, candidates).
inline SuperNetSpec spec_from_json(const Json& j, const std::string& path = "spec") {
    detail::ObjectReader r(j, path);
    SuperNetSpec s;
    if (r.has("preset")) {
        const auto preset = r.require<std::string>("preset");
        if (preset != "resnet") throw ConfigError(r.child("preset") + ": unknown preset '" + preset + "'");
        std::size_t per_group = 3, base = 16, image = 32, classes = 10;
        r.get("blocks_per_group", per_group);
        r.get("base_channels", base);
        r.get("image", image);
        r.get("classes", classes);
        const auto cands = candidates_from_json(r.raw("candidates"), r.child("candidates"));
        s = resnet_spec(per_group, cands, base, image, classes);
        if (r.has("in_channels")) r.get("in_channels", s.in_channels);
    } else {
        r.get("in_channels", s.in_channels);
        r.get("height", s.height);
        r.get("width", s.width);
        r.get("classes", s.classes);
        r.get("stem_channels", s.stem_channels);
        const auto& blocks = r.raw("blocks");
        if (!blocks.is_array()) throw ConfigError(r.child("blocks") + ": must be an array");
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = r.child("blocks") + "[" + std::to_string(i) + "]";
            detail::ObjectReader br(blocks[i], p);
            BlockSpec b;
            b.id = br.require<std::string>("id");
            std::string kind = "residual";
            br.get("kind", kind);
            if (kind == "residual") {
                b.kind = BlockKind::Residual;
            } else if (kind == "conv") {
                b.kind = BlockKind::Conv;
            } else {
                throw ConfigError(br.child("kind") + ": expected 'residual' or 'conv'");
            }
            br.get("out_channels", b.out_channels);
            br.get("stride", b.stride);
            b.candidates = candidates_from_json(br.raw("candidates"), br.child("candidates"));
            br.finish();
            s.blocks.push_back(std::move(b));
        }
    }
    r.finish();
    try {
        s.validate();
    } catch (const SpecError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return s;
}

// ---------------------------------------------------------------- configs

inline Json to_json(const DatasetSpec& d) {
    switch (d.source) {
    case DataSource::Synthetic:
        return Json{{"source", "synthetic"},
                    {"classes", d.synthetic.classes},
                    {"channels", d.synthetic.channels},
                    {"image_size", d.synthetic.image_size},
                    {"train_per_class", d.synthetic.train_per_class},
                    {"test_per_class", d.synthetic.test_per_class},
                    {"noise", d.synthetic.noise},
                    {"jitter", d.synthetic.jitter},
                    {"seed", d.synthetic.seed}};
    case DataSource::Cifar10:
        return Json{{"source", "cifar10"}, {"path", d.path}, {"train_limit", d.train_limit}, {"test_limit", d.test_limit}};
    case DataSource::Idx:
        return Json{{"source", "idx"},           {"train_images", d.train_images}, {"train_labels", d.train_labels},
                    {"test_images", d.test_images}, {"test_labels", d.test_labels},   {"classes", d.classes},
                    {"train_limit", d.train_limit}, {"test_limit", d.test_limit}};
    }
    return {};
}

inline DatasetSpec dataset_from_json(const Json& j, const std::string& path = "data") {
    detail::ObjectReader r(j, path);
    DatasetSpec d;
    std::string source = "synthetic";
    r.get("source", source);
    if (source == "synthetic") {
        d.source = DataSource::Synthetic;
        auto& s = d.synthetic;
        r.get("classes", s.classes);
        r.get("channels", s.channels);
        r.get("image_size", s.image_size);
        r.get("train_per_class", s.train_per_class);
        r.get("test_per_class", s.test_per_class);
        r.get("noise", s.noise);
        r.get("jitter", s.jitter);
        r.get("seed", s.seed);
        d.classes = s.classes;
    } else if (source == "cifar10") {
        d.source = DataSource::Cifar10;
        d.path = r.require<std::string>("path");
        r.get("train_limit", d.train_limit);
        r.get("test_limit", d.test_limit);
    } else if (source == "idx") {
        d.source = DataSource::Idx;
        d.train_images = r.require<std::string>("train_images");
        d.train_labels = r.require<std::string>("train_labels");
        d.test_images = r.require<std::string>("test_images");
        d.test_labels = r.require<std::string>("test_labels");
        r.get("classes", d.classes);
        r.get("train_limit", d.train_limit);
        r.get("test_limit", d.test_limit);
    } else {
        throw ConfigError(r.child("source") + ": expected synthetic, cifar10 or idx");
    }
    r.finish();
    return d;
}

inline Json to_json(const SearchConfig& c) {
    return Json{{"epochs", c.epochs},
                {"warmup", c.warmup},
                {"t0", c.temperature.t0},
                {"eta", c.temperature.eta},
                {"sample_every", c.sample_every},
                {"samples_per_event", c.samples_per_event},
                {"batch_size", c.batch_size},
                {"weight_lr", c.weight_opt.lr},
                {"weight_momentum", c.weight_opt.momentum},
                {"weight_decay", c.weight_opt.weight_decay},
                {"theta_lr", c.theta_opt.lr},
                {"theta_beta1", c.theta_opt.beta1},
                {"theta_beta2", c.theta_opt.beta2},
                {"theta_eps", c.theta_opt.eps},
                {"theta_weight_decay", c.theta_opt.weight_decay},
                {"cost",
                 Json{{"objective", to_string(c.cost.objective)},
                      {"beta", c.cost.beta},
                      {"gamma", c.cost.gamma},
                      {"auto_calibrate_beta", c.cost.auto_calibrate_beta}}},
                {"split_ratio", c.split_ratio},
                {"mask_granularity", c.granularity == MaskGranularity::Batch ? "batch" : "example"},
                {"seed", c.seed}};
}

inline SearchConfig search_from_json(const Json& j, const std::string& path = "search") {
    detail::ObjectReader r(j, path);
    SearchConfig c;
    r.get("epochs", c.epochs);
    r.get("warmup", c.warmup);
    r.get("t0", c.temperature.t0);
    r.get("eta", c.temperature.eta);
    r.get("sample_every", c.sample_every);
    r.get("samples_per_event", c.samples_per_event);
    r.get("batch_size", c.batch_size);
    r.get("weight_lr", c.weight_opt.lr);
    r.get("weight_momentum", c.weight_opt.momentum);
    r.get("weight_decay", c.weight_opt.weight_decay);
    r.get("theta_lr", c.theta_opt.lr);
    r.get("theta_beta1", c.theta_opt.beta1);
    r.get("theta_beta2", c.theta_opt.beta2);
    r.get("theta_eps", c.theta_opt.eps);
    r.get("theta_weight_decay", c.theta_opt.weight_decay);
    if (r.has("cost")) {
        detail::ObjectReader cr(r.raw("cost"), r.child("cost"));
        std::string obj = to_string(c.cost.objective);
        cr.get("objective", obj);
        c.cost.objective = objective_from_string(obj, cr.child("objective"));
        cr.get("beta", c.cost.beta);
        cr.get("gamma", c.cost.gamma);
        cr.get("auto_calibrate_beta", c.cost.auto_calibrate_beta);
        cr.finish();
    }
    r.get("split_ratio", c.split_ratio);
    std::string gran = "batch";
    r.get("mask_granularity", gran);
    if (gran == "batch") {
        c.granularity = MaskGranularity::Batch;
    } else if (gran == "example") {
        c.granularity = MaskGranularity::Example;
    } else {
        throw ConfigError(r.child("mask_granularity") + ": expected 'batch' or 'example'");
    }
    r.get("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

inline Json to_json(const ChildConfig& c) {
    return Json{{"epochs", c.epochs},          {"batch_size", c.batch_size},   {"lr", c.sgd.lr},
                {"momentum", c.sgd.momentum},  {"weight_decay", c.sgd.weight_decay}, {"cutout", c.cutout},
                {"cutout_size", c.cutout_size}, {"seed", c.seed}};
}

inline ChildConfig child_from_json(const Json& j, const std::string& path = "child") {
    detail::ObjectReader r(j, path);
    ChildConfig c;
    r.get("epochs", c.epochs);
    r.get("batch_size", c.batch_size);
    r.get("lr", c.sgd.lr);
    r.get("momentum", c.sgd.momentum);
    r.get("weight_decay", c.sgd.weight_decay);
    r.get("cutout", c.cutout);
    r.get("cutout_size", c.cutout_size);
    r.get("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

inline Json to_json(const OracleConfig& c) {
    return Json{{"max_space", c.max_space}, {"search_seeds", c.search_seeds}, {"top_fraction", c.top_fraction}};
}

inline OracleConfig oracle_from_json(const Json& j, const std::string& path = "oracle") {
    detail::ObjectReader r(j, path);
    OracleConfig c;
    r.get("max_space", c.max_space);
    r.get("search_seeds", c.search_seeds);
    r.get("top_fraction", c.top_fraction);
    r.finish();
    if (c.search_seeds.empty()) throw ConfigError(r.child("search_seeds") + ": must not be empty");
    if (!(c.top_fraction > 0.0 && c.top_fraction <= 1.0)) throw ConfigError(r.child("top_fraction") + ": must be in (0,1]");
    return c;
}

inline Json to_json(const ExperimentConfig& c) {
    return Json{{"spec", to_json(c.spec)},     {"data", to_json(c.data)},     {"search", to_json(c.search)},
                {"child", to_json(c.child)},   {"oracle", to_json(c.oracle)}, {"train_children", c.train_children}};
}

/// Top-level config file. "spec" may be an object or a path (relative to
/// `base_dir`) to a spec JSON file.
inline ExperimentConfig experiment_from_json(const Json& j, const std::filesystem::path& base_dir = {}) {
    detail::ObjectReader r(j, "");
    ExperimentConfig c;
    if (!r.has("spec")) throw ConfigError("spec: missing");
    const auto& spec = r.raw("spec");
    c.spec = spec.is_string() ? spec_from_json(read_json(base_dir / spec.get<std::string>())) : spec_from_json(spec);
    if (r.has("data")) c.data = dataset_from_json(r.raw("data"));
    if (r.has("search")) c.search = search_from_json(r.raw("search"));
    if (r.has("child")) c.child = child_from_json(r.raw("child"));
    if (r.has("oracle")) c.oracle = oracle_from_json(r.raw("oracle"));
    r.get("train_children", c.train_children);
    r.finish();
    if (c.data.source == DataSource::Synthetic) {
        const auto& s = c.data.synthetic;
        if (s.channels != c.spec.in_channels || s.image_size != c.spec.height || s.image_size != c.spec.width ||
            s.classes != c.spec.classes) {
            throw ConfigError("data: synthetic shape/classes do not match spec");
        }
    }
    return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
    return experiment_from_json(read_json(path), path.parent_path());
}

// ------------------------------------------------------------------ theta

/// Per-block logits with the candidates they index, enough to sample
/// architectures without the rest of the spec.
struct ThetaFile {
    std::vector<std::string> ids;
    std::vector<std::vector<PrecisionCandidate>> candidates;
    std::vector<std::vector<double>> theta;
    int epoch = 0;
};

inline ThetaFile theta_file(const SuperNetSpec& spec, const ThetaSnapshot& snap, int epoch) {
    ThetaFile f;
    f.ids = snap.ids;
    f.theta = snap.theta;
    f.epoch = epoch;
    for (auto i : spec.choice_blocks()) f.candidates.push_back(spec.blocks[i].candidates);
    return f;
}

inline Json to_json(const ThetaFile& f) {
    Json blocks = Json::array();
    for (std::size_t i = 0; i < f.ids.size(); ++i) {
        Json cands = Json::array();
        for (const auto& c : f.candidates[i]) cands.push_back(to_json(c));
        blocks.push_back(Json{{"id", f.ids[i]}, {"candidates", cands}, {"theta", f.theta[i]}});
    }
    return Json{{"epoch", f.epoch}, {"blocks", blocks}};
}

inline ThetaFile theta_from_json(const Json& j, const std::string& path = "") {
    detail::ObjectReader r(j, path);
    ThetaFile f;
    r.get("epoch", f.epoch);
    const auto& blocks = r.raw("blocks");
    if (!blocks.is_array()) throw ConfigError(r.child("blocks") + ": must be an array");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = r.child("blocks") + "[" + std::to_string(i) + "]";
        detail::ObjectReader br(blocks[i], p);
        f.ids.push_back(br.require<std::string>("id"));
        f.candidates.push_back(candidates_from_json(br.raw("candidates"), br.child("candidates")));
        f.theta.push_back(br.require<std::vector<double>>("theta"));
        if (f.theta.back().size() != f.candidates.back().size()) throw ConfigError(p + ": theta and candidates differ in length");
        br.finish();
    }
    r.finish();
    return f;
}

/// Same draws as sample_architecture on the matching spec.
inline Architecture sample_from_theta(const ThetaFile& f, Rng& rng) {
    Architecture a;
    for (std::size_t i = 0; i < f.ids.size(); ++i) {
        const auto p = edge_probabilities<double>(f.theta[i]);
        a.blocks.push_back({f.ids[i], f.candidates[i][sample_categorical(p, rng)]});
    }
    return a;
}

} // namespace dnas
