// dnas: command-line front end for search, child training, evaluation,
// cost reports, the brute-force oracle and architecture sampling.

#include <dnas/oracle.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace dnas;

namespace {

void log_line(const std::string& s) { std::cerr << s << std::endl; }

fs::path model_sidecar(const fs::path& checkpoint) {
    auto p = checkpoint;
    p.replace_extension(".model.json");
    return p;
}

Architecture load_arch(const fs::path& p) {
    auto j = read_json(p);
    // Architecture files written by a run also carry cost and accuracy fields.
    for (const char* extra : {"cost", "test_accuracy", "error"}) j.erase(extra);
    return architecture_from_json(j, p.filename().string());
}

int cmd_search(const fs::path& config, const fs::path& out) {
    const auto cfg = load_experiment(config);
    auto [train, test] = load_dataset(cfg.data);
    log_line("search: " + std::to_string(train.size()) + " training examples, " + std::to_string(cfg.search.epochs) + " epochs");
    auto result = run_search(cfg.spec, cfg.search, train, out);
    if (cfg.train_children) {
        for (std::size_t n = 0; n < result.queue.size(); ++n) {
            auto& e = result.queue[n];
            auto r = train_child(cfg.spec, e.arch, train, test, cfg.child);
            e.failed = r.failed;
            e.error = r.error;
            if (!r.failed) {
                e.accuracy = r.eval.accuracy;
                e.cross_entropy = r.eval.cross_entropy;
            }
            log_line("child " + std::to_string(n) + " (epoch " + std::to_string(e.epoch) + ") " + arch_code(e.arch) +
                     " compression " + format_double(e.cost.compression) + " accuracy " +
                     (e.failed ? std::string("failed") : format_double(*e.accuracy)));
        }
    }
    write_search_outputs(out, cfg, result);
    std::cout << to_json(result.selected).dump() << "\n";
    return 0;
}

int cmd_train_child(const fs::path& arch_path, const fs::path& config, const fs::path& out) {
    const auto cfg = load_experiment(config);
    const auto arch = load_arch(arch_path);
    arch.indices(cfg.spec);
    auto [train, test] = load_dataset(cfg.data);
    auto r = train_child(cfg.spec, arch, train, test, cfg.child);
    QueueEntry e;
    e.arch = arch;
    e.epoch = arch.epoch;
    e.cost = cost_report(cfg.spec, arch, cfg.search.cost.objective);
    e.failed = r.failed;
    e.error = r.error;
    if (!r.failed) {
        e.accuracy = r.eval.accuracy;
        e.cross_entropy = r.eval.cross_entropy;
        fs::create_directories(out);
        save_checkpoint(out / "child.ckpt", r.net->state());
        write_text(model_sidecar(out / "child.ckpt"),
                   Json{{"spec", to_json(cfg.spec)}, {"arch", to_json(arch)}}.dump(2) + "\n");
    }
    write_queue(out, cfg.spec, ArchQueue{e});
    Json j{{"failed", r.failed}};
    if (r.failed) {
        j["error"] = r.error;
    } else {
        j["test_accuracy"] = r.eval.accuracy;
        j["test_cross_entropy"] = r.eval.cross_entropy;
    }
    j["cost"] = to_json(e.cost);
    std::cout << j.dump() << "\n";
    return r.failed ? 1 : 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_spec, const fs::path& model) {
    const auto m = read_json(model.empty() ? model_sidecar(checkpoint) : model);
    if (!m.contains("spec") || !m.contains("arch")) throw ConfigError("model file needs 'spec' and 'arch'");
    const auto spec = spec_from_json(m.at("spec"));
    const auto arch = architecture_from_json(m.at("arch"), "arch");
    auto net = build_child<float>(spec, arch, 0);
    net.load_state(load_checkpoint<float>(checkpoint));
    auto [train, test] = load_dataset(dataset_from_json(read_json(data_spec)));
    const auto r = evaluate(net, test);
    std::cout << Json{{"accuracy", r.accuracy}, {"cross_entropy", r.cross_entropy}}.dump() << "\n";
    return 0;
}

int cmd_cost(const fs::path& arch_path, const fs::path& spec_path, const std::string& objective) {
    const auto spec = spec_from_json(read_json(spec_path));
    const auto report = cost_report(spec, load_arch(arch_path), objective_from_string(objective));
    std::cout << to_json(report).dump(2) << "\n";
    return 0;
}

int cmd_sample(const fs::path& theta_path, int n, std::uint64_t seed) {
    const auto theta = theta_from_json(read_json(theta_path));
    Rng rng(seed);
    Json out = Json::array();
    for (int i = 0; i < n; ++i) {
        auto a = sample_from_theta(theta, rng);
        a.epoch = theta.epoch;
        a.seed = seed;
        out.push_back(to_json(a));
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_oracle(const fs::path& config, const fs::path& out, const std::vector<fs::path>& runs) {
    const auto cfg = load_experiment(config);
    auto [train, test] = load_dataset(cfg.data);
    const auto archs = enumerate(cfg.spec, cfg.oracle.max_space);
    const auto cost = resolve_cost_config(cfg.search.cost, build_cost_table(cfg.spec, cfg.search.cost.objective));
    log_line("oracle: training " + std::to_string(archs.size()) + " architectures");
    const auto ranking = oracle_rank(cfg.spec, archs, train, test, cfg.child, cfg.search.cost.objective, cost);
    write_text(out / "oracle_results.csv", oracle_csv(ranking));

    // Percentile of each search's selection: given run directories, or fresh
    // searches for every configured seed.
    std::ostringstream agreement;
    agreement << "search,selected,percentile,top\n";
    std::size_t hits = 0, total = 0;
    auto report = [&](const std::string& name, const Architecture& a) {
        const double p = percentile_of(cfg.spec, a, ranking);
        const bool top = p <= cfg.oracle.top_fraction;
        hits += top;
        ++total;
        agreement << name << "," << arch_code(a) << "," << format_double(p) << "," << (top ? 1 : 0) << "\n";
        log_line(name + ": " + arch_code(a) + " percentile " + format_double(p));
    };
    if (!runs.empty()) {
        for (const auto& r : runs) report(r.string(), load_arch(r / "selected.json"));
    } else {
        for (auto seed : cfg.oracle.search_seeds) {
            auto sc = cfg.search;
            sc.seed = seed;
            report("seed " + std::to_string(seed), run_search(cfg.spec, sc, train).selected);
        }
    }
    write_text(out / "agreement.csv", agreement.str());
    std::cout << Json{{"architectures", ranking.size()}, {"searches", total}, {"in_top", hits},
                      {"top_fraction", cfg.oracle.top_fraction}, {"best", arch_code(ranking.front().arch)}}
                     .dump()
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Differentiable architecture search for mixed-precision networks"};
    app.require_subcommand(1);

    fs::path config, out, arch, checkpoint, data, model, spec, theta;
    std::vector<fs::path> runs;
    std::string objective = "size";
    int n = 1;
    std::uint64_t seed = 0;

    auto* search = app.add_subcommand("search", "run the super-net search");
    search->add_option("--config", config, "experiment config (JSON)")->required();
    search->add_option("--out", out, "run directory")->required();

    auto* child = app.add_subcommand("train-child", "train and evaluate one architecture");
    child->add_option("--arch", arch, "architecture JSON")->required();
    child->add_option("--config", config, "experiment config (JSON)")->required();
    child->add_option("--out", out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a child checkpoint on a test set");
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--data", data, "dataset spec (JSON)")->required();
    eval->add_option("--model", model, "spec + architecture JSON (default: <checkpoint>.model.json)");

    auto* cost = app.add_subcommand("cost", "print the cost report of an architecture");
    cost->add_option("--arch", arch, "architecture JSON")->required();
    cost->add_option("--spec", spec, "super-net spec (JSON)")->required();
    cost->add_option("--objective", objective, "size or flops")->check(CLI::IsMember({"size", "flops"}));

    auto* oracle = app.add_subcommand("oracle", "rank the whole design space");
    oracle->add_option("--config", config, "experiment config (JSON)")->required();
    oracle->add_option("--out", out, "output directory")->required();
    oracle->add_option("--runs", runs, "search run directories to score (default: search each configured seed)");

    auto* sample = app.add_subcommand("sample", "draw architectures from a theta snapshot");
    sample->add_option("--theta", theta, "theta snapshot (JSON)")->required();
    sample->add_option("--n", n, "number of architectures")->check(CLI::NonNegativeNumber);
    sample->add_option("--seed", seed, "sampling seed");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*search) return cmd_search(config, out);
        if (*child) return cmd_train_child(arch, config, out);
        if (*eval) return cmd_eval(checkpoint, data, model);
        if (*cost) return cmd_cost(arch, spec, objective);
        if (*oracle) return cmd_oracle(config, out, runs);
        if (*sample) return cmd_sample(theta, n, seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
