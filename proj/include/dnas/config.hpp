#pragma once

#include <dnas/cost_model.hpp>
#include <dnas/data.hpp>
#include <dnas/optim.hpp>
#include <dnas/supernet.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dnas {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// One Gumbel draw per choice block per mini-batch, or one per example.
enum class MaskGranularity { Batch, Example };

struct SearchConfig {
    int epochs = 90;
    int warmup = 10;
    TemperatureSchedule temperature{};
    int sample_every = 10;
    int samples_per_event = 5;
    std::size_t batch_size = 512;
    SgdConfig weight_opt{};
    AdamConfig theta_opt{};
    CostConfig cost{};
    double split_ratio = 0.8;
    MaskGranularity granularity = MaskGranularity::Batch;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs < 1) throw ConfigError("search.epochs must be >= 1");
        if (warmup < 0 || warmup >= epochs) throw ConfigError("search.warmup must satisfy 0 <= warmup < epochs");
        if (sample_every < 1) throw ConfigError("search.sample_every must be >= 1");
        if (samples_per_event < 0) throw ConfigError("search.samples_per_event must be >= 0");
        if (batch_size < 1) throw ConfigError("search.batch_size must be >= 1");
        if (!(temperature.t0 > 0.0) || temperature.eta < 0.0) throw ConfigError("search.temperature: t0 > 0, eta >= 0");
        if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("search.split_ratio must be in (0,1)");
        if (!(cost.beta > 0.0) || !(cost.gamma > 0.0)) throw ConfigError("search.cost: beta and gamma must be positive");
    }
};

struct ChildConfig {
    int epochs = 160;
    std::size_t batch_size = 512;
    SgdConfig sgd{};
    bool cutout = true;
    std::size_t cutout_size = 16;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs < 1) throw ConfigError("child.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("child.batch_size must be >= 1");
        if (cutout && cutout_size == 0) throw ConfigError("child.cutout_size must be positive");
    }
};

struct OracleConfig {
    std::size_t max_space = 4096;
    /// Independent search seeds compared against the oracle ranking.
    std::vector<std::uint64_t> search_seeds{1, 2, 3, 4, 5};
    double top_fraction = 0.3;
};

enum class DataSource { Synthetic, Cifar10, Idx };

struct DatasetSpec {
    DataSource source = DataSource::Synthetic;
    SyntheticSpec synthetic{};
    std::string path;  // CIFAR-10 directory
    std::string train_images, train_labels, test_images, test_labels;  // IDX
    std::size_t classes = 10;
    std::size_t train_limit = 0, test_limit = 0;  // 0 = everything
};

/// Everything a run needs; each section has documented defaults.
struct ExperimentConfig {
    SuperNetSpec spec;
    DatasetSpec data{};
    SearchConfig search{};
    ChildConfig child{};
    OracleConfig oracle{};
    /// Train and evaluate every queued architecture at the end of a search.
    bool train_children = true;
};

inline std::pair<Dataset, Dataset> load_dataset(const DatasetSpec& d) {
    switch (d.source) {
    case DataSource::Synthetic: return generate_synthetic(d.synthetic);
    case DataSource::Cifar10: return load_cifar10(d.path, d.train_limit, d.test_limit);
    case DataSource::Idx: {
        auto train = load_idx(d.train_images, d.train_labels, d.classes);
        auto test = load_idx(d.test_images, d.test_labels, d.classes);
        auto take = [](Dataset& ds, std::size_t limit) {
            if (limit == 0 || limit >= ds.size()) return;
            ds.labels.resize(limit);
            ds.images.resize(limit * ds.image_size());
        };
        take(train, d.train_limit);
        take(test, d.test_limit);
        const Dataset reference = train;
        standardize(train, reference);
        standardize(test, reference);
        return {std::move(train), std::move(test)};
    }
    }
    throw ConfigError("unknown data source");
}

} // namespace dnas
