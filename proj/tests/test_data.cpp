#include <dnas/config.hpp>
#include <dnas/ops.hpp>
#include <dnas/optim.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

namespace dnas {
namespace {

Dataset labelled(const std::vector<int>& labels) {
    Dataset d;
    d.channels = 1;
    d.height = d.width = 1;
    d.classes = 10;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const float v = static_cast<float>(i);
        d.push(std::span<const float>(&v, 1), labels[i]);
    }
    return d;
}

TEST(Split, CifarSizedCounts) {
    std::vector<int> labels(50000);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
    auto [a, b] = split_indices(labels, 0.8, 3);
    EXPECT_EQ(a.size(), 40000u);
    EXPECT_EQ(b.size(), 10000u);
}

TEST(Split, DisjointExhaustiveStratified) {
    const std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
    auto [a, b] = split_indices(labels, 0.5, 9);
    ASSERT_EQ(a.size(), 5u);
    ASSERT_EQ(b.size(), 5u);
    std::set<std::size_t> all(a.begin(), a.end());
    all.insert(b.begin(), b.end());
    EXPECT_EQ(all.size(), 10u);
    int ones_a = 0, ones_b = 0;
    for (auto i : a) ones_a += labels[i];
    for (auto i : b) ones_b += labels[i];
    // 2.5 per class: each class gives two, the leftover slot goes to class 0.
    EXPECT_EQ(ones_a, 2);
    EXPECT_EQ(ones_b, 3);
}

TEST(Split, StratifiedOnUnevenClasses) {
    std::vector<int> labels;
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 10 * (c + 1); ++i) labels.push_back(c);
    auto [a, b] = split_indices(labels, 0.8, 1);
    std::vector<int> per(4, 0);
    for (auto i : a) ++per[static_cast<std::size_t>(labels[i])];
    EXPECT_EQ(per, (std::vector<int>{8, 16, 24, 32}));
}

TEST(Split, DeterministicBySeed) {
    std::vector<int> labels(200);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
    EXPECT_EQ(split_indices(labels, 0.7, 4), split_indices(labels, 0.7, 4));
    EXPECT_NE(split_indices(labels, 0.7, 4).first, split_indices(labels, 0.7, 5).first);
}

TEST(Split, Rejections) {
    EXPECT_THROW(split_indices({0}, 0.5, 1), std::invalid_argument);
    EXPECT_THROW(split_indices({0, 1}, 0.0, 1), std::invalid_argument);
    EXPECT_THROW(split_indices({0, 1}, 1.0, 1), std::invalid_argument);
}

TEST(Split, DatasetPartsCarryTheirImages) {
    const auto d = labelled({0, 1, 2, 0, 1, 2, 0, 1, 2, 0});
    auto [w, t] = split_search_data(d, 0.6, 2);
    EXPECT_EQ(w.size() + t.size(), d.size());
    std::multiset<float> seen;
    for (const auto* part : {&w, &t})
        for (std::size_t i = 0; i < part->size(); ++i) {
            const float v = part->image(i)[0];
            seen.insert(v);
            EXPECT_EQ(part->labels[i], d.labels[static_cast<std::size_t>(v)]);
        }
    EXPECT_EQ(seen.size(), 10u);
    EXPECT_EQ(std::set<float>(seen.begin(), seen.end()).size(), 10u);
}

TEST(Synthetic, SameSeedBitIdentical) {
    SyntheticSpec s;
    s.train_per_class = 5;
    s.test_per_class = 2;
    s.jitter = 0.3;
    const auto a = generate_synthetic(s), b = generate_synthetic(s);
    EXPECT_EQ(a.first.images, b.first.images);
    EXPECT_EQ(a.second.images, b.second.images);
    EXPECT_EQ(a.first.labels, b.first.labels);
    s.seed = 2;
    EXPECT_NE(generate_synthetic(s).first.images, a.first.images);
}

TEST(Synthetic, ZeroNoiseMakesClassesConstant) {
    SyntheticSpec s;
    s.noise = 0.0;
    s.train_per_class = 4;
    s.test_per_class = 1;
    const auto [train, test] = generate_synthetic(s);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto c = static_cast<std::size_t>(train.labels[i]);
        const auto ref = train.image(c);
        const auto img = train.image(i);
        EXPECT_TRUE(std::equal(img.begin(), img.end(), ref.begin())) << "example " << i;
    }
}

TEST(Synthetic, ShapesAndLabels) {
    SyntheticSpec s;
    s.classes = 4;
    s.channels = 2;
    s.image_size = 6;
    s.train_per_class = 3;
    s.test_per_class = 2;
    const auto [train, test] = generate_synthetic(s);
    EXPECT_EQ(train.size(), 12u);
    EXPECT_EQ(test.size(), 8u);
    EXPECT_EQ(train.images.size(), 12u * 2 * 36);
    for (int l : train.labels) EXPECT_TRUE(l >= 0 && l < 4);
    s.classes = 1;
    EXPECT_THROW(generate_synthetic(s), std::invalid_argument);
}

// Nearest class mean is a linear classifier: argmax_c (mu_c . x - |mu_c|^2 / 2).
TEST(Synthetic, LinearProbeSeparatesLowNoise) {
    SyntheticSpec s;
    const auto [train, test] = generate_synthetic(s);
    const std::size_t d = train.image_size();
    std::vector<std::vector<double>> mu(s.classes, std::vector<double>(d, 0.0));
    std::vector<double> count(s.classes, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto c = static_cast<std::size_t>(train.labels[i]);
        const auto img = train.image(i);
        for (std::size_t k = 0; k < d; ++k) mu[c][k] += img[k];
        count[c] += 1;
    }
    for (std::size_t c = 0; c < s.classes; ++c)
        for (auto& v : mu[c]) v /= count[c];
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto img = test.image(i);
        double best = -1e300;
        int arg = -1;
        for (std::size_t c = 0; c < s.classes; ++c) {
            double score = 0;
            for (std::size_t k = 0; k < d; ++k) score += mu[c][k] * (img[k] - 0.5 * mu[c][k]);
            if (score > best) {
                best = score;
                arg = static_cast<int>(c);
            }
        }
        correct += arg == test.labels[i];
    }
    EXPECT_GT(static_cast<double>(correct) / static_cast<double>(test.size()), 0.9);
}

TEST(Synthetic, TwoLayerReferenceNetLearnsDefaultSpec) {
    SyntheticSpec s;
    const auto [train, test] = generate_synthetic(s);
    const std::size_t d = train.image_size(), hidden = 32;
    Rng init(5);
    auto param = [&](Shape shape, double bound) {
        Tensor<float> t(shape);
        for (auto& v : t.data()) v = static_cast<float>(init.uniform(-bound, bound));
        t.set_requires_grad(true);
        return t;
    };
    auto w1 = param({hidden, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    auto b1 = param({hidden}, 0.0);
    auto w2 = param({s.classes, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)));
    auto b2 = param({s.classes}, 0.0);
    SgdMomentum<float> opt({w1, b1, w2, b2}, SgdConfig{0.05, 0.9, 0.0});
    auto forward = [&](const Dataset& data, std::span<const std::size_t> idx) {
        auto [x, y] = make_batch<float>(data, idx);
        auto flat = reshape(x, Shape{idx.size(), d});
        return std::pair{linear(relu(linear(flat, w1, b1)), w2, b2), y};
    };
    auto accuracy = [&] {
        NoGradGuard g;
        std::vector<std::size_t> idx(test.size());
        std::iota(idx.begin(), idx.end(), 0);
        auto [logits, y] = forward(test, idx);
        std::size_t ok = 0;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < s.classes; ++c)
                if (logits[r * s.classes + c] > logits[r * s.classes + best]) best = c;
            ok += static_cast<int>(best) == y[r];
        }
        return static_cast<double>(ok) / static_cast<double>(idx.size());
    };
    Rng shuffle(6);
    double acc = 0;
    int epochs = 0;
    for (; epochs < 30 && acc < 0.95; ++epochs) {
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        shuffle.shuffle(std::span<std::size_t>(order));
        for (std::size_t st = 0; st < order.size(); st += 64) {
            std::span<const std::size_t> idx(order.data() + st, std::min<std::size_t>(64, order.size() - st));
            auto [logits, y] = forward(train, idx);
            opt.zero_grad();
            auto loss = softmax_cross_entropy(logits, y);
            backward(loss);
            opt.step(0.05);
        }
        acc = accuracy();
    }
    EXPECT_GE(acc, 0.95) << "after " << epochs << " epochs";
}

std::string random_records(std::size_t n, Rng& rng) {
    std::string bytes;
    for (std::size_t r = 0; r < n; ++r) {
        bytes.push_back(static_cast<char>(rng.below(10)));
        for (std::size_t i = 0; i < 3072; ++i) bytes.push_back(static_cast<char>(rng.below(256)));
    }
    return bytes;
}

TEST(Cifar, RecordRoundTrip) {
    Rng rng(12);
    const auto bytes = random_records(4, rng);
    Dataset d;
    d.channels = 3;
    d.height = d.width = 32;
    parse_cifar_records(bytes, "mem", d);
    ASSERT_EQ(d.size(), 4u);
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_EQ(encode_cifar_record(d.image(r), d.labels[r]), bytes.substr(r * 3073, 3073)) << "record " << r;
        EXPECT_EQ(d.labels[r], static_cast<unsigned char>(bytes[r * 3073]));
    }
}

TEST(Cifar, ChannelPlanarNormalization) {
    std::string rec(3073, '\0');
    rec[0] = 3;
    rec[1] = static_cast<char>(255);            // R, pixel 0
    rec[1 + 1024 + 5] = static_cast<char>(128);  // G, pixel 5
    Dataset d;
    parse_cifar_records(rec, "mem", d);
    EXPECT_FLOAT_EQ(d.images[0], (1.0f - kCifarMean[0]) / kCifarStd[0]);
    EXPECT_FLOAT_EQ(d.images[1024 + 5], (128.0f / 255.0f - kCifarMean[1]) / kCifarStd[1]);
    EXPECT_FLOAT_EQ(d.images[2048], (0.0f - kCifarMean[2]) / kCifarStd[2]);
}

TEST(Cifar, TruncationAndBadLabelsReported) {
    Rng rng(1);
    auto bytes = random_records(2, rng);
    Dataset d;
    try {
        parse_cifar_records(std::string_view(bytes).substr(0, bytes.size() - 7), "batch.bin", d);
        FAIL() << "truncated input accepted";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("byte 3073"), std::string::npos) << e.what();
    }
    bytes[3073] = 10;
    try {
        parse_cifar_records(bytes, "batch.bin", d);
        FAIL() << "label 10 accepted";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("byte 3073"), std::string::npos) << e.what();
    }
}

TEST(Cifar, DirectoryLoaderCountsAndLimits) {
    const auto dir = std::filesystem::temp_directory_path() / "dnas_cifar_test";
    std::filesystem::create_directories(dir);
    Rng rng(2);
    auto put = [&](const std::string& name, std::size_t n) {
        std::ofstream(dir / name, std::ios::binary) << random_records(n, rng);
    };
    for (int i = 1; i <= 5; ++i) put("data_batch_" + std::to_string(i) + ".bin", 3);
    put("test_batch.bin", 2);
    auto [train, test] = load_cifar10(dir);
    EXPECT_EQ(train.size(), 15u);
    EXPECT_EQ(test.size(), 2u);
    for (int l : train.labels) EXPECT_TRUE(l >= 0 && l <= 9);
    auto [tl, sl] = load_cifar10(dir, 4, 1);
    EXPECT_EQ(tl.size(), 4u);
    EXPECT_EQ(sl.size(), 1u);
    std::filesystem::remove(dir / "test_batch.bin");
    EXPECT_THROW(load_cifar10(dir), FormatError);
    std::filesystem::remove_all(dir);
}

TEST(Idx, ReadsImagesAndStandardizes) {
    const auto dir = std::filesystem::temp_directory_path() / "dnas_idx_test";
    std::filesystem::create_directories(dir);
    auto be = [](std::string& s, std::uint32_t v) {
        for (int sh = 24; sh >= 0; sh -= 8) s.push_back(static_cast<char>((v >> sh) & 0xff));
    };
    std::string img, lab;
    be(img, 0x0803);
    be(img, 2);
    be(img, 2);
    be(img, 2);
    for (int v : {0, 255, 0, 255, 255, 255, 0, 0}) img.push_back(static_cast<char>(v));
    be(lab, 0x0801);
    be(lab, 2);
    lab += std::string{char(1), char(0)};
    std::ofstream(dir / "i.idx", std::ios::binary) << img;
    std::ofstream(dir / "l.idx", std::ios::binary) << lab;
    auto d = load_idx(dir / "i.idx", dir / "l.idx", 2);
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d.labels, (std::vector<int>{1, 0}));
    EXPECT_EQ(d.channels, 1u);
    EXPECT_FLOAT_EQ(d.images[1], 1.0f);
    EXPECT_THROW(load_idx(dir / "i.idx", dir / "l.idx", 1), FormatError);
    const Dataset ref = d;
    standardize(d, ref);
    double s = 0, ss = 0;
    for (float v : d.images) {
        s += v;
        ss += v * v;
    }
    EXPECT_NEAR(s / 8, 0.0, 1e-6);
    EXPECT_NEAR(ss / 8, 1.0, 1e-5);
    std::filesystem::remove_all(dir);
}

std::size_t zeroed(const std::vector<float>& img) {
    return static_cast<std::size_t>(std::count(img.begin(), img.end(), 0.0f));
}

TEST(Cutout, FullSizeCentredZeroesEverything) {
    // Draw until the centre lands on the middle pixel.
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        Rng probe(seed);
        const auto cy = probe.below(8), cx = probe.below(8);
        if (cy != 4 || cx != 4) continue;
        std::vector<float> img(2 * 64, 1.0f);
        Rng rng(seed);
        cutout(img, 2, 8, 8, 8, rng);
        EXPECT_EQ(zeroed(img), img.size());
        return;
    }
    FAIL() << "no seed produced the centre pixel";
}

TEST(Cutout, ZeroedAreaLowerBound) {
    Rng rng(3);
    for (std::size_t size = 1; size <= 8; ++size) {
        for (int t = 0; t < 200; ++t) {
            std::vector<float> img(64, 1.0f);
            cutout(img, 1, 8, 8, size, rng);
            const auto z = zeroed(img);
            EXPECT_GE(static_cast<double>(z), (size / 2.0) * (size / 2.0));
            EXPECT_LE(z, size * size);
        }
    }
}

TEST(Cutout, SizeOneZeroesOnePixelAcrossChannels) {
    Rng rng(4);
    for (int t = 0; t < 100; ++t) {
        std::vector<float> img(3 * 25, 1.0f);
        cutout(img, 3, 5, 5, 1, rng);
        ASSERT_EQ(zeroed(img), 3u);
        std::size_t pos = 0;
        while (img[pos] != 0.0f) ++pos;
        EXPECT_EQ(img[25 + pos], 0.0f);
        EXPECT_EQ(img[50 + pos], 0.0f);
    }
}

TEST(Cutout, MeanStrictlyDecreasesOnPositiveImages) {
    Rng rng(5), fill(6);
    for (int t = 0; t < 1000; ++t) {
        std::vector<float> img(3 * 16);
        for (auto& v : img) v = static_cast<float>(fill.uniform(0.1, 1.0));
        const double before = std::accumulate(img.begin(), img.end(), 0.0);
        cutout(img, 3, 4, 4, 2, rng);
        EXPECT_LT(std::accumulate(img.begin(), img.end(), 0.0), before);
    }
}

TEST(Cutout, RejectsBadSizes) {
    Rng rng(1);
    std::vector<float> img(16, 1.0f);
    EXPECT_THROW(cutout(img, 1, 4, 4, 0, rng), std::invalid_argument);
    EXPECT_THROW(cutout(img, 1, 4, 4, 5, rng), std::invalid_argument);
}

} // namespace
} // namespace dnas
