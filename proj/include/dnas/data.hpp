#pragma once

#include <dnas/checkpoint.hpp>
#include <dnas/rng.hpp>
#include <dnas/tensor.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

namespace dnas {

/// Images stored channel-planar, one after another, as f32.
struct Dataset {
    std::size_t channels = 3, height = 32, width = 32;
    std::size_t classes = 10;
    std::vector<float> images;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return channels * height * width; }

    std::span<const float> image(std::size_t i) const { return {images.data() + i * image_size(), image_size()}; }
    std::span<float> image(std::size_t i) { return {images.data() + i * image_size(), image_size()}; }

    void push(std::span<const float> img, int label) {
        images.insert(images.end(), img.begin(), img.end());
        labels.push_back(label);
    }

    Dataset subset(std::span<const std::size_t> indices) const {
        Dataset out = empty_like();
        out.images.reserve(indices.size() * image_size());
        for (auto i : indices) out.push(image(i), labels.at(i));
        return out;
    }

    Dataset empty_like() const {
        Dataset out;
        out.channels = channels;
        out.height = height;
        out.width = width;
        out.classes = classes;
        return out;
    }
};

/// Copies `indices` into a [B,C,H,W] tensor and a label vector.
template <class T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<T> x;
    x.reserve(indices.size() * data.image_size());
    std::vector<int> y;
    for (auto i : indices) {
        const auto img = data.image(i);
        x.insert(x.end(), img.begin(), img.end());
        y.push_back(data.labels[i]);
    }
    return {Tensor<T>(Shape{indices.size(), data.channels, data.height, data.width}, std::move(x)), std::move(y)};
}

/// Class-stratified split. round(ratio * n) examples go to the first part;
/// each class gets floor(ratio * n_c) of them and the remainder goes to the
/// classes with the largest fractional parts (lowest class first on ties).
/// Within a class the members are taken from a seeded shuffle. Both parts keep
/// ascending index order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const std::vector<int>& labels,
                                                                                   double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split ratio must be in (0,1)");
    if (labels.size() < 2) throw std::invalid_argument("cannot split fewer than two examples");
    int max_label = 0;
    for (int l : labels) max_label = std::max(max_label, l);
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label) + 1);
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);

    const auto total = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(labels.size())));
    std::vector<std::size_t> take(by_class.size());
    std::vector<std::pair<double, std::size_t>> remainder;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        const double exact = ratio * static_cast<double>(by_class[c].size());
        take[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += take[c];
        remainder.emplace_back(-(exact - std::floor(exact)), c);
    }
    std::sort(remainder.begin(), remainder.end());
    for (std::size_t r = 0; assigned < total && r < remainder.size(); ++r, ++assigned) ++take[remainder[r].second];

    Rng rng(seed, 0x5b11);
    std::vector<std::size_t> first, second;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& members = by_class[c];
        rng.shuffle(std::span<std::size_t>(members));
        const auto cut = members.begin() + static_cast<std::ptrdiff_t>(take[c]);
        first.insert(first.end(), members.begin(), cut);
        second.insert(second.end(), cut, members.end());
    }
    std::sort(first.begin(), first.end());
    std::sort(second.begin(), second.end());
    return {first, second};
}

inline std::pair<Dataset, Dataset> split_search_data(const Dataset& data, double ratio, std::uint64_t seed) {
    auto [a, b] = split_indices(data.labels, ratio, seed);
    return {data.subset(a), data.subset(b)};
}

// ------------------------------------------------------------------ synthetic

struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t channels = 3;
    std::size_t image_size = 16;
    std::size_t train_per_class = 200;
    std::size_t test_per_class = 50;
    double noise = 0.1;
    /// Per-example random spatial phase shift, as a fraction of one period.
    double jitter = 0.0;
    std::uint64_t seed = 1;
};

namespace detail {

/// Each class is a plane wave with its own frequency, orientation and
/// per-channel phase; examples add Gaussian noise (and optional phase jitter).
inline void synth_example(const SyntheticSpec& s, std::size_t cls, Rng& rng, std::vector<float>& out) {
    const double orientations = std::ceil(static_cast<double>(s.classes) / 2.0);
    const double freq = 1.0 + static_cast<double>(cls % 2);
    const double angle = std::numbers::pi * std::floor(static_cast<double>(cls) / 2.0) / orientations;
    const double shift = s.jitter > 0.0 ? rng.uniform(-s.jitter, s.jitter) * 2.0 * std::numbers::pi : 0.0;
    const double norm = 1.0 / std::sqrt(0.5 + s.noise * s.noise);
    const double n = static_cast<double>(s.image_size);
    for (std::size_t c = 0; c < s.channels; ++c) {
        const double phase = 2.0 * std::numbers::pi * static_cast<double>((cls * 7 + c * 3) % 11) / 11.0 + shift;
        for (std::size_t y = 0; y < s.image_size; ++y) {
            for (std::size_t x = 0; x < s.image_size; ++x) {
                const double u = (static_cast<double>(x) * std::cos(angle) + static_cast<double>(y) * std::sin(angle)) / n;
                double v = std::sin(2.0 * std::numbers::pi * freq * u + phase);
                if (s.noise > 0.0) v += s.noise * rng.normal();
                out.push_back(static_cast<float>(v * norm));
            }
        }
    }
}

} // namespace detail

/// Deterministic train/test sets of class-conditional patterns.
inline std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& s) {
    if (s.classes < 2 || s.channels == 0 || s.image_size == 0 || s.train_per_class == 0) {
        throw std::invalid_argument("synthetic spec: classes >= 2 and positive sizes required");
    }
    Dataset train;
    train.channels = s.channels;
    train.height = train.width = s.image_size;
    train.classes = s.classes;
    Dataset test = train.empty_like();
    Rng rng(s.seed, 0xda7a);
    std::vector<float> buf;
    auto fill = [&](Dataset& d, std::size_t per_class) {
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t c = 0; c < s.classes; ++c) {
                buf.clear();
                detail::synth_example(s, c, rng, buf);
                d.push(buf, static_cast<int>(c));
            }
        }
    };
    fill(train, s.train_per_class);
    fill(test, s.test_per_class);
    return {std::move(train), std::move(test)};
}

// ------------------------------------------------------------------- CIFAR-10

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::array<float, 3> kCifarMean{0.4914f, 0.4822f, 0.4465f};
inline constexpr std::array<float, 3> kCifarStd{0.2470f, 0.2435f, 0.2616f};

/// Parses concatenated 3073-byte records (label byte, then 1024 R, G, B bytes).
/// `limit` caps the number of records read (0 = all).
inline void parse_cifar_records(std::string_view bytes, const std::string& source, Dataset& out, std::size_t limit = 0) {
    if (bytes.size() % kCifarRecordBytes != 0) {
        throw FormatError(source + ": truncated record at byte " +
                          std::to_string(bytes.size() - bytes.size() % kCifarRecordBytes) + " (file size " +
                          std::to_string(bytes.size()) + " is not a multiple of 3073)");
    }
    const std::size_t count = bytes.size() / kCifarRecordBytes;
    std::vector<float> img(3072);
    for (std::size_t r = 0; r < count && (limit == 0 || out.size() < limit); ++r) {
        const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data()) + r * kCifarRecordBytes;
        if (rec[0] > 9) {
            throw FormatError(source + ": label " + std::to_string(rec[0]) + " out of range at byte " +
                              std::to_string(r * kCifarRecordBytes));
        }
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < 1024; ++p)
                img[c * 1024 + p] = (static_cast<float>(rec[1 + c * 1024 + p]) / 255.0f - kCifarMean[c]) / kCifarStd[c];
        out.push(img, rec[0]);
    }
}

/// Inverse of the normalization used by the loader, back to the record bytes.
inline std::string encode_cifar_record(std::span<const float> image, int label) {
    std::string rec(kCifarRecordBytes, '\0');
    rec[0] = static_cast<char>(label);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 1024; ++p) {
            const float v = (image[c * 1024 + p] * kCifarStd[c] + kCifarMean[c]) * 255.0f;
            rec[1 + c * 1024 + p] = static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L)));
        }
    return rec;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("missing file " + path.string());
    return {(std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()};
}

/// Loads data_batch_{1..5}.bin and test_batch.bin from `dir`.
inline std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir, std::size_t train_limit = 0,
                                                std::size_t test_limit = 0) {
    Dataset train;
    train.channels = 3;
    train.height = train.width = 32;
    train.classes = 10;
    Dataset test = train.empty_like();
    for (int i = 1; i <= 5; ++i) {
        const auto path = dir / ("data_batch_" + std::to_string(i) + ".bin");
        parse_cifar_records(read_file(path), path.string(), train, train_limit);
    }
    const auto path = dir / "test_batch.bin";
    parse_cifar_records(read_file(path), path.string(), test, test_limit);
    return {std::move(train), std::move(test)};
}

// ----------------------------------------------------------------------- IDX

/// Reads an IDX image file (u8, rank 3 [N,H,W] or rank 4 [N,H,W,C]) and the
/// matching IDX label file (u8, rank 1). Pixels are scaled to [0,1] and then
/// standardized with the training set's mean and std.
inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t classes) {
    const auto ib = read_file(images), lb = read_file(labels);
    auto be32 = [](const std::string& b, std::size_t off, const std::string& src) {
        if (off + 4 > b.size()) throw FormatError(src + ": truncated header at byte " + std::to_string(off));
        const auto* p = reinterpret_cast<const unsigned char*>(b.data()) + off;
        return (std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) | (std::size_t{p[2]} << 8) | std::size_t{p[3]};
    };
    const auto imagic = be32(ib, 0, images.string()), lmagic = be32(lb, 0, labels.string());
    if ((imagic >> 8) != 0x08 || (lmagic >> 8) != 0x08) throw FormatError("IDX files must hold unsigned bytes");
    const std::size_t irank = imagic & 0xff;
    if (irank != 3 && irank != 4) throw FormatError(images.string() + ": image rank must be 3 or 4");
    if ((lmagic & 0xff) != 1) throw FormatError(labels.string() + ": label rank must be 1");
    const std::size_t n = be32(ib, 4, images.string()), h = be32(ib, 8, images.string()), w = be32(ib, 12, images.string());
    const std::size_t c = irank == 4 ? be32(ib, 16, images.string()) : 1;
    const std::size_t header = 4 + 4 * irank;
    if (be32(lb, 4, labels.string()) != n) throw FormatError("IDX image and label counts differ");
    if (ib.size() < header + n * h * w * c) throw FormatError(images.string() + ": truncated at byte " + std::to_string(ib.size()));
    if (lb.size() < 8 + n) throw FormatError(labels.string() + ": truncated at byte " + std::to_string(lb.size()));
    Dataset d;
    d.channels = c;
    d.height = h;
    d.width = w;
    d.classes = classes;
    std::vector<float> img(c * h * w);
    for (std::size_t i = 0; i < n; ++i) {
        const auto* px = reinterpret_cast<const unsigned char*>(ib.data()) + header + i * h * w * c;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) img[(ch * h + y) * w + x] = px[(y * w + x) * c + ch] / 255.0f;
        const int label = static_cast<unsigned char>(lb[8 + i]);
        if (static_cast<std::size_t>(label) >= classes) {
            throw FormatError(labels.string() + ": label " + std::to_string(label) + " at byte " + std::to_string(8 + i));
        }
        d.push(img, label);
    }
    return d;
}

/// Per-channel standardization with statistics taken from `reference`.
inline void standardize(Dataset& d, const Dataset& reference) {
    const std::size_t hw = d.height * d.width;
    for (std::size_t c = 0; c < d.channels; ++c) {
        double s = 0, ss = 0;
        const double count = static_cast<double>(reference.size() * hw);
        for (std::size_t i = 0; i < reference.size(); ++i)
            for (std::size_t p = 0; p < hw; ++p) {
                const double v = reference.images[(i * d.channels + c) * hw + p];
                s += v;
                ss += v * v;
            }
        const double mean = s / count, sd = std::sqrt(std::max(ss / count - mean * mean, 1e-12));
        for (std::size_t i = 0; i < d.size(); ++i)
            for (std::size_t p = 0; p < hw; ++p) {
                auto& v = d.images[(i * d.channels + c) * hw + p];
                v = static_cast<float>((v - mean) / sd);
            }
    }
}

// -------------------------------------------------------------- augmentation

/// Zeroes a size x size square centred on a uniformly random pixel; the
/// square is clipped at the borders. `image` is one [C,H,W] example.
inline void cutout(std::span<float> image, std::size_t channels, std::size_t height, std::size_t width,
                   std::size_t size, Rng& rng) {
    if (size == 0 || size > std::min(height, width)) throw std::invalid_argument("cutout size must be in (0, min(H,W)]");
    const auto cy = static_cast<std::ptrdiff_t>(rng.below(height));
    const auto cx = static_cast<std::ptrdiff_t>(rng.below(width));
    const auto half = static_cast<std::ptrdiff_t>(size / 2);
    const auto y0 = std::max<std::ptrdiff_t>(0, cy - half), x0 = std::max<std::ptrdiff_t>(0, cx - half);
    const auto y1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(height), cy - half + static_cast<std::ptrdiff_t>(size));
    const auto x1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(width), cx - half + static_cast<std::ptrdiff_t>(size));
    for (std::size_t c = 0; c < channels; ++c)
        for (auto y = y0; y < y1; ++y)
            for (auto x = x0; x < x1; ++x) image[(c * height + static_cast<std::size_t>(y)) * width + static_cast<std::size_t>(x)] = 0.0f;
}

} // namespace dnas
