#pragma once

// IDX ingestion, preprocessing, and synthetic teacher data.
//
// Dataset directory layout under a root (see dataset_root()):
//   <root>/mnist/{train,t10k}-images-idx3-ubyte
//   <root>/mnist/{train,t10k}-labels-idx1-ubyte
//   <root>/fashion-mnist/  same four names

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <zlib.h>

#include "mcover/committee_model.hpp"
#include "mcover/errors.hpp"
#include "mcover/rng.hpp"

namespace mcover::data {

inline constexpr std::uint32_t kImageMagic = 2051;
inline constexpr std::uint32_t kLabelMagic = 2049;
inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;

using Bytes = std::vector<std::uint8_t>;

inline std::uint32_t crc32_of(const Bytes& b) {
    uLong c = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks
    std::size_t off = 0;
    while (off < b.size()) {
        const std::size_t n = std::min<std::size_t>(b.size() - off, 1u << 30);
        c = crc32(c, b.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(c);
}

struct Provenance {
    std::string images_path;
    std::string labels_path;
    std::uint32_t images_crc32 = 0;
    std::uint32_t labels_crc32 = 0;
};

struct IdxDataset {
    std::size_t count = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    Bytes images;  // count * rows * cols, row-major per image
    Bytes labels;
    Provenance provenance;

    std::size_t pixels() const { return rows * cols; }
    const std::uint8_t* image(std::size_t i) const { return images.data() + i * pixels(); }
};

namespace detail {
inline std::uint32_t read_be32(const Bytes& b, std::size_t off) {
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
           std::uint32_t(b[off + 3]);
}
inline void put_be32(Bytes& b, std::uint32_t v) {
    b.push_back(std::uint8_t(v >> 24));
    b.push_back(std::uint8_t(v >> 16));
    b.push_back(std::uint8_t(v >> 8));
    b.push_back(std::uint8_t(v));
}
inline void need(const Bytes& b, std::size_t expected, const char* what, std::size_t offset) {
    if (b.size() < expected) throw Truncated(what, offset, expected, b.size());
}
}  // namespace detail

struct ImageBlock {
    std::size_t count = 0, rows = 0, cols = 0;
    Bytes pixels;
};

inline ImageBlock parse_idx_images(const Bytes& b) {
    detail::need(b, 4, "idx image header truncated", b.size());
    const std::uint32_t magic = detail::read_be32(b, 0);
    if (magic != kImageMagic) throw BadMagic("idx image file has magic " + std::to_string(magic) + ", expected 2051", 0);
    detail::need(b, 16, "idx image header truncated", b.size());
    ImageBlock out;
    out.count = detail::read_be32(b, 4);
    out.rows = detail::read_be32(b, 8);
    out.cols = detail::read_be32(b, 12);
    const std::size_t payload = out.count * out.rows * out.cols;
    detail::need(b, 16 + payload, "idx image payload truncated", b.size());
    out.pixels.assign(b.begin() + 16, b.begin() + static_cast<std::ptrdiff_t>(16 + payload));
    return out;
}

inline Bytes parse_idx_labels(const Bytes& b) {
    detail::need(b, 4, "idx label header truncated", b.size());
    const std::uint32_t magic = detail::read_be32(b, 0);
    if (magic != kLabelMagic) throw BadMagic("idx label file has magic " + std::to_string(magic) + ", expected 2049", 0);
    detail::need(b, 8, "idx label header truncated", b.size());
    const std::size_t count = detail::read_be32(b, 4);
    detail::need(b, 8 + count, "idx label payload truncated", b.size());
    return Bytes(b.begin() + 8, b.begin() + static_cast<std::ptrdiff_t>(8 + count));
}

inline Bytes serialize_idx_images(const IdxDataset& d) {
    Bytes b;
    b.reserve(16 + d.images.size());
    detail::put_be32(b, kImageMagic);
    detail::put_be32(b, static_cast<std::uint32_t>(d.count));
    detail::put_be32(b, static_cast<std::uint32_t>(d.rows));
    detail::put_be32(b, static_cast<std::uint32_t>(d.cols));
    b.insert(b.end(), d.images.begin(), d.images.end());
    return b;
}

inline Bytes serialize_idx_labels(const IdxDataset& d) {
    Bytes b;
    b.reserve(8 + d.labels.size());
    detail::put_be32(b, kLabelMagic);
    detail::put_be32(b, static_cast<std::uint32_t>(d.labels.size()));
    b.insert(b.end(), d.labels.begin(), d.labels.end());
    return b;
}

inline IdxDataset parse_idx(const Bytes& image_bytes, const Bytes& label_bytes) {
    ImageBlock img = parse_idx_images(image_bytes);
    Bytes labels = parse_idx_labels(label_bytes);
    if (labels.size() != img.count)
        throw CountMismatch("image count " + std::to_string(img.count) + " != label count " + std::to_string(labels.size()), 4);
    IdxDataset d;
    d.count = img.count;
    d.rows = img.rows;
    d.cols = img.cols;
    d.images = std::move(img.pixels);
    d.labels = std::move(labels);
    d.provenance.images_crc32 = crc32_of(image_bytes);
    d.provenance.labels_crc32 = crc32_of(label_bytes);
    return d;
}

inline Bytes read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot open " + path);
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const Bytes& b) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput("cannot write " + path);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

inline IdxDataset read_idx(const std::string& images_path, const std::string& labels_path) {
    IdxDataset d = parse_idx(read_file(images_path), read_file(labels_path));
    d.provenance.images_path = images_path;
    d.provenance.labels_path = labels_path;
    return d;
}

/// MCOVER_DATA_ROOT, falling back to /root/data.
inline std::filesystem::path dataset_root() {
    if (const char* env = std::getenv("MCOVER_DATA_ROOT"); env && *env) return env;
    return "/root/data";
}

/// split is "train" or "t10k"; name is "mnist" or "fashion-mnist", or a directory path.
inline std::pair<std::string, std::string> idx_paths(const std::string& name, const std::string& split) {
    std::filesystem::path dir = name;
    if (!std::filesystem::is_directory(dir)) dir = dataset_root() / name;
    return {(dir / (split + "-images-idx3-ubyte")).string(), (dir / (split + "-labels-idx1-ubyte")).string()};
}

inline bool idx_available(const std::string& name, const std::string& split) {
    const auto [img, lab] = idx_paths(name, split);
    return std::filesystem::exists(img) && std::filesystem::exists(lab);
}

inline IdxDataset load_idx(const std::string& name, const std::string& split) {
    const auto [img, lab] = idx_paths(name, split);
    return read_idx(img, lab);
}

inline double normalize_pixel(std::uint8_t p) { return (p / 255.0 - kMnistMean) / kMnistStd; }

/// count x pixels matrix of normalized inputs, optionally limited to the first `limit` images.
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> normalize_mnist(const IdxDataset& d,
                                                                                        std::size_t limit = 0) {
    const std::size_t n = (limit == 0 || limit > d.count) ? d.count : limit;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> X(n, d.pixels());
    std::array<Scalar, 256> lut;
    for (int v = 0; v < 256; ++v) lut[static_cast<std::size_t>(v)] = static_cast<Scalar>(normalize_pixel(std::uint8_t(v)));
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* img = d.image(i);
        for (std::size_t j = 0; j < d.pixels(); ++j) X(Eigen::Index(i), Eigen::Index(j)) = lut[img[j]];
    }
    return X;
}

struct BinaryTwoClassSet {
    Eigen::MatrixXd inputs;  // P x n, entries +-1
    Eigen::VectorXd labels;  // +-1
    std::pair<int, int> class_pair{-1, -1};
    std::vector<std::size_t> source_index;

    Eigen::Index size() const { return inputs.rows(); }
    Eigen::Index dim() const { return inputs.cols(); }
};

/// class_a maps to +1, class_b to -1. subsample_P = 0 keeps every eligible example
/// (then classes are not balanced).
inline BinaryTwoClassSet binarize_two_class(const IdxDataset& d, int class_a, int class_b, double threshold,
                                            std::size_t subsample_P, Rng& rng) {
    if (class_a == class_b) throw InvalidParameter("class pair must be two distinct classes");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidParameter("binarization threshold must be in [0, 1]");
    std::vector<std::size_t> a_idx, b_idx;
    for (std::size_t i = 0; i < d.count; ++i) {
        if (d.labels[i] == class_a) a_idx.push_back(i);
        else if (d.labels[i] == class_b) b_idx.push_back(i);
    }
    std::vector<std::size_t> chosen;
    if (subsample_P == 0) {
        chosen = a_idx;
        chosen.insert(chosen.end(), b_idx.begin(), b_idx.end());
        std::sort(chosen.begin(), chosen.end());
    } else {
        const std::size_t na = (subsample_P + 1) / 2, nb = subsample_P / 2;
        if (na > a_idx.size() || nb > b_idx.size())
            throw SizeError("requested " + std::to_string(subsample_P) + " examples but only " + std::to_string(a_idx.size()) +
                            " + " + std::to_string(b_idx.size()) + " are available");
        std::sample(a_idx.begin(), a_idx.end(), std::back_inserter(chosen), static_cast<std::ptrdiff_t>(na), rng);
        std::sample(b_idx.begin(), b_idx.end(), std::back_inserter(chosen), static_cast<std::ptrdiff_t>(nb), rng);
        std::shuffle(chosen.begin(), chosen.end(), rng);
    }
    const double cut = threshold * 255.0;
    BinaryTwoClassSet out;
    out.class_pair = {class_a, class_b};
    out.inputs.resize(Eigen::Index(chosen.size()), Eigen::Index(d.pixels()));
    out.labels.resize(Eigen::Index(chosen.size()));
    for (std::size_t r = 0; r < chosen.size(); ++r) {
        const std::uint8_t* img = d.image(chosen[r]);
        for (std::size_t j = 0; j < d.pixels(); ++j) out.inputs(Eigen::Index(r), Eigen::Index(j)) = img[j] > cut ? 1.0 : -1.0;
        out.labels(Eigen::Index(r)) = d.labels[chosen[r]] == class_a ? 1.0 : -1.0;
    }
    out.source_index = std::move(chosen);
    return out;
}

struct TeacherSplit {
    BinaryTwoClassSet train;
    BinaryTwoClassSet test;
    committee::CommitteeParams teacher;
};

inline TeacherSplit synthetic_committee_teacher(int n, int K, std::size_t P_train, std::size_t P_test, Rng& rng) {
    if (n < 1) throw InvalidParameter("input dimension must be >= 1");
    if (K < 1 || K % 2 == 0) throw InvalidParameter("teacher hidden-unit count must be odd");
    std::bernoulli_distribution coin(0.5);
    auto pm = [&] { return coin(rng) ? 1.0 : -1.0; };
    TeacherSplit out;
    out.teacher.J.resize(K, n);
    for (Eigen::Index i = 0; i < out.teacher.J.size(); ++i) out.teacher.J.data()[i] = pm();
    Eigen::VectorXd x(n);
    auto fill = [&](BinaryTwoClassSet& set, std::size_t P) {
        set.class_pair = {1, -1};
        set.inputs.resize(Eigen::Index(P), n);
        for (Eigen::Index r = 0; r < Eigen::Index(P); ++r) {
            // inputs with any zero teacher field are redrawn, so every label has a strict vote
            do {
                for (Eigen::Index i = 0; i < n; ++i) x(i) = pm();
            } while (((out.teacher.J * x).array() == 0.0).any());
            set.inputs.row(r) = x.transpose();
        }
        const Eigen::VectorXi y = committee::committee_predict(out.teacher, set.inputs);
        set.labels = y.cast<double>();
        set.source_index.resize(P);
        std::iota(set.source_index.begin(), set.source_index.end(), std::size_t{0});
    };
    fill(out.train, P_train);
    fill(out.test, P_test);
    return out;
}

}  // namespace mcover::data
