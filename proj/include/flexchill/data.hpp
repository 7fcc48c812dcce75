#pragma once

// Dataset container and sources: IDX image/label pairs, numeric CSV, and
// synthetic Gaussian blobs. Features are one tensor [N, ...]; labels are ints
// in [0, num_classes).

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "flexchill/errors.hpp"
#include "flexchill/rng.hpp"
#include "flexchill/tensor.hpp"

namespace flexchill {

struct Dataset {
    Tensor features;  // [N, d...]
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }

    std::vector<std::size_t> sample_shape() const {
        std::vector<std::size_t> s(features.shape().begin() + 1, features.shape().end());
        return s;
    }

    std::size_t sample_elements() const {
        return size() == 0 ? 0 : features.numel() / size();
    }

    // Rows gathered in the given order.
    Dataset subset(const std::vector<std::size_t>& indices) const {
        const std::size_t d = features.numel() / std::max<std::size_t>(size(), 1);
        std::vector<std::size_t> shape = features.shape();
        shape[0] = std::max<std::size_t>(indices.size(), 1);
        std::vector<double> out(indices.size() * d);
        std::vector<int> lab(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const std::size_t r = indices[i];
            if (r >= size()) throw std::invalid_argument("dataset: subset index out of range");
            std::copy_n(features.data().begin() + static_cast<std::ptrdiff_t>(r * d), d,
                        out.begin() + static_cast<std::ptrdiff_t>(i * d));
            lab[i] = labels[r];
        }
        if (indices.empty()) {
            // Tensor shapes need positive dims; an empty dataset keeps a
            // one-row placeholder and reports its size through labels.
            return {Tensor(shape, std::vector<double>(d, 0.0)), {}, num_classes};
        }
        return {Tensor(std::move(shape), std::move(out)), std::move(lab), num_classes};
    }

    // Batch tensor for rows [begin, end) of `order`.
    Tensor gather(const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) const {
        const std::size_t d = sample_elements();
        std::vector<std::size_t> shape = features.shape();
        shape[0] = end - begin;
        std::vector<double> out((end - begin) * d);
        for (std::size_t i = begin; i < end; ++i) {
            const std::size_t r = order[i];
            std::copy_n(features.data().begin() + static_cast<std::ptrdiff_t>(r * d), d,
                        out.begin() + static_cast<std::ptrdiff_t>((i - begin) * d));
        }
        return Tensor(std::move(shape), std::move(out));
    }

    Tensor row(std::size_t r) const {
        return gather(identity_order(), r, r + 1);
    }

    std::vector<std::size_t> identity_order() const {
        std::vector<std::size_t> order(size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        return order;
    }
};

namespace detail {

inline std::uint32_t read_be_u32(std::ifstream& f, const std::string& origin) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw format_error("idx: " + origin + " is truncated in the header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

// IDX pair loader. Images scale to [0,1] and come out as [N,1,rows,cols];
// class count is the highest label + 1.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw format_error("idx: cannot open " + images_path.string());
    if (detail::read_be_u32(fi, images_path.string()) != 0x00000803u)
        throw format_error("idx: " + images_path.string() + " has a bad image magic");
    const std::uint32_t n = detail::read_be_u32(fi, images_path.string());
    const std::uint32_t rows = detail::read_be_u32(fi, images_path.string());
    const std::uint32_t cols = detail::read_be_u32(fi, images_path.string());
    if (n == 0 || rows == 0 || cols == 0)
        throw format_error("idx: " + images_path.string() + " declares an empty dimension");
    std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * rows * cols);
    fi.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (static_cast<std::size_t>(fi.gcount()) != pixels.size())
        throw format_error("idx: " + images_path.string() + " payload is truncated");

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw format_error("idx: cannot open " + labels_path.string());
    if (detail::read_be_u32(fl, labels_path.string()) != 0x00000801u)
        throw format_error("idx: " + labels_path.string() + " has a bad label magic");
    const std::uint32_t nl = detail::read_be_u32(fl, labels_path.string());
    if (nl != n)
        throw format_error("idx: " + labels_path.string() + " holds " + std::to_string(nl) +
                           " labels for " + std::to_string(n) + " images in " +
                           images_path.string());
    std::vector<unsigned char> raw(nl);
    fl.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(fl.gcount()) != raw.size())
        throw format_error("idx: " + labels_path.string() + " payload is truncated");

    std::vector<double> values(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i)
        values[i] = static_cast<double>(pixels[i]) / 255.0;
    std::vector<int> labels(raw.begin(), raw.end());
    const int max_label = *std::max_element(labels.begin(), labels.end());
    return {Tensor({n, 1, rows, cols}, std::move(values)), std::move(labels),
            static_cast<std::size_t>(max_label) + 1};
}

// Numeric CSV: every row is feature columns plus a trailing integer label.
inline Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes) {
    if (num_classes < 2) throw std::invalid_argument("csv: need at least two classes");
    std::ifstream f(path);
    if (!f) throw format_error("csv: cannot open " + path.string());

    std::vector<double> values;
    std::vector<int> labels;
    std::size_t width = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                const double v = std::stod(cell, &used);
                while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used])))
                    ++used;
                if (used != cell.size()) throw std::invalid_argument(cell);
                cells.push_back(v);
            } catch (const std::exception&) {
                throw format_error("csv: " + path.string() + " line " + std::to_string(line_no) +
                                   ": cannot parse '" + cell + "'");
            }
        }
        if (cells.size() < 2)
            throw format_error("csv: " + path.string() + " line " + std::to_string(line_no) +
                               ": need at least one feature and a label");
        if (width == 0) width = cells.size();
        if (cells.size() != width)
            throw format_error("csv: " + path.string() + " line " + std::to_string(line_no) +
                               ": expected " + std::to_string(width) + " columns, found " +
                               std::to_string(cells.size()));
        const double raw_label = cells.back();
        const int label = static_cast<int>(raw_label);
        if (static_cast<double>(label) != raw_label || label < 0 ||
            static_cast<std::size_t>(label) >= num_classes)
            throw format_error("csv: " + path.string() + " line " + std::to_string(line_no) +
                               ": label must be an integer in [0, " +
                               std::to_string(num_classes) + ")");
        values.insert(values.end(), cells.begin(), cells.end() - 1);
        labels.push_back(label);
    }
    if (labels.empty()) throw format_error("csv: " + path.string() + " holds no data rows");
    return {Tensor({labels.size(), width - 1}, std::move(values)), std::move(labels), num_classes};
}

// Balanced isotropic Gaussian clusters: per class, `per_class` points around
// a class center drawn once from the seed's "centers" stream; spread scales
// the per-coordinate noise. Rows come out class-major.
inline Dataset gen_gaussian_blobs(std::size_t num_classes, std::size_t per_class, std::size_t dim,
                                  double spread, std::uint64_t seed) {
    if (num_classes < 2) throw std::invalid_argument("blobs: need at least two classes");
    if (per_class == 0) throw std::invalid_argument("blobs: per_class must be positive");
    if (dim == 0) throw std::invalid_argument("blobs: dim must be positive");
    if (!(spread >= 0.0)) throw std::invalid_argument("blobs: spread must be non-negative");

    Rng center_rng(seed, "blob-centers");
    std::vector<double> centers(num_classes * dim);
    for (auto& v : centers) v = uniform(center_rng, -1.0, 1.0);

    const std::size_t n = num_classes * per_class;
    std::vector<double> values(n * dim);
    std::vector<int> labels(n);
    for (std::size_t c = 0; c < num_classes; ++c) {
        Rng rng(seed, "blob-samples", c);
        for (std::size_t i = 0; i < per_class; ++i) {
            const std::size_t row = c * per_class + i;
            labels[row] = static_cast<int>(c);
            for (std::size_t j = 0; j < dim; ++j)
                values[row * dim + j] = centers[c * dim + j] + spread * normal(rng);
        }
    }
    return {Tensor({n, dim}, std::move(values)), std::move(labels), num_classes};
}

// Deterministic row split into (rest, held-out) by the seed's "test-split"
// stream; the held-out share is rounded down.
inline std::pair<Dataset, Dataset> split_train_test(const Dataset& ds, double test_fraction,
                                                    std::uint64_t seed) {
    if (!(test_fraction >= 0.0) || !(test_fraction < 1.0))
        throw std::invalid_argument("split: test fraction must be in [0, 1)");
    std::vector<std::size_t> order = ds.identity_order();
    Rng rng(seed, "test-split");
    shuffle(order, rng);
    const std::size_t n_test = static_cast<std::size_t>(test_fraction * static_cast<double>(ds.size()));
    std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    return {ds.subset(train_idx), ds.subset(test_idx)};
}

}  // namespace flexchill
