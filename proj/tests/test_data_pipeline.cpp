// Loaders, the synthetic generator, train/test splitting, and the three
// client partitioners.

#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <unistd.h>

#include "flexchill/data.hpp"
#include "flexchill/partition.hpp"

using namespace flexchill;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static int counter = 0;
    fs::path p = fs::temp_directory_path() /
                 ("flexchill_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

void put_be32(std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

void write_idx_images(const fs::path& path, const std::vector<unsigned char>& pixels,
                      std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                      std::uint32_t magic = 0x00000803u) {
    std::ofstream f(path, std::ios::binary);
    put_be32(f, magic);
    put_be32(f, n);
    put_be32(f, rows);
    put_be32(f, cols);
    f.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const fs::path& path, const std::vector<unsigned char>& labels,
                      std::uint32_t magic = 0x00000801u) {
    std::ofstream f(path, std::ios::binary);
    put_be32(f, magic);
    put_be32(f, static_cast<std::uint32_t>(labels.size()));
    f.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

// Rows whose single feature equals the row id, so splits stay traceable.
Dataset traceable(std::size_t n, std::size_t classes = 3) {
    std::vector<double> v(n);
    std::vector<int> lab(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = static_cast<double>(i);
        lab[i] = static_cast<int>(i % classes);
    }
    return {Tensor({n, 1}, std::move(v)), std::move(lab), classes};
}

void check_disjoint_in_range(const ClientPartition& part, std::size_t n) {
    std::set<std::size_t> seen;
    for (const auto& a : part.assignments)
        for (std::size_t r : a) {
            CHECK(r < n);
            CHECK(seen.insert(r).second);  // no row on two clients
        }
}

}  // namespace

TEST_CASE("idx pairs load with scaling and shape", "[data]") {
    const fs::path dir = temp_dir();
    const std::vector<unsigned char> pixels = {0,   255, 128, 64,   // image 0
                                               10,  20,  30,  40,   // image 1
                                               255, 255, 0,   0};   // image 2
    write_idx_images(dir / "img", pixels, 3, 2, 2);
    write_idx_labels(dir / "lab", {1, 0, 4});

    Dataset ds = load_idx(dir / "img", dir / "lab");
    CHECK(ds.size() == 3);
    CHECK(ds.features.shape() == std::vector<std::size_t>{3, 1, 2, 2});
    CHECK(ds.num_classes == 5);  // highest label + 1
    CHECK(ds.features.data()[0] == 0.0);
    CHECK(ds.features.data()[1] == 1.0);
    CHECK(ds.features.data()[2] == Catch::Approx(128.0 / 255.0).margin(1e-15));
    CHECK(ds.labels == std::vector<int>{1, 0, 4});
    CHECK(ds.sample_shape() == std::vector<std::size_t>{1, 2, 2});
    CHECK(ds.sample_elements() == 4);

    fs::remove_all(dir);
}

TEST_CASE("idx loader rejects malformed files by name", "[data]") {
    const fs::path dir = temp_dir();
    const std::vector<unsigned char> pixels(12, 7);
    write_idx_images(dir / "img", pixels, 3, 2, 2);
    write_idx_labels(dir / "lab", {0, 1, 2});

    SECTION("missing file") {
        CHECK_THROWS_AS(load_idx(dir / "absent", dir / "lab"), format_error);
    }
    SECTION("bad image magic") {
        write_idx_images(dir / "img2", pixels, 3, 2, 2, 0x00000801u);
        CHECK_THROWS_WITH(load_idx(dir / "img2", dir / "lab"),
                          Catch::Matchers::ContainsSubstring("img2"));
    }
    SECTION("truncated image payload") {
        write_idx_images(dir / "short", std::vector<unsigned char>(11, 7), 3, 2, 2);
        CHECK_THROWS_WITH(load_idx(dir / "short", dir / "lab"),
                          Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("label count mismatch") {
        write_idx_labels(dir / "lab2", {0, 1});
        CHECK_THROWS_AS(load_idx(dir / "img", dir / "lab2"), format_error);
    }
    SECTION("bad label magic") {
        write_idx_labels(dir / "lab3", {0, 1, 2}, 0x00000803u);
        CHECK_THROWS_AS(load_idx(dir / "img", dir / "lab3"), format_error);
    }
    fs::remove_all(dir);
}

TEST_CASE("csv loader parses trailing integer labels", "[data]") {
    const fs::path dir = temp_dir();
    const fs::path file = dir / "rows.csv";
    std::ofstream(file) << "1.0, 2.5, 0\n"
                           "\n"
                           "-3.0, 0.125, 2\n";
    Dataset ds = load_csv(file, 3);
    CHECK(ds.size() == 2);
    CHECK(ds.features.shape() == std::vector<std::size_t>{2, 2});
    CHECK(ds.features.data()[1] == 2.5);
    CHECK(ds.features.data()[2] == -3.0);
    CHECK(ds.labels == std::vector<int>{0, 2});

    SECTION("non-numeric cell reports its line") {
        std::ofstream(dir / "bad.csv") << "1,2,0\n1,oops,1\n";
        CHECK_THROWS_WITH(load_csv(dir / "bad.csv", 3),
                          Catch::Matchers::ContainsSubstring("line 2"));
    }
    SECTION("ragged rows are rejected") {
        std::ofstream(dir / "ragged.csv") << "1,2,0\n1,2,3,1\n";
        CHECK_THROWS_AS(load_csv(dir / "ragged.csv", 3), format_error);
    }
    SECTION("labels must be integers in range") {
        std::ofstream(dir / "frac.csv") << "1,2,0.5\n";
        CHECK_THROWS_AS(load_csv(dir / "frac.csv", 3), format_error);
        std::ofstream(dir / "range.csv") << "1,2,3\n";
        CHECK_THROWS_AS(load_csv(dir / "range.csv", 3), format_error);
    }
    SECTION("empty files are rejected") {
        std::ofstream(dir / "empty.csv") << "\n\n";
        CHECK_THROWS_AS(load_csv(dir / "empty.csv", 3), format_error);
    }
    fs::remove_all(dir);
}

TEST_CASE("gaussian blobs are balanced, class-major, and seed-stable", "[data]") {
    Dataset a = gen_gaussian_blobs(3, 10, 4, 0.5, 7);
    CHECK(a.size() == 30);
    CHECK(a.features.shape() == std::vector<std::size_t>{30, 4});
    CHECK(a.num_classes == 3);
    for (std::size_t r = 0; r < 30; ++r) CHECK(a.labels[r] == static_cast<int>(r / 10));

    Dataset b = gen_gaussian_blobs(3, 10, 4, 0.5, 7);
    for (std::size_t i = 0; i < a.features.numel(); ++i)
        CHECK(a.features.data()[i] == b.features.data()[i]);

    Dataset c = gen_gaussian_blobs(3, 10, 4, 0.5, 8);
    bool differs = false;
    for (std::size_t i = 0; i < a.features.numel(); ++i)
        if (a.features.data()[i] != c.features.data()[i]) differs = true;
    CHECK(differs);

    CHECK_THROWS_AS(gen_gaussian_blobs(1, 10, 4, 0.5, 7), std::invalid_argument);
    CHECK_THROWS_AS(gen_gaussian_blobs(3, 0, 4, 0.5, 7), std::invalid_argument);
}

TEST_CASE("train/test split is disjoint, exhaustive, and floored", "[data]") {
    Dataset ds = traceable(30);
    auto [train, test] = split_train_test(ds, 0.2, 5);
    CHECK(test.size() == 6);
    CHECK(train.size() == 24);

    std::set<int> ids;
    for (std::size_t r = 0; r < train.size(); ++r)
        ids.insert(static_cast<int>(train.features.data()[r]));
    for (std::size_t r = 0; r < test.size(); ++r)
        ids.insert(static_cast<int>(test.features.data()[r]));
    CHECK(ids.size() == 30);  // disjoint and exhaustive together

    auto [train2, test2] = split_train_test(ds, 0.2, 5);
    CHECK(train2.labels == train.labels);

    auto [all, none] = split_train_test(ds, 0.0, 5);
    CHECK(all.size() == 30);
    CHECK(none.size() == 0);

    CHECK_THROWS_AS(split_train_test(ds, 1.0, 5), std::invalid_argument);
    CHECK_THROWS_AS(split_train_test(ds, -0.1, 5), std::invalid_argument);
}

TEST_CASE("subset, gather, and row respect order and bounds", "[data]") {
    Dataset ds = traceable(10);
    Dataset sub = ds.subset({7, 2, 2});
    REQUIRE(sub.size() == 3);
    CHECK(sub.features.data()[0] == 7.0);
    CHECK(sub.features.data()[1] == 2.0);
    CHECK(sub.features.data()[2] == 2.0);  // duplicates allowed
    CHECK(sub.labels[0] == ds.labels[7]);

    CHECK_THROWS_AS(ds.subset({10}), std::invalid_argument);

    Dataset empty = ds.subset({});
    CHECK(empty.size() == 0);
    CHECK(empty.features.dim(0) == 1);  // placeholder row, size lives in labels

    Tensor batch = ds.gather(ds.identity_order(), 4, 7);
    CHECK(batch.shape() == std::vector<std::size_t>{3, 1});
    CHECK(batch.data()[0] == 4.0);

    Tensor one = ds.row(9);
    CHECK(one.shape() == std::vector<std::size_t>{1, 1});
    CHECK(one.data()[0] == 9.0);
}

TEST_CASE("shard partitioning deals label-sorted shards", "[data]") {
    // 24 rows, 6 per label; shard size 6 makes every shard single-label.
    Dataset ds = traceable(24, 4);
    ClientPartition part = partition_shards(ds, 2, 6, 2, 3);
    REQUIRE(part.num_clients() == 2);
    CHECK(part.assigned_total() == 24);
    check_disjoint_in_range(part, 24);
    for (const auto& a : part.assignments) {
        CHECK(a.size() == 12);
        std::set<int> labels_here;
        for (std::size_t r : a) labels_here.insert(ds.labels[r]);
        CHECK(labels_here.size() <= 2);  // at most one label per shard
    }

    ClientPartition again = partition_shards(ds, 2, 6, 2, 3);
    CHECK(again.assignments == part.assignments);

    CHECK_THROWS_AS(partition_shards(ds, 5, 6, 1, 3), std::invalid_argument);  // 5 > 4 shards
    CHECK_THROWS_AS(partition_shards(ds, 2, 0, 2, 3), std::invalid_argument);
    CHECK_THROWS_AS(partition_shards(ds, 0, 6, 2, 3), std::invalid_argument);
}

TEST_CASE("iid partitioning balances within one sample", "[data]") {
    Dataset ds = traceable(25);
    ClientPartition part = partition_iid(ds, 4, 9);
    CHECK(part.assigned_total() == 25);
    check_disjoint_in_range(part, 25);
    for (const auto& a : part.assignments) {
        CHECK(a.size() >= 6);
        CHECK(a.size() <= 7);
    }
    ClientPartition again = partition_iid(ds, 4, 9);
    CHECK(again.assignments == part.assignments);
    CHECK_THROWS_AS(partition_iid(ds, 0, 9), std::invalid_argument);
}

TEST_CASE("dirichlet proportion columns are normalized over clients", "[data]") {
    const auto p = dirichlet_class_proportions(5, 3, 0.5, 11);
    REQUIRE(p.size() == 5);
    for (std::size_t k = 0; k < 3; ++k) {
        double col = 0.0;
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(p[i][k] >= 0.0);
            col += p[i][k];
        }
        CHECK(col == Catch::Approx(1.0).margin(1e-12));
    }
    CHECK_THROWS_AS(dirichlet_class_proportions(5, 3, 0.0, 11), std::invalid_argument);
    CHECK_THROWS_AS(dirichlet_class_proportions(0, 3, 0.5, 11), std::invalid_argument);
}

TEST_CASE("dirichlet allocation takes floored shares from class pools", "[data]") {
    // 100 rows of class 0 and 50 of class 1.
    std::vector<double> v(150);
    std::vector<int> lab(150);
    for (std::size_t i = 0; i < 150; ++i) {
        v[i] = static_cast<double>(i);
        lab[i] = i < 100 ? 0 : 1;
    }
    Dataset ds{Tensor({150, 1}, std::move(v)), std::move(lab), 2};

    const std::size_t K = 4;
    const std::uint64_t seed = 21;
    const double alpha = 0.3;
    ClientPartition part = partition_dirichlet(ds, K, alpha, seed);
    check_disjoint_in_range(part, 150);

    // Replays the floored cursor walk against the public proportion matrix.
    const auto p = dirichlet_class_proportions(K, 2, alpha, seed);
    const std::size_t pool_size[2] = {100, 50};
    std::size_t expected[4][2];
    for (std::size_t k = 0; k < 2; ++k) {
        std::size_t cursor = 0;
        for (std::size_t i = 0; i < K; ++i) {
            const std::size_t want =
                static_cast<std::size_t>(static_cast<double>(pool_size[k]) * p[i][k]);
            const std::size_t take = std::min(want, pool_size[k] - cursor);
            expected[i][k] = take;
            cursor += take;
        }
    }
    for (std::size_t i = 0; i < K; ++i) {
        std::size_t got[2] = {0, 0};
        for (std::size_t r : part.assignments[i]) ++got[ds.labels[r]];
        CHECK(got[0] == expected[i][0]);
        CHECK(got[1] == expected[i][1]);
    }

    ClientPartition again = partition_dirichlet(ds, K, alpha, seed);
    CHECK(again.assignments == part.assignments);
}
