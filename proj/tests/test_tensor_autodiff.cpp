// Tensor storage semantics, tape-replay autodiff, and the named RNG streams.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "flexchill/ops.hpp"
#include "flexchill/rng.hpp"
#include "flexchill/tensor.hpp"

using namespace flexchill;

TEST_CASE("tensor shape and storage invariants", "[tensor]") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.rank() == 2);
    CHECK(t.numel() == 6);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(1) == 3);

    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({0}, {}), std::invalid_argument);

    Tensor z = Tensor::zeros({4});
    for (double v : z.data()) CHECK(v == 0.0);

    Tensor s = Tensor::scalar(2.5);  // scalars are shape {1}
    CHECK(s.rank() == 1);
    CHECK(s.numel() == 1);
    CHECK(s.value() == 2.5);
    CHECK_THROWS_AS(t.value(), std::invalid_argument);
}

TEST_CASE("tensor handles alias storage, clone copies it", "[tensor]") {
    Tensor a({2}, {1.0, 2.0});
    Tensor b = a;  // same storage
    b.data()[0] = 9.0;
    CHECK(a.data()[0] == 9.0);
    CHECK(a.same_storage(b));

    Tensor c = a.clone();
    CHECK_FALSE(c.same_storage(a));
    c.data()[0] = -1.0;
    CHECK(a.data()[0] == 9.0);
}

TEST_CASE("grad access requires population", "[tensor]") {
    Tensor t({2}, {1.0, 2.0}, true);
    CHECK(t.requires_grad());
    CHECK_FALSE(t.has_grad());
    CHECK_THROWS_AS(t.grad(), std::logic_error);
    t.grad_buffer()[1] = 3.0;
    REQUIRE(t.has_grad());
    CHECK(t.grad()[1] == 3.0);
    t.clear_grad();
    CHECK_FALSE(t.has_grad());
}

TEST_CASE("backward populates leaf gradients through a small chain", "[tensor]") {
    Tensor x({1, 2}, {3.0, -1.0}, true);
    Tape tape;
    Tensor h = relu(&tape, x);
    Tensor w({2, 2}, {1.0, 0.5, -0.5, 1.0}, true);
    Tensor b({2}, {0.0, 0.0}, true);
    Tensor y = dense(&tape, h, w, b);
    Tensor loss = ce_loss_t(&tape, y, {0}, 1.0);
    backward(tape, loss);

    REQUIRE(x.has_grad());
    REQUIRE(w.has_grad());
    CHECK(x.grad()[0] != 0.0);
    // d relu/dx is 0 on the negative lane.
    CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and spent tapes", "[tensor]") {
    Tensor x({1, 2}, {0.3, -0.4}, true);
    Tape tape;
    Tensor y = relu(&tape, x);
    CHECK_THROWS_AS(backward(tape, y), std::invalid_argument);

    Tape tape2;
    Tensor y2 = dense(&tape2, x, Tensor({2, 2}, {1, 0, 0, 1}, true), Tensor::zeros({2}, true));
    Tensor loss = ce_loss_t(&tape2, y2, {0}, 1.0);
    backward(tape2, loss);
    CHECK_THROWS_AS(backward(tape2, loss), std::logic_error);
}

TEST_CASE("shared leaves accumulate, dangling branches contribute nothing", "[tensor]") {
    // w feeds two dense ops but only one reaches the loss; the dangling
    // closure must see no upstream grad and leave w's accumulation alone.
    Tensor x({1, 2}, {0.7, -0.2}, true);
    Tensor w({2, 2}, {1.0, 0.0, 0.0, 1.0}, true);
    Tensor bias = Tensor::zeros({2}, true);
    Tape tape;
    Tensor ya = dense(&tape, x, w, bias);
    Tensor yb = dense(&tape, x, w, bias);  // dangling
    (void)yb;
    Tensor loss = ce_loss_t(&tape, ya, {0}, 1.0);
    backward(tape, loss);

    REQUIRE(w.has_grad());
    // Reference: same graph without the dangling branch.
    Tensor x2({1, 2}, {0.7, -0.2}, true);
    Tensor w2({2, 2}, {1.0, 0.0, 0.0, 1.0}, true);
    Tensor bias2 = Tensor::zeros({2}, true);
    Tape tape2;
    Tensor y2 = dense(&tape2, x2, w2, bias2);
    backward(tape2, ce_loss_t(&tape2, y2, {0}, 1.0));
    for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad()[i] == w2.grad()[i]);
    // x feeds both branches too; only the live one contributes.
    for (std::size_t i = 0; i < 2; ++i) CHECK(x.grad()[i] == x2.grad()[i]);
}

TEST_CASE("inference mode records nothing", "[tensor]") {
    Tensor x({1, 2}, {0.3, -0.4}, true);
    Tensor y = relu(nullptr, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("splitmix64 and fnv1a64 are stable", "[tensor][rng]") {
    // Reference values from the published constants.
    std::uint64_t state = 0;
    CHECK(splitmix64(state) == 0xe220a8397b1dcdafull);
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("named rng streams are deterministic and independent", "[tensor][rng]") {
    Rng a(42, "init");
    Rng b(42, "init");
    for (int i = 0; i < 16; ++i) CHECK(a() == b());

    Rng c(42, "init"), d(42, "batch-shuffle"), e(43, "init"), f(42, "init", 1);
    const std::uint64_t v = c();
    CHECK(v != d());
    CHECK(v != e());
    CHECK(v != f());
}

TEST_CASE("uniform01 lies in [0,1) and uniform_below is in range", "[tensor][rng]") {
    Rng rng(7, "test");
    for (int i = 0; i < 1000; ++i) {
        const double u = uniform01(rng);
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(uniform_below(rng, 10) < 10);
    }
}

TEST_CASE("normal and gamma moments are sane", "[tensor][rng]") {
    Rng rng(11, "moments");
    const int n = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = normal(rng);
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.03);
    CHECK(std::abs(sq / n - 1.0) < 0.05);

    double gsum = 0.0;
    for (int i = 0; i < n; ++i) gsum += gamma_sample(rng, 2.5);
    CHECK(std::abs(gsum / n - 2.5) < 0.06);  // E[Gamma(a,1)] = a
}

TEST_CASE("dirichlet draws sum to one", "[tensor][rng]") {
    Rng rng(5, "dir");
    for (int rep = 0; rep < 50; ++rep) {
        const auto p = dirichlet(rng, 0.3, 6);
        REQUIRE(p.size() == 6);
        double total = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(total == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("shuffle is a permutation and seed-stable", "[tensor][rng]") {
    std::vector<std::size_t> v(100);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    auto w = v;
    Rng r1(9, "s"), r2(9, "s");
    shuffle(v, r1);
    shuffle(w, r2);
    CHECK(v == w);
    CHECK(std::set<std::size_t>(v.begin(), v.end()).size() == 100);
}
