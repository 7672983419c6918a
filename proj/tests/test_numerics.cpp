#include <doctest.h>

#include <cmath>
#include <string>

#include "radapter/loss.hpp"
#include "radapter/numerics.hpp"
#include "radapter/rng.hpp"
#include "radapter/tensor.hpp"

using namespace radapter;

namespace {

Tensor2D random_matrix(SeededRng& rng, std::size_t rows, std::size_t cols) {
    return gaussian_sample(rng, rows, cols, 0.0, 1.0);
}

double max_abs_diff(const Tensor2D& a, const Tensor2D& b) {
    REQUIRE(a.same_shape(b));
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return worst;
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("tensor basics and shape guards") {
    Tensor2D t(2, 3);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.size() == 6);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.data()[i] == 0.0);

    CHECK_THROWS_AS(Tensor2D(2, 2, {1.0, 2.0, 3.0}), ShapeError);
    Tensor2D a = Tensor2D::filled(2, 2, 1.5);
    Tensor2D b = Tensor2D::identity(2);
    CHECK((a + b)(0, 0) == 2.5);
    CHECK((a - b)(0, 1) == 1.5);
    CHECK((a * 2.0)(1, 1) == 3.0);
    a.add_scaled(2.0, b);
    CHECK(a(0, 0) == 3.5);
    CHECK(a(0, 1) == 1.5);
}

TEST_CASE("matmul identity and hand-checked product") {
    SeededRng rng(1);
    const Tensor2D m = random_matrix(rng, 2, 2);
    const Tensor2D prod = matmul(Tensor2D::identity(2), m);
    CHECK(max_abs_diff(prod, m) == 0.0);

    const Tensor2D a(2, 2, {1, 2, 3, 4});
    const Tensor2D b(2, 2, {5, 6, 7, 8});
    const Tensor2D expect(2, 2, {19, 22, 43, 50});
    CHECK(max_abs_diff(matmul(a, b), expect) == 0.0);
}

TEST_CASE("matmul against a naive triple loop") {
    SeededRng rng(2);
    const Tensor2D a = random_matrix(rng, 7, 5);
    const Tensor2D b = random_matrix(rng, 5, 3);
    Tensor2D oracle(7, 3);
    for (std::size_t i = 0; i < 7; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 5; ++k) acc += a(i, k) * b(k, j);
            oracle(i, j) = acc;
        }
    }
    CHECK(max_abs_diff(matmul(a, b), oracle) <= 1e-12);
}

TEST_CASE("matmul shape error names both shapes") {
    const Tensor2D a(2, 3);
    const Tensor2D b(4, 2);
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("4x2") != std::string::npos);
    }
}

TEST_CASE("matmul transpose variants agree with explicit transposition") {
    SeededRng rng(3);
    const Tensor2D a = random_matrix(rng, 4, 6);
    const Tensor2D b = random_matrix(rng, 5, 6);
    CHECK(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))) <= 1e-14);
    const Tensor2D c = random_matrix(rng, 4, 5);
    CHECK(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)) <= 1e-14);
}

TEST_CASE("matmul associativity on random triples") {
    SeededRng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor2D a = random_matrix(rng, 4, 3);
        const Tensor2D b = random_matrix(rng, 3, 5);
        const Tensor2D c = random_matrix(rng, 5, 2);
        const Tensor2D left = matmul(matmul(a, b), c);
        const Tensor2D right = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < left.size(); ++i) {
            const double denom = std::max(1.0, std::abs(left.data()[i]));
            CHECK(std::abs(left.data()[i] - right.data()[i]) / denom <= 1e-9);
        }
    }
}

TEST_CASE("softmax rows: symmetry, overflow safety, frozen values") {
    const Tensor2D uniform = softmax_rows(Tensor2D(1, 3, {0, 0, 0}));
    for (std::size_t j = 0; j < 3; ++j) CHECK(uniform(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-14));

    const Tensor2D huge = softmax_rows(Tensor2D(1, 2, {1000, 0}));
    CHECK(std::isfinite(huge(0, 0)));
    CHECK(huge(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(huge(0, 1) == 0.0);

    const Tensor2D probs = softmax_rows(Tensor2D(1, 3, {1, 2, 3}));
    CHECK(std::abs(probs(0, 0) - 0.09003057317038046) <= 1e-15);
    CHECK(std::abs(probs(0, 1) - 0.24472847105479767) <= 1e-15);
    CHECK(std::abs(probs(0, 2) - 0.6652409557748219) <= 1e-15);
}

TEST_CASE("softmax rows sum to one and are shift-invariant") {
    SeededRng rng(5);
    const Tensor2D x = random_matrix(rng, 6, 9);
    const Tensor2D probs = softmax_rows(x);
    Tensor2D shifted = x;
    for (std::size_t i = 0; i < shifted.rows(); ++i) {
        for (std::size_t j = 0; j < shifted.cols(); ++j) shifted(i, j) += 3.25;
    }
    const Tensor2D probs2 = softmax_rows(shifted);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < probs.cols(); ++j) sum += probs(i, j);
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    CHECK(max_abs_diff(probs, probs2) <= 1e-12);
}

TEST_CASE("layer norm: constant row, frozen two-point row, affine collapse") {
    const Tensor2D gain = Tensor2D::filled(1, 2, 1.0);
    const Tensor2D bias(1, 2);
    const Tensor2D constant = layer_norm(Tensor2D(1, 2, {4, 4}), gain, bias, 1e-5);
    CHECK(constant(0, 0) == 0.0);
    CHECK(constant(0, 1) == 0.0);

    const Tensor2D two = layer_norm(Tensor2D(1, 2, {1, 3}), gain, bias, 1e-5);
    CHECK(std::abs(two(0, 0) + 0.9999950000374997) <= 1e-12);
    CHECK(std::abs(two(0, 1) - 0.9999950000374997) <= 1e-12);

    const Tensor2D zero_gain(1, 2);
    const Tensor2D b = Tensor2D::filled(1, 2, 7.5);
    const Tensor2D collapsed = layer_norm(Tensor2D(1, 2, {1, 3}), zero_gain, b, 1e-5);
    CHECK(collapsed(0, 0) == 7.5);
    CHECK(collapsed(0, 1) == 7.5);

    CHECK_THROWS_AS(layer_norm(Tensor2D(1, 3), gain, bias, 1e-5), ShapeError);
}

TEST_CASE("gelu: fixed points and frozen value") {
    const Tensor2D x(1, 3, {0.0, 10.0, 1.0});
    const Tensor2D y = gelu(x);
    CHECK(y(0, 0) == 0.0);
    CHECK(std::abs(y(0, 1) - 10.0) <= 1e-9);
    CHECK(std::abs(y(0, 2) - 0.8411919906082768) <= 1e-12);
}

TEST_CASE("l2 normalization: 3-4-5 row, idempotence, zero-row error") {
    const Tensor2D n = l2_normalize_rows(Tensor2D(1, 2, {3, 4}));
    CHECK(n(0, 0) == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(n(0, 1) == doctest::Approx(0.8).epsilon(1e-14));

    SeededRng rng(6);
    const Tensor2D x = random_matrix(rng, 4, 7);
    const Tensor2D once = l2_normalize_rows(x);
    const Tensor2D twice = l2_normalize_rows(once);
    CHECK(max_abs_diff(once, twice) <= 1e-12);
    for (std::size_t i = 0; i < once.rows(); ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < once.cols(); ++j) sq += once(i, j) * once(i, j);
        CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-12);
    }

    CHECK_THROWS_AS(l2_normalize_rows(Tensor2D(2, 3)), DegenerateEmbeddingError);
}

TEST_CASE("gaussian sampling: degenerate std, determinism, moments") {
    SeededRng rng(7);
    const Tensor2D constant = gaussian_sample(rng, 3, 4, 5.0, 0.0);
    for (std::size_t i = 0; i < constant.size(); ++i) CHECK(constant.data()[i] == 5.0);

    SeededRng a(8), b(8);
    const Tensor2D ma = gaussian_sample(a, 10, 10, 0.0, 1.0);
    const Tensor2D mb = gaussian_sample(b, 10, 10, 0.0, 1.0);
    CHECK(max_abs_diff(ma, mb) == 0.0);

    SeededRng c(9);
    const std::size_t n = 100000;
    const Tensor2D big = gaussian_sample(c, n / 100, 100, 0.25, 2.0);
    double mean = 0.0;
    for (std::size_t i = 0; i < big.size(); ++i) mean += big.data()[i];
    mean /= static_cast<double>(big.size());
    CHECK(std::abs(mean - 0.25) <= 4.0 * 2.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("zero-std sampling leaves the stream untouched") {
    SeededRng a(10), b(10);
    gaussian_sample(a, 2, 2, 1.0, 0.0);
    CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("finite difference oracle on linear and quadratic probes") {
    SeededRng rng(11);
    Tensor2D w = random_matrix(rng, 3, 4);

    const auto sum_probe = [&]() {
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) acc += w.data()[i];
        return acc;
    };
    CHECK(finite_diff_check(sum_probe, w, Tensor2D::filled(3, 4, 1.0), 1e-6) <= 1e-8);

    const auto quad_probe = [&]() {
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) acc += 0.5 * w.data()[i] * w.data()[i];
        return acc;
    };
    CHECK(finite_diff_check(quad_probe, w, w, 1e-6) <= 1e-8);
}

TEST_CASE("finite difference oracle validates the batched contrastive gradient") {
    SeededRng rng(12);
    Tensor2D f = l2_normalize_rows(random_matrix(rng, 6, 8));
    Tensor2D g = l2_normalize_rows(random_matrix(rng, 6, 8));
    const LabelMatrix y = build_label_matrix(std::vector<int>{0, 0, 1, 1, 2, 2});
    const LossConfig cfg{0.05, 0.02, 0.05};
    const auto probe = [&]() { return mpm_nce(f, g, y, cfg).loss; };
    const MpmNceResult res = mpm_nce(f, g, y, cfg);
    CHECK(finite_diff_check(probe, f, res.d_f, 1e-6) <= 1e-6);
    CHECK(finite_diff_check(probe, g, res.d_g, 1e-6) <= 1e-6);
}

}  // TEST_SUITE
