#include <doctest.h>

#include <cmath>
#include <vector>

#include "radapter/adapter.hpp"
#include "radapter/numerics.hpp"
#include "radapter/rng.hpp"

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

AdapterWeights random_full(SeededRng& rng, std::size_t d, double drop_p) {
    AdapterWeights aw = AdapterWeights::full_rank_zero(d, drop_p);
    std::get<FullRank>(aw.structure).w = random_matrix(rng, d, d);
    return aw;
}

AdapterWeights random_low(SeededRng& rng, std::size_t d, std::size_t r, double drop_p) {
    AdapterWeights aw = AdapterWeights::low_rank_init(d, r, drop_p, rng);
    std::get<LowRank>(aw.structure).b = random_matrix(rng, d, r);
    std::get<LowRank>(aw.structure).a = random_matrix(rng, r, d);
    return aw;
}

// Numerical row rank by Gaussian elimination with partial pivoting.
std::size_t numeric_rank(Tensor2D m, double tol) {
    std::size_t rank = 0;
    for (std::size_t col = 0; col < m.cols() && rank < m.rows(); ++col) {
        std::size_t pivot = rank;
        for (std::size_t r = rank + 1; r < m.rows(); ++r) {
            if (std::abs(m(r, col)) > std::abs(m(pivot, col))) pivot = r;
        }
        if (std::abs(m(pivot, col)) <= tol) continue;
        for (std::size_t c = 0; c < m.cols(); ++c) std::swap(m(rank, c), m(pivot, c));
        for (std::size_t r = rank + 1; r < m.rows(); ++r) {
            const double f = m(r, col) / m(rank, col);
            for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) -= f * m(rank, c);
        }
        ++rank;
    }
    return rank;
}

}  // namespace

TEST_SUITE("adapter") {

TEST_CASE("effective matrix per structure") {
    SeededRng rng(1);
    AdapterWeights low = AdapterWeights::low_rank_init(6, 2, 0.0, rng);
    const Tensor2D zero = effective_matrix(low);
    for (std::size_t i = 0; i < zero.size(); ++i) CHECK(zero.data()[i] == 0.0);

    const AdapterWeights full = random_full(rng, 4, 0.0);
    CHECK(max_abs_diff(effective_matrix(full), std::get<FullRank>(full.structure).w) == 0.0);

    const AdapterWeights low2 = random_low(rng, 6, 2, 0.0);
    CHECK(numeric_rank(effective_matrix(low2), 1e-10) <= 2);
}

TEST_CASE("construction guards") {
    SeededRng rng(2);
    CHECK_THROWS_AS(AdapterWeights::full_rank_zero(4, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(AdapterWeights::low_rank_init(4, 0, 0.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(AdapterWeights::low_rank_init(4, 4, 0.0, rng), std::invalid_argument);
}

TEST_CASE("apply is the identity at zero weights in both modes") {
    SeededRng rng(3);
    const Tensor2D x = random_matrix(rng, 5, 4);
    const AdapterWeights zero = AdapterWeights::full_rank_zero(4, 0.5);
    CHECK(max_abs_diff(adapter_apply(x, zero, RunMode::eval, nullptr), x) == 0.0);
    SeededRng gate(4);
    CHECK(max_abs_diff(adapter_apply(x, zero, RunMode::train, &gate), x) == 0.0);
}

TEST_CASE("train mode with zero drop probability equals eval mode") {
    SeededRng rng(5);
    const Tensor2D x = random_matrix(rng, 3, 6);
    const AdapterWeights aw = random_full(rng, 6, 0.0);
    SeededRng gate(6);
    CHECK(max_abs_diff(adapter_apply(x, aw, RunMode::train, &gate),
                       adapter_apply(x, aw, RunMode::eval, nullptr)) == 0.0);
}

TEST_CASE("train mode requires an rng") {
    SeededRng rng(7);
    const AdapterWeights aw = random_full(rng, 3, 0.2);
    CHECK_THROWS_AS(draw_adapter_gate(aw, RunMode::train, nullptr), MissingDrawError);
    const AdapterDraw eval_draw = draw_adapter_gate(aw, RunMode::eval, nullptr);
    CHECK(eval_draw.scale == 1.0);
}

TEST_CASE("dropping is unbiased at p=0.2 over many draws") {
    SeededRng rng(8);
    const std::size_t d = 4;
    const Tensor2D x = random_matrix(rng, 2, d);
    const AdapterWeights aw = random_full(rng, d, 0.2);
    const Tensor2D expected = adapter_apply(x, aw, RunMode::eval, nullptr);

    SeededRng gate(9);
    Tensor2D mean(2, d);
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        mean += adapter_apply(x, aw, RunMode::train, &gate);
    }
    mean *= 1.0 / n;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        if (std::abs(expected.data()[i]) > 0.01) {
            CHECK(std::abs(mean.data()[i] - expected.data()[i]) /
                      std::abs(expected.data()[i]) <=
                  0.01);
        }
    }
}

TEST_CASE("gate draws hit both branches with the right scale") {
    SeededRng rng(10);
    const AdapterWeights aw = random_full(rng, 3, 0.25);
    SeededRng gate(11);
    int kept = 0, dropped = 0;
    for (int i = 0; i < 2000; ++i) {
        const AdapterDraw draw = draw_adapter_gate(aw, RunMode::train, &gate);
        if (draw.scale == 0.0) {
            ++dropped;
        } else {
            CHECK(draw.scale == doctest::Approx(1.0 / 0.75).epsilon(1e-14));
            ++kept;
        }
    }
    CHECK(kept > 1300);
    CHECK(dropped > 350);
}

TEST_CASE("ema update: immediate copy at m=0 and one-step arithmetic at m=0.999") {
    SeededRng rng(12);
    const AdapterWeights aw = random_full(rng, 3, 0.0);
    AdapterEma ema = AdapterEma::from(AdapterWeights::full_rank_zero(3, 0.0), 0.0);
    ema_update(ema, aw);
    CHECK(max_abs_diff(ema.shadow, effective_matrix(aw)) == 0.0);
    CHECK(ema.update_count == 1);

    AdapterWeights ones = AdapterWeights::full_rank_zero(2, 0.0);
    std::get<FullRank>(ones.structure).w = Tensor2D::filled(2, 2, 1.0);
    AdapterEma slow = AdapterEma::from(AdapterWeights::full_rank_zero(2, 0.0), 0.999);
    ema_update(slow, ones);
    for (std::size_t i = 0; i < slow.shadow.size(); ++i) {
        CHECK(std::abs(slow.shadow.data()[i] - 0.001) <= 1e-15);
    }
}

TEST_CASE("ema matches the geometric closed form under constant weights") {
    SeededRng rng(13);
    for (const double m : {0.0, 0.9, 0.999}) {
        const AdapterWeights aw = random_full(rng, 3, 0.0);
        const Tensor2D w = effective_matrix(aw);
        const Tensor2D shadow0 = random_matrix(rng, 3, 3);
        AdapterEma ema{shadow0, m, 0};
        const int t = 1000;
        for (int i = 0; i < t; ++i) ema_update(ema, aw);
        const double mt = std::pow(m, t);
        const Tensor2D expect = shadow0 * mt + w * (1.0 - mt);
        CHECK(max_abs_diff(ema.shadow, expect) <= 1e-12);
        CHECK(ema.update_count == static_cast<std::uint64_t>(t));
    }
}

TEST_CASE("reparametrization folds zero and scalar adapters exactly") {
    SeededRng rng(14);
    const Tensor2D w_org = random_matrix(rng, 4, 4);
    const Tensor2D b_org = random_matrix(rng, 1, 4);

    const MergedLayer at_zero = reparametrize(w_org, &b_org, Tensor2D(4, 4));
    CHECK(max_abs_diff(at_zero.w, w_org) == 0.0);
    CHECK(max_abs_diff(at_zero.b, b_org) == 0.0);

    const double c = 0.75;
    const MergedLayer scaled = reparametrize(w_org, &b_org, Tensor2D::identity(4) * c);
    CHECK(max_abs_diff(scaled.w, w_org * (1.0 + c)) <= 1e-12);
    CHECK(max_abs_diff(scaled.b, b_org * (1.0 + c)) <= 1e-12);
}

TEST_CASE("reparametrized layer reproduces the adapter two-path output") {
    SeededRng rng(15);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 4;
        const Tensor2D w_org = random_matrix(rng, d, d);
        const Tensor2D b_org = random_matrix(rng, 1, d);
        const AdapterWeights aw = random_full(rng, d, 0.0);
        const Tensor2D x = random_matrix(rng, 3, d);

        // Adapter path: y = x*W_org + b, then h(y) = y*W_adp + y.
        Tensor2D y = matmul(x, w_org);
        for (std::size_t i = 0; i < y.rows(); ++i) {
            for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b_org(0, j);
        }
        const Tensor2D via_adapter = adapter_apply(y, aw, RunMode::eval, nullptr);

        // Folded path: x*W_rep + b_rep.
        const MergedLayer merged = reparametrize(w_org, &b_org, effective_matrix(aw));
        Tensor2D via_fold = matmul(x, merged.w);
        for (std::size_t i = 0; i < via_fold.rows(); ++i) {
            for (std::size_t j = 0; j < via_fold.cols(); ++j) via_fold(i, j) += merged.b(0, j);
        }
        CHECK(max_abs_diff(via_adapter, via_fold) <= 1e-12);
    }
}

TEST_CASE("rescale merge endpoints and interpolation identity") {
    SeededRng rng(16);
    const std::size_t d = 4;
    Tensor2D w_org = random_matrix(rng, d, d);
    w_org(0, 0) = -0.0;  // bitwise passthrough must preserve the sign bit
    const Tensor2D b_org = random_matrix(rng, 1, d);
    const Tensor2D shadow = random_matrix(rng, d, d);

    const MergedLayer at0 = rescale_merge(w_org, &b_org, shadow, 0.0);
    CHECK(max_abs_diff(at0.w, w_org) == 0.0);
    CHECK(std::signbit(at0.w(0, 0)));
    CHECK(max_abs_diff(at0.b, b_org) == 0.0);

    const MergedLayer at1 = rescale_merge(w_org, &b_org, shadow, 1.0);
    const MergedLayer rep = reparametrize(w_org, &b_org, shadow);
    CHECK(max_abs_diff(at1.w, rep.w) == 0.0);
    CHECK(max_abs_diff(at1.b, rep.b) == 0.0);

    for (const double alpha : {0.25, 0.5, 0.75}) {
        const MergedLayer mid = rescale_merge(w_org, &b_org, shadow, alpha);
        const Tensor2D expect_w = rep.w * alpha + w_org * (1.0 - alpha);
        const Tensor2D expect_b = rep.b * alpha + b_org * (1.0 - alpha);
        CHECK(max_abs_diff(mid.w, expect_w) <= 1e-12);
        CHECK(max_abs_diff(mid.b, expect_b) <= 1e-12);
    }

    CHECK_THROWS_AS(rescale_merge(w_org, &b_org, shadow, -0.1), std::domain_error);
    CHECK_THROWS_AS(rescale_merge(w_org, &b_org, shadow, 1.1), std::domain_error);
}

TEST_CASE("merged entries are affine in alpha") {
    SeededRng rng(17);
    const std::size_t d = 3;
    const Tensor2D w_org = random_matrix(rng, d, d);
    const Tensor2D shadow = random_matrix(rng, d, d);
    const MergedLayer lo = rescale_merge(w_org, nullptr, shadow, 0.0);
    const MergedLayer hi = rescale_merge(w_org, nullptr, shadow, 1.0);
    for (const double alpha : {0.25, 0.5, 0.75}) {
        const MergedLayer mid = rescale_merge(w_org, nullptr, shadow, alpha);
        for (std::size_t i = 0; i < mid.w.size(); ++i) {
            const double line = lo.w.data()[i] + alpha * (hi.w.data()[i] - lo.w.data()[i]);
            CHECK(std::abs(mid.w.data()[i] - line) <= 1e-12);
        }
    }
}

TEST_CASE("missing bias produces a zero bias output") {
    SeededRng rng(18);
    const Tensor2D w_org = random_matrix(rng, 3, 3);
    const Tensor2D shadow = random_matrix(rng, 3, 3);
    const MergedLayer merged = rescale_merge(w_org, nullptr, shadow, 0.5);
    CHECK(merged.b.rows() == 1);
    CHECK(merged.b.cols() == 3);
    for (std::size_t i = 0; i < merged.b.size(); ++i) CHECK(merged.b.data()[i] == 0.0);
}

TEST_CASE("backward: zero weights pass the upstream through, dropped gate zeroes the weight grad") {
    SeededRng rng(19);
    const Tensor2D x = random_matrix(rng, 4, 5);
    const Tensor2D upstream = random_matrix(rng, 4, 5);

    const AdapterWeights zero = AdapterWeights::full_rank_zero(5, 0.0);
    const AdapterBackwardResult res =
        adapter_backward(x, zero, RunMode::eval, std::nullopt, upstream);
    CHECK(max_abs_diff(res.d_x, upstream) == 0.0);

    const AdapterWeights aw = random_full(rng, 5, 0.2);
    const AdapterDraw dropped{RunMode::train, 0.0};
    const AdapterBackwardResult train_res =
        adapter_backward(x, aw, RunMode::train, dropped, upstream);
    const Tensor2D& dw = std::get<FullRank>(train_res.d_weights.structure).w;
    for (std::size_t i = 0; i < dw.size(); ++i) CHECK(dw.data()[i] == 0.0);
    CHECK(max_abs_diff(train_res.d_x, upstream) == 0.0);

    CHECK_THROWS_AS(adapter_backward(x, aw, RunMode::train, std::nullopt, upstream),
                    MissingDrawError);
}

TEST_CASE("backward gradients agree with finite differences") {
    SeededRng rng(20);
    const std::size_t d = 6;
    const Tensor2D x = random_matrix(rng, 3, d);
    const Tensor2D upstream = random_matrix(rng, 3, d);
    const auto weighted_output = [&](const AdapterWeights& aw) {
        const Tensor2D out = adapter_apply(x, aw, RunMode::eval, nullptr);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) acc += out.data()[i] * upstream.data()[i];
        return acc;
    };

    AdapterWeights full = random_full(rng, d, 0.0);
    const AdapterBackwardResult full_res =
        adapter_backward(x, full, RunMode::eval, std::nullopt, upstream);
    Tensor2D& w = std::get<FullRank>(full.structure).w;
    const auto full_probe = [&]() { return weighted_output(full); };
    CHECK(finite_diff_check(full_probe, w,
                            std::get<FullRank>(full_res.d_weights.structure).w, 1e-6) <= 5e-8);

    AdapterWeights low = random_low(rng, d, 2, 0.0);
    const AdapterBackwardResult low_res =
        adapter_backward(x, low, RunMode::eval, std::nullopt, upstream);
    const auto low_probe = [&]() { return weighted_output(low); };
    CHECK(finite_diff_check(low_probe, std::get<LowRank>(low.structure).b,
                            std::get<LowRank>(low_res.d_weights.structure).b, 1e-6) <= 1e-8);
    CHECK(finite_diff_check(low_probe, std::get<LowRank>(low.structure).a,
                            std::get<LowRank>(low_res.d_weights.structure).a, 1e-6) <= 1e-8);

    // d_x against finite differences through a full-rank adapter.
    AdapterWeights aw2 = random_full(rng, d, 0.0);
    Tensor2D x2 = random_matrix(rng, 2, d);
    const auto x_probe = [&]() {
        const Tensor2D out = adapter_apply(x2, aw2, RunMode::eval, nullptr);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) acc += out.data()[i];
        return acc;
    };
    const AdapterBackwardResult x_res =
        adapter_backward(x2, aw2, RunMode::eval, std::nullopt, Tensor2D::filled(2, d, 1.0));
    CHECK(finite_diff_check(x_probe, x2, x_res.d_x, 1e-6) <= 1e-8);
}

TEST_CASE("train-mode backward scales the weight gradient by the recorded gate") {
    SeededRng rng(21);
    const std::size_t d = 4;
    const Tensor2D x = random_matrix(rng, 3, d);
    const Tensor2D upstream = random_matrix(rng, 3, d);
    const AdapterWeights aw = random_full(rng, d, 0.2);

    const AdapterDraw kept{RunMode::train, 1.0 / 0.8};
    const AdapterBackwardResult train_res =
        adapter_backward(x, aw, RunMode::train, kept, upstream);
    const AdapterBackwardResult eval_res =
        adapter_backward(x, aw, RunMode::eval, std::nullopt, upstream);
    const Tensor2D& train_dw = std::get<FullRank>(train_res.d_weights.structure).w;
    const Tensor2D& eval_dw = std::get<FullRank>(eval_res.d_weights.structure).w;
    CHECK(max_abs_diff(train_dw, eval_dw * (1.0 / 0.8)) <= 1e-12);
}

TEST_CASE("fold equivalence holds across random full and low-rank instances") {
    SeededRng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = 5;
        const Tensor2D w_org = random_matrix(rng, d, d);
        const Tensor2D b_org = random_matrix(rng, 1, d);
        const AdapterWeights aw =
            (trial % 2 == 0) ? random_full(rng, d, 0.0) : random_low(rng, d, 2, 0.0);
        const Tensor2D x = random_matrix(rng, 2, d);

        Tensor2D y = matmul(x, w_org);
        for (std::size_t i = 0; i < y.rows(); ++i) {
            for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b_org(0, j);
        }
        const Tensor2D adapter_out = adapter_apply(y, aw, RunMode::eval, nullptr);

        const MergedLayer merged = reparametrize(w_org, &b_org, effective_matrix(aw));
        Tensor2D fold_out = matmul(x, merged.w);
        for (std::size_t i = 0; i < fold_out.rows(); ++i) {
            for (std::size_t j = 0; j < fold_out.cols(); ++j) fold_out(i, j) += merged.b(0, j);
        }
        CHECK(max_abs_diff(adapter_out, fold_out) <= 1e-9);
    }
}

}  // TEST_SUITE
