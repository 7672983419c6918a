#include "radapter/adapter.hpp"

#include <cmath>

namespace radapter {

std::size_t AdapterWeights::dim() const {
    if (const auto* f = std::get_if<FullRank>(&structure)) return f->w.rows();
    return std::get<LowRank>(structure).b.rows();
}

std::size_t AdapterWeights::rank() const {
    if (const auto* lr = std::get_if<LowRank>(&structure)) return lr->b.cols();
    return dim();
}

AdapterWeights AdapterWeights::full_rank_zero(std::size_t d, double drop_p) {
    AdapterWeights aw{FullRank{Tensor2D(d, d)}, drop_p};
    aw.validate();
    return aw;
}

AdapterWeights AdapterWeights::low_rank_init(std::size_t d, std::size_t r, double drop_p,
                                             SeededRng& rng) {
    AdapterWeights aw{LowRank{Tensor2D(d, r), gaussian_sample(rng, r, d, 0.0, 0.02)}, drop_p};
    aw.validate();
    return aw;
}

AdapterWeights AdapterWeights::zeros_like() const {
    AdapterWeights g = *this;
    if (auto* f = std::get_if<FullRank>(&g.structure)) {
        f->w.fill(0.0);
    } else {
        auto& lr = std::get<LowRank>(g.structure);
        lr.b.fill(0.0);
        lr.a.fill(0.0);
    }
    return g;
}

void AdapterWeights::add_scaled(double alpha, const AdapterWeights& o) {
    if (is_low_rank() != o.is_low_rank()) {
        throw std::invalid_argument("AdapterWeights::add_scaled: structure mismatch");
    }
    if (auto* f = std::get_if<FullRank>(&structure)) {
        f->w.add_scaled(alpha, std::get<FullRank>(o.structure).w);
    } else {
        auto& lr = std::get<LowRank>(structure);
        const auto& olr = std::get<LowRank>(o.structure);
        lr.b.add_scaled(alpha, olr.b);
        lr.a.add_scaled(alpha, olr.a);
    }
}

void AdapterWeights::validate() const {
    if (drop_p < 0.0 || drop_p >= 1.0) {
        throw std::invalid_argument("AdapterWeights: drop_p must be in [0, 1)");
    }
    if (const auto* f = std::get_if<FullRank>(&structure)) {
        if (f->w.rows() != f->w.cols()) {
            throw ShapeError("AdapterWeights: full-rank matrix must be square, got " +
                             f->w.shape_str());
        }
    } else {
        const auto& lr = std::get<LowRank>(structure);
        const std::size_t d = lr.b.rows(), r = lr.b.cols();
        if (r < 1 || r >= d) {
            throw std::invalid_argument("AdapterWeights: low-rank r must satisfy 1 <= r < d");
        }
        if (lr.a.rows() != r || lr.a.cols() != d) {
            throw ShapeError("AdapterWeights: B " + lr.b.shape_str() + " incompatible with A " +
                             lr.a.shape_str());
        }
    }
}

Tensor2D effective_matrix(const AdapterWeights& aw) {
    if (const auto* f = std::get_if<FullRank>(&aw.structure)) return f->w;
    const auto& lr = std::get<LowRank>(aw.structure);
    return matmul(lr.b, lr.a);
}

AdapterDraw draw_adapter_gate(const AdapterWeights& aw, RunMode mode, SeededRng* rng) {
    if (mode == RunMode::eval) return {RunMode::eval, 1.0};
    if (rng == nullptr) {
        throw MissingDrawError("draw_adapter_gate: train mode requires an rng");
    }
    const bool keep = rng->bernoulli(1.0 - aw.drop_p);
    return {RunMode::train, keep ? 1.0 / (1.0 - aw.drop_p) : 0.0};
}

Tensor2D adapter_apply_with_draw(const Tensor2D& x, const AdapterWeights& aw,
                                 const AdapterDraw& draw) {
    if (x.cols() != aw.dim()) {
        throw ShapeError("adapter_apply: input " + x.shape_str() + " vs adapter dim " +
                         std::to_string(aw.dim()));
    }
    Tensor2D out = matmul(x, effective_matrix(aw));
    out *= draw.scale;
    out += x;
    return out;
}

Tensor2D adapter_apply(const Tensor2D& x, const AdapterWeights& aw, RunMode mode, SeededRng* rng) {
    return adapter_apply_with_draw(x, aw, draw_adapter_gate(aw, mode, rng));
}

AdapterBackwardResult adapter_backward(const Tensor2D& x, const AdapterWeights& aw, RunMode mode,
                                       std::optional<AdapterDraw> recorded_draw,
                                       const Tensor2D& upstream) {
    if (mode == RunMode::train && !recorded_draw.has_value()) {
        throw MissingDrawError("adapter_backward: train mode requires the recorded gate draw");
    }
    const double scale = (mode == RunMode::eval) ? 1.0 : recorded_draw->scale;
    if (!x.same_shape(upstream)) {
        throw ShapeError("adapter_backward: x " + x.shape_str() + " vs upstream " +
                         upstream.shape_str());
    }

    const Tensor2D w_eff = effective_matrix(aw);
    // d/dx of (s*x*W + x): s*G*W^T + G
    Tensor2D d_x = matmul_nt(upstream, w_eff);
    d_x *= scale;
    d_x += upstream;

    // d/dW_eff: s * x^T * G
    Tensor2D d_w_eff = matmul_tn(x, upstream);
    d_w_eff *= scale;

    AdapterBackwardResult res{std::move(d_x), aw.zeros_like()};
    if (auto* f = std::get_if<FullRank>(&res.d_weights.structure)) {
        f->w = std::move(d_w_eff);
    } else {
        const auto& lr = std::get<LowRank>(aw.structure);
        auto& dlr = std::get<LowRank>(res.d_weights.structure);
        dlr.b = matmul_nt(d_w_eff, lr.a);  // dB = dW * A^T
        dlr.a = matmul_tn(lr.b, d_w_eff);  // dA = B^T * dW
    }
    return res;
}

AdapterEma AdapterEma::from(const AdapterWeights& aw, double momentum) {
    if (momentum < 0.0 || momentum > 1.0) {
        throw std::invalid_argument("AdapterEma: momentum must be in [0, 1]");
    }
    return {effective_matrix(aw), momentum, 0};
}

void ema_update(AdapterEma& ema, const AdapterWeights& aw) {
    const Tensor2D w = effective_matrix(aw);
    if (!ema.shadow.same_shape(w)) {
        throw ShapeError("ema_update: shadow " + ema.shadow.shape_str() + " vs adapter " +
                         w.shape_str());
    }
    ema.shadow *= ema.momentum;
    ema.shadow.add_scaled(1.0 - ema.momentum, w);
    ++ema.update_count;
}

namespace {

MergedLayer fold(const Tensor2D& w_org, const Tensor2D* b_org, const Tensor2D& factor_plus_i) {
    if (w_org.cols() != factor_plus_i.rows()) {
        throw ShapeError("merge: W_org " + w_org.shape_str() + " vs adapter " +
                         factor_plus_i.shape_str());
    }
    MergedLayer m{matmul(w_org, factor_plus_i), Tensor2D(1, factor_plus_i.cols())};
    if (b_org != nullptr) {
        if (b_org->rows() != 1 || b_org->cols() != factor_plus_i.rows()) {
            throw ShapeError("merge: bias " + b_org->shape_str() + " vs adapter " +
                             factor_plus_i.shape_str());
        }
        m.b = matmul(*b_org, factor_plus_i);
    }
    return m;
}

}  // namespace

MergedLayer reparametrize(const Tensor2D& w_org, const Tensor2D* b_org, const Tensor2D& w_adp) {
    if (w_adp.rows() != w_adp.cols()) {
        throw ShapeError("reparametrize: adapter matrix must be square, got " + w_adp.shape_str());
    }
    Tensor2D factor = w_adp;
    for (std::size_t i = 0; i < factor.rows(); ++i) factor(i, i) += 1.0;
    return fold(w_org, b_org, factor);
}

MergedLayer rescale_merge(const Tensor2D& w_org, const Tensor2D* b_org, const Tensor2D& shadow,
                          double alpha) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw std::domain_error("rescale_merge: alpha must be in [0, 1], got " +
                                std::to_string(alpha));
    }
    if (shadow.rows() != shadow.cols()) {
        throw ShapeError("rescale_merge: shadow must be square, got " + shadow.shape_str());
    }
    if (alpha == 0.0) {
        // Bitwise passthrough: multiplying by the exact identity could still
        // flip signed zeros.
        if (w_org.cols() != shadow.rows() ||
            (b_org != nullptr && (b_org->rows() != 1 || b_org->cols() != shadow.rows()))) {
            throw ShapeError("rescale_merge: layer " + w_org.shape_str() + " vs shadow " +
                             shadow.shape_str());
        }
        MergedLayer m{w_org, Tensor2D(1, shadow.cols())};
        if (b_org != nullptr) m.b = *b_org;
        return m;
    }
    Tensor2D factor = shadow;
    factor *= alpha;
    for (std::size_t i = 0; i < factor.rows(); ++i) factor(i, i) += 1.0;
    return fold(w_org, b_org, factor);
}

}  // namespace radapter
