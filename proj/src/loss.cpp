#include "radapter/loss.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "radapter/numerics.hpp"

namespace radapter {

namespace {

void require_unit_rows(const Tensor2D& m, const char* name) {
    // Callers owe unit rows; the gate is looser than the nominal contract so
    // that finite-difference probes (which shift a row norm by O(h)) still
    // evaluate, while genuinely unnormalized embeddings are rejected.
    constexpr double kUnitGate = 1e-4;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) sq += m(i, j) * m(i, j);
        const double norm = std::sqrt(sq);
        if (std::abs(norm - 1.0) > kUnitGate) {
            throw UnitNormError(std::string(name) + " row " + std::to_string(i) +
                                " has norm " + std::to_string(norm) + ", expected 1");
        }
    }
}

void require_pair(const Tensor2D& f, const Tensor2D& g) {
    if (!f.same_shape(g)) {
        throw ShapeError("embedding batches must match: " + f.shape_str() + " vs " +
                         g.shape_str());
    }
    if (f.rows() == 0 || f.cols() == 0) {
        throw ShapeError("embedding batch must be non-empty");
    }
    require_unit_rows(f, "f");
    require_unit_rows(g, "g");
}

// Column-stochastic softmax of m.
Tensor2D softmax_cols(const Tensor2D& m) {
    return transpose(softmax_rows(transpose(m)));
}

}  // namespace

LabelMatrix build_label_matrix(std::span<const int> class_ids) {
    const std::size_t b = class_ids.size();
    if (b < 2) {
        throw std::invalid_argument("label matrix needs a batch of at least 2, got " +
                                    std::to_string(b));
    }
    LabelMatrix lm{Tensor2D(b, b), std::vector<std::size_t>(b, 0)};
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            if (class_ids[i] == class_ids[j]) {
                lm.y(i, j) = 1.0;
                ++lm.positives_per_row[i];
            }
        }
    }
    return lm;
}

SoftLabelMatrix soft_labels(const LabelMatrix& y, double epsilon) {
    if (epsilon < 0.0 || epsilon >= 1.0) {
        throw std::domain_error("label smoothing must lie in [0, 1), got " +
                                std::to_string(epsilon));
    }
    const std::size_t b = y.batch();
    SoftLabelMatrix out{Tensor2D(b, b)};
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t pos = y.positives_per_row[i];
        const std::size_t neg = b - pos;
        // All-positive rows keep their mass: no negatives to smooth onto.
        const double eps = (neg == 0) ? 0.0 : epsilon;
        for (std::size_t j = 0; j < b; ++j) {
            out.ytilde(i, j) = (y.y(i, j) != 0.0)
                                   ? (1.0 - eps) / static_cast<double>(pos)
                                   : eps / static_cast<double>(neg);
        }
    }
    return out;
}

Tensor2D margin_logits(const Tensor2D& similarities, const LabelMatrix& y, double delta,
                       double tau) {
    if (!similarities.same_shape(y.y)) {
        throw ShapeError("similarity/label shape mismatch: " + similarities.shape_str() +
                         " vs " + y.y.shape_str());
    }
    if (tau <= 0.0) {
        throw std::domain_error("temperature must be positive, got " + std::to_string(tau));
    }
    Tensor2D logits(similarities.rows(), similarities.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            logits(i, j) = (similarities(i, j) + delta * (1.0 - y.y(i, j))) / tau;
        }
    }
    return logits;
}

InfoNceResult info_nce(const Tensor2D& f, const Tensor2D& g, double tau) {
    require_pair(f, g);
    if (tau <= 0.0) {
        throw std::domain_error("temperature must be positive, got " + std::to_string(tau));
    }
    const std::size_t b = f.rows();

    Tensor2D z = matmul_nt(f, g);
    z *= 1.0 / tau;
    const Tensor2D rs = softmax_rows(z);
    const Tensor2D cs = softmax_cols(z);

    InfoNceResult res;
    for (std::size_t i = 0; i < b; ++i) {
        res.loss -= std::log(rs(i, i));
        res.loss -= std::log(cs(i, i));
    }

    // d loss / d z: both directions share the diagonal target.
    Tensor2D dz(b, b);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            dz(i, j) = rs(i, j) + cs(i, j) - (i == j ? 2.0 : 0.0);
        }
    }

    // z = s / tau, so d loss / d tau = -(1/tau) * sum(dz * z).
    double acc = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) acc += dz(i, j) * z(i, j);
    }
    res.d_tau = -acc / tau;

    dz *= 1.0 / tau;
    res.d_f = matmul(dz, g);
    res.d_g = matmul_tn(dz, f);
    return res;
}

MpmNceResult mpm_nce(const Tensor2D& f, const Tensor2D& g, const LabelMatrix& y,
                     const LossConfig& cfg) {
    require_pair(f, g);
    if (f.rows() != y.batch()) {
        throw ShapeError("label batch " + std::to_string(y.batch()) +
                         " does not match embedding batch " + std::to_string(f.rows()));
    }
    const std::size_t b = f.rows();

    const Tensor2D s = matmul_nt(f, g);
    const Tensor2D logits = margin_logits(s, y, cfg.delta, cfg.tau);
    const Tensor2D rs = softmax_rows(logits);
    const Tensor2D cs = softmax_cols(logits);
    const SoftLabelMatrix yt = soft_labels(y, cfg.epsilon);

    MpmNceResult res;
    Tensor2D dl(b, b);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            res.loss -= yt.ytilde(i, j) * std::log(rs(i, j));
            res.loss -= yt.ytilde(j, i) * std::log(cs(i, j));
            // Row targets are row-stochastic and column targets transpose to
            // column-stochastic, so the softmax Jacobian collapses to this.
            dl(i, j) = rs(i, j) + cs(i, j) - yt.ytilde(i, j) - yt.ytilde(j, i);
        }
    }

    dl *= 1.0 / cfg.tau;  // margin term is constant in s
    res.d_f = matmul(dl, g);
    res.d_g = matmul_tn(dl, f);
    return res;
}

}  // namespace radapter
