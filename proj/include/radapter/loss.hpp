#pragma once

#include <span>
#include <vector>

#include "radapter/tensor.hpp"

namespace radapter {

// Loss inputs must be unit-norm rows; violation is a caller bug.
struct UnitNormError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Binary positive-relation matrix. y(i,i) == 1 always: each sample is its
// own positive.
struct LabelMatrix {
    Tensor2D y;
    std::vector<std::size_t> positives_per_row;

    std::size_t batch() const { return y.rows(); }
};

// y(i,j) = 1 iff class_ids[i] == class_ids[j]. Requires B >= 2.
LabelMatrix build_label_matrix(std::span<const int> class_ids);

struct LossConfig {
    double tau = 0.01;     // fixed temperature for MPM-NCE
    double delta = 0.05;   // margin added to negative-pair logits
    double epsilon = 0.0;  // label smoothing mass spread over negatives
};

// Row-stochastic soft labels: (1-eps)/|P(i)| on positives, eps/(B-|P(i)|)
// on negatives. A row with no negatives falls back to eps = 0 so it stays
// row-stochastic.
struct SoftLabelMatrix {
    Tensor2D ytilde;
};

SoftLabelMatrix soft_labels(const LabelMatrix& y, double epsilon);

// L(i,j) = (S(i,j) + delta*(1 - y(i,j))) / tau.
Tensor2D margin_logits(const Tensor2D& similarities, const LabelMatrix& y, double delta,
                       double tau);

// Symmetric InfoNCE, summed over the batch in both directions, with analytic
// gradients for the embeddings and the temperature.
struct InfoNceResult {
    double loss = 0.0;
    Tensor2D d_f;
    Tensor2D d_g;
    double d_tau = 0.0;
};

InfoNceResult info_nce(const Tensor2D& f, const Tensor2D& g, double tau);

// Multi-positive margin NCE: cross-entropy between the margin-adjusted
// row/column softmax of F*G^T and the soft labels, both directions, summed.
struct MpmNceResult {
    double loss = 0.0;
    Tensor2D d_f;
    Tensor2D d_g;
};

MpmNceResult mpm_nce(const Tensor2D& f, const Tensor2D& g, const LabelMatrix& y,
                     const LossConfig& cfg);

}  // namespace radapter
