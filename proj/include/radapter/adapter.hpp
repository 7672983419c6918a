#pragma once

#include <cstdint>
#include <optional>
#include <variant>

#include "radapter/numerics.hpp"
#include "radapter/rng.hpp"
#include "radapter/tensor.hpp"

namespace radapter {

enum class RunMode { train, eval };

struct MissingDrawError : std::logic_error {
    using std::logic_error::logic_error;
};

struct FullRank {
    Tensor2D w;  // d x d
};

struct LowRank {
    Tensor2D b;  // d x r
    Tensor2D a;  // r x d
};

// Residual linear adapter h(X) = X*W_eff + X, W_eff either a full d x d
// matrix or the product B*A with rank r < d.
struct AdapterWeights {
    std::variant<FullRank, LowRank> structure;
    double drop_p = 0.0;

    std::size_t dim() const;
    bool is_low_rank() const { return std::holds_alternative<LowRank>(structure); }
    std::size_t rank() const;

    // W_adp = 0: fine-tuning starts exactly at the wrapped model.
    static AdapterWeights full_rank_zero(std::size_t d, double drop_p);
    // B = 0, A ~ N(0, 0.02): the product starts at zero with a usable
    // gradient path into B.
    static AdapterWeights low_rank_init(std::size_t d, std::size_t r, double drop_p,
                                        SeededRng& rng);

    // Gradient holder with the same structure, all entries zero.
    AdapterWeights zeros_like() const;

    // this += alpha * o, factor-wise; structures must match.
    void add_scaled(double alpha, const AdapterWeights& o);

    void validate() const;
};

Tensor2D effective_matrix(const AdapterWeights& aw);

// One gate draw per adapter module per forward call, shared across rows.
// scale is gamma/(1-p) in train mode and exactly 1 in eval mode.
struct AdapterDraw {
    RunMode mode = RunMode::eval;
    double scale = 1.0;
};

AdapterDraw draw_adapter_gate(const AdapterWeights& aw, RunMode mode, SeededRng* rng);

Tensor2D adapter_apply_with_draw(const Tensor2D& x, const AdapterWeights& aw,
                                 const AdapterDraw& draw);

Tensor2D adapter_apply(const Tensor2D& x, const AdapterWeights& aw, RunMode mode, SeededRng* rng);

struct AdapterBackwardResult {
    Tensor2D d_x;
    AdapterWeights d_weights;  // same structure as the forward weights
};

// train mode requires the gate draw recorded by the matching forward.
AdapterBackwardResult adapter_backward(const Tensor2D& x, const AdapterWeights& aw, RunMode mode,
                                       std::optional<AdapterDraw> recorded_draw,
                                       const Tensor2D& upstream);

// Exponential moving average of the materialized effective matrix. Tracking
// the d x d product directly keeps the update linear even for low-rank
// adapters, where averaging B and A separately would not average B*A.
struct AdapterEma {
    Tensor2D shadow;  // d x d
    double momentum = 0.999;
    std::uint64_t update_count = 0;

    // shadow starts at the adapter's current effective matrix.
    static AdapterEma from(const AdapterWeights& aw, double momentum);
};

void ema_update(AdapterEma& ema, const AdapterWeights& aw);

struct MergedLayer {
    Tensor2D w;
    Tensor2D b;  // 1 x d; zero when the wrapped layer has no bias
};

// Folds the adapter into the preceding linear layer:
// W_rep = W_org*(W_adp + I), b_rep = b_org*(W_adp + I).
// b_org may be null (bias-free layer).
MergedLayer reparametrize(const Tensor2D& w_org, const Tensor2D* b_org, const Tensor2D& w_adp);

// Weight-space ensemble via re-scaling: W_ens = W_org*(alpha*shadow + I),
// equal to alpha*W_rep + (1-alpha)*W_org.
MergedLayer rescale_merge(const Tensor2D& w_org, const Tensor2D* b_org, const Tensor2D& shadow,
                          double alpha);

}  // namespace radapter
