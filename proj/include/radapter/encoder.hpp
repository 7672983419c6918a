#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "radapter/adapter.hpp"
#include "radapter/numerics.hpp"
#include "radapter/rng.hpp"
#include "radapter/tensor.hpp"

namespace radapter {

struct TokenError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Thrown by encode_backward when a tape does not match the weights it is
// replayed against.
struct StaleTapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline constexpr double kLayerNormEps = 1e-5;

struct EncoderConfig {
    std::size_t d = 32;          // model width
    std::size_t heads = 4;       // attention head count k
    std::size_t layers = 2;      // transformer layer count
    std::size_t seq_len = 16;    // tokens per input
    std::size_t vocab_size = 64;
    std::size_t embed_dim = 16;  // output embedding width
    bool w_o_has_bias = true;

    std::size_t d_h() const { return d / heads; }
    std::size_t ffn_dim() const { return 4 * d; }
    void validate() const;
};

// One pre-LN transformer layer: per-head attention projections, the output
// projection, two layer norms and the two feed-forward linears.
struct LayerWeights {
    std::vector<Tensor2D> w_q;  // per head, d x d_h
    std::vector<Tensor2D> w_k;
    std::vector<Tensor2D> w_v;
    Tensor2D w_o;  // d x d
    Tensor2D b_o;  // 1 x d, consulted only when the config enables it
    Tensor2D ln1_gain, ln1_bias;  // 1 x d
    Tensor2D ln2_gain, ln2_bias;  // 1 x d
    Tensor2D w1;  // d x 4d
    Tensor2D b1;  // 1 x 4d
    Tensor2D w2;  // 4d x d
    Tensor2D b2;  // 1 x d
};

struct EncoderWeights {
    Tensor2D token_embedding;       // vocab_size x d
    Tensor2D positional_embedding;  // seq_len x d
    std::vector<LayerWeights> layers;
    Tensor2D final_ln_gain, final_ln_bias;  // 1 x d
    Tensor2D projection;  // d x embed_dim
    Tensor2D log_temp;    // 1 x 1, temperature as exp(log_temp)

    static EncoderWeights zeros(const EncoderConfig& cfg);
    // Gaussian std 0.02 on every weight matrix and embedding table, zero
    // biases, unit layer-norm gains, log_temp = ln(0.07).
    static EncoderWeights pretrain_init(const EncoderConfig& cfg, SeededRng& rng);

    void validate(const EncoderConfig& cfg) const;
    double tau() const { return std::exp(log_temp(0, 0)); }

    // Stable flat view of every tensor, in serialization order.
    std::vector<std::pair<std::string, Tensor2D*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor2D*>> named_tensors() const;

    // this += alpha * o, tensor-wise; structures must match.
    void add_scaled(double alpha, const EncoderWeights& o);
};

// Adapter modules for one encoder, in site order
// [layer0.attention, layer0.ffn, layer1.attention, ...].
struct AdapterStack {
    std::vector<AdapterWeights> sites;

    static AdapterStack full_rank_zeros(const EncoderConfig& cfg, double drop_p);
    static AdapterStack low_rank(const EncoderConfig& cfg, std::size_t r, double drop_p,
                                 SeededRng& rng);

    bool empty() const { return sites.empty(); }
    static std::size_t site_index(std::size_t layer, bool ffn_site) {
        return 2 * layer + (ffn_site ? 1 : 0);
    }

    AdapterStack zeros_like() const;
    void add_scaled(double alpha, const AdapterStack& o);
    void validate(const EncoderConfig& cfg) const;

    std::vector<std::pair<std::string, Tensor2D*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor2D*>> named_tensors() const;
};

// Caches from one layer_forward, sufficient for exact vector-Jacobian
// products without recomputing the forward pass.
struct LayerTape {
    Tensor2D x_in;
    LayerNormResult ln1;
    std::vector<Tensor2D> q, k, v;   // per head, seq x d_h
    std::vector<Tensor2D> probs;     // per head, seq x seq
    Tensor2D concat;                 // seq x d
    Tensor2D mha_out;                // adapter input at the attention site
    std::optional<AdapterDraw> draw_mha;
    Tensor2D x_bar;
    LayerNormResult ln2;
    Tensor2D ffn_pre;   // seq x 4d, before the non-linearity
    Tensor2D ffn_act;   // seq x 4d
    Tensor2D ffn_tanh;  // inner tanh of the activation, reused by the backward pass
    Tensor2D ffn_out;  // adapter input at the feed-forward site
    std::optional<AdapterDraw> draw_ffn;
};

struct ActivationTape {
    std::vector<int> tokens;
    RunMode mode = RunMode::eval;
    Tensor2D x0;  // token + positional embedding
    std::vector<LayerTape> layers;
    LayerNormResult final_ln;
    Tensor2D proj_in;   // 1 x d, pooled first token
    Tensor2D proj_out;  // 1 x embed_dim, before normalization
};

// Pure sub-block forwards (no adapters, no tape), used as composition
// oracles and by layer_forward internally.
Tensor2D mha_forward(const Tensor2D& x, const EncoderConfig& cfg, const LayerWeights& lw);
Tensor2D ffn_forward(const Tensor2D& x, const LayerWeights& lw);

// Full layer with optional adapters wrapping each sub-block output before
// its residual addition. rng is consulted only for train-mode gate draws.
Tensor2D layer_forward(const Tensor2D& x, const EncoderConfig& cfg, const LayerWeights& lw,
                       const AdapterWeights* mha_adapter, const AdapterWeights* ffn_adapter,
                       RunMode mode, SeededRng* rng, LayerTape& tape);

struct EncodeResult {
    Tensor2D embedding;  // 1 x embed_dim, unit norm
    ActivationTape tape;
};

EncodeResult encode(std::span<const int> tokens, const EncoderConfig& cfg,
                    const EncoderWeights& w, const AdapterStack* adapters, RunMode mode,
                    SeededRng* rng);

// Encodes each token sequence into one row. tapes, when non-null, receives
// one tape per row for a later backward pass.
Tensor2D encode_batch(const std::vector<std::vector<int>>& tokens, const EncoderConfig& cfg,
                      const EncoderWeights& w, const AdapterStack* adapters, RunMode mode,
                      SeededRng* rng, std::vector<ActivationTape>* tapes);

struct EncoderBackward {
    EncoderWeights d_weights;
    AdapterStack d_adapters;  // empty when the forward ran without adapters
};

// Exact VJP of encode. upstream is 1 x embed_dim, the gradient with respect
// to the unit embedding. log_temp receives no gradient here; temperature
// gradients come from the loss directly.
EncoderBackward encode_backward(const ActivationTape& tape, const EncoderConfig& cfg,
                                const EncoderWeights& w, const AdapterStack* adapters,
                                const Tensor2D& upstream);

// Returns a copy of w with each site matrix folded into the preceding
// linear layer at strength alpha: W <- W*(alpha*M + I) and, where the layer
// has a bias, b <- b*(alpha*M + I). site_mats follows AdapterStack order.
EncoderWeights fold_adapters(const EncoderWeights& w, const EncoderConfig& cfg,
                             const std::vector<Tensor2D>& site_mats, double alpha);

}  // namespace radapter
