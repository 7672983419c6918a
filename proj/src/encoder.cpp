#include "radapter/encoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace radapter {

namespace {

Tensor2D colsum(const Tensor2D& m) {
    Tensor2D s(1, m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) s(0, j) += m(i, j);
    }
    return s;
}

void add_bias_rows(Tensor2D& m, const Tensor2D& bias) {
    if (bias.rows() != 1 || bias.cols() != m.cols()) {
        throw ShapeError("bias " + bias.shape_str() + " does not broadcast over " +
                         m.shape_str());
    }
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += bias(0, j);
    }
}

void require_shape(const Tensor2D& t, std::size_t r, std::size_t c, const std::string& name) {
    if (t.rows() != r || t.cols() != c) {
        throw ShapeError(name + " has shape " + t.shape_str() + ", expected " +
                         std::to_string(r) + "x" + std::to_string(c));
    }
}

// Writes q/k/v/probs/concat/mha_out into the tape and returns mha_out.
Tensor2D mha_forward_taped(const Tensor2D& x, const EncoderConfig& cfg, const LayerWeights& lw,
                           LayerTape& tape) {
    const std::size_t k = cfg.heads;
    const std::size_t dh = cfg.d_h();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    tape.q.resize(k);
    tape.k.resize(k);
    tape.v.resize(k);
    tape.probs.resize(k);
    tape.concat = Tensor2D(x.rows(), cfg.d);

    for (std::size_t h = 0; h < k; ++h) {
        tape.q[h] = matmul(x, lw.w_q[h]);
        tape.k[h] = matmul(x, lw.w_k[h]);
        tape.v[h] = matmul(x, lw.w_v[h]);
        Tensor2D logits = matmul_nt(tape.q[h], tape.k[h]);
        logits *= scale;
        tape.probs[h] = softmax_rows(logits);
        const Tensor2D head = matmul(tape.probs[h], tape.v[h]);
        for (std::size_t i = 0; i < head.rows(); ++i) {
            for (std::size_t j = 0; j < dh; ++j) tape.concat(i, h * dh + j) = head(i, j);
        }
    }

    tape.mha_out = matmul(tape.concat, lw.w_o);
    if (cfg.w_o_has_bias) add_bias_rows(tape.mha_out, lw.b_o);
    return tape.mha_out;
}

// Writes ffn_pre/ffn_act/ffn_out into the tape and returns ffn_out.
Tensor2D ffn_forward_taped(const Tensor2D& x, const LayerWeights& lw, LayerTape& tape) {
    tape.ffn_pre = matmul(x, lw.w1);
    add_bias_rows(tape.ffn_pre, lw.b1);
    GeluResult act = gelu_cached(tape.ffn_pre);
    tape.ffn_act = std::move(act.act);
    tape.ffn_tanh = std::move(act.th);
    tape.ffn_out = matmul(tape.ffn_act, lw.w2);
    add_bias_rows(tape.ffn_out, lw.b2);
    return tape.ffn_out;
}

void validate_layer(const LayerWeights& lw, const EncoderConfig& cfg, std::size_t index) {
    const std::string prefix = "layer " + std::to_string(index) + ": ";
    if (lw.w_q.size() != cfg.heads || lw.w_k.size() != cfg.heads || lw.w_v.size() != cfg.heads) {
        throw ShapeError(prefix + "expected " + std::to_string(cfg.heads) +
                         " attention heads");
    }
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        require_shape(lw.w_q[h], cfg.d, cfg.d_h(), prefix + "w_q");
        require_shape(lw.w_k[h], cfg.d, cfg.d_h(), prefix + "w_k");
        require_shape(lw.w_v[h], cfg.d, cfg.d_h(), prefix + "w_v");
    }
    require_shape(lw.w_o, cfg.d, cfg.d, prefix + "w_o");
    require_shape(lw.b_o, 1, cfg.d, prefix + "b_o");
    require_shape(lw.ln1_gain, 1, cfg.d, prefix + "ln1_gain");
    require_shape(lw.ln1_bias, 1, cfg.d, prefix + "ln1_bias");
    require_shape(lw.ln2_gain, 1, cfg.d, prefix + "ln2_gain");
    require_shape(lw.ln2_bias, 1, cfg.d, prefix + "ln2_bias");
    require_shape(lw.w1, cfg.d, cfg.ffn_dim(), prefix + "w1");
    require_shape(lw.b1, 1, cfg.ffn_dim(), prefix + "b1");
    require_shape(lw.w2, cfg.ffn_dim(), cfg.d, prefix + "w2");
    require_shape(lw.b2, 1, cfg.d, prefix + "b2");
}

LayerWeights zero_layer(const EncoderConfig& cfg) {
    LayerWeights lw;
    lw.w_q.assign(cfg.heads, Tensor2D(cfg.d, cfg.d_h()));
    lw.w_k.assign(cfg.heads, Tensor2D(cfg.d, cfg.d_h()));
    lw.w_v.assign(cfg.heads, Tensor2D(cfg.d, cfg.d_h()));
    lw.w_o = Tensor2D(cfg.d, cfg.d);
    lw.b_o = Tensor2D(1, cfg.d);
    lw.ln1_gain = Tensor2D(1, cfg.d);
    lw.ln1_bias = Tensor2D(1, cfg.d);
    lw.ln2_gain = Tensor2D(1, cfg.d);
    lw.ln2_bias = Tensor2D(1, cfg.d);
    lw.w1 = Tensor2D(cfg.d, cfg.ffn_dim());
    lw.b1 = Tensor2D(1, cfg.ffn_dim());
    lw.w2 = Tensor2D(cfg.ffn_dim(), cfg.d);
    lw.b2 = Tensor2D(1, cfg.d);
    return lw;
}

}  // namespace

void EncoderConfig::validate() const {
    if (heads == 0 || d == 0 || d % heads != 0) {
        throw std::invalid_argument("EncoderConfig: d must be a positive multiple of heads");
    }
    if (layers < 1) throw std::invalid_argument("EncoderConfig: layers must be >= 1");
    if (seq_len < 1) throw std::invalid_argument("EncoderConfig: seq_len must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("EncoderConfig: vocab_size must be >= 2");
    if (embed_dim < 2) throw std::invalid_argument("EncoderConfig: embed_dim must be >= 2");
}

EncoderWeights EncoderWeights::zeros(const EncoderConfig& cfg) {
    cfg.validate();
    EncoderWeights w;
    w.token_embedding = Tensor2D(cfg.vocab_size, cfg.d);
    w.positional_embedding = Tensor2D(cfg.seq_len, cfg.d);
    w.layers.assign(cfg.layers, zero_layer(cfg));
    w.final_ln_gain = Tensor2D(1, cfg.d);
    w.final_ln_bias = Tensor2D(1, cfg.d);
    w.projection = Tensor2D(cfg.d, cfg.embed_dim);
    w.log_temp = Tensor2D(1, 1);
    return w;
}

EncoderWeights EncoderWeights::pretrain_init(const EncoderConfig& cfg, SeededRng& rng) {
    EncoderWeights w = zeros(cfg);
    auto gauss = [&rng](Tensor2D& t) {
        t = gaussian_sample(rng, t.rows(), t.cols(), 0.0, 0.02);
    };
    gauss(w.token_embedding);
    gauss(w.positional_embedding);
    for (LayerWeights& lw : w.layers) {
        for (Tensor2D& t : lw.w_q) gauss(t);
        for (Tensor2D& t : lw.w_k) gauss(t);
        for (Tensor2D& t : lw.w_v) gauss(t);
        gauss(lw.w_o);
        lw.ln1_gain.fill(1.0);
        lw.ln2_gain.fill(1.0);
        gauss(lw.w1);
        gauss(lw.w2);
    }
    w.final_ln_gain.fill(1.0);
    gauss(w.projection);
    w.log_temp(0, 0) = std::log(0.07);
    return w;
}

void EncoderWeights::validate(const EncoderConfig& cfg) const {
    cfg.validate();
    require_shape(token_embedding, cfg.vocab_size, cfg.d, "token_embedding");
    require_shape(positional_embedding, cfg.seq_len, cfg.d, "positional_embedding");
    if (layers.size() != cfg.layers) {
        throw ShapeError("expected " + std::to_string(cfg.layers) + " layers, got " +
                         std::to_string(layers.size()));
    }
    for (std::size_t l = 0; l < layers.size(); ++l) validate_layer(layers[l], cfg, l);
    require_shape(final_ln_gain, 1, cfg.d, "final_ln_gain");
    require_shape(final_ln_bias, 1, cfg.d, "final_ln_bias");
    require_shape(projection, cfg.d, cfg.embed_dim, "projection");
    require_shape(log_temp, 1, 1, "log_temp");
}

namespace {

template <typename W, typename T>
std::vector<std::pair<std::string, T*>> encoder_tensor_view(W& w) {
    std::vector<std::pair<std::string, T*>> out;
    out.emplace_back("token_embedding", &w.token_embedding);
    out.emplace_back("positional_embedding", &w.positional_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        for (std::size_t h = 0; h < lw.w_q.size(); ++h) {
            out.emplace_back(p + "wq" + std::to_string(h), &lw.w_q[h]);
        }
        for (std::size_t h = 0; h < lw.w_k.size(); ++h) {
            out.emplace_back(p + "wk" + std::to_string(h), &lw.w_k[h]);
        }
        for (std::size_t h = 0; h < lw.w_v.size(); ++h) {
            out.emplace_back(p + "wv" + std::to_string(h), &lw.w_v[h]);
        }
        out.emplace_back(p + "wo", &lw.w_o);
        out.emplace_back(p + "bo", &lw.b_o);
        out.emplace_back(p + "ln1_gain", &lw.ln1_gain);
        out.emplace_back(p + "ln1_bias", &lw.ln1_bias);
        out.emplace_back(p + "ln2_gain", &lw.ln2_gain);
        out.emplace_back(p + "ln2_bias", &lw.ln2_bias);
        out.emplace_back(p + "w1", &lw.w1);
        out.emplace_back(p + "b1", &lw.b1);
        out.emplace_back(p + "w2", &lw.w2);
        out.emplace_back(p + "b2", &lw.b2);
    }
    out.emplace_back("final_ln_gain", &w.final_ln_gain);
    out.emplace_back("final_ln_bias", &w.final_ln_bias);
    out.emplace_back("projection", &w.projection);
    out.emplace_back("log_temp", &w.log_temp);
    return out;
}

template <typename S, typename T>
std::vector<std::pair<std::string, T*>> stack_tensor_view(S& s) {
    std::vector<std::pair<std::string, T*>> out;
    for (std::size_t i = 0; i < s.sites.size(); ++i) {
        const std::string p = "adapter" + std::to_string(i) + ".";
        auto& site = s.sites[i];
        if (site.is_low_rank()) {
            auto& lr = std::get<LowRank>(site.structure);
            out.emplace_back(p + "b", &lr.b);
            out.emplace_back(p + "a", &lr.a);
        } else {
            out.emplace_back(p + "w", &std::get<FullRank>(site.structure).w);
        }
    }
    return out;
}

}  // namespace

std::vector<std::pair<std::string, Tensor2D*>> EncoderWeights::named_tensors() {
    return encoder_tensor_view<EncoderWeights, Tensor2D>(*this);
}

std::vector<std::pair<std::string, const Tensor2D*>> EncoderWeights::named_tensors() const {
    return encoder_tensor_view<const EncoderWeights, const Tensor2D>(*this);
}

void EncoderWeights::add_scaled(double alpha, const EncoderWeights& o) {
    auto mine = named_tensors();
    auto theirs = o.named_tensors();
    if (mine.size() != theirs.size()) {
        throw ShapeError("EncoderWeights::add_scaled: layer structure mismatch");
    }
    for (std::size_t i = 0; i < mine.size(); ++i) {
        mine[i].second->add_scaled(alpha, *theirs[i].second);
    }
}

AdapterStack AdapterStack::full_rank_zeros(const EncoderConfig& cfg, double drop_p) {
    AdapterStack s;
    s.sites.reserve(2 * cfg.layers);
    for (std::size_t i = 0; i < 2 * cfg.layers; ++i) {
        s.sites.push_back(AdapterWeights::full_rank_zero(cfg.d, drop_p));
    }
    return s;
}

AdapterStack AdapterStack::low_rank(const EncoderConfig& cfg, std::size_t r, double drop_p,
                                    SeededRng& rng) {
    AdapterStack s;
    s.sites.reserve(2 * cfg.layers);
    for (std::size_t i = 0; i < 2 * cfg.layers; ++i) {
        s.sites.push_back(AdapterWeights::low_rank_init(cfg.d, r, drop_p, rng));
    }
    return s;
}

AdapterStack AdapterStack::zeros_like() const {
    AdapterStack g;
    g.sites.reserve(sites.size());
    for (const AdapterWeights& aw : sites) g.sites.push_back(aw.zeros_like());
    return g;
}

void AdapterStack::add_scaled(double alpha, const AdapterStack& o) {
    if (sites.size() != o.sites.size()) {
        throw std::invalid_argument("AdapterStack::add_scaled: site count mismatch");
    }
    for (std::size_t i = 0; i < sites.size(); ++i) sites[i].add_scaled(alpha, o.sites[i]);
}

void AdapterStack::validate(const EncoderConfig& cfg) const {
    if (sites.size() != 2 * cfg.layers) {
        throw std::invalid_argument("AdapterStack: expected " + std::to_string(2 * cfg.layers) +
                                    " sites, got " + std::to_string(sites.size()));
    }
    for (const AdapterWeights& aw : sites) {
        aw.validate();
        if (aw.dim() != cfg.d) {
            throw ShapeError("AdapterStack: adapter width " + std::to_string(aw.dim()) +
                             " does not match model width " + std::to_string(cfg.d));
        }
    }
}

std::vector<std::pair<std::string, Tensor2D*>> AdapterStack::named_tensors() {
    return stack_tensor_view<AdapterStack, Tensor2D>(*this);
}

std::vector<std::pair<std::string, const Tensor2D*>> AdapterStack::named_tensors() const {
    return stack_tensor_view<const AdapterStack, const Tensor2D>(*this);
}

Tensor2D mha_forward(const Tensor2D& x, const EncoderConfig& cfg, const LayerWeights& lw) {
    validate_layer(lw, cfg, 0);
    if (x.cols() != cfg.d) {
        throw ShapeError("mha_forward: input " + x.shape_str() + " does not match width " +
                         std::to_string(cfg.d));
    }
    LayerTape scratch;
    return mha_forward_taped(x, cfg, lw, scratch);
}

Tensor2D ffn_forward(const Tensor2D& x, const LayerWeights& lw) {
    if (x.cols() != lw.w1.rows()) {
        throw ShapeError("ffn_forward: input " + x.shape_str() + " does not match w1 " +
                         lw.w1.shape_str());
    }
    LayerTape scratch;
    return ffn_forward_taped(x, lw, scratch);
}

Tensor2D layer_forward(const Tensor2D& x, const EncoderConfig& cfg, const LayerWeights& lw,
                       const AdapterWeights* mha_adapter, const AdapterWeights* ffn_adapter,
                       RunMode mode, SeededRng* rng, LayerTape& tape) {
    if (x.cols() != cfg.d) {
        throw ShapeError("layer_forward: input " + x.shape_str() + " does not match width " +
                         std::to_string(cfg.d));
    }
    for (const AdapterWeights* aw : {mha_adapter, ffn_adapter}) {
        if (aw != nullptr && aw->dim() != cfg.d) {
            throw ShapeError("layer_forward: adapter width " + std::to_string(aw->dim()) +
                             " does not match model width " + std::to_string(cfg.d));
        }
    }

    tape.x_in = x;
    tape.ln1 = layer_norm_cached(x, lw.ln1_gain, lw.ln1_bias, kLayerNormEps);
    mha_forward_taped(tape.ln1.out, cfg, lw, tape);

    Tensor2D attn = tape.mha_out;
    if (mha_adapter != nullptr) {
        tape.draw_mha = draw_adapter_gate(*mha_adapter, mode, rng);
        attn = adapter_apply_with_draw(tape.mha_out, *mha_adapter, *tape.draw_mha);
    }
    tape.x_bar = attn + x;

    tape.ln2 = layer_norm_cached(tape.x_bar, lw.ln2_gain, lw.ln2_bias, kLayerNormEps);
    ffn_forward_taped(tape.ln2.out, lw, tape);

    Tensor2D ffn = tape.ffn_out;
    if (ffn_adapter != nullptr) {
        tape.draw_ffn = draw_adapter_gate(*ffn_adapter, mode, rng);
        ffn = adapter_apply_with_draw(tape.ffn_out, *ffn_adapter, *tape.draw_ffn);
    }
    return ffn + tape.x_bar;
}

EncodeResult encode(std::span<const int> tokens, const EncoderConfig& cfg,
                    const EncoderWeights& w, const AdapterStack* adapters, RunMode mode,
                    SeededRng* rng) {
    w.validate(cfg);
    if (adapters != nullptr && !adapters->empty()) adapters->validate(cfg);
    if (tokens.size() != cfg.seq_len) {
        throw TokenError("expected " + std::to_string(cfg.seq_len) + " tokens, got " +
                         std::to_string(tokens.size()));
    }
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= cfg.vocab_size) {
            throw TokenError("token " + std::to_string(tokens[t]) + " at position " +
                             std::to_string(t) + " outside vocabulary of size " +
                             std::to_string(cfg.vocab_size));
        }
    }

    EncodeResult res;
    res.tape.tokens.assign(tokens.begin(), tokens.end());
    res.tape.mode = mode;

    res.tape.x0 = Tensor2D(cfg.seq_len, cfg.d);
    for (std::size_t t = 0; t < cfg.seq_len; ++t) {
        const auto tok = static_cast<std::size_t>(tokens[t]);
        for (std::size_t j = 0; j < cfg.d; ++j) {
            res.tape.x0(t, j) = w.token_embedding(tok, j) + w.positional_embedding(t, j);
        }
    }

    const bool with_adapters = adapters != nullptr && !adapters->empty();
    Tensor2D x = res.tape.x0;
    res.tape.layers.resize(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const AdapterWeights* am =
            with_adapters ? &adapters->sites[AdapterStack::site_index(l, false)] : nullptr;
        const AdapterWeights* af =
            with_adapters ? &adapters->sites[AdapterStack::site_index(l, true)] : nullptr;
        x = layer_forward(x, cfg, w.layers[l], am, af, mode, rng, res.tape.layers[l]);
    }

    res.tape.final_ln = layer_norm_cached(x, w.final_ln_gain, w.final_ln_bias, kLayerNormEps);
    res.tape.proj_in = Tensor2D(1, cfg.d);
    for (std::size_t j = 0; j < cfg.d; ++j) res.tape.proj_in(0, j) = res.tape.final_ln.out(0, j);
    res.tape.proj_out = matmul(res.tape.proj_in, w.projection);
    res.embedding = l2_normalize_rows(res.tape.proj_out);
    return res;
}

Tensor2D encode_batch(const std::vector<std::vector<int>>& tokens, const EncoderConfig& cfg,
                      const EncoderWeights& w, const AdapterStack* adapters, RunMode mode,
                      SeededRng* rng, std::vector<ActivationTape>* tapes) {
    Tensor2D out(tokens.size(), cfg.embed_dim);
    if (tapes != nullptr) {
        tapes->clear();
        tapes->reserve(tokens.size());
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        EncodeResult res = encode(tokens[i], cfg, w, adapters, mode, rng);
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) out(i, j) = res.embedding(0, j);
        if (tapes != nullptr) tapes->push_back(std::move(res.tape));
    }
    return out;
}

namespace {

// Backward through one layer. g is the gradient with respect to the layer
// output; gradients for weights and adapters accumulate into dw / da.
Tensor2D layer_backward(const LayerTape& tape, const EncoderConfig& cfg, const LayerWeights& lw,
                        const AdapterWeights* mha_adapter, const AdapterWeights* ffn_adapter,
                        RunMode mode, const Tensor2D& g, LayerWeights& dw,
                        AdapterWeights* d_mha_adapter, AdapterWeights* d_ffn_adapter) {
    const std::size_t dh = cfg.d_h();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // out = adapter_ffn(ffn_out) + x_bar
    Tensor2D d_x_bar = g;
    Tensor2D d_ffn_out = g;
    if (ffn_adapter != nullptr) {
        AdapterBackwardResult ab =
            adapter_backward(tape.ffn_out, *ffn_adapter, mode, tape.draw_ffn, g);
        d_ffn_out = std::move(ab.d_x);
        d_ffn_adapter->add_scaled(1.0, ab.d_weights);
    }

    // ffn_out = gelu(ln2_out*w1 + b1)*w2 + b2
    dw.w2 += matmul_tn(tape.ffn_act, d_ffn_out);
    dw.b2 += colsum(d_ffn_out);
    Tensor2D d_act = matmul_nt(d_ffn_out, lw.w2);
    const Tensor2D gg = gelu_grad_cached(tape.ffn_pre, tape.ffn_tanh);
    for (std::size_t i = 0; i < d_act.rows(); ++i) {
        for (std::size_t j = 0; j < d_act.cols(); ++j) d_act(i, j) *= gg(i, j);
    }
    dw.w1 += matmul_tn(tape.ln2.out, d_act);
    dw.b1 += colsum(d_act);
    const Tensor2D d_ln2_out = matmul_nt(d_act, lw.w1);

    LayerNormGrads ln2g = layer_norm_backward(tape.ln2, lw.ln2_gain, d_ln2_out);
    dw.ln2_gain += ln2g.d_gain;
    dw.ln2_bias += ln2g.d_bias;
    d_x_bar += ln2g.d_x;

    // x_bar = adapter_mha(mha_out) + x_in
    Tensor2D d_x = d_x_bar;
    Tensor2D d_mha_out = d_x_bar;
    if (mha_adapter != nullptr) {
        AdapterBackwardResult ab =
            adapter_backward(tape.mha_out, *mha_adapter, mode, tape.draw_mha, d_x_bar);
        d_mha_out = std::move(ab.d_x);
        d_mha_adapter->add_scaled(1.0, ab.d_weights);
    }

    // mha_out = concat*w_o (+ b_o)
    dw.w_o += matmul_tn(tape.concat, d_mha_out);
    if (cfg.w_o_has_bias) dw.b_o += colsum(d_mha_out);
    const Tensor2D d_concat = matmul_nt(d_mha_out, lw.w_o);

    Tensor2D d_ln1_out(tape.ln1.out.rows(), tape.ln1.out.cols());
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Tensor2D d_head(d_concat.rows(), dh);
        for (std::size_t i = 0; i < d_concat.rows(); ++i) {
            for (std::size_t j = 0; j < dh; ++j) d_head(i, j) = d_concat(i, h * dh + j);
        }
        // head = probs*v
        Tensor2D d_probs = matmul_nt(d_head, tape.v[h]);
        Tensor2D d_v = matmul_tn(tape.probs[h], d_head);
        // probs = softmax(q*k^T*scale)
        Tensor2D d_logits = softmax_rows_backward(tape.probs[h], d_probs);
        Tensor2D d_q = matmul(d_logits, tape.k[h]);
        d_q *= scale;
        Tensor2D d_k = matmul_tn(d_logits, tape.q[h]);
        d_k *= scale;

        dw.w_q[h] += matmul_tn(tape.ln1.out, d_q);
        dw.w_k[h] += matmul_tn(tape.ln1.out, d_k);
        dw.w_v[h] += matmul_tn(tape.ln1.out, d_v);
        d_ln1_out += matmul_nt(d_q, lw.w_q[h]);
        d_ln1_out += matmul_nt(d_k, lw.w_k[h]);
        d_ln1_out += matmul_nt(d_v, lw.w_v[h]);
    }

    LayerNormGrads ln1g = layer_norm_backward(tape.ln1, lw.ln1_gain, d_ln1_out);
    dw.ln1_gain += ln1g.d_gain;
    dw.ln1_bias += ln1g.d_bias;
    d_x += ln1g.d_x;
    return d_x;
}

}  // namespace

EncoderBackward encode_backward(const ActivationTape& tape, const EncoderConfig& cfg,
                                const EncoderWeights& w, const AdapterStack* adapters,
                                const Tensor2D& upstream) {
    w.validate(cfg);
    const bool with_adapters = adapters != nullptr && !adapters->empty();
    if (with_adapters) adapters->validate(cfg);
    if (tape.tokens.size() != cfg.seq_len || tape.layers.size() != cfg.layers ||
        tape.x0.rows() != cfg.seq_len || tape.x0.cols() != cfg.d ||
        tape.proj_out.cols() != cfg.embed_dim) {
        throw StaleTapeError("tape does not match encoder configuration");
    }
    for (const LayerTape& lt : tape.layers) {
        if (lt.q.size() != cfg.heads || lt.concat.cols() != cfg.d ||
            (with_adapters && (!lt.draw_mha.has_value() || !lt.draw_ffn.has_value())) ||
            (!with_adapters && (lt.draw_mha.has_value() || lt.draw_ffn.has_value()))) {
            throw StaleTapeError("tape layer caches do not match encoder configuration");
        }
    }
    if (upstream.rows() != 1 || upstream.cols() != cfg.embed_dim) {
        throw ShapeError("upstream gradient must be 1x" + std::to_string(cfg.embed_dim) +
                         ", got " + upstream.shape_str());
    }

    EncoderBackward out;
    out.d_weights = EncoderWeights::zeros(cfg);
    if (with_adapters) out.d_adapters = adapters->zeros_like();

    // embedding = proj_out / ||proj_out||
    double sq = 0.0;
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) sq += tape.proj_out(0, j) * tape.proj_out(0, j);
    const double norm = std::sqrt(sq);
    double dot = 0.0;
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        dot += upstream(0, j) * tape.proj_out(0, j) / norm;
    }
    Tensor2D d_proj_out(1, cfg.embed_dim);
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        d_proj_out(0, j) = (upstream(0, j) - dot * tape.proj_out(0, j) / norm) / norm;
    }

    out.d_weights.projection += matmul_tn(tape.proj_in, d_proj_out);
    const Tensor2D d_proj_in = matmul_nt(d_proj_out, w.projection);

    // Pooling reads row 0 of the final LN output.
    Tensor2D d_final_out(cfg.seq_len, cfg.d);
    for (std::size_t j = 0; j < cfg.d; ++j) d_final_out(0, j) = d_proj_in(0, j);

    LayerNormGrads fg = layer_norm_backward(tape.final_ln, w.final_ln_gain, d_final_out);
    out.d_weights.final_ln_gain += fg.d_gain;
    out.d_weights.final_ln_bias += fg.d_bias;

    Tensor2D g = std::move(fg.d_x);
    for (std::size_t l = cfg.layers; l-- > 0;) {
        const AdapterWeights* am =
            with_adapters ? &adapters->sites[AdapterStack::site_index(l, false)] : nullptr;
        const AdapterWeights* af =
            with_adapters ? &adapters->sites[AdapterStack::site_index(l, true)] : nullptr;
        AdapterWeights* dam =
            with_adapters ? &out.d_adapters.sites[AdapterStack::site_index(l, false)] : nullptr;
        AdapterWeights* daf =
            with_adapters ? &out.d_adapters.sites[AdapterStack::site_index(l, true)] : nullptr;
        g = layer_backward(tape.layers[l], cfg, w.layers[l], am, af, tape.mode, g,
                           out.d_weights.layers[l], dam, daf);
    }

    // x0 = token_embedding[tokens] + positional_embedding
    out.d_weights.positional_embedding += g;
    for (std::size_t t = 0; t < cfg.seq_len; ++t) {
        const auto tok = static_cast<std::size_t>(tape.tokens[t]);
        for (std::size_t j = 0; j < cfg.d; ++j) {
            out.d_weights.token_embedding(tok, j) += g(t, j);
        }
    }
    return out;
}

EncoderWeights fold_adapters(const EncoderWeights& w, const EncoderConfig& cfg,
                             const std::vector<Tensor2D>& site_mats, double alpha) {
    w.validate(cfg);
    if (site_mats.size() != 2 * cfg.layers) {
        throw std::invalid_argument("fold_adapters: expected " + std::to_string(2 * cfg.layers) +
                                    " site matrices, got " + std::to_string(site_mats.size()));
    }
    EncoderWeights merged = w;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerWeights& lw = merged.layers[l];
        const Tensor2D& m_attn = site_mats[AdapterStack::site_index(l, false)];
        const Tensor2D& m_ffn = site_mats[AdapterStack::site_index(l, true)];

        MergedLayer attn = rescale_merge(lw.w_o, cfg.w_o_has_bias ? &lw.b_o : nullptr, m_attn,
                                         alpha);
        lw.w_o = std::move(attn.w);
        if (cfg.w_o_has_bias) lw.b_o = std::move(attn.b);

        MergedLayer ffn = rescale_merge(lw.w2, &lw.b2, m_ffn, alpha);
        lw.w2 = std::move(ffn.w);
        lw.b2 = std::move(ffn.b);
    }
    return merged;
}

}  // namespace radapter
