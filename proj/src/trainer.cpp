#include "radapter/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace radapter {

namespace {

using nlohmann::json;

const char* to_string(MaskMode m) {
    return m == MaskMode::all ? "all" : "adapters_only";
}
const char* to_string(LossKind l) {
    return l == LossKind::info_nce ? "info_nce" : "mpm_nce";
}
const char* to_string(LossScaling s) {
    return s == LossScaling::sum ? "sum" : "mean";
}

void collect_params(ModelState& model, MaskMode mask,
                    std::vector<std::pair<std::string, Tensor2D*>>& out) {
    if (mask == MaskMode::all) {
        for (auto& [n, t] : model.img.named_tensors()) out.emplace_back("img." + n, t);
        for (auto& [n, t] : model.txt.named_tensors()) {
            // One learnable temperature per model pair; it lives in the
            // image tower.
            if (n == "log_temp") continue;
            out.emplace_back("txt." + n, t);
        }
    }
    for (auto& [n, t] : model.img_adapters.named_tensors()) out.emplace_back("img." + n, t);
    for (auto& [n, t] : model.txt_adapters.named_tensors()) out.emplace_back("txt." + n, t);
}

void collect_grads(const EncoderWeights& img, const EncoderWeights& txt,
                   const AdapterStack& img_adp, const AdapterStack& txt_adp, MaskMode mask,
                   std::vector<std::pair<std::string, const Tensor2D*>>& out) {
    if (mask == MaskMode::all) {
        for (auto& [n, t] : img.named_tensors()) out.emplace_back("img." + n, t);
        for (auto& [n, t] : txt.named_tensors()) {
            if (n == "log_temp") continue;
            out.emplace_back("txt." + n, t);
        }
    }
    for (auto& [n, t] : img_adp.named_tensors()) out.emplace_back("img." + n, t);
    for (auto& [n, t] : txt_adp.named_tensors()) out.emplace_back("txt." + n, t);
}

ModelConfig model_config_of(const EncoderConfig& cfg) {
    return ModelConfig{cfg.d, cfg.heads, cfg.layers, cfg.embed_dim, cfg.w_o_has_bias};
}

void run_training(ModelState& model, const std::vector<PairRecord>& records,
                  const TaskSpec& spec, const TrainConfig& cfg, std::ostream* log) {
    if (records.empty()) throw DataError("training requires a non-empty record set");
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, records.size() / cfg.batch);
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    TrainContext ctx{cfg,
                     LrSchedule{cfg.lr_init, cfg.warmup_steps.value_or(total_steps / 20),
                                total_steps},
                     OptimState{}, SeededRng(cfg.seed, "dropping"), 0};
    SeededRng data_rng(cfg.seed, "data");

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const Batch batch =
                sample_batch(records, spec, cfg.batch, cfg.min_per_class, data_rng);
            loss_sum += train_step(model, batch, ctx);
        }
        if (log != nullptr) {
            const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
            (*log) << "epoch=" << epoch + 1 << " step=" << ctx.global_step << " lr="
                   << std::setprecision(8) << lr_at(ctx.schedule, ctx.global_step - 1)
                   << " train_loss=" << std::setprecision(8)
                   << loss_sum / static_cast<double>(steps_per_epoch) << " wall_ms=" << ms
                   << "\n";
        }
    }
}

}  // namespace

EncoderConfig make_img_config(const ModelConfig& mcfg, const TaskSpec& spec) {
    EncoderConfig cfg;
    cfg.d = mcfg.d;
    cfg.heads = mcfg.heads;
    cfg.layers = mcfg.layers;
    cfg.embed_dim = mcfg.embed_dim;
    cfg.w_o_has_bias = mcfg.w_o_has_bias;
    cfg.seq_len = spec.img_seq_len;
    cfg.vocab_size = spec.img_vocab;
    cfg.validate();
    return cfg;
}

EncoderConfig make_txt_config(const ModelConfig& mcfg, const TaskSpec& spec) {
    EncoderConfig cfg = make_img_config(mcfg, spec);
    cfg.seq_len = spec.txt_seq_len;
    cfg.vocab_size = spec.txt_vocab;
    cfg.validate();
    return cfg;
}

void TrainConfig::validate() const {
    if (batch < 2) throw std::invalid_argument("TrainConfig: batch must be >= 2");
    if (lr_init <= 0.0) throw std::invalid_argument("TrainConfig: lr_init must be positive");
    if (drop_p < 0.0 || drop_p >= 1.0) {
        throw std::invalid_argument("TrainConfig: drop_p must be in [0, 1)");
    }
    if (momentum < 0.0 || momentum > 1.0) {
        throw std::invalid_argument("TrainConfig: momentum must be in [0, 1]");
    }
    if (delta < 0.0) throw std::invalid_argument("TrainConfig: delta must be >= 0");
    if (epsilon < 0.0 || epsilon >= 1.0) {
        throw std::invalid_argument("TrainConfig: epsilon must be in [0, 1)");
    }
    if (tau <= 0.0) throw std::invalid_argument("TrainConfig: tau must be positive");
    if (min_per_class < 1) throw std::invalid_argument("TrainConfig: min_per_class must be >= 1");
    if (batch % min_per_class != 0 || batch < 2 * min_per_class) {
        throw std::invalid_argument(
            "TrainConfig: batch must be a multiple of min_per_class and at least twice it");
    }
}

TrainConfig TrainConfig::pretrain_defaults() {
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.loss = LossKind::info_nce;
    cfg.mask = MaskMode::all;
    cfg.min_per_class = 1;
    return cfg;
}

TrainConfig TrainConfig::finetune_defaults() {
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.loss = LossKind::mpm_nce;
    cfg.mask = MaskMode::adapters_only;
    cfg.min_per_class = 2;
    cfg.learn_temp = false;
    return cfg;
}

double lr_at(const LrSchedule& s, std::size_t step) {
    if (s.total_steps == 0 || step >= s.total_steps) return 0.0;
    if (s.warmup_steps > 0 && step < s.warmup_steps) {
        return s.lr_init * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    }
    if (s.total_steps <= s.warmup_steps) return s.lr_init;
    const double progress = static_cast<double>(step - s.warmup_steps) /
                            static_cast<double>(s.total_steps - s.warmup_steps);
    return s.lr_init * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(const std::vector<std::pair<std::string, Tensor2D*>>& params,
                const std::vector<std::pair<std::string, const Tensor2D*>>& grads,
                OptimState& opt, double lr) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adamw_step: parameter/gradient list size mismatch");
    }
    ++opt.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].first != grads[i].first) {
            throw std::invalid_argument("adamw_step: name mismatch at index " +
                                        std::to_string(i) + ": " + params[i].first + " vs " +
                                        grads[i].first);
        }
        Tensor2D& p = *params[i].second;
        const Tensor2D& g = *grads[i].second;
        if (!p.same_shape(g)) {
            throw ShapeError("adamw_step: " + params[i].first + " param " + p.shape_str() +
                             " vs grad " + g.shape_str());
        }
        AdamState& slot = opt.slots[params[i].first];
        if (slot.m.empty()) {
            slot.m = Tensor2D(p.rows(), p.cols());
            slot.v = Tensor2D(p.rows(), p.cols());
        } else if (!slot.m.same_shape(p)) {
            throw ShapeError("adamw_step: stale optimizer slot for " + params[i].first);
        }
        double* mp = slot.m.data();
        double* vp = slot.v.data();
        double* pp = p.data();
        const double* gp = g.data();
        for (std::size_t e = 0; e < p.size(); ++e) {
            mp[e] = opt.beta1 * mp[e] + (1.0 - opt.beta1) * gp[e];
            vp[e] = opt.beta2 * vp[e] + (1.0 - opt.beta2) * gp[e] * gp[e];
            const double mhat = mp[e] / bc1;
            const double vhat = vp[e] / bc2;
            pp[e] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
}

ModelState model_from_checkpoint(const Checkpoint& ckpt) {
    ModelState model;
    model.img_cfg = ckpt.img_cfg;
    model.txt_cfg = ckpt.txt_cfg;
    TowerState img = extract_tower(ckpt, "img.", ckpt.img_cfg);
    TowerState txt = extract_tower(ckpt, "txt.", ckpt.txt_cfg);
    model.img = std::move(img.weights);
    model.txt = std::move(txt.weights);
    model.img_adapters = std::move(img.adapters);
    model.txt_adapters = std::move(txt.adapters);
    for (Tensor2D& s : img.shadows) {
        model.img_emas.push_back(AdapterEma{std::move(s), ckpt.adapter.momentum, 0});
    }
    for (Tensor2D& s : txt.shadows) {
        model.txt_emas.push_back(AdapterEma{std::move(s), ckpt.adapter.momentum, 0});
    }
    return model;
}

double train_step(ModelState& model, const Batch& batch, TrainContext& ctx) {
    const TrainConfig& cfg = ctx.cfg;
    const std::size_t b = batch.class_ids.size();
    if (b < 2 || batch.img_tokens.size() != b || batch.txt_tokens.size() != b) {
        throw std::invalid_argument("train_step: malformed batch");
    }
    const bool img_adp = !model.img_adapters.sites.empty();
    const bool txt_adp = !model.txt_adapters.sites.empty();

    std::vector<ActivationTape> img_tapes, txt_tapes;
    const Tensor2D f = encode_batch(batch.img_tokens, model.img_cfg, model.img,
                                    img_adp ? &model.img_adapters : nullptr, RunMode::train,
                                    &ctx.drop_rng, &img_tapes);
    const Tensor2D g = encode_batch(batch.txt_tokens, model.txt_cfg, model.txt,
                                    txt_adp ? &model.txt_adapters : nullptr, RunMode::train,
                                    &ctx.drop_rng, &txt_tapes);

    double loss = 0.0;
    Tensor2D d_f, d_g;
    double d_log_temp = 0.0;
    if (cfg.loss == LossKind::info_nce) {
        const double tau = cfg.learn_temp ? model.img.tau() : cfg.tau;
        InfoNceResult res = info_nce(f, g, tau);
        loss = res.loss;
        d_f = std::move(res.d_f);
        d_g = std::move(res.d_g);
        // chain through tau = exp(log_temp); a fixed tau has no gradient
        d_log_temp = cfg.learn_temp ? res.d_tau * tau : 0.0;
    } else {
        MpmNceResult res = mpm_nce(f, g, batch.labels, LossConfig{cfg.tau, cfg.delta,
                                                                 cfg.epsilon});
        loss = res.loss;
        d_f = std::move(res.d_f);
        d_g = std::move(res.d_g);
    }
    if (cfg.scaling == LossScaling::mean) {
        const double inv = 1.0 / static_cast<double>(b);
        loss *= inv;
        d_f *= inv;
        d_g *= inv;
        d_log_temp *= inv;
    }
    if (!std::isfinite(loss)) {
        throw NonFiniteLossError("train_step: non-finite loss at optimizer step " +
                                 std::to_string(ctx.global_step));
    }

    EncoderWeights img_grads = EncoderWeights::zeros(model.img_cfg);
    EncoderWeights txt_grads = EncoderWeights::zeros(model.txt_cfg);
    AdapterStack img_adp_grads = model.img_adapters.zeros_like();
    AdapterStack txt_adp_grads = model.txt_adapters.zeros_like();

    Tensor2D up_f(1, model.img_cfg.embed_dim);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < up_f.cols(); ++j) up_f(0, j) = d_f(i, j);
        EncoderBackward eb = encode_backward(img_tapes[i], model.img_cfg, model.img,
                                             img_adp ? &model.img_adapters : nullptr, up_f);
        img_grads.add_scaled(1.0, eb.d_weights);
        if (img_adp) img_adp_grads.add_scaled(1.0, eb.d_adapters);
    }
    Tensor2D up_g(1, model.txt_cfg.embed_dim);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < up_g.cols(); ++j) up_g(0, j) = d_g(i, j);
        EncoderBackward eb = encode_backward(txt_tapes[i], model.txt_cfg, model.txt,
                                             txt_adp ? &model.txt_adapters : nullptr, up_g);
        txt_grads.add_scaled(1.0, eb.d_weights);
        if (txt_adp) txt_adp_grads.add_scaled(1.0, eb.d_adapters);
    }
    img_grads.log_temp(0, 0) = d_log_temp;

    std::vector<std::pair<std::string, Tensor2D*>> params;
    std::vector<std::pair<std::string, const Tensor2D*>> grads;
    collect_params(model, cfg.mask, params);
    collect_grads(img_grads, txt_grads, img_adp_grads, txt_adp_grads, cfg.mask, grads);
    adamw_step(params, grads, ctx.opt, lr_at(ctx.schedule, ctx.global_step));
    ++ctx.global_step;

    double& lt = model.img.log_temp(0, 0);
    lt = std::clamp(lt, std::log(kMinTau), std::log(kMaxTau));

    for (std::size_t i = 0; i < model.img_emas.size(); ++i) {
        ema_update(model.img_emas[i], model.img_adapters.sites[i]);
    }
    for (std::size_t i = 0; i < model.txt_emas.size(); ++i) {
        ema_update(model.txt_emas[i], model.txt_adapters.sites[i]);
    }
    return loss;
}

Checkpoint pretrain(const std::vector<PairRecord>& records, const TaskSpec& spec,
                    const ModelConfig& mcfg, const TrainConfig& cfg, std::ostream* log) {
    spec.validate();
    cfg.validate();
    ModelState model;
    model.img_cfg = make_img_config(mcfg, spec);
    model.txt_cfg = make_txt_config(mcfg, spec);
    SeededRng init_rng(cfg.seed, "init");
    model.img = EncoderWeights::pretrain_init(model.img_cfg, init_rng);
    model.txt = EncoderWeights::pretrain_init(model.txt_cfg, init_rng);

    run_training(model, records, spec, cfg, log);

    Provenance prov;
    prov.seed = cfg.seed;
    prov.config_hash = train_config_hash(spec, mcfg, cfg);
    return make_checkpoint(model.img_cfg, TowerState{std::move(model.img), {}, {}},
                           model.txt_cfg, TowerState{std::move(model.txt), {}, {}},
                           AdapterMeta{}, prov);
}

Checkpoint finetune(const Checkpoint& base, const std::vector<PairRecord>& records,
                    const TaskSpec& spec, const TrainConfig& cfg, std::ostream* log) {
    spec.validate();
    cfg.validate();
    if (base.has_adapters()) {
        throw std::invalid_argument("finetune: base checkpoint already carries adapters");
    }
    ModelState model = model_from_checkpoint(base);
    if (model.img_cfg.seq_len != spec.img_seq_len ||
        model.img_cfg.vocab_size != spec.img_vocab ||
        model.txt_cfg.seq_len != spec.txt_seq_len ||
        model.txt_cfg.vocab_size != spec.txt_vocab) {
        throw std::invalid_argument(
            "finetune: checkpoint sequence/vocabulary sizes do not match the task");
    }

    SeededRng init_rng(cfg.seed, "init");
    if (cfg.adapter_rank == 0) {
        model.img_adapters = AdapterStack::full_rank_zeros(model.img_cfg, cfg.drop_p);
        model.txt_adapters = AdapterStack::full_rank_zeros(model.txt_cfg, cfg.drop_p);
    } else {
        model.img_adapters =
            AdapterStack::low_rank(model.img_cfg, cfg.adapter_rank, cfg.drop_p, init_rng);
        model.txt_adapters =
            AdapterStack::low_rank(model.txt_cfg, cfg.adapter_rank, cfg.drop_p, init_rng);
    }
    for (const AdapterWeights& aw : model.img_adapters.sites) {
        model.img_emas.push_back(AdapterEma::from(aw, cfg.momentum));
    }
    for (const AdapterWeights& aw : model.txt_adapters.sites) {
        model.txt_emas.push_back(AdapterEma::from(aw, cfg.momentum));
    }

    TrainConfig fcfg = cfg;
    fcfg.mask = MaskMode::adapters_only;  // the backbone stays frozen
    run_training(model, records, spec, fcfg, log);

    TowerState img{std::move(model.img), std::move(model.img_adapters), {}};
    for (const AdapterEma& e : model.img_emas) img.shadows.push_back(e.shadow);
    TowerState txt{std::move(model.txt), std::move(model.txt_adapters), {}};
    for (const AdapterEma& e : model.txt_emas) txt.shadows.push_back(e.shadow);

    AdapterMeta meta{2 * model.img_cfg.layers, cfg.adapter_rank, cfg.drop_p, cfg.momentum};
    Provenance prov;
    prov.seed = cfg.seed;
    prov.config_hash = train_config_hash(spec, model_config_of(model.img_cfg), fcfg);
    return make_checkpoint(model.img_cfg, img, model.txt_cfg, txt, meta, prov);
}

std::uint64_t train_config_hash(const TaskSpec& spec, const ModelConfig& mcfg,
                                const TrainConfig& cfg) {
    json j;
    j["task"] = {{"latent_dim", spec.latent_dim},
                 {"n_classes_pretrain", spec.n_classes_pretrain},
                 {"n_classes_task", spec.n_classes_task},
                 {"n_templates", spec.n_templates},
                 {"img_seq_len", spec.img_seq_len},
                 {"txt_seq_len", spec.txt_seq_len},
                 {"img_vocab", spec.img_vocab},
                 {"txt_vocab", spec.txt_vocab},
                 {"noise_std_id", spec.noise_std_id},
                 {"noise_std_ood", spec.noise_std_ood},
                 {"style_mix", spec.style_mix},
                 {"seed", spec.seed},
                 {"pretrain_size", spec.pretrain_size},
                 {"id_train_size", spec.id_train_size},
                 {"id_test_size", spec.id_test_size},
                 {"ood_test_size", spec.ood_test_size}};
    j["model"] = {{"d", mcfg.d},
                  {"heads", mcfg.heads},
                  {"layers", mcfg.layers},
                  {"embed_dim", mcfg.embed_dim},
                  {"w_o_has_bias", mcfg.w_o_has_bias}};
    j["train"] = {{"batch", cfg.batch},
                  {"epochs", cfg.epochs},
                  {"lr_init", cfg.lr_init},
                  {"warmup_steps", cfg.warmup_steps.has_value()
                                       ? json(*cfg.warmup_steps)
                                       : json(nullptr)},
                  {"drop_p", cfg.drop_p},
                  {"momentum", cfg.momentum},
                  {"delta", cfg.delta},
                  {"epsilon", cfg.epsilon},
                  {"tau", cfg.tau},
                  {"learn_temp", cfg.learn_temp},
                  {"mask", to_string(cfg.mask)},
                  {"loss", to_string(cfg.loss)},
                  {"scaling", to_string(cfg.scaling)},
                  {"min_per_class", cfg.min_per_class},
                  {"adapter_rank", cfg.adapter_rank},
                  {"seed", cfg.seed}};
    return fnv1a64(j.dump());
}

}  // namespace radapter
