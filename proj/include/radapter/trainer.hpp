#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "radapter/checkpoint.hpp"
#include "radapter/encoder.hpp"
#include "radapter/loss.hpp"
#include "radapter/synthdata.hpp"

namespace radapter {

// Raised when a training step produces a non-finite loss.
struct NonFiniteLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Architecture knobs shared by both towers; sequence and vocabulary sizes
// come from the task.
struct ModelConfig {
    std::size_t d = 32;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t embed_dim = 16;
    bool w_o_has_bias = true;
};

EncoderConfig make_img_config(const ModelConfig& mcfg, const TaskSpec& spec);
EncoderConfig make_txt_config(const ModelConfig& mcfg, const TaskSpec& spec);

enum class MaskMode { all, adapters_only };
enum class LossKind { info_nce, mpm_nce };
enum class LossScaling { sum, mean };

struct TrainConfig {
    std::size_t batch = 64;
    std::size_t epochs = 10;
    double lr_init = 5e-4;
    // Defaults to 5% of total steps; production-length runs would pin ~500.
    std::optional<std::size_t> warmup_steps;
    double drop_p = 0.2;
    double momentum = 0.999;
    double delta = 0.05;
    double epsilon = 0.0;
    double tau = 0.01;  // fixed temperature (see learn_temp)
    MaskMode mask = MaskMode::all;
    LossKind loss = LossKind::mpm_nce;
    LossScaling scaling = LossScaling::mean;
    // Temperature policy for the single-positive objective: pretraining
    // learns log_temp; fine-tuning holds tau fixed so objective comparisons
    // are controlled. The multi-positive objective always uses fixed tau.
    bool learn_temp = true;
    std::size_t min_per_class = 2;
    std::size_t adapter_rank = 0;  // 0 = full-rank adapters
    std::uint64_t seed = 0;

    void validate() const;

    static TrainConfig pretrain_defaults();
    static TrainConfig finetune_defaults();
};

// The learnable log-temperature is projected into this range after every
// update.
inline constexpr double kMinTau = 1e-3;
inline constexpr double kMaxTau = 1.0;

struct LrSchedule {
    double lr_init = 0.0;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 0;
};

// Linear ramp 0 -> lr_init over warmup_steps, then cosine decay reaching 0
// at step == total_steps.
double lr_at(const LrSchedule& s, std::size_t step);

struct AdamState {
    Tensor2D m;
    Tensor2D v;
};

struct OptimState {
    std::map<std::string, AdamState> slots;
    std::uint64_t step = 0;  // completed optimizer steps
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam with zero weight decay. params and grads are parallel
// name/tensor lists; slots are created on first use.
void adamw_step(const std::vector<std::pair<std::string, Tensor2D*>>& params,
                const std::vector<std::pair<std::string, const Tensor2D*>>& grads,
                OptimState& opt, double lr);

// Live training state for the encoder pair.
struct ModelState {
    EncoderConfig img_cfg, txt_cfg;
    EncoderWeights img, txt;
    AdapterStack img_adapters, txt_adapters;     // empty during pretraining
    std::vector<AdapterEma> img_emas, txt_emas;  // parallel to adapter sites
};

ModelState model_from_checkpoint(const Checkpoint& ckpt);

struct TrainContext {
    TrainConfig cfg;
    LrSchedule schedule;
    OptimState opt;
    SeededRng drop_rng;
    std::uint64_t global_step = 0;
};

// One optimizer step: train-mode forwards (fresh gate draw per adapter site
// per encode), loss, backward, masked Adam update, then an EMA update for
// every adapter site. Returns the (scaled) batch loss.
double train_step(ModelState& model, const Batch& batch, TrainContext& ctx);

// Full-parameter contrastive pretraining on the given records. The image
// tower's log_temp is the learnable temperature; the text tower's is frozen.
Checkpoint pretrain(const std::vector<PairRecord>& records, const TaskSpec& spec,
                    const ModelConfig& mcfg, const TrainConfig& cfg, std::ostream* log);

// Adapter fine-tuning: freezes the backbone, attaches zero-initialized
// adapters at both sites of every layer in both towers, tracks EMA shadows,
// and stores everything in the returned checkpoint.
Checkpoint finetune(const Checkpoint& base, const std::vector<PairRecord>& records,
                    const TaskSpec& spec, const TrainConfig& cfg, std::ostream* log);

// FNV-1a over the canonical config serialization; joins checkpoints to
// report rows.
std::uint64_t train_config_hash(const TaskSpec& spec, const ModelConfig& mcfg,
                                const TrainConfig& cfg);

}  // namespace radapter
