// Command-line surface for the adapter laboratory: dataset generation,
// contrastive pretraining, adapter fine-tuning, checkpoint merging,
// evaluation sweeps, and the finite-difference gradient suite.
//
// Exit codes: 0 success, 1 usage error, 2 data or checkpoint format error,
// 3 numerical-check failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "radapter/checkpoint.hpp"
#include "radapter/evalkit.hpp"
#include "radapter/gradcheck.hpp"
#include "radapter/synthdata.hpp"
#include "radapter/trainer.hpp"

namespace {

using namespace radapter;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

std::vector<PairRecord> load_split(const std::filesystem::path& dir, const std::string& split) {
    static const std::vector<std::string> known = {"pretrain", "id_train", "id_test", "ood_test"};
    if (std::find(known.begin(), known.end(), split) == known.end()) {
        throw std::invalid_argument("unknown split '" + split +
                                    "' (expected pretrain, id_train, id_test, or ood_test)");
    }
    return read_jsonl(dir / (split + ".jsonl"));
}

void add_task_spec_options(CLI::App* cmd, TaskSpec& spec) {
    cmd->add_option("--latent-dim", spec.latent_dim, "Latent class-space dimension")
        ->capture_default_str();
    cmd->add_option("--n-classes-pretrain", spec.n_classes_pretrain,
                    "Classes available during pretraining")
        ->capture_default_str();
    cmd->add_option("--n-classes-task", spec.n_classes_task,
                    "Downstream task classes (a prefix of the pretraining ids)")
        ->capture_default_str();
    cmd->add_option("--n-templates", spec.n_templates, "Caption templates per class")
        ->capture_default_str();
    cmd->add_option("--img-seq-len", spec.img_seq_len, "Image token sequence length")
        ->capture_default_str();
    cmd->add_option("--txt-seq-len", spec.txt_seq_len, "Text token sequence length")
        ->capture_default_str();
    cmd->add_option("--img-vocab", spec.img_vocab, "Image token vocabulary size")
        ->capture_default_str();
    cmd->add_option("--txt-vocab", spec.txt_vocab, "Text token vocabulary size")
        ->capture_default_str();
    cmd->add_option("--noise-std-id", spec.noise_std_id, "Render noise on the in-distribution style")
        ->capture_default_str();
    cmd->add_option("--noise-std-ood", spec.noise_std_ood, "Render noise on the shifted style")
        ->capture_default_str();
    cmd->add_option("--style-mix", spec.style_mix,
                    "Interpolation weight of the alternate style in the shifted split")
        ->capture_default_str();
    cmd->add_option("--pretrain-size", spec.pretrain_size, "Pretraining pair count")
        ->capture_default_str();
    cmd->add_option("--id-train-size", spec.id_train_size, "Fine-tuning pair count")
        ->capture_default_str();
    cmd->add_option("--id-test-size", spec.id_test_size, "In-distribution test pair count")
        ->capture_default_str();
    cmd->add_option("--ood-test-size", spec.ood_test_size, "Shifted test pair count")
        ->capture_default_str();
    cmd->add_option("--seed", spec.seed, "Dataset seed")->required();
}

void add_train_options(CLI::App* cmd, TrainConfig& cfg, bool finetune_knobs) {
    cmd->add_option("--batch", cfg.batch, "Batch size")->capture_default_str();
    cmd->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--lr-init", cfg.lr_init, "Peak learning rate")->capture_default_str();
    cmd->add_option("--warmup-steps", cfg.warmup_steps,
                    "Linear warmup steps (default: 5% of total)");
    cmd->add_option("--delta", cfg.delta, "Negative-pair margin")->capture_default_str();
    cmd->add_option("--epsilon", cfg.epsilon, "Label smoothing")->capture_default_str();
    cmd->add_option("--tau", cfg.tau, "Fixed contrastive temperature")->capture_default_str();
    cmd->add_flag("--learn-temp,!--no-learn-temp", cfg.learn_temp,
                  "info-nce uses the learnable temperature instead of --tau")
        ->capture_default_str();
    static const std::map<std::string, LossKind> loss_map{{"info-nce", LossKind::info_nce},
                                                          {"mpm-nce", LossKind::mpm_nce}};
    cmd->add_option("--loss", cfg.loss, "Objective: info-nce or mpm-nce")
        ->transform(CLI::CheckedTransformer(loss_map, CLI::ignore_case));
    static const std::map<std::string, LossScaling> scale_map{{"sum", LossScaling::sum},
                                                              {"mean", LossScaling::mean}};
    cmd->add_option("--scaling", cfg.scaling, "Loss scaling: sum or mean")
        ->transform(CLI::CheckedTransformer(scale_map, CLI::ignore_case));
    cmd->add_option("--min-per-class", cfg.min_per_class,
                    "Guaranteed positives per sampled class")
        ->capture_default_str();
    if (finetune_knobs) {
        cmd->add_option("--drop-p", cfg.drop_p, "Adapter dropping probability")
            ->capture_default_str();
        cmd->add_option("--momentum", cfg.momentum, "Adapter EMA momentum")
            ->capture_default_str();
        cmd->add_option("--adapter-rank", cfg.adapter_rank, "Adapter rank (0 = full)")
            ->capture_default_str();
    }
    cmd->add_option("--seed", cfg.seed, "Training seed")->required();
}

int run_gen_data(const TaskSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    const SplitSet splits = write_split_files(out_dir, spec);
    std::cout << "wrote " << splits.pretrain.size() << " pretrain, " << splits.id_train.size()
              << " id_train, " << splits.id_test.size() << " id_test, "
              << splits.ood_test.size() << " ood_test records to " << out_dir.string() << "\n";
    return kExitOk;
}

int run_pretrain(const std::filesystem::path& data_dir, const std::filesystem::path& out_path,
                 const ModelConfig& mcfg, const TrainConfig& cfg) {
    const TaskSpec spec = read_task_spec(data_dir / "task_spec.json");
    const std::vector<PairRecord> records = load_split(data_dir, "pretrain");
    const Checkpoint ckpt = pretrain(records, spec, mcfg, cfg, &std::cout);
    save_checkpoint(ckpt, out_path);
    std::cout << "saved " << out_path.string() << "\n";
    return kExitOk;
}

int run_finetune(const std::filesystem::path& base_path, const std::filesystem::path& data_dir,
                 const std::filesystem::path& out_path, const TrainConfig& cfg) {
    const Checkpoint base = load_checkpoint(base_path);
    const TaskSpec spec = read_task_spec(data_dir / "task_spec.json");
    const std::vector<PairRecord> records = load_split(data_dir, "id_train");
    const Checkpoint ckpt = finetune(base, records, spec, cfg, &std::cout);
    save_checkpoint(ckpt, out_path);
    std::cout << "saved " << out_path.string() << "\n";
    return kExitOk;
}

int run_eval(const std::filesystem::path& ckpt_path, const std::filesystem::path& data_dir,
             const std::vector<std::string>& split_names) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const TaskSpec spec = read_task_spec(data_dir / "task_spec.json");
    for (const std::string& name : split_names) {
        const std::vector<PairRecord> records = load_split(data_dir, name);
        const SplitMetrics metrics = evaluate_checkpoint(ckpt, records, spec);
        char line[160];
        std::snprintf(line, sizeof(line), "split=%s accuracy=%.6f recall@1=%.6f", name.c_str(),
                      metrics.accuracy, metrics.recall1);
        std::cout << line << "\n";
    }
    return kExitOk;
}

int run_merge(const std::filesystem::path& ckpt_path, const std::filesystem::path& out_path,
              double alpha, bool use_raw) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Checkpoint merged = merge_checkpoint(ckpt, alpha, use_raw);
    save_checkpoint(merged, out_path);
    std::cout << "saved " << out_path.string() << " at alpha=" << alpha
              << (use_raw ? " (raw weights)" : " (EMA shadows)") << "\n";
    return kExitOk;
}

int run_sweep(const std::filesystem::path& base_path, const std::filesystem::path& finetuned_path,
              const std::filesystem::path& data_dir, const std::vector<double>& alphas,
              const std::vector<std::string>& split_names, const std::filesystem::path& out_csv) {
    const Checkpoint base = load_checkpoint(base_path);
    const Checkpoint finetuned = load_checkpoint(finetuned_path);
    const TaskSpec spec = read_task_spec(data_dir / "task_spec.json");

    std::vector<std::vector<PairRecord>> storage;
    storage.reserve(split_names.size());
    for (const std::string& name : split_names) storage.push_back(load_split(data_dir, name));
    std::vector<SplitRecords> splits;
    for (std::size_t i = 0; i < split_names.size(); ++i) {
        splits.push_back({split_names[i], &storage[i]});
    }

    const EvalReport report = alpha_sweep(base, finetuned, alphas, splits, spec);
    write_csv(out_csv, report);
    std::cout << "wrote " << report.rows.size() << " rows to " << out_csv.string() << "\n";
    return kExitOk;
}

int run_gradcheck(std::uint64_t seed) {
    const std::vector<GradCheckEntry> entries = run_gradient_suite(seed);
    bool all_ok = true;
    for (const GradCheckEntry& e : entries) {
        char line[160];
        std::snprintf(line, sizeof(line), "component=%-18s max_rel_err=%.3e threshold=%.1e %s",
                      e.component.c_str(), e.rel_error, e.threshold, e.ok() ? "ok" : "FAIL");
        std::cout << line << "\n";
        all_ok = all_ok && e.ok();
    }
    if (!all_ok) {
        std::cerr << "gradient check failed\n";
        return kExitNumerical;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Robust adapter fine-tuning laboratory"};
    app.require_subcommand(1);

    TaskSpec spec;
    std::string gen_out;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic benchmark splits");
    add_task_spec_options(gen, spec);
    gen->add_option("--out", gen_out, "Output directory")->required();

    ModelConfig mcfg;
    TrainConfig pre_cfg = TrainConfig::pretrain_defaults();
    std::string pre_data, pre_out;
    CLI::App* pre = app.add_subcommand("pretrain", "Contrastive pretraining of both towers");
    pre->add_option("--data", pre_data, "Dataset directory from gen-data")->required();
    pre->add_option("--out", pre_out, "Checkpoint output path")->required();
    pre->add_option("--d", mcfg.d, "Model width")->capture_default_str();
    pre->add_option("--heads", mcfg.heads, "Attention heads")->capture_default_str();
    pre->add_option("--layers", mcfg.layers, "Transformer layers per tower")
        ->capture_default_str();
    pre->add_option("--embed-dim", mcfg.embed_dim, "Shared embedding dimension")
        ->capture_default_str();
    pre->add_flag("--no-wo-bias", [&mcfg](std::int64_t) { mcfg.w_o_has_bias = false; },
                  "Drop the attention output bias");
    add_train_options(pre, pre_cfg, /*finetune_knobs=*/false);

    TrainConfig ft_cfg = TrainConfig::finetune_defaults();
    std::string ft_base, ft_data, ft_out;
    CLI::App* ft = app.add_subcommand("finetune", "Adapter fine-tuning on id_train");
    ft->add_option("--base", ft_base, "Pretrained checkpoint")->required();
    ft->add_option("--data", ft_data, "Dataset directory")->required();
    ft->add_option("--out", ft_out, "Checkpoint output path")->required();
    add_train_options(ft, ft_cfg, /*finetune_knobs=*/true);

    std::string eval_ckpt, eval_data;
    std::vector<std::string> eval_splits = {"id_test", "ood_test"};
    CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on dataset splits");
    ev->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
    ev->add_option("--data", eval_data, "Dataset directory")->required();
    ev->add_option("--splits", eval_splits, "Comma-separated split names")
        ->delimiter(',')
        ->capture_default_str();

    std::string merge_ckpt, merge_out;
    double merge_alpha = 0.5;
    bool merge_raw = false;
    CLI::App* mg = app.add_subcommand("merge", "Fold adapters into the backbone at strength alpha");
    mg->add_option("--ckpt", merge_ckpt, "Fine-tuned checkpoint with adapters")->required();
    mg->add_option("--out", merge_out, "Merged checkpoint output path")->required();
    mg->add_option("--alpha", merge_alpha, "Re-scaling coefficient")->capture_default_str();
    mg->add_flag("--use-raw", merge_raw, "Merge raw adapter weights instead of EMA shadows");

    std::string sw_base, sw_finetuned, sw_data, sw_out;
    std::vector<double> sw_alphas = {0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<std::string> sw_splits = {"id_test", "ood_test"};
    CLI::App* sw = app.add_subcommand("sweep-alpha", "Evaluate merges across alphas into a CSV");
    sw->add_option("--base", sw_base, "Pretrained checkpoint")->required();
    sw->add_option("--finetuned", sw_finetuned, "Fine-tuned checkpoint with adapters")->required();
    sw->add_option("--data", sw_data, "Dataset directory")->required();
    sw->add_option("--alphas", sw_alphas, "Comma-separated alphas")
        ->delimiter(',')
        ->capture_default_str();
    sw->add_option("--splits", sw_splits, "Comma-separated split names")
        ->delimiter(',')
        ->capture_default_str();
    sw->add_option("--out", sw_out, "CSV output path")->required();

    std::uint64_t gc_seed = 0;
    CLI::App* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
    gc->add_option("--seed", gc_seed, "Suite seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return run_gen_data(spec, gen_out);
        if (pre->parsed()) return run_pretrain(pre_data, pre_out, mcfg, pre_cfg);
        if (ft->parsed()) return run_finetune(ft_base, ft_data, ft_out, ft_cfg);
        if (ev->parsed()) return run_eval(eval_ckpt, eval_data, eval_splits);
        if (mg->parsed()) return run_merge(merge_ckpt, merge_out, merge_alpha, merge_raw);
        if (sw->parsed()) return run_sweep(sw_base, sw_finetuned, sw_data, sw_alphas, sw_splits, sw_out);
        if (gc->parsed()) return run_gradcheck(gc_seed);
        std::cerr << "no subcommand selected\n";
        return kExitUsage;
    } catch (const NonFiniteLossError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const UnitNormError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const DegenerateEmbeddingError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
