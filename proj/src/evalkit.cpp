#include "radapter/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "radapter/numerics.hpp"
#include "radapter/trainer.hpp"

namespace radapter {

namespace {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

Tensor2D class_prototypes(const EncoderConfig& txt_cfg, const EncoderWeights& txt,
                          const AdapterStack* txt_adapters, const TaskSpec& spec,
                          std::size_t n_classes) {
    if (n_classes < 1) throw std::invalid_argument("class_prototypes: need at least one class");
    Tensor2D mean(n_classes, txt_cfg.embed_dim);
    for (std::size_t c = 0; c < n_classes; ++c) {
        for (std::size_t t = 0; t < spec.n_templates; ++t) {
            const std::vector<int> tokens =
                render_text(static_cast<int>(c), static_cast<int>(t), spec);
            const EncodeResult res =
                encode(tokens, txt_cfg, txt, txt_adapters, RunMode::eval, nullptr);
            for (std::size_t j = 0; j < txt_cfg.embed_dim; ++j) {
                mean(c, j) += res.embedding(0, j) / static_cast<double>(spec.n_templates);
            }
        }
    }
    return l2_normalize_rows(mean);
}

double classify_accuracy(const EncoderConfig& img_cfg, const EncoderWeights& img,
                         const AdapterStack* img_adapters,
                         const std::vector<PairRecord>& records, const Tensor2D& prototypes) {
    if (records.empty()) throw std::invalid_argument("classify_accuracy: empty record set");
    if (prototypes.cols() != img_cfg.embed_dim) {
        throw ShapeError("classify_accuracy: prototype width " +
                         std::to_string(prototypes.cols()) + " vs embed_dim " +
                         std::to_string(img_cfg.embed_dim));
    }
    std::size_t correct = 0;
    for (const PairRecord& rec : records) {
        const EncodeResult res =
            encode(rec.img_tokens, img_cfg, img, img_adapters, RunMode::eval, nullptr);
        std::size_t best = 0;
        double best_score = -2.0;
        for (std::size_t c = 0; c < prototypes.rows(); ++c) {
            double score = 0.0;
            for (std::size_t j = 0; j < prototypes.cols(); ++j) {
                score += res.embedding(0, j) * prototypes(c, j);
            }
            if (score > best_score) {
                best_score = score;
                best = c;
            }
        }
        if (static_cast<std::size_t>(rec.class_id) == best) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

double recall_at_k(const Tensor2D& queries, const Tensor2D& gallery,
                   const std::vector<std::vector<std::size_t>>& positives, std::size_t k) {
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
    if (k > gallery.rows()) {
        throw std::invalid_argument("recall_at_k: k = " + std::to_string(k) +
                                    " exceeds gallery size " + std::to_string(gallery.rows()));
    }
    if (queries.cols() != gallery.cols()) {
        throw ShapeError("recall_at_k: query width " + queries.shape_str() + " vs gallery " +
                         gallery.shape_str());
    }
    if (positives.size() != queries.rows()) {
        throw std::invalid_argument("recall_at_k: positives list does not match query count");
    }

    const Tensor2D scores = matmul_nt(queries, gallery);
    std::size_t hits = 0;
    std::vector<std::size_t> order(gallery.rows());
    for (std::size_t q = 0; q < queries.rows(); ++q) {
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                          order.end(), [&](std::size_t a, std::size_t b) {
                              if (scores(q, a) != scores(q, b)) {
                                  return scores(q, a) > scores(q, b);
                              }
                              return a < b;
                          });
        bool hit = false;
        for (std::size_t i = 0; i < k && !hit; ++i) {
            hit = std::find(positives[q].begin(), positives[q].end(), order[i]) !=
                  positives[q].end();
        }
        if (hit) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(queries.rows());
}

SplitMetrics evaluate_checkpoint(const Checkpoint& ckpt, const std::vector<PairRecord>& records,
                                 const TaskSpec& spec) {
    if (records.empty()) throw std::invalid_argument("evaluate_checkpoint: empty record set");
    ModelState model = model_from_checkpoint(ckpt);
    const AdapterStack* img_adp = model.img_adapters.empty() ? nullptr : &model.img_adapters;
    const AdapterStack* txt_adp = model.txt_adapters.empty() ? nullptr : &model.txt_adapters;

    const Tensor2D protos =
        class_prototypes(model.txt_cfg, model.txt, txt_adp, spec, spec.n_classes_task);

    SplitMetrics metrics;
    metrics.accuracy =
        classify_accuracy(model.img_cfg, model.img, img_adp, records, protos);

    std::vector<std::vector<int>> img_tokens, txt_tokens;
    img_tokens.reserve(records.size());
    txt_tokens.reserve(records.size());
    std::vector<std::vector<std::size_t>> positives(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        img_tokens.push_back(records[i].img_tokens);
        txt_tokens.push_back(records[i].txt_tokens);
        for (std::size_t j = 0; j < records.size(); ++j) {
            if (records[j].class_id == records[i].class_id) positives[i].push_back(j);
        }
    }
    const Tensor2D f = encode_batch(img_tokens, model.img_cfg, model.img, img_adp,
                                    RunMode::eval, nullptr, nullptr);
    const Tensor2D g = encode_batch(txt_tokens, model.txt_cfg, model.txt, txt_adp,
                                    RunMode::eval, nullptr, nullptr);
    metrics.recall1 = recall_at_k(f, g, positives, 1);
    return metrics;
}

EvalReport alpha_sweep(const Checkpoint& base, const Checkpoint& finetuned,
                       const std::vector<double>& alphas,
                       const std::vector<SplitRecords>& splits, const TaskSpec& spec) {
    auto same_cfg = [](const EncoderConfig& a, const EncoderConfig& b) {
        return a.d == b.d && a.heads == b.heads && a.layers == b.layers &&
               a.seq_len == b.seq_len && a.vocab_size == b.vocab_size &&
               a.embed_dim == b.embed_dim && a.w_o_has_bias == b.w_o_has_bias;
    };
    if (!same_cfg(base.img_cfg, finetuned.img_cfg) ||
        !same_cfg(base.txt_cfg, finetuned.txt_cfg)) {
        throw std::invalid_argument("alpha_sweep: checkpoint architectures differ");
    }
    if (!finetuned.has_adapters()) {
        throw MissingTensorError("alpha_sweep: fine-tuned checkpoint has no adapters");
    }

    EvalReport report;
    for (const double alpha : alphas) {
        const Checkpoint merged = merge_checkpoint(finetuned, alpha, /*use_raw=*/false);
        for (const SplitRecords& split : splits) {
            if (split.records == nullptr) {
                throw std::invalid_argument("alpha_sweep: null record set for split " +
                                            split.name);
            }
            const SplitMetrics m = evaluate_checkpoint(merged, *split.records, spec);
            report.rows.push_back(EvalRow{alpha, split.name, "accuracy", m.accuracy,
                                          finetuned.prov.seed, finetuned.prov.config_hash});
            report.rows.push_back(EvalRow{alpha, split.name, "recall@1", m.recall1,
                                          finetuned.prov.seed, finetuned.prov.config_hash});
        }
    }
    return report;
}

std::string report_to_csv(const EvalReport& report) {
    std::string out = "alpha,split,metric,value,seed,config_hash\n";
    for (const EvalRow& row : report.rows) {
        out += format_double(row.alpha);
        out += ',';
        out += row.split;
        out += ',';
        out += row.metric;
        out += ',';
        out += format_double(row.value);
        out += ',';
        out += std::to_string(row.seed);
        out += ',';
        out += std::to_string(row.config_hash);
        out += '\n';
    }
    return out;
}

void write_csv(const std::filesystem::path& path, const EvalReport& report) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << report_to_csv(report);
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace radapter
