#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "radapter/checkpoint.hpp"
#include "radapter/encoder.hpp"
#include "radapter/synthdata.hpp"

namespace radapter {

// Prompt-ensemble classifier weights: for each class, the text tower encodes
// every template, the unit embeddings are averaged and re-normalized.
Tensor2D class_prototypes(const EncoderConfig& txt_cfg, const EncoderWeights& txt,
                          const AdapterStack* txt_adapters, const TaskSpec& spec,
                          std::size_t n_classes);

// Argmax-cosine classification; ties go to the lowest class index.
double classify_accuracy(const EncoderConfig& img_cfg, const EncoderWeights& img,
                         const AdapterStack* img_adapters,
                         const std::vector<PairRecord>& records, const Tensor2D& prototypes);

// Fraction of queries whose k best-scoring gallery rows (cosine, ties by
// lower original index) contain at least one positive.
double recall_at_k(const Tensor2D& queries, const Tensor2D& gallery,
                   const std::vector<std::vector<std::size_t>>& positives, std::size_t k);

struct SplitMetrics {
    double accuracy = 0.0;
    double recall1 = 0.0;
};

// Classification accuracy against prompt-ensemble prototypes plus image-to-
// text recall@1 over the split's own records (same-class texts count as
// positives). Adapters, when present in the checkpoint, run in eval mode.
SplitMetrics evaluate_checkpoint(const Checkpoint& ckpt, const std::vector<PairRecord>& records,
                                 const TaskSpec& spec);

struct EvalRow {
    double alpha = 0.0;
    std::string split;
    std::string metric;
    double value = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
};

struct SplitRecords {
    std::string name;
    const std::vector<PairRecord>* records = nullptr;
};

// For each alpha: merge the fine-tuned checkpoint at that strength (same
// path as merge_checkpoint, so the metrics agree exactly) and evaluate every
// split. Row order: alpha, then split, then metric.
EvalReport alpha_sweep(const Checkpoint& base, const Checkpoint& finetuned,
                       const std::vector<double>& alphas,
                       const std::vector<SplitRecords>& splits, const TaskSpec& spec);

// Header alpha,split,metric,value,seed,config_hash; floats carry 6
// fractional digits.
std::string report_to_csv(const EvalReport& report);
void write_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace radapter
