#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "radapter/loss.hpp"
#include "radapter/rng.hpp"
#include "radapter/tensor.hpp"

namespace radapter {

// Malformed dataset files or requests the record set cannot satisfy.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Synthetic two-modality benchmark: latent class prototypes rendered into
// image tokens through a per-style projection, paired with template-prefixed
// text tokens. Distribution shift = style interpolation plus extra noise.
struct TaskSpec {
    std::size_t latent_dim = 16;
    std::size_t n_classes_pretrain = 64;
    std::size_t n_classes_task = 16;  // task classes are ids [0, n_classes_task)
    std::size_t n_templates = 4;
    std::size_t img_seq_len = 16;
    std::size_t txt_seq_len = 16;
    std::size_t img_vocab = 64;
    std::size_t txt_vocab = 64;
    double noise_std_id = 0.25;
    double noise_std_ood = 0.5;
    double style_mix = 0.5;  // s: rendering shift strength of the OOD style
    std::uint64_t seed = 0;
    std::size_t pretrain_size = 8192;
    std::size_t id_train_size = 2048;
    std::size_t id_test_size = 512;
    std::size_t ood_test_size = 512;

    void validate() const;

    // Text layout: token 0 pads, templates own 4-token prefixes starting at
    // 1, class ids are 3 digits in the remaining alphabet.
    std::size_t class_token_base() const { return 1 + 4 * n_templates; }
    std::size_t class_digit_alphabet() const { return txt_vocab - class_token_base(); }
};

inline constexpr std::size_t kTemplatePrefixLen = 4;
inline constexpr std::size_t kClassDigits = 3;

enum class StyleTag { pre, id, ood };

std::string to_string(StyleTag tag);
StyleTag style_tag_from_string(const std::string& s);

struct PairRecord {
    int class_id = 0;
    int template_id = 0;
    StyleTag style = StyleTag::id;
    std::vector<int> img_tokens;
    std::vector<int> txt_tokens;
};

struct RenderStyle {
    Tensor2D projection;  // latent_dim x img_seq_len, unit rows
    double noise_std = 0.0;
    std::vector<double> bin_edges;  // img_vocab - 1, strictly increasing
};

// Quantile of the standard normal, p in (0, 1).
double normal_quantile(double p);

// Equal-probability quantization edges for a standard normal.
std::vector<double> standard_bin_edges(std::size_t vocab);

// Mean pairwise cosine targeted inside the task-class family. The task is
// fine-grained on purpose: spreading its classes near-orthogonally saturates
// every training arm and the benchmark stops resolving differences.
inline constexpr double kTaskConeCos = 0.7;

// Mean cosine between instance variants of one class. Each (class, template)
// pair renders from its own latent offset of the class prototype, the way
// photographs of one category differ systematically by instance. Identity
// labels treat in-batch instance pairs of a class as negatives, so this is
// the structure that separates the label schemes.
inline constexpr double kInstanceCos = 0.9;

// Unit-row Gaussian prototypes with pairwise cosine < 0.9; colliding rows are
// resampled, at most 100 attempts each. The first n_classes_task rows cluster
// around a shared direction (see kTaskConeCos); the remaining pretraining
// classes spread freely.
Tensor2D gen_prototypes(const TaskSpec& spec, SeededRng& rng);

// The two anchor styles and their interpolation. mix = 0 is the ID style's
// projection; rows are re-normalized after interpolation.
struct StylePair {
    Tensor2D base;  // latent_dim x img_seq_len, unit rows
    Tensor2D alt;
};

StylePair gen_style_pair(const TaskSpec& spec);
RenderStyle make_style(const StylePair& styles, double mix, double noise_std,
                       const TaskSpec& spec);

// Deterministic text encoding: template prefix then class digits then pads.
std::vector<int> render_text(int class_id, int template_id, const TaskSpec& spec);

// Image tokens consume exactly img_seq_len gaussians from rng regardless of
// noise_std, so matched streams stay aligned across styles.
PairRecord render_pair(int class_id, int template_id, StyleTag tag, const RenderStyle& style,
                       const Tensor2D& prototypes, const TaskSpec& spec, SeededRng& rng);

struct SplitSet {
    std::vector<PairRecord> pretrain;
    std::vector<PairRecord> id_train;
    std::vector<PairRecord> id_test;
    std::vector<PairRecord> ood_test;
};

// Deterministic per spec. Each record draws from its own stream keyed by
// (seed, split, index); ood_test reuses id_test keys so the two sets differ
// only through the rendering style.
SplitSet gen_split(const TaskSpec& spec);

struct Batch {
    std::vector<std::vector<int>> img_tokens;
    std::vector<std::vector<int>> txt_tokens;
    std::vector<int> class_ids;
    LabelMatrix labels;
};

// Draws batch_size/min_per_class class slots (classes with replacement),
// then min_per_class distinct records per slot, re-sampling each record's
// template uniformly and re-rendering its text.
Batch sample_batch(const std::vector<PairRecord>& records, const TaskSpec& spec,
                   std::size_t batch_size, std::size_t min_per_class, SeededRng& rng);

// One record per line; key order is fixed by the serializer so identical
// record sets produce byte-identical files.
void write_jsonl(const std::filesystem::path& path, const std::vector<PairRecord>& records);
std::vector<PairRecord> read_jsonl(const std::filesystem::path& path);

void write_task_spec(const std::filesystem::path& path, const TaskSpec& spec);
TaskSpec read_task_spec(const std::filesystem::path& path);

// Writes {pretrain,id_train,id_test,ood_test}.jsonl plus task_spec.json.
SplitSet write_split_files(const std::filesystem::path& dir, const TaskSpec& spec);

}  // namespace radapter
