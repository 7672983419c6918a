#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "radapter/encoder.hpp"

namespace radapter {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagicError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct VersionMismatchError : CheckpointError {
    using CheckpointError::CheckpointError;
};
// Declared payload region extends past the bytes actually present.
struct TruncatedPayloadError : CheckpointError {
    using CheckpointError::CheckpointError;
};
// Duplicate names or tensor regions that overlap.
struct OffsetOverlapError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct MissingTensorError : CheckpointError {
    using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[9] = "RADPTCK1";

// 64-bit FNV-1a, used for config hashes in provenance and reports.
std::uint64_t fnv1a64(std::string_view bytes);

struct AdapterMeta {
    std::size_t sites_per_tower = 0;  // 0 = plain backbone checkpoint
    std::size_t rank = 0;             // 0 = full-rank adapters
    double drop_p = 0.0;
    double momentum = 0.999;
};

struct Provenance {
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::optional<std::uint64_t> source_hash;  // hash of the pre-merge file
    std::optional<double> alpha;               // merge strength, if merged
};

// In-memory image of a persisted model pair. Tensor order is the layout
// order in the file payload.
struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    EncoderConfig img_cfg;
    EncoderConfig txt_cfg;
    std::vector<std::pair<std::string, Tensor2D>> tensors;
    AdapterMeta adapter;
    Provenance prov;

    const Tensor2D* find(const std::string& name) const;
    bool has_adapters() const { return adapter.sites_per_tower > 0; }
};

// File layout: magic, u32 LE version, u64 LE header length, UTF-8 text
// header (names, shapes, byte offsets, configs, metadata), f64 LE payload.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& origin);

// Atomic: writes a temp file in the target directory, then renames.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Bridges between the live model structs and the flat tensor table. Tensor
// names carry a tower prefix: img.*, txt.*; adapter sites add
// {prefix}adapter{i}.{w|b|a} and {prefix}adapter{i}.ema_shadow.
struct TowerState {
    EncoderWeights weights;
    AdapterStack adapters;          // empty when the checkpoint has none
    std::vector<Tensor2D> shadows;  // EMA shadows, empty when none
};

Checkpoint make_checkpoint(const EncoderConfig& img_cfg, const TowerState& img,
                           const EncoderConfig& txt_cfg, const TowerState& txt,
                           const AdapterMeta& adapter, const Provenance& prov);

TowerState extract_tower(const Checkpoint& ckpt, const std::string& prefix,
                         const EncoderConfig& cfg);

// Folds every adapter site into its host layer at strength alpha using the
// EMA shadows (or the raw adapter weights when use_raw), yielding an
// adapterless checkpoint with merge provenance.
Checkpoint merge_checkpoint(const Checkpoint& ckpt, double alpha, bool use_raw);

}  // namespace radapter
