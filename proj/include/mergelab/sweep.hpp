#pragma once

#include "mergelab/merge.hpp"
#include "mergelab/tensor_store.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mergelab {

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr const char* kManifestName = "sweep_manifest.json";

// Which parent's non-tensor files (tokenizer, config, chat template) accompany merged outputs.
enum class SidecarSource { Thinking, Direct, None };

std::string strength_label(double strength); // four decimals, e.g. "0.6500"

std::string_view dtype_policy_name(DtypePolicy policy);
DtypePolicy parse_dtype_policy(std::string_view name);
std::string_view sidecar_source_name(SidecarSource source);
SidecarSource parse_sidecar_source(std::string_view name);

nlohmann::json recipe_to_json(const MergeRecipe& recipe);

// ---------------------------------------------------------------------------
// Whole-checkpoint merge: one recipe applied to aligned parents, streamed tensor
// by tensor into a new checkpoint.

struct MergeRunOptions {
    DtypePolicy dtype_policy = DtypePolicy::PreserveSource;
    std::uint64_t shard_limit_bytes = std::uint64_t{5} << 30;
    int workers = 1;
};

struct MergeRunResult {
    Checkpoint checkpoint;
    std::size_t tensor_count = 0;
    std::vector<TensorMergeDiagnostic> diagnostics; // SLERP only, name order
};

// Throws TensorSetMismatch unless the parents hold the same names and shapes.
void require_aligned(const Checkpoint& direct, const Checkpoint& think, const Checkpoint* base);

// One cutoff list per tensor name, each ranking that tensor's selection
// magnitudes against every entry of the checkpoint (checkpoint-wide top-k).
// Found by a radix select that streams the parents once per 16-bit digit.
std::map<std::string, std::vector<TopKCutoff>> global_cutoffs(const MergeRecipe& recipe, const Checkpoint& direct,
                                                              const Checkpoint& think, const Checkpoint* base,
                                                              int workers = 1);

// Output dtypes follow the thinking parent under PreserveSource.
MergeRunResult merge_checkpoints(const MergeRecipe& recipe, const Checkpoint& direct, const Checkpoint& think,
                                 const Checkpoint* base, const std::filesystem::path& out,
                                 const MergeRunOptions& options = {});

// Copies regular files other than shards and the shard index from `parent`
// (a checkpoint directory) into `out_dir`. Returns the copied file names.
std::vector<std::string> copy_sidecars(const std::filesystem::path& parent, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Sweeps.

struct SweepPlan {
    std::filesystem::path direct;
    std::filesystem::path think;
    std::optional<std::filesystem::path> base;
    std::filesystem::path output_root;
    DtypePolicy dtype_policy = DtypePolicy::PreserveSource;
    SidecarSource sidecars = SidecarSource::Thinking;
    std::uint64_t shard_limit_bytes = std::uint64_t{5} << 30;
    int workers = 1;
    std::vector<MergeRecipe> recipes; // grid-expanded, plan order

    // Hash of everything that determines output bytes (not workers).
    std::string digest() const;
};

// Validates and expands a plan document. Relative paths resolve against
// `base_dir`. Throws SchemaViolation, InvalidPlan, BaseRequired, InvalidParameter
// or IoFailure (a parent path that does not exist).
SweepPlan plan_sweep(const nlohmann::json& config, const std::filesystem::path& base_dir = {});
SweepPlan load_sweep_plan(const std::filesystem::path& file);

// Expands {start, stop, step} into strengths rounded to 1e-10.
std::vector<double> expand_grid(double start, double stop, double step);

enum class EntryStatus { Pending, Done, Failed };
std::string_view status_name(EntryStatus status);

struct ManifestEntry {
    MergeRecipe recipe;
    std::string recipe_digest;
    std::string output_path; // relative to the output root
    std::size_t tensor_count = 0;
    std::string content_digest;
    EntryStatus status = EntryStatus::Pending;
    std::string error;
    std::vector<TensorMergeDiagnostic> diagnostics;
};

struct SweepManifest {
    std::string toolkit_version = kToolkitVersion;
    std::string plan_digest;
    std::vector<ManifestEntry> entries;
};

nlohmann::json to_json(const SweepManifest& manifest);
SweepManifest manifest_from_json(const nlohmann::json& doc);
std::optional<SweepManifest> read_manifest(const std::filesystem::path& output_root);

struct SweepOptions {
    // A Done entry whose output no longer matches its recorded digest is
    // rebuilt instead of raising DigestMismatch.
    bool rebuild_mismatched = false;
    // Called after each entry is recorded; an exception thrown here stops the
    // sweep with the manifest already persisted.
    std::function<void(const ManifestEntry&)> after_entry;
};

struct SweepRun {
    SweepManifest manifest;
    std::size_t merges_executed = 0;
    std::size_t entries_skipped = 0;
    std::size_t entries_failed = 0;
};

// Entries run sequentially; tensors within an entry run on plan.workers
// threads. The manifest is rewritten atomically after every entry.
SweepRun execute_sweep(const SweepPlan& plan, const SweepOptions& options = {});

} // namespace mergelab
