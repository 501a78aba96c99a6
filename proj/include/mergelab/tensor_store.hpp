#pragma once

#include "mergelab/dtype.hpp"

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

namespace mergelab {

enum class Role { Base, Direct, Thinking, Merged };

std::string_view role_name(Role role);

// Output dtype for derived checkpoints: keep each tensor's source dtype, or widen everything to F32.
enum class DtypePolicy { PreserveSource, ForceF32 };

inline constexpr const char* kSingleShardName = "model.safetensors";
inline constexpr const char* kShardIndexName = "model.safetensors.index.json";

// Half-open [begin, end) into the payload that follows the header.
struct ByteRange {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::uint64_t size() const { return end - begin; }
};

struct TensorMeta {
    std::string name;
    Dtype dtype = Dtype::F32;
    std::vector<std::int64_t> shape;
    ByteRange byte_range;

    std::uint64_t numel() const;
    std::uint64_t nbytes() const { return numel() * byte_width(dtype); }
};

std::uint64_t shape_numel(std::span<const std::int64_t> shape);

// A tensor decoded to working precision.
struct TensorBuffer {
    TensorMeta meta;
    Eigen::ArrayXf values;
};

// Parsed metadata of a single-file or sharded container. Payload bytes are read
// lazily by load_tensor; copies share the read accounting.
class Checkpoint {
public:
    Checkpoint() = default;

    const std::map<std::string, TensorMeta>& tensors() const { return tensors_; }
    // tensor name -> shard file name (relative to root())
    const std::map<std::string, std::string>& shards() const { return shards_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    Role role() const { return role_; }
    std::uint64_t param_count() const { return param_count_; }
    const std::filesystem::path& root() const { return root_; }
    bool is_sharded() const { return sharded_; }

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const TensorMeta& meta(const std::string& name) const;
    std::vector<std::string> names() const;
    std::vector<std::string> shard_files() const;
    std::uint64_t largest_tensor_bytes() const;

    // Total payload bytes read through load_tensor since open.
    std::uint64_t payload_bytes_read() const { return counters_ ? counters_->load() : 0; }

private:
    friend Checkpoint open_checkpoint(const std::filesystem::path& path, Role role);
    friend TensorBuffer load_tensor(const Checkpoint& ckpt, const std::string& name);

    std::map<std::string, TensorMeta> tensors_;
    std::map<std::string, std::string> shards_;
    std::map<std::string, std::uint64_t> data_start_; // shard file -> first payload byte
    std::map<std::string, std::string> metadata_;
    std::filesystem::path root_;
    Role role_ = Role::Merged;
    std::uint64_t param_count_ = 0;
    bool sharded_ = false;
    std::shared_ptr<std::atomic<std::uint64_t>> counters_;
};

// `path` is a container file, or a directory holding either a shard index or a
// single model.safetensors.
Checkpoint open_checkpoint(const std::filesystem::path& path, Role role);

// Safe to call concurrently for distinct (or equal) names.
TensorBuffer load_tensor(const Checkpoint& ckpt, const std::string& name);

struct TensorSpec {
    std::string name;
    Dtype dtype = Dtype::F32;
    std::vector<std::int64_t> shape;

    std::uint64_t nbytes() const { return shape_numel(shape) * byte_width(dtype); }
};

// Streams tensors into one or more shards whose layout is fixed up front, so
// tensors may arrive in any order from any thread. Tensors are laid out in name
// order and packed greedily into shards of at most `shard_limit_bytes` payload.
class CheckpointWriter {
public:
    CheckpointWriter(std::filesystem::path out_path, std::vector<TensorSpec> layout,
                     std::uint64_t shard_limit_bytes,
                     std::map<std::string, std::string> metadata = {});
    ~CheckpointWriter();

    CheckpointWriter(const CheckpointWriter&) = delete;
    CheckpointWriter& operator=(const CheckpointWriter&) = delete;

    // Narrows to the declared dtype and writes the payload. Serialized internally.
    void write(const std::string& name, const Eigen::Ref<const Eigen::ArrayXf>& values);

    // Verifies every tensor arrived, moves shards into place and emits the index
    // when more than one shard results.
    Checkpoint finish(Role role);

    std::size_t shard_count() const { return shards_.size(); }

private:
    struct Shard {
        std::string file_name;
        std::filesystem::path partial_path;
        std::uint64_t data_start = 0;
        std::fstream stream;
    };
    struct Slot {
        TensorSpec spec;
        std::size_t shard = 0;
        ByteRange range;
        bool written = false;
    };

    std::filesystem::path out_path_;
    std::filesystem::path dir_;
    std::vector<Shard> shards_;
    std::map<std::string, Slot> slots_;
    std::mutex mutex_;
    bool finished_ = false;
};

// Convenience wrapper around CheckpointWriter. Tensors not named in
// `target_dtypes` keep their source dtype.
Checkpoint write_checkpoint(std::span<const TensorBuffer> tensors, const std::filesystem::path& out_path,
                            const std::map<std::string, Dtype>& target_dtypes,
                            std::uint64_t shard_limit_bytes, Role role = Role::Merged);

} // namespace mergelab
