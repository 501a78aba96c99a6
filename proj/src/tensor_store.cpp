#include "mergelab/tensor_store.hpp"

#include "mergelab/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>

namespace mergelab {

static_assert(std::endian::native == std::endian::little, "payload decoding assumes a little-endian host");

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;

std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), 8);
}

struct ParsedShard {
    std::map<std::string, TensorMeta> tensors;
    std::map<std::string, std::string> metadata;
    std::uint64_t data_start = 0;
};

ParsedShard parse_shard(const fs::path& file) {
    std::error_code ec;
    const auto file_size = fs::file_size(file, ec);
    if (ec) {
        throw Error(ErrorCode::MissingShard, file.string());
    }
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::IoFailure, "cannot open " + file.string());
    }
    unsigned char len_bytes[8];
    if (file_size < 8 || !in.read(reinterpret_cast<char*>(len_bytes), 8)) {
        throw Error(ErrorCode::MalformedHeader, file.string() + ": truncated header length");
    }
    const std::uint64_t header_len = read_u64_le(len_bytes);
    if (header_len > kMaxHeaderBytes || header_len > file_size - 8) {
        throw Error(ErrorCode::MalformedHeader, file.string() + ": header length out of range");
    }
    std::string header(header_len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
        throw Error(ErrorCode::MalformedHeader, file.string() + ": truncated header");
    }

    // nlohmann keeps the last of duplicated keys; catch duplicates at the top level.
    std::set<std::string> seen;
    std::string duplicate;
    json::parser_callback_t on_event = [&](int depth, json::parse_event_t event, json& parsed) {
        if (event == json::parse_event_t::key && depth == 1) {
            const auto key = parsed.get<std::string>();
            if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
        }
        return true;
    };
    json doc;
    try {
        doc = json::parse(header, on_event);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::MalformedHeader, file.string() + ": " + e.what());
    }
    if (!duplicate.empty()) {
        throw Error(ErrorCode::DuplicateTensor, duplicate);
    }
    if (!doc.is_object()) {
        throw Error(ErrorCode::MalformedHeader, file.string() + ": header is not an object");
    }

    ParsedShard shard;
    shard.data_start = 8 + header_len;
    const std::uint64_t payload_size = file_size - shard.data_start;

    for (const auto& [key, value] : doc.items()) {
        if (key == "__metadata__") {
            if (!value.is_object()) {
                throw Error(ErrorCode::MalformedHeader, "__metadata__ must be an object");
            }
            for (const auto& [mk, mv] : value.items()) {
                shard.metadata[mk] = mv.is_string() ? mv.get<std::string>() : mv.dump();
            }
            continue;
        }
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
            !value.contains("data_offsets")) {
            throw Error(ErrorCode::MalformedHeader, "tensor entry '" + key + "' is incomplete");
        }
        TensorMeta meta;
        meta.name = key;
        const auto& dtype = value["dtype"];
        if (!dtype.is_string()) {
            throw Error(ErrorCode::MalformedHeader, "dtype of '" + key + "' is not a string");
        }
        const auto parsed_dtype = parse_dtype(dtype.get<std::string>());
        if (!parsed_dtype) {
            throw Error(ErrorCode::UnsupportedDtype, key + ": " + dtype.get<std::string>());
        }
        meta.dtype = *parsed_dtype;

        const auto& shape = value["shape"];
        if (!shape.is_array()) {
            throw Error(ErrorCode::MalformedHeader, "shape of '" + key + "' is not an array");
        }
        for (const auto& dim : shape) {
            if (!dim.is_number_integer() || dim.get<std::int64_t>() < 0) {
                throw Error(ErrorCode::MalformedHeader, "shape of '" + key + "' has an invalid dimension");
            }
            meta.shape.push_back(dim.get<std::int64_t>());
        }
        const auto& offsets = value["data_offsets"];
        if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
            !offsets[1].is_number_unsigned()) {
            throw Error(ErrorCode::MalformedHeader, "data_offsets of '" + key + "' malformed");
        }
        meta.byte_range = {offsets[0].get<std::uint64_t>(), offsets[1].get<std::uint64_t>()};
        if (meta.byte_range.end < meta.byte_range.begin) {
            throw Error(ErrorCode::MalformedHeader, "data_offsets of '" + key + "' reversed");
        }
        if (meta.byte_range.size() != meta.nbytes()) {
            throw Error(ErrorCode::MalformedHeader, "byte range of '" + key + "' disagrees with shape/dtype");
        }
        if (meta.byte_range.end > payload_size) {
            throw Error(ErrorCode::OutOfBoundsRange, key);
        }
        shard.tensors.emplace(key, std::move(meta));
    }

    std::vector<const TensorMeta*> by_offset;
    for (const auto& [name, meta] : shard.tensors) {
        if (meta.byte_range.size() > 0) by_offset.push_back(&meta);
    }
    std::sort(by_offset.begin(), by_offset.end(), [](const TensorMeta* a, const TensorMeta* b) {
        return a->byte_range.begin < b->byte_range.begin;
    });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i - 1]->byte_range.end > by_offset[i]->byte_range.begin) {
            throw Error(ErrorCode::OverlappingRanges, by_offset[i - 1]->name + " / " + by_offset[i]->name);
        }
    }
    return shard;
}

void decode_payload(const unsigned char* bytes, Dtype dtype, Eigen::ArrayXf& out) {
    const auto n = out.size();
    switch (dtype) {
        case Dtype::F32:
            std::memcpy(out.data(), bytes, static_cast<std::size_t>(n) * 4);
            break;
        case Dtype::BF16:
            for (Eigen::Index i = 0; i < n; ++i) {
                out[i] = bf16_to_float(static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8)));
            }
            break;
        case Dtype::F16:
            for (Eigen::Index i = 0; i < n; ++i) {
                out[i] = f16_to_float(static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8)));
            }
            break;
    }
}

std::vector<unsigned char> encode_payload(const Eigen::Ref<const Eigen::ArrayXf>& values, Dtype dtype,
                                          const std::string& name) {
    const auto n = values.size();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(n) * byte_width(dtype));
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!std::isfinite(values[i])) {
            throw Error(ErrorCode::CorruptData, "non-finite value in '" + name + "'");
        }
    }
    switch (dtype) {
        case Dtype::F32:
            std::memcpy(bytes.data(), values.data(), bytes.size());
            break;
        case Dtype::BF16:
        case Dtype::F16:
            for (Eigen::Index i = 0; i < n; ++i) {
                const std::uint16_t h = dtype == Dtype::BF16 ? float_to_bf16(values[i]) : float_to_f16(values[i]);
                if ((h & 0x7FFFu) == (dtype == Dtype::BF16 ? 0x7F80u : 0x7C00u)) {
                    throw Error(ErrorCode::CorruptData, "value overflows " + std::string(dtype_name(dtype)) +
                                                            " in '" + name + "'");
                }
                bytes[2 * i] = static_cast<unsigned char>(h & 0xFF);
                bytes[2 * i + 1] = static_cast<unsigned char>(h >> 8);
            }
            break;
    }
    return bytes;
}

std::string shard_file_name(std::size_t index, std::size_t count) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "model-%05zu-of-%05zu.safetensors", index + 1, count);
    return buf;
}

} // namespace

std::string_view role_name(Role role) {
    switch (role) {
        case Role::Base: return "base";
        case Role::Direct: return "direct";
        case Role::Thinking: return "thinking";
        case Role::Merged: return "merged";
    }
    return "merged";
}

std::uint64_t shape_numel(std::span<const std::int64_t> shape) {
    std::uint64_t n = 1;
    for (auto d : shape) n *= static_cast<std::uint64_t>(d);
    return n;
}

std::uint64_t TensorMeta::numel() const { return shape_numel(shape); }

const TensorMeta& Checkpoint::meta(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw Error(ErrorCode::UnknownTensor, name);
    }
    return it->second;
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [name, meta] : tensors_) out.push_back(name);
    return out;
}

std::vector<std::string> Checkpoint::shard_files() const {
    std::vector<std::string> out;
    for (const auto& [file, start] : data_start_) out.push_back(file);
    return out;
}

std::uint64_t Checkpoint::largest_tensor_bytes() const {
    std::uint64_t largest = 0;
    for (const auto& [name, meta] : tensors_) largest = std::max(largest, meta.nbytes());
    return largest;
}

Checkpoint open_checkpoint(const fs::path& path, Role role) {
    Checkpoint ckpt;
    ckpt.role_ = role;
    ckpt.counters_ = std::make_shared<std::atomic<std::uint64_t>>(0);

    std::error_code ec;
    if (!fs::exists(path, ec)) {
        throw Error(ErrorCode::MissingShard, "no such checkpoint: " + path.string());
    }

    if (!fs::is_directory(path)) {
        ckpt.root_ = path.parent_path();
        const std::string file = path.filename().string();
        auto shard = parse_shard(path);
        for (auto& [name, meta] : shard.tensors) {
            ckpt.shards_[name] = file;
            ckpt.param_count_ += meta.numel();
        }
        ckpt.tensors_ = std::move(shard.tensors);
        ckpt.metadata_ = std::move(shard.metadata);
        ckpt.data_start_[file] = shard.data_start;
        return ckpt;
    }

    ckpt.root_ = path;
    const fs::path index_path = path / kShardIndexName;
    if (!fs::exists(index_path)) {
        if (fs::exists(path / kSingleShardName)) {
            auto single = open_checkpoint(path / kSingleShardName, role);
            single.root_ = path;
            return single;
        }
        throw Error(ErrorCode::MissingShard, "directory holds neither " + std::string(kShardIndexName) +
                                                 " nor " + kSingleShardName + ": " + path.string());
    }

    json index;
    {
        std::ifstream in(index_path);
        if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + index_path.string());
        try {
            index = json::parse(in);
        } catch (const json::exception& e) {
            throw Error(ErrorCode::MalformedHeader, index_path.string() + ": " + e.what());
        }
    }
    if (!index.is_object() || !index.contains("weight_map") || !index["weight_map"].is_object()) {
        throw Error(ErrorCode::MalformedHeader, index_path.string() + ": missing weight_map object");
    }
    ckpt.sharded_ = true;

    std::map<std::string, std::string> weight_map;
    std::set<std::string> files;
    for (const auto& [name, file] : index["weight_map"].items()) {
        if (!file.is_string()) {
            throw Error(ErrorCode::MalformedHeader, "weight_map entry for '" + name + "' is not a string");
        }
        weight_map[name] = file.get<std::string>();
        files.insert(file.get<std::string>());
    }

    for (const auto& file : files) {
        const fs::path shard_path = path / file;
        if (!fs::exists(shard_path)) {
            throw Error(ErrorCode::MissingShard, shard_path.string());
        }
        auto shard = parse_shard(shard_path);
        ckpt.data_start_[file] = shard.data_start;
        for (auto& [k, v] : shard.metadata) ckpt.metadata_.emplace(k, v);
        for (auto& [name, meta] : shard.tensors) {
            if (ckpt.tensors_.count(name)) {
                throw Error(ErrorCode::DuplicateTensor, name + " appears in more than one shard");
            }
            auto mapped = weight_map.find(name);
            if (mapped != weight_map.end() && mapped->second != file) {
                throw Error(ErrorCode::MalformedHeader,
                            "index maps '" + name + "' to " + mapped->second + " but it lives in " + file);
            }
            ckpt.param_count_ += meta.numel();
            ckpt.shards_[name] = file;
            ckpt.tensors_.emplace(name, std::move(meta));
        }
    }
    for (const auto& [name, file] : weight_map) {
        if (!ckpt.tensors_.count(name)) {
            throw Error(ErrorCode::MalformedHeader, "index lists '" + name + "' but " + file + " does not hold it");
        }
    }
    return ckpt;
}

TensorBuffer load_tensor(const Checkpoint& ckpt, const std::string& name) {
    TensorBuffer buffer;
    buffer.meta = ckpt.meta(name);
    const std::string& file = ckpt.shards_.at(name);
    const fs::path shard_path = ckpt.root_ / file;

    const auto nbytes = buffer.meta.byte_range.size();
    std::vector<unsigned char> bytes(nbytes);
    if (nbytes > 0) {
        std::ifstream in(shard_path, std::ios::binary);
        if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + shard_path.string());
        in.seekg(static_cast<std::streamoff>(ckpt.data_start_.at(file) + buffer.meta.byte_range.begin));
        if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(nbytes))) {
            throw Error(ErrorCode::IoFailure, "short read of '" + name + "' from " + shard_path.string());
        }
        ckpt.counters_->fetch_add(nbytes, std::memory_order_relaxed);
    }

    buffer.values.resize(static_cast<Eigen::Index>(buffer.meta.numel()));
    decode_payload(bytes.data(), buffer.meta.dtype, buffer.values);
    if (!buffer.values.allFinite()) {
        throw Error(ErrorCode::CorruptData, "non-finite payload in '" + name + "'");
    }
    return buffer;
}

CheckpointWriter::CheckpointWriter(fs::path out_path, std::vector<TensorSpec> layout,
                                   std::uint64_t shard_limit_bytes, std::map<std::string, std::string> metadata)
    : out_path_(std::move(out_path)) {
    std::sort(layout.begin(), layout.end(), [](const TensorSpec& a, const TensorSpec& b) { return a.name < b.name; });
    for (std::size_t i = 1; i < layout.size(); ++i) {
        if (layout[i - 1].name == layout[i].name) {
            throw Error(ErrorCode::DuplicateTensor, layout[i].name);
        }
    }

    // greedy sequential packing in name order
    std::vector<std::vector<std::size_t>> groups(1);
    std::uint64_t used = 0;
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto nbytes = layout[i].nbytes();
        if (nbytes > shard_limit_bytes) {
            throw Error(ErrorCode::TensorTooLarge,
                        layout[i].name + " needs " + std::to_string(nbytes) + " bytes, shard limit is " +
                            std::to_string(shard_limit_bytes));
        }
        if (!groups.back().empty() && used + nbytes > shard_limit_bytes) {
            groups.emplace_back();
            used = 0;
        }
        groups.back().push_back(i);
        used += nbytes;
    }

    const bool single_file = out_path_.extension() == ".safetensors";
    if (single_file && groups.size() > 1) {
        throw Error(ErrorCode::InvalidParameter,
                    "output " + out_path_.string() + " is a single file but the layout needs " +
                        std::to_string(groups.size()) + " shards");
    }
    dir_ = single_file ? out_path_.parent_path() : out_path_;
    if (dir_.empty()) dir_ = ".";
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir_.string() + ": " + ec.message());

    for (std::size_t s = 0; s < groups.size(); ++s) {
        Shard shard;
        shard.file_name = single_file ? out_path_.filename().string()
                          : groups.size() == 1 ? std::string(kSingleShardName)
                                               : shard_file_name(s, groups.size());
        shard.partial_path = dir_ / (shard.file_name + ".partial");

        json header = json::object();
        if (!metadata.empty()) header["__metadata__"] = metadata;
        std::uint64_t offset = 0;
        std::vector<Slot> slots;
        for (auto i : groups[s]) {
            Slot slot;
            slot.spec = layout[i];
            slot.shard = s;
            slot.range = {offset, offset + layout[i].nbytes()};
            offset = slot.range.end;
            header[slot.spec.name] = {{"dtype", std::string(dtype_name(slot.spec.dtype))},
                                      {"shape", slot.spec.shape},
                                      {"data_offsets", {slot.range.begin, slot.range.end}}};
            slots.push_back(std::move(slot));
        }
        std::string text = header.dump();
        text.append((8 - text.size() % 8) % 8, ' ');
        shard.data_start = 8 + text.size();

        shard.stream.open(shard.partial_path, std::ios::binary | std::ios::in | std::ios::out | std::ios::trunc);
        if (!shard.stream) throw Error(ErrorCode::IoFailure, "cannot create " + shard.partial_path.string());
        write_u64_le(shard.stream, text.size());
        shard.stream.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!shard.stream) throw Error(ErrorCode::IoFailure, "write failed: " + shard.partial_path.string());

        for (auto& slot : slots) slots_.emplace(slot.spec.name, std::move(slot));
        shards_.push_back(std::move(shard));
    }
}

CheckpointWriter::~CheckpointWriter() {
    if (finished_) return;
    for (auto& shard : shards_) {
        shard.stream.close();
        std::error_code ec;
        fs::remove(shard.partial_path, ec);
    }
}

void CheckpointWriter::write(const std::string& name, const Eigen::Ref<const Eigen::ArrayXf>& values) {
    auto it = slots_.find(name);
    if (it == slots_.end()) {
        throw Error(ErrorCode::UnknownTensor, name + " is not part of the output layout");
    }
    Slot& slot = it->second;
    if (static_cast<std::uint64_t>(values.size()) != shape_numel(slot.spec.shape)) {
        throw Error(ErrorCode::ShapeMismatch, name + ": element count disagrees with declared shape");
    }
    const auto bytes = encode_payload(values, slot.spec.dtype, name);

    std::lock_guard lock(mutex_);
    if (slot.written) {
        throw Error(ErrorCode::DuplicateTensor, name + " written twice");
    }
    Shard& shard = shards_[slot.shard];
    shard.stream.seekp(static_cast<std::streamoff>(shard.data_start + slot.range.begin));
    shard.stream.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!shard.stream) {
        throw Error(ErrorCode::IoFailure, "write failed: " + shard.partial_path.string());
    }
    slot.written = true;
}

Checkpoint CheckpointWriter::finish(Role role) {
    std::lock_guard lock(mutex_);
    for (const auto& [name, slot] : slots_) {
        if (!slot.written) throw Error(ErrorCode::InvalidParameter, "tensor '" + name + "' was never written");
    }
    for (auto& shard : shards_) {
        shard.stream.flush();
        if (!shard.stream) throw Error(ErrorCode::IoFailure, "flush failed: " + shard.partial_path.string());
        shard.stream.close();
        std::error_code ec;
        fs::rename(shard.partial_path, dir_ / shard.file_name, ec);
        if (ec) throw Error(ErrorCode::IoFailure, "rename failed: " + ec.message());
    }
    if (shards_.size() > 1) {
        std::uint64_t total = 0;
        json weight_map = json::object();
        for (const auto& [name, slot] : slots_) {
            weight_map[name] = shards_[slot.shard].file_name;
            total += slot.range.size();
        }
        json index = {{"metadata", {{"total_size", total}}}, {"weight_map", weight_map}};
        const fs::path index_path = dir_ / kShardIndexName;
        const fs::path tmp = dir_ / (std::string(kShardIndexName) + ".partial");
        {
            std::ofstream out(tmp);
            out << index.dump(2) << '\n';
            if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
        }
        std::error_code ec;
        fs::rename(tmp, index_path, ec);
        if (ec) throw Error(ErrorCode::IoFailure, "rename failed: " + ec.message());
    } else {
        // a stale index from an earlier sharded write would shadow the single shard
        std::error_code ec;
        fs::remove(dir_ / kShardIndexName, ec);
    }
    finished_ = true;
    const bool single_file = out_path_.extension() == ".safetensors";
    return open_checkpoint(single_file ? out_path_ : dir_, role);
}

Checkpoint write_checkpoint(std::span<const TensorBuffer> tensors, const fs::path& out_path,
                            const std::map<std::string, Dtype>& target_dtypes, std::uint64_t shard_limit_bytes,
                            Role role) {
    std::vector<TensorSpec> layout;
    layout.reserve(tensors.size());
    for (const auto& t : tensors) {
        auto it = target_dtypes.find(t.meta.name);
        layout.push_back({t.meta.name, it != target_dtypes.end() ? it->second : t.meta.dtype, t.meta.shape});
    }
    CheckpointWriter writer(out_path, std::move(layout), shard_limit_bytes);
    for (const auto& t : tensors) writer.write(t.meta.name, t.values);
    return writer.finish(role);
}

} // namespace mergelab
