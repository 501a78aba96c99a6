#pragma once

// Test-only helpers: a raw container builder that assembles header bytes by
// hand (independent of CheckpointWriter) and scratch-directory management.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace fixture {

namespace fs = std::filesystem;

struct RawTensor {
    std::string name;
    std::string dtype; // "F32", "BF16", "F16"
    std::vector<std::int64_t> shape;
    std::vector<unsigned char> bytes;
};

inline std::vector<unsigned char> f32_bytes(const std::vector<float>& v) {
    std::vector<unsigned char> out(v.size() * 4);
    std::memcpy(out.data(), v.data(), out.size());
    return out;
}

inline std::vector<unsigned char> u16_bytes(const std::vector<std::uint16_t>& v) {
    std::vector<unsigned char> out;
    for (auto h : v) {
        out.push_back(static_cast<unsigned char>(h & 0xFF));
        out.push_back(static_cast<unsigned char>(h >> 8));
    }
    return out;
}

// Writes tensors back to back; `header_override` replaces the generated JSON.
inline void write_raw(const fs::path& file, const std::vector<RawTensor>& tensors,
                      const std::string& header_override = {}) {
    std::string header = "{";
    std::vector<unsigned char> payload;
    bool first = true;
    for (const auto& t : tensors) {
        const auto begin = payload.size();
        payload.insert(payload.end(), t.bytes.begin(), t.bytes.end());
        if (!first) header += ",";
        first = false;
        header += "\"" + t.name + "\":{\"dtype\":\"" + t.dtype + "\",\"shape\":[";
        for (std::size_t i = 0; i < t.shape.size(); ++i) {
            header += (i ? "," : "") + std::to_string(t.shape[i]);
        }
        header += "],\"data_offsets\":[" + std::to_string(begin) + "," + std::to_string(payload.size()) + "]}";
    }
    header += "}";
    if (!header_override.empty()) header = header_override;

    std::ofstream out(file, std::ios::binary);
    const std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((n >> (8 * i)) & 0xFF));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

inline void write_text(const fs::path& file, const std::string& text) {
    std::ofstream out(file);
    out << text;
}

// Fresh scratch directory removed on destruction.
class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag) {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("mergelab_" + tag + "_" + std::to_string(rd()));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

} // namespace fixture
