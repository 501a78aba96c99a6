#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace mergelab {

// Incremental SHA-256.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(Sha256&&) noexcept;
    Sha256& operator=(Sha256&&) noexcept;

    void update(std::span<const unsigned char> bytes);
    void update(std::string_view text);
    std::string hex_digest();

private:
    struct State;
    std::unique_ptr<State> state_;
};

std::string sha256_hex(std::string_view text);
std::string file_sha256(const std::filesystem::path& file);

// Hash over every shard file of the checkpoint at `path` (header + payload),
// shards taken in file-name order.
std::string checkpoint_digest(const std::filesystem::path& path);

} // namespace mergelab
