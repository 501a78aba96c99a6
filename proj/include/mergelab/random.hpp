#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace mergelab {

// Philox4x32-10 (Salmon et al., SC'11). Stateless: output depends only on
// (key, counter), so any element of a stream can be produced independently.
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    explicit Philox4x32(std::uint64_t key)
        : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)} {}

    Counter operator()(Counter counter) const;

    // Uniform double in [0, 1) with 53 random bits, for stream position `index`.
    double uniform(std::uint64_t index) const;

private:
    Key key_;
};

// Derives the key of a per-tensor random stream from everything that identifies
// it, so masks are reproducible regardless of execution order.
std::uint64_t stream_key(std::uint64_t seed, std::string_view method, std::string_view role,
                         std::string_view tensor_name);

} // namespace mergelab
