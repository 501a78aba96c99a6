#include "mergelab/random.hpp"

namespace mergelab {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& lo, std::uint32_t& hi) {
    const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
    lo = static_cast<std::uint32_t>(product);
    hi = static_cast<std::uint32_t>(product >> 32);
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::uint64_t h, std::string_view text) {
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    // length terminator keeps ("ab","c") and ("a","bc") apart
    h ^= text.size();
    h *= 0x100000001B3ull;
    return h;
}

} // namespace

Philox4x32::Counter Philox4x32::operator()(Counter ctr) const {
    Key key = key_;
    for (int round = 0; round < 10; ++round) {
        std::uint32_t lo0, hi0, lo1, hi1;
        mulhilo(kPhiloxM0, ctr[0], lo0, hi0);
        mulhilo(kPhiloxM1, ctr[2], lo1, hi1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kPhiloxW0;
        key[1] += kPhiloxW1;
    }
    return ctr;
}

double Philox4x32::uniform(std::uint64_t index) const {
    const auto out = (*this)({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0, 0});
    const std::uint64_t bits = (static_cast<std::uint64_t>(out[0]) << 32 | out[1]) >> 11;
    return static_cast<double>(bits) * 0x1.0p-53;
}

std::uint64_t stream_key(std::uint64_t seed, std::string_view method, std::string_view role,
                         std::string_view tensor_name) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    h = fnv1a(h, method);
    h = fnv1a(h, role);
    h = fnv1a(h, tensor_name);
    return splitmix64(splitmix64(seed) ^ h);
}

} // namespace mergelab
