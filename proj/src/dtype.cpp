#include "mergelab/dtype.hpp"

#include <bit>
#include <cmath>

namespace mergelab {

std::string_view dtype_name(Dtype dtype) {
    switch (dtype) {
        case Dtype::BF16: return "BF16";
        case Dtype::F16: return "F16";
        case Dtype::F32: return "F32";
    }
    return "F32";
}

std::optional<Dtype> parse_dtype(std::string_view name) {
    if (name == "BF16") return Dtype::BF16;
    if (name == "F16") return Dtype::F16;
    if (name == "F32") return Dtype::F32;
    return std::nullopt;
}

float bf16_to_float(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t float_to_bf16(float value) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    if (std::isnan(value)) {
        // keep sign, force a quiet NaN payload
        return static_cast<std::uint16_t>((bits >> 16) | 0x0040u);
    }
    const std::uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    return static_cast<std::uint16_t>(bits >> 16);
}

float f16_to_float(std::uint16_t bits) {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
    const std::uint32_t exponent = (bits >> 10) & 0x1Fu;
    std::uint32_t mantissa = bits & 0x3FFu;

    if (exponent == 0x1F) {
        return std::bit_cast<float>(sign | 0x7F800000u | (mantissa << 13));
    }
    if (exponent == 0) {
        if (mantissa == 0) {
            return std::bit_cast<float>(sign);
        }
        // subnormal: value = mantissa * 2^-24, exact in float
        const float magnitude = std::ldexp(static_cast<float>(mantissa), -24);
        return sign ? -magnitude : magnitude;
    }
    return std::bit_cast<float>(sign | ((exponent + 112u) << 23) | (mantissa << 13));
}

std::uint16_t float_to_f16(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t abs_bits = bits & 0x7FFFFFFFu;

    if (abs_bits > 0x7F800000u) {
        return static_cast<std::uint16_t>(sign | 0x7E00u);
    }
    if (abs_bits >= 0x477FF000u) {
        // at or beyond the halfway point above 65504: rounds to Inf
        return static_cast<std::uint16_t>(sign | 0x7C00u);
    }

    const std::int32_t exponent = static_cast<std::int32_t>(abs_bits >> 23) - 127;
    if (exponent < -14) {
        // subnormal or zero in half precision: quantum is 2^-24
        const float magnitude = std::bit_cast<float>(abs_bits);
        const float scaled = std::ldexp(magnitude, 24);
        // nearbyint honours the default round-to-nearest-even mode
        const auto mantissa = static_cast<std::uint32_t>(std::nearbyint(scaled));
        return static_cast<std::uint16_t>(sign | mantissa);
    }

    std::uint32_t mantissa = abs_bits & 0x7FFFFFu;
    std::uint32_t half = (static_cast<std::uint32_t>(exponent + 15) << 10) | (mantissa >> 13);
    const std::uint32_t remainder = mantissa & 0x1FFFu;
    if (remainder > 0x1000u || (remainder == 0x1000u && (half & 1u))) {
        ++half; // carries into the exponent correctly, including up to Inf
    }
    return static_cast<std::uint16_t>(sign | half);
}

float round_to_dtype(float value, Dtype dtype) {
    switch (dtype) {
        case Dtype::BF16: return bf16_to_float(float_to_bf16(value));
        case Dtype::F16: return f16_to_float(float_to_f16(value));
        case Dtype::F32: return value;
    }
    return value;
}

} // namespace mergelab
