#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace mergelab {

enum class Dtype { BF16, F16, F32 };

constexpr std::size_t byte_width(Dtype dtype) {
    return dtype == Dtype::F32 ? 4 : 2;
}

std::string_view dtype_name(Dtype dtype);
std::optional<Dtype> parse_dtype(std::string_view name);

// Widening is exact for both half formats.
float bf16_to_float(std::uint16_t bits);
float f16_to_float(std::uint16_t bits);

// Narrowing rounds to nearest, ties to even. NaN stays NaN, overflow saturates to Inf.
std::uint16_t float_to_bf16(float value);
std::uint16_t float_to_f16(float value);

// Value after a round trip through `dtype` storage.
float round_to_dtype(float value, Dtype dtype);

} // namespace mergelab
