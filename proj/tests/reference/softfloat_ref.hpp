#pragma once

// Bit-manipulation reference conversions for fp16 / bf16, written directly on
// IEEE-754 encodings. Test-only; shares no code with the library rounding path.

#include <bit>
#include <cmath>
#include <cstdint>

namespace ref {

inline float bf16_round(float x) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    const std::uint32_t abs = bits & 0x7FFFFFFFu;
    if (abs >= 0x7F800000u) return x;  // inf / nan
    const std::uint32_t sign = bits & 0x80000000u;
    std::uint32_t r = abs + 0x7FFFu + ((abs >> 16) & 1u);
    r &= 0xFFFF0000u;
    if (r >= 0x7F800000u) r = 0x7F7F0000u;  // saturate to max finite
    return std::bit_cast<float>(sign | r);
}

inline std::uint16_t fp16_bits(float x) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
    const std::uint32_t sign = (bits >> 16) & 0x8000u;
    const std::uint32_t abs = bits & 0x7FFFFFFFu;
    std::uint32_t h;
    if (abs < 0x38800000u) {  // below 2^-14: half subnormal or zero
        if (abs <= 0x33000000u) {
            h = 0;
        } else {
            const std::uint32_t exp = abs >> 23;
            const std::uint32_t mant = (abs & 0x7FFFFFu) | 0x800000u;
            const std::uint32_t shift = 126u - exp;
            h = mant >> shift;
            const std::uint32_t rem = mant & ((1u << shift) - 1u);
            const std::uint32_t half = 1u << (shift - 1u);
            if (rem > half || (rem == half && (h & 1u))) ++h;
        }
    } else {
        h = (abs >> 13) - (112u << 10);
        const std::uint32_t rem = abs & 0x1FFFu;
        if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
        if (h >= 0x7C00u) h = 0x7BFFu;
    }
    return static_cast<std::uint16_t>(sign | h);
}

inline float fp16_decode(std::uint16_t h) {
    const std::uint32_t sign = (h >> 15) & 1u;
    const std::uint32_t e = (h >> 10) & 0x1Fu;
    const std::uint32_t m = h & 0x3FFu;
    std::uint32_t out;
    if (e == 0) {
        if (m == 0) {
            out = sign << 31;
        } else {
            // normalise the subnormal mantissa
            std::uint32_t mm = m;
            int shift = 0;
            while (!(mm & 0x400u)) {
                mm <<= 1;
                ++shift;
            }
            out = (sign << 31) | ((113u - static_cast<std::uint32_t>(shift)) << 23) | ((mm & 0x3FFu) << 13);
        }
    } else {
        out = (sign << 31) | ((e + 112u) << 23) | (m << 13);
    }
    return std::bit_cast<float>(out);
}

inline float fp16_round(float x) {
    if (!std::isfinite(x)) return x;
    return fp16_decode(fp16_bits(x));
}

}  // namespace ref
