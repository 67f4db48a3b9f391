#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>

#include "crane/errors.hpp"

namespace crane {

enum class Dtype { F64, F32, F16, BF16 };

inline size_t dtype_width(Dtype d) {
    switch (d) {
        case Dtype::F64: return 8;
        case Dtype::F32: return 4;
        default: return 2;
    }
}

inline const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F64: return "F64";
        case Dtype::F32: return "F32";
        case Dtype::F16: return "F16";
        default: return "BF16";
    }
}

inline Dtype dtype_from_name(const std::string& s) {
    if (s == "F64") return Dtype::F64;
    if (s == "F32") return Dtype::F32;
    if (s == "F16") return Dtype::F16;
    if (s == "BF16") return Dtype::BF16;
    throw ValidationError("unsupported dtype \"" + s + "\"");
}

namespace detail {

// Round an f64 to a binary format with EXP_BITS/MANT_BITS, round-to-nearest-even.
// Single rounding step from the full 52-bit mantissa, so no double-rounding drift.
template <int EXP_BITS, int MANT_BITS>
uint16_t f64_to_small(double x) {
    static_assert(EXP_BITS + MANT_BITS == 15);
    constexpr int bias = (1 << (EXP_BITS - 1)) - 1;
    constexpr uint16_t exp_mask = (1u << EXP_BITS) - 1;
    constexpr uint16_t mant_max = (1u << MANT_BITS);

    const uint64_t bits = std::bit_cast<uint64_t>(x);
    const uint16_t sign = static_cast<uint16_t>((bits >> 63) << 15);
    const int64_t exp = static_cast<int64_t>((bits >> 52) & 0x7FF);
    const uint64_t frac = bits & 0xFFFFFFFFFFFFFull;

    if (exp == 0x7FF) {
        if (frac != 0) return static_cast<uint16_t>(sign | (exp_mask << MANT_BITS) | (1u << (MANT_BITS - 1)));
        return static_cast<uint16_t>(sign | (exp_mask << MANT_BITS));
    }
    // f64 subnormals are far below the target's smallest subnormal.
    if (exp == 0) return sign;

    int64_t t_exp = exp - 1023 + bias;
    if (t_exp >= exp_mask) return static_cast<uint16_t>(sign | (exp_mask << MANT_BITS));

    if (t_exp >= 1) {
        constexpr int shift = 52 - MANT_BITS;
        uint64_t keep = frac >> shift;
        const uint64_t rem = frac & ((1ull << shift) - 1);
        const uint64_t half = 1ull << (shift - 1);
        if (rem > half || (rem == half && (keep & 1))) ++keep;
        if (keep == mant_max) {
            keep = 0;
            if (++t_exp >= exp_mask) return static_cast<uint16_t>(sign | (exp_mask << MANT_BITS));
        }
        return static_cast<uint16_t>(sign | (t_exp << MANT_BITS) | keep);
    }

    // Subnormal target.
    const int64_t sh = (52 - MANT_BITS) + (1 - t_exp);
    if (sh >= 54) return sign;
    const uint64_t full = (1ull << 52) | frac;
    uint64_t keep = full >> sh;
    const uint64_t rem = full & ((1ull << sh) - 1);
    const uint64_t half = 1ull << (sh - 1);
    if (rem > half || (rem == half && (keep & 1))) ++keep;
    // A carry out of the mantissa lands exactly on the minimum normal encoding.
    return static_cast<uint16_t>(sign | keep);
}

}  // namespace detail

inline uint16_t f64_to_f16_bits(double x) { return detail::f64_to_small<5, 10>(x); }
inline uint16_t f64_to_bf16_bits(double x) { return detail::f64_to_small<8, 7>(x); }

inline double f16_bits_to_f64(uint16_t h) {
    const int sign = (h >> 15) & 1;
    const int exp = (h >> 10) & 0x1F;
    const int mant = h & 0x3FF;
    double v;
    if (exp == 0x1F) {
        v = mant ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
    } else if (exp == 0) {
        v = std::ldexp(static_cast<double>(mant), -24);
    } else {
        v = std::ldexp(static_cast<double>(1024 + mant), exp - 15 - 10);
    }
    return sign ? -v : v;
}

inline double bf16_bits_to_f64(uint16_t h) {
    const uint32_t fb = static_cast<uint32_t>(h) << 16;
    return static_cast<double>(std::bit_cast<float>(fb));
}

// Decode one element at byte position p.
inline double decode_element(const unsigned char* p, Dtype d) {
    switch (d) {
        case Dtype::F64: {
            double v;
            std::memcpy(&v, p, 8);
            return v;
        }
        case Dtype::F32: {
            float v;
            std::memcpy(&v, p, 4);
            return static_cast<double>(v);
        }
        case Dtype::F16: {
            uint16_t b;
            std::memcpy(&b, p, 2);
            return f16_bits_to_f64(b);
        }
        default: {
            uint16_t b;
            std::memcpy(&b, p, 2);
            return bf16_bits_to_f64(b);
        }
    }
}

// Encode one f64 element with round-to-nearest-even narrowing.
inline void encode_element(double v, Dtype d, unsigned char* p) {
    switch (d) {
        case Dtype::F64: {
            std::memcpy(p, &v, 8);
            break;
        }
        case Dtype::F32: {
            const float f = static_cast<float>(v);
            std::memcpy(p, &f, 4);
            break;
        }
        case Dtype::F16: {
            const uint16_t b = f64_to_f16_bits(v);
            std::memcpy(p, &b, 2);
            break;
        }
        default: {
            const uint16_t b = f64_to_bf16_bits(v);
            std::memcpy(p, &b, 2);
            break;
        }
    }
}

}  // namespace crane
