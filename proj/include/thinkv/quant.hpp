// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "thinkv/common.hpp"

namespace thinkv {

//! Storage formats for quantized cache entries. Ternary and NVFP4 use group
//! quantization with a shared E4M3 scale; FP8 uses a full-precision scale
//! shared across the emission window ("per tensor").
enum class Format : std::uint8_t {
  kTernary2 = 0,
  kNvfp4 = 1,
  kFp8E4M3 = 2,
};

std::string format_name(Format f);
int format_code_bits(Format f);
Format format_for_bits(int bits);  // 2, 4 or 8

// ---------------------------------------------------------------------------
// E4M3 scalar codec (1 sign / 4 exponent / 3 mantissa bits).
//
// Saturating variant: no infinities, magnitudes beyond the largest finite
// value (448) clamp to it, and the single code S.1111.111 is reserved as NaN.
// Rounding is nearest with ties to even.
// ---------------------------------------------------------------------------

inline constexpr double kE4M3Max = 448.0;

std::uint8_t e4m3_encode(double x);  // throws on NaN input
double e4m3_decode(std::uint8_t code);
inline double e4m3_round(double x) { return e4m3_decode(e4m3_encode(x)); }

// ---------------------------------------------------------------------------
// NVFP4 element grid (1 sign / 2 exponent / 1 mantissa bits, bias 1).
// Magnitudes: {0, 0.5, 1, 1.5, 2, 3, 4, 6}.
// ---------------------------------------------------------------------------

inline constexpr double kNvfp4Max = 6.0;

double nvfp4_code_value(std::uint8_t code);   // 4-bit code, sign in bit 3
std::uint8_t nvfp4_encode_value(double x);    // nearest grid point, ties to even mantissa

// ---------------------------------------------------------------------------
// Group quantization
// ---------------------------------------------------------------------------

//! g codewords plus a shared scale. Codes are stored one per byte in value
//! form (ternary: 2-bit sign/magnitude, nvfp4: 4-bit code, fp8: full byte);
//! serialize_group() produces the bit-packed wire layout.
struct QuantizedGroup {
  Format format = Format::kNvfp4;
  std::uint16_t g = 16;
  std::uint8_t scale_code = 0;  // E4M3 scale (ternary / nvfp4)
  float scale_f32 = 0.0f;       // FP32 scale (fp8)
  std::vector<std::uint8_t> codes;

  double scale() const;
};

//! scale = E4M3-rounded group absmax; code = clamp(round(x / scale), -1, +1).
QuantizedGroup ternary_group_encode(std::span<const double> xs);

//! scale = E4M3(absmax / 6); each element maps to the nearest scaled grid
//! point. An all-zero group encodes losslessly with scale 0.
QuantizedGroup nvfp4_group_encode(std::span<const double> xs);

//! Elements are divided by the caller-provided tensor scale and stored as
//! E4M3 bytes.
QuantizedGroup fp8_group_encode(std::span<const double> xs, float tensor_scale);
float fp8_tensor_scale(std::span<const double> xs);  // absmax / 448

std::vector<double> group_decode(const QuantizedGroup& group);

//! Decode a single stored code against a scale.
double decode_code(Format f, std::uint8_t code, double scale);

// ---------------------------------------------------------------------------
// Ternary 2-bit packing. Two sign/magnitude codes share one 4-bit cell
// (first code in the low bits). Codes are the values {-1, 0, +1}; the
// redundant -0 pattern decodes to 0.
// ---------------------------------------------------------------------------

std::uint8_t ternary_code_bits(std::int8_t value);  // value -> 2-bit pattern
std::int8_t ternary_bits_value(std::uint8_t bits);  // 2-bit pattern -> value

//! Packs 2k codes into k cells (one cell per byte, low nibble). An odd count
//! is an error unless pad_odd is set, in which case a zero code is appended.
std::vector<std::uint8_t> pack_ternary_pairs(std::span<const std::int8_t> codes,
                                             bool pad_odd = false);
std::vector<std::int8_t> unpack_ternary_pairs(std::span<const std::uint8_t> cells,
                                              std::size_t count);

// ---------------------------------------------------------------------------
// Wire layout: format tag (1 byte), g (2 bytes LE), scale (1 byte E4M3 or
// 4 bytes FP32 LE), then bit-packed codes (2/4/8 bits per element,
// little-endian within each byte).
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> serialize_group(const QuantizedGroup& group);
QuantizedGroup deserialize_group(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Thought -> precision assignment (psi)
// ---------------------------------------------------------------------------

//! Total map from thought band to bit width (2, 4, 8, or 16 = unquantized
//! passthrough). The default three-category map is R->4, E->4, T->2.
class PrecisionMap {
 public:
  PrecisionMap() = default;

  static PrecisionMap defaults(int num_thoughts);
  //! Accepts "R4E4T2"-style strings for the three-category taxonomy, a bare
  //! bit count applied to every band, or "band:bits" comma lists.
  static PrecisionMap parse(const std::string& text, int num_thoughts);

  void set(ThoughtLabel label, int bits);
  int bits_for(ThoughtLabel label) const;  // throws on unknown label
  bool covers(int num_thoughts) const;
  //! Definition-2 check: higher importance never gets fewer bits.
  bool monotone_in_importance(int num_thoughts) const;
  std::string to_string(int num_thoughts) const;
  const std::map<int, int>& bands() const { return bits_; }

 private:
  std::map<int, int> bits_;
};

// ---------------------------------------------------------------------------
// Window quantization (the TBQ emission unit)
// ---------------------------------------------------------------------------

//! One g-token emission from the full-precision buffer. Keys are grouped
//! along the channel axis (one group of g token values per channel); values
//! are grouped per token in chunks of g consecutive channels. A final partial
//! window is zero-padded on the token axis and the pad count recorded.
struct QuantizedWindow {
  Format format = Format::kNvfp4;
  bool raw = false;  // 16-bit passthrough, no codes
  int pad = 0;
  int head_dim = 0;
  // codes[token][channel]
  std::vector<std::vector<std::uint8_t>> key_codes;
  std::vector<std::vector<std::uint8_t>> value_codes;
  std::vector<Vec> raw_keys, raw_values;
  // per-channel key scales (grouped formats)
  std::vector<std::uint8_t> key_scale_codes;
  // per-token, per-chunk value scales (grouped formats)
  std::vector<std::vector<std::uint8_t>> value_scale_codes;
  // fp8 shared window scales
  float key_scale_f32 = 0.0f;
  float value_scale_f32 = 0.0f;

  int value_chunks() const { return (head_dim + group_size - 1) / group_size; }
  int group_size = 16;
};

//! Quantizes a buffered window of same-thought tokens at the precision
//! selected by psi. Throws on an unknown thought label or mixed labels.
QuantizedWindow quantize_window(std::span<const KVEntry> tokens,
                                ThoughtLabel label, const PrecisionMap& psi,
                                int group_size);

}  // namespace thinkv
