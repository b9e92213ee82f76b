// Copyright (C) 2026 ThinKV Authors
// SPDX-License-Identifier: Apache-2.0

#include "thinkv/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "thinkv/errors.hpp"

namespace thinkv {

namespace {

double absmax_of(std::span<const double> xs) {
  double m = 0.0;
  for (double x : xs) m = std::max(m, std::fabs(x));
  return m;
}

void require_finite(std::span<const double> xs, const char* who) {
  for (double x : xs) {
    if (!std::isfinite(x)) {
      throw Error(ErrorKind::kStructural,
                  std::string(who) + ": non-finite input element");
    }
  }
}

}  // namespace

std::string format_name(Format f) {
  switch (f) {
    case Format::kTernary2: return "TERNARY2";
    case Format::kNvfp4: return "NVFP4";
    case Format::kFp8E4M3: return "FP8E4M3";
  }
  return "?";
}

int format_code_bits(Format f) {
  switch (f) {
    case Format::kTernary2: return 2;
    case Format::kNvfp4: return 4;
    case Format::kFp8E4M3: return 8;
  }
  return 0;
}

Format format_for_bits(int bits) {
  switch (bits) {
    case 2: return Format::kTernary2;
    case 4: return Format::kNvfp4;
    case 8: return Format::kFp8E4M3;
  }
  throw Error(ErrorKind::kStructural,
              "no storage format for " + std::to_string(bits) + " bits");
}

// ---------------------------------------------------------------------------
// E4M3
// ---------------------------------------------------------------------------

std::uint8_t e4m3_encode(double x) {
  if (std::isnan(x)) throw Error(ErrorKind::kStructural, "e4m3: NaN input");
  const std::uint8_t sign = std::signbit(x) ? 0x80 : 0x00;
  double a = std::fabs(x);
  if (a >= kE4M3Max) return sign | 0x7E;  // saturate at the max finite value
  if (a < 0x1p-6) {                       // subnormal range, unit 2^-9
    const double r = std::nearbyint(a * 0x1p9);  // ties to even
    if (r >= 8.0) return sign | 0x08;            // rounded up to the min normal
    return sign | static_cast<std::uint8_t>(r);
  }
  int e = 0;
  double fr = std::frexp(a, &e);  // a = fr * 2^e, fr in [0.5, 1)
  e -= 1;
  fr *= 2.0;  // fr in [1, 2)
  double m = std::nearbyint((fr - 1.0) * 8.0);
  if (m >= 8.0) {
    e += 1;
    m = 0.0;
  }
  if (e > 8 || (e == 8 && m > 6.0)) return sign | 0x7E;
  return sign | static_cast<std::uint8_t>((e + 7) << 3) |
         static_cast<std::uint8_t>(m);
}

double e4m3_decode(std::uint8_t code) {
  const double sign = (code & 0x80) ? -1.0 : 1.0;
  const int e = (code >> 3) & 0xF;
  const int m = code & 0x7;
  if (e == 15 && m == 7) return std::numeric_limits<double>::quiet_NaN();
  const double v = (e == 0) ? m * 0x1p-9
                            : (1.0 + m / 8.0) * std::ldexp(1.0, e - 7);
  return sign * v;
}

// ---------------------------------------------------------------------------
// NVFP4 (e2m1)
// ---------------------------------------------------------------------------

namespace {
constexpr double kNvfp4Grid[8] = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
}

double nvfp4_code_value(std::uint8_t code) {
  const double sign = (code & 0x8) ? -1.0 : 1.0;
  return sign * kNvfp4Grid[code & 0x7];
}

std::uint8_t nvfp4_encode_value(double x) {
  if (x == 0.0) return 0;  // -0 normalizes to 0
  const std::uint8_t sign = std::signbit(x) ? 0x8 : 0x0;
  const double a = std::fabs(x);
  int best = 0;
  double best_dist = std::fabs(a - kNvfp4Grid[0]);
  for (int i = 1; i < 8; ++i) {
    const double dist = std::fabs(a - kNvfp4Grid[i]);
    if (dist < best_dist ||
        (dist == best_dist && (i & 1) == 0)) {  // tie: even mantissa bit
      best = i;
      best_dist = dist;
    }
  }
  if (best == 0) return 0;  // magnitude rounded to zero drops the sign
  return sign | static_cast<std::uint8_t>(best);
}

// ---------------------------------------------------------------------------
// Groups
// ---------------------------------------------------------------------------

double QuantizedGroup::scale() const {
  if (format == Format::kFp8E4M3) return static_cast<double>(scale_f32);
  return e4m3_decode(scale_code);
}

QuantizedGroup ternary_group_encode(std::span<const double> xs) {
  require_finite(xs, "ternary_group_encode");
  QuantizedGroup g;
  g.format = Format::kTernary2;
  g.g = static_cast<std::uint16_t>(xs.size());
  const double am = absmax_of(xs);
  g.scale_code = e4m3_encode(am);
  const double delta = e4m3_decode(g.scale_code);
  g.codes.resize(xs.size(), 0);
  if (delta > 0.0) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double r = std::nearbyint(xs[i] / delta);
      const auto c = static_cast<std::int8_t>(std::clamp(r, -1.0, 1.0));
      g.codes[i] = ternary_code_bits(c);
    }
  }
  return g;
}

QuantizedGroup nvfp4_group_encode(std::span<const double> xs) {
  require_finite(xs, "nvfp4_group_encode");
  QuantizedGroup g;
  g.format = Format::kNvfp4;
  g.g = static_cast<std::uint16_t>(xs.size());
  const double am = absmax_of(xs);
  g.scale_code = e4m3_encode(am / kNvfp4Max);
  const double scale = e4m3_decode(g.scale_code);
  g.codes.resize(xs.size(), 0);
  if (scale > 0.0) {
    for (std::size_t i = 0; i < xs.size(); ++i)
      g.codes[i] = nvfp4_encode_value(xs[i] / scale);
  }
  return g;
}

float fp8_tensor_scale(std::span<const double> xs) {
  return static_cast<float>(absmax_of(xs) / kE4M3Max);
}

QuantizedGroup fp8_group_encode(std::span<const double> xs,
                                float tensor_scale) {
  require_finite(xs, "fp8_group_encode");
  QuantizedGroup g;
  g.format = Format::kFp8E4M3;
  g.g = static_cast<std::uint16_t>(xs.size());
  g.scale_f32 = tensor_scale;
  g.codes.resize(xs.size(), 0);
  if (tensor_scale > 0.0f) {
    for (std::size_t i = 0; i < xs.size(); ++i)
      g.codes[i] = e4m3_encode(xs[i] / static_cast<double>(tensor_scale));
  }
  return g;
}

double decode_code(Format f, std::uint8_t code, double scale) {
  switch (f) {
    case Format::kTernary2:
      return static_cast<double>(ternary_bits_value(code)) * scale;
    case Format::kNvfp4:
      return nvfp4_code_value(code) * scale;
    case Format::kFp8E4M3:
      return e4m3_decode(code) * scale;
  }
  return 0.0;
}

std::vector<double> group_decode(const QuantizedGroup& group) {
  std::vector<double> out(group.codes.size());
  const double s = group.scale();
  for (std::size_t i = 0; i < group.codes.size(); ++i)
    out[i] = decode_code(group.format, group.codes[i], s);
  return out;
}

// ---------------------------------------------------------------------------
// Ternary packing
// ---------------------------------------------------------------------------

std::uint8_t ternary_code_bits(std::int8_t value) {
  switch (value) {
    case 0: return 0b00;
    case 1: return 0b01;
    case -1: return 0b11;
  }
  throw Error(ErrorKind::kStructural, "ternary code out of {-1, 0, +1}");
}

std::int8_t ternary_bits_value(std::uint8_t bits) {
  switch (bits & 0x3) {
    case 0b00: return 0;
    case 0b01: return 1;
    case 0b10: return 0;  // redundant -0 pattern
    case 0b11: return -1;
  }
  return 0;
}

std::vector<std::uint8_t> pack_ternary_pairs(std::span<const std::int8_t> codes,
                                             bool pad_odd) {
  if (codes.size() % 2 != 0 && !pad_odd) {
    throw Error(ErrorKind::kStructural,
                "pack_ternary_pairs: odd code count without padding");
  }
  std::vector<std::uint8_t> cells;
  cells.reserve((codes.size() + 1) / 2);
  for (std::size_t i = 0; i < codes.size(); i += 2) {
    const std::uint8_t lo = ternary_code_bits(codes[i]);
    const std::uint8_t hi =
        (i + 1 < codes.size()) ? ternary_code_bits(codes[i + 1]) : 0;
    cells.push_back(static_cast<std::uint8_t>(lo | (hi << 2)));
  }
  return cells;
}

std::vector<std::int8_t> unpack_ternary_pairs(std::span<const std::uint8_t> cells,
                                              std::size_t count) {
  if (count > cells.size() * 2) {
    throw Error(ErrorKind::kStructural, "unpack_ternary_pairs: short input");
  }
  std::vector<std::int8_t> codes;
  codes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t cell = cells[i / 2];
    const std::uint8_t bits = (i % 2 == 0) ? (cell & 0x3) : ((cell >> 2) & 0x3);
    codes.push_back(ternary_bits_value(bits));
  }
  return codes;
}

// ---------------------------------------------------------------------------
// Wire layout
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> serialize_group(const QuantizedGroup& group) {
  std::vector<std::uint8_t> out;
  out.push_back(static_cast<std::uint8_t>(group.format));
  out.push_back(static_cast<std::uint8_t>(group.g & 0xFF));
  out.push_back(static_cast<std::uint8_t>((group.g >> 8) & 0xFF));
  if (group.format == Format::kFp8E4M3) {
    std::uint32_t bits = 0;
    static_assert(sizeof(bits) == sizeof(group.scale_f32));
    std::memcpy(&bits, &group.scale_f32, sizeof(bits));
    for (int i = 0; i < 4; ++i)
      out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
  } else {
    out.push_back(group.scale_code);
  }
  switch (group.format) {
    case Format::kTernary2: {
      // two codes per 4-bit cell, two cells per byte, low bits first
      std::uint8_t cur = 0;
      int nibbles = 0;
      for (std::size_t i = 0; i < group.codes.size(); i += 2) {
        const std::uint8_t lo = group.codes[i] & 0x3;
        const std::uint8_t hi =
            (i + 1 < group.codes.size()) ? (group.codes[i + 1] & 0x3) : 0;
        const std::uint8_t cell = static_cast<std::uint8_t>(lo | (hi << 2));
        if (nibbles % 2 == 0) {
          cur = cell;
        } else {
          out.push_back(static_cast<std::uint8_t>(cur | (cell << 4)));
        }
        ++nibbles;
      }
      if (nibbles % 2 == 1) out.push_back(cur);
      break;
    }
    case Format::kNvfp4: {
      for (std::size_t i = 0; i < group.codes.size(); i += 2) {
        const std::uint8_t lo = group.codes[i] & 0xF;
        const std::uint8_t hi =
            (i + 1 < group.codes.size()) ? (group.codes[i + 1] & 0xF) : 0;
        out.push_back(static_cast<std::uint8_t>(lo | (hi << 4)));
      }
      break;
    }
    case Format::kFp8E4M3: {
      out.insert(out.end(), group.codes.begin(), group.codes.end());
      break;
    }
  }
  return out;
}

QuantizedGroup deserialize_group(std::span<const std::uint8_t> bytes) {
  auto need = [&](std::size_t n) {
    if (bytes.size() < n)
      throw Error(ErrorKind::kParse, "group record truncated");
  };
  need(3);
  QuantizedGroup group;
  if (bytes[0] > 2)
    throw Error(ErrorKind::kParse, "unknown format tag " + std::to_string(bytes[0]));
  group.format = static_cast<Format>(bytes[0]);
  group.g = static_cast<std::uint16_t>(bytes[1] | (bytes[2] << 8));
  std::size_t off = 3;
  if (group.format == Format::kFp8E4M3) {
    need(off + 4);
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i)
      bits |= static_cast<std::uint32_t>(bytes[off + i]) << (8 * i);
    std::memcpy(&group.scale_f32, &bits, sizeof(bits));
    off += 4;
  } else {
    need(off + 1);
    group.scale_code = bytes[off];
    off += 1;
  }
  group.codes.resize(group.g);
  switch (group.format) {
    case Format::kTernary2: {
      need(off + (group.g + 3) / 4);
      for (int i = 0; i < group.g; ++i) {
        const std::uint8_t byte = bytes[off + i / 4];
        const int shift = 2 * (i % 4);
        group.codes[i] = (byte >> shift) & 0x3;
      }
      break;
    }
    case Format::kNvfp4: {
      need(off + (group.g + 1) / 2);
      for (int i = 0; i < group.g; ++i) {
        const std::uint8_t byte = bytes[off + i / 2];
        group.codes[i] = (i % 2 == 0) ? (byte & 0xF) : ((byte >> 4) & 0xF);
      }
      break;
    }
    case Format::kFp8E4M3: {
      need(off + group.g);
      std::copy(bytes.begin() + off, bytes.begin() + off + group.g,
                group.codes.begin());
      break;
    }
  }
  return group;
}

// ---------------------------------------------------------------------------
// PrecisionMap
// ---------------------------------------------------------------------------

PrecisionMap PrecisionMap::defaults(int num_thoughts) {
  PrecisionMap psi;
  if (num_thoughts == 3) {
    psi.set(kThoughtR, 4);
    psi.set(kThoughtE, 4);
    psi.set(kThoughtT, 2);
  } else {
    for (int b = 0; b < num_thoughts; ++b) psi.set(ThoughtLabel{b}, 4);
  }
  return psi;
}

PrecisionMap PrecisionMap::parse(const std::string& text, int num_thoughts) {
  PrecisionMap psi;
  auto fail = [&](const std::string& why) -> PrecisionMap {
    throw Error(ErrorKind::kConfig, "precision map '" + text + "': " + why);
  };
  const bool canonical =
      !text.empty() && (text[0] == 'R' || text[0] == 'E' || text[0] == 'T');
  if (canonical) {
    if (num_thoughts != 3)
      return fail("letter form requires three thought categories");
    std::size_t i = 0;
    while (i < text.size()) {
      const char c = text[i++];
      std::size_t j = i;
      while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j])))
        ++j;
      if (j == i) return fail("missing bit count");
      const int bits = std::stoi(text.substr(i, j - i));
      psi.set(thought_from_name(std::string(1, c), 3), bits);
      i = j;
    }
  } else if (text.find(':') == std::string::npos) {
    const int bits = std::stoi(text);
    for (int b = 0; b < num_thoughts; ++b) psi.set(ThoughtLabel{b}, bits);
  } else {
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) return fail("expected band:bits");
      psi.set(ThoughtLabel{std::stoi(item.substr(0, colon))},
              std::stoi(item.substr(colon + 1)));
    }
  }
  if (!psi.covers(num_thoughts)) return fail("does not cover every band");
  return psi;
}

void PrecisionMap::set(ThoughtLabel label, int bits) {
  if (bits != 2 && bits != 4 && bits != 8 && bits != 16) {
    throw Error(ErrorKind::kConfig,
                "unsupported precision " + std::to_string(bits) + " bits");
  }
  bits_[label.band] = bits;
}

int PrecisionMap::bits_for(ThoughtLabel label) const {
  const auto it = bits_.find(label.band);
  if (it == bits_.end()) {
    throw Error(ErrorKind::kStructural,
                "precision map has no entry for thought band " +
                    std::to_string(label.band));
  }
  return it->second;
}

bool PrecisionMap::covers(int num_thoughts) const {
  for (int b = 0; b < num_thoughts; ++b)
    if (!bits_.contains(b)) return false;
  return true;
}

bool PrecisionMap::monotone_in_importance(int num_thoughts) const {
  for (const auto& [b1, bits1] : bits_) {
    for (const auto& [b2, bits2] : bits_) {
      if (thought_importance(ThoughtLabel{b1}, num_thoughts) >
              thought_importance(ThoughtLabel{b2}, num_thoughts) &&
          bits1 < bits2) {
        return false;
      }
    }
  }
  return true;
}

std::string PrecisionMap::to_string(int num_thoughts) const {
  std::string out;
  for (const auto& [band, bits] : bits_) {
    if (num_thoughts == 3) {
      out += thought_name(ThoughtLabel{band}, 3) + std::to_string(bits);
    } else {
      if (!out.empty()) out += ",";
      out += std::to_string(band) + ":" + std::to_string(bits);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Window quantization
// ---------------------------------------------------------------------------

QuantizedWindow quantize_window(std::span<const KVEntry> tokens,
                                ThoughtLabel label, const PrecisionMap& psi,
                                int group_size) {
  if (tokens.empty())
    throw Error(ErrorKind::kStructural, "quantize_window: empty window");
  if (static_cast<int>(tokens.size()) > group_size)
    throw Error(ErrorKind::kStructural, "quantize_window: window exceeds g");
  const int d = static_cast<int>(tokens[0].key.size());
  for (const auto& t : tokens) {
    if (t.thought != label)
      throw Error(ErrorKind::kStructural, "quantize_window: mixed thought labels");
    if (static_cast<int>(t.key.size()) != d ||
        static_cast<int>(t.value.size()) != d)
      throw Error(ErrorKind::kStructural, "quantize_window: ragged vectors");
  }

  QuantizedWindow w;
  w.head_dim = d;
  w.group_size = group_size;
  w.pad = group_size - static_cast<int>(tokens.size());

  const int bits = psi.bits_for(label);
  if (bits == 16) {
    w.raw = true;
    for (const auto& t : tokens) {
      w.raw_keys.push_back(t.key);
      w.raw_values.push_back(t.value);
    }
    return w;
  }
  w.format = format_for_bits(bits);
  const int n = static_cast<int>(tokens.size());
  w.key_codes.assign(n, std::vector<std::uint8_t>(d, 0));
  w.value_codes.assign(n, std::vector<std::uint8_t>(d, 0));

  auto encode_grouped = [&](std::span<const double> xs) {
    return w.format == Format::kTernary2 ? ternary_group_encode(xs)
                                         : nvfp4_group_encode(xs);
  };

  if (w.format == Format::kFp8E4M3) {
    // Per-tensor scale: one FP32 scale per cache side for the window.
    std::vector<double> all_k, all_v;
    all_k.reserve(static_cast<std::size_t>(n) * d);
    all_v.reserve(static_cast<std::size_t>(n) * d);
    for (const auto& t : tokens) {
      all_k.insert(all_k.end(), t.key.begin(), t.key.end());
      all_v.insert(all_v.end(), t.value.begin(), t.value.end());
    }
    w.key_scale_f32 = fp8_tensor_scale(all_k);
    w.value_scale_f32 = fp8_tensor_scale(all_v);
    for (int t = 0; t < n; ++t) {
      for (int c = 0; c < d; ++c) {
        w.key_codes[t][c] =
            w.key_scale_f32 > 0.0f
                ? e4m3_encode(tokens[t].key[c] / w.key_scale_f32)
                : 0;
        w.value_codes[t][c] =
            w.value_scale_f32 > 0.0f
                ? e4m3_encode(tokens[t].value[c] / w.value_scale_f32)
                : 0;
      }
    }
    return w;
  }

  // Keys: one group per channel spanning the buffered tokens (zero-padded on
  // the token axis for a partial final window).
  w.key_scale_codes.resize(d);
  std::vector<double> column(group_size, 0.0);
  for (int c = 0; c < d; ++c) {
    std::fill(column.begin(), column.end(), 0.0);
    for (int t = 0; t < n; ++t) column[t] = tokens[t].key[c];
    const QuantizedGroup g = encode_grouped(column);
    w.key_scale_codes[c] = g.scale_code;
    for (int t = 0; t < n; ++t) w.key_codes[t][c] = g.codes[t];
  }

  // Values: per token, chunks of g consecutive channels.
  const int chunks = (d + group_size - 1) / group_size;
  w.value_scale_codes.assign(n, std::vector<std::uint8_t>(chunks, 0));
  std::vector<double> chunk(group_size, 0.0);
  for (int t = 0; t < n; ++t) {
    for (int j = 0; j < chunks; ++j) {
      std::fill(chunk.begin(), chunk.end(), 0.0);
      const int base = j * group_size;
      const int len = std::min(group_size, d - base);
      for (int c = 0; c < len; ++c) chunk[c] = tokens[t].value[base + c];
      const QuantizedGroup g = encode_grouped(chunk);
      w.value_scale_codes[t][j] = g.scale_code;
      for (int c = 0; c < len; ++c) w.value_codes[t][base + c] = g.codes[c];
    }
  }
  return w;
}

}  // namespace thinkv
