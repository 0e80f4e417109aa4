// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>

#include "calibprune/forward.hpp"

namespace calibprune {

// Byte-level vocabulary: ids 0..255 are raw bytes, 256 marks the start of text.
inline constexpr TokenId kBosId = 256;
inline constexpr size_t kByteVocabSize = 257;

inline TokenSequence Encode(std::string_view text, bool add_bos = false) {
  TokenSequence ids;
  ids.reserve(text.size() + (add_bos ? 1 : 0));
  if (add_bos) ids.push_back(kBosId);
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

namespace detail {

inline void AppendReplacement(std::string& out) { out += "\xEF\xBF\xBD"; }

// Length of the well-formed UTF-8 sequence at bytes[i], or 0 if ill-formed;
// `consumed` receives the length of the maximal ill-formed subpart.
inline size_t Utf8SequenceLength(std::span<const unsigned char> bytes, size_t i, size_t& consumed) {
  const unsigned char b0 = bytes[i];
  consumed = 1;
  if (b0 < 0x80) return 1;
  size_t len = 0;
  unsigned char lo = 0x80, hi = 0xBF;
  if (b0 >= 0xC2 && b0 <= 0xDF) {
    len = 2;
  } else if (b0 >= 0xE0 && b0 <= 0xEF) {
    len = 3;
    if (b0 == 0xE0) lo = 0xA0;
    if (b0 == 0xED) hi = 0x9F;
  } else if (b0 >= 0xF0 && b0 <= 0xF4) {
    len = 4;
    if (b0 == 0xF0) lo = 0x90;
    if (b0 == 0xF4) hi = 0x8F;
  } else {
    return 0;
  }
  for (size_t k = 1; k < len; ++k) {
    if (i + k >= bytes.size()) return 0;
    const unsigned char bk = bytes[i + k];
    const unsigned char klo = k == 1 ? lo : 0x80;
    const unsigned char khi = k == 1 ? hi : 0xBF;
    if (bk < klo || bk > khi) return 0;
    consumed = k + 1;
  }
  return len;
}

}  // namespace detail

// Drops BOS and decodes the bytes as UTF-8, replacing each maximal ill-formed
// subpart with U+FFFD. Never fails.
inline std::string Decode(std::span<const TokenId> ids) {
  std::basic_string<unsigned char> bytes;
  bytes.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 256) bytes.push_back(static_cast<unsigned char>(id));
  }
  std::string out;
  out.reserve(bytes.size());
  const std::span<const unsigned char> view(bytes.data(), bytes.size());
  size_t i = 0;
  while (i < view.size()) {
    size_t consumed = 1;
    const size_t len = detail::Utf8SequenceLength(view, i, consumed);
    if (len == 0) {
      detail::AppendReplacement(out);
      i += consumed;
    } else {
      out.append(reinterpret_cast<const char*>(view.data() + i), len);
      i += len;
    }
  }
  return out;
}

}  // namespace calibprune
