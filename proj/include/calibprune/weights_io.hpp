// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Weight container file:
//   u64 little-endian header length N
//   N bytes of UTF-8 JSON: name -> {"dtype":"f32","shape":[r,c],"offset":bytes}
//                          plus "__config__" -> ModelConfig fields
//   raw little-endian f32 payload, tensors concatenated in offset order.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "calibprune/error.hpp"
#include "calibprune/model.hpp"

namespace calibprune {

inline nlohmann::json ConfigToJson(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig ConfigFromJson(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<size_t>();
    c.d_model = j.at("d_model").get<size_t>();
    c.n_layers = j.at("n_layers").get<size_t>();
    c.n_heads = j.at("n_heads").get<size_t>();
    c.d_ff = j.at("d_ff").get<size_t>();
    c.max_seq_len = j.at("max_seq_len").get<size_t>();
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kMalformedHeader, std::string("__config__: ") + e.what());
  }
  return c;
}

namespace detail {

inline uint32_t ToLittle32(uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

inline void AppendU64LE(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace detail

inline std::string SerializeWeights(const WeightContainer& weights) {
  weights.Validate();
  nlohmann::json header = nlohmann::json::object();
  header["__config__"] = ConfigToJson(weights.config());
  std::string payload;
  for (const auto& spec : ExpectedTensors(weights.config())) {
    const Matrix& m = weights.at(spec.name);
    header[spec.name] = {{"dtype", "f32"}, {"shape", {m.rows(), m.cols()}}, {"offset", payload.size()}};
    for (float v : m.flat()) {
      const uint32_t bits = detail::ToLittle32(std::bit_cast<uint32_t>(v));
      char buf[4];
      std::memcpy(buf, &bits, 4);
      payload.append(buf, 4);
    }
  }
  const std::string header_text = header.dump();
  std::string out;
  out.reserve(8 + header_text.size() + payload.size());
  detail::AppendU64LE(out, header_text.size());
  out += header_text;
  out += payload;
  return out;
}

inline WeightContainer DeserializeWeights(const std::string& bytes) {
  Require(bytes.size() >= 8, ErrorCode::kMalformedHeader, "file shorter than length prefix");
  uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) {
    header_len |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  Require(header_len <= bytes.size() - 8, ErrorCode::kMalformedHeader,
          "header length " + std::to_string(header_len) + " exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kMalformedHeader, e.what());
  }
  Require(header.is_object() && header.contains("__config__"), ErrorCode::kMalformedHeader,
          "header must be an object with __config__");
  const ModelConfig cfg = ConfigFromJson(header["__config__"]);
  try {
    cfg.Validate();
  } catch (const Error& e) {
    Fail(ErrorCode::kMalformedHeader, e.what());
  }

  struct Entry {
    std::string name;
    size_t rows, cols;
    uint64_t offset;
  };
  std::vector<Entry> entries;
  for (const auto& [name, desc] : header.items()) {
    if (name == "__config__") continue;
    try {
      Require(desc.at("dtype").get<std::string>() == "f32", ErrorCode::kMalformedHeader,
              name + ": unsupported dtype");
      const auto& shape = desc.at("shape");
      Require(shape.is_array() && shape.size() == 2, ErrorCode::kMalformedHeader,
              name + ": shape must have rank 2");
      entries.push_back({name, shape[0].get<size_t>(), shape[1].get<size_t>(),
                         desc.at("offset").get<uint64_t>()});
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorCode::kMalformedHeader, name + ": " + e.what());
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.offset < b.offset; });

  const size_t payload_begin = 8 + header_len;
  const uint64_t payload_size = bytes.size() - payload_begin;
  uint64_t expected_offset = 0;
  for (const auto& e : entries) {
    Require(e.offset == expected_offset, ErrorCode::kMalformedHeader,
            e.name + ": offset " + std::to_string(e.offset) + " leaves a gap or overlap");
    expected_offset += static_cast<uint64_t>(e.rows) * e.cols * 4;
  }
  Require(expected_offset <= payload_size, ErrorCode::kTruncatedPayload,
          "header describes " + std::to_string(expected_offset) + " payload bytes, file has " +
              std::to_string(payload_size));
  Require(expected_offset == payload_size, ErrorCode::kMalformedHeader,
          std::to_string(payload_size - expected_offset) + " trailing payload bytes");

  WeightContainer weights(cfg);
  for (const auto& e : entries) {
    std::vector<float> data(e.rows * e.cols);
    const char* src = bytes.data() + payload_begin + e.offset;
    for (size_t i = 0; i < data.size(); ++i) {
      uint32_t bits;
      std::memcpy(&bits, src + 4 * i, 4);
      data[i] = std::bit_cast<float>(detail::ToLittle32(bits));
      Require(std::isfinite(data[i]), ErrorCode::kNonFinite,
              e.name + "[" + std::to_string(i) + "]");
    }
    weights.set(e.name, Matrix(e.rows, e.cols, std::move(data)));
  }
  weights.Validate();
  return weights;
}

inline void SaveWeights(const WeightContainer& weights, const std::string& path) {
  const std::string bytes = SerializeWeights(weights);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  Require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  Require(static_cast<bool>(out), ErrorCode::kIo, "write failed: " + path);
}

inline WeightContainer LoadWeights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  Require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return DeserializeWeights(bytes);
}

}  // namespace calibprune
