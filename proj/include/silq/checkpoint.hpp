// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: an 8-byte magic, a little-endian u64 manifest
// length, a JSON manifest, then raw little-endian tensor payloads. The
// manifest maps tensor names to dtype/shape/offset/length plus the scale
// tensor backing any integer data, and echoes the model and plan configs.
// JSON objects serialize with sorted keys and offsets are assigned in name
// order, so saving the same content twice produces identical bytes.
//
// Full-precision checkpoints store every tensor as f32; export artifacts
// store 4-bit weights packed two codes per byte with per-channel f32
// scales, the 8-bit head, and f32 for everything else. Dequantizing
// code * scale reproduces the fake-quant weight exactly, except that a
// negative value rounding to code 0 comes back as +0.0f instead of -0.0f;
// integer codes cannot carry the sign of zero, and no downstream sum can
// observe the difference.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "silq/config.hpp"
#include "silq/error.hpp"
#include "silq/model.hpp"
#include "silq/quant.hpp"
#include "silq/tensor.hpp"

namespace silq {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'S', 'I', 'L', 'Q',
                                             'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string dtype;  // "f32", "i8", "i4-packed"
  std::vector<std::size_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::string scale;  // name of the f32 scale tensor for integer dtypes
};

inline std::size_t dtype_payload_bytes(const std::string& dtype,
                                       std::size_t numel) {
  if (dtype == "f32") return numel * 4;
  if (dtype == "i8") return numel;
  if (dtype == "i4-packed") return (numel + 1) / 2;
  throw IoError("unknown tensor dtype: " + dtype);
}

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

struct Checkpoint {
  int format_version = kCheckpointVersion;
  ModelConfig model;
  PrecisionPlan plan;
  std::uint64_t seed = 0;
  std::map<std::string, CheckpointEntry> table;
  std::map<std::string, std::vector<std::uint8_t>> data;

  void add_f32(const std::string& name, const Tensor& t) {
    CheckpointEntry e;
    e.dtype = "f32";
    e.shape = t.shape();
    std::vector<std::uint8_t> bytes(t.numel() * 4);
    std::memcpy(bytes.data(), t.data(), bytes.size());
    e.length = bytes.size();
    table[name] = std::move(e);
    data[name] = std::move(bytes);
  }

  void add_i8(const std::string& name, const std::vector<std::int8_t>& codes,
              const std::vector<std::size_t>& shape,
              const std::string& scale_name) {
    check_input(codes.size() == shape_numel(shape),
                "checkpoint: i8 code count does not match shape");
    CheckpointEntry e;
    e.dtype = "i8";
    e.shape = shape;
    e.scale = scale_name;
    std::vector<std::uint8_t> bytes(codes.size());
    std::memcpy(bytes.data(), codes.data(), bytes.size());
    e.length = bytes.size();
    table[name] = std::move(e);
    data[name] = std::move(bytes);
  }

  void add_i4(const std::string& name, const std::vector<std::int8_t>& codes,
              const std::vector<std::size_t>& shape,
              const std::string& scale_name) {
    check_input(codes.size() == shape_numel(shape),
                "checkpoint: i4 code count does not match shape");
    CheckpointEntry e;
    e.dtype = "i4-packed";
    e.shape = shape;
    e.scale = scale_name;
    std::vector<std::uint8_t> bytes = pack_int4(codes);
    e.length = bytes.size();
    table[name] = std::move(e);
    data[name] = std::move(bytes);
  }

  Tensor tensor_f32(const std::string& name) const {
    auto it = table.find(name);
    if (it == table.end())
      throw IoError("checkpoint missing tensor: " + name);
    check_input(it->second.dtype == "f32",
                "checkpoint: tensor is not f32: " + name);
    const std::vector<std::uint8_t>& bytes = data.at(name);
    Tensor t(it->second.shape);
    std::memcpy(t.data(), bytes.data(), bytes.size());
    return t;
  }

  /// Materialize any entry as f32, dequantizing integer data through its
  /// per-channel (or per-tensor) scale.
  Tensor dequantized(const std::string& name) const {
    auto it = table.find(name);
    if (it == table.end())
      throw IoError("checkpoint missing tensor: " + name);
    const CheckpointEntry& e = it->second;
    if (e.dtype == "f32") return tensor_f32(name);
    const std::size_t numel = shape_numel(e.shape);
    std::vector<std::int8_t> codes;
    if (e.dtype == "i8") {
      codes.resize(numel);
      std::memcpy(codes.data(), data.at(name).data(), numel);
    } else {
      codes = unpack_int4(data.at(name), numel);
    }
    if (e.scale.empty())
      throw IoError("integer tensor has no scale: " + name);
    const Tensor scales = tensor_f32(e.scale);
    Tensor t(e.shape);
    const std::size_t rows = e.shape.empty() ? 1 : e.shape[0];
    const std::size_t cols = numel / (rows == 0 ? 1 : rows);
    check_input(scales.numel() == 1 || scales.numel() == rows,
                "checkpoint: scale count does not match rows: " + name);
    for (std::size_t i = 0; i < numel; ++i) {
      const float s =
          scales.numel() == 1 ? scales[0] : scales[i / cols];
      t[i] = static_cast<float>(codes[i]) * s;
    }
    return t;
  }
};

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {

inline json manifest_json(const Checkpoint& ck) {
  json tensors = json::object();
  for (const auto& [name, e] : ck.table) {
    json je = json{{"dtype", e.dtype},
                   {"shape", e.shape},
                   {"offset", e.offset},
                   {"length", e.length}};
    if (!e.scale.empty()) je["scale"] = e.scale;
    tensors[name] = std::move(je);
  }
  return json{{"format_version", ck.format_version},
              {"model", ck.model},
              {"plan", ck.plan},
              {"seed", ck.seed},
              {"tensors", std::move(tensors)}};
}

}  // namespace detail

/// Assign payload offsets in name order and write the container atomically
/// (temp file in the same directory, then rename).
inline void save_checkpoint_file(const std::string& path, Checkpoint& ck) {
  std::uint64_t offset = 0;
  for (auto& [name, e] : ck.table) {
    const auto it = ck.data.find(name);
    check_usage(it != ck.data.end(),
                "checkpoint: entry has no payload: " + name);
    check_usage(it->second.size() ==
                    dtype_payload_bytes(e.dtype, shape_numel(e.shape)),
                "checkpoint: payload size mismatch: " + name);
    e.offset = offset;
    e.length = it->second.size();
    offset += e.length;
  }
  const std::string manifest = detail::manifest_json(ck).dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp);
    out.write(kCheckpointMagic, 8);
    const std::uint64_t mlen = manifest.size();
    out.write(reinterpret_cast<const char*>(&mlen), 8);
    out.write(manifest.data(),
              static_cast<std::streamsize>(manifest.size()));
    for (const auto& [name, bytes] : ck.data)
      out.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) throw IoError("short write on checkpoint: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw IoError("cannot move checkpoint into place: " + path + ": " +
                  ec.message());
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  if (raw.size() < 16 || std::memcmp(raw.data(), kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path);
  std::uint64_t mlen = 0;
  std::memcpy(&mlen, raw.data() + 8, 8);
  if (16 + mlen > raw.size())
    throw IoError("truncated checkpoint manifest: " + path);

  json j;
  try {
    j = json::parse(raw.begin() + 16, raw.begin() + 16 + mlen);
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint manifest: " + path + ": " + e.what());
  }

  Checkpoint ck;
  try {
    ck.format_version = j.at("format_version").get<int>();
    if (ck.format_version != kCheckpointVersion)
      throw IoError("unsupported checkpoint version in " + path);
    ck.model = j.at("model").get<ModelConfig>();
    ck.plan = j.at("plan").get<PrecisionPlan>();
    ck.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [name, je] : j.at("tensors").items()) {
      CheckpointEntry e;
      e.dtype = je.at("dtype").get<std::string>();
      e.shape = je.at("shape").get<std::vector<std::size_t>>();
      e.offset = je.at("offset").get<std::uint64_t>();
      e.length = je.at("length").get<std::uint64_t>();
      e.scale = je.value("scale", std::string());
      ck.table[name] = std::move(e);
    }
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint manifest: " + path + ": " + e.what());
  }

  // Validate the table before touching any payload: dtype arithmetic,
  // bounds, non-overlap, and scale references.
  const std::size_t payload = raw.size() - 16 - mlen;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& [name, e] : ck.table) {
    if (e.length != dtype_payload_bytes(e.dtype, shape_numel(e.shape)))
      throw IoError("tensor length does not match its shape: " + name);
    if (e.offset + e.length > payload)
      throw IoError("tensor extends past payload end: " + name);
    if (e.dtype != "f32") {
      if (e.scale.empty())
        throw IoError("integer tensor has no scale: " + name);
      auto s = ck.table.find(e.scale);
      if (s == ck.table.end() || s->second.dtype != "f32")
        throw IoError("integer tensor names a missing or non-f32 scale: " +
                      name);
    }
    spans.emplace_back(e.offset, e.length);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i - 1].first + spans[i - 1].second > spans[i].first)
      throw IoError("checkpoint manifest has overlapping tensors: " + path);

  const char* base = raw.data() + 16 + mlen;
  for (const auto& [name, e] : ck.table)
    ck.data[name] = std::vector<std::uint8_t>(
        base + e.offset, base + e.offset + e.length);
  return ck;
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint
// ---------------------------------------------------------------------------

/// Full-precision snapshot: every parameter and step size as f32.
inline Checkpoint checkpoint_from_model(QuantizedModel& m,
                                        std::uint64_t seed) {
  Checkpoint ck;
  ck.model = m.config;
  ck.plan = m.plan;
  ck.seed = seed;
  m.params.visit([&](const std::string& name, Tensor& t) {
    ck.add_f32(name, t);
  });
  for (const auto& [site, t] : m.steps) ck.add_f32(site + ".step", t);
  return ck;
}

/// Integer export artifact: 4-bit packed weights and the 8-bit head, each
/// with per-channel f32 scales copied from the learned step sizes; f32 for
/// the embedding, norm gains, and remaining step sizes.
inline Checkpoint export_from_model(QuantizedModel& m, std::uint64_t seed) {
  check_input(m.plan.weight_bits == 4 && m.plan.head_bits == 8,
              "export: requires 4-bit weights and an 8-bit head");
  Checkpoint ck;
  ck.model = m.config;
  ck.plan = m.plan;
  ck.seed = seed;

  std::map<std::string, const SiteInfo*> weight_sites;
  const std::vector<SiteInfo> sites = quantizer_sites(m.config, m.plan);
  for (const SiteInfo& s : sites)
    if (s.kind == SiteKind::kWeight) weight_sites[s.name] = &s;

  m.params.visit([&](const std::string& name, Tensor& t) {
    auto ws = weight_sites.find(name);
    if (ws == weight_sites.end()) {
      ck.add_f32(name, t);
      return;
    }
    const SiteInfo& s = *ws->second;
    const Tensor& scales = m.steps.at(name);
    QuantizerSpec spec;
    spec.bits = s.bits;
    spec.granularity = s.granularity;
    spec.grad_scale = m.plan.lsq_grad_scale;
    const std::vector<std::int32_t> wide = quantize_codes(t, scales, spec);
    std::vector<std::int8_t> codes(wide.size());
    for (std::size_t i = 0; i < wide.size(); ++i)
      codes[i] = static_cast<std::int8_t>(wide[i]);
    const std::string scale_name = name + ".scale";
    if (s.bits == 4)
      ck.add_i4(name, codes, t.shape(), scale_name);
    else
      ck.add_i8(name, codes, t.shape(), scale_name);
    ck.add_f32(scale_name, scales);
  });
  // Non-weight step sizes (static activation/cache scales) ride along as f32.
  for (const auto& [site, t] : m.steps)
    if (weight_sites.find(site) == weight_sites.end())
      ck.add_f32(site + ".step", t);
  return ck;
}

/// Rebuild a model from a checkpoint. Integer weights are dequantized
/// through their scales; the scales themselves become the weight step
/// sizes, so a fake-quant forward through the rebuilt model reproduces the
/// original quantized forward exactly.
inline QuantizedModel model_from_checkpoint(const Checkpoint& ck) {
  Rng rng(0);
  QuantizedModel m(ck.model, ck.plan, rng);
  m.steps.clear();
  m.params.visit([&](const std::string& name, Tensor& t) {
    auto it = ck.table.find(name);
    if (it == ck.table.end())
      throw IoError("checkpoint missing tensor: " + name);
    Tensor loaded = ck.dequantized(name);
    check_shape(loaded.same_shape(t),
                "checkpoint tensor shape mismatch: " + name);
    t = std::move(loaded);
    if (it->second.dtype != "f32")
      m.steps[name] = ck.tensor_f32(it->second.scale);
  });
  for (const auto& [name, e] : ck.table) {
    const std::string suffix = ".step";
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) ==
            0)
      m.steps[name.substr(0, name.size() - suffix.size())] =
          ck.tensor_f32(name);
  }
  return m;
}

/// Payload size from the manifest alone, for size accounting.
inline std::size_t checkpoint_payload_bytes(const Checkpoint& ck) {
  std::size_t total = 0;
  for (const auto& [name, e] : ck.table)
    total += dtype_payload_bytes(e.dtype, shape_numel(e.shape));
  return total;
}

}  // namespace silq
