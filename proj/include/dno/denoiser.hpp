#pragma once

// Clean-motion predictor d(x_t, t): a residual MLP over the flattened motion
// with sinusoidal time conditioning. It has no text or class input.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dno/io.hpp"
#include "dno/motion.hpp"
#include "dno/tensor.hpp"

namespace dno {

inline constexpr std::size_t kTimeEmbedDim = 64;

struct DenoiserConfig {
  std::size_t features = kFeatures;
  std::size_t frames = kDefaultFrames;
  std::size_t width = 512;
  std::size_t blocks = 3;
  std::size_t diffusion_steps = 1000;  // T

  std::size_t input_dim() const noexcept { return features * frames; }
  bool operator==(const DenoiserConfig&) const = default;
};

/// Interleaved sin/cos of t at geometric frequencies 10000^(-i/32).
inline std::vector<double> time_embed(std::size_t t, std::size_t max_t) {
  if (t > max_t) throw std::out_of_range("time_embed: t=" + std::to_string(t) + " outside [0, " + std::to_string(max_t) + "]");
  std::vector<double> e(kTimeEmbedDim);
  constexpr std::size_t half = kTimeEmbedDim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    e[2 * i] = std::sin(static_cast<double>(t) * freq);
    e[2 * i + 1] = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

struct ParamSpec {
  std::string name;
  tg::Shape shape;
};

/// Names and shapes of every weight array, in storage order.
inline std::vector<ParamSpec> param_layout(const DenoiserConfig& c) {
  std::vector<ParamSpec> out;
  const std::size_t w = c.width, in = c.input_dim();
  out.push_back({"in.weight", {in, w}});
  out.push_back({"in.bias", {w}});
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    out.push_back({p + "time.weight", {kTimeEmbedDim, w}});
    out.push_back({p + "time.bias", {w}});
    out.push_back({p + "fc1.weight", {w, w}});
    out.push_back({p + "fc1.bias", {w}});
    out.push_back({p + "fc2.weight", {w, w}});
    out.push_back({p + "fc2.bias", {w}});
  }
  out.push_back({"out.weight", {w, in}});
  out.push_back({"out.bias", {in}});
  return out;
}

inline std::size_t parameter_count(const DenoiserConfig& c) {
  std::size_t n = 0;
  for (const auto& s : param_layout(c)) n += tg::numel_of(s.shape);
  return n;
}

struct Denoiser {
  DenoiserConfig config;
  std::vector<tg::Tensor<double>> weights;  // param_layout order
  DatasetStats stats;                       // normalization the model was trained under

  /// Affine layers uniform in +-1/sqrt(fan_in); the output layer starts at zero.
  static Denoiser initialize(const DenoiserConfig& c, std::uint64_t seed, const DatasetStats& stats = {}) {
    Denoiser d;
    d.config = c;
    d.stats = stats;
    std::mt19937_64 rng(seed);
    for (const auto& spec : param_layout(c)) {
      const bool output = spec.name.rfind("out.", 0) == 0;
      const std::size_t fan_in = spec.shape.size() == 2 ? spec.shape[0]
                                 : spec.name.rfind("in.", 0) == 0 ? c.input_dim()
                                 : spec.name.find("time") != std::string::npos ? kTimeEmbedDim
                                                                               : c.width;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      std::vector<double> v(tg::numel_of(spec.shape), 0.0);
      if (!output)
        for (auto& x : v) x = u(rng);
      d.weights.emplace_back(spec.shape, std::move(v));
    }
    return d;
  }

  /// x: [B, D*M] normalized noisy motions; t: one step per row (or a single
  /// step for all rows). `w` overrides the stored weights (e.g. graph leaves
  /// during training). Returns [B, D*M].
  tg::Tensor<double> forward(const tg::Tensor<double>& x, std::span<const std::size_t> t,
                             const std::vector<tg::Tensor<double>>* w = nullptr) const {
    const auto& p = w ? *w : weights;
    const std::size_t in = config.input_dim();
    if (x.rank() != 2 || x.shape()[1] != in)
      throw tg::ShapeError("denoiser: expected input [B," + std::to_string(in) + "], got " + tg::to_string(x.shape()));
    const std::size_t rows = x.shape()[0];
    if (t.size() != 1 && t.size() != rows) throw tg::ShapeError("denoiser: time list does not match batch");
    std::vector<double> emb(rows * kTimeEmbedDim);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto e = time_embed(t.size() == 1 ? t[0] : t[r], config.diffusion_steps);
      std::copy(e.begin(), e.end(), emb.begin() + static_cast<std::ptrdiff_t>(r * kTimeEmbedDim));
    }
    const tg::Tensor<double> temb(tg::Shape{rows, kTimeEmbedDim}, std::move(emb));

    std::size_t i = 0;
    auto affine = [&](const tg::Tensor<double>& h) {
      auto out = tg::add(tg::matmul(h, p[i]), p[i + 1]);
      i += 2;
      return out;
    };
    tg::Tensor<double> h = affine(x);
    for (std::size_t b = 0; b < config.blocks; ++b) {
      tg::Tensor<double> a = tg::add(h, affine(temb));
      tg::Tensor<double> u = affine(tg::silu(a));
      h = tg::add(a, affine(tg::silu(u)));
    }
    return affine(h);
  }

  tg::Tensor<double> forward(const tg::Tensor<double>& x, std::size_t t) const {
    const std::size_t ts[1] = {t};
    return forward(x, std::span<const std::size_t>(ts, 1));
  }
};

inline constexpr char kWeightMagic[4] = {'D', 'N', 'O', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

inline nlohmann::json manifest_of(const Denoiser& d) {
  nlohmann::json j;
  j["features"] = d.config.features;
  j["frames"] = d.config.frames;
  j["width"] = d.config.width;
  j["blocks"] = d.config.blocks;
  j["time_dim"] = kTimeEmbedDim;
  j["T"] = d.config.diffusion_steps;
  j["parameter_count"] = parameter_count(d.config);
  j["stats"] = {{"mean", d.stats.mean}, {"std", d.stats.std}};
  auto& tensors = j["tensors"] = nlohmann::json::array();
  for (const auto& s : param_layout(d.config)) tensors.push_back({{"name", s.name}, {"shape", s.shape}});
  return j;
}

inline std::vector<std::uint8_t> encode_params(const Denoiser& d) {
  io::ByteWriter w;
  w.bytes(kWeightMagic, 4);
  w.u32(kWeightVersion);
  const std::string manifest = manifest_of(d).dump();
  w.u32(static_cast<std::uint32_t>(manifest.size()));
  w.text(manifest);
  for (const auto& t : d.weights)
    for (double v : t.data()) w.f64(v);
  return w.buffer();
}

inline void save_params(const std::filesystem::path& path, const Denoiser& d) {
  io::write_file_atomic(path, encode_params(d));
}

/// Parses a weight file. When `expected` is given, its architecture must match
/// the manifest.
inline Denoiser decode_params(std::span<const std::uint8_t> bytes, const std::string& what,
                              const DenoiserConfig* expected = nullptr) {
  using Code = FormatError::Code;
  io::ByteReader r(bytes, what);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kWeightMagic)) throw FormatError(Code::BadMagic, what + ": not a DNOW weight file");
  const auto version = r.u32();
  if (version != kWeightVersion)
    throw FormatError(Code::VersionMismatch, what + ": unsupported weight version " + std::to_string(version));
  const auto len = r.u32();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(r.text(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(Code::Malformed, what + ": bad manifest: " + e.what());
  }
  Denoiser d;
  try {
    d.config.features = j.at("features");
    d.config.frames = j.at("frames");
    d.config.width = j.at("width");
    d.config.blocks = j.at("blocks");
    d.config.diffusion_steps = j.at("T");
    d.stats.mean = j.at("stats").at("mean");
    d.stats.std = j.at("stats").at("std");
    if (j.at("time_dim").get<std::size_t>() != kTimeEmbedDim)
      throw FormatError(Code::ShapeMismatch, what + ": unsupported time embedding size");
    const auto layout = param_layout(d.config);
    const auto& tensors = j.at("tensors");
    if (tensors.size() != layout.size()) throw FormatError(Code::ShapeMismatch, what + ": tensor list does not match architecture");
    for (std::size_t i = 0; i < layout.size(); ++i)
      if (tensors[i].at("name") != layout[i].name || tensors[i].at("shape").get<tg::Shape>() != layout[i].shape)
        throw FormatError(Code::ShapeMismatch, what + ": tensor " + layout[i].name + " does not match architecture");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(Code::Malformed, what + ": bad manifest: " + e.what());
  }
  if (d.config.features != kFeatures) throw FormatError(Code::ShapeMismatch, what + ": feature count must be 6");
  if (expected && !(*expected == d.config))
    throw FormatError(Code::ShapeMismatch, what + ": manifest declares width " + std::to_string(d.config.width) +
                                               ", frames " + std::to_string(d.config.frames) + ", expected width " +
                                               std::to_string(expected->width) + ", frames " +
                                               std::to_string(expected->frames));
  for (const auto& s : param_layout(d.config)) {
    std::vector<double> v(tg::numel_of(s.shape));
    for (auto& x : v) x = r.f64();
    d.weights.emplace_back(s.shape, std::move(v));
  }
  if (r.remaining() != 0) throw FormatError(Code::Malformed, what + ": trailing bytes after weights");
  return d;
}

inline Denoiser load_params(const std::filesystem::path& path, const DenoiserConfig* expected = nullptr) {
  const auto bytes = io::read_file(path);
  return decode_params(bytes, path.string(), expected);
}

}  // namespace dno
