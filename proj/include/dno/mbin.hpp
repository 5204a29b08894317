#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dno/io.hpp"
#include "dno/motion.hpp"

namespace dno {

inline constexpr char kMotionMagic[4] = {'M', 'B', 'I', 'N'};
inline constexpr std::uint32_t kMotionVersion = 1;

struct MotionFile {
  std::vector<Motion> motions;
  nlohmann::json metadata = nlohmann::json::object();
};

/// Values are stored as 32-bit floats; motions must share frame count and fps.
inline std::vector<std::uint8_t> encode_mbin(const std::vector<Motion>& motions, const nlohmann::json& metadata = {}) {
  const std::size_t frames = motions.empty() ? kDefaultFrames : motions.front().frames;
  const std::uint32_t fps = motions.empty() ? kDefaultFps : motions.front().fps;
  for (const auto& m : motions)
    if (m.frames != frames || m.fps != fps) throw std::invalid_argument("mbin: motions differ in frame count or fps");
  io::ByteWriter w;
  w.bytes(kMotionMagic, 4);
  w.u32(kMotionVersion);
  w.u32(static_cast<std::uint32_t>(kFeatures));
  w.u32(static_cast<std::uint32_t>(frames));
  w.u32(static_cast<std::uint32_t>(motions.size()));
  w.u32(fps);
  for (const auto& m : motions)
    for (double v : m.data) w.f32(static_cast<float>(v));
  const std::string meta = metadata.is_null() ? std::string("{}") : metadata.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.text(meta);
  return w.buffer();
}

inline MotionFile decode_mbin(std::span<const std::uint8_t> bytes, const std::string& what) {
  using Code = FormatError::Code;
  io::ByteReader r(bytes, what);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMotionMagic)) throw FormatError(Code::BadMagic, what + ": not an MBIN file");
  const auto version = r.u32();
  if (version != kMotionVersion)
    throw FormatError(Code::VersionMismatch, what + ": unsupported MBIN version " + std::to_string(version));
  const auto d = r.u32(), frames = r.u32(), count = r.u32(), fps = r.u32();
  if (d != kFeatures) throw FormatError(Code::ShapeMismatch, what + ": feature count " + std::to_string(d) + ", expected 6");
  if (frames == 0) throw FormatError(Code::ShapeMismatch, what + ": zero frames");
  const std::uint64_t payload = std::uint64_t{count} * d * frames * sizeof(float);
  if (payload > r.remaining()) throw FormatError(Code::Truncated, what + ": truncated motion payload");
  MotionFile out;
  out.motions.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Motion m(frames, fps);
    for (auto& v : m.data) v = static_cast<double>(r.f32());
    out.motions.push_back(std::move(m));
  }
  const auto len = r.u32();
  try {
    out.metadata = nlohmann::json::parse(r.text(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(Code::Malformed, what + ": bad metadata: " + e.what());
  }
  if (r.remaining() != 0) throw FormatError(Code::Malformed, what + ": trailing bytes");
  return out;
}

inline void save_mbin(const std::filesystem::path& path, const std::vector<Motion>& motions,
                      const nlohmann::json& metadata = {}) {
  io::write_file_atomic(path, encode_mbin(motions, metadata));
}

inline MotionFile load_mbin(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_mbin(bytes, path.string());
}

}  // namespace dno
