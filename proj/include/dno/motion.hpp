#pragma once

// Side-view character motion: pelvis, left foot and right foot positions
// (x forward, y up, ground at y = 0) sampled at a fixed frame rate.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dno {

enum class Joint : std::uint8_t { Pelvis = 0, LeftFoot = 1, RightFoot = 2 };
inline constexpr std::array<Joint, 3> kJoints{Joint::Pelvis, Joint::LeftFoot, Joint::RightFoot};

inline const char* joint_name(Joint j) {
  switch (j) {
    case Joint::Pelvis: return "pelvis";
    case Joint::LeftFoot: return "left-foot";
    case Joint::RightFoot: return "right-foot";
  }
  return "?";
}

/// Feature rows of a motion: [pelvis.x, pelvis.y, lfoot.x, lfoot.y, rfoot.x, rfoot.y].
inline constexpr std::size_t kFeatures = 6;
inline constexpr std::size_t kDefaultFrames = 64;
inline constexpr std::uint32_t kDefaultFps = 20;
/// Height above which a foot counts as airborne.
inline constexpr double kContactHeight = 0.05;

inline constexpr std::size_t feature_x(Joint j) { return 2 * static_cast<std::size_t>(j); }
inline constexpr std::size_t feature_y(Joint j) { return 2 * static_cast<std::size_t>(j) + 1; }

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// D x M array, feature-major: value(d, k) = data[d * frames + k].
struct Motion {
  std::size_t frames = kDefaultFrames;
  std::uint32_t fps = kDefaultFps;
  std::vector<double> data = std::vector<double>(kFeatures * kDefaultFrames, 0.0);

  Motion() = default;
  Motion(std::size_t m, std::uint32_t rate) : frames(m), fps(rate), data(kFeatures * m, 0.0) {}
  Motion(std::size_t m, std::uint32_t rate, std::vector<double> values)
      : frames(m), fps(rate), data(std::move(values)) {
    if (data.size() != kFeatures * frames)
      throw std::invalid_argument("motion data length " + std::to_string(data.size()) +
                                  " does not match 6 x " + std::to_string(frames));
  }

  double& at(std::size_t feature, std::size_t frame) { return data[feature * frames + frame]; }
  double at(std::size_t feature, std::size_t frame) const { return data[feature * frames + frame]; }
  Point2 joint(Joint j, std::size_t frame) const {
    return {at(feature_x(j), frame), at(feature_y(j), frame)};
  }
  bool finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
  /// Rounds every value to single precision, the storage precision of MBIN files.
  Motion quantized() const {
    Motion out = *this;
    for (auto& v : out.data) v = static_cast<double>(static_cast<float>(v));
    return out;
  }
};

enum class Action : std::uint8_t { Ground = 0, Jump = 1 };
using FrameLabels = std::vector<Action>;

/// A frame is a jump frame iff both feet are strictly above the contact height.
inline FrameLabels label_frames(const Motion& m) {
  FrameLabels labels(m.frames, Action::Ground);
  for (std::size_t k = 0; k < m.frames; ++k) {
    const bool l = m.at(feature_y(Joint::LeftFoot), k) > kContactHeight;
    const bool r = m.at(feature_y(Joint::RightFoot), k) > kContactHeight;
    if (l && r) labels[k] = Action::Jump;
  }
  return labels;
}

struct JumpWindow {
  std::size_t start = 0;
  std::size_t duration = 8;
  double apex = 0.25;
};

struct GaitParams {
  double speed = 1.0;             // m/s
  double stride_frequency = 0.6;  // gait cycles per second
  double pelvis_height = 0.9;     // m
  double bob = 0.02;              // m
  double step_height = 0.2;       // m
  std::vector<JumpWindow> jumps;
  std::size_t frames = kDefaultFrames;
  std::uint32_t fps = kDefaultFps;
};

namespace detail {

inline void clamp_param(double& v, double lo, double hi, const char* name, std::vector<std::string>* warnings) {
  if (!std::isfinite(v) || v < lo || v > hi) {
    const double c = std::isfinite(v) ? std::clamp(v, lo, hi) : lo;
    if (warnings) warnings->push_back(std::string(name) + " clamped from " + std::to_string(v) + " to " + std::to_string(c));
    v = c;
  }
}

// Horizontal progress of a swinging foot over swing phase w in [0, 1]. The foot
// only travels while lifted (w in [0.1, 0.9]) along a cycloid, so velocity and
// acceleration vanish at lift-off and touch-down.
inline double swing_progress(double w) {
  constexpr double lo = 0.1, hi = 0.9;
  if (w <= lo) return 0.0;
  if (w >= hi) return 1.0;
  const double u = (w - lo) / (hi - lo);
  return u - std::sin(2.0 * std::numbers::pi * u) / (2.0 * std::numbers::pi);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Deterministic walk (with optional jumps) for the given parameters. The seed
/// picks the gait phase and the starting position. A zero speed means the
/// character stands still.
inline Motion generate_sequence(GaitParams p, std::uint64_t seed,
                                std::vector<std::string>* warnings = nullptr) {
  using std::numbers::pi;
  detail::clamp_param(p.speed, 0.0, 3.0, "speed", warnings);
  detail::clamp_param(p.stride_frequency, 0.1, 3.0, "stride_frequency", warnings);
  detail::clamp_param(p.pelvis_height, 0.0, 2.0, "pelvis_height", warnings);
  detail::clamp_param(p.bob, 0.0, 0.2, "bob", warnings);
  detail::clamp_param(p.step_height, 0.0, 0.5, "step_height", warnings);
  if (p.frames < 1) p.frames = 1;
  if (p.fps < 1) p.fps = 1;

  // Keep jump windows inside [0, M) and non-overlapping.
  std::sort(p.jumps.begin(), p.jumps.end(), [](const JumpWindow& a, const JumpWindow& b) { return a.start < b.start; });
  std::vector<JumpWindow> jumps;
  std::size_t free_from = 0;
  for (auto j : p.jumps) {
    double apex = j.apex;
    detail::clamp_param(apex, 0.0, 1.0, "jump apex", warnings);
    j.apex = apex;
    if (j.start < free_from) {
      if (warnings) warnings->push_back("overlapping jump window at frame " + std::to_string(j.start) + " dropped");
      continue;
    }
    if (j.start >= p.frames || j.duration == 0) {
      if (warnings) warnings->push_back("jump window outside the sequence dropped");
      continue;
    }
    if (j.start + j.duration > p.frames) {
      if (warnings) warnings->push_back("jump window truncated to the sequence end");
      j.duration = p.frames - j.start;
    }
    jumps.push_back(j);
    free_from = j.start + j.duration;
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double phase0 = unit(rng);
  const double x0 = unit(rng) * 0.5 - 0.25;

  const double fps = static_cast<double>(p.fps);
  const double v = p.speed;
  const double f = p.stride_frequency;
  const double stride = v / f;
  const double lift = v > 0.0 ? p.step_height : 0.0;

  Motion m(p.frames, p.fps);
  std::size_t jumped_frames = 0;  // jump frames strictly before the current one
  for (std::size_t k = 0; k < p.frames; ++k) {
    const JumpWindow* active = nullptr;
    for (const auto& j : jumps)
      if (k >= j.start && k < j.start + j.duration) active = &j;

    // The gait clock stops while airborne; the body keeps moving forward.
    const double clock_frames = static_cast<double>(k - jumped_frames);
    double arc = 0.0;
    if (active) {
      const std::size_t i = k - active->start;
      const double u = static_cast<double>(i + 1) / static_cast<double>(active->duration + 1);
      arc = 4.0 * active->apex * u * (1.0 - u);
    }
    const double clock = clock_frames / fps;
    const double drift = v * (static_cast<double>(k) - clock_frames) / fps;

    m.at(feature_x(Joint::Pelvis), k) = x0 + v * static_cast<double>(k) / fps;
    m.at(feature_y(Joint::Pelvis), k) = p.pelvis_height + p.bob * std::cos(4.0 * pi * f * clock) + arc;

    for (Joint foot : {Joint::LeftFoot, Joint::RightFoot}) {
      const double offset = foot == Joint::LeftFoot ? 0.0 : 0.5;
      const double base = x0 - stride * (0.25 + phase0 + offset);
      const double g = f * clock + phase0 + offset;
      const double cycle = std::floor(g);
      const double within = g - cycle;
      double x = 0.0, y = 0.0;
      if (within < 0.5) {
        const double w = within / 0.5;
        x = base + stride * (cycle + detail::swing_progress(w));
        y = lift * std::sin(pi * w);
      } else {
        x = base + stride * (cycle + 1.0);
      }
      m.at(feature_x(foot), k) = x + drift;
      m.at(feature_y(foot), k) = y + arc;
    }
    if (active) ++jumped_frames;
  }
  return m;
}

struct DatasetOptions {
  std::size_t count = 2048;
  double jump_fraction = 0.3;
  std::size_t frames = kDefaultFrames;
  std::uint32_t fps = kDefaultFps;
};

/// Parameters of dataset sequence `index`, derived from (seed, index) only.
inline GaitParams sample_gait(std::uint64_t seed, std::size_t index, const DatasetOptions& opt = {}) {
  std::mt19937_64 rng(detail::mix_seed(seed, index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  GaitParams p;
  p.frames = opt.frames;
  p.fps = opt.fps;
  p.speed = uniform(0.5, 1.5);
  p.stride_frequency = uniform(0.5, 0.65);
  p.pelvis_height = uniform(0.85, 0.95);
  p.bob = uniform(0.01, 0.04);
  p.step_height = uniform(0.15, 0.25);
  if (unit(rng) < opt.jump_fraction && opt.frames >= 24) {
    const std::size_t n = unit(rng) < 0.5 ? 1 : 2;
    for (std::size_t tries = 0; p.jumps.size() < n && tries < 32; ++tries) {
      JumpWindow j;
      j.duration = 6 + static_cast<std::size_t>(unit(rng) * 7.0);
      j.apex = uniform(0.15, 0.35);
      const std::size_t span = opt.frames - j.duration - 8;
      j.start = 4 + static_cast<std::size_t>(unit(rng) * static_cast<double>(span));
      const bool clash = std::any_of(p.jumps.begin(), p.jumps.end(), [&](const JumpWindow& o) {
        return j.start < o.start + o.duration + 4 && o.start < j.start + j.duration + 4;
      });
      if (!clash) p.jumps.push_back(j);
    }
  }
  return p;
}

inline std::vector<Motion> generate_dataset(std::uint64_t seed, const DatasetOptions& opt = {}) {
  std::vector<Motion> out;
  out.reserve(opt.count);
  for (std::size_t i = 0; i < opt.count; ++i)
    out.push_back(generate_sequence(sample_gait(seed, i, opt), detail::mix_seed(seed ^ 0xD1B54A32D192ED03ull, i)));
  return out;
}

/// Per-feature mean and standard deviation pooled over frames and motions.
/// Defaults to the identity map.
struct DatasetStats {
  std::array<double, kFeatures> mean{};
  std::array<double, kFeatures> std{1, 1, 1, 1, 1, 1};
};

inline constexpr double kStdFloor = 1e-6;

inline DatasetStats fit_stats(const std::vector<Motion>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("fit_stats: empty dataset");
  DatasetStats s;
  std::array<double, kFeatures> sum{}, sq{};
  double count = 0.0;
  for (const auto& m : dataset) {
    for (std::size_t d = 0; d < kFeatures; ++d)
      for (std::size_t k = 0; k < m.frames; ++k) sum[d] += m.at(d, k);
    count += static_cast<double>(m.frames);
  }
  for (std::size_t d = 0; d < kFeatures; ++d) s.mean[d] = sum[d] / count;
  for (const auto& m : dataset)
    for (std::size_t d = 0; d < kFeatures; ++d)
      for (std::size_t k = 0; k < m.frames; ++k) {
        const double e = m.at(d, k) - s.mean[d];
        sq[d] += e * e;
      }
  for (std::size_t d = 0; d < kFeatures; ++d) s.std[d] = std::max(std::sqrt(sq[d] / count), kStdFloor);
  return s;
}

inline Motion normalize(const Motion& m, const DatasetStats& s) {
  Motion out = m;
  for (std::size_t d = 0; d < kFeatures; ++d)
    for (std::size_t k = 0; k < m.frames; ++k) out.at(d, k) = (m.at(d, k) - s.mean[d]) / s.std[d];
  return out;
}

inline Motion denormalize(const Motion& m, const DatasetStats& s) {
  Motion out = m;
  for (std::size_t d = 0; d < kFeatures; ++d)
    for (std::size_t k = 0; k < m.frames; ++k) out.at(d, k) = m.at(d, k) * s.std[d] + s.mean[d];
  return out;
}

}  // namespace dno
