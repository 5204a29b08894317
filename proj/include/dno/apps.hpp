#pragma once

// Task builders for editing, refinement, completion, blending and
// in-betweening, plus the criterion closures each of them optimizes.

#include <algorithm>
#include <memory>
#include <random>
#include <stdexcept>
#include <vector>

#include "dno/dno.hpp"
#include "dno/guided.hpp"
#include "dno/objectives.hpp"

namespace dno::apps {

/// Editing keyframes fall in [40/64 M, 56/64 M]; pelvis targets move along x
/// by up to this many meters.
inline constexpr double kEditOffset = 1.0;

inline std::size_t edit_frame_lo(std::size_t frames) { return 40 * frames / 64; }
inline std::size_t edit_frame_hi(std::size_t frames) { return 56 * frames / 64; }

/// One random pelvis ground-plane target for candidate `candidate` of an input.
inline ObservedSet edit_target(const Motion& input, std::uint64_t seed, std::size_t candidate) {
  std::mt19937_64 rng(candidate_seed(seed, candidate, 2));
  std::uniform_int_distribution<std::size_t> frame(edit_frame_lo(input.frames), edit_frame_hi(input.frames));
  std::uniform_real_distribution<double> offset(-kEditOffset, kEditOffset);
  Observation o;
  o.joint = Joint::Pelvis;
  o.frame = frame(rng);
  o.target = input.joint(Joint::Pelvis, o.frame);
  o.target.x += offset(rng);
  o.axes = {true, false};
  ObservedSet s;
  s.add(o);
  return s;
}

/// x coordinates of every joint on every frame; heights stay free.
inline ObservedSet horizontal_of(const Motion& m) {
  ObservedSet o;
  for (std::size_t k = 0; k < m.frames; ++k)
    for (Joint j : kJoints) o.add({j, k, m.joint(j, k), {true, false}});
  return o;
}

/// Full poses on the first and last frames.
inline ObservedSet endpoints_of(const Motion& start, const Motion& end) {
  if (start.frames != end.frames) throw std::invalid_argument("in-between: motions differ in length");
  ObservedSet o;
  for (Joint j : kJoints) {
    o.add({j, 0, start.joint(j, 0), {}});
    o.add({j, end.frames - 1, end.joint(j, end.frames - 1), {}});
  }
  return o;
}

inline constexpr std::size_t kBlendWindow = 10;

struct Blend {
  Motion joined;
  ObservedSet observed;
  std::size_t seam = 0;
};

/// First half of `a` followed by the second half of `b`, with `b` shifted
/// along x so both pelvis tracks meet at the seam. Every joint is observed
/// except inside the 10-frame window centered on the seam.
inline Blend blend_of(const Motion& a, const Motion& b) {
  if (a.frames != b.frames) throw std::invalid_argument("blend: motions differ in length");
  if (a.frames < 2 * kBlendWindow) throw std::invalid_argument("blend: motions too short for the seam window");
  Blend out;
  const std::size_t m = a.frames, seam = m / 2;
  out.seam = seam;
  out.joined = Motion(m, a.fps);
  const double shift = a.at(feature_x(Joint::Pelvis), seam - 1) - b.at(feature_x(Joint::Pelvis), seam - 1);
  for (std::size_t d = 0; d < kFeatures; ++d)
    for (std::size_t k = 0; k < m; ++k)
      out.joined.at(d, k) = k < seam ? a.at(d, k) : b.at(d, k) + (d % 2 == 0 ? shift : 0.0);
  const std::size_t lo = seam - kBlendWindow / 2, hi = lo + kBlendWindow;
  for (std::size_t k = 0; k < m; ++k)
    if (k < lo || k >= hi)
      for (Joint j : kJoints) out.observed.add({j, k, out.joined.joint(j, k), {}});
  return out;
}

/// Adds i.i.d. Gaussian noise of `sigma` meters to every coordinate.
inline Motion add_noise(const Motion& m, double sigma, std::uint64_t seed) {
  Motion out = m;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& v : out.data) v += n(rng);
  return out;
}

/// Pose + obstacle + latent-content criterion with one observed set per
/// candidate (or one shared set) and a shared reference latent.
inline Criterion edit_criterion(std::vector<ObservedSet> per_candidate, std::shared_ptr<const SdfScene> scene,
                                std::vector<double> reference, LossWeights w) {
  auto sets = std::make_shared<const std::vector<ObservedSet>>(std::move(per_candidate));
  auto ref = std::make_shared<const std::vector<double>>(std::move(reference));
  return [sets, scene, ref, w](const Tensor& x, const Tensor& latent, std::size_t c) {
    const ObservedSet& o = sets->size() == 1 ? sets->front() : sets->at(c);
    return compose_edit(x, latent, o, scene.get(), Tensor(latent.shape(), *ref), w);
  };
}

/// Pose + latent decorrelation criterion, one observed set per candidate.
inline Criterion refine_criterion(std::vector<ObservedSet> per_candidate, LossWeights w, DecorrMode mode) {
  auto sets = std::make_shared<const std::vector<ObservedSet>>(std::move(per_candidate));
  return [sets, w, mode](const Tensor& x, const Tensor& latent, std::size_t c) {
    const ObservedSet& o = sets->size() == 1 ? sets->front() : sets->at(c);
    return compose_refine(x, latent, o, w, mode);
  };
}

/// The guidance analog of an edit: pose and obstacle terms on the prediction.
inline GuidanceCriterion guidance_criterion(std::vector<ObservedSet> per_row, std::shared_ptr<const SdfScene> scene,
                                            LossWeights w) {
  auto sets = std::make_shared<const std::vector<ObservedSet>>(std::move(per_row));
  return [sets, scene, w](const Tensor& x, std::size_t r) {
    const ObservedSet& o = sets->size() == 1 ? sets->front() : sets->at(r);
    Tensor total = loss_pose(x, o);
    if (scene && !scene->keyframes.empty()) total = tg::add(total, tg::scale(loss_obs(x, *scene), w.obs));
    return total;
  };
}

/// Decodes latents (one per row) with the plain solver; returns motions in meters.
inline std::vector<Motion> decode(const std::vector<std::vector<double>>& latents, const Denoiser& model,
                                  const NoiseSchedule& sched, std::size_t steps, std::uint32_t fps = kDefaultFps) {
  if (latents.empty()) return {};
  const std::size_t w = model.config.input_dim();
  std::vector<double> flat;
  for (const auto& l : latents) flat.insert(flat.end(), l.begin(), l.end());
  const Tensor x = ddim_solve(Tensor(tg::Shape{latents.size(), w}, std::move(flat)), denoise_fn(model), sched, {steps, false});
  std::vector<Motion> out;
  for (std::size_t r = 0; r < latents.size(); ++r) {
    std::vector<double> row(x.data().begin() + static_cast<std::ptrdiff_t>(r * w),
                            x.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
    out.push_back(denormalize(Motion(model.config.frames, fps, std::move(row)), model.stats));
  }
  return out;
}

/// Inverts each motion to its latent (one row each).
inline std::vector<std::vector<double>> invert(const std::vector<Motion>& motions, const Denoiser& model,
                                               const NoiseSchedule& sched, std::size_t steps = kInversionSteps) {
  if (motions.empty()) return {};
  std::vector<double> flat;
  for (const auto& m : motions) {
    if (m.frames != model.config.frames) throw std::invalid_argument("invert: motion length does not match model");
    const auto n = normalize(m, model.stats);
    flat.insert(flat.end(), n.data.begin(), n.data.end());
  }
  const std::size_t w = model.config.input_dim();
  const Tensor lat = ddim_invert(Tensor(tg::Shape{motions.size(), w}, std::move(flat)), denoise_fn(model), sched, steps);
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < motions.size(); ++r)
    out.emplace_back(lat.data().begin() + static_cast<std::ptrdiff_t>(r * w),
                     lat.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
  return out;
}

/// Guided samples from per-row latents; returns motions in meters.
inline std::vector<Motion> guided(const std::vector<std::vector<double>>& latents, const Denoiser& model,
                                  const NoiseSchedule& sched, const GuidanceCriterion& criterion,
                                  const GuidedOptions& opt, std::uint32_t fps = kDefaultFps) {
  if (latents.empty()) return {};
  const std::size_t w = model.config.input_dim();
  std::vector<double> flat;
  for (const auto& l : latents) flat.insert(flat.end(), l.begin(), l.end());
  const Tensor x = guided_sample(Tensor(tg::Shape{latents.size(), w}, std::move(flat)), model, sched, criterion, opt);
  std::vector<Motion> out;
  for (std::size_t r = 0; r < latents.size(); ++r) {
    std::vector<double> row(x.data().begin() + static_cast<std::ptrdiff_t>(r * w),
                            x.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
    out.push_back(denormalize(Motion(model.config.frames, fps, std::move(row)), model.stats));
  }
  return out;
}

}  // namespace dno::apps
