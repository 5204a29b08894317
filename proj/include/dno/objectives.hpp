#pragma once

// Task criteria evaluated on a decoded motion (in meters) and on the noise
// latent being optimized. Every loss is built from tensor primitives, so it is
// differentiable through the recording graph.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dno/motion.hpp"
#include "dno/tensor.hpp"

namespace dno {

struct AxisMask {
  bool x = true;
  bool y = true;
  bool any() const noexcept { return x || y; }
};

struct Observation {
  Joint joint = Joint::Pelvis;
  std::size_t frame = 0;
  Point2 target;
  AxisMask axes;
};

/// Target locations keyed by (joint, keyframe). Entries are unique per key.
class ObservedSet {
 public:
  ObservedSet() = default;

  /// Throws std::invalid_argument on a duplicate (joint, frame) key or an
  /// empty axis mask.
  void add(const Observation& o) {
    if (!o.axes.any()) throw std::invalid_argument("observation masks out both axes");
    const auto key = std::make_pair(static_cast<int>(o.joint), o.frame);
    if (!keys_.insert(key).second)
      throw std::invalid_argument(std::string("duplicate observation for ") + joint_name(o.joint) +
                                  " at frame " + std::to_string(o.frame));
    entries_.push_back(o);
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<Observation>& entries() const noexcept { return entries_; }

  /// Entries ordered by (frame, joint) so reductions do not depend on insertion order.
  std::vector<Observation> canonical() const {
    auto out = entries_;
    std::sort(out.begin(), out.end(), [](const Observation& a, const Observation& b) {
      return std::make_pair(a.frame, static_cast<int>(a.joint)) < std::make_pair(b.frame, static_cast<int>(b.joint));
    });
    return out;
  }

  void validate(std::size_t frames) const {
    for (const auto& o : entries_)
      if (o.frame >= frames)
        throw std::out_of_range("observation frame " + std::to_string(o.frame) + " outside [0, " +
                                std::to_string(frames) + ")");
  }

  /// Every joint on every frame of `m`, both axes.
  static ObservedSet all_of(const Motion& m) {
    ObservedSet o;
    for (std::size_t k = 0; k < m.frames; ++k)
      for (Joint j : kJoints) o.add({j, k, m.joint(j, k), {}});
    return o;
  }

 private:
  std::vector<Observation> entries_;
  std::set<std::pair<int, std::size_t>> keys_;
};

struct Circle {
  Point2 center;
  double radius = 0.5;
};

/// Circular obstacles that may change over time. A frame uses the entry of
/// the closest keyframe at or before it; frames before the first keyframe are
/// obstacle-free.
struct SdfScene {
  std::map<std::size_t, std::vector<Circle>> keyframes;
  double tau = 0.1;

  const std::vector<Circle>* active(std::size_t frame) const {
    auto it = keyframes.upper_bound(frame);
    if (it == keyframes.begin()) return nullptr;
    return &std::prev(it)->second;
  }
  bool empty() const {
    return std::all_of(keyframes.begin(), keyframes.end(), [](const auto& kv) { return kv.second.empty(); });
  }
  void validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("scene safe distance must be positive");
    for (const auto& [k, circles] : keyframes)
      for (const auto& c : circles)
        if (!(c.radius > 0.0)) throw std::invalid_argument("obstacle radius must be positive");
  }
};

inline constexpr double kNoObstacleDistance = 1e6;

inline double sdf_eval(const SdfScene& scene, Point2 p, std::size_t frame) {
  const auto* circles = scene.active(frame);
  if (!circles || circles->empty()) return kNoObstacleDistance;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : *circles) best = std::min(best, std::hypot(p.x - c.center.x, p.y - c.center.y) - c.radius);
  return best;
}

struct LossWeights {
  double obs = 1.0;
  double cont = 0.01;
  double decorr = 1e3;
};

enum class DecorrMode { Squared, Linear };

inline const char* decorr_mode_name(DecorrMode m) { return m == DecorrMode::Squared ? "squared" : "linear"; }

/// A scalar criterion plus its named parts (for traces).
struct CriterionValue {
  Tensor total;
  std::vector<std::pair<std::string, double>> components;
};

namespace detail {

inline std::size_t motion_frames(const Tensor& x) {
  if (x.rank() != 2 || x.shape()[0] != kFeatures)
    throw tg::ShapeError("expected a motion tensor of shape [6,M], got " + tg::to_string(x.shape()));
  return x.shape()[1];
}

inline Tensor flat(const Tensor& x) { return tg::reshape(x, tg::Shape{x.numel()}); }

}  // namespace detail

/// Mean over observations of the L1 distance between joint and target on the masked axes.
inline Tensor loss_pose(const Tensor& x, const ObservedSet& observed) {
  const std::size_t frames = detail::motion_frames(x);
  if (observed.empty()) throw std::invalid_argument("loss_pose: empty observed set");
  observed.validate(frames);
  std::vector<std::size_t> index;
  std::vector<double> target;
  for (const auto& o : observed.canonical()) {
    if (o.axes.x) {
      index.push_back(feature_x(o.joint) * frames + o.frame);
      target.push_back(o.target.x);
    }
    if (o.axes.y) {
      index.push_back(feature_y(o.joint) * frames + o.frame);
      target.push_back(o.target.y);
    }
  }
  const std::size_t n = target.size();
  Tensor picked = tg::gather(detail::flat(x), std::move(index));
  Tensor residual = tg::abs(tg::sub(picked, Tensor(tg::Shape{n}, std::move(target))));
  return tg::scale(tg::sum(residual), 1.0 / static_cast<double>(observed.size()));
}

/// Signed distances of joint `j` to the scene on every frame, shape [M].
inline Tensor joint_sdf(const Tensor& x, const SdfScene& scene, Joint j) {
  const std::size_t frames = detail::motion_frames(x);
  std::size_t slots = 0;
  for (std::size_t k = 0; k < frames; ++k)
    if (const auto* c = scene.active(k)) slots = std::max(slots, c->size());
  if (slots == 0) return Tensor::full(tg::Shape{frames}, kNoObstacleDistance);

  std::vector<std::size_t> ix(frames), iy(frames);
  for (std::size_t k = 0; k < frames; ++k) {
    ix[k] = feature_x(j) * frames + k;
    iy[k] = feature_y(j) * frames + k;
  }
  const Tensor fx = detail::flat(x);
  const Tensor px = tg::gather(fx, ix);
  const Tensor py = tg::gather(fx, iy);
  // Frames with fewer obstacles than `slots` get a far-away placeholder
  // whose distance always exceeds the safe threshold.
  constexpr double kFar = 1e3;
  std::optional<Tensor> best;
  for (std::size_t s = 0; s < slots; ++s) {
    std::vector<double> cx(frames, kFar), cy(frames, kFar), r(frames, 1.0);
    for (std::size_t k = 0; k < frames; ++k) {
      const auto* c = scene.active(k);
      if (c && s < c->size()) {
        cx[k] = (*c)[s].center.x;
        cy[k] = (*c)[s].center.y;
        r[k] = (*c)[s].radius;
      }
    }
    const tg::Shape sh{frames};
    Tensor dist = tg::sqrt(tg::add(tg::square(tg::sub(px, Tensor(sh, std::move(cx)))),
                                   tg::square(tg::sub(py, Tensor(sh, std::move(cy))))));
    Tensor sd = tg::sub(dist, Tensor(sh, std::move(r)));
    best = best ? tg::minimum(*best, sd) : sd;
  }
  return *best;
}

/// Sum over joints and frames of -min(SDF, tau).
inline Tensor loss_obs(const Tensor& x, const SdfScene& scene) {
  std::optional<Tensor> total;
  for (Joint j : kJoints) {
    Tensor term = tg::sum(tg::min_const(joint_sdf(x, scene, j), scene.tau));
    total = total ? tg::add(*total, term) : term;
  }
  return tg::scale(*total, -1.0);
}

/// Euclidean distance between the latent and its reference.
inline Tensor loss_content(const Tensor& latent, const Tensor& reference) {
  if (latent.shape() != reference.shape())
    throw tg::ShapeError("loss_content: shapes " + tg::to_string(latent.shape()) + " and " +
                         tg::to_string(reference.shape()) + " differ");
  return tg::sqrt(tg::sum(tg::square(tg::sub(latent, reference))));
}

/// Adjacent-frame mean inner products of the latent at temporal scales
/// M, M/2, ..., 2 (average pooling pairs of frames between scales), each
/// squared (default) or taken as is, summed over scales.
inline Tensor loss_decorr(const Tensor& latent, DecorrMode mode = DecorrMode::Squared) {
  if (latent.rank() != 2) throw tg::ShapeError("loss_decorr: expected [D,M], got " + tg::to_string(latent.shape()));
  const std::size_t d = latent.shape()[0];
  std::size_t m = latent.shape()[1];
  if (m < 2 || (m & (m - 1)) != 0)
    throw std::invalid_argument("loss_decorr: frame count " + std::to_string(m) + " is not a power of two");
  Tensor cur = latent;
  std::optional<Tensor> total;
  while (m >= 2) {
    std::vector<std::size_t> head(m - 1), tail(m - 1);
    for (std::size_t i = 0; i + 1 < m; ++i) {
      head[i] = i;
      tail[i] = i + 1;
    }
    Tensor rho = tg::scale(tg::sum(tg::mul(tg::gather(cur, head), tg::gather(cur, tail))),
                           1.0 / static_cast<double>(m * d));
    Tensor term = mode == DecorrMode::Squared ? tg::square(rho) : rho;
    total = total ? tg::add(*total, term) : term;
    if (m > 2) cur = tg::avgpool2(cur);
    m /= 2;
  }
  return *total;
}

/// Pose targets, obstacle avoidance and latent content preservation.
inline CriterionValue compose_edit(const Tensor& x, const Tensor& latent, const ObservedSet& observed,
                                   const SdfScene* scene, const Tensor& reference, const LossWeights& w) {
  CriterionValue out;
  std::optional<Tensor> total;
  auto accumulate = [&](const char* name, const Tensor& term, double weight) {
    out.components.emplace_back(name, term.item());
    Tensor t = weight == 1.0 ? term : tg::scale(term, weight);
    total = total ? tg::add(*total, t) : t;
  };
  if (!observed.empty()) accumulate("pose", loss_pose(x, observed), 1.0);
  if (scene && !scene->keyframes.empty()) accumulate("obs", loss_obs(x, *scene), w.obs);
  accumulate("cont", loss_content(latent, reference), w.cont);
  out.total = *total;
  return out;
}

/// Pose targets plus the latent decorrelation penalty.
inline CriterionValue compose_refine(const Tensor& x, const Tensor& latent, const ObservedSet& observed,
                                     const LossWeights& w, DecorrMode mode = DecorrMode::Squared) {
  CriterionValue out;
  Tensor pose = loss_pose(x, observed);
  out.components.emplace_back("pose", pose.item());
  if (w.decorr == 0.0) {
    out.total = pose;
    return out;
  }
  Tensor decorr = loss_decorr(latent, mode);
  out.components.emplace_back("decorr", decorr.item());
  out.total = tg::add(pose, tg::scale(decorr, w.decorr));
  return out;
}

/// Builds a [6,M] tensor from a motion.
inline Tensor to_tensor(const Motion& m) { return Tensor(tg::Shape{kFeatures, m.frames}, m.data); }

inline Motion to_motion(const Tensor& t, std::uint32_t fps = kDefaultFps) {
  return Motion(t.shape().back(), fps, t.to_vector());
}

}  // namespace dno
