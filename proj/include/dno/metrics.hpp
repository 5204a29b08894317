#pragma once

// Motion quality and task metrics.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dno/motion.hpp"
#include "dno/objectives.hpp"

namespace dno::metrics {

/// Mean jerk magnitude over joints, in units of 10^2 m/s^3. Acceleration uses
/// the central second difference; jerk the forward difference of that.
inline double jitter(const Motion& m) {
  if (m.frames < 4) throw std::invalid_argument("jitter: need at least 4 frames");
  const double fps = m.fps;
  double total = 0.0;
  std::size_t count = 0;
  for (Joint j : kJoints) {
    auto accel = [&](std::size_t k, std::size_t f) {
      return (m.at(f, k + 1) - 2.0 * m.at(f, k) + m.at(f, k - 1)) * fps * fps;
    };
    for (std::size_t k = 1; k + 2 < m.frames; ++k) {
      const double jx = (accel(k + 1, feature_x(j)) - accel(k, feature_x(j))) * fps;
      const double jy = (accel(k + 1, feature_y(j)) - accel(k, feature_y(j))) * fps;
      total += std::hypot(jx, jy);
      ++count;
    }
  }
  return total / static_cast<double>(count) / 100.0;
}

inline constexpr double kSkateDistance = 0.025;

/// Fraction of frame transitions where a foot below the contact height moves
/// horizontally by more than 2.5 cm.
inline double foot_skate_ratio(const Motion& m) {
  if (m.frames < 2) return 0.0;
  std::size_t skating = 0;
  for (std::size_t k = 0; k + 1 < m.frames; ++k) {
    bool any = false;
    for (Joint foot : {Joint::LeftFoot, Joint::RightFoot}) {
      const bool low = m.at(feature_y(foot), k) < kContactHeight;
      const double dx = std::abs(m.at(feature_x(foot), k + 1) - m.at(feature_x(foot), k));
      any = any || (low && dx > kSkateDistance);
    }
    if (any) ++skating;
  }
  return static_cast<double>(skating) / static_cast<double>(m.frames - 1);
}

/// Mean per-joint position error in centimeters.
inline double mpjpe(const Motion& a, const Motion& b, const std::vector<Joint>& joints = {kJoints.begin(), kJoints.end()}) {
  if (a.frames != b.frames) throw std::invalid_argument("mpjpe: frame counts differ");
  if (joints.empty()) throw std::invalid_argument("mpjpe: no joints selected");
  double total = 0.0;
  for (Joint j : joints)
    for (std::size_t k = 0; k < a.frames; ++k) {
      const Point2 p = a.joint(j, k), q = b.joint(j, k);
      total += std::hypot(p.x - q.x, p.y - q.y);
    }
  return 100.0 * total / static_cast<double>(joints.size() * a.frames);
}

/// Mean Euclidean distance (masked axes) between targets and joints, in meters.
inline double objective_error(const Motion& m, const ObservedSet& observed) {
  if (observed.empty()) return 0.0;
  double total = 0.0;
  for (const auto& o : observed.entries()) {
    const Point2 p = m.joint(o.joint, o.frame);
    const double dx = o.axes.x ? p.x - o.target.x : 0.0;
    const double dy = o.axes.y ? p.y - o.target.y : 0.0;
    total += std::hypot(dx, dy);
  }
  return total / static_cast<double>(observed.size());
}

/// Fraction of frames with the same action label in both motions.
inline double content_preservation(const Motion& before, const Motion& after) {
  if (before.frames != after.frames) throw std::invalid_argument("content_preservation: frame counts differ");
  const auto a = label_frames(before), b = label_frames(after);
  std::size_t same = 0;
  for (std::size_t k = 0; k < a.size(); ++k) same += a[k] == b[k];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

inline constexpr std::size_t kFmdFeatures = 14;
inline constexpr std::size_t kFmdMinSet = 32;

/// Hand-crafted per-motion descriptor: speed mean/std per joint, pelvis height
/// mean/std, mean foot heights, foot contact ratios, stride width mean/std.
inline Eigen::VectorXd motion_features(const Motion& m) {
  Eigen::VectorXd f(kFmdFeatures);
  auto mean_std = [](const std::vector<double>& v) {
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mu) * (x - mu);
    return std::array<double, 2>{mu, std::sqrt(var / static_cast<double>(v.size()))};
  };
  std::size_t i = 0;
  for (Joint j : kJoints) {
    std::vector<double> speed;
    for (std::size_t k = 0; k + 1 < m.frames; ++k) {
      const Point2 p = m.joint(j, k), q = m.joint(j, k + 1);
      speed.push_back(std::hypot(q.x - p.x, q.y - p.y) * m.fps);
    }
    if (speed.empty()) speed.push_back(0.0);
    const auto [mu, sd] = mean_std(speed);
    f[i++] = mu;
    f[i++] = sd;
  }
  std::vector<double> height, lh, rh, width;
  double lc = 0.0, rc = 0.0;
  for (std::size_t k = 0; k < m.frames; ++k) {
    height.push_back(m.at(feature_y(Joint::Pelvis), k));
    lh.push_back(m.at(feature_y(Joint::LeftFoot), k));
    rh.push_back(m.at(feature_y(Joint::RightFoot), k));
    width.push_back(std::abs(m.at(feature_x(Joint::LeftFoot), k) - m.at(feature_x(Joint::RightFoot), k)));
    lc += lh.back() < kContactHeight;
    rc += rh.back() < kContactHeight;
  }
  const auto [hm, hs] = mean_std(height);
  f[i++] = hm;
  f[i++] = hs;
  f[i++] = mean_std(lh)[0];
  f[i++] = mean_std(rh)[0];
  f[i++] = lc / static_cast<double>(m.frames);
  f[i++] = rc / static_cast<double>(m.frames);
  const auto [wm, ws] = mean_std(width);
  f[i++] = wm;
  f[i++] = ws;
  return f;
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)
inline double frechet_distance(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                               const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
  const double cross = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

/// Rows are samples. Returns the mean and the regularized sample covariance.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> gaussian_fit(const Eigen::MatrixXd& features,
                                                                double ridge = 1e-6) {
  const Eigen::VectorXd mu = features.colwise().mean();
  const Eigen::MatrixXd centered = features.rowwise() - mu.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
  cov += ridge * Eigen::MatrixXd::Identity(cov.rows(), cov.cols());
  return {mu, cov};
}

inline Eigen::MatrixXd feature_matrix(const std::vector<Motion>& set) {
  Eigen::MatrixXd f(static_cast<Eigen::Index>(set.size()), kFmdFeatures);
  for (std::size_t i = 0; i < set.size(); ++i) f.row(static_cast<Eigen::Index>(i)) = motion_features(set[i]).transpose();
  return f;
}

/// Frechet distance between Gaussian fits of the two sets' motion features.
inline double fmd(const std::vector<Motion>& a, const std::vector<Motion>& b) {
  if (a.size() < kFmdMinSet || b.size() < kFmdMinSet)
    throw std::invalid_argument("fmd: each set needs at least 32 motions");
  const auto [ma, ca] = gaussian_fit(feature_matrix(a));
  const auto [mb, cb] = gaussian_fit(feature_matrix(b));
  return frechet_distance(ma, ca, mb, cb);
}

struct MetricsReport {
  double jitter = 0.0;
  double foot_skate = 0.0;
  double mpjpe = 0.0;
  double objective_error = 0.0;
  double content_preservation = 1.0;
  std::optional<double> fmd;
};

}  // namespace dno::metrics
