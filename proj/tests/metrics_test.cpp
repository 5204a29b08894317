#include <gtest/gtest.h>

#include "dno/apps.hpp"
#include "dno/metrics.hpp"

namespace {

using namespace dno;
using namespace dno::metrics;

Motion flat(std::size_t frames = 64) { return Motion(frames, kDefaultFps); }

TEST(Jitter, ConstantVelocityIsZero) {
  Motion m = flat();
  for (std::size_t k = 0; k < m.frames; ++k)
    for (Joint j : kJoints) m.at(feature_x(j), k) = 0.05 * static_cast<double>(k);
  EXPECT_NEAR(jitter(m), 0.0, 1e-9);
  EXPECT_EQ(jitter(flat()), 0.0);
}

TEST(Jitter, SingleBlip) {
  // Jerk terms 240, 240 and 80 over 3 joints x 61 windows, in units of 100.
  Motion m = flat();
  m.at(feature_x(Joint::Pelvis), 2) = 0.01;
  EXPECT_NEAR(jitter(m), 560.0 / 183.0 / 100.0, 1e-12);
  EXPECT_NEAR(jitter(m), 0.0306011, 1e-7);
  EXPECT_THROW(jitter(flat(3)), std::invalid_argument);
}

Motion sliding(std::size_t sliding_transitions) {
  Motion m = flat();
  double x = 0.0;
  for (std::size_t k = 0; k < m.frames; ++k) {
    m.at(feature_x(Joint::LeftFoot), k) = x;
    if (k < sliding_transitions) x += 0.03;
  }
  return m;
}

TEST(FootSkate, Ratios) {
  EXPECT_EQ(foot_skate_ratio(flat()), 0.0);
  EXPECT_EQ(foot_skate_ratio(sliding(63)), 1.0);
  EXPECT_DOUBLE_EQ(foot_skate_ratio(sliding(10)), 10.0 / 63.0);
}

TEST(FootSkate, LiftedFootDoesNotCount) {
  Motion m = sliding(63);
  for (std::size_t k = 0; k < m.frames; ++k) m.at(feature_y(Joint::LeftFoot), k) = 0.2;
  EXPECT_EQ(foot_skate_ratio(m), 0.0);
}

TEST(Mpjpe, Values) {
  const Motion a = generate_sequence(GaitParams{}, 1);
  EXPECT_EQ(mpjpe(a, a), 0.0);
  Motion b = a;
  for (std::size_t k = 0; k < b.frames; ++k)
    for (Joint j : kJoints) b.at(feature_x(j), k) += 0.05;
  EXPECT_NEAR(mpjpe(a, b), 5.0, 1e-9);
  Motion c = a;
  for (std::size_t k = 0; k < c.frames; ++k) c.at(feature_y(Joint::Pelvis), k) += 0.01;
  EXPECT_NEAR(mpjpe(a, c), 1.0 / 3.0, 1e-9);
  EXPECT_NEAR(mpjpe(a, c, {Joint::Pelvis}), 1.0, 1e-9);
  EXPECT_THROW(mpjpe(a, flat(8)), std::invalid_argument);
}

TEST(ObjectiveError, Values) {
  const Motion m = flat();
  ObservedSet exact;
  exact.add({Joint::Pelvis, 3, {0.0, 0.0}, {}});
  EXPECT_EQ(objective_error(m, exact), 0.0);
  ObservedSet off;
  off.add({Joint::Pelvis, 3, {0.3, 0.4}, {}});
  EXPECT_DOUBLE_EQ(objective_error(m, off), 0.5);
  ObservedSet masked;
  masked.add({Joint::Pelvis, 3, {0.3, 0.4}, {true, false}});
  EXPECT_DOUBLE_EQ(objective_error(m, masked), 0.3);
}

TEST(ContentPreservation, Values) {
  Motion ground = flat(), jumping = flat();
  for (std::size_t k = 0; k < 64; ++k)
    for (Joint f : {Joint::LeftFoot, Joint::RightFoot}) jumping.at(feature_y(f), k) = 0.3;
  EXPECT_EQ(content_preservation(ground, ground), 1.0);
  EXPECT_EQ(content_preservation(ground, jumping), 0.0);
  Motion partly = ground;
  for (std::size_t k = 10; k < 14; ++k)
    for (Joint f : {Joint::LeftFoot, Joint::RightFoot}) partly.at(feature_y(f), k) = 0.3;
  EXPECT_EQ(content_preservation(ground, partly), 0.9375);
}

std::vector<Motion> dataset(std::size_t n, std::uint64_t seed) {
  DatasetOptions o;
  o.count = n;
  return generate_dataset(seed, o);
}

TEST(Fmd, SelfDistanceIsZero) {
  const auto a = dataset(64, 1);
  EXPECT_NEAR(fmd(a, a), 0.0, 1e-8);
}

TEST(Fmd, OneDimensionalClosedForm) {
  Eigen::VectorXd m0(1), m1(1);
  m0 << 0.0;
  m1 << 1.0;
  Eigen::MatrixXd c1(1, 1), c4(1, 1);
  c1 << 1.0;
  c4 << 4.0;
  EXPECT_NEAR(frechet_distance(m0, c1, m1, c1), 1.0, 1e-12);
  EXPECT_NEAR(frechet_distance(m0, c1, m0, c4), 1.0, 1e-12);
}

TEST(Fmd, NoiseMovesTheDistribution) {
  const auto data = dataset(128, 2);
  const std::vector<Motion> a(data.begin(), data.begin() + 64), b(data.begin() + 64, data.end());
  std::vector<Motion> noisy;
  for (std::size_t i = 0; i < b.size(); ++i) noisy.push_back(apps::add_noise(b[i], 0.05, i));
  EXPECT_GT(fmd(a, noisy), fmd(a, b));
}

TEST(Fmd, RequiresThirtyTwoMotions) {
  const auto a = dataset(32, 3);
  EXPECT_NO_THROW(fmd(a, a));
  const std::vector<Motion> few(a.begin(), a.begin() + 31);
  EXPECT_THROW(fmd(few, a), std::invalid_argument);
  EXPECT_EQ(motion_features(a[0]).size(), static_cast<Eigen::Index>(kFmdFeatures));
}

}  // namespace
