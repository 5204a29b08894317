#include <gtest/gtest.h>
#include <unistd.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "dno/mbin.hpp"
#include "dno/metrics.hpp"
#include "dno/motion.hpp"
#include "dno/plots.hpp"

namespace {

using namespace dno;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("dno_motiondata_" + std::to_string(::getpid())) / name;
  fs::create_directories(d.parent_path());
  return d;
}

Motion random_motion(std::uint64_t seed, std::size_t frames = kDefaultFrames) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Motion m(frames, kDefaultFps);
  for (auto& v : m.data) v = n01(rng);
  return m;
}

TEST(Generator, SpeedTimesDuration) {
  GaitParams p;
  p.speed = 1.0;
  const Motion m = generate_sequence(p, 1);
  const double dx = m.at(feature_x(Joint::Pelvis), m.frames - 1) - m.at(feature_x(Joint::Pelvis), 0);
  EXPECT_NEAR(dx, 3.2, 0.05 * 3.2);
}

TEST(Generator, StaticCharacter) {
  GaitParams p;
  p.speed = 0.0;
  p.bob = 0.0;
  const Motion m = generate_sequence(p, 2);
  for (std::size_t d = 0; d < kFeatures; ++d)
    for (std::size_t k = 1; k < m.frames; ++k) EXPECT_EQ(m.at(d, k), m.at(d, 0));
  EXPECT_EQ(metrics::jitter(m), 0.0);
}

TEST(Generator, EightFrameJumpIsLabelled) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    GaitParams p;
    p.jumps = {{20, 8, 0.25}};
    const auto labels = label_frames(generate_sequence(p, seed));
    EXPECT_GE(std::count(labels.begin(), labels.end(), Action::Jump), 4) << "seed " << seed;
  }
}

TEST(Generator, DeterministicInParamsAndSeed) {
  GaitParams p;
  p.jumps = {{10, 6, 0.3}};
  EXPECT_EQ(generate_sequence(p, 5).data, generate_sequence(p, 5).data);
  EXPECT_NE(generate_sequence(p, 5).data, generate_sequence(p, 6).data);
}

TEST(Generator, StanceFootStaysPlanted) {
  GaitParams p;
  const Motion m = generate_sequence(p, 3);
  for (Joint foot : {Joint::LeftFoot, Joint::RightFoot})
    for (std::size_t k = 0; k + 1 < m.frames; ++k)
      if (m.at(feature_y(foot), k) == 0.0 && m.at(feature_y(foot), k + 1) == 0.0)
        EXPECT_LT(std::abs(m.at(feature_x(foot), k + 1) - m.at(feature_x(foot), k)), 0.01);
}

TEST(Generator, JumpFeetClearTheGround) {
  GaitParams p;
  p.jumps = {{20, 10, 0.3}};
  const Motion m = generate_sequence(p, 4);
  for (std::size_t k = 22; k < 28; ++k)
    for (Joint foot : {Joint::LeftFoot, Joint::RightFoot}) EXPECT_GT(m.at(feature_y(foot), k), 0.05);
}

TEST(Generator, OutOfRangeParamsAreClampedWithWarning) {
  GaitParams p;
  p.speed = -1.0;
  p.jumps = {{60, 10, 0.3}, {5, 8, 0.2}, {8, 4, 0.2}};
  std::vector<std::string> warnings;
  const Motion m = generate_sequence(p, 0, &warnings);
  EXPECT_TRUE(m.finite());
  EXPECT_GE(warnings.size(), 3u);
}

TEST(Generator, DatasetIsPhysicallyPlausible) {
  DatasetOptions opt;
  opt.count = 256;
  const auto data = generate_dataset(7, opt);
  ASSERT_EQ(data.size(), 256u);
  double skate = 0.0, jit = 0.0;
  std::size_t with_jumps = 0;
  for (const auto& m : data) {
    skate += metrics::foot_skate_ratio(m);
    jit += metrics::jitter(m);
    const auto l = label_frames(m);
    with_jumps += std::count(l.begin(), l.end(), Action::Jump) > 0;
  }
  EXPECT_LT(skate / 256.0, 0.05);
  EXPECT_LT(jit / 256.0, 1.0);
  EXPECT_GT(with_jumps, 40u);
  EXPECT_LT(with_jumps, 120u);
}

TEST(Generator, DatasetPrefixIsStable) {
  DatasetOptions small, large;
  small.count = 8;
  large.count = 32;
  const auto a = generate_dataset(3, small), b = generate_dataset(3, large);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].data, b[i].data);
}

TEST(Labels, BothFeetLiftedIsJump) {
  Motion m(8, 20);
  for (std::size_t k = 0; k < 8; ++k) {
    m.at(feature_y(Joint::LeftFoot), k) = 0.10;
    m.at(feature_y(Joint::RightFoot), k) = 0.10;
  }
  for (auto a : label_frames(m)) EXPECT_EQ(a, Action::Jump);
}

TEST(Labels, OneFootDownIsGround) {
  Motion m(8, 20);
  for (std::size_t k = 0; k < 8; ++k) m.at(feature_y(Joint::LeftFoot), k) = 0.10;
  for (auto a : label_frames(m)) EXPECT_EQ(a, Action::Ground);
}

TEST(Labels, ThresholdIsStrict) {
  Motion m(8, 20);
  for (std::size_t k = 0; k < 8; ++k) {
    m.at(feature_y(Joint::LeftFoot), k) = 0.05;
    m.at(feature_y(Joint::RightFoot), k) = 0.05;
  }
  for (auto a : label_frames(m)) EXPECT_EQ(a, Action::Ground);
}

TEST(Stats, ConstantMotionFloorsStd) {
  Motion m(16, 20);
  for (std::size_t d = 0; d < kFeatures; ++d)
    for (std::size_t k = 0; k < 16; ++k) m.at(d, k) = static_cast<double>(d);
  const auto s = fit_stats({m});
  for (std::size_t d = 0; d < kFeatures; ++d) EXPECT_EQ(s.std[d], kStdFloor);
  for (double v : normalize(m, s).data) EXPECT_EQ(v, 0.0);
}

TEST(Stats, RoundTrip) {
  const Motion m = random_motion(1);
  const auto s = fit_stats({m, random_motion(2)});
  const Motion back = denormalize(normalize(m, s), s);
  for (std::size_t i = 0; i < m.data.size(); ++i) EXPECT_NEAR(back.data[i], m.data[i], 1e-9);
}

TEST(Stats, MeanOfTwoMotions) {
  Motion a(4, 20), b(4, 20);
  for (auto& v : b.data) v = 2.0;
  const auto s = fit_stats({a, b});
  for (std::size_t d = 0; d < kFeatures; ++d) {
    EXPECT_EQ(s.mean[d], 1.0);
    EXPECT_EQ(s.std[d], 1.0);
  }
  EXPECT_THROW(fit_stats({}), std::invalid_argument);
}

TEST(Mbin, RoundTripIsBitIdentical) {
  const std::vector<Motion> ms{random_motion(1).quantized(), random_motion(2).quantized(), random_motion(3).quantized()};
  const auto path = scratch("three.mbin");
  save_mbin(path, ms, {{"kind", "test"}});
  const auto back = load_mbin(path);
  ASSERT_EQ(back.motions.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.motions[i].frames, ms[i].frames);
    EXPECT_EQ(back.motions[i].fps, ms[i].fps);
    EXPECT_EQ(std::memcmp(back.motions[i].data.data(), ms[i].data.data(), ms[i].data.size() * sizeof(double)), 0);
  }
  EXPECT_EQ(back.metadata.at("kind"), "test");
  EXPECT_EQ(encode_mbin(back.motions, back.metadata), encode_mbin(ms, {{"kind", "test"}}));
}

TEST(Mbin, StoresSinglePrecision) {
  const Motion m = random_motion(4);
  const auto back = decode_mbin(encode_mbin({m}), "memory").motions.at(0);
  EXPECT_EQ(back.data, m.quantized().data);
}

FormatError::Code decode_code(std::vector<std::uint8_t> bytes) {
  try {
    decode_mbin(bytes, "memory");
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no format error";
  return FormatError::Code::Malformed;
}

TEST(Mbin, BadMagic) {
  auto bytes = encode_mbin({random_motion(5)});
  std::memcpy(bytes.data(), "XXXX", 4);
  EXPECT_EQ(decode_code(bytes), FormatError::Code::BadMagic);
}

TEST(Mbin, Truncated) {
  auto bytes = encode_mbin({random_motion(5), random_motion(6)});
  bytes.resize(bytes.size() - 100);
  EXPECT_EQ(decode_code(bytes), FormatError::Code::Truncated);
}

TEST(Mbin, MissingFileIsIoError) { EXPECT_THROW(load_mbin(scratch("absent.mbin")), IoError); }

TEST(Plots, CsvHasOneRowPerFrameAndEightColumns) {
  const Motion m = generate_sequence(GaitParams{}, 1);
  std::istringstream in(motion_csv(m));
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 7);
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 7) << line;
    ++rows;
  }
  EXPECT_EQ(rows, m.frames);
}

std::size_t count_elements(const boost::property_tree::ptree& t, const std::string& name) {
  std::size_t n = 0;
  for (const auto& [k, child] : t) n += (k == name) + count_elements(child, name);
  return n;
}

TEST(Plots, SvgIsWellFormedWithOneCirclePerObstacle) {
  const Motion m = generate_sequence(GaitParams{}, 1);
  SdfScene scene;
  scene.keyframes[0] = {{{1.0, 0.5}, 0.3}};
  ObservedSet targets;
  targets.add({Joint::Pelvis, 40, {2.0, 0.9}, {}});
  const auto stem = scratch("plot");
  export_plots(m, stem, &scene, &targets);
  boost::property_tree::ptree tree;
  ASSERT_NO_THROW(boost::property_tree::read_xml(stem.string() + ".svg", tree));
  EXPECT_EQ(count_elements(tree, "circle"), 1u);
  EXPECT_EQ(count_elements(tree, "polyline"), 3u);

  scene.keyframes[30] = {{{2.0, 0.5}, 0.3}, {{3.0, 0.5}, 0.2}};
  std::istringstream svg(motion_svg(m, &scene));
  boost::property_tree::ptree two;
  ASSERT_NO_THROW(boost::property_tree::read_xml(svg, two));
  EXPECT_EQ(count_elements(two, "circle"), 3u);
  EXPECT_TRUE(fs::exists(stem.string() + ".csv"));
}

}  // namespace
