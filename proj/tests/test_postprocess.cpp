#include <gtest/gtest.h>

#include <random>

#include "dmcs/postprocess.hpp"
#include "test_util.hpp"

using namespace dmcs;

namespace {

// Two-channel probability map with P(gland) = fg at each pixel.
ProbabilityMap<double> probs_from(const Grid<double>& fg) {
  Tensor<double> t(2, fg.height, fg.width);
  for (std::size_t i = 0; i < fg.size(); ++i) {
    t.channel(1)[i] = fg.values[i];
    t.channel(0)[i] = 1.0 - fg.values[i];
  }
  return ProbabilityMap<double>(t);
}

std::size_t foreground(const InstanceMap& m) {
  return static_cast<std::size_t>(std::count_if(m.values.begin(), m.values.end(), [](auto v) { return v != 0; }));
}

PostprocessConfig plain() {
  PostprocessConfig c;
  c.min_area = 0;
  c.fill_holes = false;
  c.dilation_radius = 0;
  return c;
}

}  // namespace

TEST(ConnectedComponents, Checkerboard) {
  BinaryMask m(7, 9, 0);
  int on = 0;
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x)
      if ((x + y) % 2 == 0) {
        m(y, x) = 1;
        ++on;
      }
  const auto cc = connected_components(m);
  EXPECT_EQ(count_instances(cc), on);
  EXPECT_TRUE(is_canonical(cc));
}

TEST(ConnectedComponents, FullMask) {
  BinaryMask m(5, 6, 1);
  const auto cc = connected_components(m);
  EXPECT_EQ(count_instances(cc), 1);
  for (auto v : cc.values) EXPECT_EQ(v, 1);
}

TEST(ConnectedComponents, MatchesBfsOracle) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 80; ++t) {
    BinaryMask m(32, 32, 0);
    const int density = 2 + static_cast<int>(rng() % 6);
    for (auto& v : m.values) v = (rng() % 10) < static_cast<unsigned>(density);
    const auto a = connected_components(m);
    const auto b = dmcs::testing::bfs_components(m);
    ASSERT_TRUE(dmcs::testing::same_partition(a, b)) << "mask " << t;
    EXPECT_EQ(a, b);  // both number components by first pixel in raster order
  }
}

TEST(Extract, AllBackgroundIsEmpty) {
  Grid<double> fg(16, 16, 0.0);
  const auto inst = extract_instances(probs_from(fg), static_cast<const Tensor<double>*>(nullptr), PostprocessConfig{});
  EXPECT_EQ(count_instances(inst), 0);
}

TEST(Extract, EdgeLineSeparatesBlobs) {
  // One 20x30 high-probability slab with a 2-px predicted edge line across it.
  Grid<double> fg(24, 34, 0.0);
  Tensor<double> edge(1, 24, 34, 0.0);
  for (int y = 2; y < 22; ++y)
    for (int x = 2; x < 32; ++x) fg(y, x) = 0.9;
  for (int y = 2; y < 22; ++y)
    for (int x = 16; x < 18; ++x) edge(0, y, x) = 0.95;
  auto cfg = PostprocessConfig{};
  cfg.min_area = 20;
  const auto probs = probs_from(fg);
  const auto split = extract_instances(probs, &edge, cfg);
  EXPECT_EQ(count_instances(split), 2);
  // oracle: components of the thresholded, suppressed mask
  BinaryMask mask(24, 34, 0);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 34; ++x) mask(y, x) = fg(y, x) >= 0.5 && edge(0, y, x) < 0.5;
  EXPECT_EQ(count_instances(dmcs::testing::bfs_components(mask)), 2);
  // dilation gives the suppressed band back to the two sides
  for (int y = 2; y < 22; ++y) {
    EXPECT_NE(split(y, 16), 0);
    EXPECT_NE(split(y, 17), 0);
    EXPECT_NE(split(y, 16), split(y, 17));
  }

  cfg.edge_suppression = false;
  EXPECT_EQ(count_instances(extract_instances(probs, &edge, cfg)), 1);
}

TEST(Extract, FillHoles) {
  Grid<double> fg(20, 20, 0.0);
  for (int y = 3; y < 17; ++y)
    for (int x = 3; x < 17; ++x) fg(y, x) = 0.8;
  for (int y = 8; y < 11; ++y)
    for (int x = 8; x < 12; ++x) fg(y, x) = 0.1;  // 12-px hole
  auto cfg = plain();
  cfg.fill_holes = true;
  const auto inst = extract_instances(probs_from(fg), static_cast<const Tensor<double>*>(nullptr), cfg);
  EXPECT_EQ(count_instances(inst), 1);
  EXPECT_EQ(foreground(inst), 14u * 14u);
  cfg.fill_holes = false;
  EXPECT_EQ(foreground(extract_instances(probs_from(fg), static_cast<const Tensor<double>*>(nullptr), cfg)),
            14u * 14u - 12u);
}

TEST(Extract, HoleBetweenTwoObjectsStays) {
  // A background pocket bordered by two different objects is not filled.
  InstanceMap inst(7, 7, 0);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x)
      if (y == 0 || y == 6 || x == 0 || x == 6) inst(y, x) = x < 3 ? 1 : 2;
  for (int y = 1; y < 6; ++y) inst(y, 3) = 2;
  const auto filled = fill_instance_holes(inst);
  EXPECT_EQ(filled(3, 1), 0);
  EXPECT_EQ(filled(3, 5), 2);  // enclosed by object 2 alone
}

TEST(Extract, MinAreaRemovesSmallComponents) {
  Grid<double> fg(20, 20, 0.0);
  for (int y = 1; y < 4; ++y)
    for (int x = 1; x < 4; ++x) fg(y, x) = 0.9;  // 9 px
  for (int y = 8; y < 18; ++y)
    for (int x = 8; x < 18; ++x) fg(y, x) = 0.9;  // 100 px
  auto cfg = plain();
  cfg.min_area = 10;
  const auto inst = extract_instances(probs_from(fg), static_cast<const Tensor<double>*>(nullptr), cfg);
  EXPECT_EQ(count_instances(inst), 1);
  const auto areas = instance_areas(inst);
  EXPECT_EQ(areas[1], 100u);
}

TEST(Extract, DilationTiesGoToLowerId) {
  InstanceMap inst(1, 5, 0);
  inst(0, 0) = 2;
  inst(0, 4) = 1;
  const auto d = dilate_instances(inst, 2);
  EXPECT_EQ(d(0, 1), 2);
  EXPECT_EQ(d(0, 2), 1);  // equidistant
  EXPECT_EQ(d(0, 3), 1);
}

TEST(Extract, RaisingThresholdNeverGrowsForeground) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 20; ++t) {
    Grid<double> fg(24, 24, 0.0);
    for (auto& v : fg.values) v = u(rng);
    // smooth a little so there are real components
    Grid<double> s = fg;
    for (int y = 1; y < 23; ++y)
      for (int x = 1; x < 23; ++x) s(y, x) = (fg(y, x) * 4 + fg(y - 1, x) + fg(y + 1, x) + fg(y, x - 1) + fg(y, x + 1)) / 8;
    Tensor<double> edge(1, 24, 24);
    for (auto& v : edge.values()) v = u(rng);
    const auto probs = probs_from(s);
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double tau : {0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95}) {
      auto cfg = plain();
      cfg.tau_g = tau;
      const auto area = foreground(extract_instances(probs, &edge, cfg));
      EXPECT_LE(area, prev);
      prev = area;
    }
  }
}

TEST(Extract, EdgeThresholdOneIsNoOp) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 0.999999);
  Grid<double> fg(20, 20);
  for (auto& v : fg.values) v = u(rng);
  Tensor<double> edge(1, 20, 20);
  for (auto& v : edge.values()) v = u(rng);
  auto on = PostprocessConfig{};
  on.tau_e = 1.0;
  auto off = on;
  off.edge_suppression = false;
  EXPECT_EQ(foreground_mask(probs_from(fg).tensor(), &edge, on), foreground_mask(probs_from(fg).tensor(), &edge, off));
  EXPECT_EQ(extract_instances(probs_from(fg), &edge, on), extract_instances(probs_from(fg), &edge, off));
  // saturated edge probabilities too
  for (auto& v : edge.values()) v = 1.0;
  EXPECT_EQ(foreground_mask(probs_from(fg).tensor(), &edge, on), foreground_mask(probs_from(fg).tensor(), &edge, off));
}

TEST(Extract, OutputIsCanonicalAndDeterministic) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  Grid<double> fg(30, 30);
  for (auto& v : fg.values) v = u(rng);
  Tensor<double> edge(1, 30, 30);
  for (auto& v : edge.values()) v = u(rng);
  auto cfg = PostprocessConfig{};
  cfg.min_area = 3;
  const auto a = extract_instances(probs_from(fg), &edge, cfg);
  const auto b = extract_instances(probs_from(fg), &edge, cfg);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(is_canonical(a));
}

TEST(Extract, ShapeMismatchAndBadConfig) {
  Grid<double> fg(8, 8, 0.7);
  Tensor<double> edge(1, 8, 9);
  EXPECT_THROW(extract_instances(probs_from(fg), &edge, PostprocessConfig{}), ShapeError);
  auto cfg = PostprocessConfig{};
  cfg.tau_g = 0;
  EXPECT_THROW(extract_instances(probs_from(fg), static_cast<const Tensor<double>*>(nullptr), cfg), UsageError);
  cfg = PostprocessConfig{};
  cfg.min_area = -1;
  EXPECT_THROW(cfg.validate(), UsageError);
}

TEST(Extract, ForImageScalesMinArea) {
  EXPECT_EQ(PostprocessConfig::for_image(64, 64).min_area, 10);
  EXPECT_EQ(PostprocessConfig::for_image(775, 522).min_area, 100);
}
