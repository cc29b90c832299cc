/*
 * Copyright (c) 2026, The subretinal-sim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "subretinal/phantom.hpp"

#include <gtest/gtest.h>
#include <yaml-cpp/yaml.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace subretinal;
using phantom::EyePhantom;
using phantom::PhantomConfig;

namespace {

std::vector<Vec2> random_points(std::uint64_t seed, std::size_t n, double radius) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec2> pts;
  while (pts.size() < n) {
    const Vec2 p(u(rng), u(rng));
    if (p.norm() <= 1.0) pts.push_back(radius * p);
  }
  return pts;
}

// Independent re-evaluation of the surface formula from the stored parameters.
double analytic_ilm(const EyePhantom& eye, const Vec2& xy) {
  const auto& c = eye.config();
  double h = c.base_height_um + c.slope.x() * xy.x() + c.slope.y() * xy.y() +
             0.5 * c.curvature_per_um * (xy.x() * xy.x() + xy.y() * xy.y());
  for (const auto& b : eye.bumps()) {
    const double dx = xy.x() - b.center.x();
    const double dy = xy.y() - b.center.y();
    h += b.amplitude_um * std::exp(-(dx * dx + dy * dy) / (2.0 * b.width_um * b.width_um));
  }
  return h;
}

}  // namespace

TEST(MakePhantom, ZeroAmplitudeIsFlatAtBaseHeight) {
  PhantomConfig cfg;
  cfg.bump_amplitude_um = 0.0;
  cfg.base_height_um = 42.0;
  const auto eye = phantom::make_phantom(0, cfg);
  EXPECT_TRUE(eye.bumps().empty());
  for (const auto& p : random_points(1, 50, cfg.radius_um)) EXPECT_DOUBLE_EQ(eye.ilm_height_at(p), 42.0);
}

TEST(MakePhantom, SameSeedGivesIdenticalSurfaceOnGrid) {
  const auto a = phantom::make_phantom(7, {});
  const auto b = phantom::make_phantom(7, {});
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) {
      const Vec2 xy(-2000.0 + 400.0 * i, -2000.0 + 400.0 * j);
      if (!a.in_domain(xy)) continue;
      EXPECT_EQ(a.ilm_height_at(xy), b.ilm_height_at(xy));  // bit-identical
    }
}

TEST(MakePhantom, DifferentSeedsDiffer) {
  const auto a = phantom::make_phantom(7, {});
  const auto b = phantom::make_phantom(8, {});
  EXPECT_NE(a.ilm_height_at(Vec2(100, 200)), b.ilm_height_at(Vec2(100, 200)));
}

TEST(MakePhantom, ThicknessIsConstantOffsetBetweenLayers) {
  PhantomConfig cfg;
  cfg.thickness_um = 200.0;
  const auto eye = phantom::make_phantom(7, cfg);
  for (const auto& p : random_points(2, 100, cfg.radius_um))
    EXPECT_NEAR(eye.ilm_height_at(p) - eye.rpe_height_at(p), 200.0, 1e-9);
}

TEST(MakePhantom, RejectsNonPositiveRadiusOrThickness) {
  PhantomConfig bad_radius;
  bad_radius.radius_um = 0.0;
  EXPECT_THROW(phantom::make_phantom(1, bad_radius), std::invalid_argument);
  PhantomConfig bad_thickness;
  bad_thickness.thickness_um = -5.0;
  EXPECT_THROW(phantom::make_phantom(1, bad_thickness), std::invalid_argument);
}

TEST(MakePhantom, RejectsPivotBelowRetina) {
  PhantomConfig cfg;
  cfg.rcm_point = Vec3(0, 0, 10.0);
  EXPECT_THROW(phantom::make_phantom(1, cfg), std::invalid_argument);
}

TEST(MakePhantom, AtMostEightBumps) {
  PhantomConfig cfg;
  cfg.bump_count = 9;
  EXPECT_THROW(phantom::make_phantom(1, cfg), std::invalid_argument);
  cfg.bump_count = 8;
  EXPECT_EQ(phantom::make_phantom(1, cfg).bumps().size(), 8u);
}

TEST(IlmHeight, FlatPhantomIsZeroEverywhere) {
  PhantomConfig cfg;
  cfg.bump_amplitude_um = 0.0;
  const auto eye = phantom::make_phantom(3, cfg);
  EXPECT_EQ(eye.ilm_height_at(Vec2(0, 0)), 0.0);
  EXPECT_EQ(eye.ilm_height_at(Vec2(-1234, 567)), 0.0);
}

TEST(IlmHeight, BowlIsSymmetric) {
  PhantomConfig cfg;
  cfg.bump_amplitude_um = 0.0;
  cfg.curvature_per_um = 1.0 / 12000.0;
  const auto eye = phantom::make_phantom(3, cfg);
  for (double r : {100.0, 900.0, 2500.0}) {
    EXPECT_DOUBLE_EQ(eye.ilm_height_at(Vec2(r, 0)), eye.ilm_height_at(Vec2(-r, 0)));
    EXPECT_DOUBLE_EQ(eye.ilm_height_at(Vec2(r, 0)), eye.ilm_height_at(Vec2(0, r)));
  }
}

TEST(IlmHeight, MatchesAnalyticExpression) {
  PhantomConfig cfg;
  cfg.slope = Vec2(0.01, -0.02);
  cfg.curvature_per_um = 1e-5;
  const auto eye = phantom::make_phantom(11, cfg);
  ASSERT_EQ(eye.bumps().size(), 6u);
  for (const auto& p : random_points(3, 200, cfg.radius_um))
    EXPECT_NEAR(eye.ilm_height_at(p), analytic_ilm(eye, p), 1e-9);
}

TEST(IlmHeight, OutOfDomainQueryThrows) {
  const auto eye = phantom::make_phantom(1, {});
  EXPECT_THROW(eye.ilm_height_at(Vec2(3000.1, 0)), std::domain_error);
}

TEST(IlmHeight, ContinuousAndGradientMatchesFiniteDifference) {
  const auto eye = phantom::make_phantom(5, {});
  for (const auto& p : random_points(4, 50, 2500.0)) {
    const double h = 1e-3;
    const Vec2 fd((eye.ilm_height_at(p + Vec2(h, 0)) - eye.ilm_height_at(p - Vec2(h, 0))) / (2 * h),
                  (eye.ilm_height_at(p + Vec2(0, h)) - eye.ilm_height_at(p - Vec2(0, h))) / (2 * h));
    EXPECT_NEAR((eye.ilm_gradient_at(p) - fd).norm(), 0.0, 1e-6);
    EXPECT_NEAR(eye.ilm_height_at(p + Vec2(1e-6, 0)), eye.ilm_height_at(p), 1e-5);
  }
}

TEST(IlmHeight, MaxBoundDominatesSurfaceAndPivotIsAbove) {
  const auto eye = phantom::make_phantom(9, {});
  for (const auto& p : random_points(5, 500, eye.radius())) EXPECT_LE(eye.ilm_height_at(p), eye.max_ilm_height_bound());
  EXPECT_GT(eye.rcm_point().z(), eye.max_ilm_height_bound());
}

TEST(ToolPose, ValidityChecksUnitAxisAndFiniteTip) {
  phantom::ToolPose pose;
  EXPECT_TRUE(pose.valid());
  pose.axis_direction = Vec3(0, 0, 2);
  EXPECT_FALSE(pose.valid());
  pose.axis_direction = Vec3::UnitX();
  pose.tip_position.x() = std::nan("");
  EXPECT_FALSE(pose.valid());
}

TEST(PhantomFile, LoadsSeedAndKeys) {
  const auto path = std::filesystem::temp_directory_path() / "subretinal_phantom_test.yaml";
  {
    std::ofstream f(path);
    f << "seed: 7\nradius_um: 2500\nthickness_um: 180\nbump_amplitude_um: 40\nbase_height_um: 12\n";
  }
  const auto eye = phantom::load_phantom_file(path.string());
  EXPECT_EQ(eye.seed(), 7u);
  EXPECT_EQ(eye.radius(), 2500.0);
  EXPECT_EQ(eye.thickness(), 180.0);
  EXPECT_EQ(eye.config().base_height_um, 12.0);
  std::filesystem::remove(path);
}

TEST(PhantomFile, YamlRoundTrip) {
  PhantomConfig cfg;
  cfg.slope = Vec2(0.01, 0.02);
  cfg.bump_count = 3;
  YAML::Emitter out;
  phantom::phantom_config_to_yaml(out, cfg);
  const auto back = phantom::phantom_config_from_yaml(YAML::Load(out.c_str()));
  EXPECT_EQ(back.slope, cfg.slope);
  EXPECT_EQ(back.bump_count, 3);
  EXPECT_EQ(back.rcm_point, cfg.rcm_point);
}
