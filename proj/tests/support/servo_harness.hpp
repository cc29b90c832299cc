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

#pragma once

#include "subretinal/imaging.hpp"
#include "subretinal/servo.hpp"

#include <cmath>
#include <random>

// Closed-loop planar servo experiment against a hidden hand-eye map, shared by
// the servo unit tests and the acceptance binary.
namespace subretinal::testing {

inline Mat2 rotation2(double theta) {
  Mat2 m;
  m << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  return m;
}

/// Hidden map from robot XY (um) to microscope pixels: a linear part with a
/// chosen condition number, arbitrary rotation, optional reflection, and the
/// camera's radial distortion on top.
struct HiddenMap {
  Mat2 linear = Mat2::Identity() / 13.6;
  imaging::CameraModel camera;

  Vec2 operator()(const Vec2& p_bar) const {
    return camera.distort(camera.principal_point + linear * p_bar);
  }

  double condition() const {
    Eigen::JacobiSVD<Mat2> svd(linear);
    return svd.singularValues()(0) / svd.singularValues()(1);
  }
};

/// Random map with condition number in [1, max_condition]: rot * diag * rot,
/// scaled to the nominal microscope resolution, reflected with probability 1/2.
inline HiddenMap random_map(std::mt19937_64& rng, double max_condition, double k1) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double c = 1.0 + (max_condition - 1.0) * unit(rng);
  const double t1 = 2.0 * M_PI * unit(rng);
  const double t2 = 2.0 * M_PI * unit(rng);
  Mat2 d = Mat2::Zero();
  d(0, 0) = std::sqrt(c);
  d(1, 1) = 1.0 / std::sqrt(c);
  HiddenMap m;
  m.linear = rotation2(t1) * d * rotation2(t2) / 13.6;
  if (unit(rng) < 0.5) m.linear.row(1) *= -1.0;
  m.camera.tilt_x_rad = 0.0;
  m.camera.k1 = k1;
  return m;
}

struct ConvergenceRun {
  bool converged = false;
  int steps = 0;
  double final_error_px = 0.0;
  double condition = 1.0;
  std::size_t updates = 0;
};

/// One seeded run: J0 = I, the tip starts anywhere in the frame (40 px margin),
/// the goal lies 30-100 px away. A control step is one controller decision
/// followed by exact execution of its planar command. Converged means the
/// controller declared the 1 px alignment reached.
inline ConvergenceRun run_convergence(std::uint64_t seed, double k1, int max_steps = 200,
                                      double max_condition = 10.0, servo::ServoParams params = {}) {
  auto rng = make_stream(seed, "servo.convergence");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const HiddenMap map = random_map(rng, max_condition, k1);

  const double theta = 2.0 * M_PI * unit(rng);
  const double goal_distance = 30.0 + 70.0 * unit(rng);
  const Vec2 start_px(40.0 + 560.0 * unit(rng), 40.0 + 400.0 * unit(rng));
  Vec2 p_bar = map.linear.inverse() * (start_px - map.camera.principal_point);
  const Vec2 goal = map(p_bar) + goal_distance * Vec2(std::cos(theta), std::sin(theta));

  servo::Controller controller(params);
  controller.set_ilm_goal(goal);
  ConvergenceRun run;
  run.condition = map.condition();
  for (; run.steps < max_steps; ++run.steps) {
    imaging::PerceptionResult seen;
    seen.tip_rgb = map(p_bar);
    seen.base_rgb = *seen.tip_rgb + Vec2(kTipBaseSpacingRgbPx, 0.0);
    const auto cmd = controller.step(seen, p_bar);
    if (controller.phase() == servo::Phase::LowerZ) {
      run.converged = true;
      break;
    }
    if (cmd.kind == servo::MotionCommand::Kind::Planar) p_bar += cmd.translation.head<2>();
  }
  run.final_error_px = (goal - map(p_bar)).norm();
  run.updates = controller.updates().size();
  return run;
}

}  // namespace subretinal::testing
