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

#include "subretinal/core.hpp"
#include "subretinal/phantom.hpp"

#include <algorithm>
#include <optional>
#include <vector>

// Tip-space kinematics under a remote-center-of-motion constraint, and a
// straight-line trapezoidal trajectory generator.
namespace subretinal::robot {

using phantom::ToolPose;

struct RcmConstraint {
  Vec3 pivot = Vec3::Zero();
  double tolerance_um = 10.0;
};

/// Pose whose shaft line passes exactly through the pivot.
inline ToolPose pose_for_tip(const Vec3& tip, const RcmConstraint& rcm, std::uint64_t frame_id = 0) {
  const Vec3 to_pivot = rcm.pivot - tip;
  if (to_pivot.norm() < 1e-9) throw std::invalid_argument("tip coincides with the RCM pivot");
  return ToolPose{tip, to_pivot.normalized(), frame_id};
}

/// Distance from the pivot to the infinite shaft line.
inline double rcm_error(const ToolPose& pose, const RcmConstraint& rcm) {
  const Vec3 d = rcm.pivot - pose.tip_position;
  const Vec3 a = pose.axis_direction.normalized();
  return (d - d.dot(a) * a).norm();
}

struct MotionLimits {
  double max_speed_um_s = 1000.0;
  double max_accel_um_s2 = 20000.0;
  int control_rate_hz = kControlRateHz;
  double min_pivot_distance_um = 500.0;

  double period() const { return 1.0 / control_rate_hz; }

  void validate() const {
    if (!(max_speed_um_s > 0 && max_accel_um_s2 > 0 && control_rate_hz > 0))
      throw std::invalid_argument("motion limits must be positive");
  }
};

struct Waypoint {
  ToolPose pose;
  double time = 0.0;
};

struct TrajectorySegment {
  std::vector<Waypoint> waypoints;
  double velocity_limit_um_s = 0.0;

  double duration() const { return waypoints.empty() ? 0.0 : waypoints.back().time; }
};

class InfeasibleTrajectory : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Arc length of a rest-to-rest trapezoidal (or triangular) profile.
struct TrapezoidalProfile {
  double length = 0.0;
  double vmax = 1.0;
  double accel = 1.0;

  double accel_time() const {
    return length >= vmax * vmax / accel ? vmax / accel : std::sqrt(length / accel);
  }
  double duration() const {
    if (length <= 0.0) return 0.0;
    const double ta = accel_time();
    const double v = ta * accel;
    return 2.0 * ta + (length - v * ta) / v;
  }
  double position(double t) const {
    const double total = duration();
    if (t <= 0.0) return 0.0;
    if (t >= total) return length;
    const double ta = accel_time();
    const double v = ta * accel;
    if (t < ta) return 0.5 * accel * t * t;
    if (t <= total - ta) return 0.5 * accel * ta * ta + v * (t - ta);
    const double rem = total - t;
    return length - 0.5 * accel * rem * rem;
  }
};

/// Straight tip path, sampled at the control period, orientation from the
/// pivot at every waypoint.
inline TrajectorySegment plan_trajectory(const ToolPose& current, const Vec3& target_tip,
                                         const RcmConstraint& rcm, const MotionLimits& limits) {
  limits.validate();
  const Vec3 start = current.tip_position;
  const Vec3 delta = target_tip - start;
  const double length = delta.norm();

  // Closest approach of the straight path to the pivot.
  double s_closest = 0.0;
  if (length > 0.0) s_closest = std::clamp((rcm.pivot - start).dot(delta) / (length * length), 0.0, 1.0);
  if ((start + s_closest * delta - rcm.pivot).norm() < limits.min_pivot_distance_um)
    throw InfeasibleTrajectory("path passes too close to the RCM pivot");

  TrajectorySegment seg;
  seg.velocity_limit_um_s = limits.max_speed_um_s;
  if (length == 0.0) {
    seg.waypoints.push_back({pose_for_tip(start, rcm), 0.0});
    return seg;
  }
  const TrapezoidalProfile profile{length, limits.max_speed_um_s, limits.max_accel_um_s2};
  const double total = profile.duration();
  const double dt = limits.period();
  const auto steps = static_cast<int>(std::ceil(total / dt - 1e-9));
  seg.waypoints.reserve(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) {
    const double t = std::min(k * dt, total);
    const double s = k == steps ? length : profile.position(t);
    const Vec3 tip = k == steps ? target_tip : Vec3(start + delta * (s / length));
    seg.waypoints.push_back({pose_for_tip(tip, rcm), k * dt});
  }
  return seg;
}

/// Per-tick execution jitter: isotropic Gaussian with its norm clipped.
struct ActuationNoise {
  double sigma_um = 0.0;
  double bound_um = 0.0;  // <= 0 selects 3 sigma

  double effective_bound() const { return bound_um > 0.0 ? bound_um : 3.0 * sigma_um; }
};

inline Vec3 sample_noise(const ActuationNoise& noise, std::mt19937_64& rng) {
  if (noise.sigma_um <= 0.0) return Vec3::Zero();
  std::normal_distribution<double> n(0.0, noise.sigma_um);
  Vec3 v(n(rng), n(rng), n(rng));
  const double bound = noise.effective_bound();
  if (v.norm() > bound) v *= bound / v.norm();
  return v;
}

/// Single writer of tool state. Tracks a commanded reference pose and the
/// realized pose (reference + jitter); new segments preempt between ticks.
class RobotExecutor {
 public:
  RobotExecutor(const Vec3& start_tip, RcmConstraint rcm, MotionLimits limits,
                ActuationNoise noise, std::mt19937_64 rng)
      : rcm_(std::move(rcm)), limits_(limits), noise_(noise), rng_(std::move(rng)) {
    reference_ = pose_for_tip(start_tip, rcm_);
    actual_ = reference_;
  }

  const ToolPose& reference() const { return reference_; }
  const ToolPose& actual() const { return actual_; }
  const RcmConstraint& rcm() const { return rcm_; }
  const MotionLimits& limits() const { return limits_; }
  bool idle() const { return !segment_; }
  std::size_t remaining_waypoints() const { return segment_ ? segment_->waypoints.size() - next_ : 0; }

  void command(TrajectorySegment segment) {
    if (segment.waypoints.size() <= 1) {
      segment_.reset();
      return;
    }
    segment_ = std::move(segment);
    next_ = 1;  // waypoint 0 is the current reference
  }

  void move_to(const Vec3& target_tip) { command(plan_trajectory(reference_, target_tip, rcm_, limits_)); }

  /// Advance one control period.
  void tick() {
    ++ticks_;
    if (!segment_) return;
    reference_ = segment_->waypoints[next_].pose;
    actual_ = reference_;
    actual_.tip_position += sample_noise(noise_, rng_);
    if (++next_ >= segment_->waypoints.size()) segment_.reset();
  }

  std::uint64_t ticks() const { return ticks_; }

 private:
  RcmConstraint rcm_;
  MotionLimits limits_;
  ActuationNoise noise_;
  std::mt19937_64 rng_;
  ToolPose reference_;
  ToolPose actual_;
  std::optional<TrajectorySegment> segment_;
  std::size_t next_ = 0;
  std::uint64_t ticks_ = 0;
};

/// Executes a whole segment from a scene, one snapshot per control tick.
inline std::vector<phantom::SceneSnapshot> execute(const TrajectorySegment& segment,
                                                   const phantom::SceneSnapshot& scene,
                                                   const ActuationNoise& noise, std::mt19937_64& rng,
                                                   double period = 1.0 / kControlRateHz) {
  std::vector<phantom::SceneSnapshot> out;
  for (std::size_t i = 1; i < segment.waypoints.size(); ++i) {
    phantom::SceneSnapshot s = scene;
    s.tool = segment.waypoints[i].pose;
    s.tool.tip_position += sample_noise(noise, rng);
    s.tool.frame_id = scene.tool.frame_id + i;
    s.sim_time = scene.sim_time + static_cast<double>(i) * period;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace subretinal::robot
