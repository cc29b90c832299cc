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
#include "subretinal/imaging.hpp"

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

// Uncalibrated planar visual servoing with an online Broyden estimate of the
// robot-XY -> microscope-pixel Jacobian, and the navigation / insertion
// workflow built on it.
namespace subretinal::servo {

using imaging::PerceptionResult;

class SingularJacobian : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Tunables; defaults are the published thresholds where one exists.
struct ServoParams {
  double beta = 0.5;
  double pixel_update_threshold_px = 8.0;
  double motion_update_threshold_um = 20.0;
  double realign_threshold_px = 1.0;
  double safety_offset_um = 30.0;
  double planar_step_cap_um = 50.0;
  double z_step_um = 50.0;
  double z_step_fine_um = 10.0;
  double fine_zone_um = 100.0;
  double insert_step_um = 50.0;
  double bootstrap_probe_um = 150.0;
  // Surface arrival: stop once the tip is within this many rows of the
  // safety-offset goal; the last step aims approach_margin_rows above it.
  double surface_tolerance_rows = 0.5;
  double approach_margin_rows = 0.25;
  ConversionTable conv;

  void validate() const {
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("beta must be in [0, 1]");
    if (pixel_update_threshold_px < 0 || motion_update_threshold_um < 0)
      throw std::invalid_argument("update thresholds must be non-negative");
    if (!(realign_threshold_px > 0)) throw std::invalid_argument("realign threshold must be positive");
    if (safety_offset_um < 0) throw std::invalid_argument("safety offset must be non-negative");
    if (!(planar_step_cap_um > 0 && z_step_um > 0 && z_step_fine_um > 0 && insert_step_um > 0))
      throw std::invalid_argument("step sizes must be positive");
    if (!(approach_margin_rows >= 0 && surface_tolerance_rows > approach_margin_rows))
      throw std::invalid_argument("surface tolerance must exceed the approach margin");
    conv.validate();
  }
};

/// Jacobian estimate J (px/um) and the reference point deltas are measured from.
struct ServoState {
  Mat2 jacobian = Mat2::Identity();
  double beta = 0.5;
  double pixel_update_threshold_px = 8.0;
  double motion_update_threshold_um = 20.0;
  std::optional<Vec2> last_tip_rgb;
  std::optional<Vec2> last_p_bar;

  static ServoState from_params(const ServoParams& p) {
    ServoState s;
    s.beta = p.beta;
    s.pixel_update_threshold_px = p.pixel_update_threshold_px;
    s.motion_update_threshold_um = p.motion_update_threshold_um;
    return s;
  }
};

/// Rank-1 secant update J += beta (di - J dp) dp^T / (dp^T dp).
inline ServoState broyden_update(const ServoState& state, const Vec2& delta_i, const Vec2& delta_p) {
  const double dp2 = delta_p.squaredNorm();
  if (!(dp2 > 0.0)) throw std::invalid_argument("Broyden update needs a non-zero motion");
  ServoState next = state;
  next.jacobian += state.beta * (delta_i - state.jacobian * delta_p) * delta_p.transpose() / dp2;
  return next;
}

/// Both the pixel and the robot motion must be significant.
inline bool should_update(const ServoState& state, const Vec2& delta_i, const Vec2& delta_p) {
  return delta_i.norm() > state.pixel_update_threshold_px &&
         delta_p.norm() > state.motion_update_threshold_um;
}

/// dp = J^-1 (goal - tip), in robot-XY micrometers.
inline Vec2 desired_planar_motion(const ServoState& state, const Vec2& goal_px, const Vec2& tip_px) {
  if (!(std::abs(state.jacobian.determinant()) > 1e-12) || !all_finite(state.jacobian))
    throw SingularJacobian("hand-eye Jacobian is singular");
  return state.jacobian.inverse() * (goal_px - tip_px);
}

/// Needle travel from the tip to a B-scan goal, per-axis converted then
/// combined as a Euclidean length.
inline double compute_insertion_distance(const Vec2& goal_oct_px, const Vec2& tip_oct_px,
                                         const ConversionTable& conv = {}) {
  if (!all_finite(goal_oct_px) || !all_finite(tip_oct_px))
    throw std::invalid_argument("insertion pixels must be finite");
  const Vec2 d = goal_oct_px - tip_oct_px;
  if (d.y() < 0.0) throw std::invalid_argument("goal lies above the tip; that would extract the needle");
  return std::hypot(d.x() * conv.bscan_width_um_per_px, d.y() * conv.bscan_height_um_per_px);
}

// --- workflow -------------------------------------------------------------------

enum class Phase {
  AwaitIlmGoal,
  AlignXY,
  LowerZ,
  AtSurface,
  AwaitSubretinalGoal,
  Insert,
  Done,
  Hold,
};

inline constexpr std::array<Phase, 8> kAllPhases{Phase::AwaitIlmGoal, Phase::AlignXY,
                                                 Phase::LowerZ,       Phase::AtSurface,
                                                 Phase::AwaitSubretinalGoal, Phase::Insert,
                                                 Phase::Done,         Phase::Hold};

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::AwaitIlmGoal: return "AWAIT_ILM_GOAL";
    case Phase::AlignXY: return "ALIGN_XY";
    case Phase::LowerZ: return "LOWER_Z";
    case Phase::AtSurface: return "AT_SURFACE";
    case Phase::AwaitSubretinalGoal: return "AWAIT_SUBRETINAL_GOAL";
    case Phase::Insert: return "INSERT";
    case Phase::Done: return "DONE";
    case Phase::Hold: return "HOLD";
  }
  return "?";
}

inline Phase phase_from_string(std::string_view s) {
  for (Phase p : kAllPhases)
    if (to_string(p) == s) return p;
  throw std::invalid_argument("unknown phase: " + std::string(s));
}

/// Phases spent waiting on the surgeon rather than the robot.
inline bool is_user_wait(Phase p) { return p == Phase::AwaitIlmGoal || p == Phase::AwaitSubretinalGoal; }

enum class HoldReason { None, Perception, SingularJacobian };

struct WorkflowState {
  Phase phase = Phase::AwaitIlmGoal;
  Phase resume_phase = Phase::AlignXY;
  HoldReason hold_reason = HoldReason::None;
  std::optional<Vec2> goal_ilm_px;
  std::optional<Vec2> goal_subretinal_px;
  double insertion_remaining_um = 0.0;
  double insertion_total_um = 0.0;
};

struct MotionCommand {
  enum class Kind { None, Planar, Vertical, Insert };
  Kind kind = Kind::None;
  Vec3 translation = Vec3::Zero();  // Planar / Vertical, robot frame
  double axial_advance_um = 0.0;    // Insert, along the tool axis into tissue

  static MotionCommand none() { return {}; }
  static MotionCommand planar(const Vec2& d) { return {Kind::Planar, Vec3(d.x(), d.y(), 0.0), 0.0}; }
  static MotionCommand vertical(double dz) { return {Kind::Vertical, Vec3(0.0, 0.0, dz), 0.0}; }
  static MotionCommand insert(double advance) { return {Kind::Insert, Vec3::Zero(), advance}; }
  bool is_none() const { return kind == Kind::None; }
};

inline std::string_view to_string(MotionCommand::Kind k) {
  switch (k) {
    case MotionCommand::Kind::None: return "none";
    case MotionCommand::Kind::Planar: return "planar";
    case MotionCommand::Kind::Vertical: return "vertical";
    case MotionCommand::Kind::Insert: return "insert";
  }
  return "?";
}

/// Perception fields a phase cannot act without.
inline bool has_required_fields(Phase phase, const PerceptionResult& p) {
  switch (phase) {
    case Phase::AlignXY: return p.rgb_valid();
    case Phase::LowerZ: {
      if (!p.rgb_valid() || !p.oct_valid()) return false;
      try {
        (void)imaging::project_tip_to_ilm(p);
      } catch (const std::exception&) {
        return false;
      }
      return true;
    }
    case Phase::Insert: return p.oct_valid();
    default: return true;
  }
}

/// Row of the safety-offset surface goal: i_ILM raised by the offset.
inline double surface_goal_row(const Vec2& i_ilm, const ServoParams& params) {
  return i_ilm.y() - params.safety_offset_um / params.conv.bscan_height_um_per_px;
}

/// Pure phase transition. Broyden bookkeeping lives in Controller.
inline std::pair<WorkflowState, MotionCommand> step_workflow(const WorkflowState& wf,
                                                             const ServoState& servo,
                                                             const PerceptionResult& perception,
                                                             const ServoParams& params = {}) {
  // Goals a phase depends on must exist whatever the perception says.
  const Phase active = wf.phase == Phase::Hold ? wf.resume_phase : wf.phase;
  if ((active == Phase::AlignXY || active == Phase::LowerZ) && !wf.goal_ilm_px)
    throw std::logic_error(std::string(to_string(active)) + " without an ILM goal");
  if (active == Phase::Insert && !wf.goal_subretinal_px)
    throw std::logic_error("INSERT without a subretinal goal");

  WorkflowState next = wf;
  const auto hold = [&](Phase from, HoldReason why) {
    next.phase = Phase::Hold;
    next.resume_phase = from;
    next.hold_reason = why;
    return std::pair{next, MotionCommand::none()};
  };

  if (wf.phase == Phase::Hold) {
    if (wf.resume_phase == Phase::Hold) throw std::logic_error("HOLD cannot resume into HOLD");
    if (wf.hold_reason == HoldReason::SingularJacobian ||
        !has_required_fields(wf.resume_phase, perception))
      return {next, MotionCommand::none()};
    next.phase = wf.resume_phase;
    next.hold_reason = HoldReason::None;
    return step_workflow(next, servo, perception, params);
  }

  if (!has_required_fields(wf.phase, perception)) return hold(wf.phase, HoldReason::Perception);

  switch (wf.phase) {
    case Phase::AwaitIlmGoal:
    case Phase::AwaitSubretinalGoal:
    case Phase::Done:
      return {next, MotionCommand::none()};

    case Phase::AlignXY: {
      const Vec2 err = *wf.goal_ilm_px - *perception.tip_rgb;
      if (err.norm() <= params.realign_threshold_px) {
        next.phase = Phase::LowerZ;
        return {next, MotionCommand::none()};
      }
      Vec2 dp;
      try {
        dp = desired_planar_motion(servo, *wf.goal_ilm_px, *perception.tip_rgb);
      } catch (const SingularJacobian&) {
        return hold(Phase::AlignXY, HoldReason::SingularJacobian);
      }
      if (dp.norm() > params.planar_step_cap_um) dp *= params.planar_step_cap_um / dp.norm();
      return {next, MotionCommand::planar(dp)};
    }

    case Phase::LowerZ: {
      const Vec2 err = *wf.goal_ilm_px - *perception.tip_rgb;
      if (err.norm() > params.realign_threshold_px) {
        next.phase = Phase::AlignXY;
        return {next, MotionCommand::none()};
      }
      const double goal_row = surface_goal_row(imaging::project_tip_to_ilm(perception), params);
      const double tip_row = perception.tip_oct->y();
      if (tip_row >= goal_row - params.surface_tolerance_rows) {
        next.phase = Phase::AtSurface;
        return {next, MotionCommand::none()};
      }
      const double row_um = params.conv.bscan_height_um_per_px;
      const double to_goal_um = (goal_row - tip_row) * row_um;
      const double to_target_um = (goal_row - params.approach_margin_rows - tip_row) * row_um;
      const double step = to_goal_um <= params.fine_zone_um ? params.z_step_fine_um : params.z_step_um;
      return {next, MotionCommand::vertical(-std::min(step, to_target_um))};
    }

    case Phase::AtSurface:
      next.phase = Phase::AwaitSubretinalGoal;
      return {next, MotionCommand::none()};

    case Phase::Insert: {
      const double advance = std::min(params.insert_step_um, wf.insertion_remaining_um);
      next.insertion_remaining_um = wf.insertion_remaining_um - advance;
      if (next.insertion_remaining_um <= 0.0) {
        next.insertion_remaining_um = 0.0;
        next.phase = Phase::Done;
      }
      if (advance <= 0.0) return {next, MotionCommand::none()};
      return {next, MotionCommand::insert(advance)};
    }

    case Phase::Hold:
      break;
  }
  return {next, MotionCommand::none()};
}

/// Surgeon click in the microscope view; accepted only before navigation.
inline WorkflowState set_ilm_goal(const WorkflowState& wf, const Vec2& goal_px) {
  if (wf.phase != Phase::AwaitIlmGoal)
    throw std::logic_error("ILM goal not accepted in phase " + std::string(to_string(wf.phase)));
  if (!all_finite(goal_px)) throw std::invalid_argument("goal must be finite");
  WorkflowState next = wf;
  next.goal_ilm_px = goal_px;
  next.phase = Phase::AlignXY;
  return next;
}

/// Surgeon click in the B-scan; the only route into INSERT.
inline WorkflowState set_subretinal_goal(const WorkflowState& wf, const Vec2& goal_px,
                                         const PerceptionResult& perception,
                                         const ConversionTable& conv = {}) {
  if (wf.phase != Phase::AwaitSubretinalGoal)
    throw std::logic_error("subretinal goal not accepted in phase " + std::string(to_string(wf.phase)));
  if (!perception.tip_oct) throw std::invalid_argument("B-scan tip unavailable");
  WorkflowState next = wf;
  next.insertion_total_um = compute_insertion_distance(goal_px, *perception.tip_oct, conv);
  next.insertion_remaining_um = next.insertion_total_um;
  next.goal_subretinal_px = goal_px;
  next.phase = Phase::Insert;
  return next;
}

/// Record of one accepted Jacobian update.
struct JacobianUpdate {
  Mat2 before;
  Mat2 after;
  Vec2 delta_i;
  Vec2 delta_p;
};

/// Owns ServoState + WorkflowState; feeds observed motion into the Jacobian
/// estimate and runs the bootstrap probes before goal-directed motion.
class Controller {
 public:
  explicit Controller(ServoParams params = {})
      : params_(std::move(params)), servo_(ServoState::from_params(params_)) {
    params_.validate();
  }

  const ServoParams& params() const { return params_; }
  const ServoState& servo() const { return servo_; }
  const WorkflowState& workflow() const { return wf_; }
  Phase phase() const { return wf_.phase; }
  int bootstrap_remaining() const { return probes_remaining_; }
  const std::vector<JacobianUpdate>& updates() const { return updates_; }

  void set_ilm_goal(const Vec2& goal_px) { wf_ = servo::set_ilm_goal(wf_, goal_px); }

  void set_subretinal_goal(const Vec2& goal_px, const PerceptionResult& perception) {
    wf_ = servo::set_subretinal_goal(wf_, goal_px, perception, params_.conv);
  }

  /// One controller decision from fresh perception and the encoder tip XY.
  MotionCommand step(const PerceptionResult& perception, const Vec2& p_bar) {
    const Phase active = wf_.phase == Phase::Hold ? wf_.resume_phase : wf_.phase;
    if (active == Phase::AlignXY && perception.rgb_valid()) observe(*perception.tip_rgb, p_bar);

    if (wf_.phase == Phase::AlignXY && probes_remaining_ > 0 && perception.rgb_valid()) {
      const Vec2 dir = probes_remaining_ == 2 ? Vec2::UnitX() : Vec2::UnitY();
      --probes_remaining_;
      return MotionCommand::planar(params_.bootstrap_probe_um * dir);
    }

    auto [next, cmd] = step_workflow(wf_, servo_, perception, params_);
    if (next.phase == Phase::Hold && next.hold_reason == HoldReason::SingularJacobian) {
      reinitialize();
      next.phase = next.resume_phase;
      next.hold_reason = HoldReason::None;
      cmd = MotionCommand::none();
    }
    // Z and axial motion shift the tip pixel without moving p_bar; restart
    // the secant reference afterwards.
    if (cmd.kind == MotionCommand::Kind::Vertical || cmd.kind == MotionCommand::Kind::Insert ||
        next.phase != Phase::AlignXY) {
      servo_.last_tip_rgb.reset();
      servo_.last_p_bar.reset();
    }
    wf_ = next;
    return cmd;
  }

  void reinitialize() {
    servo_.jacobian = Mat2::Identity();
    servo_.last_tip_rgb.reset();
    servo_.last_p_bar.reset();
    probes_remaining_ = 2;
  }

 private:
  void observe(const Vec2& tip, const Vec2& p_bar) {
    if (servo_.last_tip_rgb && servo_.last_p_bar) {
      const Vec2 di = tip - *servo_.last_tip_rgb;
      const Vec2 dp = p_bar - *servo_.last_p_bar;
      if (!should_update(servo_, di, dp)) return;
      const Mat2 before = servo_.jacobian;
      servo_ = broyden_update(servo_, di, dp);
      updates_.push_back({before, servo_.jacobian, di, dp});
    }
    servo_.last_tip_rgb = tip;
    servo_.last_p_bar = p_bar;
  }

  ServoParams params_;
  ServoState servo_;
  WorkflowState wf_;
  int probes_remaining_ = 2;
  std::vector<JacobianUpdate> updates_;
};

}  // namespace subretinal::servo
