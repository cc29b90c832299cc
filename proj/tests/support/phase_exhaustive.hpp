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

#include "subretinal/servo.hpp"

#include <optional>
#include <string>
#include <vector>

// Exhaustive state-transition audit of the workflow phase machine: every
// combination of phase, hold bookkeeping, goals, remaining insertion and
// perception validity is pushed through every transition operation.
namespace subretinal::testing {

struct PhaseAudit {
  std::size_t transitions = 0;
  std::size_t rejected = 0;       // operations that refused the state
  std::size_t insert_entries = 0; // transitions that entered INSERT
  std::vector<std::string> violations;
};

inline std::vector<imaging::PerceptionResult> perception_variants(const Vec2& goal_px) {
  std::vector<imaging::PerceptionResult> out;
  const std::vector<std::optional<Vec2>> rgb_tips{std::nullopt, goal_px, goal_px + Vec2(0.6, 0.0),
                                                  goal_px + Vec2(3.0, 0.0), goal_px + Vec2(40.0, -25.0)};
  // ILM at row 600 -> surface goal row 600 - 30/2.6.
  const std::vector<std::optional<Vec2>> oct_tips{std::nullopt, Vec2(255.5, 400.0), Vec2(255.5, 588.3),
                                                  Vec2(255.5, 620.0)};
  for (const auto& rgb : rgb_tips)
    for (const auto& oct : oct_tips)
      for (bool profile : {false, true}) {
        imaging::PerceptionResult p;
        if (rgb) {
          p.tip_rgb = rgb;
          p.base_rgb = *rgb + Vec2(-50.0, 0.0);
        }
        if (oct) {
          p.tip_oct = oct;
          p.base_oct = *oct + Vec2(-60.0, -80.0);
        }
        if (profile) {
          p.ilm_profile.assign(kBScanColumns, 600.0);
          p.rpe_profile.assign(kBScanColumns, 600.0 + 200.0 / 2.6);
        }
        out.push_back(std::move(p));
      }
  return out;
}

inline std::vector<servo::WorkflowState> workflow_variants(const Vec2& goal_ilm, const Vec2& goal_sub) {
  using servo::HoldReason;
  using servo::Phase;
  std::vector<servo::WorkflowState> out;
  for (Phase phase : servo::kAllPhases)
    for (Phase resume : servo::kAllPhases)
      for (HoldReason why : {HoldReason::None, HoldReason::Perception, HoldReason::SingularJacobian})
        for (bool has_ilm : {false, true})
          for (bool has_sub : {false, true})
            for (double remaining : {0.0, 30.0, 120.0}) {
              if (phase != Phase::Hold && (resume != Phase::AlignXY || why != HoldReason::None)) continue;
              servo::WorkflowState wf;
              wf.phase = phase;
              wf.resume_phase = resume;
              wf.hold_reason = why;
              if (has_ilm) wf.goal_ilm_px = goal_ilm;
              if (has_sub) wf.goal_subretinal_px = goal_sub;
              wf.insertion_remaining_um = remaining;
              wf.insertion_total_um = remaining;
              out.push_back(wf);
            }
  return out;
}

/// A state legitimately "in" INSERT already (so staying there is fine).
inline bool already_inserting(const servo::WorkflowState& wf) {
  return wf.phase == servo::Phase::Insert ||
         (wf.phase == servo::Phase::Hold && wf.resume_phase == servo::Phase::Insert);
}

inline PhaseAudit audit_phase_machine() {
  using servo::Phase;
  PhaseAudit audit;
  const Vec2 goal_ilm(320.0, 240.0);
  const Vec2 goal_sub(270.0, 700.0);
  const auto perceptions = perception_variants(goal_ilm);
  const auto states = workflow_variants(goal_ilm, goal_sub);

  const servo::ServoParams params;
  std::vector<servo::ServoState> servos(2);
  servos[1].jacobian = Mat2::Zero();  // singular estimate

  auto check = [&](const servo::WorkflowState& before, const servo::WorkflowState& after, const std::string& op) {
    ++audit.transitions;
    if (after.phase == Phase::Insert && !already_inserting(before)) {
      ++audit.insert_entries;
      if (op != "set_subretinal_goal" || before.phase != Phase::AwaitSubretinalGoal)
        audit.violations.push_back(op + " entered INSERT from " + std::string(servo::to_string(before.phase)));
    }
    if ((after.phase == Phase::Insert || (after.phase == Phase::Hold && after.resume_phase == Phase::Insert)) &&
        !after.goal_subretinal_px)
      audit.violations.push_back(op + " reached INSERT without a subretinal goal");
    if (after.insertion_remaining_um < 0.0) audit.violations.push_back(op + " made insertion_remaining negative");
  };

  for (const auto& wf : states) {
    for (const auto& p : perceptions) {
      for (const auto& sv : servos) {
        try {
          const auto [next, cmd] = servo::step_workflow(wf, sv, p, params);
          check(wf, next, "step_workflow");
          if (cmd.kind == servo::MotionCommand::Kind::Insert && !already_inserting(wf))
            audit.violations.push_back("insert command issued outside INSERT");
        } catch (const std::logic_error&) {
          ++audit.rejected;
        }
      }
      try {
        check(wf, servo::set_subretinal_goal(wf, goal_sub, p, params.conv), "set_subretinal_goal");
      } catch (const std::exception&) {
        ++audit.rejected;
      }
    }
    try {
      check(wf, servo::set_ilm_goal(wf, goal_ilm), "set_ilm_goal");
    } catch (const std::exception&) {
      ++audit.rejected;
    }
  }
  return audit;
}

}  // namespace subretinal::testing
