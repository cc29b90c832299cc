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
#include "subretinal/galvo_calibration.hpp"
#include "subretinal/servo.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

// Evaluation metrics over completed trials.
namespace subretinal::metrics {

using servo::Phase;

struct TracePoint {
  std::uint64_t tick = 0;
  double time = 0.0;
  Vec3 tip = Vec3::Zero();
  Vec3 axis = Vec3::UnitZ();
  double rcm_error_um = 0.0;
  Phase phase = Phase::AwaitIlmGoal;
  // Ground-truth tip height above the ILM directly below; NaN off the disc.
  double clearance_um = 0.0;
};

struct CommandEntry {
  std::uint64_t tick = 0;
  Phase phase = Phase::AwaitIlmGoal;  // phase that issued the command
  servo::MotionCommand command;
};

struct PhaseEvent {
  double time = 0.0;
  Phase phase = Phase::AwaitIlmGoal;
};

/// Result of the post-insertion volume: which slice shows the tip and where.
struct CScanResult {
  int gt_slice = 0;
  int actual_slice = 0;
  Vec2 landed_tip_oct = Vec2::Zero();
};

struct ScanRecord {
  std::uint64_t tick = 0;
  galvo::ScanLine line;
};

enum class Outcome { Done, Aborted };

struct TrialRecord {
  int format_version = kRecordFormatVersion;
  std::string build = kVersion;
  int phantom_index = 0;
  int trial_index = 0;
  std::uint64_t phantom_seed = 0;
  std::uint64_t trial_seed = 0;

  std::optional<Vec2> goal_ilm_px;
  std::optional<Vec2> goal_subretinal_px;
  // Oracle truth standing in for manual annotation, taken at surface arrival.
  std::optional<Vec2> truth_tip_rgb_px;
  std::optional<Vec2> truth_tip_oct_px;
  // Perceived ILM pixel under the tip, and that pixel raised by the safety
  // offset (the surface goal the depth error is measured against).
  std::optional<Vec2> ilm_below_tip_px;
  std::optional<Vec2> i_ilm_px;
  std::optional<double> arrival_clearance_um;

  double insertion_distance_um = 0.0;
  Vec3 insertion_axis_point = Vec3::Zero();
  Vec3 insertion_axis_dir = Vec3::UnitZ();
  std::vector<Vec3> insertion_trace;
  std::optional<CScanResult> cscan;

  galvo::GalvoCalibration calibration;
  double calibration_rms_px = 0.0;
  std::size_t jacobian_updates = 0;

  std::vector<PhaseEvent> phases;
  std::vector<TracePoint> trace;
  std::vector<CommandEntry> commands;
  std::vector<ScanRecord> scan_lines;

  Outcome outcome = Outcome::Aborted;
  std::string abort_cause;
  std::optional<Phase> abort_phase;
  double end_time = 0.0;
  std::uint64_t end_tick = 0;

  // Full trial configuration, kept so the record can be re-rendered.
  nlohmann::json config;
};

// --- metric operations -------------------------------------------------------------

inline double nav_error_2d(const TrialRecord& rec, const ConversionTable& conv = {}) {
  if (!rec.goal_ilm_px || !rec.truth_tip_rgb_px) throw std::invalid_argument("missing microscope annotation");
  return (*rec.goal_ilm_px - *rec.truth_tip_rgb_px).norm() * conv.microscope_um_per_px;
}

inline double depth_error(const TrialRecord& rec, const ConversionTable& conv = {}) {
  if (!rec.i_ilm_px || !rec.truth_tip_oct_px) throw std::invalid_argument("missing B-scan annotation");
  return std::abs(rec.i_ilm_px->y() - rec.truth_tip_oct_px->y()) * conv.bscan_height_um_per_px;
}

inline double navigation_error_l2(const TrialRecord& rec, const ConversionTable& conv = {}) {
  return std::hypot(nav_error_2d(rec, conv), depth_error(rec, conv));
}

/// Voxel offset between [goal, expected slice] and [landed tip, actual slice],
/// each axis converted to micrometers before the norm.
inline double insertion_error(const Vec2& goal_px, int gt_slice, const Vec2& landed_px, int actual_slice,
                              const ConversionTable& conv = {}) {
  const Vec3 d((goal_px.x() - landed_px.x()) * conv.bscan_width_um_per_px,
               (goal_px.y() - landed_px.y()) * conv.bscan_height_um_per_px,
               (gt_slice - actual_slice) * conv.inter_slice_um);
  return d.norm();
}

inline double insertion_error(const TrialRecord& rec, const ConversionTable& conv = {}) {
  if (!rec.goal_subretinal_px || !rec.cscan) throw std::invalid_argument("missing insertion volume");
  return insertion_error(*rec.goal_subretinal_px, rec.cscan->gt_slice, rec.cscan->landed_tip_oct,
                         rec.cscan->actual_slice, conv);
}

inline double insertion_depth_error(const TrialRecord& rec, const ConversionTable& conv = {}) {
  if (!rec.goal_subretinal_px || !rec.cscan) throw std::invalid_argument("missing insertion volume");
  return std::abs(rec.goal_subretinal_px->y() - rec.cscan->landed_tip_oct.y()) * conv.bscan_height_um_per_px;
}

struct AxisLine {
  Vec3 point = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();

  double distance(const Vec3& q) const {
    const Vec3 a = direction.normalized();
    const Vec3 d = q - point;
    return (d - d.dot(a) * a).norm();
  }
};

struct DisplacementErrors {
  double ade = 0.0;
  double fde = 0.0;
};

/// Mean and final point-to-line distance of an executed tip path.
inline DisplacementErrors ade_fde(const std::vector<Vec3>& executed, const AxisLine& axis) {
  if (executed.empty()) throw std::invalid_argument("empty trajectory");
  if (!(axis.direction.norm() > 0)) throw std::invalid_argument("axis direction must be non-zero");
  double sum = 0.0;
  for (const auto& q : executed) sum += axis.distance(q);
  return {sum / static_cast<double>(executed.size()), axis.distance(executed.back())};
}

struct PhaseDurations {
  std::map<Phase, double> per_phase;
  double navigation = 0.0;
  double insertion = 0.0;
  double total = 0.0;  // excludes time spent waiting on goal clicks
};

inline PhaseDurations phase_durations(const std::vector<PhaseEvent>& events, double end_time) {
  PhaseDurations d;
  bool inserting = false;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const double stop = i + 1 < events.size() ? events[i + 1].time : end_time;
    const double span = std::max(0.0, stop - events[i].time);
    const Phase p = events[i].phase;
    if (p == Phase::Insert) inserting = true;
    d.per_phase[p] += span;
    if (servo::is_user_wait(p)) continue;
    (inserting ? d.insertion : d.navigation) += span;
    d.total += span;
  }
  return d;
}

inline PhaseDurations phase_durations(const TrialRecord& rec) { return phase_durations(rec.phases, rec.end_time); }

struct RcmStats {
  double max = 0.0;
  double mean = 0.0;
};

inline RcmStats rcm_stats(const std::vector<TracePoint>& trace) {
  RcmStats s;
  if (trace.empty()) return s;
  for (const auto& p : trace) {
    s.max = std::max(s.max, p.rcm_error_um);
    s.mean += p.rcm_error_um;
  }
  s.mean /= static_cast<double>(trace.size());
  return s;
}

/// Per-trial report; fields are absent when the trial never produced them.
struct MetricReport {
  std::optional<double> nav_error_2d_um;
  std::optional<double> depth_error_um;
  std::optional<double> nav_error_l2_um;
  std::optional<double> arrival_clearance_um;
  std::optional<double> insertion_error_um;
  std::optional<double> insertion_depth_error_um;
  std::optional<double> insertion_ade_um;
  std::optional<double> insertion_fde_um;
  double rcm_error_max_um = 0.0;
  double rcm_error_mean_um = 0.0;
  PhaseDurations durations;
};

inline MetricReport compute_report(const TrialRecord& rec, const ConversionTable& conv = {}) {
  MetricReport r;
  auto attempt = [](auto&& fn) -> std::optional<double> {
    try {
      return fn();
    } catch (const std::invalid_argument&) {
      return std::nullopt;
    }
  };
  r.nav_error_2d_um = attempt([&] { return nav_error_2d(rec, conv); });
  r.depth_error_um = attempt([&] { return depth_error(rec, conv); });
  r.nav_error_l2_um = attempt([&] { return navigation_error_l2(rec, conv); });
  r.arrival_clearance_um = rec.arrival_clearance_um;
  r.insertion_error_um = attempt([&] { return insertion_error(rec, conv); });
  r.insertion_depth_error_um = attempt([&] { return insertion_depth_error(rec, conv); });
  if (!rec.insertion_trace.empty()) {
    const auto e = ade_fde(rec.insertion_trace, {rec.insertion_axis_point, rec.insertion_axis_dir});
    r.insertion_ade_um = e.ade;
    r.insertion_fde_um = e.fde;
  }
  const auto rcm = rcm_stats(rec.trace);
  r.rcm_error_max_um = rcm.max;
  r.rcm_error_mean_um = rcm.mean;
  r.durations = phase_durations(rec);
  return r;
}

// --- reporting --------------------------------------------------------------------

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  auto put = [&](const char* key, const std::optional<double>& v) {
    j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  put("nav_error_2d_um", r.nav_error_2d_um);
  put("depth_error_um", r.depth_error_um);
  put("nav_error_l2_um", r.nav_error_l2_um);
  put("arrival_clearance_um", r.arrival_clearance_um);
  put("insertion_error_um", r.insertion_error_um);
  put("insertion_depth_error_um", r.insertion_depth_error_um);
  put("insertion_ade_um", r.insertion_ade_um);
  put("insertion_fde_um", r.insertion_fde_um);
  j["rcm_error_max_um"] = r.rcm_error_max_um;
  j["rcm_error_mean_um"] = r.rcm_error_mean_um;
  nlohmann::json per_phase = nlohmann::json::object();
  for (const auto& [phase, secs] : r.durations.per_phase) per_phase[std::string(servo::to_string(phase))] = secs;
  j["durations_s"] = {{"per_phase", per_phase},
                      {"navigation", r.durations.navigation},
                      {"insertion", r.durations.insertion},
                      {"total", r.durations.total}};
  return j;
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

/// Hardware-trial means reported for the autonomous system, shown beside the
/// simulated aggregate for scale.
struct ReferenceValue {
  double mean;
  double std;
};

inline const std::map<std::string, ReferenceValue>& hardware_reference() {
  static const std::map<std::string, ReferenceValue> table{
      {"nav_error_2d_um", {19.0, 6.0}},   {"nav_error_l2_um", {20.0, 6.0}},
      {"insertion_error_um", {26.0, 12.0}}, {"insertion_depth_error_um", {7.0, 11.0}},
      {"rcm_error_mean_um", {6.0, 4.0}},  {"duration_total_s", {55.0, 10.8}},
  };
  return table;
}

struct AggregateRow {
  std::string metric;
  Summary summary;
};

struct Aggregate {
  std::size_t trials = 0;
  std::size_t done = 0;
  std::size_t aborted = 0;
  std::vector<AggregateRow> rows;

  const Summary* find(const std::string& metric) const {
    for (const auto& r : rows)
      if (r.metric == metric) return &r.summary;
    return nullptr;
  }
};

/// Mean +- std of each metric over the DONE trials.
inline Aggregate aggregate(const std::vector<MetricReport>& reports, const std::vector<Outcome>& outcomes) {
  if (reports.size() != outcomes.size()) throw std::invalid_argument("reports and outcomes differ in length");
  Aggregate agg;
  agg.trials = reports.size();
  std::map<std::string, std::vector<double>> cols;
  const std::vector<std::string> order{"nav_error_2d_um",        "depth_error_um",       "nav_error_l2_um",
                                       "arrival_clearance_um",   "insertion_error_um",   "insertion_depth_error_um",
                                       "insertion_ade_um",       "insertion_fde_um",     "rcm_error_max_um",
                                       "rcm_error_mean_um",      "duration_navigation_s", "duration_insertion_s",
                                       "duration_total_s"};
  for (std::size_t i = 0; i < reports.size(); ++i) {
    if (outcomes[i] != Outcome::Done) {
      ++agg.aborted;
      continue;
    }
    ++agg.done;
    const auto& r = reports[i];
    auto add = [&](const std::string& k, const std::optional<double>& v) {
      if (v) cols[k].push_back(*v);
    };
    add("nav_error_2d_um", r.nav_error_2d_um);
    add("depth_error_um", r.depth_error_um);
    add("nav_error_l2_um", r.nav_error_l2_um);
    add("arrival_clearance_um", r.arrival_clearance_um);
    add("insertion_error_um", r.insertion_error_um);
    add("insertion_depth_error_um", r.insertion_depth_error_um);
    add("insertion_ade_um", r.insertion_ade_um);
    add("insertion_fde_um", r.insertion_fde_um);
    add("rcm_error_max_um", r.rcm_error_max_um);
    add("rcm_error_mean_um", r.rcm_error_mean_um);
    add("duration_navigation_s", r.durations.navigation);
    add("duration_insertion_s", r.durations.insertion);
    add("duration_total_s", r.durations.total);
  }
  for (const auto& k : order) agg.rows.push_back({k, summarize(cols[k])});
  return agg;
}

inline std::string aggregate_csv(const Aggregate& agg) {
  std::ostringstream os;
  os.precision(10);
  os << "metric,mean,std,n,reference_mean,reference_std\n";
  const auto& ref = hardware_reference();
  for (const auto& row : agg.rows) {
    os << row.metric << ',' << row.summary.mean << ',' << row.summary.std << ',' << row.summary.n << ',';
    if (auto it = ref.find(row.metric); it != ref.end()) os << it->second.mean << ',' << it->second.std;
    else os << ',';
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const Aggregate& agg) {
  nlohmann::json j;
  j["trials"] = agg.trials;
  j["done"] = agg.done;
  j["aborted"] = agg.aborted;
  const auto& ref = hardware_reference();
  for (const auto& row : agg.rows) {
    nlohmann::json m{{"mean", row.summary.mean}, {"std", row.summary.std}, {"n", row.summary.n}};
    if (auto it = ref.find(row.metric); it != ref.end())
      m["reference"] = {{"mean", it->second.mean}, {"std", it->second.std}};
    j["metrics"][row.metric] = m;
  }
  return j;
}

}  // namespace subretinal::metrics
