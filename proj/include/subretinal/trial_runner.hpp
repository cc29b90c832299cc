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
#include "subretinal/imaging.hpp"
#include "subretinal/metrics.hpp"
#include "subretinal/phantom.hpp"
#include "subretinal/robot.hpp"
#include "subretinal/servo.hpp"

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

// Full injection trials: scene setup, the dual-rate sensing / control loop,
// scripted goal clicks, post-insertion volume, batch runs, persistence and
// replay.
namespace subretinal::trial {

using nlohmann::json;
using servo::Phase;

// --- configuration -------------------------------------------------------------

enum class GoalMode { Scripted, Interactive };

struct GoalScript {
  GoalMode mode = GoalMode::Scripted;
  // Scripted ILM goals are drawn uniformly in a disc of this radius.
  double goal_radius_um = 1500.0;
  // Fixed microscope goal; overrides the random draw when set.
  std::optional<Vec2> ilm_goal_px;
  double start_offset_min_um = 300.0;
  double start_offset_max_um = 800.0;
  double start_height_um = 600.0;
  // Subretinal goal: on the imaged needle axis, this far below the ILM.
  double subretinal_depth_um = 150.0;
  // Simulated surgeon reaction time per click; excluded from durations.
  double click_delay_s = 2.0;
};

struct CalibrationSetup {
  int grid = 5;
  double amplitude_v = 10.0;
  double noise_px = 0.0;
  double card_height_um = 0.0;
};

struct TrialConfig {
  std::uint64_t master_seed = 2026;
  int phantom_count = 3;
  int trials_per_phantom = 10;
  int workers = 0;  // 0 = hardware concurrency

  phantom::PhantomConfig phantom;
  imaging::CameraModel camera;
  imaging::OctConfig oct;
  imaging::NoiseConfig perception;
  robot::ActuationNoise actuation;
  robot::MotionLimits motion;
  double rcm_tolerance_um = 10.0;
  servo::ServoParams servo;
  CalibrationSetup calibration;
  GoalScript goals;

  double hold_timeout_s = 5.0;
  double max_sim_time_s = 300.0;
  double scan_length_px = imaging::default_scan_length_px();
  int cscan_slices = 32;
  // Safety audit bound on the landed depth error of DONE trials.
  double insertion_depth_bound_um = 26.0;
  imaging::RenderOptions render;

  ConversionTable conv() const { return servo.conv; }

  void validate() const {
    if (phantom_count < 1 || trials_per_phantom < 1) throw std::invalid_argument("trial counts must be positive");
    phantom.validate();
    camera.validate();
    perception.validate();
    motion.validate();
    servo.validate();
    if (actuation.sigma_um < 0) throw std::invalid_argument("actuation sigma must be >= 0");
    if (calibration.grid < 2) throw std::invalid_argument("calibration grid must be >= 2");
    if (!(calibration.amplitude_v > 0)) throw std::invalid_argument("calibration amplitude must be positive");
    if (!(hold_timeout_s > 0 && max_sim_time_s > 0)) throw std::invalid_argument("timeouts must be positive");
    if (!(scan_length_px > 0)) throw std::invalid_argument("scan length must be positive");
    if (cscan_slices < 1) throw std::invalid_argument("C-scan needs at least one slice");
    if (!(goals.start_offset_max_um >= goals.start_offset_min_um && goals.start_offset_min_um >= 0))
      throw std::invalid_argument("invalid start offset range");
    if (!(goals.subretinal_depth_um > 0)) throw std::invalid_argument("subretinal depth must be positive");
    if (goals.click_delay_s < 0) throw std::invalid_argument("click delay must be >= 0");
  }
};

// --- JSON helpers ----------------------------------------------------------------

namespace detail {

inline json vec(const Vec2& v) { return json::array({v.x(), v.y()}); }
inline json vec(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline Vec2 vec2(const json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("expected a 2-vector");
  return {j[0].get<double>(), j[1].get<double>()};
}
inline Vec3 vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json mat(const Mat2& m) { return json::array({vec(Vec2(m.row(0))), vec(Vec2(m.row(1)))}); }
inline Mat2 mat2(const json& j) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument("expected a 2x2 matrix");
  Mat2 m;
  m.row(0) = vec2(j[0]);
  m.row(1) = vec2(j[1]);
  return m;
}

inline json opt(const std::optional<Vec2>& v) { return v ? vec(*v) : json(nullptr); }
inline std::optional<Vec2> opt_vec2(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return vec2(j[key]);
}

// NaN has no JSON literal; it travels as null.
inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double num(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

/// Generic YAML -> JSON so one schema parser serves both file formats.
inline json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Map: {
      json j = json::object();
      for (const auto& kv : node) j[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return j;
    }
    case YAML::NodeType::Sequence: {
      json j = json::array();
      for (const auto& v : node) j.push_back(yaml_to_json(v));
      return j;
    }
    case YAML::NodeType::Scalar: {
      const std::string s = node.Scalar();
      if (node.Tag() == "!") return s;  // quoted
      std::uint64_t u = 0;
      if (YAML::convert<std::uint64_t>::decode(node, u)) return u;
      std::int64_t i = 0;
      if (YAML::convert<std::int64_t>::decode(node, i)) return i;
      double d = 0.0;
      if (YAML::convert<double>::decode(node, d)) return d;
      bool b = false;
      if (YAML::convert<bool>::decode(node, b)) return b;
      return s;
    }
    default:
      return nullptr;
  }
}

}  // namespace detail

inline json to_json(const TrialConfig& c) {
  using detail::vec;
  const auto& p = c.phantom;
  const auto& s = c.servo;
  json j;
  j["master_seed"] = c.master_seed;
  j["phantoms"] = c.phantom_count;
  j["trials_per_phantom"] = c.trials_per_phantom;
  j["workers"] = c.workers;
  j["phantom"] = {{"radius_um", p.radius_um},
                  {"thickness_um", p.thickness_um},
                  {"bump_amplitude_um", p.bump_amplitude_um},
                  {"base_height_um", p.base_height_um},
                  {"bump_count", p.bump_count},
                  {"bump_width_min_um", p.bump_width_min_um},
                  {"bump_width_max_um", p.bump_width_max_um},
                  {"curvature_per_um", p.curvature_per_um},
                  {"slope", vec(p.slope)},
                  {"rcm_point_um", vec(p.rcm_point)}};
  j["camera"] = {{"tilt_x_rad", c.camera.tilt_x_rad},
                 {"tilt_y_rad", c.camera.tilt_y_rad},
                 {"um_per_px", c.camera.um_per_px},
                 {"k1", c.camera.k1}};
  j["oct"] = {{"reference_height_um", c.oct.reference_height_um},
              {"beam_half_width_um", c.oct.beam_half_width_um},
              {"scanner_um_per_volt", detail::mat(c.oct.scanner.um_per_volt)},
              {"scanner_origin_um", vec(c.oct.scanner.origin_um)}};
  j["conversion"] = {{"microscope_um_per_px", s.conv.microscope_um_per_px},
                     {"bscan_height_um_per_px", s.conv.bscan_height_um_per_px},
                     {"bscan_width_um_per_px", s.conv.bscan_width_um_per_px},
                     {"inter_slice_um", s.conv.inter_slice_um}};
  j["perception"] = {{"pixel_sigma", c.perception.pixel_sigma},
                     {"dropout_rate", c.perception.dropout_rate},
                     {"profile_sigma_rows", c.perception.profile_sigma_rows}};
  j["actuation"] = {{"sigma_um", c.actuation.sigma_um}, {"bound_um", c.actuation.bound_um}};
  j["motion"] = {{"max_speed_um_s", c.motion.max_speed_um_s},
                 {"max_accel_um_s2", c.motion.max_accel_um_s2},
                 {"min_pivot_distance_um", c.motion.min_pivot_distance_um}};
  j["rcm_tolerance_um"] = c.rcm_tolerance_um;
  j["servo"] = {{"beta", s.beta},
                {"pixel_update_threshold_px", s.pixel_update_threshold_px},
                {"motion_update_threshold_um", s.motion_update_threshold_um},
                {"realign_threshold_px", s.realign_threshold_px},
                {"safety_offset_um", s.safety_offset_um},
                {"planar_step_cap_um", s.planar_step_cap_um},
                {"z_step_um", s.z_step_um},
                {"z_step_fine_um", s.z_step_fine_um},
                {"fine_zone_um", s.fine_zone_um},
                {"insert_step_um", s.insert_step_um},
                {"bootstrap_probe_um", s.bootstrap_probe_um},
                {"surface_tolerance_rows", s.surface_tolerance_rows},
                {"approach_margin_rows", s.approach_margin_rows}};
  j["calibration"] = {{"grid", c.calibration.grid},
                      {"amplitude_v", c.calibration.amplitude_v},
                      {"noise_px", c.calibration.noise_px},
                      {"card_height_um", c.calibration.card_height_um}};
  j["goals"] = {{"mode", c.goals.mode == GoalMode::Scripted ? "scripted" : "interactive"},
                {"goal_radius_um", c.goals.goal_radius_um},
                {"ilm_goal_px", detail::opt(c.goals.ilm_goal_px)},
                {"start_offset_min_um", c.goals.start_offset_min_um},
                {"start_offset_max_um", c.goals.start_offset_max_um},
                {"start_height_um", c.goals.start_height_um},
                {"subretinal_depth_um", c.goals.subretinal_depth_um},
                {"click_delay_s", c.goals.click_delay_s}};
  j["timing"] = {{"hold_timeout_s", c.hold_timeout_s}, {"max_sim_time_s", c.max_sim_time_s}};
  j["scan"] = {{"length_px", c.scan_length_px}, {"cscan_slices", c.cscan_slices}};
  j["safety"] = {{"insertion_depth_bound_um", c.insertion_depth_bound_um}};
  j["render"] = {{"rasterize", c.render.rasterize}, {"speckle", c.render.speckle}};
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected so typos fail loudly.
inline TrialConfig trial_config_from_json(const json& j, TrialConfig c = {}) {
  using detail::read;
  static const std::vector<std::string> known{
      "master_seed", "phantoms",   "trials_per_phantom", "workers",     "phantom", "camera",
      "oct",         "conversion", "perception",         "actuation",   "motion",  "rcm_tolerance_um",
      "servo",       "calibration", "goals",             "timing",      "scan",    "safety",
      "render"};
  if (!j.is_object()) throw std::invalid_argument("trial config must be a mapping");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("unknown config key: " + key);

  read(j, "master_seed", c.master_seed);
  read(j, "phantoms", c.phantom_count);
  read(j, "trials_per_phantom", c.trials_per_phantom);
  read(j, "workers", c.workers);
  read(j, "rcm_tolerance_um", c.rcm_tolerance_um);
  if (j.contains("phantom")) {
    const auto& p = j["phantom"];
    read(p, "radius_um", c.phantom.radius_um);
    read(p, "thickness_um", c.phantom.thickness_um);
    read(p, "bump_amplitude_um", c.phantom.bump_amplitude_um);
    read(p, "base_height_um", c.phantom.base_height_um);
    read(p, "bump_count", c.phantom.bump_count);
    read(p, "bump_width_min_um", c.phantom.bump_width_min_um);
    read(p, "bump_width_max_um", c.phantom.bump_width_max_um);
    read(p, "curvature_per_um", c.phantom.curvature_per_um);
    if (p.contains("slope")) c.phantom.slope = detail::vec2(p["slope"]);
    if (p.contains("rcm_point_um")) c.phantom.rcm_point = detail::vec3(p["rcm_point_um"]);
  }
  if (j.contains("camera")) {
    const auto& m = j["camera"];
    read(m, "tilt_x_rad", c.camera.tilt_x_rad);
    read(m, "tilt_y_rad", c.camera.tilt_y_rad);
    read(m, "um_per_px", c.camera.um_per_px);
    read(m, "k1", c.camera.k1);
  }
  if (j.contains("oct")) {
    const auto& o = j["oct"];
    read(o, "reference_height_um", c.oct.reference_height_um);
    read(o, "beam_half_width_um", c.oct.beam_half_width_um);
    if (o.contains("scanner_um_per_volt")) c.oct.scanner.um_per_volt = detail::mat2(o["scanner_um_per_volt"]);
    if (o.contains("scanner_origin_um")) c.oct.scanner.origin_um = detail::vec2(o["scanner_origin_um"]);
  }
  if (j.contains("conversion")) {
    const auto& v = j["conversion"];
    read(v, "microscope_um_per_px", c.servo.conv.microscope_um_per_px);
    read(v, "bscan_height_um_per_px", c.servo.conv.bscan_height_um_per_px);
    read(v, "bscan_width_um_per_px", c.servo.conv.bscan_width_um_per_px);
    read(v, "inter_slice_um", c.servo.conv.inter_slice_um);
  }
  c.oct.conv = c.servo.conv;
  if (j.contains("perception")) {
    const auto& n = j["perception"];
    read(n, "pixel_sigma", c.perception.pixel_sigma);
    read(n, "dropout_rate", c.perception.dropout_rate);
    read(n, "profile_sigma_rows", c.perception.profile_sigma_rows);
  }
  if (j.contains("actuation")) {
    read(j["actuation"], "sigma_um", c.actuation.sigma_um);
    read(j["actuation"], "bound_um", c.actuation.bound_um);
  }
  if (j.contains("motion")) {
    const auto& m = j["motion"];
    read(m, "max_speed_um_s", c.motion.max_speed_um_s);
    read(m, "max_accel_um_s2", c.motion.max_accel_um_s2);
    read(m, "min_pivot_distance_um", c.motion.min_pivot_distance_um);
  }
  if (j.contains("servo")) {
    const auto& s = j["servo"];
    read(s, "beta", c.servo.beta);
    read(s, "pixel_update_threshold_px", c.servo.pixel_update_threshold_px);
    read(s, "motion_update_threshold_um", c.servo.motion_update_threshold_um);
    read(s, "realign_threshold_px", c.servo.realign_threshold_px);
    read(s, "safety_offset_um", c.servo.safety_offset_um);
    read(s, "planar_step_cap_um", c.servo.planar_step_cap_um);
    read(s, "z_step_um", c.servo.z_step_um);
    read(s, "z_step_fine_um", c.servo.z_step_fine_um);
    read(s, "fine_zone_um", c.servo.fine_zone_um);
    read(s, "insert_step_um", c.servo.insert_step_um);
    read(s, "bootstrap_probe_um", c.servo.bootstrap_probe_um);
    read(s, "surface_tolerance_rows", c.servo.surface_tolerance_rows);
    read(s, "approach_margin_rows", c.servo.approach_margin_rows);
  }
  if (j.contains("calibration")) {
    const auto& k = j["calibration"];
    read(k, "grid", c.calibration.grid);
    read(k, "amplitude_v", c.calibration.amplitude_v);
    read(k, "noise_px", c.calibration.noise_px);
    read(k, "card_height_um", c.calibration.card_height_um);
  }
  if (j.contains("goals")) {
    const auto& g = j["goals"];
    if (g.contains("mode")) {
      const auto mode = g["mode"].get<std::string>();
      if (mode == "scripted") c.goals.mode = GoalMode::Scripted;
      else if (mode == "interactive") c.goals.mode = GoalMode::Interactive;
      else throw std::invalid_argument("goals.mode must be scripted or interactive");
    }
    read(g, "goal_radius_um", c.goals.goal_radius_um);
    c.goals.ilm_goal_px = detail::opt_vec2(g, "ilm_goal_px");
    read(g, "start_offset_min_um", c.goals.start_offset_min_um);
    read(g, "start_offset_max_um", c.goals.start_offset_max_um);
    read(g, "start_height_um", c.goals.start_height_um);
    read(g, "subretinal_depth_um", c.goals.subretinal_depth_um);
    read(g, "click_delay_s", c.goals.click_delay_s);
  }
  if (j.contains("timing")) {
    read(j["timing"], "hold_timeout_s", c.hold_timeout_s);
    read(j["timing"], "max_sim_time_s", c.max_sim_time_s);
  }
  if (j.contains("scan")) {
    read(j["scan"], "length_px", c.scan_length_px);
    read(j["scan"], "cscan_slices", c.cscan_slices);
  }
  if (j.contains("safety")) read(j["safety"], "insertion_depth_bound_um", c.insertion_depth_bound_um);
  if (j.contains("render")) {
    read(j["render"], "rasterize", c.render.rasterize);
    read(j["render"], "speckle", c.render.speckle);
  }
  c.validate();
  return c;
}

inline TrialConfig trial_config_from_yaml(const std::string& text) {
  const YAML::Node root = YAML::Load(text);
  if (!root || root.IsNull()) return {};
  return trial_config_from_json(detail::yaml_to_json(root));
}

inline TrialConfig load_trial_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return trial_config_from_yaml(ss.str());
}

// --- trial setup ---------------------------------------------------------------

/// 64-bit seed drawn from a named sub-stream of the master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t index) {
  auto rng = make_stream(master, name, index);
  return rng();
}

struct TrialSetup {
  int phantom_index = 0;
  int trial_index = 0;
  std::uint64_t phantom_seed = 0;
  std::uint64_t trial_seed = 0;
  std::shared_ptr<const phantom::EyePhantom> eye;
  Vec3 start_tip = Vec3::Zero();
  std::optional<Vec2> ilm_goal_px;  // scripted goal (nullopt in interactive mode)
};

/// Approximate world XY seen at a pixel at height z (distortion ignored).
inline Vec2 unproject_xy(const imaging::CameraModel& cam, const Vec2& px, double z) {
  const Mat3 rot = cam.rotation();
  const Vec2 d = (px - cam.principal_point) * cam.um_per_px;
  const Vec3 w = rot * Vec3(d.x(), d.y(), 0.0);
  return w.head<2>() + (z - w.z()) * rot.col(2).head<2>() / rot(2, 2);
}

inline TrialSetup make_setup(const TrialConfig& cfg, int phantom_index, int trial_index) {
  TrialSetup s;
  s.phantom_index = phantom_index;
  s.trial_index = trial_index;
  s.phantom_seed = derive_seed(cfg.master_seed, "phantom", static_cast<std::uint64_t>(phantom_index));
  s.trial_seed = derive_seed(cfg.master_seed, "trial",
                             (static_cast<std::uint64_t>(phantom_index) << 32) | static_cast<std::uint32_t>(trial_index));
  s.eye = std::make_shared<const phantom::EyePhantom>(phantom::make_phantom(s.phantom_seed, cfg.phantom));
  const auto& eye = *s.eye;

  auto rng = make_stream(s.trial_seed, "goals");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vec2 goal_xy;
  if (cfg.goals.ilm_goal_px) {
    goal_xy = unproject_xy(cfg.camera, *cfg.goals.ilm_goal_px, eye.config().base_height_um);
  } else {
    const double r = std::min(cfg.goals.goal_radius_um, 0.9 * eye.radius()) * std::sqrt(unit(rng));
    const double th = 2.0 * M_PI * unit(rng);
    goal_xy = Vec2(r * std::cos(th), r * std::sin(th));
  }
  if (!eye.in_domain(goal_xy)) throw std::invalid_argument("ILM goal lies outside the phantom");
  if (cfg.goals.mode == GoalMode::Scripted) {
    if (cfg.goals.ilm_goal_px) {
      s.ilm_goal_px = *cfg.goals.ilm_goal_px;
    } else {
      const Vec2 px = cfg.camera.project(Vec3(goal_xy.x(), goal_xy.y(), eye.ilm_height_at(goal_xy)));
      s.ilm_goal_px = Vec2(std::round(px.x()), std::round(px.y()));  // a click lands on a pixel
    }
  }

  // Start somewhere around the goal, safely above the retina.
  Vec2 start_xy = goal_xy;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double d = cfg.goals.start_offset_min_um +
                     (cfg.goals.start_offset_max_um - cfg.goals.start_offset_min_um) * unit(rng);
    const double th = 2.0 * M_PI * unit(rng);
    const Vec2 cand = goal_xy + d * Vec2(std::cos(th), std::sin(th));
    if (cand.norm() <= 0.9 * eye.radius()) {
      start_xy = cand;
      break;
    }
  }
  s.start_tip = Vec3(start_xy.x(), start_xy.y(), eye.ilm_height_at(start_xy) + cfg.goals.start_height_um);
  return s;
}

/// Laser-card calibration of the galvo against the microscope.
struct CalibrationOutcome {
  galvo::GalvoCalibration calibration;
  galvo::CalibrationSampleSet samples;
  double rms_px = 0.0;
};

inline CalibrationOutcome calibrate(const TrialConfig& cfg, std::uint64_t seed) {
  auto rng = make_stream(seed, "calibration");
  CalibrationOutcome out;
  out.samples = imaging::laser_card_samples(cfg.oct.scanner, cfg.camera, cfg.calibration.card_height_um,
                                            galvo::voltage_grid(cfg.calibration.grid, cfg.calibration.amplitude_v),
                                            cfg.calibration.noise_px, rng);
  out.calibration = galvo::fit_calibration(out.samples);
  out.rms_px = galvo::rms_residual(out.calibration, out.samples);
  return out;
}

// --- clocks ----------------------------------------------------------------------

/// Whether a stream at `rate_hz` produces a frame at control tick `tick`.
inline bool frame_due(std::uint64_t tick, int rate_hz, int control_hz = kControlRateHz) {
  if (tick == 0) return true;
  const auto r = static_cast<std::uint64_t>(rate_hz);
  const auto c = static_cast<std::uint64_t>(control_hz);
  return tick * r / c != (tick - 1) * r / c;
}

inline imaging::RenderOptions render_options_for(const TrialConfig& cfg, std::uint64_t trial_seed,
                                                 std::uint64_t tick) {
  imaging::RenderOptions o = cfg.render;
  o.speckle_seed = trial_seed ^ (tick * 0x9e3779b97f4a7c15ull);
  return o;
}

/// Ground-truth tip height above the ILM below it; NaN off the disc.
inline double clearance_um(const phantom::EyePhantom& eye, const Vec3& tip) {
  const Vec2 xy = tip.head<2>();
  if (!eye.in_domain(xy)) return std::numeric_limits<double>::quiet_NaN();
  return tip.z() - eye.ilm_height_at(xy);
}

/// Scripted subretinal click: walk down the imaged needle axis from the tip
/// until the point is `depth_um` below the segmented ILM, then snap to a pixel.
inline std::optional<Vec2> scripted_subretinal_goal(const imaging::PerceptionResult& p, double depth_um,
                                                    const ConversionTable& conv) {
  if (!p.oct_valid() || p.ilm_profile.empty()) return std::nullopt;
  const Vec2 dir = (*p.tip_oct - *p.base_oct).normalized();
  if (!(dir.y() > 0.0)) return std::nullopt;
  const double depth_rows = depth_um / conv.bscan_height_um_per_px;
  const auto n = static_cast<double>(p.ilm_profile.size());
  for (double s = 0.0; s < 4.0 * kBScanRows; s += 0.25) {
    const Vec2 q = *p.tip_oct + s * dir;
    if (q.x() < 0.0 || q.x() > n - 1.0 || q.y() >= kBScanRows) return std::nullopt;
    const auto& ilm = p.ilm_profile[static_cast<std::size_t>(std::lround(q.x()))];
    if (!ilm) continue;
    if (q.y() - *ilm >= depth_rows) {
      const Vec2 px(std::round(q.x()), std::round(q.y()));
      if (px.y() < p.tip_oct->y()) return std::nullopt;
      return px;
    }
  }
  return std::nullopt;
}

// --- the simulation ---------------------------------------------------------------

/// One trial as a steppable simulation at the control rate. The robot executes
/// a command to completion, then the controller waits for frames captured
/// after the motion settled before deciding again ("move, then look").
class TrialSimulation {
 public:
  using MicroscopeObserver = std::function<void(const imaging::MicroscopeFrame&)>;
  using BScanObserver = std::function<void(const imaging::BScanFrame&)>;

  TrialSimulation(TrialConfig cfg, TrialSetup setup, bool keep_frames = false)
      : cfg_(std::move(cfg)),
        setup_(std::move(setup)),
        keep_frames_(keep_frames),
        executor_(setup_.start_tip, robot::RcmConstraint{setup_.eye->rcm_point(), cfg_.rcm_tolerance_um},
                  cfg_.motion, cfg_.actuation, make_stream(setup_.trial_seed, "actuation")),
        controller_(cfg_.servo),
        perception_rng_(make_stream(setup_.trial_seed, "perception")) {
    cfg_.validate();
    const auto cal = calibrate(cfg_, setup_.trial_seed);
    record_.calibration = cal.calibration;
    record_.calibration_rms_px = cal.rms_px;
    record_.phantom_index = setup_.phantom_index;
    record_.trial_index = setup_.trial_index;
    record_.phantom_seed = setup_.phantom_seed;
    record_.trial_seed = setup_.trial_seed;
    record_.config = to_json(cfg_);
    record_.config.erase("workers");  // execution detail; must not change the record
    record_.phases.push_back({0.0, controller_.phase()});
    wait_started_ = 0.0;
    sense();
    push_trace();
  }

  const TrialConfig& config() const { return cfg_; }
  const TrialSetup& setup() const { return setup_; }
  const phantom::EyePhantom& eye() const { return *setup_.eye; }
  const servo::Controller& controller() const { return controller_; }
  const robot::RobotExecutor& robot() const { return executor_; }
  const imaging::PerceptionResult& perception() const { return perception_; }
  const std::optional<imaging::MicroscopeFrame>& latest_microscope() const { return latest_ms_; }
  const std::optional<imaging::BScanFrame>& latest_bscan() const { return latest_bs_; }
  const std::vector<imaging::MicroscopeFrame>& microscope_frames() const { return ms_frames_; }
  const std::vector<imaging::BScanFrame>& bscan_frames() const { return bs_frames_; }
  const galvo::GalvoCalibration& calibration() const { return record_.calibration; }
  const metrics::TrialRecord& record() const { return record_; }

  Phase phase() const { return controller_.phase(); }
  std::uint64_t tick_index() const { return tick_; }
  double sim_time() const { return time_of(tick_); }
  bool finished() const { return finished_; }

  void on_microscope(MicroscopeObserver f) { on_ms_ = std::move(f); }
  void on_bscan(BScanObserver f) { on_bs_ = std::move(f); }

  /// Surgeon click in the microscope view. Throws std::logic_error out of phase.
  void click_ilm_goal(const Vec2& px) {
    if (finished_) throw std::logic_error("trial already finished");
    if (!(px.x() >= 0 && px.y() >= 0 && px.x() < kMicroscopeWidth && px.y() < kMicroscopeHeight))
      throw std::invalid_argument("ILM goal outside the microscope frame");
    controller_.set_ilm_goal(px);
    record_.goal_ilm_px = px;
    note_phase();
  }

  /// Surgeon click in the B-scan. Throws std::logic_error out of phase.
  void click_subretinal_goal(const Vec2& px) {
    if (finished_) throw std::logic_error("trial already finished");
    if (!(px.x() >= 0 && px.y() >= 0 && px.x() < kBScanColumns && px.y() < kBScanRows))
      throw std::invalid_argument("subretinal goal outside the B-scan frame");
    if (!latest_bs_) throw std::logic_error("no B-scan available");
    controller_.set_subretinal_goal(px, perception_);
    record_.goal_subretinal_px = px;
    record_.insertion_distance_um = controller_.workflow().insertion_total_um;
    record_.insertion_axis_point = executor_.reference().tip_position;
    record_.insertion_axis_dir = executor_.reference().axis_direction;
    goal_geometry_ = latest_bs_->geometry;
    inserting_ = true;
    note_phase();
  }

  /// Advance one control period.
  void tick() {
    if (finished_) return;
    ++tick_;
    const bool was_moving = !executor_.idle();
    executor_.tick();
    if (was_moving && executor_.idle()) settle_tick_ = tick_;

    sense();
    scripted_clicks();
    decide();
    push_trace();
    check_termination();
  }

  /// Run to completion.
  const metrics::TrialRecord& run() {
    while (!finished_) tick();
    return record_;
  }

 private:
  static double time_of(std::uint64_t tick) { return static_cast<double>(tick) / kControlRateHz; }

  phantom::SceneSnapshot snapshot() const {
    phantom::SceneSnapshot s;
    s.tool = executor_.actual();
    s.tool.frame_id = tick_;
    s.phantom = setup_.eye;
    s.sim_time = time_of(tick_);
    const double c = clearance_um(*setup_.eye, s.tool.tip_position);
    s.inserted_depth_um = std::isfinite(c) && c < 0.0 ? -c : 0.0;
    return s;
  }

  void sense() {
    const bool ms_due = frame_due(tick_, kMicroscopeRateHz);
    const bool bs_due = frame_due(tick_, kBScanRateHz);
    if (!ms_due && !bs_due) return;
    const auto scene = snapshot();
    const auto opts = render_options_for(cfg_, setup_.trial_seed, tick_);
    if (ms_due) {
      auto frame = imaging::render_microscope(scene, cfg_.camera, opts);
      imaging::perceive_microscope_into(perception_, frame, cfg_.perception, perception_rng_);
      ms_tick_ = tick_;
      if (perception_.rgb_valid()) {
        try {
          scan_line_ = imaging::track_tool_scanline(perception_, cfg_.scan_length_px);
          line_tick_ = tick_;
        } catch (const std::invalid_argument&) {
          // keep the previous line
        }
      }
      if (on_ms_) on_ms_(frame);
      if (keep_frames_) ms_frames_.push_back(frame);
      latest_ms_ = std::move(frame);
    }
    if (bs_due && scan_line_) {
      record_.scan_lines.push_back({tick_, *scan_line_});
      try {
        auto frame = imaging::render_bscan(scene, *scan_line_, record_.calibration, cfg_.oct, opts);
        imaging::perceive_bscan_into(perception_, frame, cfg_.perception, perception_rng_);
        if (on_bs_) on_bs_(frame);
        if (keep_frames_) bs_frames_.push_back(frame);
        latest_bs_ = std::move(frame);
      } catch (const std::domain_error&) {
        perception_.tip_oct.reset();
        perception_.base_oct.reset();
        perception_.ilm_profile.clear();
        perception_.rpe_profile.clear();
        perception_.bscan_tick = tick_;
      }
      bs_tick_ = tick_;
      bs_line_tick_ = line_tick_;
    }
  }

  static bool needs_oct(Phase p) { return p == Phase::LowerZ || p == Phase::Insert; }

  bool decision_ready() const {
    if (!executor_.idle() || settle_tick_ > tick_) return false;
    const Phase p = phase();
    if (servo::is_user_wait(p) || p == Phase::Done) return false;
    const Phase active = p == Phase::Hold ? controller_.workflow().resume_phase : p;
    if (ms_tick_ < settle_tick_ || ms_tick_ <= decided_ms_tick_) return false;
    if (needs_oct(active) && (bs_line_tick_ < settle_tick_ || bs_tick_ <= decided_bs_tick_ || !bs_tick_))
      return false;
    return true;
  }

  void decide() {
    if (!decision_ready()) return;
    decided_ms_tick_ = ms_tick_;
    decided_bs_tick_ = bs_tick_;
    const Phase issuing = phase();
    const Vec2 p_bar = executor_.actual().tip_position.head<2>();
    const auto cmd = controller_.step(perception_, p_bar);
    if (!cmd.is_none()) {
      record_.commands.push_back({tick_, issuing, cmd});
      const auto& ref = executor_.reference();
      Vec3 target = ref.tip_position;
      switch (cmd.kind) {
        case servo::MotionCommand::Kind::Planar:
        case servo::MotionCommand::Kind::Vertical:
          target += cmd.translation;
          break;
        case servo::MotionCommand::Kind::Insert:
          target -= cmd.axial_advance_um * ref.axis_direction;  // axis points up the shaft
          break;
        case servo::MotionCommand::Kind::None:
          break;
      }
      try {
        executor_.move_to(target);
      } catch (const robot::InfeasibleTrajectory&) {
        abort("infeasible_trajectory");
        return;
      }
      settle_tick_ = executor_.idle() ? tick_ : std::numeric_limits<std::uint64_t>::max();
    }
    note_phase();
  }

  void scripted_clicks() {
    if (cfg_.goals.mode != GoalMode::Scripted) return;
    const Phase p = phase();
    if (!servo::is_user_wait(p) || sim_time() < wait_started_ + cfg_.goals.click_delay_s) return;
    if (p == Phase::AwaitIlmGoal) {
      if (setup_.ilm_goal_px) click_ilm_goal(*setup_.ilm_goal_px);
      return;
    }
    if (bs_line_tick_ < settle_tick_ || !executor_.idle()) return;
    const auto goal = scripted_subretinal_goal(perception_, cfg_.goals.subretinal_depth_um, cfg_.conv());
    if (!goal) return;
    try {
      click_subretinal_goal(*goal);
    } catch (const std::invalid_argument&) {
      // perception not usable this tick; try again on the next B-scan
    }
  }

  void note_phase() {
    const Phase p = phase();
    if (p == record_.phases.back().phase) return;
    const double t = sim_time();
    record_.phases.push_back({t, p});
    if (servo::is_user_wait(p)) wait_started_ = t;
    if (p == Phase::Hold) hold_started_ = t;
    if (p == Phase::AtSurface) capture_arrival();
  }

  void capture_arrival() {
    const auto& tool = executor_.actual();
    if (auto k = imaging::microscope_keypoints(tool, cfg_.camera)) record_.truth_tip_rgb_px = k->tip;
    if (latest_bs_) {
      const auto& g = latest_bs_->geometry;
      record_.truth_tip_oct_px = Vec2(g.column_of(tool.tip_position.head<2>()), g.row_of_height(tool.tip_position.z()));
    }
    try {
      const Vec2 ilm = imaging::project_tip_to_ilm(perception_);
      record_.ilm_below_tip_px = ilm;
      record_.i_ilm_px = Vec2(ilm.x(), servo::surface_goal_row(ilm, cfg_.servo));
    } catch (const std::exception&) {
    }
    record_.arrival_clearance_um = clearance_um(*setup_.eye, tool.tip_position);
  }

  void push_trace() {
    const auto& tool = executor_.actual();
    metrics::TracePoint tp;
    tp.tick = tick_;
    tp.time = sim_time();
    tp.tip = tool.tip_position;
    tp.axis = tool.axis_direction;
    tp.rcm_error_um = robot::rcm_error(tool, executor_.rcm());
    tp.phase = phase();
    tp.clearance_um = clearance_um(*setup_.eye, tool.tip_position);
    record_.trace.push_back(tp);
    if (inserting_) record_.insertion_trace.push_back(tool.tip_position);
  }

  void check_termination() {
    if (finished_) return;
    if (phase() == Phase::Done && executor_.idle()) {
      post_insertion_volume();
      finish(metrics::Outcome::Done);
      return;
    }
    if (phase() == Phase::Hold && sim_time() - hold_started_ > cfg_.hold_timeout_s) {
      abort(controller_.workflow().hold_reason == servo::HoldReason::Perception ? "perception" : "singular_jacobian");
      return;
    }
    if (sim_time() >= cfg_.max_sim_time_s) abort("timeout");
  }

  /// 32-slice volume centered on the scan the goal was clicked in.
  void post_insertion_volume() {
    if (!goal_geometry_) return;
    const auto& tip = executor_.actual().tip_position;
    const int gt = cfg_.cscan_slices / 2;
    const double spacing = cfg_.conv().inter_slice_um;
    const double off = goal_geometry_->off_plane_um(tip.head<2>());
    const int actual = std::clamp(gt + static_cast<int>(std::lround(off / spacing)), 0, cfg_.cscan_slices - 1);
    const auto g = goal_geometry_->shifted((actual - gt) * spacing);
    record_.cscan = metrics::CScanResult{gt, actual, Vec2(g.column_of(tip.head<2>()), g.row_of_height(tip.z()))};
  }

  void abort(std::string cause) {
    record_.abort_cause = std::move(cause);
    record_.abort_phase = phase() == Phase::Hold ? controller_.workflow().resume_phase : phase();
    finish(metrics::Outcome::Aborted);
  }

  void finish(metrics::Outcome outcome) {
    finished_ = true;
    record_.outcome = outcome;
    record_.end_time = sim_time();
    record_.end_tick = tick_;
    record_.jacobian_updates = controller_.updates().size();
  }

  TrialConfig cfg_;
  TrialSetup setup_;
  bool keep_frames_;
  robot::RobotExecutor executor_;
  servo::Controller controller_;
  std::mt19937_64 perception_rng_;
  imaging::PerceptionResult perception_;
  std::optional<galvo::ScanLine> scan_line_;
  std::optional<imaging::MicroscopeFrame> latest_ms_;
  std::optional<imaging::BScanFrame> latest_bs_;
  std::optional<imaging::BScanGeometry> goal_geometry_;
  std::vector<imaging::MicroscopeFrame> ms_frames_;
  std::vector<imaging::BScanFrame> bs_frames_;
  MicroscopeObserver on_ms_;
  BScanObserver on_bs_;
  metrics::TrialRecord record_;

  std::uint64_t tick_ = 0;
  std::uint64_t settle_tick_ = 0;
  std::uint64_t ms_tick_ = 0;
  std::uint64_t bs_tick_ = 0;
  std::uint64_t line_tick_ = 0;
  std::uint64_t bs_line_tick_ = 0;
  std::uint64_t decided_ms_tick_ = 0;
  std::uint64_t decided_bs_tick_ = 0;
  double wait_started_ = 0.0;
  double hold_started_ = 0.0;
  bool inserting_ = false;
  bool finished_ = false;
};

inline metrics::TrialRecord run_trial(const TrialConfig& cfg, const TrialSetup& setup) {
  TrialSimulation sim(cfg, setup);
  return sim.run();
}

inline metrics::TrialRecord run_trial(const TrialConfig& cfg, int phantom_index = 0, int trial_index = 0) {
  return run_trial(cfg, make_setup(cfg, phantom_index, trial_index));
}

// --- record persistence -----------------------------------------------------------

inline json to_json(const metrics::TrialRecord& r) {
  using detail::num;
  using detail::opt;
  using detail::vec;
  json j;
  j["format_version"] = r.format_version;
  j["build"] = r.build;
  j["phantom_index"] = r.phantom_index;
  j["trial_index"] = r.trial_index;
  j["phantom_seed"] = r.phantom_seed;
  j["trial_seed"] = r.trial_seed;
  j["outcome"] = r.outcome == metrics::Outcome::Done ? "DONE" : "ABORTED";
  j["abort_cause"] = r.abort_cause;
  j["abort_phase"] = r.abort_phase ? json(std::string(servo::to_string(*r.abort_phase))) : json(nullptr);
  j["end_time"] = r.end_time;
  j["end_tick"] = r.end_tick;
  j["goal_ilm_px"] = opt(r.goal_ilm_px);
  j["goal_subretinal_px"] = opt(r.goal_subretinal_px);
  j["truth_tip_rgb_px"] = opt(r.truth_tip_rgb_px);
  j["truth_tip_oct_px"] = opt(r.truth_tip_oct_px);
  j["ilm_below_tip_px"] = opt(r.ilm_below_tip_px);
  j["i_ilm_px"] = opt(r.i_ilm_px);
  j["arrival_clearance_um"] = r.arrival_clearance_um ? num(*r.arrival_clearance_um) : json(nullptr);
  j["insertion_distance_um"] = r.insertion_distance_um;
  j["insertion_axis"] = {{"point", vec(r.insertion_axis_point)}, {"direction", vec(r.insertion_axis_dir)}};
  json ins = json::array();
  for (const auto& p : r.insertion_trace) ins.push_back(vec(p));
  j["insertion_trace"] = ins;
  j["cscan"] = r.cscan ? json{{"gt_slice", r.cscan->gt_slice},
                              {"actual_slice", r.cscan->actual_slice},
                              {"landed_tip_oct", vec(r.cscan->landed_tip_oct)}}
                       : json(nullptr);
  j["calibration"] = {{"R", detail::mat(r.calibration.gain)}, {"T", vec(r.calibration.offset)},
                      {"rms_px", r.calibration_rms_px}};
  j["jacobian_updates"] = r.jacobian_updates;
  json phases = json::array();
  for (const auto& e : r.phases) phases.push_back({{"time", e.time}, {"phase", std::string(servo::to_string(e.phase))}});
  j["phases"] = phases;
  json trace = json::array();
  for (const auto& t : r.trace)
    trace.push_back({t.tick, t.time, vec(t.tip), vec(t.axis), t.rcm_error_um, std::string(servo::to_string(t.phase)),
                     num(t.clearance_um)});
  j["trace_columns"] = {"tick", "time", "tip", "axis", "rcm_error_um", "phase", "clearance_um"};
  j["trace"] = trace;
  json cmds = json::array();
  for (const auto& c : r.commands)
    cmds.push_back({{"tick", c.tick},
                    {"phase", std::string(servo::to_string(c.phase))},
                    {"kind", std::string(servo::to_string(c.command.kind))},
                    {"translation", vec(c.command.translation)},
                    {"axial_advance_um", c.command.axial_advance_um}});
  j["commands"] = cmds;
  json scans = json::array();
  for (const auto& s : r.scan_lines) scans.push_back({s.tick, vec(s.line.center), vec(s.line.tangent), s.line.n_columns});
  j["scan_lines"] = scans;
  j["config"] = r.config;
  return j;
}

class RecordVersionMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline metrics::TrialRecord record_from_json(const json& j) {
  using detail::opt_vec2;
  using detail::vec2;
  using detail::vec3;
  metrics::TrialRecord r;
  r.format_version = j.at("format_version").get<int>();
  if (r.format_version != kRecordFormatVersion)
    throw RecordVersionMismatch("record format " + std::to_string(r.format_version) + " is not supported (expected " +
                                std::to_string(kRecordFormatVersion) + ")");
  r.build = j.value("build", std::string());
  r.phantom_index = j.value("phantom_index", 0);
  r.trial_index = j.value("trial_index", 0);
  r.phantom_seed = j.value("phantom_seed", std::uint64_t{0});
  r.trial_seed = j.value("trial_seed", std::uint64_t{0});
  r.outcome = j.value("outcome", std::string("ABORTED")) == "DONE" ? metrics::Outcome::Done : metrics::Outcome::Aborted;
  r.abort_cause = j.value("abort_cause", std::string());
  if (j.contains("abort_phase") && !j["abort_phase"].is_null())
    r.abort_phase = servo::phase_from_string(j["abort_phase"].get<std::string>());
  r.end_time = j.value("end_time", 0.0);
  r.end_tick = j.value("end_tick", std::uint64_t{0});
  r.goal_ilm_px = opt_vec2(j, "goal_ilm_px");
  r.goal_subretinal_px = opt_vec2(j, "goal_subretinal_px");
  r.truth_tip_rgb_px = opt_vec2(j, "truth_tip_rgb_px");
  r.truth_tip_oct_px = opt_vec2(j, "truth_tip_oct_px");
  r.ilm_below_tip_px = opt_vec2(j, "ilm_below_tip_px");
  r.i_ilm_px = opt_vec2(j, "i_ilm_px");
  if (j.contains("arrival_clearance_um") && !j["arrival_clearance_um"].is_null())
    r.arrival_clearance_um = j["arrival_clearance_um"].get<double>();
  r.insertion_distance_um = j.value("insertion_distance_um", 0.0);
  if (j.contains("insertion_axis")) {
    r.insertion_axis_point = vec3(j["insertion_axis"]["point"]);
    r.insertion_axis_dir = vec3(j["insertion_axis"]["direction"]);
  }
  if (j.contains("insertion_trace"))
    for (const auto& p : j["insertion_trace"]) r.insertion_trace.push_back(vec3(p));
  if (j.contains("cscan") && !j["cscan"].is_null()) {
    const auto& c = j["cscan"];
    r.cscan = metrics::CScanResult{c["gt_slice"].get<int>(), c["actual_slice"].get<int>(), vec2(c["landed_tip_oct"])};
  }
  if (j.contains("calibration")) {
    r.calibration.gain = detail::mat2(j["calibration"]["R"]);
    r.calibration.offset = vec2(j["calibration"]["T"]);
    r.calibration_rms_px = j["calibration"].value("rms_px", 0.0);
  }
  r.jacobian_updates = j.value("jacobian_updates", std::size_t{0});
  if (j.contains("phases"))
    for (const auto& e : j["phases"])
      r.phases.push_back({e["time"].get<double>(), servo::phase_from_string(e["phase"].get<std::string>())});
  if (j.contains("trace"))
    for (const auto& t : j["trace"]) {
      metrics::TracePoint tp;
      tp.tick = t[0].get<std::uint64_t>();
      tp.time = t[1].get<double>();
      tp.tip = vec3(t[2]);
      tp.axis = vec3(t[3]);
      tp.rcm_error_um = t[4].get<double>();
      tp.phase = servo::phase_from_string(t[5].get<std::string>());
      tp.clearance_um = detail::num(t[6]);
      r.trace.push_back(tp);
    }
  if (j.contains("commands"))
    for (const auto& c : j["commands"]) {
      metrics::CommandEntry e;
      e.tick = c["tick"].get<std::uint64_t>();
      e.phase = servo::phase_from_string(c["phase"].get<std::string>());
      const auto kind = c["kind"].get<std::string>();
      using K = servo::MotionCommand::Kind;
      e.command.kind = kind == "planar" ? K::Planar : kind == "vertical" ? K::Vertical : kind == "insert" ? K::Insert : K::None;
      e.command.translation = vec3(c["translation"]);
      e.command.axial_advance_um = c["axial_advance_um"].get<double>();
      r.commands.push_back(e);
    }
  if (j.contains("scan_lines"))
    for (const auto& s : j["scan_lines"]) {
      metrics::ScanRecord sr;
      sr.tick = s[0].get<std::uint64_t>();
      sr.line.center = vec2(s[1]);
      sr.line.tangent = vec2(s[2]);
      sr.line.n_columns = s[3].get<int>();
      r.scan_lines.push_back(sr);
    }
  r.config = j.value("config", json::object());
  return r;
}

inline void save_record(const std::string& path, const metrics::TrialRecord& r) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << to_json(r).dump() << '\n';
}

inline metrics::TrialRecord load_record(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  return record_from_json(json::parse(f));
}

// --- replay -----------------------------------------------------------------------

struct ReplayResult {
  std::vector<imaging::MicroscopeFrame> microscope;
  std::vector<imaging::BScanFrame> bscan;
  bool truncated = false;
  std::string warning;
};

/// Re-renders the frames a trial produced from its logged poses and scan lines.
/// `rasterize` overrides the recorded render setting (e.g. to export PNGs).
inline ReplayResult replay(const metrics::TrialRecord& rec, std::optional<bool> rasterize = std::nullopt) {
  if (rec.format_version != kRecordFormatVersion) throw RecordVersionMismatch("record format version mismatch");
  TrialConfig cfg = trial_config_from_json(rec.config);
  if (rasterize) cfg.render.rasterize = *rasterize;
  auto eye = std::make_shared<const phantom::EyePhantom>(phantom::make_phantom(rec.phantom_seed, cfg.phantom));
  ReplayResult out;
  if (rec.trace.empty() || rec.trace.back().tick < rec.end_tick) {
    out.truncated = true;
    out.warning = "record is truncated: trace ends at tick " +
                  std::to_string(rec.trace.empty() ? 0 : rec.trace.back().tick) + " of " + std::to_string(rec.end_tick);
  }
  std::size_t scan = 0;
  for (const auto& tp : rec.trace) {
    const bool ms_due = frame_due(tp.tick, kMicroscopeRateHz);
    while (scan < rec.scan_lines.size() && rec.scan_lines[scan].tick < tp.tick) ++scan;
    const bool bs_due = scan < rec.scan_lines.size() && rec.scan_lines[scan].tick == tp.tick;
    if (!ms_due && !bs_due) continue;
    phantom::SceneSnapshot s;
    s.tool = phantom::ToolPose{tp.tip, tp.axis, tp.tick};
    s.phantom = eye;
    s.sim_time = tp.time;
    const auto opts = render_options_for(cfg, rec.trial_seed, tp.tick);
    if (ms_due) out.microscope.push_back(imaging::render_microscope(s, cfg.camera, opts));
    if (bs_due) {
      try {
        out.bscan.push_back(imaging::render_bscan(s, rec.scan_lines[scan].line, rec.calibration, cfg.oct, opts));
      } catch (const std::domain_error&) {
      }
    }
  }
  return out;
}

// --- batch --------------------------------------------------------------------------

struct BatchResult {
  std::vector<metrics::TrialRecord> records;
  std::vector<metrics::MetricReport> reports;
  metrics::Aggregate aggregate;
  std::string hash;
};

/// Trial i of a batch: phantoms cycle fastest so any prefix covers every eye.
inline std::pair<int, int> batch_slot(const TrialConfig& cfg, int i) {
  return {i % cfg.phantom_count, i / cfg.phantom_count};
}

inline int default_trial_count(const TrialConfig& cfg) { return cfg.phantom_count * cfg.trials_per_phantom; }

inline std::string batch_hash(const std::vector<metrics::TrialRecord>& records, const metrics::Aggregate& agg) {
  std::uint64_t h = stable_hash("");
  for (const auto& r : records) h = stable_hash(to_json(r).dump(), h);
  h = stable_hash(metrics::aggregate_csv(agg), h);
  return hex64(h);
}

inline BatchResult run_batch(const TrialConfig& cfg, std::optional<int> trials = std::nullopt) {
  cfg.validate();
  const int n = trials.value_or(default_trial_count(cfg));
  if (n < 1) throw std::invalid_argument("trial count must be positive");
  BatchResult out;
  out.records.resize(static_cast<std::size_t>(n));

  // Trials are independent; run them on a small pool and reduce in index order.
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const int workers = std::max(1, std::min(n, cfg.workers > 0 ? cfg.workers : static_cast<int>(hw)));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      const auto [p, t] = batch_slot(cfg, i);
      out.records[static_cast<std::size_t>(i)] = run_trial(cfg, p, t);
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::future<void>> pool;
    for (int w = 0; w < workers; ++w) pool.push_back(std::async(std::launch::async, work));
    for (auto& f : pool) f.get();
  }

  std::vector<metrics::Outcome> outcomes;
  for (const auto& r : out.records) {
    out.reports.push_back(metrics::compute_report(r, cfg.conv()));
    outcomes.push_back(r.outcome);
  }
  out.aggregate = metrics::aggregate(out.reports, outcomes);
  out.hash = batch_hash(out.records, out.aggregate);
  return out;
}

inline std::string record_filename(const metrics::TrialRecord& r) {
  return "trial_p" + std::to_string(r.phantom_index) + "_t" + std::to_string(r.trial_index) + ".json";
}

/// Writes records/, metrics.json, aggregate.csv, aggregate.json, summary.json.
inline void write_batch(const std::filesystem::path& dir, const BatchResult& b) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "records");
  json per_trial = json::array();
  for (std::size_t i = 0; i < b.records.size(); ++i) {
    const auto& r = b.records[i];
    save_record((dir / "records" / record_filename(r)).string(), r);
    json m = metrics::to_json(b.reports[i]);
    m["phantom_index"] = r.phantom_index;
    m["trial_index"] = r.trial_index;
    m["outcome"] = r.outcome == metrics::Outcome::Done ? "DONE" : "ABORTED";
    m["abort_cause"] = r.abort_cause;
    per_trial.push_back(m);
  }
  auto write = [&](const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
  };
  write(dir / "metrics.json", per_trial.dump(2) + "\n");
  write(dir / "aggregate.csv", metrics::aggregate_csv(b.aggregate));
  write(dir / "aggregate.json", metrics::to_json(b.aggregate).dump(2) + "\n");
  write(dir / "summary.json", json{{"version", kVersion},
                                   {"trials", b.records.size()},
                                   {"done", b.aggregate.done},
                                   {"aborted", b.aggregate.aborted},
                                   {"hash", b.hash}}
                                      .dump(2) +
                                  "\n");
}

}  // namespace subretinal::trial
