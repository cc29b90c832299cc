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

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

// Simulated surgical scene. World frame is the robot spatial frame, Z up,
// lengths in micrometers, times in seconds.
namespace subretinal::phantom {

/// Rigid tool state: tip position plus shaft direction. The direction points
/// from the tip up the shaft, i.e. toward the scleral pivot.
struct ToolPose {
  Vec3 tip_position = Vec3::Zero();
  Vec3 axis_direction = Vec3::UnitZ();
  std::uint64_t frame_id = 0;

  bool valid() const {
    return all_finite(tip_position) && std::abs(axis_direction.norm() - 1.0) <= 1e-9;
  }
};

struct PhantomConfig {
  double radius_um = 3000.0;
  double thickness_um = 200.0;
  double bump_amplitude_um = 60.0;
  double base_height_um = 0.0;
  int bump_count = 6;
  double bump_width_min_um = 500.0;
  double bump_width_max_um = 1200.0;
  // Bowl term 0.5 * curvature * r^2; positive curvature rises toward the rim.
  double curvature_per_um = 0.0;
  Vec2 slope = Vec2::Zero();
  Vec3 rcm_point{-5000.0, 0.0, 3500.0};

  void validate() const {
    if (!(radius_um > 0)) throw std::invalid_argument("phantom radius must be positive");
    if (!(thickness_um > 0)) throw std::invalid_argument("retinal thickness must be positive");
    if (bump_count < 0 || bump_count > 8) throw std::invalid_argument("bump_count must be in [0, 8]");
    if (!(bump_width_min_um > 0 && bump_width_max_um >= bump_width_min_um))
      throw std::invalid_argument("invalid bump width range");
    if (bump_amplitude_um < 0) throw std::invalid_argument("bump amplitude must be non-negative");
  }
};

struct Bump {
  Vec2 center = Vec2::Zero();
  double amplitude_um = 0.0;
  double width_um = 1.0;
};

/// Retina as two parallel height fields over a disc. Immutable.
class EyePhantom {
 public:
  EyePhantom(PhantomConfig config, std::uint64_t seed, std::vector<Bump> bumps)
      : config_(std::move(config)), seed_(seed), bumps_(std::move(bumps)) {
    config_.validate();
    if (!(config_.rcm_point.z() > max_ilm_height_bound()))
      throw std::invalid_argument("rcm point must lie above the retina");
  }

  const PhantomConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Bump>& bumps() const { return bumps_; }
  double radius() const { return config_.radius_um; }
  double thickness() const { return config_.thickness_um; }
  const Vec3& rcm_point() const { return config_.rcm_point; }

  bool in_domain(const Vec2& xy) const { return xy.norm() <= config_.radius_um; }

  /// ILM height; throws std::domain_error outside the disc.
  double ilm_height_at(const Vec2& xy) const {
    if (!in_domain(xy)) throw std::domain_error("query outside phantom domain");
    return surface(xy);
  }

  double rpe_height_at(const Vec2& xy) const { return ilm_height_at(xy) - config_.thickness_um; }

  Vec2 ilm_gradient_at(const Vec2& xy) const {
    Vec2 g = config_.slope + config_.curvature_per_um * xy;
    for (const auto& b : bumps_) {
      const Vec2 d = xy - b.center;
      const double w2 = b.width_um * b.width_um;
      g += -b.amplitude_um * std::exp(-d.squaredNorm() / (2.0 * w2)) / w2 * d;
    }
    return g;
  }

  /// Upper bound on f_ILM over the disc.
  double max_ilm_height_bound() const {
    const double r = config_.radius_um;
    double h = config_.base_height_um + config_.slope.norm() * r +
               0.5 * std::max(config_.curvature_per_um, 0.0) * r * r;
    for (const auto& b : bumps_) h += std::max(b.amplitude_um, 0.0);
    return h;
  }

 private:
  double surface(const Vec2& xy) const {
    double h = config_.base_height_um + config_.slope.dot(xy) +
               0.5 * config_.curvature_per_um * xy.squaredNorm();
    for (const auto& b : bumps_) {
      const double w = b.width_um;
      h += b.amplitude_um * std::exp(-(xy - b.center).squaredNorm() / (2.0 * w * w));
    }
    return h;
  }

  PhantomConfig config_;
  std::uint64_t seed_;
  std::vector<Bump> bumps_;
};

/// Deterministic in (seed, config): bump centers, amplitudes and widths come
/// from a dedicated stream of the seed.
inline EyePhantom make_phantom(std::uint64_t seed, const PhantomConfig& config) {
  config.validate();
  std::vector<Bump> bumps;
  if (config.bump_amplitude_um > 0.0 && config.bump_count > 0) {
    auto rng = make_stream(seed, "phantom.bumps");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < config.bump_count; ++i) {
      const double r = 0.8 * config.radius_um * std::sqrt(unit(rng));
      const double theta = 2.0 * M_PI * unit(rng);
      Bump b;
      b.center = Vec2(r * std::cos(theta), r * std::sin(theta));
      b.amplitude_um = config.bump_amplitude_um * (2.0 * unit(rng) - 1.0);
      b.width_um = config.bump_width_min_um +
                   (config.bump_width_max_um - config.bump_width_min_um) * unit(rng);
      bumps.push_back(b);
    }
  }
  return EyePhantom(config, seed, std::move(bumps));
}

/// One immutable view of the scene at a simulation tick.
struct SceneSnapshot {
  ToolPose tool;
  std::shared_ptr<const EyePhantom> phantom;
  double sim_time = 0.0;
  double inserted_depth_um = 0.0;
};

// --- config file ------------------------------------------------------------

inline PhantomConfig phantom_config_from_yaml(const YAML::Node& node, PhantomConfig base = {}) {
  if (!node) return base;
  auto read = [&](const char* key, double& out) {
    if (node[key]) out = node[key].as<double>();
  };
  read("radius_um", base.radius_um);
  read("thickness_um", base.thickness_um);
  read("bump_amplitude_um", base.bump_amplitude_um);
  read("base_height_um", base.base_height_um);
  read("bump_width_min_um", base.bump_width_min_um);
  read("bump_width_max_um", base.bump_width_max_um);
  read("curvature_per_um", base.curvature_per_um);
  if (node["bump_count"]) base.bump_count = node["bump_count"].as<int>();
  if (node["slope"]) {
    auto s = node["slope"].as<std::vector<double>>();
    if (s.size() != 2) throw std::invalid_argument("slope needs 2 values");
    base.slope = Vec2(s[0], s[1]);
  }
  if (node["rcm_point_um"]) {
    auto p = node["rcm_point_um"].as<std::vector<double>>();
    if (p.size() != 3) throw std::invalid_argument("rcm_point_um needs 3 values");
    base.rcm_point = Vec3(p[0], p[1], p[2]);
  }
  base.validate();
  return base;
}

inline void phantom_config_to_yaml(YAML::Emitter& out, const PhantomConfig& c) {
  out << YAML::BeginMap;
  out << YAML::Key << "radius_um" << YAML::Value << c.radius_um;
  out << YAML::Key << "thickness_um" << YAML::Value << c.thickness_um;
  out << YAML::Key << "bump_amplitude_um" << YAML::Value << c.bump_amplitude_um;
  out << YAML::Key << "base_height_um" << YAML::Value << c.base_height_um;
  out << YAML::Key << "bump_count" << YAML::Value << c.bump_count;
  out << YAML::Key << "bump_width_min_um" << YAML::Value << c.bump_width_min_um;
  out << YAML::Key << "bump_width_max_um" << YAML::Value << c.bump_width_max_um;
  out << YAML::Key << "curvature_per_um" << YAML::Value << c.curvature_per_um;
  out << YAML::Key << "slope" << YAML::Value << YAML::Flow
      << std::vector<double>{c.slope.x(), c.slope.y()};
  out << YAML::Key << "rcm_point_um" << YAML::Value << YAML::Flow
      << std::vector<double>{c.rcm_point.x(), c.rcm_point.y(), c.rcm_point.z()};
  out << YAML::EndMap;
}

/// Reads a stand-alone phantom file: `seed` plus the PhantomConfig keys.
inline EyePhantom load_phantom_file(const std::string& path) {
  const YAML::Node root = YAML::LoadFile(path);
  const auto seed = root["seed"] ? root["seed"].as<std::uint64_t>() : 0;
  return make_phantom(seed, phantom_config_from_yaml(root));
}

}  // namespace subretinal::phantom
