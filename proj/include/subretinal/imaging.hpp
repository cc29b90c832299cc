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
#include "subretinal/phantom.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

// Microscope and tool-aligned B-scan rendering, plus the perception oracle
// that stands in for the keypoint and layer-segmentation networks.
namespace subretinal::imaging {

using galvo::GalvoCalibration;
using galvo::ScanLine;
using phantom::SceneSnapshot;

/// Largest |k1| for which the radial model stays injective over the frame
/// (monotone while 1 + 3 k1 r^2 > 0 for r <= 1); kept well inside 1/3.
inline constexpr double kSafeRadialDistortion = 0.1;

/// Default scan length so that 512 columns span 512 * 5.3 um at 13.6 um/px.
inline double default_scan_length_px(const ConversionTable& conv = {}) {
  return kBScanColumns * conv.bscan_width_um_per_px / conv.microscope_um_per_px;
}

/// Scaled orthographic microscope with a slightly tilted optical axis and
/// optional one-term radial distortion about the principal point.
struct CameraModel {
  double tilt_x_rad = 0.02;
  double tilt_y_rad = 0.0;
  double um_per_px = 13.6;
  double k1 = 0.0;
  Vec2 principal_point{kMicroscopeWidth / 2.0, kMicroscopeHeight / 2.0};
  // Normalizing radius of the distortion polynomial (half image diagonal).
  double distortion_radius_px = 400.0;
  int width = kMicroscopeWidth;
  int height = kMicroscopeHeight;

  void validate() const {
    if (!(um_per_px > 0)) throw std::invalid_argument("camera scale must be positive");
    if (std::abs(k1) > kSafeRadialDistortion)
      throw std::invalid_argument("radial distortion outside the injective range");
    if (std::abs(tilt_x_rad) > 0.1 || std::abs(tilt_y_rad) > 0.1)
      throw std::invalid_argument("optical axis tilt must stay below 0.1 rad");
  }

  /// Camera-to-world rotation; column 2 is the optical "up" direction.
  Mat3 rotation() const {
    return (Eigen::AngleAxisd(tilt_y_rad, Vec3::UnitY()) *
            Eigen::AngleAxisd(tilt_x_rad, Vec3::UnitX()))
        .toRotationMatrix();
  }

  Vec3 optical_up() const { return rotation().col(2); }

  Vec2 ideal_projection(const Vec3& p) const {
    const Vec3 q = rotation().transpose() * p;
    return principal_point + q.head<2>() / um_per_px;
  }

  Vec2 distort(const Vec2& ideal) const {
    const Vec2 d = ideal - principal_point;
    const double r2 = d.squaredNorm() / (distortion_radius_px * distortion_radius_px);
    return principal_point + d * (1.0 + k1 * r2);
  }

  Vec2 project(const Vec3& p) const { return distort(ideal_projection(p)); }

  bool in_view(const Vec2& px) const {
    return px.x() >= 0.0 && px.y() >= 0.0 && px.x() < width && px.y() < height;
  }
};

/// Hidden ground truth of the scanner: voltages to world beam position (um).
/// The beam runs along world -Z.
struct GalvoScanner {
  Mat2 um_per_volt = (Mat2() << 136.0, 4.0, -3.0, 134.0).finished();
  Vec2 origin_um = Vec2::Zero();

  Vec2 beam_xy(const Vec2& volts) const { return um_per_volt * volts + origin_um; }
};

struct OctConfig {
  GalvoScanner scanner;
  // World height imaged at row 0; rows grow downward.
  double reference_height_um = 1500.0;
  // Lateral half-thickness of the imaged slab.
  double beam_half_width_um = 30.0;
  double card_height_um = 0.0;
  ConversionTable conv;
};

/// The simulator plays the laser viewing card: each voltage is forward-mapped
/// through the hidden scanner and observed by the microscope.
inline galvo::CalibrationSampleSet laser_card_samples(const GalvoScanner& scanner,
                                                      const CameraModel& camera,
                                                      double card_height_um,
                                                      const std::vector<Vec2>& voltages,
                                                      double noise_sigma_px,
                                                      std::mt19937_64& rng) {
  galvo::CalibrationSampleSet set;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (const auto& v : voltages) {
    const Vec2 xy = scanner.beam_xy(v);
    Vec2 px = camera.project(Vec3(xy.x(), xy.y(), card_height_um));
    if (noise_sigma_px > 0.0) px += noise_sigma_px * Vec2(noise(rng), noise(rng));
    set.voltages.push_back(v);
    set.positions.push_back(px);
  }
  return set;
}

/// World geometry of one B-scan: A-line k is the vertical beam through
/// beam_center + t_k * beam_half_span.
struct BScanGeometry {
  Vec2 beam_center_um = Vec2::Zero();
  Vec2 beam_half_span_um = Vec2::UnitX();
  int n_columns = kBScanColumns;
  double reference_height_um = 1500.0;
  double row_um = 2.6;

  double column_um() const { return 2.0 * beam_half_span_um.norm() / n_columns; }
  Vec2 along() const { return beam_half_span_um.normalized(); }
  Vec2 across() const { return perp(along()); }

  Vec2 column_xy(double column) const {
    const double t = -1.0 + 2.0 * (column + 0.5) / n_columns;
    return beam_center_um + t * beam_half_span_um;
  }

  double column_of(const Vec2& xy) const {
    const double t = (xy - beam_center_um).dot(beam_half_span_um) / beam_half_span_um.squaredNorm();
    return galvo::parameter_to_column(t, n_columns);
  }

  double off_plane_um(const Vec2& xy) const { return (xy - beam_center_um).dot(across()); }

  double row_of_height(double z) const { return (reference_height_um - z) / row_um; }
  double height_of_row(double row) const { return reference_height_um - row * row_um; }

  /// Parallel slice shifted across the scan direction.
  BScanGeometry shifted(double across_um) const {
    BScanGeometry g = *this;
    g.beam_center_um += across_um * across();
    return g;
  }
};

inline BScanGeometry bscan_geometry(const OctConfig& oct, const GalvoCalibration& calib,
                                    const ScanLine& line) {
  line.validate();
  const Vec2 v0 = galvo::voltage_for_position(calib, line.center);
  const Vec2 dv = galvo::voltage_tangent(calib, line.tangent);
  BScanGeometry g;
  g.beam_center_um = oct.scanner.beam_xy(v0);
  g.beam_half_span_um = oct.scanner.um_per_volt * dv;
  g.n_columns = line.n_columns;
  g.reference_height_um = oct.reference_height_um;
  g.row_um = oct.conv.bscan_height_um_per_px;
  return g;
}

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

struct Keypoints {
  Vec2 tip = Vec2::Zero();
  Vec2 base = Vec2::Zero();
};

struct MicroscopeFrame {
  std::uint64_t tick = 0;
  double timestamp = 0.0;
  CameraModel camera;
  std::optional<Keypoints> truth;  // nullopt when the tool is out of view
  std::optional<GrayImage> image;

  int width() const { return camera.width; }
  int height() const { return camera.height; }
  bool tool_visible() const { return truth.has_value(); }
};

struct BScanFrame {
  std::uint64_t tick = 0;
  double timestamp = 0.0;
  ScanLine scan_line;
  BScanGeometry geometry;
  std::optional<Keypoints> truth;  // nullopt when the tip is outside the slab
  std::vector<std::optional<double>> ilm_rows;
  std::vector<std::optional<double>> rpe_rows;
  std::optional<GrayImage> image;

  int width() const { return geometry.n_columns; }
  int height() const { return kBScanRows; }
};

struct RenderOptions {
  bool rasterize = false;
  double speckle = 0.0;  // multiplicative noise amplitude in [0, 1]
  std::uint64_t speckle_seed = 0;
};

namespace detail {

inline void draw_disc(GrayImage& img, const Vec2& c, double radius, std::uint8_t value) {
  const int x0 = std::max(0, static_cast<int>(std::floor(c.x() - radius)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(c.x() + radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(c.y() - radius)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(c.y() + radius)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if ((Vec2(x, y) - c).squaredNorm() <= radius * radius) img.at(x, y) = value;
}

// Thick segment by stamping discs; adequate at these image sizes.
inline void draw_segment(GrayImage& img, const Vec2& a, const Vec2& b, double radius,
                         std::uint8_t value) {
  const double len = (b - a).norm();
  const int steps = std::max(1, static_cast<int>(std::ceil(len / std::max(radius * 0.5, 0.5))));
  for (int i = 0; i <= steps; ++i) draw_disc(img, a + (b - a) * (static_cast<double>(i) / steps), radius, value);
}

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

inline void apply_speckle(GrayImage& img, const RenderOptions& opt, std::string_view stream) {
  if (opt.speckle <= 0.0) return;
  auto rng = make_stream(opt.speckle_seed, stream);
  std::uniform_real_distribution<double> u(1.0 - opt.speckle, 1.0 + opt.speckle);
  for (auto& p : img.pixels) p = clamp_u8(p * u(rng));
}

}  // namespace detail

/// Microscope tip/base keypoints for a tool pose; base sits 50 px up the
/// projected shaft.
inline std::optional<Keypoints> microscope_keypoints(const phantom::ToolPose& tool,
                                                     const CameraModel& cam) {
  const Vec2 tip = cam.project(tool.tip_position);
  if (!cam.in_view(tip)) return std::nullopt;
  const Vec2 up_shaft = cam.project(tool.tip_position + 100.0 * tool.axis_direction) - tip;
  if (up_shaft.norm() < 1e-9) return std::nullopt;
  return Keypoints{tip, tip + kTipBaseSpacingRgbPx * up_shaft.normalized()};
}

inline MicroscopeFrame render_microscope(const SceneSnapshot& scene, const CameraModel& cam,
                                         const RenderOptions& opt = {}) {
  MicroscopeFrame frame;
  frame.tick = scene.tool.frame_id;
  frame.timestamp = scene.sim_time;
  frame.camera = cam;
  frame.truth = microscope_keypoints(scene.tool, cam);

  if (opt.rasterize) {
    GrayImage img{cam.width, cam.height, std::vector<std::uint8_t>(static_cast<std::size_t>(cam.width) * cam.height, 12)};
    const auto& ph = *scene.phantom;
    // Fundus-like shading: lit by a fixed light, vignetted toward the rim.
    const Vec3 light = Vec3(0.3, -0.4, 1.0).normalized();
    const double z_ref = ph.config().base_height_um;
    const Mat3 rot = cam.rotation();
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        // Undistortion is not needed for shading; sample along the ideal ray.
        const Vec2 d = (Vec2(x, y) - cam.principal_point) * cam.um_per_px;
        const Vec3 world = rot * Vec3(d.x(), d.y(), 0.0);
        Vec2 xy = world.head<2>();
        xy += (z_ref - world.z()) * rot.col(2).head<2>() / rot(2, 2);
        if (!ph.in_domain(xy)) continue;
        const Vec2 g = ph.ilm_gradient_at(xy);
        const double lambert = std::max(0.0, Vec3(-g.x(), -g.y(), 1.0).normalized().dot(light));
        const double vignette = 1.0 - 0.5 * (xy.norm() / ph.radius());
        img.at(x, y) = detail::clamp_u8(40.0 + 150.0 * lambert * vignette);
      }
    }
    if (frame.truth) {
      const Vec2 dir = (frame.truth->base - frame.truth->tip).normalized();
      detail::draw_segment(img, frame.truth->tip, frame.truth->tip + 400.0 * dir, 3.0, 235);
      detail::draw_disc(img, frame.truth->tip, 2.0, 255);
    }
    detail::apply_speckle(img, opt, "speckle.microscope");
    frame.image = std::move(img);
  }
  return frame;
}

inline std::optional<Keypoints> bscan_keypoints(const phantom::ToolPose& tool,
                                                const BScanGeometry& g, double beam_half_width_um) {
  const Vec2 xy = tool.tip_position.head<2>();
  if (std::abs(g.off_plane_um(xy)) > beam_half_width_um) return std::nullopt;
  const Vec2 tip(g.column_of(xy), g.row_of_height(tool.tip_position.z()));
  if (tip.x() < -0.5 || tip.x() > g.n_columns - 0.5 || tip.y() < 0.0 || tip.y() >= kBScanRows)
    return std::nullopt;
  const Vec2 up_shaft(tool.axis_direction.head<2>().dot(g.along()) / g.column_um(),
                      -tool.axis_direction.z() / g.row_um);
  if (up_shaft.norm() < 1e-12) return std::nullopt;
  return Keypoints{tip, tip + kTipBaseSpacingOctPx * up_shaft.normalized()};
}

/// Renders a B-scan at the scan positions the *estimated* calibration steers
/// the hidden scanner to. Layer rows are (reference_height - surface) / 2.6.
inline BScanFrame render_bscan_geometry(const SceneSnapshot& scene, const BScanGeometry& g,
                                        const OctConfig& oct, const RenderOptions& opt = {}) {
  const auto& ph = *scene.phantom;
  BScanFrame frame;
  frame.tick = scene.tool.frame_id;
  frame.timestamp = scene.sim_time;
  frame.geometry = g;
  frame.ilm_rows.resize(static_cast<std::size_t>(g.n_columns));
  frame.rpe_rows.resize(static_cast<std::size_t>(g.n_columns));
  bool any = false;
  for (int k = 0; k < g.n_columns; ++k) {
    const Vec2 xy = g.column_xy(k);
    if (!ph.in_domain(xy)) continue;
    const double ilm = ph.ilm_height_at(xy);
    frame.ilm_rows[static_cast<std::size_t>(k)] = g.row_of_height(ilm);
    frame.rpe_rows[static_cast<std::size_t>(k)] = g.row_of_height(ilm - ph.thickness());
    any = true;
  }
  if (!any) throw std::domain_error("scan line lies outside the phantom domain");
  frame.truth = bscan_keypoints(scene.tool, g, oct.beam_half_width_um);

  if (opt.rasterize) {
    GrayImage img{g.n_columns, kBScanRows,
                  std::vector<std::uint8_t>(static_cast<std::size_t>(g.n_columns) * kBScanRows, 8)};
    for (int k = 0; k < g.n_columns; ++k) {
      const auto& ilm = frame.ilm_rows[static_cast<std::size_t>(k)];
      const auto& rpe = frame.rpe_rows[static_cast<std::size_t>(k)];
      if (!ilm || !rpe) continue;
      for (int r = 0; r < kBScanRows; ++r) {
        double v = 8.0;
        if (r > *ilm && r < *rpe) v = 70.0 + 20.0 * (r - *ilm) / (*rpe - *ilm);
        if (r >= *rpe) v = 60.0 * std::exp(-(r - *rpe) / 60.0) + 8.0;
        v += 200.0 * std::exp(-0.5 * std::pow((r - *ilm) / 2.0, 2));
        v += 240.0 * std::exp(-0.5 * std::pow((r - *rpe) / 3.0, 2));
        img.at(k, r) = detail::clamp_u8(v);
      }
    }
    if (frame.truth) {
      const Vec2 dir = (frame.truth->base - frame.truth->tip).normalized();
      detail::draw_segment(img, frame.truth->tip, frame.truth->tip + 2000.0 * dir, 2.5, 250);
    }
    detail::apply_speckle(img, opt, "speckle.bscan");
    frame.image = std::move(img);
  }
  return frame;
}

inline BScanFrame render_bscan(const SceneSnapshot& scene, const ScanLine& line,
                               const GalvoCalibration& calib, const OctConfig& oct,
                               const RenderOptions& opt = {}) {
  BScanFrame frame = render_bscan_geometry(scene, bscan_geometry(oct, calib, line), oct, opt);
  frame.scan_line = line;
  return frame;
}

// --- perception oracle ---------------------------------------------------------

struct NoiseConfig {
  double pixel_sigma = 0.0;
  double dropout_rate = 0.0;
  double profile_sigma_rows = 0.0;

  void validate() const {
    if (pixel_sigma < 0 || profile_sigma_rows < 0) throw std::invalid_argument("noise sigma must be >= 0");
    if (dropout_rate < 0 || dropout_rate > 1) throw std::invalid_argument("dropout rate must be in [0, 1]");
  }
};

struct PerceptionResult {
  std::optional<Vec2> tip_rgb;
  std::optional<Vec2> base_rgb;
  std::optional<Vec2> tip_oct;
  std::optional<Vec2> base_oct;
  std::vector<std::optional<double>> ilm_profile;
  std::vector<std::optional<double>> rpe_profile;
  std::uint64_t microscope_tick = 0;
  std::uint64_t bscan_tick = 0;

  bool rgb_valid() const { return tip_rgb && base_rgb; }
  bool oct_valid() const { return tip_oct && base_oct; }
};

namespace detail {

inline std::optional<Keypoints> noisy_keypoints(const std::optional<Keypoints>& truth, double spacing,
                                                const NoiseConfig& noise, std::mt19937_64& rng) {
  if (!truth) return std::nullopt;
  std::bernoulli_distribution drop(noise.dropout_rate);
  if (noise.dropout_rate > 0.0 && drop(rng)) return std::nullopt;
  if (noise.pixel_sigma <= 0.0) return truth;
  std::normal_distribution<double> n(0.0, noise.pixel_sigma);
  Keypoints k;
  k.tip = truth->tip + Vec2(n(rng), n(rng));
  // Perturb the shaft angle; the detector keeps the fixed tip-base spacing.
  const Vec2 dir = (truth->base - truth->tip).normalized();
  const double dtheta = n(rng) / spacing;
  const Vec2 rotated(std::cos(dtheta) * dir.x() - std::sin(dtheta) * dir.y(),
                     std::sin(dtheta) * dir.x() + std::cos(dtheta) * dir.y());
  k.base = k.tip + spacing * rotated;
  return k;
}

}  // namespace detail

inline void perceive_microscope_into(PerceptionResult& out, const MicroscopeFrame& ms,
                                     const NoiseConfig& noise, std::mt19937_64& rng) {
  out.microscope_tick = ms.tick;
  const auto k = detail::noisy_keypoints(ms.truth, kTipBaseSpacingRgbPx, noise, rng);
  out.tip_rgb = k ? std::optional<Vec2>(k->tip) : std::nullopt;
  out.base_rgb = k ? std::optional<Vec2>(k->base) : std::nullopt;
}

inline void perceive_bscan_into(PerceptionResult& out, const BScanFrame& bs,
                                const NoiseConfig& noise, std::mt19937_64& rng) {
  out.bscan_tick = bs.tick;
  const auto k = detail::noisy_keypoints(bs.truth, kTipBaseSpacingOctPx, noise, rng);
  out.tip_oct = k ? std::optional<Vec2>(k->tip) : std::nullopt;
  out.base_oct = k ? std::optional<Vec2>(k->base) : std::nullopt;

  out.ilm_profile = bs.ilm_rows;
  out.rpe_profile = bs.rpe_rows;
  std::bernoulli_distribution drop(noise.dropout_rate);
  if (noise.dropout_rate > 0.0 && drop(rng)) {
    std::fill(out.ilm_profile.begin(), out.ilm_profile.end(), std::nullopt);
    std::fill(out.rpe_profile.begin(), out.rpe_profile.end(), std::nullopt);
    return;
  }
  if (noise.profile_sigma_rows > 0.0) {
    std::normal_distribution<double> n(0.0, noise.profile_sigma_rows);
    for (std::size_t k2 = 0; k2 < out.ilm_profile.size(); ++k2) {
      auto& ilm = out.ilm_profile[k2];
      auto& rpe = out.rpe_profile[k2];
      if (!ilm || !rpe) continue;
      *ilm += n(rng);
      *rpe += n(rng);
      if (!(*ilm < *rpe)) ilm = rpe = std::nullopt;
    }
  }
}

/// Oracle perception over a microscope frame and a B-scan of the same tick.
inline PerceptionResult perceive(const MicroscopeFrame& ms, const BScanFrame& bs,
                                 const NoiseConfig& noise, std::mt19937_64& rng) {
  if (ms.tick != bs.tick) throw std::invalid_argument("frames come from different ticks");
  PerceptionResult out;
  perceive_microscope_into(out, ms, noise, rng);
  perceive_bscan_into(out, bs, noise, rng);
  return out;
}

/// B-scan line centered on the detected tip and oriented base -> tip.
inline ScanLine track_tool_scanline(const PerceptionResult& p, double scan_length_px,
                                    int n_columns = kBScanColumns) {
  if (!p.rgb_valid()) throw std::invalid_argument("tool keypoints unavailable");
  if (!(scan_length_px > 0)) throw std::invalid_argument("scan length must be positive");
  const Vec2 axis = *p.tip_rgb - *p.base_rgb;
  if (axis.norm() < 1e-9) throw std::invalid_argument("tip and base coincide");
  ScanLine line;
  line.center = *p.tip_rgb;
  line.tangent = axis.normalized() * (scan_length_px / 2.0);
  line.n_columns = n_columns;
  return line;
}

/// ILM pixel straight below the detected B-scan tip (same column). Fractional
/// columns interpolate the profile linearly.
inline Vec2 project_tip_to_ilm(const PerceptionResult& p) {
  if (!p.tip_oct) throw std::invalid_argument("B-scan tip unavailable");
  const double col = p.tip_oct->x();
  const auto n = static_cast<double>(p.ilm_profile.size());
  if (col < 0.0 || col > n - 1.0) throw std::out_of_range("tip column outside ILM profile");
  const auto lo = static_cast<std::size_t>(std::floor(col));
  const auto hi = std::min(lo + 1, p.ilm_profile.size() - 1);
  const double w = col - static_cast<double>(lo);
  const auto& a = p.ilm_profile[lo];
  const auto& b = p.ilm_profile[hi];
  if (w == 0.0) {
    if (!a) throw std::out_of_range("ILM not segmented at tip column");
    return {col, *a};
  }
  if (!a || !b) throw std::out_of_range("ILM not segmented at tip column");
  return {col, (1.0 - w) * *a + w * *b};
}

}  // namespace subretinal::imaging
