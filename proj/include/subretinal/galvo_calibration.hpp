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

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

// Galvo voltage <-> microscope-image scan position, modelled as the affine
// map X = R V + T. R is in pixels per volt and T in pixels.
namespace subretinal::galvo {

class NonIdentifiableCalibration : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class SingularCalibration : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct GalvoCalibration {
  Mat2 gain = Mat2::Identity();    // R
  Vec2 offset = Vec2::Zero();      // T

  Vec2 forward(const Vec2& volts) const { return gain * volts + offset; }

  bool invertible() const { return std::abs(gain.determinant()) > 1e-12; }

  Mat2 inverse_gain() const {
    if (!invertible()) throw SingularCalibration("galvo calibration gain is singular");
    return gain.inverse();
  }
};

struct CalibrationSampleSet {
  std::vector<Vec2> voltages;
  std::vector<Vec2> positions;

  std::size_t size() const { return voltages.size(); }
};

/// Least-squares fit of X = R V + T from centered sample matrices:
/// R^T = (VV^T)^-1 V X^T and T = mean(X) - R mean(V).
inline GalvoCalibration fit_calibration(const CalibrationSampleSet& samples) {
  const std::size_t n = samples.voltages.size();
  if (samples.positions.size() != n)
    throw std::invalid_argument("voltage and position lists differ in length");
  if (n < 3) throw std::invalid_argument("calibration needs at least 3 samples");

  Vec2 v_mean = Vec2::Zero(), x_mean = Vec2::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    v_mean += samples.voltages[i];
    x_mean += samples.positions[i];
  }
  v_mean /= static_cast<double>(n);
  x_mean /= static_cast<double>(n);

  Eigen::Matrix<double, 2, Eigen::Dynamic> vc(2, n), xc(2, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    vc.col(col) = samples.voltages[i] - v_mean;
    xc.col(col) = samples.positions[i] - x_mean;
  }

  const Mat2 vvt = vc * vc.transpose();
  const double scale = vvt.trace();
  if (!(scale > 0.0) || std::abs(vvt.determinant()) <= 1e-12 * scale * scale)
    throw NonIdentifiableCalibration("calibration voltages are collinear; R is not identifiable");

  const Mat2 rt = vvt.inverse() * (vc * xc.transpose());
  GalvoCalibration calib;
  calib.gain = rt.transpose();
  calib.offset = x_mean - calib.gain * v_mean;
  return calib;
}

inline double residual_sum_of_squares(const GalvoCalibration& calib,
                                      const CalibrationSampleSet& samples) {
  double rss = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    rss += (calib.forward(samples.voltages[i]) - samples.positions[i]).squaredNorm();
  return rss;
}

inline double rms_residual(const GalvoCalibration& calib, const CalibrationSampleSet& samples) {
  return std::sqrt(residual_sum_of_squares(calib, samples) / static_cast<double>(samples.size()));
}

/// Central voltage V0 = R^-1 (X0 - T).
inline Vec2 voltage_for_position(const GalvoCalibration& calib, const Vec2& x0) {
  return calib.inverse_gain() * (x0 - calib.offset);
}

/// Tangent dV = R^-1 dX.
inline Vec2 voltage_tangent(const GalvoCalibration& calib, const Vec2& dx) {
  return calib.inverse_gain() * dx;
}

/// B-scan line in microscope pixels: X(t) = center + t * tangent, t in (-1, 1).
struct ScanLine {
  Vec2 center = Vec2::Zero();
  Vec2 tangent = Vec2::UnitX();
  int n_columns = kBScanColumns;

  void validate() const {
    if (!(tangent.norm() > 0.0)) throw std::invalid_argument("scan line tangent must be non-zero");
    if (n_columns < 2) throw std::invalid_argument("scan line needs at least 2 columns");
    if (!all_finite(center) || !all_finite(tangent))
      throw std::invalid_argument("scan line must be finite");
  }

  Vec2 position(double t) const { return center + t * tangent; }
};

/// Cell-centered samples of the open interval (-1, 1).
inline double column_parameter(int k, int n_columns) {
  return -1.0 + 2.0 * (k + 0.5) / n_columns;
}

/// Inverse of column_parameter, continuous in t.
inline double parameter_to_column(double t, int n_columns) {
  return (t + 1.0) * 0.5 * n_columns - 0.5;
}

inline std::vector<Vec2> scan_line_voltages(const GalvoCalibration& calib, const ScanLine& line) {
  line.validate();
  const Vec2 v0 = voltage_for_position(calib, line.center);
  const Vec2 dv = voltage_tangent(calib, line.tangent);
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(line.n_columns));
  for (int k = 0; k < line.n_columns; ++k) out.emplace_back(v0 + column_parameter(k, line.n_columns) * dv);
  return out;
}

/// Row-major n x n voltage grid spanning [-amplitude, amplitude]^2.
inline std::vector<Vec2> voltage_grid(int n, double amplitude) {
  if (n < 2) throw std::invalid_argument("voltage grid needs n >= 2");
  std::vector<Vec2> grid;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      grid.emplace_back(-amplitude + 2.0 * amplitude * j / (n - 1),
                        -amplitude + 2.0 * amplitude * i / (n - 1));
  return grid;
}

// --- persistence: six-number record -------------------------------------------

inline std::string format_calibration(const GalvoCalibration& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# galvo calibration: X = R V + T (pixels, volts)\n";
  os << "r11 = " << c.gain(0, 0) << "\n";
  os << "r12 = " << c.gain(0, 1) << "\n";
  os << "r21 = " << c.gain(1, 0) << "\n";
  os << "r22 = " << c.gain(1, 1) << "\n";
  os << "t1 = " << c.offset(0) << "\n";
  os << "t2 = " << c.offset(1) << "\n";
  return os.str();
}

inline GalvoCalibration parse_calibration(const std::string& text) {
  GalvoCalibration c;
  int seen = 0;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("malformed calibration line: " + line);
    std::string key = line.substr(0, eq);
    key.erase(std::remove_if(key.begin(), key.end(), [](unsigned char ch) { return std::isspace(ch) != 0; }),
              key.end());
    const double value = std::stod(line.substr(eq + 1));
    if (key == "r11") c.gain(0, 0) = value;
    else if (key == "r12") c.gain(0, 1) = value;
    else if (key == "r21") c.gain(1, 0) = value;
    else if (key == "r22") c.gain(1, 1) = value;
    else if (key == "t1") c.offset(0) = value;
    else if (key == "t2") c.offset(1) = value;
    else throw std::invalid_argument("unknown calibration key: " + key);
    ++seen;
  }
  if (seen != 6) throw std::invalid_argument("calibration record needs exactly 6 values");
  return c;
}

inline void save_calibration(const std::string& path, const GalvoCalibration& c) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << format_calibration(c);
}

inline GalvoCalibration load_calibration(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_calibration(ss.str());
}

}  // namespace subretinal::galvo
