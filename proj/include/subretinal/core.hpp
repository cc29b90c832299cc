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

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace subretinal {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

inline constexpr const char* kVersion = "1.0.0";
inline constexpr int kRecordFormatVersion = 1;

// Image geometry of the two observation streams.
inline constexpr int kMicroscopeWidth = 640;
inline constexpr int kMicroscopeHeight = 480;
inline constexpr int kBScanColumns = 512;
inline constexpr int kBScanRows = 1024;

// Fixed keypoint spacing of the tip/base detector outputs.
inline constexpr double kTipBaseSpacingRgbPx = 50.0;
inline constexpr double kTipBaseSpacingOctPx = 100.0;

// Simulated clock rates (Hz). Integer so frame schedules are exact.
inline constexpr int kControlRateHz = 100;
inline constexpr int kMicroscopeRateHz = 30;
inline constexpr int kBScanRateHz = 11;

/// Pixel-to-micron factors for the microscope view and the OCT volume.
struct ConversionTable {
  double microscope_um_per_px = 13.6;
  double bscan_height_um_per_px = 2.6;
  double bscan_width_um_per_px = 5.3;
  double inter_slice_um = 13.6;

  void validate() const {
    if (!(microscope_um_per_px > 0 && bscan_height_um_per_px > 0 &&
          bscan_width_um_per_px > 0 && inter_slice_um > 0)) {
      throw std::invalid_argument("conversion factors must be positive");
    }
  }
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

// FNV-1a; stable across builds, unlike std::hash.
inline std::uint64_t stable_hash(std::string_view bytes,
                                 std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return out;
}

/// Named RNG sub-stream derived from a master seed. Streams with different
/// names are independent, so enabling noise never shifts scene geometry.
inline std::mt19937_64 make_stream(std::uint64_t master, std::string_view name,
                                   std::uint64_t index = 0) {
  const std::uint64_t tag = stable_hash(name);
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

inline Vec2 perp(const Vec2& v) { return {-v.y(), v.x()}; }

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

}  // namespace subretinal
