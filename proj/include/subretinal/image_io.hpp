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

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <png.h>

#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Frame export: 8-bit grayscale PNG, base64 for the wire, and JSON sidecars
// carrying the ground-truth annotations.
namespace subretinal::image_io {

using imaging::GrayImage;

inline std::vector<std::uint8_t> encode_png(const GrayImage& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height))
    throw std::invalid_argument("image buffer does not match its dimensions");
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr))
    throw std::runtime_error(std::string("PNG sizing failed: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr))
    throw std::runtime_error(std::string("PNG encoding failed: ") + image.message);
  out.resize(size);
  return out;
}

inline GrayImage decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw std::runtime_error(std::string("PNG header invalid: ") + image.message);
  image.format = PNG_FORMAT_GRAY;
  GrayImage img;
  img.width = static_cast<int>(image.width);
  img.height = static_cast<int>(image.height);
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr))
    throw std::runtime_error(std::string("PNG decoding failed: ") + image.message);
  return img;
}

inline void write_png(const std::string& path, const GrayImage& img) {
  const auto bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length must be a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw std::invalid_argument("invalid base64");
  std::size_t size = static_cast<std::size_t>(n);
  // EVP_DecodeBlock keeps the zero bytes that padding stands for.
  if (!text.empty() && text.back() == '=') --size;
  if (text.size() > 1 && text[text.size() - 2] == '=') --size;
  out.resize(size);
  return out;
}

namespace detail {

inline nlohmann::json keypoints(const std::optional<imaging::Keypoints>& k) {
  if (!k) return nullptr;
  return {{"tip", {k->tip.x(), k->tip.y()}}, {"base", {k->base.x(), k->base.y()}}};
}

inline nlohmann::json rows(const std::vector<std::optional<double>>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : v) a.push_back(r ? nlohmann::json(*r) : nlohmann::json(nullptr));
  return a;
}

}  // namespace detail

/// Ground-truth sidecar of a microscope frame.
inline nlohmann::json annotations(const imaging::MicroscopeFrame& f) {
  return {{"tick", f.tick},
          {"timestamp", f.timestamp},
          {"width", f.width()},
          {"height", f.height()},
          {"tool_visible", f.tool_visible()},
          {"keypoints", detail::keypoints(f.truth)}};
}

/// Ground-truth sidecar of a B-scan: tool keypoints, layer rows, scan line.
inline nlohmann::json annotations(const imaging::BScanFrame& f) {
  return {{"tick", f.tick},
          {"timestamp", f.timestamp},
          {"width", f.width()},
          {"height", f.height()},
          {"tool_visible", f.truth.has_value()},
          {"keypoints", detail::keypoints(f.truth)},
          {"scan_line",
           {{"center", {f.scan_line.center.x(), f.scan_line.center.y()}},
            {"tangent", {f.scan_line.tangent.x(), f.scan_line.tangent.y()}},
            {"n_columns", f.scan_line.n_columns}}},
          {"ilm_rows", detail::rows(f.ilm_rows)},
          {"rpe_rows", detail::rows(f.rpe_rows)}};
}

}  // namespace subretinal::image_io
