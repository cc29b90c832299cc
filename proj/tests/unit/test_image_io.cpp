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

#include "subretinal/image_io.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace subretinal;
using imaging::GrayImage;

namespace {

GrayImage random_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  GrayImage img{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h))};
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

}  // namespace

TEST(Png, RoundTripIsLossless) {
  for (auto [w, h] : {std::pair{1, 1}, std::pair{640, 480}, std::pair{512, 1024}, std::pair{7, 3}}) {
    const auto img = random_image(w, h, static_cast<std::uint64_t>(w * 31 + h));
    const auto back = image_io::decode_png(image_io::encode_png(img));
    EXPECT_EQ(back.width, w);
    EXPECT_EQ(back.height, h);
    EXPECT_EQ(back.pixels, img.pixels);
  }
}

TEST(Png, HeaderIsStandard) {
  const auto bytes = image_io::encode_png(random_image(640, 480, 1));
  ASSERT_GT(bytes.size(), 33u);
  const std::vector<std::uint8_t> signature{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  EXPECT_TRUE(std::equal(signature.begin(), signature.end(), bytes.begin()));
  EXPECT_EQ(std::string(bytes.begin() + 12, bytes.begin() + 16), "IHDR");
  EXPECT_EQ(be32(bytes, 16), 640u);
  EXPECT_EQ(be32(bytes, 20), 480u);
  EXPECT_EQ(bytes[24], 8);  // bit depth
  EXPECT_EQ(bytes[25], 0);  // grayscale
}

TEST(Png, RejectsBadInput) {
  GrayImage bad{4, 4, std::vector<std::uint8_t>(3)};
  EXPECT_THROW(image_io::encode_png(bad), std::invalid_argument);
  EXPECT_THROW(image_io::decode_png(bytes_of("not a png at all")), std::runtime_error);
}

TEST(Png, WritesFile) {
  const auto img = random_image(16, 8, 2);
  const auto path = std::filesystem::temp_directory_path() / "subretinal_io_test.png";
  image_io::write_png(path.string(), img);
  std::ifstream f(path, std::ios::binary);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  EXPECT_EQ(image_io::decode_png(bytes).pixels, img.pixels);
  std::filesystem::remove(path);
}

TEST(Base64, StandardTestVectors) {
  const std::vector<std::pair<std::string, std::string>> vectors{
      {"", ""},         {"f", "Zg=="},        {"fo", "Zm8="},         {"foo", "Zm9v"},
      {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="}, {"foobar", "Zm9vYmFy"}};
  for (const auto& [plain, encoded] : vectors) {
    EXPECT_EQ(image_io::base64_encode(bytes_of(plain)), encoded);
    EXPECT_EQ(image_io::base64_decode(encoded), bytes_of(plain));
  }
}

TEST(Base64, TrailingZeroBytesSurvive) {
  for (std::size_t n = 0; n < 10; ++n) {
    std::vector<std::uint8_t> zeros(n, 0);
    EXPECT_EQ(image_io::base64_decode(image_io::base64_encode(zeros)), zeros) << n;
  }
  const auto blob = random_image(333, 1, 3).pixels;
  EXPECT_EQ(image_io::base64_decode(image_io::base64_encode(blob)), blob);
}

TEST(Base64, RejectsMalformed) {
  EXPECT_THROW(image_io::base64_decode("abc"), std::invalid_argument);
  EXPECT_THROW(image_io::base64_decode("!!!!"), std::invalid_argument);
}

TEST(Annotations, MicroscopeSidecar) {
  imaging::MicroscopeFrame f;
  f.tick = 12;
  f.timestamp = 0.12;
  f.truth = imaging::Keypoints{Vec2(320, 240), Vec2(370, 240)};
  const auto j = image_io::annotations(f);
  EXPECT_EQ(j.at("tick"), 12);
  EXPECT_EQ(j.at("width"), 640);
  EXPECT_EQ(j.at("height"), 480);
  EXPECT_TRUE(j.at("tool_visible").get<bool>());
  EXPECT_EQ(j.at("keypoints").at("tip"), nlohmann::json::array({320.0, 240.0}));
  f.truth.reset();
  EXPECT_TRUE(image_io::annotations(f).at("keypoints").is_null());
}

TEST(Annotations, BScanSidecar) {
  imaging::BScanFrame f;
  f.tick = 9;
  f.ilm_rows = {500.0, std::nullopt, 501.5};
  f.rpe_rows = {577.0, std::nullopt, 578.5};
  const auto j = image_io::annotations(f);
  EXPECT_EQ(j.at("width"), kBScanColumns);
  EXPECT_EQ(j.at("height"), kBScanRows);
  EXPECT_FALSE(j.at("tool_visible").get<bool>());
  EXPECT_EQ(j.at("ilm_rows").size(), 3u);
  EXPECT_TRUE(j.at("ilm_rows")[1].is_null());
  EXPECT_EQ(j.at("rpe_rows")[2], 578.5);
  EXPECT_TRUE(j.at("scan_line").contains("tangent"));
}
