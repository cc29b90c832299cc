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

#include "subretinal/trial_runner.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace subretinal;
using servo::Phase;
using trial::TrialConfig;

namespace {

TrialConfig flat_noise_free() {
  TrialConfig cfg;
  cfg.phantom.bump_amplitude_um = 0.0;
  cfg.actuation = {};
  cfg.perception = {};
  cfg.goals.ilm_goal_px = Vec2(320, 240);
  cfg.workers = 1;
  return cfg;
}

std::uint64_t image_hash(const std::optional<imaging::GrayImage>& img) {
  if (!img) return 0;
  return stable_hash(std::string_view(reinterpret_cast<const char*>(img->pixels.data()), img->pixels.size()));
}

}  // namespace

TEST(FrameClock, RatesPerSecond) {
  int ms = 0, bs = 0, ctl = 0;
  for (std::uint64_t t = 1; t <= 100; ++t) {
    ms += trial::frame_due(t, kMicroscopeRateHz) ? 1 : 0;
    bs += trial::frame_due(t, kBScanRateHz) ? 1 : 0;
    ctl += trial::frame_due(t, kControlRateHz) ? 1 : 0;
  }
  EXPECT_EQ(ms, 30);
  EXPECT_EQ(bs, 11);
  EXPECT_EQ(ctl, 100);
  EXPECT_TRUE(trial::frame_due(0, kBScanRateHz));
}

TEST(Seeds, NamedStreamsAreIndependent) {
  EXPECT_NE(trial::derive_seed(1, "phantom", 0), trial::derive_seed(1, "trial", 0));
  EXPECT_NE(trial::derive_seed(1, "phantom", 0), trial::derive_seed(1, "phantom", 1));
  EXPECT_NE(trial::derive_seed(1, "phantom", 0), trial::derive_seed(2, "phantom", 0));
  EXPECT_EQ(trial::derive_seed(1, "phantom", 0), trial::derive_seed(1, "phantom", 0));
}

TEST(Setup, NoiseSettingsDoNotMoveTheScene) {
  TrialConfig quiet;
  TrialConfig noisy;
  noisy.actuation.sigma_um = 2.0;
  noisy.perception.pixel_sigma = 1.0;
  const auto a = trial::make_setup(quiet, 1, 3);
  const auto b = trial::make_setup(noisy, 1, 3);
  EXPECT_EQ(a.start_tip, b.start_tip);
  EXPECT_EQ(a.ilm_goal_px, b.ilm_goal_px);
  EXPECT_EQ(a.phantom_seed, b.phantom_seed);
  EXPECT_EQ(a.trial_seed, b.trial_seed);
  // Start is above the retina.
  EXPECT_GT(a.start_tip.z(), a.eye->ilm_height_at(a.start_tip.head<2>()));
}

TEST(Config, JsonRoundTrip) {
  TrialConfig cfg;
  cfg.master_seed = 99;
  cfg.phantom.curvature_per_um = 1e-5;
  cfg.perception.dropout_rate = 0.1;
  cfg.actuation.sigma_um = 1.5;
  cfg.servo.beta = 0.8;
  cfg.goals.ilm_goal_px = Vec2(300, 200);
  cfg.goals.mode = trial::GoalMode::Interactive;
  cfg.render.rasterize = true;
  const auto j = trial::to_json(cfg);
  const auto back = trial::trial_config_from_json(j);
  EXPECT_EQ(trial::to_json(back), j);
  EXPECT_EQ(back.master_seed, 99u);
  EXPECT_EQ(back.goals.mode, trial::GoalMode::Interactive);
}

TEST(Config, YamlOverridesDefaults) {
  const auto cfg = trial::trial_config_from_yaml(
      "master_seed: 5\nphantoms: 2\ntrials_per_phantom: 4\n"
      "perception:\n  pixel_sigma: 0.5\nactuation:\n  sigma_um: 2.0\n  bound_um: 4.0\n");
  EXPECT_EQ(cfg.master_seed, 5u);
  EXPECT_EQ(cfg.phantom_count, 2);
  EXPECT_EQ(cfg.trials_per_phantom, 4);
  EXPECT_EQ(cfg.perception.pixel_sigma, 0.5);
  EXPECT_EQ(cfg.actuation.bound_um, 4.0);
  EXPECT_EQ(cfg.servo.pixel_update_threshold_px, 8.0);  // untouched default
}

TEST(Config, UnknownKeyRejected) {
  EXPECT_THROW(trial::trial_config_from_yaml("perceptoin:\n  pixel_sigma: 1\n"), std::invalid_argument);
  EXPECT_THROW(trial::trial_config_from_yaml("- 1\n- 2\n"), std::invalid_argument);
}

TEST(Config, InvalidValuesRejected) {
  TrialConfig cfg;
  cfg.perception.dropout_rate = 1.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = TrialConfig{};
  cfg.servo.beta = 2.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Trial, FlatNoiseFreeReachesDone) {
  const auto cfg = flat_noise_free();
  const auto rec = trial::run_trial(cfg, 0, 0);
  ASSERT_EQ(rec.outcome, metrics::Outcome::Done) << rec.abort_cause;
  const auto report = metrics::compute_report(rec);
  ASSERT_TRUE(report.nav_error_2d_um);
  EXPECT_LE(*report.nav_error_2d_um, 13.6);  // within one microscope pixel
  ASSERT_TRUE(rec.arrival_clearance_um);
  EXPECT_NEAR(*rec.arrival_clearance_um, 30.0, 2.6);
  EXPECT_LE(report.rcm_error_max_um, 1e-6);
  ASSERT_TRUE(report.insertion_ade_um);
  EXPECT_LE(*report.insertion_ade_um, 1e-6);
  EXPECT_LE(*report.insertion_fde_um, 1e-6);
  // Phases visit the full workflow in order.
  std::vector<Phase> seen;
  for (const auto& e : rec.phases) seen.push_back(e.phase);
  const std::vector<Phase> expected{Phase::AwaitIlmGoal, Phase::AlignXY, Phase::LowerZ, Phase::AtSurface,
                                    Phase::AwaitSubretinalGoal, Phase::Insert, Phase::Done};
  EXPECT_EQ(seen, expected);
}

TEST(Trial, SafetyInvariantsOnEveryCommand) {
  const auto rec = trial::run_trial(flat_noise_free(), 1, 2);
  ASSERT_EQ(rec.outcome, metrics::Outcome::Done) << rec.abort_cause;
  ASSERT_FALSE(rec.commands.empty());
  for (const auto& c : rec.commands) {
    if (c.phase == Phase::AlignXY) {
      EXPECT_EQ(c.command.translation.z(), 0.0) << "tick " << c.tick;
    }
    if (c.phase == Phase::LowerZ) {
      EXPECT_EQ(c.command.translation.head<2>(), Vec2::Zero()) << "tick " << c.tick;
    }
    if (c.command.kind == servo::MotionCommand::Kind::Insert) {
      EXPECT_EQ(c.phase, Phase::Insert);
    }
  }
  for (const auto& tp : rec.trace) {
    if (tp.phase != Phase::Insert && tp.phase != Phase::Done && std::isfinite(tp.clearance_um)) {
      EXPECT_GE(tp.clearance_um, 30.0 - 1e-6) << "tick " << tp.tick;
    }
  }
}

TEST(Trial, TotalDropoutAbortsWithoutTouchingTheRetina) {
  auto cfg = flat_noise_free();
  cfg.perception.dropout_rate = 1.0;
  const auto rec = trial::run_trial(cfg, 0, 0);
  EXPECT_EQ(rec.outcome, metrics::Outcome::Aborted);
  EXPECT_EQ(rec.abort_cause, "perception");
  EXPECT_LE(rec.end_time, 2.0 + 5.0 + 0.5);  // click delay + hold timeout
  for (const auto& tp : rec.trace) {
    if (std::isfinite(tp.clearance_um)) {
      EXPECT_GT(tp.clearance_um, 0.0);
    }
  }
}

TEST(Trial, TimeoutAborts) {
  auto cfg = flat_noise_free();
  cfg.max_sim_time_s = 3.0;
  const auto rec = trial::run_trial(cfg, 0, 0);
  EXPECT_EQ(rec.outcome, metrics::Outcome::Aborted);
  EXPECT_EQ(rec.abort_cause, "timeout");
  ASSERT_TRUE(rec.abort_phase);
}

TEST(Trial, InteractiveModeWaitsForClicks) {
  auto cfg = flat_noise_free();
  cfg.goals.mode = trial::GoalMode::Interactive;
  trial::TrialSimulation sim(cfg, trial::make_setup(cfg, 0, 0));
  for (int i = 0; i < 500; ++i) sim.tick();
  EXPECT_EQ(sim.phase(), Phase::AwaitIlmGoal);
  EXPECT_THROW(sim.click_subretinal_goal(Vec2(256, 700)), std::logic_error);
  EXPECT_THROW(sim.click_ilm_goal(Vec2(-1, 5)), std::invalid_argument);
  sim.click_ilm_goal(Vec2(320, 240));
  EXPECT_EQ(sim.phase(), Phase::AlignXY);
  EXPECT_THROW(sim.click_ilm_goal(Vec2(320, 240)), std::logic_error);
  for (int i = 0; i < 30000 && sim.phase() != Phase::AwaitSubretinalGoal && !sim.finished(); ++i) sim.tick();
  ASSERT_EQ(sim.phase(), Phase::AwaitSubretinalGoal);
  const Vec2 tip = *sim.perception().tip_oct;
  const Vec2 goal(std::round(tip.x()), std::round(tip.y()) + 40.0);
  sim.click_subretinal_goal(goal);
  EXPECT_EQ(sim.phase(), Phase::Insert);
  EXPECT_NEAR(sim.controller().workflow().insertion_remaining_um, servo::compute_insertion_distance(goal, tip),
              1e-9);
  const auto& rec = sim.run();
  EXPECT_EQ(rec.outcome, metrics::Outcome::Done);
}

TEST(Trial, SameSeedSameRecord) {
  auto cfg = flat_noise_free();
  cfg.phantom.bump_amplitude_um = 60.0;
  cfg.actuation.sigma_um = 2.0;
  cfg.perception.pixel_sigma = 0.3;
  cfg.goals.ilm_goal_px.reset();
  const auto a = trial::to_json(trial::run_trial(cfg, 2, 1)).dump();
  const auto b = trial::to_json(trial::run_trial(cfg, 2, 1)).dump();
  EXPECT_EQ(a, b);
}

TEST(Record, JsonRoundTripIsLossless) {
  const auto rec = trial::run_trial(flat_noise_free(), 0, 1);
  const auto j = trial::to_json(rec);
  EXPECT_EQ(trial::to_json(trial::record_from_json(j)), j);

  const auto path = std::filesystem::temp_directory_path() / "subretinal_record_roundtrip.json";
  trial::save_record(path.string(), rec);
  EXPECT_EQ(trial::to_json(trial::load_record(path.string())), j);
  std::filesystem::remove(path);
}

TEST(Record, VersionMismatchRejected) {
  auto j = trial::to_json(trial::run_trial(flat_noise_free(), 0, 0));
  j["format_version"] = kRecordFormatVersion + 1;
  EXPECT_THROW(trial::record_from_json(j), trial::RecordVersionMismatch);
}

TEST(Replay, ReproducesLiveFrameGeometryForAWholeTrial) {
  auto cfg = flat_noise_free();
  cfg.phantom.bump_amplitude_um = 40.0;
  cfg.actuation.sigma_um = 2.0;
  trial::TrialSimulation sim(cfg, trial::make_setup(cfg, 0, 0), /*keep_frames=*/true);
  const auto rec = trial::record_from_json(trial::to_json(sim.run()));
  ASSERT_EQ(rec.outcome, metrics::Outcome::Done) << rec.abort_cause;

  const auto rep = trial::replay(rec);
  EXPECT_FALSE(rep.truncated);
  const auto& live_ms = sim.microscope_frames();
  const auto& live_bs = sim.bscan_frames();
  ASSERT_EQ(rep.microscope.size(), live_ms.size());
  for (std::size_t i = 0; i < live_ms.size(); ++i) {
    EXPECT_EQ(rep.microscope[i].tick, live_ms[i].tick);
    ASSERT_EQ(rep.microscope[i].truth.has_value(), live_ms[i].truth.has_value());
    if (live_ms[i].truth) {
      EXPECT_EQ(rep.microscope[i].truth->tip, live_ms[i].truth->tip);
      EXPECT_EQ(rep.microscope[i].truth->base, live_ms[i].truth->base);
    }
  }
  ASSERT_EQ(rep.bscan.size(), live_bs.size());
  EXPECT_GT(live_bs.size(), 50u);
  for (std::size_t i = 0; i < live_bs.size(); ++i) {
    EXPECT_EQ(rep.bscan[i].tick, live_bs[i].tick);
    EXPECT_EQ(rep.bscan[i].ilm_rows, live_bs[i].ilm_rows);
    EXPECT_EQ(rep.bscan[i].rpe_rows, live_bs[i].rpe_rows);
    ASSERT_EQ(rep.bscan[i].truth.has_value(), live_bs[i].truth.has_value());
    if (live_bs[i].truth) {
      EXPECT_EQ(rep.bscan[i].truth->tip, live_bs[i].truth->tip);
    }
  }
}

TEST(Replay, ReproducesRasterizedPixelsExactly) {
  auto cfg = flat_noise_free();
  cfg.phantom.bump_amplitude_um = 40.0;
  cfg.actuation.sigma_um = 2.0;
  cfg.render.rasterize = true;
  cfg.render.speckle = 0.15;
  trial::TrialSimulation sim(cfg, trial::make_setup(cfg, 0, 0), /*keep_frames=*/true);
  for (int i = 0; i < 300; ++i) sim.tick();
  const auto rep = trial::replay(trial::record_from_json(trial::to_json(sim.record())));
  ASSERT_EQ(rep.microscope.size(), sim.microscope_frames().size());
  ASSERT_EQ(rep.bscan.size(), sim.bscan_frames().size());
  for (std::size_t i = 0; i < rep.microscope.size(); ++i) {
    ASSERT_TRUE(rep.microscope[i].image);
    EXPECT_EQ(rep.microscope[i].image->pixels, sim.microscope_frames()[i].image->pixels) << "frame " << i;
  }
  for (std::size_t i = 0; i < rep.bscan.size(); ++i) {
    ASSERT_TRUE(rep.bscan[i].image);
    EXPECT_EQ(image_hash(rep.bscan[i].image), image_hash(sim.bscan_frames()[i].image)) << "B-scan " << i;
  }
  // Rasterizing can also be forced off for a fast geometric replay.
  const auto plain = trial::replay(sim.record(), false);
  EXPECT_FALSE(plain.microscope.front().image);
}

TEST(Replay, TruncatedRecordWarns) {
  auto rec = trial::run_trial(flat_noise_free(), 0, 0);
  rec.trace.resize(rec.trace.size() / 2);
  const auto rep = trial::replay(rec, false);
  EXPECT_TRUE(rep.truncated);
  EXPECT_NE(rep.warning.find("truncated"), std::string::npos);
  EXPECT_FALSE(rep.microscope.empty());
}

TEST(Batch, SlotsCyclePhantomsFirst) {
  TrialConfig cfg;
  EXPECT_EQ(trial::batch_slot(cfg, 0), std::make_pair(0, 0));
  EXPECT_EQ(trial::batch_slot(cfg, 1), std::make_pair(1, 0));
  EXPECT_EQ(trial::batch_slot(cfg, 3), std::make_pair(0, 1));
  EXPECT_EQ(trial::batch_slot(cfg, 29), std::make_pair(2, 9));
}

TEST(Batch, DeterministicAcrossWorkerCounts) {
  auto cfg = TrialConfig{};
  cfg.actuation.sigma_um = 2.0;
  cfg.workers = 1;
  const auto a = trial::run_batch(cfg, 3);
  cfg.workers = 3;
  const auto b = trial::run_batch(cfg, 3);
  EXPECT_EQ(a.hash, b.hash);
  ASSERT_EQ(a.records.size(), 3u);
  EXPECT_EQ(a.records[2].phantom_index, 2);
  EXPECT_EQ(a.aggregate.trials, 3u);

  const auto dir = std::filesystem::temp_directory_path() / "subretinal_batch_test";
  std::filesystem::remove_all(dir);
  trial::write_batch(dir, a);
  for (const char* f : {"metrics.json", "aggregate.csv", "aggregate.json", "summary.json",
                        "records/trial_p0_t0.json", "records/trial_p2_t0.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::filesystem::remove_all(dir);
}
