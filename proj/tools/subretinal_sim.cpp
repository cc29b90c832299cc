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

// Command-line front end: simulate, calibrate, replay, serve.

#include "subretinal/bridge.hpp"
#include "subretinal/galvo_calibration.hpp"
#include "subretinal/image_io.hpp"
#include "subretinal/trial_runner.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace subretinal;

namespace {

trial::TrialConfig config_or_default(const std::string& path) {
  return path.empty() ? trial::TrialConfig{} : trial::load_trial_config(path);
}

void print_aggregate(const trial::BatchResult& b) {
  std::cout << "trials " << b.records.size() << "  done " << b.aggregate.done << "  aborted " << b.aggregate.aborted
            << "\n";
  const auto& ref = metrics::hardware_reference();
  std::cout << std::fixed << std::setprecision(3);
  for (const auto& row : b.aggregate.rows) {
    std::cout << "  " << std::left << std::setw(26) << row.metric << std::right << std::setw(11) << row.summary.mean
              << " +- " << std::setw(9) << row.summary.std;
    if (auto it = ref.find(row.metric); it != ref.end())
      std::cout << "   (hardware " << it->second.mean << " +- " << it->second.std << ")";
    std::cout << "\n";
  }
  for (const auto& r : b.records)
    if (r.outcome == metrics::Outcome::Aborted)
      std::cout << "  aborted: p" << r.phantom_index << " t" << r.trial_index << " cause=" << r.abort_cause << "\n";
  std::cout << "hash " << b.hash << "\n";
}

void export_frames(const fs::path& dir, const std::vector<imaging::MicroscopeFrame>& ms,
                   const std::vector<imaging::BScanFrame>& bs) {
  fs::create_directories(dir);
  auto stem = [](const char* prefix, std::uint64_t tick) {
    std::ostringstream os;
    os << prefix << '_' << std::setw(6) << std::setfill('0') << tick;
    return os.str();
  };
  auto sidecar = [](const fs::path& p, const nlohmann::json& j) {
    std::ofstream f(p);
    f << j.dump(2) << '\n';
  };
  for (const auto& f : ms) {
    const auto s = stem("microscope", f.tick);
    if (f.image) image_io::write_png((dir / (s + ".png")).string(), *f.image);
    sidecar(dir / (s + ".json"), image_io::annotations(f));
  }
  for (const auto& f : bs) {
    const auto s = stem("bscan", f.tick);
    if (f.image) image_io::write_png((dir / (s + ".png")).string(), *f.image);
    sidecar(dir / (s + ".json"), image_io::annotations(f));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic simulator for autonomous subretinal injection"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::string config_path;
  std::optional<int> trials;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  bool frames = false;
  auto* simulate = app.add_subcommand("simulate", "Run a batch of scripted trials");
  simulate->add_option("--config", config_path, "Trial config file (YAML)")->required()->check(CLI::ExistingFile);
  simulate->add_option("--trials", trials, "Number of trials (default: phantoms x trials_per_phantom)")
      ->check(CLI::PositiveNumber);
  simulate->add_option("--out", out_dir, "Output directory");
  simulate->add_option("--seed", seed, "Override the master seed");
  simulate->add_flag("--frames", frames, "Also export PNG frames of the first trial");

  std::string cal_out;
  auto* calibrate = app.add_subcommand("calibrate", "Fit the galvo calibration from a laser-card scan");
  calibrate->add_option("--config", config_path, "Trial config file (YAML)")->check(CLI::ExistingFile);
  calibrate->add_option("--out", cal_out, "Write the calibration record to this file");
  calibrate->add_option("--seed", seed, "Seed for the calibration noise stream");

  std::string record_path;
  std::string frames_dir;
  auto* replay = app.add_subcommand("replay", "Re-render the frames of a stored trial record");
  replay->add_option("record", record_path, "Trial record (JSON)")->required()->check(CLI::ExistingFile);
  replay->add_option("--out", frames_dir, "Export PNG frames and JSON sidecars here");

  unsigned short port = 8765;
  double realtime = 1.0;
  auto* serve = app.add_subcommand("serve", "Stream an interactive trial over TCP (NDJSON)");
  serve->add_option("--port", port, "TCP port on 127.0.0.1 (0 picks a free port)");
  serve->add_option("--config", config_path, "Trial config file (YAML)")->check(CLI::ExistingFile);
  serve->add_option("--realtime-factor", realtime, "Simulated seconds per wall-clock second")
      ->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) {
      auto cfg = trial::load_trial_config(config_path);
      if (seed) cfg.master_seed = *seed;
      const auto batch = trial::run_batch(cfg, trials);
      trial::write_batch(out_dir, batch);
      print_aggregate(batch);
      if (frames && !batch.records.empty()) {
        auto first = cfg;
        first.render.rasterize = true;
        const auto [p, t] = trial::batch_slot(cfg, 0);
        trial::TrialSimulation sim(first, trial::make_setup(first, p, t), true);
        sim.run();
        export_frames(fs::path(out_dir) / "frames", sim.microscope_frames(), sim.bscan_frames());
      }
      std::cout << "wrote " << out_dir << "\n";
      return 0;
    }
    if (*calibrate) {
      const auto cfg = config_or_default(config_path);
      const auto cal = trial::calibrate(cfg, seed.value_or(cfg.master_seed));
      std::cout << galvo::format_calibration(cal.calibration);
      std::cout << "# rms residual " << cal.rms_px << " px over " << cal.samples.size() << " samples\n";
      if (!cal_out.empty()) galvo::save_calibration(cal_out, cal.calibration);
      return 0;
    }
    if (*replay) {
      const auto rec = trial::load_record(record_path);
      const auto result = trial::replay(rec, frames_dir.empty() ? std::nullopt : std::optional<bool>(true));
      if (result.truncated) std::cerr << "warning: " << result.warning << "\n";
      std::cout << "replayed " << result.microscope.size() << " microscope frames and " << result.bscan.size()
                << " B-scans\n";
      if (!frames_dir.empty()) export_frames(frames_dir, result.microscope, result.bscan);
      return 0;
    }
    if (*serve) {
      bridge::Session session(config_or_default(config_path), bridge::stderr_logger());
      bridge::Server server(session, port, realtime);
      std::cout << "listening on 127.0.0.1:" << server.port() << std::endl;
      server.run(true);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
