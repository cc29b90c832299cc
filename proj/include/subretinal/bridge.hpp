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

#include "subretinal/image_io.hpp"
#include "subretinal/metrics.hpp"
#include "subretinal/trial_runner.hpp"

#include <boost/asio.hpp>
#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <deque>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

// Live streaming service: newline-delimited JSON over TCP. The protocol
// Session is transport-free; Server wires it to sockets.
namespace subretinal::bridge {

using nlohmann::json;
using servo::Phase;

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
  return [](const std::string& msg) { std::cerr << "[bridge] " << msg << '\n'; };
}

/// One interactive trial behind the wire protocol. Client lines are queued by
/// submit() (any thread) and applied at the start of the next step(), so a
/// click is either fully applied before a controller tick or not at all.
/// Every outbound message is addressed to all clients.
class Session {
 public:
  /// `rasterize` forces PNG frames on; with false the config decides (frames
  /// then carry annotations only, with a null png).
  explicit Session(trial::TrialConfig cfg, Logger log = {}, bool rasterize = true)
      : log_(std::move(log)), rasterize_(rasterize) {
    reset_sim(std::move(cfg));
  }

  /// Queue one raw client line.
  void submit(std::string line) {
    std::lock_guard lock(inbox_mutex_);
    inbox_.push_back(std::move(line));
  }

  /// One controller tick: apply queued client messages, advance the
  /// simulation when running, and return the outbound messages in order.
  std::vector<json> step() {
    std::deque<std::string> lines;
    {
      std::lock_guard lock(inbox_mutex_);
      lines.swap(inbox_);
    }
    outbox_.clear();
    for (auto& line : lines) handle(line);
    if (running_ && !sim_->finished()) {
      const Phase before = sim_->phase();
      sim_->tick();
      if (sim_->phase() != before) emit_state();
      if (sim_->finished()) {
        running_ = false;
        emit_done();
      }
    }
    return std::move(outbox_);
  }

  bool running() const { return running_; }
  Phase phase() const { return sim_->phase(); }
  const trial::TrialSimulation& simulation() const { return *sim_; }
  std::uint64_t last_seq() const { return seq_; }

 private:
  void reset_sim(trial::TrialConfig cfg) {
    cfg.goals.mode = trial::GoalMode::Interactive;
    if (rasterize_) cfg.render.rasterize = true;
    auto setup = trial::make_setup(cfg, 0, 0);
    sim_ = std::make_unique<trial::TrialSimulation>(std::move(cfg), std::move(setup));
    sim_->on_microscope([this](const imaging::MicroscopeFrame& f) {
      emit_microscope(f);
      emit_state();
    });
    sim_->on_bscan([this](const imaging::BScanFrame& f) { emit_bscan(f); });
    running_ = false;
  }

  double sim_time() const { return sim_ ? sim_->sim_time() : 0.0; }

  void emit(json msg) {
    msg["seq"] = ++seq_;
    msg["sim_time"] = sim_time();
    outbox_.push_back(std::move(msg));
  }

  void warn(const std::string& msg) {
    if (log_) log_(msg);
  }

  void reject(const std::string& for_kind, const std::string& reason) {
    emit({{"kind", "rejected"}, {"for", for_kind}, {"reason", reason}, {"phase", std::string(servo::to_string(phase()))}});
  }

  void ack(const std::string& for_kind, json extra = json::object()) {
    extra["kind"] = "ack";
    extra["for"] = for_kind;
    extra["phase"] = std::string(servo::to_string(phase()));
    emit(std::move(extra));
  }

  static std::optional<Vec2> click_xy(const json& msg) {
    if (!msg.contains("x") || !msg.contains("y") || !msg["x"].is_number() || !msg["y"].is_number()) return std::nullopt;
    return Vec2(msg["x"].get<double>(), msg["y"].get<double>());
  }

  void handle(const std::string& line) {
    json msg;
    try {
      msg = json::parse(line);
    } catch (const json::parse_error& e) {
      emit({{"kind", "error"}, {"reason", std::string("malformed JSON: ") + e.what()}});
      return;
    }
    if (!msg.is_object() || !msg.contains("kind") || !msg["kind"].is_string()) {
      emit({{"kind", "error"}, {"reason", "message needs a string 'kind'"}});
      return;
    }
    const std::string kind = msg["kind"].get<std::string>();
    if (kind == "start") {
      if (sim_->finished()) return reject(kind, "trial finished; send reset");
      running_ = true;
      ack(kind);
      emit_state();
    } else if (kind == "pause") {
      running_ = false;
      ack(kind);
    } else if (kind == "reset") {
      try {
        trial::TrialConfig cfg = msg.contains("config") && !msg["config"].is_null()
                                     ? trial::trial_config_from_json(msg["config"])
                                     : trial::trial_config_from_json(sim_->record().config);
        reset_sim(std::move(cfg));
      } catch (const std::exception& e) {
        return reject(kind, std::string("invalid config: ") + e.what());
      }
      ack(kind);
      emit_state();
    } else if (kind == "click_ilm_goal") {
      const auto xy = click_xy(msg);
      if (!xy) return reject(kind, "click needs numeric x and y");
      if (!running_) return reject(kind, "session not started");
      if (phase() != Phase::AwaitIlmGoal) return reject(kind, "ILM goal is accepted only in AWAIT_ILM_GOAL");
      try {
        sim_->click_ilm_goal(*xy);
      } catch (const std::exception& e) {
        return reject(kind, e.what());
      }
      ack(kind, {{"goal", {xy->x(), xy->y()}}});
      emit_state();
    } else if (kind == "click_subretinal_goal") {
      const auto xy = click_xy(msg);
      if (!xy) return reject(kind, "click needs numeric x and y");
      if (phase() != Phase::AwaitSubretinalGoal)
        return reject(kind, "subretinal goal is accepted only in AWAIT_SUBRETINAL_GOAL");
      try {
        sim_->click_subretinal_goal(*xy);
      } catch (const std::exception& e) {
        return reject(kind, e.what());
      }
      ack(kind, {{"goal", {xy->x(), xy->y()}},
                 {"insertion_distance_um", sim_->controller().workflow().insertion_total_um}});
      emit_state();
    } else {
      warn("ignoring unknown message kind '" + kind + "'");
    }
  }

  static json opt_px(const std::optional<Vec2>& v) { return v ? json{v->x(), v->y()} : json(nullptr); }

  void emit_state() {
    const auto& wf = sim_->controller().workflow();
    const auto& p = sim_->perception();
    const auto& tool = sim_->robot().actual();
    const auto report = metrics::compute_report(sim_->record(), sim_->config().conv());
    emit({{"kind", "state"},
          {"phase", std::string(servo::to_string(wf.phase))},
          {"running", running_},
          {"tick", sim_->tick_index()},
          {"tip_rgb", opt_px(p.tip_rgb)},
          {"base_rgb", opt_px(p.base_rgb)},
          {"tip_oct", opt_px(p.tip_oct)},
          {"base_oct", opt_px(p.base_oct)},
          {"goal_ilm_px", opt_px(wf.goal_ilm_px)},
          {"goal_subretinal_px", opt_px(wf.goal_subretinal_px)},
          {"insertion_remaining_um", wf.insertion_remaining_um},
          {"rcm_error_um", robot::rcm_error(tool, sim_->robot().rcm())},
          {"metrics", metrics::to_json(report)}});
  }

  void emit_microscope(const imaging::MicroscopeFrame& f) {
    const auto& p = sim_->perception();
    emit({{"kind", "microscope_frame"},
          {"tick", f.tick},
          {"png", f.image ? json(image_io::base64_encode(image_io::encode_png(*f.image))) : json(nullptr)},
          {"annotations", image_io::annotations(f)},
          {"detections", {{"tip", opt_px(p.tip_rgb)}, {"base", opt_px(p.base_rgb)}}}});
  }

  void emit_bscan(const imaging::BScanFrame& f) {
    const auto& p = sim_->perception();
    emit({{"kind", "bscan_frame"},
          {"tick", f.tick},
          {"png", f.image ? json(image_io::base64_encode(image_io::encode_png(*f.image))) : json(nullptr)},
          {"annotations", image_io::annotations(f)},
          {"detections", {{"tip", opt_px(p.tip_oct)}, {"base", opt_px(p.base_oct)}}}});
  }

  void emit_done() {
    const auto& rec = sim_->record();
    json report = metrics::to_json(metrics::compute_report(rec, sim_->config().conv()));
    emit({{"kind", "trial_done"},
          {"outcome", rec.outcome == metrics::Outcome::Done ? "DONE" : "ABORTED"},
          {"abort_cause", rec.abort_cause},
          {"report", report},
          {"record", trial::to_json(rec)}});
  }

  Logger log_;
  bool rasterize_ = true;
  std::unique_ptr<trial::TrialSimulation> sim_;
  bool running_ = false;
  std::uint64_t seq_ = 0;
  std::vector<json> outbox_;
  std::mutex inbox_mutex_;
  std::deque<std::string> inbox_;
};

namespace asio = boost::asio;
using asio::ip::tcp;

/// TCP front end. The io thread owns sockets; the controller thread owns the
/// Session and hands serialized lines to the io thread for fan-out.
class Server {
 public:
  Server(Session& session, unsigned short port, double realtime_factor = 1.0, Logger log = stderr_logger())
      : session_(session),
        acceptor_(io_, tcp::endpoint(asio::ip::address_v4::loopback(), port)),
        realtime_factor_(realtime_factor),
        log_(std::move(log)) {
    if (!(realtime_factor_ > 0)) throw std::invalid_argument("realtime factor must be positive");
  }

  unsigned short port() const { return acceptor_.local_endpoint().port(); }

  /// Blocks until stop() is called (or SIGINT/SIGTERM when requested).
  void run(bool stop_on_signals = false) {
    asio::signal_set signals(io_);
    if (stop_on_signals) {
      signals.add(SIGINT);
      signals.add(SIGTERM);
      signals.async_wait([this](boost::system::error_code ec, int) {
        if (!ec) stop();
      });
    }
    accept();
    std::thread controller([this] { control_loop(); });
    io_.run();
    stopping_ = true;
    controller.join();
  }

  void stop() {
    stopping_ = true;
    asio::post(io_, [this] {
      boost::system::error_code ec;
      acceptor_.close(ec);
      for (auto& c : connections_) c->close();
      connections_.clear();
      io_.stop();
    });
  }

  std::size_t connection_count() const { return connection_count_; }

 private:
  class Connection : public std::enable_shared_from_this<Connection> {
   public:
    Connection(tcp::socket socket, Server& server) : socket_(std::move(socket)), server_(server) {}

    void start() { read(); }

    void send(std::shared_ptr<const std::string> line) {
      const bool idle = queue_.empty();
      queue_.push_back(std::move(line));
      if (idle) write();
    }

    void close() {
      boost::system::error_code ec;
      socket_.shutdown(tcp::socket::shutdown_both, ec);
      socket_.close(ec);
    }

   private:
    void read() {
      asio::async_read_until(socket_, buffer_, '\n', [self = shared_from_this()](boost::system::error_code ec, std::size_t n) {
        if (ec) return self->server_.drop(self);
        std::string line(asio::buffers_begin(self->buffer_.data()), asio::buffers_begin(self->buffer_.data()) + static_cast<std::ptrdiff_t>(n));
        self->buffer_.consume(n);
        while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.pop_back();
        if (!line.empty()) self->server_.session_.submit(std::move(line));
        self->read();
      });
    }

    void write() {
      asio::async_write(socket_, asio::buffer(*queue_.front()), [self = shared_from_this()](boost::system::error_code ec, std::size_t) {
        if (ec) return self->server_.drop(self);
        self->queue_.pop_front();
        if (!self->queue_.empty()) self->write();
      });
    }

    tcp::socket socket_;
    Server& server_;
    asio::streambuf buffer_;
    std::deque<std::shared_ptr<const std::string>> queue_;
  };

  void accept() {
    acceptor_.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
      if (ec) return;
      auto c = std::make_shared<Connection>(std::move(socket), *this);
      connections_.insert(c);
      connection_count_ = connections_.size();
      c->start();
      accept();
    });
  }

  void drop(const std::shared_ptr<Connection>& c) {
    c->close();
    connections_.erase(c);
    connection_count_ = connections_.size();
  }

  void control_loop() {
    using clock = std::chrono::steady_clock;
    const auto period = std::chrono::duration_cast<clock::duration>(
        std::chrono::duration<double>(1.0 / (kControlRateHz * realtime_factor_)));
    auto next = clock::now();
    while (!stopping_) {
      std::vector<json> out;
      try {
        out = session_.step();
      } catch (const std::exception& e) {
        if (log_) log_(std::string("controller error: ") + e.what());
      }
      for (auto& msg : out) {
        auto line = std::make_shared<const std::string>(msg.dump() + "\n");
        asio::post(io_, [this, line] {
          for (auto& c : connections_) c->send(line);
        });
      }
      next += period;
      std::this_thread::sleep_until(next);
    }
  }

  Session& session_;
  asio::io_context io_;
  tcp::acceptor acceptor_;
  double realtime_factor_;
  Logger log_;
  std::set<std::shared_ptr<Connection>> connections_;
  std::atomic<std::size_t> connection_count_{0};
  std::atomic<bool> stopping_{false};
};

}  // namespace subretinal::bridge
