#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/canvas.hpp"
#include "ipainter/job.hpp"
#include "ipainter/job_store.hpp"

namespace ipainter {

// Client errors (HTTP 400).
class BadRequest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Queue at capacity (HTTP 503).
class QueueFull : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CancelOutcome { cancelled, stopping, not_found, terminal };

inline int default_worker_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw == 0 ? 1u : hw, 1u, 4u));
}

// Splits a POST /jobs body into the composition document and the config.
// Accepts {"spec": {...}, "config": {...}} or a composition document with an
// optional "config" member.
inline std::pair<nlohmann::json, nlohmann::json> split_job_body(const nlohmann::json& body) {
  if (!body.is_object()) throw BadRequest("request body must be a JSON object");
  nlohmann::json spec = body.contains("spec") ? body.at("spec") : body;
  nlohmann::json config = body.value("config", nlohmann::json::object());
  if (spec.is_object()) spec.erase("config");
  return {spec, config};
}

// Seed used when a job does not specify one: the leading 16 hex digits of its id.
inline std::uint64_t seed_from_id(const std::string& id) {
  std::uint64_t seed = 0;
  for (std::size_t i = 0; i < id.size() && i < 16; ++i) {
    const char c = id[i];
    const int v = c >= '0' && c <= '9' ? c - '0' : (c >= 'a' && c <= 'f' ? c - 'a' + 10 : 0);
    seed = seed << 4 | static_cast<std::uint64_t>(v);
  }
  return seed;
}

class JobService {
 public:
  struct Options {
    std::filesystem::path store_dir = "ipainter-store";
    int workers = default_worker_count();
    std::size_t queue_capacity = 64;
    bool allow_file_paths = false;  // patch images given as server-side paths
  };

  explicit JobService(Options options) : options_(std::move(options)), store_(options_.store_dir) {
    if (options_.workers < 1) throw std::invalid_argument("need at least one worker");
    recover();
    for (int i = 0; i < options_.workers; ++i) workers_.emplace_back([this](std::stop_token st) { worker(st); });
  }

  ~JobService() { shutdown(); }

  JobService(const JobService&) = delete;
  JobService& operator=(const JobService&) = delete;

  void shutdown() {
    {
      std::lock_guard lock(mutex_);
      if (shutting_down_) return;
      shutting_down_ = true;
      for (auto& [id, src] : running_) src.request_stop();
    }
    for (auto& w : workers_) w.request_stop();
    cv_.notify_all();
    workers_.clear();  // joins
  }

  /// Validates and enqueues a job; returns its id.
  std::string submit(const nlohmann::json& body) {
    auto [spec_json, config_json] = split_job_body(body);
    JobRecord record;
    record.id = new_id();
    try {
      if (!config_json.is_object()) throw BadRequest("config must be a JSON object");
      if (!config_json.contains("seed")) config_json["seed"] = seed_from_id(record.id);
      JobConfig config = JobConfig::from_json(config_json);
      check_sources(spec_json);
      auto raster = rasterize(composition_from_json(spec_json));
      const PreparedJob prepared = prepare_job(std::move(raster.input), std::move(raster.warnings), config, cache_);
      record.config = config.to_json();
      record.ops_total = prepared.expected.n_total;
    } catch (const BadRequest&) {
      throw;
    } catch (const std::exception& e) {
      throw BadRequest(e.what());
    }
    record.spec = spec_json;
    record.created_at = utc_now();

    std::lock_guard lock(mutex_);
    if (shutting_down_) throw QueueFull("service is shutting down");
    if (queue_.size() >= options_.queue_capacity) throw QueueFull("job queue is full");
    store_.save(record);
    records_[record.id] = record;
    queue_.push_back(record.id);
    cv_.notify_one();
    return record.id;
  }

  std::optional<JobRecord> get(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto it = records_.find(id);
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<JobRecord> list() const {
    std::lock_guard lock(mutex_);
    std::vector<JobRecord> out;
    for (const auto& [id, r] : records_) out.push_back(r);
    std::sort(out.begin(), out.end(), [](const JobRecord& a, const JobRecord& b) {
      return std::tie(a.created_at, a.id) < std::tie(b.created_at, b.id);
    });
    return out;
  }

  CancelOutcome cancel(const std::string& id) {
    std::lock_guard lock(mutex_);
    const auto it = records_.find(id);
    if (it == records_.end()) return CancelOutcome::not_found;
    JobRecord& r = it->second;
    if (is_terminal(r.state)) return CancelOutcome::terminal;
    if (r.state == JobState::queued) {
      queue_.erase(std::remove(queue_.begin(), queue_.end(), id), queue_.end());
      r.state = JobState::cancelled;
      r.finished_at = utc_now();
      store_.save(r);
      cv_.notify_all();
      return CancelOutcome::cancelled;
    }
    running_.at(id).request_stop();
    return CancelOutcome::stopping;
  }

  // Blocks until the job is terminal or the timeout passes.
  std::optional<JobRecord> wait(const std::string& id, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    const bool ok = cv_.wait_for(lock, timeout, [&] {
      const auto it = records_.find(id);
      return it == records_.end() || is_terminal(it->second.state);
    });
    const auto it = records_.find(id);
    if (!ok || it == records_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<std::vector<std::uint8_t>> result_png(const std::string& id) const {
    const auto r = get(id);
    if (!r || !r->result_blob) return std::nullopt;
    return store_.get_blob(*r->result_blob);
  }

  std::optional<std::vector<std::uint8_t>> snapshot_png(const std::string& id, std::size_t k) const {
    const auto r = get(id);
    if (!r || k >= r->snapshots.size()) return std::nullopt;
    return store_.get_blob(r->snapshots[k].blob);
  }

  const JobStore& store() const { return store_; }
  const Options& options() const { return options_; }

 private:
  void check_sources(const nlohmann::json& spec) const {
    if (options_.allow_file_paths || !spec.is_object() || !spec.contains("placements")) return;
    for (const auto& p : spec.at("placements")) {
      if (p.contains("image_base64")) continue;
      const auto src = p.value("image", "");
      if (src.rfind(detail::kDataUriPrefix, 0) != 0)
        throw BadRequest("patch images must be inline PNG data URIs (data:image/png;base64,...)");
    }
  }

  std::string new_id() {
    std::lock_guard lock(id_mutex_);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string id;
    do {
      id.clear();
      std::uint64_t v = id_rng_();
      for (int i = 0; i < 16; ++i, v >>= 4) id.push_back(kHex[v & 15]);
    } while (get(id).has_value());
    return id;
  }

  // Queued jobs are re-queued; jobs caught mid-run cannot resume.
  void recover() {
    for (auto& r : store_.load_all()) {
      if (r.state == JobState::running) {
        r.state = JobState::failed;
        r.error = "interrupted by restart";
        r.finished_at = utc_now();
        store_.save(r);
      }
      if (r.state == JobState::queued) queue_.push_back(r.id);
      records_[r.id] = std::move(r);
    }
  }

  void worker(std::stop_token st) {
    while (true) {
      std::string id;
      std::stop_source job_stop;
      JobRecord snapshot;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, st, [&] { return !queue_.empty(); });
        if (st.stop_requested() || shutting_down_) return;
        id = queue_.front();
        queue_.pop_front();
        JobRecord& r = records_.at(id);
        r.state = JobState::running;
        r.started_at = utc_now();
        store_.save(r);
        running_.emplace(id, job_stop);
        snapshot = r;
      }
      execute(snapshot, job_stop.get_token());
      std::lock_guard lock(mutex_);
      running_.erase(id);
      cv_.notify_all();
    }
  }

  void update(const std::string& id, const std::function<void(JobRecord&)>& fn, bool persist) {
    std::lock_guard lock(mutex_);
    JobRecord& r = records_.at(id);
    fn(r);
    if (persist) store_.save(r);
  }

  void execute(const JobRecord& record, std::stop_token stop) {
    const std::string id = record.id;
    long long last_saved_pct = -1;
    try {
      const JobConfig config = JobConfig::from_json(record.config);
      auto raster = rasterize(composition_from_json(record.spec));
      const PreparedJob job = prepare_job(std::move(raster.input), std::move(raster.warnings), config, cache_);
      auto on_progress = [&](const PaintProgress& p) {
        const long long pct = p.ops_total ? 100 * p.ops_done / p.ops_total : 0;
        const bool persist = pct != last_saved_pct;
        if (persist) last_saved_pct = pct;
        update(id, [&](JobRecord& r) {
          if (p.ops_done <= r.ops_done) return;
          r.ops_done = p.ops_done;
          r.progress = std::min(1.0, static_cast<double>(p.ops_done) / static_cast<double>(p.ops_total));
        }, persist);
      };
      auto on_snapshot = [&](const Snapshot& s) {
        const std::string blob = store_.put_blob(encode_png(s.image));
        update(id, [&](JobRecord& r) { r.snapshots.push_back({s.ops_done, s.timestep, blob}); }, true);
      };
      const PaintOutput out = run_paint_job(job, config, on_progress, on_snapshot, stop);
      const std::string blob = store_.put_blob(out.png);
      update(id, [&](JobRecord& r) {
        r.state = JobState::done;
        r.progress = 1.0;
        r.ops_done = out.result.ops.n_total;
        r.result_blob = blob;
        r.report = out.report;
        r.manifest = out.manifest;
        r.finished_at = utc_now();
      }, true);
    } catch (const CancelledError&) {
      const bool shutdown = shutting_down();
      update(id, [&](JobRecord& r) {
        r.state = shutdown ? JobState::failed : JobState::cancelled;
        if (shutdown) r.error = "interrupted by shutdown";
        r.finished_at = utc_now();
      }, true);
    } catch (const std::exception& e) {
      const std::string what = e.what();
      update(id, [&](JobRecord& r) {
        r.state = JobState::failed;
        r.error = what;
        r.finished_at = utc_now();
      }, true);
    }
  }

  bool shutting_down() const {
    std::lock_guard lock(mutex_);
    return shutting_down_;
  }

  Options options_;
  JobStore store_;
  DenoiserCache cache_;
  mutable std::mutex mutex_;
  std::condition_variable_any cv_;
  std::map<std::string, JobRecord> records_;
  std::deque<std::string> queue_;
  std::map<std::string, std::stop_source> running_;
  bool shutting_down_ = false;
  std::mutex id_mutex_;
  std::mt19937_64 id_rng_{std::random_device{}()};
  std::vector<std::jthread> workers_;
};

}  // namespace ipainter
