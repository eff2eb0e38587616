#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipainter/digest.hpp"
#include "ipainter/image_io.hpp"

namespace ipainter {

enum class JobState { queued, running, done, failed, cancelled };

inline std::string to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
    case JobState::cancelled: return "cancelled";
  }
  return "unknown";
}

inline JobState parse_job_state(const std::string& s) {
  for (auto st : {JobState::queued, JobState::running, JobState::done, JobState::failed, JobState::cancelled})
    if (to_string(st) == s) return st;
  throw std::invalid_argument("unknown job state: " + s);
}

inline bool is_terminal(JobState s) { return s == JobState::done || s == JobState::failed || s == JobState::cancelled; }

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

struct SnapshotRef {
  long long ops_done = 0;
  int timestep = 0;
  std::string blob;
};

struct JobRecord {
  std::string id;
  JobState state = JobState::queued;
  double progress = 0.0;
  long long ops_done = 0;
  long long ops_total = 0;
  nlohmann::json spec;    // composition document as submitted
  nlohmann::json config;  // JobConfig::to_json()
  std::optional<std::string> result_blob;
  nlohmann::json report;    // null until done
  nlohmann::json manifest;  // null until done
  std::vector<SnapshotRef> snapshots;
  std::string error;
  std::string created_at;
  std::string started_at;
  std::string finished_at;

  nlohmann::json to_json() const {
    nlohmann::json snaps = nlohmann::json::array();
    for (std::size_t k = 0; k < snapshots.size(); ++k)
      snaps.push_back({{"index", k}, {"ops_done", snapshots[k].ops_done}, {"timestep", snapshots[k].timestep},
                       {"blob", snapshots[k].blob}});
    return {{"id", id},
            {"state", to_string(state)},
            {"progress", progress},
            {"ops_done", ops_done},
            {"ops_total", ops_total},
            {"spec", spec},
            {"config", config},
            {"result", result_blob ? nlohmann::json(*result_blob) : nlohmann::json(nullptr)},
            {"report", report},
            {"manifest", manifest},
            {"snapshots", snaps},
            {"error", error},
            {"created_at", created_at},
            {"started_at", started_at},
            {"finished_at", finished_at}};
  }

  static JobRecord from_json(const nlohmann::json& j) {
    JobRecord r;
    r.id = j.at("id").get<std::string>();
    r.state = parse_job_state(j.at("state").get<std::string>());
    r.progress = j.at("progress").get<double>();
    r.ops_done = j.value("ops_done", 0LL);
    r.ops_total = j.value("ops_total", 0LL);
    r.spec = j.at("spec");
    r.config = j.at("config");
    if (j.contains("result") && !j.at("result").is_null()) r.result_blob = j.at("result").get<std::string>();
    r.report = j.value("report", nlohmann::json());
    r.manifest = j.value("manifest", nlohmann::json());
    for (const auto& s : j.value("snapshots", nlohmann::json::array()))
      r.snapshots.push_back({s.at("ops_done").get<long long>(), s.at("timestep").get<int>(), s.at("blob").get<std::string>()});
    r.error = j.value("error", "");
    r.created_at = j.value("created_at", "");
    r.started_at = j.value("started_at", "");
    r.finished_at = j.value("finished_at", "");
    return r;
  }
};

/// Directory-per-job store with content-addressed blobs:
///   <root>/jobs/<id>/job.json
///   <root>/blobs/<sha256>.png
/// Writes go through one mutex and land via rename.
class JobStore {
 public:
  explicit JobStore(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_ / "jobs");
    std::filesystem::create_directories(root_ / "blobs");
  }

  const std::filesystem::path& root() const { return root_; }

  void save(const JobRecord& record) {
    if (!valid_id(record.id)) throw std::invalid_argument("invalid job id: " + record.id);
    std::lock_guard lock(mutex_);
    const auto dir = root_ / "jobs" / record.id;
    std::filesystem::create_directories(dir);
    const std::string text = record.to_json().dump(2);
    write_atomic(dir / "job.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  std::optional<JobRecord> load(const std::string& id) const {
    if (!valid_id(id)) return std::nullopt;
    std::ifstream in(root_ / "jobs" / id / "job.json");
    if (!in) return std::nullopt;
    return JobRecord::from_json(nlohmann::json::parse(in));
  }

  // Records in creation order.
  std::vector<JobRecord> load_all() const {
    std::vector<JobRecord> out;
    for (const auto& entry : std::filesystem::directory_iterator(root_ / "jobs")) {
      if (!entry.is_directory()) continue;
      if (auto r = load(entry.path().filename().string())) out.push_back(std::move(*r));
    }
    std::sort(out.begin(), out.end(), [](const JobRecord& a, const JobRecord& b) {
      return std::tie(a.created_at, a.id) < std::tie(b.created_at, b.id);
    });
    return out;
  }

  std::string put_blob(std::span<const std::uint8_t> bytes) {
    const std::string key = sha256_hex(bytes);
    std::lock_guard lock(mutex_);
    const auto path = blob_path(key);
    if (!std::filesystem::exists(path)) write_atomic(path, bytes);
    return key;
  }

  std::optional<std::vector<std::uint8_t>> get_blob(const std::string& key) const {
    if (key.size() != 64 || key.find_first_not_of("0123456789abcdef") != std::string::npos) return std::nullopt;
    std::ifstream in(blob_path(key), std::ios::binary);
    if (!in) return std::nullopt;
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }

  static bool valid_id(const std::string& id) {
    return !id.empty() && id.size() <= 64 &&
           id.find_first_not_of("0123456789abcdefghijklmnopqrstuvwxyz-_") == std::string::npos;
  }

 private:
  std::filesystem::path blob_path(const std::string& key) const { return root_ / "blobs" / (key + ".png"); }

  static void write_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    write_file(tmp, bytes);
    std::filesystem::rename(tmp, path);
  }

  std::filesystem::path root_;
  mutable std::mutex mutex_;
};

}  // namespace ipainter
