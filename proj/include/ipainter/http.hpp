#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

// resolv.h defines _res as a macro, which breaks Eigen included after this header.
#ifdef _res
#undef _res
#endif

#include "ipainter/canvas.hpp"
#include "ipainter/digest.hpp"
#include "ipainter/image_io.hpp"
#include "ipainter/patches.hpp"
#include "ipainter/sampler.hpp"
#include "ipainter/service.hpp"

namespace ipainter {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}, {"status", status}});
}

inline void send_png(httplib::Response& res, const std::vector<std::uint8_t>& bytes) {
  res.status = 200;
  res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception& e) {
    throw BadRequest(std::string("malformed JSON: ") + e.what());
  }
}

inline int int_param(const httplib::Request& req, const char* name, int fallback) {
  if (!req.has_param(name)) return fallback;
  try {
    return std::stoi(req.get_param_value(name));
  } catch (const std::exception&) {
    throw BadRequest(std::string("query parameter ") + name + " must be an integer");
  }
}

inline nlohmann::json job_json(const JobRecord& r) {
  nlohmann::json j = r.to_json();
  j["links"] = {{"self", "/jobs/" + r.id}, {"cancel", "/jobs/" + r.id + "/cancel"}};
  if (r.result_blob) j["links"]["result"] = "/jobs/" + r.id + "/result.png";
  j["links"]["snapshots"] = nlohmann::json::array();
  for (std::size_t k = 0; k < r.snapshots.size(); ++k)
    j["links"]["snapshots"].push_back("/jobs/" + r.id + "/snapshots/" + std::to_string(k) + ".png");
  return j;
}

// Wraps a handler so library exceptions map onto status codes.
template <class F>
auto guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const BadRequest& e) {
      send_error(res, 400, e.what());
    } catch (const QueueFull& e) {
      send_error(res, 503, e.what());
    } catch (const std::invalid_argument& e) {
      send_error(res, 400, e.what());
    } catch (const IoError& e) {
      send_error(res, 400, e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

}  // namespace detail

/// Op counts of the reference presets for the given T, lambda and repeats.
inline nlohmann::json strategies_json(int timesteps, int lambda, int repeats) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : reference_strategies()) {
    ResampleConfig c;
    c.strategy = s;
    c.lambda = lambda;
    c.repeats = repeats;
    const auto plan = build_resample_plan(c, timesteps);
    auto entry = count_ops(plan).to_json();
    entry["name"] = s.str();
    entry["jump_points"] = plan.jump_points.size();
    list.push_back(entry);
  }
  return {{"T", timesteps}, {"lambda", lambda}, {"repeats", repeats}, {"strategies", list}};
}

inline nlohmann::json patches_json(int size = 32) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : sample_patches(size)) {
    list.push_back({{"name", p.name},
                    {"width", p.rgb.shape().width},
                    {"height", p.rgb.shape().height},
                    {"image", std::string(detail::kDataUriPrefix) + base64_encode(encode_png(p.rgb, &p.alpha))}});
  }
  return {{"patches", list}};
}

/// Server-side rasterization of a composition, echoing the keep-mask footprint.
inline nlohmann::json rasterize_json(const nlohmann::json& spec_json) {
  const auto r = rasterize(composition_from_json(spec_json));
  const Shape s = r.input.known.shape();
  Mask plane(Shape{1, s.height, s.width}, false);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) plane.set(0, y, x, r.input.mask.keep(0, y, x));
  return {{"width", s.width},
          {"height", s.height},
          {"channels", s.channels},
          {"keep_pixels", plane.count()},
          {"mask_png", std::string(detail::kDataUriPrefix) + base64_encode(encode_mask_png(plane))},
          {"known_png", std::string(detail::kDataUriPrefix) + base64_encode(encode_png(r.input.known))},
          {"warnings", r.warnings}};
}

/// Registers the job API on `server`. `static_dir`, when non-empty, is served at "/".
inline void register_routes(httplib::Server& server, JobService& service, const std::filesystem::path& static_dir = {}) {
  using detail::guarded;
  using detail::send_error;
  using detail::send_json;

  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"ok", true}}); });

  server.Get("/strategies", guarded([](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200,
                         strategies_json(detail::int_param(req, "T", 250), detail::int_param(req, "lambda", 10),
                                         detail::int_param(req, "repeats", 10)));
             }));

  server.Get("/patches", guarded([](const httplib::Request& req, httplib::Response& res) {
               const int size = detail::int_param(req, "size", 32);
               if (size < 4 || size > 256) throw BadRequest("size must be in [4, 256]");
               send_json(res, 200, patches_json(size));
             }));

  server.Post("/rasterize", guarded([](const httplib::Request& req, httplib::Response& res) {
                const auto body = detail::parse_body(req);
                send_json(res, 200, rasterize_json(body.contains("spec") ? body.at("spec") : body));
              }));

  server.Post("/jobs", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                const std::string id = service.submit(detail::parse_body(req));
                const auto record = service.get(id);
                send_json(res, 201, {{"id", id}, {"ops_total", record ? record->ops_total : 0}, {"url", "/jobs/" + id}});
              }));

  server.Get("/jobs", guarded([&service](const httplib::Request&, httplib::Response& res) {
               nlohmann::json list = nlohmann::json::array();
               for (const auto& r : service.list())
                 list.push_back({{"id", r.id}, {"state", to_string(r.state)}, {"progress", r.progress},
                                 {"created_at", r.created_at}});
               send_json(res, 200, {{"jobs", list}});
             }));

  server.Get(R"(/jobs/([0-9a-z_-]+))", guarded([&service](const httplib::Request& req, httplib::Response& res) {
               const auto r = service.get(req.matches[1]);
               if (!r) return send_error(res, 404, "unknown job id");
               send_json(res, 200, detail::job_json(*r));
             }));

  server.Get(R"(/jobs/([0-9a-z_-]+)/result\.png)", guarded([&service](const httplib::Request& req, httplib::Response& res) {
               const auto r = service.get(req.matches[1]);
               if (!r) return send_error(res, 404, "unknown job id");
               if (r->state != JobState::done) return send_error(res, 409, "job is " + to_string(r->state));
               const auto png = service.result_png(r->id);
               if (!png) return send_error(res, 500, "result blob missing from store");
               detail::send_png(res, *png);
             }));

  server.Get(R"(/jobs/([0-9a-z_-]+)/snapshots/(\d+)\.png)",
             guarded([&service](const httplib::Request& req, httplib::Response& res) {
               const auto r = service.get(req.matches[1]);
               if (!r) return send_error(res, 404, "unknown job id");
               const auto k = std::stoull(req.matches[2]);
               const auto png = service.snapshot_png(r->id, k);
               if (!png) return send_error(res, 404, "no snapshot " + std::to_string(k));
               detail::send_png(res, *png);
             }));

  server.Post(R"(/jobs/([0-9a-z_-]+)/cancel)", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                const std::string id = req.matches[1];
                switch (service.cancel(id)) {
                  case CancelOutcome::not_found: return send_error(res, 404, "unknown job id");
                  case CancelOutcome::terminal: return send_error(res, 409, "job already finished");
                  case CancelOutcome::cancelled: return send_json(res, 200, detail::job_json(*service.get(id)));
                  case CancelOutcome::stopping: return send_json(res, 202, detail::job_json(*service.get(id)));
                }
              }));

  if (!static_dir.empty()) server.set_mount_point("/", static_dir.string());
}

}  // namespace ipainter
