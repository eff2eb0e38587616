#include <gtest/gtest.h>

#include <chrono>
#include <thread>

#include "ipainter/http.hpp"
#include "ipainter/job.hpp"
#include "ipainter/job_store.hpp"
#include "ipainter/service.hpp"
#include "test_support.hpp"

using namespace ipainter;
using namespace std::chrono_literals;

namespace {

std::string patch_uri(int size, double value) {
  return std::string(detail::kDataUriPrefix) + base64_encode(encode_png(Tensor(Shape{3, size, size}, value)));
}

nlohmann::json small_spec(int w = 12, int h = 10) {
  return {{"canvas", {{"w", w}, {"h", h}}},
          {"placements", {{{"image", patch_uri(4, 0.5)}, {"x", 2}, {"y", 3}, {"z", 0}}}}};
}

nlohmann::json job_body(nlohmann::json config) { return {{"spec", small_spec()}, {"config", std::move(config)}}; }

nlohmann::json quick_config(std::uint64_t seed = 5) {
  return {{"timesteps", 40}, {"strategy", "stop:10"}, {"lambda", 5}, {"repeats", 3}, {"seed", seed}};
}

nlohmann::json slow_config() {
  return {{"timesteps", 250}, {"strategy", "all"}, {"lambda", 10}, {"repeats", 10}, {"seed", 1}, {"snapshots", true}};
}

JobService::Options opts(const std::string& name, int workers = 1, std::size_t capacity = 64) {
  JobService::Options o;
  o.store_dir = test::scratch_dir(name);
  o.workers = workers;
  o.queue_capacity = capacity;
  return o;
}

std::vector<std::uint8_t> direct_png(const nlohmann::json& spec, const nlohmann::json& config) {
  DenoiserCache cache;
  const JobConfig c = JobConfig::from_json(config);
  auto raster = rasterize(composition_from_json(spec));
  const auto job = prepare_job(std::move(raster.input), raster.warnings, c, cache);
  return run_paint_job(job, c).png;
}

}  // namespace

TEST(JobConfig, JsonRoundTrip) {
  JobConfig c;
  c.resample.strategy = Strategy::start_at(150);
  c.resample.lambda = 7;
  c.seed = 123456789012345ull;
  c.denoiser = "gmm:standard";
  c.variance = VarianceMode::fixed_beta;
  c.clip_x0 = false;
  c.known_noise_index = KnownNoiseIndex::t;
  c.snapshot_every = -1;
  const auto back = JobConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_THROW(JobConfig::from_json({{"strategy", "sometimes"}}), std::invalid_argument);
  EXPECT_THROW(JobConfig::from_json({{"known_noise_index", "t+1"}}), std::invalid_argument);
  EXPECT_EQ(JobConfig::from_json({{"snapshots", false}}).snapshot_every, 0);
}

TEST(JobStore, RecordRoundTripAndBlobs) {
  JobStore store(test::scratch_dir("store"));
  JobRecord r;
  r.id = "abc123";
  r.state = JobState::done;
  r.progress = 1.0;
  r.ops_done = r.ops_total = 1636;
  r.spec = small_spec();
  r.config = JobConfig{}.to_json();
  const std::vector<std::uint8_t> bytes{1, 2, 3, 4};
  r.result_blob = store.put_blob(bytes);
  EXPECT_EQ(store.put_blob(bytes), *r.result_blob);
  r.report = {{"n_total", 1636}};
  r.manifest = {{"seed", 1}};
  r.snapshots = {{40, 200, *r.result_blob}, {80, 150, *r.result_blob}};
  r.error = "none";
  r.created_at = utc_now();
  r.started_at = r.created_at;
  r.finished_at = r.created_at;
  store.save(r);
  const auto back = store.load("abc123");
  ASSERT_TRUE(back.has_value());
  EXPECT_EQ(back->to_json(), r.to_json());
  EXPECT_EQ(*store.get_blob(*r.result_blob), bytes);
  EXPECT_FALSE(store.load("nope").has_value());
  EXPECT_FALSE(store.load("../etc").has_value());
  EXPECT_FALSE(store.get_blob("zz").has_value());
  EXPECT_EQ(store.load_all().size(), 1u);
}

TEST(Service, RunsJobToCompletionMatchingDirectRun) {
  JobService service(opts("svc_run"));
  const auto body = job_body(quick_config());
  const std::string id = service.submit(body);
  std::vector<double> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto r = service.get(id);
    seen.push_back(r->progress);
    if (is_terminal(r->state)) break;
    std::this_thread::sleep_for(1ms);
  }
  const auto done = service.wait(id, 60s);
  ASSERT_TRUE(done.has_value());
  ASSERT_EQ(done->state, JobState::done) << done->error;
  EXPECT_EQ(done->progress, 1.0);
  EXPECT_TRUE(std::is_sorted(seen.begin(), seen.end()));
  EXPECT_EQ(done->report["n_total"], done->ops_total);
  EXPECT_EQ(*service.result_png(id), direct_png(small_spec(), quick_config()));
  EXPECT_EQ(done->manifest["seed"], 5);
  EXPECT_EQ(service.cancel(id), CancelOutcome::terminal);
  EXPECT_EQ(service.cancel("missing"), CancelOutcome::not_found);
}

TEST(Service, SeedDefaultsFromId) {
  JobService service(opts("svc_seed"));
  auto config = quick_config();
  config.erase("seed");
  const std::string id = service.submit(job_body(config));
  const auto r = service.wait(id, 60s);
  ASSERT_TRUE(r.has_value());
  EXPECT_EQ(r->config["seed"].get<std::uint64_t>(), seed_from_id(id));
}

TEST(Service, RejectsBadRequests) {
  JobService service(opts("svc_bad"));
  EXPECT_THROW(service.submit(nlohmann::json::array()), BadRequest);
  EXPECT_THROW(service.submit({{"canvas", {{"w", 0}, {"h", 4}}}}), BadRequest);
  EXPECT_THROW(service.submit(job_body({{"strategy", "bogus"}})), BadRequest);
  EXPECT_THROW(service.submit(job_body({{"lambda", 500}})), BadRequest);
  EXPECT_THROW(service.submit(job_body({{"denoiser", "/no/such/weights"}})), BadRequest);
  nlohmann::json path_spec = {{"canvas", {{"w", 8}, {"h", 8}}},
                              {"placements", {{{"image", "/etc/passwd"}, {"x", 0}, {"y", 0}}}}};
  EXPECT_THROW(service.submit(path_spec), BadRequest);
}

TEST(Service, CancelKeepsPartialSnapshots) {
  JobService service(opts("svc_cancel"));
  nlohmann::json body = {{"spec", small_spec(32, 32)}, {"config", slow_config()}};
  const std::string id = service.submit(body);
  for (int i = 0; i < 20000; ++i) {
    const auto r = service.get(id);
    if (r->snapshots.size() >= 2) break;
    std::this_thread::sleep_for(1ms);
  }
  EXPECT_EQ(service.cancel(id), CancelOutcome::stopping);
  const auto r = service.wait(id, 60s);
  ASSERT_TRUE(r.has_value());
  EXPECT_EQ(r->state, JobState::cancelled);
  EXPECT_GE(r->snapshots.size(), 2u);
  EXPECT_LT(r->progress, 1.0);
  EXPECT_TRUE(service.snapshot_png(id, 0).has_value());
  EXPECT_FALSE(service.result_png(id).has_value());
  EXPECT_EQ(service.cancel(id), CancelOutcome::terminal);
}

TEST(Service, QueueFullAndQueuedCancel) {
  JobService service(opts("svc_full", 1, 1));
  nlohmann::json body = {{"spec", small_spec(32, 32)}, {"config", slow_config()}};
  const std::string a = service.submit(body);
  for (int i = 0; i < 5000 && service.get(a)->state == JobState::queued; ++i) std::this_thread::sleep_for(1ms);
  const std::string b = service.submit(body);
  EXPECT_THROW(service.submit(body), QueueFull);
  EXPECT_EQ(service.cancel(b), CancelOutcome::cancelled);
  EXPECT_EQ(service.get(b)->state, JobState::cancelled);
  service.cancel(a);
  EXPECT_TRUE(service.wait(a, 60s).has_value());
}

TEST(Service, RestartRecovery) {
  const auto dir = test::scratch_dir("svc_restart");
  {
    JobStore store(dir);
    JobRecord running;
    running.id = "aaaa";
    running.state = JobState::running;
    running.spec = small_spec();
    running.config = JobConfig::from_json(quick_config()).to_json();
    running.created_at = "2026-01-01T00:00:00.000Z";
    store.save(running);
    JobRecord queued = running;
    queued.id = "bbbb";
    queued.state = JobState::queued;
    queued.created_at = "2026-01-01T00:00:01.000Z";
    store.save(queued);
  }
  JobService::Options o;
  o.store_dir = dir;
  o.workers = 1;
  JobService service(o);
  const auto a = service.get("aaaa");
  ASSERT_TRUE(a.has_value());
  EXPECT_EQ(a->state, JobState::failed);
  EXPECT_EQ(a->error, "interrupted by restart");
  const auto b = service.wait("bbbb", 60s);
  ASSERT_TRUE(b.has_value());
  EXPECT_EQ(b->state, JobState::done);
  EXPECT_EQ(*service.result_png("bbbb"), direct_png(small_spec(), quick_config()));
}

class HttpApi : public ::testing::Test {
 protected:
  void SetUp() override {
    service_ = std::make_unique<JobService>(opts("http"));
    register_routes(server_, *service_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
    service_.reset();
  }
  httplib::Client client() { return httplib::Client("127.0.0.1", port_); }

  std::unique_ptr<JobService> service_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

TEST_F(HttpApi, Strategies) {
  auto res = client().Get("/strategies");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto j = nlohmann::json::parse(res->body);
  bool found = false;
  for (const auto& s : j["strategies"])
    if (s["name"] == "stop:100") found = s["n_total"] == 1636;
  EXPECT_TRUE(found);
  EXPECT_EQ(client().Get("/strategies?lambda=x")->status, 400);
}

TEST_F(HttpApi, PatchesAndRasterize) {
  auto res = client().Get("/patches");
  ASSERT_TRUE(res);
  const auto patches = nlohmann::json::parse(res->body)["patches"];
  EXPECT_EQ(patches.size(), 5u);

  // 8x8 fixture: opaque 3x2 patch at (1, 2) and a 2x2 patch at (6, 6) partly off-canvas.
  const nlohmann::json spec = {
      {"canvas", {{"w", 8}, {"h", 8}}},
      {"placements",
       {{{"image", std::string(detail::kDataUriPrefix) + base64_encode(encode_png(Tensor(Shape{3, 2, 3}, 0.2)))},
         {"x", 1}, {"y", 2}},
        {{"image", patch_uri(3, -0.4)}, {"x", 6}, {"y", 6}}}}};
  res = client().Post("/rasterize", spec.dump(), "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const auto j = nlohmann::json::parse(res->body);
  EXPECT_EQ(j["keep_pixels"], 6 + 4);
  const std::string uri = j["mask_png"];
  const auto mask = decode_png(base64_decode(uri.substr(detail::kDataUriPrefix.size())), "mask");
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const bool keep = (x >= 1 && x < 4 && y >= 2 && y < 4) || (x >= 6 && y >= 6);
      EXPECT_EQ(mask.pixels.at(0, y, x) > 0, keep) << x << "," << y;
    }
  EXPECT_EQ(client().Post("/rasterize", "{oops", "application/json")->status, 400);
}

TEST_F(HttpApi, JobLifecycle) {
  auto cli = client();
  auto res = cli.Post("/jobs", job_body(quick_config(9)).dump(), "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 201) << res->body;
  const std::string id = nlohmann::json::parse(res->body)["id"];

  double last = 0.0;
  std::string state;
  for (int i = 0; i < 5000; ++i) {
    const auto r = cli.Get("/jobs/" + id);
    ASSERT_EQ(r->status, 200);
    const auto j = nlohmann::json::parse(r->body);
    EXPECT_GE(j["progress"].get<double>(), last);
    last = j["progress"];
    state = j["state"];
    if (state == "done" || state == "failed") break;
    std::this_thread::sleep_for(2ms);
  }
  ASSERT_EQ(state, "done");
  EXPECT_EQ(last, 1.0);
  const auto png = cli.Get("/jobs/" + id + "/result.png");
  ASSERT_EQ(png->status, 200);
  EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
  const auto expected = direct_png(small_spec(), quick_config(9));
  EXPECT_EQ(png->body, std::string(expected.begin(), expected.end()));

  EXPECT_EQ(cli.Post("/jobs/" + id + "/cancel")->status, 409);
  EXPECT_EQ(cli.Get("/jobs/unknown")->status, 404);
  EXPECT_EQ(cli.Post("/jobs/unknown/cancel")->status, 404);
  EXPECT_EQ(cli.Get("/jobs/" + id + "/snapshots/0.png")->status, 404);
  EXPECT_EQ(cli.Post("/jobs", "not json", "application/json")->status, 400);
  const auto list = nlohmann::json::parse(cli.Get("/jobs")->body);
  EXPECT_EQ(list["jobs"].size(), 1u);
}

TEST_F(HttpApi, SnapshotsAndCancel) {
  auto cli = client();
  nlohmann::json body = {{"spec", small_spec(32, 32)}, {"config", slow_config()}};
  auto res = cli.Post("/jobs", body.dump(), "application/json");
  ASSERT_EQ(res->status, 201);
  const std::string id = nlohmann::json::parse(res->body)["id"];
  for (int i = 0; i < 20000; ++i) {
    const auto j = nlohmann::json::parse(cli.Get("/jobs/" + id)->body);
    if (j["snapshots"].size() >= 1) break;
    std::this_thread::sleep_for(1ms);
  }
  const auto snap = cli.Get("/jobs/" + id + "/snapshots/0.png");
  ASSERT_EQ(snap->status, 200);
  EXPECT_EQ(decode_png(std::vector<std::uint8_t>(snap->body.begin(), snap->body.end()), "snap").pixels.shape(),
            (Shape{3, 32, 32}));
  EXPECT_EQ(cli.Get("/jobs/" + id + "/result.png")->status, 409);
  const auto cancel = cli.Post("/jobs/" + id + "/cancel");
  EXPECT_EQ(cancel->status, 202);
  const auto r = service_->wait(id, 60s);
  ASSERT_TRUE(r.has_value());
  EXPECT_EQ(r->state, JobState::cancelled);
}
