#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ipainter/datasets.hpp"
#include "ipainter/http.hpp"
#include "ipainter/job.hpp"
#include "ipainter/patches.hpp"
#include "ipainter/service.hpp"
#include "ipainter/spectral.hpp"
#include "ipainter/toy_denoiser.hpp"

namespace fs = std::filesystem;
using namespace ipainter;

namespace {

// Thrown for argument combinations CLI11 cannot express; maps to exit 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open file");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(path.string() + ": cannot write file");
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

struct PaintArgs {
  std::string spec, image, mask, strategy = "stop:100", denoiser = "gmm:standard", variance = "beta_tilde";
  std::string known_noise_index = "t-1", out, report, manifest, snapshot_dir;
  int lambda = 10, repeats = 10, timesteps = 250, snapshots = 0;
  std::uint64_t seed = 0;
  bool no_clip = false;
};

int run_paint(const PaintArgs& a, const CLI::App& cmd) {
  if (a.spec.empty() == a.image.empty()) throw UsageError("give either --spec or --image with --mask");
  if (!a.image.empty() && a.mask.empty()) throw UsageError("--image needs --mask");

  // A spec document may carry its own "config"; explicit flags override it.
  nlohmann::json config_json = nlohmann::json::object();
  CompositionInput input;
  std::vector<std::string> warnings;
  if (!a.spec.empty()) {
    const auto [spec_json, embedded] = split_job_body(read_json(a.spec));
    if (!embedded.is_object()) throw UsageError(a.spec + ": config must be a JSON object");
    config_json = embedded;
    auto raster = rasterize(composition_from_json(spec_json, fs::path(a.spec).parent_path()));
    input = std::move(raster.input);
    warnings = std::move(raster.warnings);
  } else {
    const auto img = load_image(a.image);
    const auto mask = load_mask(a.mask, std::make_pair(img.pixels.shape().height, img.pixels.shape().width));
    input = composition_from_image(img.pixels, mask);
  }
  auto given = [&](const char* flag) { return cmd.count(flag) > 0; };
  if (given("--strategy") || !config_json.contains("strategy")) config_json["strategy"] = a.strategy;
  if (given("--lambda") || !config_json.contains("lambda")) config_json["lambda"] = a.lambda;
  if (given("--repeats") || !config_json.contains("repeats")) config_json["repeats"] = a.repeats;
  if (given("--seed") || !config_json.contains("seed")) config_json["seed"] = a.seed;
  if (given("--denoiser") || !config_json.contains("denoiser")) config_json["denoiser"] = a.denoiser;
  if (given("--timesteps") || !config_json.contains("timesteps")) config_json["timesteps"] = a.timesteps;
  if (given("--variance") || !config_json.contains("variance")) config_json["variance"] = a.variance;
  if (given("--no-clip") || !config_json.contains("clip_x0")) config_json["clip_x0"] = !a.no_clip;
  if (given("--known-noise-index") || !config_json.contains("known_noise_index"))
    config_json["known_noise_index"] = a.known_noise_index;
  if (given("--snapshots")) {
    config_json.erase("snapshots");
    config_json["snapshot_every"] = a.snapshots;
  }

  JobConfig config;
  try {
    config = JobConfig::from_json(config_json);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  DenoiserCache cache;
  const PreparedJob job = prepare_job(std::move(input), std::move(warnings), config, cache);
  for (const auto& w : job.warnings) std::cerr << "warning: " << w << "\n";

  const fs::path snap_dir = a.snapshot_dir.empty() ? fs::path(fs::path(a.out).replace_extension("").string() + "_snapshots")
                                                   : fs::path(a.snapshot_dir);
  int snap_index = 0;
  auto on_snapshot = [&](const Snapshot& s) {
    fs::create_directories(snap_dir);
    char name[64];
    std::snprintf(name, sizeof name, "snapshot_%03d_t%03d.png", snap_index++, s.timestep);
    save_image(s.image, snap_dir / name);
  };
  const PaintOutput out = run_paint_job(job, config, {}, on_snapshot);

  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  write_file(a.out, out.png);
  if (!a.report.empty()) write_json(a.report, out.report);
  const fs::path manifest = a.manifest.empty() ? fs::path(fs::path(a.out).replace_extension("").string() + ".manifest.json")
                                               : fs::path(a.manifest);
  write_json(manifest, out.manifest);
  std::cout << out.result.ops.n_dn << ", " << out.result.ops.n_fwd << ", " << out.result.ops.n_total << "\n";
  return 0;
}

struct OpcountArgs {
  std::vector<std::string> strategies;
  int timesteps = 250, lambda = 10, repeats = 10;
  bool json = false;
};

int run_opcount(const OpcountArgs& a) {
  ResampleConfig base;
  base.lambda = a.lambda;
  base.repeats = a.repeats;
  std::vector<Strategy> list;
  try {
    for (const auto& s : a.strategies) list.push_back(Strategy::parse(s));
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  const bool single = list.size() == 1;
  if (list.empty()) list = reference_strategies();
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : list) {
    ResampleConfig c = base;
    c.strategy = s;
    OpCountReport r;
    try {
      r = count_ops(build_resample_plan(c, a.timesteps));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (a.json) {
      auto row = r.to_json();
      row["strategy"] = s.str();
      rows.push_back(row);
    } else if (single) {
      std::cout << r.n_dn << ", " << r.n_fwd << ", " << r.n_total << "\n";
    } else {
      std::cout << s.str() << ": " << r.n_dn << ", " << r.n_fwd << ", " << r.n_total << "\n";
    }
  }
  if (a.json) std::cout << nlohmann::json{{"T", a.timesteps}, {"lambda", a.lambda}, {"repeats", a.repeats},
                                          {"strategies", rows}}.dump(2) << "\n";
  return 0;
}

struct SpectralArgs {
  std::string image, csv, crossover_csv, summary;
  int size = 64, bands = 16, timesteps = 250, heat_stride = 10;
  double exponent = 2.0;
  std::uint64_t seed = 0;
  bool heat = false;
};

int run_spectral(const SpectralArgs& a) {
  Tensor img;
  if (!a.image.empty()) {
    img = load_image(a.image).pixels;
  } else {
    if (a.size < 4) throw UsageError("--size must be at least 4");
    GaussianNoiseSource rng(a.seed);
    img = power_law_image(a.size, a.size, a.exponent, rng);
  }
  if (a.bands < 1) throw UsageError("--bands must be positive");
  const auto signal = radial_power_spectrum(img, a.bands);
  const auto noise = expected_noise_spectrum(img.shape(), a.bands);
  const auto profile = corruption_profile(signal, Schedule::linear(a.timesteps), noise);
  if (!a.csv.empty()) write_text(a.csv, profile.to_csv());
  if (!a.crossover_csv.empty()) write_text(a.crossover_csv, profile.crossover_csv());
  if (!a.summary.empty()) write_json(a.summary, profile.summary());
  if (a.heat) std::cout << profile.heat_table(a.heat_stride);
  else std::cout << profile.crossover_csv();
  return 0;
}

struct TrainArgs {
  std::string dataset = "two-shapes", out, loss_csv;
  int size = 16, channels = 1, count = 256, timesteps = 100, epochs = 20, batches = 50, batch_size = 8;
  int hidden = 16, embed_dim = 32;
  double lr = 2e-3, value = 0.3;
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
  const Shape shape{a.channels, a.size, a.size};
  GaussianNoiseSource data_rng(a.seed, 0x64617461);  // "data"
  std::vector<Tensor> data;
  if (a.dataset == "two-shapes") data = datasets::two_shapes(shape, a.count, data_rng);
  else if (a.dataset == "two-gaussians") data = datasets::two_gaussians(shape, a.count, data_rng);
  else if (a.dataset == "constant") data = datasets::constant(shape, a.value, a.count);
  else throw UsageError("unknown dataset: " + a.dataset);

  TrainConfig tc;
  tc.architecture.hidden = a.hidden;
  tc.architecture.embed_dim = a.embed_dim;
  tc.epochs = a.epochs;
  tc.batches_per_epoch = a.batches;
  tc.batch_size = a.batch_size;
  tc.learning_rate = a.lr;
  tc.seed = a.seed;
  const auto result = train_toy_denoiser(data, Schedule::linear(a.timesteps), tc);
  result.denoiser->save(a.out);
  std::ostringstream csv;
  csv << "epoch,loss\n";
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) csv << e << "," << result.epoch_loss[e] << "\n";
  if (!a.loss_csv.empty()) write_text(a.loss_csv, csv.str());
  std::cout << csv.str();
  return 0;
}

struct SampleArgs {
  std::string denoiser = "gmm:standard", variance = "beta_tilde", out_dir, csv;
  int n = 1, timesteps = 250, channels = 3, height = 32, width = 32;
  std::uint64_t seed = 0;
  bool no_clip = false;
};

int run_sample(const SampleArgs& a) {
  if (a.out_dir.empty() && a.csv.empty()) throw UsageError("give --out-dir and/or --csv");
  const auto loaded = load_denoiser(a.denoiser, a.timesteps, parse_variance_mode(a.variance));
  const Shape shape = loaded.denoiser->native_shape().value_or(Shape{a.channels, a.height, a.width});
  SamplerOptions opts;
  opts.clip_x0 = !a.no_clip;
  const auto samples = unconditional_sample(*loaded.denoiser, loaded.schedule, GaussianNoiseSource(a.seed), a.n, shape, opts);
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sample_%04zu.png", i);
      save_image(samples[i], fs::path(a.out_dir) / name);
    }
  }
  if (!a.csv.empty()) {
    std::ostringstream csv;
    csv.precision(17);
    for (const auto& s : samples) {
      for (std::size_t k = 0; k < s.size(); ++k) csv << (k ? "," : "") << s[k];
      csv << "\n";
    }
    write_text(a.csv, csv.str());
  }
  return 0;
}

int run_patches(const std::string& out_dir, int size) {
  if (size < 4) throw UsageError("--size must be at least 4");
  fs::create_directories(out_dir);
  for (const auto& p : sample_patches(size)) {
    write_file(fs::path(out_dir) / (p.name + ".png"), encode_png(p.rgb, &p.alpha));
    std::cout << (fs::path(out_dir) / (p.name + ".png")).string() << "\n";
  }
  return 0;
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

struct ServeArgs {
  std::string listen, store, static_dir;
  int workers = default_worker_count();
  std::size_t queue = 64;
  bool allow_file_paths = false;
};

int run_serve(ServeArgs a) {
  if (a.listen.empty()) a.listen = env_or("IPAINTER_LISTEN", "127.0.0.1:8080");
  if (a.store.empty()) a.store = env_or("IPAINTER_STORE", "ipainter-store");
  const auto colon = a.listen.rfind(':');
  if (colon == std::string::npos) throw UsageError("listen address must be host:port");
  const std::string host = a.listen.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(a.listen.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("bad port in listen address: " + a.listen);
  }

  // Block termination signals before any thread starts; one thread waits for them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  JobService::Options opts;
  opts.store_dir = a.store;
  opts.workers = a.workers;
  opts.queue_capacity = a.queue;
  opts.allow_file_paths = a.allow_file_paths;
  JobService service(opts);
  httplib::Server server;
  register_routes(server, service, a.static_dir);

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "shutting down\n";
    server.stop();
  });
  waiter.detach();
  std::cerr << "listening on " << host << ":" << port << ", store " << a.store << ", " << a.workers << " workers\n";
  if (!server.listen(host, port)) {
    std::cerr << "error: cannot listen on " << a.listen << "\n";
    return 2;
  }
  service.shutdown();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion inpainting for patch compositions."};
  app.require_subcommand(1);

  PaintArgs paint;
  auto* paint_cmd = app.add_subcommand("paint", "Fill the unknown region of a composition");
  paint_cmd->add_option("--spec", paint.spec, "composition JSON")->check(CLI::ExistingFile);
  paint_cmd->add_option("--image", paint.image, "full-canvas PNG")->check(CLI::ExistingFile);
  paint_cmd->add_option("--mask", paint.mask, "keep-mask PNG, white = keep")->check(CLI::ExistingFile);
  paint_cmd->add_option("--strategy", paint.strategy, "none | all | start:<t> | stop:<t>")->capture_default_str();
  paint_cmd->add_option("--lambda", paint.lambda, "jump length")->capture_default_str();
  paint_cmd->add_option("--repeats", paint.repeats, "visits per jump point")->capture_default_str();
  paint_cmd->add_option("--seed", paint.seed)->capture_default_str();
  paint_cmd->add_option("--denoiser", paint.denoiser, "toy weights file or gmm:standard | gmm:<json>")
      ->capture_default_str();
  paint_cmd->add_option("--timesteps", paint.timesteps, "T for GMM denoisers")->capture_default_str();
  paint_cmd->add_option("--variance", paint.variance, "beta | beta_tilde")->capture_default_str();
  paint_cmd->add_flag("--no-clip", paint.no_clip, "do not clamp the predicted x0 to [-1, 1]");
  paint_cmd->add_option("--known-noise-index", paint.known_noise_index, "t-1 | t")->capture_default_str();
  paint_cmd->add_option("--out", paint.out, "output PNG")->required();
  paint_cmd->add_option("--report", paint.report, "op-count report JSON");
  paint_cmd->add_option("--manifest", paint.manifest, "run manifest JSON (default <out>.manifest.json)");
  paint_cmd->add_option("--snapshots", paint.snapshots, "snapshot every k denoise ops; -1 = n_dn/40, 0 = off");
  paint_cmd->add_option("--snapshot-dir", paint.snapshot_dir, "default <out>_snapshots");

  OpcountArgs opcount;
  auto* opcount_cmd = app.add_subcommand("opcount", "Print n_dn, n_fwd, n_total for resampling strategies");
  opcount_cmd->add_option("--strategy", opcount.strategies, "repeatable; default: the four presets");
  opcount_cmd->add_option("--timesteps", opcount.timesteps)->capture_default_str();
  opcount_cmd->add_option("--lambda", opcount.lambda)->capture_default_str();
  opcount_cmd->add_option("--repeats", opcount.repeats)->capture_default_str();
  opcount_cmd->add_flag("--json", opcount.json);

  SpectralArgs spectral;
  auto* spectral_cmd = app.add_subcommand("spectral", "Per-band SNR of the forward process");
  spectral_cmd->add_option("--image", spectral.image, "PNG to analyse (default: generated power-law image)")
      ->check(CLI::ExistingFile);
  spectral_cmd->add_option("--size", spectral.size, "generated image size")->capture_default_str();
  spectral_cmd->add_option("--exponent", spectral.exponent, "generated spectrum ~ 1/f^exponent")->capture_default_str();
  spectral_cmd->add_option("--seed", spectral.seed)->capture_default_str();
  spectral_cmd->add_option("--bands", spectral.bands)->capture_default_str();
  spectral_cmd->add_option("--timesteps", spectral.timesteps)->capture_default_str();
  spectral_cmd->add_option("--csv", spectral.csv, "band,t,snr CSV");
  spectral_cmd->add_option("--crossover-csv", spectral.crossover_csv);
  spectral_cmd->add_option("--summary", spectral.summary, "JSON summary");
  spectral_cmd->add_flag("--heat", spectral.heat, "print a heat table instead of the crossover CSV");
  spectral_cmd->add_option("--heat-stride", spectral.heat_stride)->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train the toy conv denoiser on a synthetic dataset");
  train_cmd->add_option("--dataset", train.dataset)
      ->check(CLI::IsMember({"two-shapes", "two-gaussians", "constant"}))
      ->capture_default_str();
  train_cmd->add_option("--size", train.size)->capture_default_str();
  train_cmd->add_option("--channels", train.channels)->capture_default_str();
  train_cmd->add_option("--count", train.count, "dataset size")->capture_default_str();
  train_cmd->add_option("--value", train.value, "pixel value of the constant dataset")->capture_default_str();
  train_cmd->add_option("--timesteps", train.timesteps)->capture_default_str();
  train_cmd->add_option("--epochs", train.epochs)->capture_default_str();
  train_cmd->add_option("--batches", train.batches, "minibatches per epoch")->capture_default_str();
  train_cmd->add_option("--batch-size", train.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", train.lr)->capture_default_str();
  train_cmd->add_option("--hidden", train.hidden)->capture_default_str();
  train_cmd->add_option("--embed-dim", train.embed_dim)->capture_default_str();
  train_cmd->add_option("--seed", train.seed)->capture_default_str();
  train_cmd->add_option("--out", train.out, "weights file")->required();
  train_cmd->add_option("--loss-csv", train.loss_csv);

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "Draw unconditional samples");
  sample_cmd->add_option("--denoiser", sample.denoiser)->capture_default_str();
  sample_cmd->add_option("--timesteps", sample.timesteps, "T for GMM denoisers")->capture_default_str();
  sample_cmd->add_option("--variance", sample.variance)->capture_default_str();
  sample_cmd->add_flag("--no-clip", sample.no_clip);
  sample_cmd->add_option("-n,--count", sample.n)->capture_default_str();
  sample_cmd->add_option("--seed", sample.seed)->capture_default_str();
  sample_cmd->add_option("--channels", sample.channels, "shape for GMM denoisers")->capture_default_str();
  sample_cmd->add_option("--height", sample.height)->capture_default_str();
  sample_cmd->add_option("--width", sample.width)->capture_default_str();
  sample_cmd->add_option("--out-dir", sample.out_dir, "write sample_NNNN.png here");
  sample_cmd->add_option("--csv", sample.csv, "one flattened sample per row");

  std::string patches_dir;
  int patches_size = 32;
  auto* patches_cmd = app.add_subcommand("patches", "Write the bundled landmark patches");
  patches_cmd->add_option("--out-dir", patches_dir)->required();
  patches_cmd->add_option("--size", patches_size)->capture_default_str();

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP job service");
  serve_cmd->add_option("--listen", serve.listen, "host:port (env IPAINTER_LISTEN, default 127.0.0.1:8080)");
  serve_cmd->add_option("--store", serve.store, "job store directory (env IPAINTER_STORE, default ipainter-store)");
  serve_cmd->add_option("--workers", serve.workers)->check(CLI::PositiveNumber)->capture_default_str();
  serve_cmd->add_option("--queue", serve.queue, "queue capacity")->capture_default_str();
  serve_cmd->add_option("--static", serve.static_dir, "directory served at /")->check(CLI::ExistingDirectory);
  serve_cmd->add_flag("--allow-file-paths", serve.allow_file_paths, "accept server-side patch paths in specs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == paint_cmd) return run_paint(paint, *paint_cmd);
    if (active == opcount_cmd) return run_opcount(opcount);
    if (active == spectral_cmd) return run_spectral(spectral);
    if (active == train_cmd) return run_train(train);
    if (active == sample_cmd) return run_sample(sample);
    if (active == patches_cmd) return run_patches(patches_dir, patches_size);
    if (active == serve_cmd) return run_serve(serve);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active->help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
