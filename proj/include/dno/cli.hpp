#pragma once

// Command-line front end. run_command parses one subcommand, writes the
// resolved options to <out>/config.json before computing anything, and maps
// failures onto exit codes: 2 usage, 3 I/O or file format, 4 numerical.
//
// Any subcommand accepts --config <config.json>: the recorded options are
// replayed first and explicit flags override them.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "dno/apps.hpp"
#include "dno/gradcheck.hpp"
#include "dno/mbin.hpp"
#include "dno/metrics.hpp"
#include "dno/plots.hpp"
#include "dno/task.hpp"

namespace dno::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kNumerical = 4 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;
using nlohmann::json;

namespace detail {

/// Every registered option, kept so resolved values can be serialized.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {
    app_->add_option("--config", replay_, "Replay the options recorded in a config.json");
  }

  template <class V>
  CLI::Option* add(const std::string& name, V& var, const std::string& desc) {
    values_.emplace_back(name, [&var] { return json(var); });
    return app_->add_option("--" + name, var, desc)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    values_.emplace_back(name, [&var] { return json(var); });
    return app_->add_flag("--" + name, var, desc);
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [name, get] : values_) j[name] = get();
    return j;
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::string replay_;
  std::vector<std::pair<std::string, std::function<json()>>> values_;
};

/// Replaces `--config <file>` with the recorded options, placed before the
/// explicit arguments so those take precedence.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  if (args.empty()) return args;
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config requires a path");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty()) return args;
  const auto bytes = io::read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Code::Malformed, path + ": " + e.what());
  }
  if (!j.contains("command") || !j.contains("options") || !j.at("options").is_object())
    throw FormatError(FormatError::Code::Malformed, path + ": not a run configuration");
  if (j.at("command") != args[0])
    throw UsageError(path + " records command \"" + j.at("command").get<std::string>() + "\", not \"" + args[0] + "\"");
  std::vector<std::string> out{args[0]};
  for (const auto& [key, value] : j.at("options").items()) {
    if (value.is_boolean()) {
      out.push_back("--" + key + "=" + (value.get<bool>() ? "true" : "false"));
    } else {
      out.push_back("--" + key);
      out.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

inline fs::path make_dir(const std::string& dir) {
  if (dir.empty()) throw UsageError("an output directory is required (--out)");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  return fs::path(dir);
}

inline void write_json(const fs::path& path, const json& j) { io::write_text_atomic(path, j.dump(2) + "\n"); }

struct Run {
  std::string command;
  std::vector<std::string> argv;
  const Options* options = nullptr;
  std::ostream* out = nullptr;
};

/// Creates the output directory and writes config.json.
inline fs::path begin(const Run& run, const std::string& dir, const json& resolved = json::object()) {
  const fs::path d = make_dir(dir);
  json j;
  j["command"] = run.command;
  j["argv"] = run.argv;
  j["options"] = run.options->to_json();
  j["resolved"] = resolved;
  write_json(d / "config.json", j);
  return d;
}

inline std::vector<Motion> load_motions(const std::string& path, const std::string& flag) {
  if (path.empty()) throw UsageError("missing required input --" + flag);
  auto f = load_mbin(path);
  if (f.motions.empty()) throw UsageError(path + ": file holds no motions");
  return std::move(f.motions);
}

inline std::vector<Motion> select(const std::vector<Motion>& all, std::size_t first, std::size_t count,
                                  const std::string& what) {
  if (first >= all.size())
    throw UsageError(what + ": --first " + std::to_string(first) + " but the file holds " + std::to_string(all.size()) +
                     " motions");
  const std::size_t n = count == 0 ? all.size() - first : count;
  if (first + n > all.size())
    throw UsageError(what + ": requested " + std::to_string(n) + " motions from index " + std::to_string(first) +
                     " but the file holds " + std::to_string(all.size()));
  return {all.begin() + static_cast<std::ptrdiff_t>(first), all.begin() + static_cast<std::ptrdiff_t>(first + n)};
}

inline Denoiser load_model(const std::string& path) {
  if (path.empty()) throw UsageError("missing required input --model");
  return load_params(path);
}

inline void check_frames(const std::vector<Motion>& motions, const Denoiser& model, const std::string& what) {
  for (const auto& m : motions)
    if (m.frames != model.config.frames)
      throw UsageError(what + ": motions have " + std::to_string(m.frames) + " frames, the model expects " +
                       std::to_string(model.config.frames));
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

template <class F>
std::vector<double> per_motion(const std::vector<Motion>& ms, F f) {
  std::vector<double> out;
  out.reserve(ms.size());
  for (const auto& m : ms) out.push_back(f(m));
  return out;
}

/// Optimizer flags shared by every optimizing subcommand.
struct DnoFlags {
  std::size_t steps = 300;
  std::size_t ddim_steps = 10;
  double lr = 0.05;
  std::size_t warmup = 50;
  double gamma = 0.0;
  std::size_t batch = 16;
  double grad_floor = 1e-12;
  bool normalize = true;
  bool checkpoint = false;
  std::string decorr_mode = "squared";

  void add(Options& o) {
    o.add("steps", steps, "Optimization steps N");
    o.add("ddim-steps", ddim_steps, "DDIM steps K of the decoder");
    o.add("lr", lr, "Peak learning rate");
    o.add("warmup", warmup, "Linear warmup steps");
    o.add("gamma", gamma, "Latent perturbation scale");
    o.add("batch", batch, "Candidates decoded together");
    o.add("grad-floor", grad_floor, "Gradient norms below this skip the step");
    o.add("normalize", normalize, "Normalize gradients to unit norm");
    o.flag("checkpoint", checkpoint, "Recompute each DDIM step during the backward pass");
    o.add("decorr-mode", decorr_mode, "Latent decorrelation penalty: squared or linear")
        ->check(CLI::IsMember({"squared", "linear"}));
  }

  DnoConfig config(std::uint64_t seed, const LossWeights& w) const {
    DnoConfig c;
    c.steps = steps;
    c.ddim_steps = ddim_steps;
    c.lr = lr;
    c.warmup = warmup;
    c.gamma = gamma;
    c.batch = batch;
    c.grad_floor = grad_floor;
    c.normalize_grad = normalize;
    c.checkpoint = checkpoint;
    c.decorr_mode = decorr_mode == "linear" ? DecorrMode::Linear : DecorrMode::Squared;
    c.weights = w;
    c.seed = seed;
    c.threads = threads_from_env(1);
    c.validate();
    return c;
  }
};

inline json config_json(const DnoConfig& c) {
  return {{"lr", c.lr},
          {"warmup", c.warmup},
          {"steps", c.steps},
          {"gamma", c.gamma},
          {"ddim_steps", c.ddim_steps},
          {"batch", c.batch},
          {"grad_floor", c.grad_floor},
          {"normalize_grad", c.normalize_grad},
          {"checkpoint", c.checkpoint},
          {"decorr_mode", decorr_mode_name(c.decorr_mode)},
          {"weights", {{"obs", c.weights.obs}, {"cont", c.weights.cont}, {"decorr", c.weights.decorr}}},
          {"seed", c.seed},
          {"threads", c.threads}};
}

/// Optimization engine: DNO or loss-guided sampling.
struct EngineFlags {
  std::string engine = "dno";
  double scale = 0.0;
  std::size_t steps = 10;
  std::size_t iters = 1;

  void add(Options& o) {
    o.add("engine", engine, "dno or guided")->check(CLI::IsMember({"dno", "guided"}));
    o.add("guidance-scale", scale, "Guided engine: step scale s");
    o.add("guidance-steps", steps, "Guided engine: DDIM steps");
    o.add("guidance-iters", iters, "Guided engine: guidance updates per step");
  }
  bool guided() const { return engine == "guided"; }
  GuidedOptions options() const {
    if (scale < 0.0) throw UsageError("--guidance-scale must be non-negative");
    if (iters < 1) throw UsageError("--guidance-iters must be at least 1");
    return {steps, scale, iters};
  }
  json to_json() const {
    json j{{"engine", engine}};
    if (guided()) j.update({{"scale", scale}, {"steps", steps}, {"iters", iters}, {"evaluations", guided_evaluations(options())}});
    return j;
  }
};

/// One optimized (or guided) motion per slot, in slot order.
struct Outcome {
  std::vector<Motion> motions;
  std::vector<DnoResult> results;  // slot order; empty for the guided engine
};

inline Outcome optimize(const EngineFlags& engine, const DnoConfig& c, const Denoiser& model,
                        const NoiseSchedule& sched, const std::vector<std::vector<double>>& init,
                        const Criterion& criterion, const GuidanceCriterion& guidance) {
  Outcome o;
  if (engine.guided()) {
    o.motions = apps::guided(init, model, sched, guidance, engine.options(), kDefaultFps);
    return o;
  }
  auto sorted = run(c, model, sched, init, criterion);
  o.results.resize(sorted.size());
  for (auto& r : sorted) {
    const std::size_t i = r.index;
    o.results[i] = std::move(r);
  }
  for (const auto& r : o.results) {
    if (r.aborted) throw NumericalError("candidate " + std::to_string(r.index) + " aborted: " + r.abort_reason);
    o.motions.push_back(r.motion);
  }
  return o;
}

/// trace.csv: one row per (group, slot, step).
inline void write_trace(const fs::path& path, const std::vector<std::pair<std::size_t, const DnoResult*>>& rows) {
  std::ostringstream s;
  s << std::setprecision(17);
  std::vector<std::string> names;
  for (const auto& [g, r] : rows)
    for (const auto& t : r->trace)
      for (const auto& [n, v] : t.components)
        if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  s << "group,candidate,step,total";
  for (const auto& n : names) s << ',' << n;
  s << ",grad_norm,lr,skipped\n";
  for (const auto& [g, r] : rows)
    for (const auto& t : r->trace) {
      s << g << ',' << r->index << ',' << t.step << ',' << t.total;
      for (const auto& n : names) {
        s << ',';
        for (const auto& [cn, v] : t.components)
          if (cn == n) s << v;
      }
      s << ',' << t.grad_norm << ',' << t.lr << ',' << (t.skipped ? 1 : 0) << '\n';
    }
  io::write_text_atomic(path, s.str());
}

inline void write_plots(const fs::path& dir, const std::string& stem, const std::vector<Motion>& ms,
                        const SdfScene* scene = nullptr, const std::vector<ObservedSet>* targets = nullptr) {
  const fs::path plots = make_dir((dir / "plots").string());
  for (std::size_t i = 0; i < ms.size(); ++i) {
    std::ostringstream name;
    name << stem << '_' << std::setw(3) << std::setfill('0') << i;
    const ObservedSet* t = targets && !targets->empty() ? &(*targets)[targets->size() == 1 ? 0 : i] : nullptr;
    export_plots(ms[i], plots / name.str(), scene, t);
  }
}

inline json targets_json(const ObservedSet& o) { return task_to_json(Task{o, {}, {}})["targets"]; }

/// Result metadata mapping output i to input motion first + i.
inline json input_items(std::size_t first, std::size_t count) {
  json items = json::array();
  for (std::size_t i = 0; i < count; ++i) items.push_back({{"input", first + i}});
  return items;
}

inline json summary_of(const std::vector<Motion>& ms) {
  return {{"count", ms.size()},
          {"jitter", mean_of(per_motion(ms, metrics::jitter))},
          {"foot_skate", mean_of(per_motion(ms, metrics::foot_skate_ratio))}};
}

// ---------------------------------------------------------------- gen-data

struct GenData {
  std::size_t count = 2048;
  std::uint64_t seed = 7;
  double jump_fraction = 0.3;
  std::size_t frames = kDefaultFrames;
  std::uint32_t fps = kDefaultFps;
  std::string out;

  void add(Options& o) {
    o.add("count", count, "Number of sequences");
    o.add("seed", seed, "Generator seed");
    o.add("jump-fraction", jump_fraction, "Fraction of sequences containing jumps");
    o.add("frames", frames, "Frames per sequence");
    o.add("fps", fps, "Frame rate");
    o.add("out", out, "Output directory")->required();
  }

  int operator()(const Run& run) const {
    if (count == 0) throw UsageError("--count must be positive");
    if (frames < 8 || frames % 4 != 0) throw UsageError("--frames must be a multiple of 4, at least 8");
    if (jump_fraction < 0.0 || jump_fraction > 1.0) throw UsageError("--jump-fraction must lie in [0, 1]");
    if (fps == 0) throw UsageError("--fps must be positive");
    const fs::path dir = begin(run, out);
    DatasetOptions opt;
    opt.count = count;
    opt.jump_fraction = jump_fraction;
    opt.frames = frames;
    opt.fps = fps;
    const auto data = generate_dataset(seed, opt);
    const auto stats = fit_stats(data);
    save_mbin(dir / "dataset.mbin", data,
              {{"kind", "dataset"}, {"seed", seed}, {"jump_fraction", jump_fraction}, {"frames", frames}});
    write_json(dir / "stats.json", {{"mean", stats.mean}, {"std", stats.std}});
    write_json(dir / "summary.json", summary_of(data));
    *run.out << "wrote " << data.size() << " sequences to " << (dir / "dataset.mbin").string() << "\n";
    return kOk;
  }
};

// ---------------------------------------------------------------- train

struct Train {
  std::string data;
  std::string out;
  std::size_t epochs = 100;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::string schedule = "cosine";
  double ema = 0.999;
  std::uint64_t seed = 0;
  std::size_t width = 512;
  std::size_t blocks = 3;
  std::size_t diffusion_steps = 1000;
  std::size_t heldout_every = 16;

  void add(Options& o) {
    o.add("data", data, "Dataset MBIN")->required();
    o.add("out", out, "Output directory")->required();
    o.add("epochs", epochs, "Training epochs");
    o.add("batch", batch, "Minibatch size");
    o.add("lr", lr, "Adam learning rate");
    o.add("lr-schedule", schedule, "constant or cosine")->check(CLI::IsMember({"constant", "cosine"}));
    o.add("ema", ema, "Weight EMA decay");
    o.add("seed", seed, "Initialization and shuffling seed");
    o.add("width", width, "Hidden width");
    o.add("blocks", blocks, "Residual blocks");
    o.add("diffusion-steps", diffusion_steps, "Diffusion steps T");
    o.add("heldout-every", heldout_every, "Every n-th sequence is held out");
  }

  int operator()(const Run& run) const {
    const auto motions = load_motions(data, "data");
    if (heldout_every < 2) throw UsageError("--heldout-every must be at least 2");
    if (epochs == 0 || batch == 0 || width == 0 || blocks == 0) throw UsageError("sizes must be positive");
    if (!(lr > 0.0) || ema < 0.0 || ema >= 1.0) throw UsageError("--lr must be positive and --ema in [0, 1)");
    const std::size_t frames = motions.front().frames;
    for (const auto& m : motions)
      if (m.frames != frames) throw UsageError(data + ": sequences differ in length");
    const fs::path dir = begin(run, out);

    const auto stats = fit_stats(motions);
    std::vector<Motion> tr, ho;
    for (std::size_t i = 0; i < motions.size(); ++i)
      (i % heldout_every == heldout_every - 1 ? ho : tr).push_back(normalize(motions[i], stats));
    if (ho.empty()) throw UsageError(data + ": too few sequences for a held-out split");
    DenoiserConfig c;
    c.frames = frames;
    c.width = width;
    c.blocks = blocks;
    c.diffusion_steps = diffusion_steps;
    const auto sched = make_schedule(diffusion_steps);
    TrainOptions opt;
    opt.epochs = epochs;
    opt.batch = batch;
    opt.lr = lr;
    opt.ema_decay = ema;
    opt.cosine_lr = schedule == "cosine";
    opt.seed = seed;
    std::ostringstream curve;
    curve << std::setprecision(17) << "epoch,train_loss,heldout_loss\n";
    const auto result = dno::train(Denoiser::initialize(c, seed, stats), tr, ho, sched, opt, [&](const EpochRecord& e) {
      curve << e.epoch << ',' << e.train_loss << ',' << e.heldout_loss << '\n';
      *run.out << "epoch " << e.epoch << " train " << e.train_loss << " held-out " << e.heldout_loss << "\n";
    });
    save_params(dir / "model.dnow", result.model);
    io::write_text_atomic(dir / "loss.csv", curve.str());
    const double final_loss = result.curve.empty() ? result.initial_heldout_loss : result.curve.back().heldout_loss;
    write_json(dir / "summary.json", {{"initial_heldout_loss", result.initial_heldout_loss},
                                      {"final_heldout_loss", final_loss},
                                      {"ratio", final_loss / result.initial_heldout_loss},
                                      {"train_count", tr.size()},
                                      {"heldout_count", ho.size()}});
    return kOk;
  }
};

// ---------------------------------------------------------------- sample

struct Sample {
  std::string model;
  std::string out;
  std::size_t count = 16;
  std::size_t steps = 10;
  std::uint64_t seed = 0;

  void add(Options& o) {
    o.add("model", model, "Weights (DNOW)")->required();
    o.add("out", out, "Output directory")->required();
    o.add("count", count, "Number of samples");
    o.add("steps", steps, "DDIM steps");
    o.add("seed", seed, "Latent seed");
  }

  int operator()(const Run& run) const {
    const auto m = load_model(model);
    if (count == 0) throw UsageError("--count must be positive");
    const auto sched = make_schedule(m.config.diffusion_steps);
    time_grid(sched.T, steps);
    const fs::path dir = begin(run, out);
    const auto motions = apps::decode(random_latents(count, m.config.input_dim(), seed), m, sched, steps);
    save_mbin(dir / "result.mbin", motions, {{"kind", "sample"}, {"seed", seed}, {"steps", steps}});
    write_plots(dir, "sample", motions);
    write_json(dir / "summary.json", summary_of(motions));
    return kOk;
  }
};

// ---------------------------------------------------------------- invert

struct Invert {
  std::string model;
  std::string input;
  std::string out;
  std::size_t first = 0;
  std::size_t count = 0;
  std::size_t steps = kInversionSteps;
  std::size_t decode_steps = kInversionSteps;

  void add(Options& o) {
    o.add("model", model, "Weights (DNOW)")->required();
    o.add("input", input, "Motions to invert (MBIN)")->required();
    o.add("out", out, "Output directory")->required();
    o.add("first", first, "First motion used");
    o.add("count", count, "Motions used (0: all)");
    o.add("steps", steps, "Inversion steps");
    o.add("decode-steps", decode_steps, "DDIM steps of the reconstruction");
  }

  int operator()(const Run& run) const {
    const auto m = load_model(model);
    const auto motions = select(load_motions(input, "input"), first, count, input);
    check_frames(motions, m, input);
    const auto sched = make_schedule(m.config.diffusion_steps);
    time_grid(sched.T, steps);
    time_grid(sched.T, decode_steps);
    const fs::path dir = begin(run, out);
    const auto latents = apps::invert(motions, m, sched, steps);
    const auto recon = apps::decode(latents, m, sched, decode_steps);
    std::vector<Motion> lat;
    for (const auto& l : latents) lat.emplace_back(m.config.frames, motions.front().fps, l);
    save_mbin(dir / "latents.mbin", lat, {{"kind", "latent"}, {"normalized", true}, {"steps", steps}});
    save_mbin(dir / "result.mbin", recon, {{"kind", "reconstruction"}, {"steps", steps}, {"decode_steps", decode_steps}});
    std::vector<double> err;
    for (std::size_t i = 0; i < motions.size(); ++i) err.push_back(metrics::mpjpe(recon[i], motions[i]));
    write_json(dir / "summary.json", {{"mpjpe", err}, {"mean_mpjpe", mean_of(err)}});
    *run.out << "mean reconstruction MPJPE " << mean_of(err) << " cm\n";
    return kOk;
  }
};

// ---------------------------------------------------------------- edit

struct Edit {
  std::string model;
  std::string input;
  std::string task;
  std::string out;
  std::size_t first = 0;
  std::size_t inputs = 6;
  std::size_t candidates = 16;
  std::size_t inversion_steps = kInversionSteps;
  std::uint64_t seed = 0;
  DnoFlags dno;
  EngineFlags engine;

  void add(Options& o) {
    o.add("model", model, "Weights (DNOW)")->required();
    o.add("input", input, "Motions to edit (MBIN)")->required();
    o.add("task", task, "Task file; without one each candidate gets a random pelvis target");
    o.add("out", out, "Output directory")->required();
    o.add("first", first, "First input motion used");
    o.add("inputs", inputs, "Input motions edited (0: all)");
    o.add("candidates", candidates, "Candidates per input");
    o.add("inversion-steps", inversion_steps, "DDIM inversion steps of the initialization");
    o.add("seed", seed, "Target and perturbation seed");
    dno.add(o);
    engine.add(o);
  }

  int operator()(const Run& run) const {
    const auto m = load_model(model);
    const auto motions = select(load_motions(input, "input"), first, inputs, input);
    check_frames(motions, m, input);
    if (candidates == 0) throw UsageError("--candidates must be positive");
    std::optional<Task> t;
    if (!task.empty()) t = load_task(task, m.config.frames);
    const LossWeights w = t ? t->weights : LossWeights{};
    const DnoConfig base = dno.config(seed, w);
    const auto sched = make_schedule(m.config.diffusion_steps);
    time_grid(sched.T, inversion_steps);
    json resolved{{"dno", config_json(base)}, {"engine", engine.to_json()}, {"protocol", t ? "task" : "random-targets"}};
    if (t) resolved["task"] = task_to_json(*t);
    const fs::path dir = begin(run, out, resolved);
    auto scene = t ? std::make_shared<const SdfScene>(t->scene) : nullptr;

    std::vector<Motion> all;
    json items = json::array();
    std::vector<double> errors, preserved, jit;
    std::vector<DnoResult> traces;
    std::vector<std::size_t> trace_group;
    for (std::size_t i = 0; i < motions.size(); ++i) {
      const Motion& ref = motions[i];
      std::vector<ObservedSet> sets;
      if (t) {
        sets.push_back(t->observed);
      } else {
        for (std::size_t c = 0; c < candidates; ++c) sets.push_back(apps::edit_target(ref, candidate_seed(seed, i, 3), c));
      }
      const auto latent = apps::invert({ref}, m, sched, inversion_steps).front();
      const std::vector<std::vector<double>> init(candidates, latent);
      DnoConfig c = base;
      c.seed = candidate_seed(seed, i, 4);
      auto outcome = optimize(engine, c, m, sched, init, apps::edit_criterion(sets, scene, latent, w),
                              apps::guidance_criterion(sets, scene, w));
      std::size_t best = 0;
      for (std::size_t k = 0; k < candidates; ++k) {
        const ObservedSet& o = sets[sets.size() == 1 ? 0 : k];
        const Motion& out_m = outcome.motions[k];
        const double e = o.empty() ? 0.0 : metrics::objective_error(out_m, o);
        errors.push_back(e);
        preserved.push_back(metrics::content_preservation(ref, out_m));
        jit.push_back(metrics::jitter(out_m));
        json item{{"input", first + i}, {"candidate", k}, {"objective_error", e}, {"targets", targets_json(o)}};
        if (!outcome.results.empty()) {
          item["final_loss"] = outcome.results[k].final_loss;
          if (outcome.results[k].final_loss < outcome.results[best].final_loss) best = k;
        }
        items.push_back(item);
        all.push_back(out_m);
      }
      for (auto& r : outcome.results) {
        traces.push_back(std::move(r));
        trace_group.push_back(i);
      }
      const std::vector<ObservedSet> best_targets{sets[sets.size() == 1 ? 0 : best]};
      write_plots(dir, "input" + std::to_string(first + i), {outcome.motions[best]}, scene.get(), &best_targets);
    }
    save_mbin(dir / "result.mbin", all,
              {{"kind", "edit"}, {"engine", engine.engine}, {"candidates", candidates}, {"items", items}});
    if (!traces.empty()) {
      std::vector<std::pair<std::size_t, const DnoResult*>> rows;
      for (std::size_t k = 0; k < traces.size(); ++k) rows.emplace_back(trace_group[k], &traces[k]);
      write_trace(dir / "trace.csv", rows);
    }
    const double input_jitter = mean_of(per_motion(motions, metrics::jitter));
    write_json(dir / "summary.json", {{"median_objective_error", median_of(errors)},
                                      {"mean_objective_error", mean_of(errors)},
                                      {"content_preservation", mean_of(preserved)},
                                      {"jitter", mean_of(jit)},
                                      {"input_jitter", input_jitter},
                                      {"count", all.size()}});
    *run.out << "median objective error " << median_of(errors) << " m, content preservation " << mean_of(preserved)
             << "\n";
    return kOk;
  }
};

// ---------------------------------------------------------------- refine, complete

/// Shared driver: one candidate per input motion, optimized toward `sets`.
inline void refine_like(const Run& run, const fs::path& dir, const Denoiser& m, const NoiseSchedule& sched,
                        const std::vector<ObservedSet>& sets, const DnoConfig& c, const EngineFlags& engine,
                        std::vector<Motion>& outputs) {
  const auto init = random_latents(sets.size(), m.config.input_dim(), c.seed);
  auto outcome = optimize(engine, c, m, sched, init, apps::refine_criterion(sets, c.weights, c.decorr_mode),
                          apps::guidance_criterion(sets, nullptr, c.weights));
  outputs = std::move(outcome.motions);
  if (!outcome.results.empty()) {
    std::vector<std::pair<std::size_t, const DnoResult*>> rows;
    for (const auto& r : outcome.results) rows.emplace_back(0, &r);
    write_trace(dir / "trace.csv", rows);
  }
  (void)run;
}

struct Refine {
  std::string model;
  std::string input;
  std::string out;
  std::size_t first = 0;
  std::size_t count = 0;
  double noise_std = 0.0;
  double decorr = LossWeights{}.decorr;
  std::uint64_t seed = 0;
  DnoFlags dno;
  EngineFlags engine;

  Refine() { dno.steps = 500; }

  void add(Options& o) {
    o.add("model", model, "Weights (DNOW)")->required();
    o.add("input", input, "Motions to refine (MBIN)")->required();
    o.add("out", out, "Output directory")->required();
    o.add("first", first, "First motion used");
    o.add("count", count, "Motions used (0: all)");
    o.add("noise-std", noise_std, "Gaussian noise (m) added to the inputs first");
    o.add("decorr-weight", decorr, "Weight of the latent decorrelation penalty");
    o.add("seed", seed, "Latent and noise seed");
    dno.add(o);
    engine.add(o);
  }

  int operator()(const Run& run) const {
    const auto m = load_model(model);
    const auto clean = select(load_motions(input, "input"), first, count, input);
    check_frames(clean, m, input);
    if (noise_std < 0.0) throw UsageError("--noise-std must be non-negative");
    LossWeights w;
    w.decorr = decorr;
    const DnoConfig c = dno.config(seed, w);
    const auto sched = make_schedule(m.config.diffusion_steps);
    const fs::path dir = begin(run, out, {{"dno", config_json(c)}, {"engine", engine.to_json()}, {"noise_std", noise_std}});
    std::vector<Motion> noisy;
    for (std::size_t i = 0; i < clean.size(); ++i)
      noisy.push_back(noise_std > 0.0 ? apps::add_noise(clean[i], noise_std, candidate_seed(seed, i, 5)) : clean[i]);
    std::vector<ObservedSet> sets;
    for (const auto& n : noisy) sets.push_back(ObservedSet::all_of(n));
    std::vector<Motion> refined;
    refine_like(run, dir, m, sched, sets, c, engine, refined);
    save_mbin(dir / "result.mbin", refined,
              {{"kind", "refine"}, {"engine", engine.engine}, {"noise_std", noise_std}, {"items", input_items(first, refined.size())}});
    if (noise_std > 0.0) save_mbin(dir / "noisy.mbin", noisy, {{"kind", "noisy"}, {"noise_std", noise_std}});
    write_plots(dir, "refined", refined);
    std::vector<double> in_err, out_err;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      in_err.push_back(metrics::mpjpe(noisy[i], clean[i]));
      out_err.push_back(metrics::mpjpe(refined[i], clean[i]));
    }
    json s{{"input_mpjpe", mean_of(in_err)},
           {"output_mpjpe", mean_of(out_err)},
           {"input_jitter", mean_of(per_motion(noisy, metrics::jitter))},
           {"output_jitter", mean_of(per_motion(refined, metrics::jitter))},
           {"output_foot_skate", mean_of(per_motion(refined, metrics::foot_skate_ratio))}};
    if (clean.size() >= metrics::kFmdMinSet) {
      s["input_fmd"] = metrics::fmd(noisy, clean);
      s["output_fmd"] = metrics::fmd(refined, clean);
    }
    write_json(dir / "summary.json", s);
    *run.out << "MPJPE " << mean_of(in_err) << " -> " << mean_of(out_err) << " cm\n";
    return kOk;
  }
};

struct Complete {
  std::string model;
  std::string input;
  std::string task;
  std::string out;
  std::size_t first = 0;
  std::size_t count = 0;
  double decorr = LossWeights{}.decorr;
  std::uint64_t seed = 0;
  DnoFlags dno;
  EngineFlags engine;

  Complete() { dno.steps = 500; }

  void add(Options& o) {
    o.add("model", model, "Weights (DNOW)")->required();
    o.add("input", input, "Motions supplying the observed joints (MBIN)")->required();
    o.add("task", task, "Task file with the observed targets; default: x of every joint on every frame");
    o.add("out", out, "Output directory")->required();
    o.add("first", first, "First motion used");
    o.add("count", count, "Motions used (0: all)");
    o.add("decorr-weight", decorr, "Weight of the latent decorrelation penalty");
    o.add("seed", seed, "Latent seed");
    dno.add(o);
    engine.add(o);
  }

  int operator()(const Run& run) const {
    const auto m = load_model(model);
    const auto motions = select(load_motions(input, "input"), first, count, input);
    check_frames(motions, m, input);
    std::optional<Task> t;
    if (!task.empty()) t = load_task(task, m.config.frames);
    LossWeights w = t ? t->weights : LossWeights{};
    if (!t) w.decorr = decorr;
    const DnoConfig c = dno.config(seed, w);
    const auto sched = make_schedule(m.config.diffusion_steps);
    json resolved{{"dno", config_json(c)}, {"engine", engine.to_json()}, {"observed", t ? "task" : "horizontal"}};
    if (t) resolved["task"] = task_to_json(*t);
    const fs::path dir = begin(run, out, resolved);
    std::vector<ObservedSet> sets;
    for (const auto& mo : motions) sets.push_back(t ? t->observed : apps::horizontal_of(mo));
    std::vector<Motion> done;
    refine_like(run, dir, m, sched, sets, c, engine, done);
    json items = input_items(first, done.size());
    for (std::size_t i = 0; i < done.size(); ++i) items[i]["targets"] = targets_json(sets[i]);
    save_mbin(dir / "result.mbin", done, {{"kind", "complete"}, {"engine", engine.engine}, {"items", items}});
    write_plots(dir, "completed", done, nullptr, &sets);
    std::vector<double> err;
    for (std::size_t i = 0; i < done.size(); ++i) err.push_back(100.0 * metrics::objective_error(done[i], sets[i]));
    write_json(dir / "summary.json", {{"observed_mpjpe", mean_of(err)},
                                      {"foot_skate", mean_of(per_motion(done, metrics::foot_skate_ratio))},
                                      {"jitter", mean_of(per_motion(done, metrics::jitter))}});
    *run.out << "observed MPJPE " << mean_of(err) << " cm\n";
    return kOk;
  }
};

// ---------------------------------------------------------------- blend, inbetween

/// Shared driver for the two-motion tasks: `candidates` random latents.
struct Joining {
  std::string model;
  std::string first_path;
  std::string second_path;
  std::string out;
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  std::size_t candidates = 1;
  double decorr = LossWeights{}.decorr;
  std::uint64_t seed = 0;
  DnoFlags dno;

  Joining() { dno.steps = 1000; }

  void add(Options& o, const char* a, const char* b) {
    o.add("model", model, "Weights (DNOW)")->required();
    o.add(a, first_path, "First motion file (MBIN)")->required();
    o.add(b, second_path, "Second motion file (MBIN); defaults to the first");
    o.add("out", out, "Output directory")->required();
    o.add(std::string(a) + "-index", index_a, "Motion index in the first file");
    o.add(std::string(b) + "-index", index_b, "Motion index in the second file");
    o.add("candidates", candidates, "Random initializations");
    o.add("decorr-weight", decorr, "Weight of the latent decorrelation penalty");
    o.add("seed", seed, "Latent seed");
    dno.add(o);
  }

  std::pair<Motion, Motion> motions(const Denoiser& m) const {
    const auto fa = load_motions(first_path, "first");
    const auto fb = second_path.empty() ? fa : load_motions(second_path, "second");
    if (index_a >= fa.size() || index_b >= fb.size()) throw UsageError("motion index out of range");
    check_frames({fa[index_a], fb[index_b]}, m, "inputs");
    return {fa[index_a], fb[index_b]};
  }

  int solve(const Run& run, const Denoiser& m, const ObservedSet& observed, const std::string& kind,
            const std::vector<Motion>& extra, const std::string& extra_name) const {
    if (candidates == 0) throw UsageError("--candidates must be positive");
    LossWeights w;
    w.cont = 0.0;
    w.decorr = decorr;
    const DnoConfig c = dno.config(seed, w);
    const auto sched = make_schedule(m.config.diffusion_steps);
    const fs::path dir = begin(run, out, {{"dno", config_json(c)}});
    const std::vector<ObservedSet> sets{observed};
    auto sorted = run_dno(c, m, sched, sets);
    std::vector<Motion> ms;
    json items = json::array();
    std::vector<std::pair<std::size_t, const DnoResult*>> rows;
    for (const auto& r : sorted) {
      ms.push_back(r.motion);
      items.push_back({{"candidate", r.index}, {"final_loss", r.final_loss}});
      rows.emplace_back(0, &r);
    }
    save_mbin(dir / "result.mbin", ms, {{"kind", kind}, {"items", items}});
    if (!extra.empty()) save_mbin(dir / (extra_name + ".mbin"), extra, {{"kind", extra_name}});
    write_trace(dir / "trace.csv", rows);
    write_plots(dir, kind, {ms.front()}, nullptr, &sets);
    const double err = metrics::objective_error(ms.front(), observed);
    write_json(dir / "summary.json", {{"observed_error", err},
                                      {"jitter", metrics::jitter(ms.front())},
                                      {"foot_skate", metrics::foot_skate_ratio(ms.front())},
                                      {"best_candidate", sorted.front().index}});
    *run.out << kind << ": observed error " << err << " m\n";
    return kOk;
  }

  std::vector<DnoResult> run_dno(const DnoConfig& c, const Denoiser& m, const NoiseSchedule& sched,
                                 const std::vector<ObservedSet>& sets) const {
    auto sorted = dno::run(c, m, sched, random_latents(candidates, m.config.input_dim(), c.seed),
                           apps::refine_criterion(sets, c.weights, c.decorr_mode));
    best_of(sorted);
    return sorted;
  }
};

struct Blend : Joining {
  void add(Options& o) { Joining::add(o, "first", "second"); }
  int operator()(const Run& run) const {
    const auto m = load_model(model);
    const auto [a, b] = motions(m);
    const auto blend = apps::blend_of(a, b);
    return solve(run, m, blend.observed, "blend", {blend.joined}, "joined");
  }
};

struct Inbetween : Joining {
  void add(Options& o) { Joining::add(o, "start", "end"); }
  int operator()(const Run& run) const {
    const auto m = load_model(model);
    const auto [a, b] = motions(m);
    return solve(run, m, apps::endpoints_of(a, b), "inbetween", {}, "");
  }
};

// ---------------------------------------------------------------- eval

struct Eval {
  std::string result;
  std::string reference;
  std::string clean;
  std::string task;
  std::string json_out;
  std::string table;

  void add(Options& o) {
    o.add("result", result, "Result directory or MBIN file")->required();
    o.add("reference", reference, "Reference motions for MPJPE and content preservation (MBIN)");
    o.add("clean", clean, "Reference set for FMD (MBIN); defaults to --reference");
    o.add("task", task, "Task file for the objective error");
    o.add("json", json_out, "Metrics JSON path; default <result dir>/metrics.json");
    o.add("table", table, "CSV table the metrics row is appended to; default results.csv beside the result");
  }

  int operator()(const Run& run) const {
    fs::path file = result;
    if (fs::is_directory(file)) file /= "result.mbin";
    const auto res = load_mbin(file);
    if (res.motions.empty()) throw UsageError(file.string() + ": file holds no motions");
    std::vector<Motion> refs;
    if (!reference.empty()) refs = load_motions(reference, "reference");
    std::optional<Task> t;
    if (!task.empty()) t = load_task(task, res.motions.front().frames);

    const auto& ms = res.motions;
    const json items = res.metadata.contains("items") ? res.metadata.at("items") : json::array();
    auto ref_for = [&](std::size_t i) -> const Motion& {
      if (items.size() == ms.size() && items[i].contains("input")) {
        const auto k = items[i].at("input").get<std::size_t>();
        if (k < refs.size()) return refs[k];
      }
      if (refs.size() == ms.size()) return refs[i];
      if (refs.size() == 1) return refs[0];
      throw UsageError("reference holds " + std::to_string(refs.size()) + " motions for " + std::to_string(ms.size()) +
                       " results");
    };

    metrics::MetricsReport report;
    report.jitter = mean_of(per_motion(ms, metrics::jitter));
    report.foot_skate = mean_of(per_motion(ms, metrics::foot_skate_ratio));
    std::vector<double> err, cp, obj;
    if (!refs.empty())
      for (std::size_t i = 0; i < ms.size(); ++i) {
        err.push_back(metrics::mpjpe(ms[i], ref_for(i)));
        cp.push_back(metrics::content_preservation(ref_for(i), ms[i]));
      }
    for (std::size_t i = 0; i < ms.size(); ++i) {
      if (t && !t->observed.empty()) {
        obj.push_back(metrics::objective_error(ms[i], t->observed));
      } else if (items.size() == ms.size() && items[i].contains("targets") && !items[i].at("targets").empty()) {
        const Task ti = parse_task(json{{"targets", items[i].at("targets")}}.dump(), ms[i].frames, "result metadata");
        obj.push_back(metrics::objective_error(ms[i], ti.observed));
      }
    }
    report.mpjpe = mean_of(err);
    report.content_preservation = cp.empty() ? 1.0 : mean_of(cp);
    report.objective_error = mean_of(obj);
    const std::vector<Motion> fmd_ref = clean.empty() ? refs : load_motions(clean, "clean");
    if (ms.size() >= metrics::kFmdMinSet && fmd_ref.size() >= metrics::kFmdMinSet) report.fmd = metrics::fmd(ms, fmd_ref);

    json j{{"result", file.string()},
           {"count", ms.size()},
           {"jitter", report.jitter},
           {"foot_skate", report.foot_skate},
           {"mpjpe", refs.empty() ? json(nullptr) : json(report.mpjpe)},
           {"objective_error", obj.empty() ? json(nullptr) : json(report.objective_error)},
           {"content_preservation", cp.empty() ? json(nullptr) : json(report.content_preservation)},
           {"fmd", report.fmd ? json(*report.fmd) : json(nullptr)}};
    const fs::path dir = file.parent_path().empty() ? fs::path(".") : file.parent_path();
    write_json(json_out.empty() ? dir / "metrics.json" : fs::path(json_out), j);

    const fs::path tpath = table.empty() ? dir.parent_path().empty() ? fs::path("results.csv") : dir.parent_path() / "results.csv"
                                         : fs::path(table);
    std::string existing;
    if (fs::exists(tpath)) {
      const auto bytes = io::read_file(tpath);
      existing.assign(bytes.begin(), bytes.end());
    }
    if (existing.empty()) existing = "result,count,jitter,foot_skate,mpjpe,objective_error,content_preservation,fmd\n";
    std::ostringstream row;
    row << std::setprecision(10) << file.string() << ',' << ms.size() << ',' << report.jitter << ',' << report.foot_skate;
    for (const char* k : {"mpjpe", "objective_error", "content_preservation", "fmd"}) {
      row << ',';
      if (!j[k].is_null()) row << j[k].get<double>();
    }
    row << '\n';
    io::write_text_atomic(tpath, existing + row.str());
    *run.out << j.dump(2) << "\n";
    return kOk;
  }
};

// ---------------------------------------------------------------- gradcheck

struct GradCheck {
  std::size_t instances = 20;
  std::uint64_t seed = 0;
  double tolerance = oracles::kTolerance;
  std::string out;

  void add(Options& o) {
    o.add("instances", instances, "Random instances per family");
    o.add("seed", seed, "Instance seed");
    o.add("tolerance", tolerance, "Largest accepted relative error");
    o.add("out", out, "Optional output directory for report.json");
  }

  int operator()(const Run& run) const {
    if (instances == 0) throw UsageError("--instances must be positive");
    std::optional<fs::path> dir;
    if (!out.empty()) dir = begin(run, out);
    const auto results = oracles::all_oracles(instances, seed);
    bool ok = true;
    json report = json::array();
    for (const auto& r : results) {
      ok = ok && r.passed(tolerance);
      *run.out << std::left << std::setw(12) << r.name << " instances " << r.instances << "  max rel error "
               << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat << "  "
               << (r.passed(tolerance) ? "ok" : "FAIL") << "\n";
      report.push_back({{"family", r.name}, {"instances", r.instances}, {"max_rel_error", r.max_rel_error}});
    }
    if (dir) write_json(*dir / "report.json", {{"tolerance", tolerance}, {"families", report}, {"passed", ok}});
    return ok ? kOk : kNumerical;
  }
};

// ---------------------------------------------------------------- ablate

struct AblationRow {
  std::string name;
  DnoConfig config;
  double pose_loss = 0.0;
  double mpjpe = 0.0;
  double jitter = 0.0;
  double foot_skate = 0.0;
  std::optional<double> fmd;
};

struct Ablate {
  std::string model;
  std::string input;
  std::string out;
  std::size_t first = 0;
  std::size_t count = 32;
  double noise_std = 0.01;
  std::uint64_t seed = 0;
  DnoFlags dno;

  Ablate() { dno.steps = 500; }

  void add(Options& o) {
    o.add("model", model, "Weights (DNOW)")->required();
    o.add("input", input, "Clean motions (MBIN)")->required();
    o.add("out", out, "Output directory")->required();
    o.add("first", first, "First motion used");
    o.add("count", count, "Motions per configuration (FMD needs at least 32)");
    o.add("noise-std", noise_std, "Gaussian noise (m) of the surrogate task");
    o.add("seed", seed, "Latent and noise seed");
    dno.add(o);
  }

  /// Base configuration first, then one factor changed per row.
  static std::vector<std::pair<std::string, DnoConfig>> sweep(const DnoConfig& base) {
    std::vector<std::pair<std::string, DnoConfig>> v{{"base", base}};
    auto with = [&](std::string name, auto edit) {
      DnoConfig c = base;
      edit(c);
      v.emplace_back(std::move(name), c);
    };
    with("no-normalization", [](DnoConfig& c) { c.normalize_grad = false; });
    with("no-decorr", [](DnoConfig& c) { c.weights.decorr = 0.0; });
    for (double g : {2e-4, 5e-4, 1e-3}) {
      std::ostringstream n;
      n << "gamma=" << g;
      with(n.str(), [g](DnoConfig& c) { c.gamma = g; });
    }
    for (std::size_t n : {300, 500, 700})
      if (n != base.steps) with("N=" + std::to_string(n), [n](DnoConfig& c) { c.steps = n; });
    for (std::size_t k : {5, 10, 20})
      if (k != base.ddim_steps) with("K=" + std::to_string(k), [k](DnoConfig& c) { c.ddim_steps = k; });
    return v;
  }

  int operator()(const Run& run) const {
    const auto m = load_model(model);
    const auto clean = select(load_motions(input, "input"), first, count, input);
    check_frames(clean, m, input);
    if (noise_std <= 0.0) throw UsageError("--noise-std must be positive");
    const DnoConfig base = dno.config(seed, LossWeights{});
    const auto configs = sweep(base);
    json resolved = json::array();
    for (const auto& [n, c] : configs) resolved.push_back({{"name", n}, {"dno", config_json(c)}});
    const fs::path dir = begin(run, out, {{"configurations", resolved}, {"noise_std", noise_std}});
    const auto sched = make_schedule(m.config.diffusion_steps);

    std::vector<Motion> noisy;
    std::vector<ObservedSet> sets;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      noisy.push_back(apps::add_noise(clean[i], noise_std, candidate_seed(seed, i, 5)));
      sets.push_back(ObservedSet::all_of(noisy.back()));
    }
    const auto init = random_latents(clean.size(), m.config.input_dim(), seed);
    std::vector<AblationRow> rows;
    std::vector<double> grad_norms;
    for (const auto& [name, c] : configs) {
      *run.out << "ablation " << name << "\n";
      auto sorted = dno::run(c, m, sched, init, apps::refine_criterion(sets, c.weights, c.decorr_mode));
      AblationRow r{name, c};
      std::vector<Motion> outs(sorted.size());
      std::vector<double> pose;
      for (const auto& res : sorted) {
        if (res.aborted) throw NumericalError(name + ": candidate " + std::to_string(res.index) + " aborted: " + res.abort_reason);
        outs[res.index] = res.motion;
        for (const auto& [k, v] : res.final_components)
          if (k == "pose") pose.push_back(v);
        if (name == "base")
          for (const auto& t : res.trace) grad_norms.push_back(t.grad_norm);
      }
      r.pose_loss = mean_of(pose);
      std::vector<double> err;
      for (std::size_t i = 0; i < outs.size(); ++i) err.push_back(metrics::mpjpe(outs[i], clean[i]));
      r.mpjpe = mean_of(err);
      r.jitter = mean_of(per_motion(outs, metrics::jitter));
      r.foot_skate = mean_of(per_motion(outs, metrics::foot_skate_ratio));
      if (outs.size() >= metrics::kFmdMinSet) r.fmd = metrics::fmd(outs, clean);
      rows.push_back(r);
    }

    std::ostringstream csv;
    csv << std::setprecision(17) << "configuration,metric,value\n";
    json table = json::array();
    for (const auto& r : rows) {
      std::vector<std::pair<const char*, double>> values{
          {"pose_loss", r.pose_loss}, {"mpjpe", r.mpjpe}, {"jitter", r.jitter}, {"foot_skate", r.foot_skate}};
      if (r.fmd) values.emplace_back("fmd", *r.fmd);
      json jr{{"configuration", r.name}};
      for (const auto& [k, v] : values) {
        csv << r.name << ',' << k << ',' << v << '\n';
        jr[k] = v;
      }
      table.push_back(jr);
      *run.out << std::left << std::setw(18) << r.name << " pose " << r.pose_loss << "  mpjpe " << r.mpjpe << "  jitter "
               << r.jitter << "  skate " << r.foot_skate;
      if (r.fmd) *run.out << "  fmd " << *r.fmd;
      *run.out << "\n";
    }
    io::write_text_atomic(dir / "ablation.csv", csv.str());
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (double g : grad_norms)
      if (g > 0.0) {
        lo = std::min(lo, g);
        hi = std::max(hi, g);
      }
    write_json(dir / "summary.json", {{"rows", table},
                                      {"base_grad_norm_min", grad_norms.empty() ? 0.0 : lo},
                                      {"base_grad_norm_max", hi}});
    return kOk;
  }
};

template <class Cmd>
struct Registered {
  Cmd cmd;
  std::unique_ptr<Options> options;
};

}  // namespace detail

/// Runs one subcommand; `args` excludes the program name.
inline int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  using namespace detail;
  CLI::App app{"Diffusion noise optimization for toy 2-D motion", "dno"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenData gen;
  Train train;
  Sample sample;
  Invert invert;
  Edit edit;
  Refine refine;
  Complete complete;
  Blend blend;
  Inbetween inbetween;
  Eval eval;
  GradCheck gradcheck;
  Ablate ablate;

  std::vector<std::unique_ptr<Options>> options;
  std::vector<std::pair<CLI::App*, std::function<int(const Run&)>>> handlers;
  auto reg = [&](const char* name, const char* desc, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, desc);
    options.push_back(std::make_unique<Options>(sub));
    cmd.add(*options.back());
    handlers.emplace_back(sub, [&cmd](const Run& r) { return cmd(r); });
  };
  reg("gen-data", "Generate the synthetic walking/jumping dataset", gen);
  reg("train", "Train the denoiser", train);
  reg("sample", "Decode random latents", sample);
  reg("invert", "Invert motions to latents and reconstruct them", invert);
  reg("edit", "Edit motions toward keyframe targets", edit);
  reg("refine", "Denoise motions", refine);
  reg("complete", "Complete motions from partial observations", complete);
  reg("blend", "Join two motions across a seam", blend);
  reg("inbetween", "Fill the motion between two poses", inbetween);
  reg("eval", "Score a result against references", eval);
  reg("gradcheck", "Check gradients against finite differences", gradcheck);
  reg("ablate", "Sweep optimizer factors on a refinement task", ablate);

  std::vector<std::string> expanded;
  try {
    expanded = expand_config(args);
    std::vector<std::string> rev(expanded.rbegin(), expanded.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    CLI::App* sub = nullptr;
    for (auto* s : app.get_subcommands()) sub = s;
    out << (sub ? sub->help() : app.help());
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    CLI::App* sub = nullptr;
    for (auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  }

  try {
    for (std::size_t i = 0; i < handlers.size(); ++i) {
      if (!handlers[i].first->parsed()) continue;
      Run run{handlers[i].first->get_name(), args, options[i].get(), &out};
      return handlers[i].second(run);
    }
    err << app.help();
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const TaskError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace dno::cli
