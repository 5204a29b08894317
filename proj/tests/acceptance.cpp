// Acceptance suite: trains the toy model once (cached under --work), then
// checks the eight criteria and prints one PASS/FAIL line per criterion.
//
// Exit status is 0 when every criterion passes or the only failures are
// listed with --allow-fail.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "dno/cli.hpp"
#include "tuned.hpp"

namespace {

using namespace dno;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

using tuned::kGuidanceScale;
using tuned::kGuidedIters;
using tuned::kGuidedSteps;

constexpr std::size_t kDatasetCount = 2048;
constexpr std::uint64_t kDatasetSeed = 7;
constexpr std::size_t kHeldoutEvery = 16;

// Criterion thresholds.
constexpr double kGradcheckSeconds = 120.0;
constexpr double kInversionRatio = 10.0;
constexpr double kInversionSeconds = 300.0;
constexpr double kEditObjective = 0.05;
constexpr double kEditJitterRatio = 1.5;
constexpr double kRefineNoise = 0.05;
constexpr double kRefineJitterDrop = 5.0;
constexpr double kRefineSeconds = 1200.0;
constexpr double kCompletionSkateRatio = 2.0;
constexpr double kCompletionMpjpe = 5.0;
constexpr double kGradSpan = 100.0;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return json::parse(in);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Suite {
 public:
  Suite(fs::path work, std::ostream& log) : work_(std::move(work)), log_(log) {}

  /// Runs one subcommand with its output captured in the log; throws on a
  /// non-zero exit.
  void cli(std::vector<std::string> args) {
    log_ << "$ dno";
    for (const auto& a : args) log_ << ' ' << a;
    log_ << std::endl;
    const int code = cli::run_command(args, log_, log_);
    if (code != 0) throw std::runtime_error("dno " + args.at(0) + " exited with " + std::to_string(code));
  }

  std::string path(const std::string& rel) const { return (work_ / rel).string(); }
  std::string model() const { return path("model/model.dnow"); }
  std::string heldout() const { return path("heldout.mbin"); }

  void setup() {
    if (!fs::exists(work_ / "data/dataset.mbin"))
      cli({"gen-data", "--count", std::to_string(kDatasetCount), "--seed", std::to_string(kDatasetSeed), "--out",
           path("data")});
    if (!fs::exists(work_ / "model/summary.json")) {
      const auto start = Clock::now();
      cli({"train", "--data", path("data/dataset.mbin"), "--out", path("model"), "--heldout-every",
           std::to_string(kHeldoutEvery)});
      const double secs = std::chrono::duration<double>(Clock::now() - start).count();
      io::write_text_atomic(work_ / "model/train_seconds.txt", fmt(secs, 6) + "\n");
    }
    const auto data = load_mbin(path("data/dataset.mbin")).motions;
    std::vector<Motion> held;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (i % kHeldoutEvery == kHeldoutEvery - 1) held.push_back(data[i]);
    save_mbin(heldout(), held, {{"kind", "heldout"}, {"every", kHeldoutEvery}});
    double skate = 0.0;
    for (const auto& m : data) skate += metrics::foot_skate_ratio(m);
    clean_skate_ = skate / static_cast<double>(data.size());
  }

  std::string training_note() const {
    const json s = read_json(work_ / "model/summary.json");
    std::string note = "held-out loss " + fmt(s.at("initial_heldout_loss").get<double>()) + " -> " +
                       fmt(s.at("final_heldout_loss").get<double>());
    if (fs::exists(work_ / "model/train_seconds.txt"))
      note += ", trained in " + fmt(std::stod(read_bytes(work_ / "model/train_seconds.txt")), 4) + " s";
    else
      note += ", cached model";
    return note;
  }

  Verdict gradient_oracle() {
    const auto start = Clock::now();
    const int code = cli::run_command({"gradcheck", "--instances", "20", "--out", path("c1")}, log_, log_);
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    const json r = read_json(work_ / "c1/report.json");
    double worst = 0.0;
    for (const auto& f : r.at("families")) worst = std::max(worst, f.at("max_rel_error").get<double>());
    const bool pass = code == 0 && r.at("passed").get<bool>() && secs < kGradcheckSeconds;
    return {pass, std::to_string(r.at("families").size()) + " families x 20 instances, worst relative error " +
                      fmt(worst, 3) + ", " + fmt(secs, 3) + " s"};
  }

  Verdict inversion() {
    const auto start = Clock::now();
    std::map<std::size_t, double> err;
    for (std::size_t k : {10, 50, 100}) {
      const std::string dir = path("c2/inv" + std::to_string(k));
      cli({"invert", "--model", model(), "--input", heldout(), "--count", "10", "--steps", std::to_string(k),
           "--decode-steps", std::to_string(k), "--out", dir});
      err[k] = read_json(fs::path(dir) / "summary.json").at("mean_mpjpe").get<double>();
    }
    cli({"sample", "--model", model(), "--count", "10", "--steps", "100", "--seed", "1", "--out", path("c2/random")});
    const auto random = load_mbin(path("c2/random/result.mbin")).motions;
    const auto held = load_mbin(heldout()).motions;
    double rand_err = 0.0;
    for (std::size_t i = 0; i < 10; ++i) rand_err += metrics::mpjpe(random[i], held[i]);
    rand_err /= 10.0;
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    const bool ratio = kInversionRatio * err[100] <= rand_err;
    const bool monotone = err[10] >= err[50] && err[50] >= err[100];
    return {ratio && monotone && secs < kInversionSeconds,
            "MPJPE K_inv=10/50/100: " + fmt(err[10]) + "/" + fmt(err[50]) + "/" + fmt(err[100]) +
                " cm, random latent " + fmt(rand_err) + " cm (" + fmt(rand_err / err[100], 3) + "x), " +
                fmt(secs, 3) + " s"};
  }

  /// DNO and matched-budget guided runs of the editing protocol.
  void edit_runs() {
    if (edits_done_) return;
    cli({"edit", "--model", model(), "--input", heldout(), "--out", path("c3/dno")});
    cli({"edit", "--model", model(), "--input", heldout(), "--out", path("c3/guided"), "--engine", "guided",
         "--guidance-scale", fmt(kGuidanceScale, 17), "--guidance-steps", std::to_string(kGuidedSteps),
         "--guidance-iters", std::to_string(kGuidedIters)});
    edits_done_ = true;
  }

  Verdict editing() {
    edit_runs();
    const json d = read_json(work_ / "c3/dno/summary.json"), g = read_json(work_ / "c3/guided/summary.json");
    const double med = d.at("median_objective_error"), jit = d.at("jitter"), in_jit = d.at("input_jitter");
    const double cp = d.at("content_preservation"), cp_g = g.at("content_preservation");
    return {med < kEditObjective && jit <= kEditJitterRatio * in_jit && cp > cp_g,
            "median objective error " + fmt(med, 3) + " m over " + std::to_string(d.at("count").get<int>()) +
                " candidates, jitter " + fmt(jit) + " vs input " + fmt(in_jit) + ", content preservation DNO " +
                fmt(cp) + " vs guided " + fmt(cp_g)};
  }

  Verdict refinement() {
    const auto start = Clock::now();
    cli({"refine", "--model", model(), "--input", heldout(), "--count", "50", "--noise-std", fmt(kRefineNoise, 17),
         "--out", path("c4")});
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    const json s = read_json(work_ / "c4/summary.json");
    const double in_e = s.at("input_mpjpe"), out_e = s.at("output_mpjpe");
    const double in_j = s.at("input_jitter"), out_j = s.at("output_jitter");
    // FMD against the full held-out set as the clean reference.
    const auto held = load_mbin(heldout()).motions;
    const double fmd_out = metrics::fmd(load_mbin(path("c4/result.mbin")).motions, held);
    const double fmd_in = metrics::fmd(load_mbin(path("c4/noisy.mbin")).motions, held);
    return {out_e < in_e && in_j >= kRefineJitterDrop * out_j && fmd_out < fmd_in && secs < kRefineSeconds,
            "MPJPE " + fmt(in_e) + " -> " + fmt(out_e) + " cm, jitter " + fmt(in_j) + " -> " + fmt(out_j) + " (" +
                fmt(in_j / out_j, 3) + "x), FMD " + fmt(fmd_in) + " -> " + fmt(fmd_out) + ", " + fmt(secs, 3) + " s"};
  }

  Verdict completion() {
    cli({"complete", "--model", model(), "--input", heldout(), "--count", "10", "--out", path("c5")});
    const json s = read_json(work_ / "c5/summary.json");
    const double skate = s.at("foot_skate"), err = s.at("observed_mpjpe");
    return {skate < kCompletionSkateRatio * clean_skate_ && err < kCompletionMpjpe,
            "foot skate " + fmt(skate, 3) + " vs limit " + fmt(kCompletionSkateRatio * clean_skate_, 3) +
                " (clean average " + fmt(clean_skate_, 3) + "), observed MPJPE " + fmt(err, 3) + " cm"};
  }

  Verdict ablation() {
    cli({"ablate", "--model", model(), "--input", heldout(), "--count", "32", "--noise-std", "0.01", "--out",
         path("c6")});
    std::map<std::string, json> row;
    const json summary = read_json(work_ / "c6/summary.json");
    for (const auto& r : summary.at("rows")) row[r.at("configuration")] = r;
    auto v = [&](const std::string& c, const char* k) { return row.at(c).at(k).get<double>(); };
    const bool a = v("base", "pose_loss") < v("no-normalization", "pose_loss");
    const bool b = v("no-decorr", "foot_skate") > v("base", "foot_skate") && v("no-decorr", "jitter") > v("base", "jitter");
    const bool c = v("gamma=0.001", "fmd") >= v("base", "fmd");
    const bool d = v("N=300", "pose_loss") >= v("base", "pose_loss") && v("base", "pose_loss") >= v("N=700", "pose_loss") &&
                   v("K=5", "pose_loss") >= v("base", "pose_loss");
    auto mark = [](bool ok) { return ok ? "ok" : "FAILED"; };
    return {a && b && c && d,
            std::string("(a) ") + mark(a) + " pose " + fmt(v("base", "pose_loss")) + " vs unnormalized " +
                fmt(v("no-normalization", "pose_loss")) + "; (b) " + mark(b) + " skate " + fmt(v("base", "foot_skate")) +
                " vs " + fmt(v("no-decorr", "foot_skate")) + ", jitter " + fmt(v("base", "jitter")) + " vs " +
                fmt(v("no-decorr", "jitter")) + "; (c) " + mark(c) + " FMD " + fmt(v("base", "fmd")) + " vs gamma=1e-3 " +
                fmt(v("gamma=0.001", "fmd")) + "; (d) " + mark(d) + " pose N=300/500/700 " + fmt(v("N=300", "pose_loss")) +
                "/" + fmt(v("base", "pose_loss")) + "/" + fmt(v("N=700", "pose_loss")) + ", K=5/10/20 " +
                fmt(v("K=5", "pose_loss")) + "/" + fmt(v("base", "pose_loss")) + "/" + fmt(v("K=20", "pose_loss"))};
  }

  Verdict guided_contrast() {
    edit_runs();
    const json d = read_json(work_ / "c3/dno/summary.json"), g = read_json(work_ / "c3/guided/summary.json");
    const json dc = read_json(work_ / "c3/dno/config.json").at("resolved").at("dno");
    const std::size_t dno_budget = dc.at("steps").get<std::size_t>() * dc.at("ddim_steps").get<std::size_t>();
    const std::size_t guided_budget = guided_evaluations({kGuidedSteps, kGuidanceScale, kGuidedIters});
    const double e_d = d.at("mean_objective_error"), e_g = g.at("mean_objective_error");

    const Denoiser m = load_params(model());
    const auto sched = make_schedule(m.config.diffusion_steps);
    std::vector<double> flat;
    for (const auto& l : random_latents(4, m.config.input_dim(), 11)) flat.insert(flat.end(), l.begin(), l.end());
    const Tensor x_T(tg::Shape{4, m.config.input_dim()}, std::move(flat));
    const auto crit = apps::guidance_criterion({apps::horizontal_of(load_mbin(heldout()).motions.at(0))}, nullptr,
                                               LossWeights{});
    const bool identical = guided_sample(x_T, m, sched, crit, {10, 0.0, kGuidedIters})
                               .identical(ddim_solve(x_T, denoise_fn(m), sched, {10, false}));
    return {dno_budget == guided_budget && e_d < e_g && identical,
            "budget " + std::to_string(dno_budget) + " vs " + std::to_string(guided_budget) +
                " evaluations, mean objective error DNO " + fmt(e_d, 3) + " m vs guided " + fmt(e_g, 3) + " m (s=" +
                fmt(kGuidanceScale) + "), s=0 " + (identical ? "bit-identical" : "DIFFERS") + " to ddim_solve"};
  }

  Verdict determinism() {
    const std::string small_n = "20", warm = "5";
    const std::vector<std::string> opt{"--steps", small_n, "--warmup", warm};
    auto with = [](std::vector<std::string> a, const std::vector<std::string>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    const std::string held = heldout(), mdl = model();
    // Each command writes into <run>/<name>.
    const std::vector<std::pair<std::string, std::function<std::vector<std::string>(const std::string&)>>> commands{
        {"gen-data", [](const std::string& r) { return std::vector<std::string>{"gen-data", "--count", "32", "--out", r + "/gen-data"}; }},
        {"train",
         [](const std::string& r) {
           return std::vector<std::string>{"train", "--data", r + "/gen-data/dataset.mbin", "--epochs", "1", "--width", "32",
                                           "--blocks", "1", "--diffusion-steps", "100", "--out", r + "/train"};
         }},
        {"sample", [&](const std::string& r) { return std::vector<std::string>{"sample", "--model", mdl, "--count", "2", "--out", r + "/sample"}; }},
        {"invert",
         [&](const std::string& r) {
           return std::vector<std::string>{"invert", "--model", mdl, "--input", held, "--count", "2", "--steps", "10",
                                           "--decode-steps", "10", "--out", r + "/invert"};
         }},
        {"edit",
         [&](const std::string& r) {
           return with({"edit", "--model", mdl, "--input", held, "--inputs", "1", "--candidates", "2", "--inversion-steps",
                        "10", "--out", r + "/edit"},
                       opt);
         }},
        {"refine",
         [&](const std::string& r) {
           return with({"refine", "--model", mdl, "--input", held, "--count", "2", "--noise-std", "0.05", "--out", r + "/refine"}, opt);
         }},
        {"complete",
         [&](const std::string& r) { return with({"complete", "--model", mdl, "--input", held, "--count", "2", "--out", r + "/complete"}, opt); }},
        {"blend",
         [&](const std::string& r) { return with({"blend", "--model", mdl, "--first", held, "--second-index", "1", "--out", r + "/blend"}, opt); }},
        {"inbetween",
         [&](const std::string& r) { return with({"inbetween", "--model", mdl, "--start", held, "--end-index", "1", "--out", r + "/inbetween"}, opt); }},
        {"eval",
         [&](const std::string& r) {
           return std::vector<std::string>{"eval", "--result", r + "/refine", "--reference", held, "--json",
                                           r + "/eval/metrics.json", "--table", r + "/eval/results.csv"};
         }},
        {"gradcheck", [](const std::string& r) { return std::vector<std::string>{"gradcheck", "--instances", "2", "--out", r + "/gradcheck"}; }},
        {"ablate",
         [&](const std::string& r) {
           return with({"ablate", "--model", mdl, "--input", held, "--count", "2", "--out", r + "/ablate"}, opt);
         }},
    };
    std::vector<std::string> differing;
    for (const std::string run : {"a", "b"}) {
      const std::string root = path("c8/" + run);
      fs::remove_all(root);
      fs::create_directories(root + "/eval");
      for (const auto& [name, make] : commands) cli(make(root));
    }
    for (const auto& [name, make] : commands) {
      const fs::path a = work_ / "c8/a" / name, b = work_ / "c8/b" / name;
      std::size_t files = 0;
      bool same = true;
      for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file() || e.path().filename() == "config.json" || e.path().filename() == "results.csv") continue;
        const fs::path other = b / fs::relative(e.path(), a);
        ++files;
        if (name == "eval") {
          json ja = read_json(e.path()), jb = read_json(other);
          ja.erase("result");
          jb.erase("result");
          same = same && ja == jb;
        } else {
          same = same && fs::exists(other) && read_bytes(e.path()) == read_bytes(other);
        }
      }
      if (!same || files == 0) differing.push_back(name);
    }

    const auto dnow = read_bytes(model());
    const auto enc = encode_params(load_params(model()));
    const bool dnow_exact = std::string(enc.begin(), enc.end()) == dnow;
    const auto mbin = read_bytes(path("data/dataset.mbin"));
    const auto mf = load_mbin(path("data/dataset.mbin"));
    const auto enc_m = encode_mbin(mf.motions, mf.metadata);
    const bool mbin_exact = std::string(enc_m.begin(), enc_m.end()) == mbin;

    // Widest pre-normalization gradient-norm span over the optimization runs.
    fs::path trace;
    double lo = 0.0, hi = 0.0;
    for (const char* run : {"c3/dno", "c4", "c5", "c8/a/edit", "c8/a/refine", "c8/a/complete"}) {
      const fs::path t = work_ / run / "trace.csv";
      if (!fs::exists(t)) continue;
      const auto [l, h] = grad_norm_range(t);
      if (trace.empty() || h * lo > hi * l) {
        trace = t;
        lo = l;
        hi = h;
      }
    }
    if (trace.empty()) throw std::runtime_error("no optimization trace found");
    const bool span = hi >= kGradSpan * lo;

    std::string diff;
    for (const auto& d : differing) diff += (diff.empty() ? "" : ",") + d;
    return {differing.empty() && dnow_exact && mbin_exact && span,
            std::to_string(commands.size()) + " subcommands " +
                (differing.empty() ? std::string("bit-reproducible") : "differ: " + diff) + ", DNOW round trip " +
                (dnow_exact ? "exact" : "DIFFERS") + ", MBIN round trip " + (mbin_exact ? "exact" : "DIFFERS") +
                ", gradient norms " + fmt(lo, 3) + " .. " + fmt(hi, 3) + " (" + fmt(hi / lo, 3) + "x, " +
                fs::relative(trace.parent_path(), work_).string() + " trace)"};
  }

  static std::pair<double, double> grad_norm_range(const fs::path& trace) {
    std::ifstream in(trace);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
      std::stringstream s(line);
      std::string h;
      while (std::getline(s, h, ',')) header.push_back(h);
    }
    const auto col = [&](const std::string& n) {
      return static_cast<std::size_t>(std::find(header.begin(), header.end(), n) - header.begin());
    };
    const std::size_t g = col("grad_norm"), sk = col("skipped");
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream s(line);
      std::string x;
      while (std::getline(s, x, ',')) f.push_back(x);
      if (f.size() <= std::max(g, sk) || f[sk] == "1") continue;
      const double v = std::stod(f[g]);
      if (v > 0.0) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    return {lo, hi};
  }

 private:
  fs::path work_;
  std::ostream& log_;
  double clean_skate_ = 0.0;
  bool edits_done_ = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DNO acceptance suite"};
  std::string work = "acceptance";
  bool setup_only = false;
  std::vector<int> only, allow_fail;
  app.add_option("--work", work, "Working directory; the dataset and model are cached here")->capture_default_str();
  app.add_flag("--setup-only", setup_only, "Generate data and train, then stop");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 8));
  app.add_option("--allow-fail", allow_fail, "Criteria whose failure does not affect the exit status")
      ->delimiter(',')
      ->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work);
  std::ofstream log(fs::path(work) / "acceptance.log", std::ios::app);
  Suite suite(work, log);
  const auto t0 = Clock::now();
  try {
    suite.setup();
  } catch (const std::exception& e) {
    std::cout << "setup FAIL: " << e.what() << "\n";
    return 1;
  }
  std::cout << "setup: " << suite.training_note() << "\n";
  if (setup_only) return 0;

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient oracle", [&] { return suite.gradient_oracle(); }},
      {"inversion fidelity", [&] { return suite.inversion(); }},
      {"editing", [&] { return suite.editing(); }},
      {"refinement", [&] { return suite.refinement(); }},
      {"completion", [&] { return suite.completion(); }},
      {"ablation directions", [&] { return suite.ablation(); }},
      {"guided-baseline contrast", [&] { return suite.guided_contrast(); }},
      {"determinism and formats", [&] { return suite.determinism(); }},
  };
  const std::set<int> selected(only.begin(), only.end()), allowed(allow_fail.begin(), allow_fail.end());
  bool ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(n)) continue;
    const auto start = Clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    const bool tolerated = !v.pass && allowed.count(n);
    ok = ok && (v.pass || tolerated);
    std::cout << "criterion " << n << " " << (v.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": " << v.detail
              << " [" << fmt(secs, 4) << " s]" << (tolerated ? " (known unattained, see README)" : "") << std::endl;
  }
  std::cout << "total " << fmt(std::chrono::duration<double>(Clock::now() - t0).count(), 5) << " s\n";
  return ok ? 0 : 1;
}
