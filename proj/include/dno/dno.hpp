#pragma once

// Latent-noise optimization: every step decodes each candidate's x_T through
// the full DDIM chain, evaluates the task criterion on the decoded motion and
// moves x_T along the normalized gradient with Adam.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dno/diffusion.hpp"
#include "dno/objectives.hpp"
#include "dno/optim.hpp"

namespace dno {

struct DnoConfig {
  double lr = 0.05;
  std::size_t warmup = 50;
  std::size_t steps = 300;  // N
  double gamma = 0.0;
  std::size_t ddim_steps = 10;  // K
  std::size_t batch = 16;
  LossWeights weights;
  double grad_floor = 1e-12;
  DecorrMode decorr_mode = DecorrMode::Squared;
  bool normalize_grad = true;
  bool checkpoint = false;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("dno: learning rate must be positive");
    if (steps == 0) throw std::invalid_argument("dno: step count must be positive");
    if (warmup >= steps) throw std::invalid_argument("dno: warmup must be shorter than the step count");
    if (ddim_steps < 1) throw std::invalid_argument("dno: DDIM step count must be at least 1");
    if (batch < 1) throw std::invalid_argument("dno: batch must be at least 1");
    if (gamma < 0.0) throw std::invalid_argument("dno: perturbation must be non-negative");
    if (weights.obs < 0.0 || weights.cont < 0.0 || weights.decorr < 0.0)
      throw std::invalid_argument("dno: loss weights must be non-negative");
  }
};

/// Linear warmup to lr, then cosine decay to zero at step N.
inline double lr_at(std::size_t step, const DnoConfig& c) {
  if (step >= c.steps)
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(c.steps) + ")");
  if (step < c.warmup) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup);
  const double u = static_cast<double>(step - c.warmup) / static_cast<double>(c.steps - c.warmup);
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

struct TraceRow {
  std::size_t step = 0;
  double total = 0.0;
  std::vector<std::pair<std::string, double>> components;
  double grad_norm = 0.0;  // before normalization
  double lr = 0.0;
  bool skipped = false;
};

struct LatentState {
  std::vector<double> latent;
  Adam adam;
  std::mt19937_64 rng;

  LatentState() = default;
  LatentState(std::vector<double> init, std::uint64_t seed) : latent(std::move(init)), adam(latent.size()), rng(seed) {}
};

struct StepInfo {
  double grad_norm = 0.0;
  double lr = 0.0;
  bool skipped = false;
};

/// One update of x_T from its raw gradient. Steps whose gradient norm is
/// below the floor leave the state untouched.
inline StepInfo dno_step(LatentState& s, std::span<const double> grad, std::size_t step, const DnoConfig& c) {
  if (grad.size() != s.latent.size()) throw tg::ShapeError("dno_step: gradient size does not match latent");
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  StepInfo info{std::sqrt(sq), lr_at(step, c), false};
  if (!std::isfinite(info.grad_norm))
    throw NumericalError("dno_step: non-finite gradient at step " + std::to_string(step));
  if (info.grad_norm < c.grad_floor) {
    info.skipped = true;
    return info;
  }
  std::vector<double> g(grad.begin(), grad.end());
  if (c.normalize_grad)
    for (auto& v : g) v /= info.grad_norm;
  s.adam.step(s.latent, g, info.lr);
  if (c.gamma > 0.0) {
    const double gs = c.gamma * info.lr / c.lr;
    std::normal_distribution<double> n01;
    for (auto& v : s.latent) v += gs * n01(s.rng);
  }
  return info;
}

/// Noise streams: one for initial latents, one for perturbations.
inline std::uint64_t candidate_seed(std::uint64_t seed, std::size_t index, std::uint64_t stream) {
  return detail::mix_seed(seed ^ (0xA24BAED4963EE407ull * (stream + 1)), index);
}

/// Standard normal latents of `numel` entries for slots first..first+count-1.
inline std::vector<std::vector<double>> random_latents(std::size_t count, std::size_t numel, std::uint64_t seed,
                                                       std::size_t first = 0) {
  std::vector<std::vector<double>> out(count, std::vector<double>(numel));
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(candidate_seed(seed, first + i, 0));
    std::normal_distribution<double> n01;
    for (auto& v : out[i]) v = n01(rng);
  }
  return out;
}

inline constexpr std::size_t kInversionSteps = 100;

enum class InitMode { Random, Inversion };

/// Initial latents in the model's normalized space, one per batch slot.
inline std::vector<std::vector<double>> init_latent(InitMode mode, std::size_t batch, const Denoiser& model,
                                                    const NoiseSchedule& sched, const Motion* reference,
                                                    std::uint64_t seed, std::size_t inversion_steps = kInversionSteps) {
  if (mode == InitMode::Random) return random_latents(batch, model.config.input_dim(), seed);
  if (!reference) throw std::invalid_argument("init_latent: inversion requires a reference motion");
  const Motion n = normalize(*reference, model.stats);
  const Tensor x0(tg::Shape{1, model.config.input_dim()}, n.data);
  const Tensor lat = ddim_invert(x0, denoise_fn(model), sched, inversion_steps);
  return std::vector<std::vector<double>>(batch, lat.to_vector());
}

/// Maps a normalized [6,M] tensor to meters, differentiably.
inline Tensor denormalize(const Tensor& x, const DatasetStats& s) {
  const std::size_t m = x.shape()[1];
  std::vector<double> sd(kFeatures * m), mu(kFeatures * m);
  for (std::size_t d = 0; d < kFeatures; ++d)
    for (std::size_t k = 0; k < m; ++k) {
      sd[d * m + k] = s.std[d];
      mu[d * m + k] = s.mean[d];
    }
  return tg::add(tg::mul(x, Tensor(x.shape(), std::move(sd))), Tensor(x.shape(), std::move(mu)));
}

/// Criterion on a decoded motion (meters, [6,M]) and its latent ([6,M]).
/// `candidate` is the slot's original index.
using Criterion = std::function<CriterionValue(const Tensor& motion, const Tensor& latent, std::size_t candidate)>;

struct DnoResult {
  std::size_t index = 0;  // original slot
  std::vector<double> latent;
  Motion motion;
  double final_loss = 0.0;
  std::vector<std::pair<std::string, double>> final_components;
  std::vector<TraceRow> trace;
  double wall_seconds = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

/// Decodes every latent in one batch; returns [6,M] motions in meters.
inline std::vector<Tensor> decode_batch(const std::vector<Tensor>& latents, const Denoiser& model,
                                        const NoiseSchedule& sched, const DnoConfig& c) {
  const std::size_t m = model.config.frames, w = model.config.input_dim(), b = latents.size();
  std::vector<Tensor> rows;
  rows.reserve(b);
  for (const auto& l : latents) rows.push_back(tg::reshape(l, tg::Shape{1, w}));
  const Tensor x_T = b == 1 ? rows[0] : tg::reshape(tg::concat(rows), tg::Shape{b, w});
  const Tensor x0 = ddim_solve(x_T, denoise_fn(model), sched, {c.ddim_steps, c.checkpoint});
  std::vector<Tensor> out;
  out.reserve(b);
  if (b == 1) {
    out.push_back(denormalize(tg::reshape(x0, tg::Shape{kFeatures, m}), model.stats));
    return out;
  }
  const Tensor flat = tg::reshape(x0, tg::Shape{1, b * w});
  for (std::size_t r = 0; r < b; ++r) {
    std::vector<std::size_t> idx(w);
    std::iota(idx.begin(), idx.end(), r * w);
    out.push_back(denormalize(tg::reshape(tg::gather(flat, std::move(idx)), tg::Shape{kFeatures, m}), model.stats));
  }
  return out;
}

inline bool finite_components(const CriterionValue& v) {
  if (!std::isfinite(v.total.item())) return false;
  return std::all_of(v.components.begin(), v.components.end(), [](const auto& c) { return std::isfinite(c.second); });
}

/// Optimizes the given slots of `results` in place.
inline void run_group(std::vector<DnoResult*> slots, const DnoConfig& c, const Denoiser& model,
                      const NoiseSchedule& sched, const Criterion& criterion) {
  const auto start = std::chrono::steady_clock::now();
  const tg::Shape shape{kFeatures, model.config.frames};
  std::vector<LatentState> state;
  state.reserve(slots.size());
  for (auto* r : slots) state.emplace_back(r->latent, candidate_seed(c.seed, r->index, 1));

  for (std::size_t step = 0; step < c.steps; ++step) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < slots.size(); ++i)
      if (!slots[i]->aborted) active.push_back(i);
    if (active.empty()) break;

    tg::Graph<double> g;
    std::vector<Tensor> leaves;
    for (auto i : active) leaves.push_back(g.leaf(Tensor(shape, state[i].latent)));
    const auto motions = decode_batch(leaves, model, sched, c);

    std::vector<CriterionValue> values;
    std::vector<std::size_t> live;  // positions in `active` with finite criteria
    for (std::size_t a = 0; a < active.size(); ++a) {
      DnoResult& r = *slots[active[a]];
      CriterionValue v = criterion(motions[a], leaves[a], r.index);
      if (v.total.numel() != 1) throw tg::ShapeError("dno: criterion must return a scalar");
      if (!finite_components(v)) {
        r.aborted = true;
        r.abort_reason = "non-finite loss at step " + std::to_string(step);
        continue;
      }
      live.push_back(a);
      values.push_back(std::move(v));
    }
    if (live.empty()) continue;

    std::optional<Tensor> root;
    for (const auto& v : values) root = root ? tg::add(*root, v.total) : v.total;
    tg::GradientMap<double> grads;
    if (root->recorded()) grads = g.backward(*root);

    for (std::size_t n = 0; n < live.size(); ++n) {
      const std::size_t a = live[n];
      DnoResult& r = *slots[active[a]];
      const auto grad = grads.contains(leaves[a]) ? grads.at(leaves[a]).to_vector()
                                                         : std::vector<double>(leaves[a].numel(), 0.0);
      TraceRow row;
      row.step = step;
      row.total = values[n].total.item();
      row.components = values[n].components;
      try {
        const StepInfo info = dno_step(state[active[a]], grad, step, c);
        row.grad_norm = info.grad_norm;
        row.lr = info.lr;
        row.skipped = info.skipped;
      } catch (const NumericalError& e) {
        row.grad_norm = std::numeric_limits<double>::quiet_NaN();
        row.lr = lr_at(step, c);
        r.aborted = true;
        r.abort_reason = e.what();
      }
      r.trace.push_back(std::move(row));
    }
  }

  for (std::size_t i = 0; i < slots.size(); ++i) {
    DnoResult& r = *slots[i];
    r.latent = state[i].latent;
    const Tensor lat(shape, r.latent);
    const Tensor x = decode_batch({lat}, model, sched, c)[0];
    r.motion = to_motion(x);
    const CriterionValue v = criterion(x, lat, r.index);
    r.final_loss = v.total.item();
    r.final_components = v.components;
    if (!std::isfinite(r.final_loss) && !r.aborted) {
      r.aborted = true;
      r.abort_reason = "non-finite loss after the final step";
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (auto* r : slots) r->wall_seconds = secs;
}

}  // namespace detail

/// Thread count from DNO_THREADS, defaulting to `fallback`.
inline std::size_t threads_from_env(std::size_t fallback = 1) {
  if (const char* v = std::getenv("DNO_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
  }
  return fallback;
}

/// Optimizes each initial latent independently, `batch` latents per decode.
/// Results are sorted by final criterion (aborted candidates last); `index`
/// keeps the original slot.
inline std::vector<DnoResult> run(const DnoConfig& c, const Denoiser& model, const NoiseSchedule& sched,
                                  const std::vector<std::vector<double>>& init, const Criterion& criterion) {
  c.validate();
  if (init.empty()) throw std::invalid_argument("dno: no initial latents");
  std::vector<DnoResult> results(init.size());
  for (std::size_t i = 0; i < init.size(); ++i) {
    if (init[i].size() != model.config.input_dim())
      throw tg::ShapeError("dno: initial latent " + std::to_string(i) + " has " + std::to_string(init[i].size()) +
                           " entries, model expects " + std::to_string(model.config.input_dim()));
    results[i].index = i;
    results[i].latent = init[i];
  }

  const std::size_t groups = std::min(std::max<std::size_t>(c.threads, 1), init.size());
  std::vector<std::vector<DnoResult*>> parts(groups);
  for (std::size_t i = 0; i < init.size(); ++i) parts[i * groups / init.size()].push_back(&results[i]);
  auto run_part = [&](const std::vector<DnoResult*>& part) {
    for (std::size_t i = 0; i < part.size(); i += c.batch) {
      const auto last = part.begin() + static_cast<std::ptrdiff_t>(std::min(part.size(), i + c.batch));
      detail::run_group({part.begin() + static_cast<std::ptrdiff_t>(i), last}, c, model, sched, criterion);
    }
  };
  if (groups == 1) {
    run_part(parts[0]);
  } else {
    std::vector<std::exception_ptr> errors(groups);
    std::vector<std::thread> pool;
    for (std::size_t p = 0; p < groups; ++p)
      pool.emplace_back([&, p] {
        try {
          run_part(parts[p]);
        } catch (...) {
          errors[p] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::stable_sort(results.begin(), results.end(), [](const DnoResult& a, const DnoResult& b) {
    if (a.aborted != b.aborted) return !a.aborted;
    return a.final_loss < b.final_loss;
  });
  return results;
}

/// Lowest final criterion among candidates that did not abort.
inline const DnoResult& best_of(const std::vector<DnoResult>& sorted) {
  if (sorted.empty() || sorted.front().aborted) throw NumericalError("dno: every candidate aborted");
  return sorted.front();
}

}  // namespace dno
