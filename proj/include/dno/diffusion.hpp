#pragma once

// Noise schedule, forward noising, denoiser training, and the deterministic
// DDIM sampler together with its inversion. All sampling functions operate on
// normalized motions flattened to rows of a [B, D*M] tensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dno/denoiser.hpp"
#include "dno/optim.hpp"
#include "dno/tensor.hpp"

namespace dno {

struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> alpha_bar;  // size T+1; alpha_bar[0] == 1

  double at(std::size_t t) const {
    if (t > T) throw std::out_of_range("schedule: t=" + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return alpha_bar[t];
  }
};

/// Cosine schedule with offset s = 0.008. Per-step betas are capped at 0.999
/// so alpha_bar stays positive and strictly decreasing.
inline NoiseSchedule make_schedule(std::size_t T) {
  if (T < 2) throw std::invalid_argument("make_schedule: T must be at least 2");
  constexpr double s = 0.008;
  auto f = [&](std::size_t t) {
    const double c = std::cos((static_cast<double>(t) / static_cast<double>(T) + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule out;
  out.T = T;
  out.alpha_bar.resize(T + 1);
  out.alpha_bar[0] = 1.0;
  const double f0 = f(0);
  double prev_raw = 1.0;
  for (std::size_t t = 1; t <= T; ++t) {
    const double raw = f(t) / f0;
    const double beta = std::min(1.0 - raw / prev_raw, 0.999);
    out.alpha_bar[t] = out.alpha_bar[t - 1] * (1.0 - beta);
    prev_raw = raw;
  }
  return out;
}

/// sqrt(ab_t) x0 + sqrt(1 - ab_t) eps
inline Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& sched) {
  if (x0.shape() != eps.shape())
    throw tg::ShapeError("q_sample: noise shape " + tg::to_string(eps.shape()) + " does not match " + tg::to_string(x0.shape()));
  const double ab = sched.at(t);
  if (ab == 1.0) return x0;
  return tg::add(tg::scale(x0, std::sqrt(ab)), tg::scale(eps, std::sqrt(1.0 - ab)));
}

/// d(x_t, t) on a [B, D*M] batch, every row at the same step.
using DenoiseFn = std::function<Tensor(const Tensor&, std::size_t)>;

inline DenoiseFn denoise_fn(const Denoiser& model) {
  return [&model](const Tensor& x, std::size_t t) { return model.forward(x, t); };
}

/// Evenly spaced integer times T*i/K for i = K..0.
inline std::vector<std::size_t> time_grid(std::size_t T, std::size_t K) {
  if (K < 1) throw std::invalid_argument("time_grid: step count must be at least 1");
  if (K > T) throw std::invalid_argument("time_grid: step count " + std::to_string(K) + " exceeds T=" + std::to_string(T));
  std::vector<std::size_t> out(K + 1);
  for (std::size_t i = 0; i <= K; ++i) out[i] = T * (K - i) / K;
  return out;
}

/// Predicted noise implied by a clean prediction at step t > 0.
inline Tensor implied_noise(const Tensor& x_t, const Tensor& x0_hat, double ab) {
  return tg::scale(tg::sub(x_t, tg::scale(x0_hat, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
}

inline Tensor ddim_step(const Tensor& x_t, std::size_t t, std::size_t t_next, const DenoiseFn& d,
                        const NoiseSchedule& sched) {
  if (t == 0) throw std::invalid_argument("ddim_step: t must be positive");
  if (t <= t_next)
    throw std::invalid_argument("ddim_step: t=" + std::to_string(t) + " must exceed t_next=" + std::to_string(t_next));
  const double ab = sched.at(t), ab_next = sched.at(t_next);
  Tensor x0_hat = d(x_t, t);
  if (ab_next == 1.0) return x0_hat;
  Tensor eps_hat = implied_noise(x_t, x0_hat, ab);
  return tg::add(tg::scale(x0_hat, std::sqrt(ab_next)), tg::scale(eps_hat, std::sqrt(1.0 - ab_next)));
}

struct SolveOptions {
  std::size_t steps = 10;   // K
  bool checkpoint = false;  // one recompute segment per step
};

/// Decodes x_T (shape [B, D*M]) to clean motions along the K-step grid.
/// Differentiable with respect to x_T when it is recorded.
inline Tensor ddim_solve(const Tensor& x_T, const DenoiseFn& d, const NoiseSchedule& sched, SolveOptions opt = {}) {
  const auto grid = time_grid(sched.T, opt.steps);
  Tensor x = x_T;
  // Segments are re-run during backward, after the caller's arguments may be gone.
  std::shared_ptr<const DenoiseFn> fn;
  std::shared_ptr<const NoiseSchedule> sc;
  if (opt.checkpoint) {
    fn = std::make_shared<const DenoiseFn>(d);
    sc = std::make_shared<const NoiseSchedule>(sched);
  }
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const std::size_t t = grid[i], t_next = grid[i + 1];
    if (opt.checkpoint) {
      tg::SegmentFn<double> seg = [fn, sc, t, t_next](const std::vector<Tensor>& in) {
        return ddim_step(in[0], t, t_next, *fn, *sc);
      };
      x = tg::checkpoint(seg, {x});
    } else {
      x = ddim_step(x, t, t_next, d, sched);
    }
  }
  return x;
}

/// Runs the DDIM recurrence forward in time from a clean motion batch to a
/// latent at T, assuming d(x_t) ~ d(x_{t-1}). The first step starts from the
/// clean input itself, so its implied noise is zero.
inline Tensor ddim_invert(const Tensor& x0, const DenoiseFn& d, const NoiseSchedule& sched, std::size_t steps = 100) {
  auto grid = time_grid(sched.T, steps);
  std::reverse(grid.begin(), grid.end());
  Tensor x = x0.detach();
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const std::size_t t_prev = grid[i], t = grid[i + 1];
    const double ab = sched.at(t);
    Tensor x0_hat = x0.detach();
    std::optional<Tensor> eps_hat;
    if (t_prev > 0) {
      x0_hat = d(x, t_prev).detach();
      eps_hat = implied_noise(x, x0_hat, sched.at(t_prev));
    }
    x = tg::scale(x0_hat, std::sqrt(ab));
    if (eps_hat) x = tg::add(x, tg::scale(*eps_hat, std::sqrt(1.0 - ab)));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch = 64;
  double lr = 1e-4;
  double ema_decay = 0.999;
  bool cosine_lr = false;  // decay lr to zero over the run
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;    // mean over the epoch's steps
  double heldout_loss = 0.0;  // EMA weights, fixed noise draws
};

struct TrainResult {
  Denoiser model;  // EMA weights
  double initial_heldout_loss = 0.0;
  std::vector<EpochRecord> curve;
};

/// Stacks flattened motions into a [B, D*M] tensor.
inline Tensor stack_rows(const std::vector<Motion>& motions, std::span<const std::size_t> pick) {
  if (pick.empty()) throw std::invalid_argument("stack_rows: empty selection");
  const std::size_t w = motions[pick[0]].data.size();
  std::vector<double> out;
  out.reserve(pick.size() * w);
  for (auto i : pick) {
    if (motions[i].data.size() != w) throw tg::ShapeError("stack_rows: motions differ in size");
    out.insert(out.end(), motions[i].data.begin(), motions[i].data.end());
  }
  return Tensor(tg::Shape{pick.size(), w}, std::move(out));
}

inline Tensor stack_rows(const std::vector<Motion>& motions) {
  std::vector<std::size_t> all(motions.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return stack_rows(motions, all);
}

/// Mean squared error of d(q_sample(x0, t, eps), t) against x0 with one t per
/// row. `weights` overrides the model's stored weights.
inline Tensor training_loss(const Denoiser& model, const Tensor& x0, std::span<const std::size_t> t, const Tensor& eps,
                            const NoiseSchedule& sched, const std::vector<Tensor>* weights = nullptr) {
  const std::size_t rows = x0.shape()[0], w = x0.shape()[1];
  if (t.size() != rows) throw tg::ShapeError("training_loss: one step per row required");
  std::vector<double> xt(rows * w);
  auto xd = x0.data();
  auto ed = eps.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double ab = sched.at(t[r]), a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < w; ++i) xt[r * w + i] = a * xd[r * w + i] + b * ed[r * w + i];
  }
  const Tensor pred = model.forward(Tensor(x0.shape(), std::move(xt)), t, weights);
  return tg::mean(tg::square(tg::sub(pred, x0)));
}

namespace detail {

struct NoiseDraw {
  std::vector<std::size_t> t;
  Tensor eps;
};

inline NoiseDraw draw_noise(std::mt19937_64& rng, std::size_t rows, std::size_t width, std::size_t T) {
  std::uniform_int_distribution<std::size_t> ut(1, T);
  std::normal_distribution<double> n01;
  NoiseDraw d;
  d.t.resize(rows);
  for (auto& t : d.t) t = ut(rng);
  std::vector<double> e(rows * width);
  for (auto& v : e) v = n01(rng);
  d.eps = Tensor(tg::Shape{rows, width}, std::move(e));
  return d;
}

}  // namespace detail

/// Held-out loss with noise draws fixed by `seed`, evaluated in chunks.
inline double heldout_loss(const Denoiser& model, const std::vector<Motion>& heldout, const NoiseSchedule& sched,
                           std::uint64_t seed, std::size_t chunk = 64) {
  if (heldout.empty()) return 0.0;
  std::mt19937_64 rng(seed);
  double total = 0.0;
  for (std::size_t start = 0; start < heldout.size(); start += chunk) {
    const std::size_t n = std::min(chunk, heldout.size() - start);
    std::vector<std::size_t> pick(n);
    std::iota(pick.begin(), pick.end(), start);
    const Tensor x0 = stack_rows(heldout, pick);
    const auto draw = detail::draw_noise(rng, n, x0.shape()[1], sched.T);
    total += training_loss(model, x0, draw.t, draw.eps, sched).item() * static_cast<double>(n);
  }
  return total / static_cast<double>(heldout.size());
}

/// EMA decay ramps as (1 + n) / (10 + n) until it reaches the configured value.
inline double ema_decay_at(std::size_t step, double decay) {
  return std::min(decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains `init` on normalized motions and returns the EMA weights.
inline TrainResult train(const Denoiser& init, const std::vector<Motion>& data, const std::vector<Motion>& heldout,
                         const NoiseSchedule& sched, const TrainOptions& opt, const EpochCallback& on_epoch = {}) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (opt.batch == 0) throw std::invalid_argument("train: batch size must be positive");
  if (sched.T != init.config.diffusion_steps) throw std::invalid_argument("train: schedule length does not match model");
  const std::uint64_t heldout_seed = opt.seed ^ 0x6865'6c64'6f75'74ull;

  Denoiser model = init;
  TrainResult result;
  result.model = init;
  result.initial_heldout_loss = heldout_loss(init, heldout, sched, heldout_seed);

  std::vector<Adam> adam;
  for (const auto& w : model.weights) adam.emplace_back(w.numel());
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  const std::size_t total_steps = opt.epochs * ((data.size() + opt.batch - 1) / opt.batch);

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::size_t n = std::min(opt.batch, order.size() - start);
      const Tensor x0 = stack_rows(data, std::span<const std::size_t>(order).subspan(start, n));
      const auto draw = detail::draw_noise(rng, n, x0.shape()[1], sched.T);
      std::vector<std::vector<double>> grads;
      {
        tg::Graph<double> g;
        std::vector<Tensor> leaves;
        for (const auto& w : model.weights) leaves.push_back(g.leaf(w));
        const Tensor loss = training_loss(model, x0, draw.t, draw.eps, sched, &leaves);
        if (!std::isfinite(loss.item())) throw NumericalError("train: non-finite loss at step " + std::to_string(step));
        loss_sum += loss.item();
        const auto gm = g.backward(loss);
        for (const auto& l : leaves) grads.push_back(gm.at(l.node()).to_vector());
      }
      const double decay = ema_decay_at(step, opt.ema_decay);
      const double lr = opt.cosine_lr ? opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                                                             static_cast<double>(total_steps)))
                                      : opt.lr;
      for (std::size_t i = 0; i < model.weights.size(); ++i) {
        auto w = model.weights[i].mutable_data();
        adam[i].step(w, grads[i], lr);
        auto e = result.model.weights[i].mutable_data();
        for (std::size_t k = 0; k < w.size(); ++k) e[k] = decay * e[k] + (1.0 - decay) * w[k];
      }
      ++step;
      ++batches;
    }
    EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(batches),
                    heldout_loss(result.model, heldout, sched, heldout_seed)};
    result.curve.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace dno
