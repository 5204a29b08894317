#pragma once

// Loss-guided DDIM sampling: each step nudges x_t along the gradient of the
// criterion evaluated on the one-shot clean prediction d(x_t, t), then takes
// the ordinary deterministic step. No gradient crosses steps.

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dno/diffusion.hpp"
#include "dno/dno.hpp"

namespace dno {

/// Scalar criterion on a predicted clean motion in meters ([6,M]).
using GuidanceCriterion = std::function<Tensor(const Tensor& motion, std::size_t candidate)>;

struct GuidedOptions {
  std::size_t steps = 10;  // K
  double scale = 0.0;      // s
  std::size_t iters = 1;   // guidance updates per step
};

/// Denoiser evaluations spent by one guided sample.
inline std::size_t guided_evaluations(const GuidedOptions& o) {
  return o.scale == 0.0 ? o.steps : o.steps * (o.iters + 1);
}

namespace detail {

/// Gradient of the summed per-row criteria with respect to x_t ([B, D*M]).
inline std::vector<double> guidance_gradient(const Tensor& x_t, std::size_t t, const Denoiser& model,
                                             const GuidanceCriterion& criterion) {
  const std::size_t rows = x_t.shape()[0], w = model.config.input_dim(), m = model.config.frames;
  tg::Graph<double> g;
  const Tensor x = g.leaf(x_t.detach());
  const Tensor x0 = model.forward(x, t);
  const Tensor flat = tg::reshape(x0, tg::Shape{1, rows * w});
  std::optional<Tensor> total;
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<std::size_t> idx(w);
    std::iota(idx.begin(), idx.end(), r * w);
    const Tensor motion = denormalize(tg::reshape(tg::gather(flat, std::move(idx)), tg::Shape{kFeatures, m}), model.stats);
    const Tensor v = criterion(motion, r);
    if (v.numel() != 1) throw tg::ShapeError("guided: criterion must return a scalar");
    total = total ? tg::add(*total, v) : v;
  }
  if (!total->recorded()) return std::vector<double>(x_t.numel(), 0.0);
  return g.backward(*total).at(x).to_vector();
}

}  // namespace detail

/// Samples from x_T ([B, D*M], normalized) with guidance x_t <- x_t - s (1 - ab_t) grad.
/// A zero scale performs exactly the unguided solve.
inline Tensor guided_sample(const Tensor& x_T, const Denoiser& model, const NoiseSchedule& sched,
                            const GuidanceCriterion& criterion, const GuidedOptions& opt) {
  if (opt.scale < 0.0) throw std::invalid_argument("guided: scale must be non-negative");
  const DenoiseFn d = denoise_fn(model);
  if (opt.scale == 0.0) return ddim_solve(x_T.detach(), d, sched, {opt.steps, false});
  const auto grid = time_grid(sched.T, opt.steps);
  Tensor x = x_T.detach();
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const std::size_t t = grid[i];
    const double coef = opt.scale * (1.0 - sched.at(t));
    for (std::size_t it = 0; it < opt.iters; ++it) {
      const auto grad = detail::guidance_gradient(x, t, model, criterion);
      std::vector<double> next = x.to_vector();
      for (std::size_t k = 0; k < next.size(); ++k) {
        if (!std::isfinite(grad[k]))
          throw NumericalError("guided: non-finite guidance gradient at step " + std::to_string(i) + " (t=" +
                               std::to_string(t) + ")");
        next[k] -= coef * grad[k];
      }
      x = Tensor(x.shape(), std::move(next));
    }
    x = ddim_step(x, t, grid[i + 1], d, sched);
  }
  return x;
}

}  // namespace dno
