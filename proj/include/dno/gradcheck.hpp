#pragma once

// Finite-difference oracles for reverse-mode gradients: every primitive, the
// denoiser forward and full DDIM chains. Each instance draws fresh shapes and
// values; the scalar under test is the output projected onto fixed random
// weights so every output entry contributes.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dno/denoiser.hpp"
#include "dno/diffusion.hpp"

namespace dno::oracles {

inline constexpr double kStep = 1e-5;
inline constexpr double kFloor = 1e-5;  // absolute scale below which errors are not relative
inline constexpr double kTolerance = 1e-4;

struct OracleResult {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;

  bool passed(double tolerance = kTolerance) const { return instances > 0 && max_rel_error <= tolerance; }
};

namespace detail {

inline std::vector<double> normals(std::mt19937_64& rng, std::size_t n, double sigma = 1.0) {
  std::normal_distribution<double> d(0.0, sigma);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

/// Uniform in +-[lo, hi]: magnitudes bounded away from zero.
inline std::vector<double> away_from_zero(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(n);
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return v;
}

inline Tensor random_tensor(std::mt19937_64& rng, tg::Shape shape) {
  const std::size_t n = tg::numel_of(shape);
  return Tensor(std::move(shape), normals(rng, n));
}

inline std::size_t extent(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Tensor project(const Tensor& y, const std::vector<double>& w) {
  return tg::sum(tg::mul(y, Tensor(y.shape(), w)));
}

/// Relative error of one instance: f maps the probed tensor to an output of
/// any shape, which is projected onto weights drawn here.
inline double check(std::mt19937_64& rng, const std::function<Tensor(const Tensor&)>& f, const Tensor& point) {
  const auto w = normals(rng, f(point.detach()).numel());
  const auto r = tg::grad_check(std::function<Tensor(const Tensor&)>([&](const Tensor& x) { return project(f(x), w); }),
                                point, kStep, kFloor);
  return r.max_rel_error;
}

using Instance = std::function<double(std::mt19937_64&)>;

inline OracleResult run_family(const std::string& name, std::size_t instances, std::uint64_t seed, const Instance& one) {
  std::mt19937_64 rng(seed);
  OracleResult r{name, 0, 0.0};
  for (std::size_t i = 0; i < instances; ++i) {
    r.max_rel_error = std::max(r.max_rel_error, one(rng));
    ++r.instances;
  }
  return r;
}

// Elementwise binary op with the probed operand on a random side, optionally
// broadcasting the other operand along the trailing extent.
inline Instance binary_instance(Tensor (*op)(const Tensor&, const Tensor&)) {
  return [op](std::mt19937_64& rng) {
    const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 6);
    const bool broadcast = std::bernoulli_distribution(0.5)(rng);
    const bool probe_small = broadcast && std::bernoulli_distribution(0.5)(rng);
    const bool probe_left = std::bernoulli_distribution(0.5)(rng);
    const Tensor big = random_tensor(rng, {r, c});
    const Tensor small = random_tensor(rng, broadcast ? tg::Shape{c} : tg::Shape{r, c});
    const Tensor& probed = probe_small ? small : big;
    const Tensor& other = probe_small ? big : small;
    return check(rng, [&](const Tensor& x) { return probe_left ? op(x, other) : op(other, x); }, probed);
  };
}

inline Tensor add_op(const Tensor& a, const Tensor& b) { return tg::add(a, b); }
inline Tensor sub_op(const Tensor& a, const Tensor& b) { return tg::sub(a, b); }
inline Tensor mul_op(const Tensor& a, const Tensor& b) { return tg::mul(a, b); }

}  // namespace detail

/// One result per primitive (plus minimum and checkpoint), `instances` each.
inline std::vector<OracleResult> primitive_oracles(std::size_t instances, std::uint64_t seed) {
  using namespace detail;
  std::vector<std::pair<std::string, Instance>> fam;
  fam.emplace_back("add", binary_instance(add_op));
  fam.emplace_back("sub", binary_instance(sub_op));
  fam.emplace_back("mul", binary_instance(mul_op));
  fam.emplace_back("scale", [](std::mt19937_64& rng) {
    const double c = normals(rng, 1, 2.0)[0];
    return check(rng, [c](const Tensor& x) { return tg::scale(x, c); }, random_tensor(rng, {extent(rng, 1, 4), extent(rng, 1, 6)}));
  });
  fam.emplace_back("matmul", [](std::mt19937_64& rng) {
    const std::size_t n = extent(rng, 1, 5), k = extent(rng, 1, 7), m = extent(rng, 1, 5);
    const Tensor a = random_tensor(rng, {n, k}), b = random_tensor(rng, {k, m});
    if (std::bernoulli_distribution(0.5)(rng)) return check(rng, [&](const Tensor& x) { return tg::matmul(x, b); }, a);
    return check(rng, [&](const Tensor& x) { return tg::matmul(a, x); }, b);
  });
  fam.emplace_back("silu", [](std::mt19937_64& rng) {
    const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 6);
    return check(rng, [](const Tensor& x) { return tg::silu(x); }, Tensor({r, c}, normals(rng, r * c, 2.0)));
  });
  fam.emplace_back("concat", [](std::mt19937_64& rng) {
    const std::size_t r = extent(rng, 1, 4);
    const Tensor a = random_tensor(rng, {r, extent(rng, 1, 5)}), b = random_tensor(rng, {r, extent(rng, 1, 5)});
    const bool first = std::bernoulli_distribution(0.5)(rng);
    return check(rng, [&](const Tensor& x) { return first ? tg::concat(std::vector<Tensor>{x, b}) : tg::concat(std::vector<Tensor>{b, x, b}); }, a);
  });
  fam.emplace_back("reshape", [](std::mt19937_64& rng) {
    const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 6);
    return check(rng, [&](const Tensor& x) { return tg::reshape(x, {c, r}); }, random_tensor(rng, {r, c}));
  });
  fam.emplace_back("sum", [](std::mt19937_64& rng) {
    const auto axis = std::bernoulli_distribution(0.5)(rng) ? tg::Axis::All : tg::Axis::Last;
    return check(rng, [axis](const Tensor& x) { return tg::sum(x, axis); }, random_tensor(rng, {extent(rng, 1, 4), extent(rng, 1, 6)}));
  });
  fam.emplace_back("mean", [](std::mt19937_64& rng) {
    const auto axis = std::bernoulli_distribution(0.5)(rng) ? tg::Axis::All : tg::Axis::Last;
    return check(rng, [axis](const Tensor& x) { return tg::mean(x, axis); }, random_tensor(rng, {extent(rng, 1, 4), extent(rng, 1, 6)}));
  });
  fam.emplace_back("gather", [](std::mt19937_64& rng) {
    const std::size_t c = extent(rng, 1, 6);
    std::vector<std::size_t> idx(extent(rng, 1, 8));
    for (auto& i : idx) i = extent(rng, 0, c - 1);
    return check(rng, [&](const Tensor& x) { return tg::gather(x, idx); }, random_tensor(rng, {extent(rng, 1, 3), c}));
  });
  fam.emplace_back("avgpool2", [](std::mt19937_64& rng) {
    return check(rng, [](const Tensor& x) { return tg::avgpool2(x); }, random_tensor(rng, {extent(rng, 1, 4), 2 * extent(rng, 1, 4)}));
  });
  fam.emplace_back("abs", [](std::mt19937_64& rng) {
    const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 6);
    return check(rng, [](const Tensor& x) { return tg::abs(x); }, Tensor({r, c}, away_from_zero(rng, r * c, 0.1, 2.0)));
  });
  fam.emplace_back("square", [](std::mt19937_64& rng) {
    return check(rng, [](const Tensor& x) { return tg::square(x); }, random_tensor(rng, {extent(rng, 1, 4), extent(rng, 1, 6)}));
  });
  fam.emplace_back("min_const", [](std::mt19937_64& rng) {
    const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 6);
    const double k = normals(rng, 1)[0];
    auto v = away_from_zero(rng, r * c, 0.1, 2.0);
    for (auto& x : v) x += k;
    return check(rng, [k](const Tensor& x) { return tg::min_const(x, k); }, Tensor({r, c}, std::move(v)));
  });
  fam.emplace_back("sqrt", [](std::mt19937_64& rng) {
    const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 6);
    std::uniform_real_distribution<double> u(0.25, 4.0);
    std::vector<double> v(r * c);
    for (auto& x : v) x = u(rng);
    return check(rng, [](const Tensor& x) { return tg::sqrt(x); }, Tensor({r, c}, std::move(v)));
  });
  fam.emplace_back("minimum", [](std::mt19937_64& rng) {
    const std::size_t r = extent(rng, 1, 4), c = extent(rng, 1, 6);
    const Tensor b = random_tensor(rng, {r, c});
    auto v = away_from_zero(rng, r * c, 0.1, 2.0);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += b[i];
    return check(rng, [&](const Tensor& x) { return tg::minimum(x, b); }, Tensor({r, c}, std::move(v)));
  });
  fam.emplace_back("checkpoint", [](std::mt19937_64& rng) {
    const std::size_t n = extent(rng, 1, 4), k = extent(rng, 1, 5);
    const Tensor w = random_tensor(rng, {k, k});
    const tg::SegmentFn<double> seg = [w](const std::vector<Tensor>& in) { return tg::silu(tg::matmul(in[0], w)); };
    return check(rng, [&](const Tensor& x) { return tg::checkpoint(seg, {x}); }, random_tensor(rng, {n, k}));
  });

  std::vector<OracleResult> out;
  for (std::size_t f = 0; f < fam.size(); ++f) out.push_back(run_family(fam[f].first, instances, seed + f, fam[f].second));
  return out;
}

/// A small denoiser with every weight random, so no gradient path is zero.
inline Denoiser oracle_model(std::uint64_t seed) {
  DenoiserConfig c;
  c.frames = 8;
  c.width = 16;
  c.blocks = 2;
  Denoiser d = Denoiser::initialize(c, seed);
  std::mt19937_64 rng(seed ^ 0x5DEECE66Dull);
  for (auto& w : d.weights) {
    auto v = detail::normals(rng, w.numel(), 0.3);
    w = Tensor(w.shape(), std::move(v));
  }
  return d;
}

/// Gradients of the denoiser output with respect to its input or to one
/// randomly chosen weight array, alternating by instance.
inline OracleResult denoiser_oracle(std::size_t instances, std::uint64_t seed) {
  const Denoiser model = oracle_model(seed);
  std::size_t n = 0;
  return detail::run_family("denoiser", instances, seed, [&](std::mt19937_64& rng) {
    const std::size_t rows = detail::extent(rng, 1, 3);
    const std::size_t t = detail::extent(rng, 1, model.config.diffusion_steps);
    const Tensor x = detail::random_tensor(rng, {rows, model.config.input_dim()});
    if (n++ % 2 == 0) return detail::check(rng, [&](const Tensor& v) { return model.forward(v, t); }, x);
    const std::size_t which = detail::extent(rng, 0, model.weights.size() - 1);
    return detail::check(
        rng,
        [&](const Tensor& v) {
          auto w = model.weights;
          w[which] = v;
          const std::size_t ts[1] = {t};
          return model.forward(x, std::span<const std::size_t>(ts, 1), &w);
        },
        model.weights[which]);
  });
}

/// Gradient of the K-step deterministic solve with respect to x_T, with
/// per-step checkpointing on odd instances.
inline OracleResult ddim_oracle(std::size_t steps, std::size_t instances, std::uint64_t seed) {
  const Denoiser model = oracle_model(seed);
  const NoiseSchedule sched = make_schedule(model.config.diffusion_steps);
  const DenoiseFn d = denoise_fn(model);
  std::size_t n = 0;
  return detail::run_family("ddim-" + std::to_string(steps), instances, seed, [&](std::mt19937_64& rng) {
    const bool ckpt = n++ % 2 == 1;
    const Tensor x = detail::random_tensor(rng, {1, model.config.input_dim()});
    return detail::check(rng, [&](const Tensor& v) { return ddim_solve(v, d, sched, {steps, ckpt}); }, x);
  });
}

/// The full battery: primitives, denoiser and DDIM-K for K in {2, 5, 10}.
inline std::vector<OracleResult> all_oracles(std::size_t instances, std::uint64_t seed) {
  auto out = primitive_oracles(instances, seed);
  out.push_back(denoiser_oracle(instances, seed));
  for (std::size_t k : {2, 5, 10}) out.push_back(ddim_oracle(k, instances, seed + k));
  return out;
}

}  // namespace dno::oracles
