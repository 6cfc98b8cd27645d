// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/ode/ode.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "permflow/core/error.hpp"

namespace permflow {
namespace {

// Dormand & Prince (1980) RK5(4)7M.
constexpr double kC2 = 1.0 / 5, kC3 = 3.0 / 10, kC4 = 4.0 / 5, kC5 = 8.0 / 9;
constexpr double kA21 = 1.0 / 5;
constexpr double kA31 = 3.0 / 40, kA32 = 9.0 / 40;
constexpr double kA41 = 44.0 / 45, kA42 = -56.0 / 15, kA43 = 32.0 / 9;
constexpr double kA51 = 19372.0 / 6561, kA52 = -25360.0 / 2187, kA53 = 64448.0 / 6561,
                 kA54 = -212.0 / 729;
constexpr double kA61 = 9017.0 / 3168, kA62 = -355.0 / 33, kA63 = 46732.0 / 5247,
                 kA64 = 49.0 / 176, kA65 = -5103.0 / 18656;
constexpr double kB1 = 35.0 / 384, kB3 = 500.0 / 1113, kB4 = 125.0 / 192, kB5 = -2187.0 / 6784,
                 kB6 = 11.0 / 84;
// b - b_hat
constexpr double kE1 = 71.0 / 57600, kE3 = -71.0 / 16695, kE4 = 71.0 / 1920,
                 kE5 = -17253.0 / 339200, kE6 = 22.0 / 525, kE7 = -1.0 / 40;

// PI step control constants (Hairer, Norsett & Wanner).
constexpr double kSafety = 0.9;
constexpr double kBeta = 0.04;
constexpr double kExpo = 0.2 - kBeta * 0.75;
constexpr double kMaxGrow = 10.0;
constexpr double kMaxShrink = 5.0;

using Vec = std::vector<double>;

class Counter {
 public:
  Counter(OdeField& field, std::size_t max_nfe) : field_(field), max_nfe_(max_nfe) {}

  void operator()(double t, std::span<const double> y, std::span<double> dy) {
    if (nfe_ >= max_nfe_) {
      std::ostringstream msg;
      msg << "ODE solver exceeded max_nfe=" << max_nfe_ << " at t=" << t;
      throw SolverError(msg.str());
    }
    ++nfe_;
    field_.eval(t, y, dy);
    for (double v : dy) {
      if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << "non-finite dynamics at t=" << t << " after " << nfe_ << " evaluations";
        throw SolverError(msg.str());
      }
    }
  }

  std::size_t nfe() const { return nfe_; }

 private:
  OdeField& field_;
  std::size_t max_nfe_;
  std::size_t nfe_ = 0;
};

void check_finite(std::span<const double> y, double t) {
  for (double v : y) {
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "non-finite ODE state at t=" << t;
      throw SolverError(msg.str());
    }
  }
}

double rms_norm(std::span<const double> v, std::span<const double> y, const SolverConfig& cfg) {
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double s = v[i] / (cfg.atol + cfg.rtol * std::abs(y[i]));
    acc += s * s;
  }
  return std::sqrt(acc / static_cast<double>(std::max<std::size_t>(v.size(), 1)));
}

double initial_step(Counter& f, double t, std::span<const double> y, std::span<const double> f0,
                    double dir, double span_len, const SolverConfig& cfg) {
  const double d0 = rms_norm(y, y, cfg);
  const double d1 = rms_norm(f0, y, cfg);
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h0 = std::min(h0, span_len);
  Vec y1(y.size()), f1(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) y1[i] = y[i] + dir * h0 * f0[i];
  f(t + dir * h0, y1, f1);
  Vec diff(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) diff[i] = f1[i] - f0[i];
  const double d2 = rms_norm(diff, y, cfg) / h0;
  const double dmax = std::max(d1, d2);
  const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 0.2);
  return std::min({100.0 * h0, h1, span_len});
}

void rk4_step(Counter& f, double t, double h, std::span<const double> y, std::span<double> out) {
  const std::size_t n = y.size();
  Vec k1(n), k2(n), k3(n), k4(n), tmp(n);
  f(t, y, k1);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
  f(t + 0.5 * h, tmp, k2);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
  f(t + 0.5 * h, tmp, k3);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * k3[i];
  f(t + h, tmp, k4);
  for (std::size_t i = 0; i < n; ++i) out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

IntegrationResult integrate_fixed(OdeField& field, std::span<const double> y0, double t_start,
                                  double t_end, const SolverConfig& cfg, bool record) {
  Counter f(field, cfg.max_nfe);
  IntegrationResult res;
  Vec y(y0.begin(), y0.end()), next(y0.size());
  const double h = (t_end - t_start) / static_cast<double>(cfg.n_steps);
  if (record) res.trajectory.push_back({t_start, y});
  for (std::size_t s = 0; s < cfg.n_steps; ++s) {
    const double t = t_start + h * static_cast<double>(s);
    rk4_step(f, t, h, y, next);
    check_finite(next, t + h);
    y.swap(next);
    ++res.accepted;
    if (record) res.trajectory.push_back({s + 1 == cfg.n_steps ? t_end : t + h, y});
  }
  res.final_state = std::move(y);
  res.nfe = f.nfe();
  return res;
}

IntegrationResult integrate_dopri5(OdeField& field, std::span<const double> y0, double t_start,
                                   double t_end, const SolverConfig& cfg, bool record) {
  Counter f(field, cfg.max_nfe);
  IntegrationResult res;
  const std::size_t n = y0.size();
  const double dir = t_end >= t_start ? 1.0 : -1.0;
  const double span_len = std::abs(t_end - t_start);

  Vec y(y0.begin(), y0.end());
  Vec k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), tmp(n), y_new(n), err(n), scale_ref(n);
  double t = t_start;
  if (record) res.trajectory.push_back({t, y});
  if (span_len == 0.0) {
    res.final_state = y;
    return res;
  }

  f(t, y, k1);
  double h = initial_step(f, t, y, k1, dir, span_len, cfg);
  double err_old = 1e-4;
  bool last_rejected = false;

  while (true) {
    const double remaining = std::abs(t_end - t);
    if (remaining <= 1e-14 * std::max(1.0, std::abs(t_end))) break;
    bool last = false;
    if (h >= remaining) {
      h = remaining;
      last = true;
    }
    if (h < 1e-14 * std::max(1.0, std::abs(t))) {
      std::ostringstream msg;
      msg << "ODE step size underflow at t=" << t << " (h=" << h << ", nfe=" << f.nfe() << ")";
      throw SolverError(msg.str());
    }
    const double hs = dir * h;

    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + hs * kA21 * k1[i];
    f(t + kC2 * hs, tmp, k2);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + hs * (kA31 * k1[i] + kA32 * k2[i]);
    f(t + kC3 * hs, tmp, k3);
    for (std::size_t i = 0; i < n; ++i)
      tmp[i] = y[i] + hs * (kA41 * k1[i] + kA42 * k2[i] + kA43 * k3[i]);
    f(t + kC4 * hs, tmp, k4);
    for (std::size_t i = 0; i < n; ++i)
      tmp[i] = y[i] + hs * (kA51 * k1[i] + kA52 * k2[i] + kA53 * k3[i] + kA54 * k4[i]);
    f(t + kC5 * hs, tmp, k5);
    for (std::size_t i = 0; i < n; ++i)
      tmp[i] = y[i] + hs * (kA61 * k1[i] + kA62 * k2[i] + kA63 * k3[i] + kA64 * k4[i] + kA65 * k5[i]);
    f(t + hs, tmp, k6);
    for (std::size_t i = 0; i < n; ++i)
      y_new[i] = y[i] + hs * (kB1 * k1[i] + kB3 * k3[i] + kB4 * k4[i] + kB5 * k5[i] + kB6 * k6[i]);
    const double t_new = last ? t_end : t + hs;
    f(t_new, y_new, k7);
    for (std::size_t i = 0; i < n; ++i) {
      err[i] = hs * (kE1 * k1[i] + kE3 * k3[i] + kE4 * k4[i] + kE5 * k5[i] + kE6 * k6[i] + kE7 * k7[i]);
      scale_ref[i] = std::max(std::abs(y[i]), std::abs(y_new[i]));
    }
    const double e = rms_norm(err, scale_ref, cfg);
    if (!std::isfinite(e)) {
      std::ostringstream msg;
      msg << "non-finite error estimate at t=" << t;
      throw SolverError(msg.str());
    }

    const double fac11 = std::pow(e, kExpo);
    if (e <= 1.0) {
      double fac = fac11 / std::pow(err_old, kBeta);
      fac = std::clamp(fac / kSafety, 1.0 / kMaxGrow, kMaxShrink);
      double h_new = h / fac;
      if (last_rejected) h_new = std::min(h_new, h);
      err_old = std::max(e, 1e-4);
      t = t_new;
      y.swap(y_new);
      k1.swap(k7);
      ++res.accepted;
      last_rejected = false;
      if (record) res.trajectory.push_back({t, y});
      if (last) break;
      h = h_new;
    } else {
      h = h / std::min(kMaxShrink, fac11 / kSafety);
      ++res.rejected;
      last_rejected = true;
    }
  }
  check_finite(y, t);
  res.final_state = std::move(y);
  res.nfe = f.nfe();
  return res;
}

// Augmented adjoint system over [y, a, a_p].
class AdjointSystem : public OdeField {
 public:
  explicit AdjointSystem(VjpField& field)
      : field_(field), ns_(field.state_size()), np_(field.param_size()) {}

  std::size_t state_size() const override { return 2 * ns_ + np_; }

  void eval(double t, std::span<const double> s, std::span<double> ds) override {
    auto y = s.subspan(0, ns_);
    auto a = s.subspan(ns_, ns_);
    auto dy = ds.subspan(0, ns_);
    auto da = ds.subspan(ns_, ns_);
    auto dp = ds.subspan(2 * ns_, np_);
    field_.eval_vjp(t, y, a, dy, da, dp);
    for (double& v : da) v = -v;
    for (double& v : dp) v = -v;
  }

 private:
  VjpField& field_;
  std::size_t ns_;
  std::size_t np_;
};

}  // namespace

void validate(const SolverConfig& cfg) {
  if (!(cfg.rtol > 0.0) || !(cfg.atol > 0.0)) throw ConfigError("solver: rtol and atol must be > 0");
  if (!(cfg.t0 < cfg.t1)) throw ConfigError("solver: t0 must be < t1");
  if (cfg.n_steps < 1) throw ConfigError("solver: n_steps must be >= 1");
  if (cfg.max_nfe < 1) throw ConfigError("solver: max_nfe must be >= 1");
}

std::vector<double> AugmentedState::flatten() const {
  std::vector<double> flat(x.storage());
  flat.push_back(delta_logp);
  flat.push_back(reg_l2);
  flat.push_back(reg_l2div);
  return flat;
}

AugmentedState AugmentedState::unflatten(std::span<const double> flat, std::size_t n,
                                         std::size_t d) {
  if (flat.size() != n * d + kExtra) throw ShapeError("augmented state size mismatch");
  AugmentedState s;
  s.x = Tensor({n, d}, std::vector<double>(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(n * d)));
  s.delta_logp = flat[n * d];
  s.reg_l2 = flat[n * d + 1];
  s.reg_l2div = flat[n * d + 2];
  return s;
}

IntegrationResult integrate_interval(OdeField& field, std::span<const double> y0, double t_start,
                                     double t_end, const SolverConfig& cfg,
                                     bool record_trajectory) {
  validate(cfg);
  if (y0.size() != field.state_size()) throw ShapeError("integrate: initial state size mismatch");
  check_finite(y0, t_start);
  if (cfg.method == SolverMethod::kFixed) {
    return integrate_fixed(field, y0, t_start, t_end, cfg, record_trajectory);
  }
  return integrate_dopri5(field, y0, t_start, t_end, cfg, record_trajectory);
}

IntegrationResult integrate(OdeField& field, std::span<const double> y0, const SolverConfig& cfg,
                            Direction direction, bool record_trajectory) {
  return direction == Direction::kForward
             ? integrate_interval(field, y0, cfg.t0, cfg.t1, cfg, record_trajectory)
             : integrate_interval(field, y0, cfg.t1, cfg.t0, cfg, record_trajectory);
}

FixedTrajectory solve_fixed(OdeField& field, std::span<const double> y0, double t_start,
                            double t_end, std::size_t n_steps) {
  if (n_steps < 1) throw ConfigError("solve_fixed: n_steps must be >= 1");
  if (y0.size() != field.state_size()) throw ShapeError("solve_fixed: initial state size mismatch");
  Counter f(field, static_cast<std::size_t>(-1));
  FixedTrajectory traj;
  traj.t_start = t_start;
  traj.t_end = t_end;
  traj.n_steps = n_steps;
  traj.states.reserve(n_steps + 1);
  traj.states.emplace_back(y0.begin(), y0.end());
  const double h = (t_end - t_start) / static_cast<double>(n_steps);
  Vec next(y0.size());
  for (std::size_t s = 0; s < n_steps; ++s) {
    rk4_step(f, t_start + h * static_cast<double>(s), h, traj.states.back(), next);
    check_finite(next, t_start + h * static_cast<double>(s + 1));
    traj.states.push_back(next);
  }
  return traj;
}

GradientResult backprop_through_solver(VjpField& field, const FixedTrajectory& traj,
                                       std::span<const double> final_cotangent) {
  const std::size_t n = field.state_size();
  const std::size_t np = field.param_size();
  if (final_cotangent.size() != n) throw ShapeError("backprop_through_solver: cotangent size mismatch");
  if (traj.states.size() != traj.n_steps + 1) throw ShapeError("backprop_through_solver: bad trajectory");

  GradientResult res;
  res.grad_params.assign(np, 0.0);
  Vec abar(final_cotangent.begin(), final_cotangent.end());
  const double h = (traj.t_end - traj.t_start) / static_cast<double>(traj.n_steps);
  Vec k1(n), k2(n), k3(n), y2(n), y3(n), y4(n), dy(n), gy(n), gp(np), ak(n), ay(n);

  auto pull = [&](double t, std::span<const double> y, std::span<const double> a) {
    field.eval_vjp(t, y, a, dy, gy, gp);
    ++res.nfe;
    for (std::size_t i = 0; i < np; ++i) res.grad_params[i] += gp[i];
  };

  for (std::size_t s = traj.n_steps; s-- > 0;) {
    const auto& y = traj.states[s];
    const double t = traj.t_start + h * static_cast<double>(s);
    // Recompute the stage inputs of this step.
    field.eval(t, y, k1);
    for (std::size_t i = 0; i < n; ++i) y2[i] = y[i] + 0.5 * h * k1[i];
    field.eval(t + 0.5 * h, y2, k2);
    for (std::size_t i = 0; i < n; ++i) y3[i] = y[i] + 0.5 * h * k2[i];
    field.eval(t + 0.5 * h, y3, k3);
    for (std::size_t i = 0; i < n; ++i) y4[i] = y[i] + h * k3[i];
    res.nfe += 3;

    // y_next = y + h/6 (k1 + 2 k2 + 2 k3 + k4)
    ay = abar;
    for (std::size_t i = 0; i < n; ++i) ak[i] = h / 6.0 * abar[i];  // cotangent of k4
    pull(t + h, y4, ak);
    Vec ak3(n);
    for (std::size_t i = 0; i < n; ++i) {
      ay[i] += gy[i];
      ak3[i] = h / 3.0 * abar[i] + h * gy[i];
    }
    pull(t + 0.5 * h, y3, ak3);
    Vec ak2(n);
    for (std::size_t i = 0; i < n; ++i) {
      ay[i] += gy[i];
      ak2[i] = h / 3.0 * abar[i] + 0.5 * h * gy[i];
    }
    pull(t + 0.5 * h, y2, ak2);
    Vec ak1(n);
    for (std::size_t i = 0; i < n; ++i) {
      ay[i] += gy[i];
      ak1[i] = h / 6.0 * abar[i] + 0.5 * h * gy[i];
    }
    pull(t, y, ak1);
    for (std::size_t i = 0; i < n; ++i) ay[i] += gy[i];
    abar.swap(ay);
  }
  res.grad_y0 = std::move(abar);
  return res;
}

GradientResult adjoint_gradients(VjpField& field, std::span<const double> final_state,
                                 std::span<const double> final_cotangent, double t_start,
                                 double t_end, const SolverConfig& cfg) {
  const std::size_t n = field.state_size();
  const std::size_t np = field.param_size();
  if (final_state.size() != n || final_cotangent.size() != n) {
    throw ShapeError("adjoint_gradients: state or cotangent size mismatch");
  }
  AdjointSystem system(field);
  Vec s0(2 * n + np, 0.0);
  std::copy(final_state.begin(), final_state.end(), s0.begin());
  std::copy(final_cotangent.begin(), final_cotangent.end(), s0.begin() + static_cast<std::ptrdiff_t>(n));
  SolverConfig adaptive = cfg;
  IntegrationResult r = integrate_interval(system, s0, t_end, t_start, adaptive);
  GradientResult res;
  res.grad_y0.assign(r.final_state.begin() + static_cast<std::ptrdiff_t>(n),
                     r.final_state.begin() + static_cast<std::ptrdiff_t>(2 * n));
  res.grad_params.assign(r.final_state.begin() + static_cast<std::ptrdiff_t>(2 * n), r.final_state.end());
  res.nfe = r.nfe;
  return res;
}

}  // namespace permflow
