// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "permflow/diff/tensor.hpp"

namespace permflow {

enum class SolverMethod { kAdaptive, kFixed };
enum class Direction { kForward, kBackward };

struct SolverConfig {
  SolverMethod method = SolverMethod::kAdaptive;
  double rtol = 1e-6;
  double atol = 1e-6;
  std::size_t n_steps = 32;  // fixed-step RK4 only
  double t0 = 0.0;
  double t1 = 1.0;
  std::size_t max_nfe = 100000;
};

/// Throws ConfigError on non-positive tolerances, empty intervals or zero steps.
void validate(const SolverConfig& cfg);

/// Right-hand side dy/dt = f(t, y).
class OdeField {
 public:
  virtual ~OdeField() = default;
  virtual std::size_t state_size() const = 0;
  virtual void eval(double t, std::span<const double> y, std::span<double> dydt) = 0;
};

/// A field that can also pull a cotangent back through itself.
class VjpField : public OdeField {
 public:
  virtual std::size_t param_size() const = 0;
  /// dydt = f(t, y); grad_y = a^T df/dy; grad_p = a^T df/dp.
  virtual void eval_vjp(double t, std::span<const double> y, std::span<const double> a,
                        std::span<double> dydt, std::span<double> grad_y,
                        std::span<double> grad_p) = 0;
};

/// (x, delta_logp, reg_l2, reg_l2div). The accumulators hold the signed
/// integral of their density from the start of integration.
struct AugmentedState {
  Tensor x;
  double delta_logp = 0.0;
  double reg_l2 = 0.0;
  double reg_l2div = 0.0;

  static constexpr std::size_t kExtra = 3;

  std::vector<double> flatten() const;
  static AugmentedState unflatten(std::span<const double> flat, std::size_t n, std::size_t d);
};

struct Snapshot {
  double t = 0.0;
  std::vector<double> y;
};

struct IntegrationResult {
  std::vector<double> final_state;
  std::size_t nfe = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<Snapshot> trajectory;  // accepted step endpoints, when requested
};

/// Integrates from t_start to t_end (either ordering). Adaptive mode runs
/// Dormand-Prince 5(4) with an RMS error norm over every state component;
/// fixed mode takes cfg.n_steps equal RK4 steps.
IntegrationResult integrate_interval(OdeField& field, std::span<const double> y0, double t_start,
                                     double t_end, const SolverConfig& cfg,
                                     bool record_trajectory = false);

/// Forward runs cfg.t0 -> cfg.t1, backward runs cfg.t1 -> cfg.t0.
IntegrationResult integrate(OdeField& field, std::span<const double> y0, const SolverConfig& cfg,
                            Direction direction, bool record_trajectory = false);

struct GradientResult {
  std::vector<double> grad_y0;
  std::vector<double> grad_params;
  std::size_t nfe = 0;
};

/// States at every step of a fixed-step RK4 solve, kept so the discrete
/// solver can be differentiated step by step.
struct FixedTrajectory {
  double t_start = 0.0;
  double t_end = 0.0;
  std::size_t n_steps = 0;
  std::vector<std::vector<double>> states;  // n_steps + 1 entries

  const std::vector<double>& final_state() const { return states.back(); }
};

FixedTrajectory solve_fixed(OdeField& field, std::span<const double> y0, double t_start,
                            double t_end, std::size_t n_steps);

/// Exact gradient of a loss of the final state through the discrete RK4
/// solve, given dL/dy(t_end). Each step is re-evaluated from its stored
/// state and pulled back through the field's vjp.
GradientResult backprop_through_solver(VjpField& field, const FixedTrajectory& traj,
                                       std::span<const double> final_cotangent);

/// Continuous adjoint: integrates [y, a, a_p] from t_end back to t_start with
/// da/dt = -a^T df/dy and da_p/dt = -a^T df/dp, starting from the final
/// state and dL/dy(t_end).
GradientResult adjoint_gradients(VjpField& field, std::span<const double> final_state,
                                 std::span<const double> final_cotangent, double t_start,
                                 double t_end, const SolverConfig& cfg);

}  // namespace permflow
