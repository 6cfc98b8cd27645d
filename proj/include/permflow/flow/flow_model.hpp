// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "permflow/dynamics/dynamics.hpp"
#include "permflow/ode/ode.hpp"

namespace permflow {

inline constexpr const char* kCheckpointFormat = "permflow-checkpoint-v1";

/// Conditional flow x = T^-1(z) with z ~ N(0, I) over all N*D coordinates.
/// Sampling integrates t0 -> t1, scoring integrates t1 -> t0.
struct FlowModel {
  DynamicsConfig dynamics;
  Architecture arch;
  DynamicsParams params;
  SolverConfig solver;
  std::uint64_t seed = 0;
};

FlowModel make_flow_model(const DynamicsConfig& dynamics, const Architecture& arch,
                          const SolverConfig& solver, std::uint64_t seed);

/// Image handed to the embedding network. Empty for an unconditioned model.
struct Condition {
  Tensor image;
};

/// log N(z; 0, I) summed over every coordinate.
double base_log_prob(const Tensor& z);

/// Augmented field [x, delta_logp, reg_l2, reg_l2div] for one condition.
/// Parameters, in order: f and g tensors as listed by parameter_refs, then
/// the embedding row. Embedding-network gradients are recovered by pulling
/// the embedding gradient back through the conv net.
class FlowField : public VjpField {
 public:
  FlowField(const FlowModel& model, std::size_t n, Tensor embedding);

  std::size_t state_size() const override { return n_ * d_ + AugmentedState::kExtra; }
  std::size_t param_size() const override { return param_size_; }
  void eval(double t, std::span<const double> y, std::span<double> dydt) override;
  void eval_vjp(double t, std::span<const double> y, std::span<const double> a,
                std::span<double> dydt, std::span<double> grad_y,
                std::span<double> grad_p) override;

  std::size_t evaluations() const { return evaluations_; }

 private:
  const FlowModel& model_;
  std::size_t n_;
  std::size_t d_;
  Tensor embedding_;
  std::size_t param_size_ = 0;
  std::size_t evaluations_ = 0;
};

struct TrajectoryPoint {
  double t = 0.0;
  Tensor x;
};

struct ScoredSample {
  Tensor x;
  Tensor z;
  double log_prob = 0.0;
  std::size_t nfe = 0;
  std::vector<TrajectoryPoint> trajectory;
};

ScoredSample sample(const FlowModel& model, std::size_t n, const Condition& cond,
                    std::mt19937_64& rng, bool record_trajectory = false);

/// Pushes a given base point forward; log_prob = log p_z(z) - delta_logp.
ScoredSample sample_from(const FlowModel& model, const Tensor& z, const Condition& cond,
                         bool record_trajectory = false);

struct Score {
  double log_prob = 0.0;  // nats per set
  Tensor z;
  double reg_l2 = 0.0;     // integral of sum |v|^2 over [t0, t1]
  double reg_l2div = 0.0;  // integral of the squared Jacobian blocks
  std::size_t nfe = 0;
};

Score score(const FlowModel& model, const Tensor& x, const Condition& cond);
double log_prob(const FlowModel& model, const Tensor& x, const Condition& cond);

enum class GradMode { kAdjoint, kFixedBackprop };

std::string to_string(GradMode mode);
GradMode grad_mode_from_string(const std::string& name);

struct TrainConfig {
  double lambda_l2 = 0.0;
  double lambda_l2div = 0.0;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  GradMode grad_mode = GradMode::kAdjoint;
  std::size_t fixed_steps = 32;  // RK4 steps for kFixedBackprop
  double max_seconds = 0.0;      // wall-clock training budget; 0 = none
};

/// Throws ConfigError on negative penalties, zero batch size or bad lr.
void validate(const TrainConfig& tc);

struct Datapoint {
  Tensor x;  // [N x D]
  Condition cond;
};

struct LossResult {
  double loss = 0.0;            // mean NLL + penalties
  double nll = 0.0;             // mean NLL, nats per set
  double reg_l2 = 0.0;          // mean integrated l2
  double reg_l2div = 0.0;       // mean integrated l2_div
  double nfe_mean = 0.0;        // forward plus gradient evaluations per record
  std::vector<double> gradient; // flat, in parameter_refs order
};

/// Mean over the batch of -log p(x) + lambda_l2 * R_l2 + lambda_l2div * R_l2div.
/// Each record is solved separately, so sets of different sizes can share a
/// batch. Throws NumericalError on a non-finite loss.
LossResult nll_loss(const FlowModel& model, std::span<const Datapoint> batch,
                    const TrainConfig& tc, bool with_gradient = true);

/// max |T^-1(T(x)) - x|.
double roundtrip(const FlowModel& model, const Tensor& x, const Condition& cond);

/// Flat copy of every parameter in parameter_refs order, and its inverse.
std::vector<double> flatten_params(const FlowModel& model);
void assign_params(FlowModel& model, std::span<const double> flat);

// Checkpoints: {"format", "model": {...}, "params": {...}, "model_hash"}.
nlohmann::json model_to_json(const FlowModel& model);
nlohmann::json checkpoint_to_json(const FlowModel& model);
FlowModel checkpoint_from_json(const nlohmann::json& doc);
/// FNV-1a of the canonical "model" section, as 16 hex digits.
std::string model_hash(const FlowModel& model);

}  // namespace permflow
