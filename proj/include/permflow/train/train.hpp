// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "permflow/flow/flow_model.hpp"
#include "permflow/tasks/tasks.hpp"

namespace permflow {

/// Adam with fixed moment decay and no schedule.
struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

OptimizerState make_optimizer(std::size_t n_params, double lr);

/// One bias-corrected Adam update of `params` in place.
void adam_step(OptimizerState& state, std::span<double> params, std::span<const double> grad);

struct HistoryRow {
  std::size_t epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double nfe_mean = 0.0;
};

struct TrainResult {
  FlowModel model;  // best validation NLL seen, or the initial model
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;  // 0 when no epoch improved on the initial model
  bool aborted = false;        // a non-finite loss or solver failure stopped training
  std::string abort_reason;
  bool budget_exhausted = false;
};

using EpochCallback = std::function<void(const HistoryRow&)>;

/// Adam on nll_loss over shuffled minibatches. Stops after tc.epochs, after
/// tc.patience epochs without a validation improvement, or when the wall-clock
/// budget runs out. Numerical failures end training with the last good model.
TrainResult train(const FlowModel& init, std::span<const Datapoint> train_set,
                  std::span<const Datapoint> val_set, const TrainConfig& tc,
                  const EpochCallback& on_epoch = {});

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> history);

// Datapoints for a task: encoded targets plus the condition image.
Datapoint make_datapoint(const SceneRecord& record, TaskKind task, std::size_t dim,
                         const RasterSpec& raster = {});
std::vector<Datapoint> make_datapoints(std::span<const SceneRecord> records, TaskKind task,
                                       std::size_t dim, const RasterSpec& raster = {});

struct NllStats {
  double mean = 0.0;    // nats per set
  double sem = 0.0;     // standard error of the mean
  double nfe_mean = 0.0;
  std::size_t count = 0;
};

NllStats eval_nll(const FlowModel& model, std::span<const Datapoint> data);

/// Draws one set of n elements for a scene; reports the evaluations used.
using Sampler = std::function<Tensor(const SceneRecord& scene, std::size_t n, std::mt19937_64& rng,
                                     std::size_t& nfe)>;

Sampler flow_sampler(const FlowModel& model, TaskKind task, const RasterSpec& raster = {});
/// Replays the scene's own targets.
Sampler oracle_sampler(std::size_t dim);
/// Draws every element from the standard normal base.
Sampler prior_sampler(std::size_t dim);

struct AcceptanceResult {
  InfractionRates rates;
  double nfe_mean = 0.0;
  std::size_t failures = 0;  // solver errors, counted as invalid
};

/// n_override = 0 samples as many elements as each scene has targets.
AcceptanceResult eval_acceptance(const Sampler& sampler, std::span<const SceneRecord> scenes,
                                 std::size_t samples_per_scene, std::uint64_t seed,
                                 std::size_t n_override = 0);

struct Match {
  std::size_t sample = 0;
  std::size_t truth = 0;
  double iou = 0.0;
};

/// Repeatedly pairs the highest-IOU (sample, truth) pair among the unmatched.
/// Ties go to the lowest sample index, then the lowest truth index.
std::vector<Match> greedy_match(std::span<const Box> samples, std::span<const Box> truth);

struct IouResult {
  double iou_mean = 0.0;  // over all matched pairs of all sampled sets
  std::size_t pairs = 0;
  double nfe_mean = 0.0;
  std::size_t failures = 0;
};

IouResult eval_iou(const Sampler& sampler, std::span<const SceneRecord> scenes,
                   std::size_t samples_per_scene, std::uint64_t seed,
                   double fixed_width = kTargetWidth);

/// Largest |log p(sigma x) - log p(x)| over n_perms random permutations of
/// every datapoint.
double invariance_audit(const FlowModel& model, std::span<const Datapoint> data,
                        std::size_t n_perms, std::uint64_t seed);

/// Full-covariance normal over flattened fixed-N sets in stored order.
struct GaussianBaseline {
  std::vector<double> mean;
  std::vector<double> chol;  // lower Cholesky factor, row-major dim x dim
  std::size_t dim = 0;
  std::size_t n = 0;         // set size it was fitted for
  double log_det = 0.0;
  bool ridged = false;       // 1e-6 was added to the diagonal
};

GaussianBaseline gaussian_baseline(std::span<const Datapoint> train_set);
double log_prob(const GaussianBaseline& model, const Tensor& x);
NllStats eval_nll(const GaussianBaseline& model, std::span<const Datapoint> data);

inline constexpr const char* kReportFormat = "permflow-eval-v1";

struct EvalReport {
  double nll_mean = 0.0;
  double nll_stderr = 0.0;
  double acceptance_rate = 0.0;
  double overlap_rate = 0.0;
  double region_rate = 0.0;
  double iou_mean = 0.0;
  double nfe_mean = 0.0;
  double invariance_max_dev = 0.0;
  std::size_t sample_count = 0;
  std::size_t scene_count = 0;
  std::size_t samples_per_scene = 0;
  std::size_t failures = 0;
  std::uint64_t seed = 0;
};

nlohmann::json report_to_json(const EvalReport& report);

}  // namespace permflow
