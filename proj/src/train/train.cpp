// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/train/train.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <numeric>

#include "permflow/core/error.hpp"

namespace permflow {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor out(x.shape(), 0.0);
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t k = 0; k < d; ++k) out.at(i, k) = x.at(perm[i], k);
  return out;
}

}  // namespace

OptimizerState make_optimizer(std::size_t n_params, double lr) {
  OptimizerState s;
  s.m.assign(n_params, 0.0);
  s.v.assign(n_params, 0.0);
  s.lr = lr;
  return s;
}

void adam_step(OptimizerState& s, std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size() || s.m.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grad[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    params[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

NllStats eval_nll(const FlowModel& model, std::span<const Datapoint> data) {
  NllStats st;
  st.count = data.size();
  if (data.empty()) return st;
  std::vector<double> nll(data.size());
  double nfe = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Score s = score(model, data[i].x, data[i].cond);
    nll[i] = -s.log_prob;
    nfe += static_cast<double>(s.nfe);
  }
  const double n = static_cast<double>(data.size());
  st.mean = std::accumulate(nll.begin(), nll.end(), 0.0) / n;
  if (data.size() > 1) {
    double ss = 0.0;
    for (double v : nll) ss += (v - st.mean) * (v - st.mean);
    st.sem = std::sqrt(ss / (n - 1.0) / n);
  }
  st.nfe_mean = nfe / n;
  return st;
}

TrainResult train(const FlowModel& init, std::span<const Datapoint> train_set,
                  std::span<const Datapoint> val_set, const TrainConfig& tc,
                  const EpochCallback& on_epoch) {
  validate(tc);
  TrainResult res;
  res.model = init;
  if (tc.epochs == 0) return res;
  if (train_set.empty()) throw DataError("train: empty training set");
  if (val_set.empty()) throw DataError("train: empty validation set");

  const auto start = Clock::now();
  FlowModel model = init;
  std::vector<double> params = flatten_params(model);
  OptimizerState opt = make_optimizer(params.size(), tc.lr);
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  double best_val = std::numeric_limits<double>::infinity();
  try {
    best_val = eval_nll(model, val_set).mean;
  } catch (const Error& e) {
    res.aborted = true;
    res.abort_reason = e.what();
    return res;
  }
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double nll_sum = 0.0, nfe_sum = 0.0;
    std::size_t seen = 0;
    std::vector<Datapoint> batch;
    try {
      for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
        const std::size_t e = std::min(order.size(), b + tc.batch_size);
        batch.clear();
        for (std::size_t k = b; k < e; ++k) batch.push_back(train_set[order[k]]);
        const LossResult lr = nll_loss(model, batch, tc, true);
        for (double g : lr.gradient) {
          if (!std::isfinite(g)) throw NumericalError("train: non-finite gradient");
        }
        adam_step(opt, params, lr.gradient);
        assign_params(model, params);
        nll_sum += lr.nll * static_cast<double>(batch.size());
        nfe_sum += lr.nfe_mean * static_cast<double>(batch.size());
        seen += batch.size();
        if (tc.max_seconds > 0.0 && seconds_since(start) >= tc.max_seconds) {
          res.budget_exhausted = true;
          break;
        }
      }
      HistoryRow row;
      row.epoch = epoch;
      row.train_nll = nll_sum / static_cast<double>(seen);
      row.nfe_mean = nfe_sum / static_cast<double>(seen);
      row.val_nll = eval_nll(model, val_set).mean;
      if (!std::isfinite(row.val_nll)) throw NumericalError("train: non-finite validation NLL");
      res.history.push_back(row);
      if (on_epoch) on_epoch(row);
      if (row.val_nll < best_val) {
        best_val = row.val_nll;
        res.model = model;
        res.best_epoch = epoch;
        stale = 0;
      } else if (++stale >= tc.patience) {
        break;
      }
    } catch (const Error& e) {
      if (dynamic_cast<const NumericalError*>(&e) == nullptr &&
          dynamic_cast<const SolverError*>(&e) == nullptr) {
        throw;
      }
      res.aborted = true;
      res.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    if (res.budget_exhausted) break;
  }
  return res;
}

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> history) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out.precision(17);
  out << "epoch,train_nll,val_nll,nfe_mean\n";
  for (const HistoryRow& r : history) {
    out << r.epoch << ',' << r.train_nll << ',' << r.val_nll << ',' << r.nfe_mean << '\n';
  }
  if (!out) throw DataError(path.string() + ": write failed");
}

Datapoint make_datapoint(const SceneRecord& record, TaskKind task, std::size_t dim,
                         const RasterSpec& raster) {
  return {encode_targets(record, dim), Condition{condition_image(record, task, raster)}};
}

std::vector<Datapoint> make_datapoints(std::span<const SceneRecord> records, TaskKind task,
                                       std::size_t dim, const RasterSpec& raster) {
  std::vector<Datapoint> out;
  out.reserve(records.size());
  for (const SceneRecord& r : records) out.push_back(make_datapoint(r, task, dim, raster));
  return out;
}

Sampler flow_sampler(const FlowModel& model, TaskKind task, const RasterSpec& raster) {
  return [&model, task, raster](const SceneRecord& scene, std::size_t n, std::mt19937_64& rng,
                                std::size_t& nfe) {
    Condition cond;
    if (model.dynamics.conditioned()) cond.image = condition_image(scene, task, raster);
    ScoredSample s = sample(model, n, cond, rng);
    nfe = s.nfe;
    return s.x;
  };
}

Sampler oracle_sampler(std::size_t dim) {
  return [dim](const SceneRecord& scene, std::size_t, std::mt19937_64&, std::size_t& nfe) {
    nfe = 0;
    return encode_targets(scene, dim);
  };
}

Sampler prior_sampler(std::size_t dim) {
  return [dim](const SceneRecord&, std::size_t n, std::mt19937_64& rng, std::size_t& nfe) {
    nfe = 0;
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor x({n, dim}, 0.0);
    for (double& v : x.data()) v = normal(rng);
    return x;
  };
}

AcceptanceResult eval_acceptance(const Sampler& sampler, std::span<const SceneRecord> scenes,
                                 std::size_t samples_per_scene, std::uint64_t seed,
                                 std::size_t n_override) {
  AcceptanceResult res;
  std::mt19937_64 rng(seed);
  std::size_t overlaps = 0, regions = 0, bad = 0, total = 0;
  double nfe = 0.0;
  for (const SceneRecord& scene : scenes) {
    const std::size_t n = n_override > 0 ? n_override : scene.n();
    for (std::size_t s = 0; s < samples_per_scene; ++s) {
      ++total;
      std::size_t used = 0;
      try {
        const Tensor x = sampler(scene, n, rng, used);
        const InfractionReport r = infraction_report(x, scene);
        overlaps += r.overlap;
        regions += r.region;
        bad += r.any();
      } catch (const SolverError&) {
        ++res.failures;
        ++bad;
      } catch (const NumericalError&) {
        ++res.failures;
        ++bad;
      }
      nfe += static_cast<double>(used);
    }
  }
  if (res.failures > 0) {
    std::cerr << "warning: " << res.failures << " of " << total
              << " samples failed to integrate and count as invalid\n";
  }
  res.rates.count = total;
  if (total > 0) {
    const double t = static_cast<double>(total);
    res.rates.overlap_rate = static_cast<double>(overlaps) / t;
    res.rates.region_rate = static_cast<double>(regions) / t;
    res.rates.infraction_rate = static_cast<double>(bad) / t;
    res.rates.acceptance_rate = 1.0 - res.rates.infraction_rate;
    res.nfe_mean = nfe / t;
  }
  return res;
}

std::vector<Match> greedy_match(std::span<const Box> samples, std::span<const Box> truth) {
  std::vector<Match> all;
  all.reserve(samples.size() * truth.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = 0; j < truth.size(); ++j) all.push_back({i, j, iou(samples[i], truth[j])});
  std::stable_sort(all.begin(), all.end(),
                   [](const Match& a, const Match& b) { return a.iou > b.iou; });
  std::vector<bool> used_s(samples.size(), false), used_t(truth.size(), false);
  std::vector<Match> out;
  for (const Match& m : all) {
    if (used_s[m.sample] || used_t[m.truth]) continue;
    used_s[m.sample] = used_t[m.truth] = true;
    out.push_back(m);
    if (out.size() == std::min(samples.size(), truth.size())) break;
  }
  return out;
}

IouResult eval_iou(const Sampler& sampler, std::span<const SceneRecord> scenes,
                   std::size_t samples_per_scene, std::uint64_t seed, double fixed_width) {
  IouResult res;
  std::mt19937_64 rng(seed);
  double sum = 0.0, nfe = 0.0;
  std::size_t draws = 0;
  for (const SceneRecord& scene : scenes) {
    for (std::size_t s = 0; s < samples_per_scene; ++s) {
      ++draws;
      std::size_t used = 0;
      try {
        const Tensor x = sampler(scene, scene.n(), rng, used);
        const std::vector<Box> boxes = decode_boxes(x, fixed_width);
        for (const Match& m : greedy_match(boxes, scene.targets)) sum += m.iou;
        res.pairs += std::min(boxes.size(), scene.targets.size());
      } catch (const SolverError&) {
        ++res.failures;
        res.pairs += scene.n();  // every pair of a failed draw scores 0
      } catch (const NumericalError&) {
        ++res.failures;
        res.pairs += scene.n();
      }
      nfe += static_cast<double>(used);
    }
  }
  if (res.failures > 0) {
    std::cerr << "warning: " << res.failures << " of " << draws
              << " samples failed to integrate and score IOU 0\n";
  }
  if (res.pairs > 0) res.iou_mean = sum / static_cast<double>(res.pairs);
  if (draws > 0) res.nfe_mean = nfe / static_cast<double>(draws);
  return res;
}

double invariance_audit(const FlowModel& model, std::span<const Datapoint> data,
                        std::size_t n_perms, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (const Datapoint& dp : data) {
    const double base = log_prob(model, dp.x, dp.cond);
    std::vector<std::size_t> perm(dp.x.rows());
    for (std::size_t k = 0; k < n_perms; ++k) {
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      worst = std::max(worst, std::abs(log_prob(model, permute_rows(dp.x, perm), dp.cond) - base));
    }
  }
  return worst;
}

GaussianBaseline gaussian_baseline(std::span<const Datapoint> train_set) {
  if (train_set.size() < 2) throw DataError("gaussian_baseline: need at least two sets");
  GaussianBaseline g;
  g.n = train_set.front().x.rows();
  g.dim = train_set.front().x.size();
  const auto k = static_cast<Eigen::Index>(g.dim);
  Eigen::MatrixXd data(static_cast<Eigen::Index>(train_set.size()), k);
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const Tensor& x = train_set[i].x;
    if (x.size() != g.dim || x.rows() != g.n) {
      throw DataError("gaussian_baseline: sets must share one size (record " + std::to_string(i) + ")");
    }
    for (Eigen::Index c = 0; c < k; ++c) data(static_cast<Eigen::Index>(i), c) = x[static_cast<std::size_t>(c)];
  }
  const Eigen::VectorXd mu = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - mu.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(train_set.size() - 1);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const double max_diag = cov.diagonal().maxCoeff();
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    const Eigen::MatrixXd l = llt.matrixL();
    ok = l.diagonal().minCoeff() > 1e-7 * std::sqrt(std::max(max_diag, 1e-300));
  }
  if (!ok) {
    cov += 1e-6 * Eigen::MatrixXd::Identity(k, k);
    llt.compute(cov);
    g.ridged = true;
    if (llt.info() != Eigen::Success) throw NumericalError("gaussian_baseline: covariance not positive definite");
  }
  const Eigen::MatrixXd l = llt.matrixL();
  g.mean.assign(mu.data(), mu.data() + k);
  g.chol.resize(g.dim * g.dim);
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c < k; ++c) g.chol[static_cast<std::size_t>(r * k + c)] = l(r, c);
  g.log_det = 2.0 * l.diagonal().array().log().sum();
  return g;
}

double log_prob(const GaussianBaseline& g, const Tensor& x) {
  if (x.size() != g.dim) throw ShapeError("gaussian baseline: set size differs from the fitted size");
  const auto k = static_cast<Eigen::Index>(g.dim);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> l(
      g.chol.data(), k, k);
  Eigen::VectorXd r(k);
  for (Eigen::Index i = 0; i < k; ++i) r(i) = x[static_cast<std::size_t>(i)] - g.mean[static_cast<std::size_t>(i)];
  const Eigen::VectorXd w = l.triangularView<Eigen::Lower>().solve(r);
  return -0.5 * w.squaredNorm() - 0.5 * g.log_det -
         0.5 * static_cast<double>(g.dim) * std::log(2.0 * std::numbers::pi);
}

NllStats eval_nll(const GaussianBaseline& model, std::span<const Datapoint> data) {
  NllStats st;
  st.count = data.size();
  if (data.empty()) return st;
  std::vector<double> nll;
  nll.reserve(data.size());
  for (const Datapoint& dp : data) nll.push_back(-log_prob(model, dp.x));
  const double n = static_cast<double>(data.size());
  st.mean = std::accumulate(nll.begin(), nll.end(), 0.0) / n;
  if (data.size() > 1) {
    double ss = 0.0;
    for (double v : nll) ss += (v - st.mean) * (v - st.mean);
    st.sem = std::sqrt(ss / (n - 1.0) / n);
  }
  return st;
}

nlohmann::json report_to_json(const EvalReport& r) {
  return {{"format", kReportFormat},
          {"nll_mean", r.nll_mean},
          {"nll_stderr", r.nll_stderr},
          {"nll_unit", "nats per set"},
          {"acceptance_rate", r.acceptance_rate},
          {"overlap_rate", r.overlap_rate},
          {"region_rate", r.region_rate},
          {"iou_mean", r.iou_mean},
          {"nfe_mean", r.nfe_mean},
          {"invariance_max_dev", r.invariance_max_dev},
          {"sample_count", r.sample_count},
          {"scene_count", r.scene_count},
          {"samples_per_scene", r.samples_per_scene},
          {"failures", r.failures},
          {"seed", r.seed}};
}

}  // namespace permflow
