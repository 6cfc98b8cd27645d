// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "permflow/core/error.hpp"
#include "permflow/dynamics/dynamics.hpp"
#include "permflow/flow/flow_model.hpp"
#include "permflow/tasks/tasks.hpp"
#include "permflow/train/train.hpp"

using namespace permflow;
namespace fs = std::filesystem;

namespace {

struct Options {
  fs::path artifacts = "acceptance_artifacts";
  bool verbose = false;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

class CpuTimer {
 public:
  CpuTimer() : start_(std::clock()) {}
  double seconds() const { return static_cast<double>(std::clock() - start_) / CLOCKS_PER_SEC; }

 private:
  std::clock_t start_;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double rel_err(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

Tensor normal_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = n(rng);
  return t;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor out(x.shape(), 0.0);
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t k = 0; k < x.cols(); ++k) out.at(r, k) = x.at(perm[r], k);
  return out;
}

SolverConfig tolerance(double tol) {
  SolverConfig s;
  s.rtol = tol;
  s.atol = tol;
  return s;
}

// Glorot weights leave every bias at zero; random biases make the field less
// symmetric around the origin.
void randomize_biases(DynamicsParams& p, std::mt19937_64& rng, double sigma) {
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& [name, t] : parameter_refs(p))
    if (name.ends_with("bias"))
      for (double& b : t->data()) b = n(rng);
}

// Small random model for the exactness checks.
FlowModel random_model(std::size_t dim, bool conditioned, bool use_time, std::uint64_t seed,
                       const SolverConfig& solver, std::size_t hidden = 12) {
  DynamicsConfig c;
  c.dim = dim;
  c.use_time = use_time;
  c.condition_in_f = conditioned;
  c.condition_in_g = conditioned;
  c.embed_width = conditioned ? 4 : 0;
  Architecture a;
  a.f_layers = 3;
  a.f_hidden = hidden;
  a.g_layers = 3;
  a.g_hidden = hidden;
  a.embed_layers = 2;
  a.embed_channels = 3;
  a.image_height = 16;
  a.image_width = 16;
  FlowModel m = make_flow_model(c, a, solver, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  randomize_biases(m.params, rng, 0.3);
  return m;
}

Condition random_condition(const FlowModel& m, std::mt19937_64& rng) {
  if (!m.dynamics.conditioned()) return {};
  Tensor img({1, m.arch.image_height, m.arch.image_width}, 0.0);
  for (double& v : img.data()) v = std::bernoulli_distribution(0.3)(rng) ? 1.0 : 0.0;
  return {img};
}

// ---------------------------------------------------------------------------
// Desk-scale training setups.

struct DeskSetup {
  TaskKind task = TaskKind::kBoxesCond;
  std::size_t n_min = 3;
  std::size_t n_max = 3;
  std::size_t n_prohibited = 2;
  std::size_t train_count = 2000;
  std::size_t val_count = 200;
  std::size_t test_count = 100;
  std::uint64_t data_seed = 0;
  std::size_t hidden = 32;
  std::size_t layers = 3;
  bool zero_init = true;
  bool augment = true;
  std::size_t embed_channels = 8;
  std::size_t embed_width = 16;
  double train_tol = 1e-5;
  double eval_tol = 1e-5;
  TrainConfig tc;
};

struct DeskRun {
  FlowModel model;
  TrainResult result;
  std::vector<SceneRecord> test;
  double train_seconds = 0.0;
};

std::vector<SceneRecord> desk_records(const DeskSetup& s, std::size_t count, std::uint64_t seed) {
  DatasetSpec spec;
  spec.task = s.task;
  spec.n_min = s.n_min;
  spec.n_max = s.n_max;
  spec.n_prohibited = s.n_prohibited;
  spec.count = count;
  spec.seed = seed;
  return generate_dataset(spec);
}

FlowModel desk_model(const DeskSetup& s, std::uint64_t seed) {
  DynamicsConfig c;
  c.dim = 2;
  c.embed_width = s.embed_width;
  Architecture a;
  a.f_layers = s.layers;
  a.f_hidden = s.hidden;
  a.g_layers = s.layers;
  a.g_hidden = s.hidden;
  a.embed_layers = 3;
  a.embed_channels = s.embed_channels;
  FlowModel m = make_flow_model(c, a, tolerance(s.train_tol), seed);
  if (s.zero_init) zero_output_layers(m.params);
  return m;
}

DeskRun desk_train(const DeskSetup& s, const std::string& name, const Options& opt) {
  auto train_recs = desk_records(s, s.train_count, s.data_seed);
  if (s.augment) train_recs = dihedral_augment(train_recs);
  const auto val_recs = desk_records(s, s.val_count, s.data_seed + 1);
  DeskRun run;
  run.test = desk_records(s, s.test_count, s.data_seed + 2);
  const auto train_set = make_datapoints(train_recs, s.task, 2);
  const auto val_set = make_datapoints(val_recs, s.task, 2);
  const FlowModel init = desk_model(s, s.tc.seed + 100);
  const auto wall = std::chrono::steady_clock::now();
  const CpuTimer cpu;
  run.result = train(init, train_set, val_set, s.tc, [&](const HistoryRow& row) {
    if (opt.verbose) {
      std::cerr << fmt("  [%s] epoch %zu train_nll %.4f val_nll %.4f nfe %.1f (%.0f s)\n", name.c_str(),
                       row.epoch, row.train_nll, row.val_nll, row.nfe_mean,
                       std::chrono::duration<double>(std::chrono::steady_clock::now() - wall).count());
    }
  });
  run.train_seconds = cpu.seconds();
  run.model = run.result.model;
  run.model.solver = tolerance(s.eval_tol);
  fs::create_directories(opt.artifacts);
  std::ofstream(opt.artifacts / (name + ".checkpoint.json")) << checkpoint_to_json(run.model).dump() << '\n';
  write_history_csv(opt.artifacts / (name + ".history.csv"), run.result.history);
  return run;
}

std::string train_summary(const DeskRun& r) {
  const std::size_t epochs = r.result.history.size();
  const double val = epochs ? r.result.history.back().val_nll : std::nan("");
  return fmt("%zu epochs, best %zu, last val_nll %.3f, %.0f s CPU%s%s", epochs, r.result.best_epoch, val,
             r.train_seconds, r.result.aborted ? ", aborted: " : "",
             r.result.aborted ? r.result.abort_reason.c_str() : "");
}

TrainConfig desk_train_config(double max_seconds, std::size_t epochs) {
  TrainConfig tc;
  tc.lr = 5e-3;
  tc.batch_size = 32;
  tc.epochs = epochs;
  tc.patience = epochs;
  tc.seed = 1;
  tc.max_seconds = max_seconds;
  return tc;
}

// ---------------------------------------------------------------------------
// 1. Permutation invariance of log p.

Outcome invariance(const Options&) {
  const CpuTimer cpu;
  std::vector<FlowModel> models;
  for (std::uint64_t k = 0; k < 5; ++k) {
    models.push_back(random_model(2 + k % 2, k % 2 == 0, k != 3, 10 + k, tolerance(1e-6)));
  }
  // Trained models: a few epochs on small task datasets.
  for (std::uint64_t k = 0; k < 5; ++k) {
    DeskSetup s;
    s.task = k % 2 == 0 ? TaskKind::kBbox : TaskKind::kBoxesCond;
    s.n_min = 2;
    s.n_max = 4;
    s.data_seed = 20 + k;
    s.hidden = 16;
    s.zero_init = false;
    s.embed_channels = 2;
    s.embed_width = 4;
    FlowModel init = desk_model(s, 30 + k);
    init.solver = tolerance(1e-4);
    const auto recs = desk_records(s, 24, s.data_seed);
    const auto data = make_datapoints(recs, s.task, 2);
    TrainConfig tc;
    tc.lr = 1e-2;
    tc.batch_size = 8;
    tc.epochs = 2;
    tc.seed = k;
    tc.lambda_l2 = k == 4 ? 0.01 : 0.0;
    FlowModel trained = train(init, data, data, tc).model;
    trained.solver = tolerance(1e-6);
    models.push_back(std::move(trained));
  }
  double worst = 0.0;
  std::size_t checks = 0;
  std::mt19937_64 rng(7);
  for (const FlowModel& m : models) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(3, 5)(rng);
    const Tensor x = normal_tensor({n, m.dynamics.dim}, rng);
    Condition cond;
    if (m.dynamics.conditioned()) {
      cond = random_condition(m, rng);
    }
    const double base = log_prob(m, x, cond);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (int p = 0; p < 50; ++p) {
      std::shuffle(perm.begin(), perm.end(), rng);
      worst = std::max(worst, std::abs(log_prob(m, permute_rows(x, perm), cond) - base));
      ++checks;
    }
  }
  const double secs = cpu.seconds();
  return {worst <= 1e-5 && secs < 120,
          fmt("max |log p(sigma x) - log p(x)| = %.3g (limit 1e-05) over %zu permutations of 10 models, "
              "%.1f s CPU (limit 120)",
              worst, checks, secs)};
}

// ---------------------------------------------------------------------------
// 2. Analytic divergence against the trace of a finite-difference Jacobian.

Outcome divergence_exactness(const Options&) {
  const CpuTimer cpu;
  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    const bool conditioned = c % 2 == 0;
    const FlowModel m = random_model(d, conditioned, c % 3 != 0, 200 + c, tolerance(1e-6));
    const Tensor emb = conditioned ? normal_tensor({1, m.dynamics.embed_width}, rng) : Tensor();
    const Tensor x = normal_tensor({n, d}, rng);
    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double h = 1e-5;
    double trace = 0.0;
    Tensor xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = xp[i];
      xp[i] = x0 + h;
      const double vp = velocity(m.params, m.dynamics, xp, t, emb)[i];
      xp[i] = x0 - h;
      const double vm = velocity(m.params, m.dynamics, xp, t, emb)[i];
      xp[i] = x0;
      trace += (vp - vm) / (2 * h);
    }
    worst = std::max(worst, rel_err(divergence(m.params, m.dynamics, x, t, emb), trace, 1e-8));
  }
  const double secs = cpu.seconds();
  return {worst <= 1e-6 && secs < 60,
          fmt("max relative error %.3g (limit 1e-06) over 100 cases, %.1f s CPU (limit 60)", worst, secs)};
}

// ---------------------------------------------------------------------------
// 3. Flow log-density against brute-force change of variables.

Outcome change_of_variables(const Options&) {
  const CpuTimer cpu;
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int c = 0; c < 20; ++c) {
    const FlowModel m = random_model(2, c % 2 == 0, true, 300 + c, tolerance(1e-9));
    const Condition cond = random_condition(m, rng);
    const Tensor x = normal_tensor({3, 2}, rng);
    auto forward_map = [&](const Tensor& xin) { return score(m, xin, cond).z; };
    Eigen::MatrixXd jac(6, 6);
    const double h = 1e-4;
    for (Eigen::Index col = 0; col < 6; ++col) {
      Tensor xp = x, xm = x;
      xp[static_cast<std::size_t>(col)] += h;
      xm[static_cast<std::size_t>(col)] -= h;
      const Tensor zp = forward_map(xp), zm = forward_map(xm);
      for (Eigen::Index r = 0; r < 6; ++r) {
        jac(r, col) = (zp[static_cast<std::size_t>(r)] - zm[static_cast<std::size_t>(r)]) / (2 * h);
      }
    }
    const Score s = score(m, x, cond);
    const double brute = base_log_prob(s.z) + std::log(std::abs(jac.determinant()));
    worst = std::max(worst, std::abs(s.log_prob - brute));
  }
  const double secs = cpu.seconds();
  return {worst <= 1e-3 && secs < 300,
          fmt("max |log p - brute force| = %.3g (limit 1e-03) over 20 cases, %.1f s CPU (limit 300)", worst,
              secs)};
}

// ---------------------------------------------------------------------------
// 4. Invertibility.

Outcome invertibility(const Options&) {
  const CpuTimer cpu;
  std::mt19937_64 rng(4);
  double worst_default = 0.0, worst_tight = 0.0;
  for (int c = 0; c < 50; ++c) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 5)(rng);
    const std::size_t d = 2 + c % 2;
    FlowModel m = random_model(d, c % 2 == 0, true, 400 + c, SolverConfig{}, 32);
    const Condition cond = random_condition(m, rng);
    const Tensor x = normal_tensor({n, d}, rng);
    worst_default = std::max(worst_default, roundtrip(m, x, cond));
    m.solver = tolerance(1e-10);
    worst_tight = std::max(worst_tight, roundtrip(m, x, cond));
  }
  const double secs = cpu.seconds();
  return {worst_default <= 1e-5 && worst_tight <= 1e-8 && secs < 120,
          fmt("max roundtrip error %.3g at rtol=atol=1e-6 (limit 1e-05), %.3g at 1e-10 (limit 1e-08), "
              "50 cases, %.1f s CPU (limit 120)",
              worst_default, worst_tight, secs)};
}

// ---------------------------------------------------------------------------
// 5. Loss gradients against central finite differences.

Outcome gradients(const Options&) {
  const CpuTimer cpu;
  std::mt19937_64 rng(5);
  FlowModel adaptive = random_model(2, true, true, 500, tolerance(1e-10), 8);
  std::vector<Datapoint> batch;
  for (std::size_t n : {2u, 3u, 4u}) batch.push_back({normal_tensor({n, 2}, rng), random_condition(adaptive, rng)});

  TrainConfig tc;
  tc.lambda_l2 = 0.05;
  tc.lambda_l2div = 0.02;
  tc.fixed_steps = 64;
  FlowModel fixed = adaptive;
  fixed.solver.method = SolverMethod::kFixed;
  fixed.solver.n_steps = tc.fixed_steps;

  TrainConfig tc_adj = tc, tc_bp = tc;
  tc_adj.grad_mode = GradMode::kAdjoint;
  tc_bp.grad_mode = GradMode::kFixedBackprop;
  const std::vector<double> g_adj = nll_loss(adaptive, batch, tc_adj).gradient;
  const std::vector<double> g_bp = nll_loss(fixed, batch, tc_bp).gradient;

  const std::vector<double> p0 = flatten_params(adaptive);
  // Half the probes land in the embedding network.
  std::size_t n_embed = 0;
  for (const auto& [name, t] : parameter_refs(adaptive.params))
    if (name.starts_with("embed")) n_embed += t->size();
  auto fd = [&](FlowModel& m, const TrainConfig& cfg, std::size_t k) {
    const double h = 1e-5;
    std::vector<double> p = p0;
    p[k] = p0[k] + h;
    assign_params(m, p);
    const double lp = nll_loss(m, batch, cfg, false).loss;
    p[k] = p0[k] - h;
    assign_params(m, p);
    const double lm = nll_loss(m, batch, cfg, false).loss;
    assign_params(m, p0);
    return (lp - lm) / (2 * h);
  };
  double worst_adj = 0.0, worst_bp = 0.0, worst_pair = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k =
        trial % 2 == 0 ? std::uniform_int_distribution<std::size_t>(0, p0.size() - n_embed - 1)(rng)
                       : p0.size() - n_embed + std::uniform_int_distribution<std::size_t>(0, n_embed - 1)(rng);
    worst_adj = std::max(worst_adj, rel_err(g_adj[k], fd(adaptive, tc_adj, k), 1e-4));
    worst_bp = std::max(worst_bp, rel_err(g_bp[k], fd(fixed, tc_bp, k), 1e-4));
    worst_pair = std::max(worst_pair, rel_err(g_adj[k], g_bp[k], 1e-4));
  }
  const double secs = cpu.seconds();
  return {worst_adj <= 1e-4 && worst_bp <= 1e-4 && worst_pair <= 1e-4 && secs < 300,
          fmt("max relative error on 20 parameters: adjoint vs FD %.3g, backprop vs FD %.3g, adjoint vs "
              "backprop %.3g (limit 1e-04 each), %.1f s CPU (limit 300)",
              worst_adj, worst_bp, worst_pair, secs)};
}

// ---------------------------------------------------------------------------
// 6. Task 1: constrained placement around prohibited boxes.

Outcome task1(const Options& opt) {
  DeskSetup s;
  s.task = TaskKind::kBoxesCond;
  s.n_min = s.n_max = 3;
  s.n_prohibited = 2;
  s.data_seed = 600;
  s.tc = desk_train_config(3300, 1000);
  const DeskRun run = desk_train(s, "task1", opt);
  const AcceptanceResult flow = eval_acceptance(flow_sampler(run.model, s.task), run.test, 20, 61);
  std::mt19937_64 rng(62);
  const double raw = raw_prior_acceptance_given(run.test, 3, 20000, rng);
  const double rate = flow.rates.acceptance_rate;
  const bool ok = rate >= 0.30 && rate >= 20 * raw && run.train_seconds <= 3600 && !run.result.aborted;
  return {ok, fmt("flow acceptance %.3f (limit 0.30), raw prior %.4g on the same scenes, ratio %.1f (limit 20), "
                  "%zu samples; training %s",
                  rate, raw, raw > 0 ? rate / raw : INFINITY, flow.rates.count, train_summary(run).c_str())};
}

// ---------------------------------------------------------------------------
// 7. Task 2: boxes read off their own raster.

DeskSetup task2_setup() {
  DeskSetup s;
  s.task = TaskKind::kBbox;
  s.n_min = s.n_max = 3;
  s.n_prohibited = 0;
  s.data_seed = 700;
  return s;
}

Outcome task2(const Options& opt) {
  DeskSetup s = task2_setup();
  s.tc = desk_train_config(3300, 1000);
  const DeskRun run = desk_train(s, "task2", opt);
  const IouResult r = eval_iou(flow_sampler(run.model, s.task), run.test, 10, 71);
  const bool ok = r.iou_mean >= 0.50 && run.train_seconds <= 3600 && !run.result.aborted;
  return {ok, fmt("mean matched IOU %.3f (limit 0.50) over %zu pairs, %zu solver failures; training %s",
                  r.iou_mean, r.pairs, r.failures, train_summary(run).c_str())};
}

// ---------------------------------------------------------------------------
// 8. Regularization lowers the evaluation cost.

Outcome regularization(const Options& opt) {
  const CpuTimer cpu;
  DeskSetup plain = task2_setup();
  plain.data_seed = 800;
  plain.tc = desk_train_config(0, 8);
  DeskSetup reg = plain;
  reg.tc.lambda_l2 = 0.01;
  reg.tc.lambda_l2div = 0.01;
  const DeskRun a = desk_train(plain, "task2_unregularized", opt);
  const DeskRun b = desk_train(reg, "task2_regularized", opt);
  const IouResult ea = eval_iou(flow_sampler(a.model, plain.task), a.test, 5, 81);
  const IouResult eb = eval_iou(flow_sampler(b.model, reg.task), b.test, 5, 81);
  const auto test_a = make_datapoints(a.test, plain.task, 2);
  const NllStats sa = eval_nll(a.model, test_a);
  const NllStats sb = eval_nll(b.model, test_a);
  const double secs = cpu.seconds();
  const bool equal_budget = a.result.history.size() == b.result.history.size();
  const bool ok = eb.nfe_mean < ea.nfe_mean && equal_budget && secs < 7200;
  return {ok, fmt("sampling NFE %.1f regularized vs %.1f unregularized (must be lower); scoring NFE %.1f vs "
                  "%.1f; IOU %.3f vs %.3f; %zu vs %zu epochs; %.0f s CPU (limit 7200)",
                  eb.nfe_mean, ea.nfe_mean, sb.nfe_mean, sa.nfe_mean, eb.iou_mean, ea.iou_mean,
                  b.result.history.size(), a.result.history.size(), secs)};
}

// ---------------------------------------------------------------------------
// 9. Raw-prior acceptance trend for task 1.

Outcome prior_trend(const Options&) {
  const CpuTimer cpu;
  std::mt19937_64 rng(9);
  const std::size_t counts[3] = {2, 3, 5};
  const double reference[3] = {0.01, 2.01e-3, 1.76e-4};
  const std::size_t draws[3] = {400000, 1000000, 4000000};
  double measured[3];
  bool within = true;
  for (int k = 0; k < 3; ++k) {
    measured[k] = raw_prior_acceptance(rng, counts[k], 3, draws[k]);
    const double ratio = measured[k] / reference[k];
    within = within && ratio <= 3.0 && ratio >= 1.0 / 3.0;
  }
  const bool monotone = measured[0] > measured[1] && measured[1] > measured[2];
  double diag[3];
  for (int k = 0; k < 3; ++k) diag[k] = raw_prior_acceptance(rng, counts[k], 8 - counts[k], draws[k]);
  const double secs = cpu.seconds();
  return {monotone && within && secs < 600,
          fmt("raw prior acceptance with 3 prohibited boxes: n=2 %.4g (ref 0.01), n=3 %.4g (ref 2.01e-3), "
              "n=5 %.4g (ref 1.76e-4); monotone %s, within x3 %s; with n + n_prohibited = 8: %.4g, %.4g, "
              "%.4g; %.0f s CPU (limit 600)",
              measured[0], measured[1], measured[2], monotone ? "yes" : "no", within ? "yes" : "no", diag[0],
              diag[1], diag[2], secs)};
}

// ---------------------------------------------------------------------------
// 10. Generalization to a larger set size than seen in training.

Outcome variable_n(const Options& opt) {
  const CpuTimer cpu;
  DeskSetup s = task2_setup();
  s.n_min = 2;
  s.n_max = 5;
  s.data_seed = 1000;
  s.tc = desk_train_config(1400, 1000);
  DeskRun run = desk_train(s, "task2_variable_n", opt);
  DeskSetup big = s;
  big.n_min = big.n_max = 7;
  const auto scenes = desk_records(big, 50, 1010);
  std::size_t errors = 0;
  const AcceptanceResult acc = eval_acceptance(flow_sampler(run.model, s.task), scenes, 10, 101);
  errors += acc.failures;
  double worst = 0.0;
  for (const SceneRecord& rec : scenes) {
    try {
      const Datapoint dp = make_datapoint(rec, s.task, 2);
      const double lp = log_prob(run.model, dp.x, dp.cond);
      if (!std::isfinite(lp)) ++errors;
      worst = std::max(worst, std::abs(lp));
    } catch (const Error&) {
      ++errors;
    }
  }
  const double secs = cpu.seconds();
  const double rate = acc.rates.acceptance_rate;
  const bool ok = errors == 0 && rate >= 0.10 && secs < 1800 && !run.result.aborted;
  return {ok, fmt("n=7: %zu samples and %zu scored sets, %zu errors; acceptance %.3f (limit 0.10); training on "
                  "n in 2..5 %s; %.0f s CPU total (limit 1800)",
                  acc.rates.count, scenes.size(), errors, rate, train_summary(run).c_str(), secs)};
}

struct Criterion {
  const char* name;
  std::function<Outcome(const Options&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("permflow acceptance checks");
  std::vector<int> only;
  Options opt;
  app.add_option("--only", only, "criteria to run (default all)")->check(CLI::Range(1, 10));
  app.add_option("--artifacts", opt.artifacts, "directory for trained checkpoints and histories");
  app.add_flag("--verbose", opt.verbose, "log training progress to stderr");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {"permutation invariance", invariance},
      {"divergence exactness", divergence_exactness},
      {"change of variables", change_of_variables},
      {"invertibility", invertibility},
      {"gradient correctness", gradients},
      {"task 1 constrained placement", task1},
      {"task 2 box IOU", task2},
      {"regularization lowers NFE", regularization},
      {"raw prior acceptance trend", prior_trend},
      {"variable set size", variable_n},
  };
  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[k].run(opt);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << "criterion " << id << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << criteria[k].name << ": "
              << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
