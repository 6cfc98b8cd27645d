// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

#include "permflow/core/error.hpp"
#include "permflow/flow/flow_model.hpp"
#include "test_util.hpp"

using namespace permflow;
using permflow::testing::permute_rows;
using permflow::testing::random_permutation;
using permflow::testing::random_tensor;
using permflow::testing::rel_err;

namespace {

SolverConfig tolerance(double tol) {
  SolverConfig s;
  s.rtol = tol;
  s.atol = tol;
  return s;
}

FlowModel small_model(std::size_t d, bool conditioned, std::uint64_t seed, double tol = 1e-6) {
  DynamicsConfig c;
  c.dim = d;
  c.condition_in_f = conditioned;
  c.condition_in_g = conditioned;
  c.embed_width = conditioned ? 3 : 0;
  Architecture a;
  a.f_layers = 3;
  a.f_hidden = 8;
  a.g_layers = 3;
  a.g_hidden = 8;
  a.embed_layers = 2;
  a.embed_channels = 2;
  a.image_height = 12;
  a.image_width = 12;
  FlowModel m = make_flow_model(c, a, tolerance(tol), seed);
  std::mt19937_64 rng(seed + 1000);
  for (auto& [name, t] : parameter_refs(m.params)) {
    if (name.ends_with("bias"))
      for (double& b : t->data()) b = std::normal_distribution<double>(0, 0.2)(rng);
  }
  return m;
}

Condition random_condition(const FlowModel& m, std::mt19937_64& rng) {
  if (!m.dynamics.conditioned()) return {};
  Tensor img({1, m.arch.image_height, m.arch.image_width}, 0.0);
  for (double& v : img.data()) v = std::bernoulli_distribution(0.3)(rng) ? 1.0 : 0.0;
  return {img};
}

void zero_params(FlowModel& m) {
  assign_params(m, std::vector<double>(parameter_count(m.params), 0.0));
}

// v = a x, built from single-layer nets.
FlowModel linear_model(std::size_t d, double a) {
  DynamicsConfig c;
  c.dim = d;
  c.use_time = false;
  c.condition_in_f = false;
  c.condition_in_g = false;
  Architecture arch;
  arch.f_layers = 1;
  arch.g_layers = 1;
  FlowModel m = make_flow_model(c, arch, tolerance(1e-9), 0);
  zero_params(m);
  for (std::size_t k = 0; k < d; ++k) m.params.g.layers[0].weight.at(k, k) = a;
  return m;
}

// T(x) = z by backward integration, flattened.
std::vector<double> forward_map(const FlowModel& m, const Tensor& x, const Condition& cond) {
  const Tensor z = score(m, x, cond).z;
  return {z.data().begin(), z.data().end()};
}

}  // namespace

TEST_CASE("base density") {
  const Tensor z = Tensor::matrix(2, 1, {0.0, 0.0});
  CHECK(base_log_prob(z) == doctest::Approx(-std::log(2 * std::numbers::pi)).epsilon(1e-15));
  const Tensor w = Tensor::matrix(1, 2, {1.0, -2.0});
  CHECK(base_log_prob(w) == doctest::Approx(-std::log(2 * std::numbers::pi) - 2.5).epsilon(1e-15));
}

TEST_CASE("zero dynamics sample is the base draw") {
  FlowModel m = small_model(2, true, 1);
  zero_params(m);
  std::mt19937_64 rng(2), rng2(2);
  const Condition cond = random_condition(m, rng);
  const ScoredSample s = sample(m, 4, cond, rng);
  CHECK(s.x == s.z);
  CHECK(s.log_prob == doctest::Approx(base_log_prob(s.z)).epsilon(1e-14));
  FlowModel z2 = small_model(1, false, 1);
  zero_params(z2);
  CHECK(log_prob(z2, Tensor::matrix(2, 1, {0, 0}), {}) ==
        doctest::Approx(-1.8378770664093453).epsilon(1e-14));
  CHECK(roundtrip(m, s.x, cond) == 0.0);
}

TEST_CASE("linear flow sample") {
  const double a = 0.1;
  const FlowModel m = linear_model(2, a);
  std::mt19937_64 rng(3);
  const ScoredSample s = sample(m, 3, {}, rng);
  for (std::size_t i = 0; i < s.x.size(); ++i)
    CHECK(std::abs(s.x[i] - s.z[i] * std::exp(a)) <= 1e-8);
  CHECK(std::abs(s.log_prob - (base_log_prob(s.z) - a * 6)) <= 1e-8);
}

TEST_CASE("sampling is deterministic under a seed") {
  const FlowModel m = small_model(2, true, 4);
  std::mt19937_64 r1(5), r2(5);
  const Condition c1 = random_condition(m, r1), c2 = random_condition(m, r2);
  const ScoredSample a = sample(m, 3, c1, r1), b = sample(m, 3, c2, r2);
  CHECK(a.x == b.x);
  CHECK(a.log_prob == b.log_prob);
}

TEST_CASE("log_prob matches brute-force change of variables") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const FlowModel m = small_model(2, seed % 2 == 0, 10 + seed, 1e-9);
    std::mt19937_64 rng(seed);
    const Condition cond = random_condition(m, rng);
    const Tensor x = random_tensor({3, 2}, rng);
    const std::size_t nd = 6;
    Eigen::MatrixXd J(nd, nd);
    const double h = 1e-4;
    for (std::size_t c = 0; c < nd; ++c) {
      Tensor xp = x, xm = x;
      xp[c] += h;
      xm[c] -= h;
      const auto fp = forward_map(m, xp, cond), fm = forward_map(m, xm, cond);
      for (std::size_t r = 0; r < nd; ++r) J(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = (fp[r] - fm[r]) / (2 * h);
    }
    const Score s = score(m, x, cond);
    const double brute = base_log_prob(s.z) + std::log(std::abs(J.determinant()));
    CHECK(std::abs(s.log_prob - brute) <= 1e-3);
  }
}

TEST_CASE("log_prob is permutation invariant") {
  const FlowModel m = small_model(2, true, 20);
  std::mt19937_64 rng(21);
  const Condition cond = random_condition(m, rng);
  const Tensor x = random_tensor({5, 2}, rng);
  const double base = log_prob(m, x, cond);
  for (int trial = 0; trial < 5; ++trial) {
    const auto perm = random_permutation(5, rng);
    CHECK(std::abs(log_prob(m, permute_rows(x, perm), cond) - base) <= 1e-5);
  }
}

TEST_CASE("density normalizes in one dimension") {
  const FlowModel m = small_model(1, false, 30);
  const double lo = -12.0, hi = 12.0;
  const int steps = 600;
  const double dx = (hi - lo) / steps;
  double integral = 0.0;
  for (int i = 0; i <= steps; ++i) {
    const double x = lo + dx * i;
    const double p = std::exp(log_prob(m, Tensor::matrix(1, 1, {x}), {}));
    integral += (i == 0 || i == steps) ? 0.5 * p : p;
  }
  integral *= dx;
  CHECK(integral >= 0.99);
  CHECK(integral <= 1.01);
}

TEST_CASE("sample log_prob agrees with scoring the sample") {
  const FlowModel m = small_model(2, true, 40);
  std::mt19937_64 rng(41);
  const Condition cond = random_condition(m, rng);
  for (int trial = 0; trial < 3; ++trial) {
    const ScoredSample s = sample(m, 4, cond, rng);
    CHECK(std::abs(s.log_prob - log_prob(m, s.x, cond)) <= 1e-4);
  }
}

TEST_CASE("trajectory snapshots") {
  const FlowModel m = small_model(2, false, 45);
  std::mt19937_64 rng(46);
  const ScoredSample s = sample(m, 3, {}, rng, true);
  REQUIRE(s.trajectory.size() >= 2);
  CHECK(s.trajectory.front().x == s.z);
  CHECK(s.trajectory.back().x == s.x);
  CHECK(s.trajectory.back().t == 1.0);
}

TEST_CASE("roundtrip error") {
  FlowModel m = small_model(2, true, 50);
  std::mt19937_64 rng(51);
  const Condition cond = random_condition(m, rng);
  const Tensor x = random_tensor({4, 2}, rng);
  const double coarse = roundtrip(m, x, cond);
  CHECK(coarse <= 1e-5);
  m.solver = tolerance(1e-10);
  const double fine = roundtrip(m, x, cond);
  CHECK(fine * 10 <= coarse);
}

TEST_CASE("loss with zero dynamics is the base NLL") {
  FlowModel m = small_model(2, false, 60);
  zero_params(m);
  std::mt19937_64 rng(61);
  std::vector<Datapoint> batch;
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    batch.push_back({random_tensor({static_cast<std::size_t>(2 + i), 2}, rng), {}});
    expect -= base_log_prob(batch.back().x) / 3;
  }
  TrainConfig tc;
  tc.lambda_l2 = 0.7;
  tc.lambda_l2div = 0.3;
  const LossResult r = nll_loss(m, batch, tc);
  CHECK(r.loss == doctest::Approx(expect).epsilon(1e-13));
  CHECK(r.reg_l2 == 0.0);
  CHECK(r.reg_l2div == 0.0);
}

TEST_CASE("loss gradient vs finite differences") {
  for (GradMode mode : {GradMode::kFixedBackprop, GradMode::kAdjoint}) {
    FlowModel m = small_model(2, true, 70, 1e-10);
    TrainConfig tc;
    tc.lambda_l2 = 0.05;
    tc.lambda_l2div = 0.02;
    tc.grad_mode = mode;
    tc.fixed_steps = 12;
    if (mode == GradMode::kFixedBackprop) {
      m.solver.method = SolverMethod::kFixed;
      m.solver.n_steps = tc.fixed_steps;
    }
    std::mt19937_64 rng(71);
    std::vector<Datapoint> batch;
    for (std::size_t n : {2u, 3u}) batch.push_back({random_tensor({n, 2}, rng), random_condition(m, rng)});
    const LossResult r = nll_loss(m, batch, tc);
    const std::vector<double> p0 = flatten_params(m);
    // Half the probes land in the embedding network.
    const std::size_t n_embed = [&] {
      std::size_t k = 0;
      for (const auto& [name, t] : parameter_refs(m.params))
        if (name.starts_with("embed")) k += t->size();
      return k;
    }();
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t k = trial % 2 == 0
                                ? std::uniform_int_distribution<std::size_t>(0, p0.size() - n_embed - 1)(rng)
                                : p0.size() - n_embed + std::uniform_int_distribution<std::size_t>(0, n_embed - 1)(rng);
      const double h = 1e-5;
      std::vector<double> p = p0;
      p[k] = p0[k] + h;
      assign_params(m, p);
      const double lp = nll_loss(m, batch, tc, false).loss;
      p[k] = p0[k] - h;
      assign_params(m, p);
      const double lm = nll_loss(m, batch, tc, false).loss;
      assign_params(m, p0);
      CHECK(rel_err(r.gradient[k], (lp - lm) / (2 * h), 1e-4) <= 1e-4);
    }
  }
}

TEST_CASE("loss is invariant to permuting elements") {
  const FlowModel m = small_model(2, true, 80);
  std::mt19937_64 rng(81);
  const Condition cond = random_condition(m, rng);
  const Tensor x = random_tensor({4, 2}, rng);
  TrainConfig tc;
  tc.lambda_l2 = 0.01;
  tc.lambda_l2div = 0.01;
  const std::vector<Datapoint> a{{x, cond}};
  const std::vector<Datapoint> b{{permute_rows(x, random_permutation(4, rng)), cond}};
  CHECK(std::abs(nll_loss(m, a, tc, false).loss - nll_loss(m, b, tc, false).loss) <= 1e-5);
}

TEST_CASE("mixed-cardinality batch equals weighted sub-batches") {
  const FlowModel m = small_model(2, false, 90);
  std::mt19937_64 rng(91);
  std::vector<Datapoint> mixed, twos, fours;
  for (std::size_t n : {2u, 4u, 2u, 4u, 4u}) {
    mixed.push_back({random_tensor({n, 2}, rng), {}});
    (n == 2 ? twos : fours).push_back(mixed.back());
  }
  TrainConfig tc;
  const LossResult all = nll_loss(m, mixed, tc);
  const LossResult g2 = nll_loss(m, twos, tc), g4 = nll_loss(m, fours, tc);
  const double w2 = 2.0 / 5.0, w4 = 3.0 / 5.0;
  CHECK(std::abs(all.loss - (w2 * g2.loss + w4 * g4.loss)) <= 1e-10);
  for (std::size_t i = 0; i < all.gradient.size(); ++i)
    CHECK(std::abs(all.gradient[i] - (w2 * g2.gradient[i] + w4 * g4.gradient[i])) <= 1e-10);
}

TEST_CASE("checkpoint roundtrip") {
  const FlowModel m = small_model(2, true, 100);
  const nlohmann::json doc = checkpoint_to_json(m);
  CHECK(doc["format"] == "permflow-checkpoint-v1");
  const FlowModel back = checkpoint_from_json(nlohmann::json::parse(doc.dump()));
  CHECK(flatten_params(back) == flatten_params(m));
  CHECK(model_hash(back) == model_hash(m));
  FlowModel other = m;
  other.solver.rtol = 1e-7;
  CHECK(model_hash(other) != model_hash(m));
  nlohmann::json bad = doc;
  bad["params"]["arrays"][0]["shape"] = {1, 1};
  CHECK_THROWS_AS(checkpoint_from_json(bad), DataError);
  bad = doc;
  bad["format"] = "nope";
  CHECK_THROWS_AS(checkpoint_from_json(bad), DataError);
}

TEST_CASE("input validation") {
  const FlowModel m = small_model(2, true, 110);
  std::mt19937_64 rng(111);
  const Condition cond = random_condition(m, rng);
  CHECK_THROWS_AS(log_prob(m, Tensor({3, 3}, 0.0), cond), ShapeError);
  CHECK_THROWS_AS(log_prob(m, Tensor({3, 2}, 0.0), Condition{Tensor({1, 4, 4}, 0.0)}), ShapeError);
  CHECK_THROWS_AS(sample(m, 0, cond, rng), ShapeError);
  CHECK_THROWS_AS(nll_loss(m, std::span<const Datapoint>(), TrainConfig{}), DataError);
  TrainConfig tc;
  tc.batch_size = 0;
  CHECK_THROWS_AS(validate(tc), ConfigError);
  CHECK(grad_mode_from_string("adjoint") == GradMode::kAdjoint);
  CHECK_THROWS_AS(grad_mode_from_string("bptt"), ConfigError);
}
