// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/flow/flow_model.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <sstream>

#include "permflow/core/error.hpp"
#include "permflow/diff/param_io.hpp"

namespace permflow {
namespace {

std::size_t force_param_count(const DynamicsParams& p) {
  std::size_t n = 0;
  for (const auto& l : p.f.layers) n += l.weight.size() + l.bias.size();
  for (const auto& l : p.g.layers) n += l.weight.size() + l.bias.size();
  return n;
}

std::vector<double> initial_state(const Tensor& x) {
  std::vector<double> y(x.data().begin(), x.data().end());
  y.resize(y.size() + AugmentedState::kExtra, 0.0);
  return y;
}

void check_condition(const FlowModel& model, const Condition& cond) {
  if (!model.dynamics.conditioned()) return;
  const Shape want{model.arch.image_channels, model.arch.image_height, model.arch.image_width};
  if (cond.image.shape() != want) {
    throw ShapeError("condition image shape " + shape_string(cond.image.shape()) + " expected " +
                     shape_string(want));
  }
}

void check_set(const FlowModel& model, const Tensor& x) {
  if (x.rank() != 2 || x.rows() == 0 || x.cols() != model.dynamics.dim) {
    throw ShapeError("set shape " + shape_string(x.shape()) + " expected [N x " +
                     std::to_string(model.dynamics.dim) + "]");
  }
  if (!x.all_finite()) throw NumericalError("set contains non-finite entries");
}

Tensor embedding_of(const FlowModel& model, const Condition& cond) {
  check_condition(model, cond);
  return embed_condition(model.params, model.dynamics, cond.image);
}

// Taped embedding, kept so its gradient can be pulled back to the conv net.
struct EmbedTape {
  Tape tape;
  ConvEmbedVars vars;
  Var out;
};

std::vector<TrajectoryPoint> to_points(const std::vector<Snapshot>& snaps, std::size_t n,
                                       std::size_t d) {
  std::vector<TrajectoryPoint> pts;
  pts.reserve(snaps.size());
  for (const auto& s : snaps) {
    pts.push_back({s.t, Tensor({n, d}, std::vector<double>(s.y.begin(),
                                                          s.y.begin() + static_cast<std::ptrdiff_t>(n * d)))});
  }
  return pts;
}

nlohmann::json solver_json(const SolverConfig& s) {
  return {{"method", s.method == SolverMethod::kAdaptive ? "adaptive" : "fixed"},
          {"rtol", s.rtol},
          {"atol", s.atol},
          {"n_steps", s.n_steps},
          {"t0", s.t0},
          {"t1", s.t1},
          {"max_nfe", s.max_nfe}};
}

}  // namespace

FlowModel make_flow_model(const DynamicsConfig& dynamics, const Architecture& arch,
                          const SolverConfig& solver, std::uint64_t seed) {
  validate(solver);
  FlowModel m;
  m.dynamics = dynamics;
  m.arch = arch;
  m.solver = solver;
  m.seed = seed;
  std::mt19937_64 rng(seed);
  m.params = make_dynamics_params(dynamics, arch, rng);
  return m;
}

double base_log_prob(const Tensor& z) {
  double sq = 0.0;
  for (double v : z.data()) sq += v * v;
  return -0.5 * static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi) - 0.5 * sq;
}

FlowField::FlowField(const FlowModel& model, std::size_t n, Tensor embedding)
    : model_(model), n_(n), d_(model.dynamics.dim), embedding_(std::move(embedding)) {
  if (n_ == 0) throw ShapeError("flow field: empty set");
  param_size_ = force_param_count(model.params) + embedding_.size();
  if (embedding_.size() > 0) embedding_ = embedding_.reshaped({1, embedding_.size()});
}

void FlowField::eval(double t, std::span<const double> y, std::span<double> dydt) {
  ++evaluations_;
  Tape tape;
  const DynamicsVars nets = bind_constants(tape, model_.params);
  const Var x = tape.constant(Tensor({n_, d_}, std::vector<double>(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n_ * d_))));
  const Var emb = embedding_.size() > 0 ? tape.constant(embedding_) : Var();
  const FieldVars f = record_field(tape, nets, model_.dynamics, x, t, emb);
  const auto v = f.velocity.value().data();
  std::copy(v.begin(), v.end(), dydt.begin());
  dydt[n_ * d_] = f.divergence.value().item();
  dydt[n_ * d_ + 1] = f.l2.value().item();
  dydt[n_ * d_ + 2] = f.l2_div.value().item();
}

void FlowField::eval_vjp(double t, std::span<const double> y, std::span<const double> a,
                         std::span<double> dydt, std::span<double> grad_y,
                         std::span<double> grad_p) {
  ++evaluations_;
  const std::size_t nd = n_ * d_;
  Tape tape;
  const DynamicsVars nets = bind_leaves(tape, model_.params);
  const Var x = tape.leaf(Tensor({n_, d_}, std::vector<double>(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(nd))));
  const Var emb = embedding_.size() > 0 ? tape.leaf(embedding_) : Var();
  const FieldVars f = record_field(tape, nets, model_.dynamics, x, t, emb);
  tape.finalize();

  const auto v = f.velocity.value().data();
  std::copy(v.begin(), v.end(), dydt.begin());
  dydt[nd] = f.divergence.value().item();
  dydt[nd + 1] = f.l2.value().item();
  dydt[nd + 2] = f.l2_div.value().item();

  const std::vector<Cotangent> seeds{
      {f.velocity, Tensor({n_, d_}, std::vector<double>(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(nd)))},
      {f.divergence, Tensor::scalar(a[nd])},
      {f.l2, Tensor::scalar(a[nd + 1])},
      {f.l2_div, Tensor::scalar(a[nd + 2])}};
  const Gradients g = tape.vjp(seeds);

  const Tensor gx = g.wrt(x);
  std::copy(gx.data().begin(), gx.data().end(), grad_y.begin());
  for (std::size_t k = nd; k < grad_y.size(); ++k) grad_y[k] = 0.0;  // accumulators feed nothing

  std::size_t k = 0;
  auto put = [&](Var var) {
    const Tensor gv = g.wrt(var);
    for (double val : gv.data()) grad_p[k++] = val;
  };
  for (const MLPVars* net : {&nets.f, &nets.g}) {
    for (std::size_t l = 0; l < net->weights.size(); ++l) {
      put(net->weights[l]);
      put(net->biases[l]);
    }
  }
  if (emb.valid()) put(emb);
}

ScoredSample sample_from(const FlowModel& model, const Tensor& z, const Condition& cond,
                         bool record_trajectory) {
  check_set(model, z);
  const std::size_t n = z.rows(), d = z.cols();
  FlowField field(model, n, embedding_of(model, cond));
  const IntegrationResult r =
      integrate(field, initial_state(z), model.solver, Direction::kForward, record_trajectory);
  const AugmentedState s = AugmentedState::unflatten(r.final_state, n, d);
  ScoredSample out;
  out.x = s.x;
  out.z = z;
  out.log_prob = base_log_prob(z) - s.delta_logp;
  out.nfe = r.nfe;
  if (record_trajectory) out.trajectory = to_points(r.trajectory, n, d);
  if (!std::isfinite(out.log_prob)) throw NumericalError("sample: non-finite log-density");
  return out;
}

ScoredSample sample(const FlowModel& model, std::size_t n, const Condition& cond,
                    std::mt19937_64& rng, bool record_trajectory) {
  if (n == 0) throw ShapeError("sample: n must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor z({n, model.dynamics.dim}, 0.0);
  for (double& v : z.data()) v = normal(rng);
  return sample_from(model, z, cond, record_trajectory);
}

Score score(const FlowModel& model, const Tensor& x, const Condition& cond) {
  check_set(model, x);
  const std::size_t n = x.rows(), d = x.cols();
  FlowField field(model, n, embedding_of(model, cond));
  const IntegrationResult r = integrate(field, initial_state(x), model.solver, Direction::kBackward);
  const AugmentedState s = AugmentedState::unflatten(r.final_state, n, d);
  // Integrating t1 -> t0 accumulates the negated forward-time integrals.
  Score out;
  out.z = s.x;
  out.log_prob = base_log_prob(s.x) + s.delta_logp;
  out.reg_l2 = -s.reg_l2;
  out.reg_l2div = -s.reg_l2div;
  out.nfe = r.nfe;
  if (!std::isfinite(out.log_prob)) throw NumericalError("log_prob: non-finite log-density");
  return out;
}

double log_prob(const FlowModel& model, const Tensor& x, const Condition& cond) {
  return score(model, x, cond).log_prob;
}

double roundtrip(const FlowModel& model, const Tensor& x, const Condition& cond) {
  const Score s = score(model, x, cond);
  const ScoredSample back = sample_from(model, s.z, cond);
  return max_abs_diff(back.x, x);
}

std::string to_string(GradMode mode) {
  return mode == GradMode::kAdjoint ? "adjoint" : "fixed_backprop";
}

GradMode grad_mode_from_string(const std::string& name) {
  if (name == "adjoint") return GradMode::kAdjoint;
  if (name == "fixed_backprop") return GradMode::kFixedBackprop;
  throw ConfigError("unknown grad_mode '" + name + "' (adjoint, fixed_backprop)");
}

void validate(const TrainConfig& tc) {
  if (!(tc.lambda_l2 >= 0.0) || !(tc.lambda_l2div >= 0.0)) {
    throw ConfigError("train: penalty weights must be >= 0");
  }
  if (!(tc.lr >= 0.0) || !std::isfinite(tc.lr)) throw ConfigError("train: lr must be finite and >= 0");
  if (tc.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (tc.fixed_steps < 1) throw ConfigError("train: fixed_steps must be >= 1");
}

LossResult nll_loss(const FlowModel& model, std::span<const Datapoint> batch,
                    const TrainConfig& tc, bool with_gradient) {
  if (batch.empty()) throw DataError("nll_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const std::size_t n_force = force_param_count(model.params);
  const std::size_t n_total = parameter_count(model.params);
  const double t0 = model.solver.t0, t1 = model.solver.t1;

  LossResult res;
  if (with_gradient) res.gradient.assign(n_total, 0.0);
  double nfe_total = 0.0;

  for (const Datapoint& dp : batch) {
    check_set(model, dp.x);
    check_condition(model, dp.cond);
    const std::size_t n = dp.x.rows(), d = dp.x.cols(), nd = n * d;

    std::optional<EmbedTape> et;
    Tensor emb;
    if (model.dynamics.conditioned()) {
      et.emplace();
      et->vars = bind_leaves(et->tape, *model.params.embed);
      et->out = conv_embed(et->vars, et->tape.constant(dp.cond.image));
      et->tape.finalize();
      emb = et->out.value();
    }
    FlowField field(model, n, emb);

    // Score: integrate t1 -> t0.
    std::vector<double> final_state;
    std::optional<FixedTrajectory> traj;
    if (tc.grad_mode == GradMode::kFixedBackprop && with_gradient) {
      traj = solve_fixed(field, initial_state(dp.x), t1, t0, tc.fixed_steps);
      final_state = traj->final_state();
    } else {
      final_state = integrate_interval(field, initial_state(dp.x), t1, t0, model.solver).final_state;
    }
    const AugmentedState s = AugmentedState::unflatten(final_state, n, d);
    const double lp = base_log_prob(s.x) + s.delta_logp;
    const double r_l2 = -s.reg_l2, r_div = -s.reg_l2div;
    const double loss = -lp + tc.lambda_l2 * r_l2 + tc.lambda_l2div * r_div;
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "nll_loss: non-finite loss (log_prob=" << lp << ", reg_l2=" << r_l2
          << ", reg_l2div=" << r_div << ") for a set of " << n << " elements";
      throw NumericalError(msg.str());
    }
    res.loss += loss * inv_b;
    res.nll += -lp * inv_b;
    res.reg_l2 += r_l2 * inv_b;
    res.reg_l2div += r_div * inv_b;

    if (with_gradient) {
      // Per-record cotangent; the 1/B weight is applied afterwards so the
      // adjoint solve of a record does not depend on the batch it sits in.
      std::vector<double> cot(final_state.size(), 0.0);
      for (std::size_t i = 0; i < nd; ++i) cot[i] = s.x[i];
      cot[nd] = -1.0;
      cot[nd + 1] = -tc.lambda_l2;
      cot[nd + 2] = -tc.lambda_l2div;
      const GradientResult g = traj ? backprop_through_solver(field, *traj, cot)
                                    : adjoint_gradients(field, final_state, cot, t1, t0, model.solver);
      for (std::size_t i = 0; i < n_force; ++i) res.gradient[i] += g.grad_params[i] * inv_b;
      if (et) {
        const Cotangent seed{et->out, Tensor({1, emb.size()},
                                             std::vector<double>(g.grad_params.begin() + static_cast<std::ptrdiff_t>(n_force),
                                                                 g.grad_params.end()))};
        const Gradients eg = et->tape.vjp(std::span<const Cotangent>(&seed, 1));
        std::size_t k = n_force;
        auto put = [&](Var v) {
          const Tensor gv = eg.wrt(v);
          for (double val : gv.data()) res.gradient[k++] += val * inv_b;
        };
        for (std::size_t l = 0; l < et->vars.kernels.size(); ++l) {
          put(et->vars.kernels[l]);
          put(et->vars.biases[l]);
        }
        put(et->vars.head_weight);
        put(et->vars.head_bias);
      }
    }
    nfe_total += static_cast<double>(field.evaluations());
  }
  res.nfe_mean = nfe_total * inv_b;
  return res;
}

std::vector<double> flatten_params(const FlowModel& model) {
  std::vector<double> out;
  for (const auto& [name, t] : parameter_refs(model.params)) {
    out.insert(out.end(), t->data().begin(), t->data().end());
  }
  return out;
}

void assign_params(FlowModel& model, std::span<const double> flat) {
  std::size_t k = 0;
  auto refs = parameter_refs(model.params);
  std::size_t total = 0;
  for (const auto& r : refs) total += r.second->size();
  if (flat.size() != total) throw ShapeError("assign_params: size mismatch");
  for (auto& [name, t] : refs) {
    for (double& v : t->data()) v = flat[k++];
  }
}

nlohmann::json model_to_json(const FlowModel& m) {
  const DynamicsConfig& c = m.dynamics;
  const Architecture& a = m.arch;
  return {{"dynamics",
           {{"dim", c.dim},
            {"use_time", c.use_time},
            {"condition_in_f", c.condition_in_f},
            {"condition_in_g", c.condition_in_g},
            {"embed_width", c.embed_width},
            {"ablation", to_string(c.ablation)}}},
          {"architecture",
           {{"f_layers", a.f_layers},
            {"f_hidden", a.f_hidden},
            {"g_layers", a.g_layers},
            {"g_hidden", a.g_hidden},
            {"embed_layers", a.embed_layers},
            {"embed_channels", a.embed_channels},
            {"kernel", a.kernel},
            {"stride", a.stride},
            {"image_channels", a.image_channels},
            {"image_height", a.image_height},
            {"image_width", a.image_width}}},
          {"solver", solver_json(m.solver)},
          {"seed", m.seed}};
}

std::string model_hash(const FlowModel& model) {
  const std::string text = model_to_json(model).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json checkpoint_to_json(const FlowModel& model) {
  const auto refs = parameter_refs(model.params);
  return {{"format", kCheckpointFormat},
          {"model", model_to_json(model)},
          {"model_hash", model_hash(model)},
          {"params", params_to_json(refs)}};
}

FlowModel checkpoint_from_json(const nlohmann::json& doc) {
  try {
    if (doc.value("format", std::string()) != kCheckpointFormat) {
      throw DataError("checkpoint: expected format '" + std::string(kCheckpointFormat) + "'");
    }
    const auto& m = doc.at("model");
    const auto& dj = m.at("dynamics");
    DynamicsConfig c;
    c.dim = dj.at("dim").get<std::size_t>();
    c.use_time = dj.at("use_time").get<bool>();
    c.condition_in_f = dj.at("condition_in_f").get<bool>();
    c.condition_in_g = dj.at("condition_in_g").get<bool>();
    c.embed_width = dj.at("embed_width").get<std::size_t>();
    c.ablation = ablation_from_string(dj.at("ablation").get<std::string>());
    const auto& aj = m.at("architecture");
    Architecture a;
    a.f_layers = aj.at("f_layers").get<std::size_t>();
    a.f_hidden = aj.at("f_hidden").get<std::size_t>();
    a.g_layers = aj.at("g_layers").get<std::size_t>();
    a.g_hidden = aj.at("g_hidden").get<std::size_t>();
    a.embed_layers = aj.at("embed_layers").get<std::size_t>();
    a.embed_channels = aj.at("embed_channels").get<std::size_t>();
    a.kernel = aj.at("kernel").get<std::size_t>();
    a.stride = aj.at("stride").get<std::size_t>();
    a.image_channels = aj.at("image_channels").get<std::size_t>();
    a.image_height = aj.at("image_height").get<std::size_t>();
    a.image_width = aj.at("image_width").get<std::size_t>();
    const auto& sj = m.at("solver");
    SolverConfig s;
    const std::string method = sj.at("method").get<std::string>();
    if (method != "adaptive" && method != "fixed") throw DataError("checkpoint: bad solver method");
    s.method = method == "adaptive" ? SolverMethod::kAdaptive : SolverMethod::kFixed;
    s.rtol = sj.at("rtol").get<double>();
    s.atol = sj.at("atol").get<double>();
    s.n_steps = sj.at("n_steps").get<std::size_t>();
    s.t0 = sj.at("t0").get<double>();
    s.t1 = sj.at("t1").get<double>();
    s.max_nfe = sj.at("max_nfe").get<std::size_t>();
    FlowModel model = make_flow_model(c, a, s, m.at("seed").get<std::uint64_t>());
    auto refs = parameter_refs(model.params);
    params_from_json(doc.at("params"), refs);
    if (doc.contains("model_hash") && doc.at("model_hash").get<std::string>() != model_hash(model)) {
      throw DataError("checkpoint: stored model_hash " + doc.at("model_hash").get<std::string>() +
                      " does not match recomputed " + model_hash(model));
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace permflow
