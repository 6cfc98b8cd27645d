// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/dynamics/dynamics.hpp"

#include <map>
#include <memory>

#include "permflow/core/error.hpp"

namespace permflow {
namespace {

struct PairIndex {
  IndexList first;   // i of each ordered pair (i, j), i != j
  IndexList second;  // j
};

const PairIndex& pair_index(std::size_t n) {
  thread_local std::map<std::size_t, PairIndex> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  auto first = std::make_shared<std::vector<std::size_t>>();
  auto second = std::make_shared<std::vector<std::size_t>>();
  first->reserve(n * (n - 1));
  second->reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      first->push_back(i);
      second->push_back(j);
    }
  }
  return cache.emplace(n, PairIndex{std::move(first), std::move(second)}).first->second;
}

Tensor unit_column(std::size_t rows, std::size_t cols, std::size_t d) {
  Tensor t({rows, cols}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) t[r * cols + d] = 1.0;
  return t;
}

// Divergence and squared-Jacobian contributions of `out` with respect to the
// first-argument block `seed`, one tangent pass per coordinate.
struct TracePair {
  Var trace;
  Var frobenius;
};

TracePair first_block_trace(Tape& tape, Var seed, Var out, std::size_t dim) {
  TracePair acc;
  const std::size_t rows = seed.rows();
  for (std::size_t d = 0; d < dim; ++d) {
    const Var tangent = tape.constant(unit_column(rows, dim, d));
    const Var column = tape.jvp(std::span<const Var>(&seed, 1), std::span<const Var>(&tangent, 1),
                                std::span<const Var>(&out, 1))
                           .front();
    const Var diag = sum(slice_cols(column, d, d + 1));
    const Var sq = sum_squares(column);
    acc.trace = acc.trace.valid() ? add(acc.trace, diag) : diag;
    acc.frobenius = acc.frobenius.valid() ? add(acc.frobenius, sq) : sq;
  }
  return acc;
}

template <typename Bind>
DynamicsVars bind_with(Tape& tape, const DynamicsParams& params, Bind&& bind) {
  return DynamicsVars{bind(tape, params.f), bind(tape, params.g)};
}

Var row_or_invalid(Tape& tape, const Tensor& emb) {
  if (emb.size() == 0) return {};
  return tape.constant(emb.reshaped({1, emb.size()}));
}

FieldVars value_field(Tape& tape, const DynamicsParams& params, const DynamicsConfig& cfg,
                      const Tensor& x, double t, const Tensor& emb) {
  const DynamicsVars nets = bind_constants(tape, params);
  return record_field(tape, nets, cfg, tape.constant(x), t, row_or_invalid(tape, emb));
}

}  // namespace

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::kFull: return "full";
    case AblationMode::kSingleOnly: return "single_only";
    case AblationMode::kPairOnly: return "pair_only";
  }
  return "full";
}

AblationMode ablation_from_string(const std::string& name) {
  if (name == "full") return AblationMode::kFull;
  if (name == "single_only") return AblationMode::kSingleOnly;
  if (name == "pair_only") return AblationMode::kPairOnly;
  throw ConfigError("unknown ablation mode '" + name + "' (full, single_only, pair_only)");
}

DynamicsParams make_dynamics_params(const DynamicsConfig& cfg, const Architecture& arch,
                                    std::mt19937_64& rng) {
  if (cfg.dim == 0) throw ShapeError("dynamics: dim must be positive");
  if (arch.f_layers == 0 || arch.g_layers == 0) throw ShapeError("dynamics: layer count must be positive");
  auto widths = [&](std::size_t in, std::size_t layers, std::size_t hidden) {
    std::vector<std::size_t> w{in};
    for (std::size_t l = 0; l + 1 < layers; ++l) w.push_back(hidden);
    w.push_back(cfg.dim);
    return w;
  };
  DynamicsParams p;
  const auto fw = widths(cfg.f_input_width(), arch.f_layers, arch.f_hidden);
  const auto gw = widths(cfg.g_input_width(), arch.g_layers, arch.g_hidden);
  p.f = make_mlp(fw, cfg.condition_in_f ? cfg.embed_width : 0, rng);
  p.g = make_mlp(gw, cfg.condition_in_g ? cfg.embed_width : 0, rng);
  if (cfg.conditioned()) {
    if (cfg.embed_width == 0) throw ShapeError("dynamics: conditioned config needs embed_width > 0");
    p.embed = make_conv_embed(arch.image_channels, arch.image_height, arch.image_width,
                              arch.embed_layers, arch.embed_channels, arch.kernel, arch.stride,
                              cfg.embed_width, rng);
  }
  return p;
}

void zero_output_layers(DynamicsParams& params) {
  for (MLPParams* net : {&params.f, &params.g}) {
    DenseLayer& out = net->layers.back();
    std::fill(out.weight.storage().begin(), out.weight.storage().end(), 0.0);
    std::fill(out.bias.storage().begin(), out.bias.storage().end(), 0.0);
  }
}

void validate(const DynamicsParams& params, const DynamicsConfig& cfg) {
  if (params.f.input_width() != cfg.f_input_width() || params.f.output_width() != cfg.dim) {
    throw ShapeError("pair force widths do not match the dynamics config");
  }
  if (params.g.input_width() != cfg.g_input_width() || params.g.output_width() != cfg.dim) {
    throw ShapeError("single force widths do not match the dynamics config");
  }
  if (params.f.cond_width != (cfg.condition_in_f ? cfg.embed_width : 0) ||
      params.g.cond_width != (cfg.condition_in_g ? cfg.embed_width : 0)) {
    throw ShapeError("condition widths do not match the dynamics config");
  }
  if (cfg.conditioned() != params.embed.has_value()) {
    throw ShapeError("embedding network presence does not match the dynamics config");
  }
  if (params.embed && params.embed->embed_width() != cfg.embed_width) {
    throw ShapeError("embedding width does not match the dynamics config");
  }
}

std::vector<TensorRef> parameter_refs(DynamicsParams& params) {
  std::vector<TensorRef> out;
  collect_tensors(params.f, "f", out);
  collect_tensors(params.g, "g", out);
  if (params.embed) collect_tensors(*params.embed, "embed", out);
  return out;
}

std::vector<ConstTensorRef> parameter_refs(const DynamicsParams& params) {
  std::vector<ConstTensorRef> out;
  collect_tensors(params.f, "f", out);
  collect_tensors(params.g, "g", out);
  if (params.embed) collect_tensors(*params.embed, "embed", out);
  return out;
}

std::size_t parameter_count(const DynamicsParams& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : parameter_refs(params)) n += t->size();
  return n;
}

DynamicsVars bind_leaves(Tape& tape, const DynamicsParams& params) {
  return bind_with(tape, params, [](Tape& tp, const MLPParams& p) { return permflow::bind_leaves(tp, p); });
}

DynamicsVars bind_constants(Tape& tape, const DynamicsParams& params) {
  return bind_with(tape, params, [](Tape& tp, const MLPParams& p) { return permflow::bind_constants(tp, p); });
}

FieldVars record_field(Tape& tape, const DynamicsVars& nets, const DynamicsConfig& cfg, Var x,
                       double t, Var emb) {
  if (x.value().rank() != 2 || x.cols() != cfg.dim || x.rows() == 0) {
    throw ShapeError("dynamics: state shape " + shape_string(x.shape()) + " expected [N x " +
                     std::to_string(cfg.dim) + "]");
  }
  if (cfg.conditioned() != emb.valid()) {
    throw ShapeError(cfg.conditioned() ? "dynamics: conditioned config needs an embedding"
                                       : "dynamics: embedding given to an unconditioned config");
  }
  if (emb.valid() && (emb.value().size() != cfg.embed_width)) {
    throw ShapeError("dynamics: embedding width " + std::to_string(emb.value().size()) +
                     " expected " + std::to_string(cfg.embed_width));
  }
  const std::size_t n = x.rows();
  const std::size_t d = cfg.dim;
  const Var zero = tape.constant(Tensor::scalar(0.0));

  Var v_pair, div_pair = zero, jac_pair = zero;
  if (cfg.ablation != AblationMode::kSingleOnly && n > 1) {
    const PairIndex& idx = pair_index(n);
    const std::size_t rows = idx.first->size();
    const Var xi = gather_rows(x, idx.first);
    const Var xj = gather_rows(x, idx.second);
    std::vector<Var> parts{xi, xj};
    if (cfg.use_time) parts.push_back(tape.constant(Tensor({rows, 1}, t)));
    const Var out = mlp_forward(nets.f, concat_cols(parts), cfg.condition_in_f ? emb : Var());
    v_pair = segment_sum(out, idx.first, n);
    const TracePair tr = first_block_trace(tape, xi, out, d);
    div_pair = tr.trace;
    jac_pair = tr.frobenius;
  } else {
    v_pair = tape.constant(Tensor({n, d}, 0.0));
  }

  Var v_single, div_single = zero, jac_single = zero;
  if (cfg.ablation != AblationMode::kPairOnly) {
    Var in = x;
    if (cfg.use_time) {
      const std::vector<Var> parts{x, tape.constant(Tensor({n, 1}, t))};
      in = concat_cols(parts);
    }
    const Var out = mlp_forward(nets.g, in, cfg.condition_in_g ? emb : Var());
    v_single = out;
    const TracePair tr = first_block_trace(tape, x, out, d);
    div_single = tr.trace;
    jac_single = tr.frobenius;
  } else {
    v_single = tape.constant(Tensor({n, d}, 0.0));
  }

  FieldVars f;
  f.velocity = add(v_pair, v_single);
  f.divergence = add(div_pair, div_single);
  f.l2 = sum_squares(f.velocity);
  f.l2_div = add(jac_pair, jac_single);
  return f;
}

Tensor velocity(const DynamicsParams& params, const DynamicsConfig& cfg, const Tensor& x,
                double t, const Tensor& emb) {
  Tape tape;
  return value_field(tape, params, cfg, x, t, emb).velocity.value();
}

double divergence(const DynamicsParams& params, const DynamicsConfig& cfg, const Tensor& x,
                  double t, const Tensor& emb) {
  Tape tape;
  return value_field(tape, params, cfg, x, t, emb).divergence.value().item();
}

RegDensities reg_densities(const DynamicsParams& params, const DynamicsConfig& cfg,
                           const Tensor& x, double t, const Tensor& emb) {
  Tape tape;
  const FieldVars f = value_field(tape, params, cfg, x, t, emb);
  return {f.l2.value().item(), f.l2_div.value().item()};
}

Tensor embed_condition(const DynamicsParams& params, const DynamicsConfig& cfg,
                       const Tensor& image) {
  if (!cfg.conditioned()) return {};
  if (!params.embed) throw ShapeError("conditioned config without an embedding network");
  return conv_embed(*params.embed, image);
}

}  // namespace permflow
