// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "permflow/diff/nn.hpp"
#include "permflow/diff/tape.hpp"

namespace permflow {

enum class AblationMode { kFull, kSingleOnly, kPairOnly };

std::string to_string(AblationMode mode);
AblationMode ablation_from_string(const std::string& name);

/// Which inputs the pair force f and the single force g see.
struct DynamicsConfig {
  std::size_t dim = 2;             // D, feature width per element
  bool use_time = true;            // t appended to the first-layer input of f and g
  bool condition_in_f = true;      // embedding appended to f's second-layer input
  bool condition_in_g = true;      // embedding appended to g's second-layer input
  std::size_t embed_width = 0;     // width of the condition embedding
  AblationMode ablation = AblationMode::kFull;

  bool conditioned() const { return condition_in_f || condition_in_g; }
  std::size_t f_input_width() const { return 2 * dim + (use_time ? 1 : 0); }
  std::size_t g_input_width() const { return dim + (use_time ? 1 : 0); }
};

/// Layer counts and widths for the three networks.
struct Architecture {
  std::size_t f_layers = 5;
  std::size_t f_hidden = 200;
  std::size_t g_layers = 5;
  std::size_t g_hidden = 200;
  std::size_t embed_layers = 3;
  std::size_t embed_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t image_channels = 1;
  std::size_t image_height = 32;
  std::size_t image_width = 32;
};

struct DynamicsParams {
  MLPParams f;                           // pair force, [x_i, x_j (, t)] -> D
  MLPParams g;                           // single force, [x_i (, t)] -> D
  std::optional<ConvEmbedParams> embed;  // present iff the config is conditioned
};

DynamicsParams make_dynamics_params(const DynamicsConfig& cfg, const Architecture& arch,
                                    std::mt19937_64& rng);

/// Zeroes the output layer of f and g, so the field starts at v = 0 and the
/// flow at the identity.
void zero_output_layers(DynamicsParams& params);

/// Throws ShapeError when parameter widths disagree with the config.
void validate(const DynamicsParams& params, const DynamicsConfig& cfg);

/// Stable order shared by serialization, the optimizer and flat gradients:
/// f.*, g.*, then embed.*.
std::vector<TensorRef> parameter_refs(DynamicsParams& params);
std::vector<ConstTensorRef> parameter_refs(const DynamicsParams& params);
std::size_t parameter_count(const DynamicsParams& params);

struct DynamicsVars {
  MLPVars f;
  MLPVars g;
};

DynamicsVars bind_leaves(Tape& tape, const DynamicsParams& params);
DynamicsVars bind_constants(Tape& tape, const DynamicsParams& params);

/// Taped velocity, exact divergence, and the two regularization densities.
struct FieldVars {
  Var velocity;    // [N x D]
  Var divergence;  // scalar
  Var l2;          // scalar, sum_i |v_i|^2
  Var l2_div;      // scalar, squared first-argument Jacobian blocks
};

/// Records the field at (x, t). `emb` is a [1 x embed_width] row, or an
/// invalid Var for an unconditioned config.
FieldVars record_field(Tape& tape, const DynamicsVars& nets, const DynamicsConfig& cfg, Var x,
                       double t, Var emb);

struct RegDensities {
  double l2 = 0.0;
  double l2_div = 0.0;
};

/// Value-level conveniences. `emb` is empty for an unconditioned config.
Tensor velocity(const DynamicsParams& params, const DynamicsConfig& cfg, const Tensor& x,
                double t, const Tensor& emb);
double divergence(const DynamicsParams& params, const DynamicsConfig& cfg, const Tensor& x,
                  double t, const Tensor& emb);
RegDensities reg_densities(const DynamicsParams& params, const DynamicsConfig& cfg,
                           const Tensor& x, double t, const Tensor& emb);

/// Embedding row [1 x embed_width] for an image, or an empty tensor for an
/// unconditioned config.
Tensor embed_condition(const DynamicsParams& params, const DynamicsConfig& cfg,
                       const Tensor& image);

}  // namespace permflow
