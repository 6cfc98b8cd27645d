// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "permflow/flow/flow_model.hpp"
#include "permflow/tasks/tasks.hpp"
#include "permflow/train/train.hpp"

namespace permflow::cli {

inline constexpr const char* kConfigFormat = "permflow-config-v1";

struct TaskSection {
  std::string kind = "boxes-cond";
  std::size_t dim = 2;
  std::size_t n_prohibited = 3;
  std::size_t raster_size = 32;
  double extent = 4.0;
  bool vary_size = false;
  double log_w_sigma = 0.2;
};

struct ModelSection {
  std::size_t f_layers = 5;
  std::size_t f_hidden = 200;
  std::size_t g_layers = 5;
  std::size_t g_hidden = 200;
  std::size_t embed_layers = 3;
  std::size_t embed_channels = 16;
  std::size_t embed_width = 200;
  std::size_t kernel = 3;
  std::size_t stride = 2;
  bool use_time = true;
  bool condition_in_f = true;
  bool condition_in_g = true;
  std::string ablation = "full";
  bool zero_init = false;  // start f and g with a zero output layer (identity flow)
  std::uint64_t seed = 0;
};

struct SolverSection {
  std::string method = "adaptive";
  double rtol = 1e-6;
  double atol = 1e-6;
  std::size_t n_steps = 32;
  double t1 = 1.0;
  std::size_t max_nfe = 100000;
};

struct TrainSection {
  double lambda_l2 = 0.0;
  double lambda_l2div = 0.0;
  double lr = 1e-3;
  std::size_t batch_size = 100;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  std::string grad_mode = "adjoint";
  std::size_t fixed_steps = 32;
  double max_seconds = 0.0;
  std::string augment = "none";  // "dihedral": add the seven square-symmetric copies of each record
};

struct EvalSection {
  std::size_t samples_per_scene = 10;
  std::size_t n = 0;             // elements per sampled set; 0 = the scene's own count
  std::size_t max_scenes = 0;    // 0 = every scene
  std::size_t audit_records = 20;
  std::size_t n_perms = 5;
  std::uint64_t seed = 0;
};

struct IoSection {
  std::string checkpoint = "checkpoint.json";
  std::string history = "history.csv";
  std::string resolved_config = "config.resolved.toml";
  std::string report = "eval.json";
  std::string samples = "samples.ndjson";
  std::string logprob = "logprob.csv";
};

struct RunConfig {
  TaskSection task;
  ModelSection model;
  SolverSection solver;
  TrainSection train;
  EvalSection eval;
  IoSection io;
};

/// Parses and validates a TOML document. Every missing field keeps its
/// default; unknown sections or keys, type errors and invalid values are all
/// collected and raised together as one ConfigError.
RunConfig parse_config(const std::string& text, const std::string& source = "config");
RunConfig load_config(const std::filesystem::path& path);
void validate(const RunConfig& cfg);

/// Fully resolved TOML; parse_config(to_toml(cfg)) reproduces cfg.
std::string to_toml(const RunConfig& cfg);

TaskKind task_kind(const RunConfig& cfg);
RasterSpec raster_spec(const RunConfig& cfg);
DynamicsConfig dynamics_config(const RunConfig& cfg);
Architecture architecture(const RunConfig& cfg);
SolverConfig solver_config(const RunConfig& cfg);
TrainConfig train_config(const RunConfig& cfg);
FlowModel make_model(const RunConfig& cfg);

}  // namespace permflow::cli
