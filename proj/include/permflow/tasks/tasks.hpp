// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "permflow/diff/tensor.hpp"

namespace permflow {

inline constexpr double kTargetWidth = 1.0;
inline constexpr double kProhibitedWidth = 1.5;
inline constexpr std::size_t kMaxConsecutiveRejections = 10000;

/// Axis-aligned square.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = kTargetWidth;
};

/// Open-interval test: boxes that only touch do not overlap.
bool overlap(const Box& a, const Box& b);

/// Intersection area over union area.
double iou(const Box& a, const Box& b);

enum class TaskKind { kBoxesCond, kBbox };

std::string to_string(TaskKind kind);
TaskKind task_from_string(const std::string& name);

struct SceneRecord {
  std::vector<Box> prohibited;  // condition geometry (task 1 only)
  std::vector<Box> targets;     // the set x

  std::size_t n() const { return targets.size(); }
};

/// Non-positive widths, target/target overlap, or target/prohibited overlap
/// raise DataError.
void validate(const SceneRecord& record);

/// Prohibited centers and then targets drawn from N(0, I); each target is
/// redrawn until it clears the prohibited boxes and earlier targets. After
/// kMaxConsecutiveRejections failures in a row the record starts over.
SceneRecord gen_task1(std::mt19937_64& rng, std::size_t n_targets, std::size_t n_prohibited = 3);

struct Task2Options {
  bool vary_size = false;    // D = 3 variant: log w ~ N(0, log_w_sigma^2)
  double log_w_sigma = 0.2;
};

SceneRecord gen_task2(std::mt19937_64& rng, std::size_t n_objects, const Task2Options& opts = {});

struct RasterSpec {
  std::size_t size = 32;  // square grid
  double extent = 4.0;    // domain [-extent, extent]^2

  double pixel_center(std::size_t index) const;
};

/// [1 x size x size]; a pixel is 1 iff its center lies strictly inside any
/// box. Row r covers y = -extent + (r + 0.5) * cell, column c covers x.
Tensor rasterize(std::span<const Box> boxes, const RasterSpec& spec = {});

/// What the flow is conditioned on: prohibited boxes for task 1, the targets
/// themselves for task 2.
Tensor condition_image(const SceneRecord& record, TaskKind kind, const RasterSpec& spec = {});

/// Rows (cx, cy) with fixed width, or (cx, cy, log w) when dim == 3.
Tensor encode_targets(const SceneRecord& record, std::size_t dim);
std::vector<Box> decode_boxes(const Tensor& x, double fixed_width = kTargetWidth);

struct InfractionReport {
  bool overlap = false;  // two sampled boxes overlap ("collision")
  bool region = false;   // a sampled box touches a prohibited region ("offroad")
  bool any() const { return overlap || region; }
};

InfractionReport infraction_report(const Tensor& x, const SceneRecord& scene,
                                   double fixed_width = kTargetWidth);

struct InfractionRates {
  double overlap_rate = 0.0;
  double region_rate = 0.0;
  double infraction_rate = 0.0;
  double acceptance_rate = 0.0;
  std::size_t count = 0;
};

InfractionRates aggregate(std::span<const InfractionReport> reports);

/// CLEVR bounding-box size approximation z / sqrt(d_z). Throws DomainError
/// for d_z <= 0.
double clevr_box_size(double z, double d_z);

/// Fraction of joint prior draws (prohibited and targets all from N(0, I),
/// no rejection) that satisfy every overlap constraint.
double raw_prior_acceptance(std::mt19937_64& rng, std::size_t n_targets, std::size_t n_prohibited,
                            std::size_t draws, double target_width = kTargetWidth,
                            double prohibited_width = kProhibitedWidth);

/// Same, with each scene's prohibited boxes held fixed and only the n
/// targets drawn from the prior.
double raw_prior_acceptance_given(std::span<const SceneRecord> scenes, std::size_t n_targets,
                                  std::size_t draws_per_scene, std::mt19937_64& rng);

/// One of the eight symmetries of the square applied to every box center:
/// bit 0 of k swaps x and y, bit 1 negates x, bit 2 negates y. Both
/// generators are invariant under these maps, so a transformed record is a
/// draw from the same distribution.
SceneRecord dihedral_transform(const SceneRecord& record, unsigned k);
/// Every record followed by its seven transformed copies.
std::vector<SceneRecord> dihedral_augment(std::span<const SceneRecord> records);

// Datasets: NDJSON, one record per line, plus a sidecar manifest.
inline constexpr const char* kDatasetFormat = "permflow-dataset-v1";

struct DatasetSpec {
  TaskKind task = TaskKind::kBoxesCond;
  std::size_t n_min = 5;
  std::size_t n_max = 5;
  std::size_t count = 0;
  std::size_t n_prohibited = 3;
  std::uint64_t seed = 0;
  Task2Options task2;
  RasterSpec raster;
};

/// Record i uses its own generator seeded from (seed, i), so any shard of
/// indices can be produced independently and merged by index.
std::vector<SceneRecord> generate_dataset(const DatasetSpec& spec);
SceneRecord generate_record(const DatasetSpec& spec, std::size_t index);

nlohmann::json record_to_json(const SceneRecord& record);
SceneRecord record_from_json(const nlohmann::json& j);
nlohmann::json manifest_json(const DatasetSpec& spec);

/// Writes `path` (NDJSON) and `path` + ".manifest.json". Every record is
/// validated first.
void write_dataset(const std::filesystem::path& path, std::span<const SceneRecord> records,
                   const DatasetSpec& spec);
/// DataError names the path and line on any problem.
std::vector<SceneRecord> read_dataset(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& dataset);

}  // namespace permflow
