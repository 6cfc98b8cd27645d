// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/tasks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "permflow/core/error.hpp"

namespace permflow {
namespace {

Box draw_box(std::mt19937_64& rng, double w) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double cx = normal(rng);
  const double cy = normal(rng);
  return {cx, cy, w};
}

bool clears(const Box& b, std::span<const Box> others) {
  return std::none_of(others.begin(), others.end(), [&](const Box& o) { return overlap(b, o); });
}

// Sequential rejection of targets against `fixed` and earlier targets.
// Returns false when one target exhausts its rejection budget.
bool place_targets(std::mt19937_64& rng, std::size_t n, std::span<const Box> fixed,
                   std::vector<Box>& out, const std::function<double()>& width) {
  out.clear();
  while (out.size() < n) {
    std::size_t rejections = 0;
    while (true) {
      const Box b = draw_box(rng, width());
      if (clears(b, fixed) && clears(b, out)) {
        out.push_back(b);
        break;
      }
      if (++rejections >= kMaxConsecutiveRejections) return false;
    }
  }
  return true;
}

double interval_overlap(double c1, double h1, double c2, double h2) {
  return std::max(0.0, std::min(c1 + h1, c2 + h2) - std::max(c1 - h1, c2 - h2));
}

nlohmann::json boxes_json(std::span<const Box> boxes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Box& b : boxes) arr.push_back({b.cx, b.cy, b.w});
  return arr;
}

std::vector<Box> boxes_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw DataError("expected an array of [cx, cy, w] boxes");
  std::vector<Box> out;
  for (const auto& e : arr) {
    if (!e.is_array() || e.size() != 3) throw DataError("box must be [cx, cy, w]");
    out.push_back({e[0].get<double>(), e[1].get<double>(), e[2].get<double>()});
  }
  return out;
}

}  // namespace

bool overlap(const Box& a, const Box& b) {
  const double reach = 0.5 * (a.w + b.w);
  return std::abs(a.cx - b.cx) < reach && std::abs(a.cy - b.cy) < reach;
}

double iou(const Box& a, const Box& b) {
  const double ix = interval_overlap(a.cx, 0.5 * a.w, b.cx, 0.5 * b.w);
  const double iy = interval_overlap(a.cy, 0.5 * a.w, b.cy, 0.5 * b.w);
  const double inter = ix * iy;
  const double uni = a.w * a.w + b.w * b.w - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::string to_string(TaskKind kind) { return kind == TaskKind::kBoxesCond ? "boxes-cond" : "bbox"; }

TaskKind task_from_string(const std::string& name) {
  if (name == "boxes-cond") return TaskKind::kBoxesCond;
  if (name == "bbox") return TaskKind::kBbox;
  throw ConfigError("unknown task '" + name + "' (boxes-cond, bbox)");
}

void validate(const SceneRecord& r) {
  for (const auto* list : {&r.prohibited, &r.targets}) {
    for (const Box& b : *list) {
      if (!(b.w > 0.0) || !std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.w)) {
        throw DataError("scene record: box widths must be positive and coordinates finite");
      }
    }
  }
  for (std::size_t i = 0; i < r.targets.size(); ++i) {
    for (std::size_t j = i + 1; j < r.targets.size(); ++j) {
      if (overlap(r.targets[i], r.targets[j])) {
        throw DataError("scene record: targets " + std::to_string(i) + " and " + std::to_string(j) +
                        " overlap");
      }
    }
    if (!clears(r.targets[i], r.prohibited)) {
      throw DataError("scene record: target " + std::to_string(i) + " overlaps a prohibited box");
    }
  }
}

SceneRecord gen_task1(std::mt19937_64& rng, std::size_t n_targets, std::size_t n_prohibited) {
  if (n_targets == 0) throw ConfigError("gen_task1: n_targets must be >= 1");
  SceneRecord r;
  const auto width = [] { return kTargetWidth; };
  while (true) {
    r.prohibited.clear();
    for (std::size_t k = 0; k < n_prohibited; ++k) r.prohibited.push_back(draw_box(rng, kProhibitedWidth));
    if (place_targets(rng, n_targets, r.prohibited, r.targets, width)) return r;
  }
}

SceneRecord gen_task2(std::mt19937_64& rng, std::size_t n_objects, const Task2Options& opts) {
  if (n_objects == 0) throw ConfigError("gen_task2: n_objects must be >= 1");
  SceneRecord r;
  std::normal_distribution<double> log_w(0.0, opts.log_w_sigma);
  const auto width = [&] { return opts.vary_size ? kTargetWidth * std::exp(log_w(rng)) : kTargetWidth; };
  while (!place_targets(rng, n_objects, {}, r.targets, width)) {
  }
  return r;
}

double RasterSpec::pixel_center(std::size_t index) const {
  const double cell = 2.0 * extent / static_cast<double>(size);
  return -extent + (static_cast<double>(index) + 0.5) * cell;
}

Tensor rasterize(std::span<const Box> boxes, const RasterSpec& spec) {
  Tensor img({1, spec.size, spec.size}, 0.0);
  for (const Box& b : boxes) {
    const double h = 0.5 * b.w;
    for (std::size_t r = 0; r < spec.size; ++r) {
      const double y = spec.pixel_center(r);
      if (!(std::abs(y - b.cy) < h)) continue;
      for (std::size_t c = 0; c < spec.size; ++c) {
        if (std::abs(spec.pixel_center(c) - b.cx) < h) img[r * spec.size + c] = 1.0;
      }
    }
  }
  return img;
}

Tensor condition_image(const SceneRecord& record, TaskKind kind, const RasterSpec& spec) {
  return kind == TaskKind::kBoxesCond ? rasterize(record.prohibited, spec)
                                      : rasterize(record.targets, spec);
}

Tensor encode_targets(const SceneRecord& record, std::size_t dim) {
  if (dim != 2 && dim != 3) throw ConfigError("box encoding supports dim 2 or 3");
  Tensor x({record.n(), dim}, 0.0);
  for (std::size_t i = 0; i < record.n(); ++i) {
    const Box& b = record.targets[i];
    x.at(i, 0) = b.cx;
    x.at(i, 1) = b.cy;
    if (dim == 3) x.at(i, 2) = std::log(b.w);
  }
  return x;
}

std::vector<Box> decode_boxes(const Tensor& x, double fixed_width) {
  if (x.rank() != 2 || (x.cols() != 2 && x.cols() != 3)) {
    throw ShapeError("decode_boxes: expected [N x 2] or [N x 3], got " + shape_string(x.shape()));
  }
  std::vector<Box> out;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double w = x.cols() == 3 ? std::exp(x.at(i, 2)) : fixed_width;
    out.push_back({x.at(i, 0), x.at(i, 1), w});
  }
  return out;
}

InfractionReport infraction_report(const Tensor& x, const SceneRecord& scene, double fixed_width) {
  const std::vector<Box> boxes = decode_boxes(x, fixed_width);
  InfractionReport rep;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (!clears(boxes[i], scene.prohibited)) rep.region = true;
    for (std::size_t j = i + 1; j < boxes.size(); ++j) {
      if (overlap(boxes[i], boxes[j])) rep.overlap = true;
    }
  }
  return rep;
}

InfractionRates aggregate(std::span<const InfractionReport> reports) {
  InfractionRates r;
  r.count = reports.size();
  if (reports.empty()) return r;
  std::size_t ov = 0, reg = 0, any = 0;
  for (const auto& rep : reports) {
    ov += rep.overlap;
    reg += rep.region;
    any += rep.any();
  }
  const double n = static_cast<double>(reports.size());
  r.overlap_rate = static_cast<double>(ov) / n;
  r.region_rate = static_cast<double>(reg) / n;
  r.infraction_rate = static_cast<double>(any) / n;
  r.acceptance_rate = 1.0 - r.infraction_rate;
  return r;
}

double clevr_box_size(double z, double d_z) {
  if (!(d_z > 0.0)) throw DomainError("clevr_box_size: d_z must be > 0");
  return z / std::sqrt(d_z);
}

double raw_prior_acceptance(std::mt19937_64& rng, std::size_t n_targets, std::size_t n_prohibited,
                            std::size_t draws, double target_width, double prohibited_width) {
  if (draws == 0) throw ConfigError("raw_prior_acceptance: draws must be >= 1");
  std::vector<Box> prohibited(n_prohibited), targets(n_targets);
  std::size_t accepted = 0;
  for (std::size_t k = 0; k < draws; ++k) {
    for (Box& b : prohibited) b = draw_box(rng, prohibited_width);
    for (Box& b : targets) b = draw_box(rng, target_width);
    bool ok = true;
    for (std::size_t i = 0; i < n_targets && ok; ++i) {
      ok = clears(targets[i], prohibited) &&
           clears(targets[i], std::span<const Box>(targets).subspan(i + 1));
    }
    accepted += ok;
  }
  return static_cast<double>(accepted) / static_cast<double>(draws);
}

double raw_prior_acceptance_given(std::span<const SceneRecord> scenes, std::size_t n_targets,
                                  std::size_t draws_per_scene, std::mt19937_64& rng) {
  if (scenes.empty() || draws_per_scene == 0) throw ConfigError("raw_prior_acceptance_given: nothing to draw");
  std::vector<Box> targets(n_targets);
  std::size_t accepted = 0;
  for (const SceneRecord& s : scenes) {
    for (std::size_t k = 0; k < draws_per_scene; ++k) {
      for (Box& b : targets) b = draw_box(rng, kTargetWidth);
      bool ok = true;
      for (std::size_t i = 0; i < n_targets && ok; ++i) {
        ok = clears(targets[i], s.prohibited) &&
             clears(targets[i], std::span<const Box>(targets).subspan(i + 1));
      }
      accepted += ok;
    }
  }
  return static_cast<double>(accepted) / static_cast<double>(scenes.size() * draws_per_scene);
}

SceneRecord generate_record(const DatasetSpec& spec, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  const std::size_t n = std::uniform_int_distribution<std::size_t>(spec.n_min, spec.n_max)(rng);
  return spec.task == TaskKind::kBoxesCond ? gen_task1(rng, n, spec.n_prohibited)
                                           : gen_task2(rng, n, spec.task2);
}

SceneRecord dihedral_transform(const SceneRecord& record, unsigned k) {
  if (k >= 8) throw ConfigError("dihedral_transform: k must be < 8");
  auto map = [k](Box b) {
    if (k & 1u) std::swap(b.cx, b.cy);
    if (k & 2u) b.cx = -b.cx;
    if (k & 4u) b.cy = -b.cy;
    return b;
  };
  SceneRecord out;
  for (const Box& b : record.prohibited) out.prohibited.push_back(map(b));
  for (const Box& b : record.targets) out.targets.push_back(map(b));
  return out;
}

std::vector<SceneRecord> dihedral_augment(std::span<const SceneRecord> records) {
  std::vector<SceneRecord> out;
  out.reserve(records.size() * 8);
  for (const SceneRecord& r : records)
    for (unsigned k = 0; k < 8; ++k) out.push_back(dihedral_transform(r, k));
  return out;
}

std::vector<SceneRecord> generate_dataset(const DatasetSpec& spec) {
  if (spec.n_min < 1 || spec.n_max < spec.n_min) {
    throw ConfigError("dataset: need 1 <= n_min <= n_max");
  }
  std::vector<SceneRecord> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) out.push_back(generate_record(spec, i));
  return out;
}

nlohmann::json record_to_json(const SceneRecord& r) {
  return {{"prohibited", boxes_json(r.prohibited)}, {"targets", boxes_json(r.targets)}};
}

SceneRecord record_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("prohibited") || !j.contains("targets")) {
    throw DataError("record needs \"prohibited\" and \"targets\"");
  }
  SceneRecord r;
  r.prohibited = boxes_from_json(j.at("prohibited"));
  r.targets = boxes_from_json(j.at("targets"));
  return r;
}

nlohmann::json manifest_json(const DatasetSpec& spec) {
  return {{"format", kDatasetFormat},
          {"task", to_string(spec.task)},
          {"seed", spec.seed},
          {"count", spec.count},
          {"n_min", spec.n_min},
          {"n_max", spec.n_max},
          {"n_prohibited", spec.task == TaskKind::kBoxesCond ? spec.n_prohibited : 0},
          {"target_width", kTargetWidth},
          {"prohibited_width", kProhibitedWidth},
          {"vary_size", spec.task2.vary_size},
          {"log_w_sigma", spec.task2.log_w_sigma},
          {"raster", {{"size", spec.raster.size}, {"extent", spec.raster.extent}}}};
}

std::filesystem::path manifest_path(const std::filesystem::path& dataset) {
  return std::filesystem::path(dataset.string() + ".manifest.json");
}

void write_dataset(const std::filesystem::path& path, std::span<const SceneRecord> records,
                   const DatasetSpec& spec) {
  for (const SceneRecord& r : records) validate(r);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write dataset '" + path.string() + "'");
  for (const SceneRecord& r : records) out << record_to_json(r).dump() << '\n';
  std::ofstream man(manifest_path(path), std::ios::binary | std::ios::trunc);
  if (!man) throw DataError("cannot write manifest '" + manifest_path(path).string() + "'");
  nlohmann::json m = manifest_json(spec);
  m["count"] = records.size();
  man << m.dump(2) << '\n';
  if (!out || !man) throw DataError("write failed for '" + path.string() + "'");
}

std::vector<SceneRecord> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read dataset '" + path.string() + "'");
  std::vector<SceneRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
      validate(out.back());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace permflow
