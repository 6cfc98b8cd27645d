// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/cli/config.hpp"

#include <cmath>
#include <concepts>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <toml.hpp>
#include <vector>

#include "permflow/core/error.hpp"

namespace permflow::cli {
namespace {

using Errors = std::vector<std::string>;

// Reads typed keys out of one section, remembering which keys were used.
class SectionReader {
 public:
  SectionReader(const toml::table* table, std::string name, Errors& errors)
      : table_(table), name_(std::move(name)), errors_(errors) {}

  template <std::unsigned_integral T>
  void get(const char* key, T& out) {
    const toml::node* n = find(key);
    if (n == nullptr) return;
    const auto v = n->value<std::int64_t>();
    if (!n->is_integer() || !v) return type_error(key, "a non-negative integer");
    if (*v < 0) return errors_.push_back(where(key) + " must be >= 0, got " + std::to_string(*v));
    out = static_cast<T>(*v);
  }

  void get(const char* key, double& out) {
    const toml::node* n = find(key);
    if (n == nullptr) return;
    if (n->is_floating_point()) {
      out = *n->value<double>();
    } else if (n->is_integer()) {
      out = static_cast<double>(*n->value<std::int64_t>());
    } else {
      type_error(key, "a number");
    }
  }

  void get(const char* key, bool& out) {
    const toml::node* n = find(key);
    if (n == nullptr) return;
    if (!n->is_boolean()) return type_error(key, "a boolean");
    out = *n->value<bool>();
  }

  void get(const char* key, std::string& out) {
    const toml::node* n = find(key);
    if (n == nullptr) return;
    if (!n->is_string()) return type_error(key, "a string");
    out = *n->value<std::string>();
  }

  void reject_unknown() const {
    if (table_ == nullptr) return;
    for (auto&& [k, v] : *table_) {
      const std::string key(k.str());
      if (!used_.contains(key)) errors_.push_back("unknown key [" + name_ + "]." + key);
    }
  }

 private:
  const toml::node* find(const char* key) {
    used_.insert(key);
    if (table_ == nullptr) return nullptr;
    return table_->get(key);
  }

  std::string where(const char* key) const { return "[" + name_ + "]." + key; }

  void type_error(const char* key, const char* want) {
    errors_.push_back(where(key) + " must be " + want);
  }

  const toml::table* table_;
  std::string name_;
  Errors& errors_;
  std::set<std::string> used_;
};

const toml::table* section(const toml::table& doc, const char* name, Errors& errors) {
  const toml::node* n = doc.get(name);
  if (n == nullptr) return nullptr;
  if (!n->is_table()) {
    errors.push_back(std::string("[") + name + "] must be a table");
    return nullptr;
  }
  return n->as_table();
}

void collect_semantic_errors(const RunConfig& c, Errors& e) {
  if (c.task.kind != "boxes-cond" && c.task.kind != "bbox") {
    e.push_back("[task].kind must be 'boxes-cond' or 'bbox', got '" + c.task.kind + "'");
  }
  if (c.task.dim != 2 && c.task.dim != 3) e.push_back("[task].dim must be 2 or 3");
  if (c.task.vary_size && c.task.dim != 3) e.push_back("[task].vary_size needs dim = 3");
  if (c.task.raster_size < 1) e.push_back("[task].raster_size must be >= 1");
  if (!(c.task.extent > 0.0)) e.push_back("[task].extent must be > 0");
  if (!(c.task.log_w_sigma >= 0.0)) e.push_back("[task].log_w_sigma must be >= 0");

  const ModelSection& m = c.model;
  const bool conditioned = m.condition_in_f || m.condition_in_g;
  if (m.f_layers < 1) e.push_back("[model].f_layers must be >= 1");
  if (m.g_layers < 1) e.push_back("[model].g_layers must be >= 1");
  if (m.f_hidden < 1) e.push_back("[model].f_hidden must be >= 1");
  if (m.g_hidden < 1) e.push_back("[model].g_hidden must be >= 1");
  if (m.condition_in_f && m.f_layers < 2) e.push_back("[model].f_layers must be >= 2 when condition_in_f");
  if (m.condition_in_g && m.g_layers < 2) e.push_back("[model].g_layers must be >= 2 when condition_in_g");
  if (conditioned) {
    if (m.embed_width < 1) e.push_back("[model].embed_width must be >= 1 for a conditioned model");
    if (m.embed_layers < 1) e.push_back("[model].embed_layers must be >= 1");
    if (m.embed_channels < 1) e.push_back("[model].embed_channels must be >= 1");
    if (m.kernel < 1) e.push_back("[model].kernel must be >= 1");
    if (m.stride < 1) e.push_back("[model].stride must be >= 1");
  }
  if (m.ablation != "full" && m.ablation != "single_only" && m.ablation != "pair_only") {
    e.push_back("[model].ablation must be 'full', 'single_only' or 'pair_only', got '" + m.ablation + "'");
  }

  const SolverSection& s = c.solver;
  if (s.method != "adaptive" && s.method != "fixed") {
    e.push_back("[solver].method must be 'adaptive' or 'fixed', got '" + s.method + "'");
  }
  if (!(s.rtol > 0.0)) e.push_back("[solver].rtol must be > 0");
  if (!(s.atol > 0.0)) e.push_back("[solver].atol must be > 0");
  if (s.n_steps < 1) e.push_back("[solver].n_steps must be >= 1");
  if (!(s.t1 > 0.0) || !std::isfinite(s.t1)) e.push_back("[solver].t1 must be finite and > 0");
  if (s.max_nfe < 1) e.push_back("[solver].max_nfe must be >= 1");

  const TrainSection& t = c.train;
  if (!(t.lambda_l2 >= 0.0)) e.push_back("[train].lambda_l2 must be >= 0");
  if (!(t.lambda_l2div >= 0.0)) e.push_back("[train].lambda_l2div must be >= 0");
  if (!(t.lr >= 0.0) || !std::isfinite(t.lr)) e.push_back("[train].lr must be finite and >= 0");
  if (t.batch_size < 1) e.push_back("[train].batch_size must be >= 1");
  if (t.patience < 1) e.push_back("[train].patience must be >= 1");
  if (t.grad_mode != "adjoint" && t.grad_mode != "fixed_backprop") {
    e.push_back("[train].grad_mode must be 'adjoint' or 'fixed_backprop', got '" + t.grad_mode + "'");
  }
  if (t.fixed_steps < 1) e.push_back("[train].fixed_steps must be >= 1");
  if (!(t.max_seconds >= 0.0)) e.push_back("[train].max_seconds must be >= 0");
  if (t.augment != "none" && t.augment != "dihedral") {
    e.push_back("[train].augment must be 'none' or 'dihedral', got '" + t.augment + "'");
  }

  if (c.eval.samples_per_scene < 1) e.push_back("[eval].samples_per_scene must be >= 1");

  for (const auto& [key, value] : {std::pair<const char*, const std::string*>{"checkpoint", &c.io.checkpoint},
                                   {"history", &c.io.history},
                                   {"resolved_config", &c.io.resolved_config},
                                   {"report", &c.io.report},
                                   {"samples", &c.io.samples},
                                   {"logprob", &c.io.logprob}}) {
    const std::filesystem::path p(*value);
    if (value->empty() || p.has_parent_path() || p.is_absolute()) {
      e.push_back(std::string("[io].") + key + " must be a plain file name inside --out");
    }
  }

  if (e.empty() && conditioned) {
    // Architecture checks that need the layer arithmetic, e.g. an image too
    // small for the stride stack.
    try {
      std::mt19937_64 rng(0);
      (void)make_dynamics_params(dynamics_config(c), architecture(c), rng);
    } catch (const Error& ex) {
      e.push_back(std::string("[model] ") + ex.what());
    }
  }
}

[[noreturn]] void raise(const std::string& source, const Errors& errors) {
  std::ostringstream msg;
  msg << source << ": " << errors.size() << " configuration error" << (errors.size() == 1 ? "" : "s");
  for (const std::string& s : errors) msg << "\n  " << s;
  throw ConfigError(msg.str());
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& source) {
  toml::table doc;
  try {
    doc = toml::parse(text, source);
  } catch (const toml::parse_error& err) {
    std::ostringstream msg;
    msg << source << ":" << err.source().begin.line << ":" << err.source().begin.column << ": "
        << err.description();
    throw ConfigError(msg.str());
  }

  Errors errors;
  RunConfig c;
  static const std::set<std::string> known{"format", "task", "model", "solver", "train", "eval", "io"};
  for (auto&& [k, v] : doc) {
    if (!known.contains(std::string(k.str()))) errors.push_back("unknown section or key '" + std::string(k.str()) + "'");
  }
  if (const toml::node* f = doc.get("format")) {
    if (!f->is_string() || *f->value<std::string>() != kConfigFormat) {
      errors.push_back(std::string("format must be '") + kConfigFormat + "'");
    }
  }

  SectionReader task(section(doc, "task", errors), "task", errors);
  task.get("kind", c.task.kind);
  task.get("dim", c.task.dim);
  task.get("n_prohibited", c.task.n_prohibited);
  task.get("raster_size", c.task.raster_size);
  task.get("extent", c.task.extent);
  task.get("vary_size", c.task.vary_size);
  task.get("log_w_sigma", c.task.log_w_sigma);
  task.reject_unknown();

  SectionReader model(section(doc, "model", errors), "model", errors);
  model.get("f_layers", c.model.f_layers);
  model.get("f_hidden", c.model.f_hidden);
  model.get("g_layers", c.model.g_layers);
  model.get("g_hidden", c.model.g_hidden);
  model.get("embed_layers", c.model.embed_layers);
  model.get("embed_channels", c.model.embed_channels);
  model.get("embed_width", c.model.embed_width);
  model.get("kernel", c.model.kernel);
  model.get("stride", c.model.stride);
  model.get("use_time", c.model.use_time);
  model.get("condition_in_f", c.model.condition_in_f);
  model.get("condition_in_g", c.model.condition_in_g);
  model.get("ablation", c.model.ablation);
  model.get("zero_init", c.model.zero_init);
  model.get("seed", c.model.seed);
  model.reject_unknown();

  SectionReader solver(section(doc, "solver", errors), "solver", errors);
  solver.get("method", c.solver.method);
  solver.get("rtol", c.solver.rtol);
  solver.get("atol", c.solver.atol);
  solver.get("n_steps", c.solver.n_steps);
  solver.get("t1", c.solver.t1);
  solver.get("max_nfe", c.solver.max_nfe);
  solver.reject_unknown();

  SectionReader train(section(doc, "train", errors), "train", errors);
  train.get("lambda_l2", c.train.lambda_l2);
  train.get("lambda_l2div", c.train.lambda_l2div);
  train.get("lr", c.train.lr);
  train.get("batch_size", c.train.batch_size);
  train.get("epochs", c.train.epochs);
  train.get("patience", c.train.patience);
  train.get("seed", c.train.seed);
  train.get("grad_mode", c.train.grad_mode);
  train.get("fixed_steps", c.train.fixed_steps);
  train.get("max_seconds", c.train.max_seconds);
  train.get("augment", c.train.augment);
  train.reject_unknown();

  SectionReader eval(section(doc, "eval", errors), "eval", errors);
  eval.get("samples_per_scene", c.eval.samples_per_scene);
  eval.get("n", c.eval.n);
  eval.get("max_scenes", c.eval.max_scenes);
  eval.get("audit_records", c.eval.audit_records);
  eval.get("n_perms", c.eval.n_perms);
  eval.get("seed", c.eval.seed);
  eval.reject_unknown();

  SectionReader io(section(doc, "io", errors), "io", errors);
  io.get("checkpoint", c.io.checkpoint);
  io.get("history", c.io.history);
  io.get("resolved_config", c.io.resolved_config);
  io.get("report", c.io.report);
  io.get("samples", c.io.samples);
  io.get("logprob", c.io.logprob);
  io.reject_unknown();

  collect_semantic_errors(c, errors);
  if (!errors.empty()) raise(source, errors);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.string());
}

void validate(const RunConfig& cfg) {
  Errors errors;
  collect_semantic_errors(cfg, errors);
  if (!errors.empty()) raise("config", errors);
}

std::string to_toml(const RunConfig& c) {
  auto i64 = [](std::uint64_t v) {
    if (v > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
      throw ConfigError("value " + std::to_string(v) + " does not fit a TOML integer");
    }
    return static_cast<std::int64_t>(v);
  };
  toml::table doc{
      {"format", kConfigFormat},
      {"task", toml::table{{"kind", c.task.kind},
                           {"dim", i64(c.task.dim)},
                           {"n_prohibited", i64(c.task.n_prohibited)},
                           {"raster_size", i64(c.task.raster_size)},
                           {"extent", c.task.extent},
                           {"vary_size", c.task.vary_size},
                           {"log_w_sigma", c.task.log_w_sigma}}},
      {"model", toml::table{{"f_layers", i64(c.model.f_layers)},
                            {"f_hidden", i64(c.model.f_hidden)},
                            {"g_layers", i64(c.model.g_layers)},
                            {"g_hidden", i64(c.model.g_hidden)},
                            {"embed_layers", i64(c.model.embed_layers)},
                            {"embed_channels", i64(c.model.embed_channels)},
                            {"embed_width", i64(c.model.embed_width)},
                            {"kernel", i64(c.model.kernel)},
                            {"stride", i64(c.model.stride)},
                            {"use_time", c.model.use_time},
                            {"condition_in_f", c.model.condition_in_f},
                            {"condition_in_g", c.model.condition_in_g},
                            {"ablation", c.model.ablation},
                            {"zero_init", c.model.zero_init},
                            {"seed", i64(c.model.seed)}}},
      {"solver", toml::table{{"method", c.solver.method},
                             {"rtol", c.solver.rtol},
                             {"atol", c.solver.atol},
                             {"n_steps", i64(c.solver.n_steps)},
                             {"t1", c.solver.t1},
                             {"max_nfe", i64(c.solver.max_nfe)}}},
      {"train", toml::table{{"lambda_l2", c.train.lambda_l2},
                            {"lambda_l2div", c.train.lambda_l2div},
                            {"lr", c.train.lr},
                            {"batch_size", i64(c.train.batch_size)},
                            {"epochs", i64(c.train.epochs)},
                            {"patience", i64(c.train.patience)},
                            {"seed", i64(c.train.seed)},
                            {"grad_mode", c.train.grad_mode},
                            {"fixed_steps", i64(c.train.fixed_steps)},
                            {"max_seconds", c.train.max_seconds},
                            {"augment", c.train.augment}}},
      {"eval", toml::table{{"samples_per_scene", i64(c.eval.samples_per_scene)},
                           {"n", i64(c.eval.n)},
                           {"max_scenes", i64(c.eval.max_scenes)},
                           {"audit_records", i64(c.eval.audit_records)},
                           {"n_perms", i64(c.eval.n_perms)},
                           {"seed", i64(c.eval.seed)}}},
      {"io", toml::table{{"checkpoint", c.io.checkpoint},
                         {"history", c.io.history},
                         {"resolved_config", c.io.resolved_config},
                         {"report", c.io.report},
                         {"samples", c.io.samples},
                         {"logprob", c.io.logprob}}},
  };
  std::ostringstream out;
  out << doc << "\n";
  return out.str();
}

TaskKind task_kind(const RunConfig& cfg) { return task_from_string(cfg.task.kind); }

RasterSpec raster_spec(const RunConfig& cfg) {
  RasterSpec r;
  r.size = cfg.task.raster_size;
  r.extent = cfg.task.extent;
  return r;
}

DynamicsConfig dynamics_config(const RunConfig& cfg) {
  DynamicsConfig d;
  d.dim = cfg.task.dim;
  d.use_time = cfg.model.use_time;
  d.condition_in_f = cfg.model.condition_in_f;
  d.condition_in_g = cfg.model.condition_in_g;
  d.embed_width = d.conditioned() ? cfg.model.embed_width : 0;
  d.ablation = ablation_from_string(cfg.model.ablation);
  return d;
}

Architecture architecture(const RunConfig& cfg) {
  Architecture a;
  a.f_layers = cfg.model.f_layers;
  a.f_hidden = cfg.model.f_hidden;
  a.g_layers = cfg.model.g_layers;
  a.g_hidden = cfg.model.g_hidden;
  a.embed_layers = cfg.model.embed_layers;
  a.embed_channels = cfg.model.embed_channels;
  a.kernel = cfg.model.kernel;
  a.stride = cfg.model.stride;
  a.image_channels = 1;
  a.image_height = cfg.task.raster_size;
  a.image_width = cfg.task.raster_size;
  return a;
}

SolverConfig solver_config(const RunConfig& cfg) {
  SolverConfig s;
  s.method = cfg.solver.method == "fixed" ? SolverMethod::kFixed : SolverMethod::kAdaptive;
  s.rtol = cfg.solver.rtol;
  s.atol = cfg.solver.atol;
  s.n_steps = cfg.solver.n_steps;
  s.t0 = 0.0;
  s.t1 = cfg.solver.t1;
  s.max_nfe = cfg.solver.max_nfe;
  return s;
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.lambda_l2 = cfg.train.lambda_l2;
  t.lambda_l2div = cfg.train.lambda_l2div;
  t.lr = cfg.train.lr;
  t.batch_size = cfg.train.batch_size;
  t.epochs = cfg.train.epochs;
  t.patience = cfg.train.patience;
  t.seed = cfg.train.seed;
  t.grad_mode = grad_mode_from_string(cfg.train.grad_mode);
  t.fixed_steps = cfg.train.fixed_steps;
  t.max_seconds = cfg.train.max_seconds;
  return t;
}

FlowModel make_model(const RunConfig& cfg) {
  FlowModel m = make_flow_model(dynamics_config(cfg), architecture(cfg), solver_config(cfg), cfg.model.seed);
  if (cfg.model.zero_init) zero_output_layers(m.params);
  return m;
}

}  // namespace permflow::cli
