// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/cli/commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "permflow/cli/config.hpp"
#include "permflow/cli/plot.hpp"
#include "permflow/core/error.hpp"

namespace permflow::cli {
namespace fs = std::filesystem;
namespace {

// A dataset argument may name the NDJSON file or the directory holding it.
fs::path dataset_file(const fs::path& p) {
  return fs::is_directory(p) ? p / "dataset.ndjson" : p;
}

fs::path require_file(const std::string& what, const fs::path& p) {
  if (!fs::is_regular_file(p)) throw DataError(what + " '" + p.string() + "' does not exist");
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

nlohmann::json read_json(const fs::path& path, const std::string& what) {
  std::ifstream in(require_file(what, path), std::ios::binary);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

FlowModel load_checkpoint(const fs::path& path) {
  try {
    return checkpoint_from_json(read_json(path, "checkpoint"));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void check_config_hash(const FlowModel& model, const std::optional<RunConfig>& cfg) {
  if (!cfg) return;
  const std::string want = model_hash(make_model(*cfg));
  const std::string have = model_hash(model);
  if (want != have) {
    throw ConfigError("checkpoint does not match the config: checkpoint model_hash " + have +
                      ", config model_hash " + want);
  }
}

std::optional<RunConfig> maybe_config(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_config(path);
}

fs::path make_out_dir(const std::string& out) {
  const fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

struct Scenes {
  std::vector<SceneRecord> records;
  TaskKind task = TaskKind::kBoxesCond;
  RasterSpec raster;
};

// Records plus the task and raster their manifest declares. The raster size
// follows the model so condition images always fit the embedding network.
Scenes load_scenes(const std::string& data, const FlowModel& model, const std::string& task_override) {
  Scenes s;
  const fs::path file = require_file("dataset", dataset_file(data));
  s.records = read_dataset(file);
  const fs::path man = manifest_path(file);
  std::optional<TaskKind> declared;
  if (fs::is_regular_file(man)) {
    const nlohmann::json m = read_json(man, "manifest");
    try {
      declared = task_from_string(m.at("task").get<std::string>());
      s.raster.extent = m.at("raster").at("extent").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(man.string() + ": " + e.what());
    }
  }
  if (!task_override.empty()) {
    s.task = task_from_string(task_override);
  } else if (declared) {
    s.task = *declared;
  } else {
    throw ConfigError("no manifest next to '" + file.string() + "'; pass --task");
  }
  s.raster.size = model.arch.image_height;
  return s;
}

Condition condition_for(const FlowModel& model, const SceneRecord& r, const Scenes& s) {
  if (!model.dynamics.conditioned()) return {};
  return {condition_image(r, s.task, s.raster)};
}

nlohmann::json rows_json(const Tensor& x) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t k = 0; k < x.cols(); ++k) row.push_back(x.at(i, k));
    rows.push_back(row);
  }
  return rows;
}

// ---- gen-data ----

struct GenArgs {
  std::string task;
  std::size_t n_min = 5;
  std::size_t n_max = 5;
  std::size_t count = 1000;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t n_prohibited = 3;
  bool vary_size = false;
  std::size_t raster_size = 32;
  double extent = 4.0;
};

int cmd_gen_data(const GenArgs& a, std::ostream& out) {
  DatasetSpec spec;
  spec.task = task_from_string(a.task);
  std::vector<std::string> errors;
  if (a.n_min < 1) errors.push_back("--n-min must be >= 1");
  if (a.n_max < a.n_min) errors.push_back("--n-max must be >= --n-min");
  if (a.vary_size && spec.task != TaskKind::kBbox) errors.push_back("--vary-size applies to the bbox task only");
  if (a.raster_size < 1) errors.push_back("--raster-size must be >= 1");
  if (!(a.extent > 0.0)) errors.push_back("--extent must be > 0");
  if (!errors.empty()) {
    std::string msg = "gen-data: invalid arguments";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  spec.n_min = a.n_min;
  spec.n_max = a.n_max;
  spec.count = a.count;
  spec.seed = a.seed;
  spec.n_prohibited = spec.task == TaskKind::kBoxesCond ? a.n_prohibited : 0;
  spec.task2.vary_size = a.vary_size;
  spec.raster.size = a.raster_size;
  spec.raster.extent = a.extent;

  const fs::path target(a.out);
  const fs::path file = target.extension() == ".ndjson" ? target : target / "dataset.ndjson";
  write_dataset(file, generate_dataset(spec), spec);
  out << "wrote " << spec.count << " records to " << file.string() << "\n";
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  std::string config;
  std::string data;
  std::string val;
  std::string out;
};

void check_manifest_task(const fs::path& file, TaskKind want) {
  const fs::path man = manifest_path(file);
  if (!fs::is_regular_file(man)) return;
  const nlohmann::json m = read_json(man, "manifest");
  const std::string have = m.value("task", std::string());
  if (!have.empty() && have != to_string(want)) {
    throw ConfigError("dataset '" + file.string() + "' holds task '" + have + "' but [task].kind is '" +
                      to_string(want) + "'");
  }
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
  validate(cfg);
  const fs::path train_file = require_file("training data", dataset_file(a.data));
  const fs::path val_file = require_file("validation data", dataset_file(a.val));
  if (fs::equivalent(train_file, val_file)) {
    throw DataError("training and validation data are the same file '" + train_file.string() + "'");
  }
  const TaskKind task = task_kind(cfg);
  check_manifest_task(train_file, task);
  check_manifest_task(val_file, task);
  auto train_records = read_dataset(train_file);
  const auto val_records = read_dataset(val_file);
  if (train_records.empty()) throw DataError("training data '" + train_file.string() + "' is empty");
  if (val_records.empty()) throw DataError("validation data '" + val_file.string() + "' is empty");

  const fs::path dir = make_out_dir(a.out);
  write_text(dir / cfg.io.resolved_config, to_toml(cfg));

  if (cfg.train.augment == "dihedral") train_records = dihedral_augment(train_records);
  const FlowModel init = make_model(cfg);
  const auto tr = make_datapoints(train_records, task, cfg.task.dim, raster_spec(cfg));
  const auto va = make_datapoints(val_records, task, cfg.task.dim, raster_spec(cfg));
  out << "model " << model_hash(init) << ": " << parameter_count(init.params) << " parameters, "
      << tr.size() << " training and " << va.size() << " validation records\n";

  const TrainResult r = train(init, tr, va, train_config(cfg), [&](const HistoryRow& row) {
    out << "epoch " << row.epoch << " train_nll " << row.train_nll << " val_nll " << row.val_nll
        << " nfe " << row.nfe_mean << std::endl;
  });
  write_text(dir / cfg.io.checkpoint, checkpoint_to_json(r.model).dump() + "\n");
  write_history_csv(dir / cfg.io.history, r.history);
  if (r.aborted) {
    err << "error: training aborted (" << r.abort_reason << "); wrote the last good model (epoch "
        << r.best_epoch << ") to " << (dir / cfg.io.checkpoint).string() << "\n";
    return kExitNumerical;
  }
  out << "best epoch " << r.best_epoch << (r.budget_exhausted ? " (time budget reached)" : "")
      << "; wrote " << (dir / cfg.io.checkpoint).string() << "\n";
  return kExitOk;
}

// ---- sample ----

struct SampleArgs {
  std::string checkpoint;
  std::string config;
  std::string data;
  std::string task;
  std::size_t n = 0;
  std::size_t per_scene = 1;
  std::size_t max_scenes = 0;
  std::uint64_t seed = 0;
  bool trajectories = false;
  std::string out;
};

int cmd_sample(const SampleArgs& a, std::ostream& out) {
  const auto cfg = maybe_config(a.config);
  const FlowModel model = load_checkpoint(a.checkpoint);
  check_config_hash(model, cfg);
  const IoSection io = cfg ? cfg->io : IoSection{};

  Scenes scenes;
  if (!a.data.empty()) {
    scenes = load_scenes(a.data, model, a.task);
  } else {
    if (model.dynamics.conditioned()) throw ConfigError("sample: a conditioned model needs --data");
    if (a.n == 0) throw ConfigError("sample: --n is required without --data");
    scenes.records.emplace_back();
  }
  std::size_t count = scenes.records.size();
  if (a.max_scenes > 0) count = std::min(count, a.max_scenes);

  const fs::path dir = make_out_dir(a.out);
  const fs::path file = dir / io.samples;
  std::ofstream o(file, std::ios::binary | std::ios::trunc);
  if (!o) throw DataError("cannot write '" + file.string() + "'");
  std::mt19937_64 rng(a.seed);
  std::size_t written = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const SceneRecord& r = scenes.records[i];
    const std::size_t n = a.n > 0 ? a.n : r.n();
    if (n == 0) continue;
    const Condition cond = condition_for(model, r, scenes);
    for (std::size_t k = 0; k < a.per_scene; ++k) {
      const ScoredSample s = sample(model, n, cond, rng, a.trajectories);
      nlohmann::json line{{"scene", i}, {"draw", k}, {"n", n}, {"x", rows_json(s.x)},
                          {"log_prob", s.log_prob}, {"nfe", s.nfe}};
      if (a.trajectories) {
        nlohmann::json tr = nlohmann::json::array();
        for (const TrajectoryPoint& p : s.trajectory) tr.push_back({{"t", p.t}, {"x", rows_json(p.x)}});
        line["trajectory"] = tr;
      }
      o << line.dump() << '\n';
      ++written;
    }
  }
  if (!o) throw DataError("write failed for '" + file.string() + "'");
  const nlohmann::json manifest{{"format", kSamplesFormat}, {"model_hash", model_hash(model)},
                                {"seed", a.seed},           {"count", written},
                                {"n", a.n},                 {"trajectories", a.trajectories}};
  write_text(manifest_path(file), manifest.dump(2) + "\n");
  out << "wrote " << written << " sampled sets to " << file.string() << "\n";
  return kExitOk;
}

// ---- logprob ----

struct ScoreArgs {
  std::string checkpoint;
  std::string config;
  std::string data;
  std::string task;
  std::string out;
};

int cmd_logprob(const ScoreArgs& a, std::ostream& out) {
  const auto cfg = maybe_config(a.config);
  const FlowModel model = load_checkpoint(a.checkpoint);
  check_config_hash(model, cfg);
  const IoSection io = cfg ? cfg->io : IoSection{};
  const Scenes scenes = load_scenes(a.data, model, a.task);

  const fs::path dir = make_out_dir(a.out);
  const fs::path file = dir / io.logprob;
  std::ostringstream csv;
  csv.precision(17);
  csv << "record,n,log_prob,nfe\n";
  for (std::size_t i = 0; i < scenes.records.size(); ++i) {
    const Datapoint dp = make_datapoint(scenes.records[i], scenes.task, model.dynamics.dim, scenes.raster);
    const Score s = score(model, dp.x, model.dynamics.conditioned() ? dp.cond : Condition{});
    csv << i << ',' << dp.x.rows() << ',' << s.log_prob << ',' << s.nfe << '\n';
  }
  write_text(file, csv.str());
  out << "scored " << scenes.records.size() << " records into " << file.string() << "\n";
  return kExitOk;
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string data;
  std::string task;
  std::string out;
  EvalSection eval;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto cfg = maybe_config(a.config);
  const FlowModel model = load_checkpoint(a.checkpoint);
  check_config_hash(model, cfg);
  const IoSection io = cfg ? cfg->io : IoSection{};
  Scenes scenes = load_scenes(a.data, model, a.task);
  if (scenes.records.empty()) throw DataError("eval: dataset '" + a.data + "' is empty");
  if (a.eval.max_scenes > 0 && scenes.records.size() > a.eval.max_scenes) {
    scenes.records.resize(a.eval.max_scenes);
  }
  const EvalSection& e = a.eval;

  std::vector<Datapoint> data;
  for (const SceneRecord& r : scenes.records) {
    Datapoint dp = make_datapoint(r, scenes.task, model.dynamics.dim, scenes.raster);
    if (!model.dynamics.conditioned()) dp.cond = {};
    data.push_back(std::move(dp));
  }
  EvalReport rep;
  const NllStats nll = eval_nll(model, data);
  rep.nll_mean = nll.mean;
  rep.nll_stderr = nll.sem;

  const Sampler sampler = flow_sampler(model, scenes.task, scenes.raster);
  const AcceptanceResult acc = eval_acceptance(sampler, scenes.records, e.samples_per_scene, e.seed, e.n);
  rep.acceptance_rate = acc.rates.acceptance_rate;
  rep.overlap_rate = acc.rates.overlap_rate;
  rep.region_rate = acc.rates.region_rate;
  rep.nfe_mean = acc.nfe_mean;
  rep.failures = acc.failures;
  rep.sample_count = acc.rates.count;
  rep.scene_count = scenes.records.size();
  rep.samples_per_scene = e.samples_per_scene;
  rep.seed = e.seed;

  nlohmann::json j;
  if (scenes.task == TaskKind::kBbox) {
    rep.iou_mean = eval_iou(sampler, scenes.records, e.samples_per_scene, e.seed + 1).iou_mean;
  }
  const std::size_t audit = std::min(e.audit_records, data.size());
  rep.invariance_max_dev =
      invariance_audit(model, std::span<const Datapoint>(data.data(), audit), e.n_perms, e.seed + 2);
  j = report_to_json(rep);
  if (scenes.task != TaskKind::kBbox) j["iou_mean"] = nullptr;
  j["task"] = to_string(scenes.task);
  j["model_hash"] = model_hash(model);
  j["n"] = e.n;
  j["audit_records"] = audit;
  j["n_perms"] = e.n_perms;

  const fs::path dir = make_out_dir(a.out);
  write_text(dir / io.report, j.dump(2) + "\n");
  out << "acceptance " << rep.acceptance_rate << " nll " << rep.nll_mean << " nfe " << rep.nfe_mean
      << "; wrote " << (dir / io.report).string() << "\n";
  return kExitOk;
}

// ---- plot ----

struct PlotArgs {
  std::string data;
  std::string task;
  std::size_t index = 0;
  std::string checkpoint;
  std::size_t samples = 0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  bool trajectories = false;
  std::string out;
};

int cmd_plot(const PlotArgs& a, std::ostream& out) {
  std::optional<FlowModel> model;
  if (!a.checkpoint.empty()) model = load_checkpoint(a.checkpoint);
  Scenes scenes;
  const fs::path file = require_file("dataset", dataset_file(a.data));
  if (model) {
    scenes = load_scenes(a.data, *model, a.task);
  } else {
    scenes.records = read_dataset(file);
    const fs::path man = manifest_path(file);
    if (!a.task.empty()) {
      scenes.task = task_from_string(a.task);
    } else if (fs::is_regular_file(man)) {
      const nlohmann::json m = read_json(man, "manifest");
      scenes.task = task_from_string(m.value("task", std::string("boxes-cond")));
      if (m.contains("raster")) scenes.raster.extent = m["raster"].value("extent", 4.0);
    }
  }
  if (a.index >= scenes.records.size()) {
    throw DataError("plot: record " + std::to_string(a.index) + " is out of range for '" +
                    file.string() + "' (" + std::to_string(scenes.records.size()) + " records)");
  }
  const SceneRecord& r = scenes.records[a.index];
  std::vector<PlotSample> draws;
  if (model && a.samples > 0) {
    const std::size_t n = a.n > 0 ? a.n : r.n();
    if (n == 0) throw ConfigError("plot: the record has no targets; pass --n");
    std::mt19937_64 rng(a.seed);
    const Condition cond = condition_for(*model, r, scenes);
    for (std::size_t k = 0; k < a.samples; ++k) {
      const ScoredSample s = sample(*model, n, cond, rng, a.trajectories);
      draws.push_back({decode_boxes(s.x), s.trajectory});
    }
  }
  PlotStyle style;
  style.extent = scenes.raster.extent;
  const fs::path dir = make_out_dir(a.out);
  const fs::path svg = dir / ("scene_" + std::to_string(a.index) + ".svg");
  write_text(svg, render_scene_svg(r, scenes.task, draws, style));
  out << "wrote " << svg.string() << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Permutation-invariant conditional flows over sets of boxes", "permflow"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  g->add_option("--task", gen.task, "boxes-cond or bbox")->required();
  g->add_option("--n-min", gen.n_min, "Smallest set size")->capture_default_str();
  g->add_option("--n-max", gen.n_max, "Largest set size")->capture_default_str();
  g->add_option("--count", gen.count, "Number of records")->capture_default_str();
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("--out", gen.out, "Output .ndjson file or directory")->required();
  g->add_option("--n-prohibited", gen.n_prohibited, "Prohibited boxes per boxes-cond scene")->capture_default_str();
  g->add_flag("--vary-size", gen.vary_size, "Draw bbox widths from a log-normal");
  g->add_option("--raster-size", gen.raster_size, "Condition image side")->capture_default_str();
  g->add_option("--extent", gen.extent, "Half-width of the rasterized domain")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a flow");
  t->add_option("--config", tr.config, "TOML run config");
  t->add_option("--data", tr.data, "Training dataset")->required();
  t->add_option("--val", tr.val, "Validation dataset")->required();
  t->add_option("--out", tr.out, "Run directory")->required();

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "Draw sets from a trained flow");
  s->add_option("--checkpoint", sa.checkpoint, "Checkpoint JSON")->required();
  s->add_option("--config", sa.config, "Config the checkpoint must match");
  s->add_option("--data", sa.data, "Scenes supplying the conditions");
  s->add_option("--task", sa.task, "Override the manifest task");
  s->add_option("--n", sa.n, "Elements per set (0 = the scene's own count)")->capture_default_str();
  s->add_option("--per-scene", sa.per_scene, "Sets per scene")->capture_default_str();
  s->add_option("--max-scenes", sa.max_scenes, "Use only the first scenes (0 = all)")->capture_default_str();
  s->add_option("--seed", sa.seed, "Sampling seed")->capture_default_str();
  s->add_flag("--trajectories", sa.trajectories, "Record solver snapshots");
  s->add_option("--out", sa.out, "Output directory")->required();

  ScoreArgs lp;
  auto* l = app.add_subcommand("logprob", "Score every record of a dataset");
  l->add_option("--checkpoint", lp.checkpoint, "Checkpoint JSON")->required();
  l->add_option("--config", lp.config, "Config the checkpoint must match");
  l->add_option("--data", lp.data, "Dataset to score")->required();
  l->add_option("--task", lp.task, "Override the manifest task");
  l->add_option("--out", lp.out, "Output directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a flow on held-out scenes");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint JSON")->required();
  e->add_option("--config", ev.config, "Config supplying [eval] defaults; the checkpoint must match");
  e->add_option("--data", ev.data, "Held-out scenes")->required();
  e->add_option("--task", ev.task, "Override the manifest task");
  e->add_option("--out", ev.out, "Output directory")->required();
  EvalSection eval_flags;
  auto* o_sps = e->add_option("--samples-per-scene", eval_flags.samples_per_scene, "Sets per scene");
  auto* o_n = e->add_option("--n", eval_flags.n, "Elements per set (0 = the scene's own count)");
  auto* o_max = e->add_option("--max-scenes", eval_flags.max_scenes, "Use only the first scenes (0 = all)");
  auto* o_aud = e->add_option("--audit-records", eval_flags.audit_records, "Records in the invariance audit");
  auto* o_perm = e->add_option("--perms", eval_flags.n_perms, "Permutations per audited record");
  auto* o_seed = e->add_option("--seed", eval_flags.seed, "Evaluation seed");

  PlotArgs pl;
  auto* p = app.add_subcommand("plot", "Render a scene, and optionally samples, as SVG");
  p->add_option("--data", pl.data, "Dataset holding the scene")->required();
  p->add_option("--task", pl.task, "Override the manifest task");
  p->add_option("--index", pl.index, "Record index")->capture_default_str();
  p->add_option("--checkpoint", pl.checkpoint, "Checkpoint to draw samples from");
  p->add_option("--samples", pl.samples, "Sets to draw")->capture_default_str();
  p->add_option("--n", pl.n, "Elements per drawn set (0 = the scene's own count)")->capture_default_str();
  p->add_option("--seed", pl.seed, "Sampling seed")->capture_default_str();
  p->add_flag("--trajectories", pl.trajectories, "Draw element paths colored by time");
  p->add_option("--out", pl.out, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*g) return cmd_gen_data(gen, out);
    if (*t) return cmd_train(tr, out, err);
    if (*s) return cmd_sample(sa, out);
    if (*l) return cmd_logprob(lp, out);
    if (*e) {
      ev.eval = ev.config.empty() ? EvalSection{} : load_config(ev.config).eval;
      if (*o_sps) ev.eval.samples_per_scene = eval_flags.samples_per_scene;
      if (*o_n) ev.eval.n = eval_flags.n;
      if (*o_max) ev.eval.max_scenes = eval_flags.max_scenes;
      if (*o_aud) ev.eval.audit_records = eval_flags.audit_records;
      if (*o_perm) ev.eval.n_perms = eval_flags.n_perms;
      if (*o_seed) ev.eval.seed = eval_flags.seed;
      if (ev.eval.samples_per_scene < 1) throw ConfigError("eval: --samples-per-scene must be >= 1");
      return cmd_eval(ev, out);
    }
    if (*p) return cmd_plot(pl, out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& ex) {
    err << "numerical error: " << ex.what() << "\n";
    return kExitNumerical;
  } catch (const SolverError& ex) {
    err << "numerical error: " << ex.what() << "\n";
    return kExitNumerical;
  } catch (const Error& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  }
  return kExitConfig;
}

}  // namespace permflow::cli
