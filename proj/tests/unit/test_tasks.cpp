// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "permflow/core/error.hpp"
#include "permflow/tasks/tasks.hpp"

using namespace permflow;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "permflow_test_tasks";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("overlap boundary convention") {
  CHECK(overlap({0, 0, 1}, {0, 0, 1}));
  CHECK_FALSE(overlap({0, 0, 1}, {1.0, 0, 1}));
  CHECK(overlap({0, 0, 1}, {1.2, 0, 1.5}));
  CHECK_FALSE(overlap({0, 0, 1}, {1.25, 0, 1.5}));
  CHECK(overlap({0, 0, 1}, {0.9, 0.9, 1}));
  CHECK_FALSE(overlap({0, 0, 1}, {0.9, 1.0, 1}));
}

TEST_CASE("iou of axis-aligned squares") {
  CHECK(iou({0.3, -0.2, 1}, {0.3, -0.2, 1}) == 1.0);
  CHECK(iou({0, 0, 1}, {3, 0, 1}) == 0.0);
  CHECK(iou({0, 0, 1}, {0.5, 0, 1}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(iou({0, 0, 2}, {0, 0, 1}) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("generated task-1 records satisfy their invariants") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const SceneRecord r = gen_task1(rng, 5, 3);
    CHECK(r.n() == 5);
    CHECK(r.prohibited.size() == 3);
    CHECK_NOTHROW(validate(r));
    for (const Box& b : r.prohibited) CHECK(b.w == kProhibitedWidth);
  }
  CHECK_THROWS_AS(gen_task1(rng, 0, 3), ConfigError);
}

TEST_CASE("single target without prohibited boxes is accepted at the first draw") {
  std::mt19937_64 a(7), b(7);
  const SceneRecord r = gen_task1(a, 1, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double cx = normal(b);
  const double cy = normal(b);
  CHECK(r.targets[0].cx == cx);
  CHECK(r.targets[0].cy == cy);
}

TEST_CASE("task 2 records and their images") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const SceneRecord r = gen_task2(rng, 4);
    CHECK(r.prohibited.empty());
    CHECK_NOTHROW(validate(r));
    CHECK(condition_image(r, TaskKind::kBbox) == rasterize(r.targets));
  }
  Task2Options opts;
  opts.vary_size = true;
  const SceneRecord v = gen_task2(rng, 3, opts);
  CHECK(v.targets[0].w != kTargetWidth);
  const Tensor x = encode_targets(v, 3);
  const auto back = decode_boxes(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(back[i].w == doctest::Approx(v.targets[i].w).epsilon(1e-15));
}

TEST_CASE("rasterize") {
  CHECK(rasterize({}) == Tensor({1, 32, 32}, 0.0));
  const std::vector<Box> big{{0, 0, 8.0}};
  CHECK(rasterize(big) == Tensor({1, 32, 32}, 1.0));

  // Unit box at the origin: pixel centers +-0.125 and +-0.375 fall inside.
  const std::vector<Box> unit{{0, 0, 1}};
  const Tensor img = rasterize(unit);
  double total = 0.0;
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) {
      const double v = img[r * 32 + c];
      total += v;
      CHECK(v == ((r >= 14 && r <= 17 && c >= 14 && c <= 17) ? 1.0 : 0.0));
    }
  CHECK(total == 16.0);

  // Off-axis placement: y selects rows.
  const std::vector<Box> shifted{{-2.0, 1.0, 0.5}};
  const Tensor s = rasterize(shifted);
  CHECK(s[20 * 32 + 8] == 1.0);  // y = 1.125, x = -1.875
  CHECK(s[19 * 32 + 7] == 1.0);  // y = 0.875, x = -2.125
  CHECK(s[18 * 32 + 8] == 0.0);  // y = 0.625 lies outside
  CHECK(s[20 * 32 + 6] == 0.0);  // x = -2.375 lies outside
}

TEST_CASE("rasterize is permutation invariant and clips") {
  std::mt19937_64 rng(3);
  const SceneRecord r = gen_task1(rng, 5, 3);
  std::vector<Box> all = r.targets;
  all.insert(all.end(), r.prohibited.begin(), r.prohibited.end());
  const Tensor a = rasterize(all);
  std::reverse(all.begin(), all.end());
  std::shuffle(all.begin(), all.end(), rng);
  CHECK(rasterize(all) == a);
  const std::vector<Box> outside{{10, 10, 1}};
  CHECK(rasterize(outside) == Tensor({1, 32, 32}, 0.0));
}

TEST_CASE("dihedral copies stay valid and move the raster with them") {
  std::mt19937_64 rng(4);
  const SceneRecord r = gen_task1(rng, 3, 2);
  const auto all = dihedral_augment(std::span(&r, 1));
  REQUIRE(all.size() == 8);
  CHECK(all[0].targets[0].cx == r.targets[0].cx);
  for (std::size_t a = 0; a < 8; ++a) {
    CHECK_NOTHROW(validate(all[a]));
    for (std::size_t b = a + 1; b < 8; ++b) {
      CHECK((all[a].targets[0].cx != all[b].targets[0].cx || all[a].targets[0].cy != all[b].targets[0].cy));
    }
  }
  const Tensor img = condition_image(r, TaskKind::kBoxesCond);
  const Tensor swapped = condition_image(dihedral_transform(r, 1), TaskKind::kBoxesCond);
  const Tensor mirrored = condition_image(dihedral_transform(r, 2), TaskKind::kBoxesCond);
  for (std::size_t row = 0; row < 32; ++row) {
    for (std::size_t col = 0; col < 32; ++col) {
      CHECK(swapped[col * 32 + row] == img[row * 32 + col]);
      CHECK(mirrored[row * 32 + (31 - col)] == img[row * 32 + col]);
    }
  }
  CHECK_THROWS_AS(dihedral_transform(r, 8), ConfigError);
}

TEST_CASE("infraction report") {
  std::mt19937_64 rng(4);
  const SceneRecord r = gen_task1(rng, 3, 2);
  const InfractionReport clean = infraction_report(encode_targets(r, 2), r);
  CHECK_FALSE(clean.overlap);
  CHECK_FALSE(clean.region);
  CHECK_FALSE(clean.any());

  SceneRecord bad = r;
  bad.targets[1] = bad.targets[0];
  const InfractionReport coincident = infraction_report(encode_targets(bad, 2), r);
  CHECK(coincident.overlap);

  SceneRecord offroad = r;
  offroad.targets[2] = {r.prohibited[0].cx, r.prohibited[0].cy, 1.0};
  CHECK(infraction_report(encode_targets(offroad, 2), r).region);

  const std::vector<InfractionReport> batch{clean, coincident};
  const InfractionRates rates = aggregate(batch);
  CHECK(rates.overlap_rate == 0.5);
  CHECK(rates.acceptance_rate == 1.0 - rates.infraction_rate);
  CHECK(rates.count == 2);
}

TEST_CASE("clevr box size") {
  CHECK(clevr_box_size(1.0, 4.0) == 0.5);
  CHECK(clevr_box_size(0.0, 3.0) == 0.0);
  CHECK(clevr_box_size(0.7, 10.0) == doctest::Approx(0.22135943621178655).epsilon(1e-15));
  CHECK_THROWS_AS(clevr_box_size(1.0, 0.0), DomainError);
  CHECK_THROWS_AS(clevr_box_size(1.0, -2.0), DomainError);
}

TEST_CASE("raw prior acceptance for task 1 at five targets") {
  std::mt19937_64 rng(5);
  const double rate = raw_prior_acceptance(rng, 5, 3, 600000);
  CHECK(rate >= 1.76e-4 / 3);
  CHECK(rate <= 1.76e-4 * 3);
}

TEST_CASE("raw prior acceptance for task 2 against a brute-force oracle") {
  // Oracle: independent joint draws, pairwise test written out directly.
  std::mt19937_64 orng(6);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t draws = 200000;
  std::size_t ok = 0;
  for (std::size_t k = 0; k < draws; ++k) {
    double c[5][2];
    for (auto& p : c) {
      p[0] = normal(orng);
      p[1] = normal(orng);
    }
    bool clean = true;
    for (int i = 0; i < 5; ++i)
      for (int j = i + 1; j < 5; ++j)
        if (std::abs(c[i][0] - c[j][0]) < 1.0 && std::abs(c[i][1] - c[j][1]) < 1.0) clean = false;
    ok += clean;
  }
  const double oracle = static_cast<double>(ok) / draws;
  std::mt19937_64 rng(7);
  const double rate = raw_prior_acceptance(rng, 5, 0, draws);
  const double sigma = std::sqrt(oracle * (1 - oracle) / draws);
  CHECK(std::abs(rate - oracle) <= 5 * sigma * std::sqrt(2.0));
  CHECK(rate > 2e-3);  // order 1e-2
  CHECK(rate < 2e-1);
}

TEST_CASE("raw prior acceptance decreases with the target count") {
  std::mt19937_64 rng(8);
  double prev = 1.0;
  for (std::size_t n : {1u, 2u, 3u, 5u}) {
    const double r = raw_prior_acceptance(rng, n, 3, 200000);
    CHECK(r < prev);
    prev = r;
  }
}

TEST_CASE("raw prior acceptance on fixed scenes") {
  std::mt19937_64 rng(9);
  std::vector<SceneRecord> scenes{SceneRecord{}};
  // Without prohibited boxes one target always fits.
  CHECK(raw_prior_acceptance_given(scenes, 1, 100, rng) == 1.0);
  scenes[0].prohibited.push_back({0, 0, 100.0});
  CHECK(raw_prior_acceptance_given(scenes, 1, 100, rng) == 0.0);
}

TEST_CASE("validation catches broken records") {
  SceneRecord r;
  r.targets = {{0, 0, 1}, {0.5, 0, 1}};
  CHECK_THROWS_AS(validate(r), DataError);
  r.targets = {{0, 0, 1}};
  r.prohibited = {{0.2, 0.2, 1.5}};
  CHECK_THROWS_AS(validate(r), DataError);
  r.prohibited.clear();
  r.targets = {{0, 0, -1}};
  CHECK_THROWS_AS(validate(r), DataError);
}

TEST_CASE("dataset files are reproducible and self-validating") {
  DatasetSpec spec;
  spec.task = TaskKind::kBoxesCond;
  spec.n_min = 2;
  spec.n_max = 4;
  spec.count = 50;
  spec.seed = 11;
  const auto recs = generate_dataset(spec);
  CHECK(recs.size() == 50);
  const auto p1 = scratch("a.ndjson"), p2 = scratch("b.ndjson");
  write_dataset(p1, recs, spec);
  write_dataset(p2, generate_dataset(spec), spec);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(slurp(manifest_path(p1)) == slurp(manifest_path(p2)));

  const auto back = read_dataset(p1);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].n() == recs[i].n());
    CHECK(back[i].n() >= 2);
    CHECK(back[i].n() <= 4);
    CHECK(back[i].targets[0].cx == recs[i].targets[0].cx);
  }
  // Records are independent of the shard they are generated in.
  CHECK(generate_record(spec, 17).targets[0].cx == recs[17].targets[0].cx);

  const auto manifest = nlohmann::json::parse(slurp(manifest_path(p1)));
  CHECK(manifest["format"] == "permflow-dataset-v1");
  CHECK(manifest["count"] == 50);

  spec.count = 0;
  const auto empty = scratch("empty.ndjson");
  write_dataset(empty, generate_dataset(spec), spec);
  CHECK(read_dataset(empty).empty());
  CHECK(nlohmann::json::parse(slurp(manifest_path(empty)))["count"] == 0);
}

TEST_CASE("dataset read errors name the location") {
  const auto p = scratch("broken.ndjson");
  {
    std::ofstream out(p);
    out << R"({"prohibited":[],"targets":[[0,0,1]]})" << "\n" << "{not json\n";
  }
  try {
    read_dataset(p);
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("broken.ndjson:2") != std::string::npos);
  }
  CHECK_THROWS_AS(read_dataset(scratch("missing.ndjson")), DataError);
}
