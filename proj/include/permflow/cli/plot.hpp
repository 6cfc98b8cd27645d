// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "permflow/flow/flow_model.hpp"
#include "permflow/tasks/tasks.hpp"

namespace permflow::cli {

struct PlotSample {
  std::vector<Box> boxes;
  std::vector<TrajectoryPoint> trajectory;  // optional element paths
};

struct PlotStyle {
  double pixels = 480.0;  // drawing area side
  double margin = 40.0;
  double extent = 4.0;    // world square [-extent, extent]^2
};

/// Standalone SVG: frame and axes, the condition boxes filled grey, ground
/// truth targets dashed (task 1 only, since for task 2 they are the
/// condition), sampled boxes in translucent blue, and element trajectories
/// as polylines whose color runs from dark (t0) to bright (t1).
std::string render_scene_svg(const SceneRecord& scene, TaskKind task,
                             std::span<const PlotSample> samples, const PlotStyle& style = {});

/// RGB hex color for a normalized time in [0, 1].
std::string time_color(double u);

}  // namespace permflow::cli
