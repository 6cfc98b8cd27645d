// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "permflow/diff/nn.hpp"

namespace permflow {

inline constexpr const char* kParamsFormat = "permflow-params-v1";

/// {"format":"permflow-params-v1","arrays":[{"name","shape","data"}]}
nlohmann::json params_to_json(std::span<const ConstTensorRef> tensors);

/// Fills every target by name. Shapes must match exactly; missing or extra
/// arrays are errors.
void params_from_json(const nlohmann::json& doc, std::span<const TensorRef> targets);

}  // namespace permflow
