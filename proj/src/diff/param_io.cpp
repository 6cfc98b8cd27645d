// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/diff/param_io.hpp"

#include <map>
#include <string>

#include "permflow/core/error.hpp"

namespace permflow {

nlohmann::json params_to_json(std::span<const ConstTensorRef> tensors) {
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    arrays.push_back({{"name", name}, {"shape", t->shape()}, {"data", t->storage()}});
  }
  return {{"format", kParamsFormat}, {"arrays", std::move(arrays)}};
}

void params_from_json(const nlohmann::json& doc, std::span<const TensorRef> targets) {
  if (!doc.is_object() || doc.value("format", "") != kParamsFormat) {
    throw DataError(std::string("parameter document is not ") + kParamsFormat);
  }
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& a : doc.at("arrays")) by_name[a.at("name").get<std::string>()] = &a;
  if (by_name.size() != targets.size()) {
    throw DataError("parameter document has " + std::to_string(by_name.size()) +
                    " arrays, model expects " + std::to_string(targets.size()));
  }
  for (const auto& [name, t] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("parameter array '" + name + "' missing");
    const auto& a = *it->second;
    Shape shape = a.at("shape").get<Shape>();
    if (shape != t->shape()) {
      throw DataError("parameter array '" + name + "' has shape " + shape_string(shape) +
                      ", model expects " + shape_string(t->shape()));
    }
    *t = Tensor(std::move(shape), a.at("data").get<std::vector<double>>());
  }
}

}  // namespace permflow
