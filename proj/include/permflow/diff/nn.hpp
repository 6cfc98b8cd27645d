// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "permflow/diff/tape.hpp"
#include "permflow/diff/tensor.hpp"

namespace permflow {

struct DenseLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

/// Feed-forward net: silu on hidden layers, identity on the output layer.
/// Layer 1 (the second layer) may take an extra condition vector appended to
/// its input; its weight then has `cond_width` extra rows.
struct MLPParams {
  std::vector<DenseLayer> layers;
  std::size_t cond_width = 0;

  std::size_t input_width() const;
  std::size_t output_width() const;
};

/// `widths` = {in, hidden..., out}. Glorot-uniform weights, zero biases.
MLPParams make_mlp(std::span<const std::size_t> widths, std::size_t cond_width,
                   std::mt19937_64& rng);

struct MLPVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
  std::size_t cond_width = 0;
};

MLPVars bind_leaves(Tape& tape, const MLPParams& p);
MLPVars bind_constants(Tape& tape, const MLPParams& p);

/// input [rows x in] -> [rows x out]. `condition` is a [1 x cond_width] row
/// shared by all rows, or an invalid Var when the net is unconditioned.
Var mlp_forward(const MLPVars& net, Var input, Var condition = {});

Tensor mlp_forward(const MLPParams& p, const Tensor& input);
Tensor mlp_forward(const MLPParams& p, const Tensor& input, const Tensor& condition);

struct ConvLayer {
  Tensor kernel;  // [k x k x c_in x c_out]
  Tensor bias;    // [c_out]
};

/// Stack of unpadded strided convolutions with silu, flattened into one
/// dense head producing the embedding row.
struct ConvEmbedParams {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t stride = 2;
  std::vector<ConvLayer> convs;
  DenseLayer head;

  std::size_t embed_width() const { return head.bias.size(); }
};

ConvEmbedParams make_conv_embed(std::size_t channels, std::size_t height, std::size_t width,
                                std::size_t n_layers, std::size_t conv_channels,
                                std::size_t kernel, std::size_t stride,
                                std::size_t embed_width, std::mt19937_64& rng);

struct ConvEmbedVars {
  std::vector<Var> kernels;
  std::vector<Var> biases;
  Var head_weight;
  Var head_bias;
  std::size_t stride = 2;
  Shape image_shape;
};

ConvEmbedVars bind_leaves(Tape& tape, const ConvEmbedParams& p);

/// image [C x H x W] -> [1 x embed_width].
Var conv_embed(const ConvEmbedVars& net, Var image);
Tensor conv_embed(const ConvEmbedParams& p, const Tensor& image);

// Named views used by serialization and the optimizer.
using TensorRef = std::pair<std::string, Tensor*>;
using ConstTensorRef = std::pair<std::string, const Tensor*>;

void collect_tensors(MLPParams& p, const std::string& prefix, std::vector<TensorRef>& out);
void collect_tensors(const MLPParams& p, const std::string& prefix,
                     std::vector<ConstTensorRef>& out);
void collect_tensors(ConvEmbedParams& p, const std::string& prefix, std::vector<TensorRef>& out);
void collect_tensors(const ConvEmbedParams& p, const std::string& prefix,
                     std::vector<ConstTensorRef>& out);

}  // namespace permflow
