// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/diff/nn.hpp"

#include <cmath>

#include "permflow/core/error.hpp"

namespace permflow {
namespace {

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

template <typename Bind>
MLPVars bind_with(const MLPParams& p, Bind&& bind) {
  MLPVars v;
  v.cond_width = p.cond_width;
  for (const auto& layer : p.layers) {
    v.weights.push_back(bind(layer.weight));
    v.biases.push_back(bind(layer.bias));
  }
  return v;
}

}  // namespace

std::size_t MLPParams::input_width() const {
  if (layers.empty()) throw ShapeError("empty MLP");
  return layers.front().weight.dim(0);
}

std::size_t MLPParams::output_width() const {
  if (layers.empty()) throw ShapeError("empty MLP");
  return layers.back().weight.dim(1);
}

MLPParams make_mlp(std::span<const std::size_t> widths, std::size_t cond_width,
                   std::mt19937_64& rng) {
  if (widths.size() < 2) throw ShapeError("make_mlp: need at least input and output width");
  if (cond_width > 0 && widths.size() < 3) {
    throw ShapeError("make_mlp: a conditioned net needs at least two layers");
  }
  MLPParams p;
  p.cond_width = cond_width;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l] + (l == 1 ? cond_width : 0);
    const std::size_t out = widths[l + 1];
    p.layers.push_back({glorot({in, out}, in, out, rng), Tensor({out}, 0.0)});
  }
  return p;
}

MLPVars bind_leaves(Tape& tape, const MLPParams& p) {
  return bind_with(p, [&](const Tensor& t) { return tape.leaf(t); });
}

MLPVars bind_constants(Tape& tape, const MLPParams& p) {
  return bind_with(p, [&](const Tensor& t) { return tape.constant(t); });
}

Var mlp_forward(const MLPVars& net, Var input, Var condition) {
  if (net.weights.empty()) throw ShapeError("mlp_forward: empty net");
  if (input.cols() != net.weights.front().value().dim(0)) {
    throw ShapeError("mlp_forward: input width " + std::to_string(input.cols()) +
                     " does not match first layer " +
                     std::to_string(net.weights.front().value().dim(0)));
  }
  if (condition.valid() != (net.cond_width > 0)) {
    throw ShapeError("mlp_forward: condition presence does not match the net");
  }
  Var h = input;
  const std::size_t n_layers = net.weights.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Var w = net.weights[l];
    const Var b = net.biases[l];
    Var pre;
    if (l == 1 && condition.valid()) {
      if (condition.cols() != net.cond_width) throw ShapeError("mlp_forward: condition width");
      const std::size_t hw = h.cols();
      Var w_h = slice_rows(w, 0, hw);
      Var w_c = slice_rows(w, hw, w.rows());
      Var shift = add(reshape(b, {1, b.value().size()}), matmul(condition, w_c));
      pre = add_row_bias(matmul(h, w_h), shift);
    } else {
      pre = add_row_bias(matmul(h, w), b);
    }
    h = (l + 1 < n_layers) ? silu(pre) : pre;
  }
  return h;
}

Tensor mlp_forward(const MLPParams& p, const Tensor& input) {
  Tape tape;
  MLPVars net = bind_constants(tape, p);
  return mlp_forward(net, tape.constant(input)).value();
}

Tensor mlp_forward(const MLPParams& p, const Tensor& input, const Tensor& condition) {
  Tape tape;
  MLPVars net = bind_constants(tape, p);
  return mlp_forward(net, tape.constant(input), tape.constant(condition)).value();
}

ConvEmbedParams make_conv_embed(std::size_t channels, std::size_t height, std::size_t width,
                                std::size_t n_layers, std::size_t conv_channels,
                                std::size_t kernel, std::size_t stride,
                                std::size_t embed_width, std::mt19937_64& rng) {
  if (stride == 0 || kernel == 0) throw ShapeError("conv embed: kernel and stride must be positive");
  ConvEmbedParams p;
  p.channels = channels;
  p.height = height;
  p.width = width;
  p.stride = stride;
  std::size_t c = channels, h = height, w = width;
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (h < kernel || w < kernel) {
      throw ShapeError("conv embed: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                       " is smaller than the kernel at layer " + std::to_string(l));
    }
    p.convs.push_back({glorot({kernel, kernel, c, conv_channels}, kernel * kernel * c,
                              kernel * kernel * conv_channels, rng),
                       Tensor({conv_channels}, 0.0)});
    c = conv_channels;
    h = (h - kernel) / stride + 1;
    w = (w - kernel) / stride + 1;
  }
  const std::size_t flat = c * h * w;
  p.head = {glorot({flat, embed_width}, flat, embed_width, rng), Tensor({embed_width}, 0.0)};
  return p;
}

ConvEmbedVars bind_leaves(Tape& tape, const ConvEmbedParams& p) {
  ConvEmbedVars v;
  for (const auto& layer : p.convs) {
    v.kernels.push_back(tape.leaf(layer.kernel));
    v.biases.push_back(tape.leaf(layer.bias));
  }
  v.head_weight = tape.leaf(p.head.weight);
  v.head_bias = tape.leaf(p.head.bias);
  v.stride = p.stride;
  v.image_shape = {p.channels, p.height, p.width};
  return v;
}

Var conv_embed(const ConvEmbedVars& net, Var image) {
  if (image.shape() != net.image_shape) {
    throw ShapeError("conv_embed: image shape " + shape_string(image.shape()) + " expected " +
                     shape_string(net.image_shape));
  }
  Var h = image;
  for (std::size_t l = 0; l < net.kernels.size(); ++l) {
    h = silu(add_channel_bias(conv2d(h, net.kernels[l], net.stride), net.biases[l]));
  }
  Var flat = reshape(h, {1, h.value().size()});
  return add_row_bias(matmul(flat, net.head_weight), net.head_bias);
}

Tensor conv_embed(const ConvEmbedParams& p, const Tensor& image) {
  Tape tape;
  ConvEmbedVars net = bind_leaves(tape, p);
  return conv_embed(net, tape.constant(image)).value();
}

void collect_tensors(MLPParams& p, const std::string& prefix, std::vector<TensorRef>& out) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    out.emplace_back(prefix + "." + std::to_string(l) + ".weight", &p.layers[l].weight);
    out.emplace_back(prefix + "." + std::to_string(l) + ".bias", &p.layers[l].bias);
  }
}

void collect_tensors(const MLPParams& p, const std::string& prefix,
                     std::vector<ConstTensorRef>& out) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    out.emplace_back(prefix + "." + std::to_string(l) + ".weight", &p.layers[l].weight);
    out.emplace_back(prefix + "." + std::to_string(l) + ".bias", &p.layers[l].bias);
  }
}

void collect_tensors(ConvEmbedParams& p, const std::string& prefix, std::vector<TensorRef>& out) {
  for (std::size_t l = 0; l < p.convs.size(); ++l) {
    out.emplace_back(prefix + ".conv." + std::to_string(l) + ".kernel", &p.convs[l].kernel);
    out.emplace_back(prefix + ".conv." + std::to_string(l) + ".bias", &p.convs[l].bias);
  }
  out.emplace_back(prefix + ".head.weight", &p.head.weight);
  out.emplace_back(prefix + ".head.bias", &p.head.bias);
}

void collect_tensors(const ConvEmbedParams& p, const std::string& prefix,
                     std::vector<ConstTensorRef>& out) {
  for (std::size_t l = 0; l < p.convs.size(); ++l) {
    out.emplace_back(prefix + ".conv." + std::to_string(l) + ".kernel", &p.convs[l].kernel);
    out.emplace_back(prefix + ".conv." + std::to_string(l) + ".bias", &p.convs[l].bias);
  }
  out.emplace_back(prefix + ".head.weight", &p.head.weight);
  out.emplace_back(prefix + ".head.bias", &p.head.bias);
}

}  // namespace permflow
