// Copyright 2026 The facegeo Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// The learnable pipeline. An image encoder produces the latent feature z;
// three FC heads decode pose, shape and expression coefficients; the
// landmark refiner fuses point, image and coefficient features into
// per-landmark multi-modal point features (MMPF) and predicts offsets for the
// coarse landmarks; the landmark regressor maps refined landmarks back to
// coefficients.
//
// All forward passes are batched: point tensors are (B * N_l) x 3 with the
// landmarks of each sample in consecutive rows, global tensors are B x d.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "facegeo/errors.hpp"
#include "facegeo/morphable.hpp"
#include "facegeo/random.hpp"
#include "facegeo/tensor.hpp"

namespace facegeo {

/// Every width in the network. Default sizes:
/// fusion 1280 + 1024 + 40 + 10 = 2354 and MMPF 2354 + 64 = 2418.
struct DimensionLedger {
  std::size_t image_side = 32;
  std::size_t encoder_hidden = 1024;
  std::size_t z_dim = 1280;
  std::size_t point_low_dim = 64;
  std::size_t point_global_dim = 1024;
  std::size_t shape_adapt_dim = kShapeDim;
  std::size_t expr_adapt_dim = kExprDim;
  std::size_t n_landmarks = kNumLandmarks;
  // Hidden channel plans; the low-level plan ends at point_low_dim and the
  // global plans continue to point_global_dim.
  std::vector<std::size_t> m2fa_low_channels{64, 64};
  std::vector<std::size_t> m2fa_high_channels{64, 128};
  std::vector<std::size_t> decoder_channels{512, 256, 128};
  std::vector<std::size_t> lgs_channels{64, 128};

  std::size_t image_pixels() const { return image_side * image_side; }
  std::size_t fusion_dim() const { return z_dim + point_global_dim + shape_adapt_dim + expr_adapt_dim; }
  std::size_t mmpf_dim() const { return fusion_dim() + point_low_dim; }

  /// First violated ledger invariant, if any.
  std::optional<std::string> check() const {
    if (shape_adapt_dim != kShapeDim || expr_adapt_dim != kExprDim)
      return "coefficient adapters must preserve 40 / 10 dimensions";
    if (m2fa_low_channels.empty() || m2fa_low_channels.back() != point_low_dim)
      return "low-level channel plan must end at point_low_dim";
    if (image_side == 0 || encoder_hidden == 0 || z_dim == 0 || point_global_dim == 0 || n_landmarks == 0)
      return "ledger dimensions must be positive";
    if (mmpf_dim() - point_low_dim != z_dim + point_global_dim + shape_adapt_dim + expr_adapt_dim)
      return "mmpf_dim - point_low_dim != fusion_dim";
    return std::nullopt;
  }

  bool operator==(const DimensionLedger&) const = default;
};

/// Which branches are active. The full model uses all of them; ablations
/// switch modalities of the fusion vector or the landmark regressor off.
struct ModelVariant {
  bool image_feature = true;
  bool param_features = true;
  bool lgs = true;

  bool operator==(const ModelVariant&) const = default;
};

/// One fully connected layer, optionally followed by batch norm and ReLU.
/// Layers feeding batch norm carry no bias.
struct DenseLayer {
  std::string name;
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out, empty when absent
  std::optional<ad::BatchNormState> bn;
  bool relu = false;

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }
  bool has_bias() const { return !bias.data.empty(); }
};

struct Mlp {
  std::vector<DenseLayer> layers;
};

/// A named view of one stored tensor.
struct TensorSlot {
  std::string name;
  std::string group;
  Tensor* tensor;
  bool learnable;
};

struct NetworkParams {
  DimensionLedger ledger;
  ModelVariant variant;
  std::uint64_t seed = 0;

  Mlp encoder;
  DenseLayer dec_pose, dec_shape, dec_expr;
  Mlp m2fa_low, m2fa_high;
  DenseLayer adapt_image, adapt_shape, adapt_expr;
  Mlp m2fa_decoder;
  Mlp lgs_point;
  DenseLayer conv_pose, conv_shape, conv_expr;

  std::size_t fusion_width() const {
    return (variant.image_feature ? ledger.z_dim : 0) + ledger.point_global_dim +
           (variant.param_features ? ledger.shape_adapt_dim + ledger.expr_adapt_dim : 0);
  }
  std::size_t mmpf_width() const { return fusion_width() + ledger.point_low_dim; }

  /// Every stored tensor in a fixed order: weights, biases, batch-norm
  /// affine terms and running statistics.
  std::vector<TensorSlot> slots() {
    std::vector<TensorSlot> out;
    const auto add_layer = [&](DenseLayer& l, const std::string& group) {
      out.push_back({l.name + ".weight", group, &l.weight, true});
      if (l.has_bias()) out.push_back({l.name + ".bias", group, &l.bias, true});
      if (l.bn) {
        out.push_back({l.name + ".bn.gamma", group, &l.bn->gamma, true});
        out.push_back({l.name + ".bn.beta", group, &l.bn->beta, true});
        out.push_back({l.name + ".bn.running_mean", group, &l.bn->running_mean, false});
        out.push_back({l.name + ".bn.running_var", group, &l.bn->running_var, false});
      }
    };
    const auto add_mlp = [&](Mlp& m, const std::string& group) {
      for (auto& l : m.layers) add_layer(l, group);
    };
    add_mlp(encoder, "encoder");
    add_layer(dec_pose, "decoder_pose");
    add_layer(dec_shape, "decoder_shape");
    add_layer(dec_expr, "decoder_expr");
    add_mlp(m2fa_low, "m2fa_point");
    add_mlp(m2fa_high, "m2fa_point");
    if (variant.image_feature) add_layer(adapt_image, "m2fa_adapter");
    if (variant.param_features) {
      add_layer(adapt_shape, "m2fa_adapter");
      add_layer(adapt_expr, "m2fa_adapter");
    }
    add_mlp(m2fa_decoder, "m2fa_decoder");
    if (variant.lgs) {
      add_mlp(lgs_point, "lgs_point");
      add_layer(conv_pose, "lgs_converter");
      add_layer(conv_shape, "lgs_converter");
      add_layer(conv_expr, "lgs_converter");
    }
    return out;
  }

  std::vector<TensorSlot> learnable() {
    auto all = slots();
    std::erase_if(all, [](const TensorSlot& s) { return !s.learnable; });
    return all;
  }

  void zero_grad() {
    for (auto& s : learnable()) s.tensor->zero_grad();
  }

  bool all_finite() {
    for (auto& s : slots())
      if (!s.tensor->all_finite()) return false;
    return true;
  }
};

namespace detail {

inline DenseLayer make_layer(Rng& rng, std::string name, std::size_t in, std::size_t out, bool bn, bool relu) {
  DenseLayer l;
  l.name = std::move(name);
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  l.weight = Tensor::zeros(in, out);
  for (auto& w : l.weight.data) w = rng.uniform(-bound, bound);
  l.weight.requires_grad = true;
  if (bn) {
    l.bn = ad::BatchNormState::identity(out);
  } else {
    l.bias = Tensor::zeros(1, out);
    l.bias.requires_grad = true;
  }
  l.relu = relu;
  return l;
}

// Hidden layers get BN + ReLU; a plain final layer gets a bias and no
// activation when `plain_last` is set.
inline Mlp make_mlp(Rng& rng, const std::string& name, std::size_t in, const std::vector<std::size_t>& widths,
                    bool plain_last) {
  Mlp m;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const bool last = i + 1 == widths.size();
    const bool norm = !(last && plain_last);
    m.layers.push_back(make_layer(rng, name + "." + std::to_string(i), in, widths[i], norm, norm));
    in = widths[i];
  }
  return m;
}

}  // namespace detail

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases, identity batch
/// norm. Deterministic per seed.
inline NetworkParams init_params(std::uint64_t seed, const DimensionLedger& ledger = {},
                                 const ModelVariant& variant = {}) {
  if (auto err = ledger.check()) throw ContractError("invalid dimension ledger: " + *err);
  Rng rng(seed);
  NetworkParams p;
  p.ledger = ledger;
  p.variant = variant;
  p.seed = seed;

  p.encoder.layers.push_back(detail::make_layer(rng, "encoder.0", ledger.image_pixels(), ledger.encoder_hidden, false, true));
  p.encoder.layers.push_back(detail::make_layer(rng, "encoder.1", ledger.encoder_hidden, ledger.z_dim, false, true));
  p.dec_pose = detail::make_layer(rng, "decoder.pose", ledger.z_dim, kPoseDim, false, false);
  p.dec_shape = detail::make_layer(rng, "decoder.shape", ledger.z_dim, kShapeDim, false, false);
  p.dec_expr = detail::make_layer(rng, "decoder.expr", ledger.z_dim, kExprDim, false, false);

  p.m2fa_low = detail::make_mlp(rng, "m2fa.low", 3, ledger.m2fa_low_channels, false);
  auto high = ledger.m2fa_high_channels;
  high.push_back(ledger.point_global_dim);
  p.m2fa_high = detail::make_mlp(rng, "m2fa.high", ledger.point_low_dim, high, false);
  p.adapt_image = detail::make_layer(rng, "m2fa.adapt.image", ledger.z_dim, ledger.z_dim, false, false);
  p.adapt_shape = detail::make_layer(rng, "m2fa.adapt.shape", kShapeDim, ledger.shape_adapt_dim, false, false);
  p.adapt_expr = detail::make_layer(rng, "m2fa.adapt.expr", kExprDim, ledger.expr_adapt_dim, false, false);
  auto dec = ledger.decoder_channels;
  dec.push_back(3);
  p.m2fa_decoder = detail::make_mlp(rng, "m2fa.decoder", p.mmpf_width(), dec, true);

  auto lgs = ledger.lgs_channels;
  lgs.push_back(ledger.point_global_dim);
  p.lgs_point = detail::make_mlp(rng, "lgs.point", 3, lgs, false);
  p.conv_pose = detail::make_layer(rng, "lgs.converter.pose", ledger.point_global_dim, kPoseDim, false, false);
  p.conv_shape = detail::make_layer(rng, "lgs.converter.shape", ledger.point_global_dim, kShapeDim, false, false);
  p.conv_expr = detail::make_layer(rng, "lgs.converter.expr", ledger.point_global_dim, kExprDim, false, false);
  return p;
}

/// Zeroes the refiner's output layer so refinement starts as the identity.
inline void zero_refiner_output(NetworkParams& p) {
  auto& last = p.m2fa_decoder.layers.back();
  std::fill(last.weight.data.begin(), last.weight.data.end(), 0.0);
  std::fill(last.bias.data.begin(), last.bias.data.end(), 0.0);
}

// ----------------------------------------------------------------------------
// Graph-level forward passes

/// Batch norm and activation of a layer whose linear part is already in `h`.
inline ad::Var finish_layer(ad::Graph& g, DenseLayer& layer, ad::Var h, bool training) {
  if (layer.bn)
    return ad::batch_norm(h, g.parameter(layer.bn->gamma, layer.name + ".bn.gamma"),
                          g.parameter(layer.bn->beta, layer.name + ".bn.beta"), *layer.bn, training, layer.relu);
  return layer.relu ? ad::relu(h) : h;
}

/// Shared per-point or per-row dense layer.
inline ad::Var dense(ad::Graph& g, DenseLayer& layer, ad::Var x, bool training) {
  ad::Var h = ad::matmul(x, g.parameter(layer.weight, layer.name + ".weight"));
  if (layer.has_bias())
    h = ad::add(h, ad::repeat_rows(g.parameter(layer.bias, layer.name + ".bias"), g.value(h).rows()));
  return finish_layer(g, layer, h, training);
}

inline ad::Var mlp(ad::Graph& g, Mlp& m, ad::Var x, bool training) {
  for (auto& l : m.layers) x = dense(g, l, x, training);
  return x;
}

/// Flattened B x (side*side) observations -> B x z_dim.
inline ad::Var encode(ad::Graph& g, NetworkParams& p, ad::Var images, bool training) {
  if (g.value(images).cols() != p.ledger.image_pixels())
    throw ContractError("encoder expects " + std::to_string(p.ledger.image_pixels()) +
                        " pixels per row, got " + to_string(g.value(images).shape));
  return mlp(g, p.encoder, images, training);
}

struct CoefficientVars {
  ad::Var pose, shape, expr;  // B x 12, B x 40, B x 10
};

inline CoefficientVars decode(ad::Graph& g, NetworkParams& p, ad::Var z, bool training) {
  return {dense(g, p.dec_pose, z, training), dense(g, p.dec_shape, z, training), dense(g, p.dec_expr, z, training)};
}

/// Graph constants for the landmark rows of the face model.
struct LandmarkBasisVars {
  ad::Var mean;         // 1 x 3N_l
  ad::Var shape_basis;  // 40 x 3N_l (transposed)
  ad::Var expr_basis;   // 10 x 3N_l (transposed)
  std::size_t n_landmarks;
};

inline LandmarkBasisVars bind_landmark_basis(ad::Graph& g, const LandmarkBasis& lb) {
  const auto n3 = static_cast<std::size_t>(lb.mean.size());
  const auto to_tensor_t = [n3](const Eigen::MatrixXd& m) {
    Tensor t = Tensor::zeros(static_cast<std::size_t>(m.cols()), n3);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        t.at(static_cast<std::size_t>(c), static_cast<std::size_t>(r)) = m(r, c);
    return t;
  };
  Tensor mean = Tensor::zeros(1, n3);
  for (std::size_t i = 0; i < n3; ++i) mean.data[i] = lb.mean(static_cast<Eigen::Index>(i));
  return {g.constant(std::move(mean), "landmark_mean"), g.constant(to_tensor_t(lb.shape_basis), "landmark_shape_basis"),
          g.constant(to_tensor_t(lb.expr_basis), "landmark_expr_basis"), n3 / 3};
}

/// Coarse landmarks: pose applied to the frontal landmark reconstruction.
inline ad::Var coarse_landmarks(const LandmarkBasisVars& lb, const CoefficientVars& a) {
  ad::Graph& g = *a.pose.graph;
  const std::size_t batch = g.value(a.pose).rows();
  ad::Var frontal = ad::add(ad::repeat_rows(lb.mean, batch),
                            ad::add(ad::matmul(a.shape, lb.shape_basis), ad::matmul(a.expr, lb.expr_basis)));
  return ad::affine_points(ad::reshape(frontal, batch * lb.n_landmarks, 3), a.pose);
}

struct RefinerVars {
  ad::Var low;      // (B*N_l) x point_low_dim
  ad::Var fusion;   // B x fusion width
  ad::Var offsets;  // (B*N_l) x 3
  ad::Var refined;  // (B*N_l) x 3
};

/// Multi-modal refinement. The decoder's first layer is evaluated as
/// low * W_low + repeat(fusion * W_fusion), which equals MMPF * W for
/// MMPF = [low | repeat(fusion)] without materialising the repeated block.
inline RefinerVars refine(ad::Graph& g, NetworkParams& p, ad::Var coarse, ad::Var z, ad::Var shape,
                          ad::Var expr, bool training) {
  const std::size_t n = p.ledger.n_landmarks;
  const Tensor& c = g.value(coarse);
  if (c.cols() != 3 || c.rows() % n != 0)
    throw ContractError("refiner expects groups of " + std::to_string(n) + " landmarks, got " +
                        to_string(c.shape));
  RefinerVars out;
  out.low = mlp(g, p.m2fa_low, coarse, training);
  ad::Var global = ad::max_pool_groups(mlp(g, p.m2fa_high, out.low, training), n);
  std::vector<ad::Var> parts;
  if (p.variant.image_feature) parts.push_back(dense(g, p.adapt_image, z, training));
  parts.push_back(global);
  if (p.variant.param_features) {
    parts.push_back(dense(g, p.adapt_shape, shape, training));
    parts.push_back(dense(g, p.adapt_expr, expr, training));
  }
  out.fusion = ad::concat_last_dim(parts);

  auto& layers = p.m2fa_decoder.layers;
  DenseLayer& first = layers.front();
  ad::Var w = g.parameter(first.weight, first.name + ".weight");
  const std::size_t low_dim = p.ledger.point_low_dim;
  ad::Var h = ad::add(ad::matmul(out.low, ad::slice_rows(w, 0, low_dim)),
                      ad::repeat_groups(ad::matmul(out.fusion, ad::slice_rows(w, low_dim, first.in_dim())), n));
  if (first.has_bias()) h = ad::add(h, ad::repeat_rows(g.parameter(first.bias, first.name + ".bias"), g.value(h).rows()));
  h = finish_layer(g, first, h, training);
  for (std::size_t i = 1; i < layers.size(); ++i) h = dense(g, layers[i], h, training);
  out.offsets = h;
  out.refined = ad::add(coarse, out.offsets);
  return out;
}

/// Explicit MMPF: low-level features with the fusion vector appended to every
/// landmark row, (B*N_l) x (point_low_dim + fusion width).
inline ad::Var build_mmpf(ad::Var low, ad::Var fusion, std::size_t n_landmarks) {
  return ad::concat_last_dim({low, ad::repeat_groups(fusion, n_landmarks)});
}

/// Landmark-to-coefficient regression from (B*N_l) x 3 landmarks.
inline CoefficientVars regress_from_landmarks(ad::Graph& g, NetworkParams& p, ad::Var landmarks, bool training) {
  const std::size_t n = p.ledger.n_landmarks;
  if (g.value(landmarks).cols() != 3 || g.value(landmarks).rows() % n != 0)
    throw ContractError("landmark regressor expects groups of " + std::to_string(n) + " points");
  ad::Var holistic = ad::max_pool_groups(mlp(g, p.lgs_point, landmarks, training), n);
  return {dense(g, p.conv_pose, holistic, training), dense(g, p.conv_shape, holistic, training),
          dense(g, p.conv_expr, holistic, training)};
}

/// Everything one pass through the pipeline produces.
struct PipelineVars {
  ad::Var z;
  CoefficientVars alpha;
  ad::Var coarse;
  RefinerVars refiner;
  std::optional<CoefficientVars> alpha_hat;
};

inline PipelineVars forward_pipeline(ad::Graph& g, NetworkParams& p, const LandmarkBasisVars& lb, ad::Var images,
                                     bool training, bool run_lgs) {
  PipelineVars out;
  out.z = encode(g, p, images, training);
  out.alpha = decode(g, p, out.z, training);
  out.coarse = coarse_landmarks(lb, out.alpha);
  out.refiner = refine(g, p, out.coarse, out.z, out.alpha.shape, out.alpha.expr, training);
  if (run_lgs && p.variant.lgs) out.alpha_hat = regress_from_landmarks(g, p, out.refiner.refined, training);
  return out;
}

// ----------------------------------------------------------------------------
// Single-sample inference API (batch norm in eval mode)

inline Tensor flatten_rows(const Tensor& t) { return Tensor({1, t.size()}, t.data); }

inline Tensor points_tensor(const PointSet& ps) {
  Tensor t = Tensor::zeros(ps.size(), 3);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < 3; ++j) t.at(i, j) = ps.points(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return t;
}

inline PointSet tensor_points(const Tensor& t) {
  PointSet ps;
  ps.points = Eigen::Map<const Points>(t.data.data(), static_cast<Eigen::Index>(t.rows()), 3);
  return ps;
}

inline MorphParams to_params(const Tensor& pose, const Tensor& shape, const Tensor& expr, std::size_t row = 0) {
  MorphParams m;
  std::copy_n(pose.data.begin() + static_cast<std::ptrdiff_t>(row * kPoseDim), kPoseDim, m.pose.begin());
  std::copy_n(shape.data.begin() + static_cast<std::ptrdiff_t>(row * kShapeDim), kShapeDim, m.shape.begin());
  std::copy_n(expr.data.begin() + static_cast<std::ptrdiff_t>(row * kExprDim), kExprDim, m.expr.begin());
  return m;
}

/// 32x32 observation -> 1 x z_dim latent feature.
inline Tensor encode_image(const Tensor& image, NetworkParams& p) {
  if (image.rows() * image.cols() != p.ledger.image_pixels() || image.rows() != p.ledger.image_side)
    throw ContractError("encode_image expects a " + std::to_string(p.ledger.image_side) + "x" +
                        std::to_string(p.ledger.image_side) + " observation, got " + to_string(image.shape));
  if (!image.all_finite()) throw ContractError("encode_image: non-finite observation");
  ad::Graph g;
  return g.value(encode(g, p, g.constant(flatten_rows(image)), false));
}

inline MorphParams decode_params(const Tensor& z, NetworkParams& p) {
  ad::Graph g;
  const auto a = decode(g, p, g.constant(z), false);
  return to_params(g.value(a.pose), g.value(a.shape), g.value(a.expr));
}

inline PointSet m2fa_refine(const PointSet& coarse, const Tensor& z, std::span<const double, kShapeDim> shape,
                            std::span<const double, kExprDim> expr, NetworkParams& p) {
  if (coarse.size() != p.ledger.n_landmarks)
    throw ContractError("m2fa_refine expects " + std::to_string(p.ledger.n_landmarks) + " landmarks, got " +
                        std::to_string(coarse.size()));
  ad::Graph g;
  const auto r = refine(g, p, g.constant(points_tensor(coarse)), g.constant(z),
                        g.constant(Tensor::row({shape.begin(), shape.end()})),
                        g.constant(Tensor::row({expr.begin(), expr.end()})), false);
  return tensor_points(g.value(r.refined));
}

inline MorphParams lgs_regress(const PointSet& refined, NetworkParams& p) {
  if (refined.size() != p.ledger.n_landmarks)
    throw ContractError("lgs_regress expects " + std::to_string(p.ledger.n_landmarks) + " landmarks");
  ad::Graph g;
  const auto a = regress_from_landmarks(g, p, g.constant(points_tensor(refined)), false);
  return to_params(g.value(a.pose), g.value(a.shape), g.value(a.expr));
}

}  // namespace facegeo
