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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "facegeo/dataset.hpp"
#include "facegeo/errors.hpp"
#include "facegeo/losses.hpp"
#include "facegeo/networks.hpp"
#include "facegeo/random.hpp"
#include "facegeo/tensor.hpp"

namespace facegeo {

struct TrainConfig {
  std::uint64_t seed = 7;
  std::size_t epochs = 200;
  std::size_t batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  LossWeights lambdas;
  // Learning rate drops to 1/10 and 1/100 at these fractions of the epochs.
  double first_decay = 0.6;
  double second_decay = 0.8;
  std::size_t z_dim = 1280;
  std::size_t n_vertices = 2048;

  bool operator==(const TrainConfig&) const = default;
};

struct EpochLoss {
  std::size_t epoch = 0;
  LossComponents components;
  double total = 0.0;
};

/// Heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v.
inline void sgd_step(std::span<double> params, std::span<const double> grads, double lr, double momentum,
                     std::vector<double>& velocity) {
  if (grads.size() != params.size())
    throw DimensionError("sgd_step: " + std::to_string(params.size()) + " parameters vs " +
                         std::to_string(grads.size()) + " gradients");
  if (velocity.size() != params.size()) velocity.assign(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

inline double learning_rate(const TrainConfig& c, std::size_t epoch) {
  const auto e = static_cast<double>(epoch);
  const auto total = static_cast<double>(c.epochs);
  if (e >= std::floor(c.second_decay * total)) return c.lr / 100.0;
  if (e >= std::floor(c.first_decay * total)) return c.lr / 10.0;
  return c.lr;
}

/// Batch tensors stacked from samples.
struct Batch {
  Tensor images;     // B x pixels
  Tensor pose;       // B x 12
  Tensor shape;      // B x 40
  Tensor expr;       // B x 10
  Tensor landmarks;  // (B*N_l) x 3
};

inline Batch make_batch(const std::vector<TrainingSample>& data, std::span<const std::size_t> idx) {
  const std::size_t b = idx.size();
  const std::size_t pixels = data.at(idx[0]).observation.size();
  const std::size_t nl = data.at(idx[0]).gt_landmarks.size();
  Batch out{Tensor::zeros(b, pixels), Tensor::zeros(b, kPoseDim), Tensor::zeros(b, kShapeDim),
            Tensor::zeros(b, kExprDim), Tensor::zeros(b * nl, 3)};
  for (std::size_t k = 0; k < b; ++k) {
    const auto& s = data.at(idx[k]);
    if (s.observation.size() != pixels || s.gt_landmarks.size() != nl)
      throw DimensionError("samples in a batch disagree on observation or landmark size");
    std::copy(s.observation.data.begin(), s.observation.data.end(), out.images.data.begin() + static_cast<std::ptrdiff_t>(k * pixels));
    std::copy(s.gt_params.pose.begin(), s.gt_params.pose.end(), out.pose.data.begin() + static_cast<std::ptrdiff_t>(k * kPoseDim));
    std::copy(s.gt_params.shape.begin(), s.gt_params.shape.end(), out.shape.data.begin() + static_cast<std::ptrdiff_t>(k * kShapeDim));
    std::copy(s.gt_params.expr.begin(), s.gt_params.expr.end(), out.expr.data.begin() + static_cast<std::ptrdiff_t>(k * kExprDim));
    for (std::size_t n = 0; n < nl; ++n)
      for (std::size_t j = 0; j < 3; ++j)
        out.landmarks.at(k * nl + n, j) = s.gt_landmarks.points(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(j));
  }
  return out;
}

/// Graph handles of one training step.
struct StepVars {
  PipelineVars pipeline;
  ad::Var coefficient, landmark;
  std::optional<ad::Var> landmark_coefficient, consistency;
  ad::Var total;
};

/// Records the full training objective for one batch on `g`.
inline StepVars record_step(ad::Graph& g, NetworkParams& p, const LandmarkBasis& basis, const Batch& batch,
                            const LossWeights& w, bool training = true) {
  StepVars s;
  const auto lb = bind_landmark_basis(g, basis);
  s.pipeline = forward_pipeline(g, p, lb, g.constant(batch.images, "images"), training, true);
  const CoefficientVars gt{g.constant(batch.pose, "gt_pose"), g.constant(batch.shape, "gt_shape"),
                           g.constant(batch.expr, "gt_expr")};
  s.coefficient = ad_loss::coefficient(s.pipeline.alpha, gt);
  s.landmark = ad_loss::landmark(s.pipeline.refiner.refined, g.constant(batch.landmarks, "gt_landmarks"));
  if (s.pipeline.alpha_hat) {
    s.landmark_coefficient = ad_loss::coefficient(*s.pipeline.alpha_hat, gt);
    s.consistency = ad_loss::coefficient(s.pipeline.alpha, *s.pipeline.alpha_hat);
  }
  s.total = ad_loss::total(s.coefficient, s.landmark, s.landmark_coefficient, s.consistency, w);
  return s;
}

inline LossComponents read_components(const ad::Graph& g, const StepVars& s) {
  LossComponents c;
  c.coefficient = g.scalar(s.coefficient);
  c.landmark = g.scalar(s.landmark);
  if (s.landmark_coefficient) c.landmark_coefficient = g.scalar(*s.landmark_coefficient);
  if (s.consistency) c.consistency = g.scalar(*s.consistency);
  return c;
}

/// Splits a permutation into batches of `batch`; a trailing batch of one
/// sample is merged into its predecessor since batch norm needs two rows.
inline std::vector<std::vector<std::size_t>> split_batches(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

using EpochCallback = std::function<void(const EpochLoss&)>;

/// Mini-batch SGD over the full pipeline. Shuffling and initialization are
/// seeded, so (config, dataset, initial params) fix the result bit-exactly.
inline std::vector<EpochLoss> train(const TrainConfig& config, const std::vector<TrainingSample>& data,
                                    const LandmarkBasis& basis, NetworkParams& params,
                                    const EpochCallback& on_epoch = {}) {
  if (data.size() < 2) throw ContractError("train: need at least two samples for batch statistics");
  if (config.batch < 2) throw ContractError("train: batch size must be at least 2");
  if (config.epochs == 0) throw ContractError("train: epochs must be positive");

  auto slots = params.learnable();
  std::vector<std::vector<double>> velocity(slots.size());
  Rng shuffle(config.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(data.size());
  std::vector<EpochLoss> history;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.next() % i]);
    const double lr = learning_rate(config, epoch);

    EpochLoss el;
    el.epoch = epoch + 1;
    double weight = 0.0;
    for (const auto& idx : split_batches(order, config.batch)) {
      const Batch batch = make_batch(data, idx);
      ad::Graph g;
      const StepVars step = record_step(g, params, basis, batch, config.lambdas);
      const double total = g.scalar(step.total);
      if (!std::isfinite(total)) {
        const auto where = g.first_non_finite();
        throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch + 1) + "; first non-finite tensor: " +
                             where.value_or("none recorded"));
      }
      params.zero_grad();
      g.backward(step.total);
      for (std::size_t k = 0; k < slots.size(); ++k) {
        Tensor& t = *slots[k].tensor;
        if (t.grad.empty()) t.zero_grad();
        sgd_step(t.data, t.grad, lr, config.momentum, velocity[k]);
      }
      const auto c = read_components(g, step);
      const double bw = static_cast<double>(idx.size());
      el.components.coefficient += bw * c.coefficient;
      el.components.landmark += bw * c.landmark;
      el.components.landmark_coefficient += bw * c.landmark_coefficient;
      el.components.consistency += bw * c.consistency;
      el.total += bw * total;
      weight += bw;
    }
    el.components.coefficient /= weight;
    el.components.landmark /= weight;
    el.components.landmark_coefficient /= weight;
    el.components.consistency /= weight;
    el.total /= weight;
    history.push_back(el);
    if (on_epoch) on_epoch(el);
  }
  return history;
}

/// Per-sample outputs of the pipeline in inference mode.
struct Prediction {
  std::string id;
  MorphParams alpha;
  PointSet coarse;
  PointSet refined;
  std::optional<MorphParams> alpha_hat;
};

/// Batched inference with batch norm in eval mode; the landmark regressor
/// runs only when `with_lgs` is set.
inline std::vector<Prediction> predict(NetworkParams& params, const LandmarkBasis& basis,
                                       const std::vector<TrainingSample>& data, bool with_lgs = false,
                                       std::size_t chunk = 64) {
  std::vector<Prediction> out;
  const std::size_t nl = params.ledger.n_landmarks;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Batch batch = make_batch(data, idx);
    ad::Graph g;
    const auto lb = bind_landmark_basis(g, basis);
    const auto pv = forward_pipeline(g, params, lb, g.constant(batch.images), false, with_lgs);
    const Tensor& coarse = g.value(pv.coarse);
    const Tensor& refined = g.value(pv.refiner.refined);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Prediction p;
      p.id = data[idx[k]].id;
      p.alpha = to_params(g.value(pv.alpha.pose), g.value(pv.alpha.shape), g.value(pv.alpha.expr), k);
      p.coarse.points = Eigen::Map<const Points>(coarse.data.data() + k * nl * 3, static_cast<Eigen::Index>(nl), 3);
      p.refined.points = Eigen::Map<const Points>(refined.data.data() + k * nl * 3, static_cast<Eigen::Index>(nl), 3);
      if (pv.alpha_hat)
        p.alpha_hat = to_params(g.value(pv.alpha_hat->pose), g.value(pv.alpha_hat->shape), g.value(pv.alpha_hat->expr), k);
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace facegeo
