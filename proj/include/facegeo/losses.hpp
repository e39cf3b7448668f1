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

#include <cmath>
#include <optional>
#include <string>

#include "facegeo/errors.hpp"
#include "facegeo/morphable.hpp"
#include "facegeo/networks.hpp"
#include "facegeo/tensor.hpp"

namespace facegeo {

/// Weights of the coefficient, landmark, landmark-coefficient and
/// consistency terms.
struct LossWeights {
  double coefficient = 0.02;
  double landmark = 0.03;
  double landmark_coefficient = 0.02;
  double consistency = 0.001;

  bool operator==(const LossWeights&) const = default;
};

struct LossComponents {
  double coefficient = 0.0;           // ||alpha - alpha*||^2
  double landmark = 0.0;              // smooth L1 of refined landmarks, mean over landmarks
  double landmark_coefficient = 0.0;  // ||alpha_hat - alpha*||^2
  double consistency = 0.0;           // ||alpha - alpha_hat||^2
};

inline double loss_total(const LossComponents& c, const LossWeights& w) {
  return w.coefficient * c.coefficient + w.landmark * c.landmark +
         w.landmark_coefficient * c.landmark_coefficient + w.consistency * c.consistency;
}

// ----------------------------------------------------------------------------
// Value-level losses on single samples

/// Sum of squared differences over pose, shape and expression.
inline double loss_3dmm(const MorphParams& pred, const MorphParams& gt) {
  const auto a = pred.flat();
  const auto b = gt.flat();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline double smooth_l1(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

/// Smooth L1 summed over coordinates and landmarks, divided by the landmark
/// count.
inline double loss_landmark(const PointSet& pred, const PointSet& gt) {
  if (pred.size() != gt.size() || pred.size() == 0)
    throw DimensionError("loss_landmark: landmark counts differ (" + std::to_string(pred.size()) + " vs " +
                         std::to_string(gt.size()) + ")");
  double s = 0.0;
  for (Eigen::Index i = 0; i < pred.points.rows(); ++i)
    for (Eigen::Index j = 0; j < 3; ++j) s += smooth_l1(pred.points(i, j) - gt.points(i, j));
  return s / static_cast<double>(pred.size());
}

inline double loss_lgs(const MorphParams& alpha_hat, const MorphParams& gt) { return loss_3dmm(alpha_hat, gt); }

inline double loss_consistency(const MorphParams& alpha, const MorphParams& alpha_hat) {
  return loss_3dmm(alpha, alpha_hat);
}

// ----------------------------------------------------------------------------
// Graph-level losses on batches; every term is averaged over the batch.

namespace ad_loss {

/// sum_m ||a_m - b_m||^2 per sample, mean over the batch.
inline ad::Var coefficient(const CoefficientVars& a, const CoefficientVars& b) {
  ad::Graph& g = *a.pose.graph;
  const double batch = static_cast<double>(g.value(a.pose).rows());
  ad::Var s = ad::add(ad::sum(ad::square(ad::sub(a.pose, b.pose))),
                      ad::add(ad::sum(ad::square(ad::sub(a.shape, b.shape))),
                              ad::sum(ad::square(ad::sub(a.expr, b.expr)))));
  return ad::scale(s, 1.0 / batch);
}

/// Smooth L1 over (B*N_l) x 3 landmarks, mean over landmarks and batch.
inline ad::Var landmark(ad::Var pred, ad::Var gt) {
  ad::Graph& g = *pred.graph;
  const double rows = static_cast<double>(g.value(pred).rows());
  return ad::scale(ad::sum(ad::smooth_l1(ad::sub(pred, gt))), 1.0 / rows);
}

inline ad::Var total(ad::Var coefficient, ad::Var landmark, std::optional<ad::Var> landmark_coefficient,
                     std::optional<ad::Var> consistency, const LossWeights& w) {
  ad::Var t = ad::add(ad::scale(coefficient, w.coefficient), ad::scale(landmark, w.landmark));
  if (landmark_coefficient) t = ad::add(t, ad::scale(*landmark_coefficient, w.landmark_coefficient));
  if (consistency) t = ad::add(t, ad::scale(*consistency, w.consistency));
  return t;
}

}  // namespace ad_loss

}  // namespace facegeo
