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

// Point-to-point ICP: nearest-neighbour correspondences from a k-d tree and a
// closed-form (Kabsch) rigid update per iteration.

#include <Eigen/Core>
#include <Eigen/SVD>

#include <cmath>
#include <vector>

#include "facegeo/errors.hpp"
#include "facegeo/kdtree.hpp"
#include "facegeo/morphable.hpp"

namespace facegeo {

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Points apply(const Points& p) const { return (p * rotation.transpose()).rowwise() + translation.transpose(); }

  /// this after other.
  RigidTransform compose(const RigidTransform& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }
};

/// Least-squares rigid map taking `source` rows onto `target` rows.
/// Throws RegistrationError when the cross-covariance has rank < 2
/// (collinear or coincident points).
inline RigidTransform kabsch(const Points& source, const Points& target) {
  if (source.rows() != target.rows() || source.rows() < 3)
    throw RegistrationError("kabsch: need >= 3 paired points");
  const Eigen::RowVector3d cs = source.colwise().mean();
  const Eigen::RowVector3d ct = target.colwise().mean();
  const Eigen::Matrix3d h = (source.rowwise() - cs).transpose() * (target.rowwise() - ct);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0))
    throw RegistrationError("kabsch: degenerate cross-covariance (rank < 2)");
  Eigen::Matrix3d fix = Eigen::Matrix3d::Identity();
  fix(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  RigidTransform t;
  t.rotation = svd.matrixV() * fix * svd.matrixU().transpose();
  t.translation = ct.transpose() - t.rotation * cs.transpose();
  return t;
}

struct IcpOptions {
  double relative_tolerance = 1e-6;
  int max_iterations = 100;
};

struct IcpResult {
  RigidTransform transform;
  double rmse = 0.0;
  std::vector<double> rmse_history;  // one entry per correspondence pass
};

/// Registers `source` onto `target`. The RMSE recorded at each pass uses the
/// current transform and fresh nearest neighbours, so the sequence is
/// non-increasing.
inline IcpResult icp_register(const PointSet& source, const PointSet& target, const IcpOptions& opt = {}) {
  if (source.size() < 3 || target.size() < 3) throw RegistrationError("icp: need >= 3 points on both sides");
  const KdTree tree(target.points);
  IcpResult r;
  Points moved = source.points;
  Points matched(moved.rows(), 3);
  for (int it = 0;; ++it) {
    double sq = 0.0;
    for (Eigen::Index i = 0; i < moved.rows(); ++i) {
      const auto hit = tree.nearest(moved.row(i).transpose());
      matched.row(i) = target.points.row(static_cast<Eigen::Index>(hit.index));
      sq += hit.squared_distance;
    }
    const double rmse = std::sqrt(sq / static_cast<double>(moved.rows()));
    r.rmse_history.push_back(rmse);
    r.rmse = rmse;
    if (rmse < 1e-14) break;
    if (it > 0) {
      const double prev = r.rmse_history[r.rmse_history.size() - 2];
      if (std::abs(prev - rmse) < opt.relative_tolerance * prev) break;
    }
    if (it >= opt.max_iterations) break;
    const RigidTransform step = kabsch(moved, matched);
    r.transform = step.compose(r.transform);
    moved = r.transform.apply(source.points);
  }
  return r;
}

}  // namespace facegeo
