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

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "facegeo/errors.hpp"
#include "facegeo/icp.hpp"
#include "facegeo/kdtree.hpp"
#include "facegeo/morphable.hpp"

namespace facegeo {

struct EvalRecord {
  PointSet pred_landmarks;
  PointSet gt_landmarks;
  MorphParams pred_params;
  MorphParams gt_params;
  double gt_yaw = 0.0;  // degrees

  void validate() const {
    if (pred_landmarks.size() != gt_landmarks.size())
      throw ContractError("EvalRecord: " + std::to_string(pred_landmarks.size()) + " predicted vs " +
                          std::to_string(gt_landmarks.size()) + " groundtruth landmarks");
    if (!std::isfinite(gt_yaw)) throw ContractError("EvalRecord: non-finite yaw");
  }
};

struct MaeReport {
  double yaw = 0.0, pitch = 0.0, roll = 0.0, mean = 0.0;
};

struct ReconReport {
  std::optional<double> protocol1_nme, protocol2_nme, p2plane_rmse;
};

inline const std::array<std::string, 4> kBucketNames{"[0,30)", "[30,60)", "[60,90]", "all"};

struct MetricsReport {
  std::map<std::string, double> nme_by_bucket;  // absent buckets are omitted
  std::optional<MaeReport> mae;
  ReconReport recon;
};

// ----------------------------------------------------------------------------
// Landmark NME

/// Mean per-point distance over `norm`, in percent. With `stacked_norm` the
/// numerator is instead the norm of all stacked coordinates divided by the
/// point count.
inline double nme(const PointSet& pred, const PointSet& gt, double norm, bool stacked_norm = false) {
  if (pred.size() != gt.size())
    throw ContractError("nme: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + " points");
  if (pred.size() == 0) throw ContractError("nme: empty point sets");
  if (!(norm > 0.0)) throw ContractError("nme: normalizer must be positive");
  const Points diff = pred.points - gt.points;
  const double n = static_cast<double>(pred.size());
  const double err = stacked_norm ? diff.norm() / n : diff.rowwise().norm().sum() / n;
  return 100.0 * err / norm;
}

/// Square root of the x-y bounding-box area.
inline double bbox_norm(const PointSet& gt) {
  if (gt.size() < 2) throw ContractError("bbox_norm: need at least two points");
  const double w = gt.points.col(0).maxCoeff() - gt.points.col(0).minCoeff();
  const double h = gt.points.col(1).maxCoeff() - gt.points.col(1).minCoeff();
  if (!(w * h > 0.0)) throw ContractError("bbox_norm: degenerate bounding box");
  return std::sqrt(w * h);
}

/// Index into kBucketNames by |yaw|, or nullopt when |yaw| > 90.
inline std::optional<std::size_t> yaw_bucket(double yaw) {
  const double a = std::abs(yaw);
  if (a < 30.0) return 0;
  if (a < 60.0) return 1;
  if (a <= 90.0) return 2;
  return std::nullopt;
}

inline std::map<std::string, double> nme_report(const std::vector<EvalRecord>& records, bool stacked_norm = false) {
  if (records.empty()) throw EmptyEvaluationError("nme_report: no records");
  std::array<double, 3> sum{};
  std::array<std::size_t, 3> count{};
  double all = 0.0;
  std::size_t n_all = 0;
  for (const auto& r : records) {
    r.validate();
    const auto b = yaw_bucket(r.gt_yaw);
    if (!b) continue;
    const double e = nme(r.pred_landmarks, r.gt_landmarks, bbox_norm(r.gt_landmarks), stacked_norm);
    sum[*b] += e;
    ++count[*b];
    all += e;
    ++n_all;
  }
  if (n_all == 0) throw EmptyEvaluationError("nme_report: every record has |yaw| > 90");
  std::map<std::string, double> out;
  for (std::size_t b = 0; b < 3; ++b)
    if (count[b] > 0) out[kBucketNames[b]] = sum[b] / static_cast<double>(count[b]);
  out[kBucketNames[3]] = all / static_cast<double>(n_all);
  return out;
}

// ----------------------------------------------------------------------------
// Pose MAE

/// a - b mapped to [-180, 180].
inline double angle_difference(double a, double b) {
  double d = std::fmod(a - b, 360.0);
  if (d > 180.0) d -= 360.0;
  if (d < -180.0) d += 360.0;
  return d;
}

inline EulerAngles pose_euler(const MorphParams& p) {
  return rotation_to_euler(decompose_pose(std::span<const double, kPoseDim>(p.pose)).rotation);
}

/// Predicted and groundtruth angles of one sample.
struct AnglePair {
  EulerAngles pred, gt;
  double gt_yaw = 0.0;  // drives the exclusion rule
};

inline MaeReport mae_euler(const std::vector<AnglePair>& pairs) {
  MaeReport m;
  std::size_t n = 0;
  for (const auto& r : pairs) {
    if (!(r.gt_yaw >= -99.0 && r.gt_yaw <= 99.0)) continue;
    m.yaw += std::abs(angle_difference(r.pred.yaw, r.gt.yaw));
    m.pitch += std::abs(angle_difference(r.pred.pitch, r.gt.pitch));
    m.roll += std::abs(angle_difference(r.pred.roll, r.gt.roll));
    ++n;
  }
  if (n == 0) throw EmptyEvaluationError("mae_euler: no record has yaw inside [-99, 99]");
  const double dn = static_cast<double>(n);
  m.yaw /= dn;
  m.pitch /= dn;
  m.roll /= dn;
  m.mean = (m.yaw + m.pitch + m.roll) / 3.0;
  return m;
}

/// Angles come from the pose blocks of the stored coefficients.
inline MaeReport mae_euler(const std::vector<EvalRecord>& records) {
  std::vector<AnglePair> pairs;
  pairs.reserve(records.size());
  for (const auto& r : records) {
    if (!(r.gt_yaw >= -99.0 && r.gt_yaw <= 99.0)) continue;
    pairs.push_back({pose_euler(r.pred_params), pose_euler(r.gt_params), r.gt_yaw});
  }
  return mae_euler(pairs);
}

// ----------------------------------------------------------------------------
// Dense reconstruction

inline double mean_vertex_error(const Points& a, const Points& b) {
  if (a.rows() != b.rows()) throw ContractError("vertex counts differ");
  if (a.rows() == 0) throw ContractError("empty meshes");
  return (a - b).rowwise().norm().sum() / static_cast<double>(a.rows());
}

/// ICP-registers pred onto gt, then mean per-vertex error over the
/// interocular distance, in percent.
inline double protocol1_nme(const PointSet& pred, const PointSet& gt, double interocular,
                            const IcpOptions& icp = {}) {
  if (!(interocular > 0.0)) throw ContractError("protocol1_nme: interocular distance must be positive");
  if (pred.size() != gt.size()) throw ContractError("protocol1_nme: vertex counts differ");
  const IcpResult reg = icp_register(pred, gt, icp);
  return 100.0 * mean_vertex_error(reg.transform.apply(pred.points), gt.points) / interocular;
}

/// No registration: pose error counts.
inline double protocol2_nme(const PointSet& pred, const PointSet& gt, double norm) {
  if (!(norm > 0.0)) throw ContractError("protocol2_nme: normalizer must be positive");
  return 100.0 * mean_vertex_error(pred.points, gt.points) / norm;
}

/// Indices of the vertices within `radius` of `center`, ascending.
inline std::vector<std::size_t> crop_indices(const PointSet& mesh, const Eigen::Vector3d& center, double radius) {
  if (!(radius > 0.0)) throw ContractError("crop_by_radius: radius must be positive");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < mesh.size(); ++i)
    if ((mesh.point(i) - center).norm() <= radius) kept.push_back(i);
  return kept;
}

/// Sub-mesh on the given ascending vertex indices, keeping the faces whose
/// three vertices all survive, reindexed.
inline PointSet select_vertices(const PointSet& mesh, const std::vector<std::size_t>& kept) {
  if (kept.empty()) throw EmptyCropError("crop_by_radius: no vertex within radius");
  std::vector<int> remap(mesh.size(), -1);
  PointSet out;
  out.points.resize(static_cast<Eigen::Index>(kept.size()), 3);
  for (std::size_t k = 0; k < kept.size(); ++k) {
    remap.at(kept[k]) = static_cast<int>(k);
    out.points.row(static_cast<Eigen::Index>(k)) = mesh.points.row(static_cast<Eigen::Index>(kept[k]));
  }
  for (const auto& f : mesh.faces) {
    const Face g{remap[static_cast<std::size_t>(f[0])], remap[static_cast<std::size_t>(f[1])],
                 remap[static_cast<std::size_t>(f[2])]};
    if (g[0] >= 0 && g[1] >= 0 && g[2] >= 0) out.faces.push_back(g);
  }
  return out;
}

/// Vertices within `radius` of `center`, plus the faces that keep all three.
inline PointSet crop_by_radius(const PointSet& mesh, const Eigen::Vector3d& center, double radius) {
  return select_vertices(mesh, crop_indices(mesh, center, radius));
}

/// Area-weighted vertex normals (unnormalized face cross products summed).
/// Vertices whose fan has zero area get a zero vector.
inline Points vertex_normals(const PointSet& mesh) {
  mesh.validate();
  Points n = Points::Zero(mesh.points.rows(), 3);
  for (const auto& f : mesh.faces) {
    const Eigen::Vector3d a = mesh.point(static_cast<std::size_t>(f[0]));
    const Eigen::Vector3d c = (mesh.point(static_cast<std::size_t>(f[1])) - a)
                                  .cross(mesh.point(static_cast<std::size_t>(f[2])) - a);
    for (int v : f) n.row(v) += c.transpose();
  }
  for (Eigen::Index i = 0; i < n.rows(); ++i) {
    const double len = n.row(i).norm();
    if (len > 1e-300) n.row(i) /= len;
    else n.row(i).setZero();
  }
  return n;
}

struct PlaneRmse {
  double rmse = 0.0;
  std::size_t skipped = 0;  // pred vertices whose nearest gt vertex has no normal
};

/// Point-to-plane RMSE of pred against a faced groundtruth mesh, optionally
/// after rigid ICP registration.
inline PlaneRmse point_to_plane(const PointSet& pred, const PointSet& gt_mesh, bool use_icp = true,
                                const IcpOptions& icp = {}) {
  if (gt_mesh.faces.empty()) throw ContractError("point_to_plane_rmse: groundtruth mesh has no faces");
  if (pred.size() == 0) throw ContractError("point_to_plane_rmse: empty prediction");
  const Points normals = vertex_normals(gt_mesh);
  const Points moved = use_icp ? icp_register(pred, gt_mesh, icp).transform.apply(pred.points) : pred.points;
  const KdTree tree(gt_mesh.points);
  PlaneRmse out;
  double sq = 0.0;
  std::size_t used = 0;
  for (Eigen::Index i = 0; i < moved.rows(); ++i) {
    const Eigen::Vector3d p = moved.row(i).transpose();
    const auto hit = tree.nearest(p);
    const Eigen::Vector3d nrm = normals.row(static_cast<Eigen::Index>(hit.index)).transpose();
    if (nrm.squaredNorm() == 0.0) {
      ++out.skipped;
      continue;
    }
    const double d = (p - gt_mesh.point(hit.index)).dot(nrm);
    sq += d * d;
    ++used;
  }
  if (used == 0) throw RegistrationError("point_to_plane_rmse: every matched normal is degenerate");
  out.rmse = std::sqrt(sq / static_cast<double>(used));
  return out;
}

inline double point_to_plane_rmse(const PointSet& pred, const PointSet& gt_mesh, bool use_icp = true) {
  return point_to_plane(pred, gt_mesh, use_icp).rmse;
}

}  // namespace facegeo
