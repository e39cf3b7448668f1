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

// Linear face model: frontal reconstruction from shape/expression
// coefficients, rigid-with-scale pose, Euler conversion, landmark gather, and
// a deterministic synthetic basis standing in for licensed face scans.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "facegeo/errors.hpp"
#include "facegeo/random.hpp"

namespace facegeo {

inline constexpr std::size_t kPoseDim = 12;
inline constexpr std::size_t kShapeDim = 40;
inline constexpr std::size_t kExprDim = 10;
inline constexpr std::size_t kParamDim = kPoseDim + kShapeDim + kExprDim;
inline constexpr std::size_t kNumLandmarks = 68;

// Outer eye corners in the 68-point ordering.
inline constexpr std::size_t kLeftEyeCorner = 36;
inline constexpr std::size_t kRightEyeCorner = 45;

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Face = std::array<int, 3>;

struct PointSet {
  Points points;
  std::vector<Face> faces;

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  Eigen::Vector3d point(std::size_t i) const { return points.row(static_cast<Eigen::Index>(i)).transpose(); }

  void validate() const {
    if (!points.allFinite()) throw ContractError("point set holds non-finite coordinates");
    const auto n = static_cast<int>(points.rows());
    for (const auto& f : faces)
      for (int v : f)
        if (v < 0 || v >= n)
          throw ContractError("face index " + std::to_string(v) + " outside [0, " + std::to_string(n) + ")");
  }
};

/// The 62 regressed coefficients: 3x4 pose block, shape, expression.
struct MorphParams {
  std::array<double, kPoseDim> pose{};
  std::array<double, kShapeDim> shape{};
  std::array<double, kExprDim> expr{};

  std::vector<double> flat() const {
    std::vector<double> out;
    out.reserve(kParamDim);
    out.insert(out.end(), pose.begin(), pose.end());
    out.insert(out.end(), shape.begin(), shape.end());
    out.insert(out.end(), expr.begin(), expr.end());
    return out;
  }

  static MorphParams from_flat(std::span<const double> v) {
    if (v.size() != kParamDim)
      throw ContractError("MorphParams needs " + std::to_string(kParamDim) + " values, got " +
                          std::to_string(v.size()));
    MorphParams p;
    std::copy_n(v.begin(), kPoseDim, p.pose.begin());
    std::copy_n(v.begin() + kPoseDim, kShapeDim, p.shape.begin());
    std::copy_n(v.begin() + kPoseDim + kShapeDim, kExprDim, p.expr.begin());
    return p;
  }

  bool all_finite() const {
    const auto f = flat();
    return std::all_of(f.begin(), f.end(), [](double x) { return std::isfinite(x); });
  }

  bool operator==(const MorphParams&) const = default;
};

struct Pose {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  bool is_valid(double tol = 1e-9) const {
    return scale > 0.0 && std::isfinite(scale) &&
           (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
  }

  Pose inverse() const {
    Pose inv;
    inv.scale = 1.0 / scale;
    inv.rotation = rotation.transpose();
    inv.translation = -inv.scale * (inv.rotation * translation);
    return inv;
  }
};

/// Degrees. Convention: R = Rx(pitch) * Ry(yaw) * Rz(roll).
struct EulerAngles {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
};

struct BasisSet {
  std::size_t n_vertices = 0;
  Eigen::VectorXd mean;          // 3 * n_vertices, interleaved xyz
  Eigen::MatrixXd shape_basis;   // 3 * n_vertices x 40
  Eigen::MatrixXd expr_basis;    // 3 * n_vertices x 10
  std::vector<int> landmark_indices;
  std::vector<Face> faces;
  std::uint64_t seed = 0;
  double basis_scale = 1.0;      // column norm of the generated bases

  std::size_t n_landmarks() const { return landmark_indices.size(); }

  void validate() const {
    const auto rows = static_cast<Eigen::Index>(3 * n_vertices);
    if (mean.size() != rows || shape_basis.rows() != rows || expr_basis.rows() != rows)
      throw ContractError("basis arrays do not match 3 * n_vertices = " + std::to_string(rows));
    if (shape_basis.cols() != static_cast<Eigen::Index>(kShapeDim) ||
        expr_basis.cols() != static_cast<Eigen::Index>(kExprDim))
      throw ContractError("basis must have 40 shape and 10 expression columns");
    for (std::size_t i = 0; i < landmark_indices.size(); ++i) {
      const int idx = landmark_indices[i];
      if (idx < 0 || static_cast<std::size_t>(idx) >= n_vertices)
        throw ContractError("landmark index " + std::to_string(idx) + " out of range");
      if (i > 0 && idx <= landmark_indices[i - 1])
        throw ContractError("landmark indices must be strictly increasing");
    }
    for (const auto& f : faces)
      for (int v : f)
        if (v < 0 || static_cast<std::size_t>(v) >= n_vertices)
          throw ContractError("face index " + std::to_string(v) + " out of range");
  }
};

namespace detail {

inline Points to_points(const Eigen::VectorXd& flat) {
  return Eigen::Map<const Points>(flat.data(), flat.size() / 3, 3);
}

inline void check_params(const BasisSet& basis, const MorphParams& params) {
  if (basis.shape_basis.cols() != static_cast<Eigen::Index>(params.shape.size()) ||
      basis.expr_basis.cols() != static_cast<Eigen::Index>(params.expr.size()) ||
      basis.mean.size() != basis.shape_basis.rows() || basis.mean.size() != basis.expr_basis.rows())
    throw ContractError("basis and parameter dimensions disagree");
}

}  // namespace detail

/// M + U_s a_s + U_e a_e, as an N_v x 3 point set sharing the basis faces.
inline PointSet reconstruct_frontal(const BasisSet& basis, const MorphParams& params) {
  detail::check_params(basis, params);
  const Eigen::Map<const Eigen::VectorXd> shape(params.shape.data(), kShapeDim);
  const Eigen::Map<const Eigen::VectorXd> expr(params.expr.data(), kExprDim);
  Eigen::VectorXd flat = basis.mean;
  flat.noalias() += basis.shape_basis * shape;
  flat.noalias() += basis.expr_basis * expr;
  return PointSet{detail::to_points(flat), basis.faces};
}

/// s * R * p + t for every point.
inline PointSet apply_pose(const PointSet& frontal, const Pose& pose) {
  PointSet out = frontal;
  const Eigen::Matrix3d m = pose.scale * pose.rotation;
  out.points = (frontal.points * m.transpose()).rowwise() + pose.translation.transpose();
  return out;
}

/// Raw 3x4 pose block [A | t] applied as A * p + t, without projecting A onto
/// a rotation. This is what the network pipeline trains against.
inline PointSet apply_affine(const PointSet& frontal, std::span<const double, kPoseDim> alpha_p) {
  Eigen::Matrix3d a;
  Eigen::Vector3d t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) a(r, c) = alpha_p[static_cast<std::size_t>(r * 4 + c)];
    t(r) = alpha_p[static_cast<std::size_t>(r * 4 + 3)];
  }
  PointSet out = frontal;
  out.points = (frontal.points * a.transpose()).rowwise() + t.transpose();
  return out;
}

/// Splits the row-major 3x4 block into scale, nearest rotation and
/// translation. Scale is the mean singular value of the 3x3 part.
inline Pose decompose_pose(std::span<const double, kPoseDim> alpha_p) {
  Eigen::Matrix3d a;
  Pose pose;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) a(r, c) = alpha_p[static_cast<std::size_t>(r * 4 + c)];
    pose.translation(r) = alpha_p[static_cast<std::size_t>(r * 4 + 3)];
  }
  if (!a.allFinite() || !pose.translation.allFinite()) throw DegeneratePoseError("pose block is not finite");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (sv.minCoeff() < 1e-12) throw DegeneratePoseError("pose block is singular");
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Matrix3d fix = Eigen::Matrix3d::Identity();
  fix(2, 2) = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  pose.rotation = u * fix * v.transpose();
  pose.scale = sv.mean();
  return pose;
}

inline std::array<double, kPoseDim> compose_pose(const Pose& pose) {
  const Eigen::Matrix3d a = pose.scale * pose.rotation;
  std::array<double, kPoseDim> out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(r * 4 + c)] = a(r, c);
    out[static_cast<std::size_t>(r * 4 + 3)] = pose.translation(r);
  }
  return out;
}

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

inline Eigen::Matrix3d rotation_x(double rad) { return Eigen::AngleAxisd(rad, Eigen::Vector3d::UnitX()).toRotationMatrix(); }
inline Eigen::Matrix3d rotation_y(double rad) { return Eigen::AngleAxisd(rad, Eigen::Vector3d::UnitY()).toRotationMatrix(); }
inline Eigen::Matrix3d rotation_z(double rad) { return Eigen::AngleAxisd(rad, Eigen::Vector3d::UnitZ()).toRotationMatrix(); }

inline Eigen::Matrix3d euler_to_rotation(const EulerAngles& e) {
  return rotation_x(deg2rad(e.pitch)) * rotation_y(deg2rad(e.yaw)) * rotation_z(deg2rad(e.roll));
}

inline EulerAngles rotation_to_euler(const Eigen::Matrix3d& p) {
  if (!p.allFinite() || (p.transpose() * p - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
      std::abs(p.determinant() - 1.0) > 1e-6)
    throw ContractError("rotation_to_euler: matrix is not a proper rotation");
  EulerAngles e;
  const double s = std::clamp(p(0, 2), -1.0, 1.0);
  e.yaw = rad2deg(std::asin(s));
  if (std::abs(p(0, 2)) > 1.0 - 1e-9) {
    // Gimbal lock: pitch and roll share one axis; put it all into pitch.
    const double sign = s > 0.0 ? 1.0 : -1.0;
    e.roll = 0.0;
    e.pitch = rad2deg(std::atan2(sign * p(1, 0), p(1, 1)));
  } else {
    e.pitch = rad2deg(std::atan2(-p(1, 2), p(2, 2)));
    e.roll = rad2deg(std::atan2(-p(0, 1), p(0, 0)));
  }
  return e;
}

/// Ordered gather of the basis landmark vertices.
inline PointSet extract_landmarks(const PointSet& mesh, const BasisSet& basis) {
  if (mesh.size() != basis.n_vertices)
    throw ContractError("mesh has " + std::to_string(mesh.size()) + " vertices, basis expects " +
                        std::to_string(basis.n_vertices));
  PointSet out;
  out.points.resize(static_cast<Eigen::Index>(basis.landmark_indices.size()), 3);
  for (std::size_t i = 0; i < basis.landmark_indices.size(); ++i) {
    const int idx = basis.landmark_indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= mesh.size())
      throw ContractError("landmark index " + std::to_string(idx) + " out of range");
    out.points.row(static_cast<Eigen::Index>(i)) = mesh.points.row(idx);
  }
  return out;
}

/// Landmark rows of the mean and bases: the only part of the model the
/// training pipeline needs.
struct LandmarkBasis {
  Eigen::VectorXd mean;         // 3 * N_l
  Eigen::MatrixXd shape_basis;  // 3 * N_l x 40
  Eigen::MatrixXd expr_basis;   // 3 * N_l x 10
};

inline LandmarkBasis landmark_basis(const BasisSet& basis) {
  const auto n = static_cast<Eigen::Index>(basis.landmark_indices.size());
  LandmarkBasis lb{Eigen::VectorXd(3 * n), Eigen::MatrixXd(3 * n, basis.shape_basis.cols()),
                   Eigen::MatrixXd(3 * n, basis.expr_basis.cols())};
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index src = 3 * basis.landmark_indices[static_cast<std::size_t>(i)];
    lb.mean.segment<3>(3 * i) = basis.mean.segment<3>(src);
    lb.shape_basis.middleRows<3>(3 * i) = basis.shape_basis.middleRows<3>(src);
    lb.expr_basis.middleRows<3>(3 * i) = basis.expr_basis.middleRows<3>(src);
  }
  return lb;
}

/// Distance between the outer eye corners of a posed or frontal mesh.
inline double interocular_distance(const PointSet& mesh, const BasisSet& basis) {
  if (basis.landmark_indices.size() <= kRightEyeCorner)
    throw ContractError("basis has no designated eye-corner landmarks");
  const auto a = mesh.point(static_cast<std::size_t>(basis.landmark_indices[kLeftEyeCorner]));
  const auto b = mesh.point(static_cast<std::size_t>(basis.landmark_indices[kRightEyeCorner]));
  return (a - b).norm();
}

/// Landmark vertex that sits furthest forward (+z) on the mean face.
inline std::size_t nose_tip_vertex(const BasisSet& basis) {
  int best = basis.landmark_indices.at(0);
  for (int idx : basis.landmark_indices)
    if (basis.mean(3 * idx + 2) > basis.mean(3 * best + 2)) best = idx;
  return static_cast<std::size_t>(best);
}

// ----------------------------------------------------------------------------
// Synthetic basis

inline constexpr std::array<double, 3> kEllipsoidAxes{1.0, 1.3, 0.8};

/// Orthonormal columns from thin Householder QR of a seeded Gaussian matrix.
inline Eigen::MatrixXd orthonormal_columns(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd g(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) g(r, c) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
}

namespace detail {

// Ring sizes proportional to sin(theta), largest-remainder rounding, >= 3 each.
inline std::vector<std::size_t> ring_sizes(std::size_t n_vertices, std::size_t rings) {
  std::vector<double> w(rings);
  double total = 0.0;
  for (std::size_t i = 0; i < rings; ++i) {
    w[i] = std::sin(std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(rings));
    total += w[i];
  }
  std::vector<std::size_t> sizes(rings);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < rings; ++i) {
    const double exact = static_cast<double>(n_vertices) * w[i] / total;
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += sizes[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n_vertices; ++k, ++assigned) ++sizes[remainders[k % rings].second];
  return sizes;
}

}  // namespace detail

/// Deterministic stand-in for a scanned face model. The mean face is a
/// latitude ring grid on an ellipsoid (semi-axes 1.0, 1.3, 0.8; +z faces the
/// camera) with neighbouring rings stitched into triangles. The bases are the
/// orthonormal columns of a seeded Gaussian matrix scaled so that a unit
/// coefficient moves vertices by about 5% of the ellipsoid diameter.
inline BasisSet generate_synthetic_basis(std::uint64_t seed, std::size_t n_vertices) {
  if (n_vertices < 128) throw ContractError("synthetic basis needs at least 128 vertices");
  const auto [ax, ay, az] = kEllipsoidAxes;
  const std::size_t rings = std::max<std::size_t>(
      3, static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n_vertices) / 2.0))));
  const auto sizes = detail::ring_sizes(n_vertices, rings);

  BasisSet b;
  b.n_vertices = n_vertices;
  b.seed = seed;
  b.mean.resize(static_cast<Eigen::Index>(3 * n_vertices));
  std::vector<std::size_t> ring_start(rings + 1, 0);
  std::vector<double> ring_offset(rings);
  for (std::size_t i = 0; i < rings; ++i) {
    ring_start[i + 1] = ring_start[i] + sizes[i];
    ring_offset[i] = (i % 2 == 0) ? 0.0 : 0.5;
    const double theta = std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(rings);
    for (std::size_t j = 0; j < sizes[i]; ++j) {
      const double phi = 2.0 * std::numbers::pi * (static_cast<double>(j) + ring_offset[i]) /
                         static_cast<double>(sizes[i]);
      const auto v = static_cast<Eigen::Index>(ring_start[i] + j);
      b.mean(3 * v) = ax * std::sin(theta) * std::cos(phi);
      b.mean(3 * v + 1) = ay * std::cos(theta);
      b.mean(3 * v + 2) = az * std::sin(theta) * std::sin(phi);
    }
  }

  const auto vertex = [&](int idx) -> Eigen::Vector3d { return b.mean.segment<3>(3 * idx); };
  const auto add_face = [&](int v0, int v1, int v2) {
    const Eigen::Vector3d p0 = vertex(v0), p1 = vertex(v1), p2 = vertex(v2);
    const Eigen::Vector3d n = (p1 - p0).cross(p2 - p0);
    // Convex surface: outward means agreeing with the centroid direction.
    if (n.dot(p0 + p1 + p2) < 0.0) std::swap(v1, v2);
    b.faces.push_back({v0, v1, v2});
  };
  for (std::size_t i = 0; i + 1 < rings; ++i) {
    const std::size_t na = sizes[i], nb = sizes[i + 1];
    const auto ua = [&](std::size_t p) { return (static_cast<double>(p) + ring_offset[i]) / static_cast<double>(na); };
    const auto ub = [&](std::size_t q) { return (static_cast<double>(q) + ring_offset[i + 1]) / static_cast<double>(nb); };
    const auto ia = [&](std::size_t p) { return static_cast<int>(ring_start[i] + p % na); };
    const auto ib = [&](std::size_t q) { return static_cast<int>(ring_start[i + 1] + q % nb); };
    std::size_t p = 0, q = 0;
    while (p < na || q < nb) {
      if (q == nb || (p < na && ua(p + 1) < ub(q + 1))) {
        add_face(ia(p), ia(p + 1), ib(q));
        ++p;
      } else {
        add_face(ia(p), ib(q + 1), ib(q));
        ++q;
      }
    }
  }

  // Landmarks: nearest free front-facing vertex to each of 68 golden-angle
  // directions spread uniformly over the front hemisphere.
  std::vector<int> front;
  for (std::size_t v = 0; v < n_vertices; ++v)
    if (b.mean(static_cast<Eigen::Index>(3 * v + 2)) > 0.0) front.push_back(static_cast<int>(v));
  if (front.size() < kNumLandmarks)
    throw ContractError("n_vertices = " + std::to_string(n_vertices) + " leaves only " +
                        std::to_string(front.size()) + " front-facing vertices for 68 landmarks");
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  std::vector<char> taken(n_vertices, 0);
  for (std::size_t k = 0; k < kNumLandmarks; ++k) {
    const double cz = 1.0 - (static_cast<double>(k) + 0.5) / static_cast<double>(kNumLandmarks);
    const double rho = std::sqrt(1.0 - cz * cz);
    const double ang = golden * static_cast<double>(k);
    const Eigen::Vector3d target(ax * rho * std::cos(ang), ay * rho * std::sin(ang), az * cz);
    int best = -1;
    double best_d = 0.0;
    for (int v : front) {
      if (taken[static_cast<std::size_t>(v)]) continue;
      const double d = (vertex(v) - target).squaredNorm();
      if (best < 0 || d < best_d) {
        best = v;
        best_d = d;
      }
    }
    taken[static_cast<std::size_t>(best)] = 1;
    b.landmark_indices.push_back(best);
  }
  std::sort(b.landmark_indices.begin(), b.landmark_indices.end());

  Rng rng(seed);
  const auto rows = static_cast<Eigen::Index>(3 * n_vertices);
  const Eigen::MatrixXd q = orthonormal_columns(rng, rows, static_cast<Eigen::Index>(kShapeDim + kExprDim));
  const double diameter = 2.0 * std::max({ax, ay, az});
  b.basis_scale = 0.05 * diameter * std::sqrt(static_cast<double>(n_vertices));
  b.shape_basis = b.basis_scale * q.leftCols(static_cast<Eigen::Index>(kShapeDim));
  b.expr_basis = b.basis_scale * q.rightCols(static_cast<Eigen::Index>(kExprDim));
  return b;
}

}  // namespace facegeo
