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
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "facegeo/errors.hpp"
#include "facegeo/morphable.hpp"

namespace facegeo {

/// Static 3-d tree over a point array for exact nearest-neighbour queries.
/// Ties resolve to the lowest point index.
class KdTree {
 public:
  explicit KdTree(const Points& points) : points_(points), order_(static_cast<std::size_t>(points.rows())) {
    if (points.rows() == 0) throw DomainError("KdTree: empty point set");
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(order_.size());
    build(0, order_.size());
  }

  struct Hit {
    std::size_t index;
    double squared_distance;
  };

  Hit nearest(const Eigen::Vector3d& q) const {
    Hit best{0, std::numeric_limits<double>::infinity()};
    search(0, q, best);
    return best;
  }

  std::size_t size() const { return order_.size(); }

 private:
  struct Node {
    std::size_t begin, end;   // range in order_
    std::size_t point;        // splitting point index
    int axis;                 // -1 for leaves
    int left = -1, right = -1;
  };

  static constexpr std::size_t kLeafSize = 8;

  int build(std::size_t begin, std::size_t end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({begin, end, 0, -1});
    if (end - begin <= kLeafSize) return id;
    // Split on the widest extent.
    Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
    Eigen::Vector3d hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      const Eigen::Vector3d p = points_.row(static_cast<Eigen::Index>(order_[i])).transpose();
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    Eigen::Index axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                       const double va = points_(static_cast<Eigen::Index>(a), axis);
                       const double vb = points_(static_cast<Eigen::Index>(b), axis);
                       return va < vb || (va == vb && a < b);
                     });
    nodes_[static_cast<std::size_t>(id)].axis = static_cast<int>(axis);
    nodes_[static_cast<std::size_t>(id)].point = order_[mid];
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  void consider(std::size_t idx, const Eigen::Vector3d& q, Hit& best) const {
    const double d = (points_.row(static_cast<Eigen::Index>(idx)).transpose() - q).squaredNorm();
    if (d < best.squared_distance || (d == best.squared_distance && idx < best.index)) best = {idx, d};
  }

  void search(int id, const Eigen::Vector3d& q, Hit& best) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) consider(order_[i], q, best);
      return;
    }
    const double split = points_(static_cast<Eigen::Index>(n.point), n.axis);
    const double diff = q(n.axis) - split;
    const int near = diff < 0.0 ? n.left : n.right;
    const int far = diff < 0.0 ? n.right : n.left;
    search(near, q, best);
    // <= keeps equal-distance candidates on the far side reachable for tie-breaking.
    if (diff * diff <= best.squared_distance) search(far, q, best);
  }

  Points points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace facegeo
