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

// Synthetic training data: random coefficients and poses pushed through the
// face model, with a Gaussian-splat heatmap of the projected landmarks as the
// image modality.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "facegeo/morphable.hpp"
#include "facegeo/random.hpp"
#include "facegeo/tensor.hpp"

namespace facegeo {

struct TrainingSample {
  std::string id;
  Tensor observation;  // side x side heatmap
  MorphParams gt_params;
  PointSet gt_landmarks;
  double gt_yaw = 0.0;  // degrees, from the sampled pose
};

/// Observation geometry: the square [-extent, extent]^2 of the x-y plane
/// mapped onto side x side pixels, rows running top (+y) to bottom.
struct RasterSpec {
  std::size_t side = 32;
  double extent = 2.0;
  double sigma_px = 1.0;
};

inline Tensor rasterize_landmarks(const PointSet& landmarks, const RasterSpec& spec = {}) {
  Tensor img = Tensor::zeros(spec.side, spec.side);
  const double px = 2.0 * spec.extent / static_cast<double>(spec.side);
  const double inv2s2 = 1.0 / (2.0 * spec.sigma_px * spec.sigma_px);
  for (Eigen::Index n = 0; n < landmarks.points.rows(); ++n) {
    const double col = (landmarks.points(n, 0) + spec.extent) / px - 0.5;
    const double row = (spec.extent - landmarks.points(n, 1)) / px - 0.5;
    for (std::size_t r = 0; r < spec.side; ++r)
      for (std::size_t c = 0; c < spec.side; ++c) {
        const double dr = static_cast<double>(r) - row;
        const double dc = static_cast<double>(c) - col;
        img.at(r, c) += std::exp(-(dr * dr + dc * dc) * inv2s2);
      }
  }
  return img;
}

/// Ranges of the sampled poses, in degrees and model units.
struct PoseSampling {
  double max_yaw = 90.0;
  double max_pitch = 30.0;
  double max_roll = 30.0;
  double max_translation = 0.2;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double coefficient_stddev = 0.5;
};

inline std::string sample_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", i);
  return buf;
}

inline TrainingSample make_sample(const BasisSet& basis, const MorphParams& params, const Pose& pose,
                                  double yaw, std::string id, const RasterSpec& raster = {}) {
  TrainingSample s;
  s.id = std::move(id);
  s.gt_params = params;
  s.gt_yaw = yaw;
  s.gt_landmarks = extract_landmarks(apply_pose(reconstruct_frontal(basis, params), pose), basis);
  s.observation = rasterize_landmarks(s.gt_landmarks, raster);
  return s;
}

/// n samples from one seeded stream: a dataset of n is a prefix of a dataset
/// of m > n with the same seed.
inline std::vector<TrainingSample> generate_dataset(const BasisSet& basis, std::uint64_t seed, std::size_t n,
                                                    const PoseSampling& sampling = {}) {
  if (n == 0) throw ContractError("generate_dataset: n must be at least 1");
  Rng rng(seed);
  std::vector<TrainingSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    MorphParams p;
    for (auto& v : p.shape) v = rng.normal(0.0, sampling.coefficient_stddev);
    for (auto& v : p.expr) v = rng.normal(0.0, sampling.coefficient_stddev);
    EulerAngles e;
    e.yaw = rng.uniform(-sampling.max_yaw, sampling.max_yaw);
    e.pitch = rng.uniform(-sampling.max_pitch, sampling.max_pitch);
    e.roll = rng.uniform(-sampling.max_roll, sampling.max_roll);
    Pose pose;
    pose.rotation = euler_to_rotation(e);
    for (int k = 0; k < 3; ++k) pose.translation(k) = rng.uniform(-sampling.max_translation, sampling.max_translation);
    pose.scale = rng.uniform(sampling.min_scale, sampling.max_scale);
    p.pose = compose_pose(pose);
    out.push_back(make_sample(basis, p, pose, e.yaw, sample_id(i)));
  }
  return out;
}

/// Landmark-level self-consistency: stored landmarks equal the ones
/// rebuilt from the stored coefficients. Returns the max deviation.
inline double self_consistency_error(const BasisSet& basis, const TrainingSample& s) {
  const PointSet rebuilt =
      extract_landmarks(apply_pose(reconstruct_frontal(basis, s.gt_params), decompose_pose(s.gt_params.pose)), basis);
  if (rebuilt.size() != s.gt_landmarks.size()) return INFINITY;
  return (rebuilt.points - s.gt_landmarks.points).cwiseAbs().maxCoeff();
}

}  // namespace facegeo
