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

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "facegeo/random.hpp"
#include "facegeo/tensor.hpp"

namespace facegeo::testing {

/// Relative error with a floor so that gradients which are zero up to
/// rounding do not blow the ratio up.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(rows, cols);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

/// Scalar read-out of an arbitrary tensor: <y, w> for a fixed random w.
inline ad::Var project(ad::Var y, std::uint64_t seed) {
  ad::Graph& g = *y.graph;
  const std::size_t n = g.value(y).size();
  Rng rng(seed);
  return ad::matmul(ad::reshape(y, 1, n), g.constant(random_tensor(rng, n, 1), "probe"));
}

/// Central differences of `loss` with respect to the entries of `param`
/// listed in `which` (all entries when empty), compared against the analytic
/// gradient left in param.grad by `analytic`. Each entry is scored by its
/// best agreement over the step sizes: a wrong derivative disagrees at every
/// step, while a relu/max-pool kink inside one step or cancellation at a tiny
/// one does not. Returns the worst entry score.
inline double fd_check(Tensor& param, const std::function<double()>& loss, const std::function<void()>& analytic,
                       std::vector<std::size_t> which = {}, const std::vector<double>& steps = {1e-4, 1e-5, 1e-6}) {
  param.requires_grad = true;
  param.zero_grad();
  analytic();
  const std::vector<double> grad = param.grad;
  if (which.empty())
    for (std::size_t i = 0; i < param.size(); ++i) which.push_back(i);
  double worst = 0.0;
  for (std::size_t i : which) {
    const double keep = param.data[i];
    double best = INFINITY;
    for (double h : steps) {
      param.data[i] = keep + h;
      const double up = loss();
      param.data[i] = keep - h;
      const double down = loss();
      param.data[i] = keep;
      best = std::min(best, rel_error(grad[i], (up - down) / (2.0 * h)));
    }
    worst = std::max(worst, best);
  }
  return worst;
}

/// Up to `count` distinct indices in [0, n), seeded.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next() % i]);
  idx.resize(std::min(n, count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() /
            ("facegeo_" + name + "_" + std::to_string(static_cast<unsigned long long>(::getpid())));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

}  // namespace facegeo::testing
