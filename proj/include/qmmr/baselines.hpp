// Copyright 2026 The qmmr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <vector>

#include "qmmr/features.hpp"

namespace qmmr {

/// Fitted-Q evaluation output: per-level coefficient vectors (linear) or
/// cell-value tables (tabular) plus the final return prediction.
struct FqeSolution {
  std::vector<Vec> coefficients;  // linear: theta_h for h = 1..H (index h-1)
  std::vector<Vec> value_tables;  // tabular: Q^hat_h per cell for h = 0..H
  double j_hat = 0.0;
  bool any_unvisited = false;  // tabular: some cell value was defaulted to 0
};

/// Backward least-squares recursion through the normal equations:
///   Sigma_h theta_h = (1/n) sum_i phi_i (r_h^(i) + phi(s_{h+1}^(i), pi)^T
///   theta_{h+1}),
/// with theta_{H+1} = 0 and the shared pseudo-inverse policy, so the
/// equivalence with the moment-matched weights isolates algorithmic identity
/// rather than numerical differences.
inline FqeSolution fqe_linear(const TrajectoryDataset& ds,
                              const FeatureMap& features, const Policy& pi) {
  const int h_max = ds.horizon();
  FqeSolution out;
  out.coefficients.assign(h_max, Vec());
  Vec theta_next;  // level h+1 coefficients; empty at the last level
  for (int h = h_max; h >= 1; --h) {
    const Mat x = feature_rows(ds, features, h);
    Vec target = ds.rewards(h);
    if (h < h_max) {
      const Mat xpi_next = feature_rows_policy(ds, features, pi, h + 1);
      target += xpi_next * theta_next;
    }
    const Mat sigma = x.transpose() * x / ds.n();
    const Vec rhs = x.transpose() * target / ds.n();
    theta_next = psd_eig(sigma).pinv() * rhs;
    out.coefficients[h - 1] = theta_next;
  }
  const Mat xpi_1 = feature_rows_policy(ds, features, pi, 1);
  out.j_hat = (xpi_1 * out.coefficients[0]).mean();
  return out;
}

/// Bellman evaluation of pi in the empirical MDP (certainty equivalence).
/// Unvisited cells keep value zero and are flagged.
inline FqeSolution fqe_tabular(const TrajectoryDataset& ds, const Policy& pi,
                               const MdpShape& shape) {
  const EmpiricalMDP emp = build_empirical_mdp(ds, shape);
  FqeSolution out;
  out.value_tables = empirical_q(emp, pi);
  // Level 0 admits only action 0; its other cells are structurally absent.
  out.any_unvisited = !emp.visited(0, 0);
  for (int h = 1; h <= emp.horizon(); ++h) {
    for (int c = 0; c < emp.shape.num_cells(h); ++c) {
      if (!emp.visited(h, c)) out.any_unvisited = true;
    }
  }
  out.j_hat = out.value_tables[0][0];
  return out;
}

/// Plain per-trajectory importance sampling with step-wise cumulative
/// ratios: J^hat = sum_h (1/n) sum_i rho_{0:h}^(i) r_h^(i), where rho
/// multiplies pi(a_t|s_t) / pi_b(a_t|s_t) over t <= h. The fixed initial
/// action contributes ratio 1.
inline double importance_sampling(const TrajectoryDataset& ds,
                                  const Policy& pi, const Policy& pi_b) {
  require(pi.levels() == ds.horizon() + 1 &&
              pi_b.levels() == ds.horizon() + 1,
          "policy levels do not match dataset");
  const int h_max = ds.horizon();
  Vec rho = Vec::Ones(ds.n());
  double j_hat = 0.0;
  for (int h = 1; h <= h_max; ++h) {
    for (int i = 0; i < ds.n(); ++i) {
      const int s = ds.state(h, i);
      const int a = ds.action(h, i);
      const double pb = pi_b.prob(h, s, a);
      require(pb > 0.0,
              "behavior policy assigns zero probability to an observed action");
      rho[i] *= pi.prob(h, s, a) / pb;
    }
    j_hat += rho.dot(ds.rewards(h)) / ds.n();
  }
  return j_hat;
}

}  // namespace qmmr
