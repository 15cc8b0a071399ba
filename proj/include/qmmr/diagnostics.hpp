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

#include <limits>
#include <optional>
#include <vector>

#include "qmmr/qmmr.hpp"

namespace qmmr {

/// Population-side quantities of the feature dynamical system
///   psi_1 = E_D[phi(s_1, pi)],  psi_{h+1} = B_h psi_h,
///   B_h = (Sigma^cr_h)^T Sigma_h^{-1},
/// computed by exact enumeration over the behavior occupancy d_h^D and the
/// true transition kernel. These are what the learned per-datapoint weights
/// track, and they are generally not the occupancy feature expectations of
/// the target policy.
///
/// Vectors are indexed by level h; index 0 is unused padding so that the
/// indices match the math. Owns a copy of the feature map so the struct is
/// freely movable and shareable.
struct PopulationDiagnostics {
  int horizon = 0;
  std::optional<FeatureMap> features;
  Occupancy d_behavior;               // d_h^D
  Occupancy d_target;                 // d_h^pi
  std::vector<Mat> sigma;             // h = 1..H
  std::vector<Mat> sigma_cross;       // h = 1..H-1
  std::vector<Mat> b_pi;              // h = 1..H-1, maps level h to h+1
  std::vector<Vec> psi;               // h = 1..H
  std::vector<Vec> wstar_coeffs;      // alpha_h with w*_h = phi^T alpha_h
  std::vector<bool> sigma_singular;   // level flagged when rank deficient
};

inline PopulationDiagnostics compute_feature_dynamics(const LayeredMDP& mdp,
                                                      const Policy& pi,
                                                      const Policy& pi_b,
                                                      const FeatureMap& features) {
  pi.check_compatible(mdp);
  pi_b.check_compatible(mdp);
  const int h_max = mdp.horizon();
  PopulationDiagnostics diag;
  diag.horizon = h_max;
  diag.features = features;
  diag.d_behavior = exact_occupancy(mdp, pi_b);
  diag.d_target = exact_occupancy(mdp, pi);
  diag.sigma.resize(h_max + 1);
  diag.sigma_cross.resize(h_max + 1);
  diag.b_pi.resize(h_max + 1);
  diag.psi.resize(h_max + 1);
  diag.wstar_coeffs.resize(h_max + 1);
  diag.sigma_singular.assign(h_max + 1, false);

  std::vector<PsdEig> sigma_eig(h_max + 1);
  for (int h = 1; h <= h_max; ++h) {
    const Mat& phi = features.matrix(h);
    diag.sigma[h] =
        phi.transpose() * diag.d_behavior.levels[h].asDiagonal() * phi;
    sigma_eig[h] = psd_eig(diag.sigma[h]);
    diag.sigma_singular[h] = !sigma_eig[h].full_rank();
  }
  for (int h = 1; h < h_max; ++h) {
    const Mat& phi = features.matrix(h);
    const Mat avg_next = features.policy_averaged(h + 1, pi.level(h + 1));
    diag.sigma_cross[h] = phi.transpose() *
                          diag.d_behavior.levels[h].asDiagonal() *
                          (mdp.transitions(h) * avg_next);
    diag.b_pi[h] = diag.sigma_cross[h].transpose() * sigma_eig[h].pinv();
  }

  // psi_1 integrates the level-1 state marginal of the data distribution.
  const Mat avg_1 = features.policy_averaged(1, pi.level(1));
  Vec state_marginal = Vec::Zero(mdp.num_states(1));
  for (int s = 0; s < mdp.num_states(1); ++s) {
    for (int a = 0; a < mdp.num_actions(); ++a) {
      state_marginal[s] +=
          diag.d_behavior.levels[1][s * mdp.num_actions() + a];
    }
  }
  diag.psi[1] = avg_1.transpose() * state_marginal;
  for (int h = 1; h < h_max; ++h) {
    diag.psi[h + 1] = diag.b_pi[h] * diag.psi[h];
  }
  for (int h = 1; h <= h_max; ++h) {
    diag.wstar_coeffs[h] = sigma_eig[h].pinv() * diag.psi[h];
  }
  return diag;
}

/// w*_h evaluated on every cell of its level: w*_h(s,a) = phi(s,a)^T
/// Sigma_h^{-1} psi_h.
inline Vec population_weights_linear(const PopulationDiagnostics& diag,
                                     int level) {
  require(level >= 1 && level <= diag.horizon, "level out of range");
  return diag.features->matrix(level) * diag.wstar_coeffs[level];
}

struct CoverageNorms {
  double psi_norm = 0.0;      // ||psi_h||_{Sigma_h^{-1}}
  double dpi_norm = 0.0;      // ||E_{d_h^pi}[phi]||_{Sigma_h^{-1}}
  double wstar_norm = 0.0;    // ||w*_h||_{2, d_h^D}, by direct quadrature
};

/// The first and third entries agree identically (representer identity); the
/// second coincides with the first only under Bellman completeness.
inline std::vector<CoverageNorms> coverage_norms(
    const PopulationDiagnostics& diag) {
  std::vector<CoverageNorms> out(diag.horizon + 1);
  for (int h = 1; h <= diag.horizon; ++h) {
    const PsdEig eig = psd_eig(diag.sigma[h]);
    CoverageNorms& c = out[h];
    c.psi_norm = pinv_quadratic_norm(eig, diag.psi[h]);
    const Mat& phi = diag.features->matrix(h);
    const Vec dpi_phi = phi.transpose() * diag.d_target.levels[h];
    c.dpi_norm = pinv_quadratic_norm(eig, dpi_phi);
    const Vec wstar = phi * diag.wstar_coeffs[h];
    double acc = 0.0;
    for (int cell = 0; cell < wstar.size(); ++cell) {
      acc += diag.d_behavior.levels[h][cell] * wstar[cell] * wstar[cell];
    }
    c.wstar_norm = std::sqrt(acc);
  }
  return out;
}

/// Generalized leverage kappa_h = sup_{s,a} phi^T Sigma_h^{-1} phi. Returns
/// +infinity when some feature direction escapes the range of Sigma_h, which
/// is exactly when the bounded-leverage condition fails.
inline double leverage_constant(const LayeredMDP& mdp, const Policy& pi_b,
                                const FeatureMap& features, int level) {
  const Occupancy d_b = exact_occupancy(mdp, pi_b);
  const Mat& phi = features.matrix(level);
  const Mat sigma =
      phi.transpose() * d_b.levels[level].asDiagonal() * phi;
  const PsdEig eig = psd_eig(sigma);
  const Mat projector = eig.range_projector();
  const Mat pinv = eig.pinv();
  double kappa = 0.0;
  for (int cell = 0; cell < phi.rows(); ++cell) {
    const Vec f = phi.row(cell).transpose();
    const double fnorm = f.norm();
    if (fnorm == 0.0) continue;
    const double out_of_range = (f - projector * f).norm();
    if (out_of_range > 1e-9 * fnorm) {
      return std::numeric_limits<double>::infinity();
    }
    kappa = std::max(kappa, f.dot(pinv * f));
  }
  return kappa;
}

/// Linear-algebra upper bound on the multi-step stability constant:
///   rho_{t:h} <= sup_{s_t,a_t} || Sigma_h^{-1/2} B_{h-1} ... B_t
///   phi(s_t,a_t) ||_2,
/// with the convention rho_{h:h} = 1.
inline double rho_upper_bound(const PopulationDiagnostics& diag, int t, int h) {
  require(1 <= t && t <= h && h <= diag.horizon, "need 1 <= t <= h <= H");
  if (t == h) return 1.0;
  Mat product = diag.b_pi[t];
  for (int j = t + 1; j < h; ++j) product = diag.b_pi[j] * product;
  const Mat inv_sqrt = psd_eig(diag.sigma[h]).inv_sqrt();
  const Mat& phi_t = diag.features->matrix(t);
  double best = 0.0;
  for (int cell = 0; cell < phi_t.rows(); ++cell) {
    const Vec v = inv_sqrt * (product * phi_t.row(cell).transpose());
    best = std::max(best, v.norm());
  }
  return best;
}

/// Exact infinity-operator norm of a composed backup operator given its
/// matrix on cell values: sup over ||f||_inf <= 1 is attained by aligning f
/// with the signs of each row, i.e. the max row l1 norm.
inline double rho_from_operator_matrix(const Mat& op) {
  double best = 0.0;
  for (Eigen::Index r = 0; r < op.rows(); ++r) {
    best = std::max(best, op.row(r).cwiseAbs().sum());
  }
  return best;
}

/// Exact rho_{t:h} for the tabular class under full data support, where the
/// projected backups reduce to conditional expectations: the operator matrix
/// is the product of the (P_j * pi_{j+1}) cell-transition blocks.
inline double rho_exact_tabular(const LayeredMDP& mdp, const Policy& pi,
                                const Policy& pi_b, int t, int h) {
  pi.check_compatible(mdp);
  pi_b.check_compatible(mdp);
  require(1 <= t && t <= h && h <= mdp.horizon(), "need 1 <= t <= h <= H");
  const Occupancy d_b = exact_occupancy(mdp, pi_b);
  for (int j = t; j <= h; ++j) {
    require(d_b.levels[j].minCoeff() > 0.0,
            "rho_exact_tabular needs full data support at levels t..h");
  }
  if (t == h) return 1.0;
  const int num_actions = mdp.num_actions();
  Mat op = Mat::Identity(mdp.num_cells(t), mdp.num_cells(t));
  for (int j = t; j < h; ++j) {
    // Cell-to-cell kernel: P_j(s'|s,a) pi(a'|s').
    Mat step(mdp.num_cells(j), mdp.num_cells(j + 1));
    for (int c = 0; c < mdp.num_cells(j); ++c) {
      for (int s2 = 0; s2 < mdp.num_states(j + 1); ++s2) {
        for (int a2 = 0; a2 < num_actions; ++a2) {
          step(c, s2 * num_actions + a2) =
              mdp.transitions(j)(c, s2) * pi.prob(j + 1, s2, a2);
        }
      }
    }
    op = op * step;
  }
  return rho_from_operator_matrix(op);
}

/// Max relative residual of projecting the backed-up basis directions of
/// level h+1 (plus the reward) onto span(phi_h), by exact enumeration over
/// cells. Zero residual at every level means the class is closed under the
/// policy's Bellman operator.
inline double check_completeness(const LayeredMDP& mdp, const Policy& pi,
                                 const FeatureMap& features, int level) {
  pi.check_compatible(mdp);
  require(level >= 1 && level <= mdp.horizon(), "level out of range");
  const Mat& phi = features.matrix(level);
  const Mat pinv_gram = pinv_psd(phi.transpose() * phi);
  const auto relative_residual = [&](const Vec& g) {
    const Vec theta = pinv_gram * (phi.transpose() * g);
    const double denom = std::max(g.norm(), 1e-12);
    return (g - phi * theta).norm() / denom;
  };
  double worst = relative_residual(mdp.reward_mean(level));
  if (level < mdp.horizon()) {
    const Mat avg_next = features.policy_averaged(level + 1, pi.level(level + 1));
    const Mat backed = mdp.transitions(level) * avg_next;  // cells x d_{h+1}
    for (Eigen::Index j = 0; j < backed.cols(); ++j) {
      const Vec g = mdp.reward_mean(level) + backed.col(j);
      worst = std::max(worst, relative_residual(g));
    }
  }
  return worst;
}

/// Per-level RMS gap between learned weights and the population weights
/// evaluated on the sample: Delta_h = || w^hat_h - w*_h|_n ||_[n].
inline Vec tracking_error(const WeightMatrix& weights,
                          const PopulationDiagnostics& diag,
                          const TrajectoryDataset& ds) {
  require(weights.horizon() == ds.horizon() && weights.n() == ds.n(),
          "weights do not match dataset");
  require(diag.horizon == ds.horizon(), "diagnostics do not match dataset");
  Vec out = Vec::Zero(ds.horizon() + 1);
  for (int h = 1; h <= ds.horizon(); ++h) {
    const Vec wstar_cells = population_weights_linear(diag, h);
    Vec gap(ds.n());
    for (int i = 0; i < ds.n(); ++i) {
      gap[i] = weights.levels[h][i] - wstar_cells[ds.cell(h, i)];
    }
    out[h] = second_moment_norm(gap);
  }
  return out;
}

/// Exact occupancy ratio d_h^pi / d_h^D from the dynamic-programming
/// oracles. Querying a pair the data distribution never visits is an error.
class MisRatio {
 public:
  MisRatio(Vec d_pi, Vec d_behavior, int num_actions)
      : d_pi_(std::move(d_pi)),
        d_behavior_(std::move(d_behavior)),
        num_actions_(num_actions) {}

  double at(int local_state, int action) const {
    const int cell = local_state * num_actions_ + action;
    require(d_behavior_[cell] > 0.0,
            "MIS ratio undefined: behavior occupancy is zero at this pair");
    return d_pi_[cell] / d_behavior_[cell];
  }

  const Vec& target_occupancy() const { return d_pi_; }
  const Vec& behavior_occupancy() const { return d_behavior_; }

 private:
  Vec d_pi_;
  Vec d_behavior_;
  int num_actions_;
};

inline MisRatio mis_ratio_exact(const LayeredMDP& mdp, const Policy& pi,
                                const Policy& pi_b, int level) {
  require(level >= 0 && level <= mdp.horizon(), "level out of range");
  const Occupancy d_pi = exact_occupancy(mdp, pi);
  const Occupancy d_b = exact_occupancy(mdp, pi_b);
  return MisRatio(d_pi.levels[level], d_b.levels[level], mdp.num_actions());
}

}  // namespace qmmr
