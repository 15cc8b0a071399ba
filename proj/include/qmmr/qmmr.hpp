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
#include <string>
#include <vector>

#include "qmmr/features.hpp"

namespace qmmr {

// ---------------------------------------------------------------------------
// Core data types
// ---------------------------------------------------------------------------

/// Learned per-datapoint weights w^hat_h^(i) for h = 0..H. Level 0 is pinned
/// to 1: the initial pair is fixed, so there is no distribution shift there.
struct WeightMatrix {
  std::vector<Vec> levels;          // levels[h] has one weight per trajectory
  std::vector<double> level_loss;   // achieved matching loss, level_loss[0] = 0

  int horizon() const { return static_cast<int>(levels.size()) - 1; }
  int n() const { return levels.empty() ? 0 : static_cast<int>(levels[0].size()); }

  /// ||w_h||_[n] = sqrt((1/n) sum_i w_h^(i)^2).
  double second_moment(int level) const {
    return second_moment_norm(levels.at(level));
  }
};

inline WeightMatrix make_unit_weights(int horizon, int n) {
  WeightMatrix w;
  w.levels.assign(horizon + 1, Vec::Ones(n));
  w.level_loss.assign(horizon + 1, 0.0);
  w.levels[0] = Vec::Ones(n);
  return w;
}

/// The reweighted-return estimate together with every ingredient of its
/// data-dependent certificate: |J^hat - J| <= sum_h loss_h + sum_h eps_h
/// with probability >= 1 - delta.
struct OpeEstimate {
  double j_hat = 0.0;
  std::vector<double> level_rewards;   // (1/n) sum_i w_h^(i) r_h^(i), h = 0..H
  std::vector<double> matching_loss;   // L^hat_h, index 0 unused (= 0)
  std::vector<double> second_moment;   // ||w_h||_[n], h = 0..H
  std::vector<double> eps_stat;        // per-level deviation terms, h = 0..H
  double bound = 0.0;
  double delta = 0.0;
  double v_max = 0.0;
  int n = 0;
};

/// Configuration of the no-regret + best-response solver over
/// W_C = { w : ||w||_[n] <= C }.
struct MinimaxConfig {
  enum class StepRule {
    polyak,      // eta_t = loss_t / ||grad_t||^2_[n]; default "auto" rule
    inv_sqrt_t,  // eta_t = eta0 / sqrt(t), the anytime no-regret schedule
    constant,    // eta_t = eta0
  };
  enum class RoleOrder { no_regret_on_w, no_regret_on_f };

  double budget = 1.0;  // C >= 0; C = 0 pins the weights at the origin
  int iterations = 1000;
  StepRule step_rule = StepRule::polyak;
  double step_size = 0.0;  // eta0; <= 0 means auto (C / G)
  RoleOrder role_order = RoleOrder::no_regret_on_w;

  void validate() const {
    require(budget >= 0.0, "minimax budget must be nonnegative");
    require(iterations >= 1, "minimax needs at least one iteration");
  }
};

/// Output of one level solve. The tabular fields stay NaN for linear runs;
/// the trace is only populated by the minimax solver.
struct LevelSolution {
  Vec weights;
  double loss = 0.0;
  double unmatched_mass = std::numeric_limits<double>::quiet_NaN();
  double cell_mismatch_max = std::numeric_limits<double>::quiet_NaN();
  Vec trace;
};

// ---------------------------------------------------------------------------
// Matching losses
// ---------------------------------------------------------------------------

/// sup over the linear ball of the moment discrepancy. Cauchy-Schwarz gives
/// the closed form radius * || mu(w_curr) - psi^hat ||_2 with
/// mu(w) = (1/n) sum_i w_i phi_i.
inline double matching_loss_linear(const TrajectoryDataset& ds,
                                   const FeatureMap& features,
                                   const Policy& pi, int level,
                                   const Vec& w_curr, const Vec& w_prev,
                                   double radius = 1.0) {
  require(w_curr.size() == ds.n() && w_prev.size() == ds.n(),
          "weights must have one entry per trajectory");
  const Mat x = feature_rows(ds, features, level);
  const Vec mu = x.transpose() * w_curr / ds.n();
  const Vec psi = target_moment(ds, features, pi, level, w_prev);
  return radius * (mu - psi).norm();
}

inline double matching_loss_linear(const TrajectoryDataset& ds,
                                   const LinearClass& cls, const Policy& pi,
                                   int level, const Vec& w_curr,
                                   const Vec& w_prev) {
  return matching_loss_linear(ds, cls.features(), pi, level, w_curr, w_prev,
                              cls.radius());
}

/// Per-cell mismatch between the w_curr-weighted empirical distribution and
/// the w_prev-propagated target at one level.
struct TabularMismatch {
  Vec per_cell;           // positive: excess weight; negative: unmatched mass
  double positive_total = 0.0;
  double negative_total = 0.0;
  double cell_max = 0.0;
};

inline TabularMismatch tabular_mismatch(const TrajectoryDataset& ds,
                                        const Policy& pi, int level,
                                        const Vec& w_curr, const Vec& w_prev) {
  require(w_curr.size() == ds.n() && w_prev.size() == ds.n(),
          "weights must have one entry per trajectory");
  const MdpShape& shape = ds.shape();
  const int num_actions = shape.num_actions;
  const int cells = shape.num_cells(level);
  Vec weighted = Vec::Zero(cells);
  Vec state_mass = Vec::Zero(shape.states_per_level[level]);
  for (int i = 0; i < ds.n(); ++i) {
    weighted[ds.cell(level, i)] += w_curr[i];
    state_mass[ds.state(level, i)] += w_prev[i];
  }
  weighted /= ds.n();
  state_mass /= ds.n();
  TabularMismatch out;
  out.per_cell = Vec::Zero(cells);
  for (int s = 0; s < shape.states_per_level[level]; ++s) {
    for (int a = 0; a < num_actions; ++a) {
      const int c = s * num_actions + a;
      const double target = pi.prob(level, s, a) * state_mass[s];
      const double m = weighted[c] - target;
      out.per_cell[c] = m;
      if (m > 0) out.positive_total += m;
      if (m < 0) out.negative_total -= m;
      out.cell_max = std::max(out.cell_max, std::abs(m));
    }
  }
  return out;
}

/// Exact sup of the moment discrepancy over the box class [0, v_max]^cells:
/// the maximizing discriminator puts v_max on the cells whose mismatch
/// shares a sign, so the value is v_max * max(sum m+, sum m-).
inline double matching_loss_tabular(const TrajectoryDataset& ds,
                                    const Policy& pi, int level,
                                    const Vec& w_curr, const Vec& w_prev,
                                    double v_max) {
  const TabularMismatch m = tabular_mismatch(ds, pi, level, w_curr, w_prev);
  return v_max * std::max(m.positive_total, m.negative_total);
}

// ---------------------------------------------------------------------------
// Per-level solvers
// ---------------------------------------------------------------------------

/// Closed-form linear solve: w_h^(i) = psi^hat_h^T Sigma^hat_h^dagger phi_i.
/// With invertible Sigma^hat this is the zero-loss, least-second-moment
/// choice; otherwise it projects psi^hat onto the range of Sigma^hat and the
/// residual radius * ||(I - Sigma Sigma^dagger) psi^hat|| remains as loss.
inline LevelSolution solve_level_linear(const TrajectoryDataset& ds,
                                        const FeatureMap& features,
                                        const Policy& pi, int level,
                                        const Vec& w_prev,
                                        double radius = 1.0) {
  require(w_prev.size() == ds.n(), "w_prev must have one entry per trajectory");
  const Mat x = feature_rows(ds, features, level);
  const Mat sigma = x.transpose() * x / ds.n();
  const Vec psi = target_moment(ds, features, pi, level, w_prev);
  const PsdEig eig = psd_eig(sigma);
  const Vec alpha = eig.pinv() * psi;
  LevelSolution out;
  out.weights = x * alpha;
  const Vec achieved = x.transpose() * out.weights / ds.n();
  out.loss = radius * (achieved - psi).norm();
  return out;
}

/// Tabular solve: constant within each cell, reproducing the pi-occupancy of
/// the empirical MDP over visited cells. Mass propagated onto cells absent
/// from the data cannot be matched; it is reported as unmatched mass and the
/// loss is the box-class sup v_max * (that mass).
inline LevelSolution solve_level_tabular(const TrajectoryDataset& ds,
                                         const Policy& pi, int level,
                                         const Vec& w_prev, double v_max) {
  require(w_prev.size() == ds.n(), "w_prev must have one entry per trajectory");
  const MdpShape& shape = ds.shape();
  const int num_actions = shape.num_actions;
  const int cells = shape.num_cells(level);
  Vec counts = Vec::Zero(cells);
  Vec state_mass = Vec::Zero(shape.states_per_level[level]);
  for (int i = 0; i < ds.n(); ++i) {
    counts[ds.cell(level, i)] += 1.0;
    state_mass[ds.state(level, i)] += w_prev[i];
  }
  state_mass /= ds.n();

  LevelSolution out;
  out.weights = Vec::Zero(ds.n());
  out.unmatched_mass = 0.0;
  out.cell_mismatch_max = 0.0;
  Vec cell_weight = Vec::Zero(cells);
  for (int s = 0; s < shape.states_per_level[level]; ++s) {
    for (int a = 0; a < num_actions; ++a) {
      const int c = s * num_actions + a;
      const double target = pi.prob(level, s, a) * state_mass[s];
      if (counts[c] > 0.0) {
        cell_weight[c] = target * ds.n() / counts[c];
      } else if (target != 0.0) {
        out.unmatched_mass += target;
        out.cell_mismatch_max = std::max(out.cell_mismatch_max,
                                         std::abs(target));
      }
    }
  }
  for (int i = 0; i < ds.n(); ++i) {
    out.weights[i] = cell_weight[ds.cell(level, i)];
  }
  out.loss = v_max * out.unmatched_mass;
  return out;
}

/// No-regret + best-response solve of min_{w in W_C} sup_{f} loss(w, f) for
/// a symmetric class. The w player runs projected gradient steps in the
/// ||.||_[n] geometry against exact best responses f_t from the
/// discriminator oracle; the returned weights are the averaged iterates
/// (1/T) sum_t w_t.
///
/// Step rules: `polyak` uses the oracle's attained value, eta_t = loss_t /
/// ||f_t|_n||^2_[n], which converges fast whenever zero loss is feasible
/// inside W_C; `inv_sqrt_t` / `constant` follow the classic no-regret
/// schedule with auto scale eta0 = C / G, G = sup_f ||f|_n||_[n], and carry
/// the O(C G / sqrt(T)) average-loss guarantee.
///
/// With role_order = no_regret_on_f the players swap: f follows projected
/// gradient ascent over the coefficient ball and w plays the closed-form
/// best response -C f_t|_n / ||f_t|_n||_[n].
inline LevelSolution solve_level_minimax(const TrajectoryDataset& ds,
                                         const LinearClass& cls,
                                         const Policy& pi, int level,
                                         const Vec& w_prev,
                                         const MinimaxConfig& cfg) {
  cfg.validate();
  require(w_prev.size() == ds.n(), "w_prev must have one entry per trajectory");
  const LinearDiscriminatorOracle oracle(ds, cls, pi, level);
  const int n = ds.n();
  const int t_max = cfg.iterations;
  const double budget = cfg.budget;
  const Vec neg_prev = -w_prev;

  const Mat sigma =
      oracle.data_features().transpose() * oracle.data_features() / n;
  const double lambda_max = psd_eig(sigma).eigenvalues.maxCoeff();
  const double grad_bound = cls.radius() * std::sqrt(std::max(lambda_max, 0.0));
  const double eta0 = cfg.step_size > 0.0
                          ? cfg.step_size
                          : (grad_bound > 0.0 ? budget / grad_bound : 0.0);

  Vec w = Vec::Zero(n);
  Vec theta = Vec::Zero(cls.features().dim(level));
  Vec accumulated = Vec::Zero(n);
  LevelSolution out;
  out.trace = Vec::Zero(t_max);

  for (int t = 1; t <= t_max; ++t) {
    if (cfg.role_order == MinimaxConfig::RoleOrder::no_regret_on_w) {
      const DiscriminatorResult best = oracle.argmax(w, neg_prev);
      out.trace[t - 1] = best.value;
      const Vec grad = oracle.evaluate_on_data(best.maximizer);
      const double grad_sq = grad.squaredNorm() / n;
      double eta = 0.0;
      switch (cfg.step_rule) {
        case MinimaxConfig::StepRule::polyak:
          eta = grad_sq > 0.0 ? best.value / grad_sq : 0.0;
          break;
        case MinimaxConfig::StepRule::inv_sqrt_t:
          eta = eta0 / std::sqrt(static_cast<double>(t));
          break;
        case MinimaxConfig::StepRule::constant:
          eta = eta0;
          break;
      }
      w -= eta * grad;
    } else {
      // Gradient of the f player's reward theta^T m(w_t) is m(w_t).
      const Vec m = oracle.induced_vector(w, neg_prev);
      out.trace[t - 1] = cls.radius() * m.norm();
      double eta = eta0 / std::sqrt(static_cast<double>(t));
      if (cfg.step_rule == MinimaxConfig::StepRule::constant) eta = eta0;
      theta += eta * m;
      if (theta.norm() > cls.radius()) {
        theta *= cls.radius() / theta.norm();
      }
      const Vec f_on_data = oracle.evaluate_on_data(theta);
      const double f_norm = second_moment_norm(f_on_data);
      w = f_norm > 0.0 ? Vec(-budget * f_on_data / f_norm) : Vec::Zero(n);
    }
    const double w_norm = second_moment_norm(w);
    if (w_norm > budget) {
      w *= budget > 0.0 ? budget / w_norm : 0.0;
    }
    accumulated += w;
  }

  out.weights = accumulated / t_max;
  out.loss =
      cls.radius() * oracle.induced_vector(out.weights, neg_prev).norm();
  return out;
}

// ---------------------------------------------------------------------------
// Estimate and certificate
// ---------------------------------------------------------------------------

/// J^hat(pi) = sum_{h=1}^H (1/n) sum_i w_h^(i) r_h^(i). Level 0 contributes
/// nothing because r_0 is identically zero.
inline double estimate_return(const TrajectoryDataset& ds,
                              const WeightMatrix& weights) {
  require(weights.horizon() == ds.horizon() && weights.n() == ds.n(),
          "weight matrix does not match dataset");
  double acc = 0.0;
  for (int h = 1; h <= ds.horizon(); ++h) {
    acc += weights.levels[h].dot(ds.rewards(h)) / ds.n();
  }
  return acc;
}

/// eps_h = ||w_h||_[n] * V_max * sqrt(2 log(2(H+1)/delta) / n).
inline double eps_stat_term(double second_moment, double v_max, double delta,
                            int n, int horizon) {
  return second_moment * v_max *
         std::sqrt(2.0 * std::log(2.0 * (horizon + 1) / delta) / n);
}

/// Fills the per-level deviation terms and the total certificate
/// sum_{h>=1} L^hat_h + sum_{h>=0} eps_h for the given weights.
inline OpeEstimate error_bound(const TrajectoryDataset& ds,
                               const WeightMatrix& weights, double v_max,
                               double delta) {
  require(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
  require(v_max > 0.0, "v_max must be positive");
  const int h_max = weights.horizon();
  OpeEstimate est;
  est.delta = delta;
  est.v_max = v_max;
  est.n = weights.n();
  est.level_rewards.assign(h_max + 1, 0.0);
  est.matching_loss.assign(h_max + 1, 0.0);
  est.second_moment.assign(h_max + 1, 0.0);
  est.eps_stat.assign(h_max + 1, 0.0);
  double bound = 0.0;
  for (int h = 0; h <= h_max; ++h) {
    est.level_rewards[h] = weights.levels[h].dot(ds.rewards(h)) / ds.n();
    est.second_moment[h] = weights.second_moment(h);
    est.matching_loss[h] = h == 0 ? 0.0 : weights.level_loss[h];
    est.eps_stat[h] =
        eps_stat_term(est.second_moment[h], v_max, delta, est.n, h_max);
    bound += est.matching_loss[h] + est.eps_stat[h];
  }
  est.j_hat = estimate_return(ds, weights);
  est.bound = bound;
  return est;
}

// ---------------------------------------------------------------------------
// Full runs (level-by-level loop)
// ---------------------------------------------------------------------------

struct QmmrResult {
  WeightMatrix weights;
  OpeEstimate estimate;
  std::vector<LevelSolution> level_details;  // index h-1 for levels 1..H
};

namespace detail {

template <typename SolveLevel>
QmmrResult run_levels(const TrajectoryDataset& ds, double v_max, double delta,
                      SolveLevel&& solve) {
  const int h_max = ds.horizon();
  QmmrResult out;
  out.weights.levels.resize(h_max + 1);
  out.weights.level_loss.assign(h_max + 1, 0.0);
  out.weights.levels[0] = Vec::Ones(ds.n());
  for (int h = 1; h <= h_max; ++h) {
    LevelSolution sol = solve(h, out.weights.levels[h - 1]);
    out.weights.levels[h] = sol.weights;
    out.weights.level_loss[h] = sol.loss;
    out.level_details.push_back(std::move(sol));
  }
  out.estimate = error_bound(ds, out.weights, v_max, delta);
  return out;
}

}  // namespace detail

/// Weights only ever depend on the trajectory prefix: the level-h solve sees
/// (s_h, a_h), the previous weights and phi(s_h, pi) -- never r_h or
/// s_{h+1}. That ordering is what makes the eps_h concentration terms valid.
inline QmmrResult run_qmmr_linear(const TrajectoryDataset& ds,
                                  const FeatureMap& features, const Policy& pi,
                                  double v_max, double delta,
                                  double radius = 1.0) {
  return detail::run_levels(ds, v_max, delta, [&](int h, const Vec& w_prev) {
    return solve_level_linear(ds, features, pi, h, w_prev, radius);
  });
}

inline QmmrResult run_qmmr_tabular(const TrajectoryDataset& ds,
                                   const Policy& pi, double v_max,
                                   double delta) {
  return detail::run_levels(ds, v_max, delta, [&](int h, const Vec& w_prev) {
    return solve_level_tabular(ds, pi, h, w_prev, v_max);
  });
}

inline QmmrResult run_qmmr_minimax(const TrajectoryDataset& ds,
                                   const LinearClass& cls, const Policy& pi,
                                   double v_max, double delta,
                                   const MinimaxConfig& cfg) {
  return detail::run_levels(ds, v_max, delta, [&](int h, const Vec& w_prev) {
    return solve_level_minimax(ds, cls, pi, h, w_prev, cfg);
  });
}

}  // namespace qmmr
