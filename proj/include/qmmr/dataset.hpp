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

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "qmmr/mdp.hpp"
#include "qmmr/rng.hpp"

namespace qmmr {

/// Level sizes and action count, enough to shape empirical tables.
struct MdpShape {
  std::vector<int> states_per_level;
  int num_actions = 0;

  int horizon() const { return static_cast<int>(states_per_level.size()) - 1; }
  int num_cells(int level) const {
    return states_per_level.at(level) * num_actions;
  }
};

inline MdpShape shape_of(const LayeredMDP& mdp) {
  MdpShape s;
  s.num_actions = mdp.num_actions();
  for (int h = 0; h <= mdp.horizon(); ++h) {
    s.states_per_level.push_back(mdp.num_states(h));
  }
  return s;
}

/// Where a dataset came from; serialized in the file header so downstream
/// runs can detect mismatched fixtures.
struct Provenance {
  std::uint64_t mdp_hash = 0;
  std::uint64_t behavior_hash = 0;
  std::uint64_t seed = 0;
};

/// n i.i.d. trajectories in columnar per-level layout, so the level-h slice
/// used by the per-level solvers is a contiguous view. States are stored as
/// local (within-level) indices; the shape converts to global ids for I/O.
/// Immutable after construction.
class TrajectoryDataset {
 public:
  TrajectoryDataset(MdpShape shape, int n)
      : shape_(std::move(shape)), n_(n) {
    require(n_ >= 1, "dataset needs at least one trajectory");
    const int levels = shape_.horizon() + 1;
    states_.assign(levels, std::vector<int>(n_, 0));
    actions_.assign(levels, std::vector<int>(n_, 0));
    rewards_.assign(levels, Vec::Zero(n_));
  }

  int n() const { return n_; }
  int horizon() const { return shape_.horizon(); }
  const MdpShape& shape() const { return shape_; }
  Provenance& provenance() { return provenance_; }
  const Provenance& provenance() const { return provenance_; }

  int state(int level, int i) const { return states_.at(level)[i]; }
  int action(int level, int i) const { return actions_.at(level)[i]; }
  double reward(int level, int i) const { return rewards_.at(level)[i]; }
  const Vec& rewards(int level) const { return rewards_.at(level); }

  int cell(int level, int i) const {
    return state(level, i) * shape_.num_actions + action(level, i);
  }

  void set_step(int level, int i, int local_state, int action, double reward) {
    require(local_state >= 0 && local_state < shape_.states_per_level[level],
            "state id out of range for its level");
    require(action >= 0 && action < shape_.num_actions, "action out of range");
    require(level > 0 || reward == 0.0, "level-0 reward must be zero");
    states_[level][i] = local_state;
    actions_[level][i] = action;
    rewards_[level][i] = reward;
  }

  /// Frequencies are invariant under duplication; concatenation is used by
  /// tests and by dataset merging in the harness.
  static TrajectoryDataset concat(const TrajectoryDataset& a,
                                  const TrajectoryDataset& b) {
    require(a.horizon() == b.horizon() &&
                a.shape_.num_actions == b.shape_.num_actions,
            "cannot concatenate datasets with different shapes");
    TrajectoryDataset out(a.shape_, a.n_ + b.n_);
    out.provenance_ = a.provenance_;
    for (int h = 0; h <= a.horizon(); ++h) {
      for (int i = 0; i < a.n_; ++i) {
        out.set_step(h, i, a.state(h, i), a.action(h, i), a.reward(h, i));
      }
      for (int i = 0; i < b.n_; ++i) {
        out.set_step(h, a.n_ + i, b.state(h, i), b.action(h, i),
                     b.reward(h, i));
      }
    }
    return out;
  }

 private:
  MdpShape shape_;
  int n_;
  std::vector<std::vector<int>> states_;
  std::vector<std::vector<int>> actions_;
  std::vector<Vec> rewards_;
  Provenance provenance_;
};

namespace detail {

inline double draw_reward(const LayeredMDP& mdp, int level, int cell,
                          SplitMix64& rng) {
  const double mean = mdp.reward_mean(level)[cell];
  switch (mdp.noise().kind) {
    case RewardNoise::Kind::none:
      return mean;
    case RewardNoise::Kind::bernoulli:
      return rng.next_bernoulli(mean / mdp.r_max()) ? mdp.r_max() : 0.0;
    case RewardNoise::Kind::truncated_gaussian: {
      const double half_width = std::min(mean, mdp.r_max() - mean);
      if (half_width <= 0.0 || mdp.noise().sigma <= 0.0) return mean;
      for (int attempt = 0; attempt < 4096; ++attempt) {
        const double eps = mdp.noise().sigma * rng.next_normal();
        if (std::abs(eps) <= half_width) return mean + eps;
      }
      return mean;  // acceptance region vanishingly small
    }
  }
  return mean;
}

}  // namespace detail

/// Draws n i.i.d. trajectories under the behavior policy. Each trajectory
/// uses the substream (seed, trajectory index), so sampling is reproducible
/// and embarrassingly parallel over i.
inline TrajectoryDataset sample_trajectories(const LayeredMDP& mdp,
                                             const Policy& behavior, int n,
                                             std::uint64_t seed) {
  behavior.check_compatible(mdp);
  require(n >= 1, "need n >= 1 trajectories");
  const int h_max = mdp.horizon();
  const int num_actions = mdp.num_actions();
  TrajectoryDataset ds(shape_of(mdp), n);
  ds.provenance().seed = seed;
  for (int i = 0; i < n; ++i) {
    SplitMix64 rng = SplitMix64::substream(seed, static_cast<std::uint64_t>(i));
    int s = 0, a = 0;
    ds.set_step(0, i, s, a, 0.0);
    for (int h = 1; h <= h_max; ++h) {
      const Mat& p = mdp.transitions(h - 1);
      const int prev_cell = s * num_actions + a;
      std::vector<double> row(p.cols());
      for (Eigen::Index c = 0; c < p.cols(); ++c) row[c] = p(prev_cell, c);
      s = rng.next_categorical(row);
      const Mat& pi_h = behavior.level(h);
      std::vector<double> arow(num_actions);
      for (int c = 0; c < num_actions; ++c) arow[c] = pi_h(s, c);
      a = rng.next_categorical(arow);
      const double r =
          detail::draw_reward(mdp, h, s * num_actions + a, rng);
      ds.set_step(h, i, s, a, r);
    }
  }
  return ds;
}

/// (1/n) sum_i g(s_h^(i), a_h^(i)): the shared kernel behind every empirical
/// moment in the per-level solvers.
inline double empirical_expectation(
    const TrajectoryDataset& ds, int level,
    const std::function<double(int local_state, int action)>& g) {
  double acc = 0.0;
  for (int i = 0; i < ds.n(); ++i) {
    acc += g(ds.state(level, i), ds.action(level, i));
  }
  return acc / ds.n();
}

/// Counts, empirical rewards/transitions and marginals. Unvisited cells are
/// a reported condition, not an error: their reward and transition rows are
/// undefined and flagged through visited().
struct EmpiricalMDP {
  MdpShape shape;
  std::vector<Vec> visit_counts;  // N_h(s,a) per cell
  std::vector<Vec> reward_hat;    // r^hat, zero where unvisited
  std::vector<Mat> trans_hat;     // P^hat rows, zero rows where unvisited
  std::vector<Vec> d_hat;         // empirical marginal of (s_h, a_h)

  bool visited(int level, int cell) const {
    return visit_counts.at(level)[cell] > 0.0;
  }
  int horizon() const { return shape.horizon(); }
};

inline EmpiricalMDP build_empirical_mdp(const TrajectoryDataset& ds,
                                        const MdpShape& shape) {
  require(shape.horizon() == ds.horizon() &&
              shape.num_actions == ds.shape().num_actions,
          "shape does not match dataset");
  const int h_max = shape.horizon();
  EmpiricalMDP emp;
  emp.shape = shape;
  emp.visit_counts.resize(h_max + 1);
  emp.reward_hat.resize(h_max + 1);
  emp.trans_hat.resize(h_max);
  emp.d_hat.resize(h_max + 1);
  for (int h = 0; h <= h_max; ++h) {
    const int cells = shape.num_cells(h);
    emp.visit_counts[h] = Vec::Zero(cells);
    emp.reward_hat[h] = Vec::Zero(cells);
    emp.d_hat[h] = Vec::Zero(cells);
    if (h < h_max) {
      emp.trans_hat[h] = Mat::Zero(cells, shape.states_per_level[h + 1]);
    }
    for (int i = 0; i < ds.n(); ++i) {
      const int c = ds.cell(h, i);
      emp.visit_counts[h][c] += 1.0;
      emp.reward_hat[h][c] += ds.reward(h, i);
      if (h < h_max) emp.trans_hat[h](c, ds.state(h + 1, i)) += 1.0;
    }
    for (int c = 0; c < cells; ++c) {
      const double count = emp.visit_counts[h][c];
      emp.d_hat[h][c] = count / ds.n();
      if (count > 0.0) {
        emp.reward_hat[h][c] /= count;
        if (h < h_max) emp.trans_hat[h].row(c) /= count;
      }
    }
  }
  return emp;
}

/// Occupancy of pi inside the empirical MDP. Mass that reaches an unvisited
/// cell has no empirical transition row to continue through; it is recorded
/// per level in lost_mass and dropped from the flow.
struct EmpiricalOccupancy {
  std::vector<Vec> levels;
  Vec lost_mass;  // per level, pi-mass stranded on unvisited cells
};

inline EmpiricalOccupancy empirical_pi_occupancy(const EmpiricalMDP& emp,
                                                 const Policy& pi) {
  const int h_max = emp.horizon();
  const int num_actions = emp.shape.num_actions;
  require(pi.levels() == h_max + 1, "policy does not match empirical shape");
  EmpiricalOccupancy occ;
  occ.levels.resize(h_max + 1);
  occ.lost_mass = Vec::Zero(h_max + 1);
  occ.levels[0] = Vec::Zero(emp.shape.num_cells(0));
  occ.levels[0][0] = 1.0;
  if (!emp.visited(0, 0)) occ.lost_mass[0] = 1.0;
  for (int h = 0; h < h_max; ++h) {
    Vec carried = occ.levels[h];
    for (int c = 0; c < carried.size(); ++c) {
      if (!emp.visited(h, c)) carried[c] = 0.0;
    }
    const Vec state_mass = emp.trans_hat[h].transpose() * carried;
    Vec next = Vec::Zero(emp.shape.num_cells(h + 1));
    for (int s = 0; s < emp.shape.states_per_level[h + 1]; ++s) {
      for (int a = 0; a < num_actions; ++a) {
        next[s * num_actions + a] = state_mass[s] * pi.prob(h + 1, s, a);
      }
    }
    occ.levels[h + 1] = next;
    for (int c = 0; c < next.size(); ++c) {
      if (!emp.visited(h + 1, c)) occ.lost_mass[h + 1] += next[c];
    }
  }
  return occ;
}

/// Bellman evaluation of pi in the empirical MDP; unvisited cells get value
/// zero. Returns per-level cell values with level 0 holding the
/// certainty-equivalence estimate at the root.
inline std::vector<Vec> empirical_q(const EmpiricalMDP& emp, const Policy& pi) {
  const int h_max = emp.horizon();
  require(pi.levels() == h_max + 1, "policy does not match empirical shape");
  std::vector<Vec> q(h_max + 1);
  q[h_max] = emp.reward_hat[h_max];
  for (int c = 0; c < q[h_max].size(); ++c) {
    if (!emp.visited(h_max, c)) q[h_max][c] = 0.0;
  }
  for (int h = h_max - 1; h >= 0; --h) {
    const Vec next_v = policy_average_cells(q[h + 1], pi.level(h + 1));
    q[h] = emp.reward_hat[h] + emp.trans_hat[h] * next_v;
    for (int c = 0; c < q[h].size(); ++c) {
      if (!emp.visited(h, c)) q[h][c] = 0.0;
    }
  }
  return q;
}

}  // namespace qmmr
