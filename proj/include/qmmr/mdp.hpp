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

#include <string>
#include <vector>

#include "qmmr/linalg.hpp"

namespace qmmr {

/// Raised when inputs violate a documented precondition. The CLI maps this
/// to exit code 2.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

/// Reward distribution attached to each state-action cell. Draws always stay
/// inside [0, r_max] and the expectation equals the stored mean:
///  - none: deterministic mean.
///  - truncated_gaussian: mean + N(0, sigma^2) resampled until the draw lies
///    within min(mean, r_max - mean) of the mean. The symmetric window keeps
///    the expectation exact.
///  - bernoulli: r_max with probability mean / r_max, else 0.
struct RewardNoise {
  enum class Kind { none, truncated_gaussian, bernoulli };
  Kind kind = Kind::none;
  double sigma = 0.0;
};

inline std::string to_string(RewardNoise::Kind k) {
  switch (k) {
    case RewardNoise::Kind::none: return "none";
    case RewardNoise::Kind::truncated_gaussian: return "truncated_gaussian";
    case RewardNoise::Kind::bernoulli: return "bernoulli";
  }
  return "none";
}

inline RewardNoise::Kind reward_noise_kind_from_string(const std::string& s) {
  if (s == "none") return RewardNoise::Kind::none;
  if (s == "truncated_gaussian") return RewardNoise::Kind::truncated_gaussian;
  if (s == "bernoulli") return RewardNoise::Kind::bernoulli;
  throw ValidationError("unknown reward noise kind: " + s);
}

/// Finite-horizon MDP whose state space is partitioned by time step. State
/// ids are globally unique integers, contiguous within a level, so "state s
/// belongs to level h" is a structural fact rather than a runtime check.
///
/// Level 0 holds exactly one state with one admissible action (index 0) and
/// reward identically zero; a trajectory is s_0,a_0,r_0,...,s_H,a_H,r_H.
///
/// State-action cells at level h are indexed by local_state * A + action.
/// All members are immutable after construction and safe to share across
/// threads.
class LayeredMDP {
 public:
  /// transitions[h] has one row per level-h cell and one column per level-
  /// (h+1) state; rewards[h] has one entry per level-h cell.
  LayeredMDP(std::vector<int> states_per_level, int num_actions,
             std::vector<Mat> transitions, std::vector<Vec> rewards,
             double r_max, RewardNoise noise = {})
      : states_per_level_(std::move(states_per_level)),
        num_actions_(num_actions),
        transitions_(std::move(transitions)),
        rewards_(std::move(rewards)),
        r_max_(r_max),
        noise_(noise) {
    validate();
    level_offsets_.resize(states_per_level_.size() + 1, 0);
    for (std::size_t h = 0; h < states_per_level_.size(); ++h) {
      level_offsets_[h + 1] = level_offsets_[h] + states_per_level_[h];
    }
  }

  int horizon() const { return static_cast<int>(states_per_level_.size()) - 1; }
  int num_actions() const { return num_actions_; }
  int num_states(int level) const { return states_per_level_.at(level); }
  int num_cells(int level) const { return num_states(level) * num_actions_; }
  int first_state_id(int level) const { return level_offsets_.at(level); }
  double r_max() const { return r_max_; }
  double v_max() const { return r_max_ * horizon(); }
  const RewardNoise& noise() const { return noise_; }

  /// P(. | s, a) rows for level h < H, one row per cell.
  const Mat& transitions(int level) const { return transitions_.at(level); }
  /// Mean reward per cell at level h (level 0 is identically zero).
  const Vec& reward_mean(int level) const { return rewards_.at(level); }

  int cell_index(int level, int local_state, int action) const {
    return local_state * num_actions_ + action;
  }
  int global_state_id(int level, int local_state) const {
    return level_offsets_.at(level) + local_state;
  }
  int local_state(int level, int global_id) const {
    const int local = global_id - level_offsets_.at(level);
    require(local >= 0 && local < num_states(level),
            "state id does not belong to level");
    return local;
  }

 private:
  void validate() const {
    require(states_per_level_.size() >= 2, "horizon must be at least 1");
    require(states_per_level_[0] == 1, "level 0 must have exactly one state");
    require(num_actions_ >= 1, "need at least one action");
    require(r_max_ > 0.0, "r_max must be positive");
    const int levels = static_cast<int>(states_per_level_.size());
    require(static_cast<int>(rewards_.size()) == levels,
            "one reward vector per level expected");
    require(static_cast<int>(transitions_.size()) == levels - 1,
            "one transition matrix per non-terminal level expected");
    for (int h = 0; h < levels; ++h) {
      require(states_per_level_[h] >= 1, "every level needs a state");
      const int cells = states_per_level_[h] * num_actions_;
      require(rewards_[h].size() == cells, "reward vector size mismatch");
      for (int c = 0; c < cells; ++c) {
        const double r = rewards_[h][c];
        require(r >= 0.0 && r <= r_max_, "mean reward outside [0, r_max]");
        if (h == 0) require(r == 0.0, "level-0 reward must be zero");
      }
      if (h < levels - 1) {
        const Mat& p = transitions_[h];
        require(p.rows() == cells && p.cols() == states_per_level_[h + 1],
                "transition shape mismatch");
        for (int c = 0; c < cells; ++c) {
          double row_sum = 0.0;
          for (int s = 0; s < p.cols(); ++s) {
            require(p(c, s) >= 0.0, "negative transition probability");
            row_sum += p(c, s);
          }
          require(std::abs(row_sum - 1.0) <= 1e-12,
                  "transition row does not sum to 1");
        }
      }
    }
  }

  std::vector<int> states_per_level_;
  int num_actions_;
  std::vector<Mat> transitions_;
  std::vector<Vec> rewards_;
  double r_max_;
  RewardNoise noise_;
  std::vector<int> level_offsets_;
};

/// Per-level action distributions pi(a | s). Level 0 must put all mass on
/// action 0, matching the fixed dummy (s_0, a_0) pair.
class Policy {
 public:
  explicit Policy(std::vector<Mat> probs) : probs_(std::move(probs)) {
    for (std::size_t h = 0; h < probs_.size(); ++h) {
      const Mat& p = probs_[h];
      for (Eigen::Index s = 0; s < p.rows(); ++s) {
        double row_sum = 0.0;
        for (Eigen::Index a = 0; a < p.cols(); ++a) {
          require(p(s, a) >= 0.0, "negative action probability");
          row_sum += p(s, a);
        }
        require(std::abs(row_sum - 1.0) <= 1e-12,
                "policy row does not sum to 1");
      }
    }
    require(!probs_.empty() && probs_[0].rows() == 1 && probs_[0](0, 0) == 1.0,
            "level-0 policy must be a point mass on action 0");
  }

  int levels() const { return static_cast<int>(probs_.size()); }
  const Mat& level(int h) const { return probs_.at(h); }
  double prob(int h, int local_state, int action) const {
    return probs_.at(h)(local_state, action);
  }

  void check_compatible(const LayeredMDP& mdp) const {
    require(levels() == mdp.horizon() + 1,
            "policy level count does not match mdp horizon");
    for (int h = 0; h <= mdp.horizon(); ++h) {
      require(probs_[h].rows() == mdp.num_states(h) &&
                  probs_[h].cols() == mdp.num_actions(),
              "policy shape does not match mdp at level " + std::to_string(h));
    }
  }

 private:
  std::vector<Mat> probs_;
};

/// Q_h(s, a) per level; level H+1 is implicitly zero.
struct QTable {
  std::vector<Vec> levels;  // one entry per cell

  double root_value() const { return levels.at(0)[0]; }
};

/// d_h(s, a) per level; each level sums to one.
struct Occupancy {
  std::vector<Vec> levels;
};

/// Expected Q over pi's action choice, per state: sum_a pi(a|s) Q(s,a).
inline Vec policy_average_cells(const Vec& cell_values, const Mat& pi) {
  const int num_states = static_cast<int>(pi.rows());
  const int num_actions = static_cast<int>(pi.cols());
  Vec out(num_states);
  for (int s = 0; s < num_states; ++s) {
    double acc = 0.0;
    for (int a = 0; a < num_actions; ++a) {
      acc += pi(s, a) * cell_values[s * num_actions + a];
    }
    out[s] = acc;
  }
  return out;
}

/// Exact Q^pi by backward induction over levels.
inline QTable exact_q(const LayeredMDP& mdp, const Policy& pi) {
  pi.check_compatible(mdp);
  const int h_max = mdp.horizon();
  QTable q;
  q.levels.resize(h_max + 1);
  q.levels[h_max] = mdp.reward_mean(h_max);
  for (int h = h_max - 1; h >= 0; --h) {
    const Vec next_v = policy_average_cells(q.levels[h + 1], pi.level(h + 1));
    q.levels[h] = mdp.reward_mean(h) + mdp.transitions(h) * next_v;
  }
  return q;
}

/// Exact occupancy d_h^pi by forward flow from the fixed (s_0, a_0).
inline Occupancy exact_occupancy(const LayeredMDP& mdp, const Policy& pi) {
  pi.check_compatible(mdp);
  const int h_max = mdp.horizon();
  const int num_actions = mdp.num_actions();
  Occupancy d;
  d.levels.resize(h_max + 1);
  d.levels[0] = Vec::Zero(mdp.num_cells(0));
  d.levels[0][0] = 1.0;
  for (int h = 0; h < h_max; ++h) {
    const Vec state_mass = mdp.transitions(h).transpose() * d.levels[h];
    Vec next = Vec::Zero(mdp.num_cells(h + 1));
    for (int s = 0; s < mdp.num_states(h + 1); ++s) {
      for (int a = 0; a < num_actions; ++a) {
        next[s * num_actions + a] = state_mass[s] * pi.prob(h + 1, s, a);
      }
    }
    d.levels[h + 1] = next;
  }
  return d;
}

/// J(pi) = Q_0^pi(s_0, a_0).
inline double exact_return(const LayeredMDP& mdp, const Policy& pi) {
  return exact_q(mdp, pi).root_value();
}

}  // namespace qmmr
