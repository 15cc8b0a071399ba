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
#include <utility>
#include <vector>

#include "qmmr/diagnostics.hpp"

namespace qmmr {

enum class FixtureKind { random_tabular, linear_complete, misspecified_linear };

inline FixtureKind fixture_kind_from_string(const std::string& s) {
  if (s == "random_tabular") return FixtureKind::random_tabular;
  if (s == "linear_complete") return FixtureKind::linear_complete;
  if (s == "misspecified_linear") return FixtureKind::misspecified_linear;
  throw ValidationError("unknown fixture kind: " + s);
}

inline std::string to_string(FixtureKind k) {
  switch (k) {
    case FixtureKind::random_tabular: return "random_tabular";
    case FixtureKind::linear_complete: return "linear_complete";
    case FixtureKind::misspecified_linear: return "misspecified_linear";
  }
  return "random_tabular";
}

/// Per-level sizes for generated fixtures. states_per_level covers levels
/// 1..H (level 0 always holds the single dummy state). feature_dim is the
/// linear dimension d; one-hot fixtures ignore it.
struct GeneratorShape {
  std::vector<int> states_per_level;
  int num_actions = 2;
  int feature_dim = 3;
  double r_max = 1.0;
  RewardNoise noise{RewardNoise::Kind::truncated_gaussian, 0.15};

  int horizon() const { return static_cast<int>(states_per_level.size()); }
};

struct GeneratedFixture {
  LayeredMDP mdp;
  FeatureMap features;
};

namespace detail {

inline Vec dirichlet_row(SplitMix64& rng, int dim) {
  Vec row(dim);
  double total = 0.0;
  for (int i = 0; i < dim; ++i) {
    // Gamma(1) draws; adding a floor keeps rows comfortably interior.
    row[i] = 0.05 - std::log(1.0 - rng.next_double());
    total += row[i];
  }
  return row / total;
}

inline Mat dirichlet_matrix(SplitMix64& rng, int rows, int cols) {
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r) m.row(r) = dirichlet_row(rng, cols).transpose();
  return m;
}

/// Mean rewards in [0.2, 0.8] r_max so symmetric reward noise has room.
inline double interior_reward(SplitMix64& rng, double r_max) {
  return r_max * (0.2 + 0.6 * rng.next_double());
}

inline Vec realizability_residuals(const LayeredMDP& mdp, const Policy& pi,
                                   const FeatureMap& features) {
  const QTable q = exact_q(mdp, pi);
  Vec out = Vec::Zero(mdp.horizon() + 1);
  for (int h = 1; h <= mdp.horizon(); ++h) {
    const Mat& phi = features.matrix(h);
    const Vec theta = pinv_psd(phi.transpose() * phi) *
                      (phi.transpose() * q.levels[h]);
    out[h] = (q.levels[h] - phi * theta).norm() /
             std::max(q.levels[h].norm(), 1e-12);
  }
  return out;
}

}  // namespace detail

/// Uniform over actions at every level (level 0 keeps the forced action 0).
inline Policy make_uniform_policy(const MdpShape& shape) {
  std::vector<Mat> levels;
  levels.push_back(Mat::Zero(1, shape.num_actions));
  levels[0](0, 0) = 1.0;
  for (int h = 1; h <= shape.horizon(); ++h) {
    levels.push_back(Mat::Constant(shape.states_per_level[h],
                                   shape.num_actions,
                                   1.0 / shape.num_actions));
  }
  return Policy(std::move(levels));
}

/// Softmax of seeded random scores with the given temperature; small
/// temperatures concentrate the policy, large ones approach uniform.
inline Policy make_softmax_policy(const MdpShape& shape, double temperature,
                                  std::uint64_t seed) {
  require(temperature > 0.0, "softmax temperature must be positive");
  SplitMix64 rng = SplitMix64::substream(seed, 0x50f7);
  std::vector<Mat> levels;
  levels.push_back(Mat::Zero(1, shape.num_actions));
  levels[0](0, 0) = 1.0;
  for (int h = 1; h <= shape.horizon(); ++h) {
    Mat p(shape.states_per_level[h], shape.num_actions);
    for (int s = 0; s < p.rows(); ++s) {
      double total = 0.0;
      for (int a = 0; a < p.cols(); ++a) {
        p(s, a) = std::exp(rng.next_double() / temperature);
        total += p(s, a);
      }
      p.row(s) /= total;
    }
    levels.push_back(std::move(p));
  }
  return Policy(std::move(levels));
}

/// The behavior / target pair whose feature-system gap the misspecified
/// generator certifies: a sharp fixed-seed softmax behavior against the
/// uniform target. Tests that rely on the certified gap should use exactly
/// this pair.
struct ProbePolicies {
  Policy behavior;
  Policy target;
};

inline ProbePolicies misspecified_probe_policies(const MdpShape& shape) {
  return ProbePolicies{make_softmax_policy(shape, 0.3, 0x9ea1),
                       make_uniform_policy(shape)};
}

/// (1 - epsilon) base + epsilon uniform at levels >= 1.
inline Policy make_epsilon_mix(const Policy& base, double epsilon) {
  require(epsilon >= 0.0 && epsilon <= 1.0, "epsilon must lie in [0, 1]");
  std::vector<Mat> levels;
  levels.push_back(base.level(0));
  for (int h = 1; h < base.levels(); ++h) {
    const Mat& b = base.level(h);
    levels.push_back((1.0 - epsilon) * b +
                     Mat::Constant(b.rows(), b.cols(), epsilon / b.cols()));
  }
  return Policy(std::move(levels));
}

namespace detail {

inline GeneratedFixture generate_random_tabular(const GeneratorShape& shape,
                                                std::uint64_t seed) {
  SplitMix64 rng = SplitMix64::substream(seed, 0x7ab);
  const int h_max = shape.horizon();
  std::vector<int> sizes{1};
  for (int m : shape.states_per_level) sizes.push_back(m);
  std::vector<Mat> transitions;
  std::vector<Vec> rewards;
  rewards.push_back(Vec::Zero(shape.num_actions));
  for (int h = 0; h <= h_max; ++h) {
    const int cells = sizes[h] * shape.num_actions;
    if (h < h_max) {
      Mat p(cells, sizes[h + 1]);
      if (h == 0) {
        // One admissible action at the root; replicate its row.
        const Vec row = dirichlet_row(rng, sizes[1]);
        for (int c = 0; c < cells; ++c) p.row(c) = row.transpose();
      } else {
        p = dirichlet_matrix(rng, cells, sizes[h + 1]);
      }
      transitions.push_back(std::move(p));
    }
    if (h > 0) {
      Vec r(cells);
      for (int c = 0; c < cells; ++c) r[c] = interior_reward(rng, shape.r_max);
      rewards.push_back(std::move(r));
    }
  }
  LayeredMDP mdp(sizes, shape.num_actions, std::move(transitions),
                 std::move(rewards), shape.r_max, shape.noise);
  return GeneratedFixture{mdp, one_hot_features(shape_of(mdp))};
}

/// Low-rank construction: cell features are points of the d-simplex and
/// next-state rows factor through d latent columns, so both the reward and
/// the backed-up features stay inside span(phi) for every policy.
inline GeneratedFixture generate_linear_complete(const GeneratorShape& shape,
                                                 std::uint64_t seed) {
  const int d = shape.feature_dim;
  require(d >= 1, "feature_dim must be positive");
  SplitMix64 rng = SplitMix64::substream(seed, 0x11c);
  const int h_max = shape.horizon();
  std::vector<int> sizes{1};
  for (int m : shape.states_per_level) {
    require(m * shape.num_actions >= d,
            "infeasible shape: feature_dim exceeds cells at some level");
    sizes.push_back(m);
  }
  std::vector<Mat> phi_levels;
  for (int h = 1; h <= h_max; ++h) {
    phi_levels.push_back(dirichlet_matrix(rng, sizes[h] * shape.num_actions, d));
  }
  std::vector<Mat> transitions;
  std::vector<Vec> rewards;
  rewards.push_back(Vec::Zero(shape.num_actions));
  {
    Mat p0(shape.num_actions, sizes[1]);
    const Vec row = dirichlet_row(rng, sizes[1]);
    for (int c = 0; c < shape.num_actions; ++c) p0.row(c) = row.transpose();
    transitions.push_back(std::move(p0));
  }
  for (int h = 1; h <= h_max; ++h) {
    if (h < h_max) {
      const Mat latent_next = dirichlet_matrix(rng, d, sizes[h + 1]);
      transitions.push_back(phi_levels[h - 1] * latent_next);
    }
    Vec theta_r(d);
    for (int j = 0; j < d; ++j) theta_r[j] = interior_reward(rng, shape.r_max);
    rewards.push_back(phi_levels[h - 1] * theta_r);
  }
  LayeredMDP mdp(sizes, shape.num_actions, std::move(transitions),
                 std::move(rewards), shape.r_max, shape.noise);
  FeatureMap features(shape_of(mdp), std::move(phi_levels));
  return GeneratedFixture{std::move(mdp), std::move(features)};
}

/// Perturbs a linear-complete fixture so the class is no longer closed under
/// the Bellman operator, then restores realizability for the uniform target
/// policy by appending Q^pi itself as the last feature coordinate.
inline GeneratedFixture generate_misspecified_linear(
    const GeneratorShape& shape, std::uint64_t seed) {
  require(shape.feature_dim >= 2,
          "misspecified_linear needs feature_dim >= 2 (one slot is Q^pi)");
  require(shape.horizon() >= 2,
          "misspecified_linear needs horizon >= 2: at level 1 the projected "
          "system and the target feature occupancy agree identically");
  GeneratorShape base_shape = shape;
  base_shape.feature_dim = shape.feature_dim - 1;
  GeneratedFixture base = generate_linear_complete(base_shape, seed);
  SplitMix64 rng = SplitMix64::substream(seed, 0x315);
  const LayeredMDP& m0 = base.mdp;
  const int h_max = m0.horizon();

  std::vector<int> sizes;
  for (int h = 0; h <= h_max; ++h) sizes.push_back(m0.num_states(h));
  std::vector<Mat> transitions;
  std::vector<Vec> rewards;
  for (int h = 0; h <= h_max; ++h) rewards.push_back(m0.reward_mean(h));
  for (int h = 0; h < h_max; ++h) {
    Mat p = m0.transitions(h);
    if (h >= 1) {
      const double mix = 0.75;
      p = (1.0 - mix) * p +
          mix * dirichlet_matrix(rng, static_cast<int>(p.rows()),
                                 static_cast<int>(p.cols()));
    }
    transitions.push_back(std::move(p));
  }
  LayeredMDP mdp(sizes, m0.num_actions(), std::move(transitions),
                 std::move(rewards), m0.r_max(), m0.noise());

  const Policy uniform = make_uniform_policy(shape_of(mdp));
  const QTable q = exact_q(mdp, uniform);
  std::vector<Mat> phi_levels;
  for (int h = 1; h <= h_max; ++h) {
    const Mat& old_phi = base.features.matrix(h);
    Mat widened(old_phi.rows(), old_phi.cols() + 1);
    widened.leftCols(old_phi.cols()) = old_phi;
    // Append the out-of-span part of Q^pi rather than Q^pi itself: the span
    // (and hence realizability) is identical, but the columns stay well
    // conditioned. Levels where Q^pi is already representable get a zero
    // column, which the pseudo-inverse machinery treats as rank deficiency.
    Vec residual = q.levels[h] -
                   old_phi * (pinv_psd(old_phi.transpose() * old_phi) *
                              (old_phi.transpose() * q.levels[h]));
    if (residual.norm() > 1e-8) residual /= residual.norm();
    widened.col(old_phi.cols()) = residual;
    phi_levels.push_back(std::move(widened));
  }
  FeatureMap features(shape_of(mdp), std::move(phi_levels));
  return GeneratedFixture{std::move(mdp), std::move(features)};
}

}  // namespace detail

/// Deterministic fixture factory. Post-conditions are enforced here so tests
/// downstream can rely on them: linear_complete fixtures have completeness
/// residual <= 1e-10, misspecified ones exceed 1e-3 at some level while
/// keeping Q^pi (uniform target) realizable to 1e-10, and every kind keeps
/// Q^pi realizable in span(phi).
inline GeneratedFixture generate_mdp(FixtureKind kind,
                                     const GeneratorShape& shape,
                                     std::uint64_t seed) {
  require(!shape.states_per_level.empty(), "shape needs at least one level");
  for (int m : shape.states_per_level) {
    require(m >= 1, "every level needs at least one state");
  }
  require(shape.num_actions >= 1, "need at least one action");

  // Draws are deterministic in (seed, attempt); the rare degenerate draw is
  // skipped and the next salted attempt used instead.
  for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
    const std::uint64_t salted = seed + 0x9e37 * attempt;
    GeneratedFixture fixture = [&] {
      switch (kind) {
        case FixtureKind::random_tabular:
          return detail::generate_random_tabular(shape, salted);
        case FixtureKind::linear_complete:
          return detail::generate_linear_complete(shape, salted);
        case FixtureKind::misspecified_linear:
          return detail::generate_misspecified_linear(shape, salted);
      }
      throw ValidationError("unknown fixture kind");
    }();

    const Policy uniform = make_uniform_policy(shape_of(fixture.mdp));
    const Vec realizability = detail::realizability_residuals(
        fixture.mdp, uniform, fixture.features);
    if (realizability.maxCoeff() > 1e-10) continue;
    double worst_completeness = 0.0;
    for (int h = 1; h <= fixture.mdp.horizon(); ++h) {
      worst_completeness = std::max(
          worst_completeness,
          check_completeness(fixture.mdp, uniform, fixture.features, h));
    }
    if (kind == FixtureKind::misspecified_linear) {
      if (worst_completeness <= 1e-3) continue;
      // The projected feature system must visibly depart from the target's
      // feature occupancy for the certified probe pair. Level 1 agrees
      // identically (the level-1 state marginal does not depend on the
      // policies), so this needs H >= 2.
      const ProbePolicies probe =
          misspecified_probe_policies(shape_of(fixture.mdp));
      const PopulationDiagnostics diag = compute_feature_dynamics(
          fixture.mdp, probe.target, probe.behavior, fixture.features);
      double psi_gap = 0.0;
      for (int h = 2; h <= fixture.mdp.horizon(); ++h) {
        const Vec dpi_phi = fixture.features.matrix(h).transpose() *
                            diag.d_target.levels[h];
        psi_gap = std::max(psi_gap, (diag.psi[h] - dpi_phi).norm());
      }
      if (psi_gap <= 1e-3) continue;
    } else {
      if (worst_completeness > 1e-10) continue;
    }
    return fixture;
  }
  throw ValidationError(
      "generator post-checks failed on every attempt for this seed/shape");
}

}  // namespace qmmr
