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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "qmmr/qmmr.hpp"
#include "qmmr/generators.hpp"
#include "test_fixtures.hpp"

using namespace qmmr;

namespace {

struct Scenario {
  GeneratedFixture fixture;
  Policy behavior;
  Policy target;
  TrajectoryDataset data;
};

Scenario linear_scenario(std::uint64_t seed, int n, int d = 3,
                         std::vector<int> states = {4, 4}) {
  GeneratorShape shape;
  shape.states_per_level = std::move(states);
  shape.num_actions = 2;
  shape.feature_dim = d;
  GeneratedFixture fx = generate_mdp(FixtureKind::linear_complete, shape, seed);
  auto pair = test_fixtures::shifted_policies(shape_of(fx.mdp), seed + 100);
  TrajectoryDataset ds =
      sample_trajectories(fx.mdp, pair.behavior, n, seed + 7);
  return Scenario{std::move(fx), std::move(pair.behavior),
                  std::move(pair.target), std::move(ds)};
}

Scenario tabular_scenario(std::uint64_t seed, int n,
                          std::vector<int> states = {3, 3}) {
  GeneratorShape shape;
  shape.states_per_level = std::move(states);
  shape.num_actions = 2;
  GeneratedFixture fx = generate_mdp(FixtureKind::random_tabular, shape, seed);
  auto pair = test_fixtures::shifted_policies(shape_of(fx.mdp), seed + 100);
  TrajectoryDataset ds =
      sample_trajectories(fx.mdp, pair.behavior, n, seed + 7);
  return Scenario{std::move(fx), std::move(pair.behavior),
                  std::move(pair.target), std::move(ds)};
}

}  // namespace

TEST_CASE("H = 1 fixed design identities") {
  GeneratorShape shape;
  shape.states_per_level = {6};
  shape.num_actions = 2;
  shape.feature_dim = 4;
  GeneratedFixture fx = generate_mdp(FixtureKind::linear_complete, shape, 42);
  auto pair = test_fixtures::shifted_policies(shape_of(fx.mdp), 9);
  const TrajectoryDataset ds =
      sample_trajectories(fx.mdp, pair.behavior, 500, 3);

  const Mat x = feature_rows(ds, fx.features, 1);
  const Mat sigma = x.transpose() * x / ds.n();
  const Vec xbar = target_moment(ds, fx.features, pair.target, 1,
                                 Vec::Ones(ds.n()));
  REQUIRE(psd_eig(sigma).full_rank());

  const LevelSolution sol =
      solve_level_linear(ds, fx.features, pair.target, 1, Vec::Ones(ds.n()));

  SUBCASE("weights equal xbar^T Sigma^dagger phi_i exactly") {
    const Vec alpha = pinv_psd(sigma) * xbar;
    for (int i = 0; i < ds.n(); ++i) {
      CHECK(sol.weights[i] ==
            doctest::Approx(alpha.dot(x.row(i))).epsilon(1e-12));
    }
  }

  SUBCASE("zero matching loss and the Mahalanobis second moment") {
    CHECK(sol.loss <= 1e-10);
    const double mahalanobis = pinv_quadratic_norm(psd_eig(sigma), xbar);
    CHECK(second_moment_norm(sol.weights) ==
          doctest::Approx(mahalanobis).epsilon(1e-10));
  }
}

TEST_CASE("singular design: projection residual is the exact loss") {
  // Features with an unreachable direction: one cell never visited by the
  // behavior policy but reachable for the target.
  MdpShape shape{{1, 2}, 2};
  const int cells = 4;
  std::vector<Mat> transitions{[] {
    Mat t = Mat::Zero(2, 2);
    t(0, 0) = 1.0;  // behavior-reachable state 0 only via action 0 row
    t(1, 1) = 1.0;
    return t;
  }()};
  std::vector<Vec> rewards{Vec::Zero(2), Vec::Constant(cells, 0.5)};
  const LayeredMDP mdp({1, 2}, 2, transitions, rewards, 1.0);

  // Behavior picks action 0 at the root (forced) and action 0 at level 1;
  // state 1 is never reached because the root transition under action 0 is a
  // point mass on state 0.
  std::vector<Mat> b_levels{[] {
    Mat m = Mat::Zero(1, 2);
    m(0, 0) = 1.0;
    return m;
  }(), [] {
    Mat m = Mat::Zero(2, 2);
    m(0, 0) = 1.0;
    m(1, 0) = 1.0;
    return m;
  }()};
  const Policy behavior{b_levels};
  // Target spreads over both actions at level 1.
  std::vector<Mat> t_levels{b_levels[0], Mat::Constant(2, 2, 0.5)};
  const Policy target{t_levels};

  const FeatureMap features = one_hot_features(shape);
  const TrajectoryDataset ds = sample_trajectories(mdp, behavior, 64, 5);

  const Mat x = feature_rows(ds, features, 1);
  const Mat sigma = x.transpose() * x / ds.n();
  const PsdEig eig = psd_eig(sigma);
  REQUIRE(!eig.full_rank());

  const double radius = 2.5;
  const LevelSolution sol = solve_level_linear(ds, features, target, 1,
                                               Vec::Ones(ds.n()), radius);
  const Vec xbar =
      target_moment(ds, features, target, 1, Vec::Ones(ds.n()));
  const Vec residual = xbar - eig.range_projector() * xbar;
  CHECK(residual.norm() > 1e-3);  // the target genuinely leaves the range
  CHECK(sol.loss ==
        doctest::Approx(radius * residual.norm()).epsilon(1e-10));

  // Reported loss agrees with the standalone loss evaluation.
  CHECK(matching_loss_linear(ds, features, target, 1, sol.weights,
                             Vec::Ones(ds.n()), radius) ==
        doctest::Approx(sol.loss).epsilon(1e-12));
}

TEST_CASE("target moment orthogonal to the data span gives zero weights") {
  MdpShape shape{{1, 1}, 2};
  Mat phi(2, 2);
  phi << 1, 0, 0, 1;  // action 0 -> e1, action 1 -> e2
  const FeatureMap features(shape, {phi});
  TrajectoryDataset ds(shape, 8);
  for (int i = 0; i < 8; ++i) {
    ds.set_step(0, i, 0, 0, 0.0);
    ds.set_step(1, i, 0, 0, 0.25);  // only action 0 in the data
  }
  // Target always plays action 1: psi^hat = e2, orthogonal to span{e1}.
  std::vector<Mat> levels{[] {
    Mat m = Mat::Zero(1, 2);
    m(0, 0) = 1.0;
    return m;
  }(), [] {
    Mat m = Mat::Zero(1, 2);
    m(0, 1) = 1.0;
    return m;
  }()};
  const Policy target{levels};
  const double radius = 3.0;
  const LevelSolution sol = solve_level_linear(ds, features, target, 1,
                                               Vec::Ones(8), radius);
  CHECK(sol.weights.cwiseAbs().maxCoeff() <= 1e-14);
  CHECK(sol.loss == doctest::Approx(radius * 1.0).epsilon(1e-12));
}

TEST_CASE("matching loss: closed form dominates and meets aligned probes") {
  Scenario sc = linear_scenario(3, 300);
  const LinearClass cls(&sc.fixture.features, 1.7);
  SplitMix64 rng(8);
  Vec w(sc.data.n()), w_prev(sc.data.n());
  for (int i = 0; i < sc.data.n(); ++i) {
    w[i] = rng.next_normal();
    w_prev[i] = 1.0 + 0.3 * rng.next_normal();
  }
  const double closed =
      matching_loss_linear(sc.data, cls, sc.target, 1, w, w_prev);

  const Mat x = feature_rows(sc.data, sc.fixture.features, 1);
  const Vec mu = x.transpose() * w / sc.data.n();
  const Vec psi = target_moment(sc.data, sc.fixture.features, sc.target, 1,
                                w_prev);
  const Vec direction = mu - psi;

  double best_probe = 0.0;
  const int d = static_cast<int>(direction.size());
  for (int probe = 0; probe < 10000; ++probe) {
    Vec theta(d);
    for (int j = 0; j < d; ++j) theta[j] = rng.next_normal();
    theta *= cls.radius() / theta.norm();
    const double value = std::abs(theta.dot(direction));
    CHECK(value <= closed + 1e-12);
    best_probe = std::max(best_probe, value);
  }
  // The analytically aligned probe attains the sup.
  const Vec aligned = cls.radius() * direction / direction.norm();
  best_probe = std::max(best_probe, std::abs(aligned.dot(direction)));
  CHECK(best_probe == doctest::Approx(closed).epsilon(1e-10));

  SUBCASE("zero weights on both sides give zero loss") {
    CHECK(matching_loss_linear(sc.data, cls, sc.target, 1,
                               Vec::Zero(sc.data.n()),
                               Vec::Zero(sc.data.n())) == 0.0);
  }
}

TEST_CASE("tabular solve matches the empirical occupancy ratio") {
  Scenario sc = tabular_scenario(17, 4096);
  const MdpShape shape = shape_of(sc.fixture.mdp);
  const EmpiricalMDP emp = build_empirical_mdp(sc.data, shape);
  bool full = true;
  for (int h = 1; h <= sc.data.horizon(); ++h) {
    for (int c = 0; c < shape.num_cells(h); ++c) {
      if (!emp.visited(h, c)) full = false;
    }
  }
  REQUIRE(full);

  const QmmrResult res = run_qmmr_tabular(sc.data, sc.target,
                                          sc.fixture.mdp.v_max(), 0.1);
  const EmpiricalOccupancy occ = empirical_pi_occupancy(emp, sc.target);

  SUBCASE("weights equal d^pi / d^D cell-wise (independent recursion)") {
    for (int h = 1; h <= sc.data.horizon(); ++h) {
      for (int i = 0; i < sc.data.n(); ++i) {
        const int c = sc.data.cell(h, i);
        const double ratio = occ.levels[h][c] / emp.d_hat[h][c];
        CHECK(std::abs(res.weights.levels[h][i] - ratio) <= 1e-12);
      }
    }
  }

  SUBCASE("reweighted indicator means reproduce d^pi at every cell") {
    for (int h = 1; h <= sc.data.horizon(); ++h) {
      Vec weighted = Vec::Zero(shape.num_cells(h));
      for (int i = 0; i < sc.data.n(); ++i) {
        weighted[sc.data.cell(h, i)] += res.weights.levels[h][i] / sc.data.n();
      }
      CHECK((weighted - occ.levels[h]).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }

  SUBCASE("zero loss under full support") {
    for (int h = 1; h <= sc.data.horizon(); ++h) {
      CHECK(res.weights.level_loss[h] == 0.0);
    }
  }
}

TEST_CASE("one-hot linear solve equals the tabular solve cell-for-cell") {
  // Two independent derivations of the same weights: the pseudo-inverse
  // moment match with indicator features, and the occupancy-ratio
  // recursion.
  Scenario sc = tabular_scenario(41, 4096);
  const MdpShape shape = shape_of(sc.fixture.mdp);
  const EmpiricalMDP emp = build_empirical_mdp(sc.data, shape);
  for (int h = 1; h <= sc.data.horizon(); ++h) {
    REQUIRE(emp.visit_counts[h].minCoeff() > 0.0);
  }
  Vec w_prev = Vec::Ones(sc.data.n());
  Vec w_prev_tab = Vec::Ones(sc.data.n());
  for (int h = 1; h <= sc.data.horizon(); ++h) {
    const LevelSolution lin = solve_level_linear(
        sc.data, sc.fixture.features, sc.target, h, w_prev);
    const LevelSolution tab = solve_level_tabular(
        sc.data, sc.target, h, w_prev_tab, sc.fixture.mdp.v_max());
    CHECK((lin.weights - tab.weights).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(lin.loss <= 1e-10);
    w_prev = lin.weights;
    w_prev_tab = tab.weights;
  }
}

TEST_CASE("tabular solve: on-policy single path gives unit weights") {
  const LayeredMDP chain = test_fixtures::unit_chain(3);
  std::vector<Mat> delta(4, [] {
    Mat m = Mat::Zero(1, 2);
    m(0, 0) = 1.0;
    return m;
  }());
  const Policy pi{delta};
  const TrajectoryDataset ds = sample_trajectories(chain, pi, 16, 2);
  const QmmrResult res = run_qmmr_tabular(ds, pi, chain.v_max(), 0.1);
  for (int h = 0; h <= 3; ++h) {
    CHECK((res.weights.levels[h] - Vec::Ones(16)).cwiseAbs().maxCoeff() <=
          1e-14);
  }
}

TEST_CASE("tabular loss: unmatched pi-mass on a missing cell") {
  // Two states at level 1; behavior never plays action 1 in state 0.
  MdpShape shape{{1, 2}, 2};
  std::vector<Mat> transitions{Mat::Constant(2, 2, 0.5)};
  std::vector<Vec> rewards{Vec::Zero(2), Vec::Constant(4, 0.5)};
  const LayeredMDP mdp({1, 2}, 2, transitions, rewards, 1.0);
  std::vector<Mat> b_levels{[] {
    Mat m = Mat::Zero(1, 2);
    m(0, 0) = 1.0;
    return m;
  }(), [] {
    Mat m(2, 2);
    m << 1.0, 0.0, 0.5, 0.5;  // state 0: only action 0
    return m;
  }()};
  const Policy behavior{b_levels};
  std::vector<Mat> t_levels{b_levels[0], Mat::Constant(2, 2, 0.5)};
  const Policy target{t_levels};

  const TrajectoryDataset ds = sample_trajectories(mdp, behavior, 2000, 12);
  const EmpiricalMDP emp = build_empirical_mdp(ds, shape);
  REQUIRE(!emp.visited(1, 1));  // cell (state 0, action 1) absent

  const LevelSolution sol =
      solve_level_tabular(ds, target, 1, Vec::Ones(ds.n()), mdp.v_max());
  // Oracle: pi-mass of the absent cell inside the empirical MDP.
  const EmpiricalOccupancy occ = empirical_pi_occupancy(emp, target);
  CHECK(occ.lost_mass[1] == doctest::Approx(sol.unmatched_mass).epsilon(1e-12));
  CHECK(sol.unmatched_mass > 0.0);
  CHECK(sol.loss ==
        doctest::Approx(mdp.v_max() * sol.unmatched_mass).epsilon(1e-12));

  // The standalone loss evaluator agrees on the solved weights.
  CHECK(matching_loss_tabular(ds, target, 1, sol.weights, Vec::Ones(ds.n()),
                              mdp.v_max()) ==
        doctest::Approx(sol.loss).epsilon(1e-12));
}

TEST_CASE("estimate_return basics") {
  Scenario sc = tabular_scenario(29, 512);
  const int h_max = sc.data.horizon();

  SUBCASE("zero weights give zero") {
    WeightMatrix w = make_unit_weights(h_max, sc.data.n());
    for (int h = 1; h <= h_max; ++h) w.levels[h].setZero();
    CHECK(estimate_return(sc.data, w) == 0.0);
  }

  SUBCASE("unit weights give the plain empirical mean return") {
    const WeightMatrix w = make_unit_weights(h_max, sc.data.n());
    double mean = 0.0;
    for (int i = 0; i < sc.data.n(); ++i) {
      for (int h = 1; h <= h_max; ++h) mean += sc.data.reward(h, i);
    }
    mean /= sc.data.n();
    CHECK(estimate_return(sc.data, w) == doctest::Approx(mean).epsilon(1e-12));
  }

  SUBCASE("linearity in weights and rewards") {
    SplitMix64 rng(3);
    WeightMatrix a = make_unit_weights(h_max, sc.data.n());
    WeightMatrix b = make_unit_weights(h_max, sc.data.n());
    for (int h = 1; h <= h_max; ++h) {
      for (int i = 0; i < sc.data.n(); ++i) {
        a.levels[h][i] = rng.next_normal();
        b.levels[h][i] = rng.next_normal();
      }
    }
    WeightMatrix combo = a;
    for (int h = 1; h <= h_max; ++h) {
      combo.levels[h] = 2.0 * a.levels[h] + 3.0 * b.levels[h];
    }
    CHECK(estimate_return(sc.data, combo) ==
          doctest::Approx(2.0 * estimate_return(sc.data, a) +
                          3.0 * estimate_return(sc.data, b))
              .epsilon(1e-10));
  }
}

TEST_CASE("tabular estimate equals certainty equivalence under full support") {
  Scenario sc = tabular_scenario(31, 4096);
  const MdpShape shape = shape_of(sc.fixture.mdp);
  const EmpiricalMDP emp = build_empirical_mdp(sc.data, shape);
  const QmmrResult res = run_qmmr_tabular(sc.data, sc.target,
                                          sc.fixture.mdp.v_max(), 0.1);
  // Independent path: evaluate pi exactly inside the empirical MDP.
  const std::vector<Vec> q = empirical_q(emp, sc.target);
  CHECK(std::abs(res.estimate.j_hat - q[0][0]) <= 1e-10);
}

TEST_CASE("error bound fields and frozen arithmetic") {
  SUBCASE("frozen fixture value") {
    // H = 2, n = 100, V_max = 2, delta = 0.1, all second moments 1:
    // each eps term is 2 sqrt(2 log(60) / 100).
    MdpShape shape{{1, 1, 1}, 1};
    TrajectoryDataset ds(shape, 100);
    for (int i = 0; i < 100; ++i) {
      ds.set_step(0, i, 0, 0, 0.0);
      ds.set_step(1, i, 0, 0, 0.0);
      ds.set_step(2, i, 0, 0, 0.0);
    }
    const WeightMatrix w = make_unit_weights(2, 100);
    const OpeEstimate est = error_bound(ds, w, 2.0, 0.1);
    CHECK(est.eps_stat[0] ==
          doctest::Approx(0.5723177133181954).epsilon(1e-15));
    CHECK(est.bound == doctest::Approx(1.716953139954586).epsilon(1e-15));
  }

  SUBCASE("1/sqrt(n) scaling: quadrupling n halves every eps term") {
    MdpShape shape{{1, 1}, 1};
    TrajectoryDataset small(shape, 50), big(shape, 200);
    for (int i = 0; i < 50; ++i) {
      small.set_step(0, i, 0, 0, 0.0);
      small.set_step(1, i, 0, 0, 0.0);
    }
    for (int i = 0; i < 200; ++i) {
      big.set_step(0, i, 0, 0, 0.0);
      big.set_step(1, i, 0, 0, 0.0);
    }
    const OpeEstimate a = error_bound(small, make_unit_weights(1, 50), 1.0,
                                      0.05);
    const OpeEstimate b = error_bound(big, make_unit_weights(1, 200), 1.0,
                                      0.05);
    for (int h = 0; h <= 1; ++h) {
      CHECK(a.eps_stat[h] == doctest::Approx(2.0 * b.eps_stat[h])
                                 .epsilon(1e-12));
    }
  }

  SUBCASE("monotonicity in the second moments and in 1/delta") {
    Scenario sc = linear_scenario(5, 200);
    const QmmrResult res = run_qmmr_linear(sc.data, sc.fixture.features,
                                           sc.target,
                                           sc.fixture.mdp.v_max(), 0.1);
    const OpeEstimate tighter = error_bound(sc.data, res.weights,
                                            sc.fixture.mdp.v_max(), 0.2);
    CHECK(tighter.bound <= res.estimate.bound);

    WeightMatrix inflated = res.weights;
    inflated.levels[1] *= 2.0;
    const OpeEstimate bigger = error_bound(sc.data, inflated,
                                           sc.fixture.mdp.v_max(), 0.1);
    CHECK(bigger.eps_stat[1] >= res.estimate.eps_stat[1]);
  }

  SUBCASE("delta out of range is rejected") {
    Scenario sc = linear_scenario(6, 64);
    const WeightMatrix w = make_unit_weights(sc.data.horizon(), 64);
    CHECK_THROWS_AS(error_bound(sc.data, w, 1.0, 0.0), ValidationError);
    CHECK_THROWS_AS(error_bound(sc.data, w, 1.0, 1.0), ValidationError);
  }

  SUBCASE("estimate internal consistency: j_hat recomputable from levels") {
    Scenario sc = linear_scenario(7, 150);
    const QmmrResult res = run_qmmr_linear(sc.data, sc.fixture.features,
                                           sc.target,
                                           sc.fixture.mdp.v_max(), 0.1);
    double j = 0.0, bound = 0.0;
    for (std::size_t h = 0; h < res.estimate.level_rewards.size(); ++h) {
      j += res.estimate.level_rewards[h];
      bound += res.estimate.matching_loss[h] + res.estimate.eps_stat[h];
    }
    CHECK(res.estimate.j_hat == doctest::Approx(j).epsilon(1e-12));
    CHECK(res.estimate.bound == doctest::Approx(bound).epsilon(1e-12));
  }
}

TEST_CASE("telescoping identity holds for arbitrary prefix-measurable weights") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    Scenario sc = tabular_scenario(seed, 96, {4, 3, 3});
    const QTable q = exact_q(sc.fixture.mdp, sc.target);
    SplitMix64 rng(seed + 9);
    const int h_max = sc.data.horizon();
    WeightMatrix w = make_unit_weights(h_max, sc.data.n());
    for (int h = 1; h <= h_max; ++h) {
      for (int i = 0; i < sc.data.n(); ++i) {
        w.levels[h][i] = 2.0 * rng.next_normal();
      }
    }
    // sum_h (1/n) sum_i [ w_h Q_h(s_h, a_h) - w_{h+1} Q_{h+1}(s_{h+1},
    // a_{h+1}) ] with w_{H+1} = 0 and Q_{H+1} = 0.
    double telescoped = 0.0;
    for (int h = 0; h <= h_max; ++h) {
      for (int i = 0; i < sc.data.n(); ++i) {
        telescoped += w.levels[h][i] * q.levels[h][sc.data.cell(h, i)];
        if (h + 1 <= h_max) {
          telescoped -=
              w.levels[h + 1][i] * q.levels[h + 1][sc.data.cell(h + 1, i)];
        }
      }
    }
    telescoped /= sc.data.n();
    CHECK(std::abs(telescoped - q.root_value()) <= 1e-10);
  }
}

TEST_CASE("least second moment among zero-loss solutions") {
  Scenario sc = linear_scenario(12, 120);
  const Mat x = feature_rows(sc.data, sc.fixture.features, 1);
  REQUIRE(psd_eig(Mat(x.transpose() * x / sc.data.n())).full_rank());
  const LevelSolution sol = solve_level_linear(sc.data, sc.fixture.features,
                                               sc.target, 1,
                                               Vec::Ones(sc.data.n()));
  REQUIRE(sol.loss <= 1e-10);
  const double base_norm = second_moment_norm(sol.weights);

  // Null-space perturbations keep the matched moments, so they can only
  // increase the second moment.
  const Mat gram_n = x * x.transpose();
  const PsdEig eign = psd_eig(gram_n);
  SplitMix64 rng(4);
  for (int rep = 0; rep < 32; ++rep) {
    Vec z(sc.data.n());
    for (int i = 0; i < sc.data.n(); ++i) z[i] = rng.next_normal();
    // Project z onto the null space of x^T (moment-preserving directions).
    const Vec in_range = x * (pinv_psd(Mat(x.transpose() * x)) *
                              (x.transpose() * z));
    const Vec null_part = z - in_range;
    if (null_part.norm() < 1e-12) continue;
    const Vec perturbed = sol.weights + null_part;
    // Moments unchanged...
    CHECK((x.transpose() * perturbed / sc.data.n() -
           x.transpose() * sol.weights / sc.data.n())
              .cwiseAbs()
              .maxCoeff() <= 1e-10);
    // ...and the norm can only grow.
    CHECK(second_moment_norm(perturbed) >= base_norm - 1e-12);
  }
}

TEST_CASE("run_qmmr enforces consistent inputs") {
  Scenario sc = linear_scenario(15, 80);
  WeightMatrix w = make_unit_weights(sc.data.horizon() + 1, sc.data.n());
  CHECK_THROWS_AS(estimate_return(sc.data, w), ValidationError);
}
