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

GeneratedFixture small_tabular(std::uint64_t seed) {
  GeneratorShape shape;
  shape.states_per_level = {3, 4};
  shape.num_actions = 2;
  return generate_mdp(FixtureKind::random_tabular, shape, seed);
}

}  // namespace

TEST_CASE("gram matrix basics") {
  SUBCASE("single data point with phi = e_1") {
    MdpShape shape{{1, 1}, 1};
    Mat phi(1, 3);
    phi << 1, 0, 0;
    FeatureMap f(shape, {phi});
    TrajectoryDataset ds(shape, 1);
    ds.set_step(0, 0, 0, 0, 0.0);
    ds.set_step(1, 0, 0, 0, 0.0);
    const Mat sigma = gram_matrix(ds, f, 1);
    CHECK(sigma(0, 0) == 1.0);
    CHECK(sigma.cwiseAbs().sum() == 1.0);
  }

  SUBCASE("one-hot features make the gram the empirical marginal diagonal") {
    GeneratedFixture fx = small_tabular(3);
    const Policy pi = make_uniform_policy(shape_of(fx.mdp));
    const TrajectoryDataset ds = sample_trajectories(fx.mdp, pi, 400, 2);
    const EmpiricalMDP emp = build_empirical_mdp(ds, shape_of(fx.mdp));
    const Mat sigma = gram_matrix(ds, fx.features, 1);
    CHECK((sigma.diagonal() - emp.d_hat[1]).cwiseAbs().maxCoeff() <= 1e-14);
    CHECK((sigma - Mat(sigma.diagonal().asDiagonal())).cwiseAbs()
              .maxCoeff() == 0.0);
  }

  SUBCASE("PSD with trace equal to the mean squared feature norm") {
    GeneratorShape shape;
    shape.states_per_level = {4, 4};
    shape.num_actions = 2;
    shape.feature_dim = 3;
    GeneratedFixture fx =
        generate_mdp(FixtureKind::linear_complete, shape, 5);
    const Policy pi = make_uniform_policy(shape_of(fx.mdp));
    const TrajectoryDataset ds = sample_trajectories(fx.mdp, pi, 300, 9);
    const Mat sigma = gram_matrix(ds, fx.features, 2);
    CHECK(Eigen::SelfAdjointEigenSolver<Mat>(sigma).eigenvalues().minCoeff()
          >= -1e-12);
    double trace_oracle = 0.0;
    for (int i = 0; i < ds.n(); ++i) {
      trace_oracle +=
          fx.features.matrix(2).row(ds.cell(2, i)).squaredNorm() / ds.n();
    }
    CHECK(sigma.trace() == doctest::Approx(trace_oracle).epsilon(1e-12));
  }
}

TEST_CASE("target moment") {
  GeneratedFixture fx = small_tabular(11);
  const MdpShape shape = shape_of(fx.mdp);
  const auto pair = test_fixtures::shifted_policies(shape, 31);
  const TrajectoryDataset ds =
      sample_trajectories(fx.mdp, pair.behavior, 600, 4);

  SUBCASE("zero previous weights give the zero vector") {
    const Vec psi =
        target_moment(ds, fx.features, pair.target, 1, Vec::Zero(ds.n()));
    CHECK(psi.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("unit weights + one-hot features count pi-smoothed states") {
    const Vec psi =
        target_moment(ds, fx.features, pair.target, 1, Vec::Ones(ds.n()));
    // Direct count oracle: frequency of s_1 times pi(a | s_1).
    Vec oracle = Vec::Zero(fx.mdp.num_cells(1));
    for (int i = 0; i < ds.n(); ++i) {
      const int s = ds.state(1, i);
      for (int a = 0; a < fx.mdp.num_actions(); ++a) {
        oracle[s * fx.mdp.num_actions() + a] +=
            pair.target.prob(1, s, a) / ds.n();
      }
    }
    CHECK((psi - oracle).cwiseAbs().maxCoeff() <= 1e-14);
  }

  SUBCASE("deterministic target reduces to the chosen-action feature mean") {
    std::vector<Mat> delta_levels;
    delta_levels.push_back(pair.target.level(0));
    for (int h = 1; h <= fx.mdp.horizon(); ++h) {
      Mat level = Mat::Zero(fx.mdp.num_states(h), fx.mdp.num_actions());
      level.col(0).setOnes();
      delta_levels.push_back(level);
    }
    const Policy delta{delta_levels};
    const Vec psi =
        target_moment(ds, fx.features, delta, 1, Vec::Ones(ds.n()));
    Vec oracle = Vec::Zero(fx.mdp.num_cells(1));
    for (int i = 0; i < ds.n(); ++i) {
      oracle += fx.features.phi(1, ds.state(1, i), 0) / ds.n();
    }
    CHECK((psi - oracle).cwiseAbs().maxCoeff() <= 1e-14);
  }
}

TEST_CASE("best response over the linear ball") {
  SUBCASE("zero functional gives the zero maximizer") {
    auto [theta, value] = best_response_linear(2.0, Vec::Zero(4));
    CHECK(theta.cwiseAbs().maxCoeff() == 0.0);
    CHECK(value == 0.0);
  }

  SUBCASE("axis functional with radius 2") {
    Vec e1 = Vec::Zero(3);
    e1[0] = 1.0;
    auto [theta, value] = best_response_linear(2.0, e1);
    CHECK(value == doctest::Approx(2.0));
    CHECK(theta[0] == doctest::Approx(2.0));
    CHECK(std::abs(theta[1]) + std::abs(theta[2]) == 0.0);
  }

  SUBCASE("dominates random feasible probes") {
    SplitMix64 rng(77);
    for (int rep = 0; rep < 10; ++rep) {
      Vec m(5);
      for (int j = 0; j < 5; ++j) m[j] = rng.next_normal();
      const double radius = 1.5;
      auto [theta, value] = best_response_linear(radius, m);
      CHECK(value == doctest::Approx(radius * m.norm()).epsilon(1e-12));
      for (int probe = 0; probe < 64; ++probe) {
        Vec cand(5);
        for (int j = 0; j < 5; ++j) cand[j] = rng.next_normal();
        cand *= radius * rng.next_double() / cand.norm();
        CHECK(cand.dot(m) <= value + 1e-12);
      }
    }
  }

  SUBCASE("degenerate radius is rejected at construction") {
    MdpShape shape{{1, 2}, 2};
    const FeatureMap f = one_hot_features(shape);
    CHECK_THROWS_AS(LinearClass(&f, 0.0), ValidationError);
    CHECK_THROWS_AS(LinearClass(&f, -1.0), ValidationError);
  }
}

TEST_CASE("generator post-conditions") {
  SUBCASE("one-hot tabular class is complete") {
    GeneratedFixture fx = small_tabular(23);
    const Policy pi = make_uniform_policy(shape_of(fx.mdp));
    for (int h = 1; h <= fx.mdp.horizon(); ++h) {
      CHECK(check_completeness(fx.mdp, pi, fx.features, h) <= 1e-12);
    }
  }

  SUBCASE("linear_complete: exact Q lies in span(phi)") {
    GeneratorShape shape;
    shape.states_per_level = {5, 5, 4};
    shape.num_actions = 2;
    shape.feature_dim = 3;
    GeneratedFixture fx = generate_mdp(FixtureKind::linear_complete, shape, 7);
    const Policy pi = make_softmax_policy(shape_of(fx.mdp), 0.9, 40);
    const QTable q = exact_q(fx.mdp, pi);
    for (int h = 1; h <= fx.mdp.horizon(); ++h) {
      const Mat& phi = fx.features.matrix(h);
      const Vec theta =
          pinv_psd(phi.transpose() * phi) * (phi.transpose() * q.levels[h]);
      CHECK((q.levels[h] - phi * theta).norm() <= 1e-10);
      CHECK(check_completeness(fx.mdp, pi, fx.features, h) <= 1e-10);
    }
  }

  SUBCASE("misspecified_linear: completeness broken, realizability kept") {
    GeneratorShape shape;
    shape.states_per_level = {5, 5, 4};
    shape.num_actions = 2;
    shape.feature_dim = 4;
    GeneratedFixture fx =
        generate_mdp(FixtureKind::misspecified_linear, shape, 13);
    const Policy uniform = make_uniform_policy(shape_of(fx.mdp));
    double worst = 0.0;
    for (int h = 1; h <= fx.mdp.horizon(); ++h) {
      worst = std::max(worst,
                       check_completeness(fx.mdp, uniform, fx.features, h));
    }
    CHECK(worst > 1e-3);
    const QTable q = exact_q(fx.mdp, uniform);
    for (int h = 1; h <= fx.mdp.horizon(); ++h) {
      const Mat& phi = fx.features.matrix(h);
      const Vec theta =
          pinv_psd(phi.transpose() * phi) * (phi.transpose() * q.levels[h]);
      CHECK((q.levels[h] - phi * theta).norm() /
                std::max(q.levels[h].norm(), 1e-12) <=
            1e-10);
    }
  }

  SUBCASE("infeasible feature dimension is rejected") {
    GeneratorShape shape;
    shape.states_per_level = {2, 2};
    shape.num_actions = 1;
    shape.feature_dim = 5;  // 5 > 2 cells
    CHECK_THROWS_AS(generate_mdp(FixtureKind::linear_complete, shape, 1),
                    ValidationError);
  }

  SUBCASE("same seed reproduces the fixture exactly") {
    GeneratorShape shape;
    shape.states_per_level = {4, 3};
    shape.num_actions = 2;
    shape.feature_dim = 3;
    GeneratedFixture a = generate_mdp(FixtureKind::linear_complete, shape, 55);
    GeneratedFixture b = generate_mdp(FixtureKind::linear_complete, shape, 55);
    for (int h = 0; h < a.mdp.horizon(); ++h) {
      CHECK((a.mdp.transitions(h) - b.mdp.transitions(h)).cwiseAbs()
                .maxCoeff() == 0.0);
    }
    for (int h = 1; h <= a.mdp.horizon(); ++h) {
      CHECK((a.features.matrix(h) - b.features.matrix(h)).cwiseAbs()
                .maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("policy constructions") {
  MdpShape shape{{1, 3, 3}, 2};

  SUBCASE("uniform rows") {
    const Policy u = make_uniform_policy(shape);
    CHECK(u.prob(1, 0, 0) == doctest::Approx(0.5));
    CHECK(u.prob(0, 0, 0) == 1.0);
  }

  SUBCASE("softmax temperature limits") {
    const Policy sharp = make_softmax_policy(shape, 0.05, 3);
    const Policy flat = make_softmax_policy(shape, 50.0, 3);
    double sharp_max = 0.0, flat_max = 0.0;
    for (int s = 0; s < 3; ++s) {
      sharp_max = std::max(sharp_max, sharp.level(1).row(s).maxCoeff());
      flat_max = std::max(flat_max, flat.level(1).row(s).maxCoeff());
    }
    CHECK(sharp_max > 0.9);
    CHECK(flat_max < 0.6);
  }

  SUBCASE("epsilon mix interpolates toward uniform") {
    const Policy base = make_softmax_policy(shape, 0.1, 3);
    const Policy mixed = make_epsilon_mix(base, 0.5);
    for (int s = 0; s < 3; ++s) {
      for (int a = 0; a < 2; ++a) {
        CHECK(mixed.prob(1, s, a) ==
              doctest::Approx(0.5 * base.prob(1, s, a) + 0.25).epsilon(1e-12));
      }
    }
    CHECK_THROWS_AS(make_epsilon_mix(base, 1.5), ValidationError);
  }
}

TEST_CASE("discriminator oracle reproduces the matching functional") {
  GeneratorShape shape;
  shape.states_per_level = {4, 4};
  shape.num_actions = 2;
  shape.feature_dim = 3;
  GeneratedFixture fx = generate_mdp(FixtureKind::linear_complete, shape, 19);
  const auto pair = test_fixtures::shifted_policies(shape_of(fx.mdp), 7);
  const TrajectoryDataset ds =
      sample_trajectories(fx.mdp, pair.behavior, 200, 6);
  const LinearClass cls(&fx.features, 1.5);
  const LinearDiscriminatorOracle oracle(ds, cls, pair.target, 1);

  SplitMix64 rng(15);
  Vec w(ds.n()), w_prev(ds.n());
  for (int i = 0; i < ds.n(); ++i) {
    w[i] = rng.next_normal();
    w_prev[i] = rng.next_normal();
  }
  const DiscriminatorResult res = oracle.argmax(w, Vec(-w_prev));

  // The attained value must match the closed-form matching loss.
  const double loss =
      matching_loss_linear(ds, cls, pair.target, 1, w, w_prev);
  CHECK(res.value == doctest::Approx(loss).epsilon(1e-12));

  // And it must equal the functional evaluated at the returned maximizer.
  double direct = 0.0;
  for (int i = 0; i < ds.n(); ++i) {
    direct += w[i] * fx.features.phi(1, ds.state(1, i), ds.action(1, i))
                         .dot(res.maximizer) /
              ds.n();
    Vec avg = Vec::Zero(3);
    for (int a = 0; a < 2; ++a) {
      avg += pair.target.prob(1, ds.state(1, i), a) *
             fx.features.phi(1, ds.state(1, i), a);
    }
    direct -= w_prev[i] * avg.dot(res.maximizer) / ds.n();
  }
  CHECK(direct == doctest::Approx(res.value).epsilon(1e-10));
}
