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

#include <utility>
#include <vector>

#include "qmmr/dataset.hpp"

namespace qmmr {

/// Per-level feature map phi: S_h x A -> R^{d_h} for h = 1..H, stored as a
/// dense (|S_h| * A) x d_h matrix per level. Level 0 carries no features:
/// the initial pair is fixed and its weight is pinned to 1.
class FeatureMap {
 public:
  FeatureMap(MdpShape shape, std::vector<Mat> per_level)
      : shape_(std::move(shape)), phi_(std::move(per_level)) {
    require(static_cast<int>(phi_.size()) == shape_.horizon(),
            "expected one feature matrix per level 1..H");
    for (int h = 1; h <= shape_.horizon(); ++h) {
      const Mat& m = matrix(h);
      require(m.rows() == shape_.num_cells(h),
              "feature matrix row count mismatch at level " +
                  std::to_string(h));
      require(m.cols() >= 1, "feature dimension must be positive");
      require(m.allFinite(), "features must be finite");
    }
  }

  const MdpShape& shape() const { return shape_; }
  int horizon() const { return shape_.horizon(); }
  int dim(int level) const { return static_cast<int>(matrix(level).cols()); }

  /// Rows indexed by cell = local_state * A + action.
  const Mat& matrix(int level) const {
    require(level >= 1 && level <= shape_.horizon(),
            "features exist for levels 1..H only");
    return phi_[level - 1];
  }

  Vec phi(int level, int local_state, int action) const {
    return matrix(level).row(local_state * shape_.num_actions + action)
        .transpose();
  }

  /// phi(s, pi) = sum_a pi(a|s) phi(s, a) for every state at the level.
  Mat policy_averaged(int level, const Mat& pi_level) const {
    const Mat& m = matrix(level);
    const int num_states = shape_.states_per_level[level];
    const int num_actions = shape_.num_actions;
    Mat out = Mat::Zero(num_states, m.cols());
    for (int s = 0; s < num_states; ++s) {
      for (int a = 0; a < num_actions; ++a) {
        out.row(s) += pi_level(s, a) * m.row(s * num_actions + a);
      }
    }
    return out;
  }

 private:
  MdpShape shape_;
  std::vector<Mat> phi_;  // phi_[h-1] holds level h
};

/// Tabular feature map: d_h = |S_h| * A with one indicator per cell.
inline FeatureMap one_hot_features(const MdpShape& shape) {
  std::vector<Mat> levels;
  for (int h = 1; h <= shape.horizon(); ++h) {
    levels.push_back(Mat::Identity(shape.num_cells(h), shape.num_cells(h)));
  }
  return FeatureMap(shape, std::move(levels));
}

/// Ball of linear functions { (s,a) -> phi(s,a)^T theta : ||theta||_2 <=
/// radius }. Symmetric (closed under negation) by construction.
class LinearClass {
 public:
  LinearClass(const FeatureMap* features, double radius)
      : features_(features), radius_(radius) {
    require(features_ != nullptr, "LinearClass needs a feature map");
    require(radius_ > 0.0 && std::isfinite(radius_),
            "class radius must be finite and positive");
  }

  const FeatureMap& features() const { return *features_; }
  double radius() const { return radius_; }

 private:
  const FeatureMap* features_;
  double radius_;
};

/// n x d matrix of phi(s_h^(i), a_h^(i)) rows.
inline Mat feature_rows(const TrajectoryDataset& ds, const FeatureMap& f,
                        int level) {
  const Mat& m = f.matrix(level);
  Mat out(ds.n(), m.cols());
  for (int i = 0; i < ds.n(); ++i) out.row(i) = m.row(ds.cell(level, i));
  return out;
}

/// n x d matrix of phi(s_h^(i), pi) rows.
inline Mat feature_rows_policy(const TrajectoryDataset& ds, const FeatureMap& f,
                               const Policy& pi, int level) {
  const Mat avg = f.policy_averaged(level, pi.level(level));
  Mat out(ds.n(), avg.cols());
  for (int i = 0; i < ds.n(); ++i) out.row(i) = avg.row(ds.state(level, i));
  return out;
}

/// Sigma^hat_h = (1/n) sum_i phi_i phi_i^T. Symmetric PSD.
inline Mat gram_matrix(const TrajectoryDataset& ds, const FeatureMap& f,
                       int level) {
  const Mat x = feature_rows(ds, f, level);
  return x.transpose() * x / ds.n();
}

/// psi^hat_h = (1/n) sum_i w_prev_i phi(s_h^(i), pi): the moment the level-h
/// weights must reproduce.
inline Vec target_moment(const TrajectoryDataset& ds, const FeatureMap& f,
                         const Policy& pi, int level, const Vec& w_prev) {
  require(w_prev.size() == ds.n(), "w_prev must have one entry per trajectory");
  const Mat xpi = feature_rows_policy(ds, f, pi, level);
  return xpi.transpose() * w_prev / ds.n();
}

/// argmax over the linear ball of the induced linear functional, plus the
/// attained value. Cauchy-Schwarz makes this exact: theta* = radius * m /
/// ||m||, value = radius * ||m||; the zero vector (value 0) when m = 0.
inline std::pair<Vec, double> best_response_linear(double radius,
                                                   const Vec& m_vec) {
  require(radius > 0.0, "class radius must be positive");
  const double norm = m_vec.norm();
  if (norm == 0.0) return {Vec::Zero(m_vec.size()), 0.0};
  return {radius * m_vec / norm, radius * norm};
}

inline std::pair<Vec, double> best_response_linear(const LinearClass& cls,
                                                   const Vec& m_vec) {
  return best_response_linear(cls.radius(), m_vec);
}

struct DiscriminatorResult {
  Vec maximizer;  // coefficients of the argmax function
  double value = 0.0;
};

/// Best-response oracle over one level of a linear class. The functional is
/// given by per-datapoint coefficients on current pairs plus per-datapoint
/// coefficients on policy-averaged evaluations:
///   f -> (1/n) sum_i a_i f(s_h^(i), a_h^(i)) + (1/n) sum_i b_i f(s_h^(i), pi)
class LinearDiscriminatorOracle {
 public:
  LinearDiscriminatorOracle(const TrajectoryDataset& ds, const LinearClass& cls,
                            const Policy& pi, int level)
      : x_(feature_rows(ds, cls.features(), level)),
        xpi_(feature_rows_policy(ds, cls.features(), pi, level)),
        radius_(cls.radius()) {}

  /// Feature-space vector induced by the functional.
  Vec induced_vector(const Vec& current_coeffs,
                     const Vec& policy_coeffs) const {
    require(current_coeffs.size() == x_.rows() &&
                policy_coeffs.size() == x_.rows(),
            "coefficient vectors must have one entry per trajectory");
    return (x_.transpose() * current_coeffs +
            xpi_.transpose() * policy_coeffs) /
           x_.rows();
  }

  DiscriminatorResult argmax(const Vec& current_coeffs,
                             const Vec& policy_coeffs) const {
    auto [theta, value] =
        best_response_linear(radius_, induced_vector(current_coeffs,
                                                     policy_coeffs));
    return {std::move(theta), value};
  }

  /// Sample evaluation f|_n of a coefficient vector.
  Vec evaluate_on_data(const Vec& coeffs) const { return x_ * coeffs; }

  const Mat& data_features() const { return x_; }
  const Mat& policy_features() const { return xpi_; }
  double radius() const { return radius_; }

 private:
  Mat x_;
  Mat xpi_;
  double radius_;
};

}  // namespace qmmr
