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

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace qmmr {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Relative eigenvalue cutoff shared by every pseudo-inverse in the library.
/// Eigenvalues below kPinvCutoff * lambda_max are treated as exact zeros.
inline constexpr double kPinvCutoff = 1e-10;

/// Spectral decomposition of a symmetric PSD matrix with the small
/// eigenvalues zeroed out. Basis of all the pseudo-inverse style maps below.
struct PsdEig {
  Vec eigenvalues;   // ascending, negatives clamped to 0
  Mat eigenvectors;  // columns match eigenvalues
  double cutoff = 0.0;
  int rank = 0;

  bool full_rank() const { return rank == eigenvalues.size(); }

  /// S^dagger (Moore-Penrose on the retained spectrum).
  Mat pinv() const { return apply([](double l) { return 1.0 / l; }); }

  /// S^{-1/2} on the range, 0 on the null space.
  Mat inv_sqrt() const {
    return apply([](double l) { return 1.0 / std::sqrt(l); });
  }

  /// Orthogonal projector onto the range of S.
  Mat range_projector() const {
    return apply([](double) { return 1.0; });
  }

  template <typename F>
  Mat apply(F&& f) const {
    const auto d = eigenvalues.size();
    Vec g = Vec::Zero(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      if (eigenvalues[i] > cutoff) g[i] = f(eigenvalues[i]);
    }
    return eigenvectors * g.asDiagonal() * eigenvectors.transpose();
  }
};

inline PsdEig psd_eig(const Mat& s, double rel_cutoff = kPinvCutoff) {
  if (s.rows() != s.cols()) {
    throw std::invalid_argument("psd_eig: matrix must be square");
  }
  Eigen::SelfAdjointEigenSolver<Mat> solver(s);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("psd_eig: eigendecomposition failed");
  }
  PsdEig out;
  out.eigenvalues = solver.eigenvalues().cwiseMax(0.0);
  out.eigenvectors = solver.eigenvectors();
  const double lmax =
      out.eigenvalues.size() > 0 ? out.eigenvalues.maxCoeff() : 0.0;
  out.cutoff = rel_cutoff * lmax;
  out.rank = 0;
  for (Eigen::Index i = 0; i < out.eigenvalues.size(); ++i) {
    if (out.eigenvalues[i] > out.cutoff) ++out.rank;
  }
  return out;
}

/// Pseudo-inverse of a symmetric PSD matrix.
inline Mat pinv_psd(const Mat& s) { return psd_eig(s).pinv(); }

/// Mahalanobis-style norm sqrt(v^T S^dagger v).
inline double pinv_quadratic_norm(const PsdEig& eig, const Vec& v) {
  const Vec proj = eig.eigenvectors.transpose() * v;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < eig.eigenvalues.size(); ++i) {
    if (eig.eigenvalues[i] > eig.cutoff) {
      acc += proj[i] * proj[i] / eig.eigenvalues[i];
    }
  }
  return std::sqrt(acc);
}

/// sqrt((1/n) sum_i v_i^2): the per-sample second-moment norm.
inline double second_moment_norm(const Vec& v) {
  if (v.size() == 0) return 0.0;
  return std::sqrt(v.squaredNorm() / static_cast<double>(v.size()));
}

}  // namespace qmmr
