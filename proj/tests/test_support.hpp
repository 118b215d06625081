// Copyright 2026 The cube3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cube3d/matrix.hpp"
#include "cube3d/reference.hpp"
#include "cube3d/sharding.hpp"
#include "cube3d/transport.hpp"

namespace cube3d::testing {

template <typename T>
double max_rel_err(const Matrix<T>& got, const Matrix<T>& want) {
  if (!got.same_shape(want)) return 1e300;
  double worst = 0;
  for (std::size_t t = 0; t < want.data.size(); ++t) {
    const double denom = std::max(1.0, std::abs(static_cast<double>(want.data[t])));
    worst = std::max(worst, std::abs(static_cast<double>(got.data[t]) -
                                     static_cast<double>(want.data[t])) /
                                denom);
  }
  return worst;
}

template <typename T>
double max_rel_err(const std::vector<T>& got, const std::vector<T>& want) {
  if (got.size() != want.size()) return 1e300;
  double worst = 0;
  for (std::size_t t = 0; t < want.size(); ++t) {
    const double denom = std::max(1.0, std::abs(static_cast<double>(want[t])));
    worst = std::max(worst, std::abs(static_cast<double>(got[t]) -
                                     static_cast<double>(want[t])) /
                                denom);
  }
  return worst;
}

inline double max_rel_err_d(const std::vector<double>& got, const std::vector<double>& want) {
  return max_rel_err<double>(got, want);
}

/// Per-rank op results waiting for collect().
template <typename T>
using Family = std::vector<ShardedMatrix<T>>;

}  // namespace cube3d::testing
