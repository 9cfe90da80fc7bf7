// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites: finite-difference gradient checking
// and random tensor generators.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "pskd/autodiff.hpp"
#include "pskd/core.hpp"

namespace testutil {

inline pskd::ad::Tensor random_tensor(std::vector<int> shape, pskd::Rng& rng, double lo = -1.0,
                                      double hi = 1.0) {
  pskd::ad::Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Random probability rows bounded away from zero.
inline pskd::ad::Tensor random_prob_rows(int b, int c, pskd::Rng& rng, double floor = 0.02) {
  pskd::ad::Tensor t({b, c});
  for (int i = 0; i < b; ++i) {
    double sum = 0;
    for (int j = 0; j < c; ++j) {
      t.at2(i, j) = floor + rng.uniform();
      sum += t.at2(i, j);
    }
    for (int j = 0; j < c; ++j) t.at2(i, j) /= sum;
  }
  return t;
}

// Maximum relative error between the analytic gradient of f at x and central
// finite differences. f receives a leaf Value and must return a scalar Value.
inline double max_grad_rel_error(
    const std::function<pskd::ad::Value(const pskd::ad::Value&)>& f, const pskd::ad::Tensor& x,
    double step = 1e-5) {
  namespace ad = pskd::ad;
  ad::Value leaf_x = ad::leaf(x, true);
  ad::Value y = f(leaf_x);
  ad::backward(y);

  double worst = 0;
  for (int i = 0; i < x.numel(); ++i) {
    ad::Tensor xp = x, xm = x;
    xp.data[i] += step;
    xm.data[i] -= step;
    const double fp = ad::scalar(f(ad::leaf(xp, false)));
    const double fm = ad::scalar(f(ad::leaf(xm, false)));
    const double fd = (fp - fm) / (2 * step);
    const double an = leaf_x->grad.data[i];
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

}  // namespace testutil
