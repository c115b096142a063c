// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <utility>

#include "silq/error.hpp"

namespace silq {

/// Golden-section minimizer for a unimodal function on [lo, hi]. The bracket
/// shrinks until its width drops below rel_tol * hi, then the midpoint is
/// returned. Endpoints must satisfy 0 < lo < hi.
inline double golden_section_minimize(const std::function<double(double)>& f,
                                      double lo, double hi,
                                      double rel_tol = 1e-6) {
  check_input(lo > 0.0 && hi > lo, "golden_section_minimize: bad bracket");
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;  // about 0.618
  double a = lo, b = hi;
  double c = b - (b - a) * inv_phi;
  double d = a + (b - a) * inv_phi;
  double fc = f(c);
  double fd = f(d);
  const double width = rel_tol * hi;
  while (b - a > width) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - (b - a) * inv_phi;
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + (b - a) * inv_phi;
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

}  // namespace silq
