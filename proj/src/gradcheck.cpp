#include "npath/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "npath/error.hpp"

namespace npath {

GradCheckResult finite_difference_check(const ScalarFn& f, std::span<const double> point,
                                        std::span<const double> analytic, double h,
                                        std::span<const std::size_t> coords) {
  if (!(h > 0.0)) throw InvalidParameter("finite_difference_check: h must be > 0");
  if (analytic.size() != point.size()) {
    throw DimensionError("finite_difference_check: gradient has " + std::to_string(analytic.size()) +
                         " entries for a point of size " + std::to_string(point.size()));
  }
  std::vector<double> probe(point.begin(), point.end());
  GradCheckResult result;
  for (std::size_t c : coords) {
    if (c >= probe.size()) throw IndexError("finite_difference_check: coordinate " + std::to_string(c));
    const double x0 = probe[c];
    probe[c] = x0 + h;
    const double up = f(probe);
    probe[c] = x0 - h;
    const double down = f(probe);
    probe[c] = x0;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleFailure("finite_difference_check: f not finite around coordinate " + std::to_string(c));
    }
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[c] - numeric) / std::max(std::abs(analytic[c]), 1e-12);
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_coord = c;
      result.worst_analytic = analytic[c];
      result.worst_numeric = numeric;
    }
  }
  return result;
}

GradCheckResult finite_difference_check(const TapeFn& build, const Tensor& point, double h,
                                        std::span<const std::size_t> coords) {
  Tape tape;
  Var x = tape.variable(point);
  Var y = build(tape, x);
  tape.backward(y);
  const Tensor g = tape.grad(x);
  const Shape shape = point.shape();
  ScalarFn f = [&](std::span<const double> p) {
    Tape t;
    Var v = t.constant(Tensor(shape, std::vector<double>(p.begin(), p.end())));
    return t.value(build(t, v)).item();
  };
  return finite_difference_check(f, point.data(), g.data(), h, coords);
}

}  // namespace npath
