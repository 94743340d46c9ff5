#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "npath/tape.hpp"
#include "npath/tensor.hpp"

namespace npath {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarFn = std::function<double(std::span<const double>)>;

// Compares `analytic` against central differences of `f` at `point` for each
// listed coordinate. Relative error is |a - fd| / max(|a|, 1e-12). Throws
// OracleFailure if f is non-finite at any probe, InvalidParameter if h <= 0.
GradCheckResult finite_difference_check(const ScalarFn& f, std::span<const double> point,
                                        std::span<const double> analytic, double h,
                                        std::span<const std::size_t> coords);

// Tape-driven variant: `build` records a scalar function of one leaf.
using TapeFn = std::function<Var(Tape&, Var)>;
GradCheckResult finite_difference_check(const TapeFn& build, const Tensor& point, double h,
                                        std::span<const std::size_t> coords);

}  // namespace npath
