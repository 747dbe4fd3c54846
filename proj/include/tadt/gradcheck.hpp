#pragma once

// Finite-difference gradient verification.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "tadt/config.hpp"
#include "tadt/nn.hpp"

namespace tadt {

struct GradcheckOptions {
  double step = 1e-4;            // central difference half-width
  bool five_point = false;       // O(h^4) central stencil instead of O(h^2)
  std::size_t max_entries = 0;   // per tensor; 0 checks every entry
  double floor = 1e-8;           // denominator floor of the relative error
  std::uint64_t seed = 0;        // entry sampling
  // Report |a - n| / max(|a|, |n|) over each tensor's checked entries as
  // vectors rather than the worst single entry, which is ill-conditioned
  // for entries whose gradient sits at the difference quotient's roundoff.
  bool tensor_norm = false;
};

struct GradcheckResult {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double norm_rel_error = 0.0;  // ||a - n|| / max(||a||, ||n||)
  // Worst entry, for diagnostics.
  double analytic = 0.0;
  double numeric = 0.0;
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor);

// Compares the gradients backward() leaves on params against central
// differences of loss(), one result per param. loss must be a pure
// function of the current parameter values.
template <typename T>
std::vector<GradcheckResult> gradcheck(const std::function<Tensor<T>()>& loss, const ParamList<T>& params,
                                       const GradcheckOptions& options = {});

// Same, but the numeric side is computed by reference_loss on f64 copies
// of the parameters (reference[i] mirrors params[i]). Used to verify f32
// gradients without drowning them in f32 rounding noise.
std::vector<GradcheckResult> gradcheck_against_f64(const std::function<Tensor<float>()>& loss,
                                                   const ParamList<float>& params,
                                                   const std::function<Tensor<double>()>& reference_loss,
                                                   const ParamList<double>& reference,
                                                   const GradcheckOptions& options = {});

// Copies values between same-named, same-shaped parameter lists of any
// element types.
template <typename Dst, typename Src>
void copy_parameters(const ParamList<Dst>& dst, const ParamList<Src>& src) {
  if (dst.size() != src.size()) throw DimensionError("parameter lists differ in length");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw DimensionError("parameter mismatch: " + dst[i].name + " vs " + src[i].name);
    }
    const auto s = src[i].tensor.data();
    auto d = dst[i].tensor.mutable_data();
    for (std::size_t k = 0; k < s.size(); ++k) d[k] = static_cast<Dst>(s[k]);
  }
}

// A fixed random linear functional sum(c * x), smooth in x, used as the
// scalar objective of most checks.
template <typename T>
Tensor<T> random_functional(const Tensor<T>& x, std::uint64_t seed);

struct SuiteCheck {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool passed() const { return max_rel_error <= tolerance; }
};

// Runs every operator, layer and end-to-end gradient check on the given
// (tiny) configuration. Progress lines go to log when non-null.
std::vector<SuiteCheck> run_gradcheck_suite(const RunConfig& config, std::ostream* log = nullptr);

}  // namespace tadt
