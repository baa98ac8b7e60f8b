#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bimii/nn.hpp"

namespace bimii {

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_coord;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  int64_t coords_checked = 0;
};

// Central-difference check of reverse-mode gradients.
//
// fn(true) must zero nothing itself: it rebuilds the forward pass, runs
// backward, accumulates into ParamT::grad and returns the scalar value.
// fn(false) evaluates the same forward without gradients. The function must
// be deterministic; the checker evaluates it twice and treats any bitwise
// difference as an oracle error.
template <typename S>
FdReport finite_diff_check(const std::function<S(bool with_grad)>& fn,
                           const std::vector<ParamT<S>*>& params, S eps = (S)1e-4);

// Named gradcheck drivers for the model's verification surface. `module` is
// one of: ccnn, ceaef, sfi, dfi, mfe, loss, all. precision must be 64 (the
// verification mode). Returns one report per selected module.
std::vector<std::pair<std::string, FdReport>> gradcheck_run(const std::string& module,
                                                            int precision);

// Worst report across the selected modules, with coords summed.
FdReport gradcheck_module(const std::string& module, int precision);

// Pass threshold used by the verification suite.
inline constexpr double kGradTolerance = 1e-4;

}  // namespace bimii
