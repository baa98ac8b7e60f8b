#include "bimii/gradcheck.hpp"

#include <cmath>
#include <cstring>

namespace bimii {

template <typename S>
FdReport finite_diff_check(const std::function<S(bool)>& fn,
                           const std::vector<ParamT<S>*>& params, S eps) {
  if (!(eps > S(0))) throw ContractError("finite_diff_check: epsilon must be > 0");
  S v1 = fn(false);
  S v2 = fn(false);
  if (std::memcmp(&v1, &v2, sizeof(S)) != 0)
    throw NumericError("finite_diff_check: function is not deterministic (repeated evaluation mismatch)");

  for (ParamT<S>* p : params) p->zero_grad();
  fn(true);
  std::vector<TensorT<S>> analytic;
  analytic.reserve(params.size());
  for (ParamT<S>* p : params) analytic.push_back(p->grad);

  FdReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    ParamT<S>* p = params[pi];
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      S saved = p->value.data[(size_t)i];
      p->value.data[(size_t)i] = saved + eps;
      double fp = (double)fn(false);
      p->value.data[(size_t)i] = saved - eps;
      double fm = (double)fn(false);
      p->value.data[(size_t)i] = saved;
      double numeric = (fp - fm) / (2.0 * (double)eps);
      double an = (double)analytic[pi].data[(size_t)i];
      double denom = std::max({std::fabs(numeric), std::fabs(an), 1e-8});
      double rel = std::fabs(numeric - an) / denom;
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_coord = p->name + "[" + std::to_string(i) + "]";
        rep.analytic_at_worst = an;
        rep.numeric_at_worst = numeric;
      }
    }
  }
  return rep;
}

template FdReport finite_diff_check<float>(const std::function<float(bool)>&,
                                           const std::vector<ParamT<float>*>&, float);
template FdReport finite_diff_check<double>(const std::function<double(bool)>&,
                                            const std::vector<ParamT<double>*>&, double);

}  // namespace bimii
