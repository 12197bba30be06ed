#include "clipseg/numkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace clipseg {

GradCheckReport check_gradients(const std::function<Var()>& loss, std::span<Var> params,
                                std::span<const std::string> names, const GradCheckOptions& options) {
  std::vector<Mat> analytic;
  {
    Tape tape;
    const Var root = loss();
    analytic = tape.gradient(root, std::span<const Var>(params.data(), params.size()));
  }

  Rng rng(options.seed);
  GradCheckReport report;
  report.passed = true;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat& value = params[p].mutable_value();
    const auto total = static_cast<std::size_t>(value.size());
    std::vector<std::size_t> entries(total);
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries != 0 && total > options.max_entries) {
      // Partial Fisher-Yates: the first max_entries slots become a uniform sample.
      for (std::size_t i = 0; i < options.max_entries; ++i) {
        std::swap(entries[i], entries[i + rng.below(total - i)]);
      }
      entries.resize(options.max_entries);
    }

    double diff2 = 0.0;
    double a2 = 0.0;
    double n2 = 0.0;
    for (std::size_t e : entries) {
      double& slot = value.data()[e];
      const double saved = slot;
      slot = saved + options.step;
      const double plus = loss().item();
      slot = saved - options.step;
      const double minus = loss().item();
      slot = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double exact = analytic[p].data()[e];
      diff2 += (numeric - exact) * (numeric - exact);
      a2 += exact * exact;
      n2 += numeric * numeric;
    }

    ParamCheck check;
    check.name = p < names.size() ? names[p] : "param" + std::to_string(p);
    check.analytic_norm = std::sqrt(a2);
    check.numeric_norm = std::sqrt(n2);
    const double denom = std::max(check.analytic_norm, check.numeric_norm);
    check.rel_error = denom < options.abs_floor ? 0.0 : std::sqrt(diff2) / denom;
    report.max_rel_error = std::max(report.max_rel_error, check.rel_error);
    if (!(check.rel_error <= options.tolerance)) report.passed = false;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace clipseg
