#include "unibias/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace unibias {

bool GradcheckReport::ok() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.ok; });
}

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

std::string GradcheckReport::summary() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << (e.ok ? "ok   " : "FAIL ") << (e.name.empty() ? "<param>" : e.name) << " max_rel=" << e.max_rel_error
       << " max_abs=" << e.max_abs_error << " at " << e.worst_index << '\n';
  }
  return os.str();
}

GradcheckReport gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                          const GradcheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor value = loss();
    tape.backward(value);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params)
    analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                       : std::vector<double>(p.size(), 0.0));

  GradcheckReport report;
  report.tolerance = options.tolerance;
  NoGradScope no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    GradcheckEntry entry;
    entry.name = p.name();
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double up = loss().item();
      values[i] = saved - options.step;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[pi][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.floor});
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
      }
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
    }
    entry.ok = entry.max_rel_error < options.tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace unibias
