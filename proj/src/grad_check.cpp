#include "mvh/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace mvh {

std::string GradCheckReport::to_string() const {
  std::ostringstream os;
  os << "loss=" << loss << " max_rel_error=" << max_rel_error << " tolerance=" << tolerance
     << (passed ? " PASS" : " FAIL") << '\n';
  for (const auto& p : params)
    os << "  " << p.name << " checked=" << p.checked << " max_rel_error=" << p.max_rel_error
       << " max|grad|=" << p.max_abs_grad << '\n';
  return os.str();
}

static bool selected(const std::string& name, const std::vector<std::string>& prefixes) {
  if (prefixes.empty()) return true;
  return std::any_of(prefixes.begin(), prefixes.end(),
                     [&](const std::string& p) { return name.compare(0, p.size(), p) == 0; });
}

GradCheckReport grad_check(const LossFn& loss, ParamStore& store, const GradCheckOptions& opt) {
  GradCheckReport report;
  report.tolerance = opt.tolerance;

  store.zero_grad();
  {
    Tape tape;
    Var l = loss(tape);
    report.loss = l.item();
    tape.backward(l);
  }
  std::map<std::string, Array> analytic;
  for (const auto& [name, e] : store.entries()) analytic.emplace(name, e.grad);
  store.zero_grad();

  const auto evaluate = [&]() {
    Tape tape;
    return loss(tape).item();
  };
  const double again = evaluate();
  if (again != report.loss) {
    std::ostringstream os;
    os.precision(17);
    os << "loss is not deterministic: " << report.loss << " vs " << again;
    throw NonDeterministicLoss(os.str());
  }

  const double floor = opt.floor * std::max(1.0, std::abs(report.loss));
  std::mt19937_64 rng(opt.seed);
  for (const auto& name : store.names()) {
    if (!selected(name, opt.prefixes)) continue;
    Array& value = store.value(name);
    const Array& g = analytic.at(name);
    std::vector<std::size_t> idx(value.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opt.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries_per_param);
    }
    ParamGradCheck pc;
    pc.name = name;
    for (std::size_t i : idx) {
      const double orig = value[i];
      value[i] = orig + opt.step;
      const double lp = evaluate();
      value[i] = orig - opt.step;
      const double lm = evaluate();
      value[i] = orig;
      const double fd = (lp - lm) / (2.0 * opt.step);
      const double denom = std::max({std::abs(g[i]), std::abs(fd), floor});
      const double rel = std::abs(g[i] - fd) / denom;
      pc.max_rel_error = std::max(pc.max_rel_error, rel);
      pc.max_abs_grad = std::max(pc.max_abs_grad, std::abs(g[i]));
      ++pc.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.params.push_back(pc);
  }
  report.passed = report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace mvh
