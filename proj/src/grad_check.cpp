#include "gues/grad_check.hpp"

#include <cmath>
#include <limits>

#include "gues/ops.hpp"

namespace gues {

namespace {

void record_error(GradCheckReport& report, Index flat, double analytic, double numeric,
                  const GradCheckOptions& opts) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
  const double err = std::abs(analytic - numeric) / denom;
  report.relative_error.push_back(err);
  if (!(err <= report.max_relative_error)) {
    report.max_relative_error = err;
    report.worst_index = flat;
  }
  if (!(err <= opts.tolerance)) report.passed = false;
}

bool straddles_kink(double analytic, double numeric, double plus, double center, double minus,
                    const GradCheckOptions& opts) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
  if (std::abs(analytic - numeric) / denom <= opts.tolerance) return false;
  const double right = (plus - center) / opts.step, left = (center - minus) / opts.step;
  const double scale = std::max({std::abs(right), std::abs(left), opts.floor});
  return std::abs(right - left) > opts.kink_tolerance * scale;
}

double eval_scalar(const std::function<Tensor()>& loss) {
  const Tensor out = loss();
  return out.item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& opts) {
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  return grad_check_params([&f, &leaf] { return f(leaf); }, {leaf}, opts);
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  const GradCheckOptions& opts) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  {
    Graph graph;
    GraphScope scope(graph);
    Tensor out = loss();
    graph.backward(out);
  }
  GradCheckReport report;
  const double center = opts.kink_tolerance > 0.0 ? eval_scalar(loss) : 0.0;
  Index flat = 0;
  for (auto& p : params) {
    const Buffer analytic = p.has_grad() ? p.grad() : Buffer::Zero(p.numel());
    for (Index i = 0; i < p.numel(); ++i, ++flat) {
      const double original = p[i];
      if (opts.exclude && opts.exclude(flat, original)) {
        report.excluded.push_back(flat);
        report.relative_error.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      p.mutable_data()[i] = original + opts.step;
      const double plus = eval_scalar(loss);
      p.mutable_data()[i] = original - opts.step;
      const double minus = eval_scalar(loss);
      p.mutable_data()[i] = original;
      const double numeric = (plus - minus) / (2.0 * opts.step);
      if (opts.kink_tolerance > 0.0 && straddles_kink(analytic[i], numeric, plus, center, minus, opts)) {
        report.excluded.push_back(flat);
        report.relative_error.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      record_error(report, flat, analytic[i], numeric, opts);
    }
    p.clear_grad();
  }
  return report;
}

}  // namespace gues
