#include "segcal/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace segcal {

double nll_loss(const ProbMap& probs, const LabelMap& labels) {
  check_same_shape(probs, labels);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < probs.num_pixels(); ++i) {
    if (labels.ignored(i)) continue;
    total -= std::log(std::max(probs.pixel(i)[labels.label(i)], kProbabilityFloor));
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::kAllPixelsIgnored, "NLL over an all-ignored image");
  return total / static_cast<double>(n);
}

double binary_cross_entropy(std::span<const double> scores,
                            std::span<const std::uint8_t> targets) {
  if (scores.size() != targets.size()) {
    throw Error(ErrorCode::kLengthMismatch, "scores and targets lengths differ");
  }
  if (scores.empty()) throw Error(ErrorCode::kEmptyInput, "BCE needs at least one sample");
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    total -= targets[i] ? std::log(std::max(s, kProbabilityFloor))
                        : std::log(std::max(1.0 - s, kProbabilityFloor));
  }
  return total / static_cast<double>(scores.size());
}

double minimize_scalar(const std::function<double(double)>& f, double lo, double hi,
                       double tol) {
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw Error(ErrorCode::kInvalidBounds, "minimize_scalar needs finite lo < hi");
  }
  if (!(tol > 0.0)) throw Error(ErrorCode::kInvalidBounds, "tolerance must be positive");
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo;
  double b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c);
  double fd = f(d);
  while (b - a > tol) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

void AdamWConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::kInvalidArgument, "learning rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "betas must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "weight decay must be >= 0");
  if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
  if (epochs < 0) throw Error(ErrorCode::kInvalidArgument, "epochs must be >= 0");
}

AdamWResult adamw_fit(std::vector<double> params, std::size_t num_samples,
                      const BatchLossGrad& loss_grad, const AdamWConfig& cfg,
                      const EpochOrder& order, const ValidationLoss& val_loss) {
  cfg.validate();
  if (num_samples == 0) throw Error(ErrorCode::kEmptyInput, "adamw_fit needs samples");

  std::mt19937_64 rng(cfg.seed);
  const std::size_t n_params = params.size();
  std::vector<double> m(n_params, 0.0);
  std::vector<double> v(n_params, 0.0);
  std::vector<double> grad(n_params, 0.0);
  std::vector<std::size_t> default_order(num_samples);
  std::iota(default_order.begin(), default_order.end(), std::size_t{0});

  AdamWResult result;
  std::uint64_t step = 0;
  double beta1_pow = 1.0;
  double beta2_pow = 1.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> visit;
    if (order) {
      visit = order(rng);
    } else {
      std::shuffle(default_order.begin(), default_order.end(), rng);
      visit = default_order;
    }
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < visit.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, visit.size() - start);
      const std::span<const std::size_t> batch(visit.data() + start, len);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double loss = loss_grad(batch, params, grad);
      ++step;
      if (!std::isfinite(loss) ||
          !std::all_of(grad.begin(), grad.end(), [](double g) { return std::isfinite(g); })) {
        throw Error(ErrorCode::kNonFiniteGradient,
                    "non-finite loss or gradient at step " + std::to_string(step), step);
      }
      beta1_pow *= cfg.beta1;
      beta2_pow *= cfg.beta2;
      const double bias1 = 1.0 - beta1_pow;
      const double bias2 = 1.0 - beta2_pow;
      for (std::size_t j = 0; j < n_params; ++j) {
        params[j] *= 1.0 - cfg.learning_rate * cfg.weight_decay;
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
        const double m_hat = m[j] / bias1;
        const double v_hat = v[j] / bias2;
        params[j] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
      }
      epoch_loss += loss;
      ++batches;
    }
    EpochLoss entry;
    entry.epoch = epoch + 1;
    entry.loss = batches == 0 ? 0.0 : epoch_loss / static_cast<double>(batches);
    if (val_loss) entry.val_loss = val_loss(params);
    result.trace.push_back(entry);
  }
  result.params = std::move(params);
  return result;
}

GradCheckReport finite_difference_check(const LossGrad& loss_grad,
                                        std::span<const double> params, double epsilon) {
  std::vector<double> point(params.begin(), params.end());
  std::vector<double> analytic(point.size(), 0.0);
  std::vector<double> scratch(point.size(), 0.0);
  loss_grad(point, analytic);

  GradCheckReport report;
  report.entries.reserve(point.size());
  for (std::size_t j = 0; j < point.size(); ++j) {
    const double saved = point[j];
    point[j] = saved + epsilon;
    const double up = loss_grad(point, scratch);
    point[j] = saved - epsilon;
    const double down = loss_grad(point, scratch);
    point[j] = saved;
    GradCheckEntry entry;
    entry.analytic = analytic[j];
    entry.numeric = (up - down) / (2.0 * epsilon);
    entry.rel_error = std::abs(entry.analytic - entry.numeric) /
                      std::max(1e-8, std::abs(entry.analytic) + std::abs(entry.numeric));
    report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace segcal
