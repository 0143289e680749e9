#include "segcal/calibrators.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "segcal/parallel.hpp"

namespace segcal {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::size_t classes_of(const SegLogits& logits) {
  return static_cast<std::size_t>(logits.num_classes());
}

// Stable log-softmax clamped below at log(kProbabilityFloor).
template <typename T>
void log_softmax_into(std::span<const T> scores, std::span<double> out) {
  double max_score = static_cast<double>(scores[0]);
  for (T s : scores) max_score = std::max(max_score, static_cast<double>(s));
  double total = 0.0;
  for (T s : scores) total += std::exp(static_cast<double>(s) - max_score);
  const double log_total = std::log(total);
  const double floor = std::log(kProbabilityFloor);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    out[k] = std::max(static_cast<double>(scores[k]) - max_score - log_total, floor);
  }
}

template <typename T>
void dirichlet_scores(std::span<const T> z, std::span<const double> weights,
                      std::span<const double> bias, std::span<double> log_probs,
                      std::span<double> out) {
  const std::size_t k = z.size();
  log_softmax_into(z, log_probs);
  for (std::size_t j = 0; j < k; ++j) {
    double u = bias[j];
    for (std::size_t i = 0; i < k; ++i) u += weights[j * k + i] * log_probs[i];
    out[j] = u;
  }
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

void center(std::vector<double>& bias) {
  if (bias.empty()) return;
  const double mean = std::accumulate(bias.begin(), bias.end(), 0.0) /
                      static_cast<double>(bias.size());
  for (double& b : bias) b -= mean;
}

const Dataset& validation_or_train(const Dataset& train, const Dataset& val) {
  return val.images.empty() ? train : val;
}

void require_train(const Dataset& train) {
  if (train.images.empty()) throw Error(ErrorCode::kEmptySplit, "training split is empty");
}

void require_val(const Dataset& val, std::string_view method) {
  if (val.images.empty()) {
    throw Error(ErrorCode::kSplitMissing,
                std::string(method) + " needs a non-empty validation split");
  }
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Fills the before/after statistics and applies the identity fallback.
FitReport finish_report(CalibratorParams params, const Dataset& train, const Dataset& val,
                        const FitConfig& cfg, std::chrono::steady_clock::time_point start) {
  FitReport report;
  report.params = std::move(params);
  const Dataset& eval_set = validation_or_train(train, val);
  report.train_nll_before = evaluate_calibrator(train, IdentityParams{}, cfg.bins).nll;
  report.train_nll_after = evaluate_calibrator(train, report.params, cfg.bins).nll;
  report.val_ece_before = evaluate_calibrator(eval_set, IdentityParams{}, cfg.bins).report.dataset_ece;
  report.val_ece_after = evaluate_calibrator(eval_set, report.params, cfg.bins).report.dataset_ece;
  if (cfg.identity_fallback && report.val_ece_after > report.val_ece_before) {
    report.warning = std::string(method_name(report.params)) +
                     " increased validation ECE from " + std::to_string(report.val_ece_before) +
                     " to " + std::to_string(report.val_ece_after) +
                     "; falling back to the identity calibrator";
    report.params = IdentityParams{};
    report.fell_back_to_identity = true;
    report.train_nll_after = report.train_nll_before;
    report.val_ece_after = report.val_ece_before;
  }
  report.wall_seconds = seconds_since(start);
  return report;
}

}  // namespace

std::string_view method_name(const CalibratorParams& params) {
  return std::visit(Overloaded{
                        [](const IdentityParams&) { return std::string_view("identity"); },
                        [](const TemperatureParams&) { return std::string_view("temperature"); },
                        [](const VectorParams&) { return std::string_view("vector"); },
                        [](const DirichletParams&) { return std::string_view("dirichlet"); },
                        [](const MetaCalParams&) { return std::string_view("metacal"); },
                        [](const SelectiveParams&) { return std::string_view("selective"); },
                        [](const EnsembleParams&) { return std::string_view("ensemble"); },
                    },
                    params);
}

void validate_params(const CalibratorParams& params, int num_classes) {
  const auto k = static_cast<std::size_t>(num_classes);
  auto class_mismatch = [&](std::size_t got) {
    throw Error(ErrorCode::kClassCountMismatch,
                "calibrator is fitted for " + std::to_string(got) + " classes, data has " +
                    std::to_string(num_classes));
  };
  std::visit(Overloaded{
                 [](const IdentityParams&) {},
                 [](const TemperatureParams& p) { require_positive_temperature(p.temperature); },
                 [&](const VectorParams& p) {
                   if (p.w.size() != p.b.size()) {
                     throw Error(ErrorCode::kDimensionMismatch, "w and b lengths differ");
                   }
                   if (p.w.size() != k) class_mismatch(p.w.size());
                 },
                 [&](const DirichletParams& p) {
                   const auto pk = static_cast<std::size_t>(p.num_classes);
                   if (p.weights.size() != pk * pk || p.bias.size() != pk) {
                     throw Error(ErrorCode::kDimensionMismatch, "W must be KxK and b length K");
                   }
                   if (pk != k) class_mismatch(pk);
                 },
                 [](const MetaCalParams& p) {
                   require_positive_temperature(p.t_inner);
                   require_positive_temperature(p.t_fallback);
                   if (!(p.gamma >= 0.0)) {
                     throw Error(ErrorCode::kInvalidArgument, "entropy threshold must be >= 0");
                   }
                   if (p.t_fallback < p.t_inner) {
                     throw Error(ErrorCode::kInvalidArgument, "t_fallback must be >= t_inner");
                   }
                 },
                 [&](const SelectiveParams& p) {
                   require_positive_temperature(p.t1);
                   require_positive_temperature(p.t2);
                   if (p.t1 < p.t2) throw Error(ErrorCode::kInvalidArgument, "t1 must be >= t2");
                   if (p.selector.num_classes() != num_classes) {
                     class_mismatch(static_cast<std::size_t>(p.selector.num_classes()));
                   }
                 },
                 [](const EnsembleParams& p) {
                   if (p.members < 1) throw Error(ErrorCode::kEmptyEnsemble, "no ensemble members");
                 },
             },
             params);
}

ProbMap apply_temperature(const SegLogits& logits, double temperature) {
  return softmax_with_temperature(logits, temperature);
}

ProbMap apply_vector(const SegLogits& logits, std::span<const double> w,
                     std::span<const double> b) {
  const std::size_t k = classes_of(logits);
  if (w.size() != k || b.size() != k) {
    throw Error(ErrorCode::kDimensionMismatch, "vector scaling needs w and b of length K");
  }
  std::vector<double> out(logits.num_pixels() * k);
  std::vector<double> scores(k);
  for (std::size_t i = 0; i < logits.num_pixels(); ++i) {
    const auto z = logits.pixel(i);
    for (std::size_t c = 0; c < k; ++c) scores[c] = w[c] * z[c] + b[c];
    softmax_into(std::span<const double>(scores), 1.0, std::span<double>(out).subspan(i * k, k));
  }
  return ProbMap(logits.height(), logits.width(), logits.num_classes(), std::move(out));
}

ProbMap apply_dirichlet(const SegLogits& logits, const DirichletParams& params) {
  const std::size_t k = classes_of(logits);
  if (static_cast<std::size_t>(params.num_classes) != k || params.weights.size() != k * k ||
      params.bias.size() != k) {
    throw Error(ErrorCode::kDimensionMismatch, "Dirichlet scaling needs a KxK W and length-K b");
  }
  std::vector<double> out(logits.num_pixels() * k);
  std::vector<double> log_probs(k);
  std::vector<double> scores(k);
  for (std::size_t i = 0; i < logits.num_pixels(); ++i) {
    dirichlet_scores(logits.pixel(i), params.weights, params.bias, log_probs, scores);
    softmax_into(std::span<const double>(scores), 1.0, std::span<double>(out).subspan(i * k, k));
  }
  return ProbMap(logits.height(), logits.width(), logits.num_classes(), std::move(out));
}

ProbMap apply_metacal_ext(const SegLogits& logits, double gamma, double t_inner,
                          double t_fallback) {
  require_positive_temperature(t_inner);
  require_positive_temperature(t_fallback);
  const std::size_t k = classes_of(logits);
  std::vector<double> out(logits.num_pixels() * k);
  std::vector<double> base(k);
  const double inv_inner = 1.0 / t_inner;
  const double inv_fallback = 1.0 / t_fallback;
  for (std::size_t i = 0; i < logits.num_pixels(); ++i) {
    const auto z = logits.pixel(i);
    softmax_into(z, 1.0, std::span<double>(base));
    const double conf = base[argmax_index(std::span<const double>(base))];
    const bool gated = confidence_entropy(conf) > gamma;
    softmax_into(z, gated ? inv_fallback : inv_inner, std::span<double>(out).subspan(i * k, k));
  }
  return ProbMap(logits.height(), logits.width(), logits.num_classes(), std::move(out));
}

ProbMap apply_selective(const SegLogits& logits, std::span<const std::uint8_t> flagged,
                        double t1, double t2) {
  require_positive_temperature(t1);
  require_positive_temperature(t2);
  if (flagged.size() != logits.num_pixels()) {
    throw Error(ErrorCode::kDimensionMismatch, "selector decisions do not match image size");
  }
  const std::size_t k = classes_of(logits);
  std::vector<double> out(logits.num_pixels() * k);
  const double inv_t1 = 1.0 / t1;
  const double inv_t2 = 1.0 / t2;
  for (std::size_t i = 0; i < logits.num_pixels(); ++i) {
    softmax_into(logits.pixel(i), flagged[i] ? inv_t1 : inv_t2,
                 std::span<double>(out).subspan(i * k, k));
  }
  return ProbMap(logits.height(), logits.width(), logits.num_classes(), std::move(out));
}

ProbMap ensemble_average(std::span<const ProbMap> members) {
  if (members.empty()) throw Error(ErrorCode::kEmptyEnsemble, "ensemble needs members");
  const ProbMap& first = members.front();
  for (const ProbMap& m : members) {
    if (m.height() != first.height() || m.width() != first.width() ||
        m.num_classes() != first.num_classes()) {
      throw Error(ErrorCode::kShapeMismatch, "ensemble members differ in shape");
    }
  }
  std::vector<double> out(first.values().size(), 0.0);
  for (const ProbMap& m : members) {
    const auto values = m.values();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += values[j];
  }
  const double inv_n = 1.0 / static_cast<double>(members.size());
  for (double& v : out) v *= inv_n;
  return ProbMap(first.height(), first.width(), first.num_classes(), std::move(out));
}

ProbMap apply_calibrator(const CalibratorParams& params, const SegLogits& logits) {
  validate_params(params, logits.num_classes());
  return std::visit(
      Overloaded{
          [&](const IdentityParams&) { return softmax_with_temperature(logits, 1.0); },
          [&](const TemperatureParams& p) { return apply_temperature(logits, p.temperature); },
          [&](const VectorParams& p) { return apply_vector(logits, p.w, p.b); },
          [&](const DirichletParams& p) { return apply_dirichlet(logits, p); },
          [&](const MetaCalParams& p) {
            return apply_metacal_ext(logits, p.gamma, p.t_inner, p.t_fallback);
          },
          [&](const SelectiveParams& p) {
            const auto flags = selector_decisions(p.selector, logits, p.threshold);
            return apply_selective(logits, flags, p.t1, p.t2);
          },
          [&](const EnsembleParams&) -> ProbMap {
            throw Error(ErrorCode::kInvalidArgument,
                        "ensembles average member probabilities; use ensemble_average");
          },
      },
      params);
}

PixelSet collect_pixels(const Dataset& data, std::size_t cap, std::uint64_t seed) {
  PixelSet out;
  out.num_classes = data.num_classes;
  const auto picked = stratified_pixels(data, cap, seed);
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const SegImage& image = data.images[i];
    for (std::size_t p : picked[i]) {
      const auto z = image.logits.pixel(p);
      out.logits.insert(out.logits.end(), z.begin(), z.end());
      out.labels.push_back(image.labels.label(p));
    }
  }
  return out;
}

double temperature_nll(const PixelSet& pixels, double temperature, double* d_temperature) {
  require_positive_temperature(temperature);
  if (pixels.size() == 0) throw Error(ErrorCode::kEmptyInput, "no pixels to fit");
  const double inv_t = 1.0 / temperature;
  double loss = 0.0;
  double grad = 0.0;
  const auto k = static_cast<std::size_t>(pixels.num_classes);
  std::vector<double> probs(k);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto z = pixels.row(i);
    double max_score = z[0] * inv_t;
    for (double v : z) max_score = std::max(max_score, v * inv_t);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      probs[c] = std::exp(z[c] * inv_t - max_score);
      total += probs[c];
    }
    const std::size_t y = pixels.labels[i];
    loss += max_score + std::log(total) - z[y] * inv_t;
    if (d_temperature != nullptr) {
      double expected = 0.0;
      for (std::size_t c = 0; c < k; ++c) expected += probs[c] / total * z[c];
      grad += (z[y] - expected) * inv_t * inv_t;
    }
  }
  const auto n = static_cast<double>(pixels.size());
  if (d_temperature != nullptr) *d_temperature = grad / n;
  return loss / n;
}

double vector_nll(const PixelSet& pixels, std::span<const double> params,
                  std::span<const std::size_t> batch, std::span<double> grad) {
  const auto k = static_cast<std::size_t>(pixels.num_classes);
  if (params.size() != 2 * k) throw Error(ErrorCode::kDimensionMismatch, "vector params size");
  std::vector<std::size_t> everything;
  if (batch.empty()) {
    everything = all_indices(pixels.size());
    batch = everything;
  }
  const auto w = params.subspan(0, k);
  const auto b = params.subspan(k, k);
  std::vector<double> scores(k);
  std::vector<double> probs(k);
  double loss = 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (std::size_t idx : batch) {
    const auto z = pixels.row(idx);
    for (std::size_t c = 0; c < k; ++c) scores[c] = w[c] * z[c] + b[c];
    const double max_score = *std::max_element(scores.begin(), scores.end());
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      probs[c] = std::exp(scores[c] - max_score);
      total += probs[c];
    }
    const std::size_t y = pixels.labels[idx];
    loss += max_score + std::log(total) - scores[y];
    if (!grad.empty()) {
      for (std::size_t c = 0; c < k; ++c) {
        const double g = (probs[c] / total - (c == y ? 1.0 : 0.0)) * scale;
        grad[c] += g * z[c];
        grad[k + c] += g;
      }
    }
  }
  return loss * scale;
}

double dirichlet_nll(const PixelSet& pixels, std::span<const double> params, double lambda,
                     std::span<const std::size_t> batch, std::span<double> grad) {
  const auto k = static_cast<std::size_t>(pixels.num_classes);
  if (params.size() != k * k + k) {
    throw Error(ErrorCode::kDimensionMismatch, "Dirichlet params size");
  }
  std::vector<std::size_t> everything;
  if (batch.empty()) {
    everything = all_indices(pixels.size());
    batch = everything;
  }
  const auto weights = params.subspan(0, k * k);
  const auto bias = params.subspan(k * k, k);
  std::vector<double> log_probs(k);
  std::vector<double> scores(k);
  double loss = 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (std::size_t idx : batch) {
    dirichlet_scores(pixels.row(idx), weights, bias, log_probs, scores);
    const double max_score = *std::max_element(scores.begin(), scores.end());
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      scores[c] = std::exp(scores[c] - max_score);
      total += scores[c];
    }
    const std::size_t y = pixels.labels[idx];
    // scores now holds unnormalized probabilities; recover u_y for the loss.
    double u_y = bias[y];
    for (std::size_t i = 0; i < k; ++i) u_y += weights[y * k + i] * log_probs[i];
    loss += max_score + std::log(total) - u_y;
    if (!grad.empty()) {
      for (std::size_t j = 0; j < k; ++j) {
        const double g = (scores[j] / total - (j == y ? 1.0 : 0.0)) * scale;
        for (std::size_t i = 0; i < k; ++i) grad[j * k + i] += g * log_probs[i];
        grad[k * k + j] += g;
      }
    }
  }
  double penalty = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < k; ++i) {
      if (i == j) continue;
      const double wji = weights[j * k + i];
      penalty += wji * wji;
      if (!grad.empty()) grad[j * k + i] += 2.0 * lambda * wji;
    }
  }
  return loss * scale + lambda * penalty;
}

FitReport fit_temperature(const Dataset& train, const Dataset& val, const FitConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  require_train(train);
  const PixelSet pixels = collect_pixels(train, cfg.max_fit_pixels, cfg.seed);
  const double t = minimize_scalar(
      [&](double temperature) { return temperature_nll(pixels, temperature, nullptr); },
      cfg.temperature_lo, cfg.temperature_hi, cfg.temperature_tol);
  return finish_report(TemperatureParams{t}, train, val, cfg, start);
}

namespace {

// AdamW on a full-data objective; returns the fitted vector, or the initial
// one if training ended with a higher objective.
AdamWResult fit_linear_map(const PixelSet& pixels, std::vector<double> init,
                           const AdamWConfig& opt,
                           const std::function<double(std::span<const double>,
                                                      std::span<const std::size_t>,
                                                      std::span<double>)>& objective) {
  BatchLossGrad loss_grad = [&](std::span<const std::size_t> batch,
                                std::span<const double> params, std::span<double> grad) {
    return objective(params, batch, grad);
  };
  const double initial = objective(init, {}, {});
  AdamWResult result = adamw_fit(init, pixels.size(), loss_grad, opt);
  if (objective(result.params, {}, {}) > initial) result.params = std::move(init);
  return result;
}

}  // namespace

FitReport fit_vector(const Dataset& train, const Dataset& val, const FitConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  require_train(train);
  const PixelSet pixels = collect_pixels(train, cfg.max_fit_pixels, cfg.seed);
  const auto k = static_cast<std::size_t>(train.num_classes);
  std::vector<double> init(2 * k, 0.0);
  std::fill(init.begin(), init.begin() + static_cast<std::ptrdiff_t>(k), 1.0);
  AdamWConfig opt = cfg.scaling_optimizer;
  opt.seed = cfg.seed;
  AdamWResult fit = fit_linear_map(
      pixels, std::move(init), opt,
      [&](std::span<const double> p, std::span<const std::size_t> batch, std::span<double> g) {
        return vector_nll(pixels, p, batch, g);
      });
  VectorParams params;
  params.w.assign(fit.params.begin(), fit.params.begin() + static_cast<std::ptrdiff_t>(k));
  params.b.assign(fit.params.begin() + static_cast<std::ptrdiff_t>(k), fit.params.end());
  center(params.b);
  FitReport report = finish_report(std::move(params), train, val, cfg, start);
  report.trace = std::move(fit.trace);
  return report;
}

FitReport fit_dirichlet(const Dataset& train, const Dataset& val, const FitConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  require_train(train);
  const PixelSet pixels = collect_pixels(train, cfg.max_fit_pixels, cfg.seed);
  const auto k = static_cast<std::size_t>(train.num_classes);
  std::vector<double> init(k * k + k, 0.0);
  for (std::size_t j = 0; j < k; ++j) init[j * k + j] = 1.0;
  AdamWConfig opt = cfg.scaling_optimizer;
  opt.seed = cfg.seed;
  AdamWResult fit = fit_linear_map(
      pixels, std::move(init), opt,
      [&](std::span<const double> p, std::span<const std::size_t> batch, std::span<double> g) {
        return dirichlet_nll(pixels, p, cfg.dirichlet_lambda, batch, g);
      });
  DirichletParams params;
  params.num_classes = train.num_classes;
  params.weights.assign(fit.params.begin(), fit.params.begin() + static_cast<std::ptrdiff_t>(k * k));
  params.bias.assign(fit.params.begin() + static_cast<std::ptrdiff_t>(k * k), fit.params.end());
  center(params.bias);
  FitReport report = finish_report(std::move(params), train, val, cfg, start);
  report.trace = std::move(fit.trace);
  return report;
}

FitReport fit_metacal_ext(const Dataset& train, const Dataset& val, const FitConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  require_train(train);
  require_val(val, "meta-cal");
  const PixelSet pixels = collect_pixels(train, cfg.max_fit_pixels, cfg.seed);
  const double t_inner = minimize_scalar(
      [&](double temperature) { return temperature_nll(pixels, temperature, nullptr); },
      cfg.temperature_lo, cfg.temperature_hi, cfg.temperature_tol);

  std::vector<double> entropies(pixels.size());
  std::vector<double> probs(static_cast<std::size_t>(pixels.num_classes));
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    softmax_into(pixels.row(i), 1.0, std::span<double>(probs));
    entropies[i] = confidence_entropy(probs[argmax_index(std::span<const double>(probs))]);
  }
  std::sort(entropies.begin(), entropies.end());

  MetaCalParams best{std::numeric_limits<double>::infinity(), t_inner, kLargeTemperature};
  double best_ece = std::numeric_limits<double>::infinity();
  for (double q : cfg.metacal_quantiles) {
    const MetaCalParams candidate{quantile_linear(entropies, q), t_inner, kLargeTemperature};
    const double ece = evaluate_calibrator(val, candidate, cfg.bins).report.dataset_ece;
    if (ece < best_ece) {
      best_ece = ece;
      best = candidate;
    }
  }
  return finish_report(best, train, val, cfg, start);
}

FitReport fit_selective(const Dataset& train, const Dataset& val, const FitConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  require_train(train);
  const SelectorData train_data =
      collect_selector_data(train, cfg.selector.max_train_pixels, cfg.seed);
  const auto wrong = std::count(train_data.incorrect.begin(), train_data.incorrect.end(), 1);
  if (wrong == 0) {
    throw Error(ErrorCode::kDegenerateLabels,
                "training split has no mispredicted pixels; selective scaling is undefined, "
                "use temperature scaling instead");
  }
  require_val(val, "selective scaling");
  const SelectorData val_data = collect_selector_data(val, cfg.selector.max_train_pixels, cfg.seed);

  SelectorConfig selector_cfg = cfg.selector;
  selector_cfg.optimizer.seed = cfg.seed;
  TrainedSelector trained = selector_train(train_data, selector_cfg, &val_data);
  const SelectorMetrics metrics =
      evaluate_selector(trained.selector, val_data, selector_cfg.threshold);

  std::vector<std::vector<std::uint8_t>> decisions(val.images.size());
  parallel_for(val.images.size(), [&](std::size_t i) {
    decisions[i] = selector_decisions(trained.selector, val.images[i].logits,
                                      selector_cfg.threshold);
  });
  auto val_ece = [&](double t1, double t2) {
    std::vector<ProbMap> probs(val.images.size());
    parallel_for(val.images.size(), [&](std::size_t i) {
      probs[i] = apply_selective(val.images[i].logits, decisions[i], t1, t2);
    });
    return evaluate_probs(val, probs, cfg.bins).dataset_ece;
  };
  const TemperaturePair temps = choose_temperatures(metrics, val_ece);

  SelectiveParams params{std::move(trained.selector), temps.t1, temps.t2, selector_cfg.threshold};
  FitReport report = finish_report(std::move(params), train, val, cfg, start);
  report.selector_metrics = metrics;
  report.trace = std::move(trained.trace);
  return report;
}

FitReport fit_method(std::string_view method, const Dataset& train, const Dataset& val,
                     const FitConfig& cfg) {
  if (method == "temp" || method == "temperature") return fit_temperature(train, val, cfg);
  if (method == "vector" || method == "logistic") return fit_vector(train, val, cfg);
  if (method == "dirichlet") return fit_dirichlet(train, val, cfg);
  if (method == "metacal") return fit_metacal_ext(train, val, cfg);
  if (method == "selective") return fit_selective(train, val, cfg);
  throw Error(ErrorCode::kInvalidArgument, "unknown calibration method '" + std::string(method) + "'");
}

EceReport evaluate_probs(const Dataset& data, std::span<const ProbMap> probs,
                         const BinningConfig& bins) {
  if (probs.size() != data.images.size()) {
    throw Error(ErrorCode::kLengthMismatch, "one probability map per image is required");
  }
  std::vector<LabeledProbs> views;
  views.reserve(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    views.push_back({data.images[i].id, probs[i], data.images[i].labels});
  }
  return dataset_ece(views, bins);
}

Evaluation evaluate_calibrator(const Dataset& data, const CalibratorParams& params,
                               const BinningConfig& bins) {
  validate_params(params, data.num_classes);
  std::vector<ProbMap> probs(data.images.size());
  std::vector<double> nll_sum(data.images.size(), 0.0);
  parallel_for(data.images.size(), [&](std::size_t i) {
    const SegImage& image = data.images[i];
    probs[i] = apply_calibrator(params, image.logits);
    for (std::size_t p = 0; p < image.labels.num_pixels(); ++p) {
      if (image.labels.ignored(p)) continue;
      nll_sum[i] -= std::log(std::max(probs[i].pixel(p)[image.labels.label(p)], kProbabilityFloor));
    }
  });
  Evaluation out;
  out.report = evaluate_probs(data, probs, bins);
  std::uint64_t pixels = 0;
  for (const ImageEce& img : out.report.per_image) pixels += img.pixels;
  out.nll = std::accumulate(nll_sum.begin(), nll_sum.end(), 0.0) / static_cast<double>(pixels);
  return out;
}

}  // namespace segcal
