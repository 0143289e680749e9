#include "segcal/selector.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>

#include "segcal/calibrators.hpp"
#include "segcal/parallel.hpp"
#include "segcal/random.hpp"

namespace segcal {
namespace {

double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

// log(1 + exp(a)) without overflow.
double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }

std::size_t parameter_count(const std::vector<int>& sizes) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    n += static_cast<std::size_t>(sizes[l]) * sizes[l + 1] + sizes[l + 1];
  }
  return n;
}

// Scratch buffers for one forward/backward pass through [K, H1, H2, 1].
struct Workspace {
  std::vector<double> input, hidden1, hidden2, delta1, delta2;
};

}  // namespace

MlpSelector::MlpSelector(int num_classes, int hidden1, int hidden2, bool sorted_input,
                         std::uint64_t seed)
    : sizes_{num_classes, hidden1, hidden2, 1}, sorted_input_(sorted_input) {
  if (num_classes < 2 || hidden1 < 1 || hidden2 < 1) {
    throw Error(ErrorCode::kInvalidArgument, "selector layer sizes must be positive");
  }
  params_.assign(parameter_count(sizes_), 0.0);
  std::mt19937_64 rng(seed);
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const int fan_in = sizes_[l];
    const int fan_out = sizes_[l + 1];
    const bool output_layer = l + 2 == sizes_.size();
    const double limit = output_layer ? std::sqrt(6.0 / (fan_in + fan_out))
                                      : std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-limit, limit);
    const std::size_t n_weights = static_cast<std::size_t>(fan_in) * fan_out;
    for (std::size_t j = 0; j < n_weights; ++j) params_[offset + j] = dist(rng);
    offset += n_weights + fan_out;
  }
}

MlpSelector::MlpSelector(std::vector<DenseLayer> layers, bool sorted_input)
    : sorted_input_(sorted_input) {
  if (layers.size() != 3) {
    throw Error(ErrorCode::kInvalidArgument, "selector needs exactly three layers");
  }
  sizes_.push_back(layers.front().inputs);
  for (const DenseLayer& layer : layers) {
    if (layer.inputs != sizes_.back() || layer.outputs < 1 ||
        layer.weights.size() != static_cast<std::size_t>(layer.inputs) * layer.outputs ||
        layer.bias.size() != static_cast<std::size_t>(layer.outputs)) {
      throw Error(ErrorCode::kDimensionMismatch, "inconsistent selector layer shapes");
    }
    sizes_.push_back(layer.outputs);
  }
  if (sizes_.front() < 2 || sizes_.back() != 1) {
    throw Error(ErrorCode::kDimensionMismatch, "selector must map K >= 2 inputs to 1 output");
  }
  for (const DenseLayer& layer : layers) {
    params_.insert(params_.end(), layer.weights.begin(), layer.weights.end());
    params_.insert(params_.end(), layer.bias.begin(), layer.bias.end());
  }
  for (double p : params_) {
    if (!std::isfinite(p)) throw Error(ErrorCode::kNonFiniteInput, "non-finite selector weight");
  }
}

std::vector<DenseLayer> MlpSelector::layers() const {
  std::vector<DenseLayer> out;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    DenseLayer layer;
    layer.inputs = sizes_[l];
    layer.outputs = sizes_[l + 1];
    const std::size_t n_weights = static_cast<std::size_t>(layer.inputs) * layer.outputs;
    layer.weights.assign(params_.begin() + offset, params_.begin() + offset + n_weights);
    offset += n_weights;
    layer.bias.assign(params_.begin() + offset, params_.begin() + offset + layer.outputs);
    offset += layer.outputs;
    out.push_back(std::move(layer));
  }
  return out;
}

void MlpSelector::set_parameters(std::vector<double> params) {
  if (params.size() != params_.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "selector parameter count mismatch");
  }
  params_ = std::move(params);
}

void MlpSelector::prepare_input(std::span<const double> probs, std::span<double> out) const {
  if (probs.size() != static_cast<std::size_t>(num_classes())) {
    throw Error(ErrorCode::kDimensionMismatch,
                "selector expects " + std::to_string(num_classes()) + " probabilities, got " +
                    std::to_string(probs.size()));
  }
  std::copy(probs.begin(), probs.end(), out.begin());
  if (sorted_input_) std::sort(out.begin(), out.end(), std::greater<>());
}

namespace {

// Forward pass; fills the workspace activations and returns the output logit.
double forward_pass(const std::vector<int>& sizes, std::span<const double> params,
                    Workspace& ws) {
  const int k = sizes[0];
  const int h1 = sizes[1];
  const int h2 = sizes[2];
  const double* w0 = params.data();
  const double* b0 = w0 + static_cast<std::size_t>(h1) * k;
  const double* w1 = b0 + h1;
  const double* b1 = w1 + static_cast<std::size_t>(h2) * h1;
  const double* w2 = b1 + h2;
  const double* b2 = w2 + h2;

  for (int j = 0; j < h1; ++j) {
    double a = b0[j];
    const double* row = w0 + static_cast<std::size_t>(j) * k;
    for (int i = 0; i < k; ++i) a += row[i] * ws.input[i];
    ws.hidden1[j] = a > 0.0 ? a : 0.0;
  }
  for (int j = 0; j < h2; ++j) {
    double a = b1[j];
    const double* row = w1 + static_cast<std::size_t>(j) * h1;
    for (int i = 0; i < h1; ++i) a += row[i] * ws.hidden1[i];
    ws.hidden2[j] = a > 0.0 ? a : 0.0;
  }
  double out = b2[0];
  for (int i = 0; i < h2; ++i) out += w2[i] * ws.hidden2[i];
  return out;
}

Workspace make_workspace(const std::vector<int>& sizes) {
  Workspace ws;
  ws.input.resize(sizes[0]);
  ws.hidden1.resize(sizes[1]);
  ws.hidden2.resize(sizes[2]);
  ws.delta1.resize(sizes[1]);
  ws.delta2.resize(sizes[2]);
  return ws;
}

}  // namespace

double MlpSelector::logit(std::span<const double> probs) const {
  Workspace ws = make_workspace(sizes_);
  prepare_input(probs, ws.input);
  return forward_pass(sizes_, params_, ws);
}

double MlpSelector::forward(std::span<const double> probs) const {
  return std::clamp(sigmoid(logit(probs)), kProbabilityFloor, 1.0 - kProbabilityFloor);
}

double MlpSelector::loss_grad(std::span<const double> params, const SelectorData& data,
                              std::span<const std::size_t> batch,
                              std::span<double> grad) const {
  if (data.num_classes != num_classes()) {
    throw Error(ErrorCode::kDimensionMismatch, "selector data width mismatch");
  }
  if (batch.empty()) return 0.0;
  const int k = sizes_[0];
  const int h1 = sizes_[1];
  const int h2 = sizes_[2];
  const double* w1 = params.data() + static_cast<std::size_t>(h1) * k + h1;
  const double* w2 = w1 + static_cast<std::size_t>(h2) * h1 + h2;
  double* g_w0 = grad.data();
  double* g_b0 = g_w0 + static_cast<std::size_t>(h1) * k;
  double* g_w1 = g_b0 + h1;
  double* g_b1 = g_w1 + static_cast<std::size_t>(h2) * h1;
  double* g_w2 = g_b1 + h2;
  double* g_b2 = g_w2 + h2;

  Workspace ws = make_workspace(sizes_);
  const double scale = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (std::size_t idx : batch) {
    prepare_input(data.row(idx), ws.input);
    const double a = forward_pass(sizes_, params, ws);
    const double target = data.incorrect[idx] ? 1.0 : 0.0;
    loss += softplus(a) - target * a;
    const double d_out = (sigmoid(a) - target) * scale;

    g_b2[0] += d_out;
    for (int i = 0; i < h2; ++i) {
      g_w2[i] += d_out * ws.hidden2[i];
      ws.delta2[i] = ws.hidden2[i] > 0.0 ? d_out * w2[i] : 0.0;
    }
    std::fill(ws.delta1.begin(), ws.delta1.end(), 0.0);
    for (int j = 0; j < h2; ++j) {
      const double d = ws.delta2[j];
      if (d == 0.0) continue;
      g_b1[j] += d;
      double* g_row = g_w1 + static_cast<std::size_t>(j) * h1;
      const double* w_row = w1 + static_cast<std::size_t>(j) * h1;
      for (int i = 0; i < h1; ++i) {
        g_row[i] += d * ws.hidden1[i];
        ws.delta1[i] += d * w_row[i];
      }
    }
    for (int j = 0; j < h1; ++j) {
      if (ws.hidden1[j] <= 0.0) continue;
      const double d = ws.delta1[j];
      g_b0[j] += d;
      double* g_row = g_w0 + static_cast<std::size_t>(j) * k;
      for (int i = 0; i < k; ++i) g_row[i] += d * ws.input[i];
    }
  }
  return loss * scale;
}

SelectorMetrics evaluate_selector(const MlpSelector& selector, const SelectorData& data,
                                  double threshold) {
  SelectorMetrics m;
  m.threshold = threshold;
  m.num_samples = data.size();
  std::uint64_t detected = 0;
  std::uint64_t agree = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const bool flagged = selector.forward(data.row(i)) > threshold;
    const bool wrong = data.incorrect[i] != 0;
    if (wrong) {
      ++m.num_incorrect;
      if (flagged) ++detected;
    }
    if (flagged == wrong) ++agree;
  }
  m.detection_accuracy =
      m.num_incorrect == 0 ? 0.0 : static_cast<double>(detected) / m.num_incorrect;
  m.overall_accuracy =
      m.num_samples == 0 ? 0.0 : static_cast<double>(agree) / m.num_samples;
  return m;
}

SelectorData collect_selector_data(const Dataset& data, std::size_t cap, std::uint64_t seed) {
  SelectorData out;
  out.num_classes = data.num_classes;
  const auto picked = stratified_pixels(data, cap, seed);
  const auto k = static_cast<std::size_t>(data.num_classes);
  std::vector<double> probs(k);
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const SegImage& image = data.images[i];
    for (std::size_t p : picked[i]) {
      softmax_into(image.logits.pixel(p), 1.0, std::span<double>(probs));
      out.features.insert(out.features.end(), probs.begin(), probs.end());
      const std::size_t pred = argmax_index(std::span<const double>(probs));
      out.incorrect.push_back(pred != image.labels.label(p) ? 1 : 0);
    }
  }
  return out;
}

namespace {

// Draws from a pool in shuffled order, reshuffling on exhaustion.
class CyclingPool {
 public:
  explicit CyclingPool(std::vector<std::size_t> items) : items_(std::move(items)) {}
  std::size_t next(std::mt19937_64& rng) {
    if (cursor_ == 0) std::shuffle(items_.begin(), items_.end(), rng);
    const std::size_t value = items_[cursor_];
    cursor_ = (cursor_ + 1) % items_.size();
    return value;
  }

 private:
  std::vector<std::size_t> items_;
  std::size_t cursor_ = 0;
};

}  // namespace

TrainedSelector selector_train(const SelectorData& train, const SelectorConfig& cfg,
                               const SelectorData* val) {
  std::vector<std::size_t> wrong;
  std::vector<std::size_t> right;
  for (std::size_t i = 0; i < train.size(); ++i) {
    (train.incorrect[i] ? wrong : right).push_back(i);
  }
  if (wrong.empty() || right.empty()) {
    throw Error(ErrorCode::kDegenerateLabels,
                wrong.empty() ? "training split has no mispredicted pixels"
                              : "training split has no correctly predicted pixels");
  }

  MlpSelector selector(train.num_classes, cfg.hidden1, cfg.hidden2, cfg.sorted_input,
                       derive_seed(cfg.optimizer.seed, 0x5E1EC7));
  const std::size_t batch = cfg.optimizer.batch_size;
  const std::size_t batches_per_epoch = (train.size() + batch - 1) / batch;
  const std::size_t wrong_per_batch = std::max<std::size_t>(1, batch / 2);

  auto pools = std::make_shared<std::pair<CyclingPool, CyclingPool>>(CyclingPool(wrong),
                                                                     CyclingPool(right));
  EpochOrder balanced = [pools, batch, batches_per_epoch,
                         wrong_per_batch](std::mt19937_64& rng) {
    std::vector<std::size_t> order;
    order.reserve(batches_per_epoch * batch);
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      for (std::size_t j = 0; j < batch; ++j) {
        order.push_back(j < wrong_per_batch ? pools->first.next(rng) : pools->second.next(rng));
      }
    }
    return order;
  };

  BatchLossGrad loss_grad = [&](std::span<const std::size_t> ids, std::span<const double> params,
                                std::span<double> grad) {
    return selector.loss_grad(params, train, ids, grad);
  };
  ValidationLoss val_loss;
  std::vector<std::size_t> val_ids;
  if (val != nullptr && val->size() > 0) {
    val_ids.resize(val->size());
    std::iota(val_ids.begin(), val_ids.end(), std::size_t{0});
    val_loss = [&](std::span<const double> params) {
      std::vector<double> scratch(params.size(), 0.0);
      return selector.loss_grad(params, *val, val_ids, scratch);
    };
  }

  std::vector<double> init(selector.parameters().begin(), selector.parameters().end());
  AdamWResult fit = adamw_fit(std::move(init), train.size(), loss_grad, cfg.optimizer,
                              balanced, val_loss);
  selector.set_parameters(std::move(fit.params));
  SelectorMetrics metrics = evaluate_selector(selector, train, cfg.threshold);
  return TrainedSelector{std::move(selector), metrics, std::move(fit.trace)};
}

std::vector<std::uint8_t> selector_decisions(const MlpSelector& selector,
                                             const SegLogits& logits, double threshold) {
  if (logits.num_classes() != selector.num_classes()) {
    throw Error(ErrorCode::kClassCountMismatch, "selector and logits class counts differ");
  }
  const auto k = static_cast<std::size_t>(logits.num_classes());
  std::vector<double> probs(k);
  std::vector<std::uint8_t> flags(logits.num_pixels());
  for (std::size_t i = 0; i < flags.size(); ++i) {
    softmax_into(logits.pixel(i), 1.0, std::span<double>(probs));
    flags[i] = selector.forward(probs) > threshold ? 1 : 0;
  }
  return flags;
}

TemperaturePair choose_temperatures(const SelectorMetrics& metrics,
                                    const std::function<double(double, double)>& val_ece) {
  TemperaturePair out;
  out.t2 = metrics.detection_accuracy < 0.35 ? 2.0 : 1.0;
  if (metrics.detection_accuracy > 0.5) {
    out.t1 = kLargeTemperature;
  } else {
    const double t2 = out.t2;
    out.t1 = minimize_scalar([&](double t1) { return val_ece(t1, t2); }, 1.0, 20.0, 1e-3);
  }
  out.t1 = std::max(out.t1, out.t2);
  return out;
}

std::vector<SweepPoint> selector_accuracy_sweep(const Dataset& data, std::vector<double> rates,
                                                const SweepConfig& cfg) {
  if (data.images.empty()) throw Error(ErrorCode::kEmptyDataset, "sweep needs images");
  for (double r : rates) {
    if (!(r >= 0.0 && r <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "detection rates must lie in [0, 1]");
    }
  }
  std::sort(rates.begin(), rates.end());

  // ece[image][rate]
  std::vector<std::vector<double>> ece(data.images.size(), std::vector<double>(rates.size()));
  parallel_for(data.images.size(), [&](std::size_t i) {
    const SegImage& image = data.images[i];
    const ProbMap base = softmax_with_temperature(image.logits, 1.0);
    const PredictionMap pred = argmax_predict(base);
    std::vector<std::size_t> wrong;
    for (std::size_t p = 0; p < image.labels.num_pixels(); ++p) {
      if (!image.labels.ignored(p) && pred.predicted[p] != image.labels.label(p)) {
        wrong.push_back(p);
      }
    }
    std::mt19937_64 rng(derive_seed(cfg.seed, image.id));
    std::shuffle(wrong.begin(), wrong.end(), rng);
    for (std::size_t r = 0; r < rates.size(); ++r) {
      const auto n_flag = static_cast<std::size_t>(
          std::floor(rates[r] * static_cast<double>(wrong.size())));
      std::vector<std::uint8_t> flags(image.labels.num_pixels(), 0);
      for (std::size_t j = 0; j < n_flag; ++j) flags[wrong[j]] = 1;
      const ProbMap calibrated = apply_selective(image.logits, flags, cfg.t1, cfg.t2);
      try {
        ece[i][r] = image_ece(calibrated, image.labels, cfg.bins);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kAllPixelsIgnored) throw;
        throw Error(ErrorCode::kAllPixelsIgnored,
                    "image " + std::to_string(image.id) + " has no non-ignored pixels",
                    image.id);
      }
    }
  });

  std::vector<SweepPoint> out;
  for (std::size_t r = 0; r < rates.size(); ++r) {
    double sum = 0.0;
    for (const auto& per_image : ece) sum += per_image[r];
    out.push_back({rates[r], sum / static_cast<double>(data.images.size())});
  }
  return out;
}

bool is_non_increasing(std::span<const SweepPoint> sweep, double tolerance) {
  for (std::size_t i = 1; i < sweep.size(); ++i) {
    if (sweep[i].ece > sweep[i - 1].ece + tolerance) return false;
  }
  return true;
}

}  // namespace segcal
