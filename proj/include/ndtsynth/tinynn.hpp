#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/rng.hpp"
#include "ndtsynth/scan_data.hpp"

// Small binary CNN classifier: [conv3x3(pad 1) -> ReLU -> maxpool 2] x N,
// flatten, [dense -> ReLU] x (L - 1), dense -> 1 logit -> sigmoid.
namespace ndtsynth::nn {

struct CnnConfig {
  int n_fc_layers = 1;
  int n_conv_layers = 3;
  int channel_ratio = 3;
  int batch_size = 16;
  int early_stop = 1;
  double learning_rate = 0.014;
  double momentum = 0.176;
  int epochs = 264;

  /// Hyperparameters selected by the reference search on experimental data.
  static CnnConfig optimal() { return {}; }

  void validate() const {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    if (!in(n_fc_layers, 1, 6)) throw ConfigError("n_fc_layers must be in [1, 6]");
    if (!in(n_conv_layers, 1, 6)) throw ConfigError("n_conv_layers must be in [1, 6]");
    if (!in(channel_ratio, 1, 3)) throw ConfigError("channel_ratio must be in [1, 3]");
    if (batch_size != 16 && batch_size != 32 && batch_size != 64 && batch_size != 128 && batch_size != 256) {
      throw ConfigError("batch_size must be one of 16, 32, 64, 128, 256");
    }
    if (!in(early_stop, 0, 5)) throw ConfigError("early_stop must be in [0, 5]");
    if (!in(learning_rate, 1e-5, 0.5)) throw ConfigError("learning_rate must be in [1e-5, 0.5]");
    if (!in(momentum, 0.0, 1.0)) throw ConfigError("momentum must be in [0, 1]");
    if (!in(epochs, 100, 500)) throw ConfigError("epochs must be in [100, 500]");
  }

  bool operator==(const CnnConfig&) const = default;
};

inline nlohmann::json to_json(const CnnConfig& c) {
  return {{"n_fc_layers", c.n_fc_layers},   {"n_conv_layers", c.n_conv_layers},
          {"channel_ratio", c.channel_ratio}, {"batch_size", c.batch_size},
          {"early_stop", c.early_stop},     {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},         {"epochs", c.epochs}};
}

inline CnnConfig cnn_config_from_json(const nlohmann::json& j, bool check_ranges = true) {
  CnnConfig c;
  try {
    c.n_fc_layers = j.at("n_fc_layers").get<int>();
    c.n_conv_layers = j.at("n_conv_layers").get<int>();
    c.channel_ratio = j.at("channel_ratio").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.early_stop = j.at("early_stop").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.epochs = j.at("epochs").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cnn config: ") + e.what());
  }
  if (check_ranges) c.validate();
  return c;
}

struct ConvLayer {
  int in_channels;
  int out_channels;
  int rows;  // input (and pre-pool output) size
  int cols;
  std::size_t weight_offset;
  std::size_t bias_offset;

  int pooled_rows() const { return rows / 2; }
  int pooled_cols() const { return cols / 2; }
  std::size_t weight_count() const { return static_cast<std::size_t>(out_channels) * in_channels * 9; }
};

struct DenseLayer {
  int inputs;
  int outputs;
  std::size_t weight_offset;
  std::size_t bias_offset;
};

class CnnModel {
 public:
  const CnnConfig& config() const { return config_; }
  int input_rows() const { return rows_; }
  int input_cols() const { return cols_; }
  const std::vector<ConvLayer>& conv_layers() const { return conv_; }
  const std::vector<DenseLayer>& dense_layers() const { return dense_; }
  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  int flattened_size() const { return dense_.front().inputs; }

  std::vector<int> conv_channels() const {
    std::vector<int> out;
    for (const auto& c : conv_) out.push_back(c.out_channels);
    return out;
  }

  /// Output width of every dense layer (the last is always 1).
  std::vector<int> dense_widths() const {
    std::vector<int> out;
    for (const auto& d : dense_) out.push_back(d.outputs);
    return out;
  }

  /// Layer shapes without initialization; weights are zero.
  static CnnModel architecture(const CnnConfig& cfg, int rows = kImageSize, int cols = kImageSize) {
    if (cfg.n_conv_layers < 1 || cfg.n_fc_layers < 1 || cfg.channel_ratio < 1) {
      throw ConfigError("architecture needs at least one conv layer, one dense layer, ratio >= 1");
    }
    CnnModel m;
    m.config_ = cfg;
    m.rows_ = rows;
    m.cols_ = cols;
    std::size_t offset = 0;
    int channels = 1, r = rows, c = cols;
    for (int k = 0; k < cfg.n_conv_layers; ++k) {
      if (r / 2 < 1 || c / 2 < 1) {
        throw ConfigError("invalid shape chain: " + std::to_string(cfg.n_conv_layers) + " pooled conv layers on " +
                          std::to_string(rows) + "x" + std::to_string(cols));
      }
      ConvLayer layer{channels, channels * cfg.channel_ratio, r, c, offset, 0};
      offset += layer.weight_count();
      layer.bias_offset = offset;
      offset += static_cast<std::size_t>(layer.out_channels);
      m.conv_.push_back(layer);
      channels = layer.out_channels;
      r /= 2;
      c /= 2;
    }
    // Hidden widths shrink by floor(F / L) per layer, starting from the flattened size F.
    const int flat = channels * r * c;
    const int step = flat / cfg.n_fc_layers;
    int prev = flat;
    for (int i = 1; i <= cfg.n_fc_layers; ++i) {
      const int width = (i == cfg.n_fc_layers) ? 1 : flat - i * step;
      DenseLayer d{prev, width, offset, 0};
      offset += static_cast<std::size_t>(prev) * width;
      d.bias_offset = offset;
      offset += static_cast<std::size_t>(width);
      m.dense_.push_back(d);
      prev = width;
    }
    m.params_.assign(offset, 0.0);
    return m;
  }

 private:
  CnnConfig config_;
  int rows_ = kImageSize;
  int cols_ = kImageSize;
  std::vector<ConvLayer> conv_;
  std::vector<DenseLayer> dense_;
  std::vector<double> params_;
};

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases.
inline CnnModel build_model(const CnnConfig& cfg, Rng& rng, int rows = kImageSize, int cols = kImageSize) {
  auto m = CnnModel::architecture(cfg, rows, cols);
  auto p = m.parameters();
  for (const auto& c : m.conv_layers()) {
    const double limit = std::sqrt(6.0 / (c.in_channels * 9.0));
    for (std::size_t i = 0; i < c.weight_count(); ++i) p[c.weight_offset + i] = rng.uniform(-limit, limit);
  }
  for (const auto& d : m.dense_layers()) {
    const double limit = std::sqrt(6.0 / d.inputs);
    for (std::size_t i = 0; i < static_cast<std::size_t>(d.inputs) * d.outputs; ++i) {
      p[d.weight_offset + i] = rng.uniform(-limit, limit);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ConvCache {
  std::vector<double> padded;  // in_c x (rows + 2) x (cols + 2)
  std::vector<double> act;     // out_c x rows x cols, post-ReLU
  std::vector<std::uint32_t> argmax;  // per pooled output, index into act
  std::vector<double> pooled;
};

struct Activations {
  std::vector<ConvCache> conv;
  std::vector<std::vector<double>> dense_in;
  std::vector<std::vector<double>> dense_pre;
  double logit = 0.0;
};

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// Binary cross-entropy of a logit, computed stably.
inline double bce_with_logit(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

inline double forward(const CnnModel& model, std::span<const double> input, Activations& a) {
  const auto p = model.parameters();
  const auto& convs = model.conv_layers();
  a.conv.resize(convs.size());
  std::span<const double> x = input;
  for (std::size_t l = 0; l < convs.size(); ++l) {
    const auto& L = convs[l];
    auto& cc = a.conv[l];
    const int R = L.rows, C = L.cols, PR = R + 2, PC = C + 2;
    cc.padded.assign(static_cast<std::size_t>(L.in_channels) * PR * PC, 0.0);
    for (int ic = 0; ic < L.in_channels; ++ic)
      for (int y = 0; y < R; ++y)
        std::copy_n(x.data() + (static_cast<std::size_t>(ic) * R + y) * C, C,
                    cc.padded.data() + (static_cast<std::size_t>(ic) * PR + y + 1) * PC + 1);
    cc.act.assign(static_cast<std::size_t>(L.out_channels) * R * C, 0.0);
    for (int oc = 0; oc < L.out_channels; ++oc) {
      double* out = cc.act.data() + static_cast<std::size_t>(oc) * R * C;
      std::fill(out, out + static_cast<std::size_t>(R) * C, p[L.bias_offset + oc]);
      for (int ic = 0; ic < L.in_channels; ++ic) {
        const double* w = p.data() + L.weight_offset + (static_cast<std::size_t>(oc) * L.in_channels + ic) * 9;
        const double* in = cc.padded.data() + static_cast<std::size_t>(ic) * PR * PC;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const double wv = w[ky * 3 + kx];
            for (int y = 0; y < R; ++y) {
              const double* row = in + static_cast<std::size_t>(y + ky) * PC + kx;
              double* o = out + static_cast<std::size_t>(y) * C;
              for (int xx = 0; xx < C; ++xx) o[xx] += wv * row[xx];
            }
          }
      }
    }
    for (double& v : cc.act) v = v > 0.0 ? v : 0.0;
    const int pr = L.pooled_rows(), pc = L.pooled_cols();
    cc.pooled.assign(static_cast<std::size_t>(L.out_channels) * pr * pc, 0.0);
    cc.argmax.assign(cc.pooled.size(), 0);
    for (int c = 0; c < L.out_channels; ++c)
      for (int y = 0; y < pr; ++y)
        for (int xx = 0; xx < pc; ++xx) {
          // Ties go to the first position in row-major window order.
          std::size_t best = (static_cast<std::size_t>(c) * R + 2 * y) * C + 2 * xx;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t i = (static_cast<std::size_t>(c) * R + 2 * y + dy) * C + 2 * xx + dx;
              if (cc.act[i] > cc.act[best]) best = i;
            }
          const std::size_t o = (static_cast<std::size_t>(c) * pr + y) * pc + xx;
          cc.pooled[o] = cc.act[best];
          cc.argmax[o] = static_cast<std::uint32_t>(best);
        }
    x = cc.pooled;
  }
  const auto& dense = model.dense_layers();
  a.dense_in.resize(dense.size());
  a.dense_pre.resize(dense.size());
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t l = 0; l < dense.size(); ++l) {
    const auto& D = dense[l];
    a.dense_in[l] = h;
    auto& z = a.dense_pre[l];
    z.assign(static_cast<std::size_t>(D.outputs), 0.0);
    for (int o = 0; o < D.outputs; ++o) {
      const double* w = p.data() + D.weight_offset + static_cast<std::size_t>(o) * D.inputs;
      double acc = p[D.bias_offset + o];
      for (int i = 0; i < D.inputs; ++i) acc += w[i] * h[static_cast<std::size_t>(i)];
      z[static_cast<std::size_t>(o)] = acc;
    }
    if (l + 1 < dense.size()) {
      h.resize(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) h[i] = z[i] > 0.0 ? z[i] : 0.0;
    }
  }
  a.logit = a.dense_pre.back().front();
  return a.logit;
}

enum class ReluBackward {
  standard,
  /// Guided backpropagation: pass gradient only where both the forward input and the gradient are positive.
  guided,
};

struct BackpropTargets {
  /// Accumulates parameter gradients when non-empty (size = parameter_count()).
  std::span<double> param_grad;
  /// Conv layer whose post-ReLU activation gradient is captured (-1 for none).
  int tap_conv = -1;
  std::vector<double>* tap_grad = nullptr;
  std::vector<double>* input_grad = nullptr;
};

inline void backward(const CnnModel& model, const Activations& a, double dlogit, const BackpropTargets& t,
                     ReluBackward mode = ReluBackward::standard) {
  const auto p = model.parameters();
  const bool want_params = !t.param_grad.empty();
  auto gate = [mode](double g, double forward_value) {
    if (!(forward_value > 0.0)) return 0.0;
    if (mode == ReluBackward::guided && !(g > 0.0)) return 0.0;
    return g;
  };

  const auto& dense = model.dense_layers();
  std::vector<double> d{dlogit};
  for (std::size_t li = dense.size(); li-- > 0;) {
    const auto& D = dense[li];
    const auto& in = a.dense_in[li];
    std::vector<double> din(static_cast<std::size_t>(D.inputs), 0.0);
    for (int o = 0; o < D.outputs; ++o) {
      const double g = d[static_cast<std::size_t>(o)];
      if (g == 0.0) continue;
      const double* w = p.data() + D.weight_offset + static_cast<std::size_t>(o) * D.inputs;
      if (want_params) {
        double* gw = t.param_grad.data() + D.weight_offset + static_cast<std::size_t>(o) * D.inputs;
        for (int i = 0; i < D.inputs; ++i) gw[i] += g * in[static_cast<std::size_t>(i)];
        t.param_grad[D.bias_offset + o] += g;
      }
      for (int i = 0; i < D.inputs; ++i) din[static_cast<std::size_t>(i)] += w[i] * g;
    }
    if (li > 0) {
      const auto& pre = a.dense_pre[li - 1];
      for (std::size_t i = 0; i < din.size(); ++i) din[i] = gate(din[i], pre[i]);
    }
    d = std::move(din);
  }

  const auto& convs = model.conv_layers();
  for (std::size_t li = convs.size(); li-- > 0;) {
    const auto& L = convs[li];
    const auto& cc = a.conv[li];
    const int R = L.rows, C = L.cols, PR = R + 2, PC = C + 2;
    std::vector<double> dact(cc.act.size(), 0.0);
    for (std::size_t k = 0; k < cc.argmax.size(); ++k) dact[cc.argmax[k]] += d[k];
    if (static_cast<int>(li) == t.tap_conv && t.tap_grad) *t.tap_grad = dact;
    for (std::size_t i = 0; i < dact.size(); ++i) dact[i] = gate(dact[i], cc.act[i]);

    const bool need_input = li > 0 || t.input_grad != nullptr;
    if (!want_params && !need_input) break;
    std::vector<double> dpad(need_input ? cc.padded.size() : 0, 0.0);
    for (int oc = 0; oc < L.out_channels; ++oc) {
      const double* g = dact.data() + static_cast<std::size_t>(oc) * R * C;
      if (want_params) {
        double sum = 0.0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(R) * C; ++i) sum += g[i];
        t.param_grad[L.bias_offset + oc] += sum;
      }
      for (int ic = 0; ic < L.in_channels; ++ic) {
        const std::size_t wbase = L.weight_offset + (static_cast<std::size_t>(oc) * L.in_channels + ic) * 9;
        const double* in = cc.padded.data() + static_cast<std::size_t>(ic) * PR * PC;
        double* din = need_input ? dpad.data() + static_cast<std::size_t>(ic) * PR * PC : nullptr;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const double wv = p[wbase + ky * 3 + kx];
            double acc = 0.0;
            for (int y = 0; y < R; ++y) {
              const double* row = in + static_cast<std::size_t>(y + ky) * PC + kx;
              const double* gr = g + static_cast<std::size_t>(y) * C;
              if (want_params)
                for (int xx = 0; xx < C; ++xx) acc += gr[xx] * row[xx];
              if (din) {
                double* drow = din + static_cast<std::size_t>(y + ky) * PC + kx;
                for (int xx = 0; xx < C; ++xx) drow[xx] += wv * gr[xx];
              }
            }
            if (want_params) t.param_grad[wbase + ky * 3 + kx] += acc;
          }
      }
    }
    if (!need_input) break;
    std::vector<double> dx(static_cast<std::size_t>(L.in_channels) * R * C);
    for (int ic = 0; ic < L.in_channels; ++ic)
      for (int y = 0; y < R; ++y)
        std::copy_n(dpad.data() + (static_cast<std::size_t>(ic) * PR + y + 1) * PC + 1, C,
                    dx.data() + (static_cast<std::size_t>(ic) * R + y) * C);
    if (li > 0) {
      // dx is the gradient w.r.t. the previous layer's pooled output.
      d = std::move(dx);
    } else if (t.input_grad) {
      *t.input_grad = std::move(dx);
    }
  }
}

inline std::vector<double> to_input(const CnnModel& model, const CScanImage& img) {
  if (static_cast<int>(img.rows) != model.input_rows() || static_cast<int>(img.cols) != model.input_cols()) {
    throw DimensionError("model input pixels", static_cast<std::size_t>(model.input_rows()) * model.input_cols(),
                         img.size());
  }
  if (!img.in_unit_range()) throw DataError("model input pixels must lie in [0,1]");
  return std::vector<double>(img.pixels.begin(), img.pixels.end());
}

/// Mean binary cross-entropy over a batch; accumulates (adds) its gradient into `grad`.
inline double loss_and_gradient(const CnnModel& model, std::span<const std::vector<double>> inputs,
                                std::span<const double> labels, std::span<double> grad) {
  Activations a;
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double z = forward(model, inputs[i], a);
    loss += bce_with_logit(z, labels[i]);
    backward(model, a, (sigmoid(z) - labels[i]) * inv_n, {grad});
  }
  return loss * inv_n;
}

inline double batch_loss(const CnnModel& model, std::span<const std::vector<double>> inputs,
                         std::span<const double> labels) {
  Activations a;
  double loss = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) loss += bce_with_logit(forward(model, inputs[i], a), labels[i]);
  return loss / static_cast<double>(inputs.size());
}

inline double predict(const CnnModel& model, const CScanImage& img) {
  Activations a;
  return sigmoid(forward(model, to_input(model, img), a));
}

inline std::vector<double> predict(const CnnModel& model, std::span<const CScanImage> images) {
  std::vector<double> out;
  out.reserve(images.size());
  Activations a;
  for (const auto& img : images) out.push_back(sigmoid(forward(model, to_input(model, img), a)));
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainReport {
  std::vector<double> train_loss;  // per epoch, mean over mini-batches
  std::vector<double> val_loss;    // per epoch; empty when early stopping is off
  int stopped_epoch = 0;           // epochs actually run
  std::vector<double> final_weights;
  std::uint64_t seed = 0;

  bool operator==(const TrainReport&) const = default;
};

inline constexpr double kValidationFraction = 0.1;

/// Mini-batch SGD with momentum (v <- m v - lr g; w <- w + v) on mean BCE.
/// With early_stop > 0, a stratified 10% of the data is held out and training
/// stops after early_stop consecutive epochs without a validation improvement.
inline TrainReport train(CnnModel& model, std::span<const CScanImage> images, const CnnConfig& cfg, Rng& rng) {
  if (images.empty()) throw DataError("train: empty dataset");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < images.size(); ++i) by_class[images[i].label == Label::defective].push_back(i);
  if (by_class[0].empty() || by_class[1].empty()) throw DataError("train: dataset must contain both classes");

  std::vector<std::size_t> train_idx, val_idx;
  for (auto& cls : by_class) {
    rng.shuffle(cls);
    std::size_t n_val = 0;
    if (cfg.early_stop > 0 && cls.size() >= 2) {
      n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(kValidationFraction * cls.size())));
    }
    val_idx.insert(val_idx.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.insert(train_idx.end(), cls.begin() + static_cast<std::ptrdiff_t>(n_val), cls.end());
  }
  std::vector<std::vector<double>> x_train, x_val;
  std::vector<double> y_train, y_val;
  for (auto i : train_idx) {
    x_train.push_back(to_input(model, images[i]));
    y_train.push_back(images[i].label == Label::defective ? 1.0 : 0.0);
  }
  for (auto i : val_idx) {
    x_val.push_back(to_input(model, images[i]));
    y_val.push_back(images[i].label == Label::defective ? 1.0 : 0.0);
  }

  TrainReport report;
  report.seed = rng.seed();
  auto params = model.parameters();
  std::vector<double> velocity(params.size(), 0.0), grad(params.size());
  std::vector<std::size_t> order(x_train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<double>> bx;
  std::vector<double> by;
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;
  const std::size_t batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      bx.clear();
      by.clear();
      for (std::size_t k = start; k < end; ++k) {
        bx.push_back(x_train[order[k]]);
        by.push_back(y_train[order[k]]);
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      epoch_loss += loss_and_gradient(model, bx, by, grad);
      ++n_batches;
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * grad[i];
        params[i] += velocity[i];
      }
    }
    report.train_loss.push_back(epoch_loss / static_cast<double>(n_batches));
    report.stopped_epoch = epoch + 1;
    if (!std::isfinite(report.train_loss.back())) throw NumericError("train: loss diverged");
    if (cfg.early_stop > 0 && !x_val.empty()) {
      const double v = batch_loss(model, x_val, y_val);
      report.val_loss.push_back(v);
      if (v < best_val) {
        best_val = v;
        stale = 0;
      } else if (++stale >= cfg.early_stop) {
        break;
      }
    }
  }
  report.final_weights.assign(params.begin(), params.end());
  return report;
}

// ---------------------------------------------------------------------------
// Explanations

namespace detail {

inline void normalize_max(std::vector<double>& v) {
  const double m = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  if (m > 0.0)
    for (double& x : v) x /= m;
}

inline void normalize_min_max(std::vector<double>& v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, span = *hi - *lo;
  for (double& x : v) x = span > 0.0 ? (x - a) / span : 0.0;
}

}  // namespace detail

/// Grad-CAM heatmap at input resolution, max-normalized to [0,1]. The score is
/// the defect logit; `conv_layer` indexes the conv stack (post-ReLU maps).
inline std::vector<double> grad_cam(const CnnModel& model, const CScanImage& img, int conv_layer) {
  const auto& convs = model.conv_layers();
  if (conv_layer < 0 || conv_layer >= static_cast<int>(convs.size())) {
    throw DataError("grad_cam: conv layer index " + std::to_string(conv_layer) + " out of range");
  }
  const auto x = to_input(model, img);
  Activations a;
  forward(model, x, a);
  std::vector<double> dA;
  backward(model, a, 1.0, {{}, conv_layer, &dA, nullptr});

  const auto& L = convs[static_cast<std::size_t>(conv_layer)];
  const auto& A = a.conv[static_cast<std::size_t>(conv_layer)].act;
  const std::size_t plane = static_cast<std::size_t>(L.rows) * L.cols;
  std::vector<double> cam(plane, 0.0);
  for (int k = 0; k < L.out_channels; ++k) {
    const double* g = dA.data() + k * plane;
    const double alpha = std::accumulate(g, g + plane, 0.0) / static_cast<double>(plane);
    const double* act = A.data() + k * plane;
    for (std::size_t i = 0; i < plane; ++i) cam[i] += alpha * act[i];
  }
  for (double& v : cam) v = std::max(0.0, v);

  const int R = model.input_rows(), C = model.input_cols();
  std::vector<double> heat(static_cast<std::size_t>(R) * C);
  for (int y = 0; y < R; ++y)
    for (int xx = 0; xx < C; ++xx) {
      const int sy = y * L.rows / R, sx = xx * L.cols / C;
      heat[static_cast<std::size_t>(y) * C + xx] = cam[static_cast<std::size_t>(sy) * L.cols + sx];
    }
  detail::normalize_max(heat);
  return heat;
}

/// Guided backpropagation of the defect logit w.r.t. the input.
inline std::vector<double> guided_backprop(const CnnModel& model, const CScanImage& img) {
  const auto x = to_input(model, img);
  Activations a;
  forward(model, x, a);
  std::vector<double> g;
  backward(model, a, 1.0, {{}, -1, nullptr, &g}, ReluBackward::guided);
  return g;
}

inline constexpr double kMixedImageWeight = 1.5;

struct Explanation {
  std::vector<double> heatmap;         // Grad-CAM on the last conv layer, [0,1]
  std::vector<double> guided_bp;       // raw guided gradients
  std::vector<double> guided_gradcam;  // guided_bp * heatmap
  std::vector<double> mixed;           // min-max normalized 1.5 * guided_gradcam + input
};

inline Explanation guided_gradcam(const CnnModel& model, const CScanImage& img) {
  Explanation e;
  e.heatmap = grad_cam(model, img, static_cast<int>(model.conv_layers().size()) - 1);
  e.guided_bp = guided_backprop(model, img);
  e.guided_gradcam.resize(e.heatmap.size());
  e.mixed.resize(e.heatmap.size());
  for (std::size_t i = 0; i < e.heatmap.size(); ++i) {
    e.guided_gradcam[i] = e.guided_bp[i] * e.heatmap[i];
    e.mixed[i] = kMixedImageWeight * e.guided_gradcam[i] + img.pixels[i];
  }
  detail::normalize_min_max(e.mixed);
  return e;
}

// ---------------------------------------------------------------------------
// Checkpoints: "NDTCNN\0\0", u32 version, u32 header length, JSON header, f64 weights.

inline void save_model(const CnnModel& model, std::uint64_t seed, const std::filesystem::path& path) {
  const nlohmann::json header = {{"format", "ndtsynth-cnn"},
                                 {"config", to_json(model.config())},
                                 {"seed", seed},
                                 {"input", {model.input_rows(), model.input_cols()}},
                                 {"parameter_count", model.parameter_count()}};
  const std::string h = header.dump();
  std::vector<std::uint8_t> out = {'N', 'D', 'T', 'C', 'N', 'N', 0, 0};
  io::put<std::uint32_t>(out, 1);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  for (double w : model.parameters()) io::put<double>(out, w);
  io::write_file(path, out);
}

struct LoadedModel {
  CnnModel model;
  std::uint64_t seed;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  static constexpr std::uint8_t kMagic[8] = {'N', 'D', 'T', 'C', 'N', 'N', 0, 0};
  if (bytes.size() < 16 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw DecodeError("not a model checkpoint: " + path.string());
  }
  const auto hlen = io::get<std::uint32_t>(bytes, 12);
  if (16 + static_cast<std::size_t>(hlen) > bytes.size()) throw DecodeError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("checkpoint header: ") + e.what());
  }
  const auto cfg = cnn_config_from_json(header.at("config"), false);
  const auto input = header.at("input");
  auto model = CnnModel::architecture(cfg, input.at(0).get<int>(), input.at(1).get<int>());
  const std::size_t blob = bytes.size() - 16 - hlen;
  if (blob != model.parameter_count() * sizeof(double)) {
    throw DimensionError("checkpoint weight bytes", model.parameter_count() * sizeof(double), blob);
  }
  auto p = model.parameters();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = io::get<double>(bytes, 16 + hlen + i * sizeof(double));
  return {std::move(model), header.value("seed", std::uint64_t{0})};
}

}  // namespace ndtsynth::nn
