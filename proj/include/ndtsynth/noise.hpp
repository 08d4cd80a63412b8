#pragma once

#include <Eigen/Dense>
#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/rng.hpp"
#include "ndtsynth/scan_data.hpp"
#include "ndtsynth/sigproc.hpp"

namespace ndtsynth::noise {

// ---------------------------------------------------------------------------
// Inverse-Gaussian C-scan noise

/// Shifted/scaled inverse Gaussian: y = (x - loc) / scale follows the
/// unit-shape inverse Gaussian with mean `mu`.
struct InvGaussParams {
  double mu = 0.410;
  double loc = -0.003;
  double scale = 0.066;

  void validate() const {
    if (!(mu > 0.0) || !(scale > 0.0) || !std::isfinite(loc)) {
      throw ConfigError("inverse Gaussian needs mu > 0, scale > 0, finite loc");
    }
  }
  double mean() const { return loc + scale * mu; }
};

inline nlohmann::json to_json(const InvGaussParams& p) {
  return {{"mu", p.mu}, {"loc", p.loc}, {"scale", p.scale}};
}

inline InvGaussParams invgauss_from_json(const nlohmann::json& j) {
  InvGaussParams p{j.at("mu").get<double>(), j.at("loc").get<double>(), j.at("scale").get<double>()};
  p.validate();
  return p;
}

inline double invgauss_pdf(double x, const InvGaussParams& p) {
  const double y = (x - p.loc) / p.scale;
  if (!(y > 0.0)) return 0.0;
  const double d = y - p.mu;
  return std::exp(-d * d / (2.0 * y * p.mu * p.mu)) / std::sqrt(2.0 * std::numbers::pi * y * y * y) / p.scale;
}

inline double invgauss_cdf(double x, const InvGaussParams& p) {
  const double y = (x - p.loc) / p.scale;
  if (!(y > 0.0)) return 0.0;
  const double r = std::sqrt(1.0 / y);
  // Phi(a) = erfc(-a / sqrt2) / 2. The second term's exp(2/mu) is paired with a
  // tiny erfc, so combine them in log space.
  const double a = r * (y / p.mu - 1.0);
  const double b = -r * (y / p.mu + 1.0);
  const double first = 0.5 * std::erfc(-a / std::numbers::sqrt2);
  const double tail = 0.5 * std::erfc(-b / std::numbers::sqrt2);
  const double second = tail > 0.0 ? std::exp(2.0 / p.mu + std::log(tail)) : 0.0;
  return std::clamp(first + second, 0.0, 1.0);
}

/// One draw by the normal-square transform with a uniform acceptance step
/// choosing between the two roots.
inline double sample_invgauss(const InvGaussParams& p, Rng& rng) {
  const double mu = p.mu;
  const double nu = rng.normal();
  const double y = nu * nu;
  const double x = mu + 0.5 * mu * mu * y - 0.5 * mu * std::sqrt(4.0 * mu * y + mu * mu * y * y);
  const double u = rng.uniform();
  const double ig = (u <= mu / (mu + x)) ? x : mu * mu / x;
  return p.loc + p.scale * ig;
}

/// Noise image of i.i.d. draws; negative draws are clamped to 0.
inline CScanImage sample_invgauss_image(const InvGaussParams& p, std::uint32_t rows, std::uint32_t cols,
                                        Rng& rng) {
  p.validate();
  auto img = CScanImage::filled(rows, cols, 0.0f);
  for (auto& px : img.pixels) px = static_cast<float>(std::max(0.0, sample_invgauss(p, rng)));
  return img;
}

namespace detail {

struct ProfileFit {
  double loglik;
  double mean;    // of x - loc
  double lambda;  // shape of x - loc
};

// Profile log-likelihood (up to a constant) with mean and shape at their
// closed-form maximizers for the given location.
inline ProfileFit invgauss_profile(std::span<const double> x, double loc) {
  const double n = static_cast<double>(x.size());
  double sum = 0.0, sum_inv = 0.0, sum_log = 0.0;
  for (double v : x) {
    const double z = v - loc;
    sum += z;
    sum_inv += 1.0 / z;
    sum_log += std::log(z);
  }
  const double m = sum / n;
  const double inv_lambda = sum_inv / n - 1.0 / m;
  if (!(inv_lambda > 0.0)) return {-std::numeric_limits<double>::infinity(), m, 0.0};
  const double lambda = 1.0 / inv_lambda;
  return {0.5 * n * std::log(lambda) - 1.5 * sum_log, m, lambda};
}

}  // namespace detail

inline constexpr std::size_t kMinInvGaussFitSamples = 1000;

/// Maximum-likelihood (mu, loc, scale). loc is profiled by a log-spaced scan of
/// offsets below min(samples) refined with Brent's method.
inline InvGaussParams fit_invgauss(std::span<const double> samples) {
  if (samples.size() < kMinInvGaussFitSamples) {
    throw DataError("fit_invgauss needs at least " + std::to_string(kMinInvGaussFitSamples) + " samples, got " +
                    std::to_string(samples.size()));
  }
  for (double v : samples)
    if (!std::isfinite(v)) throw DataError("fit_invgauss: non-finite sample");
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *lo_it;
  const double spread = *hi_it - lo;
  if (!(spread > 0.0)) throw NumericError("fit_invgauss: degenerate (constant) samples");

  // Search over u = log10(min - loc), offsets from 1e-9 to 1e3 times the spread.
  const double u_lo = std::log10(spread) - 9.0;
  const double u_hi = std::log10(spread) + 3.0;
  auto negll = [&](double u) { return -detail::invgauss_profile(samples, lo - std::pow(10.0, u)).loglik; };

  constexpr int kGrid = 121;
  int best = 0;
  double best_val = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kGrid; ++i) {
    const double v = negll(u_lo + (u_hi - u_lo) * i / (kGrid - 1));
    if (v < best_val) {
      best_val = v;
      best = i;
    }
  }
  const double step = (u_hi - u_lo) / (kGrid - 1);
  const double a = u_lo + step * std::max(0, best - 1);
  const double b = u_lo + step * std::min(kGrid - 1, best + 1);
  const auto [u_star, f_star] = boost::math::tools::brent_find_minima(negll, a, b, 50);
  (void)f_star;

  const double loc = lo - std::pow(10.0, u_star);
  const auto fit = detail::invgauss_profile(samples, loc);
  if (!(fit.lambda > 0.0)) throw NumericError("fit_invgauss: likelihood maximization failed");
  // (x - loc) ~ IG(mean m, shape lambda)  <=>  (x - loc) / lambda ~ IG(m / lambda, 1).
  return {fit.mean / fit.lambda, loc, fit.lambda};
}

// ---------------------------------------------------------------------------
// Savitzky-Golay smoothing

struct SavgolSpec {
  std::uint32_t window = 11;
  std::uint32_t order = 3;
  bool enabled = true;

  void validate() const {
    if (!enabled) return;
    if (window % 2 == 0) throw ConfigError("Savitzky-Golay window must be odd");
    if (window <= order) throw ConfigError("Savitzky-Golay window must exceed the polynomial order");
  }
};

/// window x window hat matrix of the local least-squares polynomial fit: row k
/// gives the smoothed value at window position k.
inline Eigen::MatrixXd savgol_hat_matrix(std::uint32_t window, std::uint32_t order) {
  const int w = static_cast<int>(window);
  const int half = w / 2;
  const double s = std::max(1, half);
  Eigen::MatrixXd vander(w, order + 1);
  for (int j = 0; j < w; ++j) {
    const double x = (j - half) / s;
    double xp = 1.0;
    for (std::uint32_t q = 0; q <= order; ++q, xp *= x) vander(j, q) = xp;
  }
  const Eigen::MatrixXd pinv = vander.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(w, w));
  return vander * pinv;
}

/// Interior points use the centered window; the first and last half-windows are
/// evaluated from the polynomial fitted to the first/last full window.
inline std::vector<double> savgol_filter(std::span<const double> signal, std::uint32_t window, std::uint32_t order) {
  SavgolSpec{window, order, true}.validate();
  const std::size_t n = signal.size();
  if (window > n) throw ConfigError("Savitzky-Golay window longer than the signal");
  const auto hat = savgol_hat_matrix(window, order);
  const std::size_t half = window / 2;
  std::vector<double> out(n);
  auto apply = [&](std::size_t row, std::size_t start) {
    double acc = 0.0;
    for (std::size_t j = 0; j < window; ++j) acc += hat(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) * signal[start + j];
    return acc;
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (i < half) out[i] = apply(i, 0);
    else if (i + half >= n) out[i] = apply(window - (n - i), n - window);
    else out[i] = apply(half, i - half);
  }
  return out;
}

// ---------------------------------------------------------------------------
// A-scan structural + random noise

struct BscanDecomposition {
  std::vector<double> structural;  // [time]
  std::vector<double> residuals;   // [a_scan][time]
};

/// Splits a B-scan ([a_scan][time], row-major) into its per-sample mean across
/// A-scans and the per-A-scan residuals.
inline BscanDecomposition decompose_bscan(std::span<const float> bscan, std::size_t n_ascans, std::size_t samples) {
  if (n_ascans < 2) throw DataError("decompose_bscan needs at least 2 A-scans");
  if (bscan.size() != n_ascans * samples) throw DimensionError("B-scan size", n_ascans * samples, bscan.size());
  BscanDecomposition d{std::vector<double>(samples, 0.0), std::vector<double>(bscan.size())};
  for (std::size_t e = 0; e < n_ascans; ++e)
    for (std::size_t t = 0; t < samples; ++t) d.structural[t] += bscan[e * samples + t];
  for (double& s : d.structural) s /= static_cast<double>(n_ascans);
  for (std::size_t e = 0; e < n_ascans; ++e)
    for (std::size_t t = 0; t < samples; ++t) d.residuals[e * samples + t] = bscan[e * samples + t] - d.structural[t];
  return d;
}

struct AScanNoiseModel {
  std::vector<double> mean_structural;
  double structural_dev_sigma = 0.0;
  double random_sigma = 0.0;
  SavgolSpec savgol;
  /// Absolute time sample of mean_structural[0] (the gated volume's time offset).
  std::uint32_t profile_offset = 0;

  void validate() const {
    savgol.validate();
    if (!(structural_dev_sigma >= 0.0) || !(random_sigma >= 0.0)) throw ConfigError("noise sigmas must be >= 0");
    if (mean_structural.empty()) throw ConfigError("noise model has an empty structural profile");
    if (savgol.enabled && savgol.window > mean_structural.size()) {
      throw ConfigError("Savitzky-Golay window longer than the structural profile");
    }
  }
};

inline nlohmann::json to_json(const AScanNoiseModel& m) {
  return {{"mean_structural", m.mean_structural},
          {"sigma_s", m.structural_dev_sigma},
          {"sigma_r", m.random_sigma},
          {"savgol", {{"window", m.savgol.window}, {"order", m.savgol.order}, {"enabled", m.savgol.enabled}}},
          {"profile_offset", m.profile_offset}};
}

inline AScanNoiseModel ascan_model_from_json(const nlohmann::json& j) {
  AScanNoiseModel m;
  try {
    m.mean_structural = j.at("mean_structural").get<std::vector<double>>();
    m.structural_dev_sigma = j.at("sigma_s").get<double>();
    m.random_sigma = j.at("sigma_r").get<double>();
    const auto& sg = j.at("savgol");
    m.savgol = {sg.at("window").get<std::uint32_t>(), sg.at("order").get<std::uint32_t>(), sg.value("enabled", true)};
    m.profile_offset = j.value("profile_offset", 0u);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("A-scan noise model: ") + e.what());
  }
  m.validate();
  return m;
}

/// Fits the structural profile and both noise sigmas from defect-free gated
/// volumes sharing one trace length.
///
/// The residual variance is scaled by E/(E-1) for the E-sample mean it is taken
/// about. Each B-scan profile carries the random noise averaged over E A-scans
/// and is measured about the mean of B profiles, so the structural variance is
/// scaled by B/(B-1) and has sigma_r^2/E removed.
inline AScanNoiseModel fit_ascan_model(std::span<const VolumeScan> volumes, SavgolSpec savgol = {}) {
  if (volumes.empty()) throw DataError("fit_ascan_model: no volumes");
  const std::uint32_t samples = volumes.front().samples();
  const std::uint32_t elements = volumes.front().elements();
  std::size_t n_bscans = 0;
  for (const auto& v : volumes) {
    if (v.samples() != samples) throw DimensionError("fit_ascan_model trace length", samples, v.samples());
    n_bscans += v.scans();
  }
  if (n_bscans < 2) throw DataError("fit_ascan_model needs at least 2 B-scans");

  std::vector<std::vector<double>> profiles;
  profiles.reserve(n_bscans);
  double sum_sq_resid = 0.0;
  std::size_t n_resid = 0;
  for (const auto& v : volumes) {
    const std::size_t per_b = static_cast<std::size_t>(elements) * samples;
    for (std::uint32_t b = 0; b < v.scans(); ++b) {
      auto d = decompose_bscan(v.data().subspan(b * per_b, per_b), elements, samples);
      for (double r : d.residuals) sum_sq_resid += r * r;
      n_resid += d.residuals.size();
      profiles.push_back(std::move(d.structural));
    }
  }
  AScanNoiseModel m;
  m.savgol = savgol;
  m.profile_offset = volumes.front().meta().time_offset;
  m.mean_structural.assign(samples, 0.0);
  for (const auto& p : profiles)
    for (std::size_t t = 0; t < samples; ++t) m.mean_structural[t] += p[t];
  for (double& s : m.mean_structural) s /= static_cast<double>(n_bscans);

  const double e = elements;
  const double var_r = sum_sq_resid / static_cast<double>(n_resid) * e / (e - 1.0);
  double sum_sq_dev = 0.0;
  for (const auto& p : profiles)
    for (std::size_t t = 0; t < samples; ++t) sum_sq_dev += (p[t] - m.mean_structural[t]) * (p[t] - m.mean_structural[t]);
  const double bcount = static_cast<double>(n_bscans);
  const double var_s = sum_sq_dev / (bcount * samples) * bcount / (bcount - 1.0) - var_r / e;
  m.random_sigma = std::sqrt(var_r);
  m.structural_dev_sigma = std::sqrt(std::max(0.0, var_s));
  return m;
}

/// Mean profile plus N(0, sigma_s) per sample, smoothed, clamped at 0.
inline std::vector<double> synth_structural_profile(const AScanNoiseModel& m, Rng& rng) {
  m.validate();
  std::vector<double> p(m.mean_structural.size());
  for (std::size_t t = 0; t < p.size(); ++t) p[t] = m.mean_structural[t] + m.structural_dev_sigma * rng.normal();
  if (m.savgol.enabled) p = savgol_filter(p, m.savgol.window, m.savgol.order);
  for (double& v : p) v = std::max(0.0, v);
  return p;
}

/// Noise volume covering absolute samples [time_offset, time_offset + samples):
/// one fresh structural profile per B-scan, plus i.i.d. N(0, sigma_r) per sample.
inline VolumeScan synth_ascan_noise_volume(const AScanNoiseModel& m, std::uint32_t scans, Rng& rng,
                                           std::uint32_t time_offset, std::uint32_t samples,
                                           double scale = 1.0) {
  if (time_offset < m.profile_offset ||
      time_offset - m.profile_offset + static_cast<std::size_t>(samples) > m.mean_structural.size()) {
    throw DimensionError("noise profile does not cover requested samples", m.mean_structural.size(),
                         time_offset - std::min(time_offset, m.profile_offset) + samples);
  }
  const std::uint32_t first = time_offset - m.profile_offset;
  std::vector<float> data(static_cast<std::size_t>(scans) * kElements * samples);
  std::size_t at = 0;
  for (std::uint32_t b = 0; b < scans; ++b) {
    const auto profile = synth_structural_profile(m, rng);
    for (std::uint32_t e = 0; e < kElements; ++e)
      for (std::uint32_t t = 0; t < samples; ++t) {
        const double v = profile[first + t] + m.random_sigma * rng.normal();
        data[at++] = static_cast<float>(scale * std::max(0.0, v));
      }
  }
  VolumeMeta meta;
  meta.time_offset = time_offset;
  return VolumeScan(scans, kElements, samples, std::move(data), meta);
}

inline VolumeScan synth_ascan_noise_volume(const AScanNoiseModel& m, std::uint32_t scans, Rng& rng) {
  return synth_ascan_noise_volume(m, scans, rng, m.profile_offset,
                                  static_cast<std::uint32_t>(m.mean_structural.size()));
}

// ---------------------------------------------------------------------------
// Superposition and rejection

inline CScanImage superpose_clip(const CScanImage& defect, const CScanImage& noise, double noise_scale = 1.0) {
  if (defect.rows != noise.rows || defect.cols != noise.cols) {
    throw DimensionError("superpose_clip image size", defect.size(), noise.size());
  }
  CScanImage out = defect;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = static_cast<double>(defect.pixels[i]) + noise_scale * static_cast<double>(noise.pixels[i]);
    out.pixels[i] = static_cast<float>(std::min(s, 1.0));
  }
  return out;
}

/// Per-sample sum of a gated defect volume and a noise volume, clipped at 1.
inline VolumeScan superpose_clip(const VolumeScan& defect, const VolumeScan& noise) {
  if (defect.data().size() != noise.data().size() || defect.samples() != noise.samples()) {
    throw DimensionError("superpose_clip volume size", defect.data().size(), noise.data().size());
  }
  std::vector<float> out(defect.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(
        std::clamp(static_cast<double>(defect.data()[i]) + static_cast<double>(noise.data()[i]), 0.0, 1.0));
  }
  auto meta = defect.meta();
  meta.normalized = true;
  return VolumeScan(defect.scans(), defect.elements(), defect.samples(), std::move(out), meta);
}

struct RejectionPolicy {
  /// Reject when peak outside the mask times margin reaches the peak inside it.
  double margin = 1.0;

  void validate() const {
    if (!(margin >= 1.0)) throw ConfigError("rejection margin must be >= 1");
  }
};

struct MaskPeaks {
  double inside = 0.0;
  double outside = 0.0;
};

inline MaskPeaks mask_peaks(const CScanImage& img) {
  if (!img.defect_mask) throw DataError("image has no defect mask");
  const auto& mask = *img.defect_mask;
  if (mask.size() != img.size()) throw DimensionError("defect mask size", img.size(), mask.size());
  MaskPeaks p;
  for (std::size_t i = 0; i < img.size(); ++i) {
    double& slot = mask[i] ? p.inside : p.outside;
    slot = std::max(slot, static_cast<double>(img.pixels[i]));
  }
  return p;
}

/// True when the image should be discarded because noise outshines the defect.
inline bool reject(const CScanImage& img, const RejectionPolicy& policy = {}) {
  policy.validate();
  const auto p = mask_peaks(img);
  return p.outside * policy.margin >= p.inside;
}

// ---------------------------------------------------------------------------
// Dataset assembly

/// Gated, normalized defect volume whose every window is a defect image.
struct DefectVolume {
  VolumeScan volume;
  std::vector<std::uint8_t> mask;
  std::uint32_t window_len = 5;
  nlohmann::json source = nlohmann::json::object();
};

struct DefectSource {
  std::vector<CScanImage> images;
  std::vector<nlohmann::json> image_sources;
  std::vector<DefectVolume> volumes;
};

struct RealNoise {
  std::vector<CScanImage> clean_images;
  double scale = 1.0;
};

struct CScanNoise {
  InvGaussParams params;
  double scale = 1.0;
};

struct AScanNoise {
  AScanNoiseModel model;
  double scale = 1.0;
};

using NoiseSource = std::variant<RealNoise, CScanNoise, AScanNoise>;

struct SynthResult {
  Dataset dataset;
  std::size_t kept = 0;
  std::size_t rejected = 0;
  nlohmann::json noise_params;
};

namespace detail {

inline void keep_or_reject(SynthResult& r, CScanImage img, nlohmann::json source, const RejectionPolicy& policy) {
  img.label = Label::defective;
  if (reject(img, policy)) {
    ++r.rejected;
  } else {
    ++r.kept;
    r.dataset.add(std::move(img), std::move(source));
  }
}

}  // namespace detail

/// Adds noise to every defect, clips at 1 and drops rejected images. Image
/// methods add per pixel; the A-scan method adds per time sample before C-scan
/// extraction. Image i (or volume i) draws from the stream rng.split(i).
inline SynthResult make_dataset(const DefectSource& defects, const NoiseSource& source,
                                const RejectionPolicy& policy, const Rng& rng) {
  policy.validate();
  SynthResult r;
  r.dataset.seed = rng.seed();
  auto image_source = [&](std::size_t i) {
    return i < defects.image_sources.size() ? defects.image_sources[i] : nlohmann::json::object();
  };

  std::visit(
      [&](const auto& src) {
        using T = std::decay_t<decltype(src)>;
        if constexpr (std::is_same_v<T, RealNoise>) {
          if (src.clean_images.empty()) throw DataError("real-noise method needs clean images");
          r.dataset.provenance = Provenance::real_noise;
          r.noise_params = {{"method", "real-noise"}, {"clean_pool", src.clean_images.size()}, {"scale", src.scale}};
          std::vector<std::size_t> order(src.clean_images.size());
          std::iota(order.begin(), order.end(), 0);
          Rng pick = rng.split(~std::uint64_t{0});
          pick.shuffle(order);
          for (std::size_t i = 0; i < defects.images.size(); ++i) {
            const std::size_t c = order[i % order.size()];
            auto src_json = image_source(i);
            src_json["clean_image"] = c;
            detail::keep_or_reject(r, superpose_clip(defects.images[i], src.clean_images[c], src.scale),
                                   std::move(src_json), policy);
          }
        } else if constexpr (std::is_same_v<T, CScanNoise>) {
          src.params.validate();
          r.dataset.provenance = Provenance::cscan_noise;
          r.noise_params = {{"method", "cscan-noise"}, {"invgauss", to_json(src.params)}, {"scale", src.scale}};
          for (std::size_t i = 0; i < defects.images.size(); ++i) {
            Rng local = rng.split(i);
            const auto& d = defects.images[i];
            const auto n = sample_invgauss_image(src.params, d.rows, d.cols, local);
            detail::keep_or_reject(r, superpose_clip(d, n, src.scale), image_source(i), policy);
          }
        } else {
          src.model.validate();
          r.dataset.provenance = Provenance::ascan_noise;
          r.noise_params = {{"method", "ascan-noise"},
                            {"sigma_s", src.model.structural_dev_sigma},
                            {"sigma_r", src.model.random_sigma},
                            {"savgol", {{"window", src.model.savgol.window},
                                        {"order", src.model.savgol.order},
                                        {"enabled", src.model.savgol.enabled}}},
                            {"scale", src.scale}};
          for (std::size_t i = 0; i < defects.volumes.size(); ++i) {
            Rng local = rng.split(i);
            const auto& dv = defects.volumes[i];
            const auto noise = synth_ascan_noise_volume(src.model, dv.volume.scans(), local,
                                                        dv.volume.meta().time_offset, dv.volume.samples(), src.scale);
            const auto noisy = superpose_clip(dv.volume, noise);
            auto images = sigproc::extract_cscans(noisy, {0, noisy.samples(), dv.window_len});
            for (std::size_t w = 0; w < images.size(); ++w) {
              images[w].defect_mask = dv.mask;
              auto src_json = dv.source;
              src_json["volume"] = i;
              src_json["window"] = w;
              detail::keep_or_reject(r, std::move(images[w]), std::move(src_json), policy);
            }
          }
        }
      },
      source);
  return r;
}

}  // namespace ndtsynth::noise
