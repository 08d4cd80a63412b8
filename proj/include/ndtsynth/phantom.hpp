#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include <json.hpp>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/rng.hpp"
#include "ndtsynth/scan_data.hpp"
#include "ndtsynth/sigproc.hpp"

// Analytical flat-bottom-hole pulse-echo phantom. Each A-scan is a sum of
// Gaussian-windowed tonebursts for the front wall, the back wall and (inside
// the hole footprint) the hole bottom. No structural noise is modelled.
namespace ndtsynth::phantom {

struct PulseSpec {
  double center_freq_hz = 5e6;
  double cycles = 3.0;
  /// Gaussian envelope width; <= 0 derives it from `cycles` (burst length / 6).
  double envelope_sigma_samples = 0.0;
  double attenuation_db_per_mm = 1.5;
  double velocity_mm_per_us = 3.0;

  double sigma_samples(double sample_rate_hz) const {
    return envelope_sigma_samples > 0.0 ? envelope_sigma_samples
                                        : cycles * sample_rate_hz / center_freq_hz / 6.0;
  }

  void validate(double sample_rate_hz) const {
    if (!(center_freq_hz > 0.0 && center_freq_hz < sample_rate_hz / 2.0)) {
      throw ConfigError("pulse center frequency must lie below Nyquist");
    }
    if (!(attenuation_db_per_mm >= 0.0)) throw ConfigError("attenuation must be >= 0");
    if (!(velocity_mm_per_us > 0.0)) throw ConfigError("velocity must be > 0");
    if (!(sigma_samples(sample_rate_hz) > 0.0)) throw ConfigError("pulse envelope width must be > 0");
  }
};

/// Plate geometry, acquisition grid and reflector strengths.
struct PhantomSetup {
  std::uint32_t scans = 64;
  std::uint32_t samples = 700;
  double thickness_mm = 8.6;
  double front_wall_sample = 40.0;
  double front_wall_amplitude = 1.0;
  double back_wall_amplitude = 0.5;
  double defect_reflectivity = 0.8;
  VolumeMeta meta{};

  double sample_rate() const { return meta.sample_rate_hz; }

  /// Pulse-echo arrival sample for a reflector at `depth_mm`.
  double time_of_flight(double depth_mm, const PulseSpec& p) const {
    return front_wall_sample + 2.0 * depth_mm / p.velocity_mm_per_us * 1e-6 * sample_rate();
  }
  double back_wall_sample(const PulseSpec& p) const { return time_of_flight(thickness_mm, p); }
};

namespace detail {
/// Toneburst support in envelope widths; samples beyond it are exactly zero.
inline constexpr double kBurstReach = 6.0;
}  // namespace detail

/// Gate that clears both wall echoes by the toneburst's full reach.
inline sigproc::GateSpec default_gate(const PulseSpec& p, const PhantomSetup& s,
                                      std::uint32_t window_len = 5) {
  const double margin = detail::kBurstReach * p.sigma_samples(s.sample_rate());
  const auto front = static_cast<std::uint32_t>(std::ceil(s.front_wall_sample + margin));
  const double back = std::floor(s.back_wall_sample(p) - margin);
  if (back <= front) throw ConfigError("plate too thin for the pulse: wall gates overlap");
  return {front, static_cast<std::uint32_t>(std::min<double>(back, s.samples)), window_len};
}

struct FbhSpec {
  double diameter_mm = 6.0;
  double depth_mm = 3.0;
  /// Hole center in (fractional) element and B-scan index units.
  double center_element = (kElements - 1) / 2.0;
  double center_scan = (kImageSize - 1) / 2.0;

  bool operator==(const FbhSpec&) const = default;
};

inline nlohmann::json to_json(const FbhSpec& s) {
  return {{"diameter_mm", s.diameter_mm},
          {"depth_mm", s.depth_mm},
          {"center_element", s.center_element},
          {"center_scan", s.center_scan}};
}

inline nlohmann::json to_json(const PulseSpec& p) {
  return {{"center_freq_hz", p.center_freq_hz},
          {"cycles", p.cycles},
          {"envelope_sigma_samples", p.envelope_sigma_samples},
          {"attenuation_db_per_mm", p.attenuation_db_per_mm},
          {"velocity_mm_per_us", p.velocity_mm_per_us}};
}

/// A simulated hole volume together with its image-space footprint.
struct FbhVolume {
  VolumeScan volume;
  FbhSpec spec;
  /// kImageSize x kImageSize, rows = elements, cols = B-scans of the centered image window.
  std::vector<std::uint8_t> mask;
};

namespace detail {

inline void add_toneburst(std::span<float> trace, double t0, double amplitude, double sigma,
                          double cycles_per_sample) {
  if (amplitude == 0.0) return;
  const double reach = kBurstReach * sigma;
  const auto lo = static_cast<long>(std::max(0.0, std::floor(t0 - reach) + 1.0));
  const auto hi = static_cast<long>(std::min<double>(static_cast<double>(trace.size()) - 1, std::ceil(t0 + reach) - 1.0));
  for (long t = lo; t <= hi; ++t) {
    const double dt = static_cast<double>(t) - t0;
    const double v = amplitude * std::exp(-dt * dt / (2.0 * sigma * sigma)) *
                     std::cos(2.0 * std::numbers::pi * cycles_per_sample * dt);
    trace[static_cast<std::size_t>(t)] = static_cast<float>(trace[static_cast<std::size_t>(t)] + v);
  }
}

inline double radial_distance_mm(const FbhSpec& s, double element, double scan, const VolumeMeta& m) {
  const double dx = (element - s.center_element) * m.element_pitch_mm;
  const double dy = (scan - s.center_scan) * m.scan_step_mm;
  return std::hypot(dx, dy);
}

// `hole` == nullptr renders the walls only.
inline VolumeScan render(const FbhSpec* hole, const PulseSpec& pulse, const PhantomSetup& setup) {
  pulse.validate(setup.sample_rate());
  if (setup.scans < kImageSize) throw DimensionError("phantom B-scans", kImageSize, setup.scans);
  const double sigma = pulse.sigma_samples(setup.sample_rate());
  const double cps = pulse.center_freq_hz / setup.sample_rate();
  const double t_back = setup.back_wall_sample(pulse);
  const double back_amp =
      setup.back_wall_amplitude * std::pow(10.0, -pulse.attenuation_db_per_mm * setup.thickness_mm / 20.0);
  const std::uint32_t b0 = sigproc::image_scan_origin(setup.scans);

  double t_hole = 0.0, hole_amp = 0.0, radius = 0.0;
  if (hole) {
    t_hole = setup.time_of_flight(hole->depth_mm, pulse);
    hole_amp = setup.defect_reflectivity * std::pow(10.0, -pulse.attenuation_db_per_mm * hole->depth_mm / 20.0);
    radius = hole->diameter_mm / 2.0;
  }

  auto vol = VolumeScan::zeros(setup.scans, kElements, setup.samples, setup.meta);
  auto data = std::move(vol).take_data();
  for (std::uint32_t b = 0; b < setup.scans; ++b) {
    for (std::uint32_t e = 0; e < kElements; ++e) {
      std::span<float> trace(data.data() + (static_cast<std::size_t>(b) * kElements + e) * setup.samples,
                             setup.samples);
      add_toneburst(trace, setup.front_wall_sample, setup.front_wall_amplitude, sigma, cps);
      double taper = 0.0;
      if (hole) {
        const double r = radial_distance_mm(*hole, e, static_cast<double>(b) - b0, setup.meta);
        if (r <= radius) taper = std::exp(-2.0 * (r / radius) * (r / radius));
        add_toneburst(trace, t_hole, hole_amp * taper, sigma, cps);
      }
      add_toneburst(trace, t_back, back_amp * (1.0 - taper), sigma, cps);
    }
  }
  return VolumeScan(setup.scans, kElements, setup.samples, std::move(data), setup.meta);
}

}  // namespace detail

/// Footprint mask (r <= radius) in image coordinates.
inline std::vector<std::uint8_t> footprint_mask(const FbhSpec& s, const VolumeMeta& meta = {}) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(kImageSize) * kImageSize, 0);
  const double radius = s.diameter_mm / 2.0;
  for (std::uint32_t row = 0; row < kImageSize; ++row)
    for (std::uint32_t col = 0; col < kImageSize; ++col)
      if (detail::radial_distance_mm(s, row, col, meta) <= radius) mask[row * kImageSize + col] = 1;
  return mask;
}

inline void validate_hole(const FbhSpec& s, const PulseSpec& pulse, const PhantomSetup& setup) {
  if (!(s.diameter_mm > 0.0)) throw ConfigError("hole diameter must be > 0");
  const double rx = s.diameter_mm / 2.0 / setup.meta.element_pitch_mm;
  const double ry = s.diameter_mm / 2.0 / setup.meta.scan_step_mm;
  if (s.center_element - rx < -0.5 || s.center_element + rx > kElements - 0.5 ||
      s.center_scan - ry < -0.5 || s.center_scan + ry > kImageSize - 0.5) {
    throw DataError("hole footprint does not fit inside the image");
  }
  const auto gate = default_gate(pulse, setup);
  const double t = setup.time_of_flight(s.depth_mm, pulse);
  if (!(s.depth_mm > 0.0) || t < gate.front_wall_end || t >= gate.back_wall_start) {
    throw DataError("hole depth " + std::to_string(s.depth_mm) + " mm maps outside the gated time range");
  }
}

inline FbhVolume simulate_fbh_volume(const FbhSpec& spec, const PulseSpec& pulse, const PhantomSetup& setup) {
  validate_hole(spec, pulse, setup);
  return {detail::render(&spec, pulse, setup), spec, footprint_mask(spec, setup.meta)};
}

/// Defect-free plate: front and back wall echoes only.
inline VolumeScan clean_volume(const PulseSpec& pulse, const PhantomSetup& setup) {
  return detail::render(nullptr, pulse, setup);
}

/// One volume per (diameter, depth) pair, diameter-major, with the hole center
/// jittered uniformly by up to `jitter_px` around the image center.
inline std::vector<FbhVolume> parametric_study(const std::vector<double>& diameters_mm,
                                               const std::vector<double>& depths_mm,
                                               const PulseSpec& pulse, const PhantomSetup& setup,
                                               Rng& rng, double jitter_px = 0.5) {
  std::vector<FbhVolume> out;
  out.reserve(diameters_mm.size() * depths_mm.size());
  for (double d : diameters_mm) {
    for (double z : depths_mm) {
      FbhSpec s;
      s.diameter_mm = d;
      s.depth_mm = z;
      s.center_element += rng.uniform(-jitter_px, jitter_px);
      s.center_scan += rng.uniform(-jitter_px, jitter_px);
      out.push_back(simulate_fbh_volume(s, pulse, setup));
    }
  }
  return out;
}

}  // namespace ndtsynth::phantom
