#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/fft.hpp"
#include "ndtsynth/scan_data.hpp"

namespace ndtsynth::sigproc {

/// Time-sample gate around the wall echoes, plus the C-scan window length.
struct GateSpec {
  std::uint32_t front_wall_end = 0;
  std::uint32_t back_wall_start = 0;
  std::uint32_t window_len = 5;

  void validate(std::uint32_t samples) const {
    if (window_len < 1) throw DataError("gate window_len must be >= 1");
    if (front_wall_end >= back_wall_start) throw DataError("gate front_wall_end must precede back_wall_start");
    if (back_wall_start > samples) {
      throw DimensionError("gate back_wall_start beyond trace length", samples, back_wall_start);
    }
  }
};

inline std::vector<double> zero_center(std::span<const double> trace) {
  if (trace.empty()) return {};
  const double mean = std::accumulate(trace.begin(), trace.end(), 0.0) / static_cast<double>(trace.size());
  std::vector<double> out(trace.size());
  std::transform(trace.begin(), trace.end(), out.begin(), [mean](double v) { return v - mean; });
  return out;
}

inline std::vector<double> hilbert_envelope(std::span<const double> trace) {
  if (trace.size() < 4) throw DataError("hilbert_envelope needs at least 4 samples");
  return fft::analytic_magnitude(trace);
}

/// Zero-centers and envelope-detects every A-scan of a raw volume.
inline VolumeScan envelope_volume(const VolumeScan& raw) {
  std::vector<float> out(raw.data().size());
  std::vector<double> trace(raw.samples());
  for (std::uint32_t b = 0; b < raw.scans(); ++b) {
    for (std::uint32_t e = 0; e < raw.elements(); ++e) {
      const auto src = raw.trace(b, e);
      std::copy(src.begin(), src.end(), trace.begin());
      const auto env = hilbert_envelope(zero_center(trace));
      std::copy(env.begin(), env.end(), out.begin() + static_cast<std::ptrdiff_t>(raw.index(b, e, 0)));
    }
  }
  auto meta = raw.meta();
  meta.normalized = false;
  return VolumeScan(raw.scans(), raw.elements(), raw.samples(), std::move(out), meta);
}

/// Divides every volume of a dataset by the dataset-wide maximum.
inline std::vector<VolumeScan> normalize(std::vector<VolumeScan> volumes) {
  float peak = 0.0f;
  for (const auto& v : volumes) {
    for (float s : v.data()) {
      if (s < 0.0f) throw DataError("normalize expects non-negative envelopes");
      peak = std::max(peak, s);
    }
  }
  if (peak <= 0.0f) throw NumericError("normalize: dataset maximum is zero");
  std::vector<VolumeScan> out;
  out.reserve(volumes.size());
  for (auto& v : volumes) {
    auto meta = v.meta();
    const auto scans = v.scans(), elements = v.elements(), samples = v.samples();
    auto data = std::move(v).take_data();
    if (peak != 1.0f) {
      for (float& s : data) s = std::min(1.0f, static_cast<float>(static_cast<double>(s) / peak));
    }
    meta.normalized = true;
    meta.norm_scale = static_cast<float>(static_cast<double>(meta.norm_scale) * peak);
    out.emplace_back(scans, elements, samples, std::move(data), meta);
  }
  return out;
}

inline VolumeScan normalize(VolumeScan v) {
  std::vector<VolumeScan> one;
  one.push_back(std::move(v));
  return std::move(normalize(std::move(one)).front());
}

/// Keeps samples [front_wall_end, back_wall_start) of every A-scan.
inline VolumeScan truncate_walls(const VolumeScan& v, const GateSpec& g) {
  if (!v.meta().normalized) throw DataError("truncate_walls expects a normalized volume");
  g.validate(v.samples());
  const std::uint32_t len = g.back_wall_start - g.front_wall_end;
  std::vector<float> out(static_cast<std::size_t>(v.scans()) * v.elements() * len);
  std::size_t at = 0;
  for (std::uint32_t b = 0; b < v.scans(); ++b)
    for (std::uint32_t e = 0; e < v.elements(); ++e) {
      const auto tr = v.trace(b, e).subspan(g.front_wall_end, len);
      std::copy(tr.begin(), tr.end(), out.begin() + static_cast<std::ptrdiff_t>(at));
      at += len;
    }
  auto meta = v.meta();
  if (meta.original_samples == 0) meta.original_samples = v.samples();
  meta.time_offset += g.front_wall_end;
  return VolumeScan(v.scans(), v.elements(), len, std::move(out), meta);
}

/// First B-scan of the centered kImageSize-wide window used for images.
inline std::uint32_t image_scan_origin(std::uint32_t scans) { return (scans - kImageSize) / 2; }

/// Max-amplitude C-scan for samples [t0, t0 + len) of a gated volume.
/// Rows are elements, columns are B-scans.
inline CScanImage cscan_window(const VolumeScan& v, std::uint32_t t0, std::uint32_t len) {
  if (v.scans() < kImageSize) throw DimensionError("C-scan needs B-scans", kImageSize, v.scans());
  if (t0 + len > v.samples()) throw DimensionError("C-scan window end", v.samples(), t0 + len);
  const std::uint32_t b0 = image_scan_origin(v.scans());
  CScanImage img = CScanImage::filled(kImageSize, kImageSize, 0.0f);
  for (std::uint32_t col = 0; col < kImageSize; ++col)
    for (std::uint32_t row = 0; row < kImageSize; ++row) {
      const auto tr = v.trace(b0 + col, row).subspan(t0, len);
      img.pixels[static_cast<std::size_t>(row) * kImageSize + col] = *std::max_element(tr.begin(), tr.end());
    }
  img.depth_gate = {v.meta().time_offset + t0, v.meta().time_offset + t0 + len};
  return img;
}

/// One image per whole window of `window_len` samples; a trailing partial window is dropped.
inline std::vector<CScanImage> extract_cscans(const VolumeScan& v, const GateSpec& g) {
  if (g.window_len < 1) throw DataError("gate window_len must be >= 1");
  if (v.samples() < g.window_len) throw DimensionError("gated samples for one window", g.window_len, v.samples());
  if (v.elements() < kImageSize) throw DimensionError("C-scan needs elements", kImageSize, v.elements());
  if (v.scans() < kImageSize) throw DimensionError("C-scan needs B-scans", kImageSize, v.scans());
  const std::uint32_t n = v.samples() / g.window_len;
  std::vector<CScanImage> images;
  images.reserve(n);
  for (std::uint32_t w = 0; w < n; ++w) images.push_back(cscan_window(v, w * g.window_len, g.window_len));
  return images;
}

}  // namespace ndtsynth::sigproc
