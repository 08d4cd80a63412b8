#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndtsynth/errors.hpp"

namespace ndtsynth::png {

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char* type,
                      std::span<const std::uint8_t> body) {
  put_be32(out, static_cast<std::uint32_t>(body.size()));
  const std::size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), body.begin(), body.end());
  const auto crc = ::crc32(0L, out.data() + type_at, static_cast<uInt>(4 + body.size()));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// Encodes an 8-bit grayscale image (row-major) as a PNG byte stream.
inline std::vector<std::uint8_t> encode_gray8(std::span<const std::uint8_t> pixels,
                                              std::uint32_t width, std::uint32_t height) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) {
    throw DimensionError("png pixel count", static_cast<std::size_t>(width) * height,
                         pixels.size());
  }
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (width + 1));
  for (std::uint32_t y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    auto row = pixels.subspan(static_cast<std::size_t>(y) * width, width);
    raw.insert(raw.end(), row.begin(), row.end());
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw std::runtime_error("png: deflate failed");
  }
  z.resize(zlen);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, width);
  detail::put_be32(ihdr, height);
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, grayscale, deflate, no filter, no interlace
  detail::put_chunk(out, "IHDR", ihdr);
  detail::put_chunk(out, "IDAT", z);
  detail::put_chunk(out, "IEND", {});
  return out;
}

inline void write_gray8(const std::string& path, std::span<const std::uint8_t> pixels,
                        std::uint32_t width, std::uint32_t height) {
  const auto bytes = encode_gray8(pixels, width, height);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed: " + path);
}

/// Minimal raster used for diagnostic plots.
class Canvas {
 public:
  Canvas(std::uint32_t width, std::uint32_t height, std::uint8_t background = 255)
      : width_(width), height_(height), px_(static_cast<std::size_t>(width) * height, background) {}

  std::uint32_t width() const { return width_; }
  std::uint32_t height() const { return height_; }

  void set(int x, int y, std::uint8_t v) {
    if (x < 0 || y < 0 || x >= static_cast<int>(width_) || y >= static_cast<int>(height_)) return;
    px_[static_cast<std::size_t>(y) * width_ + x] = v;
  }

  void fill_rect(int x0, int y0, int x1, int y1, std::uint8_t v) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, v);
  }

  void line(int x0, int y0, int x1, int y1, std::uint8_t v) {
    const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
    for (int i = 0; i <= steps; ++i) {
      const double t = steps == 0 ? 0.0 : static_cast<double>(i) / steps;
      set(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
          static_cast<int>(std::lround(y0 + t * (y1 - y0))), v);
    }
  }

  /// Pastes a [0,1] image scaled up by an integer factor.
  void blit_unit(std::span<const double> img, std::size_t rows, std::size_t cols, int x0, int y0,
                 int zoom) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const double p = std::clamp(img[r * cols + c], 0.0, 1.0);
        const auto v = static_cast<std::uint8_t>(std::floor(p * 255.0 + 0.5));
        fill_rect(x0 + static_cast<int>(c) * zoom, y0 + static_cast<int>(r) * zoom,
                  x0 + static_cast<int>(c + 1) * zoom - 1, y0 + static_cast<int>(r + 1) * zoom - 1,
                  v);
      }
  }

  void save(const std::string& path) const { write_gray8(path, px_, width_, height_); }

 private:
  std::uint32_t width_;
  std::uint32_t height_;
  std::vector<std::uint8_t> px_;
};

/// Histogram with an optional density curve overlaid (curve in data units).
inline void histogram(const std::string& path, std::span<const double> values, double lo,
                      double hi, int bins,
                      const std::function<double(double)>& density = nullptr) {
  constexpr int kW = 480, kH = 320, kPad = 20;
  Canvas canvas(kW, kH);
  std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
  const double width = (hi - lo) / bins;
  for (double v : values) {
    const auto b = static_cast<long>(std::floor((v - lo) / width));
    if (b >= 0 && b < bins) counts[static_cast<std::size_t>(b)] += 1.0;
  }
  // Counts to density so the curve shares the axis.
  const double norm = values.empty() ? 1.0 : 1.0 / (static_cast<double>(values.size()) * width);
  double ymax = 1e-300;
  for (double& c : counts) {
    c *= norm;
    ymax = std::max(ymax, c);
  }
  std::vector<double> curve;
  if (density) {
    for (int x = 0; x < kW - 2 * kPad; ++x) {
      const double d = density(lo + (hi - lo) * (x + 0.5) / (kW - 2 * kPad));
      curve.push_back(std::isfinite(d) ? d : 0.0);
      ymax = std::max(ymax, curve.back());
    }
  }
  const double plot_w = kW - 2 * kPad, plot_h = kH - 2 * kPad;
  for (int b = 0; b < bins; ++b) {
    const int x0 = kPad + static_cast<int>(plot_w * b / bins);
    const int x1 = kPad + static_cast<int>(plot_w * (b + 1) / bins) - 1;
    const int y = kH - kPad - static_cast<int>(plot_h * counts[static_cast<std::size_t>(b)] / ymax);
    canvas.fill_rect(x0, y, x1, kH - kPad, 160);
  }
  for (std::size_t x = 1; x < curve.size(); ++x) {
    canvas.line(kPad + static_cast<int>(x) - 1, kH - kPad - static_cast<int>(plot_h * curve[x - 1] / ymax),
                kPad + static_cast<int>(x), kH - kPad - static_cast<int>(plot_h * curve[x] / ymax), 0);
  }
  canvas.line(kPad, kH - kPad, kW - kPad, kH - kPad, 0);
  canvas.line(kPad, kPad, kPad, kH - kPad, 0);
  canvas.save(path);
}

/// Bars with +/- one standard deviation whiskers; values expected in [0, 1].
inline void bar_chart(const std::string& path, std::span<const double> means,
                      std::span<const double> stds) {
  constexpr int kW = 480, kH = 320, kPad = 20;
  Canvas canvas(kW, kH);
  const int n = static_cast<int>(means.size());
  const double plot_w = kW - 2 * kPad, plot_h = kH - 2 * kPad;
  for (int i = 0; i < n; ++i) {
    const int x0 = kPad + static_cast<int>(plot_w * (i + 0.15) / n);
    const int x1 = kPad + static_cast<int>(plot_w * (i + 0.85) / n);
    const double m = std::clamp(means[static_cast<std::size_t>(i)], 0.0, 1.0);
    const int y = kH - kPad - static_cast<int>(plot_h * m);
    canvas.fill_rect(x0, y, x1, kH - kPad, static_cast<std::uint8_t>(60 + 40 * (i % 4)));
    if (static_cast<std::size_t>(i) < stds.size()) {
      const double s = stds[static_cast<std::size_t>(i)];
      const int xc = (x0 + x1) / 2;
      const int ylo = kH - kPad - static_cast<int>(plot_h * std::clamp(m - s, 0.0, 1.0));
      const int yhi = kH - kPad - static_cast<int>(plot_h * std::clamp(m + s, 0.0, 1.0));
      canvas.line(xc, ylo, xc, yhi, 0);
      canvas.line(xc - 4, yhi, xc + 4, yhi, 0);
      canvas.line(xc - 4, ylo, xc + 4, ylo, 0);
    }
  }
  canvas.line(kPad, kH - kPad, kW - kPad, kH - kPad, 0);
  canvas.save(path);
}

}  // namespace ndtsynth::png
