#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

namespace ndtsynth::fft {

namespace detail {

// FFTW's planner is not thread-safe; execution of distinct plans is.
inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct Plan {
  explicit Plan(std::size_t n) : n(n) {
    buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
    std::lock_guard lock(planner_mutex());
    forward = fftw_plan_dft_1d(static_cast<int>(n), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
    backward = fftw_plan_dft_1d(static_cast<int>(n), buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  ~Plan() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(forward);
    fftw_destroy_plan(backward);
    fftw_free(buf);
  }
  Plan(const Plan&) = delete;
  Plan& operator=(const Plan&) = delete;

  std::size_t n;
  fftw_complex* buf;
  fftw_plan forward;
  fftw_plan backward;
};

inline Plan& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, std::unique_ptr<Plan>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Plan>(n);
  return *slot;
}

}  // namespace detail

/// Magnitude of the analytic signal of a real sequence, computed by one
/// forward and one inverse DFT of length x.size() (any length).
inline std::vector<double> analytic_magnitude(std::span<const double> x) {
  const std::size_t n = x.size();
  auto& plan = detail::plan_for(n);
  auto* buf = plan.buf;
  for (std::size_t i = 0; i < n; ++i) {
    buf[i][0] = x[i];
    buf[i][1] = 0.0;
  }
  fftw_execute(plan.forward);
  // Keep DC (and Nyquist for even n) single, double positive bins, zero negative ones.
  const std::size_t half = n / 2;
  const std::size_t last_pos = (n % 2 == 0) ? half - 1 : half;
  for (std::size_t k = 1; k <= last_pos; ++k) {
    buf[k][0] *= 2.0;
    buf[k][1] *= 2.0;
  }
  for (std::size_t k = half + 1; k < n; ++k) {
    buf[k][0] = 0.0;
    buf[k][1] = 0.0;
  }
  fftw_execute(plan.backward);
  std::vector<double> out(n);
  const double scale = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::abs(std::complex<double>(buf[i][0], buf[i][1])) * scale;
  }
  return out;
}

}  // namespace ndtsynth::fft
