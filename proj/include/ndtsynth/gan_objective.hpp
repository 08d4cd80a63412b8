#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/rng.hpp"
#include "ndtsynth/scan_data.hpp"

// Generator-side loss terms for sim -> experimental translation.
namespace ndtsynth::gan {

struct ActivationMap {
  std::vector<double> values;  // sim / max(sim), in [0,1]
  double k = 0.0;              // fraction of entries above `nonzero_eps`
};

inline ActivationMap activation_map(std::span<const double> sim, double nonzero_eps = 0.0) {
  ActivationMap m;
  m.values.assign(sim.begin(), sim.end());
  if (sim.empty()) return m;
  for (double v : sim) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("activation_map: pixels must lie in [0,1]");
  }
  const double peak = *std::max_element(sim.begin(), sim.end());
  if (peak > 0.0)
    for (double& v : m.values) v /= peak;
  const auto nz = std::count_if(m.values.begin(), m.values.end(), [&](double v) { return v > nonzero_eps; });
  m.k = static_cast<double>(nz) / static_cast<double>(m.values.size());
  return m;
}

inline ActivationMap activation_map(const CScanImage& sim, double nonzero_eps = 0.0) {
  const std::vector<double> v(sim.pixels.begin(), sim.pixels.end());
  return activation_map(v, nonzero_eps);
}

/// mean(|gen_out - sim| * M / K): error on the defect response, invariant to its area.
inline double activmap_loss(std::span<const double> gen_out, std::span<const double> sim, double nonzero_eps = 0.0) {
  if (gen_out.size() != sim.size()) throw DimensionError("activmap_loss gen_out", sim.size(), gen_out.size());
  const auto m = activation_map(sim, nonzero_eps);
  if (m.k == 0.0) throw DataError("activmap_loss: simulated image has no non-zero response");
  double sum = 0.0;
  for (std::size_t i = 0; i < sim.size(); ++i) sum += std::abs(gen_out[i] - sim[i]) * m.values[i] / m.k;
  return sum / static_cast<double>(sim.size());
}

inline double activmap_loss(const CScanImage& gen_out, const CScanImage& sim, double nonzero_eps = 0.0) {
  const std::vector<double> g(gen_out.pixels.begin(), gen_out.pixels.end());
  const std::vector<double> s(sim.pixels.begin(), sim.pixels.end());
  return activmap_loss(g, s, nonzero_eps);
}

/// Expectation over a batch: mean of the per-image losses.
inline double activmap_loss_batch(std::span<const std::vector<double>> gen_out,
                                  std::span<const std::vector<double>> sim, double nonzero_eps = 0.0) {
  if (gen_out.size() != sim.size()) throw DimensionError("activmap_loss batch", sim.size(), gen_out.size());
  if (sim.empty()) throw DataError("activmap_loss: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < sim.size(); ++i) sum += activmap_loss(gen_out[i], sim[i], nonzero_eps);
  return sum / static_cast<double>(sim.size());
}

struct LossWeights {
  double lambda = 100.0;
  double w_gan_exp = 2.0 / 3.0;
  double w_gan_sim = 1.0 / 3.0;
  double w_cyc_sim = 2.0 / 3.0;
  double w_cyc_exp = 1.0 / 3.0;
  double w_activ = 200.0;

  /// Reference weighting: activation loss at twice the cycle coefficient.
  static LossWeights with_lambda(double lambda) {
    LossWeights w;
    w.lambda = lambda;
    w.w_activ = 2.0 * lambda;
    return w;
  }

  void validate() const {
    for (double v : {lambda, w_gan_exp, w_gan_sim, w_cyc_sim, w_cyc_exp, w_activ}) {
      if (!(v >= 0.0)) throw ConfigError("loss weights must be non-negative");
    }
  }
};

struct LossParts {
  double gan_exp = 0.0;
  double gan_sim = 0.0;
  double cyc_sim = 0.0;
  double cyc_exp = 0.0;
  double activ = 0.0;
};

inline double total_generator_loss(const LossParts& p, const LossWeights& w = {}) {
  w.validate();
  for (double v : {p.gan_exp, p.gan_sim, p.cyc_sim, p.cyc_exp, p.activ}) {
    if (!(v >= 0.0)) throw DataError("loss parts must be non-negative");
  }
  return w.w_gan_exp * p.gan_exp + w.w_gan_sim * p.gan_sim + w.lambda * (w.w_cyc_sim * p.cyc_sim + w.w_cyc_exp * p.cyc_exp) +
         w.w_activ * p.activ;
}

inline nlohmann::json to_json(const LossWeights& w) {
  return {{"lambda", w.lambda},       {"w_gan_exp", w.w_gan_exp}, {"w_gan_sim", w.w_gan_sim},
          {"w_cyc_sim", w.w_cyc_sim}, {"w_cyc_exp", w.w_cyc_exp}, {"w_activ", w.w_activ}};
}

inline nlohmann::json to_json(const LossParts& p) {
  return {{"gan_exp", p.gan_exp}, {"gan_sim", p.gan_sim}, {"cyc_sim", p.cyc_sim},
          {"cyc_exp", p.cyc_exp}, {"activ", p.activ}};
}

// ---------------------------------------------------------------------------
// Golden vectors for cross-implementation parity.

struct GoldenCase {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<double> sim;
  std::vector<double> gen_out;
  LossParts parts;
  LossWeights weights;
  double expected_activ_loss = 0.0;
  double expected_total = 0.0;
};

inline double round12(double x) { return std::round(x * 1e12) / 1e12; }

/// 4x4 sim with `defect_pixels` unit pixels; gen_out is 0.5 on them. Loss is 0.5 for 4 or 8 pixels.
inline GoldenCase hand_case(std::uint32_t defect_pixels) {
  GoldenCase c;
  c.name = "hand-" + std::to_string(defect_pixels) + "px";
  c.rows = c.cols = 4;
  c.sim.assign(16, 0.0);
  for (std::uint32_t i = 0; i < defect_pixels; ++i) c.sim[i] = 1.0;
  c.gen_out = c.sim;
  for (std::uint32_t i = 0; i < defect_pixels; ++i) c.gen_out[i] = 0.5;
  c.parts = {1.0, 1.0, 1.0, 1.0, 0.0};
  c.parts.activ = activmap_loss(c.gen_out, c.sim);
  c.expected_activ_loss = round12(c.parts.activ);
  c.expected_total = round12(total_generator_loss(c.parts, c.weights));
  return c;
}

inline GoldenCase random_case(std::size_t index, Rng& rng) {
  GoldenCase c;
  c.name = "random-" + std::to_string(index);
  c.rows = static_cast<std::uint32_t>(rng.integer(4, 16));
  c.cols = static_cast<std::uint32_t>(rng.integer(4, 16));
  c.sim.assign(static_cast<std::size_t>(c.rows) * c.cols, 0.0);
  // Rectangular defect response on a zero background.
  const auto r0 = rng.integer(0, c.rows - 1), c0 = rng.integer(0, c.cols - 1);
  const auto r1 = rng.integer(r0, c.rows - 1), c1 = rng.integer(c0, c.cols - 1);
  for (auto r = r0; r <= r1; ++r)
    for (auto q = c0; q <= c1; ++q) c.sim[static_cast<std::size_t>(r) * c.cols + q] = rng.uniform(0.05, 1.0);
  c.gen_out.resize(c.sim.size());
  for (std::size_t i = 0; i < c.sim.size(); ++i) c.gen_out[i] = std::clamp(c.sim[i] + rng.normal(0.0, 0.1), 0.0, 1.0);
  c.weights = LossWeights::with_lambda(rng.uniform(0.0, 200.0));
  c.parts = {rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0), rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5), 0.0};
  c.parts.activ = activmap_loss(c.gen_out, c.sim);
  c.expected_activ_loss = round12(c.parts.activ);
  c.expected_total = round12(total_generator_loss(c.parts, c.weights));
  return c;
}

inline std::vector<GoldenCase> golden_cases(std::size_t n_random, Rng& rng) {
  std::vector<GoldenCase> cases = {hand_case(4), hand_case(8)};
  for (std::size_t i = 0; i < n_random; ++i) cases.push_back(random_case(i, rng));
  return cases;
}

inline nlohmann::json golden_json(const std::vector<GoldenCase>& cases, std::uint64_t seed) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cases) {
    arr.push_back({{"name", c.name},
                   {"shape", {c.rows, c.cols}},
                   {"sim", c.sim},
                   {"gen_out", c.gen_out},
                   {"expected_activ_loss", c.expected_activ_loss},
                   {"parts", to_json(c.parts)},
                   {"weights", to_json(c.weights)},
                   {"expected_total", c.expected_total}});
  }
  return {{"format", "ndtsynth-gan-golden"}, {"version", 1}, {"seed", seed}, {"cases", arr}};
}

inline void emit_golden_vectors(const std::filesystem::path& path, std::size_t n_random, Rng& rng) {
  io::write_json(path, golden_json(golden_cases(n_random, rng), rng.seed()));
}

inline std::vector<GoldenCase> load_golden_vectors(const std::filesystem::path& path) {
  const auto j = io::read_json(path);
  if (!j.is_object() || !j.contains("cases") || j.at("cases").empty()) {
    throw DataError("golden vector file has no cases: " + path.string());
  }
  std::vector<GoldenCase> out;
  try {
    for (const auto& e : j.at("cases")) {
      GoldenCase c;
      c.name = e.at("name").get<std::string>();
      c.rows = e.at("shape").at(0).get<std::uint32_t>();
      c.cols = e.at("shape").at(1).get<std::uint32_t>();
      c.sim = e.at("sim").get<std::vector<double>>();
      c.gen_out = e.at("gen_out").get<std::vector<double>>();
      const auto& p = e.at("parts");
      c.parts = {p.at("gan_exp"), p.at("gan_sim"), p.at("cyc_sim"), p.at("cyc_exp"), p.at("activ")};
      const auto& w = e.at("weights");
      c.weights = {w.at("lambda"), w.at("w_gan_exp"), w.at("w_gan_sim"), w.at("w_cyc_sim"), w.at("w_cyc_exp"),
                   w.at("w_activ")};
      c.expected_activ_loss = e.at("expected_activ_loss");
      c.expected_total = e.at("expected_total");
      if (c.sim.size() != static_cast<std::size_t>(c.rows) * c.cols) {
        throw DimensionError("golden sim", static_cast<std::size_t>(c.rows) * c.cols, c.sim.size());
      }
      out.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DecodeError(std::string("golden vectors: ") + ex.what());
  }
  return out;
}

}  // namespace ndtsynth::gan
