#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <deque>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/metrics.hpp"
#include "ndtsynth/rng.hpp"
#include "ndtsynth/scan_data.hpp"
#include "ndtsynth/tinynn.hpp"

// Regularized evolution (aging tournament search) over CnnConfig.
namespace ndtsynth::hpo {

using nn::CnnConfig;

enum class Field : int {
  n_fc_layers,
  n_conv_layers,
  channel_ratio,
  batch_size,
  early_stop,
  learning_rate,
  momentum,
  epochs,
};
inline constexpr int kFieldCount = 8;

inline constexpr std::array<const char*, kFieldCount> kFieldNames = {
    "n_fc_layers", "n_conv_layers", "channel_ratio", "batch_size",
    "early_stop",  "learning_rate", "momentum",      "epochs"};

inline const char* field_name(Field f) { return kFieldNames[static_cast<std::size_t>(f)]; }

struct IntRange {
  int lo;
  int hi;
};
struct Categorical {
  std::vector<int> values;
};
struct ContinuousRange {
  double lo;
  double hi;
  bool log_scale = false;
};
using Domain = std::variant<IntRange, Categorical, ContinuousRange>;

struct SearchSpace {
  std::array<Domain, kFieldCount> domains;

  /// The reference HPO ranges.
  static SearchSpace standard() {
    return {{IntRange{1, 6}, IntRange{1, 6}, IntRange{1, 3}, Categorical{{16, 32, 64, 128, 256}}, IntRange{0, 5},
             ContinuousRange{1e-5, 0.5, true}, ContinuousRange{0.0, 1.0, false}, IntRange{100, 500}}};
  }

  const Domain& operator[](Field f) const { return domains[static_cast<std::size_t>(f)]; }
};

inline double get_field(const CnnConfig& c, Field f) {
  switch (f) {
    case Field::n_fc_layers: return c.n_fc_layers;
    case Field::n_conv_layers: return c.n_conv_layers;
    case Field::channel_ratio: return c.channel_ratio;
    case Field::batch_size: return c.batch_size;
    case Field::early_stop: return c.early_stop;
    case Field::learning_rate: return c.learning_rate;
    case Field::momentum: return c.momentum;
    case Field::epochs: return c.epochs;
  }
  return 0.0;
}

inline void set_field(CnnConfig& c, Field f, double v) {
  const int i = static_cast<int>(std::lround(v));
  switch (f) {
    case Field::n_fc_layers: c.n_fc_layers = i; break;
    case Field::n_conv_layers: c.n_conv_layers = i; break;
    case Field::channel_ratio: c.channel_ratio = i; break;
    case Field::batch_size: c.batch_size = i; break;
    case Field::early_stop: c.early_stop = i; break;
    case Field::learning_rate: c.learning_rate = v; break;
    case Field::momentum: c.momentum = v; break;
    case Field::epochs: c.epochs = i; break;
  }
}

inline double sample_domain(const Domain& d, Rng& rng) {
  if (const auto* r = std::get_if<IntRange>(&d)) return rng.integer(r->lo, r->hi);
  if (const auto* c = std::get_if<Categorical>(&d)) return c->values[rng.below(c->values.size())];
  const auto& c = std::get<ContinuousRange>(d);
  if (c.log_scale) return std::pow(10.0, rng.uniform(std::log10(c.lo), std::log10(c.hi)));
  return rng.uniform(c.lo, c.hi);
}

inline CnnConfig random_config(const SearchSpace& space, Rng& rng) {
  CnnConfig c;
  for (int f = 0; f < kFieldCount; ++f) set_field(c, Field(f), sample_domain(space.domains[f], rng));
  return c;
}

struct Mutation {
  CnnConfig child;
  Field field;
};

/// Resamples exactly one uniformly chosen field until it differs from the parent.
inline Mutation mutate_one(const CnnConfig& parent, const SearchSpace& space, Rng& rng) {
  const Field f = Field(rng.below(kFieldCount));
  const Domain& d = space[f];
  const bool single = (std::holds_alternative<IntRange>(d) && std::get<IntRange>(d).lo == std::get<IntRange>(d).hi) ||
                      (std::holds_alternative<Categorical>(d) && std::get<Categorical>(d).values.size() < 2);
  if (single) throw ConfigError(std::string("cannot mutate single-valued field ") + field_name(f));
  Mutation m{parent, f};
  const double old = get_field(parent, f);
  while (get_field(m.child, f) == old) set_field(m.child, f, sample_domain(d, rng));
  return m;
}

inline CnnConfig mutate(const CnnConfig& parent, const SearchSpace& space, Rng& rng) {
  return mutate_one(parent, space, rng).child;
}

using Warn = std::function<void(const std::string&)>;

inline void warn_stderr(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

inline constexpr double kHpoTestFraction = 0.2;

struct Split {
  std::vector<CScanImage> train;
  std::vector<CScanImage> test;
};

/// Random split stratified by label; each class contributes round(fraction * n) test images (at least 1).
inline Split stratified_split(std::span<const CScanImage> images, double test_fraction, Rng& rng) {
  std::vector<std::size_t> cls[2];
  for (std::size_t i = 0; i < images.size(); ++i) cls[images[i].label == Label::defective].push_back(i);
  if (cls[0].size() < 2 || cls[1].size() < 2) throw DataError("split needs at least two images of each class");
  Split s;
  for (auto& idx : cls) {
    rng.shuffle(idx);
    const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(test_fraction * idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_test ? s.test : s.train).push_back(images[idx[k]]);
  }
  return s;
}

/// Mean test F1 over k stratified 80/20 splits. Training failures score 0.
inline double evaluate_config(const CnnConfig& cfg, std::span<const CScanImage> images, std::size_t k_splits,
                              const Rng& rng, const Warn& warn = warn_stderr) {
  if (k_splits == 0) throw ConfigError("evaluate_config: k_splits must be >= 1");
  double sum = 0.0;
  for (std::size_t k = 0; k < k_splits; ++k) {
    Rng r = rng.split(k);
    auto split = stratified_split(images, kHpoTestFraction, r);
    try {
      auto model = nn::build_model(cfg, r);
      nn::train(model, split.train, cfg, r);
      std::vector<Label> truth;
      for (const auto& img : split.test) truth.push_back(img.label);
      sum += metrics::f1(metrics::confusion(nn::predict(model, split.test), truth));
    } catch (const std::exception& e) {
      if (warn) warn("config failed to train (fitness 0): " + std::string(e.what()));
      return 0.0;
    }
  }
  return sum / static_cast<double>(k_splits);
}

struct PopulationEntry {
  CnnConfig config;
  double fitness = 0.0;
  std::uint64_t age = 0;  // insertion counter
};

struct AuditRow {
  std::uint64_t age = 0;
  long long parent_age = -1;  // -1 for the random initial population
  std::string mutated_field;
  CnnConfig config;
  double fitness = 0.0;
  double best_fitness = 0.0;
};

struct EvolutionResult {
  PopulationEntry best;
  std::vector<AuditRow> history;
  std::vector<PopulationEntry> final_population;
};

/// Evaluation callback; the Rng is a stream dedicated to the candidate.
using EvalFn = std::function<double(const CnnConfig&, const Rng&)>;

inline EvolutionResult regularized_evolution(const SearchSpace& space, const EvalFn& eval, std::size_t population,
                                             std::size_t sample_size, std::size_t iterations, Rng& rng) {
  if (sample_size < 2 || population < sample_size) {
    throw ConfigError("regularized_evolution needs population >= sample_size >= 2");
  }
  EvolutionResult out;
  std::deque<PopulationEntry> pop;
  std::uint64_t counter = 0;
  out.best.fitness = -std::numeric_limits<double>::infinity();

  auto record = [&](const CnnConfig& cfg, long long parent, const char* field) {
    const double f = eval(cfg, rng.split(0x45564f00ULL + counter));
    if (!std::isfinite(f)) throw NumericError("fitness is not finite");
    PopulationEntry e{cfg, f, counter++};
    if (f > out.best.fitness) out.best = e;
    out.history.push_back({e.age, parent, field, cfg, f, out.best.fitness});
    pop.push_back(e);
  };

  for (std::size_t i = 0; i < population; ++i) record(random_config(space, rng), -1, "");

  std::vector<std::size_t> idx(population);
  for (std::size_t it = 0; it < iterations; ++it) {
    std::iota(idx.begin(), idx.end(), 0);
    const PopulationEntry* parent = nullptr;
    for (std::size_t k = 0; k < sample_size; ++k) {
      std::swap(idx[k], idx[k + rng.below(population - k)]);
      const auto& cand = pop[idx[k]];
      if (!parent || cand.fitness > parent->fitness) parent = &cand;
    }
    const auto m = mutate_one(parent->config, space, rng);
    const auto parent_age = static_cast<long long>(parent->age);
    record(m.child, parent_age, field_name(m.field));
    pop.pop_front();
  }
  out.final_population.assign(pop.begin(), pop.end());
  return out;
}

inline std::string audit_csv(const std::vector<AuditRow>& rows) {
  std::string out = "age,parent_age,mutated_field";
  for (const char* n : kFieldNames) out += std::string(",") + n;
  out += ",fitness,best_fitness\n";
  char buf[64];
  for (const auto& r : rows) {
    out += std::to_string(r.age) + "," + std::to_string(r.parent_age) + "," + r.mutated_field;
    for (int f = 0; f < kFieldCount; ++f) {
      std::snprintf(buf, sizeof buf, ",%.17g", get_field(r.config, Field(f)));
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", r.fitness, r.best_fitness);
    out += buf;
  }
  return out;
}

}  // namespace ndtsynth::hpo
