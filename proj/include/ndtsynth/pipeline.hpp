#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/evo_hpo.hpp"
#include "ndtsynth/gan_objective.hpp"
#include "ndtsynth/metrics.hpp"
#include "ndtsynth/noise.hpp"
#include "ndtsynth/phantom.hpp"
#include "ndtsynth/png.hpp"
#include "ndtsynth/rng.hpp"
#include "ndtsynth/scan_data.hpp"
#include "ndtsynth/sigproc.hpp"
#include "ndtsynth/tinynn.hpp"

// Command implementations behind the CLI. Every command is a pure function of
// (config, input files, seed) and writes under <workdir>/runs/<command>-s<seed>.
namespace ndtsynth::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

inline json default_config() {
  return R"json({
    "workdir": "work",
    "write_png": true,
    "phantom": {
      "scans": 64,
      "samples": 700,
      "thickness_mm": 8.6,
      "front_wall_sample": 40.0,
      "front_wall_amplitude": 1.0,
      "back_wall_amplitude": 0.5,
      "defect_reflectivity": 0.8,
      "sample_rate_hz": 1e8,
      "element_pitch_mm": 0.8,
      "scan_step_mm": 0.8,
      "jitter_px": 0.5,
      "train_diameters_mm": [3.0, 4.0, 5.0, 6.0],
      "train_depths_mm": [1.5, 2.5, 3.5, 4.5, 5.5],
      "test_diameters_mm": [3.5, 4.5, 5.5, 6.5],
      "test_depths_mm": [2.0, 3.0, 4.0, 5.0, 6.0],
      "defect_window_fraction": 0.1
    },
    "pulse": {
      "center_freq_hz": 5e6,
      "cycles": 3.0,
      "envelope_sigma_samples": 0.0,
      "attenuation_db_per_mm": 1.5,
      "velocity_mm_per_us": 3.0
    },
    "gate": { "window_len": 5 },
    "experimental": {
      "clean_train_volumes": 2,
      "clean_test_volumes": 2,
      "sigma_r": 0.013,
      "sigma_s": 0.003,
      "mean_level": 0.05,
      "ply_ripple": 0.01,
      "ply_period_samples": 25.0
    },
    "noise": {
      "method": "ascan-noise",
      "scale": 1.0,
      "rejection_margin": 1.0,
      "savgol": { "window": 11, "order": 3, "enabled": true },
      "invgauss": null,
      "ascan_model": null,
      "clean_pool": null
    },
    "cnn": {
      "n_fc_layers": 1,
      "n_conv_layers": 3,
      "channel_ratio": 3,
      "batch_size": 16,
      "early_stop": 1,
      "learning_rate": 0.014,
      "momentum": 0.176,
      "epochs": 264
    },
    "eval": {
      "n_runs": 10,
      "epochs": 60,
      "arms": ["sim", "synth:ascan-noise"],
      "clean_per_defect_test": 1.0
    },
    "hpo": {
      "population": 8,
      "sample_size": 3,
      "iterations": 8,
      "k_splits": 2,
      "epoch_scale": 0.05,
      "max_images": 120
    },
    "explain": { "model": null, "dataset": null, "max_images": 20 },
    "golden": { "n_cases": 16 }
  })json"_json;
}

namespace detail {

inline void check_keys(const json& user, const json& defaults, const std::string& prefix) {
  if (!user.is_object() || !defaults.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) {
      if (prefix.empty() && it.key() == "seed") continue;
      throw ConfigError("unknown config key: " + key);
    }
    const auto& d = defaults.at(it.key());
    if (d.is_object()) {
      if (key == "cnn" && it.value().is_string()) continue;
      if (!it.value().is_object()) throw ConfigError("config key " + key + " must be a table");
      check_keys(it.value(), d, key);
    }
  }
}

inline bool is_seed(const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); }

inline void merge(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object()) {
      merge(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

}  // namespace detail

class Config {
 public:
  /// User document merged over the defaults. Unknown keys and a missing seed are errors.
  static Config from_json(const json& user) {
    if (!user.is_object()) throw ConfigError("config must be a JSON object");
    const auto defaults = default_config();
    detail::check_keys(user, defaults, "");
    if (!user.contains("seed") || !detail::is_seed(user.at("seed"))) {
      throw ConfigError("config needs an unsigned integer 'seed'");
    }
    Config c;
    c.doc_ = defaults;
    detail::merge(c.doc_, user);
    return c;
  }

  /// Applies "a.b.c=value"; value is parsed as JSON, falling back to a plain string.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::exception&) {
      value = text;
    }
    json patch = value;
    std::string rest = path;
    std::vector<std::string> keys;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
      keys.push_back(rest.substr(0, pos));
    }
    keys.push_back(rest);
    for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = json{{*it, patch}};
    detail::check_keys(patch, default_config(), "");
    detail::merge(doc_, patch);
    if (!detail::is_seed(doc_.at("seed"))) throw ConfigError("seed must be an unsigned integer");
  }

  static Config load(const fs::path& path, const std::vector<std::string>& overrides = {}) {
    json user;
    try {
      user = io::read_json(path);
    } catch (const DataError& e) {
      throw ConfigError(std::string("cannot read config: ") + e.what());
    }
    auto c = from_json(user);
    for (const auto& o : overrides) c.set(o);
    return c;
  }

  const json& doc() const { return doc_; }

  template <typename T>
  T get(const std::string& pointer) const {
    try {
      return doc_.at(json::json_pointer(pointer)).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config " + pointer + ": " + e.what());
    }
  }

  bool is_null(const std::string& pointer) const {
    const json::json_pointer p(pointer);
    return !doc_.contains(p) || doc_.at(p).is_null();
  }

  std::uint64_t seed() const { return get<std::uint64_t>("/seed"); }

  fs::path workdir() const {
    const fs::path w = get<std::string>("/workdir");
    if (!fs::is_directory(w)) throw ConfigError("workdir does not exist: " + w.string());
    return w;
  }

  fs::path run_dir(const std::string& command) const {
    return workdir() / "runs" / (command + "-s" + std::to_string(seed()));
  }

  phantom::PulseSpec pulse() const {
    phantom::PulseSpec p;
    p.center_freq_hz = get<double>("/pulse/center_freq_hz");
    p.cycles = get<double>("/pulse/cycles");
    p.envelope_sigma_samples = get<double>("/pulse/envelope_sigma_samples");
    p.attenuation_db_per_mm = get<double>("/pulse/attenuation_db_per_mm");
    p.velocity_mm_per_us = get<double>("/pulse/velocity_mm_per_us");
    return p;
  }

  phantom::PhantomSetup setup() const {
    phantom::PhantomSetup s;
    s.scans = get<std::uint32_t>("/phantom/scans");
    s.samples = get<std::uint32_t>("/phantom/samples");
    s.thickness_mm = get<double>("/phantom/thickness_mm");
    s.front_wall_sample = get<double>("/phantom/front_wall_sample");
    s.front_wall_amplitude = get<double>("/phantom/front_wall_amplitude");
    s.back_wall_amplitude = get<double>("/phantom/back_wall_amplitude");
    s.defect_reflectivity = get<double>("/phantom/defect_reflectivity");
    s.meta.sample_rate_hz = get<float>("/phantom/sample_rate_hz");
    s.meta.element_pitch_mm = get<float>("/phantom/element_pitch_mm");
    s.meta.scan_step_mm = get<float>("/phantom/scan_step_mm");
    if (s.scans < kImageSize) throw ConfigError("phantom.scans must be >= 64");
    pulse().validate(s.sample_rate());
    return s;
  }

  std::uint32_t window_len() const {
    const auto w = get<std::uint32_t>("/gate/window_len");
    if (w < 1) throw ConfigError("gate.window_len must be >= 1");
    return w;
  }

  noise::SavgolSpec savgol() const {
    noise::SavgolSpec s{get<std::uint32_t>("/noise/savgol/window"), get<std::uint32_t>("/noise/savgol/order"),
                        get<bool>("/noise/savgol/enabled")};
    s.validate();
    return s;
  }

  noise::RejectionPolicy rejection() const {
    noise::RejectionPolicy p{get<double>("/noise/rejection_margin")};
    p.validate();
    return p;
  }

  nn::CnnConfig cnn() const { return nn::cnn_config_from_json(doc_.at("cnn")); }

 private:
  json doc_;
};

// ---------------------------------------------------------------------------
// Shared steps

/// Envelope, dataset-wide normalization and wall truncation of raw volumes.
inline std::vector<VolumeScan> condition_volumes(std::vector<VolumeScan> raw, const sigproc::GateSpec& gate) {
  for (auto& v : raw) v = sigproc::envelope_volume(v);
  auto normalized = sigproc::normalize(std::move(raw));
  for (auto& v : normalized) v = sigproc::truncate_walls(v, gate);
  return normalized;
}

inline double mask_peak(const CScanImage& img, std::span<const std::uint8_t> mask) {
  double peak = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) peak = std::max(peak, static_cast<double>(img.pixels[i]));
  return peak;
}

/// Crops a gated defect volume to the contiguous windows whose in-mask peak
/// reaches `fraction` of the strongest window's.
inline noise::DefectVolume crop_to_defect(const VolumeScan& gated, const std::vector<std::uint8_t>& mask,
                                          std::uint32_t window_len, double fraction, json source) {
  const auto images = sigproc::extract_cscans(gated, {0, gated.samples(), window_len});
  std::vector<double> peaks;
  for (const auto& img : images) peaks.push_back(mask_peak(img, mask));
  const double top = *std::max_element(peaks.begin(), peaks.end());
  if (!(top > 0.0)) throw DataError("defect volume has no response inside its footprint");
  std::size_t first = peaks.size(), last = 0;
  for (std::size_t w = 0; w < peaks.size(); ++w) {
    if (peaks[w] >= fraction * top) {
      first = std::min(first, w);
      last = w;
    }
  }
  const auto t0 = static_cast<std::uint32_t>(first) * window_len;
  const auto t1 = static_cast<std::uint32_t>(last + 1) * window_len;
  return {sigproc::truncate_walls(gated, {t0, t1, window_len}), mask, window_len, std::move(source)};
}

inline std::vector<CScanImage> defect_images(const noise::DefectVolume& dv) {
  auto images = sigproc::extract_cscans(dv.volume, {0, dv.volume.samples(), dv.window_len});
  for (auto& img : images) {
    img.label = Label::defective;
    img.defect_mask = dv.mask;
  }
  return images;
}

inline std::vector<CScanImage> clean_images(const VolumeScan& gated, std::uint32_t window_len) {
  auto images = sigproc::extract_cscans(gated, {0, gated.samples(), window_len});
  for (auto& img : images) img.label = Label::clean;
  return images;
}

/// Ground-truth noise of the experimental analog: a ply-periodic mean profile
/// with per-B-scan structural deviation and per-sample random noise.
inline noise::AScanNoiseModel experimental_noise_model(const Config& cfg, std::uint32_t profile_offset,
                                                       std::uint32_t samples) {
  noise::AScanNoiseModel m;
  const double level = cfg.get<double>("/experimental/mean_level");
  const double ripple = cfg.get<double>("/experimental/ply_ripple");
  const double period = cfg.get<double>("/experimental/ply_period_samples");
  if (!(period > 0.0)) throw ConfigError("experimental.ply_period_samples must be > 0");
  m.mean_structural.resize(samples);
  for (std::uint32_t t = 0; t < samples; ++t) {
    const double phase = 2.0 * std::numbers::pi * (profile_offset + t) / period;
    m.mean_structural[t] = level + ripple * 0.5 * (1.0 + std::cos(phase));
  }
  m.structural_dev_sigma = cfg.get<double>("/experimental/sigma_s");
  m.random_sigma = cfg.get<double>("/experimental/sigma_r");
  m.savgol.enabled = false;
  m.profile_offset = profile_offset;
  m.validate();
  return m;
}

inline std::vector<CScanImage> sample_images(std::span<const CScanImage> pool, std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  std::vector<CScanImage> out;
  for (auto i : idx) out.push_back(pool[i]);
  return out;
}

inline json volume_list_json(const std::vector<noise::DefectVolume>& vols) {
  json arr = json::array();
  char name[64];
  for (std::size_t i = 0; i < vols.size(); ++i) {
    std::snprintf(name, sizeof name, "vol_%03zu.ndtvol", i);
    arr.push_back({{"file", name}, {"window_len", vols[i].window_len}, {"mask", vols[i].mask},
                   {"source", vols[i].source}});
  }
  return arr;
}

inline void save_defect_volumes(const std::vector<noise::DefectVolume>& vols, const fs::path& dir) {
  fs::create_directories(dir);
  const auto list = volume_list_json(vols);
  for (std::size_t i = 0; i < vols.size(); ++i) save_volume(vols[i].volume, dir / list[i].at("file").get<std::string>());
  io::write_json(dir / "volumes.json", list);
}

inline std::vector<noise::DefectVolume> load_defect_volumes(const fs::path& dir) {
  const auto list = io::read_json(dir / "volumes.json");
  std::vector<noise::DefectVolume> out;
  try {
    for (const auto& e : list) {
      out.push_back({load_volume(dir / e.at("file").get<std::string>()), e.at("mask").get<std::vector<std::uint8_t>>(),
                     e.at("window_len").get<std::uint32_t>(), e.at("source")});
      if (out.back().mask.size() != static_cast<std::size_t>(kImageSize) * kImageSize) {
        throw DimensionError("defect volume mask", static_cast<std::size_t>(kImageSize) * kImageSize,
                             out.back().mask.size());
      }
    }
  } catch (const json::exception& e) {
    throw DecodeError((dir / "volumes.json").string() + ": " + e.what());
  }
  return out;
}

inline Dataset make_dataset(Provenance p, std::uint64_t seed, std::vector<CScanImage> images,
                            const std::vector<json>& sources = {}) {
  Dataset ds;
  ds.provenance = p;
  ds.seed = seed;
  for (std::size_t i = 0; i < images.size(); ++i) {
    ds.add(std::move(images[i]), i < sources.size() ? sources[i] : json::object());
  }
  return ds;
}

inline fs::path fresh_dir(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Stream ids for the root generator.
enum Stream : std::uint64_t {
  kTrainGrid = 1,
  kTestGrid = 2,
  kTestNoise = 3,
  kTrainNoise = 4,
  kSynth = 10,
  kHpo = 20,
  kEval = 30,
  kGolden = 40,
  kCleanNoise = 100,
};

// ---------------------------------------------------------------------------
// generate

struct GenerateSummary {
  fs::path dir;
  json manifest;
};

/// Phantom volumes -> simulated defect/clean images, plus the experimental
/// analog (phantom + ground-truth A-scan noise) used as measured data.
inline GenerateSummary cmd_generate(const Config& cfg) {
  const auto dir = fresh_dir(cfg.run_dir("generate"));
  const Rng root(cfg.seed());
  const auto pulse = cfg.pulse();
  const auto setup = cfg.setup();
  const auto wl = cfg.window_len();
  const auto gate = phantom::default_gate(pulse, setup, wl);
  const double fraction = cfg.get<double>("/phantom/defect_window_fraction");
  const double jitter = cfg.get<double>("/phantom/jitter_px");
  const bool png = cfg.get<bool>("/write_png");

  auto grid = [&](const char* d, const char* z, Stream s) {
    Rng r = root.split(s);
    auto fbh = phantom::parametric_study(cfg.get<std::vector<double>>(d), cfg.get<std::vector<double>>(z), pulse,
                                         setup, r, jitter);
    std::vector<VolumeScan> raw;
    for (const auto& f : fbh) raw.push_back(f.volume);
    const auto gated = condition_volumes(std::move(raw), gate);
    std::vector<noise::DefectVolume> out;
    for (std::size_t i = 0; i < fbh.size(); ++i) {
      out.push_back(crop_to_defect(gated[i], fbh[i].mask, wl, fraction, {{"fbh", phantom::to_json(fbh[i].spec)}}));
    }
    return out;
  };

  const auto train_vols = grid("/phantom/train_diameters_mm", "/phantom/train_depths_mm", kTrainGrid);
  const auto test_vols = grid("/phantom/test_diameters_mm", "/phantom/test_depths_mm", kTestGrid);

  // Simulated defect images straight from the conditioned phantom.
  std::vector<CScanImage> sim_defect;
  std::vector<json> sim_sources;
  for (std::size_t i = 0; i < train_vols.size(); ++i) {
    auto images = defect_images(train_vols[i]);
    for (std::size_t w = 0; w < images.size(); ++w) {
      auto src = train_vols[i].source;
      src["volume"] = i;
      src["window"] = w;
      sim_sources.push_back(src);
      sim_defect.push_back(std::move(images[w]));
    }
  }
  const auto clean_gated = condition_volumes({phantom::clean_volume(pulse, setup)}, gate).front();

  const json extra = {{"phantom", cfg.doc().at("phantom")}, {"pulse", phantom::to_json(pulse)}};
  save_dataset(make_dataset(Provenance::simulated, cfg.seed(), sim_defect, sim_sources), dir / "sim" / "defect", extra,
               png);
  save_dataset(make_dataset(Provenance::simulated, cfg.seed(), clean_images(clean_gated, wl)), dir / "sim" / "clean",
               extra, png);
  save_defect_volumes(train_vols, dir / "sim" / "volumes");

  // Experimental analog.
  const auto truth = experimental_noise_model(cfg, clean_gated.meta().time_offset, clean_gated.samples());
  auto noisy_clean = [&](std::uint64_t stream) {
    Rng r = root.split(stream);
    const auto n = noise::synth_ascan_noise_volume(truth, clean_gated.scans(), r, clean_gated.meta().time_offset,
                                                   clean_gated.samples());
    return noise::superpose_clip(clean_gated, n);
  };
  const auto n_train = cfg.get<std::size_t>("/experimental/clean_train_volumes");
  const auto n_test = cfg.get<std::size_t>("/experimental/clean_test_volumes");
  if (n_train < 1 || n_test < 1) throw ConfigError("experimental clean volume counts must be >= 1");
  std::vector<CScanImage> exp_clean_train, exp_clean_test;
  fs::create_directories(dir / "exp" / "clean_volumes");
  for (std::size_t k = 0; k < n_train + n_test; ++k) {
    const auto v = noisy_clean(kCleanNoise + k);
    auto images = clean_images(v, wl);
    auto& dst = k < n_train ? exp_clean_train : exp_clean_test;
    dst.insert(dst.end(), images.begin(), images.end());
    if (k < n_train) save_volume(v, dir / "exp" / "clean_volumes" / ("train_" + std::to_string(k) + ".ndtvol"));
  }
  const json exp_extra = {{"truth_noise", {{"sigma_r", truth.random_sigma}, {"sigma_s", truth.structural_dev_sigma}}}};
  save_dataset(make_dataset(Provenance::experimental_analog, cfg.seed(), exp_clean_train), dir / "exp" / "clean_train",
               exp_extra, png);
  save_dataset(make_dataset(Provenance::experimental_analog, cfg.seed(), exp_clean_test), dir / "exp" / "clean_test",
               exp_extra, png);

  auto exp_defects = [&](const std::vector<noise::DefectVolume>& vols, Stream s, const char* name) {
    noise::DefectSource src;
    src.volumes = vols;
    auto r = noise::make_dataset(src, noise::AScanNoise{truth, 1.0}, cfg.rejection(), root.split(s));
    r.dataset.provenance = Provenance::experimental_analog;
    json e = exp_extra;
    e["kept"] = r.kept;
    e["rejected"] = r.rejected;
    save_dataset(r.dataset, dir / "exp" / name, e, png);
    return json{{"count", r.kept}, {"rejected", r.rejected}};
  };
  const auto defect_train_info = exp_defects(train_vols, kTrainNoise, "defect_train");
  const auto defect_test_info = exp_defects(test_vols, kTestNoise, "defect_test");

  json manifest = {{"command", "generate"},
                   {"seed", cfg.seed()},
                   {"rng_algorithm", Rng::kAlgorithm},
                   {"gate", {{"front_wall_end", gate.front_wall_end}, {"back_wall_start", gate.back_wall_start},
                             {"window_len", wl}}},
                   {"outputs",
                    {{"sim/defect", {{"count", sim_defect.size()}, {"volumes", train_vols.size()}}},
                     {"sim/clean", {{"count", clean_gated.samples() / wl}}},
                     {"exp/clean_train", {{"count", exp_clean_train.size()}}},
                     {"exp/clean_test", {{"count", exp_clean_test.size()}}},
                     {"exp/defect_train", defect_train_info},
                     {"exp/defect_test", defect_test_info}}},
                   {"truth_noise", noise::to_json(truth)},
                   {"config", cfg.doc()}};
  io::write_json(dir / "manifest.json", manifest);
  return {dir, manifest};
}

// ---------------------------------------------------------------------------
// fit-noise

inline fs::path cmd_fit_noise(const Config& cfg) {
  const auto gen = cfg.run_dir("generate");
  const auto vol_dir = gen / "exp" / "clean_volumes";
  if (!fs::is_directory(vol_dir)) throw DataError("no clean volumes at " + vol_dir.string() + " (run generate)");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(vol_dir))
    if (e.path().extension() == ".ndtvol") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no clean volumes in " + vol_dir.string());
  std::vector<VolumeScan> vols;
  for (const auto& f : files) vols.push_back(load_volume(f));

  const auto dir = fresh_dir(cfg.run_dir("fit-noise"));
  const auto model = noise::fit_ascan_model(vols, cfg.savgol());
  io::write_json(dir / "ascan_model.json", noise::to_json(model));

  const auto clean = load_dataset(gen / "exp" / "clean_train");
  std::vector<double> pixels;
  for (const auto& img : clean.images) pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
  const auto ig = noise::fit_invgauss(pixels);
  io::write_json(dir / "invgauss.json", noise::to_json(ig));

  if (cfg.get<bool>("/write_png")) {
    const double hi = *std::max_element(pixels.begin(), pixels.end());
    png::histogram((dir / "cscan_noise_hist.png").string(), pixels, 0.0, hi, 80,
                   [&](double x) { return noise::invgauss_pdf(x, ig); });
    std::vector<double> resid, dev;
    const std::size_t per_b = static_cast<std::size_t>(vols.front().elements()) * vols.front().samples();
    for (std::uint32_t b = 0; b < vols.front().scans(); ++b) {
      const auto d = noise::decompose_bscan(vols.front().data().subspan(b * per_b, per_b), vols.front().elements(),
                                            vols.front().samples());
      resid.insert(resid.end(), d.residuals.begin(), d.residuals.end());
      for (std::size_t t = 0; t < d.structural.size(); ++t) dev.push_back(d.structural[t] - model.mean_structural[t]);
    }
    const double rs = 5.0 * std::max(model.random_sigma, 1e-9), ss = 5.0 * std::max(model.structural_dev_sigma, 1e-9);
    auto normal_pdf = [](double s) {
      return [s](double x) { return std::exp(-0.5 * x * x / (s * s)) / (s * std::sqrt(2.0 * std::numbers::pi)); };
    };
    png::histogram((dir / "random_noise_hist.png").string(), resid, -rs, rs, 60, normal_pdf(model.random_sigma));
    png::histogram((dir / "structural_dev_hist.png").string(), dev, -ss, ss, 60,
                   normal_pdf(std::max(model.structural_dev_sigma, 1e-12)));
  }
  io::write_json(dir / "manifest.json", {{"command", "fit-noise"},
                                         {"seed", cfg.seed()},
                                         {"volumes", files.size()},
                                         {"cscan_pixels", pixels.size()},
                                         {"ascan_model", {{"sigma_r", model.random_sigma},
                                                          {"sigma_s", model.structural_dev_sigma},
                                                          {"profile_len", model.mean_structural.size()},
                                                          {"profile_offset", model.profile_offset}}},
                                         {"invgauss", noise::to_json(ig)}});
  return dir;
}

// ---------------------------------------------------------------------------
// synth

inline fs::path synth_dir(const Config& cfg, const std::string& method) { return cfg.run_dir("synth-" + method); }

inline fs::path cmd_synth(const Config& cfg) {
  const auto method = cfg.get<std::string>("/noise/method");
  const double scale = cfg.get<double>("/noise/scale");
  if (!(scale >= 0.0)) throw ConfigError("noise.scale must be >= 0");
  const auto gen = cfg.run_dir("generate");
  const auto fit = cfg.run_dir("fit-noise");

  noise::DefectSource defects;
  noise::NoiseSource source;
  json inputs = {{"generate", gen.string()}};
  if (method == "real-noise") {
    const fs::path pool = cfg.is_null("/noise/clean_pool") ? gen / "exp" / "clean_train"
                                                            : fs::path(cfg.get<std::string>("/noise/clean_pool"));
    source = noise::RealNoise{load_dataset(pool).images, scale};
    inputs["clean_pool"] = pool.string();
  } else if (method == "cscan-noise") {
    noise::InvGaussParams p;
    if (!cfg.is_null("/noise/invgauss")) {
      p = noise::invgauss_from_json(cfg.doc().at("noise").at("invgauss"));
      inputs["invgauss"] = "config";
    } else {
      const auto f = fit / "invgauss.json";
      if (!fs::exists(f)) throw DataError("cscan-noise needs noise.invgauss or a fitted " + f.string());
      p = noise::invgauss_from_json(io::read_json(f));
      inputs["invgauss"] = f.string();
    }
    source = noise::CScanNoise{p, scale};
  } else if (method == "ascan-noise") {
    const fs::path f = cfg.is_null("/noise/ascan_model") ? fit / "ascan_model.json"
                                                          : fs::path(cfg.get<std::string>("/noise/ascan_model"));
    if (!fs::exists(f)) throw DataError("ascan-noise needs a fitted A-scan noise model: " + f.string() + " not found");
    source = noise::AScanNoise{noise::ascan_model_from_json(io::read_json(f)), scale};
    inputs["ascan_model"] = f.string();
  } else {
    throw ConfigError("noise.method must be real-noise, cscan-noise or ascan-noise, got " + method);
  }
  if (method == "ascan-noise") {
    defects.volumes = load_defect_volumes(gen / "sim" / "volumes");
  } else {
    auto sim = load_dataset(gen / "sim" / "defect");
    defects.images = std::move(sim.images);
    defects.image_sources = std::move(sim.sources);
  }

  const auto result = noise::make_dataset(defects, source, cfg.rejection(), Rng(cfg.seed()).split(kSynth));
  const auto dir = fresh_dir(synth_dir(cfg, method));
  const json extra = {{"kept", result.kept}, {"rejected", result.rejected}, {"noise_params", result.noise_params},
                      {"inputs", inputs}};
  save_dataset(result.dataset, dir / "dataset", extra, cfg.get<bool>("/write_png"));
  io::write_json(dir / "manifest.json", {{"command", "synth"},
                                         {"seed", cfg.seed()},
                                         {"method", method},
                                         {"kept", result.kept},
                                         {"rejected", result.rejected},
                                         {"noise_params", result.noise_params},
                                         {"inputs", inputs}});
  return dir;
}

// ---------------------------------------------------------------------------
// hpo

inline fs::path cmd_hpo(const Config& cfg) {
  const auto gen = cfg.run_dir("generate");
  Rng rng = Rng(cfg.seed()).split(kHpo);
  const auto defects = load_dataset(gen / "exp" / "defect_train");
  const auto clean = load_dataset(gen / "exp" / "clean_train");
  const auto max_images = cfg.get<std::size_t>("/hpo/max_images");
  const std::size_t per_class = std::min({defects.images.size(), clean.images.size(), max_images / 2});
  auto images = sample_images(defects.images, per_class, rng);
  const auto c = sample_images(clean.images, per_class, rng);
  images.insert(images.end(), c.begin(), c.end());

  const double epoch_scale = cfg.get<double>("/hpo/epoch_scale");
  if (!(epoch_scale > 0.0)) throw ConfigError("hpo.epoch_scale must be > 0");
  const auto k = cfg.get<std::size_t>("/hpo/k_splits");
  const auto eval = [&](const nn::CnnConfig& c, const Rng& r) {
    auto scaled = c;
    scaled.epochs = std::max(1, static_cast<int>(std::lround(c.epochs * epoch_scale)));
    return hpo::evaluate_config(scaled, images, k, r);
  };
  const auto res = hpo::regularized_evolution(hpo::SearchSpace::standard(), eval, cfg.get<std::size_t>("/hpo/population"),
                                              cfg.get<std::size_t>("/hpo/sample_size"),
                                              cfg.get<std::size_t>("/hpo/iterations"), rng);
  const auto dir = fresh_dir(cfg.run_dir("hpo"));
  io::write_json(dir / "best_config.json", nn::to_json(res.best.config));
  io::write_text(dir / "audit.csv", hpo::audit_csv(res.history));
  io::write_json(dir / "manifest.json", {{"command", "hpo"},
                                         {"seed", cfg.seed()},
                                         {"population", cfg.get<std::size_t>("/hpo/population")},
                                         {"sample_size", cfg.get<std::size_t>("/hpo/sample_size")},
                                         {"iterations", cfg.get<std::size_t>("/hpo/iterations")},
                                         {"k_splits", k},
                                         {"epoch_scale", epoch_scale},
                                         {"images", images.size()},
                                         {"audit_rows", res.history.size()},
                                         {"best_fitness", res.best.fitness},
                                         {"best_age", res.best.age},
                                         {"best_config", nn::to_json(res.best.config)}});
  return dir;
}

// ---------------------------------------------------------------------------
// train-eval

/// Resolves a training arm name to a defect dataset directory.
inline fs::path arm_path(const Config& cfg, const std::string& arm) {
  if (arm == "sim") return cfg.run_dir("generate") / "sim" / "defect";
  if (arm == "experimental") return cfg.run_dir("generate") / "exp" / "defect_train";
  if (arm.rfind("synth:", 0) == 0) return synth_dir(cfg, arm.substr(6)) / "dataset";
  return arm;
}

inline std::string arm_label(const std::string& arm) {
  std::string s = arm;
  std::replace_if(s.begin(), s.end(), [](char ch) { return !std::isalnum(static_cast<unsigned char>(ch)) && ch != '-'; },
                  '_');
  return s;
}

inline nn::CnnConfig eval_cnn_config(const Config& cfg) {
  nn::CnnConfig c;
  if (cfg.doc().at("cnn").is_string()) {
    if (cfg.get<std::string>("/cnn") != "hpo") throw ConfigError("cnn must be a table or \"hpo\"");
    const auto f = cfg.run_dir("hpo") / "best_config.json";
    if (!fs::exists(f)) throw DataError("cnn = \"hpo\" but " + f.string() + " does not exist");
    c = nn::cnn_config_from_json(io::read_json(f));
  } else {
    c = cfg.cnn();
  }
  // Desk-scale runs shorten training below the search range on purpose.
  if (!cfg.is_null("/eval/epochs")) {
    const int e = cfg.get<int>("/eval/epochs");
    if (e < 1) throw ConfigError("eval.epochs must be >= 1");
    c.epochs = e;
  }
  return c;
}

struct TrainEvalResult {
  fs::path dir;
  json report;
};

inline TrainEvalResult cmd_train_eval(const Config& cfg) {
  const auto gen = cfg.run_dir("generate");
  const Rng root = Rng(cfg.seed()).split(kEval);
  const auto n_runs = cfg.get<std::size_t>("/eval/n_runs");
  if (n_runs < 1) throw ConfigError("eval.n_runs must be >= 1");
  const auto cnn = eval_cnn_config(cfg);
  const auto arms = cfg.get<std::vector<std::string>>("/eval/arms");
  if (arms.empty()) throw ConfigError("eval.arms is empty");

  Rng test_rng = root.split(0);
  const auto defect_test = load_dataset(gen / "exp" / "defect_test");
  const auto clean_test_pool = load_dataset(gen / "exp" / "clean_test");
  const double ratio = cfg.get<double>("/eval/clean_per_defect_test");
  auto test = defect_test.images;
  const auto ct = sample_images(clean_test_pool.images,
                                static_cast<std::size_t>(std::lround(ratio * defect_test.images.size())), test_rng);
  test.insert(test.end(), ct.begin(), ct.end());
  const auto clean_train_pool = load_dataset(gen / "exp" / "clean_train");

  const auto dir = fresh_dir(cfg.run_dir("train-eval"));
  fs::create_directories(dir / "models");
  json arms_json = json::object();
  std::vector<std::pair<std::string, metrics::EvalReport>> rows;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const auto defects = load_dataset(arm_path(cfg, arms[a]));
    if (defects.images.empty()) throw DataError("training arm " + arms[a] + " has no images");
    Rng arm_rng = root.split(1 + a);
    auto train = defects.images;
    for (auto& img : train) img.label = Label::defective;
    const auto clean = sample_images(clean_train_pool.images, defects.images.size(), arm_rng);
    train.insert(train.end(), clean.begin(), clean.end());
    const auto model_path = dir / "models" / (arm_label(arms[a]) + ".ckpt");
    const auto report = metrics::repeated_eval(train, test, cnn, n_runs, arm_rng.split(1),
                                               [&](std::size_t run, const nn::CnnModel& m) {
                                                 if (run == 0) nn::save_model(m, arm_rng.split(1).split(0).seed(), model_path);
                                               });
    auto j = metrics::to_json(report);
    j["train_defects"] = defects.images.size();
    j["train_clean"] = clean.size();
    j["dataset"] = arm_path(cfg, arms[a]).string();
    arms_json[arms[a]] = j;
    rows.emplace_back(arms[a], report);
  }
  const json report = {{"command", "train-eval"},
                       {"seed", cfg.seed()},
                       {"cnn", nn::to_json(cnn)},
                       {"n_runs", n_runs},
                       {"test", {{"defective", defect_test.images.size()}, {"clean", ct.size()}}},
                       {"arms", arms_json}};
  io::write_json(dir / "report.json", report);
  io::write_text(dir / "table.txt", metrics::format_table(rows));
  if (cfg.get<bool>("/write_png")) {
    std::vector<double> means, stds;
    for (const auto& [_, r] : rows) {
      for (const auto* s : {&r.accuracy, &r.f1, &r.precision, &r.recall}) {
        means.push_back(s->mean);
        stds.push_back(s->std);
      }
    }
    png::bar_chart((dir / "metrics.png").string(), means, stds);
  }
  io::write_json(dir / "manifest.json", {{"command", "train-eval"},
                                         {"seed", cfg.seed()},
                                         {"arms", arms},
                                         {"report", "report.json"},
                                         {"table", "table.txt"}});
  return {dir, report};
}

// ---------------------------------------------------------------------------
// explain

/// Fraction of heatmap mass inside the mask (0 for an all-zero heatmap).
inline double mask_coverage(std::span<const double> heat, std::span<const std::uint8_t> mask) {
  double in = 0.0, all = 0.0;
  for (std::size_t i = 0; i < heat.size(); ++i) {
    all += heat[i];
    if (mask[i]) in += heat[i];
  }
  return all > 0.0 ? in / all : 0.0;
}

inline fs::path cmd_explain(const Config& cfg) {
  fs::path model_path;
  if (!cfg.is_null("/explain/model")) {
    model_path = cfg.get<std::string>("/explain/model");
  } else {
    const auto arms = cfg.get<std::vector<std::string>>("/eval/arms");
    if (arms.empty()) throw ConfigError("explain.model unset and eval.arms is empty");
    model_path = cfg.run_dir("train-eval") / "models" / (arm_label(arms.back()) + ".ckpt");
  }
  if (!fs::exists(model_path)) throw DataError("model checkpoint not found: " + model_path.string());
  const fs::path data_path = cfg.is_null("/explain/dataset") ? cfg.run_dir("generate") / "exp" / "defect_test"
                                                              : fs::path(cfg.get<std::string>("/explain/dataset"));
  const auto loaded = nn::load_model(model_path);
  const auto ds = load_dataset(data_path);
  const auto n = std::min(ds.images.size(), cfg.get<std::size_t>("/explain/max_images"));

  const auto dir = fresh_dir(cfg.run_dir("explain"));
  json entries = json::array();
  constexpr int kZoom = 3, kGap = 8;
  const int side = static_cast<int>(kImageSize) * kZoom;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& img = ds.images[i];
    const auto e = nn::guided_gradcam(loaded.model, img);
    const std::vector<double> input(img.pixels.begin(), img.pixels.end());
    png::Canvas canvas(3 * side + 2 * kGap, side);
    canvas.blit_unit(input, img.rows, img.cols, 0, 0, kZoom);
    canvas.blit_unit(e.heatmap, img.rows, img.cols, side + kGap, 0, kZoom);
    canvas.blit_unit(e.mixed, img.rows, img.cols, 2 * (side + kGap), 0, kZoom);
    char name[64];
    std::snprintf(name, sizeof name, "explain_%05zu.png", i);
    canvas.save((dir / name).string());
    json entry = {{"index", i}, {"png", name}, {"probability", nn::predict(loaded.model, img)}};
    if (img.defect_mask) entry["mask_coverage"] = mask_coverage(e.heatmap, *img.defect_mask);
    entries.push_back(entry);
  }
  io::write_json(dir / "explain.json", {{"command", "explain"},
                                        {"seed", cfg.seed()},
                                        {"model", model_path.string()},
                                        {"dataset", data_path.string()},
                                        {"images", entries}});
  io::write_json(dir / "manifest.json", {{"command", "explain"}, {"seed", cfg.seed()}, {"count", n}});
  return dir;
}

// ---------------------------------------------------------------------------
// golden

inline fs::path cmd_golden(const Config& cfg) {
  const auto dir = fresh_dir(cfg.run_dir("golden"));
  Rng rng = Rng(cfg.seed()).split(kGolden);
  const auto n = cfg.get<std::size_t>("/golden/n_cases");
  io::write_json(dir / "golden_vectors.json", gan::golden_json(gan::golden_cases(n, rng), cfg.seed()));
  io::write_json(dir / "manifest.json",
                 {{"command", "golden"}, {"seed", cfg.seed()}, {"cases", n + 2}, {"file", "golden_vectors.json"}});
  return dir;
}

}  // namespace ndtsynth::pipeline
