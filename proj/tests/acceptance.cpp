// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: acceptance [--only name[,name...]] [--desk-config path]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gradcheck.hpp"
#include "ndtsynth/pipeline.hpp"
#include "surrogate.hpp"
#include "test_support.hpp"

namespace {

using namespace ndtsynth;
using json = nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Outcome autodiff() {
  const auto t0 = Clock::now();
  Rng rng(2025);
  constexpr int kConfigs = 12, kSide = 16;
  double worst = 0.0;
  std::size_t checked = 0, kinks = 0, total = 0;
  for (int i = 0; i < kConfigs; ++i) {
    auto m = testing_support::random_small_model(rng, kSide);
    const std::vector<std::vector<double>> x = {testing_support::random_input(rng, kSide)};
    const auto r = testing_support::finite_difference_check(m, x, {static_cast<double>(i % 2)});
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
    kinks += r.kink_crossings;
    total += m.parameter_count();
  }
  const double secs = seconds_since(t0);
  // Parameters skipped at ReLU/pool kinks must stay a negligible fraction.
  const bool ok = worst < 1e-4 && secs < 60.0 && kinks * 100 <= total;
  return {ok, fmt("%d configs %dx%d, %zu params checked, %zu at kinks, max rel err %.2e, %.1f s", kConfigs, kSide, kSide,
                  checked, kinks, worst, secs)};
}

std::vector<double> footprint(std::size_t side, std::size_t n) {
  std::vector<double> sim(side * side, 0.0);
  const std::size_t off = (side - 4) / 2;
  for (std::size_t i = 0; i < n; ++i) sim[(i / 4 + off) * side + (i % 4) + off] = 1.0;
  return sim;
}

Outcome activation_loss() {
  double worst = 0.0;
  const double hand = gan::hand_case(4).parts.activ;
  worst = std::max(worst, std::abs(hand - 0.5));
  std::vector<double> sizes;
  for (std::size_t n : {4u, 8u, 16u}) {
    const auto s = footprint(8, n);
    auto g = s;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (s[i] > 0) g[i] = 0.5;
    sizes.push_back(gan::activmap_loss(g, s));
  }
  double spread = 0.0;
  for (double v : sizes) spread = std::max(spread, std::abs(v - sizes.front()));
  Rng rng(8);
  const auto s = footprint(8, 8);
  auto g = s;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (s[i] > 0) g[i] = 0.3;
  const double base = gan::activmap_loss(g, s);
  double bg_change = 0.0;
  for (int t = 0; t < 50; ++t) {
    auto p = g;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (s[i] == 0) p[i] = rng.uniform();
    bg_change = std::max(bg_change, std::abs(gan::activmap_loss(p, s) - base));
  }
  const bool ok = worst <= 1e-12 && spread <= 1e-12 && bg_change == 0.0;
  return {ok, fmt("hand 4x4 = %.15g, size spread %.1e, background change %.1e", hand, spread, bg_change)};
}

Outcome combined_loss() {
  const gan::LossWeights w;
  const double all_ones = gan::total_generator_loss({1, 1, 1, 1, 1}, w);
  double lin = 0.0;
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    gan::LossParts p{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    const double base = gan::total_generator_loss(p, w);
    const double coef[5] = {w.w_gan_exp, w.w_gan_sim, w.lambda * w.w_cyc_sim, w.lambda * w.w_cyc_exp, w.w_activ};
    double* field[5] = {&p.gan_exp, &p.gan_sim, &p.cyc_sim, &p.cyc_exp, &p.activ};
    for (int k = 0; k < 5; ++k) {
      const double d = rng.uniform(0.0, 2.0);
      *field[k] += d;
      lin = std::max(lin, std::abs(gan::total_generator_loss(p, w) - base - coef[k] * d) / std::max(1.0, base));
      *field[k] -= d;
    }
  }
  const bool ok = std::abs(all_ones - 301.0) <= 1e-12 && lin < 1e-12;
  return {ok, fmt("all-ones total = %.15g, max linearity residual %.1e", all_ones, lin)};
}

template <class Cdf>
double ks_statistic(std::vector<double> x, Cdf cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

Outcome invgauss_round_trip() {
  const noise::InvGaussParams truth{0.410, -0.003, 0.066};
  Rng rng(77);
  std::vector<double> x(100'000);
  for (auto& v : x) v = noise::sample_invgauss(truth, rng);
  const auto fit = noise::fit_invgauss(x);
  const double ks = ks_statistic(x, [&](double v) { return noise::invgauss_cdf(v, fit); });
  const double e_mu = std::abs(fit.mu - truth.mu) / truth.mu;
  const double e_scale = std::abs(fit.scale - truth.scale) / truth.scale;
  const double e_loc = std::abs(fit.loc - truth.loc);
  const bool ok = e_mu <= 0.05 && e_scale <= 0.05 && e_loc <= 0.005 && ks < 0.01;
  return {ok, fmt("mu %.4f (%.2f%%), loc %.4f, scale %.4f (%.2f%%), KS %.4f", fit.mu, 100 * e_mu, fit.loc, fit.scale,
                  100 * e_scale, ks)};
}

Outcome ascan_round_trip() {
  noise::AScanNoiseModel truth;
  truth.mean_structural.resize(200);
  for (std::size_t t = 0; t < 200; ++t)
    truth.mean_structural[t] = 0.05 + 0.005 * (1 + std::cos(2 * std::numbers::pi * double(t) / 25.0));
  truth.structural_dev_sigma = 0.003;
  truth.random_sigma = 0.013;
  truth.savgol.enabled = false;
  Rng rng(31);
  std::vector<VolumeScan> vols;
  for (int i = 0; i < 2; ++i) vols.push_back(noise::synth_ascan_noise_volume(truth, 64, rng));
  const auto fit = noise::fit_ascan_model(vols, truth.savgol);
  const double er = std::abs(fit.random_sigma - 0.013) / 0.013;
  const double es = std::abs(fit.structural_dev_sigma - 0.003) / 0.003;
  return {er <= 0.05 && es <= 0.05, fmt("sigma_r %.5f (%.2f%%), sigma_s %.5f (%.2f%%)", fit.random_sigma, 100 * er,
                                        fit.structural_dev_sigma, 100 * es)};
}

Outcome savgol_exactness() {
  std::vector<double> x(60);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = 0.1 * double(i);
    x[i] = 0.3 - 1.2 * t + 0.5 * t * t - 0.04 * t * t * t;
  }
  const auto y = noise::savgol_filter(x, 11, 3);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(y[i] - x[i]));
  return {worst <= 1e-10, fmt("max deviation on a cubic %.1e", worst)};
}

Outcome hilbert_envelope() {
  constexpr std::size_t n = 256;
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::cos(2 * std::numbers::pi * 8 * double(i) / n);
  const auto env = sigproc::hilbert_envelope(x);
  double flat = 0.0;
  for (std::size_t i = 10; i + 10 < n; ++i) flat = std::max(flat, std::abs(env[i] - 1.0));
  Rng rng(11);
  int dominated = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(4 + rng.below(300));
    for (auto& v : s) v = rng.normal();
    const auto c = sigproc::zero_center(s);
    const auto e = sigproc::hilbert_envelope(c);
    bool ok = true;
    for (std::size_t i = 0; i < c.size(); ++i) ok = ok && e[i] + 1e-9 >= std::abs(c[i]);
    dominated += ok;
  }
  return {flat <= 1e-2 && dominated == 100,
          fmt("cosine envelope max |env-1| %.1e, dominance %d/100", flat, dominated)};
}

Outcome metrics_anchor() {
  const metrics::ConfusionMatrix cm{29.95, 0.98, 5.14, 23.93};
  const metrics::ConfusionMatrix swapped{cm.tn, cm.fn, cm.fp, cm.tp};
  const double a = metrics::accuracy(cm), b = metrics::accuracy(swapped);
  return {std::abs(a - 0.898) < 5e-4 && a == b, fmt("averaged-matrix accuracy %.4f, label-swapped %.4f", a, b)};
}

Outcome evolution_surrogate() {
  const auto t0 = Clock::now();
  const auto r = testing_support::surrogate_search(10);
  const double secs = seconds_since(t0);
  return {r.successes >= 9 && secs < 10.0, fmt("%d/%d seeds reach the random-search top 5%%, %.2f s", r.successes,
                                               r.seeds, secs)};
}

Outcome end_to_end(const fs::path& desk_config) {
  const auto t0 = Clock::now();
  testing_support::TempDir work("e2e");
  auto cfg = pipeline::Config::load(desk_config, {"workdir=" + work.path().string(), "write_png=false"});
  pipeline::cmd_generate(cfg);
  pipeline::cmd_fit_noise(cfg);
  auto synth = cfg;
  synth.set("noise.method=ascan-noise");
  pipeline::cmd_synth(synth);
  const auto te = pipeline::cmd_train_eval(cfg);
  const auto& arms = te.report.at("arms");
  const auto& a = arms.at("sim");
  const auto& b = arms.at("synth:ascan-noise");
  const double ra = a.at("recall").at("mean"), rb = b.at("recall").at("mean");
  const double fa = a.at("f1").at("mean"), fb = b.at("f1").at("mean");
  const double secs = seconds_since(t0);
  const bool ok = rb - ra >= 0.2 && fb > fa && secs < 1800.0;
  return {ok, fmt("%zu runs x %d epochs: recall sim %.3f vs ascan-noise %.3f (diff %.3f), F1 %.3f vs %.3f, %.0f s",
                  te.report.at("n_runs").get<std::size_t>(), te.report.at("cnn").at("epochs").get<int>(), ra, rb,
                  rb - ra, fa, fb, secs)};
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

Outcome cli_determinism(const std::string& cli) {
  const json config = {{"seed", 11},
                       {"workdir", "work"},
                       {"phantom", {{"train_diameters_mm", {4.0, 6.0}}, {"train_depths_mm", {2.5, 4.5}},
                                    {"test_diameters_mm", {5.0}}, {"test_depths_mm", {3.0, 5.0}}}},
                       {"experimental", {{"clean_train_volumes", 1}, {"clean_test_volumes", 1}}},
                       {"eval", {{"n_runs", 2}, {"epochs", 2}}},
                       {"hpo", {{"population", 3}, {"sample_size", 2}, {"iterations", 2}, {"k_splits", 1},
                                {"epoch_scale", 0.01}, {"max_images", 40}}},
                       {"explain", {{"max_images", 2}}},
                       {"golden", {{"n_cases", 4}}}};
  const std::vector<std::string> commands = {"generate", "fit-noise", "synth", "hpo", "train-eval", "explain", "golden"};
  testing_support::TempDir a("det-a"), b("det-b");
  for (const auto* dir : {&a, &b}) {
    fs::create_directories(dir->path() / "work");
    io::write_json(dir->path() / "config.json", config);
    for (const auto& cmd : commands) {
      const std::string line = "cd '" + dir->path().string() + "' && '" + cli + "' -c config.json " + cmd + " > /dev/null";
      const int rc = std::system(line.c_str());
      if (rc != 0) return {false, "command " + cmd + " exited with status " + std::to_string(rc)};
    }
  }
  const auto ta = tree_contents(a / "work"), tb = tree_contents(b / "work");
  std::size_t manifests = 0, differing = 0;
  std::string first_diff;
  for (const auto& [name, bytes] : ta) {
    const auto it = tb.find(name);
    if (it == tb.end() || it->second != bytes) {
      if (differing++ == 0) first_diff = name;
    }
    const auto base = fs::path(name).filename().string();
    manifests += base == "manifest.json" || base == "report.json";
  }
  if (ta.size() != tb.size()) ++differing;
  return {differing == 0 && manifests > 0,
          fmt("%zu commands, %zu files (%zu manifests/reports) compared, %zu differ%s%s", commands.size(), ta.size(),
              manifests, differing, first_diff.empty() ? "" : ", first: ", first_diff.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<std::string> only;
  std::string desk = std::string(NDTSYNTH_SOURCE_DIR) + "/configs/desk.json";
  std::string cli = NDTSYNTH_CLI;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--desk-config", desk, "Config for the end-to-end ordering run");
  app.add_option("--cli", cli, "Path to the ndtsynth_cli binary");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"autodiff-gradients", autodiff},
      {"activation-map-loss", activation_loss},
      {"combined-generator-loss", combined_loss},
      {"invgauss-round-trip", invgauss_round_trip},
      {"ascan-noise-round-trip", ascan_round_trip},
      {"savgol-exactness", savgol_exactness},
      {"hilbert-envelope", hilbert_envelope},
      {"metrics-anchor", metrics_anchor},
      {"evolution-surrogate", evolution_surrogate},
      {"cli-determinism", [&] { return cli_determinism(cli); }},
      {"end-to-end-ordering", [&] { return end_to_end(desk); }},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
