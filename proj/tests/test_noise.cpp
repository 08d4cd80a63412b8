#include <gtest/gtest.h>

#include <boost/math/distributions/inverse_gaussian.hpp>
#include <cmath>
#include <numbers>

#include "ndtsynth/noise.hpp"

using namespace ndtsynth;
using namespace ndtsynth::noise;

namespace {

const InvGaussParams kReferenceIG{0.410, -0.003, 0.066};

std::vector<double> draw(const InvGaussParams& p, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = sample_invgauss(p, rng);
  return out;
}

// Kolmogorov-Smirnov statistic of `x` against a CDF.
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

// Reference density through an independent implementation; y has mean mu and shape 1.
double boost_pdf(double x, const InvGaussParams& p) {
  const double y = (x - p.loc) / p.scale;
  if (y <= 0) return 0.0;
  return boost::math::pdf(boost::math::inverse_gaussian(p.mu, 1.0), y) / p.scale;
}

double boost_cdf(double x, const InvGaussParams& p) {
  const double y = (x - p.loc) / p.scale;
  if (y <= 0) return 0.0;
  return boost::math::cdf(boost::math::inverse_gaussian(p.mu, 1.0), y);
}

double population_std(const std::vector<double>& v) {
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

CScanImage masked(float inside, float outside) {
  auto img = CScanImage::filled(64, 64, outside);
  img.defect_mask = std::vector<std::uint8_t>(64 * 64, 0);
  for (std::uint32_t r = 28; r < 36; ++r)
    for (std::uint32_t c = 28; c < 36; ++c) {
      (*img.defect_mask)[r * 64 + c] = 1;
      img.pixels[r * 64 + c] = inside;
    }
  return img;
}

AScanNoiseModel reference_model(std::size_t samples, double sigma_s, double sigma_r) {
  AScanNoiseModel m;
  m.mean_structural.resize(samples);
  for (std::size_t t = 0; t < samples; ++t)
    m.mean_structural[t] = 0.05 + 0.01 * 0.5 * (1 + std::cos(2 * std::numbers::pi * double(t) / 25.0));
  m.structural_dev_sigma = sigma_s;
  m.random_sigma = sigma_r;
  m.savgol.enabled = false;
  return m;
}

}  // namespace

TEST(InvGauss, PdfAtModeOfUnitCase) {
  EXPECT_NEAR(invgauss_pdf(1.0, {1.0, 0.0, 1.0}), 1.0 / std::sqrt(2 * std::numbers::pi), 1e-15);
}

TEST(InvGauss, PdfZeroOutsideSupport) {
  EXPECT_EQ(invgauss_pdf(-0.003, kReferenceIG), 0.0);
  EXPECT_EQ(invgauss_pdf(-1.0, kReferenceIG), 0.0);
}

TEST(InvGauss, PdfMatchesReferenceAndIntegratesToOne) {
  EXPECT_NEAR(invgauss_pdf(0.05, kReferenceIG), boost_pdf(0.05, kReferenceIG), 1e-10);
  for (double x : {0.001, 0.01, 0.02, 0.1, 0.3})
    EXPECT_NEAR(invgauss_pdf(x, kReferenceIG), boost_pdf(x, kReferenceIG), 1e-9 * std::max(1.0, boost_pdf(x, kReferenceIG)));
  // Trapezoid rule over the bulk of the support.
  double area = 0, prev = 0;
  const double h = 1e-5;
  for (double x = kReferenceIG.loc + h; x < 2.0; x += h) {
    const double f = invgauss_pdf(x, kReferenceIG);
    area += 0.5 * (f + prev) * h;
    prev = f;
  }
  EXPECT_NEAR(area, 1.0, 1e-4);
}

TEST(InvGauss, CdfMatchesReference) {
  for (const auto& p : {kReferenceIG, InvGaussParams{1.0, 0.0, 1.0}, InvGaussParams{3.0, 0.5, 2.0}})
    for (double q : {0.01, 0.1, 0.5, 0.9, 0.99}) {
      const double y = boost::math::quantile(boost::math::inverse_gaussian(p.mu, 1.0), q);
      const double x = p.loc + p.scale * y;
      EXPECT_NEAR(invgauss_cdf(x, p), q, 1e-10);
      EXPECT_NEAR(invgauss_cdf(x, p), boost_cdf(x, p), 1e-10);
    }
}

TEST(InvGauss, SampleMeanMatchesAnalyticMean) {
  Rng rng(21);
  const auto img = sample_invgauss_image({1.0, 0.0, 1.0}, 1000, 1000, rng);
  double sum = 0;
  for (float p : img.pixels) sum += p;
  EXPECT_NEAR(sum / 1e6, 1.0, 0.01);
  const auto x = draw(kReferenceIG, 1'000'000, 22);
  double m = 0;
  for (double v : x) m += v;
  EXPECT_NEAR(m / 1e6, kReferenceIG.mean(), 0.01 * kReferenceIG.mean());
}

TEST(InvGauss, SamplerPassesKolmogorovSmirnov) {
  const auto x = draw(kReferenceIG, 100'000, 5);
  EXPECT_LT(ks_statistic(x, [](double v) { return boost_cdf(v, kReferenceIG); }), 0.01);
}

TEST(InvGauss, ImageIsSeededAndClamped) {
  Rng a(3), b(3);
  const auto ia = sample_invgauss_image(kReferenceIG, 64, 64, a);
  const auto ib = sample_invgauss_image(kReferenceIG, 64, 64, b);
  EXPECT_EQ(ia, ib);
  for (float p : ia.pixels) EXPECT_GE(p, 0.0f);
}

TEST(FitInvGauss, ReferenceParameterRoundTrip) {
  const auto x = draw(kReferenceIG, 100'000, 77);
  const auto fit = fit_invgauss(x);
  EXPECT_NEAR(fit.mu, kReferenceIG.mu, 0.05 * kReferenceIG.mu);
  EXPECT_NEAR(fit.scale, kReferenceIG.scale, 0.05 * kReferenceIG.scale);
  EXPECT_NEAR(fit.loc, kReferenceIG.loc, 0.005);
  EXPECT_LT(ks_statistic(x, [&](double v) { return invgauss_cdf(v, fit); }), 0.01);
}

TEST(FitInvGauss, UnitRoundTrip) {
  const auto fit = fit_invgauss(draw({1.0, 0.0, 1.0}, 100'000, 78));
  EXPECT_NEAR(fit.mu, 1.0, 0.03);
}

TEST(FitInvGauss, ErrorShrinksWithSampleCount) {
  auto mean_error = [](std::size_t n) {
    double err = 0;
    for (std::uint64_t s = 0; s < 4; ++s) {
      const auto fit = fit_invgauss(draw(kReferenceIG, n, 100 + s));
      err += std::abs(fit.mu / kReferenceIG.mu - 1) + std::abs(fit.scale / kReferenceIG.scale - 1);
    }
    return err / 4;
  };
  const double e3 = mean_error(1'000), e4 = mean_error(10'000), e5 = mean_error(100'000);
  EXPECT_LT(e4, e3);
  EXPECT_LT(e5, e4);
}

TEST(FitInvGauss, Preconditions) {
  EXPECT_THROW(fit_invgauss(draw(kReferenceIG, 10, 1)), DataError);
  const std::vector<double> flat(2000, 0.3);
  EXPECT_THROW(fit_invgauss(flat), NumericError);
  auto bad = draw(kReferenceIG, 2000, 1);
  bad[5] = std::nan("");
  EXPECT_THROW(fit_invgauss(bad), DataError);
}

TEST(Savgol, ReproducesCubic) {
  std::vector<double> x(60);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = 0.1 * double(i);
    x[i] = 0.3 - 1.2 * t + 0.5 * t * t - 0.04 * t * t * t;
  }
  const auto y = savgol_filter(x, 11, 3);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-10) << i;
}

TEST(Savgol, ConstantUnchanged) {
  const std::vector<double> x(30, 0.42);
  for (double v : savgol_filter(x, 11, 3)) EXPECT_NEAR(v, 0.42, 1e-14);
}

TEST(Savgol, ReducesWhiteNoiseVariance) {
  Rng rng(6);
  std::vector<double> x(5000);
  for (auto& v : x) v = rng.normal();
  EXPECT_LT(population_std(savgol_filter(x, 11, 3)), population_std(x));
}

TEST(Savgol, IsLinear) {
  Rng rng(7);
  std::vector<double> a(100), b(100), mix(100);
  for (std::size_t i = 0; i < 100; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
    mix[i] = 2.5 * a[i] - 0.7 * b[i];
  }
  const auto fa = savgol_filter(a, 11, 3), fb = savgol_filter(b, 11, 3), fm = savgol_filter(mix, 11, 3);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_NEAR(fm[i], 2.5 * fa[i] - 0.7 * fb[i], 1e-12);
}

TEST(Savgol, InvalidWindow) {
  const std::vector<double> x(20, 1.0);
  EXPECT_THROW(savgol_filter(x, 10, 3), ConfigError);
  EXPECT_THROW(savgol_filter(x, 3, 3), ConfigError);
  EXPECT_THROW(savgol_filter(x, 21, 3), ConfigError);
}

TEST(DecomposeBscan, Examples) {
  const std::vector<float> same = {1, 2, 3, 1, 2, 3};
  for (double r : decompose_bscan(same, 2, 3).residuals) EXPECT_EQ(r, 0.0);
  const std::vector<float> two = {1, 1, 3, 3};
  const auto d = decompose_bscan(two, 2, 2);
  EXPECT_EQ(d.structural, (std::vector<double>{2, 2}));
  EXPECT_EQ(d.residuals, (std::vector<double>{-1, -1, 1, 1}));
  EXPECT_THROW(decompose_bscan(std::vector<float>{1, 2}, 1, 2), DataError);
}

TEST(DecomposeBscan, ResidualsCancelAndReconstruct) {
  Rng rng(12);
  std::vector<float> b(64 * 50);
  for (auto& v : b) v = static_cast<float>(rng.uniform());
  const auto d = decompose_bscan(b, 64, 50);
  for (std::size_t t = 0; t < 50; ++t) {
    double s = 0;
    for (std::size_t e = 0; e < 64; ++e) {
      s += d.residuals[e * 50 + t];
      EXPECT_EQ(static_cast<float>(d.structural[t] + d.residuals[e * 50 + t]), b[e * 50 + t]);
    }
    EXPECT_LT(std::abs(s / 64), 1e-12);
  }
}

TEST(FitAscanModel, ZeroNoise) {
  std::vector<VolumeScan> vols;
  std::vector<float> d(std::size_t(3) * kElements * 40);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.1f + 0.001f * float(i % 40);
  vols.emplace_back(3, kElements, 40, d);
  const auto m = fit_ascan_model(vols, {11, 3, false});
  EXPECT_EQ(m.random_sigma, 0.0);
  EXPECT_EQ(m.structural_dev_sigma, 0.0);
  EXPECT_NEAR(m.mean_structural[7], 0.107, 1e-7);
  EXPECT_THROW(fit_ascan_model(std::vector<VolumeScan>{VolumeScan::zeros(1, kElements, 40)}), DataError);
}

TEST(FitAscanModel, RoundTripRecoversReferenceSigmas) {
  const auto truth = reference_model(200, 0.003, 0.013);
  Rng rng(31);
  std::vector<VolumeScan> vols;
  for (int i = 0; i < 2; ++i) vols.push_back(synth_ascan_noise_volume(truth, 64, rng));
  const auto fit = fit_ascan_model(vols, truth.savgol);
  EXPECT_NEAR(fit.random_sigma, 0.013, 0.05 * 0.013);
  EXPECT_NEAR(fit.structural_dev_sigma, 0.003, 0.05 * 0.003);
  EXPECT_EQ(to_json(fit_ascan_model(vols, truth.savgol)), to_json(fit));
}

TEST(StructuralProfile, Properties) {
  auto m = reference_model(80, 0.0, 0.0);
  Rng rng(1);
  EXPECT_EQ(synth_structural_profile(m, rng), m.mean_structural);
  m.structural_dev_sigma = 0.003;
  EXPECT_NE(synth_structural_profile(m, rng), synth_structural_profile(m, rng));

  // Smoothing lowers roughness relative to the unfiltered draw from the same stream.
  m.savgol = {11, 3, true};
  auto raw_model = m;
  raw_model.savgol.enabled = false;
  Rng r1(9), r2(9);
  const auto smooth = synth_structural_profile(m, r1);
  const auto rough = synth_structural_profile(raw_model, r2);
  auto roughness = [](const std::vector<double>& p) {
    double s = 0;
    for (std::size_t i = 1; i + 1 < p.size(); ++i) s += std::abs(p[i + 1] - 2 * p[i] + p[i - 1]);
    return s / double(p.size() - 2);
  };
  EXPECT_LE(roughness(smooth), roughness(rough));
}

TEST(AscanNoiseVolume, ZeroRandomSigmaGivesIdenticalAscans) {
  const auto m = reference_model(60, 0.003, 0.0);
  Rng rng(2);
  const auto v = synth_ascan_noise_volume(m, 3, rng);
  for (std::uint32_t b = 0; b < 3; ++b)
    for (std::uint32_t e = 1; e < kElements; ++e) {
      const auto t0 = v.trace(b, 0), te = v.trace(b, e);
      EXPECT_TRUE(std::equal(t0.begin(), t0.end(), te.begin()));
    }
  EXPECT_FALSE(std::equal(v.trace(0, 0).begin(), v.trace(0, 0).end(), v.trace(1, 0).begin()));
}

TEST(AscanNoiseVolume, PooledResidualStdMatchesSigma) {
  const auto m = reference_model(200, 0.003, 0.013);
  Rng rng(3);
  const auto v = synth_ascan_noise_volume(m, 64, rng);
  double ss = 0;
  std::size_t n = 0;
  for (std::uint32_t b = 0; b < 64; ++b) {
    const auto d = decompose_bscan(v.data().subspan(std::size_t(b) * kElements * 200, kElements * 200), kElements, 200);
    for (double r : d.residuals) ss += r * r;
    n += d.residuals.size();
  }
  const double pooled = std::sqrt(ss / double(n) * 64.0 / 63.0);
  EXPECT_NEAR(pooled, 0.013, 0.03 * 0.013);
}

TEST(AscanNoiseVolume, OutOfRangeWindowIsError) {
  auto m = reference_model(60, 0.0, 0.0);
  m.profile_offset = 100;
  Rng rng(1);
  EXPECT_THROW(synth_ascan_noise_volume(m, 1, rng, 90, 10), DimensionError);
  EXPECT_THROW(synth_ascan_noise_volume(m, 1, rng, 150, 20), DimensionError);
  EXPECT_EQ(synth_ascan_noise_volume(m, 1, rng, 150, 10).meta().time_offset, 150u);
}

TEST(SuperposeClip, Examples) {
  auto d = masked(0.7f, 0.3f);
  EXPECT_EQ(superpose_clip(d, CScanImage::filled(64, 64, 0.0f)), d);
  const auto sum = superpose_clip(d, CScanImage::filled(64, 64, 0.5f));
  EXPECT_EQ(sum.at(30, 30), 1.0f);
  EXPECT_FLOAT_EQ(sum.at(0, 0), 0.8f);
  EXPECT_EQ(sum.defect_mask, d.defect_mask);
  const auto u = superpose_clip(CScanImage::filled(64, 64, 0.3f), CScanImage::filled(64, 64, 0.2f));
  for (float p : u.pixels) EXPECT_FLOAT_EQ(p, 0.5f);
  EXPECT_THROW(superpose_clip(d, CScanImage::filled(32, 64, 0.0f)), DimensionError);
}

TEST(SuperposeClip, StaysInUnitRange) {
  Rng rng(4);
  auto a = CScanImage::filled(64, 64, 0.0f), b = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.pixels[i] = float(rng.uniform());
    b.pixels[i] = float(rng.uniform());
  }
  const auto s = superpose_clip(a, b);
  for (std::size_t i = 0; i < s.size(); ++i) {
    ASSERT_TRUE(s.pixels[i] >= 0.0f && s.pixels[i] <= 1.0f);
    if (double(a.pixels[i]) + b.pixels[i] <= 1.0) {
      ASSERT_EQ(s.pixels[i], float(double(a.pixels[i]) + b.pixels[i]));
    }
  }
}

TEST(Reject, Examples) {
  EXPECT_FALSE(reject(masked(0.9f, 0.3f)));
  EXPECT_TRUE(reject(masked(0.4f, 0.5f)));
  EXPECT_TRUE(reject(masked(0.4f, 0.3f), {1.5}));
  EXPECT_THROW(reject(CScanImage::filled(64, 64, 0.1f)), DataError);
  EXPECT_THROW(reject(masked(0.9f, 0.3f), {0.5}), ConfigError);
}

TEST(Reject, MonotoneInNoiseScale) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    auto d = masked(float(rng.uniform(0.2, 0.8)), 0.0f);
    const auto n = sample_invgauss_image(kReferenceIG, 64, 64, rng);
    bool rejected = false;
    for (double k : {1.0, 1.5, 2.0, 3.0, 5.0}) {
      const bool now = reject(superpose_clip(d, n, k));
      EXPECT_TRUE(now || !rejected) << trial << " scale " << k;
      rejected = now;
    }
  }
}

TEST(MakeDataset, ZeroNoiseKeepsEveryDefect) {
  DefectSource src;
  for (int i = 0; i < 5; ++i) src.images.push_back(masked(0.5f + 0.1f * float(i % 3), 0.05f));
  const RealNoise zero{{CScanImage::filled(64, 64, 0.0f)}, 1.0};
  const auto r = make_dataset(src, zero, {}, Rng(1));
  EXPECT_EQ(r.kept, 5u);
  EXPECT_EQ(r.rejected, 0u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(r.dataset.images[i].pixels, src.images[i].pixels);
    EXPECT_EQ(r.dataset.images[i].label, Label::defective);
  }
  const auto c = make_dataset(src, CScanNoise{kReferenceIG, 0.0}, {}, Rng(1));
  EXPECT_EQ(c.kept, 5u);
}

TEST(MakeDataset, CscanNoiseRejectsDimDefects) {
  DefectSource src;
  for (int i = 0; i < 40; ++i) src.images.push_back(masked(0.15f + 0.02f * float(i), 0.0f));
  const auto r = make_dataset(src, CScanNoise{kReferenceIG, 1.0}, {}, Rng(2));
  EXPECT_GT(r.rejected, 0u);
  EXPECT_GT(r.kept, 0u);
  EXPECT_EQ(r.kept + r.rejected, 40u);
  EXPECT_EQ(r.dataset.provenance, Provenance::cscan_noise);
}

TEST(MakeDataset, AscanNoiseAddsPerSampleBeforeExtraction) {
  VolumeMeta meta;
  meta.normalized = true;
  meta.time_offset = 10;
  auto vol = VolumeScan::zeros(64, kElements, 10, meta);
  auto data = std::move(vol).take_data();
  const VolumeScan probe = VolumeScan::zeros(64, kElements, 10);
  std::vector<std::uint8_t> mask(64 * 64, 0);
  for (std::uint32_t e = 30; e < 34; ++e)
    for (std::uint32_t b = 30; b < 34; ++b) {
      data[probe.index(b, e, 2)] = 0.9f;
      data[probe.index(b, e, 7)] = 0.9f;
      mask[e * 64 + b] = 1;
    }
  DefectSource src;
  src.volumes.push_back({VolumeScan(64, kElements, 10, data, meta), mask, 5, {}});
  auto m = reference_model(40, 0.0, 0.0);
  m.profile_offset = 5;
  const auto r = make_dataset(src, AScanNoise{m, 1.0}, {}, Rng(3));
  ASSERT_EQ(r.kept, 2u);
  // Noise is the structural mean profile at absolute samples 10..19; clean pixels get its window max.
  for (std::size_t w = 0; w < 2; ++w) {
    const auto& img = r.dataset.images[w];
    double expect = 0;
    for (std::size_t t = 5 + 5 * w; t < 10 + 5 * w; ++t) expect = std::max(expect, m.mean_structural[t]);
    EXPECT_FLOAT_EQ(img.at(0, 0), float(expect));
    EXPECT_FLOAT_EQ(img.at(31, 31), float(0.9f + m.mean_structural[7 + 5 * w]));
  }
}
