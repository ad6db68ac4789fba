#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"
#include "viewlab/viewgen.hpp"

using namespace viewlab;
using namespace viewlab::testing;

namespace {

const ImageShape kImage{3, 16, 16};

std::vector<ImageTensor> blob_images(std::size_t count, std::uint64_t seed, const ImageShape& shape = kImage) {
  BlobGenerator g(shape, 3);
  std::mt19937_64 rng(seed);
  std::vector<ImageTensor> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate(g, random_vector(g.latent_dim(), rng)));
  return out;
}

/// Returns NaN everywhere; used to trigger the non-finite objective path.
class NanMap final : public DifferentiableMap {
 public:
  explicit NanMap(std::size_t dim) : shape_{dim} {}
  const Shape& input_shape() const override { return shape_; }
  const Shape& output_shape() const override { return shape_; }
  Vector evaluate(const Vector& x) const override {
    return Vector::Constant(x.size(), std::numeric_limits<double>::quiet_NaN());
  }
  Vector pullback(const Vector& x, const Vector&, Vector*) const override { return evaluate(x); }
  std::string architecture_id() const override { return "nan"; }
  nlohmann::json describe() const override { return {{"kind", "nan"}}; }

 private:
  Shape shape_;
};

WSearchConfig toy_config() {
  WSearchConfig c;
  c.normalize = false;
  c.views = 1;
  c.lambda = 0.0;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Expert transforms

TEST(ExpertTransform, IdentityConfigIsExact) {
  Rng rng(1);
  for (const auto& x : blob_images(5, 2)) EXPECT_EQ(expert_transform(x, kImage, TransformConfig::identity(), rng), x);
}

TEST(ExpertTransform, SameSeedSameOutput) {
  const auto x = blob_images(1, 3)[0];
  Rng a(7), b(7);
  EXPECT_EQ(expert_transform(x, kImage, TransformConfig::full(), a), expert_transform(x, kImage, TransformConfig::full(), b));
}

TEST(ExpertTransform, WeakPreset) {
  const auto w = TransformConfig::weak();
  EXPECT_EQ(w.crop_scale_low, 0.8);
  EXPECT_EQ(w.crop_scale_high, 1.0);
  EXPECT_EQ(w.flip_probability, 0.5);
  EXPECT_EQ(w.color_jitter_strength, 0.0);
  // No jitter: every output pixel is a convex combination of input pixels of
  // the same channel, so per-channel ranges cannot grow.
  const auto x = blob_images(1, 4)[0];
  Rng rng(5);
  const auto hw = static_cast<Eigen::Index>(kImage.height * kImage.width);
  for (int t = 0; t < 20; ++t) {
    const ImageTensor y = expert_transform(x, kImage, w, rng);
    for (Eigen::Index c = 0; c < 3; ++c) {
      EXPECT_GE(y.segment(c * hw, hw).minCoeff(), x.segment(c * hw, hw).minCoeff() - 1e-12);
      EXPECT_LE(y.segment(c * hw, hw).maxCoeff(), x.segment(c * hw, hw).maxCoeff() + 1e-12);
    }
  }
}

TEST(ExpertTransform, FlipOnly) {
  auto cfg = TransformConfig::identity();
  cfg.flip_probability = 1.0;
  const auto x = blob_images(1, 6)[0];
  Rng rng(1);
  const ImageTensor y = expert_transform(x, kImage, cfg, rng);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < kImage.height; ++i)
      for (std::size_t j = 0; j < kImage.width; ++j)
        EXPECT_EQ(y[static_cast<Eigen::Index>((c * kImage.height + i) * kImage.width + j)],
                  x[static_cast<Eigen::Index>((c * kImage.height + i) * kImage.width + kImage.width - 1 - j)]);
}

TEST(ExpertTransform, PreservesShapeAndRange) {
  std::mt19937_64 src(8);
  Rng rng(9);
  const ImageShape img{3, 32, 32};
  for (int t = 0; t < 50; ++t) {
    const ImageTensor x = random_image(img.size(), src);
    const ImageTensor y = expert_transform(x, img, TransformConfig::full(), rng);
    ASSERT_EQ(y.size(), x.size());
    EXPECT_GE(y.minCoeff(), 0.0);
    EXPECT_LE(y.maxCoeff(), 1.0);
  }
}

TEST(ExpertTransform, RejectsBadInput) {
  Rng rng(1);
  EXPECT_THROW(expert_transform(Vector::Zero(10), kImage, TransformConfig::full(), rng), ConfigError);
  auto bad = TransformConfig::full();
  bad.crop_scale_low = 0.9;
  bad.crop_scale_high = 0.5;
  EXPECT_THROW(expert_transform(blob_images(1, 1)[0], kImage, bad, rng), ConfigError);
}

// ---------------------------------------------------------------------------
// W-search

TEST(WSearch, CircleOracleSingleView) {
  IdentityMap id(2);
  const Vector origin = Vector::Zero(2);
  WSearchConfig cfg = toy_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const WSearchResult r = w_search(origin, id, id, id, cfg, rng);
    EXPECT_NEAR(r.latents[0].norm(), 0.3, 1e-3) << "seed " << seed;
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.images[0], r.latents[0]);
  }
}

TEST(WSearch, FeasibleUniformityOracle) {
  IdentityMap id(2);
  const Vector origin = Vector::Zero(2);
  WSearchConfig cfg = toy_config();
  cfg.views = 2;
  cfg.epsilon2 = 0.5;
  cfg.lambda = 0.01;
  cfg.steps = 5000;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const WSearchResult r = w_search(origin, id, id, id, cfg, rng);
    for (const auto& w : r.latents) EXPECT_NEAR(w.norm(), 0.3, 1e-2) << "seed " << seed;
    EXPECT_GE((r.latents[0] - r.latents[1]).norm(), 0.5 - 1e-2) << "seed " << seed;
    EXPECT_LE(r.mean_abs_residual(), 1e-2);
  }
}

TEST(WSearch, ZeroLambdaIsPureBoundary) {
  std::mt19937_64 rng(10);
  Network f = make_encoder(kImage, 8, 1);
  BlobGenerator g(kImage, 2);
  WSearchConfig cfg;
  cfg.lambda = 0.0;
  std::vector<LatentCode> w;
  for (int k = 0; k < 3; ++k) w.push_back(random_vector(g.latent_dim(), rng));
  const Vector z0 = encode(f, blob_images(1, 11)[0]);
  const auto obj = w_search_objective(w, z0, f, g, cfg);
  double boundary = 0.0;
  for (const auto& wk : w) {
    const double r = (encode(f, generate(g, wk)) - z0).norm() - cfg.epsilon1;
    boundary += r * r / 3.0;
  }
  EXPECT_NEAR(obj.value, boundary, 1e-12);
  EXPECT_EQ(obj.uniformity, 0.0);
}

TEST(WSearch, SingleViewHasNoUniformityTerm) {
  IdentityMap id(2);
  WSearchConfig cfg = toy_config();
  cfg.lambda = 1.0;
  const auto obj = w_search_objective({Vector::Ones(2)}, Vector::Zero(2), id, id, cfg);
  EXPECT_EQ(obj.uniformity, 0.0);
  EXPECT_NEAR(obj.value, std::pow(std::sqrt(2.0) - 0.3, 2), 1e-14);
}

TEST(WSearch, ObjectiveGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  Network f = make_encoder(kImage, 8, 2);
  BlobGenerator g(kImage, 2);
  const std::size_t m = g.latent_dim(), n = 3;
  const auto anchors = blob_images(20, 13);
  for (auto space : {DiversitySpace::embedding, DiversitySpace::latent}) {
    for (int t = 0; t < 20; ++t) {
      WSearchConfig cfg;
      cfg.epsilon2 = space == DiversitySpace::latent ? 50.0 : 2.0;  // keep the hinge active
      cfg.lambda = 0.1;
      cfg.diversity = space;
      cfg.penalty = t % 2 ? BoundaryPenalty::huber : BoundaryPenalty::squared;
      const Vector z0 = encode(f, anchors[static_cast<std::size_t>(t)]);
      const Vector point = random_vector(n * m, rng);
      auto split = [&](const Vector& v) {
        std::vector<LatentCode> w;
        for (std::size_t k = 0; k < n; ++k) w.push_back(v.segment(static_cast<Eigen::Index>(k * m), static_cast<Eigen::Index>(m)));
        return w;
      };
      const auto obj = w_search_objective(split(point), z0, f, g, cfg);
      ASSERT_GT(obj.uniformity, 0.0);
      Vector analytic(point.size());
      for (std::size_t k = 0; k < n; ++k) analytic.segment(static_cast<Eigen::Index>(k * m), static_cast<Eigen::Index>(m)) = obj.grad[k];
      const auto rep = grad_check([&](const Vector& v) { return w_search_objective(split(v), z0, f, g, cfg).value; },
                                  point, analytic);
      EXPECT_LE(rep.max_relative_error, 1e-4) << to_string(space) << " trial " << t;
    }
  }
}

TEST(WSearch, NonFiniteObjectiveAbortsWithIteration) {
  NanMap nan(2);
  IdentityMap id(2);
  Rng rng(1);
  WSearchConfig cfg = toy_config();
  const Vector origin = Vector::Zero(2);
  try {
    w_search(origin, nan, id, &origin, cfg, rng);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
  }
}

TEST(WSearch, InitPolicies) {
  IdentityMap id(2);
  const Vector origin = Vector::Zero(2);
  WSearchConfig cfg = toy_config();
  Rng rng(2);
  EXPECT_THROW(w_search(origin, id, id, nullptr, cfg, rng), ConfigError);
  cfg.init_policy = InitPolicy::random;
  const auto r = w_search(origin, id, id, nullptr, cfg, rng);
  EXPECT_NEAR(r.latents[0].norm(), 0.3, 1e-3);
}

TEST(WSearch, ViewsStayNearAnchorOnBlobSetup) {
  Network f = make_encoder(kImage, 8, 3);
  BlobGenerator g(kImage, 2);
  std::mt19937_64 src(14);
  const LatentCode w0 = random_vector(g.latent_dim(), src, 0.5);
  const ImageTensor x0 = generate(g, w0);
  WSearchConfig cfg;
  cfg.views = 2;
  cfg.epsilon1 = 0.05;
  cfg.epsilon2 = 0.07;
  cfg.step_size = 0.5;
  cfg.steps = 300;
  Rng rng(15);
  const auto r = w_search(x0, f, g, &w0, cfg, rng);
  const double start = 2.0 * cfg.epsilon1;  // residuals start at about -epsilon1
  EXPECT_LT(r.mean_abs_residual(), start);
  EXPECT_EQ(r.images.size(), 2u);
}

TEST(WSearch, ConfigValidation) {
  WSearchConfig cfg;
  cfg.epsilon1 = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = WSearchConfig{};
  cfg.views = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = WSearchConfig{};
  cfg.lambda = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Online 1-step

TEST(OnlineWSearch, ZeroGradientLeavesLatent) {
  const Vector w = Vector::LinSpaced(4, -1.0, 1.0);
  EXPECT_EQ(sign_gradient_step(w, Vector::Zero(4), 0.1), w);
  LinearMap constant(4, 3);  // zero weights: constant objective
  EXPECT_EQ(w_search_online_1step(Vector::Zero(4), constant, IdentityMap(4), w, 0.3, 0.1, false), w);
}

TEST(OnlineWSearch, LinearObjective) {
  Vector w(3), c(3);
  w << 0.5, -0.25, 2.0;
  c << 3.0, -0.5, 1e-9;
  Vector expected(3);
  expected << 0.5 - 0.01, -0.25 + 0.01, 2.0 - 0.01;
  EXPECT_EQ(sign_gradient_step(w, c, 0.01), expected);
}

TEST(OnlineWSearch, EveryCoordinateMovesByStep) {
  Network f = make_encoder(kImage, 8, 4);
  BlobGenerator g(kImage, 2);
  std::mt19937_64 rng(16);
  const ImageTensor x0 = blob_images(1, 17)[0];
  for (int t = 0; t < 5; ++t) {
    const Vector w = random_vector(g.latent_dim(), rng);
    const Vector out = w_search_online_1step(x0, f, g, w, 0.3, 0.05);
    for (Eigen::Index i = 0; i < w.size(); ++i) EXPECT_NEAR(std::abs(out[i] - w[i]), 0.05, 1e-15);
  }
}

// ---------------------------------------------------------------------------
// W-perturb

TEST(WPerturb, ZeroSigmaReproducesInversion) {
  BlobGenerator g(kImage, 2);
  Network e = make_inverter(kImage, g.latent_dim(), 5);
  const ImageTensor x = blob_images(1, 18)[0];
  Rng rng(3);
  const auto r = w_perturb(x, g, e, PerturbConfig{0.0, 4}, rng);
  const ImageTensor ref = generate(g, e.evaluate(x));
  for (const auto& img : r.images) EXPECT_EQ(img, ref);
}

TEST(WPerturb, SampleStatistics) {
  Rng rng(4);
  const double sigma = 0.2;
  const std::size_t draws = 100000;
  const Vector s = sample_perturbation(draws, sigma, rng);
  const double mean = s.mean();
  const double sd = std::sqrt((s.array() - mean).square().sum() / static_cast<double>(draws - 1));
  EXPECT_LE(std::abs(mean), 3.0 * sigma / std::sqrt(static_cast<double>(draws)));
  EXPECT_NEAR(sd, sigma, 0.02 * sigma);
}

TEST(WPerturb, LatentsAreAnchorPlusNoise) {
  BlobGenerator g(kImage, 2);
  const LatentCode w0 = Vector::Constant(static_cast<Eigen::Index>(g.latent_dim()), 0.3);
  Rng a(5), b(5);
  const auto r = w_perturb(w0, g, PerturbConfig{0.2, 3}, a);
  ASSERT_EQ(r.latents.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const Vector expect = w0 + sample_perturbation(g.latent_dim(), 0.2, b);
    EXPECT_EQ(r.latents[i], expect);
    EXPECT_EQ(r.images[i], generate(g, expect));
  }
}

TEST(WPerturb, RejectsBadConfig) {
  BlobGenerator g(kImage, 2);
  Rng rng(1);
  EXPECT_THROW(w_perturb(LatentCode::Zero(static_cast<Eigen::Index>(g.latent_dim())), g, PerturbConfig{-0.1, 1}, rng), ConfigError);
  EXPECT_THROW(w_perturb(LatentCode::Zero(static_cast<Eigen::Index>(g.latent_dim())), g, PerturbConfig{0.1, 0}, rng), ConfigError);
  EXPECT_THROW(w_perturb(LatentCode::Zero(3), g, PerturbConfig{}, rng), ConfigError);
}

// ---------------------------------------------------------------------------
// Calibration

TEST(CalibrateEpsilon, IdentityTransformGivesZero) {
  Network f = make_encoder(kImage, 8, 6);
  const auto est = calibrate_epsilon(f, blob_images(10, 19), kImage, TransformConfig::identity(), 1);
  EXPECT_EQ(est.epsilon1, 0.0);
  EXPECT_NEAR(est.epsilon2, 0.2, 1e-15);
}

TEST(CalibrateEpsilon, EmptySampleRejected) {
  Network f = make_encoder(kImage, 8, 6);
  EXPECT_THROW(calibrate_epsilon(f, {}, kImage, TransformConfig::full(), 1), ConfigError);
}

TEST(CalibrateEpsilon, StableAcrossDisjointSamples) {
  const ImageShape img{3, 32, 32};
  Network f = make_encoder(img, 16, 7);
  const auto a = calibrate_epsilon(f, blob_images(1000, 20, img), img, TransformConfig::full(), 2);
  const auto b = calibrate_epsilon(f, blob_images(1000, 21, img), img, TransformConfig::full(), 3);
  EXPECT_GT(a.epsilon1, 0.0);
  EXPECT_NEAR(a.epsilon1, b.epsilon1, 0.1 * a.epsilon1);
  EXPECT_NEAR(a.epsilon2, a.epsilon1 + 0.2, 1e-15);
}

TEST(CalibrateEpsilon, LatentSpaceNeedsInverter) {
  Network f = make_encoder(kImage, 8, 6);
  EXPECT_THROW(calibrate_epsilon(f, blob_images(2, 1), kImage, TransformConfig::full(), 1, CalibrationSpace::latent),
               ConfigError);
  Network e = make_inverter(kImage, 15, 8);
  EXPECT_GT(calibrate_epsilon(f, blob_images(5, 1), kImage, TransformConfig::full(), 1, CalibrationSpace::latent, &e)
                .epsilon1,
            0.0);
}
