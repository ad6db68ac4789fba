#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"
#include "viewlab/inversion.hpp"

using namespace viewlab;
using namespace viewlab::testing;

namespace {

const ImageShape kImage{3, 16, 16};

InversionConfig pixel_only() {
  InversionConfig c;
  c.lambda_vgg = 0.0;
  c.lambda_adv = 0.0;
  return c;
}

double mse(const Vector& a, const Vector& b) { return (a - b).squaredNorm() / static_cast<double>(a.size()); }

class ScaledNan final : public DifferentiableMap {
 public:
  explicit ScaledNan(std::size_t dim) : shape_{dim} {}
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

struct LinearToy {
  Matrix a;
  std::vector<ImageTensor> train, held_out;
  std::vector<LatentCode> held_out_latents;
};

LinearToy linear_toy(std::size_t xdim, std::size_t wdim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LinearToy t;
  t.a = random_vector(xdim * wdim, rng).reshaped<Eigen::RowMajor>(static_cast<Eigen::Index>(xdim),
                                                                   static_cast<Eigen::Index>(wdim));
  for (int i = 0; i < 256; ++i) t.train.push_back(t.a * random_vector(wdim, rng));
  for (int i = 0; i < 64; ++i) {
    t.held_out_latents.push_back(random_vector(wdim, rng));
    t.held_out.push_back(t.a * t.held_out_latents.back());
  }
  return t;
}

}  // namespace

TEST(InversionLoss, PerfectReconstructionIsZero) {
  IdentityMap g(12), e(12);
  LinearMap h(12, 4);
  std::mt19937_64 rng(1);
  h.set_parameters(random_vector(48, rng));
  InversionConfig cfg;
  cfg.lambda_adv = 0.0;
  EXPECT_EQ(inversion_loss(random_image(12, rng), e, g, nullptr, &h, cfg).total, 0.0);
}

TEST(InversionLoss, ZeroWeightsLeaveReconstructionOnly) {
  BlobGenerator g(kImage, 2);
  Network e = make_inverter(kImage, g.latent_dim(), 1);
  std::mt19937_64 rng(2);
  const ImageTensor x = random_image(kImage.size(), rng);
  const auto t = inversion_loss(x, e, g, nullptr, nullptr, pixel_only());
  EXPECT_EQ(t.total, (x - g.evaluate(e.evaluate(x))).norm());
  EXPECT_EQ(t.perceptual, 0.0);
  EXPECT_EQ(t.adversarial, 0.0);
}

TEST(InversionLoss, MatchesTermByTermEvaluation) {
  BlobGenerator g(kImage, 2);
  Network e = make_inverter(kImage, g.latent_dim(), 3);
  Network d = make_discriminator(kImage, 4);
  Network h = make_perceptual(kImage, 5);
  std::mt19937_64 rng(6);
  InversionConfig cfg;
  cfg.lambda_vgg = 0.3;
  cfg.lambda_adv = 0.7;
  for (int t = 0; t < 20; ++t) {
    const ImageTensor x = random_image(kImage.size(), rng);
    const Vector xr = g.evaluate(e.evaluate(x));
    const double rec = std::sqrt((x - xr).array().square().sum());
    const double perc = 0.3 * std::sqrt((h.evaluate(x) - h.evaluate(xr)).array().square().sum());
    const double adv = 0.7 * std::log(1.0 + std::exp(-d.evaluate(xr)[0]));
    const auto terms = inversion_loss(x, e, g, &d, &h, cfg);
    EXPECT_NEAR(terms.reconstruction, rec, 1e-9);
    EXPECT_NEAR(terms.perceptual, perc, 1e-9);
    EXPECT_NEAR(terms.adversarial, adv, 1e-9);
    EXPECT_NEAR(terms.total, rec + perc + adv, 1e-9);
  }
}

TEST(InversionLoss, GradientMatchesFiniteDifferences) {
  BlobGenerator g(kImage, 2);
  Network d = make_discriminator(kImage, 7);
  Network h = make_perceptual(kImage, 8);
  std::mt19937_64 rng(9);
  InversionConfig cfg;
  cfg.lambda_vgg = 0.5;
  cfg.lambda_adv = 0.5;
  for (int t = 0; t < 20; ++t) {
    const ImageTensor x = random_image(kImage.size(), rng);
    const LatentCode w = random_vector(g.latent_dim(), rng);
    const auto ev = inversion_objective(x, w, g, &d, &h, cfg);
    const auto rep = grad_check(
        [&](const Vector& v) { return inversion_objective(x, v, g, &d, &h, cfg).terms.total; }, w, ev.grad);
    EXPECT_LE(rep.max_relative_error, 1e-4) << "trial " << t;
  }
}

TEST(InversionLoss, MissingNetworksRejected) {
  IdentityMap g(4);
  InversionConfig cfg;
  EXPECT_THROW(inversion_objective(Vector::Zero(4), Vector::Zero(4), g, nullptr, nullptr, cfg), ConfigError);
}

TEST(InversionLoss, NonFiniteTermIsNamed) {
  IdentityMap g(4);
  ScaledNan h(4);
  InversionConfig cfg;
  cfg.lambda_adv = 0.0;
  try {
    inversion_objective(Vector::Zero(4), Vector::Ones(4), g, nullptr, &h, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("perceptual"), std::string::npos) << e.what();
  }
}

TEST(InversionConfig, RecordsWeights) {
  InversionConfig cfg;
  const auto j = cfg.to_json();
  EXPECT_EQ(j.at("lambda_vgg").get<double>(), 0.1);
  EXPECT_EQ(j.at("lambda_adv").get<double>(), 0.01);
}

TEST(TrainInverter, LinearGeneratorApproachesPseudoInverse) {
  const LinearToy toy = linear_toy(8, 3, 10);
  LinearMap g(toy.a);
  LinearMap e(8, 3);
  InversionConfig cfg = pixel_only();
  cfg.encoder_steps = 3000;
  cfg.encoder_lr = 5e-3;
  cfg.eval_every = 100;
  const auto rep = train_inverter(toy.train, toy.held_out, e, g, nullptr, nullptr, cfg, 1);
  EXPECT_LT(rep.final_held_out, rep.initial_held_out);
  const Matrix pinv = Eigen::MatrixXd(toy.a).completeOrthogonalDecomposition().pseudoInverse();
  double err = 0.0;
  for (std::size_t i = 0; i < toy.held_out.size(); ++i) {
    const Vector& x = toy.held_out[i];
    err += mse(x, toy.a * e.evaluate(x)) / static_cast<double>(toy.held_out.size());
    EXPECT_NEAR((e.evaluate(x) - pinv * x).norm(), 0.0, 0.05 * x.norm() + 1e-3);
  }
  EXPECT_LE(err, 1e-3);
}

TEST(TrainInverter, HeldOutLossDecreasesOnBlobImages) {
  BlobGenerator g(kImage, 2);
  std::mt19937_64 rng(11);
  std::vector<ImageTensor> train, held;
  for (int i = 0; i < 64; ++i) train.push_back(generate(g, random_vector(g.latent_dim(), rng)));
  for (int i = 0; i < 16; ++i) held.push_back(generate(g, random_vector(g.latent_dim(), rng)));
  Network e = make_inverter(kImage, g.latent_dim(), 12);
  Network d = make_discriminator(kImage, 13);
  Network h = make_perceptual(kImage, 14);
  InversionConfig cfg;
  cfg.discriminator.steps = 30;
  const auto drep = pretrain_discriminator(d, train, g, cfg.discriminator, 2);
  EXPECT_FALSE(d.trainable());
  EXPECT_TRUE(std::isfinite(drep.final_loss));
  cfg.encoder_steps = 60;
  cfg.eval_every = 20;
  const auto rep = train_inverter(train, held, e, g, &d, &h, cfg, 3);
  EXPECT_LT(rep.final_held_out, rep.initial_held_out);
  EXPECT_EQ(rep.curve.size(), 4u);
  EXPECT_NEAR(mean_inversion_loss(held, e, g, &d, &h, cfg), rep.final_held_out, 1e-12);
}

TEST(TrainInverter, DivergenceAborts) {
  const LinearToy toy = linear_toy(8, 3, 15);
  LinearMap g(toy.a);
  LinearMap e(8, 3);
  InversionConfig cfg = pixel_only();
  cfg.encoder_lr = 1e3;
  cfg.encoder_steps = 50;
  cfg.eval_every = 1;
  EXPECT_THROW(train_inverter(toy.train, toy.held_out, e, g, nullptr, nullptr, cfg, 1), NumericalError);
}

TEST(OptimizeLatent, ZeroStepsReturnsWarmStart) {
  BlobGenerator g(kImage, 2);
  Network e = make_inverter(kImage, g.latent_dim(), 16);
  std::mt19937_64 rng(17);
  const ImageTensor x = random_image(kImage.size(), rng);
  InversionConfig cfg = pixel_only();
  cfg.latent_opt_steps = 0;
  EXPECT_EQ(optimize_latent(x, e, g, nullptr, nullptr, cfg).latent, e.evaluate(x));
}

TEST(OptimizeLatent, RecoversPlantedLatentLinear) {
  const LinearToy toy = linear_toy(8, 3, 18);
  LinearMap g(toy.a);
  InversionConfig cfg = pixel_only();
  cfg.latent_opt_steps = 300;
  std::mt19937_64 rng(19);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto r = optimize_latent(toy.held_out[i], random_vector(3, rng), g, nullptr, nullptr, cfg);
    EXPECT_LE(mse(toy.held_out[i], g.evaluate(r.latent)), 1e-3);
  }
}

TEST(OptimizeLatent, RecoversPlantedLatentBlob) {
  BlobGenerator g(kImage, 2);
  std::mt19937_64 rng(20);
  InversionConfig cfg = pixel_only();
  cfg.latent_opt_steps = 300;
  for (int i = 0; i < 10; ++i) {
    const LatentCode w_true = random_vector(g.latent_dim(), rng);
    const ImageTensor x = generate(g, w_true);
    const auto r = optimize_latent(x, LatentCode(w_true + random_vector(g.latent_dim(), rng, 0.1)), g, nullptr,
                                   nullptr, cfg);
    EXPECT_LE(mse(x, g.evaluate(r.latent)), 1e-3) << "image " << i;
  }
}

TEST(OptimizeLatent, NeverIncreasesObjective) {
  BlobGenerator g(kImage, 2);
  Network e = make_inverter(kImage, g.latent_dim(), 21);
  Network d = make_discriminator(kImage, 22);
  Network h = make_perceptual(kImage, 23);
  std::mt19937_64 rng(24);
  InversionConfig cfg;
  cfg.latent_opt_steps = 5;
  for (int i = 0; i < 100; ++i) {
    const ImageTensor x = generate(g, random_vector(g.latent_dim(), rng));
    const auto r = optimize_latent(x, e, g, &d, &h, cfg);
    EXPECT_LE(r.final_loss, r.initial_loss);
    EXPECT_EQ(r.initial_loss, inversion_loss(x, e, g, &d, &h, cfg).total);
    EXPECT_NEAR(r.final_loss, inversion_objective(x, r.latent, g, &d, &h, cfg).terms.total, 1e-12);
  }
}
