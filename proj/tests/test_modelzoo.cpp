#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "test_support.hpp"
#include "viewlab/losses.hpp"
#include "viewlab/modelzoo.hpp"

using namespace viewlab;
using viewlab::testing::random_image;
using viewlab::testing::random_vector;

namespace {

const ImageShape kSmall{3, 8, 8};

// Checks c . normalize(f(x)) against finite differences in x.
double encode_grad_error(const DifferentiableMap& f, const Vector& x, const Vector& c,
                         const GradCheckOptions& opt = {}) {
  auto ev = encode_linearized(f, x);
  const Vector analytic = ev.pullback(c, nullptr);
  return grad_check([&](const Vector& v) { return c.dot(encode(f, v)); }, x, analytic, opt)
      .max_relative_error;
}

}  // namespace

TEST(Encode, ZeroImageWithZeroBiasFallsBackToFirstBasisVector) {
  Network f = make_encoder(kSmall, 16, 1);
  const Vector z = encode(f, Vector::Zero(static_cast<Eigen::Index>(kSmall.size())));
  Vector e1 = Vector::Zero(16);
  e1[0] = 1.0;
  EXPECT_EQ(z, e1);
  auto ev = encode_linearized(f, Vector::Zero(static_cast<Eigen::Index>(kSmall.size())));
  EXPECT_EQ(ev.pullback(Vector::Ones(16), nullptr).norm(), 0.0);
}

TEST(Encode, OutputIsUnitNorm) {
  Network f = make_encoder(ImageShape{3, 32, 32}, 32, 2);
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    const Vector z = encode(f, random_image(3 * 32 * 32, rng));
    EXPECT_NEAR(z.norm(), 1.0, 1e-6);
  }
}

TEST(Encode, ShapeMismatchIsConfigError) {
  Network f = make_encoder(kSmall, 16, 1);
  EXPECT_THROW(encode(f, Vector::Zero(10)), ConfigError);
}

TEST(Encode, GradientMatchesFiniteDifferences) {
  Network f = make_encoder(kSmall, 16, 4);
  std::mt19937_64 rng(5);
  const Vector c = random_vector(16, rng);
  EXPECT_LE(encode_grad_error(f, random_image(kSmall.size(), rng), c), 1e-4);
}

TEST(Encode, FullResolutionGradientOnSampledCoordinates) {
  const ImageShape img{3, 32, 32};
  Network f = make_encoder(img, 32, 6);
  std::mt19937_64 rng(7);
  for (int t = 0; t < 3; ++t) {
    GradCheckOptions opt;
    opt.max_coordinates = 48;
    opt.seed = static_cast<std::uint64_t>(t);
    EXPECT_LE(encode_grad_error(f, random_image(img.size(), rng), random_vector(32, rng), opt), 1e-4);
  }
}

TEST(Generate, CanonicalLatentIsCentredBlob) {
  BlobGenerator g(kSmall, 3);
  const Vector img = generate(g, Vector::Zero(static_cast<Eigen::Index>(g.latent_dim())));
  // Closed form at w = 0: three coincident blobs of scale 0.12 at (0.5, 0.5),
  // colour sigmoid(1), background sigmoid(-1.5), gain 8.
  const double col = 1.0 / (1.0 + std::exp(-1.0));
  const double bg = 1.0 / (1.0 + std::exp(1.5));
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) {
      const double dx = (x + 0.5) / 8.0 - 0.5, dy = (y + 0.5) / 8.0 - 0.5;
      const double a = 3.0 * 8.0 * std::exp(-(dx * dx + dy * dy) / (2.0 * 0.12 * 0.12));
      const double expected = (bg + a * col) / (1.0 + a);
      for (std::size_t c = 0; c < 3; ++c)
        EXPECT_NEAR(img[static_cast<Eigen::Index>(c * 64 + y * 8 + x)], expected, 1e-15);
    }
  }
  // Centre pixels are brighter than corners.
  EXPECT_GT(img[3 * 8 + 3], img[0] + 0.3);
}

TEST(Generate, CanonicalLatentMatchesGoldenFile) {
  const ImageShape img{3, 32, 32};
  BlobGenerator g(img, 3);
  const Vector out = generate(g, Vector::Zero(static_cast<Eigen::Index>(g.latent_dim())));
  std::ifstream is(std::filesystem::path(VIEWLAB_TEST_DATA) / "blob_w0_3x32x32.txt");
  ASSERT_TRUE(is) << "golden file missing";
  std::vector<double> golden;
  for (double v; is >> v;) golden.push_back(v);
  ASSERT_EQ(golden.size(), img.size());
  for (std::size_t i = 0; i < golden.size(); ++i)
    EXPECT_NEAR(out[static_cast<Eigen::Index>(i)], golden[i], 1e-12) << "pixel " << i;
}

TEST(Generate, IsDeterministicAndInRange) {
  BlobGenerator g(ImageShape{3, 32, 32}, 3);
  std::mt19937_64 rng(11);
  for (int t = 0; t < 5; ++t) {
    const Vector w = random_vector(g.latent_dim(), rng, 2.0);
    const Vector a = generate(g, w), b = generate(g, w);
    EXPECT_EQ(a, b);
    EXPECT_TRUE(a.allFinite());
    EXPECT_GT(a.minCoeff(), 0.0);
    EXPECT_LT(a.maxCoeff(), 1.0);
  }
}

TEST(Generate, RejectsNonFiniteLatent) {
  BlobGenerator g(kSmall, 2);
  Vector w = Vector::Zero(static_cast<Eigen::Index>(g.latent_dim()));
  w[4] = std::nan("");
  EXPECT_THROW(generate(g, w), NumericalError);
}

TEST(Generate, GradientMatchesFiniteDifferences) {
  BlobGenerator g(ImageShape{3, 16, 16}, 3);
  std::mt19937_64 rng(12);
  const Vector w = random_vector(g.latent_dim(), rng);
  const Vector c = random_vector(g.output_size(), rng);
  EXPECT_LE(grad_check(g, w, c).max_relative_error, 1e-4);
}

TEST(GradCheck, ExactForLinearMap) {
  std::mt19937_64 rng(13);
  Matrix a(5, 4);
  for (auto& v : a.reshaped()) v = std::normal_distribution<double>()(rng);
  LinearMap map(a);
  const Vector x = random_vector(4, rng);
  EXPECT_LE(grad_check(map, x, Vector::Ones(5)).max_relative_error, 1e-10);
}

TEST(GradCheck, EncoderWithInfoNceProbe) {
  Network f = make_encoder(kSmall, 8, 14);
  std::mt19937_64 rng(15);
  const std::size_t n = 3;
  const IndexMap index = build_two_view(n);
  std::vector<Vector> images;
  for (std::size_t i = 0; i < 2 * n; ++i) images.push_back(random_image(kSmall.size(), rng));
  LossConfig cfg;
  cfg.variant = LossVariant::infonce;
  // Probe: InfoNCE as a function of the first image, the others fixed.
  auto loss_of = [&](const Vector& x0) {
    Matrix z(static_cast<Eigen::Index>(2 * n), 8);
    for (std::size_t i = 0; i < 2 * n; ++i)
      z.row(static_cast<Eigen::Index>(i)) = encode(f, i == 0 ? x0 : images[i]).transpose();
    return infonce_two_set(z, index, cfg);
  };
  const LossResult r = loss_of(images[0]);
  const Vector analytic = encode_linearized(f, images[0]).pullback(r.grad.row(0).transpose(), nullptr);
  const auto rep = grad_check([&](const Vector& x) { return loss_of(x).value; }, images[0], analytic);
  EXPECT_LE(rep.max_relative_error, 1e-4);
}

TEST(GradCheck, StepSizesGiveConsistentVerdicts) {
  Network f = make_encoder(kSmall, 8, 16);
  std::mt19937_64 rng(17);
  for (int t = 0; t < 5; ++t) {
    const Vector x = random_image(kSmall.size(), rng);
    const Vector c = random_vector(8, rng);
    GradCheckOptions coarse, fine;
    coarse.step = 1e-4;
    fine.step = 1e-5;
    const bool pass_coarse = encode_grad_error(f, x, c, coarse) <= 1e-4;
    const bool pass_fine = encode_grad_error(f, x, c, fine) <= 1e-4;
    EXPECT_EQ(pass_coarse, pass_fine);
    EXPECT_TRUE(pass_coarse);
  }
}

namespace {
class NanGradientMap final : public DifferentiableMap {
 public:
  const Shape& input_shape() const override { return s_; }
  const Shape& output_shape() const override { return s_; }
  Vector evaluate(const Vector& x) const override { return x; }
  Vector pullback(const Vector&, const Vector& g, Vector*) const override {
    Vector out = g;
    out[2] = std::nan("");
    return out;
  }
  std::string architecture_id() const override { return "nan_map"; }
  nlohmann::json describe() const override { return {{"kind", "nan_map"}}; }

 private:
  Shape s_{4};
};
}  // namespace

TEST(GradCheck, NonFiniteGradientNamesCoordinate) {
  NanGradientMap m;
  try {
    grad_check(m, Vector::Ones(4), Vector::Ones(4));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 2"), std::string::npos) << e.what();
  }
}

// Property: every toy map agrees with central finite differences at 100
// random points, with respect to inputs.
TEST(ModelZooProperty, AllMapsMatchFiniteDifferencesAt100Points) {
  std::vector<std::pair<std::string, std::unique_ptr<DifferentiableMap>>> maps;
  maps.emplace_back("encoder", std::make_unique<Network>(make_encoder(kSmall, 8, 21)));
  maps.emplace_back("inverter", std::make_unique<Network>(make_inverter(kSmall, 9, 22)));
  maps.emplace_back("discriminator", std::make_unique<Network>(make_discriminator(kSmall, 23)));
  maps.emplace_back("perceptual", std::make_unique<Network>(make_perceptual(kSmall, 24)));
  maps.emplace_back("predictor", std::make_unique<Network>(make_predictor(8, 16, 25)));
  maps.emplace_back("style", std::make_unique<Network>(make_style_mapping(9, 26)));
  maps.emplace_back("generator", std::make_unique<BlobGenerator>(kSmall, 1));
  std::mt19937_64 rng(27);
  for (const auto& [name, map] : maps) {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const bool image_input = map->input_shape().size() == 3;
      const Vector x = image_input ? random_image(map->input_size(), rng)
                                   : random_vector(map->input_size(), rng);
      const Vector c = random_vector(map->output_size(), rng);
      GradCheckOptions opt;
      opt.max_coordinates = 24;
      opt.seed = static_cast<std::uint64_t>(t);
      worst = std::max(worst, grad_check(*map, x, c, opt).max_relative_error);
    }
    EXPECT_LE(worst, 1e-4) << name;
  }
}

TEST(ModelZooProperty, ParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(28);
  Network nets[] = {make_encoder(kSmall, 8, 31), make_inverter(kSmall, 9, 32),
                    make_discriminator(kSmall, 33), make_predictor(8, 16, 34)};
  for (auto& net : nets) {
    // Non-zero biases so their gradients are exercised away from init.
    Vector p = net.parameters();
    for (auto& v : p) v += 0.05 * std::normal_distribution<double>()(rng);
    net.set_parameters(p);
    for (int t = 0; t < 5; ++t) {
      const Vector x = net.input_shape().size() == 3 ? random_image(net.input_size(), rng)
                                                     : random_vector(net.input_size(), rng);
      GradCheckOptions opt;
      opt.max_coordinates = 64;
      opt.seed = static_cast<std::uint64_t>(t);
      EXPECT_LE(grad_check_parameters(net, x, random_vector(net.output_size(), rng), opt).max_relative_error,
                1e-4)
          << net.architecture_id();
    }
    EXPECT_EQ(net.parameters(), p);
  }
}

TEST(ModelZoo, PerceptualNetIsFrozen) {
  EXPECT_FALSE(make_perceptual(kSmall, 1).trainable());
  EXPECT_TRUE(make_encoder(kSmall, 8, 1).trainable());
  EXPECT_FALSE(BlobGenerator(kSmall, 1).trainable());
}

TEST(ModelZoo, EvaluationIsDeterministic) {
  Network f = make_encoder(kSmall, 8, 40);
  std::mt19937_64 rng(41);
  const Vector x = random_image(kSmall.size(), rng);
  EXPECT_EQ(f.evaluate(x), f.evaluate(x));
  EXPECT_EQ(f.linearize(x).value, f.evaluate(x));
}

TEST(Checkpoint, RoundTripRestoresArchitectureAndFloat32Parameters) {
  const auto dir = std::filesystem::temp_directory_path() / "viewlab_ckpt_test";
  std::filesystem::create_directories(dir);
  Network f = make_encoder(kSmall, 8, 42);
  save_checkpoint(dir / "enc.ckpt", f, 42, {{"note", "unit"}});
  const Checkpoint ck = read_checkpoint(dir / "enc.ckpt");
  EXPECT_EQ(ck.header.at("architecture_id"), "toy_conv_encoder");
  EXPECT_EQ(ck.header.at("seed"), 42);
  EXPECT_EQ(ck.header.at("input_shape").get<Shape>(), kSmall.as_shape());
  EXPECT_EQ(ck.header.at("extra").at("note"), "unit");

  Network g = load_network(dir / "enc.ckpt");
  ASSERT_EQ(g.parameter_count(), f.parameter_count());
  for (Eigen::Index i = 0; i < g.parameters().size(); ++i)
    EXPECT_EQ(g.parameters()[i], static_cast<double>(static_cast<float>(f.parameters()[i])));
  EXPECT_EQ(g.backbone_depth(), f.backbone_depth());

  auto any = load_map(dir / "enc.ckpt");
  EXPECT_EQ(any->architecture_id(), "toy_conv_encoder");

  BlobGenerator gen(kSmall, 2);
  save_checkpoint(dir / "gen.ckpt", gen, 0);
  auto gen2 = load_map(dir / "gen.ckpt");
  EXPECT_EQ(gen2->evaluate(Vector::Zero(15)), gen.evaluate(Vector::Zero(15)));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsBadMagic) {
  const auto path = std::filesystem::temp_directory_path() / "viewlab_bad.ckpt";
  std::ofstream(path) << "nope";
  EXPECT_THROW(read_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
