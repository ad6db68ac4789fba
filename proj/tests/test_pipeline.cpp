#include <gtest/gtest.h>

#include "test_support.hpp"
#include "viewlab/pipeline.hpp"

using namespace viewlab;
using namespace viewlab::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(const fs::path& out) {
  json doc = {{"dataset", {{"classes", 4}, {"train_per_class", 8}, {"test_per_class", 4}, {"image", {3, 16, 16}}}},
              {"inversion", {{"encoder_steps", 20}, {"latent_opt_steps", 2}, {"eval_every", 10},
                             {"discriminator", {{"steps", 10}}}}},
              {"viewgen", {{"perturb", {{"count", 2}}}}},
              {"train", {{"assimilation", "a2_multiview"}, {"view_source", "w_perturb_cache"}, {"batch_size", 8},
                         {"epochs", 2}, {"knn_every", 1}, {"loss", {{"variant", "a2_infonce"}}}}},
              {"eval", {{"epochs", 5}}},
              {"seed", 3},
              {"output_dir", out.string()}};
  return ExperimentConfig::from_json(doc);
}

}  // namespace

TEST(ExperimentConfig, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const json j = c.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(ExperimentConfig::from_json(json::object()).to_json(), j);
}

TEST(ExperimentConfig, RejectsUnknownKeysWithPath) {
  try {
    ExperimentConfig::from_json({{"train", {{"optimizer", {{"lrr", 0.1}}}}}});
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.optimizer.lrr"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ExperimentConfig::from_json({{"extra", 1}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"train", {{"batch_size", -4}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"train", {{"batch_size", "64"}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"viewgen", {{"op", "w_teleport"}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"train", {{"epochs", 0}}}}), ConfigError);
}

TEST(ExperimentConfig, HashTracksContentNotOutputDir) {
  ExperimentConfig a, b;
  b.output_dir = "elsewhere";
  EXPECT_EQ(a.hash(), b.hash());
  b.viewgen.perturb.sigma = 0.4;
  EXPECT_NE(a.hash(), b.hash());
  b = a;
  b.seed = 1;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(ExperimentConfig, TrainPresetThenOverrides) {
  const auto c = ExperimentConfig::from_json({{"train", {{"preset", "cifar100"}, {"epochs", 3}}}});
  EXPECT_DOUBLE_EQ(c.train.optimizer.lr, 0.5);
  EXPECT_EQ(c.train.batch_size, 512u);
  EXPECT_EQ(c.train.epochs, 3u);
}

TEST(ExperimentConfig, SetPathRequiresExistingKey) {
  json doc = ExperimentConfig{}.to_json();
  set_config_path(doc, "viewgen.perturb.sigma", 1.0);
  EXPECT_DOUBLE_EQ(ExperimentConfig::from_json(doc).viewgen.perturb.sigma, 1.0);
  EXPECT_THROW(set_config_path(doc, "viewgen.perturb.sigmaa", 1.0), ConfigError);
}

TEST(Pipeline, MakeDatasetCountsBalanceAndDeterminism) {
  TempDir tmp;
  ExperimentConfig c;
  c.dataset.image = {3, 16, 16};
  c.dataset.train_per_class = 500;
  c.dataset.test_per_class = 10;
  c.output_dir = (tmp.path() / "a").string();
  const json s = make_dataset(c, false);
  EXPECT_EQ(s.at("train_records"), 2000);
  EXPECT_EQ(s.at("train_class_counts"), json({500, 500, 500, 500}));
  EXPECT_EQ(s.at("test_class_counts"), json({10, 10, 10, 10}));
  EXPECT_THROW(make_dataset(c, false), ConfigError);
  EXPECT_NO_THROW(make_dataset(c, true));

  ExperimentConfig c2 = c;
  c2.output_dir = (tmp.path() / "b").string();
  make_dataset(c2, false);
  for (const char* f : {"train.vlds", "test.vlds"})
    EXPECT_EQ(slurp(Workspace(c.output_dir).dataset_dir() / f), slurp(Workspace(c2.output_dir).dataset_dir() / f)) << f;
}

TEST(Pipeline, MissingUpstreamNamesCommand) {
  TempDir tmp;
  const ExperimentConfig c = tiny(tmp.path());
  auto required = [&](auto&& stage) {
    try {
      stage();
    } catch (const MissingArtifact& e) {
      return e.required_command();
    }
    return std::string("<none>");
  };
  EXPECT_EQ(required([&] { invert(c); }), "make-dataset");
  make_dataset(c, false);
  EXPECT_EQ(required([&] { gen_views(c); }), "invert");
  EXPECT_EQ(required([&] { pretrain_run(c); }), "gen-views");
  EXPECT_EQ(required([&] { probe(c); }), "pretrain");
  ExperimentConfig s = c;
  s.viewgen.op = GeneratorOp::w_search;
  invert(c);
  EXPECT_EQ(required([&] { gen_views(s); }), "pretrain");

  // A dataset made from other settings is not silently reused.
  ExperimentConfig other = c;
  other.dataset.within_class_std = 0.3;
  EXPECT_THROW(invert(other), ConfigError);
}

TEST(Pipeline, StagesReproduceAndEmbedProvenance) {
  TempDir tmp;
  const ExperimentConfig c = tiny(tmp.path() / "a");
  ExperimentConfig c2 = c;
  c2.output_dir = (tmp.path() / "b").string();
  for (const ExperimentConfig* cfg : {&c, static_cast<const ExperimentConfig*>(&c2)}) {
    make_dataset(*cfg, false);
    invert(*cfg);
    gen_views(*cfg);
    pretrain_run(*cfg, true);
    pretrain_run(*cfg);
  }
  const Workspace a(c.output_dir), b(c2.output_dir);
  EXPECT_EQ(slurp(a.latents()), slurp(b.latents()));
  EXPECT_EQ(slurp(a.view_cache(GeneratorOp::w_perturb)), slurp(b.view_cache(GeneratorOp::w_perturb)));
  const std::string run = run_name(c.train_config());
  EXPECT_EQ(run, "a2-w_perturb-a2-infonce");
  EXPECT_EQ(slurp(a.metrics(run)), slurp(b.metrics(run)));
  EXPECT_NE(slurp(a.metrics(run)).find(c.hash()), std::string::npos);

  const json p = probe(c);
  EXPECT_EQ(p.at("config_hash"), c.hash());
  EXPECT_EQ(p.at("seed"), 3);
  EXPECT_EQ(p, probe(c2));
  const json k = knn(c);
  EXPECT_EQ(k.at("metric"), "knn5_acc");

  const json pl = plot(c, {});
  const std::string svg = slurp(pl.at("plot").get<std::string>());
  EXPECT_EQ(pl.at("runs").size(), 2u);
  std::size_t lines = 0;
  for (std::size_t pos = 0; (pos = svg.find("<polyline", pos)) != std::string::npos; ++pos) ++lines;
  EXPECT_EQ(lines, 2u);
  EXPECT_NE(svg.find("baseline-infonce"), std::string::npos);
}

TEST(Pipeline, SweepRecordsEveryCell) {
  TempDir tmp;
  const ExperimentConfig c = tiny(tmp.path());
  const json grid = {{"axes", {{{"viewgen.perturb.sigma", {0.1, 0.4}}}, {{"train.epochs", {1, 0}}}}},
                     {"steps", {"make-dataset", "invert", "gen-views", "pretrain"}}};
  const json r = sweep(c, grid);
  EXPECT_EQ(r.at("cells"), 4);
  EXPECT_EQ(r.at("failed"), 2);  // epochs = 0 is invalid
  std::istringstream rows(slurp(r.at("results").get<std::string>()));
  std::vector<json> parsed;
  for (std::string line; std::getline(rows, line);) parsed.push_back(json::parse(line));
  ASSERT_EQ(parsed.size(), 4u);
  EXPECT_EQ(parsed[0].at("status"), "ok");
  EXPECT_EQ(parsed[1].at("status"), "failed");
  EXPECT_NE(parsed[1].at("error").get<std::string>().find("epochs"), std::string::npos);
  EXPECT_NE(parsed[0].at("config_hash"), parsed[2].at("config_hash"));
  EXPECT_EQ(parsed[2].at("overrides").at("viewgen.perturb.sigma"), 0.4);

  EXPECT_THROW(sweep(c, {{"parameters", {{"viewgen.perturb.sigma", json::array()}}}}), ConfigError);
  EXPECT_THROW(sweep(c, {{"parameters", {{"a", {1}}}}, {"steps", {"deploy"}}}), ConfigError);
}

TEST(Pipeline, LinkedAxesVaryTogether) {
  TempDir tmp;
  const ExperimentConfig c = tiny(tmp.path());
  const json grid = {{"axes", {{{"viewgen.search.epsilon1", {0.1, 0.3}}, {"viewgen.search.epsilon2", {0.3, 0.5}}}}},
                     {"parameters", {{"viewgen.search.lambda", {0.0, 0.01}}}},
                     {"steps", json::array()}};
  const json r = sweep(c, grid);
  EXPECT_EQ(r.at("cells"), 4);
  std::istringstream rows(slurp(r.at("results").get<std::string>()));
  std::string line;
  std::getline(rows, line);
  const json first = json::parse(line);
  EXPECT_EQ(first.at("overrides").at("viewgen.search.epsilon2"), 0.3);
}

TEST(Plot, ReadsCurveRowsOnly) {
  TempDir tmp;
  const fs::path p = tmp.path() / "m.csv";
  std::ofstream(p) << "# {}\nstep,epoch,lr,loss,knn5_acc\n1,1,0.1,2.0,\n2,1,0.1,1.9,0.5\n3,2,0.1,1.8,0.625\n";
  const Curve c = read_knn_curve(p, "x");
  ASSERT_EQ(c.points.size(), 2u);
  EXPECT_EQ(c.points[1], std::make_pair(2.0, 0.625));
}
