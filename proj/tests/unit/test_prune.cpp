#include <gtest/gtest.h>

#include <fstream>

#include "generators.hpp"
#include "oracles.hpp"
#include "quantkit/fixtures.hpp"
#include "quantkit/prune.hpp"

using namespace quantkit;
using testing_support::TempDir;

namespace {

ModelGraph single_fc(std::vector<float> w) {
  const auto n = w.size();
  GraphBuilder b("fc", {1, 1, 1}, 1);
  b.fully_connected("fc", std::string(kGraphInput), n, false);
  auto g = b.build();
  g.params.at("fc.weight") = Tensor({n, 1}, std::move(w));
  return g;
}

}  // namespace

TEST(Prune, SmallExample) {
  const auto [g, mask] = magnitude_prune(single_fc({0.1f, -0.5f, 0.2f, 0.05f}), 0.5);
  const auto w = g.params.at("fc.weight").f32();
  EXPECT_EQ(std::vector<float>(w.begin(), w.end()), (std::vector<float>{0.0f, -0.5f, 0.2f, 0.0f}));
  EXPECT_EQ(mask.kept(), 2u);
  EXPECT_EQ(count_nonzero(g, mask), 2u);
}

TEST(Prune, ZeroSparsityKeepsEverything) {
  const auto base = toy_resnet();
  const auto [g, mask] = magnitude_prune(base, 0.0);
  EXPECT_TRUE(graphs_equivalent(g, base));
  EXPECT_EQ(mask.kept(), mask.size());
}

TEST(Prune, TiesResolvedByPosition) {
  const auto [g, mask] = magnitude_prune(single_fc({1.0f, -1.0f, 1.0f, 1.0f}), 0.5);
  const auto w = g.params.at("fc.weight").f32();
  EXPECT_EQ(std::vector<float>(w.begin(), w.end()), (std::vector<float>{0.0f, 0.0f, 1.0f, 1.0f}));
}

TEST(Prune, RejectsOutOfRangeSparsity) {
  EXPECT_THROW(magnitude_prune(toy_resnet(), 1.0), ValidationError);
  EXPECT_THROW(magnitude_prune(toy_resnet(), -0.1), ValidationError);
}

TEST(Prune, RecountOracleOnRandomGraphs) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    const auto base = testing_support::random_graph(seed);
    const double s = 0.05 * static_cast<double>(seed % 19);
    const auto [g, mask] = magnitude_prune(base, s);
    const auto names = prunable_params(base);
    const auto r = oracles::oracle_prune_recount(base, g, names);
    EXPECT_EQ(r.zeros, static_cast<std::size_t>(std::floor(s * static_cast<double>(r.total)))) << seed;
    EXPECT_LE(r.max_pruned, r.min_kept) << seed;
    EXPECT_EQ(mask.size(), r.total);
    EXPECT_EQ(mask.size() - mask.kept(), r.zeros);
  }
}

TEST(Prune, ApplyMaskIdempotent) {
  const auto [g, mask] = magnitude_prune(toy_mobilenet(), 0.3);
  const auto once = apply_mask(g, mask);
  EXPECT_TRUE(graphs_equivalent(once, apply_mask(once, mask)));
  EXPECT_TRUE(graphs_equivalent(once, g));
  PruneMask bad = mask;
  bad.keep.begin()->second.pop_back();
  EXPECT_THROW(apply_mask(g, bad), ValidationError);
}

TEST(Pipeline, NonzeroCountConstantAcrossStages) {
  ToyNetOptions o;
  o.image_size = 8;
  o.classes = 4;
  const auto data = make_toy_dataset(3, 4, 40, 8);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 16;
  const auto trained = train(toy_resnet(o), data.train, tc);

  PipelineConfig cfg;
  cfg.sparsity = 0.3;
  cfg.finetune = tc;
  cfg.finetune.learning_rate = 0.005;
  cfg.calib.batches = 2;
  cfg.calib.batch_size = 16;
  cfg.qat.epochs = 1;
  cfg.qat.batch_size = 16;
  const auto st = run_pipeline(trained, data, cfg);
  ASSERT_EQ(st.metrics.size(), 5u);
  const std::vector<std::string> stages{"M0", "M1", "M2", "M3", "M4"};
  for (std::size_t i = 0; i < stages.size(); ++i) EXPECT_EQ(st.metrics[i].stage, stages[i]);
  const std::size_t expected = st.mask.kept();
  for (std::size_t i = 1; i < st.metrics.size(); ++i) EXPECT_LE(st.metrics[i].nnz, expected) << stages[i];
  EXPECT_EQ(count_nonzero(st.m2, st.mask), count_nonzero(st.m4_master.graph, st.mask));
  EXPECT_TRUE(masked_weights_are_zero(st.m3, st.mask));
  EXPECT_TRUE(masked_weights_are_zero(st.m4, st.mask));

  TempDir dir("pipeline_report");
  write_pipeline_report(st, dir.path());
  std::ifstream csv(dir / "report.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 6u);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "report.txt"));
}
