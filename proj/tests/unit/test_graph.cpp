#include <gtest/gtest.h>

#include <fstream>

#include "generators.hpp"
#include "graph_json.hpp"
#include "quantkit/fixtures.hpp"
#include "quantkit/quantize.hpp"

using namespace quantkit;
using testing_support::TempDir;

namespace {

ModelGraph chain() {
  GraphBuilder b("chain", {2, 5, 5}, 3);
  const auto c1 = b.conv("c1", std::string(kGraphInput), 3, 3, 1, 1);
  const auto r = b.relu("r", c1);
  b.conv("c2", r, 2, 1);
  return b.build();
}

}  // namespace

TEST(Graph, FixturesValidate) {
  EXPECT_NO_THROW(toy_resnet().validate());
  EXPECT_NO_THROW(toy_mobilenet().validate());
  EXPECT_EQ(toy_residual_block().nodes.size(), 7u);
}

TEST(Graph, ShapeInference) {
  const auto g = toy_resnet();
  const auto shapes = infer_shapes(g);
  EXPECT_EQ(shapes.at(std::string(kGraphInput)), (Shape{3, 12, 12}));
  EXPECT_EQ(shapes.at(g.output_id()), (Shape{10}));
}

TEST(Graph, RejectsStructuralErrors) {
  auto g = chain();
  auto dup = g;
  dup.nodes.push_back(dup.nodes[0]);
  EXPECT_THROW(dup.validate(), ValidationError);

  auto dangling = g;
  dangling.nodes[1].inputs = {"nowhere"};
  EXPECT_THROW(dangling.validate(), ValidationError);

  auto cyclic = g;
  cyclic.nodes[0].inputs = {"r"};
  EXPECT_THROW(cyclic.validate(), ValidationError);

  auto missing_param = g;
  missing_param.params.erase("c2.weight");
  EXPECT_THROW(missing_param.validate(), ValidationError);

  auto bad_shape = g;
  bad_shape.params.at("c2.weight") = Tensor({2, 4, 1, 1}, DType::F32);
  EXPECT_THROW(bad_shape.validate(), ValidationError);

  auto bad_site = g;
  bad_site.quant_sites.push_back({"c1", "c2", true, Signedness::Signed, SiteReason::DefaultSigned});
  EXPECT_THROW(bad_site.validate(), ValidationError);
}

TEST(Graph, TopoOrderIsDeterministic) {
  const auto g = toy_resnet();
  const auto order = topo_order(g);
  EXPECT_EQ(order.size(), g.nodes.size());
  auto shuffled = g;
  std::reverse(shuffled.nodes.begin(), shuffled.nodes.end());
  EXPECT_EQ(topo_order(shuffled), order);
}

TEST(Graph, SaveLoadRoundTrip) {
  TempDir dir("graph");
  const auto g = plan_placement(toy_resnet());
  save_model(g, dir.path());
  const auto back = load_model(dir.path());
  EXPECT_TRUE(graphs_equivalent(g, back));
  EXPECT_EQ(back.quant_sites, g.quant_sites);
}

TEST(Graph, RandomGraphsRoundTrip) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    TempDir dir("rgraph");
    const auto g = plan_placement(testing_support::random_graph(seed));
    save_model(g, dir.path());
    EXPECT_TRUE(graphs_equivalent(g, load_model(dir.path() / "model.json"))) << "seed " << seed;
  }
}

TEST(Graph, EquivalenceDetectsParameterBitChange) {
  const auto g = chain();
  auto h = g;
  h.params.at("c1.weight").f32()[0] = std::nextafter(h.params.at("c1.weight").f32()[0], 10.0f);
  EXPECT_FALSE(graphs_equivalent(g, h));
}

TEST(Graph, LoadErrors) {
  TempDir dir("graph_err");
  EXPECT_THROW(load_model(dir / "model.json"), IoError);
  {
    std::ofstream(dir / "model.json") << "{not json";
  }
  EXPECT_THROW(load_model(dir.path()), FormatError);
  {
    std::ofstream(dir / "model.json") << R"({"input_shape":[1,2,2],"nodes":[{"id":"a","kind":"Conv9","inputs":["input"]}],"param_files":{}})";
  }
  EXPECT_THROW(load_model(dir.path()), ValidationError);

  save_model(chain(), dir / "m");
  std::filesystem::remove(dir / "m" / "params" / "c1.weight.qt");
  EXPECT_THROW(load_model(dir / "m"), IoError);
}

TEST(Graph, ParameterNamesAreRestricted) {
  EXPECT_THROW(detail::check_param_name("../evil"), ValidationError);
  EXPECT_THROW(detail::check_param_name(""), ValidationError);
  EXPECT_NO_THROW(detail::check_param_name("block1_conv.weight"));
}

TEST(Graph, ConsumersAndOutput) {
  const auto g = toy_residual_block();
  EXPECT_EQ(g.consumers(std::string(kGraphInput)).size(), 2u);
  EXPECT_EQ(g.node(g.output_id()).kind, LayerKind::ReLU);
}
