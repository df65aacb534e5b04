#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "devid/model.hpp"

using namespace devid;

namespace {

Tensor random_feature(std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({128, 73});
  for (real& v : x.value()) v = real(rng.normal());
  return x;
}

} // namespace

TEST_CASE("ablation_config reproduces the group flag table") {
  struct Row {
    int group;
    bool conv, bi, tr;
  };
  const Row rows[] = {{1, true, false, false},  {2, false, true, false},
                      {3, false, false, true},  {4, true, true, true},
                      {5, false, true, true},   {6, true, false, true},
                      {7, true, true, false}};
  for (const Row& r : rows) {
    ModelConfig cfg = ablation_config(r.group);
    CHECK(cfg.use_convlstm == r.conv);
    CHECK(cfg.use_bilstm == r.bi);
    CHECK(cfg.use_transformer == r.tr);
  }
  CHECK_THROWS_AS(ablation_config(0), ConfigError);
  CHECK_THROWS_AS(ablation_config(8), ConfigError);
}

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.use_convlstm = cfg.use_bilstm = cfg.use_transformer = false;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.n_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.token_scheme = "bogus";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("full model shape trace matches the pipeline") {
  ModelConfig cfg; // defaults: full model, 45 classes
  DeviceIdModel model = DeviceIdModel::build(cfg, 7);
  ShapeTrace trace;
  Tensor logits = model.forward(random_feature(1), false, &trace);
  const std::vector<std::vector<int>> expect = {
      {128, 73}, {128, 24, 64}, {128, 11, 32}, {128, 352}, {256},
      {256, 1},  {256, 1},      {128},         {45}};
  CHECK(trace.shapes == expect);
  CHECK(logits.dim(0) == 45);
}

TEST_CASE("every ablation group forwards a (128,73) feature") {
  for (int g = 1; g <= 7; ++g) {
    ModelConfig cfg = ablation_config(g);
    cfg.n_classes = 45;
    DeviceIdModel model = DeviceIdModel::build(cfg, 3);
    Tensor logits = model.forward(random_feature(std::uint64_t(g)), false);
    REQUIRE(logits.dim(0) == 45);
    for (real v : logits.value()) CHECK(std::isfinite(double(v)));
    // softmax of the logits is a probability vector
    Tensor p = softmax(logits);
    double s = 0;
    for (real v : p.value()) s += double(v);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("build is deterministic in (config, seed)") {
  ModelConfig cfg;
  cfg.n_classes = 9;
  DeviceIdModel a = DeviceIdModel::build(cfg, 42);
  DeviceIdModel b = DeviceIdModel::build(cfg, 42);
  Tensor x = random_feature(5);
  CHECK(a.forward(x, false).value() == b.forward(x, false).value());

  DeviceIdModel c = DeviceIdModel::build(cfg, 43);
  CHECK(a.forward(x, false).value() != c.forward(x, false).value());
}

TEST_CASE("parameter census has unique names and stable order") {
  ModelConfig cfg;
  DeviceIdModel model = DeviceIdModel::build(cfg, 1);
  ParamList params = model.parameters();
  std::set<std::string> names;
  std::size_t count = 0;
  for (const auto& p : params) {
    names.insert(p.name);
    count += p.tensor.numel();
  }
  CHECK(names.size() == params.size());
  // expected parameter budget: ~0.6M for the full 45-class model
  CHECK(count > 550000);
  CHECK(count < 700000);

  ParamList again = model.parameters();
  REQUIRE(again.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(again[i].name == params[i].name);
}

TEST_CASE("group 2 consumes features directly and feeds a 256 vector to the head") {
  ModelConfig cfg = ablation_config(2);
  cfg.n_classes = 8;
  DeviceIdModel model = DeviceIdModel::build(cfg, 2);
  ShapeTrace trace;
  model.forward(random_feature(2), false, &trace);
  const std::vector<std::vector<int>> expect = {{128, 73}, {256}, {128}, {8}};
  CHECK(trace.shapes == expect);
}

TEST_CASE("group 6 runs the encoder on frame-level tokens") {
  ModelConfig cfg = ablation_config(6);
  cfg.n_classes = 8;
  DeviceIdModel model = DeviceIdModel::build(cfg, 2);
  ShapeTrace trace;
  model.forward(random_feature(3), false, &trace);
  // (128,73) -> conv stack -> (128,352) -> tokens (128,352) -> encoders
  REQUIRE(trace.shapes.size() == 8);
  CHECK(trace.shapes[3] == std::vector<int>{128, 352});
  CHECK(trace.shapes[4] == std::vector<int>{128, 352});
  CHECK(trace.shapes[5] == std::vector<int>{128, 352});
}

TEST_CASE("block token scheme splits the 256 vector into 16x16") {
  ModelConfig cfg;
  cfg.token_scheme = "block";
  cfg.n_classes = 5;
  DeviceIdModel model = DeviceIdModel::build(cfg, 2);
  ShapeTrace trace;
  model.forward(random_feature(4), false, &trace);
  CHECK(trace.shapes[5] == std::vector<int>{16, 16});
}

TEST_CASE("clone trains independently of the source") {
  ModelConfig cfg = ablation_config(2);
  cfg.n_classes = 4;
  DeviceIdModel a = DeviceIdModel::build(cfg, 11);
  DeviceIdModel b = a.clone();
  Tensor x = random_feature(6);
  CHECK(a.forward(x, false).value() == b.forward(x, false).value());
  // mutate the clone; the source must not change
  ParamList bp = b.parameters();
  bp[0].tensor.value()[0] += real(1);
  CHECK(a.forward(x, false).value() != b.forward(x, false).value());
}

TEST_CASE("replace_head changes only the classification layer") {
  ModelConfig cfg = ablation_config(2);
  cfg.n_classes = 45;
  DeviceIdModel model = DeviceIdModel::build(cfg, 11);
  ParamList before = model.parameters();
  std::vector<std::vector<real>> trunk_values;
  for (auto& p : before)
    if (p.name.rfind("head.", 0) != 0) trunk_values.push_back(p.tensor.value());

  model.replace_head(21, 99);
  CHECK(model.config().n_classes == 21);
  Tensor logits = model.forward(random_feature(7), false);
  CHECK(logits.dim(0) == 21);

  ParamList after = model.parameters();
  std::size_t k = 0;
  for (auto& p : after)
    if (p.name.rfind("head.", 0) != 0) CHECK(p.tensor.value() == trunk_values[k++]);
}

TEST_CASE("forward rejects a wrong feature shape") {
  ModelConfig cfg;
  DeviceIdModel model = DeviceIdModel::build(cfg, 1);
  Tensor bad({64, 73});
  CHECK_THROWS_AS(model.forward(bad, false), ShapeError);
}
