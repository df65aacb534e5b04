#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "devid/checkpoint.hpp"
#include "devid/train.hpp"
#include "oracles.hpp"

using namespace devid;
namespace fs = std::filesystem;

namespace {

// tiny, cleanly separable synthetic feature set: class c concentrates its
// energy in a distinct column band plus noise
FeatureSet toy_features(int n_classes, int per_class, std::uint64_t seed,
                        int frames = 16, int dims = 12) {
  FeatureSet set;
  set.frames = frames;
  set.dims = dims;
  Rng rng(seed);
  for (int c = 0; c < n_classes; ++c)
    for (int s = 0; s < per_class; ++s) {
      std::vector<real> m(std::size_t(frames) * std::size_t(dims));
      for (int t = 0; t < frames; ++t)
        for (int d = 0; d < dims; ++d) {
          const bool hot = (d % n_classes) == c;
          m[std::size_t(t) * std::size_t(dims) + std::size_t(d)] =
              real((hot ? 1.0 : 0.0) + 0.1 * rng.normal());
        }
      set.samples.push_back(std::move(m));
      set.labels.push_back(c);
    }
  return set;
}

ModelConfig toy_model_config(int n_classes, int frames = 16, int dims = 12) {
  ModelConfig cfg = ablation_config(2); // BiLSTM-only keeps the toy runs fast
  cfg.bilstm_units = 8;
  cfg.mlp_units = 16;
  cfg.n_classes = n_classes;
  cfg.frames = frames;
  cfg.feat_dims = dims;
  return cfg;
}

} // namespace

TEST_CASE("softmax follows the defining formula") {
  SUBCASE("uniform logits give the uniform distribution") {
    Tensor p = softmax(Tensor({3}, {real(0), real(0), real(0)}));
    for (real v : p.value()) CHECK(double(v) == doctest::Approx(1.0 / 3));
  }
  SUBCASE("adding a constant does not change the output") {
    Tensor a = softmax(Tensor({3}, {real(1), real(2), real(3)}));
    Tensor b = softmax(Tensor({3}, {real(101), real(102), real(103)}));
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(double(a.value()[i]) == doctest::Approx(double(b.value()[i])).epsilon(1e-6));
  }
  SUBCASE("[1,2,3] evaluates to the known probabilities") {
    Tensor p = softmax(Tensor({3}, {real(1), real(2), real(3)}));
    CHECK(double(p.value()[0]) == doctest::Approx(0.0900).epsilon(1e-3));
    CHECK(double(p.value()[1]) == doctest::Approx(0.2447).epsilon(1e-3));
    CHECK(double(p.value()[2]) == doctest::Approx(0.6652).epsilon(1e-3));
  }
}

TEST_CASE("cross entropy") {
  SUBCASE("perfect prediction has zero loss") {
    Tensor p({3}, {real(0), real(1), real(0)});
    CHECK(double(cross_entropy(p, 1).item()) == doctest::Approx(0.0));
  }
  SUBCASE("uniform over K classes costs ln K") {
    const int k = 7;
    Tensor p({k}, real(1.0 / k));
    CHECK(double(cross_entropy(p, 3).item()) == doctest::Approx(std::log(double(k))).epsilon(1e-6));
  }
  SUBCASE("gradient of softmax-then-CE at the logits is probs minus one-hot") {
    Rng rng(1);
    Tensor logits({5});
    for (real& v : logits.value()) v = real(rng.uniform(-2, 2));
    logits.set_requires_grad(true);
    Tape tape;
    Tensor probs;
    {
      Tape::Scope scope(tape);
      probs = softmax(logits);
      tape.backward(cross_entropy(probs, 2));
    }
    for (int i = 0; i < 5; ++i) {
      const double expect = double(probs.value()[std::size_t(i)]) - (i == 2 ? 1.0 : 0.0);
      CHECK(double(logits.grad()[std::size_t(i)]) == doctest::Approx(expect).epsilon(1e-4));
    }
  }
  SUBCASE("invalid target index throws") {
    Tensor p({3}, real(1.0 / 3));
    CHECK_THROWS_AS(cross_entropy(p, 3), ShapeError);
  }
}

TEST_CASE("adam update") {
  SUBCASE("first step from zero state moves by -lr * g/(|g|+eps)") {
    std::vector<real> w = {real(1), real(1)}, g = {real(0.3), real(-0.07)};
    std::vector<real> m(2, real(0)), v(2, real(0));
    adam_update(w, g, m, v, 1, 1e-3, 0.9, 0.999, 1e-8);
    for (std::size_t i = 0; i < 2; ++i) {
      const double expect = 1.0 - 1e-3 * double(g[i]) / (std::abs(double(g[i])) + 1e-8);
      CHECK(double(w[i]) == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  SUBCASE("zero gradient is a fixed point") {
    std::vector<real> w = {real(2)}, g = {real(0)}, m = {real(0)}, v = {real(0)};
    for (long t = 1; t <= 5; ++t) adam_update(w, g, m, v, t, 1e-2, 0.9, 0.999, 1e-8);
    CHECK(double(w[0]) == doctest::Approx(2.0));
  }
  SUBCASE("beta1 = beta2 = 0 reduces to sign-like steps every iteration") {
    Rng rng(2);
    std::vector<real> w = {real(0.5)}, m = {real(0)}, v = {real(0)};
    for (long t = 1; t <= 4; ++t) {
      std::vector<real> g = {real(rng.uniform(-1, 1))};
      const double before = double(w[0]);
      adam_update(w, g, m, v, t, 1e-3, 0.0, 0.0, 1e-8);
      const double expect = before - 1e-3 * double(g[0]) / (std::abs(double(g[0])) + 1e-8);
      CHECK(double(w[0]) == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  SUBCASE("ten steps match the recurrence evaluated independently") {
    Rng rng(3);
    std::vector<real> w = {real(0.2), real(-0.4)}, m(2, real(0)), v(2, real(0));
    oracles::AdamTrace ref{{0.2, -0.4}, {0, 0}, {0, 0}};
    for (long t = 1; t <= 10; ++t) {
      std::vector<real> g(2);
      std::vector<double> gd(2);
      for (std::size_t i = 0; i < 2; ++i) {
        gd[i] = rng.uniform(-1, 1);
        g[i] = real(gd[i]);
      }
      adam_update(w, g, m, v, t, 1e-3, 0.9, 0.999, 1e-8);
      oracles::adam_step(ref, gd, t, 1e-3, 0.9, 0.999, 1e-8);
      for (std::size_t i = 0; i < 2; ++i)
        CHECK(double(w[i]) == doctest::Approx(ref.w[i]).epsilon(1e-5));
    }
  }
  SUBCASE("NaN gradients abort naming the parameter") {
    ModelConfig cfg = toy_model_config(2);
    DeviceIdModel model = DeviceIdModel::build(cfg, 1);
    ParamList params = model.parameters();
    AdamState st = AdamState::init(params);
    params[0].tensor.grad()[0] = real(NAN);
    TrainConfig tc;
    CHECK_THROWS_WITH_AS(adam_step(params, st, 1e-3, tc),
                         doctest::Contains(params[0].name.c_str()), Error);
  }
}

TEST_CASE("argmax of softmax equals argmax of raw logits") {
  Rng rng(8);
  for (int c = 0; c < 50; ++c) {
    Tensor logits({9});
    for (real& v : logits.value()) v = real(rng.uniform(-6, 6));
    Tensor p = softmax(logits);
    const auto& lv = logits.value();
    const auto& pv = p.value();
    const auto arg_l = std::max_element(lv.begin(), lv.end()) - lv.begin();
    const auto arg_p = std::max_element(pv.begin(), pv.end()) - pv.begin();
    CHECK(arg_l == arg_p);
  }
}

TEST_CASE("lr schedule decays by 10x every 30 epochs") {
  TrainConfig cfg;
  cfg.lr = 1e-4;
  CHECK(lr_schedule(0, cfg) == doctest::Approx(1e-4));
  CHECK(lr_schedule(29, cfg) == doctest::Approx(1e-4));
  CHECK(lr_schedule(30, cfg) == doctest::Approx(1e-5));
  CHECK(lr_schedule(60, cfg) == doctest::Approx(1e-6).epsilon(1e-9));
}

TEST_CASE("stratified split") {
  TrainConfig cfg;
  cfg.seed = 5;
  std::vector<int> labels;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 50; ++i) labels.push_back(c);

  SplitIndices s = stratified_split(labels, cfg);
  CHECK(s.train.size() + s.val.size() + s.test.size() == labels.size());
  CHECK(s.test.size() == 40); // 20% of each class
  CHECK(s.val.size() == 32);  // 16%

  SUBCASE("per-class counts are proportional") {
    std::vector<int> test_counts(4, 0);
    for (int idx : s.test) ++test_counts[std::size_t(labels[std::size_t(idx)])];
    for (int c = 0; c < 4; ++c) CHECK(test_counts[std::size_t(c)] == 10);
  }
  SUBCASE("same seed reproduces the split, different seed changes it") {
    SplitIndices again = stratified_split(labels, cfg);
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
    cfg.seed = 6;
    CHECK(stratified_split(labels, cfg).train != s.train);
  }
  SUBCASE("no index appears twice") {
    std::vector<char> seen(labels.size(), 0);
    for (const auto* part : {&s.train, &s.val, &s.test})
      for (int idx : *part) {
        CHECK_FALSE(seen[std::size_t(idx)]);
        seen[std::size_t(idx)] = 1;
      }
  }
  SUBCASE("unlabeled samples are rejected") {
    labels[3] = -1;
    CHECK_THROWS_AS(stratified_split(labels, cfg), ConfigError);
  }
}

TEST_CASE("metrics") {
  SUBCASE("all-correct predictions give accuracy 1 and F1 1") {
    std::vector<std::vector<long>> cm = {{5, 0}, {0, 7}};
    MetricsReport r = metrics_from_confusion(cm);
    CHECK(r.accuracy == doctest::Approx(1.0));
    for (const auto& c : r.per_class) CHECK(c.f_beta == doctest::Approx(1.0));
  }
  SUBCASE("23 errors among 5760 evaluate to 99.6%") {
    std::vector<std::vector<long>> cm(45, std::vector<long>(45, 0));
    for (int i = 0; i < 45; ++i) cm[std::size_t(i)][std::size_t(i)] = 128;
    for (int e = 0; e < 23; ++e) {
      const int c = e % 45;
      cm[std::size_t(c)][std::size_t(c)] -= 1;
      cm[std::size_t(c)][std::size_t((c + 11) % 45)] += 1;
    }
    MetricsReport r = metrics_from_confusion(cm);
    CHECK(r.total == 5760);
    CHECK(r.correct == 5737);
    CHECK(std::round(r.accuracy * 1000.0) / 10.0 == doctest::Approx(99.6));
  }
  SUBCASE("random confusion matrices match the counting oracle exactly") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
      const int n = 4;
      std::vector<std::vector<long>> cm(n, std::vector<long>(n));
      for (auto& row : cm)
        for (long& v : row) v = rng.uniform_int(0, 25);
      MetricsReport r = metrics_from_confusion(cm);
      auto counts = oracles::count_confusion(cm);
      for (int c = 0; c < n; ++c) {
        CHECK(r.per_class[std::size_t(c)].tp == counts[std::size_t(c)].tp);
        CHECK(r.per_class[std::size_t(c)].fp == counts[std::size_t(c)].fp);
        CHECK(r.per_class[std::size_t(c)].fn == counts[std::size_t(c)].fn);
        CHECK(r.per_class[std::size_t(c)].tn == counts[std::size_t(c)].tn);
        if (counts[std::size_t(c)].tp + counts[std::size_t(c)].fp > 0)
          CHECK(r.per_class[std::size_t(c)].precision ==
                double(counts[std::size_t(c)].tp) /
                    double(counts[std::size_t(c)].tp + counts[std::size_t(c)].fp));
        if (counts[std::size_t(c)].tp + counts[std::size_t(c)].fn > 0)
          CHECK(r.per_class[std::size_t(c)].recall ==
                double(counts[std::size_t(c)].tp) /
                    double(counts[std::size_t(c)].tp + counts[std::size_t(c)].fn));
      }
    }
  }
  SUBCASE("row/column identities and the F1 harmonic form") {
    std::vector<std::vector<long>> cm = {{8, 2, 0}, {1, 9, 3}, {0, 2, 6}};
    MetricsReport r = metrics_from_confusion(cm);
    for (std::size_t c = 0; c < 3; ++c) {
      long row = 0, col = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        row += cm[c][j];
        col += cm[j][c];
      }
      CHECK(r.per_class[c].tp + r.per_class[c].fn == row);
      CHECK(r.per_class[c].tp + r.per_class[c].fp == col);
      const double p = r.per_class[c].precision, rec = r.per_class[c].recall;
      CHECK(r.per_class[c].f_beta == doctest::Approx(2 * p * rec / (p + rec)));
    }
  }
  SUBCASE("a class absent from the test set is null and excluded from macro") {
    std::vector<std::vector<long>> cm = {{4, 0, 0}, {0, 5, 0}, {0, 0, 0}};
    MetricsReport r = metrics_from_confusion(cm);
    CHECK_FALSE(r.per_class[2].has_recall);
    CHECK(r.macro_recall == doctest::Approx(1.0)); // averaged over classes 0,1 only
    CHECK(r.to_csv().find("null") != std::string::npos);
  }
  SUBCASE("P = R implies F1 = P") {
    std::vector<std::vector<long>> cm = {{6, 2}, {2, 6}};
    MetricsReport r = metrics_from_confusion(cm);
    CHECK(r.per_class[0].precision == r.per_class[0].recall);
    CHECK(r.per_class[0].f_beta == doctest::Approx(r.per_class[0].precision));
  }
}

TEST_CASE("training reduces the loss and is seed-deterministic") {
  FeatureSet data = toy_features(3, 30, 11);
  ModelConfig mc = toy_model_config(3);
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.batch_size = 16;
  tc.epochs = 6;
  tc.seed = 21;

  DeviceIdModel model = DeviceIdModel::build(mc, tc.seed);
  TrainResult r = train(model, data, tc);
  REQUIRE(r.history.size() == 6);
  CHECK(r.history.back().train_loss < 0.5 * r.history.front().train_loss);
  CHECK(r.history.back().val_acc > 0.8);

  SUBCASE("an identical run reproduces the history bit for bit") {
    DeviceIdModel model2 = DeviceIdModel::build(mc, tc.seed);
    TrainResult r2 = train(model2, data, tc);
    CHECK(r2.history_csv() == r.history_csv());
    ParamList a = model.parameters(), b = model2.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(a[i].tensor.value() == b[i].tensor.value());
  }
  SUBCASE("evaluation on the held-out split is consistent") {
    MetricsReport rep = evaluate(model, data, r.split.test);
    CHECK(rep.accuracy >= 0.8);
    CHECK(rep.total == long(r.split.test.size()));
  }
  SUBCASE("single batch covers a tiny dataset") {
    FeatureSet small = toy_features(2, 5, 3);
    TrainConfig tiny = tc;
    tiny.epochs = 1;
    tiny.batch_size = 64; // larger than the data: one batch of all samples
    ModelConfig mc2 = toy_model_config(2);
    DeviceIdModel m2 = DeviceIdModel::build(mc2, 1);
    TrainResult rr = train(m2, small, tiny);
    CHECK(rr.history.size() == 1);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const fs::path tmp =
      fs::temp_directory_path() / ("devid_ckpt_test_" + std::to_string(::getpid()));
  fs::create_directories(tmp);
  const std::string path = (tmp / "m.ckpt").string();

  ModelConfig mc = toy_model_config(4);
  DeviceIdModel model = DeviceIdModel::build(mc, 9);
  FeatureSet data = toy_features(4, 3, 2);
  Tensor x({data.frames, data.dims}, data.samples[0]);
  Tensor before = model.forward(x, false);

  save_checkpoint(model, path, R"({"note":"test"})");
  SUBCASE("load restores forward outputs bitwise") {
    DeviceIdModel loaded = load_checkpoint(path);
    Tensor after = loaded.forward(x, false);
    CHECK(after.value() == before.value());
    CHECK(loaded.config().n_classes == 4);
  }
  SUBCASE("manifest lists every parameter exactly once") {
    std::ifstream in(path);
    std::string manifest((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
    for (const auto& p : model.parameters()) {
      const std::string needle = "\"" + p.name + "\"";
      const auto first = manifest.find(needle);
      REQUIRE(first != std::string::npos);
      CHECK(manifest.find(needle, first + 1) == std::string::npos);
    }
  }
  SUBCASE("truncated blob is a corruption error") {
    std::ifstream in(path + ".bin", std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path + ".bin", std::ios::binary);
    out.write(blob.data(), long(blob.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path), CorruptionError);
  }
  std::error_code ec;
  fs::remove_all(tmp, ec);
}

TEST_CASE("transfer fine-tuning freezes the trunk bit-exactly") {
  FeatureSet pre_data = toy_features(4, 24, 31);
  ModelConfig mc = toy_model_config(4);
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.batch_size = 16;
  tc.epochs = 3;
  tc.seed = 31;
  DeviceIdModel pretrained = DeviceIdModel::build(mc, tc.seed);
  train(pretrained, pre_data, tc);

  FeatureSet new_data = toy_features(3, 20, 77);
  TrainConfig ft = tc;
  ft.lr = 1e-3;
  ft.epochs = 4;

  SUBCASE("head-only: everything except the head is untouched") {
    TransferResult res = transfer_finetune(pretrained, new_data, TrainableSet::head_only, ft);
    CHECK(res.model.config().n_classes == 3);
    ParamList before = pretrained.parameters();
    ParamList after = res.model.parameters();
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
      if (before[i].name.rfind("head.", 0) == 0) continue;
      CHECK(after[i].tensor.value() == before[i].tensor.value());
    }
    CHECK(res.test_report.total == long(res.training.split.test.size()));
  }
  SUBCASE("mlp+head: the MLP may move, the rest may not") {
    TransferResult res =
        transfer_finetune(pretrained, new_data, TrainableSet::mlp_and_head, ft);
    ParamList before = pretrained.parameters();
    ParamList after = res.model.parameters();
    bool mlp_changed = false;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const bool is_head = before[i].name.rfind("head.", 0) == 0;
      const bool is_mlp = before[i].name.rfind("mlp.", 0) == 0;
      if (is_head) continue;
      if (is_mlp) {
        if (after[i].tensor.value() != before[i].tensor.value()) mlp_changed = true;
      } else {
        CHECK(after[i].tensor.value() == before[i].tensor.value());
      }
    }
    CHECK(mlp_changed);
  }
}

TEST_CASE("diverging loss aborts and restores the best checkpoint") {
  FeatureSet data = toy_features(2, 12, 5);
  ModelConfig mc = toy_model_config(2);
  TrainConfig tc;
  tc.lr = 1e30; // guaranteed blow-up
  tc.batch_size = 8;
  tc.epochs = 5;
  tc.seed = 3;
  DeviceIdModel model = DeviceIdModel::build(mc, 3);
  TrainResult r = train(model, data, tc);
  CHECK(r.diverged);
  for (const auto& p : model.parameters())
    for (real v : p.tensor.value()) CHECK(std::isfinite(double(v)));
}
