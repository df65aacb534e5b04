// End-to-end exercises of the devid binary. The path to the built CLI
// arrives via the DEVID_CLI environment variable (set by ctest).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "devid/featkit.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("DEVID_CLI");
  REQUIRE_MESSAGE(p != nullptr, "DEVID_CLI must point at the built binary");
  return p;
}

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("devid_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  ~Workspace() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

int run(const std::string& args) {
  const std::string cmd = cli() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing file: ", path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_bytes(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

// small corpus flags shared by the pipeline cases
const char* kSynthFlags = "--devices 3 --clips 12 --duration 0.5 --rate 8000 --seed 21";

} // namespace

TEST_CASE("synth: deterministic corpus, usage errors exit 2") {
  Workspace ws;
  CHECK(run("synth --out " + ws.path("c1") + " " + std::string(kSynthFlags)) == 0);
  CHECK(fs::exists(ws.path("c1") + "/manifest.csv"));
  CHECK(fs::exists(ws.path("c1") + "/synth.config.json"));
  int wavs = 0;
  for (const auto& e : fs::directory_iterator(ws.path("c1")))
    if (e.path().extension() == ".wav") ++wavs;
  CHECK(wavs == 36);

  SUBCASE("identical flags reproduce identical bytes") {
    CHECK(run("synth --out " + ws.path("c2") + " " + std::string(kSynthFlags)) == 0);
    CHECK(same_bytes(ws.path("c1") + "/manifest.csv", ws.path("c2") + "/manifest.csv"));
    CHECK(same_bytes(ws.path("c1") + "/device00_src000.wav",
                     ws.path("c2") + "/device00_src000.wav"));
    CHECK(same_bytes(ws.path("c1") + "/device02_src011.wav",
                     ws.path("c2") + "/device02_src011.wav"));
  }
  SUBCASE("one device is a usage error") {
    CHECK(run("synth --out " + ws.path("bad") + " --devices 1 --clips 12") == 2);
  }
  SUBCASE("missing required flag is a usage error") { CHECK(run("synth") == 2); }
}

TEST_CASE("extract: TTF1 counts, reproducibility, error sidecar") {
  Workspace ws;
  REQUIRE(run("synth --out " + ws.path("c") + " " + std::string(kSynthFlags)) == 0);
  CHECK(run("extract --corpus " + ws.path("c") + " --out " + ws.path("f.ttf") +
            " --threads 2") == 0);

  devid::FeatureSet set = devid::read_ttf(ws.path("f.ttf"));
  CHECK(set.samples.size() == 36);
  CHECK(set.frames == 128);
  CHECK(set.dims == 73);
  CHECK(set.n_classes() == 3);

  SUBCASE("re-extraction is bit-identical") {
    CHECK(run("extract --corpus " + ws.path("c") + " --out " + ws.path("f2.ttf")) == 0);
    CHECK(same_bytes(ws.path("f.ttf"), ws.path("f2.ttf")));
  }
  SUBCASE("a corrupt clip lands in the sidecar with exit 1") {
    std::ofstream bad(ws.path("c") + "/device00_src000.wav", std::ios::binary);
    bad << "not a wav";
    bad.close();
    CHECK(run("extract --corpus " + ws.path("c") + " --out " + ws.path("f3.ttf")) == 1);
    const std::string sidecar = slurp(ws.path("f3.ttf") + ".errors.txt");
    CHECK(sidecar.find("device00_src000.wav") != std::string::npos);
  }
}

TEST_CASE("train/eval/transfer pipeline on a tiny corpus") {
  Workspace ws;
  REQUIRE(run("synth --out " + ws.path("a") + " " + std::string(kSynthFlags)) == 0);
  REQUIRE(run("extract --corpus " + ws.path("a") + " --out " + ws.path("a.ttf")) == 0);

  // group 2 (BiLSTM only) keeps the smoke run quick
  const std::string train_flags = " --features " + ws.path("a.ttf") + " --out " +
                                  ws.path("m.ckpt") +
                                  " --group 2 --epochs 2 --batch 8 --lr 0.001 --seed 5";
  REQUIRE(run("train" + train_flags) == 0);
  CHECK(fs::exists(ws.path("m.ckpt")));
  CHECK(fs::exists(ws.path("m.ckpt.bin")));
  CHECK(fs::exists(ws.path("m.ckpt.history.csv")));
  CHECK(fs::exists(ws.path("m.ckpt.config.json")));
  const std::string history = slurp(ws.path("m.ckpt.history.csv"));
  CHECK(history.rfind("epoch,lr,train_loss,train_acc,val_loss,val_acc", 0) == 0);

  SUBCASE("seed-fixed rerun reproduces checkpoint and history bytes") {
    // same basename in a fresh directory so the manifests are comparable
    fs::create_directories(ws.path("rerun"));
    REQUIRE(run("train --features " + ws.path("a.ttf") + " --out " + ws.path("rerun/m.ckpt") +
                " --group 2 --epochs 2 --batch 8 --lr 0.001 --seed 5") == 0);
    CHECK(same_bytes(ws.path("m.ckpt"), ws.path("rerun/m.ckpt")));
    CHECK(same_bytes(ws.path("m.ckpt.bin"), ws.path("rerun/m.ckpt.bin")));
    CHECK(same_bytes(ws.path("m.ckpt.history.csv"), ws.path("rerun/m.ckpt.history.csv")));
  }

  SUBCASE("eval writes reports with one CSV row per class plus macro") {
    REQUIRE(run("eval --checkpoint " + ws.path("m.ckpt") + " --features " + ws.path("a.ttf") +
                " --out " + ws.path("r")) == 0);
    const std::string csv = slurp(ws.path("r.report.csv"));
    int lines = 0;
    for (char c : csv)
      if (c == '\n') ++lines;
    CHECK(lines == 1 + 3 + 1); // header + 3 classes + macro
    const std::string json = slurp(ws.path("r.report.json"));
    CHECK(json.find("\"accuracy\"") != std::string::npos);

    SUBCASE("re-evaluation is byte-identical") {
      REQUIRE(run("eval --checkpoint " + ws.path("m.ckpt") + " --features " +
                  ws.path("a.ttf") + " --out " + ws.path("r2")) == 0);
      CHECK(same_bytes(ws.path("r.report.csv"), ws.path("r2.report.csv")));
      CHECK(same_bytes(ws.path("r.report.json"), ws.path("r2.report.json")));
    }
  }

  SUBCASE("transfer onto a different corpus replaces the head") {
    REQUIRE(run("synth --out " + ws.path("b") +
                " --devices 2 --clips 12 --duration 0.5 --rate 8000 --seed 77") == 0);
    REQUIRE(run("extract --corpus " + ws.path("b") + " --out " + ws.path("b.ttf")) == 0);
    REQUIRE(run("transfer --checkpoint " + ws.path("m.ckpt") + " --features " +
                ws.path("b.ttf") + " --out " + ws.path("t.ckpt") +
                " --trainable head --epochs 3 --batch 8 --lr 0.001 --seed 9") == 0);
    CHECK(fs::exists(ws.path("t.ckpt")));
    CHECK(fs::exists(ws.path("t.ckpt.report.csv")));
    const std::string manifest = slurp(ws.path("t.ckpt"));
    CHECK(manifest.find("\"n_classes\": 2") != std::string::npos);
  }

  SUBCASE("unknown config key is a usage error") {
    std::ofstream cfg(ws.path("bad.json"));
    cfg << R"({"epochs": 1, "bogus_key": true})";
    cfg.close();
    CHECK(run("train --features " + ws.path("a.ttf") + " --out " + ws.path("x.ckpt") +
              " --config " + ws.path("bad.json")) == 2);
  }

  SUBCASE("config file values apply and flags win") {
    std::ofstream cfg(ws.path("t.json"));
    cfg << R"({"group": 2, "epochs": 1, "batch_size": 8, "lr": 0.001, "seed": 5})";
    cfg.close();
    REQUIRE(run("train --features " + ws.path("a.ttf") + " --out " + ws.path("m3.ckpt") +
                " --config " + ws.path("t.json")) == 0);
    const std::string resolved = slurp(ws.path("m3.ckpt.config.json"));
    CHECK(resolved.find("\"epochs\": 1") != std::string::npos);
    // flag overrides the file
    REQUIRE(run("train --features " + ws.path("a.ttf") + " --out " + ws.path("m4.ckpt") +
                " --config " + ws.path("t.json") + " --epochs 2") == 0);
    CHECK(slurp(ws.path("m4.ckpt.config.json")).find("\"epochs\": 2") != std::string::npos);
  }
}

TEST_CASE("verify: clean pass, injected bug fails naming the layer") {
  CHECK(run("verify") == 0);
  Workspace ws;
  const std::string out = ws.path("verify.log");
  const std::string cmd =
      cli() + " verify --inject-bug bilstm >" + out + " 2>&1";
  CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 1);
  const std::string log = slurp(out);
  CHECK(log.find("grad/bilstm") != std::string::npos);
  CHECK(log.find("FAIL") != std::string::npos);
}
