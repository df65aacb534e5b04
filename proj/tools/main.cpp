// devid: batch CLI for the device-identification pipeline.
// Subcommands: synth, extract, train, eval, transfer, verify.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "devid/checkpoint.hpp"
#include "devid/featkit.hpp"
#include "devid/parallel.hpp"
#include "devid/synth.hpp"
#include "devid/train.hpp"
#include "devid/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace devid;

namespace {

// Applies a JSON config object onto a key->setter map, rejecting unknown keys.
class ConfigApplier {
 public:
  void add(const std::string& key, std::function<void(const json&)> setter) {
    setters_[key] = std::move(setter);
  }

  void apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad config file: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      auto s = setters_.find(it.key());
      if (s == setters_.end()) throw ConfigError("unknown config key '" + it.key() + "'");
      s->second(it.value());
    }
  }

 private:
  std::map<std::string, std::function<void(const json&)>> setters_;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  os << text;
  if (!os) throw FormatError("write failed: " + path);
}

void write_resolved_config(const std::string& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

// ---- synth ---------------------------------------------------------------

struct SynthArgs {
  std::string out, config;
  SynthCorpusSpec spec;
};

int cmd_synth(const SynthArgs& args) {
  SynthCorpus corpus = build_corpus(args.spec);
  write_corpus(corpus, args.out);
  json resolved = {{"command", "synth"},
                   {"devices", args.spec.n_devices},
                   {"clips", args.spec.clips_per_device},
                   {"duration_s", args.spec.clip_duration_s},
                   {"rate", args.spec.sample_rate},
                   {"seed", args.spec.seed}};
  write_resolved_config(args.out + "/synth.config.json", resolved);
  std::cout << "wrote " << corpus.clips.size() << " clips to " << args.out << "\n";
  return 0;
}

// ---- extract --------------------------------------------------------------

struct ExtractArgs {
  std::string corpus, out, config;
  FrameSpec spec;
  int threads = 1;
};

int cmd_extract(const ExtractArgs& args) {
  args.spec.validate();
  const auto manifest = read_manifest(args.corpus);
  if (manifest.empty()) throw ConfigError("empty corpus manifest");

  FeatureSet set;
  set.frames = args.spec.target_frames;
  set.dims = args.spec.feature_dims();
  set.samples.resize(manifest.size());
  set.labels.resize(manifest.size());
  std::vector<std::string> errors(manifest.size());

  parallel_for(int(manifest.size()), args.threads, [&](int i) {
    const CorpusEntry& e = manifest[std::size_t(i)];
    try {
      AudioClip clip = load_wav(args.corpus + "/" + e.clip_name);
      clip.label = e.device_id;
      TandemFeature feat = extract_tandem(clip, args.spec);
      set.samples[std::size_t(i)] = std::move(feat.matrix);
      set.labels[std::size_t(i)] = feat.label;
    } catch (const std::exception& ex) {
      errors[std::size_t(i)] = e.clip_name + ": " + ex.what();
    }
  });

  std::string error_log;
  for (const auto& e : errors)
    if (!e.empty()) error_log += e + "\n";
  if (!error_log.empty()) {
    write_text(args.out + ".errors.txt", error_log);
    std::cerr << "extraction failed for some clips; see " << args.out << ".errors.txt\n";
    return 1;
  }

  write_ttf(args.out, set);
  json resolved = {{"command", "extract"},
                   {"corpus", args.corpus},
                   {"frame_len", args.spec.frame_len},
                   {"fft_size", args.spec.fft_size},
                   {"n_mel", args.spec.n_mel},
                   {"n_mfcc", args.spec.n_mfcc},
                   {"target_frames", args.spec.target_frames},
                   {"pre_emphasis_alpha", args.spec.pre_emphasis_alpha},
                   {"window", args.spec.window}};
  write_resolved_config(args.out + ".config.json", resolved);
  std::cout << "wrote " << set.samples.size() << " feature records (" << set.frames << "x"
            << set.dims << ") to " << args.out << "\n";
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string features, out, config;
  int group = 4;
  int classes = 0; // 0 = infer from data
  std::string token_scheme = "scalar";
  TrainConfig tc; // defaults: lr 1e-4, batch 64, 100 epochs, decay 0.1/30
};

json train_config_json(const TrainArgs& args, const ModelConfig& mc) {
  return {{"command", "train"},
          {"features", args.features},
          {"group", args.group},
          {"model", json::parse(model_config_to_json(mc))},
          {"lr", args.tc.lr},
          {"batch_size", args.tc.batch_size},
          {"epochs", args.tc.epochs},
          {"decay_factor", args.tc.decay_factor},
          {"decay_period", args.tc.decay_period},
          {"seed", args.tc.seed},
          {"threads", args.tc.threads},
          {"split", {args.tc.split_train, args.tc.split_val, args.tc.split_test}}};
}

int cmd_train(const TrainArgs& args) {
  FeatureSet data = read_ttf(args.features);
  if (data.samples.empty()) throw ConfigError("feature file holds no samples");

  ModelConfig mc = ablation_config(args.group);
  mc.frames = data.frames;
  mc.feat_dims = data.dims;
  mc.token_scheme = args.token_scheme;
  mc.n_classes = args.classes > 0 ? args.classes : data.n_classes();

  DeviceIdModel model = DeviceIdModel::build(mc, args.tc.seed);
  TrainResult result = train(model, data, args.tc, &std::cout);

  const json resolved = train_config_json(args, mc);
  save_checkpoint(model, args.out, resolved.dump());
  write_text(args.out + ".history.csv", result.history_csv());
  write_resolved_config(args.out + ".config.json", resolved);

  if (!result.split.test.empty()) {
    MetricsReport report = evaluate(model, data, result.split.test, args.tc.threads);
    std::cout << "test accuracy " << report.accuracy << " over "
              << result.split.test.size() << " held-out samples\n";
  }
  std::cout << "checkpoint: " << args.out << "\nhistory: " << args.out << ".history.csv\n";
  return result.diverged ? 1 : 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, features, out, config;
  int threads = 1;
};

int cmd_eval(const EvalArgs& args) {
  DeviceIdModel model = load_checkpoint(args.checkpoint);
  FeatureSet data = read_ttf(args.features);
  MetricsReport report = evaluate(model, data, args.threads);
  write_text(args.out + ".report.json", report.to_json());
  write_text(args.out + ".report.csv", report.to_csv());
  json resolved = {{"command", "eval"},
                   {"checkpoint", args.checkpoint},
                   {"features", args.features},
                   {"threads", args.threads}};
  write_resolved_config(args.out + ".config.json", resolved);
  std::cout << "accuracy " << report.accuracy << "\n"
            << args.out << ".report.json\n"
            << args.out << ".report.csv\n";
  return 0;
}

// ---- transfer ------------------------------------------------------------------

struct TransferArgs {
  std::string checkpoint, features, out, config;
  std::string trainable = "mlp+head";
  TrainConfig tc;
};

int cmd_transfer(const TransferArgs& args) {
  if (args.trainable != "head" && args.trainable != "mlp+head")
    throw ConfigError("--trainable must be 'head' or 'mlp+head'");
  const TrainableSet set = args.trainable == "head" ? TrainableSet::head_only
                                                    : TrainableSet::mlp_and_head;

  DeviceIdModel pretrained = load_checkpoint(args.checkpoint);
  FeatureSet data = read_ttf(args.features);
  TransferResult result = transfer_finetune(pretrained, data, set, args.tc, &std::cout);

  // frozen parameters must be bit-identical to the pretrained model
  ParamList before = pretrained.parameters();
  ParamList after = result.model.parameters();
  long frozen = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const std::string& name = before[i].name;
    const bool tuned = name.rfind("head.", 0) == 0 ||
                       (set == TrainableSet::mlp_and_head && name.rfind("mlp.", 0) == 0);
    if (tuned) continue;
    if (after[i].tensor.value() != before[i].tensor.value())
      throw Error("frozen parameter '" + name + "' changed during fine-tuning");
    ++frozen;
  }
  std::cout << "frozen parameters verified bit-identical: " << frozen << " arrays\n";

  json resolved = {{"command", "transfer"},
                   {"checkpoint", args.checkpoint},
                   {"features", args.features},
                   {"trainable", args.trainable},
                   {"lr", args.tc.lr},
                   {"batch_size", args.tc.batch_size},
                   {"epochs", args.tc.epochs},
                   {"seed", args.tc.seed}};
  save_checkpoint(result.model, args.out, resolved.dump());
  write_text(args.out + ".history.csv", result.training.history_csv());
  write_text(args.out + ".report.json", result.test_report.to_json());
  write_text(args.out + ".report.csv", result.test_report.to_csv());
  write_resolved_config(args.out + ".config.json", resolved);
  std::cout << "transfer test accuracy " << result.test_report.accuracy << "\n"
            << "checkpoint: " << args.out << "\n";
  return 0;
}

// ---- verify ---------------------------------------------------------------------

int cmd_verify(const std::string& inject) {
  const auto results = run_verification(inject);
  std::cout << format_report(results);
  if (!all_pass(results)) {
    for (const auto& r : results)
      if (!r.pass) std::cerr << "FAILED: " << r.name << "\n";
    return 1;
  }
  std::cout << "all checks passed\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"mobile recording device identification pipeline"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate a synthetic device corpus");
  synth->add_option("--out", synth_args.out, "output directory")->required();
  auto* s_dev = synth->add_option("--devices", synth_args.spec.n_devices);
  auto* s_clips = synth->add_option("--clips", synth_args.spec.clips_per_device);
  auto* s_dur = synth->add_option("--duration", synth_args.spec.clip_duration_s);
  auto* s_rate = synth->add_option("--rate", synth_args.spec.sample_rate);
  auto* s_seed = synth->add_option("--seed", synth_args.spec.seed);
  synth->add_option("--config", synth_args.config, "JSON config file");

  ExtractArgs extract_args;
  auto* extract = app.add_subcommand("extract", "extract tandem features from a corpus");
  extract->add_option("--corpus", extract_args.corpus, "corpus directory with manifest.csv")
      ->required();
  extract->add_option("--out", extract_args.out, "output TTF1 path")->required();
  auto* e_flen = extract->add_option("--frame-len", extract_args.spec.frame_len);
  auto* e_fft = extract->add_option("--fft", extract_args.spec.fft_size);
  auto* e_mel = extract->add_option("--mel", extract_args.spec.n_mel);
  auto* e_mfcc = extract->add_option("--mfcc", extract_args.spec.n_mfcc);
  auto* e_frames = extract->add_option("--frames", extract_args.spec.target_frames);
  auto* e_alpha = extract->add_option("--alpha", extract_args.spec.pre_emphasis_alpha);
  auto* e_win = extract->add_option("--window", extract_args.spec.window);
  extract->add_option("--threads", extract_args.threads);
  extract->add_option("--config", extract_args.config, "JSON config file");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model on extracted features");
  train_cmd->add_option("--features", train_args.features, "TTF1 feature file")->required();
  train_cmd->add_option("--out", train_args.out, "checkpoint output path")->required();
  auto* t_group = train_cmd->add_option("--group", train_args.group, "ablation group 1..7");
  auto* t_classes = train_cmd->add_option("--classes", train_args.classes);
  auto* t_scheme = train_cmd->add_option("--token-scheme", train_args.token_scheme);
  auto* t_lr = train_cmd->add_option("--lr", train_args.tc.lr);
  auto* t_batch = train_cmd->add_option("--batch", train_args.tc.batch_size);
  auto* t_epochs = train_cmd->add_option("--epochs", train_args.tc.epochs);
  auto* t_df = train_cmd->add_option("--decay-factor", train_args.tc.decay_factor);
  auto* t_dp = train_cmd->add_option("--decay-period", train_args.tc.decay_period);
  auto* t_seed = train_cmd->add_option("--seed", train_args.tc.seed);
  train_cmd->add_option("--threads", train_args.tc.threads);
  train_cmd->add_option("--config", train_args.config, "JSON config file");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on features");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
  eval_cmd->add_option("--features", eval_args.features)->required();
  eval_cmd->add_option("--out", eval_args.out, "report path prefix")->required();
  eval_cmd->add_option("--threads", eval_args.threads);
  eval_cmd->add_option("--config", eval_args.config, "JSON config file");

  TransferArgs transfer_args;
  transfer_args.tc.lr = 1e-5; // transfer regime defaults
  transfer_args.tc.batch_size = 32;
  transfer_args.tc.epochs = 300;
  auto* transfer_cmd =
      app.add_subcommand("transfer", "fine-tune a pretrained checkpoint on new classes");
  transfer_cmd->add_option("--checkpoint", transfer_args.checkpoint)->required();
  transfer_cmd->add_option("--features", transfer_args.features)->required();
  transfer_cmd->add_option("--out", transfer_args.out)->required();
  auto* x_train = transfer_cmd->add_option("--trainable", transfer_args.trainable,
                                           "head or mlp+head");
  auto* x_lr = transfer_cmd->add_option("--lr", transfer_args.tc.lr);
  auto* x_batch = transfer_cmd->add_option("--batch", transfer_args.tc.batch_size);
  auto* x_epochs = transfer_cmd->add_option("--epochs", transfer_args.tc.epochs);
  auto* x_seed = transfer_cmd->add_option("--seed", transfer_args.tc.seed);
  transfer_cmd->add_option("--threads", transfer_args.tc.threads);
  transfer_cmd->add_option("--config", transfer_args.config, "JSON config file");

  std::string inject_bug;
  auto* verify_cmd = app.add_subcommand("verify", "run the full invariant suite");
  verify_cmd->add_option("--inject-bug", inject_bug,
                         "test fixture: corrupt the named layer's gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      if (!synth_args.config.empty()) {
        SynthCorpusSpec file_spec;
        ConfigApplier ca;
        ca.add("devices", [&](const json& v) { file_spec.n_devices = v.get<int>(); });
        ca.add("clips", [&](const json& v) { file_spec.clips_per_device = v.get<int>(); });
        ca.add("duration", [&](const json& v) { file_spec.clip_duration_s = v.get<double>(); });
        ca.add("rate", [&](const json& v) { file_spec.sample_rate = v.get<int>(); });
        ca.add("seed", [&](const json& v) { file_spec.seed = v.get<std::uint64_t>(); });
        ca.apply_file(synth_args.config);
        if (!s_dev->count()) synth_args.spec.n_devices = file_spec.n_devices;
        if (!s_clips->count()) synth_args.spec.clips_per_device = file_spec.clips_per_device;
        if (!s_dur->count()) synth_args.spec.clip_duration_s = file_spec.clip_duration_s;
        if (!s_rate->count()) synth_args.spec.sample_rate = file_spec.sample_rate;
        if (!s_seed->count()) synth_args.spec.seed = file_spec.seed;
      }
      return cmd_synth(synth_args);
    }
    if (extract->parsed()) {
      if (!extract_args.config.empty()) {
        FrameSpec file_spec;
        ConfigApplier ca;
        ca.add("frame_len", [&](const json& v) { file_spec.frame_len = v.get<int>(); });
        ca.add("fft_size", [&](const json& v) { file_spec.fft_size = v.get<int>(); });
        ca.add("n_mel", [&](const json& v) { file_spec.n_mel = v.get<int>(); });
        ca.add("n_mfcc", [&](const json& v) { file_spec.n_mfcc = v.get<int>(); });
        ca.add("target_frames", [&](const json& v) { file_spec.target_frames = v.get<int>(); });
        ca.add("pre_emphasis_alpha",
               [&](const json& v) { file_spec.pre_emphasis_alpha = v.get<double>(); });
        ca.add("window", [&](const json& v) { file_spec.window = v.get<std::string>(); });
        ca.apply_file(extract_args.config);
        if (!e_flen->count()) extract_args.spec.frame_len = file_spec.frame_len;
        if (!e_fft->count()) extract_args.spec.fft_size = file_spec.fft_size;
        if (!e_mel->count()) extract_args.spec.n_mel = file_spec.n_mel;
        if (!e_mfcc->count()) extract_args.spec.n_mfcc = file_spec.n_mfcc;
        if (!e_frames->count()) extract_args.spec.target_frames = file_spec.target_frames;
        if (!e_alpha->count())
          extract_args.spec.pre_emphasis_alpha = file_spec.pre_emphasis_alpha;
        if (!e_win->count()) extract_args.spec.window = file_spec.window;
      }
      return cmd_extract(extract_args);
    }
    if (train_cmd->parsed()) {
      if (!train_args.config.empty()) {
        TrainArgs file_args;
        ConfigApplier ca;
        ca.add("group", [&](const json& v) { file_args.group = v.get<int>(); });
        ca.add("classes", [&](const json& v) { file_args.classes = v.get<int>(); });
        ca.add("token_scheme",
               [&](const json& v) { file_args.token_scheme = v.get<std::string>(); });
        ca.add("lr", [&](const json& v) { file_args.tc.lr = v.get<double>(); });
        ca.add("batch_size", [&](const json& v) { file_args.tc.batch_size = v.get<int>(); });
        ca.add("epochs", [&](const json& v) { file_args.tc.epochs = v.get<int>(); });
        ca.add("decay_factor",
               [&](const json& v) { file_args.tc.decay_factor = v.get<double>(); });
        ca.add("decay_period",
               [&](const json& v) { file_args.tc.decay_period = v.get<int>(); });
        ca.add("seed", [&](const json& v) { file_args.tc.seed = v.get<std::uint64_t>(); });
        ca.apply_file(train_args.config);
        if (!t_group->count()) train_args.group = file_args.group;
        if (!t_classes->count()) train_args.classes = file_args.classes;
        if (!t_scheme->count()) train_args.token_scheme = file_args.token_scheme;
        if (!t_lr->count()) train_args.tc.lr = file_args.tc.lr;
        if (!t_batch->count()) train_args.tc.batch_size = file_args.tc.batch_size;
        if (!t_epochs->count()) train_args.tc.epochs = file_args.tc.epochs;
        if (!t_df->count()) train_args.tc.decay_factor = file_args.tc.decay_factor;
        if (!t_dp->count()) train_args.tc.decay_period = file_args.tc.decay_period;
        if (!t_seed->count()) train_args.tc.seed = file_args.tc.seed;
      }
      return cmd_train(train_args);
    }
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (transfer_cmd->parsed()) {
      if (!transfer_args.config.empty()) {
        TransferArgs file_args; // same transfer-regime defaults as the flags
        file_args.tc.lr = 1e-5;
        file_args.tc.batch_size = 32;
        file_args.tc.epochs = 300;
        ConfigApplier ca;
        ca.add("trainable",
               [&](const json& v) { file_args.trainable = v.get<std::string>(); });
        ca.add("lr", [&](const json& v) { file_args.tc.lr = v.get<double>(); });
        ca.add("batch_size", [&](const json& v) { file_args.tc.batch_size = v.get<int>(); });
        ca.add("epochs", [&](const json& v) { file_args.tc.epochs = v.get<int>(); });
        ca.add("seed", [&](const json& v) { file_args.tc.seed = v.get<std::uint64_t>(); });
        ca.apply_file(transfer_args.config);
        if (!x_train->count()) transfer_args.trainable = file_args.trainable;
        if (!x_lr->count()) transfer_args.tc.lr = file_args.tc.lr;
        if (!x_batch->count()) transfer_args.tc.batch_size = file_args.tc.batch_size;
        if (!x_epochs->count()) transfer_args.tc.epochs = file_args.tc.epochs;
        if (!x_seed->count()) transfer_args.tc.seed = file_args.tc.seed;
      }
      return cmd_transfer(transfer_args);
    }
    if (verify_cmd->parsed()) return cmd_verify(inject_bug);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
