#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "devid/featkit.hpp"
#include "devid/layers.hpp"

namespace devid {

struct ConvSpec {
  int filters = 0;
  int kernel = 3;
  int stride = 1;
};

// Declarative topology. The default is the full three-block pipeline; the
// ablation groups toggle blocks off (see ablation_config).
struct ModelConfig {
  bool use_convlstm = true;
  bool use_bilstm = true;
  bool use_transformer = true;
  std::vector<ConvSpec> convlstm = {{64, 3, 3}, {32, 3, 2}};
  int bilstm_units = 128;
  int encoder_num = 2;
  int heads = 8;
  int head_dim = 64;
  int ff_units = 128;
  int mlp_units = 128;
  int n_classes = 45;
  std::string token_scheme = "scalar"; // "scalar" (width-1 tokens) or "block" (16-wide)
  int frames = 128;
  int feat_dims = 73;

  void validate() const;
};

// Flag layouts of ablation groups 1..7:
//   1 ConvLSTM    2 BiLSTM    3 Transformer    4 all
//   5 BiLSTM+Transformer    6 ConvLSTM+Transformer    7 ConvLSTM+BiLSTM
ModelConfig ablation_config(int group);

struct ShapeTrace {
  std::vector<std::vector<int>> shapes;
};

class DeviceIdModel {
 public:
  static DeviceIdModel build(const ModelConfig& config, std::uint64_t seed);

  // Everything up to (not including) the MLP head: returns the flattened
  // embedding vector the head consumes.
  Tensor backbone(const Tensor& feature, bool training = false,
                  ShapeTrace* trace = nullptr,
                  std::vector<BnBatchStats>* bn_sink = nullptr);
  Tensor mlp_forward(const Tensor& embedding) const;  // -> (mlp_units)
  Tensor head_forward(const Tensor& hidden) const;    // -> (n_classes)

  Tensor forward(const Tensor& feature, bool training = false,
                 ShapeTrace* trace = nullptr,
                 std::vector<BnBatchStats>* bn_sink = nullptr);
  Tensor forward(const TandemFeature& feature, bool training = false);

  int predict(const TandemFeature& feature); // argmax class

  // Folds deferred batch-norm statistics (from bn_sink) into running stats,
  // in the order they were observed.
  void apply_bn_stats(const std::vector<BnBatchStats>& stats);

  ParamList parameters();      // trainable tensors, stable order and names
  BufferList buffers();        // batch-norm running statistics
  DeviceIdModel clone() const; // deep copy (values, stats, config)

  // Replaces the classification layer for a new class count; all other
  // parameters keep their values.
  void replace_head(int n_classes, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  int embedding_dims() const { return embed_dims_; }

 private:
  ModelConfig config_;
  std::vector<ConvLstm1d> convs_;
  std::vector<BatchNorm1d> bns_;
  std::optional<BiLstm> bilstm_;
  std::vector<EncoderBlock> encoders_;
  Tensor pos_encoding_; // constant, not trained
  int tokens_ = 0, d_model_ = 0;
  int embed_dims_ = 0;
  Dense mlp_;
  Dense head_;
};

} // namespace devid
