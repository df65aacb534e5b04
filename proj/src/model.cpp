#include "devid/model.hpp"

#include <algorithm>

namespace devid {

void ModelConfig::validate() const {
  if (!use_convlstm && !use_bilstm && !use_transformer)
    throw ConfigError("model config: at least one block must be enabled");
  if (n_classes < 2) throw ConfigError("model config: n_classes must be >= 2");
  if (frames < 1 || feat_dims < 1) throw ConfigError("model config: bad input shape");
  if (use_convlstm && convlstm.empty())
    throw ConfigError("model config: convlstm enabled but no layer specs");
  if (use_transformer) {
    if (encoder_num < 1 || heads < 1 || head_dim < 1 || ff_units < 1)
      throw ConfigError("model config: bad transformer parameters");
    if (token_scheme != "scalar" && token_scheme != "block")
      throw ConfigError("model config: unknown token_scheme '" + token_scheme + "'");
  }
  if (use_bilstm && bilstm_units < 1) throw ConfigError("model config: bad bilstm_units");
  if (mlp_units < 1) throw ConfigError("model config: bad mlp_units");
}

ModelConfig ablation_config(int group) {
  if (group < 1 || group > 7) throw ConfigError("ablation group must be 1..7");
  ModelConfig cfg;
  switch (group) {
    case 1: cfg.use_convlstm = true;  cfg.use_bilstm = false; cfg.use_transformer = false; break;
    case 2: cfg.use_convlstm = false; cfg.use_bilstm = true;  cfg.use_transformer = false; break;
    case 3: cfg.use_convlstm = false; cfg.use_bilstm = false; cfg.use_transformer = true;  break;
    case 4: cfg.use_convlstm = true;  cfg.use_bilstm = true;  cfg.use_transformer = true;  break;
    case 5: cfg.use_convlstm = false; cfg.use_bilstm = true;  cfg.use_transformer = true;  break;
    case 6: cfg.use_convlstm = true;  cfg.use_bilstm = false; cfg.use_transformer = true;  break;
    case 7: cfg.use_convlstm = true;  cfg.use_bilstm = true;  cfg.use_transformer = false; break;
  }
  return cfg;
}

DeviceIdModel DeviceIdModel::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  DeviceIdModel m;
  m.config_ = config;
  Rng rng(Rng::derive(seed, 0x6d6f64656cull)); // independent init stream

  int t_len = config.frames;
  int space = config.feat_dims;
  int channels = 1;

  if (config.use_convlstm) {
    for (const ConvSpec& cs : config.convlstm) {
      ConvLstm1d layer = ConvLstm1d::init(space, channels, cs.filters, cs.kernel, cs.stride, rng);
      space = layer.out_len;
      channels = cs.filters;
      m.convs_.push_back(std::move(layer));
      m.bns_.push_back(BatchNorm1d::init(channels));
    }
  }

  // width of the per-frame vector after the (optional) conv stack
  int frame_width = config.use_convlstm ? space * channels : config.feat_dims;

  int flat_dims = 0;
  if (config.use_bilstm) {
    m.bilstm_ = BiLstm::init(frame_width, config.bilstm_units, rng);
    flat_dims = 2 * config.bilstm_units;
  }

  if (config.use_transformer) {
    if (config.use_bilstm) {
      const int vec = 2 * config.bilstm_units;
      if (config.token_scheme == "scalar") {
        m.tokens_ = vec;
        m.d_model_ = 1;
      } else { // block: 16-wide tokens
        if (vec % 16 != 0)
          throw ConfigError("token_scheme 'block' needs a vector divisible by 16");
        m.tokens_ = vec / 16;
        m.d_model_ = 16;
      }
    } else {
      // frame-level tokens fed straight into the encoder stack
      m.tokens_ = t_len;
      m.d_model_ = frame_width;
    }
    m.pos_encoding_ = sinusoidal_positions(m.tokens_, m.d_model_);
    for (int e = 0; e < config.encoder_num; ++e)
      m.encoders_.push_back(EncoderBlock::init(m.tokens_, m.d_model_, config.heads,
                                               config.head_dim, config.ff_units, rng));
    flat_dims = m.tokens_ * m.d_model_;
  } else if (!config.use_bilstm) {
    flat_dims = t_len * frame_width; // conv-only topology flattens everything
  }

  m.embed_dims_ = flat_dims;
  m.mlp_ = Dense::init(flat_dims, config.mlp_units, Dense::Act::relu, rng);
  m.head_ = Dense::init(config.mlp_units, config.n_classes, Dense::Act::linear, rng);
  return m;
}

namespace {

void push_shape(ShapeTrace* trace, const Tensor& t) {
  if (trace) trace->shapes.push_back(t.shape());
}

} // namespace

Tensor DeviceIdModel::backbone(const Tensor& feature, bool training, ShapeTrace* trace,
                               std::vector<BnBatchStats>* bn_sink) {
  if (feature.rank() != 2 || feature.dim(0) != config_.frames ||
      feature.dim(1) != config_.feat_dims)
    throw ShapeError("model forward: feature shape mismatch");
  push_shape(trace, feature);

  Tensor x = feature;
  if (config_.use_convlstm) {
    x = reshape(x, {config_.frames, config_.feat_dims, 1});
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      x = convs_[i].forward(x);
      push_shape(trace, x);
      if (bn_sink) {
        BnBatchStats stats;
        x = bns_[i].forward(x, training, &stats);
        if (training) bn_sink->push_back(std::move(stats));
      } else {
        x = bns_[i].forward(x, training);
      }
    }
    x = reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
    push_shape(trace, x);
  }

  if (config_.use_bilstm) {
    x = bilstm_->forward(x);
    push_shape(trace, x);
  }

  if (config_.use_transformer) {
    x = reshape(x, {tokens_, d_model_});
    push_shape(trace, x);
    x = add(x, pos_encoding_);
    for (const EncoderBlock& enc : encoders_) x = enc.forward(x);
    push_shape(trace, x);
  }

  if (x.rank() != 1) x = reshape(x, {int(x.numel())});
  return x;
}

Tensor DeviceIdModel::mlp_forward(const Tensor& embedding) const {
  return mlp_.forward(embedding);
}

Tensor DeviceIdModel::head_forward(const Tensor& hidden) const {
  return head_.forward(hidden);
}

Tensor DeviceIdModel::forward(const Tensor& feature, bool training, ShapeTrace* trace,
                              std::vector<BnBatchStats>* bn_sink) {
  Tensor emb = backbone(feature, training, trace, bn_sink);
  Tensor hidden = mlp_.forward(emb);
  push_shape(trace, hidden);
  Tensor logits = head_.forward(hidden);
  push_shape(trace, logits);
  return logits;
}

Tensor DeviceIdModel::forward(const TandemFeature& feature, bool training) {
  Tensor x({feature.frames, feature.dims}, feature.matrix);
  return forward(x, training);
}

int DeviceIdModel::predict(const TandemFeature& feature) {
  Tensor logits = forward(feature, false);
  const auto& v = logits.value();
  return int(std::max_element(v.begin(), v.end()) - v.begin());
}

void DeviceIdModel::apply_bn_stats(const std::vector<BnBatchStats>& stats) {
  if (bns_.empty()) return;
  // stats arrive in forward order, one entry per BN layer per sample
  for (std::size_t i = 0; i < stats.size(); ++i)
    bns_[i % bns_.size()].apply_stats(stats[i]);
}

ParamList DeviceIdModel::parameters() {
  ParamList params;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect("convlstm" + std::to_string(i + 1), params);
    bns_[i].collect("bn" + std::to_string(i + 1), params);
  }
  if (bilstm_) bilstm_->collect("bilstm", params);
  for (std::size_t e = 0; e < encoders_.size(); ++e)
    encoders_[e].collect("enc" + std::to_string(e), params);
  mlp_.collect("mlp", params);
  head_.collect("head", params);
  return params;
}

BufferList DeviceIdModel::buffers() {
  BufferList buffers;
  for (std::size_t i = 0; i < bns_.size(); ++i)
    bns_[i].collect_buffers("bn" + std::to_string(i + 1), buffers);
  return buffers;
}

DeviceIdModel DeviceIdModel::clone() const {
  // rebuild from config, then copy parameter values and buffers over
  DeviceIdModel* self = const_cast<DeviceIdModel*>(this);
  DeviceIdModel copy = build(config_, 0);
  ParamList dst = copy.parameters();
  ParamList src = self->parameters();
  for (std::size_t i = 0; i < src.size(); ++i)
    dst[i].tensor.value() = src[i].tensor.value();
  BufferList dbuf = copy.buffers();
  BufferList sbuf = self->buffers();
  for (std::size_t i = 0; i < sbuf.size(); ++i) *dbuf[i].data = *sbuf[i].data;
  return copy;
}

void DeviceIdModel::replace_head(int n_classes, std::uint64_t seed) {
  if (n_classes < 2) throw ConfigError("replace_head: n_classes must be >= 2");
  Rng rng(Rng::derive(seed, 0x68656164ull));
  head_ = Dense::init(config_.mlp_units, n_classes, Dense::Act::linear, rng);
  // a linear classification head has no symmetry to break: zero weights let
  // fine-tuning push toward class-mean directions immediately instead of
  // first unlearning a random projection
  std::fill(head_.w.value().begin(), head_.w.value().end(), real(0));
  config_.n_classes = n_classes;
}

} // namespace devid
