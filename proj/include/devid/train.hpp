#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "devid/metrics.hpp"
#include "devid/model.hpp"

namespace devid {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int batch_size = 64;
  int epochs = 100;
  double decay_factor = 0.1;
  int decay_period = 30; // epochs per decay step
  std::uint64_t seed = 0;
  double split_train = 0.64, split_val = 0.16, split_test = 0.20;
  int threads = 1;

  void validate() const;
};

// eta * factor^floor(epoch / period)
double lr_schedule(int epoch, const TrainConfig& cfg);

// One Adam update of a single parameter array against its gradient.
void adam_update(std::vector<real>& w, const std::vector<real>& g, std::vector<real>& m,
                 std::vector<real>& v, long t, double lr, double beta1, double beta2,
                 double eps);

struct AdamState {
  struct Slot {
    std::vector<real> m, v;
  };
  std::vector<Slot> slots;
  long t = 0;

  static AdamState init(const ParamList& params);
};

// Updates every parameter from its accumulated gradient; throws on NaN
// gradients, naming the parameter.
void adam_step(ParamList& params, AdamState& state, double lr_t, const TrainConfig& cfg);

struct SplitIndices {
  std::vector<int> train, val, test;
};

// Seeded, per-class proportional split; every sample must be labeled.
SplitIndices stratified_split(const std::vector<int>& labels, const TrainConfig& cfg);

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0, train_acc = 0;
  double val_loss = 0, val_acc = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_acc = 0, best_val_loss = 0;
  SplitIndices split;
  bool diverged = false;

  std::string history_csv() const;
};

// Splits `data` per cfg, runs the minibatch loop (forward, cross-entropy,
// backward, Adam with the step-decay schedule), and leaves the model at its
// best-validation-accuracy parameters. A NaN batch loss aborts training and
// restores the last best parameters.
TrainResult train(DeviceIdModel& model, const FeatureSet& data, const TrainConfig& cfg,
                  std::ostream* log = nullptr);

MetricsReport evaluate(DeviceIdModel& model, const FeatureSet& data,
                       const std::vector<int>& indices, int threads = 1,
                       double beta = 1.0);
MetricsReport evaluate(DeviceIdModel& model, const FeatureSet& data, int threads = 1);

// Mean cross-entropy and accuracy over the given sample indices.
std::pair<double, double> eval_loss_acc(DeviceIdModel& model, const FeatureSet& data,
                                        const std::vector<int>& indices, int threads);

enum class TrainableSet { head_only, mlp_and_head };

struct TransferResult {
  DeviceIdModel model;
  TrainResult training;
  MetricsReport test_report;
};

// Replaces the classification head of a copy of `pretrained` for the new
// class count, freezes everything outside `trainable`, and fine-tunes on
// `data`. Frozen parameters (and batch-norm statistics) are untouched;
// the frozen trunk is evaluated once per sample and cached.
TransferResult transfer_finetune(const DeviceIdModel& pretrained, const FeatureSet& data,
                                 TrainableSet trainable, const TrainConfig& cfg,
                                 std::ostream* log = nullptr);

} // namespace devid
