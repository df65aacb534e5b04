#include "devid/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <thread>

#include "devid/parallel.hpp"
#include "devid/rng.hpp"

namespace devid {

void TrainConfig::validate() const {
  if (lr <= 0) throw ConfigError("train config: lr must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
    throw ConfigError("train config: betas must be in [0,1)");
  if (eps <= 0) throw ConfigError("train config: eps must be positive");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (decay_factor <= 0 || decay_period < 1)
    throw ConfigError("train config: bad decay settings");
  if (std::abs(split_train + split_val + split_test - 1.0) > 1e-9)
    throw ConfigError("train config: split fractions must sum to 1");
  if (split_train <= 0) throw ConfigError("train config: empty training split");
  if (threads < 1) throw ConfigError("train config: threads must be >= 1");
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("lr_schedule: negative epoch");
  return cfg.lr * std::pow(cfg.decay_factor, double(epoch / cfg.decay_period));
}

void adam_update(std::vector<real>& w, const std::vector<real>& g, std::vector<real>& m,
                 std::vector<real>& v, long t, double lr, double beta1, double beta2,
                 double eps) {
  if (w.size() != g.size() || w.size() != m.size() || w.size() != v.size())
    throw ShapeError("adam_update: array size mismatch");
  if (t < 1) throw ConfigError("adam_update: step index must be >= 1");
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = double(g[i]);
    const double mi = beta1 * double(m[i]) + (1.0 - beta1) * gi;
    const double vi = beta2 * double(v[i]) + (1.0 - beta2) * gi * gi;
    m[i] = real(mi);
    v[i] = real(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    w[i] = real(double(w[i]) - lr * mhat / (std::sqrt(vhat) + eps));
  }
}

AdamState AdamState::init(const ParamList& params) {
  AdamState st;
  st.slots.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i].tensor.numel();
    st.slots[i].m.assign(n, real(0));
    st.slots[i].v.assign(n, real(0));
  }
  return st;
}

void adam_step(ParamList& params, AdamState& state, double lr_t, const TrainConfig& cfg) {
  if (params.size() != state.slots.size())
    throw ConfigError("adam_step: state does not match parameter list");
  for (const ParamRef& p : params)
    for (real g : p.tensor.impl()->grad)
      if (std::isnan(double(g)))
        throw Error("adam_step: NaN gradient in parameter '" + p.name + "'");
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].tensor;
    adam_update(t.value(), t.grad(), state.slots[i].m, state.slots[i].v, state.t, lr_t,
                cfg.beta1, cfg.beta2, cfg.eps);
  }
}

SplitIndices stratified_split(const std::vector<int>& labels, const TrainConfig& cfg) {
  int n_classes = 0;
  for (int l : labels) {
    if (l < 0) throw ConfigError("split: unlabeled sample in training data");
    n_classes = std::max(n_classes, l + 1);
  }
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[std::size_t(labels[i])].push_back(int(i));

  SplitIndices split;
  for (int c = 0; c < n_classes; ++c) {
    auto& idx = by_class[std::size_t(c)];
    Rng rng(Rng::derive(cfg.seed, 0x73706c6974ull + std::uint64_t(c)));
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[std::size_t(rng.next_u64() % i)]);
    const int cnt = int(idx.size());
    const int n_test = int(std::lround(cfg.split_test * cnt));
    const int n_val = int(std::lround(cfg.split_val * cnt));
    for (int i = 0; i < cnt; ++i) {
      if (i < n_test)
        split.test.push_back(idx[std::size_t(i)]);
      else if (i < n_test + n_val)
        split.val.push_back(idx[std::size_t(i)]);
      else
        split.train.push_back(idx[std::size_t(i)]);
    }
  }
  if (split.train.empty()) throw ConfigError("split: empty training split");
  return split;
}

namespace {

Tensor feature_tensor(const FeatureSet& data, int idx) {
  return Tensor({data.frames, data.dims}, data.samples[std::size_t(idx)]);
}

std::vector<std::vector<real>> snapshot_values(ParamList& params, BufferList& buffers) {
  std::vector<std::vector<real>> snap;
  snap.reserve(params.size() + buffers.size());
  for (auto& p : params) snap.push_back(p.tensor.value());
  for (auto& b : buffers) snap.push_back(*b.data);
  return snap;
}

void restore_values(ParamList& params, BufferList& buffers,
                    const std::vector<std::vector<real>>& snap) {
  std::size_t k = 0;
  for (auto& p : params) p.tensor.value() = snap[k++];
  for (auto& b : buffers) *b.data = snap[k++];
}

int argmax(const std::vector<real>& v) {
  return int(std::max_element(v.begin(), v.end()) - v.begin());
}

struct BatchOutcome {
  double loss_sum = 0;
  long correct = 0;
  bool nan = false;
};

// Forward/backward over one batch shard on one replica; gradients are
// seeded with 1/batch so accumulated leaf grads are already batch means.
BatchOutcome run_shard(DeviceIdModel& replica, const FeatureSet& data,
                       const std::vector<int>& batch, std::size_t begin, std::size_t end,
                       real seed_scale, std::vector<BnBatchStats>* bn_sink) {
  BatchOutcome out;
  for (std::size_t s = begin; s < end; ++s) {
    const int idx = batch[s];
    Tape tape;
    Tape::Scope scope(tape);
    Tensor logits = replica.forward(feature_tensor(data, idx), true, nullptr, bn_sink);
    Tensor probs = softmax(logits);
    Tensor loss = cross_entropy(probs, data.labels[std::size_t(idx)]);
    const double lv = double(loss.item());
    if (std::isnan(lv)) {
      out.nan = true;
      return out;
    }
    out.loss_sum += lv;
    if (argmax(logits.value()) == data.labels[std::size_t(idx)]) ++out.correct;
    tape.backward(loss, seed_scale);
  }
  return out;
}

} // namespace

std::pair<double, double> eval_loss_acc(DeviceIdModel& model, const FeatureSet& data,
                                        const std::vector<int>& indices, int threads) {
  if (indices.empty()) return {0.0, 0.0};
  std::vector<double> losses(indices.size());
  std::vector<char> hits(indices.size());
  // inference is read-only on the model, safe to share across threads
  parallel_for(int(indices.size()), threads, [&](int i) {
    const int idx = indices[std::size_t(i)];
    Tensor logits = model.forward(feature_tensor(data, idx), false);
    Tensor probs = softmax(logits);
    losses[std::size_t(i)] =
        double(cross_entropy(probs, data.labels[std::size_t(idx)]).item());
    hits[std::size_t(i)] =
        argmax(logits.value()) == data.labels[std::size_t(idx)] ? 1 : 0;
  });
  double loss = 0;
  long correct = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    loss += losses[i];
    correct += hits[i];
  }
  return {loss / double(indices.size()), double(correct) / double(indices.size())};
}

TrainResult train(DeviceIdModel& model, const FeatureSet& data, const TrainConfig& cfg,
                  std::ostream* log) {
  cfg.validate();
  if (data.samples.empty()) throw ConfigError("train: empty dataset");
  if (data.n_classes() > model.config().n_classes)
    throw ConfigError("train: dataset has more classes than the model head");

  TrainResult result;
  result.split = stratified_split(data.labels, cfg);
  const auto& tr = result.split.train;

  ParamList params = model.parameters();
  BufferList buffers = model.buffers();
  AdamState adam = AdamState::init(params);

  const int threads = cfg.threads;
  std::vector<DeviceIdModel> replicas;
  if (threads > 1)
    for (int t = 1; t < threads; ++t) replicas.push_back(model.clone());
  std::vector<ParamList> replica_params;
  for (auto& r : replicas) replica_params.push_back(r.parameters());

  auto best_snap = snapshot_values(params, buffers);
  result.best_val_acc = -1.0;

  std::vector<int> order(tr);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    Rng shuffle_rng(Rng::derive(cfg.seed, 0x65706f6368ull + std::uint64_t(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::size_t(shuffle_rng.next_u64() % i)]);

    double epoch_loss = 0;
    long epoch_correct = 0;
    bool nan_abort = false;

    for (std::size_t start = 0; start < order.size() && !nan_abort;
         start += std::size_t(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch_size));
      std::vector<int> batch(order.begin() + long(start), order.begin() + long(stop));
      const real seed_scale = real(1.0 / double(batch.size()));

      for (auto& p : params) p.tensor.zero_grad();

      std::vector<BatchOutcome> outcomes(static_cast<std::size_t>(threads));
      std::vector<std::vector<BnBatchStats>> sinks(static_cast<std::size_t>(threads));

      if (threads == 1) {
        outcomes[0] = run_shard(model, data, batch, 0, batch.size(), seed_scale, &sinks[0]);
      } else {
        // contiguous shards; replica 0 is the primary model
        for (auto& rp : replica_params)
          for (std::size_t i = 0; i < rp.size(); ++i) {
            rp[i].tensor.value() = params[i].tensor.value();
            rp[i].tensor.zero_grad();
          }
        const std::size_t per = (batch.size() + std::size_t(threads) - 1) / std::size_t(threads);
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
          const std::size_t b = std::min(batch.size(), std::size_t(t) * per);
          const std::size_t e = std::min(batch.size(), b + per);
          if (b >= e) continue;
          DeviceIdModel* rep = (t == 0) ? &model : &replicas[std::size_t(t) - 1];
          pool.emplace_back([&, t, b, e, rep]() {
            outcomes[std::size_t(t)] =
                run_shard(*rep, data, batch, b, e, seed_scale, &sinks[std::size_t(t)]);
          });
        }
        for (auto& th : pool) th.join();
        // merge replica gradients in replica order
        for (auto& rp : replica_params)
          for (std::size_t i = 0; i < rp.size(); ++i) {
            if (!rp[i].tensor.has_grad()) continue;
            auto& dst = params[i].tensor.grad();
            const auto& src = rp[i].tensor.grad();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
          }
      }

      double batch_loss = 0;
      for (const auto& oc : outcomes) {
        if (oc.nan) nan_abort = true;
        batch_loss += oc.loss_sum;
        epoch_correct += oc.correct;
      }
      if (nan_abort) break;
      epoch_loss += batch_loss;

      // batch-norm EMA in sample order, independent of thread count
      for (auto& sink : sinks) model.apply_bn_stats(sink);

      try {
        adam_step(params, adam, lr, cfg);
      } catch (const Error&) {
        nan_abort = true; // NaN gradients count as divergence
        break;
      }
    }

    if (nan_abort) {
      result.diverged = true;
      if (log) *log << "epoch " << epoch << ": loss diverged, restoring best checkpoint\n";
      break;
    }

    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = epoch_loss / double(order.size());
    st.train_acc = double(epoch_correct) / double(order.size());
    if (!result.split.val.empty()) {
      auto [vl, va] = eval_loss_acc(model, data, result.split.val, threads);
      st.val_loss = vl;
      st.val_acc = va;
    }
    result.history.push_back(st);
    if (log) {
      char line[160];
      std::snprintf(line, sizeof(line),
                    "epoch %3d lr %.2e train_loss %.4f train_acc %.4f val_loss %.4f "
                    "val_acc %.4f\n",
                    epoch, lr, st.train_loss, st.train_acc, st.val_loss, st.val_acc);
      *log << line;
    }

    const bool better = st.val_acc > result.best_val_acc ||
                        (st.val_acc == result.best_val_acc &&
                         st.val_loss < result.best_val_loss);
    if (result.split.val.empty() || better) {
      result.best_epoch = epoch;
      result.best_val_acc = st.val_acc;
      result.best_val_loss = st.val_loss;
      best_snap = snapshot_values(params, buffers);
    }
  }

  restore_values(params, buffers, best_snap);
  return result;
}

MetricsReport evaluate(DeviceIdModel& model, const FeatureSet& data,
                       const std::vector<int>& indices, int threads, double beta) {
  if (indices.empty()) throw ConfigError("evaluate: empty index set");
  std::vector<int> truth(indices.size()), pred(indices.size());
  parallel_for(int(indices.size()), threads, [&](int i) {
    const int idx = indices[std::size_t(i)];
    Tensor logits = model.forward(feature_tensor(data, idx), false);
    truth[std::size_t(i)] = data.labels[std::size_t(idx)];
    pred[std::size_t(i)] = argmax(logits.value());
  });
  return metrics_from_predictions(truth, pred, model.config().n_classes, beta);
}

MetricsReport evaluate(DeviceIdModel& model, const FeatureSet& data, int threads) {
  std::vector<int> all(data.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  return evaluate(model, data, all, threads);
}

std::string TrainResult::history_csv() const {
  std::string out = "epoch,lr,train_loss,train_acc,val_loss,val_acc\n";
  char line[160];
  for (const EpochStats& st : history) {
    std::snprintf(line, sizeof(line), "%d,%.8g,%.6f,%.6f,%.6f,%.6f\n", st.epoch, st.lr,
                  st.train_loss, st.train_acc, st.val_loss, st.val_acc);
    out += line;
  }
  return out;
}

TransferResult transfer_finetune(const DeviceIdModel& pretrained, const FeatureSet& data,
                                 TrainableSet trainable, const TrainConfig& cfg,
                                 std::ostream* log) {
  cfg.validate();
  if (data.samples.empty()) throw ConfigError("transfer: empty dataset");
  const int n_new = data.n_classes();
  if (n_new < 2) throw ConfigError("transfer: need at least two classes");

  DeviceIdModel model = pretrained.clone();
  model.replace_head(n_new, cfg.seed);

  const bool tune_mlp = trainable == TrainableSet::mlp_and_head;
  ParamList all = model.parameters();
  ParamList tuned;
  for (auto& p : all) {
    const bool is_head = p.name.rfind("head.", 0) == 0;
    const bool is_mlp = p.name.rfind("mlp.", 0) == 0;
    if (is_head || (tune_mlp && is_mlp)) {
      tuned.push_back(p);
    } else {
      p.tensor.set_requires_grad(false);
    }
  }

  // the frozen trunk is deterministic per sample: evaluate once and cache
  const int cache_dims = tune_mlp ? model.embedding_dims() : model.config().mlp_units;
  std::vector<std::vector<real>> cache(data.samples.size());
  parallel_for(int(data.samples.size()), cfg.threads, [&](int i) {
    Tensor emb = model.backbone(feature_tensor(data, i), false);
    if (!tune_mlp) emb = model.mlp_forward(emb);
    cache[std::size_t(i)] = emb.value();
  });

  auto tail_forward = [&](int idx) {
    Tensor in({cache_dims}, cache[std::size_t(idx)]);
    return tune_mlp ? model.head_forward(model.mlp_forward(in)) : model.head_forward(in);
  };

  TrainResult result;
  result.split = stratified_split(data.labels, cfg);
  AdamState adam = AdamState::init(tuned);
  BufferList no_buffers;
  auto best_snap = snapshot_values(tuned, no_buffers);
  result.best_val_acc = -1.0;

  auto tail_eval = [&](const std::vector<int>& indices) {
    double loss = 0;
    long correct = 0;
    for (int idx : indices) {
      Tensor logits = tail_forward(idx);
      loss += double(cross_entropy(softmax(logits), data.labels[std::size_t(idx)]).item());
      if (argmax(logits.value()) == data.labels[std::size_t(idx)]) ++correct;
    }
    const double n = double(indices.size());
    return std::pair<double, double>{loss / n, double(correct) / n};
  };

  std::vector<int> order(result.split.train);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    Rng shuffle_rng(Rng::derive(cfg.seed, 0x65706f6368ull + std::uint64_t(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::size_t(shuffle_rng.next_u64() % i)]);

    double epoch_loss = 0;
    long epoch_correct = 0;
    for (std::size_t start = 0; start < order.size();
         start += std::size_t(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch_size));
      const real seed_scale = real(1.0 / double(stop - start));
      for (auto& p : tuned) p.tensor.zero_grad();
      for (std::size_t s = start; s < stop; ++s) {
        const int idx = order[s];
        Tape tape;
        Tape::Scope scope(tape);
        Tensor logits = tail_forward(idx);
        Tensor loss = cross_entropy(softmax(logits), data.labels[std::size_t(idx)]);
        epoch_loss += double(loss.item());
        if (argmax(logits.value()) == data.labels[std::size_t(idx)]) ++epoch_correct;
        tape.backward(loss, seed_scale);
      }
      adam_step(tuned, adam, lr, cfg);
    }

    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = epoch_loss / double(order.size());
    st.train_acc = double(epoch_correct) / double(order.size());
    if (!result.split.val.empty()) {
      auto [vl, va] = tail_eval(result.split.val);
      st.val_loss = vl;
      st.val_acc = va;
    }
    result.history.push_back(st);
    if (log) {
      char line[160];
      std::snprintf(line, sizeof(line),
                    "transfer epoch %3d lr %.2e train_loss %.4f train_acc %.4f "
                    "val_loss %.4f val_acc %.4f\n",
                    epoch, lr, st.train_loss, st.train_acc, st.val_loss, st.val_acc);
      *log << line;
    }
    const bool better = st.val_acc > result.best_val_acc ||
                        (st.val_acc == result.best_val_acc &&
                         st.val_loss < result.best_val_loss);
    if (result.split.val.empty() || better) {
      result.best_epoch = epoch;
      result.best_val_acc = st.val_acc;
      result.best_val_loss = st.val_loss;
      best_snap = snapshot_values(tuned, no_buffers);
    }
  }
  restore_values(tuned, no_buffers, best_snap);

  TransferResult out;
  out.training = std::move(result);
  out.test_report = evaluate(model, data, out.training.split.test, cfg.threads);
  out.model = std::move(model);
  return out;
}

} // namespace devid
