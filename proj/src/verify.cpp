#include "devid/verify.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <unistd.h>

#include "devid/checkpoint.hpp"
#include "devid/featkit.hpp"
#include "devid/metrics.hpp"
#include "devid/model.hpp"
#include "devid/synth.hpp"
#include "devid/train.hpp"

namespace devid {

namespace {

constexpr double kPi = 3.14159265358979323846;

double grad_threshold() { return kReal64 ? 1e-6 : 1e-3; }
double grad_eps() { return kReal64 ? 1e-5 : 1e-3; }

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (real& v : t.value()) v = real(rng.uniform(-scale, scale));
  return t;
}

// finite_diff_check_params with an optional deliberate corruption of the
// largest analytic gradient component (bug-injection fixture).
double gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                 bool inject_bug) {
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(loss_fn());
  }
  std::vector<std::vector<real>> analytic;
  for (Tensor& p : params) analytic.push_back(p.grad());

  if (inject_bug && !analytic.empty()) {
    std::size_t bp = 0, bi = 0;
    double best = -1;
    for (std::size_t pi = 0; pi < analytic.size(); ++pi)
      for (std::size_t i = 0; i < analytic[pi].size(); ++i)
        if (std::abs(double(analytic[pi][i])) > best) {
          best = std::abs(double(analytic[pi][i]));
          bp = pi;
          bi = i;
        }
    analytic[bp][bi] += real(1);
  }

  const double eps = grad_eps();
  double worst = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const real saved = p.value()[i];
      p.value()[i] = saved + real(eps);
      const double fp = double(loss_fn().item());
      p.value()[i] = saved - real(eps);
      const double fm = double(loss_fn().item());
      p.value()[i] = saved;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = double(analytic[pi][i]);
      worst = std::max(worst,
                       std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

CheckResult grad_result(const std::string& name, double measured) {
  CheckResult r;
  r.name = "grad/" + name;
  r.measured = measured;
  r.threshold = grad_threshold();
  r.pass = measured < r.threshold;
  return r;
}

CheckResult bounded(const std::string& name, double measured, double threshold,
                    std::string note = "") {
  CheckResult r;
  r.name = name;
  r.measured = measured;
  r.threshold = threshold;
  r.pass = measured <= threshold;
  r.note = std::move(note);
  return r;
}

// ---- gradient checks --------------------------------------------------------

void gradient_checks(std::vector<CheckResult>& out, const std::string& inject) {
  Rng rng(2024);

  {
    Rng lr(11);
    Dense dense = Dense::init(5, 3, Dense::Act::relu, lr);
    Tensor x = random_tensor({5}, rng);
    auto loss = [&]() { return sum(dense.forward(x)); };
    out.push_back(grad_result(
        "dense", gradcheck(loss, {dense.w, dense.b, x}, inject == "dense")));
  }
  {
    BatchNorm1d bn = BatchNorm1d::init(3);
    Tensor x = random_tensor({4, 5, 3}, rng, 2.0);
    // mean keeps the loss O(1); a large sum drowns float central differences
    auto loss = [&]() {
      Tensor y = batch_norm(x, bn.scale, bn.shift, nullptr, nullptr, bn.momentum, bn.eps,
                            true);
      return mean(hadamard(y, y));
    };
    out.push_back(grad_result(
        "batchnorm", gradcheck(loss, {bn.scale, bn.shift, x}, inject == "batchnorm")));
  }
  {
    Rng lr(12);
    ConvLstm1d cl = ConvLstm1d::init(5, 1, 2, 3, 1, lr);
    Tensor x = random_tensor({5, 1}, rng);
    Tensor h0({cl.out_len, 2}), c0({cl.out_len, 2});
    for (real& v : h0.value()) v = real(rng.uniform(-0.5, 0.5));
    for (real& v : c0.value()) v = real(rng.uniform(-0.5, 0.5));
    auto loss = [&]() {
      auto [h, c] = cl.step(x, h0, c0);
      return add(sum(h), sum(c));
    };
    out.push_back(grad_result(
        "convlstm_step",
        gradcheck(loss, {cl.wx, cl.wh, cl.bias, cl.peep_i, cl.peep_f, cl.peep_o, x, h0, c0},
                  inject == "convlstm_step")));
  }
  {
    Rng lr(13);
    ConvLstm1d cl = ConvLstm1d::init(5, 1, 2, 3, 2, lr);
    Tensor seq = random_tensor({3, 5, 1}, rng);
    auto loss = [&]() { return sum(cl.forward(seq)); };
    out.push_back(grad_result(
        "convlstm_forward",
        gradcheck(loss, {cl.wx, cl.wh, cl.bias, cl.peep_i, cl.peep_f, cl.peep_o, seq},
                  inject == "convlstm_forward")));
  }
  {
    Rng lr(14);
    Lstm lstm = Lstm::init(3, 4, lr);
    Tensor seq = random_tensor({3, 3}, rng);
    auto loss = [&]() { return sum(lstm.last_hidden(seq, false)); };
    out.push_back(grad_result(
        "lstm", gradcheck(loss, {lstm.wx, lstm.wh, lstm.bias, seq}, inject == "lstm")));
  }
  {
    Rng lr(15);
    BiLstm bi = BiLstm::init(3, 4, lr);
    Tensor seq = random_tensor({3, 3}, rng);
    auto loss = [&]() { return sum(bi.forward(seq)); };
    out.push_back(grad_result(
        "bilstm",
        gradcheck(loss,
                  {bi.fwd.wx, bi.fwd.wh, bi.fwd.bias, bi.bwd.wx, bi.bwd.wh, bi.bwd.bias, seq},
                  inject == "bilstm")));
  }
  {
    Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng),
           v = random_tensor({3, 4}, rng);
    auto loss = [&]() {
      Tensor a = attention(q, k, v);
      return sum(hadamard(a, a));
    };
    out.push_back(grad_result("attention", gradcheck(loss, {q, k, v}, inject == "attention")));
  }
  {
    Rng lr(16);
    MultiHeadAttention mha = MultiHeadAttention::init(6, 2, 3, lr);
    Tensor x = random_tensor({4, 6}, rng);
    std::vector<Tensor> params = {x, mha.wo};
    for (int h = 0; h < 2; ++h) {
      params.push_back(mha.wq[std::size_t(h)]);
      params.push_back(mha.wk[std::size_t(h)]);
      params.push_back(mha.wv[std::size_t(h)]);
    }
    auto loss = [&]() {
      Tensor y = mha.forward(x);
      return mean(hadamard(y, y));
    };
    out.push_back(grad_result(
        "multi_head_attention", gradcheck(loss, params, inject == "multi_head_attention")));
  }
  {
    LayerNorm ln = LayerNorm::init(6);
    Tensor x = random_tensor({6}, rng, 2.0);
    auto loss = [&]() {
      Tensor y = ln.forward(x);
      return mean(hadamard(y, y));
    };
    out.push_back(grad_result(
        "layer_norm", gradcheck(loss, {ln.gain, ln.bias, x}, inject == "layer_norm")));
  }
  {
    Rng lr(17);
    EncoderBlock enc = EncoderBlock::init(4, 6, 2, 3, 8, lr);
    Tensor x = random_tensor({4, 6}, rng);
    std::vector<Tensor> params = {x, enc.ff1.w, enc.ff1.b, enc.ff2.w, enc.ff2.b,
                                  enc.ln1.gain, enc.ln1.bias, enc.ln2.gain, enc.ln2.bias,
                                  enc.attn.wo};
    auto loss = [&]() {
      Tensor y = enc.forward(x);
      return mean(hadamard(y, y));
    };
    out.push_back(
        grad_result("encoder_block", gradcheck(loss, params, inject == "encoder_block")));
  }
  {
    Tensor logits = random_tensor({7}, rng, 3.0);
    auto loss = [&]() { return cross_entropy(softmax(logits), 2); };
    out.push_back(grad_result("softmax_cross_entropy",
                              gradcheck(loss, {logits}, inject == "softmax_cross_entropy")));
  }
}

// ---- formula oracles -----------------------------------------------------------

void oracle_checks(std::vector<CheckResult>& out) {
  Rng rng(77);
  const double tol = 1e-5;

  { // FFT power spectrum vs naive DFT
    double worst = 0;
    for (int c = 0; c < 20; ++c) {
      const int n = 64;
      std::vector<double> frame(n);
      for (double& v : frame) v = rng.uniform(-1, 1);
      const auto fast = power_spectrum(frame, n);
      for (int k = 0; k <= n / 2; ++k) {
        double re = 0, im = 0;
        for (int i = 0; i < n; ++i) {
          re += frame[std::size_t(i)] * std::cos(2 * kPi * k * i / n);
          im -= frame[std::size_t(i)] * std::sin(2 * kPi * k * i / n);
        }
        const double naive = re * re + im * im;
        worst = std::max(worst, std::abs(fast[std::size_t(k)] - naive) /
                                    std::max(1.0, std::abs(naive)));
      }
    }
    out.push_back(bounded("oracle/dft_power", worst, tol));
  }
  { // orthonormal DCT-II vs direct evaluation
    double worst = 0;
    for (int c = 0; c < 20; ++c) {
      std::vector<double> x(34);
      for (double& v : x) v = rng.uniform(-5, 5);
      const auto got = mfcc_dct(x, 12);
      for (int k = 1; k <= 12; ++k) {
        double acc = 0;
        for (int i = 0; i < 34; ++i)
          acc += x[std::size_t(i)] * std::cos(kPi * k * (2 * i + 1) / (2.0 * 34));
        const double naive = std::sqrt(2.0 / 34) * acc;
        worst = std::max(worst, std::abs(got[std::size_t(k) - 1] - naive));
      }
    }
    out.push_back(bounded("oracle/dct", worst, tol));
  }
  { // delta regression formula
    double worst = 0;
    for (int c = 0; c < 20; ++c) {
      const int frames = 9, d = 3;
      std::vector<std::vector<double>> seq(frames, std::vector<double>(d));
      for (auto& row : seq)
        for (double& v : row) v = rng.uniform(-2, 2);
      const auto got = delta(seq, 1);
      auto cl = [&](int t) { return std::clamp(t, 0, frames - 1); };
      for (int t = 0; t < frames; ++t)
        for (int j = 0; j < d; ++j) {
          const double naive = (1 * (seq[std::size_t(cl(t + 1))][std::size_t(j)] -
                                     seq[std::size_t(cl(t - 1))][std::size_t(j)]) +
                                2 * (seq[std::size_t(cl(t + 2))][std::size_t(j)] -
                                     seq[std::size_t(cl(t - 2))][std::size_t(j)])) /
                               10.0;
          worst = std::max(worst, std::abs(got[std::size_t(t)][std::size_t(j)] - naive));
        }
    }
    out.push_back(bounded("oracle/delta", worst, tol));
  }
  { // softmax vs direct formula
    double worst = 0;
    for (int c = 0; c < 20; ++c) {
      Tensor logits({9});
      for (real& v : logits.value()) v = real(rng.uniform(-4, 4));
      Tensor p = softmax(logits);
      double denom = 0;
      for (real v : logits.value()) denom += std::exp(double(v));
      for (int i = 0; i < 9; ++i) {
        const double naive = std::exp(double(logits.value()[std::size_t(i)])) / denom;
        worst = std::max(worst, std::abs(double(p.value()[std::size_t(i)]) - naive));
      }
    }
    out.push_back(bounded("oracle/softmax", worst, tol));
  }
  { // layer norm vs direct evaluation
    double worst = 0;
    for (int c = 0; c < 20; ++c) {
      const int h = 11;
      Tensor x({h}), g({h}), b({h});
      for (real& v : x.value()) v = real(rng.uniform(-3, 3));
      for (real& v : g.value()) v = real(rng.uniform(0.5, 1.5));
      for (real& v : b.value()) v = real(rng.uniform(-1, 1));
      Tensor y = layer_norm(x, g, b, real(1e-6));
      double mu = 0;
      for (real v : x.value()) mu += double(v);
      mu /= h;
      double var = 0;
      for (real v : x.value()) var += (double(v) - mu) * (double(v) - mu);
      var /= h;
      const double sigma = std::sqrt(var + 1e-6);
      for (int i = 0; i < h; ++i) {
        const double naive = double(g.value()[std::size_t(i)]) *
                                 (double(x.value()[std::size_t(i)]) - mu) / sigma +
                             double(b.value()[std::size_t(i)]);
        worst = std::max(worst, std::abs(double(y.value()[std::size_t(i)]) - naive));
      }
    }
    out.push_back(bounded("oracle/layer_norm", worst, tol));
  }
  { // attention vs brute force
    double worst = 0;
    for (int c = 0; c < 10; ++c) {
      const int t = 3, dk = 4;
      Tensor q({t, dk}), k({t, dk}), v({t, dk});
      for (Tensor* m : {&q, &k, &v})
        for (real& x : m->value()) x = real(rng.uniform(-2, 2));
      Tensor got = attention(q, k, v);
      for (int i = 0; i < t; ++i) {
        std::vector<double> scores(t);
        for (int j = 0; j < t; ++j) {
          double dot = 0;
          for (int d = 0; d < dk; ++d)
            dot += double(q.value()[std::size_t(i) * dk + d]) *
                   double(k.value()[std::size_t(j) * dk + d]);
          scores[std::size_t(j)] = dot / std::sqrt(double(dk));
        }
        double denom = 0;
        for (double s : scores) denom += std::exp(s);
        for (int d = 0; d < dk; ++d) {
          double acc = 0;
          for (int j = 0; j < t; ++j)
            acc += std::exp(scores[std::size_t(j)]) / denom *
                   double(v.value()[std::size_t(j) * dk + d]);
          worst = std::max(worst,
                           std::abs(double(got.value()[std::size_t(i) * dk + d]) - acc));
        }
      }
    }
    out.push_back(bounded("oracle/attention", worst, tol));
  }
  { // Adam update vs direct recurrence
    double worst = 0;
    const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<real> w = {real(0.5), real(-0.25)}, m(2, real(0)), v(2, real(0));
    std::vector<double> wd = {0.5, -0.25}, md(2, 0), vd(2, 0);
    for (long t = 1; t <= 10; ++t) {
      std::vector<real> g(2);
      for (std::size_t i = 0; i < 2; ++i) g[i] = real(rng.uniform(-1, 1));
      adam_update(w, g, m, v, t, lr, b1, b2, eps);
      for (std::size_t i = 0; i < 2; ++i) {
        md[i] = b1 * md[i] + (1 - b1) * double(g[i]);
        vd[i] = b2 * vd[i] + (1 - b2) * double(g[i]) * double(g[i]);
        const double mh = md[i] / (1 - std::pow(b1, double(t)));
        const double vh = vd[i] / (1 - std::pow(b2, double(t)));
        wd[i] -= lr * mh / (std::sqrt(vh) + eps);
        worst = std::max(worst, std::abs(double(w[i]) - wd[i]));
      }
    }
    out.push_back(bounded("oracle/adam", worst, tol));
  }
  { // metrics vs counting oracle
    double worst = 0;
    for (int c = 0; c < 50; ++c) {
      const int n = 4;
      std::vector<std::vector<long>> cm(n, std::vector<long>(n));
      for (auto& row : cm)
        for (long& v : row) v = rng.uniform_int(0, 20);
      MetricsReport r = metrics_from_confusion(cm);
      long total = 0, correct = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          total += cm[std::size_t(i)][std::size_t(j)];
          if (i == j) correct += cm[std::size_t(i)][std::size_t(j)];
        }
      const double acc = total ? double(correct) / total : 0.0;
      worst = std::max(worst, std::abs(r.accuracy - acc));
      for (int i = 0; i < n; ++i) {
        long tp = cm[std::size_t(i)][std::size_t(i)], row = 0, col = 0;
        for (int j = 0; j < n; ++j) {
          row += cm[std::size_t(i)][std::size_t(j)];
          col += cm[std::size_t(j)][std::size_t(i)];
        }
        if (col > 0)
          worst = std::max(worst, std::abs(r.per_class[std::size_t(i)].precision -
                                           double(tp) / double(col)));
        if (row > 0)
          worst = std::max(worst, std::abs(r.per_class[std::size_t(i)].recall -
                                           double(tp) / double(row)));
      }
    }
    out.push_back(bounded("oracle/metrics", worst, 0.0, "exact counting equality"));
  }
  { // the reported headline case: 23 errors among 5760 -> 99.6%
    std::vector<std::vector<long>> cm(45, std::vector<long>(45, 0));
    for (int i = 0; i < 45; ++i) cm[std::size_t(i)][std::size_t(i)] = 128;
    for (int e = 0; e < 23; ++e) {
      const int c = e % 45;
      cm[std::size_t(c)][std::size_t(c)] -= 1;
      cm[std::size_t(c)][std::size_t((c + 1) % 45)] += 1;
    }
    MetricsReport r = metrics_from_confusion(cm);
    const double rounded = std::round(r.accuracy * 1000.0) / 10.0;
    out.push_back(bounded("oracle/acc_5760_23", std::abs(rounded - 99.6), 1e-12,
                          "accuracy rounds to 99.6%"));
  }
}

// ---- shape traces -----------------------------------------------------------------

void shape_checks(std::vector<CheckResult>& out) {
  Rng rng(5);
  {
    ModelConfig cfg; // full model, 45 classes
    DeviceIdModel model = DeviceIdModel::build(cfg, 42);
    Tensor x = random_tensor({128, 73}, rng);
    ShapeTrace trace;
    Tensor logits = model.forward(x, false, &trace);
    const std::vector<std::vector<int>> expect = {
        {128, 73}, {128, 24, 64}, {128, 11, 32}, {128, 352}, {256}, {256, 1},
        {256, 1},  {128},         {45}};
    const bool ok = trace.shapes == expect && logits.dim(0) == 45;
    out.push_back(bounded("shape/full_trace", ok ? 0.0 : 1.0, 0.0,
                          ok ? "trace matches" : "trace mismatch"));
  }
  {
    bool all_ok = true;
    std::string note;
    for (int g = 1; g <= 7; ++g) {
      ModelConfig cfg = ablation_config(g);
      cfg.n_classes = 45;
      DeviceIdModel model = DeviceIdModel::build(cfg, 42);
      Tensor x = random_tensor({128, 73}, rng);
      Tensor logits = model.forward(x, false);
      bool finite = logits.dim(0) == 45;
      for (real v : logits.value())
        if (!std::isfinite(double(v))) finite = false;
      if (!finite) {
        all_ok = false;
        note = "group " + std::to_string(g) + " failed";
      }
    }
    out.push_back(bounded("shape/ablation_groups", all_ok ? 0.0 : 1.0, 0.0, note));
  }
}

// ---- persistence round-trips ----------------------------------------------------

void roundtrip_checks(std::vector<CheckResult>& out) {
  namespace fs = std::filesystem;
  const fs::path tmp = fs::temp_directory_path() /
                       ("devid_verify_" + std::to_string(::getpid()));
  fs::create_directories(tmp);
  Rng rng(9);

  {
    FeatureSet set;
    set.frames = 4;
    set.dims = 3;
    for (int s = 0; s < 5; ++s) {
      std::vector<real> m(12);
      for (real& v : m) v = real(rng.uniform(-10, 10));
      set.samples.push_back(m);
      set.labels.push_back(s % 2 ? s : -1);
    }
    const std::string p = (tmp / "t.ttf").string();
    write_ttf(p, set);
    FeatureSet back = read_ttf(p);
    write_ttf(p + "2", back);
    std::ifstream a(p, std::ios::binary), b(p + "2", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    bool ok = sa == sb && back.labels == set.labels;
    if (!kReal64) ok = ok && back.samples == set.samples; // f32 values survive bitwise
    out.push_back(bounded("roundtrip/ttf1", ok ? 0.0 : 1.0, 0.0));
  }
  {
    ModelConfig cfg;
    cfg.n_classes = 5;
    DeviceIdModel model = DeviceIdModel::build(cfg, 3);
    Tensor x = random_tensor({128, 73}, rng);
    Tensor before = model.forward(x, false);
    const std::string p = (tmp / "m.ckpt").string();
    save_checkpoint(model, p);
    DeviceIdModel loaded = load_checkpoint(p);
    Tensor after = loaded.forward(x, false);
    bool ok = before.value().size() == after.value().size();
    double worst = 0;
    for (std::size_t i = 0; ok && i < before.value().size(); ++i)
      worst = std::max(worst,
                       std::abs(double(before.value()[i]) - double(after.value()[i])));
    if (kReal64) {
      ok = ok && worst < 1e-5; // blob stores 32-bit values
      out.push_back(bounded("roundtrip/checkpoint", ok ? worst : 1.0, 1e-5,
                            "f32 blob in f64 build"));
    } else {
      ok = ok && worst == 0.0;
      out.push_back(bounded("roundtrip/checkpoint", ok ? 0.0 : 1.0, 0.0, "bit-exact"));
    }
  }
  {
    AudioClip clip = synth_source(8000, 0.25, 123);
    const std::string p = (tmp / "a.wav").string();
    save_wav_pcm16(p, clip);
    AudioClip back = load_wav(p);
    save_wav_pcm16(p + "2", back);
    std::ifstream a(p, std::ios::binary), b(p + "2", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    const bool ok = sa == sb && back.samples.size() == clip.samples.size();
    out.push_back(bounded("roundtrip/wav_pcm16", ok ? 0.0 : 1.0, 0.0));
  }
  std::error_code ec;
  fs::remove_all(tmp, ec);
}

} // namespace

std::vector<CheckResult> run_verification(const std::string& inject_bug_layer) {
  std::vector<CheckResult> results;
  gradient_checks(results, inject_bug_layer);
  oracle_checks(results);
  shape_checks(results);
  roundtrip_checks(results);
  return results;
}

bool all_pass(const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results)
    if (!r.pass) return false;
  return true;
}

std::string format_report(const std::vector<CheckResult>& results) {
  std::string out;
  char line[256];
  for (const CheckResult& r : results) {
    std::snprintf(line, sizeof(line), "%-28s %-4s measured %.3e  threshold %.3e  %s\n",
                  r.name.c_str(), r.pass ? "ok" : "FAIL", r.measured, r.threshold,
                  r.note.c_str());
    out += line;
  }
  return out;
}

} // namespace devid
