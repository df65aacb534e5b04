// Independent brute-force reference implementations used to check the
// library. Everything here is written directly from the defining formulas
// in double precision and shares no code with the implementation under test.
#pragma once

#include <cmath>
#include <vector>

namespace oracles {

constexpr double kPi = 3.14159265358979323846;

inline std::vector<double> dft_power(const std::vector<double>& frame, int fft_size) {
  std::vector<double> out(std::size_t(fft_size / 2 + 1));
  for (int k = 0; k <= fft_size / 2; ++k) {
    double re = 0, im = 0;
    for (std::size_t n = 0; n < frame.size(); ++n) {
      const double ang = 2.0 * kPi * k * double(n) / fft_size;
      re += frame[n] * std::cos(ang);
      im -= frame[n] * std::sin(ang);
    }
    out[std::size_t(k)] = re * re + im * im;
  }
  return out;
}

// Orthonormal DCT-II, coefficients 1..n_keep.
inline std::vector<double> dct2(const std::vector<double>& x, int n_keep) {
  const int n = int(x.size());
  std::vector<double> out(static_cast<std::size_t>(n_keep));
  for (int k = 1; k <= n_keep; ++k) {
    double acc = 0;
    for (int i = 0; i < n; ++i)
      acc += x[std::size_t(i)] * std::cos(kPi * k * (2.0 * i + 1.0) / (2.0 * n));
    out[std::size_t(k) - 1] = std::sqrt(2.0 / n) * acc;
  }
  return out;
}

inline std::vector<std::vector<double>> delta_n2(
    const std::vector<std::vector<double>>& seq) {
  const int frames = int(seq.size());
  const int d = frames ? int(seq[0].size()) : 0;
  auto cl = [&](int t) { return t < 0 ? 0 : (t >= frames ? frames - 1 : t); };
  std::vector<std::vector<double>> out(seq.size(), std::vector<double>(std::size_t(d)));
  for (int t = 0; t < frames; ++t)
    for (int c = 0; c < d; ++c)
      out[std::size_t(t)][std::size_t(c)] =
          (1.0 * (seq[std::size_t(cl(t + 1))][std::size_t(c)] -
                  seq[std::size_t(cl(t - 1))][std::size_t(c)]) +
           2.0 * (seq[std::size_t(cl(t + 2))][std::size_t(c)] -
                  seq[std::size_t(cl(t - 2))][std::size_t(c)])) /
          10.0;
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& g) {
  double denom = 0;
  for (double v : g) denom += std::exp(v);
  std::vector<double> p(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) p[i] = std::exp(g[i]) / denom;
  return p;
}

inline std::vector<double> layer_norm(const std::vector<double>& x,
                                      const std::vector<double>& g,
                                      const std::vector<double>& b, double eps) {
  const double n = double(x.size());
  double mu = 0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  const double sigma = std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = g[i] * (x[i] - mu) / sigma + b[i];
  return out;
}

// softmax(Q K^T / sqrt(dk)) V, row by row
inline std::vector<std::vector<double>> attention(
    const std::vector<std::vector<double>>& q, const std::vector<std::vector<double>>& k,
    const std::vector<std::vector<double>>& v) {
  const std::size_t t = q.size(), dk = q[0].size(), dv = v[0].size();
  std::vector<std::vector<double>> out(t, std::vector<double>(dv, 0.0));
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> scores(k.size());
    for (std::size_t j = 0; j < k.size(); ++j) {
      double dot = 0;
      for (std::size_t d = 0; d < dk; ++d) dot += q[i][d] * k[j][d];
      scores[j] = dot / std::sqrt(double(dk));
    }
    const std::vector<double> w = softmax(scores);
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t d = 0; d < dv; ++d) out[i][d] += w[j] * v[j][d];
  }
  return out;
}

inline std::vector<std::vector<double>> matmul(const std::vector<std::vector<double>>& a,
                                               const std::vector<std::vector<double>>& b) {
  const std::size_t m = a.size(), k = b.size(), n = b[0].size();
  std::vector<std::vector<double>> out(m, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t kk = 0; kk < k; ++kk) out[i][j] += a[i][kk] * b[kk][j];
  return out;
}

// x (L, Cin), w indexed [k][c][f], valid convolution with stride
inline std::vector<std::vector<double>> conv1d_valid(
    const std::vector<std::vector<double>>& x,
    const std::vector<std::vector<std::vector<double>>>& w, int stride) {
  const int L = int(x.size()), cin = int(x[0].size());
  const int k = int(w.size()), f = int(w[0][0].size());
  const int lout = (L - k) / stride + 1;
  std::vector<std::vector<double>> out(std::size_t(lout), std::vector<double>(std::size_t(f), 0.0));
  for (int l = 0; l < lout; ++l)
    for (int ff = 0; ff < f; ++ff)
      for (int kk = 0; kk < k; ++kk)
        for (int c = 0; c < cin; ++c)
          out[std::size_t(l)][std::size_t(ff)] +=
              w[std::size_t(kk)][std::size_t(c)][std::size_t(ff)] *
              x[std::size_t(l * stride + kk)][std::size_t(c)];
  return out;
}

struct AdamTrace {
  std::vector<double> w, m, v;
};

inline void adam_step(AdamTrace& t, const std::vector<double>& g, long step, double lr,
                      double b1, double b2, double eps) {
  for (std::size_t i = 0; i < t.w.size(); ++i) {
    t.m[i] = b1 * t.m[i] + (1 - b1) * g[i];
    t.v[i] = b2 * t.v[i] + (1 - b2) * g[i] * g[i];
    const double mh = t.m[i] / (1 - std::pow(b1, double(step)));
    const double vh = t.v[i] / (1 - std::pow(b2, double(step)));
    t.w[i] -= lr * mh / (std::sqrt(vh) + eps);
  }
}

// Scalar reference of the convolutional LSTM cell equations for one cell
// with one input channel; conv weights collapse to scalars when the kernel
// covers exactly the input.
struct ScalarConvLstmRef {
  double wix, wih, wfx, wfh, wox, woh, wgx, wgh;
  double pic, pfc, poc;
  double bi, bf, bo, bg;

  static double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  // returns (h, c)
  std::pair<double, double> step(double x, double h_prev, double c_prev) const {
    const double i = sig(wix * x + wih * h_prev + pic * c_prev + bi);
    const double f = sig(wfx * x + wfh * h_prev + pfc * c_prev + bf);
    const double g = std::tanh(wgx * x + wgh * h_prev + bg);
    const double c = f * c_prev + i * g;
    const double o = sig(wox * x + woh * h_prev + poc * c + bo);
    return {o * std::tanh(c), c};
  }
};

struct ClassCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

inline std::vector<ClassCounts> count_confusion(const std::vector<std::vector<long>>& cm) {
  const std::size_t n = cm.size();
  long total = 0;
  for (const auto& row : cm)
    for (long v : row) total += v;
  std::vector<ClassCounts> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    long row = 0, col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += cm[c][j];
      col += cm[j][c];
    }
    out[c].tp = cm[c][c];
    out[c].fn = row - cm[c][c];
    out[c].fp = col - cm[c][c];
    out[c].tn = total - row - col + cm[c][c];
  }
  return out;
}

} // namespace oracles
