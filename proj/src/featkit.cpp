#include "devid/featkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace devid {

namespace {

constexpr double kLogFloor = 1e-10;
constexpr double kPi = 3.14159265358979323846;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 FFT, in-place on interleaved re/im pairs.
void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  const std::size_t n = re.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / double(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const double ur = re[i + k], ui = im[i + k];
        const double vr = re[i + k + len / 2] * cr - im[i + k + len / 2] * ci;
        const double vi = re[i + k + len / 2] * ci + im[i + k + len / 2] * cr;
        re[i + k] = ur + vr;
        im[i + k] = ui + vi;
        re[i + k + len / 2] = ur - vr;
        im[i + k + len / 2] = ui - vi;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

} // namespace

void FrameSpec::validate() const {
  if (frame_len < 1) throw ConfigError("frame_len must be positive");
  if (!is_pow2(fft_size)) throw ConfigError("fft_size must be a power of two");
  if (fft_size < frame_len) throw ConfigError("fft_size must be >= frame_len");
  if (n_mel < 1 || n_mfcc < 1 || n_mfcc > n_mel)
    throw ConfigError("bad filterbank sizes");
  if (target_frames < 1) throw ConfigError("target_frames must be positive");
  if (pre_emphasis_alpha < 0.0 || pre_emphasis_alpha >= 1.0)
    throw ConfigError("pre_emphasis_alpha must be in [0,1)");
  if (window != "hamming" && window != "rect")
    throw ConfigError("unknown window '" + window + "'");
}

std::vector<double> pre_emphasis(const std::vector<double>& x, double alpha) {
  std::vector<double> y(x.size());
  if (x.empty()) return y;
  y[0] = x[0];
  for (std::size_t n = 1; n < x.size(); ++n) y[n] = x[n] - alpha * x[n - 1];
  return y;
}

std::vector<double> window_coefficients(const std::string& window, int n) {
  std::vector<double> w(std::size_t(n), 1.0);
  if (window == "hamming" && n > 1)
    for (int i = 0; i < n; ++i)
      w[std::size_t(i)] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (n - 1));
  return w;
}

std::vector<std::vector<double>> frame_and_window(const std::vector<double>& y,
                                                  const FrameSpec& spec) {
  if (y.size() < std::size_t(spec.frame_len))
    throw TooShortError("signal shorter than one frame (" + std::to_string(y.size()) +
                        " < " + std::to_string(spec.frame_len) + ")");
  const long hop = spec.target_frames > 1
                       ? long(y.size() - std::size_t(spec.frame_len)) / (spec.target_frames - 1)
                       : 0;
  const std::vector<double> w = window_coefficients(spec.window, spec.frame_len);
  std::vector<std::vector<double>> frames(std::size_t(spec.target_frames));
  for (int i = 0; i < spec.target_frames; ++i) {
    const std::size_t start = std::size_t(i) * std::size_t(hop);
    auto& f = frames[std::size_t(i)];
    f.resize(std::size_t(spec.frame_len));
    for (int n = 0; n < spec.frame_len; ++n)
      f[std::size_t(n)] = y[start + std::size_t(n)] * w[std::size_t(n)];
  }
  return frames;
}

std::vector<double> power_spectrum(const std::vector<double>& frame, int fft_size) {
  if (!is_pow2(fft_size)) throw ConfigError("fft_size must be a power of two");
  if (frame.size() > std::size_t(fft_size))
    throw ConfigError("frame longer than fft_size");
  std::vector<double> re(std::size_t(fft_size), 0.0), im(std::size_t(fft_size), 0.0);
  std::copy(frame.begin(), frame.end(), re.begin());
  fft_radix2(re, im);
  std::vector<double> power(std::size_t(fft_size / 2 + 1));
  for (std::size_t k = 0; k < power.size(); ++k)
    power[k] = re[k] * re[k] + im[k] * im[k];
  return power;
}

double log_energy(const std::vector<double>& frame) {
  double acc = 0;
  for (double v : frame) acc += v * v;
  return std::log(std::max(acc, kLogFloor));
}

MelFilterbank MelFilterbank::build(const FrameSpec& spec, int sample_rate) {
  if (sample_rate <= 0) throw ConfigError("mel filterbank: bad sample rate");
  const int n_bins = spec.fft_size / 2 + 1;
  const double mel_max = hz_to_mel(sample_rate / 2.0);

  // n_mel + 2 points uniform on the Mel scale, snapped to bin indices
  std::vector<int> bins(std::size_t(spec.n_mel) + 2);
  for (int m = 0; m < spec.n_mel + 2; ++m) {
    const double hz = mel_to_hz(mel_max * m / (spec.n_mel + 1));
    bins[std::size_t(m)] = int(std::floor(hz / (sample_rate / 2.0) * (n_bins - 1) + 0.5));
  }
  for (int m = 1; m < spec.n_mel + 2; ++m)
    if (bins[std::size_t(m)] <= bins[std::size_t(m) - 1])
      throw ConfigError("mel filterbank: filter " + std::to_string(m) +
                        " has zero support; reduce n_mel or raise fft_size");

  MelFilterbank fb;
  fb.n_mel = spec.n_mel;
  fb.n_bins = n_bins;
  fb.weights.assign(std::size_t(spec.n_mel), std::vector<double>(std::size_t(n_bins), 0.0));
  for (int m = 1; m <= spec.n_mel; ++m) {
    const int lo = bins[std::size_t(m) - 1], mid = bins[std::size_t(m)],
              hi = bins[std::size_t(m) + 1];
    auto& row = fb.weights[std::size_t(m) - 1];
    for (int k = lo; k <= mid; ++k) row[std::size_t(k)] = double(k - lo) / double(mid - lo);
    for (int k = mid; k <= hi; ++k) row[std::size_t(k)] = double(hi - k) / double(hi - mid);
  }
  return fb;
}

std::vector<double> MelFilterbank::apply(const std::vector<double>& power) const {
  if (power.size() != std::size_t(n_bins))
    throw ShapeError("mel filterbank: spectrum length mismatch");
  std::vector<double> out(static_cast<std::size_t>(n_mel));
  for (int m = 0; m < n_mel; ++m) {
    double acc = 0;
    const auto& row = weights[std::size_t(m)];
    for (std::size_t k = 0; k < power.size(); ++k) acc += row[k] * power[k];
    out[std::size_t(m)] = acc;
  }
  return out;
}

std::vector<double> mel_filterbank(const std::vector<double>& power,
                                   const FrameSpec& spec, int sample_rate) {
  return MelFilterbank::build(spec, sample_rate).apply(power);
}

std::vector<double> mfcc_dct(const std::vector<double>& log_fbank, int n_mfcc) {
  const int n = int(log_fbank.size());
  if (n_mfcc >= n) throw ConfigError("mfcc_dct: n_mfcc must be < input length");
  std::vector<double> out(static_cast<std::size_t>(n_mfcc));
  const double norm = std::sqrt(2.0 / n);
  for (int k = 1; k <= n_mfcc; ++k) {
    double acc = 0;
    for (int i = 0; i < n; ++i)
      acc += log_fbank[std::size_t(i)] * std::cos(kPi * k * (2 * i + 1) / (2.0 * n));
    out[std::size_t(k) - 1] = norm * acc;
  }
  return out;
}

std::vector<std::vector<double>> delta(const std::vector<std::vector<double>>& seq,
                                       int order) {
  if (order != 1 && order != 2) throw ConfigError("delta: order must be 1 or 2");
  if (seq.empty()) return {};
  const int frames = int(seq.size());
  const int d = int(seq[0].size());
  constexpr int kHalf = 2;
  constexpr double kDenom = 2.0 * (1 * 1 + 2 * 2); // 2 * sum n^2

  auto once = [&](const std::vector<std::vector<double>>& in) {
    std::vector<std::vector<double>> out(std::size_t(frames),
                                         std::vector<double>(std::size_t(d), 0.0));
    auto clamp_frame = [&](int t) { return std::clamp(t, 0, frames - 1); };
    for (int t = 0; t < frames; ++t)
      for (int c = 0; c < d; ++c) {
        double acc = 0;
        for (int n = 1; n <= kHalf; ++n)
          acc += n * (in[std::size_t(clamp_frame(t + n))][std::size_t(c)] -
                      in[std::size_t(clamp_frame(t - n))][std::size_t(c)]);
        out[std::size_t(t)][std::size_t(c)] = acc / kDenom;
      }
    return out;
  };

  auto result = once(seq);
  if (order == 2) result = once(result);
  return result;
}

TandemFeature extract_tandem(const AudioClip& clip, const FrameSpec& spec) {
  spec.validate();
  if (clip.sample_rate <= 0) throw ConfigError("extract_tandem: bad sample rate");

  std::vector<double> x(clip.samples.begin(), clip.samples.end());
  const std::vector<double> y = pre_emphasis(x, spec.pre_emphasis_alpha);
  const auto frames = frame_and_window(y, spec);
  const MelFilterbank fb = MelFilterbank::build(spec, clip.sample_rate);

  const int t_n = spec.target_frames;
  // per-frame [mfcc | logE], the 13-dim base the deltas regress over
  std::vector<std::vector<double>> base(static_cast<std::size_t>(t_n));
  std::vector<std::vector<double>> log_mel(static_cast<std::size_t>(t_n));
  for (int t = 0; t < t_n; ++t) {
    const auto& frame = frames[std::size_t(t)];
    const double loge = log_energy(frame);
    const auto power = power_spectrum(frame, spec.fft_size);
    auto mel = fb.apply(power);
    for (double& v : mel) v = std::log(std::max(v, kLogFloor));
    const auto mfcc = mfcc_dct(mel, spec.n_mfcc);
    base[std::size_t(t)] = mfcc;
    base[std::size_t(t)].push_back(loge);
    log_mel[std::size_t(t)] = std::move(mel);
  }

  const auto d1 = delta(base, 1);
  const auto d2 = delta(base, 2);

  TandemFeature feat;
  feat.frames = t_n;
  feat.dims = spec.feature_dims();
  feat.label = clip.label;
  feat.matrix.resize(std::size_t(t_n) * std::size_t(feat.dims));
  const int n_base = spec.n_mfcc + 1;
  for (int t = 0; t < t_n; ++t) {
    real* row = feat.matrix.data() + std::size_t(t) * feat.dims;
    int col = 0;
    for (int i = 0; i < spec.n_mfcc; ++i) row[col++] = real(base[std::size_t(t)][std::size_t(i)]);
    row[col++] = real(base[std::size_t(t)][std::size_t(spec.n_mfcc)]); // logE
    for (int i = 0; i < n_base; ++i) row[col++] = real(d1[std::size_t(t)][std::size_t(i)]);
    for (int i = 0; i < n_base; ++i) row[col++] = real(d2[std::size_t(t)][std::size_t(i)]);
    for (int i = 0; i < spec.n_mel; ++i) row[col++] = real(log_mel[std::size_t(t)][std::size_t(i)]);
  }
  return feat;
}

// ---- TTF1 ------------------------------------------------------------------

namespace {

void wr_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                        (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t rd_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw CorruptionError("ttf: truncated header");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

constexpr std::uint32_t kUnlabeled = 0xFFFFFFFFu;

} // namespace

int FeatureSet::n_classes() const {
  int top = -1;
  for (int l : labels) top = std::max(top, l);
  return top + 1;
}

void write_ttf(const std::string& path, const FeatureSet& set) {
  if (set.samples.size() != set.labels.size())
    throw ConfigError("ttf: label count must match sample count");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  os.write("TTF1", 4);
  wr_u32le(os, std::uint32_t(set.samples.size()));
  wr_u32le(os, std::uint32_t(set.frames));
  wr_u32le(os, std::uint32_t(set.dims));
  for (int l : set.labels) wr_u32le(os, l < 0 ? kUnlabeled : std::uint32_t(l));
  const std::size_t per = std::size_t(set.frames) * std::size_t(set.dims);
  for (const auto& s : set.samples) {
    if (s.size() != per) throw ConfigError("ttf: sample size mismatch");
    for (real v : s) {
      const float f = float(v);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      wr_u32le(os, u);
    }
  }
  if (!os) throw FormatError("write failed: " + path);
}

FeatureSet read_ttf(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TTF1", 4) != 0)
    throw FormatError(path + ": not a TTF1 file");
  FeatureSet set;
  const std::uint32_t n_samples = rd_u32le(is);
  set.frames = int(rd_u32le(is));
  set.dims = int(rd_u32le(is));

  is.seekg(0, std::ios::end);
  const std::size_t total = std::size_t(is.tellg());
  is.seekg(16);
  const std::size_t per = std::size_t(set.frames) * std::size_t(set.dims);
  const std::size_t body = std::size_t(n_samples) * per * 4;
  bool has_labels;
  if (total == 16 + std::size_t(n_samples) * 4 + body)
    has_labels = true;
  else if (total == 16 + body)
    has_labels = false;
  else
    throw CorruptionError(path + ": size inconsistent with header counts");

  set.labels.assign(n_samples, -1);
  if (has_labels)
    for (std::uint32_t i = 0; i < n_samples; ++i) {
      const std::uint32_t l = rd_u32le(is);
      set.labels[i] = (l == kUnlabeled) ? -1 : int(l);
    }

  set.samples.resize(n_samples);
  std::vector<unsigned char> raw(per * 4);
  for (std::uint32_t i = 0; i < n_samples; ++i) {
    is.read(reinterpret_cast<char*>(raw.data()), long(per * 4));
    if (!is) throw CorruptionError(path + ": truncated sample data");
    auto& s = set.samples[i];
    s.resize(per);
    for (std::size_t j = 0; j < per; ++j) {
      const std::uint32_t u = std::uint32_t(raw[4 * j]) | std::uint32_t(raw[4 * j + 1]) << 8 |
                              std::uint32_t(raw[4 * j + 2]) << 16 |
                              std::uint32_t(raw[4 * j + 3]) << 24;
      float f;
      std::memcpy(&f, &u, 4);
      s[j] = real(f);
    }
  }
  return set;
}

} // namespace devid
