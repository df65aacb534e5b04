#pragma once

#include <string>
#include <vector>

#include "devid/audio.hpp"
#include "devid/common.hpp"

namespace devid {

// Framing and filterbank configuration. The defaults reproduce the feature
// layout used throughout this project: 128 frames x 73 dims per clip, the
// 73 being [12 MFCC | 1 logE | 13 delta | 13 delta-delta | 34 log-Mel].
struct FrameSpec {
  int frame_len = 1024;
  int fft_size = 1024;
  int n_mel = 34;
  int n_mfcc = 12;
  int target_frames = 128;
  double pre_emphasis_alpha = 0.97;
  std::string window = "hamming"; // "hamming" or "rect"

  void validate() const;
  int feature_dims() const { return n_mfcc + 1 + 2 * (n_mfcc + 1) + n_mel; }
};

struct TandemFeature {
  int frames = 0;
  int dims = 0;
  std::vector<real> matrix; // row-major frames x dims
  int label = -1;

  real at(int frame, int dim) const { return matrix[std::size_t(frame) * dims + dim]; }
};

// y(0) = x(0); y(n) = x(n) - alpha * x(n-1).
std::vector<double> pre_emphasis(const std::vector<double>& x, double alpha);

// Exactly target_frames frames of frame_len samples, frame i starting at
// i * hop with hop = floor((len - frame_len) / (target_frames - 1)), each
// multiplied pointwise by the window. Throws TooShortError if the signal
// is shorter than one frame.
std::vector<std::vector<double>> frame_and_window(const std::vector<double>& y,
                                                  const FrameSpec& spec);

std::vector<double> window_coefficients(const std::string& window, int n);

// Squared magnitudes of DFT bins 0..fft_size/2; frame is zero-padded.
std::vector<double> power_spectrum(const std::vector<double>& frame, int fft_size);

// log(max(sum of squares, 1e-10)).
double log_energy(const std::vector<double>& frame);

// Triangular filters spaced uniformly on the Mel scale from 0 Hz to
// sample_rate/2. Each row peaks at weight 1 on its center bin.
struct MelFilterbank {
  int n_mel = 0;
  int n_bins = 0;
  std::vector<std::vector<double>> weights; // n_mel x n_bins

  static MelFilterbank build(const FrameSpec& spec, int sample_rate);
  std::vector<double> apply(const std::vector<double>& power) const;
};

std::vector<double> mel_filterbank(const std::vector<double>& power,
                                   const FrameSpec& spec, int sample_rate);

// Orthonormal DCT-II; returns coefficients 1..n_mfcc (energy coefficient 0
// excluded).
std::vector<double> mfcc_dct(const std::vector<double>& log_fbank, int n_mfcc);

// HTK-style regression delta with half-window N=2 and replicated edges;
// order 2 applies the operator twice.
std::vector<std::vector<double>> delta(const std::vector<std::vector<double>>& seq,
                                       int order);

TandemFeature extract_tandem(const AudioClip& clip, const FrameSpec& spec);

// ---- TTF1 feature file ----------------------------------------------------
// magic "TTF1" | u32le n_samples, n_frames, n_dims | n_samples u32le labels
// (0xFFFFFFFF = unlabeled) | row-major f32le values per sample.

struct FeatureSet {
  int frames = 0;
  int dims = 0;
  std::vector<std::vector<real>> samples;
  std::vector<int> labels; // -1 = unlabeled

  int n_classes() const; // max label + 1, or 0 if all unlabeled
};

void write_ttf(const std::string& path, const FeatureSet& set);
FeatureSet read_ttf(const std::string& path);

} // namespace devid
