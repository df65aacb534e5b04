#include "devid/synth.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "devid/errors.hpp"
#include "devid/rng.hpp"

namespace devid {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kResponseBins = 128;

// |H(w)| of the FIR taps on a uniform grid over (0, pi).
std::vector<double> magnitude_response(const std::vector<double>& fir) {
  std::vector<double> mag(kResponseBins);
  for (int k = 0; k < kResponseBins; ++k) {
    const double w = kPi * (k + 0.5) / kResponseBins;
    double re = 0, im = 0;
    for (std::size_t n = 0; n < fir.size(); ++n) {
      re += fir[n] * std::cos(w * double(n));
      im -= fir[n] * std::sin(w * double(n));
    }
    mag[std::size_t(k)] = std::sqrt(re * re + im * im);
  }
  return mag;
}

DeviceProfile draw_profile(int id, Rng& rng) {
  DeviceProfile p;
  p.id = id;
  const int taps = rng.uniform_int(32, 128);
  p.fir.resize(std::size_t(taps));
  p.fir[0] = 1.0;
  for (int i = 1; i < taps; ++i)
    p.fir[std::size_t(i)] = rng.normal() * 0.6 * std::exp(-3.0 * i / double(taps));
  p.gain = rng.uniform(0.5, 1.0);
  p.noise_level = rng.uniform(0.005, 0.02);
  return p;
}

} // namespace

void SynthCorpusSpec::validate() const {
  if (n_devices < 2) throw ConfigError("synth spec: need at least 2 devices");
  if (clips_per_device < 10) throw ConfigError("synth spec: need at least 10 clips per device");
  if (clip_duration_s <= 0) throw ConfigError("synth spec: bad clip duration");
  if (sample_rate <= 0) throw ConfigError("synth spec: bad sample rate");
}

double pairwise_separation_db(const DeviceProfile& a, const DeviceProfile& b) {
  const auto ma = magnitude_response(a.fir);
  const auto mb = magnitude_response(b.fir);
  double best = 0;
  for (int k = 0; k < kResponseBins; ++k) {
    const double da = 20.0 * std::log10(std::max(ma[std::size_t(k)], 1e-9));
    const double db = 20.0 * std::log10(std::max(mb[std::size_t(k)], 1e-9));
    best = std::max(best, std::abs(da - db));
  }
  return best;
}

std::vector<DeviceProfile> make_profiles(int n, std::uint64_t seed,
                                         double min_separation_db) {
  if (n < 2) throw ConfigError("make_profiles: need at least 2 profiles");
  constexpr int kMaxRetries = 64;
  std::vector<DeviceProfile> profiles;
  Rng rng(Rng::derive(seed, 0x70726f66ull));
  for (int id = 0; id < n; ++id) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
      DeviceProfile cand = draw_profile(id, rng);
      placed = true;
      for (const DeviceProfile& other : profiles)
        if (pairwise_separation_db(cand, other) < min_separation_db) {
          placed = false;
          break;
        }
      if (placed) profiles.push_back(std::move(cand));
    }
    if (!placed)
      throw GenerationError("make_profiles: could not satisfy " +
                            std::to_string(min_separation_db) + " dB separation for profile " +
                            std::to_string(id));
  }
  return profiles;
}

AudioClip render(const AudioClip& source, const DeviceProfile& profile,
                 std::uint64_t seed) {
  if (source.samples.empty()) throw EmptyAudioError("render: empty source");
  const std::size_t n = source.samples.size();
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0;
    const std::size_t kmax = std::min(profile.fir.size(), i + 1);
    for (std::size_t k = 0; k < kmax; ++k)
      acc += profile.fir[k] * double(source.samples[i - k]);
    y[i] = profile.gain * acc;
  }

  if (profile.noise_level > 0) {
    double rms = 0;
    for (double v : y) rms += v * v;
    rms = std::sqrt(rms / double(n));
    Rng noise(Rng::derive(seed, 0x6e6f697365ull));
    const double amp = profile.noise_level * rms;
    for (double& v : y) v += amp * noise.normal();
  }

  double peak = 0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  const double scale = peak > 0 ? 0.9 / peak : 1.0;

  AudioClip out;
  out.sample_rate = source.sample_rate;
  out.label = profile.id;
  out.source_id = source.source_id;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.samples[i] = real(y[i] * scale);
  return out;
}

AudioClip synth_source(int sample_rate, double duration_s, std::uint64_t seed) {
  const std::size_t n = std::size_t(std::llround(duration_s * sample_rate));
  if (n == 0) throw ConfigError("synth_source: zero-length signal");
  Rng rng(Rng::derive(seed, 0x737263ull));

  const double f0 = rng.uniform(80.0, 300.0);
  const int harmonics = rng.uniform_int(5, 12);
  const auto nh = static_cast<std::size_t>(harmonics);
  std::vector<double> amp(nh), phase(nh), detune(nh);
  for (int h = 0; h < harmonics; ++h) {
    amp[std::size_t(h)] = rng.uniform(0.7, 1.3) / double(h + 1);
    phase[std::size_t(h)] = rng.uniform(0.0, 2.0 * kPi);
    detune[std::size_t(h)] = rng.uniform(0.998, 1.002);
  }
  const double env_rate = rng.uniform(0.5, 2.0);
  const double env_phase = rng.uniform(0.0, 2.0 * kPi);
  const double noise_amp = 0.03;

  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = double(i) / sample_rate;
    double v = 0;
    for (int h = 0; h < harmonics; ++h)
      v += amp[std::size_t(h)] *
           std::sin(2.0 * kPi * f0 * (h + 1) * detune[std::size_t(h)] * t + phase[std::size_t(h)]);
    const double env = 0.55 + 0.45 * std::sin(2.0 * kPi * env_rate * t + env_phase);
    y[i] = env * v + noise_amp * rng.normal();
  }

  double peak = 0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  const double scale = peak > 0 ? 0.7 / peak : 1.0;

  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) clip.samples[i] = real(y[i] * scale);
  return clip;
}

SynthCorpus build_corpus(const SynthCorpusSpec& spec) {
  spec.validate();
  const std::vector<DeviceProfile> profiles = make_profiles(spec.n_devices, spec.seed);

  std::vector<AudioClip> sources;
  sources.reserve(std::size_t(spec.clips_per_device));
  for (int s = 0; s < spec.clips_per_device; ++s) {
    AudioClip src = synth_source(spec.sample_rate, spec.clip_duration_s,
                                 Rng::derive(spec.seed, 0x1000 + std::uint64_t(s)));
    src.source_id = std::to_string(s);
    sources.push_back(std::move(src));
  }

  SynthCorpus corpus;
  for (int d = 0; d < spec.n_devices; ++d)
    for (int s = 0; s < spec.clips_per_device; ++s) {
      const std::uint64_t rseed =
          Rng::derive(spec.seed, 0x2000 + std::uint64_t(d) * 10007 + std::uint64_t(s));
      corpus.clips.push_back(render(sources[std::size_t(s)], profiles[std::size_t(d)], rseed));
      char name[64];
      std::snprintf(name, sizeof(name), "device%02d_src%03d.wav", d, s);
      corpus.manifest.push_back({name, d, s, rseed});
    }
  return corpus;
}

void write_corpus(const SynthCorpus& corpus, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream mf(dir + "/manifest.csv", std::ios::binary);
  if (!mf) throw FormatError("cannot write " + dir + "/manifest.csv");
  mf << "clip_path,device_id,source_id,seed\n";
  for (std::size_t i = 0; i < corpus.clips.size(); ++i) {
    const CorpusEntry& e = corpus.manifest[i];
    save_wav_pcm16(dir + "/" + e.clip_name, corpus.clips[i]);
    mf << e.clip_name << "," << e.device_id << "," << e.source_id << "," << e.render_seed
       << "\n";
  }
  if (!mf) throw FormatError("manifest write failed");
}

std::vector<CorpusEntry> read_manifest(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.csv");
  if (!mf) throw FormatError("cannot open " + dir + "/manifest.csv");
  std::string line;
  if (!std::getline(mf, line) || line.rfind("clip_path,", 0) != 0)
    throw FormatError(dir + "/manifest.csv: bad header");
  std::vector<CorpusEntry> entries;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    CorpusEntry e;
    std::size_t p1 = line.find(','), p2 = line.find(',', p1 + 1), p3 = line.find(',', p2 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos || p3 == std::string::npos)
      throw FormatError("manifest.csv: malformed row '" + line + "'");
    e.clip_name = line.substr(0, p1);
    e.device_id = std::stoi(line.substr(p1 + 1, p2 - p1 - 1));
    e.source_id = std::stoi(line.substr(p2 + 1, p3 - p2 - 1));
    e.render_seed = std::stoull(line.substr(p3 + 1));
    entries.push_back(std::move(e));
  }
  return entries;
}

} // namespace devid
