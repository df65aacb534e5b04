#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "devid/audio.hpp"

namespace devid {

// Linear "device coloration" channel: an FIR filter plus additive white
// noise and a gain, standing in for a real recording chain.
struct DeviceProfile {
  std::vector<double> fir; // 32..128 taps
  double noise_level = 0;  // noise RMS relative to the filtered signal RMS
  double gain = 1.0;
  int id = -1;
};

struct SynthCorpusSpec {
  int n_devices = 8;
  int clips_per_device = 60;
  double clip_duration_s = 2.0;
  int sample_rate = 16000;
  std::uint64_t seed = 7;

  void validate() const;
};

// Deterministic profiles whose magnitude responses pairwise differ by at
// least `min_separation_db` somewhere in band (rejection-resampled).
std::vector<DeviceProfile> make_profiles(int n, std::uint64_t seed,
                                         double min_separation_db = 3.0);

// Max over frequency of |mag_i - mag_j| in dB between two FIR responses.
double pairwise_separation_db(const DeviceProfile& a, const DeviceProfile& b);

// gain * (fir (*) source) + seeded white noise, peak-normalized to 0.9 and
// labeled with the profile id.
AudioClip render(const AudioClip& source, const DeviceProfile& profile,
                 std::uint64_t seed);

// Seeded "speech-like" harmonic-plus-noise source signal.
AudioClip synth_source(int sample_rate, double duration_s, std::uint64_t seed);

struct CorpusEntry {
  std::string clip_name;
  int device_id = -1;
  int source_id = -1;
  std::uint64_t render_seed = 0;
};

struct SynthCorpus {
  std::vector<AudioClip> clips; // clips[i] corresponds to manifest[i]
  std::vector<CorpusEntry> manifest;
};

// Shared source pool rendered through every profile: the only
// class-discriminative signal is the channel.
SynthCorpus build_corpus(const SynthCorpusSpec& spec);

// WAV files plus manifest.csv (clip_path,device_id,source_id,seed).
void write_corpus(const SynthCorpus& corpus, const std::string& dir);

// Reads back manifest.csv; clip paths resolve relative to `dir`.
std::vector<CorpusEntry> read_manifest(const std::string& dir);

} // namespace devid
