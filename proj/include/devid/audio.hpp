#pragma once

#include <string>
#include <vector>

#include "devid/common.hpp"
#include "devid/errors.hpp"

namespace devid {

// Mono waveform with amplitudes normalized to [-1, 1].
struct AudioClip {
  std::vector<real> samples;
  int sample_rate = 0;
  int label = -1; // class index; -1 = unlabeled
  std::string source_id;
};

// Reads a RIFF/WAVE file. Accepts 8/16/24-bit integer PCM and 32-bit float,
// mono or stereo (averaged to mono). Integer samples are scaled by the
// format's full-scale value 2^(bits-1).
AudioClip load_wav(const std::string& path);

// Writes 16-bit little-endian PCM mono.
void save_wav_pcm16(const std::string& path, const AudioClip& clip);

// Non-overlapping consecutive segments of exactly duration_s seconds; the
// trailing remainder is dropped. A clip shorter than one segment yields an
// empty list.
std::vector<AudioClip> segment(const AudioClip& clip, double duration_s);

} // namespace devid
