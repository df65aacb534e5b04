#include "devid/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace devid {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

std::uint16_t rd_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | p[1] << 8);
}

void wr_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                        (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void wr_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {(unsigned char)(v), (unsigned char)(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

} // namespace

AudioClip load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw FormatError(path + ": not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;

  // walk chunks; unknown chunks are skipped, odd sizes carry a pad byte
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const std::uint32_t len = rd_u32(bytes.data() + pos + 4);
    pos += 8;
    if (pos + len > bytes.size()) throw FormatError(path + ": truncated chunk");
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) throw FormatError(path + ": fmt chunk too small");
      format = rd_u16(bytes.data() + pos);
      channels = rd_u16(bytes.data() + pos + 2);
      sample_rate = rd_u32(bytes.data() + pos + 4);
      bits = rd_u16(bytes.data() + pos + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data = bytes.data() + pos;
      data_len = len;
    }
    pos += len + (len & 1);
  }
  if (!have_fmt) throw FormatError(path + ": missing fmt chunk");
  if (sample_rate == 0) throw FormatError(path + ": zero sample rate");
  if (channels != 1 && channels != 2)
    throw UnsupportedCodecError(path + ": only mono/stereo supported");
  const bool pcm_int = (format == 1) && (bits == 8 || bits == 16 || bits == 24);
  const bool pcm_f32 = (format == 3) && (bits == 32);
  if (!pcm_int && !pcm_f32)
    throw UnsupportedCodecError(path + ": unsupported codec (format " +
                                std::to_string(format) + ", " + std::to_string(bits) +
                                " bits)");
  if (!data || data_len == 0) throw EmptyAudioError(path + ": no audio data");

  const std::uint32_t bytes_per_sample = bits / 8;
  const std::uint32_t frame_bytes = bytes_per_sample * channels;
  const std::uint32_t n_frames = data_len / frame_bytes;
  if (n_frames == 0) throw EmptyAudioError(path + ": no audio data");

  AudioClip clip;
  clip.sample_rate = int(sample_rate);
  clip.source_id = path;
  clip.samples.resize(n_frames);

  for (std::uint32_t i = 0; i < n_frames; ++i) {
    double acc = 0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + std::size_t(i) * frame_bytes + c * bytes_per_sample;
      double v = 0;
      if (pcm_f32) {
        std::uint32_t u = rd_u32(p);
        float f;
        std::memcpy(&f, &u, 4);
        v = std::clamp(double(f), -1.0, 1.0);
      } else if (bits == 8) {
        // 8-bit WAV is unsigned, centered at 128
        v = (int(p[0]) - 128) / 128.0;
      } else if (bits == 16) {
        v = std::int16_t(p[0] | p[1] << 8) / 32768.0;
      } else { // 24
        std::int32_t s = p[0] | p[1] << 8 | p[2] << 16;
        if (s & 0x800000) s |= ~0xFFFFFF; // sign extend
        v = s / 8388608.0;
      }
      acc += v;
    }
    clip.samples[i] = real(acc / channels);
  }
  return clip;
}

void save_wav_pcm16(const std::string& path, const AudioClip& clip) {
  if (clip.samples.empty()) throw EmptyAudioError("save_wav: empty clip");
  if (clip.sample_rate <= 0) throw FormatError("save_wav: bad sample rate");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  const std::uint32_t data_len = std::uint32_t(clip.samples.size() * 2);
  os.write("RIFF", 4);
  wr_u32(os, 36 + data_len);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  wr_u32(os, 16);
  wr_u16(os, 1); // PCM
  wr_u16(os, 1); // mono
  wr_u32(os, std::uint32_t(clip.sample_rate));
  wr_u32(os, std::uint32_t(clip.sample_rate) * 2);
  wr_u16(os, 2);  // block align
  wr_u16(os, 16); // bits
  os.write("data", 4);
  wr_u32(os, data_len);
  // scale matches the loader's full-scale divisor so load->save is exact
  for (real s : clip.samples) {
    long q = std::lround(double(s) * 32768.0);
    q = std::clamp(q, -32768L, 32767L);
    wr_u16(os, std::uint16_t(std::int16_t(q)));
  }
  if (!os) throw FormatError("write failed: " + path);
}

std::vector<AudioClip> segment(const AudioClip& clip, double duration_s) {
  if (duration_s <= 0) throw ConfigError("segment: duration must be positive");
  const std::size_t seg_len = std::size_t(std::llround(duration_s * clip.sample_rate));
  if (seg_len == 0) throw ConfigError("segment: duration below one sample");
  std::vector<AudioClip> out;
  const std::size_t n = clip.samples.size() / seg_len;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    AudioClip seg;
    seg.sample_rate = clip.sample_rate;
    seg.label = clip.label;
    seg.source_id = clip.source_id + "#" + std::to_string(i);
    seg.samples.assign(clip.samples.begin() + long(i * seg_len),
                       clip.samples.begin() + long((i + 1) * seg_len));
    out.push_back(std::move(seg));
  }
  return out;
}

} // namespace devid
