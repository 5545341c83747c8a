#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "textsep/errors.hpp"

namespace textsep::audio {

// Mono audio, float32 samples in [-1, 1] by convention (not enforced; the
// PCM16 writer clips and reports, the float writer stores verbatim).
struct AudioSignal {
  std::vector<float> samples;
  int sample_rate = 0;

  std::int64_t length() const { return static_cast<std::int64_t>(samples.size()); }
  double duration() const {
    return sample_rate > 0 ? static_cast<double>(length()) / sample_rate : 0.0;
  }
};

inline void validate(const AudioSignal& s, const char* what = "signal") {
  if (s.sample_rate <= 0) throw DataError(std::string(what) + ": sample_rate must be positive");
  for (float v : s.samples) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite sample");
  }
}

inline double rms(std::span<const float> x) {
  if (x.empty()) throw DataError("rms: empty signal");
  double acc = 0.0;
  for (float v : x) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc / static_cast<double>(x.size()));
}

inline double rms(const AudioSignal& s) { return rms(std::span<const float>(s.samples)); }

// Half-overlap framing grid: hop is pinned to frame_length / 2 because the
// 50%-overlap identity (decoder overlap-add, COLA window) depends on it.
struct FrameSpec {
  std::int64_t frame_length = 0;
  std::int64_t hop = 0;

  static FrameSpec half_overlap(std::int64_t frame_length) {
    if (frame_length < 2 || frame_length % 2 != 0) {
      throw ConfigError("FrameSpec: frame_length must be even and >= 2");
    }
    return FrameSpec{frame_length, frame_length / 2};
  }
};

inline void validate(const FrameSpec& spec) {
  if (spec.frame_length < 2 || spec.frame_length % 2 != 0 ||
      spec.hop != spec.frame_length / 2) {
    throw ConfigError("FrameSpec: require even frame_length and hop == frame_length/2");
  }
}

// Number of frames covering a signal of n samples, padding the tail with
// zeros so the final partial frame is kept. A signal shorter than one frame
// still yields one frame.
inline std::int64_t frame_count(std::int64_t n, const FrameSpec& spec) {
  validate(spec);
  if (n < 0) throw ShapeError("frame_count: negative length");
  if (n <= spec.frame_length) return 1;
  const std::int64_t num = n - spec.frame_length;
  return (num + spec.hop - 1) / spec.hop + 1;
}

// Length after zero-padding to a whole number of frames.
inline std::int64_t padded_length(std::int64_t n, const FrameSpec& spec) {
  return (frame_count(n, spec) - 1) * spec.hop + spec.frame_length;
}

// Row-major frame matrix: rows frames of cols samples each.
template <typename T>
struct Frames {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<T> data;

  T* row(std::int64_t r) { return data.data() + r * cols; }
  const T* row(std::int64_t r) const { return data.data() + r * cols; }
};

template <typename T>
Frames<T> slice_frames(std::span<const T> x, const FrameSpec& spec) {
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  Frames<T> out;
  out.rows = frame_count(n, spec);
  out.cols = spec.frame_length;
  out.data.assign(static_cast<std::size_t>(out.rows * out.cols), T(0));
  for (std::int64_t r = 0; r < out.rows; ++r) {
    const std::int64_t start = r * spec.hop;
    const std::int64_t take = std::min<std::int64_t>(spec.frame_length, n - start);
    for (std::int64_t i = 0; i < take; ++i) out.row(r)[i] = x[static_cast<std::size_t>(start + i)];
  }
  return out;
}

// Sum frames back onto the hop grid. Output length (rows-1)*hop + cols.
// Linear in the frame values by construction.
template <typename T>
std::vector<T> overlap_add(const Frames<T>& frames, const FrameSpec& spec) {
  validate(spec);
  if (frames.cols != spec.frame_length) {
    throw ShapeError("overlap_add: frame width does not match spec");
  }
  if (frames.rows <= 0) throw ShapeError("overlap_add: no frames");
  std::vector<T> out(static_cast<std::size_t>((frames.rows - 1) * spec.hop + frames.cols), T(0));
  for (std::int64_t r = 0; r < frames.rows; ++r) {
    const T* src = frames.row(r);
    T* dst = out.data() + r * spec.hop;
    for (std::int64_t i = 0; i < frames.cols; ++i) dst[i] += src[i];
  }
  return out;
}

// Triangular window with exact constant-overlap-add at 50% overlap:
// w[i] + w[i + L/2] == 1 for all i in [0, L/2).
template <typename T = double>
std::vector<T> bartlett_cola_window(std::int64_t frame_length) {
  FrameSpec spec = FrameSpec::half_overlap(frame_length);
  std::vector<T> w(static_cast<std::size_t>(frame_length));
  for (std::int64_t i = 0; i < spec.hop; ++i) {
    const double up = static_cast<double>(2 * i + 1) / static_cast<double>(frame_length);
    w[static_cast<std::size_t>(i)] = static_cast<T>(up);
    w[static_cast<std::size_t>(i + spec.hop)] = static_cast<T>(1.0 - up);
  }
  return w;
}

namespace detail {

inline void write_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void write_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

enum class WavEncoding { pcm16, float32 };

struct WavWriteStats {
  std::int64_t clipped_samples = 0;
};

// Mono RIFF/WAVE reader. Accepts PCM16 and IEEE float32, rejects anything
// else with a FormatError naming the offending field.
inline AudioSignal read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("read_wav: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0) {
    throw FormatError("read_wav: '" + path + "' is not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const unsigned char* id = p + pos;
    const std::uint32_t size = detail::read_u32(p + pos + 4);
    pos += 8;
    if (pos + size > n) throw FormatError("read_wav: truncated chunk in '" + path + "'");
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("read_wav: fmt chunk too small in '" + path + "'");
      format = detail::read_u16(p + pos);
      channels = detail::read_u16(p + pos + 2);
      rate = detail::read_u32(p + pos + 4);
      bits = detail::read_u16(p + pos + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data = p + pos;
      data_size = size;
    }
    pos += size + (size & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data == nullptr) {
    throw FormatError("read_wav: missing fmt/data chunk in '" + path + "'");
  }
  if (channels != 1) {
    throw FormatError("read_wav: '" + path + "' has " + std::to_string(channels) +
                      " channels; only mono is supported");
  }
  if (rate == 0) throw FormatError("read_wav: zero sample rate in '" + path + "'");

  AudioSignal out;
  out.sample_rate = static_cast<int>(rate);
  if (format == 1 && bits == 16) {
    if (data_size % 2 != 0) throw FormatError("read_wav: odd PCM16 data size in '" + path + "'");
    const std::size_t count = data_size / 2;
    out.samples.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::int16_t v = static_cast<std::int16_t>(detail::read_u16(data + 2 * i));
      out.samples[i] = static_cast<float>(v) / 32768.0f;
    }
  } else if (format == 3 && bits == 32) {
    if (data_size % 4 != 0) throw FormatError("read_wav: bad float32 data size in '" + path + "'");
    const std::size_t count = data_size / 4;
    out.samples.resize(count);
    std::memcpy(out.samples.data(), data, data_size);
  } else {
    throw FormatError("read_wav: unsupported encoding (format=" + std::to_string(format) +
                      ", bits=" + std::to_string(bits) + ") in '" + path + "'");
  }
  return out;
}

// Writes mono WAV. float32 stores samples bit-exactly; pcm16 clips to
// [-1, 1] and reports how many samples were clipped.
inline WavWriteStats write_wav(const AudioSignal& signal, const std::string& path,
                               WavEncoding enc = WavEncoding::float32) {
  validate(signal, "write_wav");
  WavWriteStats stats;

  std::string payload;
  const std::size_t count = signal.samples.size();
  if (enc == WavEncoding::pcm16) {
    payload.reserve(count * 2);
    for (float v : signal.samples) {
      float x = v;
      if (x > 1.0f) { x = 1.0f; ++stats.clipped_samples; }
      if (x < -1.0f) { x = -1.0f; ++stats.clipped_samples; }
      long q = std::lround(static_cast<double>(x) * 32768.0);
      if (q > 32767) q = 32767;
      if (q < -32768) q = -32768;
      detail::write_u16(payload, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
    }
  } else {
    payload.resize(count * 4);
    std::memcpy(payload.data(), signal.samples.data(), count * 4);
  }

  const std::uint16_t bits = enc == WavEncoding::pcm16 ? 16 : 32;
  const std::uint16_t fmt = enc == WavEncoding::pcm16 ? 1 : 3;
  const std::uint32_t rate = static_cast<std::uint32_t>(signal.sample_rate);
  const std::uint16_t block = static_cast<std::uint16_t>(bits / 8);
  const bool fact = enc == WavEncoding::float32;

  std::string out;
  out.reserve(payload.size() + 64);
  out.append("RIFF");
  const std::uint32_t riff_size = 4 + (8 + 16) + (fact ? 8 + 4 : 0) +
                                  8 + static_cast<std::uint32_t>(payload.size());
  detail::write_u32(out, riff_size);
  out.append("WAVE");
  out.append("fmt ");
  detail::write_u32(out, 16);
  detail::write_u16(out, fmt);
  detail::write_u16(out, 1);  // channels
  detail::write_u32(out, rate);
  detail::write_u32(out, rate * block);
  detail::write_u16(out, block);
  detail::write_u16(out, bits);
  if (fact) {
    out.append("fact");
    detail::write_u32(out, 4);
    detail::write_u32(out, static_cast<std::uint32_t>(count));
  }
  out.append("data");
  detail::write_u32(out, static_cast<std::uint32_t>(payload.size()));
  out.append(payload);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FileError("write_wav: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FileError("write_wav: short write to '" + path + "'");
  return stats;
}

}  // namespace textsep::audio
