#include "city2scene/wav.hpp"

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "city2scene/error.hpp"

namespace city2scene {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

struct Layout {
  WavInfo info;
  std::streamoff data_offset = 0;
  std::uint32_t data_bytes = 0;
};

Layout scan(std::ifstream& in, const std::filesystem::path& path) {
  auto fail = [&](const std::string& what) {
    return IoError("wav decode error in " + path.string() + ": " + what);
  };
  std::array<unsigned char, 12> riff{};
  if (!in.read(reinterpret_cast<char*>(riff.data()), riff.size())) throw fail("file too short");
  if (std::memcmp(riff.data(), "RIFF", 4) != 0 || std::memcmp(riff.data() + 8, "WAVE", 4) != 0) {
    throw fail("not a RIFF/WAVE file");
  }

  Layout layout;
  bool have_fmt = false;
  std::uint16_t format = 0;
  std::array<unsigned char, 8> header{};
  while (in.read(reinterpret_cast<char*>(header.data()), header.size())) {
    const std::uint32_t size = le32(header.data() + 4);
    if (std::memcmp(header.data(), "fmt ", 4) == 0) {
      if (size < 16) throw fail("fmt chunk too small");
      std::vector<unsigned char> fmt(size);
      if (!in.read(reinterpret_cast<char*>(fmt.data()), size)) throw fail("truncated fmt chunk");
      format = le16(fmt.data());
      layout.info.channels = le16(fmt.data() + 2);
      layout.info.sample_rate_hz = static_cast<int>(le32(fmt.data() + 4));
      layout.info.bits_per_sample = le16(fmt.data() + 14);
      if (format == kFormatExtensible) {
        if (size < 26) throw fail("extensible fmt chunk too small");
        format = le16(fmt.data() + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(header.data(), "data", 4) == 0) {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      layout.data_offset = in.tellg();
      layout.data_bytes = size;
      break;
    } else {
      in.seekg(size + (size & 1u), std::ios::cur);
    }
    if (size & 1u && std::memcmp(header.data(), "fmt ", 4) == 0) in.seekg(1, std::ios::cur);
  }
  if (!have_fmt || layout.data_offset == 0) throw fail("missing fmt or data chunk");

  auto& info = layout.info;
  if (format == kFormatFloat) {
    info.is_float = true;
    if (info.bits_per_sample != 32 && info.bits_per_sample != 64) throw fail("unsupported float width");
  } else if (format == kFormatPcm) {
    if (info.bits_per_sample != 8 && info.bits_per_sample != 16 && info.bits_per_sample != 24 &&
        info.bits_per_sample != 32) {
      throw fail("unsupported PCM width");
    }
  } else {
    throw fail("unsupported format tag " + std::to_string(format));
  }
  if (info.channels <= 0 || info.sample_rate_hz <= 0) throw fail("invalid channel count or rate");
  const std::size_t frame_bytes = static_cast<std::size_t>(info.channels) * (info.bits_per_sample / 8);
  info.frames = layout.data_bytes / frame_bytes;
  return layout;
}

}  // namespace

WavInfo read_wav_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return scan(in, path).info;
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const Layout layout = scan(in, path);
  const WavInfo& info = layout.info;
  if (info.channels != 1) {
    throw IoError("wav decode error in " + path.string() + ": expected mono, found " +
                  std::to_string(info.channels) + " channels");
  }
  const std::size_t width = info.bits_per_sample / 8;
  std::vector<unsigned char> raw(info.frames * width);
  in.seekg(layout.data_offset);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw IoError("wav decode error in " + path.string() + ": truncated data chunk");
  }

  Waveform wave;
  wave.sample_rate_hz = info.sample_rate_hz;
  wave.samples.resize(info.frames);
  for (std::size_t i = 0; i < info.frames; ++i) {
    const unsigned char* p = raw.data() + i * width;
    float v = 0.0f;
    if (info.is_float) {
      if (width == 4) {
        std::uint32_t bits = le32(p);
        std::memcpy(&v, &bits, 4);
      } else {
        std::uint64_t bits = static_cast<std::uint64_t>(le32(p)) | (static_cast<std::uint64_t>(le32(p + 4)) << 32);
        double d = 0.0;
        std::memcpy(&d, &bits, 8);
        v = static_cast<float>(d);
      }
    } else {
      switch (width) {
        case 1: v = (static_cast<int>(p[0]) - 128) / 128.0f; break;
        case 2: v = static_cast<std::int16_t>(le16(p)) / 32768.0f; break;
        case 3: {
          std::int32_t s = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
          if (s & 0x800000) s -= 0x1000000;
          v = static_cast<float>(s / 8388608.0);
          break;
        }
        default: v = static_cast<float>(static_cast<std::int32_t>(le32(p)) / 2147483648.0); break;
      }
    }
    wave.samples[i] = v;
  }
  return wave;
}

void write_wav(const std::filesystem::path& path, std::span<const float> samples, int sample_rate_hz) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  auto put32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  auto put16 = [&](std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
  };
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 4);
  out.write("RIFF", 4);
  put32(36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put32(16);
  put16(kFormatFloat);
  put16(1);
  put32(static_cast<std::uint32_t>(sample_rate_hz));
  put32(static_cast<std::uint32_t>(sample_rate_hz) * 4);
  put16(4);
  put16(32);
  out.write("data", 4);
  put32(data_bytes);
  for (float s : samples) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &s, 4);
    put32(bits);
  }
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace city2scene
