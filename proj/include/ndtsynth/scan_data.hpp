#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ndtsynth/errors.hpp"
#include "ndtsynth/png.hpp"
#include "ndtsynth/rng.hpp"

namespace ndtsynth {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

/// Array size of the probe. Images are kImageSize square.
inline constexpr std::uint32_t kElements = 64;
inline constexpr std::uint32_t kImageSize = 64;

struct VolumeMeta {
  float sample_rate_hz = 1e8f;
  float element_pitch_mm = 0.8f;
  float scan_step_mm = 0.8f;
  bool normalized = false;
  /// Samples removed from the front of the raw trace by wall truncation.
  std::uint32_t time_offset = 0;
  /// Trace length before truncation (0 when never truncated).
  std::uint32_t original_samples = 0;
  /// Divisor applied by normalization.
  float norm_scale = 1.0f;

  bool operator==(const VolumeMeta&) const = default;
};

/// Amplitude volume indexed [b_scan][element][time_sample], row-major.
class VolumeScan {
 public:
  VolumeScan() = default;

  VolumeScan(std::uint32_t scans, std::uint32_t elements, std::uint32_t samples,
             std::vector<float> data, VolumeMeta meta = {})
      : scans_(scans), elements_(elements), samples_(samples), data_(std::move(data)), meta_(meta) {
    if (elements_ != kElements) throw DimensionError("volume element dimension", kElements, elements_);
    if (scans_ == 0) throw DataError("volume must have at least one B-scan");
    if (samples_ < 1) throw DataError("volume must have at least one time sample");
    const std::size_t n = static_cast<std::size_t>(scans_) * elements_ * samples_;
    if (data_.size() != n) throw DimensionError("volume payload length", n, data_.size());
    if (meta_.normalized) {
      for (float v : data_) {
        if (!(v >= 0.0f && v <= 1.0f)) throw DataError("normalized volume has sample outside [0,1]");
      }
    }
  }

  /// Zero-filled volume.
  static VolumeScan zeros(std::uint32_t scans, std::uint32_t elements, std::uint32_t samples,
                          VolumeMeta meta = {}) {
    return VolumeScan(scans, elements, samples,
                      std::vector<float>(static_cast<std::size_t>(scans) * elements * samples, 0.0f),
                      meta);
  }

  std::uint32_t scans() const { return scans_; }
  std::uint32_t elements() const { return elements_; }
  std::uint32_t samples() const { return samples_; }
  const VolumeMeta& meta() const { return meta_; }
  std::span<const float> data() const { return data_; }

  std::size_t index(std::uint32_t b, std::uint32_t e, std::uint32_t t) const {
    return (static_cast<std::size_t>(b) * elements_ + e) * samples_ + t;
  }
  float at(std::uint32_t b, std::uint32_t e, std::uint32_t t) const { return data_[index(b, e, t)]; }

  std::span<const float> trace(std::uint32_t b, std::uint32_t e) const {
    return std::span<const float>(data_).subspan(index(b, e, 0), samples_);
  }

  float max_value() const {
    return data_.empty() ? 0.0f : *std::max_element(data_.begin(), data_.end());
  }

  /// Releases the payload for in-place transformation into a new volume.
  std::vector<float> take_data() && { return std::move(data_); }

  bool operator==(const VolumeScan&) const = default;

 private:
  std::uint32_t scans_ = 0;
  std::uint32_t elements_ = 0;
  std::uint32_t samples_ = 0;
  std::vector<float> data_;
  VolumeMeta meta_;
};

enum class Label : std::uint8_t { clean = 0, defective = 1 };

inline std::string_view to_string(Label l) { return l == Label::defective ? "defective" : "clean"; }

struct DepthGate {
  std::uint32_t start_sample = 0;
  std::uint32_t end_sample = 0;
  bool operator==(const DepthGate&) const = default;
};

/// Single-channel amplitude image, row-major, rows x cols.
struct CScanImage {
  std::uint32_t rows = kImageSize;
  std::uint32_t cols = kImageSize;
  std::vector<float> pixels;
  DepthGate depth_gate;
  Label label = Label::clean;
  /// 1 where the simulated defect footprint lies.
  std::optional<std::vector<std::uint8_t>> defect_mask;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  float at(std::uint32_t r, std::uint32_t c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }

  static CScanImage filled(std::uint32_t rows, std::uint32_t cols, float value) {
    CScanImage img;
    img.rows = rows;
    img.cols = cols;
    img.pixels.assign(static_cast<std::size_t>(rows) * cols, value);
    return img;
  }

  bool in_unit_range() const {
    return std::all_of(pixels.begin(), pixels.end(), [](float p) { return p >= 0.0f && p <= 1.0f; });
  }

  bool operator==(const CScanImage&) const = default;
};

enum class Provenance { experimental_analog, simulated, gan, real_noise, cscan_noise, ascan_noise };

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::experimental_analog: return "experimental-analog";
    case Provenance::simulated: return "simulated";
    case Provenance::gan: return "gan";
    case Provenance::real_noise: return "real-noise";
    case Provenance::cscan_noise: return "cscan-noise";
    case Provenance::ascan_noise: return "ascan-noise";
  }
  return "unknown";
}

inline Provenance provenance_from_string(std::string_view s) {
  for (auto p : {Provenance::experimental_analog, Provenance::simulated, Provenance::gan,
                 Provenance::real_noise, Provenance::cscan_noise, Provenance::ascan_noise}) {
    if (to_string(p) == s) return p;
  }
  throw DecodeError("unknown provenance: " + std::string(s));
}

struct Dataset {
  Provenance provenance = Provenance::simulated;
  std::uint64_t seed = 0;
  std::vector<CScanImage> images;
  /// Per-image lineage (phantom spec, noise model, ...), parallel to images.
  std::vector<nlohmann::json> sources;

  std::size_t count(Label l) const {
    return static_cast<std::size_t>(
        std::count_if(images.begin(), images.end(), [l](const CScanImage& i) { return i.label == l; }));
  }

  void add(CScanImage img, nlohmann::json source = nlohmann::json::object()) {
    if (!images.empty() && (img.rows != images.front().rows || img.cols != images.front().cols)) {
      throw DimensionError("dataset image size", images.front().size(), img.size());
    }
    images.push_back(std::move(img));
    sources.push_back(std::move(source));
  }
};

// ---------------------------------------------------------------------------
// Binary helpers

namespace io {

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::array<std::uint8_t, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  out.insert(out.end(), b.begin(), b.end());
}

template <typename T>
T get(std::span<const std::uint8_t> in, std::size_t at) {
  if (at + sizeof(T) > in.size()) throw DecodeError("unexpected end of data");
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for reading: " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed: " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open for reading: " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

}  // namespace io

// ---------------------------------------------------------------------------
// Volume file: 64-byte header + little-endian f32 payload, plus a JSON sidecar.
//
//  off size  field
//    0    8  magic "NDTVOL\0\0"
//    8    4  version (1)
//   12   12  scans, elements, samples (u32)
//   24   12  sample_rate_hz, element_pitch_mm, scan_step_mm (f32)
//   36    4  flags (bit 0: normalized)
//   40    4  CRC-32 of payload
//   44    4  time_offset (u32)
//   48    4  original_samples (u32)
//   52    4  norm_scale (f32)
//   56    8  reserved, zero

inline constexpr std::array<std::uint8_t, 8> kVolumeMagic = {'N', 'D', 'T', 'V', 'O', 'L', 0, 0};
inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr std::size_t kVolumeHeaderSize = 64;

inline nlohmann::json volume_meta_json(const VolumeScan& v) {
  const auto& m = v.meta();
  return {{"format", "ndtsynth-volume"},
          {"version", kVolumeVersion},
          {"dims", {{"scans", v.scans()}, {"elements", v.elements()}, {"samples", v.samples()}}},
          {"sample_rate_hz", m.sample_rate_hz},
          {"element_pitch_mm", m.element_pitch_mm},
          {"scan_step_mm", m.scan_step_mm},
          {"normalized", m.normalized},
          {"time_offset", m.time_offset},
          {"original_samples", m.original_samples},
          {"norm_scale", m.norm_scale}};
}

inline std::vector<std::uint8_t> encode_volume(const VolumeScan& v) {
  std::vector<std::uint8_t> out;
  const auto payload = std::as_bytes(v.data());
  out.reserve(kVolumeHeaderSize + payload.size());
  out.insert(out.end(), kVolumeMagic.begin(), kVolumeMagic.end());
  io::put<std::uint32_t>(out, kVolumeVersion);
  io::put<std::uint32_t>(out, v.scans());
  io::put<std::uint32_t>(out, v.elements());
  io::put<std::uint32_t>(out, v.samples());
  io::put<float>(out, v.meta().sample_rate_hz);
  io::put<float>(out, v.meta().element_pitch_mm);
  io::put<float>(out, v.meta().scan_step_mm);
  io::put<std::uint32_t>(out, v.meta().normalized ? 1u : 0u);
  const std::span<const std::uint8_t> pbytes(reinterpret_cast<const std::uint8_t*>(payload.data()),
                                             payload.size());
  io::put<std::uint32_t>(out, io::crc32(pbytes));
  io::put<std::uint32_t>(out, v.meta().time_offset);
  io::put<std::uint32_t>(out, v.meta().original_samples);
  io::put<float>(out, v.meta().norm_scale);
  out.resize(kVolumeHeaderSize, 0);
  out.insert(out.end(), pbytes.begin(), pbytes.end());
  return out;
}

inline VolumeScan decode_volume(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kVolumeHeaderSize) throw DecodeError("volume header truncated");
  if (!std::equal(kVolumeMagic.begin(), kVolumeMagic.end(), bytes.begin())) {
    throw DecodeError("not a volume file (bad magic)");
  }
  const auto version = io::get<std::uint32_t>(bytes, 8);
  if (version != kVolumeVersion) throw DecodeError("unsupported volume version " + std::to_string(version));
  const auto scans = io::get<std::uint32_t>(bytes, 12);
  const auto elements = io::get<std::uint32_t>(bytes, 16);
  const auto samples = io::get<std::uint32_t>(bytes, 20);
  VolumeMeta meta;
  meta.sample_rate_hz = io::get<float>(bytes, 24);
  meta.element_pitch_mm = io::get<float>(bytes, 28);
  meta.scan_step_mm = io::get<float>(bytes, 32);
  const auto flags = io::get<std::uint32_t>(bytes, 36);
  if (flags & ~1u) throw DecodeError("unknown volume flags");
  meta.normalized = (flags & 1u) != 0;
  const auto crc = io::get<std::uint32_t>(bytes, 40);
  meta.time_offset = io::get<std::uint32_t>(bytes, 44);
  meta.original_samples = io::get<std::uint32_t>(bytes, 48);
  meta.norm_scale = io::get<float>(bytes, 52);

  if (elements != kElements) throw DimensionError("volume element dimension", kElements, elements);
  const std::size_t n = static_cast<std::size_t>(scans) * elements * samples;
  const std::size_t expected_bytes = kVolumeHeaderSize + n * sizeof(float);
  if (bytes.size() != expected_bytes) throw DimensionError("volume file size", expected_bytes, bytes.size());
  const auto payload = bytes.subspan(kVolumeHeaderSize);
  if (io::crc32(payload) != crc) throw ChecksumError("volume payload CRC-32 mismatch");
  std::vector<float> data(n);
  std::memcpy(data.data(), payload.data(), payload.size());
  return VolumeScan(scans, elements, samples, std::move(data), meta);
}

/// Writes `path` and a `path.json` metadata sidecar.
inline void save_volume(const VolumeScan& v, const std::filesystem::path& path) {
  io::write_file(path, encode_volume(v));
  io::write_json(path.string() + ".json", volume_meta_json(v));
}

inline VolumeScan load_volume(const std::filesystem::path& path) {
  return decode_volume(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Images

/// 8-bit gray level for a [0,1] amplitude, rounding half up.
inline std::uint8_t gray_level(double p) { return static_cast<std::uint8_t>(std::floor(p * 255.0 + 0.5)); }

inline void export_png(const CScanImage& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> gray(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const float p = img.pixels[i];
    if (!(p >= 0.0f && p <= 1.0f)) {
      throw DataError("export_png: pixel " + std::to_string(i) + " = " + std::to_string(p) +
                      " outside [0,1]");
    }
    gray[i] = gray_level(p);
  }
  png::write_gray8(path.string(), gray, img.cols, img.rows);
}

// Image pack: "NDTIMG\0\0", u32 version, u32 count, u32 rows, u32 cols, u32 crc of records,
// 4 reserved bytes; then per image: u8 label, u8 has_mask, u32 gate start, u32 gate end,
// f32 pixels[rows*cols], u8 mask[rows*cols] if has_mask.
inline constexpr std::array<std::uint8_t, 8> kImageMagic = {'N', 'D', 'T', 'I', 'M', 'G', 0, 0};

inline std::vector<std::uint8_t> encode_images(const std::vector<CScanImage>& images) {
  const std::uint32_t rows = images.empty() ? 0 : images.front().rows;
  const std::uint32_t cols = images.empty() ? 0 : images.front().cols;
  std::vector<std::uint8_t> body;
  for (const auto& img : images) {
    if (img.rows != rows || img.cols != cols) throw DimensionError("image pack size", rows * cols, img.size());
    body.push_back(static_cast<std::uint8_t>(img.label));
    body.push_back(img.defect_mask ? 1 : 0);
    io::put<std::uint32_t>(body, img.depth_gate.start_sample);
    io::put<std::uint32_t>(body, img.depth_gate.end_sample);
    for (float p : img.pixels) io::put<float>(body, p);
    if (img.defect_mask) body.insert(body.end(), img.defect_mask->begin(), img.defect_mask->end());
  }
  std::vector<std::uint8_t> out(kImageMagic.begin(), kImageMagic.end());
  io::put<std::uint32_t>(out, 1);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(images.size()));
  io::put<std::uint32_t>(out, rows);
  io::put<std::uint32_t>(out, cols);
  io::put<std::uint32_t>(out, io::crc32(body));
  io::put<std::uint32_t>(out, 0);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline std::vector<CScanImage> decode_images(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHeader = 32;
  if (bytes.size() < kHeader || !std::equal(kImageMagic.begin(), kImageMagic.end(), bytes.begin())) {
    throw DecodeError("not an image pack");
  }
  const auto count = io::get<std::uint32_t>(bytes, 12);
  const auto rows = io::get<std::uint32_t>(bytes, 16);
  const auto cols = io::get<std::uint32_t>(bytes, 20);
  const auto crc = io::get<std::uint32_t>(bytes, 24);
  if (io::crc32(bytes.subspan(kHeader)) != crc) throw ChecksumError("image pack CRC-32 mismatch");
  std::vector<CScanImage> images;
  images.reserve(count);
  std::size_t at = kHeader;
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  for (std::uint32_t i = 0; i < count; ++i) {
    CScanImage img;
    img.rows = rows;
    img.cols = cols;
    const auto label = io::get<std::uint8_t>(bytes, at);
    if (label > 1) throw DecodeError("bad label");
    img.label = static_cast<Label>(label);
    const bool has_mask = io::get<std::uint8_t>(bytes, at + 1) != 0;
    img.depth_gate.start_sample = io::get<std::uint32_t>(bytes, at + 2);
    img.depth_gate.end_sample = io::get<std::uint32_t>(bytes, at + 6);
    at += 10;
    if (at + n * 4 > bytes.size()) throw DecodeError("image pack truncated");
    img.pixels.resize(n);
    std::memcpy(img.pixels.data(), bytes.data() + at, n * 4);
    at += n * 4;
    if (has_mask) {
      if (at + n > bytes.size()) throw DecodeError("image pack truncated");
      img.defect_mask.emplace(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                              bytes.begin() + static_cast<std::ptrdiff_t>(at + n));
      at += n;
    }
    images.push_back(std::move(img));
  }
  if (at != bytes.size()) throw DecodeError("trailing bytes in image pack");
  return images;
}

/// Writes manifest.json, images.bin and (optionally) one PNG per image under `dir`.
/// `extra` is merged into the manifest's top level.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                         const nlohmann::json& extra = nlohmann::json::object(), bool write_png = true) {
  std::filesystem::create_directories(dir);
  if (write_png) std::filesystem::create_directories(dir / "png");
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& img = ds.images[i];
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.png", i);
    nlohmann::json e = {{"index", i},
                        {"label", to_string(img.label)},
                        {"gate", {img.depth_gate.start_sample, img.depth_gate.end_sample}},
                        {"has_mask", img.defect_mask.has_value()},
                        {"source", i < ds.sources.size() ? ds.sources[i] : nlohmann::json::object()}};
    if (write_png) {
      e["png"] = std::string("png/") + name;
      export_png(img, dir / "png" / name);
    }
    entries.push_back(std::move(e));
  }
  nlohmann::json manifest = {{"format", "ndtsynth-dataset"},
                             {"provenance", to_string(ds.provenance)},
                             {"seed", ds.seed},
                             {"rng_algorithm", Rng::kAlgorithm},
                             {"count", ds.images.size()},
                             {"defective", ds.count(Label::defective)},
                             {"clean", ds.count(Label::clean)},
                             {"rows", ds.images.empty() ? 0u : ds.images.front().rows},
                             {"cols", ds.images.empty() ? 0u : ds.images.front().cols},
                             {"images_file", "images.bin"}};
  for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
  manifest["images"] = std::move(entries);
  io::write_file(dir / "images.bin", encode_images(ds.images));
  io::write_json(dir / "manifest.json", manifest);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = io::read_json(dir / "manifest.json");
  Dataset ds;
  try {
    ds.provenance = provenance_from_string(manifest.at("provenance").get<std::string>());
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.images = decode_images(io::read_file(dir / manifest.at("images_file").get<std::string>()));
    for (const auto& e : manifest.at("images")) ds.sources.push_back(e.value("source", nlohmann::json::object()));
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (ds.sources.size() != ds.images.size()) {
    throw DimensionError("manifest image entries", ds.images.size(), ds.sources.size());
  }
  return ds;
}

}  // namespace ndtsynth
