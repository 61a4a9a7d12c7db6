#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aov/bytes.hpp"
#include "aov/error.hpp"
#include "aov/rng.hpp"

// Frozen-encoder feature containers, the .aovf bundle format, and the
// synthetic planted-anomaly generator that stands in for a pretrained
// encoder at desk scale.

namespace aov {

constexpr int kNumLevels = 4;  // intermediate encoder levels tapped per crop

/// Crop bookkeeping for multi-resolution inputs: index 0 is always the
/// resized original image, followed by the tiling crops.
struct CropLayout {
  std::size_t n_crops = 0;  // tiles plus the resized original
  std::size_t g = 0;        // tokens per grid side; each crop carries g*g tokens
  std::size_t total_tokens() const { return n_crops * g * g; }

  bool operator==(const CropLayout&) const = default;
};

/// Tile count for an image: one crop per base-sized tile (ceil division per
/// axis) plus the resized original. Images no larger than the base still get
/// one tile so every image has the same [original + crops] structure.
inline CropLayout anyres_layout(std::size_t image_w, std::size_t image_h, std::size_t base,
                                std::size_t g) {
  if (image_w == 0 || image_h == 0 || base == 0 || g == 0)
    throw UsageError("anyres_layout: all arguments must be positive");
  std::size_t tiles_w = (image_w + base - 1) / base;
  std::size_t tiles_h = (image_h + base - 1) / base;
  return CropLayout{tiles_w * tiles_h + 1, g};
}

/// One image's frozen-encoder features: the final-layer token matrix plus
/// four intermediate-level token matrices, per crop. Matrices are flat
/// row-major [g*g x d_enc] f32 buffers. anomaly_region lists planted token
/// indices (same indices in every crop); ground truth for synthetic data only.
struct FeatureBundle {
  CropLayout layout;
  std::size_t d_enc = 0;
  int label = 0;  // 0 normal, 1 anomalous
  std::int32_t class_id = 0;
  std::vector<std::vector<float>> v_final;                             // [n_crops][g*g*d_enc]
  std::array<std::vector<std::vector<float>>, kNumLevels> v_levels;    // [4][n_crops][...]
  std::vector<std::uint32_t> anomaly_region;                           // token indices in [0, g*g)

  void validate() const {
    if (label != 0 && label != 1) throw DataError("bundle: label must be 0 or 1");
    const std::size_t per_crop = layout.g * layout.g * d_enc;
    if (v_final.size() != layout.n_crops) throw DataError("bundle: v_final crop count mismatch");
    for (const auto& m : v_final)
      if (m.size() != per_crop) throw DataError("bundle: v_final matrix size mismatch");
    for (const auto& level : v_levels) {
      if (level.size() != layout.n_crops) throw DataError("bundle: level crop count mismatch");
      for (const auto& m : level)
        if (m.size() != per_crop) throw DataError("bundle: level matrix size mismatch");
    }
    for (std::uint32_t idx : anomaly_region)
      if (idx >= layout.g * layout.g) throw DataError("bundle: region index out of grid");
  }
};

// .aovf layout: magic "AOVF", u32 version=1, u32 n_crops, g, d_enc, label,
// class_id, region_len, 8 reserved bytes (header = 40 bytes total), then f32
// little-endian row-major matrices (v_final crops 0..n-1, then levels 1..4
// each crops 0..n-1), then region indices as u32.
inline constexpr char kBundleMagic[4] = {'A', 'O', 'V', 'F'};
inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr std::size_t kBundleHeaderBytes = 40;

inline void save_bundle(const FeatureBundle& b, const std::string& path) {
  b.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("save_bundle: cannot open '" + path + "' for writing");
  os.write(kBundleMagic, 4);
  bytes::write_u32(os, kBundleVersion);
  bytes::write_u32(os, static_cast<std::uint32_t>(b.layout.n_crops));
  bytes::write_u32(os, static_cast<std::uint32_t>(b.layout.g));
  bytes::write_u32(os, static_cast<std::uint32_t>(b.d_enc));
  bytes::write_u32(os, static_cast<std::uint32_t>(b.label));
  bytes::write_u32(os, static_cast<std::uint32_t>(b.class_id));
  bytes::write_u32(os, static_cast<std::uint32_t>(b.anomaly_region.size()));
  bytes::write_u64(os, 0);  // reserved
  for (const auto& m : b.v_final) bytes::write_f32_block(os, m.data(), m.size());
  for (const auto& level : b.v_levels)
    for (const auto& m : level) bytes::write_f32_block(os, m.data(), m.size());
  for (std::uint32_t idx : b.anomaly_region) bytes::write_u32(os, idx);
  if (!os) throw DataError("save_bundle: write failed for '" + path + "'");
}

inline FeatureBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_bundle: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4)) throw TruncatedError("bundle header");
  if (std::memcmp(magic, kBundleMagic, 4) != 0) throw BadMagicError("not a feature bundle file");
  std::uint32_t version = bytes::read_u32(is, "bundle header");
  if (version != kBundleVersion)
    throw DataError("load_bundle: unsupported version " + std::to_string(version));
  std::uint32_t n_crops = bytes::read_u32(is, "bundle header");
  std::uint32_t g = bytes::read_u32(is, "bundle header");
  std::uint32_t d_enc = bytes::read_u32(is, "bundle header");
  std::uint32_t label = bytes::read_u32(is, "bundle header");
  std::uint32_t class_id = bytes::read_u32(is, "bundle header");
  std::uint32_t region_len = bytes::read_u32(is, "bundle header");
  bytes::read_u64(is, "bundle header");  // reserved

  constexpr std::uint32_t kDimCap = 1u << 16;
  if (n_crops == 0 || g == 0 || d_enc == 0 || n_crops > kDimCap || g > kDimCap || d_enc > kDimCap)
    throw DimOverflowError("bundle dims n_crops=" + std::to_string(n_crops) +
                           " g=" + std::to_string(g) + " d_enc=" + std::to_string(d_enc));
  if (label > 1) throw DataError("load_bundle: label must be 0 or 1");
  if (region_len > static_cast<std::uint64_t>(g) * g)
    throw DimOverflowError("bundle region length exceeds grid");

  FeatureBundle b;
  b.layout = CropLayout{n_crops, g};
  b.d_enc = d_enc;
  b.label = static_cast<int>(label);
  b.class_id = static_cast<std::int32_t>(class_id);
  const std::size_t per_crop = static_cast<std::size_t>(g) * g * d_enc;
  b.v_final.resize(n_crops);
  for (auto& m : b.v_final) {
    m.resize(per_crop);
    bytes::read_f32_block(is, m.data(), per_crop, "bundle payload");
  }
  for (auto& level : b.v_levels) {
    level.resize(n_crops);
    for (auto& m : level) {
      m.resize(per_crop);
      bytes::read_f32_block(is, m.data(), per_crop, "bundle payload");
    }
  }
  b.anomaly_region.resize(region_len);
  for (auto& idx : b.anomaly_region) idx = bytes::read_u32(is, "bundle region");
  b.validate();
  return b;
}

/// Controls the planted-anomaly generator. The seed fully determines the
/// output dataset, bit for bit.
struct SynthConfig {
  std::size_t n_classes = 5;
  std::size_t images_per_class = 200;
  double anomaly_fraction = 0.5;
  std::size_t g = 8;
  std::size_t d_enc = 64;
  std::size_t d = 32;  // compressed width; carried for downstream defaults
  std::size_t n_crops = 2;
  std::size_t patch_size = 3;  // planted region side, in tokens
  double anomaly_shift_norm = 6.0;  // default profile keeps shift well above noise
  double noise_sigma = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(anomaly_fraction > 0.0 && anomaly_fraction < 1.0))
      throw UsageError("synth: anomaly_fraction must be inside (0,1)");
    if (patch_size == 0 || patch_size >= g)
      throw UsageError("synth: patch_size must be in [1, g)");
    if (n_classes == 0 || images_per_class == 0 || d_enc == 0 || n_crops == 0)
      throw UsageError("synth: counts must be positive");
  }
};

namespace detail {

inline std::vector<double> unit_direction(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm2 += x * x;
    }
  } while (norm2 == 0.0);
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

}  // namespace detail

/// Each class gets one unit mean direction and one unit anomaly direction.
/// Normal tokens are mean + Gaussian noise; anomalous images additionally
/// shift a contiguous patch_size x patch_size token block by
/// anomaly_shift_norm along the class anomaly direction, in the final matrix
/// and all four level matrices of every crop. Per class, the first
/// round(images_per_class * anomaly_fraction) images are the anomalous ones.
inline std::vector<FeatureBundle> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  std::vector<FeatureBundle> out;
  out.reserve(cfg.n_classes * cfg.images_per_class);
  const std::size_t tokens = cfg.g * cfg.g;
  const std::size_t n_anom =
      static_cast<std::size_t>(std::llround(cfg.anomaly_fraction * static_cast<double>(cfg.images_per_class)));

  for (std::size_t c = 0; c < cfg.n_classes; ++c) {
    Rng dir_rng = root.fork((static_cast<std::uint64_t>(c) << 32) | 0);
    std::vector<double> mu = detail::unit_direction(dir_rng, cfg.d_enc);
    std::vector<double> anom_dir = detail::unit_direction(dir_rng, cfg.d_enc);

    for (std::size_t j = 0; j < cfg.images_per_class; ++j) {
      Rng img_rng = root.fork((static_cast<std::uint64_t>(c) << 32) | (j + 1));
      FeatureBundle b;
      b.layout = CropLayout{cfg.n_crops, cfg.g};
      b.d_enc = cfg.d_enc;
      b.class_id = static_cast<std::int32_t>(c);
      b.label = j < n_anom ? 1 : 0;

      if (b.label == 1) {
        std::size_t span = cfg.g - cfg.patch_size + 1;
        std::size_t r0 = img_rng.index(span);
        std::size_t c0 = img_rng.index(span);
        for (std::size_t dr = 0; dr < cfg.patch_size; ++dr)
          for (std::size_t dc = 0; dc < cfg.patch_size; ++dc)
            b.anomaly_region.push_back(static_cast<std::uint32_t>((r0 + dr) * cfg.g + (c0 + dc)));
      }

      auto fill = [&](std::vector<float>& m) {
        m.resize(tokens * cfg.d_enc);
        for (std::size_t t = 0; t < tokens; ++t)
          for (std::size_t k = 0; k < cfg.d_enc; ++k)
            m[t * cfg.d_enc + k] =
                static_cast<float>(mu[k] + cfg.noise_sigma * img_rng.normal());
        for (std::uint32_t t : b.anomaly_region)
          for (std::size_t k = 0; k < cfg.d_enc; ++k)
            m[t * cfg.d_enc + k] += static_cast<float>(cfg.anomaly_shift_norm * anom_dir[k]);
      };

      b.v_final.resize(cfg.n_crops);
      for (auto& m : b.v_final) fill(m);
      for (auto& level : b.v_levels) {
        level.resize(cfg.n_crops);
        for (auto& m : level) fill(m);
      }
      out.push_back(std::move(b));
    }
  }
  return out;
}

/// One dataset row: a bundle file plus its supervision. "source_layers" is
/// reserved metadata for externally extracted features and is carried
/// through untouched when present.
struct ManifestEntry {
  std::string path;
  int label = 0;
  std::int32_t class_id = 0;
  std::optional<std::vector<int>> source_layers;
};

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("write_manifest: cannot open '" + path + "'");
  for (const auto& e : entries) {
    nlohmann::json j{{"path", e.path}, {"label", e.label}, {"class", e.class_id}};
    if (e.source_layers) j["source_layers"] = *e.source_layers;
    os << j.dump() << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("read_manifest: cannot open '" + path + "'");
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("path") || !j.contains("label") || !j.contains("class"))
      throw DataError("manifest line " + std::to_string(lineno) +
                      ": required keys are path, label, class");
    ManifestEntry e;
    e.path = j.at("path").get<std::string>();
    e.label = j.at("label").get<int>();
    e.class_id = j.at("class").get<std::int32_t>();
    if (e.label != 0 && e.label != 1)
      throw DataError("manifest line " + std::to_string(lineno) + ": label must be 0 or 1");
    if (j.contains("source_layers")) e.source_layers = j.at("source_layers").get<std::vector<int>>();
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace aov
