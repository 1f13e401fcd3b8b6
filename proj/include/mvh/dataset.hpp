#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvh/array.hpp"
#include "mvh/geometry.hpp"
#include "mvh/skeleton.hpp"

namespace mvh {

/// Label corruption emulating an offline 2D detector.
struct CorruptionProfile {
  std::string name = "gt";
  double sigma = 0.0;                ///< px, per coordinate
  double outlier_prob = 0.0;
  double outlier_mag = 0.0;          ///< px; outliers are uniform in a square of this half-width around the truth
  double occlusion_prob = 0.0;       ///< per view-joint
  double occlusion_inflation = 1.0;  ///< noise multiplier when occluded
  double occlusion_conf = 1.0;       ///< confidence multiplier when occluded
  double conf_scale = 8.0;           ///< px; confidence = exp(-error / conf_scale) ...
  double conf_noise = 0.0;           ///< ... plus N(0, conf_noise)

  void validate() const;
  /// "gt", "detector-strong" or "detector-weak".
  static CorruptionProfile named(const std::string& name);
};

struct Sequence {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  Array params;  ///< [T, 86] skeleton parameters
  Array gt3d;    ///< [T, J, 3] mm
  Array gt2d;    ///< [T, V, J, 2] px
  Array pseudo;  ///< [T, V, J, 2] px
  Array conf;    ///< [T, V, J] simulated detector confidence

  std::size_t frames() const { return gt3d.empty() ? 0 : gt3d.dim(0); }
};

struct Dataset {
  std::uint64_t seed = 0;
  double frame_size = 256.0;
  Rig rig;
  SkeletonTemplate skeleton = SkeletonTemplate::canonical();
  CorruptionProfile profile;
  std::vector<Sequence> sequences;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Text header (magic, version, counts, template, rig, profile; floats as hex literals)
/// followed by little-endian float64 blocks per sequence and a CRC-32 of everything before it.
void write_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);
std::string encode_dataset(const Dataset& d);
Dataset decode_dataset(const std::string& bytes);

/// CRC-32 (zlib polynomial).
std::uint32_t crc32_of(const void* data, std::size_t size);

// Shared by the dataset and checkpoint containers.
std::string hex_double(double v);
double parse_hex_double(const std::string& s);
void put_f64_le(std::string& out, double v);
double get_f64_le(const unsigned char* p);
void put_u32_le(std::string& out, std::uint32_t v);
std::uint32_t get_u32_le(const unsigned char* p);

}  // namespace mvh
