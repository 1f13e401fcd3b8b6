#pragma once

#include <cstdint>

#include "mvh/dataset.hpp"

namespace mvh {

struct RigConfig {
  std::size_t views = 8;
  double radius = 600.0;     ///< mm
  double focal = 150.0;      ///< px
  double frame_size = 256.0; ///< px, square
  double volume = 400.0;     ///< mm, cube edge centred at the origin
};

/// Cameras on a sphere around the origin with golden-angle azimuths and jittered
/// elevation, radius and focal length. Throws if any working-volume corner leaves a
/// frame or the first two views cannot triangulate the origin.
Rig generate_rig(const RigConfig& cfg, std::uint64_t seed);

struct MotionConfig {
  double v_max = 6.0;        ///< mm per frame, largest joint displacement allowed
  double wrist_amp = 30.0;   ///< mm
  double rot_amp = 0.25;     ///< rad, global orientation wobble
  double flex_amp = 0.35;    ///< rad
  double max_freq = 0.02;    ///< cycles per frame
};

/// Smooth random motion: slowly varying wrist position, orientation wobble around a
/// random base orientation and per-finger flexion, all sums of sinusoids. Returns the
/// parameters [T, 86] and joints [T, J, 3]. Checks the v_max bound.
struct Motion {
  Array params;
  Array joints;
};
Motion generate_motion(const SkeletonTemplate& tmpl, std::size_t frames, std::uint64_t seed,
                       const MotionConfig& cfg = {});

/// joints [T, J, 3] -> pixels [T, V, J, 2]. Points behind a camera are an error.
Array project_sequence(const Array& joints, const Rig& rig);

struct Corrupted {
  Array pseudo;  ///< [T, V, J, 2]
  Array conf;    ///< [T, V, J]
};
/// Noise, outliers and occlusion per the profile; reproducible from (seed, profile).
Corrupted corrupt(const Array& gt2d, const CorruptionProfile& profile, std::uint64_t seed, double frame_size = 256.0);

struct GenerateConfig {
  std::size_t sequences = 10;
  std::size_t frames = 30;
  std::string profile = "detector-weak";
  std::uint64_t seed = 0;
  std::size_t first_sequence = 0;  ///< id of the first sequence; splits share the rig of their seed
  RigConfig rig;
  MotionConfig motion;
};

/// Sequence i draws its motion and corruption from seeds derived from (seed, first_sequence + i).
Dataset generate_dataset(const GenerateConfig& cfg);

/// Deterministic seed derivation (splitmix64 of the mixed inputs).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

}  // namespace mvh
