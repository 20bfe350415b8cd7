#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "agar/types.hpp"

namespace agar {

// One synthetic point-cloud sequence plus its provenance.
struct SequenceData {
  std::string name;
  std::string generator;  // "rigid" | "articulated"
  std::uint64_t seed = 0;
  std::string split = "train";
  std::vector<Matrix> frames;  // T frames of N x 3

  int length() const { return int(frames.size()); }
  Index points() const { return frames.empty() ? 0 : frames[0].rows(); }
};

/**
 * Rigid planar glyphs: a procedural stroke pattern (choice, scale, start and
 * velocity drawn from the seed) sampled to a fixed point count, translated
 * with constant velocity and reflected elastically off the bounds. Z stays
 * zero. Coordinates are snapped to a 1/1024 grid so translation arithmetic
 * is exact and pairwise distances are frame-invariant bit for bit.
 */
struct RigidConfig {
  Index points = 128;
  int frames = 20;
  int glyph = -1;       // -1: drawn from the seed
  int glyph_count = 1;  // 1 or 2 independently moving glyphs
  double low = 0.0;     // bounds per planar axis
  double high = 10.0;
  double speed_min = 0.15;  // per-frame displacement magnitude
  double speed_max = 0.30;
  double scale_min = 1.5;
  double scale_max = 3.0;
};
SequenceData gen_rigid(const RigidConfig& config, std::uint64_t seed);

/**
 * Articulated body: a rigid torso translating with constant velocity plus
 * two limbs swinging about hinge points that ride on the torso, each with
 * its own seed-drawn phase and angular rate. Motion stays inside the bounds
 * by construction (validated).
 */
struct ArticulatedConfig {
  Index points = 96;
  int frames = 12;
  double bound = 8.0;       // coordinates stay within [-bound, bound]
  double speed_min = 0.05;  // torso per-frame displacement
  double speed_max = 0.12;
  double rate_min = 0.25;   // limb angular rate per frame (radians)
  double rate_max = 0.45;
  double limb_length = 1.0;
};
SequenceData gen_articulated(const ArticulatedConfig& config,
                             std::uint64_t seed);

// Writes <dir>/manifest.json plus frames/frame_<t>.txt (one point per line,
// three fields, round-trip-exact formatting).
void save_sequence(const SequenceData& sequence,
                   const std::filesystem::path& dir);
SequenceData load_sequence(const std::filesystem::path& manifest_path);

// All manifest.json files under root, sorted by path.
std::vector<std::filesystem::path> find_manifests(
    const std::filesystem::path& root);

}  // namespace agar
