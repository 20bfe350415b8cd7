#include "agar/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace agar {

namespace {

// Snap to a 1/1024 grid: sums of snapped values and snapped velocities stay
// exactly representable, so rigid translation preserves distances bit-exact.
double snap(double x) { return std::round(x * 1024.0) / 1024.0; }

// ---------------------------------------------------------------------------
// Glyph strokes

struct Stroke {
  // kind 0: segment p0 -> p1; kind 1: arc around c with radius r, t0 -> t1
  int kind;
  double p0x, p0y, p1x, p1y;
  double cx, cy, r, t0, t1;
  double length() const {
    if (kind == 0) return std::hypot(p1x - p0x, p1y - p0y);
    return std::abs(t1 - t0) * r;
  }
  void at(double s, double& x, double& y) const {  // s in [0, 1]
    if (kind == 0) {
      x = p0x + s * (p1x - p0x);
      y = p0y + s * (p1y - p0y);
    } else {
      const double t = t0 + s * (t1 - t0);
      x = cx + r * std::cos(t);
      y = cy + r * std::sin(t);
    }
  }
};

Stroke segment(double x0, double y0, double x1, double y1) {
  Stroke s{};
  s.kind = 0;
  s.p0x = x0; s.p0y = y0; s.p1x = x1; s.p1y = y1;
  return s;
}

Stroke arc(double cx, double cy, double r, double t0, double t1) {
  Stroke s{};
  s.kind = 1;
  s.cx = cx; s.cy = cy; s.r = r; s.t0 = t0; s.t1 = t1;
  return s;
}

constexpr double kPi = 3.14159265358979323846;

std::vector<Stroke> glyph_strokes(int glyph) {
  switch (glyph) {
    case 0:  // crossing diagonals
      return {segment(0, 0, 1, 1), segment(0, 1, 1, 0)};
    case 1:  // ring
      return {arc(0.5, 0.5, 0.5, 0.0, 2.0 * kPi)};
    case 2:  // corner strokes
      return {segment(0, 1, 0, 0), segment(0, 0, 1, 0)};
    case 3:  // double bend
      return {arc(0.5, 0.75, 0.25, -0.5 * kPi, 0.5 * kPi),
              arc(0.5, 0.25, 0.25, 0.5 * kPi, 1.5 * kPi)};
    default:
      throw ConfigError("gen_rigid: glyph id must be 0..3");
  }
}

// Even arc-length sampling of the stroke set, scaled, snapped to the grid.
Matrix sample_glyph(int glyph, Index count, double scale) {
  const std::vector<Stroke> strokes = glyph_strokes(glyph);
  double total = 0.0;
  for (const Stroke& s : strokes) total += s.length();
  Matrix pts(count, 3);
  for (Index i = 0; i < count; ++i) {
    // Midpoint positions avoid duplicating shared stroke endpoints.
    double target = (double(i) + 0.5) / double(count) * total;
    double x = 0, y = 0;
    for (const Stroke& s : strokes) {
      const double len = s.length();
      if (target <= len || &s == &strokes.back()) {
        s.at(std::min(1.0, std::max(0.0, target / len)), x, y);
        break;
      }
      target -= len;
    }
    pts(i, 0) = snap(x * scale);
    pts(i, 1) = snap(y * scale);
    pts(i, 2) = 0.0;
  }
  return pts;
}

struct MovingBody {
  Matrix base;  // body-frame points
  double cx, cy;
  double vx, vy;
};

}  // namespace

SequenceData gen_rigid(const RigidConfig& config, std::uint64_t seed) {
  if (config.points < 2) throw ConfigError("gen_rigid: need at least 2 points");
  if (config.frames < 2) throw ConfigError("gen_rigid: need at least 2 frames");
  if (config.glyph_count < 1 || config.glyph_count > 2)
    throw ConfigError("gen_rigid: glyph_count must be 1 or 2");
  if (config.high - config.low < 2.0 * config.scale_max)
    throw ConfigError("gen_rigid: bounds too tight for the glyph scale");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<MovingBody> bodies;
  const Index per = config.points / config.glyph_count;
  for (int g = 0; g < config.glyph_count; ++g) {
    const Index count =
        g + 1 == config.glyph_count ? config.points - per * g : per;
    const int glyph = config.glyph >= 0
                          ? config.glyph
                          : int(rng() % 4);
    const double scale =
        config.scale_min + unit(rng) * (config.scale_max - config.scale_min);
    MovingBody body;
    body.base = sample_glyph(glyph, count, scale);
    const double bx0 = body.base.col(0).minCoeff();
    const double bx1 = body.base.col(0).maxCoeff();
    const double by0 = body.base.col(1).minCoeff();
    const double by1 = body.base.col(1).maxCoeff();
    // Start anywhere the body fits; snapped so translation stays exact.
    body.cx = snap(config.low - bx0 +
                   unit(rng) * ((config.high - bx1) - (config.low - bx0)));
    body.cy = snap(config.low - by0 +
                   unit(rng) * ((config.high - by1) - (config.low - by0)));
    const double speed =
        config.speed_min + unit(rng) * (config.speed_max - config.speed_min);
    const double angle = unit(rng) * 2.0 * kPi;
    body.vx = snap(speed * std::cos(angle));
    body.vy = snap(speed * std::sin(angle));
    bodies.push_back(std::move(body));
  }

  SequenceData out;
  out.generator = "rigid";
  out.seed = seed;
  out.name = "rigid_s" + std::to_string(seed);
  out.frames.reserve(std::size_t(config.frames));
  for (int t = 0; t < config.frames; ++t) {
    Matrix frame(config.points, 3);
    Index at = 0;
    for (MovingBody& body : bodies) {
      for (Index i = 0; i < body.base.rows(); ++i) {
        frame(at, 0) = body.base(i, 0) + body.cx;
        frame(at, 1) = body.base(i, 1) + body.cy;
        frame(at, 2) = 0.0;
        ++at;
      }
      // Advance with elastic reflection per axis.
      const double bx0 = body.base.col(0).minCoeff();
      const double bx1 = body.base.col(0).maxCoeff();
      const double by0 = body.base.col(1).minCoeff();
      const double by1 = body.base.col(1).maxCoeff();
      double nx = body.cx + body.vx;
      if (nx + bx0 < config.low || nx + bx1 > config.high) {
        body.vx = -body.vx;
        nx = body.cx + body.vx;
      }
      double ny = body.cy + body.vy;
      if (ny + by0 < config.low || ny + by1 > config.high) {
        body.vy = -body.vy;
        ny = body.cy + body.vy;
      }
      body.cx = nx;
      body.cy = ny;
    }
    out.frames.push_back(std::move(frame));
  }
  return out;
}

SequenceData gen_articulated(const ArticulatedConfig& config,
                             std::uint64_t seed) {
  if (config.points < 8)
    throw ConfigError("gen_articulated: need at least 8 points");
  if (config.frames < 2)
    throw ConfigError("gen_articulated: need at least 2 frames");
  const double reach = 1.0 + config.limb_length + 0.5;  // torso + limb margin
  if (config.speed_max * double(config.frames) + reach > config.bound)
    throw ConfigError(
        "gen_articulated: bounds too tight for the configured speed and "
        "frame count");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Rigid torso block, snapped to the grid so translation is exact.
  const Index n_torso = config.points / 2;
  const Index n_limb1 = config.points / 4;
  const Index n_limb2 = config.points - n_torso - n_limb1;
  Matrix torso(n_torso, 3);
  for (Index i = 0; i < n_torso; ++i) {
    torso(i, 0) = snap(-0.6 + 1.2 * unit(rng));
    torso(i, 1) = snap(-0.9 + 1.8 * unit(rng));
    torso(i, 2) = snap(-0.3 + 0.6 * unit(rng));
  }

  struct Limb {
    double hinge_x, hinge_y, hinge_z;
    double theta0, rate;
    std::vector<double> radius, side, depth;  // body-frame offsets
  };
  auto make_limb = [&](Index count, double hx, double sgn) {
    Limb limb;
    limb.hinge_x = hx;
    limb.hinge_y = 0.9;
    limb.hinge_z = 0.0;
    limb.theta0 = unit(rng) * 2.0 * kPi;
    limb.rate =
        sgn * (config.rate_min + unit(rng) * (config.rate_max - config.rate_min));
    for (Index i = 0; i < count; ++i) {
      limb.radius.push_back((double(i) + 1.0) / double(count) *
                            config.limb_length);
      limb.side.push_back(-0.04 + 0.08 * unit(rng));
      limb.depth.push_back(-0.04 + 0.08 * unit(rng));
    }
    return limb;
  };
  std::vector<Limb> limbs;
  limbs.push_back(make_limb(n_limb1, -0.6, +1.0));
  limbs.push_back(make_limb(n_limb2, +0.6, -1.0));

  const double speed =
      config.speed_min + unit(rng) * (config.speed_max - config.speed_min);
  const double heading = unit(rng) * 2.0 * kPi;
  const double vx = snap(speed * std::cos(heading));
  const double vy = snap(speed * std::sin(heading));

  SequenceData out;
  out.generator = "articulated";
  out.seed = seed;
  out.name = "articulated_s" + std::to_string(seed);
  out.frames.reserve(std::size_t(config.frames));
  for (int t = 0; t < config.frames; ++t) {
    const double cx = double(t) * vx;
    const double cy = double(t) * vy;
    Matrix frame(config.points, 3);
    for (Index i = 0; i < n_torso; ++i) {
      frame(i, 0) = torso(i, 0) + cx;
      frame(i, 1) = torso(i, 1) + cy;
      frame(i, 2) = torso(i, 2);
    }
    Index at = n_torso;
    for (const Limb& limb : limbs) {
      const double theta = limb.theta0 + limb.rate * double(t);
      const double c = std::cos(theta);
      const double s = std::sin(theta);
      for (std::size_t i = 0; i < limb.radius.size(); ++i) {
        const double r = limb.radius[i];
        const double side = limb.side[i];
        frame(at, 0) = limb.hinge_x + cx + r * c - side * s;
        frame(at, 1) = limb.hinge_y + cy + r * s + side * c;
        frame(at, 2) = limb.hinge_z + limb.depth[i];
        ++at;
      }
    }
    if (frame.cwiseAbs().maxCoeff() > config.bound)
      throw ConfigError("gen_articulated: motion escaped the bounds");
    out.frames.push_back(std::move(frame));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequence files

namespace {

std::string frame_file_name(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frames/frame_%04d.txt", t);
  return buf;
}

void write_frame(const std::filesystem::path& path, const Matrix& frame) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write frame file '" + path.string() + "'");
  char buf[96];
  for (Index i = 0; i < frame.rows(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", frame(i, 0),
                  frame(i, 1), frame(i, 2));
    os << buf;
  }
}

Matrix read_frame(const std::filesystem::path& path, Index expected_points) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open frame file '" + path.string() + "'");
  Matrix frame(expected_points, 3);
  std::string line;
  Index row = 0;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (row >= expected_points)
      throw FormatError("frame file '" + path.string() + "' line " +
                        std::to_string(line_no) + ": more points than declared");
    std::istringstream fields(line);
    double x, y, z;
    std::string extra;
    if (!(fields >> x >> y >> z) || (fields >> extra))
      throw FormatError("frame file '" + path.string() + "' line " +
                        std::to_string(line_no) +
                        ": expected exactly three fields");
    frame(row, 0) = x;
    frame(row, 1) = y;
    frame(row, 2) = z;
    ++row;
  }
  if (row != expected_points)
    throw FormatError("frame file '" + path.string() + "' holds " +
                      std::to_string(row) + " points, manifest declares " +
                      std::to_string(expected_points));
  return frame;
}

}  // namespace

void save_sequence(const SequenceData& sequence,
                   const std::filesystem::path& dir) {
  if (sequence.length() < 2)
    throw FormatError("save_sequence: sequences need at least two frames");
  std::filesystem::create_directories(dir / "frames");
  nlohmann::json manifest;
  manifest["name"] = sequence.name;
  manifest["generator"] = sequence.generator;
  manifest["seed"] = sequence.seed;
  manifest["split"] = sequence.split;
  manifest["T"] = sequence.length();
  manifest["N"] = sequence.points();
  std::vector<std::string> files;
  for (int t = 0; t < sequence.length(); ++t) {
    files.push_back(frame_file_name(t));
    write_frame(dir / files.back(), sequence.frames[std::size_t(t)]);
  }
  manifest["frames"] = files;
  std::ofstream os(dir / "manifest.json");
  if (!os)
    throw FormatError("cannot write manifest in '" + dir.string() + "'");
  os << manifest.dump(2) << '\n';
}

SequenceData load_sequence(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is)
    throw FormatError("cannot open manifest '" + manifest_path.string() + "'");
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + manifest_path.string() +
                      "' is not valid JSON: " + e.what());
  }
  SequenceData out;
  try {
    out.name = manifest.at("name").get<std::string>();
    out.generator = manifest.at("generator").get<std::string>();
    out.seed = manifest.at("seed").get<std::uint64_t>();
    out.split = manifest.at("split").get<std::string>();
    const int t = manifest.at("T").get<int>();
    const Index n = manifest.at("N").get<Index>();
    const auto files = manifest.at("frames").get<std::vector<std::string>>();
    if (t < 2)
      throw FormatError("manifest '" + manifest_path.string() +
                        "' declares fewer than two frames");
    if (int(files.size()) != t)
      throw FormatError("manifest '" + manifest_path.string() + "' declares " +
                        std::to_string(t) + " frames but lists " +
                        std::to_string(files.size()) + " files");
    const std::filesystem::path dir = manifest_path.parent_path();
    for (const std::string& file : files)
      out.frames.push_back(read_frame(dir / file, n));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + manifest_path.string() +
                      "' is missing fields: " + e.what());
  }
  return out;
}

std::vector<std::filesystem::path> find_manifests(
    const std::filesystem::path& root) {
  std::vector<std::filesystem::path> found;
  if (!std::filesystem::exists(root))
    throw FormatError("data directory '" + root.string() + "' does not exist");
  for (const auto& entry :
       std::filesystem::recursive_directory_iterator(root))
    if (entry.is_regular_file() && entry.path().filename() == "manifest.json")
      found.push_back(entry.path());
  std::sort(found.begin(), found.end());
  return found;
}

}  // namespace agar
