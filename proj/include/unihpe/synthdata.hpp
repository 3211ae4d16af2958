#pragma once

// Deterministic synthetic tri-modal pose data. Three views of the same
// sample: an articulated 3D skeleton (mm, pelvis-relative), its pinhole
// projection into bbox-normalized 2D keypoints, and a splat-grid
// pseudo-image standing in for an RGB crop. Everything downstream of a
// record's seed is a pure function of that seed, so datasets are stored
// as (pose, camera, seed) and pseudo-images are re-rendered on demand.

#include <array>
#include <cmath>
#include <numbers>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unihpe/numkit.hpp"

namespace unihpe::synth {

// ---------------------------------------------------------------------------
// Skeleton specification and sampling
// ---------------------------------------------------------------------------

// One entry per joint. Entry 0 is the root (pelvis): parent must be -1 and
// the bone fields are ignored. Every other entry describes the bone from its
// parent: a rest direction in the parent's frame, an anatomical length range
// in mm, and the largest rotation (radians) the joint may apply to that
// direction. Zero rotations everywhere reproduce the rest pose exactly.
struct Bone {
  int parent = -1;
  numkit::Vec3 rest_dir{0.0, 0.0, 0.0};
  double len_lo = 0.0;
  double len_hi = 0.0;
  double max_angle = 0.0;
};

struct SkeletonSpec {
  std::vector<Bone> joints;

  std::size_t joint_count() const { return joints.size(); }

  // 16-joint humanoid: spine chain up +y, arms out along +/-x (a T-pose at
  // rest), legs down -y. Ranges are loose anatomical mm. The root stays
  // upright; global orientation diversity comes from the camera instead,
  // which keeps limbs from piling onto the torso in the projected crop.
  static SkeletonSpec human16() {
    SkeletonSpec s;
    s.joints.resize(16);
    auto set = [&](int j, int parent, numkit::Vec3 dir, double lo, double hi,
                   double ang) {
      s.joints[j] = Bone{parent, dir, lo, hi, ang};
    };
    s.joints[0].max_angle = 0.0;
    set(1, 0, {0, 1, 0}, 200, 260, 0.25);    // spine
    set(2, 1, {0, 1, 0}, 180, 230, 0.25);    // thorax
    set(3, 2, {0, 1, 0}, 200, 250, 0.35);    // head
    set(4, 2, {1, 0, 0}, 140, 190, 0.20);    // l shoulder
    set(5, 4, {1, 0, 0}, 250, 310, 0.70);    // l elbow
    set(6, 5, {1, 0, 0}, 230, 290, 0.80);    // l wrist
    set(7, 2, {-1, 0, 0}, 140, 190, 0.20);   // r shoulder
    set(8, 7, {-1, 0, 0}, 250, 310, 0.70);   // r elbow
    set(9, 8, {-1, 0, 0}, 230, 290, 0.80);   // r wrist
    set(10, 0, {1, 0, 0}, 100, 140, 0.15);   // l hip
    set(11, 10, {0, -1, 0}, 380, 470, 0.90); // l knee
    set(12, 11, {0, -1, 0}, 360, 450, 0.90); // l ankle
    set(13, 0, {-1, 0, 0}, 100, 140, 0.15);  // r hip
    set(14, 13, {0, -1, 0}, 380, 470, 0.90); // r knee
    set(15, 14, {0, -1, 0}, 360, 450, 0.90); // r ankle
    return s;
  }
};

// Throws on any topology or range defect. In particular every joint's parent
// chain must reach the root in at most J hops; a longer walk means a cycle.
inline void validate_skeleton(const SkeletonSpec& spec) {
  const std::size_t j_count = spec.joint_count();
  if (j_count == 0)
    throw std::invalid_argument("validate_skeleton: spec has no joints");
  if (spec.joints[0].parent != -1)
    throw std::invalid_argument("validate_skeleton: joint 0 must be the root (parent -1)");
  if (!(spec.joints[0].max_angle >= 0.0))
    throw std::invalid_argument("validate_skeleton: joint 0 has negative max_angle");
  for (std::size_t j = 1; j < j_count; ++j) {
    const Bone& b = spec.joints[j];
    if (b.parent < 0 || static_cast<std::size_t>(b.parent) >= j_count ||
        static_cast<std::size_t>(b.parent) == j)
      throw std::invalid_argument("validate_skeleton: joint " + std::to_string(j) +
                                  " has invalid parent " + std::to_string(b.parent));
    std::size_t cursor = j, hops = 0;
    while (cursor != 0) {
      cursor = static_cast<std::size_t>(spec.joints[cursor].parent);
      if (++hops > j_count)
        throw std::invalid_argument("validate_skeleton: topology has a cycle involving joint " +
                                    std::to_string(j));
    }
    if (!(b.len_lo > 0.0) || !(b.len_hi >= b.len_lo))
      throw std::invalid_argument("validate_skeleton: joint " + std::to_string(j) +
                                  " has invalid length range");
    if (!(b.max_angle >= 0.0))
      throw std::invalid_argument("validate_skeleton: joint " + std::to_string(j) +
                                  " has negative max_angle");
    if (numkit::norm3(b.rest_dir) < 1e-12)
      throw std::invalid_argument("validate_skeleton: joint " + std::to_string(j) +
                                  " has a zero rest direction");
  }
}

namespace detail {

// Rodrigues: rotation matrix for the axis-angle vector r (angle = |r|).
inline numkit::Mat3 rotation_from_rotvec(const numkit::Vec3& r) {
  const double angle = numkit::norm3(r);
  numkit::Mat3 rot = numkit::Mat3::identity();
  if (angle < 1e-14) return rot;
  const numkit::Vec3 axis = numkit::scale3(r, 1.0 / angle);
  const double c = std::cos(angle), s = std::sin(angle), ic = 1.0 - c;
  const double x = axis[0], y = axis[1], z = axis[2];
  rot(0, 0) = c + x * x * ic;
  rot(0, 1) = x * y * ic - z * s;
  rot(0, 2) = x * z * ic + y * s;
  rot(1, 0) = y * x * ic + z * s;
  rot(1, 1) = c + y * y * ic;
  rot(1, 2) = y * z * ic - x * s;
  rot(2, 0) = z * x * ic - y * s;
  rot(2, 1) = z * y * ic + x * s;
  rot(2, 2) = c + z * z * ic;
  return rot;
}

}  // namespace detail

// Deterministic forward kinematics. lengths[j] and rotvecs[j] parameterize
// the bone into joint j (index 0 entries are ignored). Each joint's rotation
// composes with its parent's, so rotating a shoulder carries the whole arm.
// The root sits at the origin, which makes the result pelvis-relative by
// construction.
inline numkit::Matrix skeleton_from_params(const SkeletonSpec& spec,
                                           const std::vector<double>& lengths,
                                           const std::vector<numkit::Vec3>& rotvecs) {
  validate_skeleton(spec);
  const std::size_t j_count = spec.joint_count();
  if (lengths.size() != j_count || rotvecs.size() != j_count)
    throw std::invalid_argument("skeleton_from_params: need one length and rotvec per joint");
  for (std::size_t j = 1; j < j_count; ++j) {
    const Bone& b = spec.joints[j];
    if (lengths[j] < b.len_lo || lengths[j] > b.len_hi)
      throw std::invalid_argument("skeleton_from_params: length for joint " + std::to_string(j) +
                                  " outside its range");
  }

  std::vector<numkit::Mat3> frame(j_count, numkit::Mat3::identity());
  std::vector<numkit::Vec3> pos(j_count, numkit::Vec3{0, 0, 0});
  std::vector<char> done(j_count, 0);
  // The root carries no bone but its rotation orients the whole body.
  frame[0] = detail::rotation_from_rotvec(rotvecs[0]);
  done[0] = 1;
  // validate_skeleton has ruled out cycles, so this recursion terminates.
  auto resolve = [&](auto&& self, std::size_t j) -> void {
    if (done[j]) return;
    const Bone& b = spec.joints[j];
    const auto p = static_cast<std::size_t>(b.parent);
    self(self, p);
    frame[j] = numkit::mul(frame[p], detail::rotation_from_rotvec(rotvecs[j]));
    const numkit::Vec3 dir =
        numkit::scale3(b.rest_dir, 1.0 / numkit::norm3(b.rest_dir));
    pos[j] = numkit::add3(pos[p], numkit::scale3(numkit::mul(frame[j], dir), lengths[j]));
    done[j] = 1;
  };
  for (std::size_t j = 1; j < j_count; ++j) resolve(resolve, j);

  numkit::Matrix out(j_count, 3);
  for (std::size_t j = 0; j < j_count; ++j)
    for (std::size_t c = 0; c < 3; ++c) out.at(j, c) = pos[j][c];
  return out;
}

// Samples bone lengths uniformly within their ranges and joint rotations as
// a uniform random axis scaled by an angle uniform in [0, max_angle]; the
// root's rotation (no bone attached) randomizes global body orientation.
// Draw order is fixed (root rotation, then per joint: length, axis, angle)
// so a seed pins the pose.
inline numkit::Matrix generate_skeleton(numkit::Rng& rng, const SkeletonSpec& spec) {
  validate_skeleton(spec);
  const std::size_t j_count = spec.joint_count();
  std::vector<double> lengths(j_count, 0.0);
  std::vector<numkit::Vec3> rotvecs(j_count, numkit::Vec3{0, 0, 0});
  auto draw_rotvec = [&rng](double max_angle) {
    numkit::Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    const double n = numkit::norm3(axis);
    axis = (n < 1e-12) ? numkit::Vec3{1, 0, 0} : numkit::scale3(axis, 1.0 / n);
    return numkit::scale3(axis, rng.uniform(0.0, max_angle));
  };
  rotvecs[0] = draw_rotvec(spec.joints[0].max_angle);
  for (std::size_t j = 1; j < j_count; ++j) {
    const Bone& b = spec.joints[j];
    lengths[j] = rng.uniform(b.len_lo, b.len_hi);
    rotvecs[j] = draw_rotvec(b.max_angle);
  }
  return skeleton_from_params(spec, lengths, rotvecs);
}

// ---------------------------------------------------------------------------
// Camera model and projection
// ---------------------------------------------------------------------------

// Pinhole camera: x_cam = R * x_body + t, pixel u = f * x/z + pp. With the
// body frame pelvis-centered, t is exactly the camera-frame pelvis, so a
// stored pelvis-relative pose re-projects as (pose3d + t).
struct CameraParams {
  double f = 1000.0;
  std::array<double, 2> pp{0.0, 0.0};
  numkit::Mat3 R = numkit::Mat3::identity();
  numkit::Vec3 t{0.0, 0.0, 0.0};
};

// Bbox-normalized 2D pose. joints is J x 2 in bbox units ((0,0) = top-left
// of the box, (1,1) = bottom-right); bbox is (center_x, center_y, width,
// height) in pixels.
struct Pose2D {
  numkit::Matrix joints;
  std::array<double, 4> bbox{0.0, 0.0, 0.0, 0.0};
};

inline numkit::Matrix pixel_joints(const Pose2D& pose) {
  numkit::Matrix px(pose.joints.rows, 2);
  for (std::size_t j = 0; j < pose.joints.rows; ++j) {
    px.at(j, 0) = (pose.joints.at(j, 0) - 0.5) * pose.bbox[2] + pose.bbox[0];
    px.at(j, 1) = (pose.joints.at(j, 1) - 0.5) * pose.bbox[3] + pose.bbox[1];
  }
  return px;
}

// Projects a body-frame J x 3 pose (mm) through cam. The bbox is the tight
// pixel bounds inflated 10% about their center (floored so a degenerate
// single-point cloud still normalizes). jitter_px > 0 adds Gaussian pixel
// noise before the bbox is taken, which keeps normalized joints inside the
// box up to the margin.
inline Pose2D project_to_2d(const numkit::Matrix& pose, const CameraParams& cam,
                            double jitter_px = 0.0, numkit::Rng* rng = nullptr) {
  if (pose.cols != 3 || pose.rows == 0)
    throw std::invalid_argument("project_to_2d: pose must be J x 3 with J >= 1");
  if (jitter_px < 0.0)
    throw std::invalid_argument("project_to_2d: jitter_px must be >= 0");
  if (jitter_px > 0.0 && rng == nullptr)
    throw std::invalid_argument("project_to_2d: jitter requested without an rng");

  const std::size_t j_count = pose.rows;
  numkit::Matrix px(j_count, 2);
  for (std::size_t j = 0; j < j_count; ++j) {
    const numkit::Vec3 p{pose.at(j, 0), pose.at(j, 1), pose.at(j, 2)};
    const numkit::Vec3 c = numkit::add3(numkit::mul(cam.R, p), cam.t);
    if (!(c[2] > 0.0))
      throw std::invalid_argument("project_to_2d: joint " + std::to_string(j) +
                                  " is behind the camera (z = " + std::to_string(c[2]) + ")");
    px.at(j, 0) = cam.f * c[0] / c[2] + cam.pp[0];
    px.at(j, 1) = cam.f * c[1] / c[2] + cam.pp[1];
  }
  if (jitter_px > 0.0) {
    for (std::size_t j = 0; j < j_count; ++j) {
      px.at(j, 0) += jitter_px * rng->normal();
      px.at(j, 1) += jitter_px * rng->normal();
    }
  }

  double min_u = px.at(0, 0), max_u = px.at(0, 0);
  double min_v = px.at(0, 1), max_v = px.at(0, 1);
  for (std::size_t j = 1; j < j_count; ++j) {
    min_u = std::min(min_u, px.at(j, 0));
    max_u = std::max(max_u, px.at(j, 0));
    min_v = std::min(min_v, px.at(j, 1));
    max_v = std::max(max_v, px.at(j, 1));
  }
  Pose2D out;
  out.bbox[0] = 0.5 * (min_u + max_u);
  out.bbox[1] = 0.5 * (min_v + max_v);
  out.bbox[2] = std::max(1.1 * (max_u - min_u), 1e-6);
  out.bbox[3] = std::max(1.1 * (max_v - min_v), 1e-6);
  out.joints = numkit::Matrix(j_count, 2);
  for (std::size_t j = 0; j < j_count; ++j) {
    out.joints.at(j, 0) = (px.at(j, 0) - out.bbox[0]) / out.bbox[2] + 0.5;
    out.joints.at(j, 1) = (px.at(j, 1) - out.bbox[1]) / out.bbox[3] + 0.5;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo-images
// ---------------------------------------------------------------------------

// Two G x G planes. splat: sum of unit-mass isotropic Gaussians, one per
// keypoint, in grid-cell units. appearance: the same Gaussians tinted by a
// fixed per-keypoint albedo, plus low-amplitude structured noise (a 4 x 4
// Gaussian field bilinearly upsampled) unique per sample. The tints make
// body parts tellable apart (the splat plane alone cannot distinguish a
// left wrist from a right one); the noise carries information the 2D pose
// does not, standing in for clothing and lighting.
struct PseudoImage {
  int grid = 0;
  numkit::Matrix splat;
  numkit::Matrix appearance;

  // 1 x 2G^2 row: splat plane then appearance plane, each row-major.
  numkit::Matrix flatten() const {
    numkit::Matrix out(1, 2 * splat.size());
    for (std::size_t i = 0; i < splat.size(); ++i) out.v[i] = splat.v[i];
    for (std::size_t i = 0; i < appearance.size(); ++i)
      out.v[splat.size() + i] = appearance.v[i];
    return out;
  }
};

inline constexpr int kDefaultGrid = 16;
inline constexpr double kDefaultSplatSigma = 0.75;

// Per-keypoint albedo for the appearance plane: alternating sign with a
// graded magnitude. Mirrored body parts sit three indices apart in the
// humanoid spec, so they land on opposite signs and stay distinguishable
// even when their splats look identical.
inline double keypoint_tint(std::size_t j, std::size_t j_count) {
  const double mag = 0.3 + 1.2 * static_cast<double>(j + 1) / static_cast<double>(j_count);
  return (j % 2 == 0) ? mag : -mag;
}

inline PseudoImage rasterize_pseudo_image(const Pose2D& pose, int grid,
                                          double splat_sigma, numkit::Rng& rng) {
  if (grid < 4)
    throw std::invalid_argument("rasterize_pseudo_image: grid must be >= 4");
  if (!(splat_sigma > 0.0))
    throw std::invalid_argument("rasterize_pseudo_image: splat_sigma must be positive");
  if (pose.joints.cols != 2)
    throw std::invalid_argument("rasterize_pseudo_image: pose joints must be J x 2");

  PseudoImage img;
  img.grid = grid;
  img.splat = numkit::Matrix(grid, grid);
  img.appearance = numkit::Matrix(grid, grid);

  // Normalized [0,1] maps onto the grid interior with a 2-cell inset on
  // every side, so even bbox-extreme keypoints keep essentially their whole
  // Gaussian on-grid (the mass invariant would break at the borders
  // otherwise). u = 0.5 still lands exactly on the center cell of an odd
  // grid. The 4-sigma window keeps the dropped tail below 1e-6 of a splat.
  const double sigmas[2] = {splat_sigma, splat_sigma};
  const double inset = 2.0;
  const double span = static_cast<double>(grid - 1) - 2.0 * inset;
  for (std::size_t j = 0; j < pose.joints.rows; ++j) {
    const double tint = keypoint_tint(j, pose.joints.rows);
    const double gx = inset + pose.joints.at(j, 0) * span;
    const double gy = inset + pose.joints.at(j, 1) * span;
    for (int plane = 0; plane < 2; ++plane) {
      const double sig = sigmas[plane];
      const double inv_norm = 1.0 / (2.0 * std::numbers::pi * sig * sig);
      const double inv_two_sigma_sq = 1.0 / (2.0 * sig * sig);
      const double window = 4.0 * sig;
      const int r_lo = std::max(0, static_cast<int>(std::ceil(gy - window)));
      const int r_hi = std::min(grid - 1, static_cast<int>(std::floor(gy + window)));
      const int c_lo = std::max(0, static_cast<int>(std::ceil(gx - window)));
      const int c_hi = std::min(grid - 1, static_cast<int>(std::floor(gx + window)));
      for (int r = r_lo; r <= r_hi; ++r)
        for (int c = c_lo; c <= c_hi; ++c) {
          const double du = c - gx, dv = r - gy;
          const double mass = inv_norm * std::exp(-(du * du + dv * dv) * inv_two_sigma_sq);
          if (plane == 0)
            img.splat.at(r, c) += mass;
          else
            img.appearance.at(r, c) += tint * mass;
        }
    }
  }

  // Coarse 4 x 4 field drawn row-major, then sampled bilinearly at cell
  // centers. Amplitude is far below a splat peak so the pose stays dominant.
  std::array<double, 16> coarse;
  for (double& c : coarse) c = rng.normal(0.0, 0.02);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      const double fy = (r + 0.5) / grid * 3.0;
      const double fx = (c + 0.5) / grid * 3.0;
      const int iy = std::min(2, static_cast<int>(fy));
      const int ix = std::min(2, static_cast<int>(fx));
      const double ty = fy - iy, tx = fx - ix;
      const double v00 = coarse[iy * 4 + ix], v01 = coarse[iy * 4 + ix + 1];
      const double v10 = coarse[(iy + 1) * 4 + ix], v11 = coarse[(iy + 1) * 4 + ix + 1];
      img.appearance.at(r, c) += (1 - ty) * ((1 - tx) * v00 + tx * v01) +
                                 ty * ((1 - tx) * v10 + tx * v11);
    }
  return img;
}

// ---------------------------------------------------------------------------
// Dataset records
// ---------------------------------------------------------------------------

struct SampleRecord {
  std::int64_t id = 0;
  std::uint64_t seed = 0;
  numkit::Matrix pose3d;  // J x 3 mm, pelvis-relative camera frame
  Pose2D pose2d;          // exact projection of (pose3d + camera.t)
  CameraParams camera;
};

namespace detail {

// Stream ids hung off a record's seed. Skeleton and camera draws come from
// the base stream; appearance gets its own split so a pseudo-image can be
// re-rendered without replaying the generation draws.
inline constexpr std::uint64_t kAppearanceStream = 1;

inline SampleRecord make_record(std::int64_t id, std::uint64_t seed,
                                const SkeletonSpec& spec) {
  numkit::Rng gen(seed);
  const numkit::Matrix body = generate_skeleton(gen, spec);

  SampleRecord rec;
  rec.id = id;
  rec.seed = seed;
  rec.camera.f = gen.uniform(1000.0, 1400.0);
  rec.camera.pp = {512.0, 512.0};
  const double yaw = gen.uniform(0.0, 2.0 * std::numbers::pi);
  const double pitch = gen.uniform(-0.3, 0.3);
  const double roll = gen.uniform(-0.15, 0.15);
  rec.camera.R = numkit::mul(
      detail::rotation_from_rotvec({0, 0, roll}),
      numkit::mul(detail::rotation_from_rotvec({pitch, 0, 0}),
                  detail::rotation_from_rotvec({0, yaw, 0})));
  // Depth floor 3.5 m against a < 1.5 m body radius keeps every joint in
  // front of the camera without rejection sampling.
  rec.camera.t = {gen.uniform(-300.0, 300.0), gen.uniform(-200.0, 200.0),
                  gen.uniform(3500.0, 6500.0)};

  rec.pose2d = project_to_2d(body, rec.camera);
  rec.pose3d = numkit::Matrix(body.rows, 3);
  for (std::size_t j = 0; j < body.rows; ++j) {
    const numkit::Vec3 p{body.at(j, 0), body.at(j, 1), body.at(j, 2)};
    const numkit::Vec3 c = numkit::mul(rec.camera.R, p);
    for (std::size_t k = 0; k < 3; ++k) rec.pose3d.at(j, k) = c[k];
  }
  return rec;
}

}  // namespace detail

// Re-renders the pseudo-image a record stands for. Pure in (record, grid,
// sigma): the appearance stream is derived from the record seed alone.
inline PseudoImage record_image(const SampleRecord& rec, int grid = kDefaultGrid,
                                double splat_sigma = kDefaultSplatSigma) {
  numkit::Rng arng = numkit::Rng(rec.seed).split(detail::kAppearanceStream);
  return rasterize_pseudo_image(rec.pose2d, grid, splat_sigma, arng);
}

// Pure function of (n, rng state, spec): record i's seed is the i-th u64 of
// rng, and everything inside the record derives from that seed.
inline std::vector<SampleRecord> make_dataset(std::size_t n, numkit::Rng& rng,
                                              const SkeletonSpec& spec) {
  if (n == 0) throw std::invalid_argument("make_dataset: n must be >= 1");
  validate_skeleton(spec);
  std::vector<SampleRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(detail::make_record(static_cast<std::int64_t>(i), rng.next_u64(), spec));
  return out;
}

// ---------------------------------------------------------------------------
// JSONL file format
// ---------------------------------------------------------------------------
// One record per line:
//   {"id": int, "seed": int, "pose3d": [[mm x3] x J], "pose2d_norm":
//    [[u,v] x J], "bbox": [cx,cy,w,h], "camera": {"f": px, "pp": [px,px],
//    "R": [9 row-major], "t": [mm x3]}}
// Doubles are emitted shortest-round-trip, so write/read is lossless.

inline void write_jsonl(const std::string& path, const std::vector<SampleRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_jsonl: cannot open " + path);
  for (const SampleRecord& rec : records) {
    nlohmann::ordered_json j;
    j["id"] = rec.id;
    j["seed"] = rec.seed;
    auto rows = [](const numkit::Matrix& m) {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (std::size_t r = 0; r < m.rows; ++r) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (std::size_t c = 0; c < m.cols; ++c) row.push_back(m.at(r, c));
        arr.push_back(row);
      }
      return arr;
    };
    j["pose3d"] = rows(rec.pose3d);
    j["pose2d_norm"] = rows(rec.pose2d.joints);
    j["bbox"] = rec.pose2d.bbox;
    j["camera"]["f"] = rec.camera.f;
    j["camera"]["pp"] = rec.camera.pp;
    nlohmann::ordered_json rot = nlohmann::ordered_json::array();
    for (double x : rec.camera.R.m) rot.push_back(x);
    j["camera"]["R"] = rot;
    j["camera"]["t"] = rec.camera.t;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write_jsonl: write to " + path + " failed");
}

inline std::vector<SampleRecord> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_jsonl: cannot open " + path);
  std::vector<SampleRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      auto matrix = [](const nlohmann::json& arr, std::size_t cols, const char* key) {
        if (!arr.is_array() || arr.empty())
          throw std::runtime_error(std::string(key) + " must be a non-empty array");
        numkit::Matrix m(arr.size(), cols);
        for (std::size_t r = 0; r < arr.size(); ++r) {
          if (!arr[r].is_array() || arr[r].size() != cols)
            throw std::runtime_error(std::string(key) + " row " + std::to_string(r) +
                                     " must have " + std::to_string(cols) + " entries");
          for (std::size_t c = 0; c < cols; ++c) m.at(r, c) = arr[r][c].get<double>();
        }
        return m;
      };
      SampleRecord rec;
      rec.id = j.at("id").get<std::int64_t>();
      rec.seed = j.at("seed").get<std::uint64_t>();
      rec.pose3d = matrix(j.at("pose3d"), 3, "pose3d");
      rec.pose2d.joints = matrix(j.at("pose2d_norm"), 2, "pose2d_norm");
      if (rec.pose2d.joints.rows != rec.pose3d.rows)
        throw std::runtime_error("pose2d_norm and pose3d joint counts differ");
      const auto& bbox = j.at("bbox");
      if (!bbox.is_array() || bbox.size() != 4)
        throw std::runtime_error("bbox must have 4 entries");
      for (std::size_t k = 0; k < 4; ++k) rec.pose2d.bbox[k] = bbox[k].get<double>();
      const auto& cam = j.at("camera");
      rec.camera.f = cam.at("f").get<double>();
      const auto& pp = cam.at("pp");
      if (!pp.is_array() || pp.size() != 2)
        throw std::runtime_error("camera.pp must have 2 entries");
      for (std::size_t k = 0; k < 2; ++k) rec.camera.pp[k] = pp[k].get<double>();
      const auto& rot = cam.at("R");
      if (!rot.is_array() || rot.size() != 9)
        throw std::runtime_error("camera.R must have 9 entries");
      for (std::size_t k = 0; k < 9; ++k) rec.camera.R.m[k] = rot[k].get<double>();
      const auto& t = cam.at("t");
      if (!t.is_array() || t.size() != 3)
        throw std::runtime_error("camera.t must have 3 entries");
      for (std::size_t k = 0; k < 3; ++k) rec.camera.t[k] = t[k].get<double>();
      out.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw std::runtime_error("read_jsonl: " + path + ":" + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return out;
}

}  // namespace unihpe::synth
