#pragma once

// Evaluation metrics: per-joint position errors for 3D poses (raw and after
// similarity alignment), keypoint accuracy and endpoint error for 2D poses,
// batch-level embedding diagnostics (positive-pair cosine, cross-modal
// retrieval), and the MetricReport container results are published through.

#include <unihpe/numkit.hpp>
#include <unihpe/synthdata.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace unihpe::metrics {

namespace detail {

inline void check_joint_match(const char* fn, const numkit::Matrix& pred,
                              const numkit::Matrix& gt, std::size_t want_cols) {
  if (pred.rows != gt.rows)
    throw std::invalid_argument(std::string(fn) + ": joint counts differ (" +
                                std::to_string(pred.rows) + " vs " +
                                std::to_string(gt.rows) + ")");
  if (pred.cols != want_cols || gt.cols != want_cols)
    throw std::invalid_argument(std::string(fn) + ": expected " +
                                std::to_string(want_cols) + " coordinates per joint");
  if (pred.rows == 0)
    throw std::invalid_argument(std::string(fn) + ": empty pose");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 3D pose errors. Inputs are J x 3 pelvis-relative joint matrices; the value
// is in whatever length unit the poses carry (millimeters everywhere in this
// codebase).
// ---------------------------------------------------------------------------

inline double mpjpe(const numkit::Matrix& pred, const numkit::Matrix& gt) {
  detail::check_joint_match("mpjpe", pred, gt, 3);
  double sum = 0.0;
  for (std::size_t j = 0; j < pred.rows; ++j) {
    const double dx = pred.at(j, 0) - gt.at(j, 0);
    const double dy = pred.at(j, 1) - gt.at(j, 1);
    const double dz = pred.at(j, 2) - gt.at(j, 2);
    sum += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return sum / static_cast<double>(pred.rows);
}

// MPJPE after the closed-form similarity alignment of pred onto gt. The
// alignment minimizes the summed squared error over rotation, translation,
// and scale, so any rigid motion or uniform scaling of gt scores zero.
inline double pa_mpjpe(const numkit::Matrix& pred, const numkit::Matrix& gt) {
  detail::check_joint_match("pa_mpjpe", pred, gt, 3);
  std::vector<numkit::Vec3> src(pred.rows), dst(pred.rows);
  for (std::size_t j = 0; j < pred.rows; ++j) {
    src[j] = {pred.at(j, 0), pred.at(j, 1), pred.at(j, 2)};
    dst[j] = {gt.at(j, 0), gt.at(j, 1), gt.at(j, 2)};
  }
  const numkit::SimilarityTransform tf = numkit::procrustes_align(src, dst);
  double sum = 0.0;
  for (std::size_t j = 0; j < pred.rows; ++j) {
    const numkit::Vec3 e = numkit::sub3(tf.apply(src[j]), dst[j]);
    sum += numkit::norm3(e);
  }
  return sum / static_cast<double>(pred.rows);
}

// ---------------------------------------------------------------------------
// 2D pose errors. pred and gt describe the same crop, so their normalized
// coordinates are directly comparable; pixel-space errors de-normalize the
// difference through the ground-truth bbox, which means predictions never
// need to carry a bbox of their own.
// ---------------------------------------------------------------------------

namespace detail {

// Per-joint pixel error between two bbox-normalized poses, via gt's bbox.
inline double pixel_error(const synth::Pose2D& pred, const synth::Pose2D& gt,
                          std::size_t j) {
  const double du = (pred.joints.at(j, 0) - gt.joints.at(j, 0)) * gt.bbox[2];
  const double dv = (pred.joints.at(j, 1) - gt.joints.at(j, 1)) * gt.bbox[3];
  return std::sqrt(du * du + dv * dv);
}

}  // namespace detail

// Fraction of joints whose pixel error is at most threshold * reference_px.
inline double pck(const synth::Pose2D& pred, const synth::Pose2D& gt,
                  double threshold, double reference_px) {
  detail::check_joint_match("pck", pred.joints, gt.joints, 2);
  if (!(reference_px > 0.0))
    throw std::invalid_argument("pck: normalization reference must be positive, got " +
                                std::to_string(reference_px));
  std::size_t hits = 0;
  for (std::size_t j = 0; j < pred.joints.rows; ++j)
    if (detail::pixel_error(pred, gt, j) <= threshold * reference_px) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.joints.rows);
}

// Default reference length: the ground-truth bbox diagonal. The reference is
// a free choice in the literature (head segment is the other common one);
// callers with a different convention pass it explicitly above.
inline double pck(const synth::Pose2D& pred, const synth::Pose2D& gt,
                  double threshold = 0.05) {
  detail::check_joint_match("pck", pred.joints, gt.joints, 2);
  const double diag = std::hypot(gt.bbox[2], gt.bbox[3]);
  if (!(diag > 0.0))
    throw std::invalid_argument("pck: ground-truth bbox has zero diagonal");
  return pck(pred, gt, threshold, diag);
}

// Mean per-joint endpoint error, in pixels by default; in_pixels = false
// reports it in bbox-normalized units and needs no bbox at all.
inline double epe(const synth::Pose2D& pred, const synth::Pose2D& gt,
                  bool in_pixels = true) {
  detail::check_joint_match("epe", pred.joints, gt.joints, 2);
  if (in_pixels && !(gt.bbox[2] > 0.0 && gt.bbox[3] > 0.0))
    throw std::invalid_argument("epe: pixel mode needs a ground-truth bbox");
  double sum = 0.0;
  for (std::size_t j = 0; j < pred.joints.rows; ++j) {
    if (in_pixels) {
      sum += detail::pixel_error(pred, gt, j);
    } else {
      const double du = pred.joints.at(j, 0) - gt.joints.at(j, 0);
      const double dv = pred.joints.at(j, 1) - gt.joints.at(j, 1);
      sum += std::sqrt(du * du + dv * dv);
    }
  }
  return sum / static_cast<double>(pred.joints.rows);
}

// ---------------------------------------------------------------------------
// Embedding diagnostics over B x D batches. Rows are expected unit-norm;
// nothing here re-normalizes.
// ---------------------------------------------------------------------------

inline double mean_positive_cosine(const numkit::Matrix& a, const numkit::Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw std::invalid_argument("mean_positive_cosine: shape mismatch");
  if (a.rows == 0)
    throw std::invalid_argument("mean_positive_cosine: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ra = a.row(i);
    const double* rb = b.row(i);
    double d = 0.0;
    for (std::size_t k = 0; k < a.cols; ++k) d += ra[k] * rb[k];
    sum += d;
  }
  return sum / static_cast<double>(a.rows);
}

// Fraction of rows in a whose highest-cosine match in b sits at the same
// index. Ties go to the earliest candidate, which makes the value exact for
// duplicated rows instead of seed-dependent.
inline double retrieval_top1(const numkit::Matrix& a, const numkit::Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw std::invalid_argument("retrieval_top1: shape mismatch");
  if (a.rows < 2)
    throw std::invalid_argument("retrieval_top1: need at least 2 rows, got " +
                                std::to_string(a.rows));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ra = a.row(i);
    std::size_t arg = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* rb = b.row(j);
      double d = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) d += ra[k] * rb[k];
      if (d > best) {
        best = d;
        arg = j;
      }
    }
    if (arg == i) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(a.rows);
}

// ---------------------------------------------------------------------------
// MetricReport: named values with units, published as one CSV row or a JSON
// object. Values must be finite and the sample count positive before either
// serializer will emit anything.
// ---------------------------------------------------------------------------

struct MetricEntry {
  std::string name;
  double value = 0.0;
  std::string unit;  // "mm", "px", or "fraction"
};

struct MetricReport {
  std::vector<MetricEntry> entries;  // insertion-ordered, names unique
  std::size_t sample_count = 0;
  std::string config_fingerprint;

  // Inserts or overwrites in place, preserving first-insertion order so the
  // CSV column layout is stable across evaluations of the same run.
  void set(const std::string& name, double value, const std::string& unit) {
    if (name.empty() || name.find(',') != std::string::npos ||
        name.find('\n') != std::string::npos)
      throw std::invalid_argument("MetricReport::set: name unusable as a CSV header: \"" +
                                  name + "\"");
    for (MetricEntry& e : entries) {
      if (e.name == name) {
        e.value = value;
        e.unit = unit;
        return;
      }
    }
    entries.push_back({name, value, unit});
  }

  double value_of(const std::string& name) const {
    for (const MetricEntry& e : entries)
      if (e.name == name) return e.value;
    throw std::out_of_range("MetricReport: no metric named \"" + name + "\"");
  }

  void validate() const {
    if (sample_count == 0)
      throw std::invalid_argument("MetricReport: sample count is zero");
    for (const MetricEntry& e : entries)
      if (!std::isfinite(e.value))
        throw std::invalid_argument("MetricReport: metric \"" + e.name +
                                    "\" is not finite");
  }

  std::string csv_header() const {
    std::string out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i) out += ',';
      out += entries[i].name;
    }
    return out;
  }

  // %.17g keeps doubles bit-exact through a text round-trip, which the
  // reproducibility checks rely on.
  std::string csv_row() const {
    validate();
    std::string out;
    char buf[40];
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i) out += ',';
      std::snprintf(buf, sizeof buf, "%.17g", entries[i].value);
      out += buf;
    }
    return out;
  }

  nlohmann::ordered_json to_json() const {
    validate();
    nlohmann::ordered_json j;
    j["sample_count"] = sample_count;
    j["config_fingerprint"] = config_fingerprint;
    nlohmann::ordered_json m;
    for (const MetricEntry& e : entries)
      m[e.name] = nlohmann::ordered_json{{"value", e.value}, {"unit", e.unit}};
    j["metrics"] = std::move(m);
    return j;
  }
};

}  // namespace unihpe::metrics
