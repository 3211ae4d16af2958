#pragma once

// Contrastive alignment objectives over tri-modal embedding batches: the
// pairwise InfoNCE over cosine logits, the triplet InfoNCE whose logit for a
// triplet is the top eigenvalue of the stacked embeddings' 3x3 Gram matrix,
// the index sampler producing those triplets, and the learnable clamped
// temperature shared by every term.

#include <unihpe/autograd.hpp>
#include <unihpe/numkit.hpp>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace unihpe::losses {

// ---------------------------------------------------------------------------
// Temperature: learnable tau, internally parameterized as log(1/tau) so the
// optimizer walks an unconstrained variable; the clamp is expressed on tau
// itself and applied after every optimizer step.
// ---------------------------------------------------------------------------

struct Temperature {
  ag::Parameter log_inv_tau;  // 1x1
  double tau0 = 1.0;
  double lo = 0.0;
  double hi = 0.0;

  Temperature() : Temperature(1.0, 1e-6, 1e6) {}

  Temperature(double tau0_, double lo_, double hi_) : tau0(tau0_), lo(lo_), hi(hi_) {
    if (!(lo_ > 0.0) || lo_ > hi_)
      throw std::invalid_argument("Temperature: invalid clamp range [" + std::to_string(lo_) +
                                  ", " + std::to_string(hi_) + "]");
    if (!(tau0_ >= lo_ && tau0_ <= hi_))
      throw std::invalid_argument("Temperature: tau0 " + std::to_string(tau0_) +
                                  " outside clamp range");
    log_inv_tau = ag::Parameter("temperature.log_inv_tau", 1, 1);
    log_inv_tau.value[0] = -std::log(tau0_);
  }

  double tau() const { return std::exp(-log_inv_tau.value[0]); }

  // 1/tau as a (possibly tracked) scalar tensor; gradients reach the raw
  // parameter through the exp.
  ag::Tensor inv_tau(ag::Tape* tape) {
    if (tape != nullptr) return ag::vexp(tape->use(log_inv_tau));
    return ag::Tensor::scalar_of(std::exp(log_inv_tau.value[0]));
  }
};

// Projects tau back into its clamp range after an optimizer step.
inline void clamp_temperature(Temperature& t) {
  const double tau = std::min(std::max(t.tau(), t.lo), t.hi);
  t.log_inv_tau.value[0] = -std::log(tau);
}

// ---------------------------------------------------------------------------
// EmbeddingBatch: one aligned batch across the three modalities; all rows
// are unit-norm (losses operate on cosines), enforced at the entry points.
// ---------------------------------------------------------------------------

struct EmbeddingBatch {
  ag::Tensor x_img;
  ag::Tensor x_2d;
  ag::Tensor x_3d;

  std::size_t batch() const { return x_img.rows; }
  std::size_t dim() const { return x_img.cols; }
};

namespace detail {

inline void require_unit_rows(const char* who, const ag::Tensor& x) {
  for (std::size_t r = 0; r < x.rows; ++r) {
    double s = 0.0;
    const double* row = x.v.data() + r * x.cols;
    for (std::size_t c = 0; c < x.cols; ++c) s += row[c] * row[c];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
      throw std::invalid_argument(std::string(who) + ": row " + std::to_string(r) +
                                  " is not unit-norm (|r| = " + std::to_string(std::sqrt(s)) +
                                  ")");
  }
}

inline ag::Tape* tape_of(const ag::Tensor& a, const ag::Tensor& b) {
  if (a.tracked()) return a.tape;
  if (b.tracked()) return b.tape;
  return nullptr;
}

}  // namespace detail

inline void validate_batch(const EmbeddingBatch& b) {
  if (b.x_img.rows != b.x_2d.rows || b.x_2d.rows != b.x_3d.rows ||
      b.x_img.cols != b.x_2d.cols || b.x_2d.cols != b.x_3d.cols)
    throw std::invalid_argument("EmbeddingBatch: modality shapes differ: img " +
                                std::to_string(b.x_img.rows) + "x" + std::to_string(b.x_img.cols) +
                                ", 2d " + std::to_string(b.x_2d.rows) + "x" +
                                std::to_string(b.x_2d.cols) + ", 3d " +
                                std::to_string(b.x_3d.rows) + "x" + std::to_string(b.x_3d.cols));
  detail::require_unit_rows("EmbeddingBatch.x_img", b.x_img);
  detail::require_unit_rows("EmbeddingBatch.x_2d", b.x_2d);
  detail::require_unit_rows("EmbeddingBatch.x_3d", b.x_3d);
}

// ---------------------------------------------------------------------------
// Pairwise InfoNCE. Logits are the B x B cosine matrix scaled by 1/tau; the
// diagonal holds the positives. The symmetric flag averages the
// source-to-target and target-to-source directions.
// ---------------------------------------------------------------------------

inline ag::Tensor info_nce_pair(const ag::Tensor& x_s, const ag::Tensor& x_t, Temperature& temp,
                                bool symmetric = true) {
  if (x_s.rows != x_t.rows || x_s.cols != x_t.cols)
    throw std::invalid_argument("info_nce_pair: shapes differ");
  if (x_s.rows < 2)
    throw std::invalid_argument("info_nce_pair: batch size " + std::to_string(x_s.rows) +
                                " has no negatives (need B >= 2)");
  detail::require_unit_rows("info_nce_pair: source", x_s);
  detail::require_unit_rows("info_nce_pair: target", x_t);

  ag::Tape* tape = detail::tape_of(x_s, x_t);
  const ag::Tensor inv_tau = temp.inv_tau(tape);
  const ag::Tensor logits = ag::mul_scalar(ag::matmul_nt(x_s, x_t), inv_tau);

  std::vector<std::size_t> labels(x_s.rows);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i;

  const ag::Tensor fwd = ag::cross_entropy_mean(logits, labels);
  if (!symmetric) return fwd;
  const ag::Tensor bwd = ag::cross_entropy_mean(ag::transpose(logits), labels);
  return ag::scale(ag::add(fwd, bwd), 0.5);
}

// ---------------------------------------------------------------------------
// Triplet index sampling.
//
// For a batch of size B the sampler emits a B x B x 3 index tensor: slot 0
// is the positive triplet (b, b, b); in every negative slot i >= 1 the image
// index stays pinned to the anchor while the 2D and 3D indices come from one
// fresh permutation each, shared by all anchors of that slot. A negative
// slot can therefore collide with the positive when both permutations fix
// the anchor (probability ~1/B^2); reject_collisions redraws the slot's
// permutations until no anchor collides.
// ---------------------------------------------------------------------------

struct TripletIndexList {
  std::size_t batch = 0;
  std::vector<std::uint32_t> indices;  // batch * batch * 3, [b][i][j]

  std::uint32_t at(std::size_t b, std::size_t i, std::size_t j) const {
    return indices[(b * batch + i) * 3 + j];
  }
  std::uint32_t& at(std::size_t b, std::size_t i, std::size_t j) {
    return indices[(b * batch + i) * 3 + j];
  }
};

inline TripletIndexList sample_triplet_indices(std::size_t batch_size, numkit::Rng& rng,
                                               bool reject_collisions = false) {
  if (batch_size == 0)
    throw std::invalid_argument("sample_triplet_indices: batch size must be positive");
  TripletIndexList out;
  out.batch = batch_size;
  out.indices.assign(batch_size * batch_size * 3, 0);
  for (std::size_t b = 0; b < batch_size; ++b)
    for (std::size_t j = 0; j < 3; ++j) out.at(b, 0, j) = static_cast<std::uint32_t>(b);

  for (std::size_t i = 1; i < batch_size; ++i) {
    std::vector<std::size_t> p2d, p3d;
    for (;;) {
      p2d = rng.permutation(batch_size);
      p3d = rng.permutation(batch_size);
      if (!reject_collisions) break;
      bool collides = false;
      for (std::size_t b = 0; b < batch_size && !collides; ++b)
        collides = p2d[b] == b && p3d[b] == b;
      if (!collides) break;
    }
    for (std::size_t b = 0; b < batch_size; ++b) {
      out.at(b, i, 0) = static_cast<std::uint32_t>(b);
      out.at(b, i, 1) = static_cast<std::uint32_t>(p2d[b]);
      out.at(b, i, 2) = static_cast<std::uint32_t>(p3d[b]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lambda logits: one top Gram eigenvalue per (anchor, slot). Each selected
// triple of unit rows is stacked into a 3 x D matrix whose Gram spectrum
// sums to 3, so every logit lives in [1, 3]; the positive slot approaches 3
// exactly when the three modalities agree.
// ---------------------------------------------------------------------------

inline ag::Tensor triplet_lambda_logits(const EmbeddingBatch& batch,
                                        const TripletIndexList& idx) {
  validate_batch(batch);
  const std::size_t b = batch.batch();
  if (idx.batch != b || idx.indices.size() != b * b * 3)
    throw std::invalid_argument("triplet_lambda_logits: index list is for batch " +
                                std::to_string(idx.batch) + ", embeddings have " +
                                std::to_string(b));
  for (std::uint32_t v : idx.indices)
    if (v >= b) throw std::invalid_argument("triplet_lambda_logits: index " + std::to_string(v) +
                                            " out of range");

  std::vector<ag::Tensor> lambdas;
  lambdas.reserve(b * b);
  for (std::size_t anchor = 0; anchor < b; ++anchor)
    for (std::size_t slot = 0; slot < b; ++slot) {
      const ag::Tensor m =
          ag::stack_rows3(batch.x_img, idx.at(anchor, slot, 0), batch.x_2d,
                          idx.at(anchor, slot, 1), batch.x_3d, idx.at(anchor, slot, 2));
      lambdas.push_back(ag::top_eig3(ag::matmul_nt(m, m)));
    }
  return ag::stack_scalars(b, b, lambdas);
}

// Mean cross entropy of (lambda logits / tau) against label 0: the positive
// triplet sits in column 0 by the sampler's construction.
inline ag::Tensor info_nce_triplet(const ag::Tensor& lambda_logits, Temperature& temp) {
  if (lambda_logits.rows != lambda_logits.cols)
    throw std::invalid_argument("info_nce_triplet: logits must be square, got " +
                                std::to_string(lambda_logits.rows) + "x" +
                                std::to_string(lambda_logits.cols));
  ag::Tape* tape = lambda_logits.tracked() ? lambda_logits.tape : nullptr;
  const ag::Tensor scaled = ag::mul_scalar(lambda_logits, temp.inv_tau(tape));
  const std::vector<std::size_t> labels(lambda_logits.rows, 0);
  return ag::cross_entropy_mean(scaled, labels);
}

// ---------------------------------------------------------------------------
// Combined alignment loss: sum of pairwise terms over the active modality
// pairs plus alpha times the triplet term, all sharing one temperature.
// ---------------------------------------------------------------------------

struct ActivePairs {
  bool img_2d = false;
  bool img_3d = false;
  bool p2d_3d = false;

  bool any() const { return img_2d || img_3d || p2d_3d; }

  static ActivePairs all() { return {true, true, true}; }
};

inline ag::Tensor contrastive_loss(const EmbeddingBatch& batch, Temperature& temp, double alpha,
                                   numkit::Rng& rng, const ActivePairs& pairs, bool use_triplet,
                                   bool symmetric = true) {
  if (!pairs.any())
    throw std::invalid_argument("contrastive_loss: no active modality pairs");
  validate_batch(batch);

  ag::Tensor total;
  bool first = true;
  auto accumulate = [&](const ag::Tensor& term) {
    total = first ? term : ag::add(total, term);
    first = false;
  };
  if (pairs.img_2d) accumulate(info_nce_pair(batch.x_img, batch.x_2d, temp, symmetric));
  if (pairs.img_3d) accumulate(info_nce_pair(batch.x_img, batch.x_3d, temp, symmetric));
  if (pairs.p2d_3d) accumulate(info_nce_pair(batch.x_2d, batch.x_3d, temp, symmetric));

  if (use_triplet) {
    const TripletIndexList idx = sample_triplet_indices(batch.batch(), rng);
    const ag::Tensor lam = triplet_lambda_logits(batch, idx);
    accumulate(ag::scale(info_nce_triplet(lam, temp), alpha));
  }
  return total;
}

}  // namespace unihpe::losses
