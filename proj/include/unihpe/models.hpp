#pragma once

// Encoders, decoders, and the optimizer: residual MLP stacks, a small
// transformer pose encoder with CLS and bounding-box tokens, learned modality
// tokens, a score-matching pose decoder, Adam, and checkpoint I/O.
//
// Every module owns its ag::Parameter members by value and hands out the
// full list through params(); parameter addresses are identity for both the
// tape and the optimizer, so modules must stay put once built.

#include <unihpe/autograd.hpp>
#include <unihpe/numkit.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace unihpe::models {

enum class Modality { Image, Pose2D, Pose3D };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::Image: return "image";
    case Modality::Pose2D: return "2d";
    case Modality::Pose3D: return "3d";
  }
  throw std::invalid_argument("modality_name: unknown modality selector");
}

namespace detail {

// Parameter as a graph value: tracked on the tape when one is given,
// otherwise a plain constant (forward-only evaluation).
inline ag::Tensor use_param(ag::Parameter& p, ag::Tape* tape) {
  if (tape != nullptr) return tape->use(p);
  ag::Tensor t(p.rows, p.cols);
  t.v = p.value;
  return t;
}

inline void gaussian_fill(ag::Parameter& p, numkit::Rng& rng, double stddev) {
  for (auto& x : p.value) x = rng.normal() * stddev;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear layer. Weight is in x out so a batch of row vectors maps through a
// single matmul; bias broadcasts over rows.
// ---------------------------------------------------------------------------

struct Linear {
  ag::Parameter w;
  ag::Parameter b;
  std::size_t in = 0;
  std::size_t out = 0;

  Linear() = default;
  Linear(const std::string& prefix, std::size_t in_, std::size_t out_, numkit::Rng& rng)
      : w(prefix + ".w", in_, out_), b(prefix + ".b", 1, out_), in(in_), out(out_) {
    detail::gaussian_fill(w, rng, 1.0 / std::sqrt(static_cast<double>(in_)));
  }

  ag::Tensor operator()(const ag::Tensor& x, ag::Tape* tape) {
    if (x.cols != in)
      throw std::invalid_argument("Linear " + w.name + ": input width " + std::to_string(x.cols) +
                                  ", expected " + std::to_string(in));
    return ag::add(ag::matmul(x, detail::use_param(w, tape)), detail::use_param(b, tape));
  }

  void collect(std::vector<ag::Parameter*>& into) {
    into.push_back(&w);
    into.push_back(&b);
  }
};

// ---------------------------------------------------------------------------
// MlpBlockStack: input projection, n residual blocks at the hidden width
// (linear -> GELU -> linear, plus skip), output projection.
// ---------------------------------------------------------------------------

struct MlpBlockStack {
  std::size_t input_width = 0;
  std::size_t hidden_width = 0;
  std::size_t output_width = 0;
  Linear in_proj;
  std::vector<std::pair<Linear, Linear>> blocks;
  Linear out_proj;

  MlpBlockStack() = default;
  MlpBlockStack(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
                numkit::Rng& rng, std::size_t n_blocks = 3)
      : input_width(in), hidden_width(hidden), output_width(out),
        in_proj(prefix + ".in", in, hidden, rng), out_proj(prefix + ".out", hidden, out, rng) {
    if (n_blocks == 0) throw std::invalid_argument("MlpBlockStack: need at least one block");
    blocks.reserve(n_blocks);
    for (std::size_t i = 0; i < n_blocks; ++i) {
      const std::string bp = prefix + ".block" + std::to_string(i);
      blocks.emplace_back(Linear(bp + ".lin1", hidden, hidden, rng),
                          Linear(bp + ".lin2", hidden, hidden, rng));
    }
  }

  ag::Tensor forward(const ag::Tensor& x, ag::Tape* tape) {
    ag::Tensor h = in_proj(x, tape);
    for (auto& [lin1, lin2] : blocks) h = ag::add(h, lin2(ag::gelu(lin1(h, tape)), tape));
    return out_proj(h, tape);
  }

  void collect(std::vector<ag::Parameter*>& into) {
    in_proj.collect(into);
    for (auto& [lin1, lin2] : blocks) {
      lin1.collect(into);
      lin2.collect(into);
    }
    out_proj.collect(into);
  }
};

// Encoder forward: stack output L2-normalized into the shared space. A stack
// whose output row is numerically zero (e.g. zeroed weights) surfaces the
// normalization error rather than emitting a garbage direction.
inline ag::Tensor mlp_encode(const ag::Tensor& input, MlpBlockStack& stack,
                             ag::Tape* tape = nullptr) {
  return ag::l2norm_rows(stack.forward(input, tape));
}

// ---------------------------------------------------------------------------
// ModalityToken: one learned D-vector per source modality, added to (never
// concatenated with) whatever embedding is being conditioned.
// ---------------------------------------------------------------------------

struct ModalityToken {
  ag::Parameter image;
  ag::Parameter pose2d;
  ag::Parameter pose3d;

  ModalityToken() = default;
  ModalityToken(const std::string& prefix, std::size_t dim, numkit::Rng& rng)
      : image(prefix + ".image", 1, dim),
        pose2d(prefix + ".2d", 1, dim),
        pose3d(prefix + ".3d", 1, dim) {
    detail::gaussian_fill(image, rng, 0.02);
    detail::gaussian_fill(pose2d, rng, 0.02);
    detail::gaussian_fill(pose3d, rng, 0.02);
  }

  ag::Tensor select(Modality m, ag::Tape* tape) {
    switch (m) {
      case Modality::Image: return detail::use_param(image, tape);
      case Modality::Pose2D: return detail::use_param(pose2d, tape);
      case Modality::Pose3D: return detail::use_param(pose3d, tape);
    }
    throw std::invalid_argument("ModalityToken::select: unknown modality selector");
  }

  void collect(std::vector<ag::Parameter*>& into) {
    into.push_back(&image);
    into.push_back(&pose2d);
    into.push_back(&pose3d);
  }
};

// ---------------------------------------------------------------------------
// PoseTransformerEncoder: per-keypoint patch embedding with learned position
// embeddings, a CLS token, a bbox token on the 2D path, three pre-norm
// attention + feed-forward layers, and a projection of the CLS slot to the
// shared dimension.
// ---------------------------------------------------------------------------

struct TransformerLayer {
  ag::Parameter wq, wk, wv, wo;        // width x width
  ag::Parameter ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x width
  Linear ff1, ff2;

  TransformerLayer() = default;
  TransformerLayer(const std::string& prefix, std::size_t width, std::size_t ff_width,
                   numkit::Rng& rng)
      : wq(prefix + ".wq", width, width), wk(prefix + ".wk", width, width),
        wv(prefix + ".wv", width, width), wo(prefix + ".wo", width, width),
        ln1_g(prefix + ".ln1.g", 1, width), ln1_b(prefix + ".ln1.b", 1, width),
        ln2_g(prefix + ".ln2.g", 1, width), ln2_b(prefix + ".ln2.b", 1, width),
        ff1(prefix + ".ff1", width, ff_width, rng), ff2(prefix + ".ff2", ff_width, width, rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(width));
    detail::gaussian_fill(wq, rng, s);
    detail::gaussian_fill(wk, rng, s);
    detail::gaussian_fill(wv, rng, s);
    detail::gaussian_fill(wo, rng, s);
    for (auto& g : ln1_g.value) g = 1.0;
    for (auto& g : ln2_g.value) g = 1.0;
  }

  void collect(std::vector<ag::Parameter*>& into) {
    for (ag::Parameter* p : {&wq, &wk, &wv, &wo, &ln1_g, &ln1_b, &ln2_g, &ln2_b}) into.push_back(p);
    ff1.collect(into);
    ff2.collect(into);
  }
};

struct PoseTransformerEncoder {
  std::size_t joints = 0;
  std::size_t coords = 0;  // 2 or 3; the 2D path carries the bbox token
  std::size_t width = 0;
  std::size_t heads = 0;
  std::size_t out_dim = 0;
  Linear patch_proj;
  ag::Parameter pos_emb;  // joints x width
  ag::Parameter cls;      // 1 x width
  std::optional<Linear> bbox_proj;
  std::vector<TransformerLayer> layers;
  ag::Parameter ln_f_g, ln_f_b;
  Linear out_proj;

  PoseTransformerEncoder() = default;
  PoseTransformerEncoder(const std::string& prefix, std::size_t joints_, std::size_t coords_,
                         std::size_t width_, std::size_t heads_, std::size_t ff_width,
                         std::size_t out_dim_, numkit::Rng& rng, std::size_t n_layers = 3)
      : joints(joints_), coords(coords_), width(width_), heads(heads_), out_dim(out_dim_),
        patch_proj(prefix + ".patch", coords_, width_, rng),
        pos_emb(prefix + ".pos", joints_, width_), cls(prefix + ".cls", 1, width_),
        ln_f_g(prefix + ".lnf.g", 1, width_), ln_f_b(prefix + ".lnf.b", 1, width_),
        out_proj(prefix + ".out", width_, out_dim_, rng) {
    if (coords_ != 2 && coords_ != 3)
      throw std::invalid_argument("PoseTransformerEncoder: coords must be 2 or 3");
    if (width_ % heads_ != 0)
      throw std::invalid_argument("PoseTransformerEncoder: width " + std::to_string(width_) +
                                  " not divisible by " + std::to_string(heads_) + " heads");
    detail::gaussian_fill(pos_emb, rng, 0.02);
    detail::gaussian_fill(cls, rng, 0.02);
    if (coords_ == 2) bbox_proj.emplace(prefix + ".bbox", 4, width_, rng);
    layers.reserve(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i)
      layers.emplace_back(prefix + ".layer" + std::to_string(i), width_, ff_width, rng);
    for (auto& g : ln_f_g.value) g = 1.0;
  }

  bool needs_bbox() const { return coords == 2; }
  std::size_t token_count() const { return joints + 1 + (needs_bbox() ? 1 : 0); }

  void collect(std::vector<ag::Parameter*>& into) {
    patch_proj.collect(into);
    into.push_back(&pos_emb);
    into.push_back(&cls);
    if (bbox_proj) bbox_proj->collect(into);
    for (auto& l : layers) l.collect(into);
    into.push_back(&ln_f_g);
    into.push_back(&ln_f_b);
    out_proj.collect(into);
  }
};

namespace detail {

inline ag::Tensor self_attention(const ag::Tensor& x, TransformerLayer& layer, std::size_t heads,
                                 ag::Tape* tape) {
  const std::size_t width = x.cols, dh = width / heads;
  const ag::Tensor q = ag::matmul(x, use_param(layer.wq, tape));
  const ag::Tensor k = ag::matmul(x, use_param(layer.wk, tape));
  const ag::Tensor v = ag::matmul(x, use_param(layer.wv, tape));
  ag::Tensor merged;
  for (std::size_t h = 0; h < heads; ++h) {
    const ag::Tensor qh = ag::slice_cols(q, h * dh, dh);
    const ag::Tensor kh = ag::slice_cols(k, h * dh, dh);
    const ag::Tensor vh = ag::slice_cols(v, h * dh, dh);
    const ag::Tensor attn = ag::softmax_rows(
        ag::scale(ag::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh))));
    const ag::Tensor oh = ag::matmul(attn, vh);
    merged = h == 0 ? oh : ag::concat_cols(merged, oh);
  }
  return ag::matmul(merged, use_param(layer.wo, tape));
}

}  // namespace detail

// Pose is one keypoint set (joints x coords); bbox, on the 2D path only, is
// a 1x4 (cx, cy, w, h) descriptor. Returns a unit-norm 1 x D embedding read
// off the CLS slot.
inline ag::Tensor transformer_encode(const ag::Tensor& pose, const ag::Tensor* bbox,
                                     PoseTransformerEncoder& enc, ag::Tape* tape = nullptr) {
  if (pose.rows != enc.joints || pose.cols != enc.coords)
    throw std::invalid_argument("transformer_encode: pose is " + std::to_string(pose.rows) + "x" +
                                std::to_string(pose.cols) + ", encoder expects " +
                                std::to_string(enc.joints) + "x" + std::to_string(enc.coords));
  if (enc.needs_bbox() && bbox == nullptr)
    throw std::invalid_argument("transformer_encode: the 2D encoder requires a bbox token");
  if (!enc.needs_bbox() && bbox != nullptr)
    throw std::invalid_argument("transformer_encode: the 3D encoder takes no bbox");
  if (bbox != nullptr && (bbox->rows != 1 || bbox->cols != 4))
    throw std::invalid_argument("transformer_encode: bbox must be 1x4");

  ag::Tensor tokens =
      ag::add(enc.patch_proj(pose, tape), detail::use_param(enc.pos_emb, tape));
  std::vector<ag::Tensor> seq;
  seq.push_back(detail::use_param(enc.cls, tape));
  if (enc.needs_bbox()) seq.push_back((*enc.bbox_proj)(*bbox, tape));
  seq.push_back(tokens);
  ag::Tensor h = ag::concat_rows(seq);

  for (auto& layer : enc.layers) {
    const ag::Tensor a = ag::layer_norm(h, detail::use_param(layer.ln1_g, tape),
                                        detail::use_param(layer.ln1_b, tape));
    h = ag::add(h, detail::self_attention(a, layer, enc.heads, tape));
    const ag::Tensor f = ag::layer_norm(h, detail::use_param(layer.ln2_g, tape),
                                        detail::use_param(layer.ln2_b, tape));
    h = ag::add(h, layer.ff2(ag::gelu(layer.ff1(f, tape)), tape));
  }
  h = ag::layer_norm(h, detail::use_param(enc.ln_f_g, tape), detail::use_param(enc.ln_f_b, tape));
  return ag::l2norm_rows(enc.out_proj(ag::gather_rows(h, {0}), tape));
}

// ---------------------------------------------------------------------------
// MLP decoding: add the modality token (plus an optional bbox embedding) to
// the embedding, run the stack, reshape to joints x coords. A zeroed token
// makes this identical to running the stack on the bare embedding, which is
// the additive-token contract.
// ---------------------------------------------------------------------------

inline ag::Tensor mlp_decode(const ag::Tensor& embedding, ModalityToken& tokens, Modality source,
                             MlpBlockStack& stack, std::size_t joints, std::size_t coords,
                             ag::Tape* tape = nullptr, Linear* bbox_embed = nullptr,
                             const ag::Tensor* bbox = nullptr) {
  if (coords != 2 && coords != 3)
    throw std::invalid_argument("mlp_decode: target coords must be 2 or 3");
  if (stack.output_width != joints * coords)
    throw std::invalid_argument("mlp_decode: stack emits " + std::to_string(stack.output_width) +
                                " values, target needs " + std::to_string(joints * coords));
  if ((bbox == nullptr) != (bbox_embed == nullptr))
    throw std::invalid_argument("mlp_decode: bbox and its embedding layer go together");
  ag::Tensor cond = ag::add(embedding, tokens.select(source, tape));
  if (bbox != nullptr) cond = ag::add(cond, (*bbox_embed)(*bbox, tape));
  return ag::reshape(stack.forward(cond, tape), joints, coords);
}

// ---------------------------------------------------------------------------
// Score-matching decoder. Geometric noise schedule sigma(t) over t in (0,1].
// The network is parameterized as a denoiser D(x, t) = F(c_in(t)*x, t) whose
// input scaling keeps the state unit-scale at every noise level and whose
// target, the posterior-mean pose, is bounded by the data scale; the score
// is (D - x)/sigma^2 and the training loss ||D - x0||^2 / sigma^2 is exactly
// the denoising score-matching objective with weighting lambda(t) = sigma^2.
// ---------------------------------------------------------------------------

// Fixed sinusoidal features of the diffusion time, geometric frequency
// ladder; always a constant (never tracked).
inline ag::Tensor time_embedding(double t, std::size_t dims = 32) {
  if (dims < 2 || dims % 2 != 0)
    throw std::invalid_argument("time_embedding: dims must be even and >= 2");
  ag::Tensor e(1, dims);
  const std::size_t half = dims / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq =
        std::pow(1000.0, half == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(half - 1));
    e.v[2 * k] = std::sin(freq * t);
    e.v[2 * k + 1] = std::cos(freq * t);
  }
  return e;
}

struct ScoreDecoder {
  std::size_t joints = 0;
  std::size_t coords = 0;
  std::size_t emb_dim = 0;
  double sigma_min = 0.01;
  double sigma_max = 5.0;
  double sigma_data = 1.5;  // scale of the clean-pose coordinates
  std::size_t steps = 1000;
  std::size_t time_dims = 32;
  Linear in_proj;    // joints*coords -> emb_dim
  Linear time_proj;  // time_dims -> emb_dim
  std::optional<Linear> bbox_proj;
  MlpBlockStack net;  // emb_dim -> hidden -> joints*coords

  ScoreDecoder() = default;
  ScoreDecoder(const std::string& prefix, std::size_t joints_, std::size_t coords_,
               std::size_t emb_dim_, std::size_t hidden, numkit::Rng& rng,
               std::size_t n_blocks = 3)
      : joints(joints_), coords(coords_), emb_dim(emb_dim_),
        in_proj(prefix + ".in", joints_ * coords_, emb_dim_, rng),
        time_proj(prefix + ".time", 32, emb_dim_, rng),
        net(prefix + ".net", emb_dim_, hidden, joints_ * coords_, rng, n_blocks) {
    if (coords_ == 2) bbox_proj.emplace(prefix + ".bbox", 4, emb_dim_, rng);
    // Zero output layer: the fresh decoder denoises everything to the
    // origin, so the reverse process starts as a pure contraction instead of
    // amplifying untrained extrapolations.
    for (auto& v : net.out_proj.w.value) v = 0.0;
  }

  double sigma(double t) const { return sigma_min * std::pow(sigma_max / sigma_min, t); }

  void collect(std::vector<ag::Parameter*>& into) {
    in_proj.collect(into);
    time_proj.collect(into);
    if (bbox_proj) bbox_proj->collect(into);
    net.collect(into);
  }
};

namespace detail {

// Denoised-pose estimate D(x, t) for a flat pose state.
inline ag::Tensor denoise(ScoreDecoder& dec, ModalityToken& tokens, const ag::Tensor& x_flat,
                          double t, const ag::Tensor& embedding, Modality source, ag::Tape* tape,
                          const ag::Tensor* bbox) {
  if (x_flat.rows != 1 || x_flat.cols != dec.joints * dec.coords)
    throw std::invalid_argument("ScoreDecoder: state must be 1x" +
                                std::to_string(dec.joints * dec.coords));
  if (embedding.rows != 1 || embedding.cols != dec.emb_dim)
    throw std::invalid_argument("ScoreDecoder: embedding must be 1x" +
                                std::to_string(dec.emb_dim));
  if (bbox != nullptr && !dec.bbox_proj)
    throw std::invalid_argument("ScoreDecoder: this decoder has no bbox conditioning");
  const double sig = dec.sigma(t), sd = dec.sigma_data;
  const double c_in = 1.0 / std::sqrt(sig * sig + sd * sd);

  ag::Tensor cond = ag::add(dec.in_proj(ag::scale(x_flat, c_in), tape), embedding);
  cond = ag::add(cond, dec.time_proj(time_embedding(t, dec.time_dims), tape));
  cond = ag::add(cond, tokens.select(source, tape));
  if (bbox != nullptr) cond = ag::add(cond, (*dec.bbox_proj)(*bbox, tape));
  return dec.net.forward(cond, tape);
}

}  // namespace detail

// Denoising score-matching loss at a pinned (t, noise) draw; the stochastic
// wrapper below is the training entry point, this one exists so gradient
// tests can freeze the randomness.
inline ag::Tensor score_decoder_loss_at(ScoreDecoder& dec, ModalityToken& tokens,
                                        const ag::Tensor& clean_flat, const ag::Tensor& embedding,
                                        Modality source, double t, const ag::Tensor& noise,
                                        ag::Tape* tape, const ag::Tensor* bbox = nullptr) {
  if (!(t > 0.0) || t > 1.0)
    throw std::invalid_argument("score_decoder_loss_at: t must lie in (0, 1]");
  if (noise.rows != clean_flat.rows || noise.cols != clean_flat.cols)
    throw std::invalid_argument("score_decoder_loss_at: noise shape differs from pose");
  const double sig = dec.sigma(t);
  const ag::Tensor perturbed = ag::add(clean_flat, ag::scale(noise, sig));
  const ag::Tensor den =
      detail::denoise(dec, tokens, perturbed, t, embedding, source, tape, bbox);
  return ag::scale(ag::mse(den, clean_flat), 1.0 / (sig * sig));
}

inline ag::Tensor score_decoder_loss(ScoreDecoder& dec, ModalityToken& tokens,
                                     const ag::Tensor& clean_flat, const ag::Tensor& embedding,
                                     Modality source, numkit::Rng& rng, ag::Tape* tape,
                                     const ag::Tensor* bbox = nullptr) {
  const double t = 1.0 - rng.uniform();  // (0, 1]
  ag::Tensor noise(clean_flat.rows, clean_flat.cols);
  for (auto& z : noise.v) z = rng.normal();
  return score_decoder_loss_at(dec, tokens, clean_flat, embedding, source, t, noise, tape, bbox);
}

// Reverse-time Euler-Maruyama from the sigma_max Gaussian prior down the
// discretized schedule, followed by one noise-free denoising step at the
// floor sigma (posterior-mean readout). Deterministic given the rng seed.
inline numkit::Matrix score_decoder_sample(ScoreDecoder& dec, ModalityToken& tokens,
                                           const ag::Tensor& embedding, Modality source,
                                           numkit::Rng& rng, const ag::Tensor* bbox = nullptr) {
  const std::size_t n = dec.joints * dec.coords;
  ag::Tensor x(1, n);
  for (auto& v : x.v) v = dec.sigma_max * rng.normal();
  const double steps = static_cast<double>(dec.steps);
  for (std::size_t i = dec.steps; i >= 1; --i) {
    const double t_i = static_cast<double>(i) / steps;
    const double t_prev = static_cast<double>(i - 1) / steps;
    const double s_i = dec.sigma(t_i), s_prev = dec.sigma(t_prev);
    const double dv = s_i * s_i - s_prev * s_prev;
    const ag::Tensor den = detail::denoise(dec, tokens, x, t_i, embedding, source, nullptr, bbox);
    for (std::size_t c = 0; c < n; ++c) {
      x.v[c] += dv * (den.v[c] - x.v[c]) / (s_i * s_i);
      x.v[c] += std::sqrt(dv) * rng.normal();
    }
  }
  const double t_floor = 1.0 / steps;
  const ag::Tensor den = detail::denoise(dec, tokens, x, t_floor, embedding, source, nullptr, bbox);

  numkit::Matrix pose(dec.joints, dec.coords);
  pose.v = den.v;
  return pose;
}

// ---------------------------------------------------------------------------
// Adam with bias correction. Moment buffers key off parameter addresses and
// materialize lazily, shaped like their parameter.
// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm ceiling; 0 disables
  std::size_t step = 0;
  std::unordered_map<const ag::Parameter*, std::pair<std::vector<double>, std::vector<double>>>
      moments;
};

// One update over `params` using gradients recorded on `tape`. Every listed
// parameter must have entered the tape (frozen modules are simply not
// listed); a parameter the loss never reached gets a zero gradient and is
// left unchanged. With clip_norm set, gradients are jointly rescaled before
// the moment update whenever their global norm exceeds it.
inline void adam_step(const std::vector<ag::Parameter*>& params, const ag::Tape& tape,
                      AdamState& st) {
  ++st.step;
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  double sq = 0.0;
  for (ag::Parameter* p : params) {
    grads.push_back(tape.grad(*p));
    for (double g : grads.back()) sq += g * g;
  }
  double rescale = 1.0;
  if (st.clip_norm > 0.0) {
    const double norm = std::sqrt(sq);
    if (norm > st.clip_norm) rescale = st.clip_norm / norm;
  }

  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    ag::Parameter* p = params[k];
    auto& [m, v] = st.moments[p];
    if (m.empty()) {
      m.assign(p->value.size(), 0.0);
      v.assign(p->value.size(), 0.0);
    }
    for (std::size_t i = 0; i < grads[k].size(); ++i) {
      const double g = grads[k][i] * rescale;
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      p->value[i] -= st.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned text map of name -> shape + bit patterns. Doubles
// travel as 16-digit hex of their IEEE-754 bits, so round-trips are exact.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path,
                            const std::vector<ag::Parameter*>& params) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f << "unihpe-ckpt 1\n" << params.size() << "\n";
  for (const ag::Parameter* p : params) {
    f << p->name << " " << p->rows << " " << p->cols;
    for (double x : p->value) {
      std::uint64_t bits;
      static_assert(sizeof(bits) == sizeof(x));
      std::memcpy(&bits, &x, sizeof(bits));
      char buf[17];
      std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(bits));
      f << " " << buf;
    }
    f << "\n";
  }
  if (!f) throw std::runtime_error("save_checkpoint: write to " + path + " failed");
}

inline void load_checkpoint(const std::string& path, const std::vector<ag::Parameter*>& params) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string magic;
  int version = 0;
  f >> magic >> version;
  if (magic != "unihpe-ckpt" || version != 1)
    throw std::runtime_error("load_checkpoint: " + path + " is not a version-1 checkpoint");
  std::size_t count = 0;
  f >> count;

  struct Entry {
    std::size_t rows, cols;
    std::vector<double> value;
  };
  std::unordered_map<std::string, Entry> table;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    Entry e{};
    f >> name >> e.rows >> e.cols;
    if (!f) throw std::runtime_error("load_checkpoint: truncated header in entry " +
                                     std::to_string(i));
    e.value.resize(e.rows * e.cols);
    for (double& x : e.value) {
      std::string hex;
      f >> hex;
      if (!f || hex.size() != 16)
        throw std::runtime_error("load_checkpoint: truncated values for '" + name + "'");
      const std::uint64_t bits = std::stoull(hex, nullptr, 16);
      std::memcpy(&x, &bits, sizeof(x));
    }
    table.emplace(std::move(name), std::move(e));
  }

  for (ag::Parameter* p : params) {
    auto it = table.find(p->name);
    if (it == table.end())
      throw std::runtime_error("load_checkpoint: '" + p->name + "' missing from " + path);
    if (it->second.rows != p->rows || it->second.cols != p->cols)
      throw std::runtime_error("load_checkpoint: '" + p->name + "' is " +
                               std::to_string(it->second.rows) + "x" +
                               std::to_string(it->second.cols) + " on disk, expected " +
                               std::to_string(p->rows) + "x" + std::to_string(p->cols));
    p->value = it->second.value;
  }
}

}  // namespace unihpe::models
