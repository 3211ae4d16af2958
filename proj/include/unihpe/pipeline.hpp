#pragma once

// Orchestration: the three-stage alignment schedule over synthetic data.
// Stage 1 aligns the 2D and 3D pose encoders, stage 2 aligns the image
// encoder against them frozen, stage 3 trains everything jointly with the
// decoder losses on top. One ModelSet owns every module; StageConfig says
// which loss terms are active and which modules stay frozen; RunLog captures
// the loss decomposition and alignment diagnostics at fixed intervals.
//
// All randomness in a run flows from StageConfig::seed. Two runs with the
// same config, dataset, and seed produce bit-identical logs, checkpoints,
// and metric reports.

#include <unihpe/autograd.hpp>
#include <unihpe/losses.hpp>
#include <unihpe/metrics.hpp>
#include <unihpe/models.hpp>
#include <unihpe/numkit.hpp>
#include <unihpe/synthdata.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace unihpe::pipeline {

// 3D joint coordinates enter and leave the models divided by this, so the
// networks see unit-scale values while every metric stays in millimeters.
inline constexpr double kPoseScale = 1000.0;
// Bbox descriptors (pixels) are divided by this wherever they condition a
// network.
inline constexpr double kBboxScale = 1000.0;

namespace detail {

inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

// Stable identity of a dataset: order-sensitive hash over record ids and
// seeds. Ablation rows evaluated on the same data must report the same one.
inline std::string dataset_fingerprint(const std::vector<synth::SampleRecord>& data) {
  std::uint64_t h = detail::fnv1a64(nullptr, 0);
  for (const synth::SampleRecord& rec : data) {
    h = detail::fnv1a64(&rec.id, sizeof rec.id, h);
    h = detail::fnv1a64(&rec.seed, sizeof rec.seed, h);
  }
  return detail::hex64(h);
}

// ---------------------------------------------------------------------------
// ModelConfig / ModelSet
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t joints = 16;
  std::size_t dim = 32;   // shared embedding width D
  std::size_t grid = 16;  // pseudo-image side G
  double splat_sigma = synth::kDefaultSplatSigma;

  std::size_t enc_hidden = 64;
  std::size_t enc_blocks = 2;
  std::size_t dec_hidden = 64;
  std::size_t dec_blocks = 2;

  // Pose encoders are residual MLPs by default; the transformer family is
  // the config-selectable alternative (the image encoder stays an MLP over
  // the flattened pseudo-image either way).
  bool transformer_pose_encoders = false;
  std::size_t tf_width = 32;
  std::size_t tf_heads = 4;
  std::size_t tf_ff = 64;
  std::size_t tf_layers = 2;

  // 3D decoder family: MLP regression head or the score-matching sampler.
  bool score_decoder_3d = false;
  std::size_t score_hidden = 64;

  bool use_modality_token = true;
  std::uint64_t init_seed = 1;

  void validate() const {
    if (joints < 3) throw std::invalid_argument("ModelConfig: need at least 3 joints");
    if (dim < 2) throw std::invalid_argument("ModelConfig: embedding dim must be >= 2");
    if (grid < 4) throw std::invalid_argument("ModelConfig: grid must be >= 4");
    if (!(splat_sigma > 0.0)) throw std::invalid_argument("ModelConfig: splat_sigma must be positive");
    if (enc_blocks == 0 || dec_blocks == 0)
      throw std::invalid_argument("ModelConfig: encoder/decoder block counts must be >= 1");
    if (transformer_pose_encoders && tf_width % tf_heads != 0)
      throw std::invalid_argument("ModelConfig: tf_width must divide evenly into tf_heads");
  }
};

inline const std::vector<std::string>& module_names() {
  static const std::vector<std::string> names = {
      "image_encoder", "pose2d_encoder", "pose3d_encoder",
      "modality_tokens", "pose2d_decoder", "pose3d_decoder"};
  return names;
}

// Every module built from one seeded stream in a fixed order, so a given
// (config, init_seed) pair always yields the same initial weights. Parameter
// addresses are identity for the tape and optimizer: the set is pinned in
// place once constructed.
struct ModelSet {
  ModelConfig cfg;

  models::MlpBlockStack enc_img;
  models::MlpBlockStack enc_2d;
  models::MlpBlockStack enc_3d;
  std::optional<models::PoseTransformerEncoder> tr_2d;
  std::optional<models::PoseTransformerEncoder> tr_3d;
  models::ModalityToken tokens;
  models::MlpBlockStack dec_2d;
  models::MlpBlockStack dec_3d;
  std::optional<models::ScoreDecoder> score_3d;

  explicit ModelSet(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    numkit::Rng rng(cfg.init_seed);
    const std::size_t j = cfg.joints, d = cfg.dim;

    enc_img = models::MlpBlockStack("enc_img", 2 * cfg.grid * cfg.grid, cfg.enc_hidden, d, rng,
                                    cfg.enc_blocks);
    if (cfg.transformer_pose_encoders) {
      tr_2d.emplace("enc_2d", j, 2, cfg.tf_width, cfg.tf_heads, cfg.tf_ff, d, rng, cfg.tf_layers);
      tr_3d.emplace("enc_3d", j, 3, cfg.tf_width, cfg.tf_heads, cfg.tf_ff, d, rng, cfg.tf_layers);
    } else {
      enc_2d = models::MlpBlockStack("enc_2d", j * 2 + 4, cfg.enc_hidden, d, rng, cfg.enc_blocks);
      enc_3d = models::MlpBlockStack("enc_3d", j * 3, cfg.enc_hidden, d, rng, cfg.enc_blocks);
    }
    tokens = models::ModalityToken("token", d, rng);
    dec_2d = models::MlpBlockStack("dec_2d", d, cfg.dec_hidden, j * 2, rng, cfg.dec_blocks);
    if (cfg.score_decoder_3d) {
      score_3d.emplace("dec_3d", j, 3, d, cfg.score_hidden, rng, cfg.dec_blocks);
    } else {
      dec_3d = models::MlpBlockStack("dec_3d", d, cfg.dec_hidden, j * 3, rng, cfg.dec_blocks);
    }

    // The token-free ablation: zeroed and permanently frozen, the additive
    // conditioning becomes a no-op while every code path stays identical.
    if (!cfg.use_modality_token) {
      for (ag::Parameter* p : {&tokens.image, &tokens.pose2d, &tokens.pose3d}) {
        std::fill(p->value.begin(), p->value.end(), 0.0);
        p->trainable = false;
      }
    }
  }

  ModelSet(const ModelSet&) = delete;
  ModelSet& operator=(const ModelSet&) = delete;

  void collect_module(const std::string& name, std::vector<ag::Parameter*>& into) {
    if (name == "image_encoder") return enc_img.collect(into);
    if (name == "pose2d_encoder") return tr_2d ? tr_2d->collect(into) : enc_2d.collect(into);
    if (name == "pose3d_encoder") return tr_3d ? tr_3d->collect(into) : enc_3d.collect(into);
    if (name == "modality_tokens") return tokens.collect(into);
    if (name == "pose2d_decoder") return dec_2d.collect(into);
    if (name == "pose3d_decoder") return score_3d ? score_3d->collect(into) : dec_3d.collect(into);
    throw std::invalid_argument("ModelSet: unknown module '" + name + "'");
  }

  std::vector<ag::Parameter*> module_params(const std::string& name) {
    std::vector<ag::Parameter*> out;
    collect_module(name, out);
    return out;
  }

  std::vector<ag::Parameter*> all_params() {
    std::vector<ag::Parameter*> out;
    for (const std::string& name : module_names()) collect_module(name, out);
    return out;
  }

  // --- batch encoding ------------------------------------------------------
  // Inputs enter the graph as constants; gradients flow only from the
  // parameters, and a frozen module's forward is tape-free automatically.

  ag::Tensor encode_images(const std::vector<numkit::Matrix>& flat_images,
                           const std::vector<std::size_t>& idx, ag::Tape* tape) {
    ag::Tensor in(idx.size(), 2 * cfg.grid * cfg.grid);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const numkit::Matrix& img = flat_images[idx[r]];
      if (img.cols != in.cols)
        throw std::invalid_argument("encode_images: cached image width " +
                                    std::to_string(img.cols) + ", model expects " +
                                    std::to_string(in.cols));
      std::copy(img.v.begin(), img.v.end(), in.v.begin() + r * in.cols);
    }
    return models::mlp_encode(in, enc_img, tape);
  }

  ag::Tensor encode_pose2d(const std::vector<synth::SampleRecord>& data,
                           const std::vector<std::size_t>& idx, ag::Tape* tape) {
    const std::size_t j = cfg.joints;
    if (tr_2d) {
      std::vector<ag::Tensor> rows;
      rows.reserve(idx.size());
      for (std::size_t i : idx) {
        ag::Tensor pose = ag::Tensor::from_matrix(data[i].pose2d.joints);
        ag::Tensor bbox(1, 4);
        for (std::size_t k = 0; k < 4; ++k) bbox.v[k] = data[i].pose2d.bbox[k] / kBboxScale;
        rows.push_back(models::transformer_encode(pose, &bbox, *tr_2d, tape));
      }
      return ag::concat_rows(rows);
    }
    ag::Tensor in(idx.size(), j * 2 + 4);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const synth::SampleRecord& rec = data[idx[r]];
      double* row = in.v.data() + r * in.cols;
      std::copy(rec.pose2d.joints.v.begin(), rec.pose2d.joints.v.end(), row);
      for (std::size_t k = 0; k < 4; ++k) row[j * 2 + k] = rec.pose2d.bbox[k] / kBboxScale;
    }
    return models::mlp_encode(in, enc_2d, tape);
  }

  ag::Tensor encode_pose3d(const std::vector<synth::SampleRecord>& data,
                           const std::vector<std::size_t>& idx, ag::Tape* tape) {
    const std::size_t j = cfg.joints;
    if (tr_3d) {
      std::vector<ag::Tensor> rows;
      rows.reserve(idx.size());
      for (std::size_t i : idx) {
        ag::Tensor pose(j, 3);
        for (std::size_t k = 0; k < pose.v.size(); ++k)
          pose.v[k] = data[i].pose3d.v[k] / kPoseScale;
        rows.push_back(models::transformer_encode(pose, nullptr, *tr_3d, tape));
      }
      return ag::concat_rows(rows);
    }
    ag::Tensor in(idx.size(), j * 3);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t k = 0; k < in.cols; ++k)
        in.v[r * in.cols + k] = data[idx[r]].pose3d.v[k] / kPoseScale;
    return models::mlp_encode(in, enc_3d, tape);
  }

  // --- decoding ------------------------------------------------------------
  // The modality token of the embedding's source is added before the head
  // runs; a zeroed frozen token (the ablation) degrades this to the bare
  // embedding.

  // B x D -> B x (J*2) bbox-normalized coordinates.
  ag::Tensor decode_pose2d(const ag::Tensor& emb, models::Modality source, ag::Tape* tape) {
    return dec_2d.forward(ag::add(emb, tokens.select(source, tape)), tape);
  }

  // B x D -> B x (J*3) in pose-scale units. MLP family only; the score
  // decoder trains through its own loss and samples through sample_pose3d.
  ag::Tensor decode_pose3d(const ag::Tensor& emb, models::Modality source, ag::Tape* tape) {
    if (score_3d)
      throw std::logic_error("decode_pose3d: this model set uses the score decoder; "
                             "sample_pose3d is the inference path");
    return dec_3d.forward(ag::add(emb, tokens.select(source, tape)), tape);
  }

  // One J x 3 pose in millimeters from a 1 x D embedding.
  numkit::Matrix predict_pose3d(const ag::Tensor& emb_row, models::Modality source,
                                numkit::Rng& sample_rng) {
    numkit::Matrix pose(cfg.joints, 3);
    if (score_3d) {
      pose = models::score_decoder_sample(*score_3d, tokens, emb_row, source, sample_rng);
    } else {
      const ag::Tensor flat = decode_pose3d(emb_row, source, nullptr);
      pose.v = flat.v;
    }
    for (double& x : pose.v) x *= kPoseScale;
    return pose;
  }
};

// ---------------------------------------------------------------------------
// StageConfig
// ---------------------------------------------------------------------------

struct StageConfig {
  int stage = 1;
  std::size_t batch = 256;
  double tau0 = 1.0 / 14.0;
  double tau_lo = 1.0 / 100.0;
  double tau_hi = 1e4;
  double alpha = 1.0;
  double lr = 1e-4;
  std::size_t iters = 8000;
  losses::ActivePairs pairs{};
  bool use_triplet = false;
  bool use_decoders = false;
  std::vector<std::string> frozen;
  std::size_t eval_interval = 250;
  std::uint64_t seed = 0;

  void validate() const {
    if (stage < 1 || stage > 3)
      throw std::invalid_argument("StageConfig: stage must be 1, 2, or 3");
    if (batch < 2)
      throw std::invalid_argument("StageConfig: batch must be >= 2 (InfoNCE needs negatives)");
    if (iters == 0 || eval_interval == 0)
      throw std::invalid_argument("StageConfig: iters and eval_interval must be >= 1");
    if (!(alpha >= 0.0))
      throw std::invalid_argument("StageConfig: alpha must be >= 0");
    if (!(lr > 0.0))
      throw std::invalid_argument("StageConfig: lr must be positive");
    if (!(tau_lo > 0.0) || tau_lo > tau_hi || tau0 < tau_lo || tau0 > tau_hi)
      throw std::invalid_argument("StageConfig: tau0 must sit inside a positive clamp range");
    if (!pairs.any() && !use_triplet && !use_decoders)
      throw std::invalid_argument("StageConfig: no active loss terms");
    for (const std::string& f : frozen)
      if (std::find(module_names().begin(), module_names().end(), f) == module_names().end())
        throw std::invalid_argument("StageConfig: unknown frozen module '" + f + "'");
  }
};

// Canonical schedules. Stage 1 pre-trains the pose encoders on the 2D-3D
// pair alone; stage 2 aligns the image encoder against both pose encoders
// frozen, with the triplet term on; stage 3 trains everything jointly and
// adds the decoder losses.
inline StageConfig stage1_defaults() {
  StageConfig c;
  c.stage = 1;
  c.batch = 256;
  c.tau0 = 1.0 / 14.0;
  c.tau_lo = 1.0 / 100.0;
  c.tau_hi = 1e4;
  c.pairs = {false, false, true};
  c.use_triplet = false;
  c.use_decoders = false;
  return c;
}

inline StageConfig stage2_defaults() {
  StageConfig c;
  c.stage = 2;
  c.batch = 64;
  c.tau0 = 1.0 / 5.0;
  c.tau_lo = 1.0 / 10.0;
  c.tau_hi = 1e4;
  c.pairs = {true, true, false};
  c.use_triplet = true;
  c.use_decoders = false;
  c.frozen = {"pose2d_encoder", "pose3d_encoder"};
  return c;
}

inline StageConfig stage3_defaults() {
  StageConfig c;
  c.stage = 3;
  c.batch = 64;
  c.tau0 = 1.0 / 5.0;
  c.tau_lo = 1.0 / 5.0;
  c.tau_hi = 1e4;
  c.pairs = losses::ActivePairs::all();
  c.use_triplet = true;
  c.use_decoders = true;
  return c;
}

// Enforces the per-stage structure the schedule is defined by. Ablation
// configs deviate deliberately and skip this check.
inline void require_canonical(const StageConfig& c) {
  c.validate();
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("StageConfig: stage " + std::to_string(c.stage) + " " + what);
  };
  switch (c.stage) {
    case 1:
      if (!c.frozen.empty()) fail("freezes nothing");
      if (c.pairs.img_2d || c.pairs.img_3d || !c.pairs.p2d_3d)
        fail("activates only the 2D-3D pair");
      if (c.use_triplet || c.use_decoders) fail("runs the pair loss alone");
      break;
    case 2:
      if (c.frozen.size() != 2 ||
          std::find(c.frozen.begin(), c.frozen.end(), "pose2d_encoder") == c.frozen.end() ||
          std::find(c.frozen.begin(), c.frozen.end(), "pose3d_encoder") == c.frozen.end())
        fail("freezes exactly the 2D and 3D pose encoders");
      if (!c.pairs.img_2d || !c.pairs.img_3d || c.pairs.p2d_3d)
        fail("activates the image pairs");
      if (!c.use_triplet) fail("runs with the triplet term");
      if (c.use_decoders) fail("trains no decoders");
      break;
    case 3:
      if (!c.frozen.empty()) fail("freezes nothing");
      if (!c.pairs.img_2d || !c.pairs.img_3d || !c.pairs.p2d_3d) fail("activates every pair");
      if (!c.use_decoders) fail("adds the decoder losses");
      break;
    default:
      fail("is not a known stage");
  }
}

// ---------------------------------------------------------------------------
// RunLog
// ---------------------------------------------------------------------------

struct RunLogRow {
  std::size_t iteration = 0;
  // Loss columns hold each term's contribution to the total, so the total
  // column equals their left-to-right sum exactly; inactive terms log 0.
  double loss_img_2d = 0.0;
  double loss_img_3d = 0.0;
  double loss_2d_3d = 0.0;
  double loss_triplet = 0.0;
  double loss_2d = 0.0;
  double loss_3d = 0.0;
  double loss_total = 0.0;
  double tau = 0.0;
  double cos_img_2d = 0.0;
  double cos_img_3d = 0.0;
  double cos_2d_3d = 0.0;
  double top1_img_2d = 0.0;
  double top1_img_3d = 0.0;
  double top1_2d_3d = 0.0;
};

struct RunLog {
  std::vector<RunLogRow> rows;

  static const char* header() {
    return "iteration,loss_img_2d,loss_img_3d,loss_2d_3d,loss_triplet,loss_2d,loss_3d,"
           "loss_total,tau,cos_img_2d,cos_img_3d,cos_2d_3d,top1_img_2d,top1_img_3d,top1_2d_3d";
  }

  // No timestamps, %.17g doubles: the CSV is part of the reproducibility
  // contract and must be byte-identical across equal-seed runs.
  std::string to_csv() const {
    std::string out = header();
    out += '\n';
    char buf[40];
    std::size_t prev = 0;
    for (const RunLogRow& r : rows) {
      if (r.iteration <= prev)
        throw std::logic_error("RunLog: iterations not strictly increasing at " +
                               std::to_string(r.iteration));
      prev = r.iteration;
      out += std::to_string(r.iteration);
      for (double x : {r.loss_img_2d, r.loss_img_3d, r.loss_2d_3d, r.loss_triplet, r.loss_2d,
                       r.loss_3d, r.loss_total, r.tau, r.cos_img_2d, r.cos_img_3d, r.cos_2d_3d,
                       r.top1_img_2d, r.top1_img_3d, r.top1_2d_3d}) {
        std::snprintf(buf, sizeof buf, ",%.17g", x);
        out += buf;
      }
      out += '\n';
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Image cache: pseudo-images rasterized once per dataset, reused by every
// batch. ~2*G*G doubles per record.
// ---------------------------------------------------------------------------

struct ImageCache {
  std::size_t grid = 0;
  double sigma = 0.0;
  std::vector<numkit::Matrix> flat;  // one 1 x 2*G*G row per record

  ImageCache(const std::vector<synth::SampleRecord>& data, std::size_t grid_, double sigma_)
      : grid(grid_), sigma(sigma_) {
    flat.reserve(data.size());
    for (const synth::SampleRecord& rec : data)
      flat.push_back(synth::record_image(rec, static_cast<int>(grid_), sigma_).flatten());
  }
};

// ---------------------------------------------------------------------------
// run_stage
// ---------------------------------------------------------------------------

struct StageResult {
  RunLog log;
  double final_tau = 0.0;
  std::string checkpoint_path;  // empty when no out_dir was given
  std::string log_path;
  std::vector<std::string> warnings;
};

namespace detail {

// Restores Parameter::trainable flags on scope exit, whatever path leaves.
struct FreezeGuard {
  std::vector<std::pair<ag::Parameter*, bool>> saved;
  explicit FreezeGuard(const std::vector<ag::Parameter*>& params) {
    saved.reserve(params.size());
    for (ag::Parameter* p : params) saved.emplace_back(p, p->trainable);
    for (ag::Parameter* p : params) p->trainable = false;
  }
  ~FreezeGuard() {
    for (auto& [p, was] : saved) p->trainable = was;
  }
};

}  // namespace detail

inline StageResult run_stage(const StageConfig& cfg, ModelSet& ms,
                             const std::vector<synth::SampleRecord>& dataset,
                             const ImageCache* images, const std::string& out_dir,
                             bool prior_checkpoint_loaded = true) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("run_stage: dataset is empty");

  StageResult result;
  if (cfg.stage == 2 && !prior_checkpoint_loaded) {
    result.warnings.push_back(
        "run_stage: stage 2 without a stage-1 checkpoint (no-pretraining ablation)");
    std::fprintf(stderr, "warning: %s\n", result.warnings.back().c_str());
  }

  const bool need_img = cfg.pairs.img_2d || cfg.pairs.img_3d || cfg.use_triplet || cfg.use_decoders;
  const bool need_2d = cfg.pairs.img_2d || cfg.pairs.p2d_3d || cfg.use_triplet || cfg.use_decoders;
  const bool need_3d = cfg.pairs.img_3d || cfg.pairs.p2d_3d || cfg.use_triplet;
  if (need_img && images == nullptr)
    throw std::invalid_argument("run_stage: this stage touches images but no cache was given");
  if (images != nullptr && images->flat.size() != dataset.size())
    throw std::invalid_argument("run_stage: image cache covers " +
                                std::to_string(images->flat.size()) + " records, dataset has " +
                                std::to_string(dataset.size()));

  // Freeze first, then collect trainables: a frozen module's parameters are
  // constants on the tape, so they never appear in the optimizer list.
  std::vector<ag::Parameter*> frozen_params;
  for (const std::string& name : cfg.frozen) ms.collect_module(name, frozen_params);
  detail::FreezeGuard guard(frozen_params);

  auto is_frozen = [&](const std::string& name) {
    return std::find(cfg.frozen.begin(), cfg.frozen.end(), name) != cfg.frozen.end();
  };
  std::vector<ag::Parameter*> trainable;
  if (need_img && !is_frozen("image_encoder")) ms.collect_module("image_encoder", trainable);
  if (need_2d && !is_frozen("pose2d_encoder")) ms.collect_module("pose2d_encoder", trainable);
  if (need_3d && !is_frozen("pose3d_encoder")) ms.collect_module("pose3d_encoder", trainable);
  if (cfg.use_decoders) {
    if (!is_frozen("pose2d_decoder")) ms.collect_module("pose2d_decoder", trainable);
    if (!is_frozen("pose3d_decoder")) ms.collect_module("pose3d_decoder", trainable);
    // Only the tokens of embeddings that get decoded participate; the 3D
    // token conditions nothing in this schedule and never trains.
    if (ms.cfg.use_modality_token && !is_frozen("modality_tokens")) {
      trainable.push_back(&ms.tokens.image);
      trainable.push_back(&ms.tokens.pose2d);
    }
  }

  // tau rides the contrastive graph: the loss functions pick their tape up
  // from the embeddings, so tau only receives gradients when some active
  // contrastive term flows through an unfrozen encoder.
  const bool img_live = need_img && !is_frozen("image_encoder");
  const bool p2d_live = need_2d && !is_frozen("pose2d_encoder");
  const bool p3d_live = need_3d && !is_frozen("pose3d_encoder");
  const bool tau_live = (cfg.pairs.img_2d && (img_live || p2d_live)) ||
                        (cfg.pairs.img_3d && (img_live || p3d_live)) ||
                        (cfg.pairs.p2d_3d && (p2d_live || p3d_live)) ||
                        (cfg.use_triplet && (img_live || p2d_live || p3d_live));

  losses::Temperature temp(cfg.tau0, cfg.tau_lo, cfg.tau_hi);
  if (tau_live) trainable.push_back(&temp.log_inv_tau);
  if (trainable.empty())
    throw std::invalid_argument("run_stage: nothing left to train (everything frozen)");

  models::AdamState opt;
  opt.lr = cfg.lr;
  // Batch order comes from its own stream so toggling the triplet or
  // decoder terms (which draw from aux_rng) cannot shift which samples any
  // iteration sees: comparison runs differ only by the loss term.
  numkit::Rng data_rng(cfg.seed);
  numkit::Rng aux_rng = numkit::Rng(cfg.seed).split(1);
  const std::size_t n = dataset.size(), j = ms.cfg.joints;

  for (std::size_t it = 1; it <= cfg.iters; ++it) {
    try {
      std::vector<std::size_t> idx(cfg.batch);
      for (std::size_t& i : idx) i = static_cast<std::size_t>(data_rng.next_u64() % n);

      ag::Tape tape;
      ag::Tensor x_img, x_2d, x_3d;
      if (need_img) x_img = ms.encode_images(images->flat, idx, &tape);
      if (need_2d) x_2d = ms.encode_pose2d(dataset, idx, &tape);
      if (need_3d) x_3d = ms.encode_pose3d(dataset, idx, &tape);

      // Contributions in RunLog column order; the total is their left fold.
      ag::Tensor comp_img_2d, comp_img_3d, comp_2d_3d, comp_triplet, comp_2d, comp_3d;
      if (cfg.pairs.img_2d) comp_img_2d = losses::info_nce_pair(x_img, x_2d, temp);
      if (cfg.pairs.img_3d) comp_img_3d = losses::info_nce_pair(x_img, x_3d, temp);
      if (cfg.pairs.p2d_3d) comp_2d_3d = losses::info_nce_pair(x_2d, x_3d, temp);
      if (cfg.use_triplet) {
        const losses::TripletIndexList tri = losses::sample_triplet_indices(cfg.batch, aux_rng);
        const losses::EmbeddingBatch batch{x_img, x_2d, x_3d};
        comp_triplet =
            ag::scale(losses::info_nce_triplet(losses::triplet_lambda_logits(batch, tri), temp),
                      cfg.alpha);
      }
      if (cfg.use_decoders) {
        ag::Tensor target_2d(cfg.batch, j * 2), target_3d(cfg.batch, j * 3);
        for (std::size_t r = 0; r < cfg.batch; ++r) {
          const synth::SampleRecord& rec = dataset[idx[r]];
          std::copy(rec.pose2d.joints.v.begin(), rec.pose2d.joints.v.end(),
                    target_2d.v.begin() + r * target_2d.cols);
          for (std::size_t k = 0; k < target_3d.cols; ++k)
            target_3d.v[r * target_3d.cols + k] = rec.pose3d.v[k] / kPoseScale;
        }
        comp_2d = ag::mse(ms.decode_pose2d(x_img, models::Modality::Image, &tape), target_2d);
        if (ms.score_3d) {
          // Per-sample denoising losses, both conditioning paths, averaged.
          ag::Tensor acc;
          bool first = true;
          for (std::size_t r = 0; r < cfg.batch; ++r) {
            const ag::Tensor clean = ag::gather_rows(target_3d, {r});
            const ag::Tensor l2d = models::score_decoder_loss(
                *ms.score_3d, ms.tokens, clean, ag::gather_rows(x_2d, {r}),
                models::Modality::Pose2D, aux_rng, &tape);
            const ag::Tensor limg = models::score_decoder_loss(
                *ms.score_3d, ms.tokens, clean, ag::gather_rows(x_img, {r}),
                models::Modality::Image, aux_rng, &tape);
            const ag::Tensor both = ag::add(l2d, limg);
            acc = first ? both : ag::add(acc, both);
            first = false;
          }
          comp_3d = ag::scale(acc, 1.0 / (2.0 * static_cast<double>(cfg.batch)));
        } else {
          const ag::Tensor lift =
              ag::mse(ms.decode_pose3d(x_2d, models::Modality::Pose2D, &tape), target_3d);
          const ag::Tensor from_img =
              ag::mse(ms.decode_pose3d(x_img, models::Modality::Image, &tape), target_3d);
          comp_3d = ag::add(lift, from_img);
        }
      }

      ag::Tensor total;
      bool first = true;
      for (const ag::Tensor* c :
           {&comp_img_2d, &comp_img_3d, &comp_2d_3d, &comp_triplet, &comp_2d, &comp_3d}) {
        if (c->v.empty()) continue;
        total = first ? *c : ag::add(total, *c);
        first = false;
      }
      if (!std::isfinite(total.scalar()))
        throw std::runtime_error("loss is not finite");

      tape.backward(total);
      models::adam_step(trainable, tape, opt);
      losses::clamp_temperature(temp);

      if (it == 1 || it % cfg.eval_interval == 0 || it == cfg.iters) {
        RunLogRow row;
        row.iteration = it;
        row.loss_img_2d = comp_img_2d.v.empty() ? 0.0 : comp_img_2d.scalar();
        row.loss_img_3d = comp_img_3d.v.empty() ? 0.0 : comp_img_3d.scalar();
        row.loss_2d_3d = comp_2d_3d.v.empty() ? 0.0 : comp_2d_3d.scalar();
        row.loss_triplet = comp_triplet.v.empty() ? 0.0 : comp_triplet.scalar();
        row.loss_2d = comp_2d.v.empty() ? 0.0 : comp_2d.scalar();
        row.loss_3d = comp_3d.v.empty() ? 0.0 : comp_3d.scalar();
        // The optimized objective; equals the left-to-right sum of the six
        // component columns exactly (the graph folds them in that order).
        row.loss_total = total.scalar();
        row.tau = temp.tau();
        if (need_img && need_2d) {
          row.cos_img_2d = metrics::mean_positive_cosine(x_img.to_matrix(), x_2d.to_matrix());
          row.top1_img_2d = metrics::retrieval_top1(x_img.to_matrix(), x_2d.to_matrix());
        }
        if (need_img && need_3d) {
          row.cos_img_3d = metrics::mean_positive_cosine(x_img.to_matrix(), x_3d.to_matrix());
          row.top1_img_3d = metrics::retrieval_top1(x_img.to_matrix(), x_3d.to_matrix());
        }
        if (need_2d && need_3d) {
          row.cos_2d_3d = metrics::mean_positive_cosine(x_2d.to_matrix(), x_3d.to_matrix());
          row.top1_2d_3d = metrics::retrieval_top1(x_2d.to_matrix(), x_3d.to_matrix());
        }
        result.log.rows.push_back(row);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("run_stage: stage " + std::to_string(cfg.stage) + " iteration " +
                               std::to_string(it) + ": " + e.what());
    }
  }

  result.final_tau = temp.tau();

  if (!out_dir.empty()) {
    const std::string base = out_dir + "/stage" + std::to_string(cfg.stage);
    result.checkpoint_path = base + ".ckpt";
    models::save_checkpoint(result.checkpoint_path, ms.all_params());
    result.log_path = base + "_log.csv";
    std::ofstream f(result.log_path, std::ios::binary);
    if (!f) throw std::runtime_error("run_stage: cannot open " + result.log_path);
    f << result.log.to_csv();
    if (!f) throw std::runtime_error("run_stage: write to " + result.log_path + " failed");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Branch-level prediction overrides. Tests substitute known mappings (a
// ground-truth echo, a constant) to verify the metric plumbing end to end.
struct EvalOverride {
  std::function<numkit::Matrix(const synth::SampleRecord&)> lift_pose3d;   // J x 3, mm
  std::function<numkit::Matrix(const synth::SampleRecord&)> image_pose3d;  // J x 3, mm
  std::function<numkit::Matrix(const synth::SampleRecord&)> image_pose2d;  // J x 2, normalized
};

namespace detail {
// Reserved Rng::split stream for evaluation-time score-decoder sampling
// (stream 1 is the pseudo-image's).
inline constexpr std::uint64_t kEvalSampleStream = 2;
}  // namespace detail

// Decodes every branch over the whole set and aggregates: millimeter errors
// for the two 3D branches (2D-embedding lifting and image), PCK/EPE for the
// 2D branch, plus the three pairwise alignment diagnostics.
inline metrics::MetricReport evaluate(ModelSet& ms,
                                      const std::vector<synth::SampleRecord>& data,
                                      const std::string& fingerprint,
                                      const EvalOverride* ov = nullptr) {
  if (data.size() < 2)
    throw std::invalid_argument("evaluate: need at least 2 samples, got " +
                                std::to_string(data.size()));
  const std::size_t n = data.size();

  ImageCache cache(data, ms.cfg.grid, ms.cfg.splat_sigma);
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const ag::Tensor e_img = ms.encode_images(cache.flat, all, nullptr);
  const ag::Tensor e_2d = ms.encode_pose2d(data, all, nullptr);
  const ag::Tensor e_3d = ms.encode_pose3d(data, all, nullptr);

  double mpjpe_lift = 0.0, pa_lift = 0.0, mpjpe_img = 0.0, pa_img = 0.0;
  double pck_sum = 0.0, epe_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const synth::SampleRecord& rec = data[i];
    numkit::Rng lift_rng = numkit::Rng(rec.seed).split(detail::kEvalSampleStream);
    numkit::Rng img_rng = numkit::Rng(rec.seed).split(detail::kEvalSampleStream + 1);

    const numkit::Matrix lift =
        (ov && ov->lift_pose3d)
            ? ov->lift_pose3d(rec)
            : ms.predict_pose3d(ag::gather_rows(e_2d, {i}), models::Modality::Pose2D, lift_rng);
    const numkit::Matrix from_img =
        (ov && ov->image_pose3d)
            ? ov->image_pose3d(rec)
            : ms.predict_pose3d(ag::gather_rows(e_img, {i}), models::Modality::Image, img_rng);
    mpjpe_lift += metrics::mpjpe(lift, rec.pose3d);
    pa_lift += metrics::pa_mpjpe(lift, rec.pose3d);
    mpjpe_img += metrics::mpjpe(from_img, rec.pose3d);
    pa_img += metrics::pa_mpjpe(from_img, rec.pose3d);

    synth::Pose2D pred2d;
    pred2d.bbox = rec.pose2d.bbox;
    if (ov && ov->image_pose2d) {
      pred2d.joints = ov->image_pose2d(rec);
    } else {
      const ag::Tensor flat =
          ms.decode_pose2d(ag::gather_rows(e_img, {i}), models::Modality::Image, nullptr);
      pred2d.joints = numkit::Matrix(ms.cfg.joints, 2);
      pred2d.joints.v = flat.v;
    }
    pck_sum += metrics::pck(pred2d, rec.pose2d);
    epe_sum += metrics::epe(pred2d, rec.pose2d);
  }

  const numkit::Matrix m_img = e_img.to_matrix();
  const numkit::Matrix m_2d = e_2d.to_matrix();
  const numkit::Matrix m_3d = e_3d.to_matrix();

  metrics::MetricReport rep;
  rep.sample_count = n;
  rep.config_fingerprint = fingerprint;
  const double dn = static_cast<double>(n);
  rep.set("mpjpe_lift", mpjpe_lift / dn, "mm");
  rep.set("pa_mpjpe_lift", pa_lift / dn, "mm");
  rep.set("mpjpe_image", mpjpe_img / dn, "mm");
  rep.set("pa_mpjpe_image", pa_img / dn, "mm");
  rep.set("pck_2d", pck_sum / dn, "fraction");
  rep.set("epe_2d", epe_sum / dn, "px");
  rep.set("cos_img_2d", metrics::mean_positive_cosine(m_img, m_2d), "cosine");
  rep.set("cos_img_3d", metrics::mean_positive_cosine(m_img, m_3d), "cosine");
  rep.set("cos_2d_3d", metrics::mean_positive_cosine(m_2d, m_3d), "cosine");
  rep.set("top1_img_2d", metrics::retrieval_top1(m_img, m_2d), "fraction");
  rep.set("top1_img_3d", metrics::retrieval_top1(m_img, m_3d), "fraction");
  rep.set("top1_2d_3d", metrics::retrieval_top1(m_2d, m_3d), "fraction");
  return rep;
}

// MPJPE of the constant mean-pose predictor over `data`: the baseline any
// trained lifting branch is measured against.
inline double mean_pose_mpjpe(const std::vector<synth::SampleRecord>& data) {
  if (data.empty()) throw std::invalid_argument("mean_pose_mpjpe: empty dataset");
  numkit::Matrix mean(data[0].pose3d.rows, 3);
  for (const synth::SampleRecord& rec : data)
    for (std::size_t k = 0; k < mean.v.size(); ++k) mean.v[k] += rec.pose3d.v[k];
  for (double& x : mean.v) x /= static_cast<double>(data.size());
  double sum = 0.0;
  for (const synth::SampleRecord& rec : data) sum += metrics::mpjpe(mean, rec.pose3d);
  return sum / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string name;
  bool use_pair = true;
  bool use_triplet = true;
  bool use_token = true;
};

struct AblationResult {
  std::vector<std::string> row_names;
  std::vector<metrics::MetricReport> reports;
};

// One full schedule per row, every row starting from identical weights
// (same init seed) and consuming identical stage seeds, so rows differ only
// by their toggles. Reports carry a shared fingerprint of the evaluation
// data plus the per-row toggle suffix for traceability.
inline AblationResult ablation_matrix(const std::vector<AblationRow>& rows_in,
                                      const ModelConfig& base_model,
                                      const std::vector<StageConfig>& schedule,
                                      const std::vector<synth::SampleRecord>& train_data,
                                      const std::vector<synth::SampleRecord>& eval_data,
                                      std::uint64_t seed) {
  if (rows_in.empty()) throw std::invalid_argument("ablation_matrix: no rows");
  if (schedule.empty()) throw std::invalid_argument("ablation_matrix: empty schedule");
  const std::string data_fp = dataset_fingerprint(eval_data);

  AblationResult out;
  for (const AblationRow& row : rows_in) {
    ModelConfig mc = base_model;
    mc.init_seed = seed;
    mc.use_modality_token = row.use_token;
    ModelSet ms(mc);

    ImageCache cache(train_data, mc.grid, mc.splat_sigma);
    for (std::size_t s = 0; s < schedule.size(); ++s) {
      StageConfig sc = schedule[s];
      sc.seed = seed + 1 + s;  // identical across rows by construction
      if (!row.use_pair) sc.pairs = {};
      sc.use_triplet = sc.use_triplet && row.use_triplet;
      if (!sc.pairs.any() && !sc.use_triplet && !sc.use_decoders) continue;  // nothing survives
      run_stage(sc, ms, train_data, &cache, "");
    }

    out.row_names.push_back(row.name);
    out.reports.push_back(evaluate(ms, eval_data, data_fp));
  }
  return out;
}

}  // namespace unihpe::pipeline
