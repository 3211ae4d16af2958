#pragma once

// Command-line front end: one binary, six subcommands. Everything the tool
// does flows through a run-config JSON file plus a handful of flags, and all
// randomness descends from the single seed in that file (or --seed for
// gen-data and bench-loss). dispatch() is the whole surface; main() is a
// two-line shim around it.
//
// Exit codes: 0 success, 1 validation error (flags, config, input files),
// 2 runtime failure (non-finite loss aborts and other mid-run errors).

#include <unihpe/pipeline.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace unihpe::cli {

// ---------------------------------------------------------------------------
// Flag parsing
// ---------------------------------------------------------------------------

struct FlagSpec {
  const char* name;        // without the leading dashes
  bool takes_value;
  bool required;
  const char* value_name;  // shown in --help for value-taking flags
  const char* help;
  const char* fallback;    // default value, nullptr when none applies
};

struct ParsedFlags {
  std::map<std::string, std::string> values;
  bool help = false;

  bool has(const std::string& name) const { return values.count(name) != 0; }
  const std::string& get(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end())
      throw std::logic_error("ParsedFlags: flag --" + name + " was not parsed");
    return it->second;
  }
};

inline std::string usage_text(const std::string& cmd, const std::vector<FlagSpec>& specs) {
  std::string out = "usage: unihpe " + cmd;
  for (const FlagSpec& s : specs) {
    out += s.required ? " --" : " [--";
    out += s.name;
    if (s.takes_value) out += std::string(" <") + s.value_name + ">";
    if (!s.required) out += "]";
  }
  out += "\n";
  for (const FlagSpec& s : specs) {
    out += "  --" + std::string(s.name);
    if (s.takes_value) out += std::string(" <") + s.value_name + ">";
    out += "  " + std::string(s.help);
    if (s.fallback != nullptr) out += std::string(" (default ") + s.fallback + ")";
    out += "\n";
  }
  out += "  --help  show this message\n";
  return out;
}

inline ParsedFlags parse_flags(const std::string& cmd, const std::vector<std::string>& args,
                               const std::vector<FlagSpec>& specs) {
  ParsedFlags out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--help" || a == "-h") {
      out.help = true;
      return out;
    }
    if (a.rfind("--", 0) != 0)
      throw std::invalid_argument(cmd + ": expected a flag, got '" + a + "'");
    const std::string name = a.substr(2);
    const FlagSpec* spec = nullptr;
    for (const FlagSpec& s : specs)
      if (name == s.name) spec = &s;
    if (spec == nullptr) throw std::invalid_argument(cmd + ": unknown flag --" + name);
    if (out.values.count(name)) throw std::invalid_argument(cmd + ": duplicate flag --" + name);
    if (spec->takes_value) {
      if (i + 1 >= args.size())
        throw std::invalid_argument(cmd + ": --" + name + " needs a value");
      out.values[name] = args[++i];
    } else {
      out.values[name] = "true";
    }
  }
  for (const FlagSpec& s : specs) {
    if (out.values.count(s.name)) continue;
    if (s.required) throw std::invalid_argument(cmd + ": missing required flag --" + s.name);
    if (s.fallback != nullptr) out.values[s.name] = s.fallback;
  }
  return out;
}

namespace detail {

inline std::uint64_t to_u64(const std::string& cmd, const std::string& flag,
                            const std::string& text) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(cmd + ": --" + flag + " wants an unsigned integer, got '" +
                                text + "'");
  }
}

inline std::size_t to_size(const std::string& cmd, const std::string& flag,
                           const std::string& text, std::size_t min_value) {
  const std::uint64_t v = to_u64(cmd, flag, text);
  if (v < min_value)
    throw std::invalid_argument(cmd + ": --" + flag + " must be >= " + std::to_string(min_value));
  return static_cast<std::size_t>(v);
}

inline std::string slurp(const std::string& cmd, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument(cmd + ": cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void require_file(const std::string& cmd, const std::string& flag,
                         const std::string& path) {
  if (!std::filesystem::exists(path))
    throw std::invalid_argument(cmd + ": --" + flag + " file not found: " + path);
}

// Data-split streams hung off the config seed. Record seeds are drawn from
// these, so train and eval never share a sample.
inline constexpr std::uint64_t kTrainDataStream = 10;
inline constexpr std::uint64_t kEvalDataStream = 11;

}  // namespace detail

// ---------------------------------------------------------------------------
// Run-config file
// ---------------------------------------------------------------------------
// JSON document with five sections. Unknown keys anywhere are rejected, and
// the three stage blocks must each be present: either a config object or
// {"disabled": true}.
//
// {
//   "seed": 1,
//   "out_dir": "runs/demo",
//   "data":  {"skeleton": "human16", "n_train": 4000, "n_eval": 512},
//   "model": {"joints": 16, "dim": 32, "grid": 16, "splat_sigma": 0.75,
//             "enc_hidden": 64, "enc_blocks": 2, "dec_hidden": 64,
//             "dec_blocks": 2, "transformer_pose_encoders": false,
//             "tf_width": 32, "tf_heads": 4, "tf_ff": 64, "tf_layers": 2,
//             "score_decoder_3d": false, "score_hidden": 64,
//             "use_modality_token": true},
//   "stage1": {"batch": 256, "tau0": 0.0714, "tau_lo": 0.01, "tau_hi": 1e4,
//              "alpha": 1.0, "lr": 1e-4, "iters": 8000, "eval_interval": 250,
//              "pairs": ["p2d_3d"], "use_triplet": false,
//              "use_decoders": false, "frozen": [], "seed": 2},
//   "stage2": {"disabled": true},
//   "stage3": {...}
// }
//
// Every stage key starts from that stage's canonical defaults, so a minimal
// config is {"stage1": {}, "stage2": {}, "stage3": {}}. A stage's seed
// defaults to the global seed plus the stage number.

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  std::string skeleton = "human16";
  std::size_t n_train = 4000;
  std::size_t n_eval = 512;
  pipeline::ModelConfig model;
  std::optional<pipeline::StageConfig> stage1;
  std::optional<pipeline::StageConfig> stage2;
  std::optional<pipeline::StageConfig> stage3;
  std::string raw;  // original file bytes, hashed into metric fingerprints
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                           const std::string& where) {
  if (!obj.is_object())
    throw std::invalid_argument("config: " + where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw std::invalid_argument("config: unknown key \"" + it.key() + "\" in " + where);
  }
}

template <typename T>
T get_or(const nlohmann::json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const std::exception&) {
    throw std::invalid_argument("config: " + where + "." + key + " has the wrong type");
  }
}

inline std::optional<pipeline::StageConfig> parse_stage_block(const nlohmann::json& obj,
                                                              int stage, std::uint64_t seed) {
  const std::string where = "stage" + std::to_string(stage);
  reject_unknown(obj,
                 {"disabled", "batch", "tau0", "tau_lo", "tau_hi", "alpha", "lr", "iters",
                  "eval_interval", "pairs", "use_triplet", "use_decoders", "frozen", "seed"},
                 where);
  if (get_or(obj, "disabled", false, where)) {
    if (obj.size() > 1)
      throw std::invalid_argument("config: " + where +
                                  " is disabled but carries other keys");
    return std::nullopt;
  }

  pipeline::StageConfig c = stage == 1   ? pipeline::stage1_defaults()
                            : stage == 2 ? pipeline::stage2_defaults()
                                         : pipeline::stage3_defaults();
  c.batch = get_or<std::size_t>(obj, "batch", c.batch, where);
  c.tau0 = get_or(obj, "tau0", c.tau0, where);
  c.tau_lo = get_or(obj, "tau_lo", c.tau_lo, where);
  c.tau_hi = get_or(obj, "tau_hi", c.tau_hi, where);
  c.alpha = get_or(obj, "alpha", c.alpha, where);
  c.lr = get_or(obj, "lr", c.lr, where);
  c.iters = get_or<std::size_t>(obj, "iters", c.iters, where);
  c.eval_interval = get_or<std::size_t>(obj, "eval_interval", c.eval_interval, where);
  c.use_triplet = get_or(obj, "use_triplet", c.use_triplet, where);
  c.use_decoders = get_or(obj, "use_decoders", c.use_decoders, where);
  c.seed = get_or<std::uint64_t>(obj, "seed", seed + static_cast<std::uint64_t>(stage), where);
  if (obj.contains("pairs")) {
    if (!obj.at("pairs").is_array())
      throw std::invalid_argument("config: " + where + ".pairs must be an array");
    c.pairs = {};
    for (const auto& p : obj.at("pairs")) {
      const std::string s = p.get<std::string>();
      if (s == "img_2d") c.pairs.img_2d = true;
      else if (s == "img_3d") c.pairs.img_3d = true;
      else if (s == "p2d_3d") c.pairs.p2d_3d = true;
      else
        throw std::invalid_argument("config: " + where + ".pairs has unknown pair \"" + s +
                                    "\" (wants img_2d, img_3d, p2d_3d)");
    }
  }
  if (obj.contains("frozen")) {
    if (!obj.at("frozen").is_array())
      throw std::invalid_argument("config: " + where + ".frozen must be an array");
    c.frozen.clear();
    for (const auto& f : obj.at("frozen")) c.frozen.push_back(f.get<std::string>());
  }
  c.validate();
  return c;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
  }
  detail::reject_unknown(j, {"seed", "out_dir", "data", "model", "stage1", "stage2", "stage3"},
                         "the top level");
  for (const char* key : {"stage1", "stage2", "stage3"})
    if (!j.contains(key))
      throw std::invalid_argument(std::string("config: ") + key +
                                  " block missing; every stage must be present or "
                                  "explicitly {\"disabled\": true}");

  RunConfig cfg;
  cfg.raw = text;
  cfg.seed = detail::get_or<std::uint64_t>(j, "seed", cfg.seed, "the top level");
  cfg.out_dir = detail::get_or<std::string>(j, "out_dir", cfg.out_dir, "the top level");

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"skeleton", "n_train", "n_eval"}, "data");
    cfg.skeleton = detail::get_or<std::string>(d, "skeleton", cfg.skeleton, "data");
    cfg.n_train = detail::get_or<std::size_t>(d, "n_train", cfg.n_train, "data");
    cfg.n_eval = detail::get_or<std::size_t>(d, "n_eval", cfg.n_eval, "data");
  }
  if (cfg.skeleton != "human16")
    throw std::invalid_argument("config: data.skeleton \"" + cfg.skeleton +
                                "\" is not a known skeleton (only human16 exists)");
  if (cfg.n_train < 2 || cfg.n_eval < 2)
    throw std::invalid_argument("config: n_train and n_eval must be >= 2");

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m,
                           {"joints", "dim", "grid", "splat_sigma", "enc_hidden", "enc_blocks",
                            "dec_hidden", "dec_blocks", "transformer_pose_encoders", "tf_width",
                            "tf_heads", "tf_ff", "tf_layers", "score_decoder_3d", "score_hidden",
                            "use_modality_token"},
                           "model");
    pipeline::ModelConfig& mc = cfg.model;
    mc.joints = detail::get_or<std::size_t>(m, "joints", mc.joints, "model");
    mc.dim = detail::get_or<std::size_t>(m, "dim", mc.dim, "model");
    mc.grid = detail::get_or<std::size_t>(m, "grid", mc.grid, "model");
    mc.splat_sigma = detail::get_or(m, "splat_sigma", mc.splat_sigma, "model");
    mc.enc_hidden = detail::get_or<std::size_t>(m, "enc_hidden", mc.enc_hidden, "model");
    mc.enc_blocks = detail::get_or<std::size_t>(m, "enc_blocks", mc.enc_blocks, "model");
    mc.dec_hidden = detail::get_or<std::size_t>(m, "dec_hidden", mc.dec_hidden, "model");
    mc.dec_blocks = detail::get_or<std::size_t>(m, "dec_blocks", mc.dec_blocks, "model");
    mc.transformer_pose_encoders =
        detail::get_or(m, "transformer_pose_encoders", mc.transformer_pose_encoders, "model");
    mc.tf_width = detail::get_or<std::size_t>(m, "tf_width", mc.tf_width, "model");
    mc.tf_heads = detail::get_or<std::size_t>(m, "tf_heads", mc.tf_heads, "model");
    mc.tf_ff = detail::get_or<std::size_t>(m, "tf_ff", mc.tf_ff, "model");
    mc.tf_layers = detail::get_or<std::size_t>(m, "tf_layers", mc.tf_layers, "model");
    mc.score_decoder_3d = detail::get_or(m, "score_decoder_3d", mc.score_decoder_3d, "model");
    mc.score_hidden = detail::get_or<std::size_t>(m, "score_hidden", mc.score_hidden, "model");
    mc.use_modality_token =
        detail::get_or(m, "use_modality_token", mc.use_modality_token, "model");
  }
  if (cfg.model.joints != 16)
    throw std::invalid_argument("config: model.joints must be 16 to match the human16 skeleton");
  cfg.model.init_seed = cfg.seed;
  cfg.model.validate();

  cfg.stage1 = detail::parse_stage_block(j.at("stage1"), 1, cfg.seed);
  cfg.stage2 = detail::parse_stage_block(j.at("stage2"), 2, cfg.seed);
  cfg.stage3 = detail::parse_stage_block(j.at("stage3"), 3, cfg.seed);
  if (!cfg.stage1 && !cfg.stage2 && !cfg.stage3)
    throw std::invalid_argument("config: every stage is disabled, nothing to run");
  return cfg;
}

inline RunConfig load_run_config(const std::string& cmd, const std::string& path) {
  detail::require_file(cmd, "config", path);
  return parse_run_config(detail::slurp(cmd, path));
}

namespace detail {

inline std::vector<synth::SampleRecord> build_split(const RunConfig& cfg, bool eval_split) {
  numkit::Rng rng =
      numkit::Rng(cfg.seed).split(eval_split ? kEvalDataStream : kTrainDataStream);
  return synth::make_dataset(eval_split ? cfg.n_eval : cfg.n_train, rng,
                             synth::SkeletonSpec::human16());
}

// config-bytes hash + eval-data hash: two runs share a fingerprint exactly
// when they evaluated the same configuration on the same samples.
inline std::string run_fingerprint(const RunConfig& cfg,
                                   const std::vector<synth::SampleRecord>& eval_data) {
  return pipeline::detail::hex64(
             pipeline::detail::fnv1a64(cfg.raw.data(), cfg.raw.size())) +
         "-" + pipeline::dataset_fingerprint(eval_data);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << text;
  if (!f) throw std::runtime_error("write to " + path + " failed");
}

inline std::string metrics_csv(const metrics::MetricReport& rep) {
  return rep.csv_header() + "\n" + rep.csv_row() + "\n";
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

inline int cmd_gen_data(const std::vector<std::string>& args) {
  const std::vector<FlagSpec> specs = {
      {"n", true, true, "count", "number of samples to generate", nullptr},
      {"seed", true, false, "u64", "generation seed", "1"},
      {"out", true, true, "path", "output JSONL file", nullptr},
  };
  const ParsedFlags f = parse_flags("gen-data", args, specs);
  if (f.help) {
    std::fputs(usage_text("gen-data", specs).c_str(), stdout);
    return 0;
  }
  const std::size_t n = detail::to_size("gen-data", "n", f.get("n"), 1);
  numkit::Rng rng(detail::to_u64("gen-data", "seed", f.get("seed")));
  const auto data = synth::make_dataset(n, rng, synth::SkeletonSpec::human16());
  synth::write_jsonl(f.get("out"), data);
  std::printf("wrote %zu records to %s\n", data.size(), f.get("out").c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int cmd_train(const std::vector<std::string>& args) {
  const std::vector<FlagSpec> specs = {
      {"config", true, true, "file", "run-config JSON", nullptr},
      {"stage", true, false, "1|2|3|all", "which stage(s) to run", "all"},
  };
  const ParsedFlags f = parse_flags("train", args, specs);
  if (f.help) {
    std::fputs(usage_text("train", specs).c_str(), stdout);
    return 0;
  }
  const RunConfig cfg = load_run_config("train", f.get("config"));
  const std::string which = f.get("stage");
  if (which != "1" && which != "2" && which != "3" && which != "all")
    throw std::invalid_argument("train: --stage wants 1, 2, 3, or all, got '" + which + "'");

  std::vector<int> stages;
  const std::optional<pipeline::StageConfig>* blocks[3] = {&cfg.stage1, &cfg.stage2, &cfg.stage3};
  if (which == "all") {
    for (int s = 1; s <= 3; ++s)
      if (blocks[s - 1]->has_value()) stages.push_back(s);
  } else {
    const int s = which[0] - '0';
    if (!blocks[s - 1]->has_value())
      throw std::invalid_argument("train: stage " + which + " is disabled in the config");
    stages.push_back(s);
  }

  std::filesystem::create_directories(cfg.out_dir);
  const auto train_data = detail::build_split(cfg, false);
  const auto eval_data = detail::build_split(cfg, true);

  pipeline::ModelSet ms(cfg.model);
  std::optional<pipeline::ImageCache> cache;
  bool prior_loaded = false;

  for (std::size_t k = 0; k < stages.size(); ++k) {
    const int s = stages[k];
    const pipeline::StageConfig& sc = **blocks[s - 1];

    // A fresh invocation resumes from the previous stage's checkpoint on
    // disk; within one invocation the weights carry over in memory.
    const bool chained = k > 0;
    if (!chained && s > 1) {
      const std::string prev =
          cfg.out_dir + "/stage" + std::to_string(s - 1) + ".ckpt";
      if (std::filesystem::exists(prev)) {
        models::load_checkpoint(prev, ms.all_params());
        prior_loaded = true;
      } else {
        prior_loaded = false;
        if (s == 3)
          std::fprintf(stderr, "warning: train: stage 3 without a stage-2 checkpoint\n");
      }
    } else if (chained) {
      prior_loaded = true;
    }

    const bool needs_images =
        sc.pairs.img_2d || sc.pairs.img_3d || sc.use_triplet || sc.use_decoders;
    if (needs_images && !cache) cache.emplace(train_data, cfg.model.grid, cfg.model.splat_sigma);

    std::printf("stage %d: %zu iterations, batch %zu\n", s, sc.iters, sc.batch);
    const pipeline::StageResult res = pipeline::run_stage(
        sc, ms, train_data, cache ? &*cache : nullptr, cfg.out_dir, prior_loaded || s == 1);
    std::printf("stage %d done: tau %.6g, log %s\n", s, res.final_tau, res.log_path.c_str());
  }

  const metrics::MetricReport rep =
      pipeline::evaluate(ms, eval_data, detail::run_fingerprint(cfg, eval_data));
  detail::write_text(cfg.out_dir + "/metrics.csv", detail::metrics_csv(rep));
  detail::write_text(cfg.out_dir + "/metrics.json", rep.to_json().dump(2) + "\n");
  std::printf("metrics: %s/metrics.csv\n", cfg.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline int cmd_eval(const std::vector<std::string>& args) {
  const std::vector<FlagSpec> specs = {
      {"config", true, true, "file", "run-config JSON (defines the model shape)", nullptr},
      {"checkpoint", true, true, "file", "checkpoint to load", nullptr},
      {"data", true, true, "file", "JSONL dataset to evaluate on", nullptr},
      {"out", true, false, "path", "write CSV here instead of stdout", nullptr},
  };
  const ParsedFlags f = parse_flags("eval", args, specs);
  if (f.help) {
    std::fputs(usage_text("eval", specs).c_str(), stdout);
    return 0;
  }
  const RunConfig cfg = load_run_config("eval", f.get("config"));
  detail::require_file("eval", "checkpoint", f.get("checkpoint"));
  detail::require_file("eval", "data", f.get("data"));

  const auto data = synth::read_jsonl(f.get("data"));
  pipeline::ModelSet ms(cfg.model);
  models::load_checkpoint(f.get("checkpoint"), ms.all_params());

  const metrics::MetricReport rep =
      pipeline::evaluate(ms, data, detail::run_fingerprint(cfg, data));
  const std::string csv = detail::metrics_csv(rep);
  if (f.has("out")) {
    detail::write_text(f.get("out"), csv);
    detail::write_text(f.get("out") + ".json", rep.to_json().dump(2) + "\n");
  } else {
    std::fputs(csv.c_str(), stdout);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

inline int cmd_ablate(const std::vector<std::string>& args) {
  const std::vector<FlagSpec> specs = {
      {"config", true, true, "file", "run-config JSON", nullptr},
      {"out", true, false, "path", "output CSV", nullptr},
  };
  const ParsedFlags f = parse_flags("ablate", args, specs);
  if (f.help) {
    std::fputs(usage_text("ablate", specs).c_str(), stdout);
    return 0;
  }
  const RunConfig cfg = load_run_config("ablate", f.get("config"));

  std::vector<pipeline::StageConfig> schedule;
  for (const auto* block : {&cfg.stage1, &cfg.stage2, &cfg.stage3})
    if (block->has_value()) schedule.push_back(**block);

  const std::vector<pipeline::AblationRow> rows = {
      {"full", true, true, true},
      {"no_pair", false, true, true},
      {"no_triplet", true, false, true},
      {"no_token", true, true, false},
  };
  const auto train_data = detail::build_split(cfg, false);
  const auto eval_data = detail::build_split(cfg, true);
  const pipeline::AblationResult res =
      pipeline::ablation_matrix(rows, cfg.model, schedule, train_data, eval_data, cfg.seed);

  std::string csv = "row," + res.reports[0].csv_header() + "\n";
  for (std::size_t i = 0; i < res.reports.size(); ++i)
    csv += res.row_names[i] + "," + res.reports[i].csv_row() + "\n";

  std::filesystem::create_directories(cfg.out_dir);
  const std::string out = f.has("out") ? f.get("out") : cfg.out_dir + "/ablation.csv";
  detail::write_text(out, csv);
  std::printf("wrote %zu ablation rows to %s\n", res.reports.size(), out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// export-embeddings
// ---------------------------------------------------------------------------

inline int cmd_export_embeddings(const std::vector<std::string>& args) {
  const std::vector<FlagSpec> specs = {
      {"config", true, true, "file", "run-config JSON (defines the model shape)", nullptr},
      {"checkpoint", true, true, "file", "checkpoint to load", nullptr},
      {"data", true, true, "file", "JSONL dataset to embed", nullptr},
      {"out", true, true, "path", "output CSV", nullptr},
  };
  const ParsedFlags f = parse_flags("export-embeddings", args, specs);
  if (f.help) {
    std::fputs(usage_text("export-embeddings", specs).c_str(), stdout);
    return 0;
  }
  const RunConfig cfg = load_run_config("export-embeddings", f.get("config"));
  detail::require_file("export-embeddings", "checkpoint", f.get("checkpoint"));
  detail::require_file("export-embeddings", "data", f.get("data"));

  const auto data = synth::read_jsonl(f.get("data"));
  if (data.empty())
    throw std::invalid_argument("export-embeddings: dataset is empty");
  pipeline::ModelSet ms(cfg.model);
  models::load_checkpoint(f.get("checkpoint"), ms.all_params());

  pipeline::ImageCache cache(data, cfg.model.grid, cfg.model.splat_sigma);
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const ag::Tensor e_img = ms.encode_images(cache.flat, all, nullptr);
  const ag::Tensor e_2d = ms.encode_pose2d(data, all, nullptr);
  const ag::Tensor e_3d = ms.encode_pose3d(data, all, nullptr);

  std::string csv = "id,modality";
  for (std::size_t d = 0; d < cfg.model.dim; ++d) csv += ",e" + std::to_string(d);
  csv += "\n";
  char buf[40];
  const struct {
    const char* label;
    const ag::Tensor* emb;
  } groups[] = {{"image", &e_img}, {"pose2d", &e_2d}, {"pose3d", &e_3d}};
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (const auto& g : groups) {
      csv += std::to_string(data[i].id);
      csv += ",";
      csv += g.label;
      for (std::size_t d = 0; d < cfg.model.dim; ++d) {
        std::snprintf(buf, sizeof buf, ",%.17g", g.emb->at(i, d));
        csv += buf;
      }
      csv += "\n";
    }
  }
  detail::write_text(f.get("out"), csv);
  std::printf("wrote %zu embeddings to %s\n", 3 * data.size(), f.get("out").c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// bench-loss
// ---------------------------------------------------------------------------

namespace detail {

// sigma1^2 of a 3 x D matrix by one-sided Jacobi: rotate row pairs until
// they are mutually orthogonal; the squared row norms are then the squared
// singular values. This is the explicit-SVD comparator for the benchmark,
// deliberately independent of the 3x3 Gram shortcut.
inline double jacobi_sigma1_sq(std::vector<double>& rows, std::size_t d) {
  auto dot = [&](std::size_t p, std::size_t q) {
    double s = 0.0;
    const double* rp = rows.data() + p * d;
    const double* rq = rows.data() + q * d;
    for (std::size_t k = 0; k < d; ++k) s += rp[k] * rq[k];
    return s;
  };
  for (int sweep = 0; sweep < 30; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p < 3; ++p) {
      for (std::size_t q = p + 1; q < 3; ++q) {
        const double app = dot(p, p), aqq = dot(q, q), apq = dot(p, q);
        if (std::abs(apq) <= 1e-14 * std::sqrt(app * aqq)) continue;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = t * c;
        double* rp = rows.data() + p * d;
        double* rq = rows.data() + q * d;
        for (std::size_t k = 0; k < d; ++k) {
          const double x = rp[k], y = rq[k];
          rp[k] = c * x - s * y;
          rq[k] = s * x + c * y;
        }
        rotated = true;
      }
    }
    if (!rotated) break;
  }
  double best = 0.0;
  for (std::size_t p = 0; p < 3; ++p) best = std::max(best, dot(p, p));
  return best;
}

}  // namespace detail

struct BenchLossResult {
  std::size_t b = 0, d = 0, iters = 0;
  double max_gap = 0.0;    // spot-check disagreement between the two paths
  double gram_s = 0.0;     // seconds per batch, Gram-eigenvalue path
  double svd_s = 0.0;      // seconds per batch, explicit-SVD path
  double ratio = 0.0;      // svd_s / gram_s
};

inline BenchLossResult run_bench_loss(std::size_t b, std::size_t d, std::size_t iters,
                                      std::uint64_t seed) {
  numkit::Rng rng(seed);

  auto unit_rows = [&]() {
    ag::Tensor t(b, d);
    for (auto& x : t.v) x = rng.normal();
    return ag::l2norm_rows(t);
  };
  const losses::EmbeddingBatch batch{unit_rows(), unit_rows(), unit_rows()};
  const losses::TripletIndexList idx = losses::sample_triplet_indices(b, rng);

  // Both paths assemble the same 3 x D stack per (anchor, slot); they differ
  // only in how sigma1^2 comes out of it. One untimed pass checks agreement.
  std::vector<double> stack(3 * d);
  auto fill_stack = [&](std::size_t i, std::size_t slot) {
    const auto a = idx.at(i, slot, 0);
    const auto p2 = idx.at(i, slot, 1);
    const auto p3 = idx.at(i, slot, 2);
    std::copy(batch.x_img.v.begin() + a * d, batch.x_img.v.begin() + (a + 1) * d, stack.begin());
    std::copy(batch.x_2d.v.begin() + p2 * d, batch.x_2d.v.begin() + (p2 + 1) * d,
              stack.begin() + d);
    std::copy(batch.x_3d.v.begin() + p3 * d, batch.x_3d.v.begin() + (p3 + 1) * d,
              stack.begin() + 2 * d);
  };
  auto gram_lambda1 = [&]() {
    ag::Tensor m(3, d);
    m.v.assign(stack.begin(), stack.end());
    return ag::top_eig3(ag::matmul_nt(m, m)).scalar();
  };

  double max_gap = 0.0;
  for (std::size_t i = 0; i < std::min<std::size_t>(b, 8); ++i) {
    for (std::size_t slot = 0; slot < std::min<std::size_t>(b, 8); ++slot) {
      fill_stack(i, slot);
      const double lam = gram_lambda1();
      std::vector<double> copy = stack;
      max_gap = std::max(max_gap, std::abs(lam - detail::jacobi_sigma1_sq(copy, d)));
    }
  }

  using clock = std::chrono::steady_clock;
  auto time_path = [&](auto&& eval_one) {
    double sink = 0.0;
    const auto t0 = clock::now();
    for (std::size_t rep = 0; rep < iters; ++rep)
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t slot = 0; slot < b; ++slot) {
          fill_stack(i, slot);
          sink += eval_one();
        }
    const auto t1 = clock::now();
    if (!std::isfinite(sink)) throw std::runtime_error("bench-loss: non-finite eigenvalues");
    return std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(iters);
  };

  BenchLossResult res;
  res.b = b;
  res.d = d;
  res.iters = iters;
  res.max_gap = max_gap;
  res.gram_s = time_path([&]() { return gram_lambda1(); });
  res.svd_s = time_path([&]() { return detail::jacobi_sigma1_sq(stack, d); });
  res.ratio = res.svd_s / res.gram_s;
  return res;
}

inline int cmd_bench_loss(const std::vector<std::string>& args) {
  const std::vector<FlagSpec> specs = {
      {"b", true, false, "batch", "batch size", "180"},
      {"d", true, false, "dim", "embedding width", "1024"},
      {"iters", true, false, "count", "batches per timed path", "3"},
      {"seed", true, false, "u64", "embedding seed", "1"},
  };
  const ParsedFlags f = parse_flags("bench-loss", args, specs);
  if (f.help) {
    std::fputs(usage_text("bench-loss", specs).c_str(), stdout);
    return 0;
  }
  const BenchLossResult r =
      run_bench_loss(detail::to_size("bench-loss", "b", f.get("b"), 2),
                     detail::to_size("bench-loss", "d", f.get("d"), 2),
                     detail::to_size("bench-loss", "iters", f.get("iters"), 1),
                     detail::to_u64("bench-loss", "seed", f.get("seed")));

  std::printf("b=%zu d=%zu iters=%zu\n", r.b, r.d, r.iters);
  std::printf("max |lambda1 - sigma1^2| on spot checks: %.3g\n", r.max_gap);
  std::printf("gram_s_per_batch=%.17g\n", r.gram_s);
  std::printf("svd_s_per_batch=%.17g\n", r.svd_s);
  std::printf("ratio=%.17g\n", r.ratio);
  return 0;
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

inline const char* kGlobalUsage =
    "usage: unihpe <command> [flags]\n"
    "\n"
    "commands:\n"
    "  gen-data           generate a synthetic dataset as JSONL\n"
    "  train              run the staged training schedule from a config file\n"
    "  eval               evaluate a checkpoint on a JSONL dataset\n"
    "  ablate             run the loss/token ablation matrix\n"
    "  export-embeddings  dump per-sample embeddings for all three modalities\n"
    "  bench-loss         time the Gram-eigenvalue path against explicit SVD\n"
    "\n"
    "run 'unihpe <command> --help' for that command's flags\n";

inline int dispatch(const std::vector<std::string>& args) {
  try {
    if (args.empty() || args[0] == "--help" || args[0] == "-h") {
      std::fputs(kGlobalUsage, stdout);
      return 0;
    }
    const std::string& cmd = args[0];
    const std::vector<std::string> rest(args.begin() + 1, args.end());
    if (cmd == "gen-data") return cmd_gen_data(rest);
    if (cmd == "train") return cmd_train(rest);
    if (cmd == "eval") return cmd_eval(rest);
    if (cmd == "ablate") return cmd_ablate(rest);
    if (cmd == "export-embeddings") return cmd_export_embeddings(rest);
    if (cmd == "bench-loss") return cmd_bench_loss(rest);
    throw std::invalid_argument("unknown command '" + cmd + "'");
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

}  // namespace unihpe::cli
