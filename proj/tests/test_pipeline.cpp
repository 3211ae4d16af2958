#include <unihpe/pipeline.hpp>

#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace unihpe;
using Catch::Matchers::ContainsSubstring;

namespace {

// Small enough that a full stage run takes well under a second.
pipeline::ModelConfig tiny_model(std::uint64_t init_seed = 11) {
  pipeline::ModelConfig mc;
  mc.joints = 16;
  mc.dim = 8;
  mc.grid = 8;
  mc.enc_hidden = 16;
  mc.enc_blocks = 1;
  mc.dec_hidden = 16;
  mc.dec_blocks = 1;
  mc.init_seed = init_seed;
  return mc;
}

std::vector<synth::SampleRecord> tiny_dataset(std::size_t n, std::uint64_t seed = 501) {
  numkit::Rng rng(seed);
  return synth::make_dataset(n, rng, synth::SkeletonSpec::human16());
}

pipeline::StageConfig short_stage(int stage, std::size_t iters, std::uint64_t seed) {
  pipeline::StageConfig c = stage == 1   ? pipeline::stage1_defaults()
                            : stage == 2 ? pipeline::stage2_defaults()
                                         : pipeline::stage3_defaults();
  c.batch = 6;
  c.iters = iters;
  c.eval_interval = 5;
  c.seed = seed;
  return c;
}

std::vector<double> snapshot(const std::vector<ag::Parameter*>& params) {
  std::vector<double> out;
  for (const ag::Parameter* p : params) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("model set construction is seeded and validated") {
  pipeline::ModelConfig mc = tiny_model();
  pipeline::ModelSet a(mc), b(mc);
  REQUIRE(snapshot(a.all_params()) == snapshot(b.all_params()));

  pipeline::ModelSet c(tiny_model(12));
  REQUIRE(snapshot(a.all_params()) != snapshot(c.all_params()));

  std::vector<ag::Parameter*> all = a.all_params();
  REQUIRE(!all.empty());
  for (const std::string& name : pipeline::module_names())
    REQUIRE(!a.module_params(name).empty());
  REQUIRE_THROWS_AS(a.module_params("pose4d_encoder"), std::invalid_argument);

  pipeline::ModelConfig bad = tiny_model();
  bad.dim = 1;
  REQUIRE_THROWS_AS(pipeline::ModelSet(bad), std::invalid_argument);
  bad = tiny_model();
  bad.transformer_pose_encoders = true;
  bad.tf_width = 10;
  bad.tf_heads = 4;
  REQUIRE_THROWS_AS(pipeline::ModelSet(bad), std::invalid_argument);

  SECTION("token-free variant zeroes and freezes the tokens") {
    pipeline::ModelConfig nt = tiny_model();
    nt.use_modality_token = false;
    pipeline::ModelSet m(nt);
    for (const ag::Parameter* p : {&m.tokens.image, &m.tokens.pose2d, &m.tokens.pose3d}) {
      REQUIRE_FALSE(p->trainable);
      for (double x : p->value) REQUIRE(x == 0.0);
    }
  }
}

TEST_CASE("stage presets satisfy the canonical schedule invariants") {
  REQUIRE_NOTHROW(pipeline::require_canonical(pipeline::stage1_defaults()));
  REQUIRE_NOTHROW(pipeline::require_canonical(pipeline::stage2_defaults()));
  REQUIRE_NOTHROW(pipeline::require_canonical(pipeline::stage3_defaults()));

  REQUIRE(pipeline::stage1_defaults().batch == 256);
  REQUIRE(pipeline::stage1_defaults().tau0 == Catch::Approx(1.0 / 14.0));
  REQUIRE(pipeline::stage2_defaults().batch == 64);
  REQUIRE(pipeline::stage2_defaults().tau0 == Catch::Approx(1.0 / 5.0));
  REQUIRE(pipeline::stage3_defaults().tau_lo == Catch::Approx(1.0 / 5.0));
  REQUIRE(pipeline::stage1_defaults().lr == Catch::Approx(1e-4));
  REQUIRE(pipeline::stage1_defaults().iters == 8000);

  pipeline::StageConfig c = pipeline::stage1_defaults();
  c.frozen = {"image_encoder"};
  REQUIRE_THROWS_AS(pipeline::require_canonical(c), std::invalid_argument);

  c = pipeline::stage2_defaults();
  c.use_triplet = false;
  REQUIRE_THROWS_AS(pipeline::require_canonical(c), std::invalid_argument);

  c = pipeline::stage2_defaults();
  c.frozen = {"pose2d_encoder"};
  REQUIRE_THROWS_AS(pipeline::require_canonical(c), std::invalid_argument);

  c = pipeline::stage3_defaults();
  c.use_decoders = false;
  REQUIRE_THROWS_AS(pipeline::require_canonical(c), std::invalid_argument);

  SECTION("structural validation") {
    pipeline::StageConfig bad = pipeline::stage1_defaults();
    bad.batch = 1;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = pipeline::stage1_defaults();
    bad.tau0 = 1e-9;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = pipeline::stage1_defaults();
    bad.frozen = {"nonexistent"};
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = pipeline::stage1_defaults();
    bad.pairs = {};
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}

TEST_CASE("frozen modules are bit-identical across a stage-2 run") {
  pipeline::ModelSet ms(tiny_model());
  const auto data = tiny_dataset(24);
  pipeline::ImageCache cache(data, ms.cfg.grid, ms.cfg.splat_sigma);

  const std::vector<double> frozen_before =
      snapshot(ms.module_params("pose2d_encoder"));
  const std::vector<double> frozen3_before =
      snapshot(ms.module_params("pose3d_encoder"));
  const std::vector<double> image_before = snapshot(ms.module_params("image_encoder"));

  pipeline::StageConfig cfg = short_stage(2, 12, 77);
  const pipeline::StageResult res = pipeline::run_stage(cfg, ms, data, &cache, "");

  REQUIRE(snapshot(ms.module_params("pose2d_encoder")) == frozen_before);
  REQUIRE(snapshot(ms.module_params("pose3d_encoder")) == frozen3_before);
  REQUIRE(snapshot(ms.module_params("image_encoder")) != image_before);
  REQUIRE(res.warnings.empty());

  SECTION("trainable flags are restored after the run") {
    for (ag::Parameter* p : ms.module_params("pose2d_encoder")) REQUIRE(p->trainable);
    for (ag::Parameter* p : ms.module_params("pose3d_encoder")) REQUIRE(p->trainable);
  }
}

TEST_CASE("run log rows obey the schema and clamp contracts") {
  pipeline::ModelSet ms(tiny_model());
  const auto data = tiny_dataset(24);
  pipeline::ImageCache cache(data, ms.cfg.grid, ms.cfg.splat_sigma);

  pipeline::StageConfig cfg = short_stage(3, 17, 99);
  const pipeline::StageResult res = pipeline::run_stage(cfg, ms, data, &cache, "");

  // it == 1, every multiple of 5, and the final iteration.
  REQUIRE(res.log.rows.size() == 5);
  std::size_t prev = 0;
  for (const pipeline::RunLogRow& r : res.log.rows) {
    REQUIRE(r.iteration > prev);
    prev = r.iteration;
    REQUIRE(r.tau >= cfg.tau_lo);
    REQUIRE(r.tau <= cfg.tau_hi);
    // Stage 3 runs every term: the logged total must be their exact sum.
    const double sum = r.loss_img_2d + r.loss_img_3d + r.loss_2d_3d + r.loss_triplet + r.loss_2d +
                       r.loss_3d;
    REQUIRE(r.loss_total == sum);
    REQUIRE(std::isfinite(r.loss_total));
  }
  REQUIRE(res.log.rows.back().iteration == cfg.iters);
  REQUIRE(res.final_tau >= cfg.tau_lo);
  REQUIRE(res.final_tau <= cfg.tau_hi);

  const std::string csv = res.log.to_csv();
  REQUIRE_THAT(csv, ContainsSubstring(
      "iteration,loss_img_2d,loss_img_3d,loss_2d_3d,loss_triplet,loss_2d,loss_3d,"
      "loss_total,tau,cos_img_2d,cos_img_3d,cos_2d_3d,top1_img_2d,top1_img_3d,top1_2d_3d"));

  SECTION("stage 1 logs only its active pair's terms") {
    pipeline::ModelSet m1(tiny_model());
    const pipeline::StageResult r1 =
        pipeline::run_stage(short_stage(1, 6, 5), m1, data, nullptr, "");
    for (const pipeline::RunLogRow& r : r1.log.rows) {
      REQUIRE(r.loss_img_2d == 0.0);
      REQUIRE(r.loss_img_3d == 0.0);
      REQUIRE(r.loss_triplet == 0.0);
      REQUIRE(r.loss_2d_3d > 0.0);
      REQUIRE(r.loss_total == r.loss_2d_3d);
      REQUIRE(r.cos_img_2d == 0.0);
      REQUIRE(r.top1_img_3d == 0.0);
    }
  }
}

TEST_CASE("equal config and seed reproduce the run bit for bit") {
  const auto data = tiny_dataset(24);
  const std::filesystem::path dir_a = std::filesystem::temp_directory_path() / "unihpe_rep_a";
  const std::filesystem::path dir_b = std::filesystem::temp_directory_path() / "unihpe_rep_b";
  std::filesystem::create_directories(dir_a);
  std::filesystem::create_directories(dir_b);

  auto run = [&](const std::string& dir) {
    pipeline::ModelSet ms(tiny_model());
    pipeline::ImageCache cache(data, ms.cfg.grid, ms.cfg.splat_sigma);
    return pipeline::run_stage(short_stage(3, 11, 2024), ms, data, &cache, dir);
  };
  const pipeline::StageResult a = run(dir_a.string());
  const pipeline::StageResult b = run(dir_b.string());

  REQUIRE(a.log.to_csv() == b.log.to_csv());
  REQUIRE(read_file(a.log_path) == read_file(b.log_path));
  REQUIRE(read_file(a.checkpoint_path) == read_file(b.checkpoint_path));
  REQUIRE(read_file(a.checkpoint_path).rfind("unihpe-ckpt 1\n", 0) == 0);

  SECTION("a different seed changes the log") {
    pipeline::ModelSet ms(tiny_model());
    pipeline::ImageCache cache(data, ms.cfg.grid, ms.cfg.splat_sigma);
    const pipeline::StageResult c =
        pipeline::run_stage(short_stage(3, 11, 2025), ms, data, &cache, "");
    REQUIRE(a.log.to_csv() != c.log.to_csv());
  }

  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
}

TEST_CASE("batch order is independent of the triplet and decoder toggles") {
  // Two stage-3 variants, one with the extra aux-stream consumers off. If
  // batch sampling shared a stream with them, the pair-loss columns would
  // diverge after the first iteration even at lr 0 since different samples
  // would be drawn.
  const auto data = tiny_dataset(24);
  auto run = [&](bool triplet) {
    pipeline::ModelSet ms(tiny_model());
    pipeline::ImageCache cache(data, ms.cfg.grid, ms.cfg.splat_sigma);
    pipeline::StageConfig cfg = short_stage(3, 4, 31);
    cfg.lr = 1e-300;  // effectively frozen weights without freezing modules
    cfg.use_triplet = triplet;
    return pipeline::run_stage(cfg, ms, data, &cache, "");
  };
  const pipeline::StageResult with = run(true);
  const pipeline::StageResult without = run(false);
  REQUIRE(with.log.rows.size() == without.log.rows.size());
  for (std::size_t i = 0; i < with.log.rows.size(); ++i) {
    REQUIRE(with.log.rows[i].loss_img_2d == without.log.rows[i].loss_img_2d);
    REQUIRE(with.log.rows[i].loss_2d_3d == without.log.rows[i].loss_2d_3d);
    REQUIRE(with.log.rows[i].loss_triplet > 0.0);
    REQUIRE(without.log.rows[i].loss_triplet == 0.0);
  }
}

TEST_CASE("run_stage rejects inconsistent setups") {
  pipeline::ModelSet ms(tiny_model());
  const auto data = tiny_dataset(8);
  pipeline::ImageCache cache(data, ms.cfg.grid, ms.cfg.splat_sigma);

  // Stage 2 touches images but gets no cache.
  REQUIRE_THROWS_WITH(pipeline::run_stage(short_stage(2, 3, 1), ms, data, nullptr, ""),
                      ContainsSubstring("no cache"));

  // Cache built over a different dataset size.
  const auto small = tiny_dataset(4, 77);
  REQUIRE_THROWS_WITH(pipeline::run_stage(short_stage(2, 3, 1), ms, small, &cache, ""),
                      ContainsSubstring("covers"));

  // Everything participating is frozen.
  pipeline::StageConfig cfg = short_stage(1, 3, 1);
  cfg.frozen = {"pose2d_encoder", "pose3d_encoder"};
  cfg.validate();
  REQUIRE_THROWS_WITH(pipeline::run_stage(cfg, ms, data, nullptr, ""),
                      ContainsSubstring("nothing left to train"));

  REQUIRE_THROWS_AS(
      pipeline::run_stage(short_stage(1, 3, 1), ms, std::vector<synth::SampleRecord>{}, nullptr, ""),
      std::invalid_argument);
}

TEST_CASE("non-finite losses abort with the iteration index") {
  pipeline::ModelSet ms(tiny_model());
  auto data = tiny_dataset(8);
  data[3].pose3d.at(2, 1) = std::nan("");

  REQUIRE_THROWS_WITH(pipeline::run_stage(short_stage(1, 5, 9), ms, data, nullptr, ""),
                      ContainsSubstring("iteration"));
}

TEST_CASE("stage 2 without a prior checkpoint warns and proceeds") {
  pipeline::ModelSet ms(tiny_model());
  const auto data = tiny_dataset(12);
  pipeline::ImageCache cache(data, ms.cfg.grid, ms.cfg.splat_sigma);

  pipeline::StageConfig cfg = short_stage(2, 3, 3);
  const pipeline::StageResult res =
      pipeline::run_stage(cfg, ms, data, &cache, "", /*prior_checkpoint_loaded=*/false);
  REQUIRE(res.warnings.size() == 1);
  REQUIRE_THAT(res.warnings[0], ContainsSubstring("stage 2 without a stage-1 checkpoint"));
  REQUIRE(res.log.rows.size() == 2);
}

TEST_CASE("evaluate reports the full metric set") {
  pipeline::ModelSet ms(tiny_model());
  const auto data = tiny_dataset(48);

  const metrics::MetricReport rep = pipeline::evaluate(ms, data, "fp-test");
  rep.validate();
  REQUIRE(rep.sample_count == 48);
  REQUIRE(rep.config_fingerprint == "fp-test");
  for (const char* name :
       {"mpjpe_lift", "pa_mpjpe_lift", "mpjpe_image", "pa_mpjpe_image", "pck_2d", "epe_2d",
        "cos_img_2d", "cos_img_3d", "cos_2d_3d", "top1_img_2d", "top1_img_3d", "top1_2d_3d"})
    REQUIRE_NOTHROW(rep.value_of(name));

  SECTION("untrained encoders retrieve at chance level") {
    REQUIRE(rep.value_of("top1_img_2d") <= 0.2);
    REQUIRE(rep.value_of("top1_2d_3d") <= 0.2);
    REQUIRE(std::abs(rep.value_of("cos_2d_3d")) < 0.6);
  }

  SECTION("a ground-truth echo scores zero error") {
    pipeline::EvalOverride ov;
    ov.lift_pose3d = [](const synth::SampleRecord& r) { return r.pose3d; };
    ov.image_pose3d = [](const synth::SampleRecord& r) { return r.pose3d; };
    ov.image_pose2d = [](const synth::SampleRecord& r) { return r.pose2d.joints; };
    const metrics::MetricReport echo = pipeline::evaluate(ms, data, "fp-echo", &ov);
    REQUIRE(echo.value_of("mpjpe_lift") == 0.0);
    REQUIRE(echo.value_of("mpjpe_image") == 0.0);
    REQUIRE(echo.value_of("pa_mpjpe_lift") < 1e-6);
    REQUIRE(echo.value_of("epe_2d") == 0.0);
    REQUIRE(echo.value_of("pck_2d") == 1.0);
  }

  REQUIRE_THROWS_AS(pipeline::evaluate(ms, tiny_dataset(1), "fp"), std::invalid_argument);
}

TEST_CASE("mean-pose baseline behaves") {
  const auto data = tiny_dataset(32);
  const double base = pipeline::mean_pose_mpjpe(data);
  REQUIRE(base > 10.0);  // body-scale spread in mm

  // The mean of duplicated records differs from the record by rounding only.
  std::vector<synth::SampleRecord> constant(3, data[0]);
  REQUIRE(pipeline::mean_pose_mpjpe(constant) < 1e-9);
  REQUIRE_THROWS_AS(pipeline::mean_pose_mpjpe({}), std::invalid_argument);
}

TEST_CASE("dataset fingerprints track identity") {
  const auto a = tiny_dataset(6, 42);
  const auto b = tiny_dataset(6, 42);
  auto c = tiny_dataset(6, 43);
  REQUIRE(pipeline::dataset_fingerprint(a) == pipeline::dataset_fingerprint(b));
  REQUIRE(pipeline::dataset_fingerprint(a) != pipeline::dataset_fingerprint(c));
  REQUIRE(pipeline::dataset_fingerprint(a).size() == 16);
}

TEST_CASE("ablation matrix runs one schedule per row with shared seeds") {
  const auto train = tiny_dataset(16, 7);
  const auto eval_set = tiny_dataset(12, 8);

  std::vector<pipeline::AblationRow> rows = {
      {"full", true, true, true},
      {"no_triplet", true, false, true},
      {"no_token", true, true, false},
  };
  std::vector<pipeline::StageConfig> schedule = {short_stage(3, 4, 0)};

  const pipeline::AblationResult res =
      pipeline::ablation_matrix(rows, tiny_model(), schedule, train, eval_set, 55);
  REQUIRE(res.row_names.size() == 3);
  REQUIRE(res.reports.size() == 3);
  REQUIRE(res.row_names[1] == "no_triplet");
  const std::string fp = pipeline::dataset_fingerprint(eval_set);
  for (const metrics::MetricReport& rep : res.reports) {
    REQUIRE(rep.config_fingerprint == fp);
    REQUIRE(rep.sample_count == 12);
    rep.validate();
  }

  REQUIRE_THROWS_AS(
      pipeline::ablation_matrix({}, tiny_model(), schedule, train, eval_set, 55),
      std::invalid_argument);
}
