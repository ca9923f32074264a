#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "saccader/checkpoint.hpp"
#include "saccader/config.hpp"
#include "saccader/errors.hpp"
#include "saccader/pipeline.hpp"
#include "saccader/policies.hpp"

using namespace saccader;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("saccader_test_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

Config tiny_pipeline_config(const std::string& dir, uint64_t seed) {
  Config cfg;
  cfg.run_dir = dir;
  cfg.seed = seed;
  cfg.train_size = 96;
  cfg.dev_size = 32;
  cfg.test_size = 32;
  cfg.batch_size = 32;
  cfg.epochs_stage1 = 2;
  cfg.epochs_stage2 = 2;
  cfg.epochs_stage3 = 2;
  cfg.warmup_epochs = 1;
  cfg.occl_epochs = 2;
  cfg.occl_warmup_epochs = 1;
  cfg.eval_ks = {1, 6};
  cfg.enc_c1 = 4;
  cfg.enc_c2 = 6;
  cfg.d_repr = 8;
  cfg.d_what = 6;
  cfg.where_hidden = 6;
  cfg.d_where = 5;
  cfg.d_mix = 5;
  cfg.traces_limit = 3;
  cfg.pgd_examples = 2;
  cfg.pgd_iters = 5;
  return cfg;
}

}  // namespace

TEST_CASE("dataset generation: determinism, placement, labels, errors") {
  SyntheticSpec spec;
  spec.train_size = 64;
  spec.seed = 5;

  const auto a = generate_split(spec, 1, 64);
  const auto b = generate_split(spec, 1, 64);
  REQUIRE(a.count() == 64);
  for (int64_t i = 0; i < 64; ++i) {
    CHECK(a.labels[static_cast<size_t>(i)] == b.labels[static_cast<size_t>(i)]);
    const auto& ia = a.images[static_cast<size_t>(i)];
    const auto& ib = b.images[static_cast<size_t>(i)];
    for (int64_t p = 0; p < ia.numel(); ++p) CHECK(ia[p] == ib[p]);
  }

  // values stay in [0, 1]
  for (const auto& img : a.images) {
    for (float v : img.data) {
      CHECK(v >= 0.f);
      CHECK(v <= 1.f);
    }
  }

  // label histogram over 10^4 examples uniform within 3 sigma
  {
    SyntheticSpec hs = spec;
    hs.distractors = 0;
    const auto big = generate_split(hs, 9, 10000);
    std::vector<int64_t> counts(10, 0);
    for (uint16_t l : big.labels) counts[l]++;
    const double p = 0.1;
    const double sigma = std::sqrt(p * (1 - p) * 10000.0);
    for (int64_t c : counts) {
      CHECK(std::abs(static_cast<double>(c) - 1000.0) <= 3 * sigma);
    }
  }

  // glyph larger than the image (or the patch) is rejected
  {
    SyntheticSpec bad = spec;
    bad.image_h = bad.image_w = 9;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    SyntheticSpec bad2 = spec;
    bad2.rf = 9;
    CHECK_THROWS_AS(bad2.validate(), ConfigError);
  }
}

TEST_CASE("zero distractors + zero noise: glyph patch has the top Sobel variance") {
  SyntheticSpec spec;
  spec.distractors = 0;
  spec.noise_amp = 0.0;
  spec.seed = 6;
  const auto ds = generate_split(spec, 2, 24);
  for (int64_t i = 0; i < ds.count(); ++i) {
    const auto& img = ds.images[static_cast<size_t>(i)];
    const auto top = policy_sobel(img, 15, 8, 1, SobelStat::kVariance);
    // the winning patch must fully contain the glyph bounding box: find it
    int64_t y0 = 63, x0 = 63, y1 = 0, x1 = 0;
    for (int64_t y = 0; y < 63; ++y) {
      for (int64_t x = 0; x < 63; ++x) {
        if (img.at(y, x, 0) > 0.5f) {
          y0 = std::min(y0, y);
          x0 = std::min(x0, x);
          y1 = std::max(y1, y);
          x1 = std::max(x1, x);
        }
      }
    }
    const int64_t py = top[0].i * 8, px = top[0].j * 8;
    CHECK(py <= y0);
    CHECK(px <= x0);
    CHECK(py + 15 > y1);
    CHECK(px + 15 > x1);
  }
}

TEST_CASE("dataset files round-trip bit-exactly") {
  TempDir tmp("dsio");
  SyntheticSpec spec;
  spec.seed = 7;
  const auto ds = generate_split(spec, 3, 20);
  const std::string p1 = tmp.str() + "/a.bin";
  const std::string p2 = tmp.str() + "/b.bin";
  write_dataset(p1, ds);
  const auto back = read_dataset(p1);
  CHECK(back.num_classes == ds.num_classes);
  REQUIRE(back.count() == ds.count());
  for (int64_t i = 0; i < ds.count(); ++i) {
    CHECK(back.labels[static_cast<size_t>(i)] == ds.labels[static_cast<size_t>(i)]);
    for (int64_t p = 0; p < ds.images[static_cast<size_t>(i)].numel(); ++p) {
      CHECK(back.images[static_cast<size_t>(i)][p] == ds.images[static_cast<size_t>(i)][p]);
    }
  }
  write_dataset(p2, back);
  CHECK(read_file(p1) == read_file(p2));
  CHECK_THROWS_AS(read_dataset(tmp.str() + "/missing.bin"), DependencyError);
}

TEST_CASE("checkpoint round-trip and mismatch detection") {
  TempDir tmp("ckpt");
  Rng rng(8);
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 31;
  cfg.enc_c1 = 3;
  cfg.enc_c2 = 4;
  cfg.d_repr = 6;
  cfg.d_what = 5;
  cfg.where_hidden = 5;
  cfg.d_where = 4;
  cfg.d_mix = 4;
  cfg.num_classes = 3;
  auto ps = init_saccader_params<float>(cfg, rng);
  const std::string path = tmp.str() + "/m.ckpt";
  save_checkpoint(path, ps);

  Rng rng2(99);
  auto other = init_saccader_params<float>(cfg, rng2);
  load_checkpoint(path, other);
  for (size_t i = 0; i < ps.entries().size(); ++i) {
    const auto& a = ps.entries()[i].value;
    const auto& b = other.entries()[i].value;
    for (int64_t j = 0; j < a.numel(); ++j) CHECK(a[j] == b[j]);
  }

  auto small_cfg = cfg;
  small_cfg.d_repr = 5;
  auto wrong = init_saccader_params<float>(small_cfg, rng2);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, wrong), doctest::Contains("shape mismatch"),
                       DependencyError);
  CHECK_THROWS_AS(load_checkpoint(tmp.str() + "/nope.ckpt", wrong), DependencyError);
}

TEST_CASE("config parsing: comments, unknown keys, hashing, eval_ks") {
  const std::string text =
      "# a comment\n"
      "seed = 9\n"
      "train_size = 128   # trailing comment\n"
      "eval_ks = 1,2,6\n"
      "noise_amp = 0.2\n"
      "\n"
      "reinforce_into_repr = false\n";
  const Config cfg = parse_config_text(text);
  CHECK(cfg.seed == 9);
  CHECK(cfg.train_size == 128);
  CHECK(cfg.eval_ks == std::vector<int64_t>{1, 2, 6});
  CHECK(cfg.noise_amp == doctest::Approx(0.2));
  CHECK(cfg.reinforce_into_repr == false);

  CHECK_THROWS_WITH_AS(parse_config_text("not_a_key = 3\n"), doctest::Contains("valid keys"),
                       ConfigError);
  CHECK_THROWS_AS(parse_config_text("seed 9\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("seed = nine\n"), ConfigError);

  // hash covers every key and is stable across formatting differences
  const Config reparsed = parse_config_text(canonical_config(cfg));
  CHECK(config_hash_hex(reparsed) == config_hash_hex(cfg));
  Config changed = cfg;
  changed.batch_size += 1;
  CHECK(config_hash_hex(changed) != config_hash_hex(cfg));
}

TEST_CASE("pipeline end-to-end on a tiny config, rerun determinism, dependency errors") {
  TempDir tmp("pipe");
  const std::string run1 = tmp.str() + "/r1";
  const std::string run2 = tmp.str() + "/r2";

  // eval before training: the documented dependency error
  {
    Config cfg = tiny_pipeline_config(run1, 7);
    CHECK_THROWS_WITH_AS(pipeline::cmd_eval(cfg, false), doctest::Contains("train-joint"),
                         DependencyError);
  }

  auto run_all = [](const Config& cfg) {
    pipeline::cmd_gen_data(cfg);
    pipeline::cmd_train_rep(cfg);
    pipeline::cmd_pretrain_loc(cfg);
    pipeline::cmd_train_joint(cfg);
    pipeline::cmd_eval(cfg, false);
    pipeline::cmd_emit_traces(cfg);
  };
  run_all(tiny_pipeline_config(run1, 7));
  run_all(tiny_pipeline_config(run2, 7));

  // identical seeds: identical run directories modulo timestamps (compare
  // every CSV and binary artifact byte for byte)
  for (const char* name :
       {"train.bin", "dev.bin", "test.bin", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt",
        "metrics_stage1.csv", "metrics_stage2.csv", "metrics_stage3.csv", "eval.csv",
        "traces.csv"}) {
    CAPTURE(name);
    CHECK(read_file(run1 + "/" + name) == read_file(run2 + "/" + name));
  }

  // run.json carries config hash, seed, and checkpoint content hashes
  {
    const std::string j = read_file(run1 + "/run.json");
    Config cfg = tiny_pipeline_config(run1, 7);
    CHECK(j.find(config_hash_hex(cfg)) != std::string::npos);
    CHECK(j.find("\"seed\": 7") != std::string::npos);
    CHECK(j.find(file_content_hash(run1 + "/stage3.ckpt")) != std::string::npos);
  }

  // eval CSV schema
  {
    std::ifstream is(run1 + "/eval.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "policy,K,top1,top5,coverage,occluded_top1");
    int64_t rows = 0;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) ++rows;
    }
    CHECK(rows == 5 * 2);  // 5 policies x |eval_ks|
  }

  // traces CSV schema
  {
    std::ifstream is(run1 + "/traces.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "image_id,t,i,j,prob,pred_after_t");
  }

  // joint training from stage1 (no-pretraining ablation) also runs
  {
    Config cfg = tiny_pipeline_config(run1, 7);
    cfg.joint_init = "stage1";
    pipeline::cmd_train_joint(cfg);
  }

  // attack + occlude-eval smoke
  {
    Config cfg = tiny_pipeline_config(run1, 7);
    const auto summary = pipeline::cmd_attack(cfg);
    CHECK(summary.examples == 2);
    CHECK(summary.max_linf <= cfg.pgd_eps + 1e-9);
    const auto rows = pipeline::cmd_eval(cfg, true);
    for (const auto& r : rows) {
      CHECK(!std::isnan(r.occluded_top1));
    }
  }
}

TEST_CASE("config validation catches bad settings") {
  Config cfg = tiny_pipeline_config("/tmp/x", 1);
  cfg.samples = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_pipeline_config("/tmp/x", 1);
  cfg.t_joint = 50;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_pipeline_config("/tmp/x", 1);
  cfg.lr_stage2 = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_pipeline_config("/tmp/x", 1);
  cfg.warmup_epochs = 2;  // >= epochs_stage1
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_pipeline_config("/tmp/x", 1);
  cfg.joint_init = "scratch";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_pipeline_config("/tmp/x", 1);
  cfg.eval_split = "validation";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
