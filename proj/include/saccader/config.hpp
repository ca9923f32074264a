#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "saccader/dataset.hpp"
#include "saccader/model.hpp"
#include "saccader/training.hpp"

namespace saccader {

// Flat run configuration. One `key = value` file drives every subcommand;
// unknown keys are rejected with the list of valid keys.
struct Config {
  // paths
  std::string run_dir = "runs/default";
  std::string data_dir;  // empty: use run_dir

  // dataset
  int64_t num_classes = 10;
  int64_t image_h = 63;
  int64_t image_w = 63;
  int64_t distractors = 4;
  double noise_amp = 0.15;
  double background = 0.15;
  double glyph_level = 0.9;
  int64_t fragment_size = 7;
  int64_t train_size = 2000;
  int64_t dev_size = 400;
  int64_t test_size = 400;

  // model
  int64_t rf = 15;
  int64_t patch_stride = 8;
  int64_t enc_c1 = 16;
  int64_t enc_c2 = 32;
  int64_t d_repr = 64;
  int64_t d_what = 32;
  int64_t where_hidden = 48;
  int64_t d_where = 32;
  int64_t d_mix = 32;

  // training
  double lambda_repr = 8e-5;
  double nu_loc = 8e-5;
  int64_t t_pretrain = 6;
  int64_t t_joint = 6;
  int64_t samples = 2;
  double lr_stage1 = 0.1;
  double lr_stage2 = 0.05;
  double lr_stage3 = 0.01;
  int64_t batch_size = 128;
  int64_t epochs_stage1 = 50;
  int64_t epochs_stage2 = 50;
  int64_t epochs_stage3 = 50;
  int64_t warmup_epochs = 5;
  double momentum = 0.9;
  uint64_t seed = 1;
  bool reinforce_into_repr = true;
  bool bn_train_stats_in_sampling = true;
  bool augment_random_crop = false;
  int64_t crop_margin = 4;
  std::string joint_init = "stage2";  // stage2 | stage1 (skip location pretraining)

  // occlusion classifier
  double occl_lr = 0.05;
  int64_t occl_epochs = 15;
  int64_t occl_warmup_epochs = 2;

  // evaluation
  std::string eval_split = "test";  // train | dev | test
  std::vector<int64_t> eval_ks = {1, 2, 3, 4, 6, 8, 10, 12};
  int64_t traces_limit = 32;

  // PGD attack
  double pgd_eps = 2.0 / 255.0;
  double pgd_step = 0.5 / 255.0;
  int64_t pgd_iters = 300;
  int64_t pgd_examples = 128;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  SyntheticSpec synthetic_spec() const;
  void validate() const;
};

// `key = value` lines, '#' comments, blank lines ignored.
Config parse_config_file(const std::string& path);
Config parse_config_text(const std::string& text, const std::string& origin = "<text>");

// Canonical serialization of every key (defaults included), sorted by key.
std::string canonical_config(const Config& cfg);

// FNV-1a 64 over the canonical serialization, as 16 hex digits.
std::string config_hash_hex(const Config& cfg);

std::vector<std::string> config_key_names();

uint64_t fnv1a64(const void* data, size_t len);
std::string fnv1a64_hex(const void* data, size_t len);

}  // namespace saccader
