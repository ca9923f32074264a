#pragma once

#include <string>
#include <vector>

#include "saccader/config.hpp"
#include "saccader/metrics.hpp"
#include "saccader/policies.hpp"

namespace saccader::pipeline {

// Output layout inside a run directory.
struct RunPaths {
  std::string run_dir;
  std::string data_dir;

  static RunPaths from(const Config& cfg);

  std::string split_bin(const std::string& split) const { return data_dir + "/" + split + ".bin"; }
  std::string stage_ckpt(int stage) const {
    return run_dir + "/stage" + std::to_string(stage) + ".ckpt";
  }
  std::string occl_ckpt() const { return run_dir + "/occlusion.ckpt"; }
  std::string stage_metrics(int stage) const {
    return run_dir + "/metrics_stage" + std::to_string(stage) + ".csv";
  }
  std::string occl_metrics() const { return run_dir + "/metrics_occl.csv"; }
  std::string eval_csv() const { return run_dir + "/eval.csv"; }
  std::string eval_json() const { return run_dir + "/eval.json"; }
  std::string eval_occluded_csv() const { return run_dir + "/eval_occluded.csv"; }
  std::string eval_occluded_json() const { return run_dir + "/eval_occluded.json"; }
  std::string attack_csv() const { return run_dir + "/attack.csv"; }
  std::string attack_json() const { return run_dir + "/attack.json"; }
  std::string traces_csv() const { return run_dir + "/traces.csv"; }
  std::string traces_json() const { return run_dir + "/traces.json"; }
  std::string run_json() const { return run_dir + "/run.json"; }
};

Dataset load_split(const Config& cfg, const std::string& split);

// Model parameters for this configuration, freshly initialized from the seed.
ParameterSet<float> fresh_params(const Config& cfg);

void cmd_gen_data(const Config& cfg);
StageResult cmd_train_rep(const Config& cfg);
StageResult cmd_pretrain_loc(const Config& cfg);
StageResult cmd_train_joint(const Config& cfg);

// Evaluates every policy over eval_ks; with_occlusion additionally trains (or
// loads) the occlusion classifier and scores occluded images.
std::vector<EvalRow> cmd_eval(const Config& cfg, bool with_occlusion);

struct AttackSummary {
  int64_t examples = 0;
  double clean_accuracy = 0;
  double adv_accuracy = 0;
  double max_linf = 0;
};
AttackSummary cmd_attack(const Config& cfg);

void cmd_emit_traces(const Config& cfg);

}  // namespace saccader::pipeline
