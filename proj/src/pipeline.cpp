#include "saccader/pipeline.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "saccader/checkpoint.hpp"
#include "saccader/errors.hpp"

namespace saccader::pipeline {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DependencyError("cannot create directory " + dir + ": " + ec.message());
}

// run.json accumulates one entry per subcommand; rerunning a subcommand
// replaces its entry.
void update_run_json(const RunPaths& paths, const std::string& subcommand, ordered_json entry) {
  ordered_json root = ordered_json::object();
  if (file_exists(paths.run_json())) {
    std::ifstream is(paths.run_json());
    try {
      root = ordered_json::parse(is);
    } catch (const std::exception&) {
      root = ordered_json::object();
    }
  }
  entry["timestamp"] = utc_timestamp();
  root[subcommand] = std::move(entry);
  std::ofstream os(paths.run_json());
  if (!os) throw DependencyError("cannot write " + paths.run_json());
  os << root.dump(2) << "\n";
}

ordered_json base_entry(const Config& cfg) {
  ordered_json e;
  e["config_hash"] = config_hash_hex(cfg);
  e["seed"] = cfg.seed;
  e["flags"] = {{"reinforce_into_repr", cfg.reinforce_into_repr},
                {"bn_train_stats_in_sampling", cfg.bn_train_stats_in_sampling},
                {"augment_random_crop", cfg.augment_random_crop},
                {"joint_init", cfg.joint_init}};
  return e;
}

ParameterSet<float> load_stage_params(const Config& cfg, const RunPaths& paths, int stage,
                                      const std::string& needed_by, const std::string& hint) {
  const std::string path = paths.stage_ckpt(stage);
  if (!file_exists(path)) {
    throw DependencyError(needed_by + ": required stage-" + std::to_string(stage) +
                          " checkpoint " + path + " not found; run `" + hint + "` first");
  }
  auto ps = fresh_params(cfg);
  load_checkpoint(path, ps);
  return ps;
}

}  // namespace

RunPaths RunPaths::from(const Config& cfg) {
  RunPaths p;
  p.run_dir = cfg.run_dir;
  p.data_dir = cfg.data_dir.empty() ? cfg.run_dir : cfg.data_dir;
  return p;
}

Dataset load_split(const Config& cfg, const std::string& split) {
  const auto paths = RunPaths::from(cfg);
  const std::string path = paths.split_bin(split);
  if (!file_exists(path)) {
    throw DependencyError("missing dataset file " + path + "; run `gen-data` first");
  }
  return read_dataset(path);
}

ParameterSet<float> fresh_params(const Config& cfg) {
  Rng rng(Rng::mix({cfg.seed, 0x1217}));
  return init_saccader_params<float>(cfg.model_config(), rng);
}

void cmd_gen_data(const Config& cfg) {
  cfg.validate();
  const auto paths = RunPaths::from(cfg);
  ensure_dir(paths.run_dir);
  ensure_dir(paths.data_dir);
  const auto data = generate_dataset(cfg.synthetic_spec());
  write_dataset(paths.split_bin("train"), data.train);
  write_dataset(paths.split_bin("dev"), data.dev);
  write_dataset(paths.split_bin("test"), data.test);
  auto entry = base_entry(cfg);
  entry["outputs"] = {paths.split_bin("train"), paths.split_bin("dev"), paths.split_bin("test")};
  entry["checkpoints"] = ordered_json::object();
  update_run_json(paths, "gen-data", std::move(entry));
}

namespace {

StageResult run_training_stage(const Config& cfg, int stage, ParameterSet<float>& params,
                               const char* subcommand) {
  const auto paths = RunPaths::from(cfg);
  ensure_dir(paths.run_dir);
  const Dataset train = load_split(cfg, "train");
  const Dataset dev = load_split(cfg, "dev");
  auto result = run_stage(stage, train, dev, params, cfg.model_config(), cfg.train_config());
  save_checkpoint(paths.stage_ckpt(stage), params);
  write_metrics_csv(paths.stage_metrics(stage), result.rows);
  auto entry = base_entry(cfg);
  entry["outputs"] = {paths.stage_ckpt(stage), paths.stage_metrics(stage)};
  ordered_json ckpts = ordered_json::object();
  if (stage > 1) {
    const int prev = (stage == 3 && cfg.joint_init == "stage1") ? 1 : stage - 1;
    ckpts["stage" + std::to_string(prev)] = file_content_hash(paths.stage_ckpt(prev));
  }
  entry["checkpoints"] = std::move(ckpts);
  update_run_json(paths, subcommand, std::move(entry));
  return result;
}

}  // namespace

StageResult cmd_train_rep(const Config& cfg) {
  cfg.validate();
  auto params = fresh_params(cfg);
  return run_training_stage(cfg, 1, params, "train-rep");
}

StageResult cmd_pretrain_loc(const Config& cfg) {
  cfg.validate();
  const auto paths = RunPaths::from(cfg);
  auto params = load_stage_params(cfg, paths, 1, "pretrain-loc", "train-rep");
  return run_training_stage(cfg, 2, params, "pretrain-loc");
}

StageResult cmd_train_joint(const Config& cfg) {
  cfg.validate();
  const auto paths = RunPaths::from(cfg);
  ParameterSet<float> params;
  if (cfg.joint_init == "stage2") {
    params = load_stage_params(cfg, paths, 2, "train-joint", "pretrain-loc");
  } else {
    params = load_stage_params(cfg, paths, 1, "train-joint", "train-rep");
    Rng rng(Rng::mix({cfg.seed, 0x90A7}));
    reinit_location_params(params, cfg.model_config(), rng);
  }
  return run_training_stage(cfg, 3, params, "train-joint");
}

std::vector<EvalRow> cmd_eval(const Config& cfg, bool with_occlusion) {
  cfg.validate();
  const auto paths = RunPaths::from(cfg);
  ensure_dir(paths.run_dir);
  auto params = load_stage_params(cfg, paths, 3, with_occlusion ? "occlude-eval" : "eval",
                                  "train-joint");
  const Dataset ds = load_split(cfg, cfg.eval_split);
  const ModelConfig mcfg = cfg.model_config();

  ParameterSet<float> occl_params;
  bool have_occl = false;
  ordered_json ckpts = ordered_json::object();
  ckpts["stage3"] = file_content_hash(paths.stage_ckpt(3));
  if (with_occlusion) {
    Rng rng(Rng::mix({cfg.seed, 0x0CC1}));
    occl_params = init_occlusion_params(mcfg.channels, mcfg.num_classes, rng);
    if (file_exists(paths.occl_ckpt())) {
      load_checkpoint(paths.occl_ckpt(), occl_params);
    } else {
      OcclusionTrainConfig ocfg;
      ocfg.lr = cfg.occl_lr;
      ocfg.epochs = cfg.occl_epochs;
      ocfg.warmup_epochs = cfg.occl_warmup_epochs;
      ocfg.batch_size = cfg.batch_size;
      ocfg.momentum = cfg.momentum;
      ocfg.lambda = cfg.lambda_repr;
      ocfg.seed = cfg.seed;
      auto res = train_occlusion_classifier(load_split(cfg, "train"), load_split(cfg, "dev"),
                                            ocfg);
      occl_params = std::move(res.params);
      save_checkpoint(paths.occl_ckpt(), occl_params);
      write_metrics_csv(paths.occl_metrics(), res.rows);
    }
    ckpts["occlusion"] = file_content_hash(paths.occl_ckpt());
    have_occl = true;
  }

  std::vector<EvalRow> rows;
  for (PolicyKind kind : {PolicyKind::kSaccader, PolicyKind::kRandom, PolicyKind::kOrderedLogits,
                          PolicyKind::kSobelMean, PolicyKind::kSobelVariance}) {
    auto report = eval_policy(kind, params, mcfg, ds, cfg.eval_ks, cfg.seed,
                              have_occl ? &occl_params : nullptr);
    rows.insert(rows.end(), report.rows.begin(), report.rows.end());
  }
  const std::string csv = with_occlusion ? paths.eval_occluded_csv() : paths.eval_csv();
  const std::string json = with_occlusion ? paths.eval_occluded_json() : paths.eval_json();
  write_eval_csv(csv, rows);

  ordered_json j;
  j["config_hash"] = config_hash_hex(cfg);
  j["seed"] = cfg.seed;
  j["split"] = cfg.eval_split;
  j["checkpoints"] = ckpts;
  j["rows"] = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json jr;
    jr["policy"] = r.policy;
    jr["K"] = r.k;
    jr["top1"] = r.top1;
    jr["top5"] = r.top5;
    jr["coverage"] = r.coverage;
    if (std::isnan(r.occluded_top1)) {
      jr["occluded_top1"] = nullptr;
    } else {
      jr["occluded_top1"] = r.occluded_top1;
    }
    j["rows"].push_back(std::move(jr));
  }
  {
    std::ofstream os(json);
    if (!os) throw DependencyError("cannot write " + json);
    os << j.dump(2) << "\n";
  }
  auto entry = base_entry(cfg);
  entry["outputs"] = {csv, json};
  entry["checkpoints"] = ckpts;
  update_run_json(paths, with_occlusion ? "occlude-eval" : "eval", std::move(entry));
  return rows;
}

AttackSummary cmd_attack(const Config& cfg) {
  cfg.validate();
  const auto paths = RunPaths::from(cfg);
  ensure_dir(paths.run_dir);
  auto params = load_stage_params(cfg, paths, 3, "attack", "train-joint");
  const Dataset ds = load_split(cfg, "test");
  const ModelConfig mcfg = cfg.model_config();
  const auto forward = saccader_attack_forward(params, mcfg, cfg.t_joint);
  const int64_t n = std::min<int64_t>(cfg.pgd_examples, ds.count());

  AttackSummary summary;
  summary.examples = n;
  std::ofstream os(paths.attack_csv());
  if (!os) throw DependencyError("cannot write " + paths.attack_csv());
  os << "image_id,label,clean_correct,adv_correct,iters,linf\n";
  int64_t clean_correct = 0, adv_correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    const Tensor<float>& image = ds.images[static_cast<size_t>(i)];
    const int64_t label = ds.labels[static_cast<size_t>(i)];
    Tensor<float> clean = image;
    for (auto& v : clean.data) v = std::clamp(v, 0.0f, 1.0f);
    int64_t clean_pred;
    {
      Tape<float> tape;
      auto logits = forward(tape, tape.input(clean));
      const Tensor<float>& lv = tape.value(logits);
      clean_pred = 0;
      for (int64_t k = 1; k < lv.numel(); ++k) {
        if (lv[k] > lv[clean_pred]) clean_pred = k;
      }
    }
    const bool cc = clean_pred == label;
    clean_correct += cc;
    auto res = pgd_attack(forward, image, label, mcfg.num_classes,
                          static_cast<float>(cfg.pgd_eps), static_cast<float>(cfg.pgd_step),
                          cfg.pgd_iters);
    const bool ac = !res.misclassified;
    adv_correct += ac;
    double linf = 0;
    for (int64_t p = 0; p < clean.numel(); ++p) {
      linf = std::max(linf, std::abs(static_cast<double>(res.adv[p]) -
                                     static_cast<double>(clean[p])));
    }
    summary.max_linf = std::max(summary.max_linf, linf);
    os << i << ',' << label << ',' << (cc ? 1 : 0) << ',' << (ac ? 1 : 0) << ',' << res.iters
       << ',' << format_metric(linf) << '\n';
  }
  summary.clean_accuracy = static_cast<double>(clean_correct) / static_cast<double>(n);
  summary.adv_accuracy = static_cast<double>(adv_correct) / static_cast<double>(n);

  ordered_json j;
  j["config_hash"] = config_hash_hex(cfg);
  j["seed"] = cfg.seed;
  j["eps"] = cfg.pgd_eps;
  j["step"] = cfg.pgd_step;
  j["max_iters"] = cfg.pgd_iters;
  j["examples"] = summary.examples;
  j["clean_accuracy"] = summary.clean_accuracy;
  j["adv_accuracy"] = summary.adv_accuracy;
  j["max_linf"] = summary.max_linf;
  {
    std::ofstream js(paths.attack_json());
    if (!js) throw DependencyError("cannot write " + paths.attack_json());
    js << j.dump(2) << "\n";
  }
  auto entry = base_entry(cfg);
  entry["outputs"] = {paths.attack_csv(), paths.attack_json()};
  entry["checkpoints"] = {{"stage3", file_content_hash(paths.stage_ckpt(3))}};
  update_run_json(paths, "attack", std::move(entry));
  return summary;
}

void cmd_emit_traces(const Config& cfg) {
  cfg.validate();
  const auto paths = RunPaths::from(cfg);
  ensure_dir(paths.run_dir);
  auto params = load_stage_params(cfg, paths, 3, "emit-traces", "train-joint");
  const Dataset ds = load_split(cfg, cfg.eval_split);
  const ModelConfig mcfg = cfg.model_config();
  const int64_t n = std::min<int64_t>(cfg.traces_limit, ds.count());

  std::vector<TraceExportRow> rows;
  ordered_json jimages = ordered_json::array();
  for (int64_t i = 0; i < n; ++i) {
    const auto trace =
        unroll(ds.images[static_cast<size_t>(i)], cfg.t_joint, SelectMode::kArgmax, params, mcfg);
    Tensor<float> running({mcfg.num_classes});
    ordered_json jsteps = ordered_json::array();
    for (size_t t = 0; t < trace.locations.size(); ++t) {
      for (int64_t k = 0; k < mcfg.num_classes; ++k) running[k] += trace.per_step_logits[t][k];
      int64_t pred = 0;
      for (int64_t k = 1; k < mcfg.num_classes; ++k) {
        if (running[k] > running[pred]) pred = k;
      }
      TraceExportRow row;
      row.image_id = i;
      row.t = static_cast<int64_t>(t);
      row.i = trace.locations[t].i;
      row.j = trace.locations[t].j;
      row.prob = std::exp(static_cast<double>(trace.per_step_log_probs[t]));
      row.pred_after_t = pred;
      rows.push_back(row);
      jsteps.push_back({{"t", row.t},
                        {"i", row.i},
                        {"j", row.j},
                        {"prob", row.prob},
                        {"pred_after_t", row.pred_after_t}});
    }
    jimages.push_back({{"image_id", i},
                       {"label", ds.labels[static_cast<size_t>(i)]},
                       {"steps", std::move(jsteps)}});
  }
  write_traces_csv(paths.traces_csv(), rows);
  ordered_json j;
  j["config_hash"] = config_hash_hex(cfg);
  j["seed"] = cfg.seed;
  j["split"] = cfg.eval_split;
  j["glimpses"] = cfg.t_joint;
  j["images"] = std::move(jimages);
  std::ofstream os(paths.traces_json());
  if (!os) throw DependencyError("cannot write " + paths.traces_json());
  os << j.dump(2) << "\n";
  auto entry = base_entry(cfg);
  entry["outputs"] = {paths.traces_csv(), paths.traces_json()};
  entry["checkpoints"] = {{"stage3", file_content_hash(paths.stage_ckpt(3))}};
  update_run_json(paths, "emit-traces", std::move(entry));
}

}  // namespace saccader::pipeline
