#include <cstdio>
#include <exception>
#include <functional>
#include <string>

#include <CLI11.hpp>

#include "saccader/errors.hpp"
#include "saccader/pipeline.hpp"

namespace {

using saccader::Config;

struct CommonOpts {
  std::string config_path;
  std::string run_dir_override;
  int64_t seed_override = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("-c,--config", opts.config_path, "path to the key = value config file")
      ->required();
  cmd->add_option("--run-dir", opts.run_dir_override, "override run_dir from the config");
  cmd->add_option("--seed", opts.seed_override, "override seed from the config");
}

Config load_config(const CommonOpts& opts) {
  Config cfg = saccader::parse_config_file(opts.config_path);
  if (!opts.run_dir_override.empty()) cfg.run_dir = opts.run_dir_override;
  if (opts.seed_override >= 0) cfg.seed = static_cast<uint64_t>(opts.seed_override);
  return cfg;
}

void print_rows(const std::vector<saccader::MetricsRow>& rows) {
  for (const auto& r : rows) {
    if (r.split != "dev") continue;
    std::printf("stage %s epoch %lld dev loss %.4f accuracy %.4f\n", r.stage.c_str(),
                static_cast<long long>(r.epoch), r.loss, r.accuracy);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"saccader: hard visual attention on a synthetic desk-scale dataset"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::function<void(const Config&)> action;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset splits");
  add_common(gen, opts);
  gen->callback([&] {
    action = [](const Config& c) { saccader::pipeline::cmd_gen_data(c); };
  });

  auto* rep = app.add_subcommand("train-rep", "stage 1: train the representation network");
  add_common(rep, opts);
  rep->callback([&] {
    action = [](const Config& c) { print_rows(saccader::pipeline::cmd_train_rep(c).rows); };
  });

  auto* loc = app.add_subcommand("pretrain-loc", "stage 2: pretrain the location network");
  add_common(loc, opts);
  loc->callback([&] {
    action = [](const Config& c) { print_rows(saccader::pipeline::cmd_pretrain_loc(c).rows); };
  });

  auto* joint = app.add_subcommand("train-joint", "stage 3: joint policy-gradient training");
  add_common(joint, opts);
  joint->callback([&] {
    action = [](const Config& c) { print_rows(saccader::pipeline::cmd_train_joint(c).rows); };
  });

  auto* ev = app.add_subcommand("eval", "accuracy/coverage curves for all policies");
  add_common(ev, opts);
  ev->callback([&] {
    action = [](const Config& c) {
      const auto rows = saccader::pipeline::cmd_eval(c, /*with_occlusion=*/false);
      for (const auto& r : rows) {
        std::printf("%-14s K=%-3lld top1 %.4f top5 %.4f coverage %.4f\n", r.policy.c_str(),
                    static_cast<long long>(r.k), r.top1, r.top5, r.coverage);
      }
    };
  });

  auto* occ = app.add_subcommand("occlude-eval",
                                 "evaluate with attended patches occluded (trains the "
                                 "occlusion classifier if needed)");
  add_common(occ, opts);
  occ->callback([&] {
    action = [](const Config& c) {
      const auto rows = saccader::pipeline::cmd_eval(c, /*with_occlusion=*/true);
      for (const auto& r : rows) {
        std::printf("%-14s K=%-3lld top1 %.4f occluded_top1 %.4f coverage %.4f\n",
                    r.policy.c_str(), static_cast<long long>(r.k), r.top1, r.occluded_top1,
                    r.coverage);
      }
    };
  });

  auto* atk = app.add_subcommand("attack", "PGD robustness evaluation");
  add_common(atk, opts);
  atk->callback([&] {
    action = [](const Config& c) {
      const auto s = saccader::pipeline::cmd_attack(c);
      std::printf("PGD over %lld examples: clean %.4f adversarial %.4f max_linf %.8f\n",
                  static_cast<long long>(s.examples), s.clean_accuracy, s.adv_accuracy,
                  s.max_linf);
    };
  });

  auto* tr = app.add_subcommand("emit-traces", "export per-image glimpse sequences");
  add_common(tr, opts);
  tr->callback([&] {
    action = [](const Config& c) { saccader::pipeline::cmd_emit_traces(c); };
  });

  CLI11_PARSE(app, argc, argv);

  try {
    action(load_config(opts));
  } catch (const saccader::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const saccader::DependencyError& e) {
    std::fprintf(stderr, "dependency error: %s\n", e.what());
    return 3;
  } catch (const saccader::NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
