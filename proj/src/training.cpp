#include "saccader/training.hpp"

#include <algorithm>

namespace saccader {
namespace detail {

namespace {

ImageBatchView<float> batch_view(const Dataset& ds, int64_t start, int64_t count) {
  ImageBatchView<float> b;
  b.images.reserve(static_cast<size_t>(count));
  b.labels.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    b.images.push_back(&ds.images[static_cast<size_t>(start + i)]);
    b.labels.push_back(ds.labels[static_cast<size_t>(start + i)]);
  }
  return b;
}

int64_t argmax_idx(const Tensor<float>& v) {
  int64_t arg = 0;
  for (int64_t i = 1; i < v.numel(); ++i) {
    if (v[i] > v[arg]) arg = i;
  }
  return arg;
}

}  // namespace

DevMetrics eval_stage_metrics(int stage, const Dataset& ds, ParameterSet<float>& params,
                              const ModelConfig& mcfg, const TrainConfig& tcfg) {
  const int64_t N = ds.count();
  const int64_t bs = std::min<int64_t>(tcfg.batch_size, N);
  const int64_t P = mcfg.num_locations();
  double loss_sum = 0, metric_sum = 0;
  for (int64_t start = 0; start < N; start += bs) {
    const int64_t B = std::min(bs, N - start);
    auto batch = batch_view(ds, start, B);
    Tape<float> tape;
    auto lp = lease_params(tape, params, false, false);
    if (stage == 1) {
      auto r = loss_representation_build(tape, params, lp, mcfg, batch,
                                         static_cast<float>(tcfg.lambda_repr), BnMode::kInfer);
      loss_sum += static_cast<double>(tape.value(r.loss)[0]) * static_cast<double>(B);
      metric_sum += r.metric * static_cast<double>(B);
    } else if (stage == 2) {
      auto r = loss_location_pretrain_build(tape, params, lp, mcfg, batch,
                                            static_cast<float>(tcfg.nu_loc), tcfg.t_pretrain,
                                            BnMode::kInfer, BnMode::kInfer);
      loss_sum += static_cast<double>(tape.value(r.loss)[0]) * static_cast<double>(B);
      metric_sum += r.metric * static_cast<double>(B);
    } else {
      // deterministic stage-3 proxy: greedy unroll, trajectory-averaged
      // classification cross entropy plus both L2 terms
      auto patches =
          tape.input(extract_patch_batch(batch.images, mcfg.rf, mcfg.patch_stride));
      auto fv = build_forward(tape, patches, B, params, lp, mcfg, BnMode::kInfer,
                              BnMode::kInfer);
      auto nll_sum = tape.input(Tensor<float>::scalar(0.f));
      int64_t correct = 0;
      for (int64_t b = 0; b < B; ++b) {
        auto logits_i = tape.slice_rows(fv.logits, b * P, P);
        auto lsm_i = tape.log_softmax_rows(logits_i);
        auto mixed_i = tape.slice_rows(fv.mixed, b * P, P);
        auto uv = unroll_on_tape<float>(
            tape, mixed_i, logits_i, fv.query, mcfg.grid_h(), mcfg.grid_w(), tcfg.t_joint,
            [&](const Tensor<float>& r_tilde, int64_t) {
              GridLoc l = select_location(r_tilde, SelectMode::kArgmax);
              return l.i * mcfg.grid_w() + l.j;
            });
        if (argmax_idx(uv.trace.averaged_logits) == batch.labels[b]) ++correct;
        auto renorm = tape.log_softmax_vec(tape.mean_axis0(tape.gather_rows(lsm_i, uv.flat_locs)));
        nll_sum = tape.add(nll_sum, tape.scale(tape.pick(renorm, batch.labels[b]), -1.f));
      }
      auto loss = tape.add(
          tape.scale(nll_sum, 1.f / static_cast<float>(B)),
          tape.add(l2_term(tape, lp, params, ParamGroup::kRepr,
                           static_cast<float>(tcfg.lambda_repr)),
                   l2_term(tape, lp, params, ParamGroup::kLoc, static_cast<float>(tcfg.nu_loc))));
      loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(B);
      metric_sum += static_cast<double>(correct);
    }
  }
  return DevMetrics{loss_sum / static_cast<double>(N), metric_sum / static_cast<double>(N)};
}

}  // namespace detail

StageResult run_stage(int stage, const Dataset& train, const Dataset& dev,
                      ParameterSet<float>& params, const ModelConfig& mcfg,
                      const TrainConfig& tcfg,
                      const std::function<void(const MetricsRow&)>& on_row) {
  mcfg.validate();
  tcfg.validate(mcfg);
  if (stage < 1 || stage > 3) throw ConfigError("run_stage: stage must be 1, 2, or 3");
  if (train.count() < 2) throw ConfigError("run_stage: training set too small");

  const int64_t N = train.count();
  const int64_t bs = std::min<int64_t>(tcfg.batch_size, N);
  const int64_t epochs = stage == 1   ? tcfg.epochs_stage1
                         : stage == 2 ? tcfg.epochs_stage2
                                      : tcfg.epochs_stage3;
  const double base_lr = stage == 1 ? tcfg.lr_stage1 : stage == 2 ? tcfg.lr_stage2 : tcfg.lr_stage3;
  const int64_t steps_per_epoch = (N + bs - 1) / bs;
  const int64_t total_steps = epochs * steps_per_epoch;
  const int64_t warmup_steps = tcfg.warmup_epochs * steps_per_epoch;
  const bool grad_repr = stage != 2;
  const bool grad_loc = stage != 1;
  const BnMode joint_mode = tcfg.bn_train_stats_in_sampling ? BnMode::kTrain : BnMode::kInfer;

  OptimizerState<float> opt;
  int64_t global_step = 0;
  StageResult result;
  const std::string stage_name = std::to_string(stage);

  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(Rng::mix({tcfg.seed, 0x5F1E, static_cast<uint64_t>(stage),
                              static_cast<uint64_t>(epoch)}));
    const auto order = shuffled_indices(N, shuffle_rng);
    double ep_loss = 0, ep_metric = 0;
    int64_t ep_count = 0;
    double first_lr = 0;

    for (int64_t start = 0; start < N; start += bs) {
      const int64_t B = std::min(bs, N - start);
      std::vector<Tensor<float>> aug_storage;
      ImageBatchView<float> batch;
      std::vector<uint64_t> traj_seeds;
      batch.images.reserve(static_cast<size_t>(B));
      batch.labels.reserve(static_cast<size_t>(B));
      for (int64_t k = 0; k < B; ++k) {
        const int64_t idx = order[static_cast<size_t>(start + k)];
        const Tensor<float>* img = &train.images[static_cast<size_t>(idx)];
        if (tcfg.augment_random_crop && tcfg.crop_margin > 0) {
          Rng arng(Rng::mix({tcfg.seed, 0xC407, static_cast<uint64_t>(stage),
                             static_cast<uint64_t>(epoch), static_cast<uint64_t>(idx)}));
          const int64_t m = tcfg.crop_margin;
          const int64_t dy = arng.uniform_int(2 * m + 1) - m;
          const int64_t dx = arng.uniform_int(2 * m + 1) - m;
          aug_storage.push_back(translate_image(*img, dy, dx));
          img = &aug_storage.back();
        }
        batch.images.push_back(img);
        batch.labels.push_back(train.labels[static_cast<size_t>(idx)]);
        traj_seeds.push_back(Rng::mix({tcfg.seed, 0x7245, static_cast<uint64_t>(epoch),
                                       static_cast<uint64_t>(idx)}));
      }

      const double lr = cosine_lr(global_step, total_steps, warmup_steps, base_lr);
      if (start == 0) first_lr = lr;
      Tape<float> tape;
      auto lp = lease_params(tape, params, grad_repr, grad_loc);
      Tape<float>::Var loss_var{};
      double metric = 0;
      if (stage == 1) {
        auto r = loss_representation_build(tape, params, lp, mcfg, batch,
                                           static_cast<float>(tcfg.lambda_repr), BnMode::kTrain);
        loss_var = r.loss;
        metric = r.metric;
      } else if (stage == 2) {
        auto r = loss_location_pretrain_build(tape, params, lp, mcfg, batch,
                                              static_cast<float>(tcfg.nu_loc), tcfg.t_pretrain,
                                              BnMode::kInfer, BnMode::kTrain);
        loss_var = r.loss;
        metric = r.metric;
      } else {
        auto r = loss_joint_build<float>(tape, params, lp, mcfg, batch,
                                         static_cast<float>(tcfg.lambda_repr),
                                         static_cast<float>(tcfg.nu_loc), tcfg.samples,
                                         tcfg.t_joint, traj_seeds, nullptr,
                                         tcfg.reinforce_into_repr, joint_mode);
        loss_var = r.loss;
        metric = r.mean_reward;
      }
      const double loss_value = static_cast<double>(tape.value(loss_var)[0]);
      if (!std::isfinite(loss_value)) {
        throw NumericError("run_stage: non-finite loss at stage " + stage_name + " epoch " +
                           std::to_string(epoch) + " step " + std::to_string(global_step));
      }
      tape.backward(loss_var);
      std::map<std::string, Tensor<float>> grads;
      for (ParamGroup g : {ParamGroup::kRepr, ParamGroup::kLoc}) {
        if ((g == ParamGroup::kRepr && !grad_repr) || (g == ParamGroup::kLoc && !grad_loc)) {
          continue;
        }
        for (const auto& name : params.trainable_names(g)) {
          grads.emplace(name, tape.grad(lp.at(name)));
        }
      }
      sgd_nesterov_step(params, grads, static_cast<float>(lr),
                        static_cast<float>(tcfg.momentum), opt);
      ep_loss += loss_value * static_cast<double>(B);
      ep_metric += metric * static_cast<double>(B);
      ep_count += B;
      ++global_step;
    }

    MetricsRow train_row{stage_name, epoch, "train", ep_loss / static_cast<double>(ep_count),
                         ep_metric / static_cast<double>(ep_count), first_lr};
    result.rows.push_back(train_row);
    if (on_row) on_row(train_row);
    auto dm = detail::eval_stage_metrics(stage, dev, params, mcfg, tcfg);
    MetricsRow dev_row{stage_name, epoch, "dev", dm.loss, dm.accuracy, first_lr};
    result.rows.push_back(dev_row);
    if (on_row) on_row(dev_row);
  }
  return result;
}

}  // namespace saccader
