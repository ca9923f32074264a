#pragma once

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "saccader/attention.hpp"
#include "saccader/dataset.hpp"
#include "saccader/errors.hpp"
#include "saccader/optim.hpp"

namespace saccader {

struct TrainConfig {
  double lambda_repr = 8e-5;  // L2 weight on representation parameters
  double nu_loc = 8e-5;       // L2 weight on location parameters
  int64_t t_pretrain = 6;     // teacher-forced glimpses in stage 2
  int64_t t_joint = 6;        // glimpses in stage 3 and at test time
  int64_t samples = 2;        // sampled trajectories per example (S)
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
  // Open knobs, both recorded in run metadata: whether policy gradients
  // reach representation weights, and whether stage-3 forward passes use
  // batch statistics.
  bool reinforce_into_repr = true;
  bool bn_train_stats_in_sampling = true;
  bool augment_random_crop = false;
  int64_t crop_margin = 4;

  void validate(const ModelConfig& mcfg) const {
    if (samples < 1) throw ConfigError("TrainConfig: samples (S) must be >= 1");
    const int64_t P = mcfg.num_locations();
    if (t_pretrain < 1 || t_pretrain > P || t_joint < 1 || t_joint > P) {
      throw ConfigError("TrainConfig: glimpse counts must be in [1, " + std::to_string(P) + "]");
    }
    for (double lr : {lr_stage1, lr_stage2, lr_stage3}) {
      if (lr <= 0) throw ConfigError("TrainConfig: learning rates must be positive");
    }
    if (lambda_repr < 0 || nu_loc < 0) throw ConfigError("TrainConfig: L2 weights must be >= 0");
    if (batch_size < 2) throw ConfigError("TrainConfig: batch_size must be >= 2");
    if (momentum < 0 || momentum >= 1) throw ConfigError("TrainConfig: momentum must be in [0,1)");
    for (int64_t e : {epochs_stage1, epochs_stage2, epochs_stage3}) {
      if (e < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
      if (warmup_epochs >= e) {
        throw ConfigError("TrainConfig: warmup_epochs must be smaller than every stage's epochs");
      }
    }
    if (crop_margin < 0) throw ConfigError("TrainConfig: crop_margin must be >= 0");
  }
};

template <typename T>
struct ImageBatchView {
  std::vector<const Tensor<T>*> images;
  std::vector<int64_t> labels;
  int64_t size() const { return static_cast<int64_t>(images.size()); }
};

// (coeff/2) * sum of squares over the trainable tensors of one partition.
template <typename T>
typename Tape<T>::Var l2_term(Tape<T>& tape, const LeasedParams<T>& lp,
                              const ParameterSet<T>& ps, ParamGroup group, T coeff) {
  auto total = tape.input(Tensor<T>::scalar(T(0)));
  if (coeff == T(0)) return total;
  for (const auto& name : ps.trainable_names(group)) {
    total = tape.add(total, tape.sumsq(lp.at(name)));
  }
  return tape.scale(total, coeff / T(2));
}

template <typename T>
struct LossBuildResult {
  typename Tape<T>::Var loss;
  double metric = 0;  // stage-specific accuracy in [0, 1]
};

// Stage 1 objective: cross entropy of the location-averaged log-probabilities
// (the normalized geometric mean over all grid positions) plus L2 on the
// representation parameters, averaged over the batch.
template <typename T>
LossBuildResult<T> loss_representation_build(Tape<T>& tape, ParameterSet<T>& ps,
                                             const LeasedParams<T>& lp, const ModelConfig& cfg,
                                             const ImageBatchView<T>& batch, T lambda,
                                             BnMode mode) {
  const int64_t B = batch.size();
  const int64_t P = cfg.num_locations();
  auto patches = tape.input(extract_patch_batch(batch.images, cfg.rf, cfg.patch_stride));
  auto repr = encode_patches_var(tape, patches, ps, lp, mode);
  auto logits = logits_head_var(tape, what_head_var(tape, repr, lp), lp);
  auto lsm = tape.log_softmax_rows(logits);
  auto nll_sum = tape.input(Tensor<T>::scalar(T(0)));
  int64_t correct = 0;
  for (int64_t b = 0; b < B; ++b) {
    auto mean_lp = tape.mean_axis0(tape.slice_rows(lsm, b * P, P));
    auto renorm = tape.log_softmax_vec(mean_lp);
    nll_sum = tape.add(nll_sum, tape.scale(tape.pick(renorm, batch.labels[b]), T(-1)));
    const Tensor<T>& m = tape.value(mean_lp);
    int64_t arg = 0;
    for (int64_t k = 1; k < m.numel(); ++k) {
      if (m[k] > m[arg]) arg = k;
    }
    if (arg == batch.labels[b]) ++correct;
  }
  LossBuildResult<T> out;
  out.loss = tape.add(tape.scale(nll_sum, T(1) / static_cast<T>(B)),
                      l2_term(tape, lp, ps, ParamGroup::kRepr, lambda));
  out.metric = static_cast<double>(correct) / static_cast<double>(B);
  return out;
}

// Locations ordered by descending per-location maximum logit; exact ties
// break toward the lower row-major index. Returns flat indices.
template <typename T>
std::vector<int64_t> sorted_location_targets(const Tensor<T>& logits_rows, int64_t steps) {
  const int64_t P = logits_rows.dim(0), C = logits_rows.dim(1);
  if (steps > P) {
    throw std::invalid_argument("sorted_location_targets: T exceeds location count");
  }
  std::vector<T> max_logit(static_cast<size_t>(P));
  for (int64_t p = 0; p < P; ++p) {
    T m = logits_rows.at(p, 0);
    for (int64_t k = 1; k < C; ++k) m = std::max(m, logits_rows.at(p, k));
    max_logit[static_cast<size_t>(p)] = m;
  }
  std::vector<int64_t> order(static_cast<size_t>(P));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return max_logit[static_cast<size_t>(a)] > max_logit[static_cast<size_t>(b)];
  });
  order.resize(static_cast<size_t>(steps));
  return order;
}

// Stage 2 objective: teacher-forced negative log-likelihood of the sorted
// target locations under the policy, plus L2 on the location parameters.
// The representation side is expected to be frozen by the caller's lease.
template <typename T>
LossBuildResult<T> loss_location_pretrain_build(Tape<T>& tape, ParameterSet<T>& ps,
                                                const LeasedParams<T>& lp,
                                                const ModelConfig& cfg,
                                                const ImageBatchView<T>& batch, T nu,
                                                int64_t t_pretrain, BnMode repr_mode,
                                                BnMode loc_mode) {
  const int64_t B = batch.size();
  const int64_t P = cfg.num_locations();
  auto patches = tape.input(extract_patch_batch(batch.images, cfg.rf, cfg.patch_stride));
  auto fv = build_forward(tape, patches, B, ps, lp, cfg, repr_mode, loc_mode);
  auto nll_sum = tape.input(Tensor<T>::scalar(T(0)));
  int64_t hits = 0;
  for (int64_t b = 0; b < B; ++b) {
    auto logits_i = tape.slice_rows(fv.logits, b * P, P);
    auto mixed_i = tape.slice_rows(fv.mixed, b * P, P);
    const auto targets = sorted_location_targets(tape.value(logits_i), t_pretrain);
    auto uv = unroll_on_tape<T>(tape, mixed_i, logits_i, fv.query, cfg.grid_h(), cfg.grid_w(),
                                t_pretrain, [&](const Tensor<T>& r_tilde, int64_t t) {
                                  int64_t arg = 0;
                                  for (int64_t p = 1; p < r_tilde.numel(); ++p) {
                                    if (r_tilde[p] > r_tilde[arg]) arg = p;
                                  }
                                  if (arg == targets[static_cast<size_t>(t)]) ++hits;
                                  return targets[static_cast<size_t>(t)];
                                });
    nll_sum = tape.add(nll_sum, tape.scale(uv.log_prob_sum, T(-1)));
  }
  LossBuildResult<T> out;
  out.loss = tape.add(tape.scale(nll_sum, T(1) / static_cast<T>(B)),
                      l2_term(tape, lp, ps, ParamGroup::kLoc, nu));
  out.metric = static_cast<double>(hits) / static_cast<double>(B * t_pretrain);
  return out;
}

// Sampled trajectories for one minibatch. baseline is exactly the mean of
// all rewards in the minibatch across samples.
template <typename T>
struct TrajectoryBatch {
  std::vector<std::vector<GlimpseTrace<T>>> traces;  // [B][S]
  double baseline = 0;
};

template <typename T>
struct JointBuildResult {
  typename Tape<T>::Var loss;
  TrajectoryBatch<T> trajectories;
  double mean_reward = 0;
};

// Stage 3 objective (REINFORCE + classification + both L2 terms).
// For each example, S trajectories are sampled from the policy; the reward is
// 1 iff the argmax of that trajectory's averaged raw logits matches the
// label. The REINFORCE term weights each trajectory's summed location
// log-probabilities by -(r_s - b); the classification term applies the
// trajectory-averaged log-probability cross entropy and is averaged over the
// S samples. When `frozen` is given, its locations, rewards, and baseline are
// replayed instead of sampling (used by gradient checks).
template <typename T>
JointBuildResult<T> loss_joint_build(Tape<T>& tape, ParameterSet<T>& ps,
                                     const LeasedParams<T>& lp, const ModelConfig& cfg,
                                     const ImageBatchView<T>& batch, T lambda, T nu,
                                     int64_t num_samples, int64_t t_joint,
                                     const std::vector<uint64_t>& traj_seeds,
                                     const TrajectoryBatch<T>* frozen, bool reinforce_into_repr,
                                     BnMode mode) {
  const int64_t B = batch.size();
  const int64_t P = cfg.num_locations();
  auto patches = tape.input(extract_patch_batch(batch.images, cfg.rf, cfg.patch_stride));
  auto fv = build_forward(tape, patches, B, ps, lp, cfg, mode, mode,
                          /*detach_policy_from_repr=*/!reinforce_into_repr);

  JointBuildResult<T> out;
  out.trajectories.traces.resize(static_cast<size_t>(B));
  struct PerSample {
    typename Tape<T>::Var log_prob_sum;
    typename Tape<T>::Var class_nll;
    int reward = 0;
  };
  std::vector<std::vector<PerSample>> samples(static_cast<size_t>(B));
  int64_t reward_sum = 0;
  for (int64_t b = 0; b < B; ++b) {
    auto logits_i = tape.slice_rows(fv.logits, b * P, P);
    auto lsm_i = tape.log_softmax_rows(logits_i);
    auto mixed_i = tape.slice_rows(fv.mixed, b * P, P);
    Rng rng(traj_seeds.empty() ? 0 : traj_seeds[static_cast<size_t>(b)]);
    for (int64_t s = 0; s < num_samples; ++s) {
      UnrollVars<T> uv;
      if (frozen) {
        const GlimpseTrace<T>& given =
            frozen->traces[static_cast<size_t>(b)][static_cast<size_t>(s)];
        uv = unroll_on_tape<T>(tape, mixed_i, logits_i, fv.query, cfg.grid_h(), cfg.grid_w(),
                               t_joint, [&](const Tensor<T>&, int64_t t) {
                                 const GridLoc& l = given.locations[static_cast<size_t>(t)];
                                 return l.i * cfg.grid_w() + l.j;
                               });
        uv.trace.reward = given.reward;
      } else {
        uv = unroll_on_tape<T>(tape, mixed_i, logits_i, fv.query, cfg.grid_h(), cfg.grid_w(),
                               t_joint, [&](const Tensor<T>& r_tilde, int64_t) {
                                 GridLoc l = select_location(r_tilde, SelectMode::kSample, &rng);
                                 return l.i * cfg.grid_w() + l.j;
                               });
        const Tensor<T>& avg = uv.trace.averaged_logits;
        int64_t arg = 0;
        for (int64_t k = 1; k < avg.numel(); ++k) {
          if (avg[k] > avg[arg]) arg = k;
        }
        uv.trace.reward = arg == batch.labels[b] ? 1 : 0;
      }
      reward_sum += uv.trace.reward;
      auto mean_lp = tape.mean_axis0(tape.gather_rows(lsm_i, uv.flat_locs));
      auto renorm = tape.log_softmax_vec(mean_lp);
      PerSample rec;
      rec.log_prob_sum = uv.log_prob_sum;
      rec.class_nll = tape.scale(tape.pick(renorm, batch.labels[b]), T(-1));
      rec.reward = uv.trace.reward;
      samples[static_cast<size_t>(b)].push_back(rec);
      out.trajectories.traces[static_cast<size_t>(b)].push_back(std::move(uv.trace));
    }
  }
  const double baseline = frozen ? frozen->baseline
                                 : static_cast<double>(reward_sum) /
                                       static_cast<double>(B * num_samples);
  out.trajectories.baseline = baseline;
  out.mean_reward =
      static_cast<double>(reward_sum) / static_cast<double>(B * num_samples);

  auto total = tape.input(Tensor<T>::scalar(T(0)));
  for (int64_t b = 0; b < B; ++b) {
    auto cls = tape.input(Tensor<T>::scalar(T(0)));
    for (const auto& rec : samples[static_cast<size_t>(b)]) {
      const T advantage = static_cast<T>(rec.reward - baseline);
      total = tape.add(total, tape.scale(rec.log_prob_sum, -advantage));
      cls = tape.add(cls, rec.class_nll);
    }
    total = tape.add(total, tape.scale(cls, T(1) / static_cast<T>(num_samples)));
  }
  out.loss = tape.add(tape.scale(total, T(1) / static_cast<T>(B)),
                      tape.add(l2_term(tape, lp, ps, ParamGroup::kRepr, lambda),
                               l2_term(tape, lp, ps, ParamGroup::kLoc, nu)));
  return out;
}

// ---- stage runner ----

struct MetricsRow {
  std::string stage;
  int64_t epoch = 0;
  std::string split;
  double loss = 0;
  double accuracy = 0;
  double lr = 0;
};

struct StageResult {
  std::vector<MetricsRow> rows;
};

inline std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = rng.uniform_int(i + 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  return idx;
}

namespace detail {

struct DevMetrics {
  double loss = 0;
  double accuracy = 0;
};

// Deterministic evaluation passes (inference mode, no gradients).
DevMetrics eval_stage_metrics(int stage, const Dataset& ds, ParameterSet<float>& params,
                              const ModelConfig& mcfg, const TrainConfig& tcfg);

}  // namespace detail

StageResult run_stage(int stage, const Dataset& train, const Dataset& dev,
                      ParameterSet<float>& params, const ModelConfig& mcfg,
                      const TrainConfig& tcfg,
                      const std::function<void(const MetricsRow&)>& on_row = {});

}  // namespace saccader
