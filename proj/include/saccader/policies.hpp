#pragma once

#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "saccader/attention.hpp"
#include "saccader/dataset.hpp"
#include "saccader/training.hpp"

namespace saccader {

enum class PolicyKind { kSaccader, kRandom, kOrderedLogits, kSobelMean, kSobelVariance };

const char* policy_name(PolicyKind kind);
PolicyKind policy_from_name(const std::string& name);

struct PolicySpec {
  PolicyKind kind = PolicyKind::kSaccader;
  int64_t k = 6;
  uint64_t seed = 0;
};

// Uniform sample of K distinct grid locations (partial Fisher-Yates).
std::vector<GridLoc> policy_random(int64_t gh, int64_t gw, int64_t k, Rng& rng);

// Top-K locations by maximum class logit; same ranking rule as the stage-2
// teacher targets.
std::vector<GridLoc> policy_ordered_logits(const Tensor<float>& logits_grid, int64_t k);

// Channel-averaged Sobel gradient magnitude of an [H, W, C] image, zero-padded
// 3x3 kernels.
Tensor<float> sobel_magnitude(const Tensor<float>& image);

enum class SobelStat { kMean, kVariance };

// Top-K patches ranked by the per-patch mean or (population) variance of the
// Sobel magnitude map.
std::vector<GridLoc> policy_sobel(const Tensor<float>& image, int64_t rf, int64_t stride,
                                  int64_t k, SobelStat stat);

struct Prediction {
  int64_t top1 = -1;
  Tensor<float> mean_logits;
  bool in_top5(int64_t label) const;
};

// Mean of the logits grid rows at the given (distinct) locations; argmax with
// lowest-class-index tie break.
Prediction classify_rows_with_locations(const Tensor<float>& logits_rows, int64_t gw,
                                        const std::vector<GridLoc>& locations);

// Same, from the image through the representation network.
Prediction classify_with_locations(const Tensor<float>& image, const std::vector<GridLoc>& locs,
                                   ParameterSet<float>& params, const ModelConfig& cfg);

// |union of attended pixel sets| / (H*W); overlapping patches count once.
double coverage(const std::vector<GridLoc>& locations, int64_t rf, int64_t stride, int64_t image_h,
                int64_t image_w);

// Zero out the union of attended patches, leave everything else untouched.
Tensor<float> occlude(const Tensor<float>& image, const std::vector<GridLoc>& locations,
                      int64_t rf, int64_t stride);

// ---- occlusion classifier (full-image judge) ----

struct OcclusionTrainConfig {
  double lr = 0.05;
  int64_t epochs = 15;
  int64_t batch_size = 128;
  int64_t warmup_epochs = 2;
  double momentum = 0.9;
  double lambda = 8e-5;
  uint64_t seed = 1;
};

ParameterSet<float> init_occlusion_params(int64_t channels, int64_t num_classes, Rng& rng);

// Logits for a batch of full images: three stride-2 conv+BN+ReLU blocks, a
// global average pool, and a linear readout. Unrestricted receptive field.
Tape<float>::Var occlusion_forward(Tape<float>& tape, Tape<float>::Var images,
                                   ParameterSet<float>& ps, const LeasedParams<float>& lp,
                                   BnMode mode);

struct OcclusionTrainResult {
  ParameterSet<float> params;
  std::vector<MetricsRow> rows;
  double dev_accuracy = 0;
};

OcclusionTrainResult train_occlusion_classifier(const Dataset& train, const Dataset& dev,
                                                const OcclusionTrainConfig& cfg);

// Top-1 predictions for a batch of images (inference mode).
std::vector<int64_t> occlusion_predict(ParameterSet<float>& params,
                                       const std::vector<const Tensor<float>*>& images);

// ---- policy evaluation ----

struct EvalRow {
  std::string policy;
  int64_t k = 0;
  double top1 = 0;
  double top5 = 0;
  double coverage = 0;
  double occluded_top1 = std::numeric_limits<double>::quiet_NaN();
};

struct EvalReport {
  std::vector<EvalRow> rows;
  uint64_t seed = 0;
  std::string split;
};

// Accuracy and mean coverage per K for one policy; when occl_params is given,
// each image is additionally occluded at the policy's locations and re-scored
// with the occlusion classifier.
EvalReport eval_policy(PolicyKind kind, ParameterSet<float>& params, const ModelConfig& cfg,
                       const Dataset& ds, const std::vector<int64_t>& k_range, uint64_t seed,
                       ParameterSet<float>* occl_params = nullptr);

// ---- PGD robustness ----

using ForwardLogitsFn = std::function<Tape<float>::Var(Tape<float>&, Tape<float>::Var)>;

// Greedy-glimpse classification path of the Saccader model as a
// differentiable function of the input image. Attention locations are
// recomputed from the current image on every call; gradients flow through the
// classification logits extracted at those locations.
ForwardLogitsFn saccader_attack_forward(ParameterSet<float>& params, const ModelConfig& cfg,
                                        int64_t glimpses);

struct PgdResult {
  Tensor<float> adv;
  int64_t iters = 0;
  bool misclassified = false;
};

// Iterated sign-gradient ascent on the cross entropy of `forward`, projected
// to the eps infinity-ball around the [0,1]-clipped input and to [0,1] after
// every step; exits early once the input is misclassified. The returned image
// satisfies |adv - clip(image)|_inf <= eps exactly in float arithmetic.
PgdResult pgd_attack(const ForwardLogitsFn& forward, const Tensor<float>& image, int64_t label,
                     int64_t num_classes, float eps = 2.0f / 255.0f, float step = 0.5f / 255.0f,
                     int64_t max_iters = 300);

}  // namespace saccader
