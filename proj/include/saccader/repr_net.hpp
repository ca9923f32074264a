#pragma once

#include <vector>

#include "saccader/model.hpp"
#include "saccader/tape.hpp"

namespace saccader {

// Grid of rf x rf patches cut from one image at the given stride. patches is
// [gh, gw, rf, rf, c]; patch (i,j) is a bit-identical copy of the image crop
// starting at (i*stride, j*stride).
template <typename T>
struct PatchGrid {
  Tensor<T> patches;
  int64_t rf = 0;
  int64_t stride = 0;
  int64_t image_h = 0;
  int64_t image_w = 0;

  int64_t grid_h() const { return patches.dim(0); }
  int64_t grid_w() const { return patches.dim(1); }
};

template <typename T>
PatchGrid<T> extract_patch_grid(const Tensor<T>& image, int64_t rf, int64_t stride) {
  if (image.rank() != 3) {
    throw std::invalid_argument("extract_patch_grid: image must be [H,W,C], got " +
                                shape_str(image.shape));
  }
  const int64_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  Tape<T>::check_patch_geometry(H, W, rf, stride);
  const int64_t gh = (H - rf) / stride + 1, gw = (W - rf) / stride + 1;
  PatchGrid<T> grid{Tensor<T>({gh, gw, rf, rf, C}), rf, stride, H, W};
  for (int64_t i = 0; i < gh; ++i) {
    for (int64_t j = 0; j < gw; ++j) {
      for (int64_t dy = 0; dy < rf; ++dy) {
        const T* src = &image.data[static_cast<size_t>(((i * stride + dy) * W + j * stride) * C)];
        T* dst = &grid.patches.data[static_cast<size_t>(
            ((((i * gw + j) * rf) + dy) * rf) * C)];
        std::copy_n(src, rf * C, dst);
      }
    }
  }
  return grid;
}

// All patches of a batch of images stacked into [B*P, rf, rf, C], image-major.
template <typename T>
Tensor<T> extract_patch_batch(const std::vector<const Tensor<T>*>& images, int64_t rf,
                              int64_t stride) {
  const int64_t B = static_cast<int64_t>(images.size());
  const Tensor<T>& first = *images.front();
  const int64_t H = first.dim(0), W = first.dim(1), C = first.dim(2);
  Tape<T>::check_patch_geometry(H, W, rf, stride);
  const int64_t gh = (H - rf) / stride + 1, gw = (W - rf) / stride + 1;
  const int64_t P = gh * gw;
  Tensor<T> out({B * P, rf, rf, C});
  for (int64_t b = 0; b < B; ++b) {
    const Tensor<T>& img = *images[static_cast<size_t>(b)];
    for (int64_t i = 0; i < gh; ++i) {
      for (int64_t j = 0; j < gw; ++j) {
        const int64_t p = b * P + i * gw + j;
        for (int64_t dy = 0; dy < rf; ++dy) {
          const T* src = &img.data[static_cast<size_t>(((i * stride + dy) * W + j * stride) * C)];
          std::copy_n(src, rf * C, &out.data[static_cast<size_t>(((p * rf + dy) * rf) * C)]);
        }
      }
    }
  }
  return out;
}

namespace detail {

template <typename T>
typename Tape<T>::Var conv_bn_relu(Tape<T>& tape, typename Tape<T>::Var x,
                                   ParameterSet<T>& ps, const LeasedParams<T>& lp,
                                   const std::string& prefix, int64_t stride, int64_t dilation,
                                   Pad pad, BnMode mode) {
  auto y = tape.conv2d(x, lp.at(prefix + "/w"), stride, dilation, pad);
  y = tape.batch_norm(y, lp.at(prefix + "/bn/scale"), lp.at(prefix + "/bn/shift"), mode,
                      &ps.at(prefix + "/bn/running_mean"), &ps.at(prefix + "/bn/running_var"));
  return tape.relu(y);
}

}  // namespace detail

// Shared per-patch encoder: conv3x3/s2 -> BN+ReLU -> conv3x3/s2 -> BN+ReLU ->
// conv3x3 (+bias) -> global average pool. Weights are shared across every
// grid position; each output row depends only on its own patch.
// patches: [N, rf, rf, C] -> [N, d_repr]
template <typename T>
typename Tape<T>::Var encode_patches_var(Tape<T>& tape, typename Tape<T>::Var patches,
                                         ParameterSet<T>& ps, const LeasedParams<T>& lp,
                                         BnMode mode) {
  auto h1 = detail::conv_bn_relu(tape, patches, ps, lp, "repr/enc1", 2, 1, Pad::kValid, mode);
  auto h2 = detail::conv_bn_relu(tape, h1, ps, lp, "repr/enc2", 2, 1, Pad::kValid, mode);
  auto h3 = tape.conv2d(h2, lp.at("repr/enc3/w"), 1, 1, Pad::kValid);
  h3 = tape.add_rowvec(h3, lp.at("repr/enc3/b"));
  return tape.global_avg_pool(h3);
}

// Per-location 1x1 convolution with ReLU: [N, d_repr] -> [N, d_what].
template <typename T>
typename Tape<T>::Var what_head_var(Tape<T>& tape, typename Tape<T>::Var repr,
                                    const LeasedParams<T>& lp) {
  return tape.relu(linear(tape, repr, lp.at("repr/what/w"), lp.at("repr/what/b")));
}

// Per-location 1x1 convolution, no activation: [N, d_what] -> [N, num_classes].
template <typename T>
typename Tape<T>::Var logits_head_var(Tape<T>& tape, typename Tape<T>::Var what,
                                      const LeasedParams<T>& lp) {
  return linear(tape, what, lp.at("repr/logits/w"), lp.at("repr/logits/b"));
}

// ---- value-level wrappers (inference mode, no gradients) ----

template <typename T>
Tensor<T> encode_patches(const PatchGrid<T>& grid, ParameterSet<T>& ps, const ModelConfig& cfg) {
  if (grid.rf != cfg.rf) {
    throw std::invalid_argument("encode_patches: grid rf " + std::to_string(grid.rf) +
                                " does not match encoder rf " + std::to_string(cfg.rf));
  }
  const int64_t gh = grid.grid_h(), gw = grid.grid_w();
  Tape<T> tape;
  auto lp = lease_params(tape, ps, false, false);
  Tensor<T> flat = grid.patches;
  flat.shape = {gh * gw, grid.rf, grid.rf, grid.patches.dim(4)};
  auto repr = encode_patches_var(tape, tape.input(std::move(flat)), ps, lp, BnMode::kInfer);
  Tensor<T> out = tape.value(repr);
  out.shape = {gh, gw, cfg.d_repr};
  return out;
}

template <typename T>
Tensor<T> what_head(const Tensor<T>& repr_grid, ParameterSet<T>& ps) {
  const int64_t gh = repr_grid.dim(0), gw = repr_grid.dim(1), d = repr_grid.dim(2);
  Tape<T> tape;
  auto lp = lease_params(tape, ps, false, false);
  Tensor<T> flat = repr_grid;
  flat.shape = {gh * gw, d};
  Tensor<T> out = tape.value(what_head_var(tape, tape.input(std::move(flat)), lp));
  out.shape = {gh, gw, out.dim(1)};
  return out;
}

template <typename T>
Tensor<T> logits_head(const Tensor<T>& what_grid, ParameterSet<T>& ps) {
  const int64_t gh = what_grid.dim(0), gw = what_grid.dim(1), d = what_grid.dim(2);
  Tape<T> tape;
  auto lp = lease_params(tape, ps, false, false);
  Tensor<T> flat = what_grid;
  flat.shape = {gh * gw, d};
  Tensor<T> out = tape.value(logits_head_var(tape, tape.input(std::move(flat)), lp));
  out.shape = {gh, gw, out.dim(1)};
  return out;
}

// Full logits grid [P, num_classes] for one image (inference mode).
template <typename T>
Tensor<T> logits_grid_for_image(const Tensor<T>& image, ParameterSet<T>& ps,
                                const ModelConfig& cfg) {
  Tape<T> tape;
  auto lp = lease_params(tape, ps, false, false);
  auto patches = tape.input(extract_patch_batch<T>({&image}, cfg.rf, cfg.patch_stride));
  auto repr = encode_patches_var(tape, patches, ps, lp, BnMode::kInfer);
  auto logits = logits_head_var(tape, what_head_var(tape, repr, lp), lp);
  return tape.value(logits);
}

// Class probabilities from averaging per-location log-probabilities over all
// grid positions and renormalizing: the normalized geometric mean of the
// per-location class distributions. Argmax of the result is the prediction.
template <typename T>
Tensor<T> classify_full(const Tensor<T>& image, ParameterSet<T>& ps, const ModelConfig& cfg) {
  Tape<T> tape;
  auto lp = lease_params(tape, ps, false, false);
  auto patches = tape.input(extract_patch_batch<T>({&image}, cfg.rf, cfg.patch_stride));
  auto repr = encode_patches_var(tape, patches, ps, lp, BnMode::kInfer);
  auto logits = logits_head_var(tape, what_head_var(tape, repr, lp), lp);
  auto mean_logprob = tape.mean_axis0(tape.log_softmax_rows(logits));
  return tape.value(tape.softmax_vec(mean_logprob));
}

}  // namespace saccader
