#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "saccader/params.hpp"
#include "saccader/rng.hpp"
#include "saccader/tensor.hpp"

namespace saccader {

// Desk-scale geometry and widths. Defaults mirror the full-scale layout at
// roughly 1/16 size: 63x63 inputs, 15-pixel receptive field at stride 8
// (7x7 = 49 attention locations), 64-d patch representations, 32-d what/where
// features mixed down to 32 channels, 10 classes.
struct ModelConfig {
  int64_t image_h = 63;
  int64_t image_w = 63;
  int64_t channels = 1;
  int64_t rf = 15;
  int64_t patch_stride = 8;
  int64_t enc_c1 = 16;
  int64_t enc_c2 = 32;
  int64_t d_repr = 64;
  int64_t d_what = 32;
  int64_t where_hidden = 48;
  int64_t d_where = 32;
  int64_t d_mix = 32;
  int64_t num_classes = 10;

  int64_t grid_h() const { return (image_h - rf) / patch_stride + 1; }
  int64_t grid_w() const { return (image_w - rf) / patch_stride + 1; }
  int64_t num_locations() const { return grid_h() * grid_w(); }

  void validate() const {
    Tape<float>::check_patch_geometry(image_h, image_w, rf, patch_stride);
    // encoder: two stride-2 valid 3x3 convs then one stride-1 valid 3x3
    const int64_t s1 = (rf - 3) / 2 + 1;
    const int64_t s2 = s1 >= 3 ? (s1 - 3) / 2 + 1 : 0;
    if (s2 < 3) {
      throw std::invalid_argument("ModelConfig: rf " + std::to_string(rf) +
                                  " too small for the patch encoder (needs rf >= 15)");
    }
    for (auto [name, v] : {std::pair<const char*, int64_t>{"enc_c1", enc_c1},
                           {"enc_c2", enc_c2},
                           {"d_repr", d_repr},
                           {"d_what", d_what},
                           {"where_hidden", where_hidden},
                           {"d_where", d_where},
                           {"d_mix", d_mix},
                           {"num_classes", num_classes},
                           {"channels", channels}}) {
      if (v <= 0) {
        throw std::invalid_argument("ModelConfig: " + std::string(name) + " must be positive");
      }
    }
  }
};

namespace detail {

template <typename T>
Tensor<T> he_init(Shape shape, int64_t fan_in, Rng& rng) {
  return Tensor<T>::randn(std::move(shape), rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
}

template <typename T>
void add_conv_bn(ParameterSet<T>& ps, const std::string& prefix, int64_t kh, int64_t kw,
                 int64_t cin, int64_t cout, ParamGroup group, Rng& rng) {
  ps.add(prefix + "/w", he_init<T>({kh, kw, cin, cout}, kh * kw * cin, rng), true, group);
  ps.add(prefix + "/bn/scale", Tensor<T>({cout}, T(1)), true, group);
  ps.add(prefix + "/bn/shift", Tensor<T>({cout}), true, group);
  ps.add(prefix + "/bn/running_mean", Tensor<T>({cout}), false, group);
  ps.add(prefix + "/bn/running_var", Tensor<T>({cout}, T(1)), false, group);
}

}  // namespace detail

// Representation parameters live under "repr/", location parameters (attention
// network + mixing convolution + cell query) under "loc/".
template <typename T>
ParameterSet<T> init_saccader_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParameterSet<T> ps;
  detail::add_conv_bn(ps, "repr/enc1", 3, 3, cfg.channels, cfg.enc_c1, ParamGroup::kRepr, rng);
  detail::add_conv_bn(ps, "repr/enc2", 3, 3, cfg.enc_c1, cfg.enc_c2, ParamGroup::kRepr, rng);
  ps.add("repr/enc3/w", detail::he_init<T>({3, 3, cfg.enc_c2, cfg.d_repr}, 9 * cfg.enc_c2, rng),
         true, ParamGroup::kRepr);
  ps.add("repr/enc3/b", Tensor<T>({cfg.d_repr}), true, ParamGroup::kRepr);
  ps.add("repr/what/w", detail::he_init<T>({cfg.d_repr, cfg.d_what}, cfg.d_repr, rng), true,
         ParamGroup::kRepr);
  ps.add("repr/what/b", Tensor<T>({cfg.d_what}), true, ParamGroup::kRepr);
  ps.add("repr/logits/w", detail::he_init<T>({cfg.d_what, cfg.num_classes}, cfg.d_what, rng),
         true, ParamGroup::kRepr);
  ps.add("repr/logits/b", Tensor<T>({cfg.num_classes}), true, ParamGroup::kRepr);

  detail::add_conv_bn(ps, "loc/where1", 1, 1, cfg.d_repr, cfg.where_hidden, ParamGroup::kLoc, rng);
  detail::add_conv_bn(ps, "loc/where2", 3, 3, cfg.where_hidden, cfg.where_hidden, ParamGroup::kLoc,
                      rng);
  detail::add_conv_bn(ps, "loc/where3", 1, 1, cfg.where_hidden, cfg.d_where, ParamGroup::kLoc, rng);
  detail::add_conv_bn(ps, "loc/where4", 3, 3, cfg.d_where, cfg.d_where, ParamGroup::kLoc, rng);
  ps.add("loc/mix/w",
         detail::he_init<T>({cfg.d_what + cfg.d_where, cfg.d_mix}, cfg.d_what + cfg.d_where, rng),
         true, ParamGroup::kLoc);
  ps.add("loc/mix/b", Tensor<T>({cfg.d_mix}), true, ParamGroup::kLoc);
  ps.add("loc/cell/a", Tensor<T>::randn({cfg.d_mix}, rng, T(0.5)), true, ParamGroup::kLoc);
  return ps;
}

// Re-randomize the location partition in place (used by the no-pretraining
// ablation, which starts joint training from stage-1 weights only).
template <typename T>
void reinit_location_params(ParameterSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
  ParameterSet<T> fresh = init_saccader_params<T>(cfg, rng);
  for (auto& e : ps.entries()) {
    if (e.group == ParamGroup::kLoc) e.value = fresh.at(e.name);
  }
}

}  // namespace saccader
