#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "saccader/rng.hpp"
#include "saccader/tensor.hpp"

namespace saccader {

// Synthetic desk dataset: each image carries exactly one class-defining
// 11x11 glyph at a position chosen so the glyph fits entirely inside one
// rf x rf attention patch, plus distractor fragments cropped from other
// glyphs, plus additive uniform noise. Fully determined by (seed, index).
struct SyntheticSpec {
  int64_t num_classes = 10;
  int64_t image_h = 63;
  int64_t image_w = 63;
  int64_t channels = 1;
  int64_t glyph_size = 11;  // the built-in bitmaps are 11x11
  int64_t distractors = 4;
  double noise_amp = 0.15;
  double background = 0.15;
  double glyph_level = 0.9;
  int64_t fragment_size = 7;
  int64_t train_size = 2000;
  int64_t dev_size = 400;
  int64_t test_size = 400;
  uint64_t seed = 1;
  // placement constraint: the glyph must fit inside a single patch
  int64_t rf = 15;
  int64_t patch_stride = 8;

  void validate() const;
};

struct Dataset {
  int64_t image_h = 0;
  int64_t image_w = 0;
  int64_t channels = 0;
  int64_t num_classes = 0;
  std::vector<Tensor<float>> images;  // each [H, W, C], values in [0, 1]
  std::vector<uint16_t> labels;

  int64_t count() const { return static_cast<int64_t>(images.size()); }
};

// 11x11 binary bitmap for a class id in [0, 10).
const std::vector<std::string>& glyph_bitmap(int64_t class_id);

// Deterministic generation; split_tag separates train/dev/test streams.
Dataset generate_split(const SyntheticSpec& spec, uint64_t split_tag, int64_t count);

struct GeneratedData {
  Dataset train, dev, test;
};
GeneratedData generate_dataset(const SyntheticSpec& spec);

// Binary container: header (magic, version, count, dims, classes), then
// images as little-endian float32 in [0,1], then labels as uint16.
void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

// Random translation by up to `margin` pixels in each direction with zero
// fill; the desk-scale analog of crop-and-resize augmentation.
Tensor<float> translate_image(const Tensor<float>& image, int64_t dy, int64_t dx);

}  // namespace saccader
