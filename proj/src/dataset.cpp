#include "saccader/dataset.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>

#include "saccader/errors.hpp"
#include "saccader/wire.hpp"

namespace saccader {

namespace {

// Ten 11x11 glyphs arranged as five visually related pairs; the second
// member of each pair is the first plus a small extra stroke. Fragments of
// any glyph look like plausible pieces of others, which is what makes the
// attention problem non-trivial.
const std::array<std::vector<std::string>, 10> kGlyphs = {{
    // 0: horizontal ladder
    {"...........",
     ".#########.",
     "...........",
     "...........",
     "...........",
     ".#########.",
     "...........",
     "...........",
     "...........",
     ".#########.",
     "..........."},
    // 1: horizontal ladder + left spine
    {"...........",
     ".#########.",
     ".#.........",
     ".#.........",
     ".#.........",
     ".#########.",
     ".#.........",
     ".#.........",
     ".#.........",
     ".#########.",
     "..........."},
    // 2: box
    {"...........",
     ".#########.",
     ".#.......#.",
     ".#.......#.",
     ".#.......#.",
     ".#.......#.",
     ".#.......#.",
     ".#.......#.",
     ".#.......#.",
     ".#########.",
     "..........."},
    // 3: box + center block
    {"...........",
     ".#########.",
     ".#.......#.",
     ".#.......#.",
     ".#..###..#.",
     ".#..###..#.",
     ".#..###..#.",
     ".#.......#.",
     ".#.......#.",
     ".#########.",
     "..........."},
    // 4: plus
    {"...........",
     "....###....",
     "....###....",
     "....###....",
     ".#########.",
     ".#########.",
     ".#########.",
     "....###....",
     "....###....",
     "....###....",
     "..........."},
    // 5: tee
    {"...........",
     ".#########.",
     ".#########.",
     ".#########.",
     "....###....",
     "....###....",
     "....###....",
     "....###....",
     "....###....",
     "....###....",
     "..........."},
    // 6: cross (both diagonals)
    {"...........",
     ".##.....##.",
     ".###...###.",
     "..###.###..",
     "...#####...",
     "....###....",
     "...#####...",
     "..###.###..",
     ".###...###.",
     ".##.....##.",
     "..........."},
    // 7: single diagonal
    {"...........",
     ".........#.",
     "........##.",
     ".......###.",
     "......###..",
     ".....###...",
     "....###....",
     "...###.....",
     "..###......",
     ".###.......",
     "..........."},
    // 8: vertical ladder
    {"...........",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     "..........."},
    // 9: vertical ladder + top bar
    {"...........",
     ".#########.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     ".#...#...#.",
     "..........."},
}};

constexpr char kDatasetMagic[8] = {'S', 'A', 'C', 'D', 'S', 'E', 'T', '1'};
constexpr uint32_t kDatasetVersion = 1;

// Offsets along one axis at which a glyph of size g lies entirely inside
// some patch [stride*i, stride*i + rf).
std::vector<int64_t> valid_offsets(int64_t image_dim, int64_t g, int64_t rf, int64_t stride) {
  std::vector<int64_t> out;
  const int64_t grid = (image_dim - rf) / stride + 1;
  for (int64_t y = 0; y + g <= image_dim; ++y) {
    for (int64_t i = 0; i < grid; ++i) {
      const int64_t s = i * stride;
      if (s <= y && y + g <= s + rf) {
        out.push_back(y);
        break;
      }
    }
  }
  return out;
}

void stamp_bitmap(Tensor<float>& img, const std::vector<std::string>& bitmap, int64_t y0,
                  int64_t x0, int64_t crop_y, int64_t crop_x, int64_t crop_size, float level) {
  for (int64_t dy = 0; dy < crop_size; ++dy) {
    for (int64_t dx = 0; dx < crop_size; ++dx) {
      if (bitmap[static_cast<size_t>(crop_y + dy)][static_cast<size_t>(crop_x + dx)] == '#') {
        img.at(y0 + dy, x0 + dx, 0) = level;
      }
    }
  }
}

bool boxes_overlap(int64_t ay, int64_t ax, int64_t asz, int64_t by, int64_t bx, int64_t bsz) {
  return ay < by + bsz && by < ay + asz && ax < bx + bsz && bx < ax + bsz;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (num_classes < 2 || num_classes > 10) {
    throw ConfigError("SyntheticSpec: num_classes must be in [2, 10], got " +
                      std::to_string(num_classes));
  }
  if (glyph_size != 11) {
    throw ConfigError("SyntheticSpec: only the built-in 11x11 glyphs are supported");
  }
  if (glyph_size > image_h || glyph_size > image_w) {
    throw ConfigError("SyntheticSpec: glyph larger than image");
  }
  if (glyph_size > rf) {
    throw ConfigError("SyntheticSpec: glyph does not fit inside one rf x rf patch");
  }
  if (channels != 1) throw ConfigError("SyntheticSpec: only grayscale images are supported");
  if (fragment_size <= 0 || fragment_size > glyph_size) {
    throw ConfigError("SyntheticSpec: fragment_size must be in (0, glyph_size]");
  }
  if (noise_amp < 0 || distractors < 0) {
    throw ConfigError("SyntheticSpec: noise_amp and distractors must be non-negative");
  }
}

const std::vector<std::string>& glyph_bitmap(int64_t class_id) {
  if (class_id < 0 || class_id >= 10) {
    throw std::invalid_argument("glyph_bitmap: class id out of range");
  }
  return kGlyphs[static_cast<size_t>(class_id)];
}

Dataset generate_split(const SyntheticSpec& spec, uint64_t split_tag, int64_t count) {
  spec.validate();
  const int64_t g = spec.glyph_size;
  const auto ys = valid_offsets(spec.image_h, g, spec.rf, spec.patch_stride);
  const auto xs = valid_offsets(spec.image_w, g, spec.rf, spec.patch_stride);
  if (ys.empty() || xs.empty()) {
    throw ConfigError("SyntheticSpec: no valid glyph placement for this geometry");
  }
  Dataset ds;
  ds.image_h = spec.image_h;
  ds.image_w = spec.image_w;
  ds.channels = spec.channels;
  ds.num_classes = spec.num_classes;
  ds.images.reserve(static_cast<size_t>(count));
  ds.labels.reserve(static_cast<size_t>(count));
  for (int64_t idx = 0; idx < count; ++idx) {
    Rng rng(Rng::mix({spec.seed, split_tag, static_cast<uint64_t>(idx)}));
    const int64_t label = rng.uniform_int(spec.num_classes);
    Tensor<float> img({spec.image_h, spec.image_w, 1}, static_cast<float>(spec.background));
    const int64_t gy = ys[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(ys.size())))];
    const int64_t gx = xs[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(xs.size())))];
    stamp_bitmap(img, glyph_bitmap(label), gy, gx, 0, 0, g,
                 static_cast<float>(spec.glyph_level));
    for (int64_t k = 0; k < spec.distractors; ++k) {
      int64_t other = rng.uniform_int(spec.num_classes - 1);
      if (other >= label) ++other;
      const int64_t fs = spec.fragment_size;
      const int64_t cy = rng.uniform_int(g - fs + 1);
      const int64_t cx = rng.uniform_int(g - fs + 1);
      for (int attempt = 0; attempt < 20; ++attempt) {
        const int64_t py = rng.uniform_int(spec.image_h - fs + 1);
        const int64_t px = rng.uniform_int(spec.image_w - fs + 1);
        if (boxes_overlap(py, px, fs, gy, gx, g)) continue;
        stamp_bitmap(img, glyph_bitmap(other), py, px, cy, cx, fs,
                     static_cast<float>(spec.glyph_level));
        break;
      }
    }
    if (spec.noise_amp > 0) {
      for (auto& v : img.data) {
        v += static_cast<float>(rng.uniform(-spec.noise_amp, spec.noise_amp));
      }
    }
    for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<uint16_t>(label));
  }
  return ds;
}

GeneratedData generate_dataset(const SyntheticSpec& spec) {
  GeneratedData out;
  out.train = generate_split(spec, 0xA11CE, spec.train_size);
  out.dev = generate_split(spec, 0xB0B0, spec.dev_size);
  out.test = generate_split(spec, 0xC0DE, spec.test_size);
  return out;
}

void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DependencyError("write_dataset: cannot open " + path);
  os.write(kDatasetMagic, sizeof(kDatasetMagic));
  wire::write_u32(os, kDatasetVersion);
  wire::write_u32(os, static_cast<uint32_t>(ds.count()));
  wire::write_u32(os, static_cast<uint32_t>(ds.image_h));
  wire::write_u32(os, static_cast<uint32_t>(ds.image_w));
  wire::write_u32(os, static_cast<uint32_t>(ds.channels));
  wire::write_u32(os, static_cast<uint32_t>(ds.num_classes));
  for (const auto& img : ds.images) {
    for (float v : img.data) wire::write_f32(os, v);
  }
  for (uint16_t l : ds.labels) wire::write_u16(os, l);
  if (!os) throw DependencyError("write_dataset: write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DependencyError("read_dataset: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kDatasetMagic, sizeof(magic)) != 0) {
    throw DependencyError("read_dataset: bad magic in " + path);
  }
  const uint32_t version = wire::read_u32(is);
  if (version != kDatasetVersion) {
    throw DependencyError("read_dataset: unsupported version " + std::to_string(version));
  }
  Dataset ds;
  const uint32_t count = wire::read_u32(is);
  ds.image_h = wire::read_u32(is);
  ds.image_w = wire::read_u32(is);
  ds.channels = wire::read_u32(is);
  ds.num_classes = wire::read_u32(is);
  ds.images.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Tensor<float> img({ds.image_h, ds.image_w, ds.channels});
    for (auto& v : img.data) v = wire::read_f32(is);
    ds.images.push_back(std::move(img));
  }
  ds.labels.resize(count);
  for (auto& l : ds.labels) l = wire::read_u16(is);
  if (!is) throw DependencyError("read_dataset: truncated file " + path);
  return ds;
}

Tensor<float> translate_image(const Tensor<float>& image, int64_t dy, int64_t dx) {
  const int64_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  Tensor<float> out({H, W, C});
  for (int64_t y = 0; y < H; ++y) {
    const int64_t sy = y - dy;
    if (sy < 0 || sy >= H) continue;
    for (int64_t x = 0; x < W; ++x) {
      const int64_t sx = x - dx;
      if (sx < 0 || sx >= W) continue;
      for (int64_t c = 0; c < C; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace saccader
