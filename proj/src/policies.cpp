#include "saccader/policies.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "saccader/errors.hpp"

namespace saccader {

const char* policy_name(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::kSaccader: return "saccader";
    case PolicyKind::kRandom: return "random";
    case PolicyKind::kOrderedLogits: return "ordered_logits";
    case PolicyKind::kSobelMean: return "sobel_mean";
    case PolicyKind::kSobelVariance: return "sobel_var";
  }
  return "?";
}

PolicyKind policy_from_name(const std::string& name) {
  for (PolicyKind k : {PolicyKind::kSaccader, PolicyKind::kRandom, PolicyKind::kOrderedLogits,
                       PolicyKind::kSobelMean, PolicyKind::kSobelVariance}) {
    if (name == policy_name(k)) return k;
  }
  throw ConfigError("unknown policy name: " + name);
}

std::vector<GridLoc> policy_random(int64_t gh, int64_t gw, int64_t k, Rng& rng) {
  const int64_t P = gh * gw;
  if (k < 1 || k > P) {
    throw std::invalid_argument("policy_random: K = " + std::to_string(k) +
                                " out of range [1, " + std::to_string(P) + "]");
  }
  std::vector<int64_t> pool(static_cast<size_t>(P));
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<GridLoc> out;
  out.reserve(static_cast<size_t>(k));
  for (int64_t t = 0; t < k; ++t) {
    const int64_t j = t + rng.uniform_int(P - t);
    std::swap(pool[static_cast<size_t>(t)], pool[static_cast<size_t>(j)]);
    out.push_back(GridLoc{pool[static_cast<size_t>(t)] / gw, pool[static_cast<size_t>(t)] % gw});
  }
  return out;
}

namespace {

std::vector<GridLoc> ordered_from_rows(const Tensor<float>& logits_rows, int64_t gw, int64_t k) {
  const auto flat = sorted_location_targets(logits_rows, k);
  std::vector<GridLoc> out;
  out.reserve(flat.size());
  for (int64_t f : flat) out.push_back(GridLoc{f / gw, f % gw});
  return out;
}

std::vector<GridLoc> top_k_by_score(const std::vector<double>& score, int64_t gw, int64_t k) {
  std::vector<int64_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return score[static_cast<size_t>(a)] > score[static_cast<size_t>(b)];
  });
  std::vector<GridLoc> out;
  for (int64_t t = 0; t < k; ++t) {
    out.push_back(GridLoc{order[static_cast<size_t>(t)] / gw, order[static_cast<size_t>(t)] % gw});
  }
  return out;
}

}  // namespace

std::vector<GridLoc> policy_ordered_logits(const Tensor<float>& logits_grid, int64_t k) {
  if (logits_grid.rank() != 3) {
    throw std::invalid_argument("policy_ordered_logits: expected [gh,gw,C] grid, got " +
                                shape_str(logits_grid.shape));
  }
  const int64_t gh = logits_grid.dim(0), gw = logits_grid.dim(1), c = logits_grid.dim(2);
  Tensor<float> rows = logits_grid;
  rows.shape = {gh * gw, c};
  return ordered_from_rows(rows, gw, k);
}

Tensor<float> sobel_magnitude(const Tensor<float>& image) {
  const int64_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  Tensor<float> out({H, W});
  // same-size output with edge replication: a constant image has zero
  // gradient magnitude everywhere, borders included
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      double acc = 0;
      for (int64_t c = 0; c < C; ++c) {
        double gx = 0, gy = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int64_t iy = std::clamp<int64_t>(y + dy, 0, H - 1);
          for (int dx = -1; dx <= 1; ++dx) {
            const int64_t ix = std::clamp<int64_t>(x + dx, 0, W - 1);
            const double v = image.at(iy, ix, c);
            gx += kx[dy + 1][dx + 1] * v;
            gy += ky[dy + 1][dx + 1] * v;
          }
        }
        acc += std::sqrt(gx * gx + gy * gy);
      }
      out.at(y, x) = static_cast<float>(acc / static_cast<double>(C));
    }
  }
  return out;
}

std::vector<GridLoc> policy_sobel(const Tensor<float>& image, int64_t rf, int64_t stride,
                                  int64_t k, SobelStat stat) {
  const int64_t H = image.dim(0), W = image.dim(1);
  Tape<float>::check_patch_geometry(H, W, rf, stride);
  const int64_t gh = (H - rf) / stride + 1, gw = (W - rf) / stride + 1;
  if (k < 1 || k > gh * gw) throw std::invalid_argument("policy_sobel: K out of range");
  const Tensor<float> mag = sobel_magnitude(image);
  std::vector<double> score(static_cast<size_t>(gh * gw));
  const double n = static_cast<double>(rf * rf);
  for (int64_t i = 0; i < gh; ++i) {
    for (int64_t j = 0; j < gw; ++j) {
      double s = 0, s2 = 0;
      for (int64_t dy = 0; dy < rf; ++dy) {
        for (int64_t dx = 0; dx < rf; ++dx) {
          const double v = mag.at(i * stride + dy, j * stride + dx);
          s += v;
          s2 += v * v;
        }
      }
      const double mean = s / n;
      score[static_cast<size_t>(i * gw + j)] =
          stat == SobelStat::kMean ? mean : s2 / n - mean * mean;
    }
  }
  return top_k_by_score(score, gw, k);
}

bool Prediction::in_top5(int64_t label) const {
  const Tensor<float>& m = mean_logits;
  int64_t rank = 0;
  for (int64_t k = 0; k < m.numel(); ++k) {
    if (k == label) continue;
    if (m[k] > m[label] || (m[k] == m[label] && k < label)) ++rank;
  }
  return rank < 5;
}

Prediction classify_rows_with_locations(const Tensor<float>& logits_rows, int64_t gw,
                                        const std::vector<GridLoc>& locations) {
  const int64_t P = logits_rows.dim(0), C = logits_rows.dim(1);
  if (locations.empty()) throw std::invalid_argument("classify_with_locations: no locations");
  std::set<int64_t> seen;
  Prediction pred;
  pred.mean_logits = Tensor<float>({C});
  for (const GridLoc& l : locations) {
    const int64_t flat = l.i * gw + l.j;
    if (l.i < 0 || l.j < 0 || l.j >= gw || flat >= P) {
      throw std::invalid_argument("classify_with_locations: location off grid");
    }
    if (!seen.insert(flat).second) {
      throw std::invalid_argument("classify_with_locations: duplicate location (" +
                                  std::to_string(l.i) + "," + std::to_string(l.j) + ")");
    }
    for (int64_t k = 0; k < C; ++k) pred.mean_logits[k] += logits_rows.at(flat, k);
  }
  const float inv = 1.0f / static_cast<float>(locations.size());
  for (auto& v : pred.mean_logits.data) v *= inv;
  pred.top1 = 0;
  for (int64_t k = 1; k < C; ++k) {
    if (pred.mean_logits[k] > pred.mean_logits[pred.top1]) pred.top1 = k;
  }
  return pred;
}

Prediction classify_with_locations(const Tensor<float>& image, const std::vector<GridLoc>& locs,
                                   ParameterSet<float>& params, const ModelConfig& cfg) {
  const Tensor<float> rows = logits_grid_for_image(image, params, cfg);
  return classify_rows_with_locations(rows, cfg.grid_w(), locs);
}

double coverage(const std::vector<GridLoc>& locations, int64_t rf, int64_t stride, int64_t image_h,
                int64_t image_w) {
  std::vector<uint8_t> mask(static_cast<size_t>(image_h * image_w), 0);
  for (const GridLoc& l : locations) {
    for (int64_t dy = 0; dy < rf; ++dy) {
      for (int64_t dx = 0; dx < rf; ++dx) {
        const int64_t y = l.i * stride + dy, x = l.j * stride + dx;
        if (y < 0 || y >= image_h || x < 0 || x >= image_w) {
          throw std::invalid_argument("coverage: patch extends outside the image");
        }
        mask[static_cast<size_t>(y * image_w + x)] = 1;
      }
    }
  }
  int64_t on = 0;
  for (uint8_t m : mask) on += m;
  return static_cast<double>(on) / static_cast<double>(image_h * image_w);
}

Tensor<float> occlude(const Tensor<float>& image, const std::vector<GridLoc>& locations,
                      int64_t rf, int64_t stride) {
  Tensor<float> out = image;
  const int64_t H = out.dim(0), W = out.dim(1), C = out.dim(2);
  for (const GridLoc& l : locations) {
    for (int64_t dy = 0; dy < rf; ++dy) {
      const int64_t y = l.i * stride + dy;
      if (y < 0 || y >= H) continue;
      for (int64_t dx = 0; dx < rf; ++dx) {
        const int64_t x = l.j * stride + dx;
        if (x < 0 || x >= W) continue;
        for (int64_t c = 0; c < C; ++c) out.at(y, x, c) = 0.0f;
      }
    }
  }
  return out;
}

// ---- occlusion classifier ----

ParameterSet<float> init_occlusion_params(int64_t channels, int64_t num_classes, Rng& rng) {
  ParameterSet<float> ps;
  detail::add_conv_bn(ps, "occl/c1", 3, 3, channels, 16, ParamGroup::kRepr, rng);
  detail::add_conv_bn(ps, "occl/c2", 3, 3, 16, 32, ParamGroup::kRepr, rng);
  detail::add_conv_bn(ps, "occl/c3", 3, 3, 32, 64, ParamGroup::kRepr, rng);
  ps.add("occl/fc/w", detail::he_init<float>({64, num_classes}, 64, rng), true,
         ParamGroup::kRepr);
  ps.add("occl/fc/b", Tensor<float>({num_classes}), true, ParamGroup::kRepr);
  return ps;
}

Tape<float>::Var occlusion_forward(Tape<float>& tape, Tape<float>::Var images,
                                   ParameterSet<float>& ps, const LeasedParams<float>& lp,
                                   BnMode mode) {
  auto h = detail::conv_bn_relu(tape, images, ps, lp, "occl/c1", 2, 1, Pad::kValid, mode);
  h = detail::conv_bn_relu(tape, h, ps, lp, "occl/c2", 2, 1, Pad::kValid, mode);
  h = detail::conv_bn_relu(tape, h, ps, lp, "occl/c3", 2, 1, Pad::kValid, mode);
  return linear(tape, tape.global_avg_pool(h), lp.at("occl/fc/w"), lp.at("occl/fc/b"));
}

namespace {

Tensor<float> stack_images(const std::vector<const Tensor<float>*>& images) {
  const Tensor<float>& first = *images.front();
  const int64_t B = static_cast<int64_t>(images.size());
  Tensor<float> out({B, first.dim(0), first.dim(1), first.dim(2)});
  const int64_t stride = first.numel();
  for (int64_t b = 0; b < B; ++b) {
    std::copy(images[static_cast<size_t>(b)]->data.begin(),
              images[static_cast<size_t>(b)]->data.end(),
              out.data.begin() + b * stride);
  }
  return out;
}

struct OcclLoss {
  Tape<float>::Var loss;
  int64_t correct = 0;
};

OcclLoss occlusion_loss(Tape<float>& tape, ParameterSet<float>& ps,
                        const LeasedParams<float>& lp,
                        const std::vector<const Tensor<float>*>& images,
                        const std::vector<int64_t>& labels, double lambda, BnMode mode) {
  const int64_t B = static_cast<int64_t>(images.size());
  auto logits = occlusion_forward(tape, tape.input(stack_images(images)), ps, lp, mode);
  auto lsm = tape.log_softmax_rows(logits);
  auto nll = tape.input(Tensor<float>::scalar(0.f));
  OcclLoss out{};
  const Tensor<float>& lv = tape.value(logits);
  for (int64_t b = 0; b < B; ++b) {
    nll = tape.add(nll, tape.scale(tape.pick(lsm, b * lv.dim(1) + labels[static_cast<size_t>(b)]),
                                   -1.f));
    int64_t arg = 0;
    for (int64_t k = 1; k < lv.dim(1); ++k) {
      if (lv.at(b, k) > lv.at(b, arg)) arg = k;
    }
    if (arg == labels[static_cast<size_t>(b)]) ++out.correct;
  }
  out.loss = tape.add(tape.scale(nll, 1.f / static_cast<float>(B)),
                      l2_term(tape, lp, ps, ParamGroup::kRepr, static_cast<float>(lambda)));
  return out;
}

}  // namespace

OcclusionTrainResult train_occlusion_classifier(const Dataset& train, const Dataset& dev,
                                                const OcclusionTrainConfig& cfg) {
  if (cfg.epochs < 1 || cfg.lr <= 0 || cfg.warmup_epochs >= cfg.epochs) {
    throw ConfigError("occlusion classifier: bad training config");
  }
  Rng init_rng(Rng::mix({cfg.seed, 0x0CC1}));
  OcclusionTrainResult res{init_occlusion_params(train.channels, train.num_classes, init_rng)};
  const int64_t N = train.count();
  const int64_t bs = std::min<int64_t>(cfg.batch_size, N);
  const int64_t steps_per_epoch = (N + bs - 1) / bs;
  OptimizerState<float> opt;
  int64_t global_step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::mix({cfg.seed, 0x0CC2, static_cast<uint64_t>(epoch)}));
    const auto order = shuffled_indices(N, shuffle_rng);
    double ep_loss = 0, ep_acc = 0;
    double first_lr = 0;
    for (int64_t start = 0; start < N; start += bs) {
      const int64_t B = std::min(bs, N - start);
      std::vector<const Tensor<float>*> images;
      std::vector<int64_t> labels;
      for (int64_t k = 0; k < B; ++k) {
        const int64_t idx = order[static_cast<size_t>(start + k)];
        images.push_back(&train.images[static_cast<size_t>(idx)]);
        labels.push_back(train.labels[static_cast<size_t>(idx)]);
      }
      const double lr = cosine_lr(global_step, cfg.epochs * steps_per_epoch,
                                  cfg.warmup_epochs * steps_per_epoch, cfg.lr);
      if (start == 0) first_lr = lr;
      Tape<float> tape;
      auto lp = lease_params(tape, res.params, true, true);
      auto ol = occlusion_loss(tape, res.params, lp, images, labels, cfg.lambda, BnMode::kTrain);
      const double loss_value = static_cast<double>(tape.value(ol.loss)[0]);
      if (!std::isfinite(loss_value)) {
        throw NumericError("occlusion classifier: non-finite loss");
      }
      tape.backward(ol.loss);
      std::map<std::string, Tensor<float>> grads;
      for (const auto& name : res.params.trainable_names(ParamGroup::kRepr)) {
        grads.emplace(name, tape.grad(lp.at(name)));
      }
      sgd_nesterov_step(res.params, grads, static_cast<float>(lr),
                        static_cast<float>(cfg.momentum), opt);
      ep_loss += loss_value * static_cast<double>(B);
      ep_acc += static_cast<double>(ol.correct);
      ++global_step;
    }
    res.rows.push_back(MetricsRow{"occl", epoch, "train", ep_loss / static_cast<double>(N),
                                  ep_acc / static_cast<double>(N), first_lr});
    // dev accuracy
    int64_t correct = 0;
    for (int64_t start = 0; start < dev.count(); start += bs) {
      const int64_t B = std::min(bs, dev.count() - start);
      std::vector<const Tensor<float>*> images;
      for (int64_t k = 0; k < B; ++k) {
        images.push_back(&dev.images[static_cast<size_t>(start + k)]);
      }
      const auto preds = occlusion_predict(res.params, images);
      for (int64_t k = 0; k < B; ++k) {
        if (preds[static_cast<size_t>(k)] == dev.labels[static_cast<size_t>(start + k)]) {
          ++correct;
        }
      }
    }
    res.dev_accuracy = static_cast<double>(correct) / static_cast<double>(dev.count());
    res.rows.push_back(MetricsRow{"occl", epoch, "dev", 0.0, res.dev_accuracy, first_lr});
  }
  return res;
}

std::vector<int64_t> occlusion_predict(ParameterSet<float>& params,
                                       const std::vector<const Tensor<float>*>& images) {
  std::vector<int64_t> out;
  const int64_t N = static_cast<int64_t>(images.size());
  const int64_t bs = 128;
  for (int64_t start = 0; start < N; start += bs) {
    const int64_t B = std::min(bs, N - start);
    std::vector<const Tensor<float>*> chunk(images.begin() + start, images.begin() + start + B);
    Tape<float> tape;
    auto lp = lease_params(tape, params, false, false);
    auto logits = occlusion_forward(tape, tape.input(stack_images(chunk)), params, lp,
                                    BnMode::kInfer);
    const Tensor<float>& lv = tape.value(logits);
    for (int64_t b = 0; b < B; ++b) {
      int64_t arg = 0;
      for (int64_t k = 1; k < lv.dim(1); ++k) {
        if (lv.at(b, k) > lv.at(b, arg)) arg = k;
      }
      out.push_back(arg);
    }
  }
  return out;
}

// ---- policy evaluation ----

EvalReport eval_policy(PolicyKind kind, ParameterSet<float>& params, const ModelConfig& cfg,
                       const Dataset& ds, const std::vector<int64_t>& k_range, uint64_t seed,
                       ParameterSet<float>* occl_params) {
  const int64_t P = cfg.num_locations();
  const int64_t gh = cfg.grid_h(), gw = cfg.grid_w();
  if (k_range.empty()) throw ConfigError("eval_policy: empty K range");
  int64_t kmax = 0;
  for (int64_t k : k_range) {
    if (k < 1 || k > P) {
      throw ConfigError("eval_policy: K = " + std::to_string(k) + " out of range [1, " +
                        std::to_string(P) + "]");
    }
    kmax = std::max(kmax, k);
  }
  const int64_t N = ds.count();
  std::vector<Tensor<float>> grids(static_cast<size_t>(N));
  std::vector<std::vector<GridLoc>> seqs(static_cast<size_t>(N));

  const int64_t bs = 64;
  for (int64_t start = 0; start < N; start += bs) {
    const int64_t B = std::min(bs, N - start);
    std::vector<const Tensor<float>*> images;
    for (int64_t b = 0; b < B; ++b) {
      images.push_back(&ds.images[static_cast<size_t>(start + b)]);
    }
    Tape<float> tape;
    auto lp = lease_params(tape, params, false, false);
    auto patches = tape.input(extract_patch_batch(images, cfg.rf, cfg.patch_stride));
    auto fv = build_forward(tape, patches, B, params, lp, cfg, BnMode::kInfer, BnMode::kInfer);
    for (int64_t b = 0; b < B; ++b) {
      auto logits_i = tape.slice_rows(fv.logits, b * P, P);
      grids[static_cast<size_t>(start + b)] = tape.value(logits_i);
      if (kind == PolicyKind::kSaccader) {
        auto mixed_i = tape.slice_rows(fv.mixed, b * P, P);
        auto uv = unroll_on_tape<float>(tape, mixed_i, logits_i, fv.query, gh, gw, kmax,
                                        [&](const Tensor<float>& r_tilde, int64_t) {
                                          GridLoc l =
                                              select_location(r_tilde, SelectMode::kArgmax);
                                          return l.i * gw + l.j;
                                        });
        seqs[static_cast<size_t>(start + b)] = uv.trace.locations;
      }
    }
  }
  for (int64_t i = 0; i < N; ++i) {
    switch (kind) {
      case PolicyKind::kSaccader:
        break;
      case PolicyKind::kRandom: {
        Rng rng(Rng::mix({seed, 0xEA7, static_cast<uint64_t>(i)}));
        seqs[static_cast<size_t>(i)] = policy_random(gh, gw, kmax, rng);
        break;
      }
      case PolicyKind::kOrderedLogits:
        seqs[static_cast<size_t>(i)] = ordered_from_rows(grids[static_cast<size_t>(i)], gw, kmax);
        break;
      case PolicyKind::kSobelMean:
        seqs[static_cast<size_t>(i)] = policy_sobel(ds.images[static_cast<size_t>(i)], cfg.rf,
                                                    cfg.patch_stride, kmax, SobelStat::kMean);
        break;
      case PolicyKind::kSobelVariance:
        seqs[static_cast<size_t>(i)] =
            policy_sobel(ds.images[static_cast<size_t>(i)], cfg.rf, cfg.patch_stride, kmax,
                         SobelStat::kVariance);
        break;
    }
  }

  EvalReport report;
  report.seed = seed;
  for (int64_t k : k_range) {
    EvalRow row;
    row.policy = policy_name(kind);
    row.k = k;
    int64_t top1 = 0, top5 = 0;
    double cov = 0;
    std::vector<Tensor<float>> occluded;
    for (int64_t i = 0; i < N; ++i) {
      const std::vector<GridLoc> locs(seqs[static_cast<size_t>(i)].begin(),
                                      seqs[static_cast<size_t>(i)].begin() + k);
      const auto pred = classify_rows_with_locations(grids[static_cast<size_t>(i)], gw, locs);
      const int64_t label = ds.labels[static_cast<size_t>(i)];
      if (pred.top1 == label) ++top1;
      if (pred.in_top5(label)) ++top5;
      cov += coverage(locs, cfg.rf, cfg.patch_stride, ds.image_h, ds.image_w);
      if (occl_params) {
        occluded.push_back(
            occlude(ds.images[static_cast<size_t>(i)], locs, cfg.rf, cfg.patch_stride));
      }
    }
    row.top1 = static_cast<double>(top1) / static_cast<double>(N);
    row.top5 = static_cast<double>(top5) / static_cast<double>(N);
    row.coverage = cov / static_cast<double>(N);
    if (occl_params) {
      std::vector<const Tensor<float>*> ptrs;
      ptrs.reserve(occluded.size());
      for (const auto& img : occluded) ptrs.push_back(&img);
      const auto preds = occlusion_predict(*occl_params, ptrs);
      int64_t occ_top1 = 0;
      for (int64_t i = 0; i < N; ++i) {
        if (preds[static_cast<size_t>(i)] == ds.labels[static_cast<size_t>(i)]) ++occ_top1;
      }
      row.occluded_top1 = static_cast<double>(occ_top1) / static_cast<double>(N);
    }
    report.rows.push_back(row);
  }
  return report;
}

// ---- PGD ----

ForwardLogitsFn saccader_attack_forward(ParameterSet<float>& params, const ModelConfig& cfg,
                                        int64_t glimpses) {
  return [&params, cfg, glimpses](Tape<float>& tape, Tape<float>::Var img) {
    auto lp = lease_params(tape, params, false, false);
    auto patches = tape.extract_patches(img, cfg.rf, cfg.patch_stride);
    auto fv = build_forward(tape, patches, 1, params, lp, cfg, BnMode::kInfer, BnMode::kInfer);
    auto uv = unroll_on_tape<float>(tape, fv.mixed, fv.logits, fv.query, cfg.grid_h(),
                                    cfg.grid_w(), glimpses,
                                    [&](const Tensor<float>& r_tilde, int64_t) {
                                      GridLoc l = select_location(r_tilde, SelectMode::kArgmax);
                                      return l.i * cfg.grid_w() + l.j;
                                    });
    return uv.averaged_logits;
  };
}

namespace {

int64_t logits_argmax(const Tensor<float>& v) {
  int64_t arg = 0;
  for (int64_t k = 1; k < v.numel(); ++k) {
    if (v[k] > v[arg]) arg = k;
  }
  return arg;
}

}  // namespace

PgdResult pgd_attack(const ForwardLogitsFn& forward, const Tensor<float>& image, int64_t label,
                     int64_t num_classes, float eps, float step, int64_t max_iters) {
  if (label < 0 || label >= num_classes) {
    throw std::invalid_argument("pgd_attack: label " + std::to_string(label) +
                                " out of range [0, " + std::to_string(num_classes) + ")");
  }
  Tensor<float> clean = image;
  for (auto& v : clean.data) v = std::clamp(v, 0.0f, 1.0f);
  PgdResult res;
  res.adv = clean;
  const int64_t n = clean.numel();

  auto project = [&](Tensor<float>& adv) {
    for (int64_t i = 0; i < n; ++i) {
      const float x0 = clean[i];
      float v = std::clamp(adv[i], std::max(0.0f, x0 - eps), std::min(1.0f, x0 + eps));
      // pull back by ulps so the infinity-ball constraint holds exactly in
      // float arithmetic despite rounding in x0 +/- eps
      while (v - x0 > eps) v = std::nextafterf(v, x0);
      while (x0 - v > eps) v = std::nextafterf(v, x0);
      adv[i] = v;
    }
  };

  for (int64_t it = 0; it < max_iters; ++it) {
    Tape<float> tape;
    auto vx = tape.input(res.adv, /*requires_grad=*/true);
    auto logits = forward(tape, vx);
    if (tape.value(logits).numel() != num_classes) {
      throw std::invalid_argument("pgd_attack: forward produced wrong class count");
    }
    if (logits_argmax(tape.value(logits)) != label) {
      res.misclassified = true;
      return res;
    }
    auto loss = tape.scale(tape.pick(tape.log_softmax_vec(logits), label), -1.0f);
    tape.backward(loss);
    const Tensor<float>& g = tape.grad(vx);
    for (int64_t i = 0; i < n; ++i) {
      const float gi = g[i];
      if (gi > 0) {
        res.adv[i] += step;
      } else if (gi < 0) {
        res.adv[i] -= step;
      }
    }
    project(res.adv);
    res.iters = it + 1;
  }
  if (max_iters > 0) {
    Tape<float> tape;
    auto logits = forward(tape, tape.input(res.adv));
    res.misclassified = logits_argmax(tape.value(logits)) != label;
  }
  return res;
}

}  // namespace saccader
