#pragma once

#include <functional>
#include <vector>

#include "saccader/repr_net.hpp"

namespace saccader {

// Masking constant applied to visited locations inside the cell. With 32-bit
// floats exp(-1e5) underflows to exactly 0, which is the intended behavior.
inline constexpr double kVisitedMask = 1e5;

struct GridLoc {
  int64_t i = 0;
  int64_t j = 0;
  bool operator==(const GridLoc&) const = default;
};

// Binary memory of visited locations. Entries are exactly 0 or 1 and a 1
// never reverts within an unroll.
template <typename T>
struct CellState {
  Tensor<T> c;  // [gh, gw]
  int64_t visited = 0;

  static CellState zeros(int64_t gh, int64_t gw) { return CellState{Tensor<T>({gh, gw}), 0}; }
  int64_t gh() const { return c.dim(0); }
  int64_t gw() const { return c.dim(1); }
};

template <typename T>
CellState<T> update_state(const CellState<T>& state, GridLoc loc) {
  if (loc.i < 0 || loc.i >= state.gh() || loc.j < 0 || loc.j >= state.gw()) {
    throw std::invalid_argument("update_state: location out of grid");
  }
  if (state.c.at(loc.i, loc.j) != T(0)) {
    throw std::invalid_argument("update_state: location (" + std::to_string(loc.i) + "," +
                                std::to_string(loc.j) + ") already visited");
  }
  CellState<T> next = state;
  next.c.at(loc.i, loc.j) = T(1);
  next.visited += 1;
  return next;
}

// Policy over glimpse locations with the intermediates retained for tests.
template <typename T>
struct PolicyDistribution {
  Tensor<T> r_tilde;  // [gh, gw], sums to 1, zero mass on visited locations
  Tensor<T> g;        // [gh, gw] pre-softmax location scores
  Tensor<T> g_tilde;  // [gh, gw] spatial softmax of g
  Tensor<T> h_vec;    // [d] feature-channel scores
  Tensor<T> h_tilde;  // [d] channel softmax
};

// Tape handles for one cell step.
template <typename T>
struct PolicyVars {
  typename Tape<T>::Var log_r_tilde;  // [P]
  typename Tape<T>::Var r_tilde;      // [P]
  typename Tape<T>::Var g;            // [P]
  typename Tape<T>::Var g_tilde;      // [P]
  typename Tape<T>::Var h_vec;        // [d]
  typename Tape<T>::Var h_tilde;      // [d]
};

// One Saccader cell step over mixed features F [P, d] with query a [d]:
//   G   = F.a / sqrt(d) - 1e5*C        (spatial scores, visited masked)
//   G~  = spatial softmax(G)
//   h   = sum_ij F[ij,:] * G~[ij]      (soft feature readout)
//   h~  = channel softmax(h)
//   R   = F.h~ - 1e5*C
//   R~  = spatial softmax(R)           (the policy)
template <typename T>
PolicyVars<T> cell_step_var(Tape<T>& tape, typename Tape<T>::Var mixed,
                            typename Tape<T>::Var query, const CellState<T>& state) {
  const Tensor<T>& f = tape.value(mixed);
  const int64_t P = f.dim(0), d = f.dim(1);
  if (state.gh() * state.gw() != P) {
    throw std::invalid_argument("cell_step: state grid does not match features");
  }
  if (state.visited >= P) {
    throw std::invalid_argument("cell_step: all " + std::to_string(P) + " locations visited");
  }
  Tensor<T> mask({P});
  for (int64_t p = 0; p < P; ++p) mask[p] = static_cast<T>(kVisitedMask) * state.c[p];
  auto mask_var = tape.input(std::move(mask));

  PolicyVars<T> pv{};
  pv.g = tape.sub(tape.scale(tape.matvec(mixed, query), T(1) / std::sqrt(static_cast<T>(d))),
                  mask_var);
  pv.g_tilde = tape.softmax_vec(pv.g);
  pv.h_vec = tape.vecmat(pv.g_tilde, mixed);
  pv.h_tilde = tape.softmax_vec(pv.h_vec);
  auto r = tape.sub(tape.matvec(mixed, pv.h_tilde), mask_var);
  pv.log_r_tilde = tape.log_softmax_vec(r);
  pv.r_tilde = tape.exp(pv.log_r_tilde);
  return pv;
}

// Value-level cell step on F [gh, gw, d].
template <typename T>
PolicyDistribution<T> cell_step(const Tensor<T>& mixed_features, const CellState<T>& state,
                                const Tensor<T>& query) {
  const int64_t gh = mixed_features.dim(0), gw = mixed_features.dim(1), d = mixed_features.dim(2);
  Tape<T> tape;
  Tensor<T> flat = mixed_features;
  flat.shape = {gh * gw, d};
  auto pv = cell_step_var(tape, tape.input(std::move(flat)), tape.input(query), state);
  PolicyDistribution<T> out;
  out.r_tilde = tape.value(pv.r_tilde);
  out.r_tilde.shape = {gh, gw};
  out.g = tape.value(pv.g);
  out.g.shape = {gh, gw};
  out.g_tilde = tape.value(pv.g_tilde);
  out.g_tilde.shape = {gh, gw};
  out.h_vec = tape.value(pv.h_vec);
  out.h_tilde = tape.value(pv.h_tilde);
  return out;
}

enum class SelectMode { kArgmax, kSample };

// Argmax breaks exact ties toward the lowest row-major index. Sampling draws
// from the categorical given by r_tilde using the provided RNG.
template <typename T>
GridLoc select_location(const Tensor<T>& r_tilde, SelectMode mode, Rng* rng = nullptr) {
  const int64_t gh = r_tilde.dim(0), gw = r_tilde.dim(1);
  const int64_t P = gh * gw;
  int64_t flat = 0;
  if (mode == SelectMode::kArgmax) {
    for (int64_t p = 1; p < P; ++p) {
      if (r_tilde[p] > r_tilde[flat]) flat = p;
    }
  } else {
    if (!rng) throw std::invalid_argument("select_location: sampling requires an RNG");
    const double u = rng->uniform();
    double acc = 0;
    int64_t last_positive = -1;
    flat = -1;
    for (int64_t p = 0; p < P; ++p) {
      const double prob = static_cast<double>(r_tilde[p]);
      if (prob > 0) last_positive = p;
      acc += prob;
      if (u < acc) {
        flat = p;
        break;
      }
    }
    if (flat < 0) flat = last_positive;  // u landed past the (rounded) total mass
    if (flat < 0) throw std::invalid_argument("select_location: distribution has no mass");
  }
  return GridLoc{flat / gw, flat % gw};
}

// ---- attention network ("where" pathway) ----

// Four conv layers alternating 1x1 and 3x3 dilation-2, each BN+ReLU, same
// padding throughout: [B, gh, gw, d_repr] -> [B, gh, gw, d_where].
template <typename T>
typename Tape<T>::Var where_net_var(Tape<T>& tape, typename Tape<T>::Var repr_grid,
                                    ParameterSet<T>& ps, const LeasedParams<T>& lp, BnMode mode) {
  auto h = detail::conv_bn_relu(tape, repr_grid, ps, lp, "loc/where1", 1, 1, Pad::kSame, mode);
  h = detail::conv_bn_relu(tape, h, ps, lp, "loc/where2", 1, 2, Pad::kSame, mode);
  h = detail::conv_bn_relu(tape, h, ps, lp, "loc/where3", 1, 1, Pad::kSame, mode);
  return detail::conv_bn_relu(tape, h, ps, lp, "loc/where4", 1, 2, Pad::kSame, mode);
}

// Concatenate what and where features per location and mix with a linear
// 1x1 convolution: [N, d_what] + [N, d_where] -> [N, d_mix].
template <typename T>
typename Tape<T>::Var mix_features_var(Tape<T>& tape, typename Tape<T>::Var what,
                                       typename Tape<T>::Var where,
                                       const LeasedParams<T>& lp) {
  if (tape.value(what).dim(0) != tape.value(where).dim(0)) {
    throw std::invalid_argument("mix_features: grid mismatch, what " +
                                shape_str(tape.value(what).shape) + " vs where " +
                                shape_str(tape.value(where).shape));
  }
  return linear(tape, tape.concat_cols(what, where), lp.at("loc/mix/w"), lp.at("loc/mix/b"));
}

template <typename T>
Tensor<T> where_net(const Tensor<T>& repr_grid, ParameterSet<T>& ps) {
  const int64_t gh = repr_grid.dim(0), gw = repr_grid.dim(1), d = repr_grid.dim(2);
  Tape<T> tape;
  auto lp = lease_params(tape, ps, false, false);
  Tensor<T> batched = repr_grid;
  batched.shape = {1, gh, gw, d};
  Tensor<T> out = tape.value(
      where_net_var(tape, tape.input(std::move(batched)), ps, lp, BnMode::kInfer));
  out.shape = {gh, gw, out.dim(3)};
  return out;
}

template <typename T>
Tensor<T> mix_features(const Tensor<T>& what_grid, const Tensor<T>& where_grid,
                       ParameterSet<T>& ps) {
  if (what_grid.dim(0) != where_grid.dim(0) || what_grid.dim(1) != where_grid.dim(1)) {
    throw std::invalid_argument("mix_features: grid mismatch, what " +
                                shape_str(what_grid.shape) + " vs where " +
                                shape_str(where_grid.shape));
  }
  const int64_t gh = what_grid.dim(0), gw = what_grid.dim(1);
  Tape<T> tape;
  auto lp = lease_params(tape, ps, false, false);
  Tensor<T> wf = what_grid;
  wf.shape = {gh * gw, what_grid.dim(2)};
  Tensor<T> wr = where_grid;
  wr.shape = {gh * gw, where_grid.dim(2)};
  Tensor<T> out =
      tape.value(mix_features_var(tape, tape.input(std::move(wf)), tape.input(std::move(wr)), lp));
  out.shape = {gh, gw, out.dim(1)};
  return out;
}

// ---- full forward pass ----

// One batch of images pushed through the representation and location
// pathways on a shared tape. Rows are image-major: image b occupies rows
// [b*P, (b+1)*P). When detach_policy_from_repr is set, the mixed features
// are computed from gradient-detached copies of the representation-side
// activations, so policy log-probabilities only reach location parameters.
template <typename T>
struct ForwardVars {
  int64_t batch = 0;
  int64_t locations = 0;  // P
  typename Tape<T>::Var repr;    // [B*P, d_repr]
  typename Tape<T>::Var what;    // [B*P, d_what]
  typename Tape<T>::Var logits;  // [B*P, num_classes]
  typename Tape<T>::Var mixed;   // [B*P, d_mix]
  typename Tape<T>::Var query;   // [d_mix]
};

template <typename T>
ForwardVars<T> build_forward(Tape<T>& tape, typename Tape<T>::Var patches, int64_t batch,
                             ParameterSet<T>& ps, const LeasedParams<T>& lp,
                             const ModelConfig& cfg, BnMode repr_mode, BnMode loc_mode,
                             bool detach_policy_from_repr = false) {
  ForwardVars<T> fv;
  fv.batch = batch;
  fv.locations = cfg.num_locations();
  fv.repr = encode_patches_var(tape, patches, ps, lp, repr_mode);
  fv.what = what_head_var(tape, fv.repr, lp);
  fv.logits = logits_head_var(tape, fv.what, lp);

  auto repr_for_policy = fv.repr;
  auto what_for_policy = fv.what;
  if (detach_policy_from_repr) {
    repr_for_policy = tape.input(tape.value(fv.repr));
    what_for_policy = tape.input(tape.value(fv.what));
  }
  auto repr_grid =
      tape.reshape(repr_for_policy, {batch, cfg.grid_h(), cfg.grid_w(), cfg.d_repr});
  auto where_grid = where_net_var(tape, repr_grid, ps, lp, loc_mode);
  auto where_flat = tape.reshape(where_grid, {batch * fv.locations, cfg.d_where});
  fv.mixed = mix_features_var(tape, what_for_policy, where_flat, lp);
  fv.query = lp.at("loc/cell/a");
  return fv;
}

// ---- unrolling ----

// Ordered glimpse record for one image: locations, the logits extracted at
// each step, their running average, and the policy log-probabilities of the
// chosen locations.
template <typename T>
struct GlimpseTrace {
  std::vector<GridLoc> locations;
  std::vector<Tensor<T>> per_step_logits;  // each [num_classes]
  Tensor<T> averaged_logits;               // [num_classes]
  std::vector<T> per_step_log_probs;
  int reward = -1;  // 0/1, -1 when absent
};

// Tape handles produced by an unroll, for building training objectives.
template <typename T>
struct UnrollVars {
  std::vector<int64_t> flat_locs;
  std::vector<typename Tape<T>::Var> step_log_probs;  // scalars
  typename Tape<T>::Var log_prob_sum;                 // scalar
  typename Tape<T>::Var averaged_logits;              // [num_classes]
  GlimpseTrace<T> trace;
};

// Runs `steps` cell iterations over the per-image features mixed_i [P, d]
// and logits_i [P, C]. `select` receives the current policy values and the
// step index and returns the flat location to commit (argmax, sampling, and
// teacher forcing are all instances).
template <typename T>
UnrollVars<T> unroll_on_tape(
    Tape<T>& tape, typename Tape<T>::Var mixed_i, typename Tape<T>::Var logits_i,
    typename Tape<T>::Var query, int64_t gh, int64_t gw, int64_t steps,
    const std::function<int64_t(const Tensor<T>& r_tilde, int64_t step)>& select) {
  const int64_t P = gh * gw;
  if (steps > P) {
    throw std::invalid_argument("unroll: T = " + std::to_string(steps) + " exceeds " +
                                std::to_string(P) + " grid locations");
  }
  UnrollVars<T> uv;
  CellState<T> state = CellState<T>::zeros(gh, gw);
  typename Tape<T>::Var total = tape.input(Tensor<T>::scalar(T(0)));
  for (int64_t t = 0; t < steps; ++t) {
    auto pv = cell_step_var(tape, mixed_i, query, state);
    Tensor<T> r_tilde = tape.value(pv.r_tilde);
    r_tilde.shape = {gh, gw};
    const int64_t flat = select(r_tilde, t);
    const GridLoc loc{flat / gw, flat % gw};
    auto lp_t = tape.pick(pv.log_r_tilde, flat);
    total = tape.add(total, lp_t);
    uv.flat_locs.push_back(flat);
    uv.step_log_probs.push_back(lp_t);
    uv.trace.locations.push_back(loc);
    uv.trace.per_step_log_probs.push_back(tape.value(lp_t)[0]);
    state = update_state(state, loc);
  }
  uv.log_prob_sum = total;
  auto gathered = tape.gather_rows(logits_i, uv.flat_locs);
  uv.averaged_logits = tape.mean_axis0(gathered);
  const Tensor<T>& rows = tape.value(gathered);
  const int64_t c = rows.dim(1);
  for (int64_t t = 0; t < steps; ++t) {
    Tensor<T> row({c});
    for (int64_t j = 0; j < c; ++j) row[j] = rows.at(t, j);
    uv.trace.per_step_logits.push_back(std::move(row));
  }
  uv.trace.averaged_logits = tape.value(uv.averaged_logits);
  return uv;
}

// Full-model unroll for one image (the test-time path). Argmax mode follows
// the policy greedily; sample mode draws each location from the policy.
template <typename T>
GlimpseTrace<T> unroll(const Tensor<T>& image, int64_t steps, SelectMode mode,
                       ParameterSet<T>& ps, const ModelConfig& cfg, Rng* rng = nullptr,
                       BnMode bn_mode = BnMode::kInfer) {
  Tape<T> tape;
  auto lp = lease_params(tape, ps, false, false);
  auto patches = tape.input(extract_patch_batch<T>({&image}, cfg.rf, cfg.patch_stride));
  auto fv = build_forward(tape, patches, 1, ps, lp, cfg, bn_mode, bn_mode);
  auto uv = unroll_on_tape<T>(
      tape, fv.mixed, fv.logits, fv.query, cfg.grid_h(), cfg.grid_w(), steps,
      [&](const Tensor<T>& r_tilde, int64_t) {
        GridLoc loc = select_location(r_tilde, mode, rng);
        return loc.i * cfg.grid_w() + loc.j;
      });
  return uv.trace;
}

}  // namespace saccader
