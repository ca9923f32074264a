#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "saccader/attention.hpp"

using namespace saccader;

namespace {

ModelConfig tiny_config(int64_t image_h = 31, int64_t image_w = 31) {
  ModelConfig cfg;
  cfg.image_h = image_h;
  cfg.image_w = image_w;
  cfg.enc_c1 = 3;
  cfg.enc_c2 = 4;
  cfg.d_repr = 6;
  cfg.d_what = 5;
  cfg.where_hidden = 5;
  cfg.d_where = 4;
  cfg.d_mix = 4;
  cfg.num_classes = 3;
  return cfg;
}

// independent-feature where-net params with fixed running stats so infer
// mode is strictly local per location
template <typename T>
void freeze_bn_stats(ParameterSet<T>& ps, Rng& rng) {
  for (auto& e : ps.entries()) {
    if (e.trainable) continue;
    if (e.name.find("running_mean") != std::string::npos) {
      for (auto& v : e.value.data) v = static_cast<T>(rng.uniform(-0.2, 0.2));
    } else {
      for (auto& v : e.value.data) v = static_cast<T>(rng.uniform(0.5, 1.5));
    }
  }
}

}  // namespace

TEST_CASE("cell_step masking, symmetry, and the 64-bit equation oracle") {
  // all but one location visited: remaining location takes all the mass
  {
    Rng rng(1);
    auto f = Tensor<float>::randn({2, 2, 3}, rng);
    CellState<float> state = CellState<float>::zeros(2, 2);
    state = update_state(state, {0, 0});
    state = update_state(state, {0, 1});
    state = update_state(state, {1, 1});
    auto a = Tensor<float>::randn({3}, rng);
    auto pd = cell_step(f, state, a);
    CHECK(pd.r_tilde.at(1, 0) >= 1.0f - 1e-6f);
    CHECK(pd.r_tilde.at(0, 0) == 0.0f);  // exp(-1e5) underflows to exactly 0
    CHECK(pd.r_tilde.at(0, 1) == 0.0f);
    CHECK(pd.r_tilde.at(1, 1) == 0.0f);
  }
  // identical features everywhere, empty state: uniform policy
  {
    Tensor<float> f({3, 3, 4});
    for (int64_t p = 0; p < 9; ++p)
      for (int64_t q = 0; q < 4; ++q) f.data[static_cast<size_t>(p * 4 + q)] = 0.7f * q - 0.2f;
    Rng rng(2);
    auto a = Tensor<float>::randn({4}, rng);
    auto pd = cell_step(f, CellState<float>::zeros(3, 3), a);
    for (int64_t p = 0; p < 9; ++p) {
      CHECK(std::abs(pd.r_tilde[p] - 1.0f / 9.0f) <= 1e-6f);
    }
  }
  // hand-specified 2x2, d=3 instance against the step-by-step oracle
  {
    Tensor<double> f({4, 3}, {0.5, -1.0, 2.0, 1.5, 0.25, -0.75, -2.0, 1.0, 0.0, 0.3, -0.6, 0.9});
    std::vector<double> a = {1.2, -0.4, 0.8};
    std::vector<double> visited = {0, 1, 0, 0};
    const auto want = oracles::cell_oracle(f, a, visited);

    Tensor<double> f_grid = f;
    f_grid.shape = {2, 2, 3};
    CellState<double> state = CellState<double>::zeros(2, 2);
    state = update_state(state, {0, 1});
    auto pd = cell_step(f_grid, state, Tensor<double>({3}, a));
    for (int64_t p = 0; p < 4; ++p) {
      CHECK(std::abs(pd.g[p] - want.g[static_cast<size_t>(p)]) <= 1e-6);
      CHECK(std::abs(pd.g_tilde[p] - want.g_tilde[static_cast<size_t>(p)]) <= 1e-6);
      CHECK(std::abs(pd.r_tilde[p] - want.r_tilde[static_cast<size_t>(p)]) <= 1e-6);
    }
    for (int64_t q = 0; q < 3; ++q) {
      CHECK(std::abs(pd.h_vec[q] - want.h[static_cast<size_t>(q)]) <= 1e-6);
      CHECK(std::abs(pd.h_tilde[q] - want.h_tilde[static_cast<size_t>(q)]) <= 1e-6);
    }
  }
  // randomized grids 2x2..5x5 against the oracle
  {
    Rng rng(3);
    for (int rep = 0; rep < 25; ++rep) {
      const int64_t gh = 2 + rng.uniform_int(4);
      const int64_t gw = 2 + rng.uniform_int(4);
      const int64_t d = 2 + rng.uniform_int(5);
      auto f = Tensor<double>::randn({gh * gw, d}, rng);
      std::vector<double> a(static_cast<size_t>(d));
      for (auto& v : a) v = rng.normal();
      CellState<double> state = CellState<double>::zeros(gh, gw);
      std::vector<double> visited(static_cast<size_t>(gh * gw), 0.0);
      const int64_t n_visit = rng.uniform_int(gh * gw - 1);
      for (int64_t t = 0; t < n_visit; ++t) {
        int64_t p = rng.uniform_int(gh * gw);
        while (visited[static_cast<size_t>(p)] == 1.0) p = (p + 1) % (gh * gw);
        visited[static_cast<size_t>(p)] = 1.0;
        state = update_state(state, {p / gw, p % gw});
      }
      Tensor<double> f_grid = f;
      f_grid.shape = {gh, gw, d};
      auto pd = cell_step(f_grid, state, Tensor<double>({d}, a));
      const auto want = oracles::cell_oracle(f, a, visited);
      double sum = 0, visited_mass = 0;
      for (int64_t p = 0; p < gh * gw; ++p) {
        CHECK(std::abs(pd.r_tilde[p] - want.r_tilde[static_cast<size_t>(p)]) <= 1e-6);
        CHECK(pd.r_tilde[p] >= 0.0);
        sum += pd.r_tilde[p];
        if (visited[static_cast<size_t>(p)] == 1.0) visited_mass += pd.r_tilde[p];
      }
      CHECK(std::abs(sum - 1.0) <= 1e-5);
      CHECK(visited_mass <= 1e-20);
    }
  }
  // all locations visited is rejected
  {
    Rng rng(4);
    auto f = Tensor<float>::randn({2, 2, 3}, rng);
    CellState<float> state = CellState<float>::zeros(2, 2);
    for (int64_t p = 0; p < 4; ++p) state = update_state(state, {p / 2, p % 2});
    CHECK_THROWS_AS(cell_step(f, state, Tensor<float>::randn({3}, rng)), std::invalid_argument);
  }
}

TEST_CASE("softmax shift structure: adding a constant to G leaves G-tilde unchanged exactly") {
  // exactly-representable values so x + c has no rounding
  Tensor<float> g({6}, {0.25f, -1.5f, 2.f, 0.75f, -0.5f, 1.25f});
  Tensor<float> g_shift = g;
  for (auto& v : g_shift.data) v += 2.0f;
  Tape<float> t1, t2;
  auto s1 = t1.softmax_vec(t1.input(g));
  auto s2 = t2.softmax_vec(t2.input(g_shift));
  for (int64_t i = 0; i < 6; ++i) {
    CHECK(t1.value(s1)[i] == t2.value(s2)[i]);
  }
}

TEST_CASE("select_location: argmax tie-break, one-hot, sampling statistics") {
  Tensor<float> onehot({2, 2}, {0.f, 0.f, 1.f, 0.f});
  CHECK(select_location(onehot, SelectMode::kArgmax) == GridLoc{1, 0});
  Rng rng(5);
  CHECK(select_location(onehot, SelectMode::kSample, &rng) == GridLoc{1, 0});

  Tensor<float> tie({2, 2}, {0.25f, 0.5f, 0.5f, 0.25f});
  CHECK(select_location(tie, SelectMode::kArgmax) == GridLoc{0, 1});

  // 100k draws from a known 2x2 categorical: frequencies within 3 sigma
  Tensor<float> p({2, 2}, {0.1f, 0.2f, 0.3f, 0.4f});
  std::array<int64_t, 4> counts{};
  const int64_t n = 100000;
  Rng srng(6);
  for (int64_t i = 0; i < n; ++i) {
    const GridLoc l = select_location(p, SelectMode::kSample, &srng);
    counts[static_cast<size_t>(l.i * 2 + l.j)]++;
  }
  for (int64_t k = 0; k < 4; ++k) {
    const double prob = p[k];
    const double sigma = std::sqrt(prob * (1 - prob) * static_cast<double>(n));
    CHECK(std::abs(static_cast<double>(counts[static_cast<size_t>(k)]) -
                   prob * static_cast<double>(n)) <= 3 * sigma);
  }
}

TEST_CASE("update_state lifecycle") {
  CellState<float> s = CellState<float>::zeros(2, 3);
  s = update_state(s, {0, 0});
  CHECK(s.visited == 1);
  CHECK(s.c.at(0, 0) == 1.f);
  for (int64_t p = 1; p < 6; ++p) CHECK(s.c[p] == 0.f);
  CHECK_THROWS_AS(update_state(s, {0, 0}), std::invalid_argument);
  for (int64_t p = 1; p < 6; ++p) s = update_state(s, {p / 3, p % 3});
  CHECK(s.visited == 6);
  for (int64_t p = 0; p < 6; ++p) CHECK(s.c[p] == 1.f);
}

TEST_CASE("where_net: zeros, dilated receptive field, translation invariance") {
  Rng rng(7);
  auto cfg = tiny_config();
  auto ps = init_saccader_params<float>(cfg, rng);
  Rng frng(8);
  freeze_bn_stats(ps, frng);
  // zero input with zero running means and zero shifts maps to zero
  {
    auto ps0 = ps;
    for (auto& e : ps0.entries()) {
      if (e.name.find("running_mean") != std::string::npos) {
        for (auto& v : e.value.data) v = 0.f;
      }
    }
    Tensor<float> zero({5, 5, cfg.d_repr});
    auto out = where_net(zero, ps0);
    for (float v : out.data) CHECK(v == 0.f);
  }
  // impulse probing: two dilation-2 3x3 layers reach Chebyshev distance 4
  // and no farther
  {
    Tensor<float> base = Tensor<float>::rand_uniform({11, 11, cfg.d_repr}, rng, 0.f, 1.f);
    const auto out0 = where_net(base, ps);
    auto poked = base;
    for (int64_t c = 0; c < cfg.d_repr; ++c) poked.at(5, 5, c) += 1.5f;
    const auto out1 = where_net(poked, ps);
    bool touched_at_4 = false;
    for (int64_t i = 0; i < 11; ++i) {
      for (int64_t j = 0; j < 11; ++j) {
        const int64_t dist = std::max(std::abs(i - 5), std::abs(j - 5));
        bool differs = false;
        for (int64_t c = 0; c < cfg.d_where; ++c) {
          if (out0.at(i, j, c) != out1.at(i, j, c)) differs = true;
        }
        if (dist > 4) CHECK(!differs);
        if (dist == 4 && differs) touched_at_4 = true;
      }
    }
    CHECK(touched_at_4);
  }
  // constant input field: interior outputs equal exactly
  {
    Tensor<float> flat({11, 11, cfg.d_repr});
    for (int64_t i = 0; i < 11; ++i)
      for (int64_t j = 0; j < 11; ++j)
        for (int64_t c = 0; c < cfg.d_repr; ++c) flat.at(i, j, c) = 0.1f * c - 0.2f;
    const auto out = where_net(flat, ps);
    for (int64_t i = 4; i <= 6; ++i) {
      for (int64_t j = 4; j <= 6; ++j) {
        for (int64_t c = 0; c < cfg.d_where; ++c) {
          CHECK(out.at(i, j, c) == out.at(5, 5, c));
        }
      }
    }
  }
}

TEST_CASE("mix_features: bias case, projection case, concat oracle") {
  Rng rng(9);
  auto cfg = tiny_config();
  auto ps = init_saccader_params<float>(cfg, rng);
  // zero inputs -> constant bias
  {
    auto ps2 = ps;
    ps2.at("loc/mix/b") = Tensor<float>::randn({cfg.d_mix}, rng);
    Tensor<float> zw({3, 3, cfg.d_what}), zr({3, 3, cfg.d_where});
    auto f = mix_features(zw, zr, ps2);
    for (int64_t p = 0; p < 9; ++p)
      for (int64_t c = 0; c < cfg.d_mix; ++c)
        CHECK(f.data[static_cast<size_t>(p * cfg.d_mix + c)] == ps2.at("loc/mix/b")[c]);
  }
  // mixing weight [I; 0] returns the what features (d_mix == d_what here)
  {
    auto cfg2 = cfg;
    cfg2.d_mix = cfg.d_what;
    Rng rng2(10);
    auto ps2 = init_saccader_params<float>(cfg2, rng2);
    auto& w = ps2.at("loc/mix/w");
    for (auto& v : w.data) v = 0.f;
    for (int64_t i = 0; i < cfg2.d_what; ++i) w.at(i, i) = 1.f;
    for (auto& v : ps2.at("loc/mix/b").data) v = 0.f;
    auto what = Tensor<float>::randn({2, 2, cfg2.d_what}, rng2);
    auto where = Tensor<float>::randn({2, 2, cfg2.d_where}, rng2);
    auto f = mix_features(what, where, ps2);
    for (int64_t i = 0; i < f.numel(); ++i) CHECK(f.data[static_cast<size_t>(i)] == what.data[static_cast<size_t>(i)]);
  }
  // random case vs concat + matmul oracle
  {
    auto what = Tensor<float>::randn({2, 3, cfg.d_what}, rng);
    auto where = Tensor<float>::randn({2, 3, cfg.d_where}, rng);
    auto f = mix_features(what, where, ps);
    Tensor<float> cat({6, cfg.d_what + cfg.d_where});
    for (int64_t p = 0; p < 6; ++p) {
      for (int64_t c = 0; c < cfg.d_what; ++c)
        cat.at(p, c) = what.data[static_cast<size_t>(p * cfg.d_what + c)];
      for (int64_t c = 0; c < cfg.d_where; ++c)
        cat.at(p, cfg.d_what + c) = where.data[static_cast<size_t>(p * cfg.d_where + c)];
    }
    auto want = oracles::matmul_naive(cat, ps.at("loc/mix/w"));
    for (int64_t p = 0; p < 6; ++p)
      for (int64_t c = 0; c < cfg.d_mix; ++c)
        CHECK(std::abs(f.data[static_cast<size_t>(p * cfg.d_mix + c)] -
                       (want.at(p, c) + ps.at("loc/mix/b")[c])) <= 1e-6f);
  }
  // grid mismatch rejected
  {
    Tensor<float> a({2, 2, cfg.d_what}), b({3, 2, cfg.d_where});
    CHECK_THROWS_AS(mix_features(a, b, ps), std::invalid_argument);
  }
}

TEST_CASE("unroll: argmax start, distinctness, full cover, T bound") {
  Rng rng(11);
  auto cfg = tiny_config();
  auto ps = init_saccader_params<float>(cfg, rng);
  auto img = Tensor<float>::rand_uniform({31, 31, 1}, rng, 0.f, 1.f);

  // T=1 argmax equals the global argmax of the first policy map
  {
    auto trace = unroll(img, 1, SelectMode::kArgmax, ps, cfg);
    Tape<float> tape;
    auto lp = lease_params(tape, ps, false, false);
    auto patches = tape.input(extract_patch_batch<float>({&img}, cfg.rf, cfg.patch_stride));
    auto fv = build_forward(tape, patches, 1, ps, lp, cfg, BnMode::kInfer, BnMode::kInfer);
    auto pv = cell_step_var(tape, fv.mixed, fv.query,
                            CellState<float>::zeros(cfg.grid_h(), cfg.grid_w()));
    Tensor<float> rt = tape.value(pv.r_tilde);
    rt.shape = {cfg.grid_h(), cfg.grid_w()};
    CHECK(trace.locations[0] == select_location(rt, SelectMode::kArgmax));
  }
  // locations pairwise distinct for every T, both modes
  for (int64_t T : {2L, 5L, 9L}) {
    for (SelectMode mode : {SelectMode::kArgmax, SelectMode::kSample}) {
      Rng srng(100 + T);
      auto trace = unroll(img, T, mode, ps, cfg, &srng);
      std::set<std::pair<int64_t, int64_t>> seen;
      for (const auto& l : trace.locations) seen.insert({l.i, l.j});
      CHECK(static_cast<int64_t>(seen.size()) == T);
      CHECK(static_cast<int64_t>(trace.per_step_logits.size()) == T);
      CHECK(static_cast<int64_t>(trace.per_step_log_probs.size()) == T);
    }
  }
  // T = h*w: averaged logits equal the full-grid mean of the logits grid
  {
    const int64_t P = cfg.num_locations();
    auto trace = unroll(img, P, SelectMode::kArgmax, ps, cfg);
    const auto rows = logits_grid_for_image(img, ps, cfg);
    for (int64_t c = 0; c < cfg.num_classes; ++c) {
      double mean = 0;
      for (int64_t p = 0; p < P; ++p) mean += rows.at(p, c);
      mean /= static_cast<double>(P);
      CHECK(std::abs(trace.averaged_logits[c] - mean) <= 1e-5);
    }
  }
  // T beyond the grid is rejected
  CHECK_THROWS_AS(unroll(img, cfg.num_locations() + 1, SelectMode::kArgmax, ps, cfg),
                  std::invalid_argument);
}

TEST_CASE("policy log-prob gradients match finite differences with fixed locations") {
  Rng rng(13);
  const int64_t gh = 3, gw = 3, d = 4, T = 3;
  auto what = Tensor<double>::randn({gh * gw, 2}, rng);
  auto where_in = Tensor<double>::randn({gh * gw, 3}, rng);
  auto mix_w = Tensor<double>::randn({5, d}, rng, 0.5);
  auto mix_b = Tensor<double>::randn({d}, rng, 0.1);
  auto query = Tensor<double>::randn({d}, rng);
  const std::vector<int64_t> locs = {4, 1, 7};

  auto build = [&](Tape<double>& t, const std::vector<Tape<double>::Var>& v)
      -> Tape<double>::Var {
    auto mixed = linear(t, t.concat_cols(t.input(what), t.input(where_in)), v[0], v[1]);
    auto uv = unroll_on_tape<double>(
        t, mixed, t.input(Tensor<double>({gh * gw, 2})), v[2], gh, gw, T,
        [&](const Tensor<double>&, int64_t step) { return locs[static_cast<size_t>(step)]; });
    return uv.log_prob_sum;
  };
  CHECK(oracles::fd_check_leaves({mix_w, mix_b, query}, build) <= 1e-4);
}

TEST_CASE("no unroll over the test corpus repeats a location") {
  Rng rng(17);
  const int64_t gh = 4, gw = 3, d = 5;
  for (int rep = 0; rep < 200; ++rep) {
    Tape<float> tape;
    auto f = tape.input(Tensor<float>::randn({gh * gw, d}, rng, 2.f));
    auto query = tape.input(Tensor<float>::randn({d}, rng));
    auto logits = tape.input(Tensor<float>({gh * gw, 2}));
    Rng srng(900 + rep);
    auto uv = unroll_on_tape<float>(tape, f, logits, query, gh, gw, gh * gw,
                                    [&](const Tensor<float>& rt, int64_t) {
                                      GridLoc l = select_location(
                                          rt, rep % 2 ? SelectMode::kSample : SelectMode::kArgmax,
                                          &srng);
                                      return l.i * gw + l.j;
                                    });
    std::set<int64_t> seen(uv.flat_locs.begin(), uv.flat_locs.end());
    CHECK(static_cast<int64_t>(seen.size()) == gh * gw);
  }
}
