#pragma once

// Independent reference implementations used only by tests. Everything here
// is written as plainly as possible (naive loops, no shared code with the
// library's math paths) so it can serve as an oracle.

#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "saccader/tape.hpp"
#include "saccader/tensor.hpp"

namespace oracles {

using saccader::Shape;
using saccader::Tensor;

// C[m,n] = A[m,k] * B[k,n], triple loop.
template <typename T>
Tensor<T> matmul_naive(const Tensor<T>& a, const Tensor<T>& b) {
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      c.at(i, j) = acc;
    }
  return c;
}

// Direct-summation cross-correlation with an explicitly materialized
// zero-padded input. x [N,H,W,Ci], k [kh,kw,Ci,Co].
template <typename T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const Tensor<T>& k, int64_t stride, int64_t dilation,
                       bool same_padding) {
  const int64_t N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const int64_t kh = k.dim(0), kw = k.dim(1), Co = k.dim(3);
  const int64_t ekh = (kh - 1) * dilation + 1, ekw = (kw - 1) * dilation + 1;
  int64_t oh, ow, pt, pl;
  if (same_padding) {
    oh = (H + stride - 1) / stride;
    ow = (W + stride - 1) / stride;
    const int64_t ph = std::max<int64_t>(0, (oh - 1) * stride + ekh - H);
    const int64_t pw = std::max<int64_t>(0, (ow - 1) * stride + ekw - W);
    pt = ph / 2;
    pl = pw / 2;
  } else {
    oh = (H - ekh) / stride + 1;
    ow = (W - ekw) / stride + 1;
    pt = pl = 0;
  }
  // materialize padded input
  const int64_t PH = H + ekh, PW = W + ekw;
  Tensor<T> padded({N, PH, PW, Ci});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xw = 0; xw < W; ++xw)
        for (int64_t c = 0; c < Ci; ++c) padded.at(n, y + pt, xw + pl, c) = x.at(n, y, xw, c);
  Tensor<T> out({N, oh, ow, Co});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox)
        for (int64_t co = 0; co < Co; ++co) {
          T acc = 0;
          for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx)
              for (int64_t ci = 0; ci < Ci; ++ci)
                acc += padded.at(n, oy * stride + ky * dilation, ox * stride + kx * dilation, ci) *
                       k.at(ky, kx, ci, co);
          out.at(n, oy, ox, co) = acc;
        }
  return out;
}

// 64-bit log-softmax reference (plain formula, no max shift needed for
// moderate inputs).
inline std::vector<double> log_softmax_ref(const std::vector<double>& x) {
  double s = 0;
  for (double v : x) s += std::exp(v);
  const double lse = std::log(s);
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

// Step-by-step transliteration of the cell equations at 64-bit with naive
// softmaxes. F [P,d], query a [d], visited c [P] in {0,1}.
struct CellOracleOut {
  std::vector<double> g, g_tilde, h, h_tilde, r, r_tilde;
};

inline CellOracleOut cell_oracle(const Tensor<double>& f, const std::vector<double>& a,
                                 const std::vector<double>& visited) {
  const int64_t P = f.dim(0), d = f.dim(1);
  CellOracleOut o;
  o.g.resize(static_cast<size_t>(P));
  for (int64_t p = 0; p < P; ++p) {
    double s = 0;
    for (int64_t q = 0; q < d; ++q) s += f.at(p, q) * a[static_cast<size_t>(q)];
    o.g[static_cast<size_t>(p)] =
        s / std::sqrt(static_cast<double>(d)) - 1e5 * visited[static_cast<size_t>(p)];
  }
  auto softmax = [](const std::vector<double>& x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    double z = 0;
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) z += std::exp(x[i] - m);
    for (size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i] - m) / z;
    return out;
  };
  o.g_tilde = softmax(o.g);
  o.h.assign(static_cast<size_t>(d), 0.0);
  for (int64_t p = 0; p < P; ++p)
    for (int64_t q = 0; q < d; ++q)
      o.h[static_cast<size_t>(q)] += f.at(p, q) * o.g_tilde[static_cast<size_t>(p)];
  o.h_tilde = softmax(o.h);
  o.r.resize(static_cast<size_t>(P));
  for (int64_t p = 0; p < P; ++p) {
    double s = 0;
    for (int64_t q = 0; q < d; ++q) s += f.at(p, q) * o.h_tilde[static_cast<size_t>(q)];
    o.r[static_cast<size_t>(p)] = s - 1e5 * visited[static_cast<size_t>(p)];
  }
  o.r_tilde = softmax(o.r);
  return o;
}

// Explicit product-of-probabilities form of the averaged-logits cross
// entropy: -log( prod_l P(y|l)^(1/L) / sum_k prod_l P(k|l)^(1/L) ).
// logits [L, C] at 64-bit.
inline double product_loss_oracle(const Tensor<double>& logits, int64_t target) {
  const int64_t L = logits.dim(0), C = logits.dim(1);
  std::vector<double> geo(static_cast<size_t>(C), 1.0);
  for (int64_t l = 0; l < L; ++l) {
    double z = 0;
    for (int64_t k = 0; k < C; ++k) z += std::exp(logits.at(l, k));
    for (int64_t k = 0; k < C; ++k) {
      const double p = std::exp(logits.at(l, k)) / z;
      geo[static_cast<size_t>(k)] *= std::pow(p, 1.0 / static_cast<double>(L));
    }
  }
  double denom = 0;
  for (double v : geo) denom += v;
  return -std::log(geo[static_cast<size_t>(target)] / denom);
}

// Normalized geometric mean of per-location class probabilities (the
// classify_full contract) at 64-bit.
inline std::vector<double> geometric_mean_probs_oracle(const Tensor<double>& logits) {
  const int64_t L = logits.dim(0), C = logits.dim(1);
  std::vector<double> geo(static_cast<size_t>(C), 1.0);
  for (int64_t l = 0; l < L; ++l) {
    double z = 0;
    for (int64_t k = 0; k < C; ++k) z += std::exp(logits.at(l, k));
    for (int64_t k = 0; k < C; ++k) {
      geo[static_cast<size_t>(k)] *=
          std::pow(std::exp(logits.at(l, k)) / z, 1.0 / static_cast<double>(L));
    }
  }
  double denom = 0;
  for (double v : geo) denom += v;
  for (double& v : geo) v /= denom;
  return geo;
}

// Hand-rolled Nesterov trajectory on a scalar parameter.
//   v <- mu*v + g;  p <- p - lr*(g + mu*v)
inline std::vector<double> nesterov_oracle(double p0, const std::function<double(double)>& grad,
                                           double lr, double mu, int steps) {
  std::vector<double> traj;
  double p = p0, v = 0;
  for (int s = 0; s < steps; ++s) {
    const double g = grad(p);
    v = mu * v + g;
    p -= lr * (g + mu * v);
    traj.push_back(p);
  }
  return traj;
}

// Pixel-set union coverage.
inline double coverage_oracle(const std::vector<std::pair<int64_t, int64_t>>& locs, int64_t rf,
                              int64_t stride, int64_t H, int64_t W) {
  std::set<std::pair<int64_t, int64_t>> pixels;
  for (const auto& [i, j] : locs) {
    for (int64_t dy = 0; dy < rf; ++dy)
      for (int64_t dx = 0; dx < rf; ++dx) pixels.insert({i * stride + dy, j * stride + dx});
  }
  return static_cast<double>(pixels.size()) / static_cast<double>(H * W);
}

// Finite-difference check over explicit tape leaves: builds the graph with
// `build`, differentiates the scalar output, and compares against central
// differences in each leaf element. Returns the max relative error with
// denominator max(|ad|, |fd|, 1e-8).
inline double fd_check_leaves(
    const std::vector<Tensor<double>>& leaves,
    const std::function<saccader::Tape<double>::Var(saccader::Tape<double>&,
                                                    const std::vector<saccader::Tape<double>::Var>&)>&
        build,
    double eps = 1e-6) {
  using Tape = saccader::Tape<double>;
  auto eval = [&](const std::vector<Tensor<double>>& vals) {
    Tape tape;
    std::vector<Tape::Var> vars;
    for (const auto& t : vals) vars.push_back(tape.input(t, false));
    return tape.value(build(tape, vars))[0];
  };
  Tape tape;
  std::vector<Tape::Var> vars;
  for (const auto& t : leaves) vars.push_back(tape.input(t, true));
  auto loss = build(tape, vars);
  tape.backward(loss);
  double worst = 0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    const Tensor<double>& g = tape.grad(vars[li]);
    for (int64_t i = 0; i < leaves[li].numel(); ++i) {
      auto plus = leaves;
      plus[li][i] += eps;
      auto minus = leaves;
      minus[li][i] -= eps;
      const double fd = (eval(plus) - eval(minus)) / (2 * eps);
      const double ad = g[i];
      const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(ad - fd) / denom);
    }
  }
  return worst;
}

}  // namespace oracles
