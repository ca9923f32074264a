#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "saccader/tensor.hpp"

namespace saccader {

enum class Pad { kSame, kValid };
enum class BnMode { kTrain, kInfer };

// Reverse-mode autodiff over a fixed op vocabulary. A Tape records nodes in
// creation order; since every op only references earlier nodes, walking the
// node list backwards from the loss is a valid topological order. Gradients
// accumulate in that fixed order, so backward passes are deterministic.
//
// Tapes are single-use: build a forward graph, call backward() once, read
// gradients off the leaves.
template <typename T>
class Tape {
 public:
  using Var = int32_t;

  static constexpr T kBnEps = static_cast<T>(1e-5);
  static constexpr T kBnMomentum = static_cast<T>(0.99);

  Tape() { nodes_.reserve(256); }

  Var input(Tensor<T> value, bool requires_grad = false) {
    return make(std::move(value), requires_grad, nullptr);
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }

  // Valid after backward(); zero tensor for recorded leaves not on the loss path.
  const Tensor<T>& grad(Var v) const {
    const Node& n = node(v);
    if (!ran_backward_) throw std::logic_error("Tape::grad: backward() has not run");
    if (!n.requires_grad) throw std::logic_error("Tape::grad: node does not require grad");
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.numel() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(ln.value.shape));
    }
    if (ran_backward_) throw std::logic_error("backward: tape already swept");
    ran_backward_ = true;
    for (Node& n : nodes_) {
      if (n.requires_grad) n.grad = Tensor<T>(n.value.shape);
    }
    if (!ln.requires_grad) return;  // loss disconnected from all parameters
    ln.grad[0] = T(1);
    for (int32_t i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.requires_grad && n.back) n.back(*this);
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same("add", a, b);
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return binary(a, b, std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    check_same("sub", a, b);
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    return binary(a, b, std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      t.accumulate(a, g);
      if (t.node(b).requires_grad) {
        Tensor<T>& gb = t.node(b).grad;
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same("mul", a, b);
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return binary(a, b, std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      if (t.node(a).requires_grad) {
        Tensor<T>& ga = t.node(a).grad;
        const Tensor<T>& vb = t.value(b);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
      }
      if (t.node(b).requires_grad) {
        Tensor<T>& gb = t.node(b).grad;
        const Tensor<T>& va = t.value(a);
        for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v *= c;
    return unary(a, std::move(out), [a, c](Tape& t, const Tensor<T>& g) {
      Tensor<T>& ga = t.node(a).grad;
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    });
  }

  Var add_scalar(Var a, T c) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v += c;
    return unary(a, std::move(out), [a](Tape& t, const Tensor<T>& g) { t.accumulate(a, g); });
  }

  Var relu(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return unary(a, std::move(out), [a](Tape& t, const Tensor<T>& g) {
      Tensor<T>& ga = t.node(a).grad;
      const Tensor<T>& va = t.value(a);
      for (int64_t i = 0; i < g.numel(); ++i) {
        if (va[i] > T(0)) ga[i] += g[i];
      }
    });
  }

  Var exp(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::exp(v);
    Var id = unary(a, std::move(out), nullptr);
    set_back(id, [a, id](Tape& t) {
      const Tensor<T>& g = t.node(id).grad;
      const Tensor<T>& y = t.value(id);
      Tensor<T>& ga = t.node(a).grad;
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
    });
    return id;
  }

  // ---- reductions ----

  Var sum(Var a) {
    T s = 0;
    for (const T& v : value(a).data) s += v;
    return unary(a, Tensor<T>::scalar(s), [a](Tape& t, const Tensor<T>& g) {
      Tensor<T>& ga = t.node(a).grad;
      const T g0 = g[0];
      for (auto& v : ga.data) v += g0;
    });
  }

  Var sumsq(Var a) {
    T s = 0;
    for (const T& v : value(a).data) s += v * v;
    return unary(a, Tensor<T>::scalar(s), [a](Tape& t, const Tensor<T>& g) {
      Tensor<T>& ga = t.node(a).grad;
      const Tensor<T>& va = t.value(a);
      const T g0 = g[0];
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += T(2) * va[i] * g0;
    });
  }

  // [n, c] -> [c]
  Var mean_axis0(Var a) {
    const Tensor<T>& x = value(a);
    require(x.rank() == 2, "mean_axis0: expected rank-2, got " + shape_str(x.shape));
    const int64_t n = x.dim(0), c = x.dim(1);
    Tensor<T> out({c});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < c; ++j) out[j] += x.at(i, j);
    const T inv = T(1) / static_cast<T>(n);
    for (auto& v : out.data) v *= inv;
    return unary(a, std::move(out), [a, n, c, inv](Tape& t, const Tensor<T>& g) {
      Tensor<T>& ga = t.node(a).grad;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) ga.at(i, j) += g[j] * inv;
    });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    require(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0),
            "matmul: incompatible shapes " + shape_str(va.shape) + " x " + shape_str(vb.shape));
    const int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor<T> out({m, n});
    for (int64_t i = 0; i < m; ++i) {
      T* orow = &out.data[static_cast<size_t>(i * n)];
      for (int64_t p = 0; p < k; ++p) {
        const T av = va.at(i, p);
        const T* brow = &vb.data[static_cast<size_t>(p * n)];
        for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
    return binary(a, b, std::move(out), [a, b, m, k, n](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& va = t.value(a);
      const Tensor<T>& vb = t.value(b);
      if (t.node(a).requires_grad) {
        Tensor<T>& ga = t.node(a).grad;
        for (int64_t i = 0; i < m; ++i) {
          const T* grow = &g.data[static_cast<size_t>(i * n)];
          for (int64_t p = 0; p < k; ++p) {
            const T* brow = &vb.data[static_cast<size_t>(p * n)];
            T s = 0;
            for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga.at(i, p) += s;
          }
        }
      }
      if (t.node(b).requires_grad) {
        Tensor<T>& gb = t.node(b).grad;
        for (int64_t i = 0; i < m; ++i) {
          const T* grow = &g.data[static_cast<size_t>(i * n)];
          for (int64_t p = 0; p < k; ++p) {
            const T av = va.at(i, p);
            T* gbrow = &gb.data[static_cast<size_t>(p * n)];
            for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }

  // [m, k] x [k] -> [m]
  Var matvec(Var a, Var v) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vv = value(v);
    require(va.rank() == 2 && vv.rank() == 1 && va.dim(1) == vv.dim(0),
            "matvec: incompatible shapes " + shape_str(va.shape) + " x " + shape_str(vv.shape));
    const int64_t m = va.dim(0), k = va.dim(1);
    Tensor<T> out({m});
    for (int64_t i = 0; i < m; ++i) {
      const T* arow = &va.data[static_cast<size_t>(i * k)];
      T s = 0;
      for (int64_t p = 0; p < k; ++p) s += arow[p] * vv[p];
      out[i] = s;
    }
    return binary(a, v, std::move(out), [a, v, m, k](Tape& t, const Tensor<T>& g) {
      if (t.node(a).requires_grad) {
        Tensor<T>& ga = t.node(a).grad;
        const Tensor<T>& vv = t.value(v);
        for (int64_t i = 0; i < m; ++i) {
          T* garow = &ga.data[static_cast<size_t>(i * k)];
          const T gi = g[i];
          for (int64_t p = 0; p < k; ++p) garow[p] += gi * vv[p];
        }
      }
      if (t.node(v).requires_grad) {
        Tensor<T>& gv = t.node(v).grad;
        const Tensor<T>& va = t.value(a);
        for (int64_t i = 0; i < m; ++i) {
          const T* arow = &va.data[static_cast<size_t>(i * k)];
          const T gi = g[i];
          for (int64_t p = 0; p < k; ++p) gv[p] += gi * arow[p];
        }
      }
    });
  }

  // [m] x [m, k] -> [k]  (v^T A)
  Var vecmat(Var v, Var a) {
    const Tensor<T>& vv = value(v);
    const Tensor<T>& va = value(a);
    require(vv.rank() == 1 && va.rank() == 2 && vv.dim(0) == va.dim(0),
            "vecmat: incompatible shapes " + shape_str(vv.shape) + " x " + shape_str(va.shape));
    const int64_t m = va.dim(0), k = va.dim(1);
    Tensor<T> out({k});
    for (int64_t i = 0; i < m; ++i) {
      const T* arow = &va.data[static_cast<size_t>(i * k)];
      const T vi = vv[i];
      for (int64_t p = 0; p < k; ++p) out[p] += vi * arow[p];
    }
    return binary(v, a, std::move(out), [v, a, m, k](Tape& t, const Tensor<T>& g) {
      if (t.node(v).requires_grad) {
        Tensor<T>& gv = t.node(v).grad;
        const Tensor<T>& va = t.value(a);
        for (int64_t i = 0; i < m; ++i) {
          const T* arow = &va.data[static_cast<size_t>(i * k)];
          T s = 0;
          for (int64_t p = 0; p < k; ++p) s += g[p] * arow[p];
          gv[i] += s;
        }
      }
      if (t.node(a).requires_grad) {
        Tensor<T>& ga = t.node(a).grad;
        const Tensor<T>& vv = t.value(v);
        for (int64_t i = 0; i < m; ++i) {
          T* garow = &ga.data[static_cast<size_t>(i * k)];
          const T vi = vv[i];
          for (int64_t p = 0; p < k; ++p) garow[p] += vi * g[p];
        }
      }
    });
  }

  // x [..., c] + b [c], broadcast over leading dims.
  Var add_rowvec(Var x, Var b) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& vb = value(b);
    require(vx.rank() >= 1 && vb.rank() == 1 && vx.shape.back() == vb.dim(0),
            "add_rowvec: incompatible shapes " + shape_str(vx.shape) + " + " +
                shape_str(vb.shape));
    const int64_t c = vb.dim(0);
    const int64_t rows = vx.numel() / c;
    Tensor<T> out = vx;
    for (int64_t r = 0; r < rows; ++r) {
      T* row = &out.data[static_cast<size_t>(r * c)];
      for (int64_t j = 0; j < c; ++j) row[j] += vb[j];
    }
    return binary(x, b, std::move(out), [x, b, rows, c](Tape& t, const Tensor<T>& g) {
      t.accumulate(x, g);
      if (t.node(b).requires_grad) {
        Tensor<T>& gb = t.node(b).grad;
        for (int64_t r = 0; r < rows; ++r) {
          const T* grow = &g.data[static_cast<size_t>(r * c)];
          for (int64_t j = 0; j < c; ++j) gb[j] += grow[j];
        }
      }
    });
  }

  // ---- shape ops ----

  Var reshape(Var a, Shape s) {
    const Tensor<T>& va = value(a);
    require(shape_numel(s) == va.numel(),
            "reshape: numel mismatch " + shape_str(va.shape) + " -> " + shape_str(s));
    Tensor<T> out;
    out.shape = std::move(s);
    out.data = va.data;
    return unary(a, std::move(out), [a](Tape& t, const Tensor<T>& g) {
      Tensor<T>& ga = t.node(a).grad;
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
  }

  Var concat_cols(Var a, Var b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    require(va.rank() == 2 && vb.rank() == 2 && va.dim(0) == vb.dim(0),
            "concat_cols: incompatible shapes " + shape_str(va.shape) + " | " +
                shape_str(vb.shape));
    const int64_t n = va.dim(0), p = va.dim(1), q = vb.dim(1);
    Tensor<T> out({n, p + q});
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < p; ++j) out.at(i, j) = va.at(i, j);
      for (int64_t j = 0; j < q; ++j) out.at(i, p + j) = vb.at(i, j);
    }
    return binary(a, b, std::move(out), [a, b, n, p, q](Tape& t, const Tensor<T>& g) {
      if (t.node(a).requires_grad) {
        Tensor<T>& ga = t.node(a).grad;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < p; ++j) ga.at(i, j) += g.at(i, j);
      }
      if (t.node(b).requires_grad) {
        Tensor<T>& gb = t.node(b).grad;
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < q; ++j) gb.at(i, j) += g.at(i, p + j);
      }
    });
  }

  // Contiguous row slice of a rank-2 tensor.
  Var slice_rows(Var a, int64_t begin, int64_t count) {
    const Tensor<T>& va = value(a);
    require(va.rank() == 2, "slice_rows: expected rank-2, got " + shape_str(va.shape));
    require(begin >= 0 && count > 0 && begin + count <= va.dim(0),
            "slice_rows: range [" + std::to_string(begin) + ", " +
                std::to_string(begin + count) + ") out of bounds for " + shape_str(va.shape));
    const int64_t c = va.dim(1);
    Tensor<T> out({count, c});
    std::copy_n(va.data.begin() + begin * c, count * c, out.data.begin());
    return unary(a, std::move(out), [a, begin, c](Tape& t, const Tensor<T>& g) {
      Tensor<T>& ga = t.node(a).grad;
      const int64_t base = begin * c;
      for (int64_t i = 0; i < g.numel(); ++i) ga[base + i] += g[i];
    });
  }

  // Row gather from [n, c]; repeated indices are allowed and accumulate.
  Var gather_rows(Var a, std::vector<int64_t> idx) {
    const Tensor<T>& va = value(a);
    require(va.rank() == 2, "gather_rows: expected rank-2, got " + shape_str(va.shape));
    const int64_t n = va.dim(0), c = va.dim(1);
    for (int64_t i : idx) {
      require(i >= 0 && i < n, "gather_rows: index " + std::to_string(i) + " out of range [0, " +
                                   std::to_string(n) + ")");
    }
    const int64_t k = static_cast<int64_t>(idx.size());
    Tensor<T> out({k, c});
    for (int64_t r = 0; r < k; ++r)
      std::copy_n(va.data.begin() + idx[static_cast<size_t>(r)] * c, c,
                  out.data.begin() + r * c);
    return unary(a, std::move(out), [a, idx = std::move(idx), c](Tape& t, const Tensor<T>& g) {
      Tensor<T>& ga = t.node(a).grad;
      for (size_t r = 0; r < idx.size(); ++r) {
        const T* grow = &g.data[r * static_cast<size_t>(c)];
        T* garow = &ga.data[static_cast<size_t>(idx[r] * c)];
        for (int64_t j = 0; j < c; ++j) garow[j] += grow[j];
      }
    });
  }

  // Single element by flat index -> scalar.
  Var pick(Var a, int64_t flat) {
    const Tensor<T>& va = value(a);
    require(flat >= 0 && flat < va.numel(), "pick: index " + std::to_string(flat) +
                                                " out of range for " + shape_str(va.shape));
    return unary(a, Tensor<T>::scalar(va[flat]), [a, flat](Tape& t, const Tensor<T>& g) {
      t.node(a).grad[flat] += g[0];
    });
  }

  // ---- softmax family ----

  Var log_softmax_vec(Var a) {
    const Tensor<T>& x = value(a);
    require(x.rank() == 1, "log_softmax_vec: expected rank-1, got " + shape_str(x.shape));
    Tensor<T> out = x;
    log_softmax_row(out.data.data(), x.numel());
    Var id = unary(a, std::move(out), nullptr);
    set_back(id, [a, id](Tape& t) {
      const Tensor<T>& g = t.node(id).grad;
      const Tensor<T>& y = t.value(id);
      Tensor<T>& ga = t.node(a).grad;
      T gsum = 0;
      for (int64_t i = 0; i < g.numel(); ++i) gsum += g[i];
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] - std::exp(y[i]) * gsum;
    });
    return id;
  }

  // Row-wise log-softmax of [n, c] along axis 1.
  Var log_softmax_rows(Var a) {
    const Tensor<T>& x = value(a);
    require(x.rank() == 2, "log_softmax_rows: expected rank-2, got " + shape_str(x.shape));
    const int64_t n = x.dim(0), c = x.dim(1);
    Tensor<T> out = x;
    for (int64_t i = 0; i < n; ++i) log_softmax_row(&out.data[static_cast<size_t>(i * c)], c);
    Var id = unary(a, std::move(out), nullptr);
    set_back(id, [a, id, n, c](Tape& t) {
      const Tensor<T>& g = t.node(id).grad;
      const Tensor<T>& y = t.value(id);
      Tensor<T>& ga = t.node(a).grad;
      for (int64_t i = 0; i < n; ++i) {
        const T* grow = &g.data[static_cast<size_t>(i * c)];
        const T* yrow = &y.data[static_cast<size_t>(i * c)];
        T* garow = &ga.data[static_cast<size_t>(i * c)];
        T gsum = 0;
        for (int64_t j = 0; j < c; ++j) gsum += grow[j];
        for (int64_t j = 0; j < c; ++j) garow[j] += grow[j] - std::exp(yrow[j]) * gsum;
      }
    });
    return id;
  }

  Var softmax_vec(Var a) { return exp(log_softmax_vec(a)); }

  // ---- structured ops ----

  // x [N, H, W, Cin] (cross-correlation) k [kh, kw, Cin, Cout].
  Var conv2d(Var x, Var k, int64_t stride, int64_t dilation, Pad pad) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& vk = value(k);
    require(stride >= 1, "conv2d: stride must be positive, got " + std::to_string(stride));
    require(dilation >= 1, "conv2d: dilation must be positive, got " + std::to_string(dilation));
    require(vx.rank() == 4, "conv2d: input must be rank-4 [N,H,W,C], got " + shape_str(vx.shape));
    require(vk.rank() == 4, "conv2d: kernel must be rank-4 [kh,kw,Cin,Cout], got " +
                                shape_str(vk.shape));
    const int64_t kh = vk.dim(0), kw = vk.dim(1);
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel dims must be odd, got " +
                                            shape_str(vk.shape));
    require(vx.dim(3) == vk.dim(2), "conv2d: channel mismatch, input " + shape_str(vx.shape) +
                                        " vs kernel " + shape_str(vk.shape));
    ConvGeom geo = conv_geometry(vx.dim(1), vx.dim(2), kh, kw, stride, dilation, pad);
    const int64_t N = vx.dim(0), H = vx.dim(1), W = vx.dim(2), Ci = vx.dim(3), Co = vk.dim(3);
    Tensor<T> out({N, geo.oh, geo.ow, Co});
    std::vector<T> acc(static_cast<size_t>(Co));
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t oy = 0; oy < geo.oh; ++oy) {
        for (int64_t ox = 0; ox < geo.ow; ++ox) {
          std::fill(acc.begin(), acc.end(), T(0));
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * stride - geo.pad_top + ky * dilation;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * stride - geo.pad_left + kx * dilation;
              if (ix < 0 || ix >= W) continue;
              const T* xrow = &vx.data[static_cast<size_t>(((n * H + iy) * W + ix) * Ci)];
              const T* kslab = &vk.data[static_cast<size_t>(((ky * kw + kx) * Ci) * Co)];
              for (int64_t ci = 0; ci < Ci; ++ci) {
                const T xv = xrow[ci];
                const T* krow = kslab + ci * Co;
                for (int64_t co = 0; co < Co; ++co) acc[static_cast<size_t>(co)] += xv * krow[co];
              }
            }
          }
          std::copy(acc.begin(), acc.end(),
                    out.data.begin() + ((n * geo.oh + oy) * geo.ow + ox) * Co);
        }
      }
    }
    return binary(x, k, std::move(out),
                  [x, k, stride, dilation, geo, N, H, W, Ci, Co, kh, kw](Tape& t,
                                                                         const Tensor<T>& g) {
                    const bool need_x = t.node(x).requires_grad;
                    const bool need_k = t.node(k).requires_grad;
                    const Tensor<T>& vx = t.value(x);
                    const Tensor<T>& vk = t.value(k);
                    Tensor<T>* gx = need_x ? &t.node(x).grad : nullptr;
                    Tensor<T>* gk = need_k ? &t.node(k).grad : nullptr;
                    for (int64_t n = 0; n < N; ++n) {
                      for (int64_t oy = 0; oy < geo.oh; ++oy) {
                        for (int64_t ox = 0; ox < geo.ow; ++ox) {
                          const T* grow =
                              &g.data[static_cast<size_t>(((n * geo.oh + oy) * geo.ow + ox) * Co)];
                          for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = oy * stride - geo.pad_top + ky * dilation;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                              const int64_t ix = ox * stride - geo.pad_left + kx * dilation;
                              if (ix < 0 || ix >= W) continue;
                              const size_t xoff = static_cast<size_t>(((n * H + iy) * W + ix) * Ci);
                              const size_t koff = static_cast<size_t>(((ky * kw + kx) * Ci) * Co);
                              if (need_x) {
                                T* gxrow = &gx->data[xoff];
                                for (int64_t ci = 0; ci < Ci; ++ci) {
                                  const T* krow = &vk.data[koff + static_cast<size_t>(ci * Co)];
                                  T s = 0;
                                  for (int64_t co = 0; co < Co; ++co) s += krow[co] * grow[co];
                                  gxrow[ci] += s;
                                }
                              }
                              if (need_k) {
                                const T* xrow = &vx.data[xoff];
                                for (int64_t ci = 0; ci < Ci; ++ci) {
                                  T* gkrow = &gk->data[koff + static_cast<size_t>(ci * Co)];
                                  const T xv = xrow[ci];
                                  for (int64_t co = 0; co < Co; ++co) gkrow[co] += xv * grow[co];
                                }
                              }
                            }
                          }
                        }
                      }
                    }
                  });
  }

  // Per-channel normalization over all leading dims of x [..., C].
  // Train mode uses batch statistics and folds them into running stats
  // (biased variance, momentum kBnMomentum); infer mode reads running stats.
  Var batch_norm(Var x, Var bn_scale, Var bn_shift, BnMode mode, Tensor<T>* running_mean,
                 Tensor<T>* running_var) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& vs = value(bn_scale);
    const Tensor<T>& vb = value(bn_shift);
    require(vx.rank() >= 1, "batch_norm: input must have rank >= 1");
    const int64_t c = vx.shape.back();
    require(vs.rank() == 1 && vs.dim(0) == c && vb.rank() == 1 && vb.dim(0) == c,
            "batch_norm: scale/shift shape mismatch for input " + shape_str(vx.shape));
    require(running_mean && running_var && running_mean->numel() == c &&
                running_var->numel() == c,
            "batch_norm: running stats missing or wrong size");
    const int64_t rows = vx.numel() / c;
    Tensor<T> mean({c});
    Tensor<T> invstd({c});
    if (mode == BnMode::kTrain) {
      if (rows < 2) {
        throw std::invalid_argument(
            "batch_norm: train mode requires a per-channel population >= 2, got " +
            std::to_string(rows));
      }
      Tensor<T> var({c});
      for (int64_t r = 0; r < rows; ++r) {
        const T* row = &vx.data[static_cast<size_t>(r * c)];
        for (int64_t j = 0; j < c; ++j) mean[j] += row[j];
      }
      const T inv_rows = T(1) / static_cast<T>(rows);
      for (int64_t j = 0; j < c; ++j) mean[j] *= inv_rows;
      for (int64_t r = 0; r < rows; ++r) {
        const T* row = &vx.data[static_cast<size_t>(r * c)];
        for (int64_t j = 0; j < c; ++j) {
          const T d = row[j] - mean[j];
          var[j] += d * d;
        }
      }
      for (int64_t j = 0; j < c; ++j) var[j] *= inv_rows;
      for (int64_t j = 0; j < c; ++j) invstd[j] = T(1) / std::sqrt(var[j] + kBnEps);
      for (int64_t j = 0; j < c; ++j) {
        (*running_mean)[j] = kBnMomentum * (*running_mean)[j] + (T(1) - kBnMomentum) * mean[j];
        (*running_var)[j] = kBnMomentum * (*running_var)[j] + (T(1) - kBnMomentum) * var[j];
      }
    } else {
      for (int64_t j = 0; j < c; ++j) {
        mean[j] = (*running_mean)[j];
        invstd[j] = T(1) / std::sqrt((*running_var)[j] + kBnEps);
      }
    }
    Tensor<T> out(vx.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = &vx.data[static_cast<size_t>(r * c)];
      T* orow = &out.data[static_cast<size_t>(r * c)];
      for (int64_t j = 0; j < c; ++j) orow[j] = vs[j] * (row[j] - mean[j]) * invstd[j] + vb[j];
    }
    Var id = make(std::move(out),
                  node(x).requires_grad || node(bn_scale).requires_grad ||
                      node(bn_shift).requires_grad,
                  nullptr);
    set_back(id, [x, bn_scale, bn_shift, mode, mean = std::move(mean),
                  invstd = std::move(invstd), rows, c, id](Tape& t) {
      const Tensor<T>& g = t.node(id).grad;
      const Tensor<T>& vx = t.value(x);
      const Tensor<T>& vs = t.value(bn_scale);
      // per-channel reductions over the batch
      Tensor<T> sum_g({c});
      Tensor<T> sum_gx({c});
      for (int64_t r = 0; r < rows; ++r) {
        const T* grow = &g.data[static_cast<size_t>(r * c)];
        const T* xrow = &vx.data[static_cast<size_t>(r * c)];
        for (int64_t j = 0; j < c; ++j) {
          const T xhat = (xrow[j] - mean[j]) * invstd[j];
          sum_g[j] += grow[j];
          sum_gx[j] += grow[j] * xhat;
        }
      }
      if (t.node(bn_shift).requires_grad) {
        Tensor<T>& gb = t.node(bn_shift).grad;
        for (int64_t j = 0; j < c; ++j) gb[j] += sum_g[j];
      }
      if (t.node(bn_scale).requires_grad) {
        Tensor<T>& gs = t.node(bn_scale).grad;
        for (int64_t j = 0; j < c; ++j) gs[j] += sum_gx[j];
      }
      if (t.node(x).requires_grad) {
        Tensor<T>& gx = t.node(x).grad;
        const T inv_rows = T(1) / static_cast<T>(rows);
        for (int64_t r = 0; r < rows; ++r) {
          const T* grow = &g.data[static_cast<size_t>(r * c)];
          const T* xrow = &vx.data[static_cast<size_t>(r * c)];
          T* gxrow = &gx.data[static_cast<size_t>(r * c)];
          for (int64_t j = 0; j < c; ++j) {
            if (mode == BnMode::kTrain) {
              const T xhat = (xrow[j] - mean[j]) * invstd[j];
              gxrow[j] += vs[j] * invstd[j] *
                          (grow[j] - sum_g[j] * inv_rows - xhat * sum_gx[j] * inv_rows);
            } else {
              gxrow[j] += vs[j] * invstd[j] * grow[j];
            }
          }
        }
      }
    });
    return id;
  }

  // [N, H, W, C] -> [N, C]
  Var global_avg_pool(Var x) {
    const Tensor<T>& vx = value(x);
    require(vx.rank() == 4, "global_avg_pool: expected rank-4, got " + shape_str(vx.shape));
    const int64_t N = vx.dim(0), hw = vx.dim(1) * vx.dim(2), c = vx.dim(3);
    Tensor<T> out({N, c});
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t r = 0; r < hw; ++r) {
        const T* row = &vx.data[static_cast<size_t>((n * hw + r) * c)];
        T* orow = &out.data[static_cast<size_t>(n * c)];
        for (int64_t j = 0; j < c; ++j) orow[j] += row[j];
      }
    }
    const T inv = T(1) / static_cast<T>(hw);
    for (auto& v : out.data) v *= inv;
    return unary(x, std::move(out), [x, hw, c, inv](Tape& t, const Tensor<T>& g) {
      Tensor<T>& gx = t.node(x).grad;
      const int64_t N = g.dim(0);
      for (int64_t n = 0; n < N; ++n) {
        const T* grow = &g.data[static_cast<size_t>(n * c)];
        for (int64_t r = 0; r < hw; ++r) {
          T* gxrow = &gx.data[static_cast<size_t>((n * hw + r) * c)];
          for (int64_t j = 0; j < c; ++j) gxrow[j] += grow[j] * inv;
        }
      }
    });
  }

  // img [H, W, C] -> [P, rf, rf, C] with P = gh*gw patches in row-major grid
  // order; patch (i,j) starts at (i*stride, j*stride). Differentiable gather
  // (overlapping patches sum their gradients back into the image).
  Var extract_patches(Var img, int64_t rf, int64_t stride) {
    const Tensor<T>& v = value(img);
    require(v.rank() == 3, "extract_patches: expected rank-3 [H,W,C], got " + shape_str(v.shape));
    const int64_t H = v.dim(0), W = v.dim(1), C = v.dim(2);
    check_patch_geometry(H, W, rf, stride);
    const int64_t gh = (H - rf) / stride + 1, gw = (W - rf) / stride + 1;
    Tensor<T> out({gh * gw, rf, rf, C});
    for (int64_t i = 0; i < gh; ++i) {
      for (int64_t j = 0; j < gw; ++j) {
        const int64_t p = i * gw + j;
        for (int64_t dy = 0; dy < rf; ++dy) {
          const T* src = &v.data[static_cast<size_t>(((i * stride + dy) * W + j * stride) * C)];
          T* dst = &out.data[static_cast<size_t>(((p * rf + dy) * rf) * C)];
          std::copy_n(src, rf * C, dst);
        }
      }
    }
    return unary(img, std::move(out), [img, rf, stride, gh, gw, W = v.dim(1), C](
                                          Tape& t, const Tensor<T>& g) {
      Tensor<T>& gi = t.node(img).grad;
      for (int64_t i = 0; i < gh; ++i) {
        for (int64_t j = 0; j < gw; ++j) {
          const int64_t p = i * gw + j;
          for (int64_t dy = 0; dy < rf; ++dy) {
            const T* src = &g.data[static_cast<size_t>(((p * rf + dy) * rf) * C)];
            T* dst = &gi.data[static_cast<size_t>(((i * stride + dy) * W + j * stride) * C)];
            for (int64_t q = 0; q < rf * C; ++q) dst[q] += src[q];
          }
        }
      }
    });
  }

  static void check_patch_geometry(int64_t H, int64_t W, int64_t rf, int64_t stride) {
    if (rf <= 0 || stride <= 0) {
      throw std::invalid_argument("patch grid: rf and stride must be positive");
    }
    if (rf > H || rf > W) {
      throw std::invalid_argument("patch grid: rf " + std::to_string(rf) +
                                  " exceeds image dims " + std::to_string(H) + "x" +
                                  std::to_string(W));
    }
    for (auto [name, dim] : {std::pair<const char*, int64_t>{"H", H}, {"W", W}}) {
      if ((dim - rf) % stride != 0) {
        const int64_t k = (dim - rf + stride / 2) / stride;
        const int64_t suggested = rf + k * stride;
        throw std::invalid_argument(std::string("patch grid: (") + name + " - rf) = " +
                                    std::to_string(dim - rf) + " not divisible by stride " +
                                    std::to_string(stride) + "; nearest valid " + name + " is " +
                                    std::to_string(suggested));
      }
    }
  }

  struct ConvGeom {
    int64_t oh, ow, pad_top, pad_left;
  };

  static ConvGeom conv_geometry(int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
                                int64_t dilation, Pad pad) {
    const int64_t eff_kh = (kh - 1) * dilation + 1;
    const int64_t eff_kw = (kw - 1) * dilation + 1;
    ConvGeom g{};
    if (pad == Pad::kValid) {
      if (H < eff_kh || W < eff_kw) {
        throw std::invalid_argument("conv2d: input " + std::to_string(H) + "x" +
                                    std::to_string(W) + " smaller than effective kernel " +
                                    std::to_string(eff_kh) + "x" + std::to_string(eff_kw) +
                                    " with valid padding");
      }
      g.oh = (H - eff_kh) / stride + 1;
      g.ow = (W - eff_kw) / stride + 1;
      g.pad_top = g.pad_left = 0;
    } else {
      g.oh = (H + stride - 1) / stride;
      g.ow = (W + stride - 1) / stride;
      const int64_t ph = std::max<int64_t>(0, (g.oh - 1) * stride + eff_kh - H);
      const int64_t pw = std::max<int64_t>(0, (g.ow - 1) * stride + eff_kw - W);
      // extra pixel goes on the high side when the total is odd
      g.pad_top = ph / 2;
      g.pad_left = pw / 2;
    }
    return g;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
  };

  Node& node(Var v) { return nodes_[static_cast<size_t>(v)]; }
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v)]; }

  static void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
  }

  void check_same(const char* op, Var a, Var b) const {
    if (!same_shape(value(a), value(b))) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  shape_str(value(a).shape) + " vs " + shape_str(value(b).shape));
    }
  }

  Var make(Tensor<T> value, bool requires_grad, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(back)});
    return static_cast<Var>(nodes_.size() - 1);
  }

  void set_back(Var v, std::function<void(Tape&)> back) {
    if (node(v).requires_grad) node(v).back = std::move(back);
  }

  // Unary op whose backward consumes the output gradient.
  Var unary(Var a, Tensor<T> out, std::function<void(Tape&, const Tensor<T>&)> back) {
    const bool rg = node(a).requires_grad;
    Var id = make(std::move(out), rg, nullptr);
    if (rg && back) {
      node(id).back = [id, a, back = std::move(back)](Tape& t) {
        if (t.node(a).requires_grad) back(t, t.node(id).grad);
      };
    }
    return id;
  }

  Var binary(Var a, Var b, Tensor<T> out, std::function<void(Tape&, const Tensor<T>&)> back) {
    const bool rg = node(a).requires_grad || node(b).requires_grad;
    Var id = make(std::move(out), rg, nullptr);
    if (rg && back) {
      node(id).back = [id, back = std::move(back)](Tape& t) { back(t, t.node(id).grad); };
    }
    return id;
  }

  void accumulate(Var a, const Tensor<T>& g) {
    if (!node(a).requires_grad) return;
    Tensor<T>& ga = node(a).grad;
    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  }

  // Max is subtracted first so a common shift of the inputs cancels exactly
  // before any further rounding.
  static void log_softmax_row(T* row, int64_t n) {
    T m = row[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, row[i]);
    T s = 0;
    for (int64_t i = 0; i < n; ++i) {
      row[i] -= m;
      s += std::exp(row[i]);
    }
    const T ls = std::log(s);
    for (int64_t i = 0; i < n; ++i) row[i] -= ls;
  }

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// Affine map y = x.w + b with x [n, in], w [in, out], b [out].
template <typename T>
typename Tape<T>::Var linear(Tape<T>& tape, typename Tape<T>::Var x, typename Tape<T>::Var w,
                             typename Tape<T>::Var b) {
  const Tensor<T>& vx = tape.value(x);
  const Tensor<T>& vw = tape.value(w);
  const Tensor<T>& vb = tape.value(b);
  if (vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(0) || vb.rank() != 1 ||
      vb.dim(0) != vw.dim(1)) {
    throw std::invalid_argument("linear: shape mismatch x " + shape_str(vx.shape) + ", w " +
                                shape_str(vw.shape) + ", b " + shape_str(vb.shape));
  }
  return tape.add_rowvec(tape.matmul(x, w), b);
}

}  // namespace saccader
