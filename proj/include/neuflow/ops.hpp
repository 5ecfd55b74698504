#pragma once

// Differentiable tensor operations. Each op computes its value eagerly and,
// when recording, attaches the matching vector-Jacobian product.

#include "neuflow/autograd.hpp"
#include "neuflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace neuflow {

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_shape(b.shape(), a.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = input_grad(n, k)) g->matrix() += n.grad.matrix();
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& n) {
    if (auto* g = input_grad(n, 0)) g->matrix() += s * n.grad.matrix();
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  if (branch_tracing()) {
    for (auto v : a.value().storage()) trace_branch(v > T(0));
  }
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    const auto& y = n.value;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] > T(0)) (*g)[i] += n.grad[i];
    }
  });
}

/// Sum of every element; used as a scalar objective in tests.
template <class T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out(1, 1, 1);
  for (auto v : a.value().storage()) out[0] += v;
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = input_grad(n, 0)) g->matrix().array() += n.grad[0];
  });
}

/// Σ a ⊙ w for a fixed weight tensor.
template <class T>
Var<T> weighted_sum(const Var<T>& a, Tensor<T> w) {
  require_shape(w.shape(), a.shape(), "weighted_sum");
  Tensor<T> out(1, 1, 1);
  const auto& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) out[0] += av[i] * w[i];
  return make_result<T>(std::move(out), {a}, [w = std::move(w)](Node<T>& n) {
    if (auto* g = input_grad(n, 0)) g->matrix() += n.grad[0] * w.matrix();
  });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  int channels = 0;
  for (const auto& p : parts) {
    require_spatial(p.shape(), parts.front().shape(), "concat");
    channels += p.shape().c;
  }
  const Shape first = parts.front().shape();
  Tensor<T> out(channels, first.h, first.w);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), out.storage().begin() + offset);
    offset += p.value().size();
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t len = n.inputs[k]->value.size();
      if (auto* g = input_grad(n, k)) {
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += n.grad[off + i];
      }
      off += len;
    }
  });
}

/// Keeps the top-left h x w window.
template <class T>
Var<T> crop(const Var<T>& a, int h, int w) {
  const Shape s = a.shape();
  if (h > s.h || w > s.w || h <= 0 || w <= 0) throw ShapeError("crop: window larger than input");
  if (h == s.h && w == s.w) return a;
  Tensor<T> out(s.c, h, w);
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out(c, y, x) = a.value()(c, y, x);
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    const Shape o = n.value.shape();
    for (int c = 0; c < o.c; ++c)
      for (int y = 0; y < o.h; ++y)
        for (int x = 0; x < o.w; ++x) (*g)(c, y, x) += n.grad(c, y, x);
  });
}

/// 2x2 area average; requires even spatial dims.
template <class T>
Var<T> avg_pool2(const Var<T>& a) {
  const Shape s = a.shape();
  if (s.h % 2 || s.w % 2) throw ShapeError("avg_pool2: odd spatial size " + to_string(s));
  Tensor<T> out(s.c, s.h / 2, s.w / 2);
  const auto& x = a.value();
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < s.h / 2; ++y)
      for (int xx = 0; xx < s.w / 2; ++xx)
        out(c, y, xx) = T(0.25) * (x(c, 2 * y, 2 * xx) + x(c, 2 * y, 2 * xx + 1) + x(c, 2 * y + 1, 2 * xx) +
                                   x(c, 2 * y + 1, 2 * xx + 1));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    const Shape o = n.value.shape();
    for (int c = 0; c < o.c; ++c)
      for (int y = 0; y < o.h; ++y)
        for (int x = 0; x < o.w; ++x) {
          const T d = T(0.25) * n.grad(c, y, x);
          (*g)(c, 2 * y, 2 * x) += d;
          (*g)(c, 2 * y, 2 * x + 1) += d;
          (*g)(c, 2 * y + 1, 2 * x) += d;
          (*g)(c, 2 * y + 1, 2 * x + 1) += d;
        }
  });
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel centres, border clamp) with optional value scaling.

namespace detail {
struct LinearTaps {
  std::vector<int> i0, i1;
  std::vector<double> w1;
};

inline LinearTaps linear_taps(int in, int out) {
  LinearTaps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    t.i0[o] = i0;
    t.i1[o] = std::min(i0 + 1, in - 1);
    t.w1[o] = src - i0;
  }
  return t;
}
}  // namespace detail

template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w, T value_scale = T(1)) {
  const Shape s = x.shape();
  const auto ty = detail::linear_taps(s.h, out_h);
  const auto tx = detail::linear_taps(s.w, out_w);
  Tensor<T> out(s.c, out_h, out_w);
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < out_h; ++y) {
      const T wy1 = static_cast<T>(ty.w1[y]), wy0 = T(1) - wy1;
      for (int xx = 0; xx < out_w; ++xx) {
        const T wx1 = static_cast<T>(tx.w1[xx]), wx0 = T(1) - wx1;
        const T v = wy0 * (wx0 * x(c, ty.i0[y], tx.i0[xx]) + wx1 * x(c, ty.i0[y], tx.i1[xx])) +
                    wy1 * (wx0 * x(c, ty.i1[y], tx.i0[xx]) + wx1 * x(c, ty.i1[y], tx.i1[xx]));
        out(c, y, xx) = value_scale * v;
      }
    }
  return out;
}

template <class T>
Var<T> resize_bilinear(const Var<T>& a, int out_h, int out_w, T value_scale = T(1)) {
  Tensor<T> out = resize_bilinear(a.value(), out_h, out_w, value_scale);
  return make_result<T>(std::move(out), {a}, [value_scale](Node<T>& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    const Shape in = g->shape();
    const Shape o = n.value.shape();
    const auto ty = detail::linear_taps(in.h, o.h);
    const auto tx = detail::linear_taps(in.w, o.w);
    for (int c = 0; c < o.c; ++c)
      for (int y = 0; y < o.h; ++y) {
        const T wy1 = static_cast<T>(ty.w1[y]), wy0 = T(1) - wy1;
        for (int x = 0; x < o.w; ++x) {
          const T wx1 = static_cast<T>(tx.w1[x]), wx0 = T(1) - wx1;
          const T d = value_scale * n.grad(c, y, x);
          (*g)(c, ty.i0[y], tx.i0[x]) += d * wy0 * wx0;
          (*g)(c, ty.i0[y], tx.i1[x]) += d * wy0 * wx1;
          (*g)(c, ty.i1[y], tx.i0[x]) += d * wy1 * wx0;
          (*g)(c, ty.i1[y], tx.i1[x]) += d * wy1 * wx1;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution (edge-replicate padding) via im2col + GEMM.

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  [[nodiscard]] int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

namespace detail {
template <class T>
RowMatrix<T> im2col(const Tensor<T>& x, ConvGeometry g, int out_h, int out_w) {
  const Shape s = x.shape();
  const int k = g.kernel;
  RowMatrix<T> cols(static_cast<Eigen::Index>(s.c) * k * k, static_cast<Eigen::Index>(out_h) * out_w);
  std::vector<int> ix(static_cast<std::size_t>(out_w));
  for (int c = 0; c < s.c; ++c) {
    const T* src = x.channel(c);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols.row((static_cast<Eigen::Index>(c) * k + ky) * k + kx).data();
        for (int ox = 0; ox < out_w; ++ox) ix[ox] = std::clamp(ox * g.stride - g.pad + kx, 0, s.w - 1);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = std::clamp(oy * g.stride - g.pad + ky, 0, s.h - 1);
          const T* line = src + static_cast<std::size_t>(iy) * s.w;
          T* dst = row + static_cast<std::size_t>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) dst[ox] = line[ix[ox]];
        }
      }
  }
  return cols;
}

template <class T>
void col2im_add(const RowMatrix<T>& cols, ConvGeometry g, int out_h, int out_w, Tensor<T>& dx) {
  const Shape s = dx.shape();
  const int k = g.kernel;
  std::vector<int> ix(static_cast<std::size_t>(out_w));
  for (int c = 0; c < s.c; ++c) {
    T* dst_plane = dx.channel(c);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols.row((static_cast<Eigen::Index>(c) * k + ky) * k + kx).data();
        for (int ox = 0; ox < out_w; ++ox) ix[ox] = std::clamp(ox * g.stride - g.pad + kx, 0, s.w - 1);
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = std::clamp(oy * g.stride - g.pad + ky, 0, s.h - 1);
          T* line = dst_plane + static_cast<std::size_t>(iy) * s.w;
          const T* src = row + static_cast<std::size_t>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) line[ix[ox]] += src[ox];
        }
      }
  }
}
}  // namespace detail

/// weight: [c_out, c_in, k*k]; bias: [c_out, 1, 1].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry geom) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  if (ws.h != s.c || ws.w != geom.kernel * geom.kernel) {
    throw ShapeError("conv2d: weight " + to_string(ws) + " does not fit input " + to_string(s));
  }
  if (bias.shape() != Shape{ws.c, 1, 1}) throw ShapeError("conv2d: bias shape mismatch");
  const int oh = geom.out_size(s.h), ow = geom.out_size(s.w);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: input too small for kernel");

  const bool pointwise = geom.kernel == 1 && geom.stride == 1 && geom.pad == 0;
  RowMatrix<T> cols;
  if (!pointwise) cols = detail::im2col(x.value(), geom, oh, ow);
  const ConstMatrixMap<T> wmat(weight.value().data(), ws.c, static_cast<Eigen::Index>(ws.h) * ws.w);

  Tensor<T> out(ws.c, oh, ow);
  if (pointwise) {
    out.matrix().noalias() = wmat * x.value().matrix();
  } else {
    out.matrix().noalias() = wmat * cols;
  }
  out.matrix().colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.value().data(), ws.c);

  return make_result<T>(std::move(out), {x, weight, bias},
                        [geom, pointwise, cols = std::move(cols), oh, ow](Node<T>& n) {
                          const auto& wv = n.inputs[1]->value;
                          const ConstMatrixMap<T> wm(wv.data(), wv.channels(),
                                                     static_cast<Eigen::Index>(wv.height()) * wv.width());
                          const auto dy = n.grad.matrix();
                          if (auto* gw = input_grad(n, 1)) {
                            MatrixMap<T> gwm(gw->data(), wv.channels(),
                                             static_cast<Eigen::Index>(wv.height()) * wv.width());
                            if (pointwise) {
                              gwm.noalias() += dy * n.inputs[0]->value.matrix().transpose();
                            } else {
                              gwm.noalias() += dy * cols.transpose();
                            }
                          }
                          if (auto* gb = input_grad(n, 2)) {
                            Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb->data(), wv.channels()) +=
                                dy.rowwise().sum();
                          }
                          if (auto* gx = input_grad(n, 0)) {
                            if (pointwise) {
                              gx->matrix().noalias() += wm.transpose() * dy;
                            } else {
                              RowMatrix<T> dcols = wm.transpose() * dy;
                              detail::col2im_add(dcols, geom, oh, ow, *gx);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalization

/// Group normalization with per-channel affine; gamma/beta: [C, 1, 1].
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
  const Shape s = x.shape();
  if (groups <= 0 || s.c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const int cg = s.c / groups;
  const std::size_t per_group = static_cast<std::size_t>(cg) * s.plane();

  Tensor<T> xhat(s);
  std::vector<T> rstd(static_cast<std::size_t>(groups));
  const auto& xv = x.value();
  for (int g = 0; g < groups; ++g) {
    const T* p = xv.channel(g * cg);
    T mean = 0;
    for (std::size_t i = 0; i < per_group; ++i) mean += p[i];
    mean /= static_cast<T>(per_group);
    T var = 0;
    for (std::size_t i = 0; i < per_group; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<T>(per_group);
    const T r = T(1) / std::sqrt(var + eps);
    rstd[g] = r;
    T* q = xhat.channel(g * cg);
    for (std::size_t i = 0; i < per_group; ++i) q[i] = (p[i] - mean) * r;
  }
  Tensor<T> out(s);
  for (int c = 0; c < s.c; ++c) {
    const T ga = gamma.value()[c], be = beta.value()[c];
    const T* q = xhat.channel(c);
    T* o = out.channel(c);
    for (int i = 0; i < s.plane(); ++i) o[i] = ga * q[i] + be;
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [xhat = std::move(xhat), rstd = std::move(rstd), groups, cg](Node<T>& n) {
                          const Shape sh = n.value.shape();
                          const int plane = sh.plane();
                          const auto& gam = n.inputs[1]->value;
                          if (auto* gg = input_grad(n, 1)) {
                            for (int c = 0; c < sh.c; ++c) {
                              const T* dy = n.grad.channel(c);
                              const T* q = xhat.channel(c);
                              T acc = 0;
                              for (int i = 0; i < plane; ++i) acc += dy[i] * q[i];
                              (*gg)[c] += acc;
                            }
                          }
                          if (auto* gb = input_grad(n, 2)) {
                            for (int c = 0; c < sh.c; ++c) {
                              const T* dy = n.grad.channel(c);
                              T acc = 0;
                              for (int i = 0; i < plane; ++i) acc += dy[i];
                              (*gb)[c] += acc;
                            }
                          }
                          auto* gx = input_grad(n, 0);
                          if (!gx) return;
                          const T count = static_cast<T>(static_cast<std::size_t>(cg) * plane);
                          for (int g = 0; g < groups; ++g) {
                            T mean_d = 0, mean_dq = 0;
                            for (int c = g * cg; c < (g + 1) * cg; ++c) {
                              const T* dy = n.grad.channel(c);
                              const T* q = xhat.channel(c);
                              for (int i = 0; i < plane; ++i) {
                                const T d = dy[i] * gam[c];
                                mean_d += d;
                                mean_dq += d * q[i];
                              }
                            }
                            mean_d /= count;
                            mean_dq /= count;
                            for (int c = g * cg; c < (g + 1) * cg; ++c) {
                              const T* dy = n.grad.channel(c);
                              const T* q = xhat.channel(c);
                              T* dx = gx->channel(c);
                              for (int i = 0; i < plane; ++i) {
                                dx[i] += rstd[g] * (dy[i] * gam[c] - mean_d - q[i] * mean_dq);
                              }
                            }
                          }
                        });
}

/// Normalizes each pixel's channel vector (transformer layer norm).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Shape s = x.shape();
  const int n_pix = s.plane();
  Tensor<T> xhat(s);
  std::vector<T> rstd(static_cast<std::size_t>(n_pix));
  const auto xm = x.value().matrix();
  auto qm = xhat.matrix();
  for (int p = 0; p < n_pix; ++p) {
    const T mean = xm.col(p).mean();
    const T var = (xm.col(p).array() - mean).square().mean();
    rstd[p] = T(1) / std::sqrt(var + eps);
    qm.col(p) = (xm.col(p).array() - mean) * rstd[p];
  }
  Tensor<T> out(s);
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> ga(gamma.value().data(), s.c);
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> be(beta.value().data(), s.c);
  out.matrix() = (qm.array().colwise() * ga.array()).colwise() + be.array();

  return make_result<T>(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& n) {
    const Shape sh = n.value.shape();
    const auto dy = n.grad.matrix();
    const auto q = xhat.matrix();
    if (auto* gg = input_grad(n, 1)) {
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gg->data(), sh.c) += (dy.array() * q.array()).rowwise().sum().matrix();
    }
    if (auto* gb = input_grad(n, 2)) {
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb->data(), sh.c) += dy.rowwise().sum();
    }
    auto* gx = input_grad(n, 0);
    if (!gx) return;
    const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> ga(n.inputs[1]->value.data(), sh.c);
    RowMatrix<T> d = dy.array().colwise() * ga.array();
    auto gm = gx->matrix();
    for (int p = 0; p < sh.plane(); ++p) {
      const T mean_d = d.col(p).mean();
      const T mean_dq = (d.col(p).array() * q.col(p).array()).mean();
      gm.col(p).array() += rstd[p] * (d.col(p).array() - mean_d - q.col(p).array() * mean_dq);
    }
  });
}

// ---------------------------------------------------------------------------
// Dense attention

/// Row-softmax of scale * Qᵀ K: one row per query pixel, one column per key pixel.
template <class T>
RowMatrix<T> attention_probabilities(const Tensor<T>& q, const Tensor<T>& k, T scale) {
  if (q.channels() != k.channels()) throw ShapeError("attention: query/key channel mismatch");
  RowMatrix<T> a = scale * (q.matrix().transpose() * k.matrix());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const T m = a.row(r).maxCoeff();
    a.row(r) = (a.row(r).array() - m).exp();
    a.row(r) /= a.row(r).sum();
  }
  return a;
}

/// out[:, i] = Σ_j softmax_j(scale ⟨q_i, k_j⟩) v[:, j]. Output takes q's spatial shape.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, T scale) {
  require_spatial(v.shape(), k.shape(), "attention key/value");
  RowMatrix<T> a = attention_probabilities(q.value(), k.value(), scale);
  Tensor<T> out(v.shape().c, q.shape().h, q.shape().w);
  out.matrix().noalias() = v.value().matrix() * a.transpose();
  return make_result<T>(std::move(out), {q, k, v}, [a = std::move(a), scale](Node<T>& n) {
    const auto g = n.grad.matrix();
    if (auto* gv = input_grad(n, 2)) gv->matrix().noalias() += g * a;
    auto* gq = input_grad(n, 0);
    auto* gk = input_grad(n, 1);
    if (!gq && !gk) return;
    RowMatrix<T> da = g.transpose() * n.inputs[2]->value.matrix();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (da.array() * a.array()).rowwise().sum();
    RowMatrix<T> ds = a.array() * (da.colwise() - row_dot).array();
    if (gq) gq->matrix().noalias() += scale * (n.inputs[1]->value.matrix() * ds.transpose());
    if (gk) gk->matrix().noalias() += scale * (n.inputs[0]->value.matrix() * ds);
  });
}

// ---------------------------------------------------------------------------
// Bilinear warp with zero fill outside the map.

/// out(c, y, x) = f(c, y + flow_v, x + flow_u), bilinear, out-of-bounds taps read 0.
template <class T>
Var<T> warp(const Var<T>& features, const Var<T>& flow) {
  const Shape s = features.shape();
  require_shape(flow.shape(), Shape{2, s.h, s.w}, "warp flow");
  const auto& f = features.value();
  const auto& fl = flow.value();
  Tensor<T> out(s);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const T sx = static_cast<T>(x) + fl(0, y, x);
      const T sy = static_cast<T>(y) + fl(1, y, x);
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      trace_branch(x0);
      trace_branch(y0);
      const T wx1 = sx - static_cast<T>(x0), wy1 = sy - static_cast<T>(y0);
      const T wx0 = T(1) - wx1, wy0 = T(1) - wy1;
      const bool vx0 = x0 >= 0 && x0 < s.w, vx1 = x0 + 1 >= 0 && x0 + 1 < s.w;
      const bool vy0 = y0 >= 0 && y0 < s.h, vy1 = y0 + 1 >= 0 && y0 + 1 < s.h;
      for (int c = 0; c < s.c; ++c) {
        T acc = 0;
        if (vy0 && vx0) acc += wy0 * wx0 * f(c, y0, x0);
        if (vy0 && vx1) acc += wy0 * wx1 * f(c, y0, x0 + 1);
        if (vy1 && vx0) acc += wy1 * wx0 * f(c, y0 + 1, x0);
        if (vy1 && vx1) acc += wy1 * wx1 * f(c, y0 + 1, x0 + 1);
        out(c, y, x) = acc;
      }
    }
  return make_result<T>(std::move(out), {features, flow}, [](Node<T>& n) {
    const auto& f = n.inputs[0]->value;
    const auto& fl = n.inputs[1]->value;
    const Shape s = f.shape();
    auto* gf = input_grad(n, 0);
    auto* gflow = input_grad(n, 1);
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const T sx = static_cast<T>(x) + fl(0, y, x);
        const T sy = static_cast<T>(y) + fl(1, y, x);
        const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
        const T wx1 = sx - static_cast<T>(x0), wy1 = sy - static_cast<T>(y0);
        const T wx0 = T(1) - wx1, wy0 = T(1) - wy1;
        const bool vx0 = x0 >= 0 && x0 < s.w, vx1 = x0 + 1 >= 0 && x0 + 1 < s.w;
        const bool vy0 = y0 >= 0 && y0 < s.h, vy1 = y0 + 1 >= 0 && y0 + 1 < s.h;
        T du = 0, dv = 0;
        for (int c = 0; c < s.c; ++c) {
          const T g = n.grad(c, y, x);
          const T f00 = (vy0 && vx0) ? f(c, y0, x0) : T(0);
          const T f01 = (vy0 && vx1) ? f(c, y0, x0 + 1) : T(0);
          const T f10 = (vy1 && vx0) ? f(c, y0 + 1, x0) : T(0);
          const T f11 = (vy1 && vx1) ? f(c, y0 + 1, x0 + 1) : T(0);
          if (gf) {
            if (vy0 && vx0) (*gf)(c, y0, x0) += g * wy0 * wx0;
            if (vy0 && vx1) (*gf)(c, y0, x0 + 1) += g * wy0 * wx1;
            if (vy1 && vx0) (*gf)(c, y0 + 1, x0) += g * wy1 * wx0;
            if (vy1 && vx1) (*gf)(c, y0 + 1, x0 + 1) += g * wy1 * wx1;
          }
          du += g * (wy0 * (f01 - f00) + wy1 * (f11 - f10));
          dv += g * (wx0 * (f10 - f00) + wx1 * (f11 - f01));
        }
        if (gflow) {
          (*gflow)(0, y, x) += du;
          (*gflow)(1, y, x) += dv;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Local correlation over a (2r+1)^2 window.

/// corr((dy+r)(2r+1) + dx+r, y, x) = ⟨f1(y,x), f2(y+dy, x+dx)⟩ / √C, zero out of bounds.
template <class T>
Var<T> local_correlation(const Var<T>& f1, const Var<T>& f2, int radius) {
  const Shape s = f1.shape();
  require_shape(f2.shape(), s, "local_correlation");
  if (radius < 1) throw ShapeError("local_correlation: radius must be >= 1");
  const int win = 2 * radius + 1;
  const T norm = T(1) / std::sqrt(static_cast<T>(s.c));
  Tensor<T> out(win * win, s.h, s.w);
  const auto& a = f1.value();
  const auto& b = f2.value();
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const int k = (dy + radius) * win + (dx + radius);
      T* o = out.channel(k);
      const int y_lo = std::max(0, -dy), y_hi = std::min(s.h, s.h - dy);
      const int x_lo = std::max(0, -dx), x_hi = std::min(s.w, s.w - dx);
      for (int c = 0; c < s.c; ++c) {
        const T* pa = a.channel(c);
        const T* pb = b.channel(c);
        for (int y = y_lo; y < y_hi; ++y) {
          const T* ra = pa + static_cast<std::size_t>(y) * s.w;
          const T* rb = pb + static_cast<std::size_t>(y + dy) * s.w + dx;
          T* ro = o + static_cast<std::size_t>(y) * s.w;
          for (int x = x_lo; x < x_hi; ++x) ro[x] += ra[x] * rb[x];
        }
      }
      for (int i = 0; i < s.plane(); ++i) o[i] *= norm;
    }
  return make_result<T>(std::move(out), {f1, f2}, [radius, win, norm](Node<T>& n) {
    const auto& a = n.inputs[0]->value;
    const auto& b = n.inputs[1]->value;
    const Shape s = a.shape();
    auto* ga = input_grad(n, 0);
    auto* gb = input_grad(n, 1);
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) {
        const int k = (dy + radius) * win + (dx + radius);
        const T* go = n.grad.channel(k);
        const int y_lo = std::max(0, -dy), y_hi = std::min(s.h, s.h - dy);
        const int x_lo = std::max(0, -dx), x_hi = std::min(s.w, s.w - dx);
        for (int c = 0; c < s.c; ++c) {
          for (int y = y_lo; y < y_hi; ++y) {
            const std::size_t ia = static_cast<std::size_t>(y) * s.w;
            const std::size_t ib = static_cast<std::size_t>(y + dy) * s.w + dx;
            for (int x = x_lo; x < x_hi; ++x) {
              const T g = go[ia + x] * norm;
              if (ga) ga->channel(c)[ia + x] += g * b.channel(c)[ib + x];
              if (gb) gb->channel(c)[ib + x] += g * a.channel(c)[ia + x];
            }
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Convex upsampling

/// Softmax across `groups` channel blocks: channel g*inner + s is normalized over g.
template <class T>
Var<T> grouped_softmax(const Var<T>& logits, int groups) {
  const Shape s = logits.shape();
  if (s.c % groups != 0) throw ShapeError("grouped_softmax: channels not divisible by groups");
  const int inner = s.c / groups;
  const int plane = s.plane();
  Tensor<T> out(s);
  const auto& x = logits.value();
  std::vector<T> buf(static_cast<std::size_t>(groups));
  for (int si = 0; si < inner; ++si)
    for (int p = 0; p < plane; ++p) {
      T m = -std::numeric_limits<T>::infinity();
      for (int g = 0; g < groups; ++g) m = std::max(m, x.channel(g * inner + si)[p]);
      T z = 0;
      for (int g = 0; g < groups; ++g) z += (buf[g] = std::exp(x.channel(g * inner + si)[p] - m));
      for (int g = 0; g < groups; ++g) out.channel(g * inner + si)[p] = buf[g] / z;
    }
  return make_result<T>(std::move(out), {logits}, [groups, inner](Node<T>& n) {
    auto* gx = input_grad(n, 0);
    if (!gx) return;
    const int plane = n.value.shape().plane();
    for (int si = 0; si < inner; ++si)
      for (int p = 0; p < plane; ++p) {
        T dot = 0;
        for (int g = 0; g < groups; ++g) {
          const int c = g * inner + si;
          dot += n.grad.channel(c)[p] * n.value.channel(c)[p];
        }
        for (int g = 0; g < groups; ++g) {
          const int c = g * inner + si;
          gx->channel(c)[p] += n.value.channel(c)[p] * (n.grad.channel(c)[p] - dot);
        }
      }
  });
}

/// Fine pixel (f*y+sy, f*x+sx) = f * Σ_n w[n*f*f + sy*f + sx](y,x) * flow(neighbour n),
/// n enumerating the 3x3 coarse neighbourhood row-major, borders replicated.
template <class T>
Var<T> convex_upsample(const Var<T>& flow, const Var<T>& weights, int factor) {
  const Shape s = flow.shape();
  if (s.c != 2) throw ShapeError("convex_upsample: flow must have 2 channels");
  require_shape(weights.shape(), Shape{9 * factor * factor, s.h, s.w}, "convex_upsample mask");
  const int ff = factor * factor;
  Tensor<T> out(2, s.h * factor, s.w * factor);
  const auto& fl = flow.value();
  const auto& wt = weights.value();
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int sy = 0; sy < factor; ++sy)
        for (int sx = 0; sx < factor; ++sx) {
          T u = 0, v = 0;
          for (int nb = 0; nb < 9; ++nb) {
            const int ny = std::clamp(y + nb / 3 - 1, 0, s.h - 1);
            const int nx = std::clamp(x + nb % 3 - 1, 0, s.w - 1);
            const T w = wt(nb * ff + sy * factor + sx, y, x);
            u += w * fl(0, ny, nx);
            v += w * fl(1, ny, nx);
          }
          out(0, y * factor + sy, x * factor + sx) = static_cast<T>(factor) * u;
          out(1, y * factor + sy, x * factor + sx) = static_cast<T>(factor) * v;
        }
  return make_result<T>(std::move(out), {flow, weights}, [factor, ff](Node<T>& n) {
    const auto& fl = n.inputs[0]->value;
    const auto& wt = n.inputs[1]->value;
    const Shape s = fl.shape();
    auto* gflow = input_grad(n, 0);
    auto* gw = input_grad(n, 1);
    const T fs = static_cast<T>(factor);
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        for (int sy = 0; sy < factor; ++sy)
          for (int sx = 0; sx < factor; ++sx) {
            const T gu = fs * n.grad(0, y * factor + sy, x * factor + sx);
            const T gv = fs * n.grad(1, y * factor + sy, x * factor + sx);
            for (int nb = 0; nb < 9; ++nb) {
              const int ny = std::clamp(y + nb / 3 - 1, 0, s.h - 1);
              const int nx = std::clamp(x + nb % 3 - 1, 0, s.w - 1);
              const int c = nb * ff + sy * factor + sx;
              if (gw) (*gw)(c, y, x) += gu * fl(0, ny, nx) + gv * fl(1, ny, nx);
              if (gflow) {
                const T w = wt(c, y, x);
                (*gflow)(0, ny, nx) += w * gu;
                (*gflow)(1, ny, nx) += w * gv;
              }
            }
          }
  });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over valid pixels of Σ_channels |pred - target|; zero when nothing is valid.
template <class T>
Var<T> masked_l1(const Var<T>& pred, const Tensor<T>& target, const ValidMask& valid) {
  const Shape s = pred.shape();
  require_shape(target.shape(), s, "masked_l1");
  if (valid.h != s.h || valid.w != s.w) throw ShapeError("masked_l1: mask size mismatch");
  const std::size_t count = valid.count();
  Tensor<T> out(1, 1, 1);
  const T inv = count ? T(1) / static_cast<T>(count) : T(0);
  const auto& p = pred.value();
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (valid(y, x)) {
          const T r = p(c, y, x) - target(c, y, x);
          trace_branch(r > 0);
          out[0] += std::abs(r);
        }
  out[0] *= inv;
  return make_result<T>(std::move(out), {pred}, [target, valid, inv](Node<T>& n) {
    auto* g = input_grad(n, 0);
    if (!g) return;
    const auto& p = n.inputs[0]->value;
    const Shape s = p.shape();
    const T d = n.grad[0] * inv;
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          if (!valid(y, x)) continue;
          const T r = p(c, y, x) - target(c, y, x);
          (*g)(c, y, x) += r > 0 ? d : (r < 0 ? -d : T(0));
        }
  });
}

}  // namespace neuflow
