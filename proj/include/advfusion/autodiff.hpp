#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "advfusion/tensor.hpp"

// Reverse-mode autodiff on dense float64 tensors. Dynamic tape, rebuilt per
// forward pass. Subgradient conventions: relu and max use 0 at the kink;
// clamp passes gradient 1 on the closed interval and 0 outside.
namespace advf {

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
  Tensor t;
  Tensor grad;  // lazily sized to t.shape
  bool requires_grad = false;
  std::vector<Value> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor(t.shape, 0.0);
  }
  void zero_grad() {
    if (!grad.data.empty()) std::fill(grad.data.begin(), grad.data.end(), 0.0);
  }
};

inline Value make_leaf(Tensor t, bool requires_grad = true) {
  auto n = std::make_shared<Node>();
  n->t = std::move(t);
  n->requires_grad = requires_grad;
  return n;
}

inline Value make_const(Tensor t) { return make_leaf(std::move(t), false); }

inline Value make_node(Tensor out, std::vector<Value> parents,
                       std::function<void(Node&)> backward, const char* op) {
  auto n = std::make_shared<Node>();
  n->t = std::move(out);
  n->parents = std::move(parents);
  for (auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(backward);
  n->op = op;
  return n;
}

inline Value detach(const Value& v) { return make_const(v->t); }

// ---- elementwise ----

inline Value add(const Value& a, const Value& b) {
  require_same_shape(a->t, b->t, "add");
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->t.data[i] + b->t.data[i];
  return make_node(std::move(out), {a, b},
                   [](Node& n) {
                     for (int k = 0; k < 2; ++k) {
                       auto& p = n.parents[k];
                       if (!p->requires_grad) continue;
                       p->ensure_grad();
                       for (size_t i = 0; i < n.grad.data.size(); ++i)
                         p->grad.data[i] += n.grad.data[i];
                     }
                   },
                   "add");
}

inline Value sub(const Value& a, const Value& b) {
  require_same_shape(a->t, b->t, "sub");
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->t.data[i] - b->t.data[i];
  return make_node(std::move(out), {a, b},
                   [](Node& n) {
                     for (int k = 0; k < 2; ++k) {
                       auto& p = n.parents[k];
                       if (!p->requires_grad) continue;
                       p->ensure_grad();
                       double s = k == 0 ? 1.0 : -1.0;
                       for (size_t i = 0; i < n.grad.data.size(); ++i)
                         p->grad.data[i] += s * n.grad.data[i];
                     }
                   },
                   "sub");
}

inline Value mul(const Value& a, const Value& b) {
  require_same_shape(a->t, b->t, "mul");
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->t.data[i] * b->t.data[i];
  return make_node(std::move(out), {a, b},
                   [](Node& n) {
                     auto &pa = n.parents[0], &pb = n.parents[1];
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       for (size_t i = 0; i < n.grad.data.size(); ++i)
                         pa->grad.data[i] += n.grad.data[i] * pb->t.data[i];
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (size_t i = 0; i < n.grad.data.size(); ++i)
                         pb->grad.data[i] += n.grad.data[i] * pa->t.data[i];
                     }
                   },
                   "mul");
}

inline Value mul_scalar(const Value& a, double s) {
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->t.data[i] * s;
  return make_node(std::move(out), {a},
                   [s](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < n.grad.data.size(); ++i)
                       p->grad.data[i] += s * n.grad.data[i];
                   },
                   "mul_scalar");
}

inline Value add_scalar(const Value& a, double s) {
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->t.data[i] + s;
  return make_node(std::move(out), {a},
                   [](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < n.grad.data.size(); ++i)
                       p->grad.data[i] += n.grad.data[i];
                   },
                   "add_scalar");
}

inline Value neg(const Value& a) { return mul_scalar(a, -1.0); }

inline Value relu(const Value& a) {
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::max(0.0, a->t.data[i]);
  return make_node(std::move(out), {a},
                   [](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < n.grad.data.size(); ++i)
                       if (p->t.data[i] > 0.0) p->grad.data[i] += n.grad.data[i];
                   },
                   "relu");
}

inline Value sigmoid(const Value& a) {
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-a->t.data[i]));
  return make_node(std::move(out), {a},
                   [](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < n.grad.data.size(); ++i) {
                       double y = n.t.data[i];
                       p->grad.data[i] += n.grad.data[i] * y * (1.0 - y);
                     }
                   },
                   "sigmoid");
}

inline Value vlog(const Value& a) {
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::log(a->t.data[i]);
  return make_node(std::move(out), {a},
                   [](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < n.grad.data.size(); ++i)
                       p->grad.data[i] += n.grad.data[i] / p->t.data[i];
                   },
                   "log");
}

inline Value clampv(const Value& a, double lo, double hi) {
  Tensor out(a->t.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::clamp(a->t.data[i], lo, hi);
  return make_node(std::move(out), {a},
                   [lo, hi](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < n.grad.data.size(); ++i)
                       if (p->t.data[i] >= lo && p->t.data[i] <= hi)
                         p->grad.data[i] += n.grad.data[i];
                   },
                   "clamp");
}

// ---- reductions ----

inline Value vsum(const Value& a) {
  double s = 0.0;
  for (double v : a->t.data) s += v;
  return make_node(Tensor::scalar(s), {a},
                   [](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     double g = n.grad.data[0];
                     for (size_t i = 0; i < p->grad.data.size(); ++i) p->grad.data[i] += g;
                   },
                   "sum");
}

inline Value vmax(const Value& a) {
  size_t arg = 0;
  for (size_t i = 1; i < a->t.data.size(); ++i)
    if (a->t.data[i] > a->t.data[arg]) arg = i;
  double m = a->t.data[arg];
  return make_node(Tensor::scalar(m), {a},
                   [arg](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     p->grad.data[arg] += n.grad.data[0];
                   },
                   "max");
}

// softmax over the last axis
inline Value softmax(const Value& a) {
  const auto& sh = a->t.shape;
  int64_t last = sh.back();
  int64_t rows = a->t.numel() / last;
  Tensor out(sh);
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a->t.data.data() + r * last;
    double* y = out.data.data() + r * last;
    double m = x[0];
    for (int64_t i = 1; i < last; ++i) m = std::max(m, x[i]);
    double z = 0.0;
    for (int64_t i = 0; i < last; ++i) {
      y[i] = std::exp(x[i] - m);
      z += y[i];
    }
    for (int64_t i = 0; i < last; ++i) y[i] /= z;
  }
  return make_node(std::move(out), {a},
                   [last, rows](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r) {
                       const double* y = n.t.data.data() + r * last;
                       const double* g = n.grad.data.data() + r * last;
                       double dot = 0.0;
                       for (int64_t i = 0; i < last; ++i) dot += y[i] * g[i];
                       double* pg = p->grad.data.data() + r * last;
                       for (int64_t i = 0; i < last; ++i) pg[i] += y[i] * (g[i] - dot);
                     }
                   },
                   "softmax");
}

// ---- linear algebra ----

inline Value matmul(const Value& a, const Value& b) {
  if (a->t.ndim() != 2 || b->t.ndim() != 2 || a->t.shape[1] != b->t.shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " + a->t.shape_str() + " x " +
                                b->t.shape_str());
  int64_t m = a->t.shape[0], k = a->t.shape[1], n2 = b->t.shape[1];
  Tensor out({m, n2});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t kk = 0; kk < k; ++kk) {
      double av = a->t.at2(i, kk);
      for (int64_t j = 0; j < n2; ++j) out.at2(i, j) += av * b->t.at2(kk, j);
    }
  return make_node(std::move(out), {a, b},
                   [m, k, n2](Node& n) {
                     auto &pa = n.parents[0], &pb = n.parents[1];
                     if (pa->requires_grad) {
                       pa->ensure_grad();
                       for (int64_t i = 0; i < m; ++i)
                         for (int64_t j = 0; j < n2; ++j) {
                           double g = n.grad.at2(i, j);
                           for (int64_t kk = 0; kk < k; ++kk)
                             pa->grad.at2(i, kk) += g * pb->t.at2(kk, j);
                         }
                     }
                     if (pb->requires_grad) {
                       pb->ensure_grad();
                       for (int64_t i = 0; i < m; ++i)
                         for (int64_t kk = 0; kk < k; ++kk) {
                           double av = pa->t.at2(i, kk);
                           for (int64_t j = 0; j < n2; ++j)
                             pb->grad.at2(kk, j) += av * n.grad.at2(i, j);
                         }
                     }
                   },
                   "matmul");
}

// conv2d on CHW input with OIHW weights; zero padding.
inline Value conv2d(const Value& x, const Value& w, const Value& bias, int stride, int pad) {
  if (x->t.ndim() != 3 || w->t.ndim() != 4 || x->t.shape[0] != w->t.shape[1])
    throw std::invalid_argument("conv2d: incompatible shapes " + x->t.shape_str() + " vs " +
                                w->t.shape_str());
  int64_t ci = x->t.shape[0], h = x->t.shape[1], wd = x->t.shape[2];
  int64_t co = w->t.shape[0], kh = w->t.shape[2], kw = w->t.shape[3];
  if (bias->t.numel() != co) throw std::invalid_argument("conv2d: bias size mismatch");
  int64_t oh = (h + 2 * pad - kh) / stride + 1;
  int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor out({co, oh, ow});
#pragma omp parallel for schedule(static)
  for (int64_t oc = 0; oc < co; ++oc) {
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        double acc = bias->t.data[oc];
        for (int64_t ic = 0; ic < ci; ++ic)
          for (int64_t ky = 0; ky < kh; ++ky) {
            int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += x->t.at3(ic, iy, ix) * w->t.at4(oc, ic, ky, kx);
            }
          }
        out.at3(oc, oy, ox) = acc;
      }
  }
  return make_node(
      std::move(out), {x, w, bias},
      [ci, h, wd, co, kh, kw, stride, pad](Node& n) {
        auto &px = n.parents[0], &pw = n.parents[1], &pb = n.parents[2];
        int64_t oh = n.t.shape[1], ow = n.t.shape[2];
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int64_t oc = 0; oc < co; ++oc) {
            double s = 0.0;
            for (int64_t oy = 0; oy < oh; ++oy)
              for (int64_t ox = 0; ox < ow; ++ox) s += n.grad.at3(oc, oy, ox);
            pb->grad.data[oc] += s;
          }
        }
        if (pw->requires_grad) {
          pw->ensure_grad();
#pragma omp parallel for schedule(static)
          for (int64_t oc = 0; oc < co; ++oc)
            for (int64_t ic = 0; ic < ci; ++ic)
              for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                  double s = 0.0;
                  for (int64_t oy = 0; oy < oh; ++oy) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                      int64_t ix = ox * stride + kx - pad;
                      if (ix < 0 || ix >= wd) continue;
                      s += n.grad.at3(oc, oy, ox) * px->t.at3(ic, iy, ix);
                    }
                  }
                  pw->grad.at4(oc, ic, ky, kx) += s;
                }
        }
        if (px->requires_grad) {
          px->ensure_grad();
#pragma omp parallel for schedule(static)
          for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t iy = 0; iy < h; ++iy)
              for (int64_t ix = 0; ix < wd; ++ix) {
                double s = 0.0;
                for (int64_t oc = 0; oc < co; ++oc)
                  for (int64_t ky = 0; ky < kh; ++ky) {
                    int64_t oy = iy + pad - ky;
                    if (oy % stride != 0) continue;
                    oy /= stride;
                    if (oy < 0 || oy >= oh) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      int64_t ox = ix + pad - kx;
                      if (ox % stride != 0) continue;
                      ox /= stride;
                      if (ox < 0 || ox >= ow) continue;
                      s += n.grad.at3(oc, oy, ox) * pw->t.at4(oc, ic, ky, kx);
                    }
                  }
                px->grad.at3(ic, iy, ix) += s;
              }
        }
      },
      "conv2d");
}

// ---- indexing ----

inline Value gather(const Value& a, const std::vector<int64_t>& idx) {
  Tensor out({static_cast<int64_t>(std::max<size_t>(idx.size(), 1))});
  if (idx.empty()) {
    out = Tensor({1}, {0.0});
    return make_const(std::move(out));
  }
  out = Tensor({static_cast<int64_t>(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a->t.numel())
      throw std::invalid_argument("gather: index out of range");
    out.data[i] = a->t.data[idx[i]];
  }
  return make_node(std::move(out), {a},
                   [idx](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < idx.size(); ++i)
                       p->grad.data[idx[i]] += n.grad.data[i];
                   },
                   "gather");
}

inline Value scatter_add(const Value& src, const std::vector<int64_t>& idx, int64_t out_size) {
  if (src->t.numel() != static_cast<int64_t>(idx.size()))
    throw std::invalid_argument("scatter_add: src/index length mismatch");
  Tensor out({out_size});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= out_size)
      throw std::invalid_argument("scatter_add: index out of range");
    out.data[idx[i]] += src->t.data[i];
  }
  return make_node(std::move(out), {src},
                   [idx](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < idx.size(); ++i)
                       p->grad.data[i] += n.grad.data[idx[i]];
                   },
                   "scatter_add");
}

// Bilinear sample of a CHW map at K (x, y) pixel locations; out is K x C.
// Out-of-bounds locations read zeros. coords may carry gradient.
inline Value bilinear_sample(const Value& map, const Value& coords) {
  if (map->t.ndim() != 3 || coords->t.ndim() != 2 || coords->t.shape[1] != 2)
    throw std::invalid_argument("bilinear_sample: want CHW map and Kx2 coords, got " +
                                map->t.shape_str() + " / " + coords->t.shape_str());
  int64_t c = map->t.shape[0], h = map->t.shape[1], w = map->t.shape[2];
  int64_t k = coords->t.shape[0];
  Tensor out({k, c});
  auto tap = [&](int64_t ch, int64_t y, int64_t x) -> double {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return map->t.at3(ch, y, x);
  };
  for (int64_t i = 0; i < k; ++i) {
    double x = coords->t.at2(i, 0), y = coords->t.at2(i, 1);
    int64_t x0 = static_cast<int64_t>(std::floor(x)), y0 = static_cast<int64_t>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    for (int64_t ch = 0; ch < c; ++ch) {
      out.at2(i, ch) = (1 - fx) * (1 - fy) * tap(ch, y0, x0) + fx * (1 - fy) * tap(ch, y0, x0 + 1) +
                       (1 - fx) * fy * tap(ch, y0 + 1, x0) + fx * fy * tap(ch, y0 + 1, x0 + 1);
    }
  }
  return make_node(
      std::move(out), {map, coords},
      [c, h, w, k](Node& n) {
        auto &pm = n.parents[0], &pc = n.parents[1];
        auto in = [&](int64_t y, int64_t x) { return y >= 0 && y < h && x >= 0 && x < w; };
        auto tap = [&](int64_t ch, int64_t y, int64_t x) -> double {
          return in(y, x) ? pm->t.at3(ch, y, x) : 0.0;
        };
        if (pm->requires_grad) pm->ensure_grad();
        if (pc->requires_grad) pc->ensure_grad();
        for (int64_t i = 0; i < k; ++i) {
          double x = pc->t.at2(i, 0), y = pc->t.at2(i, 1);
          int64_t x0 = static_cast<int64_t>(std::floor(x)),
                  y0 = static_cast<int64_t>(std::floor(y));
          double fx = x - x0, fy = y - y0;
          for (int64_t ch = 0; ch < c; ++ch) {
            double g = n.grad.at2(i, ch);
            if (g == 0.0) continue;
            if (pm->requires_grad) {
              if (in(y0, x0)) pm->grad.at3(ch, y0, x0) += g * (1 - fx) * (1 - fy);
              if (in(y0, x0 + 1)) pm->grad.at3(ch, y0, x0 + 1) += g * fx * (1 - fy);
              if (in(y0 + 1, x0)) pm->grad.at3(ch, y0 + 1, x0) += g * (1 - fx) * fy;
              if (in(y0 + 1, x0 + 1)) pm->grad.at3(ch, y0 + 1, x0 + 1) += g * fx * fy;
            }
            if (pc->requires_grad) {
              double v00 = tap(ch, y0, x0), v01 = tap(ch, y0, x0 + 1);
              double v10 = tap(ch, y0 + 1, x0), v11 = tap(ch, y0 + 1, x0 + 1);
              pc->grad.at2(i, 0) += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
              pc->grad.at2(i, 1) += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
          }
        }
      },
      "bilinear_sample");
}

inline Value concat0(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat0: empty input");
  auto tail = std::vector<int64_t>(parts[0]->t.shape.begin() + 1, parts[0]->t.shape.end());
  int64_t total = 0;
  for (auto& p : parts) {
    auto pt = std::vector<int64_t>(p->t.shape.begin() + 1, p->t.shape.end());
    if (pt != tail) throw std::invalid_argument("concat0: trailing shape mismatch");
    total += p->t.shape[0];
  }
  auto sh = parts[0]->t.shape;
  sh[0] = total;
  Tensor out(sh);
  size_t off = 0;
  for (auto& p : parts) {
    std::copy(p->t.data.begin(), p->t.data.end(), out.data.begin() + off);
    off += p->t.data.size();
  }
  return make_node(std::move(out), parts,
                   [](Node& n) {
                     size_t off = 0;
                     for (auto& p : n.parents) {
                       if (p->requires_grad) {
                         p->ensure_grad();
                         for (size_t i = 0; i < p->t.data.size(); ++i)
                           p->grad.data[i] += n.grad.data[off + i];
                       }
                       off += p->t.data.size();
                     }
                   },
                   "concat0");
}

inline Value slice0(const Value& a, int64_t start, int64_t len) {
  if (a->t.ndim() < 1 || start < 0 || start + len > a->t.shape[0])
    throw std::invalid_argument("slice0: range out of bounds for " + a->t.shape_str());
  int64_t inner = a->t.numel() / a->t.shape[0];
  auto sh = a->t.shape;
  sh[0] = len;
  Tensor out(sh);
  std::copy(a->t.data.begin() + start * inner, a->t.data.begin() + (start + len) * inner,
            out.data.begin());
  return make_node(std::move(out), {a},
                   [start, inner](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < n.grad.data.size(); ++i)
                       p->grad.data[start * inner + i] += n.grad.data[i];
                   },
                   "slice0");
}

inline Value transpose2d(const Value& a) {
  if (a->t.ndim() != 2)
    throw std::invalid_argument("transpose2d: expected 2D tensor, got " + a->t.shape_str());
  const int64_t r = a->t.shape[0], c = a->t.shape[1];
  Tensor out({c, r});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.at2(j, i) = a->t.at2(i, j);
  return make_node(std::move(out), {a},
                   [r, c](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (int64_t i = 0; i < r; ++i)
                       for (int64_t j = 0; j < c; ++j) p->grad.at2(i, j) += n.grad.at2(j, i);
                   },
                   "transpose2d");
}

inline Value reshape(const Value& a, std::vector<int64_t> shape) {
  if (Tensor::numel_of(shape) != a->t.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(shape), a->t.data);
  return make_node(std::move(out), {a},
                   [](Node& n) {
                     auto& p = n.parents[0];
                     p->ensure_grad();
                     for (size_t i = 0; i < n.grad.data.size(); ++i)
                       p->grad.data[i] += n.grad.data[i];
                   },
                   "reshape");
}

// ---- graph traversal ----

inline std::vector<Node*> topo_order(const Value& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, i] = stack.back();
    if (i < node->parents.size()) {
      Node* p = node->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

inline void backward(const Value& root) {
  if (root->t.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar, got " + root->t.shape_str());
  auto order = topo_order(root);
  root->ensure_grad();
  root->grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
  }
}

inline void zero_grads(const Value& root) {
  for (Node* n : topo_order(root)) n->zero_grad();
}

// ---- primitive dispatcher ----

enum class OpKind {
  kAdd, kMul, kMatmul, kConv2d, kRelu, kSigmoid, kSoftmax, kLog,
  kSum, kMax, kClamp, kGather, kScatterAdd, kBilinearSample
};

// Uniform entry point over the primitive set. Attribute-carrying ops use
// conventions: clamp reads scalar lo/hi from inputs[1..2]; gather/scatter_add
// read an index tensor from inputs[1] (scatter_add output size from
// inputs[2]); conv2d is stride 1, no padding.
inline Value forward_primitive(OpKind kind, const std::vector<Value>& in) {
  auto want = [&](size_t n) {
    if (in.size() != n) throw std::invalid_argument("forward_primitive: wrong input count");
  };
  auto as_indices = [](const Value& v) {
    std::vector<int64_t> idx(v->t.data.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(v->t.data[i]);
    return idx;
  };
  switch (kind) {
    case OpKind::kAdd: want(2); return add(in[0], in[1]);
    case OpKind::kMul: want(2); return mul(in[0], in[1]);
    case OpKind::kMatmul: want(2); return matmul(in[0], in[1]);
    case OpKind::kConv2d: want(3); return conv2d(in[0], in[1], in[2], 1, 0);
    case OpKind::kRelu: want(1); return relu(in[0]);
    case OpKind::kSigmoid: want(1); return sigmoid(in[0]);
    case OpKind::kSoftmax: want(1); return softmax(in[0]);
    case OpKind::kLog: want(1); return vlog(in[0]);
    case OpKind::kSum: want(1); return vsum(in[0]);
    case OpKind::kMax: want(1); return vmax(in[0]);
    case OpKind::kClamp: want(3); return clampv(in[0], in[1]->t.data[0], in[2]->t.data[0]);
    case OpKind::kGather: want(2); return gather(in[0], as_indices(in[1]));
    case OpKind::kScatterAdd:
      want(3);
      return scatter_add(in[0], as_indices(in[1]), static_cast<int64_t>(in[2]->t.data[0]));
    case OpKind::kBilinearSample: want(2); return bilinear_sample(in[0], in[1]);
  }
  throw std::invalid_argument("forward_primitive: unknown op");
}

}  // namespace advf
