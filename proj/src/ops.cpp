#include "dir3d/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace dir3d {

std::size_t window_output_extent(std::size_t input, std::size_t window, std::size_t stride, Padding padding) {
  if (window == 0 || stride == 0) throw ContractError("window and stride must be positive");
  if (padding == Padding::Same) {
    return (input + stride - 1) / stride;
  }
  if (window > input) {
    throw DimensionError("window extent " + std::to_string(window) + " exceeds input extent " + std::to_string(input));
  }
  return (input - window) / stride + 1;
}

std::pair<std::size_t, std::size_t> same_padding(std::size_t input, std::size_t window, std::size_t stride) {
  const std::size_t out = (input + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + window;
  const std::size_t total = needed > input ? needed - input : 0;
  return {total / 2, total - total / 2};
}

namespace {

thread_local ActivationPatternFreeze* active_freeze = nullptr;

template <typename T>
using Node = detail::Node<T>;

// Right-aligned broadcast strides of `b` against `a`; 0 on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) {
    throw DimensionError("cannot broadcast " + shape_to_string(b) + " against " + shape_to_string(a));
  }
  std::vector<std::size_t> strides(a.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const std::size_t ai = a.size() - 1 - i;
    const std::size_t bi = b.size() - 1 - i;
    if (b[bi] == a[ai]) {
      strides[ai] = b[bi] == 1 ? 0 : stride;
    } else if (b[bi] == 1) {
      strides[ai] = 0;
    } else {
      throw DimensionError("cannot broadcast " + shape_to_string(b) + " against " + shape_to_string(a));
    }
    stride *= b[bi];
  }
  return strides;
}

// Maps every flat index of a-shaped output to the corresponding flat index of b.
std::vector<std::size_t> broadcast_index(const Shape& a, const Shape& b) {
  const auto strides = broadcast_strides(a, b);
  const std::size_t n = numel(a);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(a.size(), 0);
  std::size_t bpos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = bpos;
    for (std::size_t ax = a.size(); ax-- > 0;) {
      ++counter[ax];
      bpos += strides[ax];
      if (counter[ax] < a[ax]) break;
      bpos -= strides[ax] * a[ax];
      counter[ax] = 0;
    }
  }
  return idx;
}

enum class BinaryKind { Add, Sub, Mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  const std::size_t n = a.size();
  const T* av = a.data().data();
  const T* bv = b.data().data();
  std::vector<T> out(n);

  auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinaryKind::Add: return x + y;
      case BinaryKind::Sub: return x - y;
      case BinaryKind::Mul: return x * y;
    }
    return x;
  };

  // Three common layouts get direct loops; anything else uses an index map.
  const bool same = a.shape() == b.shape();
  const std::size_t last = a.shape().back();
  std::vector<std::size_t> map;
  enum class Layout { Same, Trailing, LastSingleton, General } layout = Layout::General;
  if (same) {
    layout = Layout::Same;
  } else {
    broadcast_strides(a.shape(), b.shape());  // validates
    if (b.size() == last && b.shape().back() == last) {
      layout = Layout::Trailing;
    } else if (b.rank() == a.rank() && b.shape().back() == 1 && b.size() * last == n &&
               std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
      layout = Layout::LastSingleton;
    } else {
      map = broadcast_index(a.shape(), b.shape());
    }
  }

  switch (layout) {
    case Layout::Same:
      for (std::size_t i = 0; i < n; ++i) out[i] = apply(av[i], bv[i]);
      break;
    case Layout::Trailing:
      for (std::size_t i = 0; i < n; ++i) out[i] = apply(av[i], bv[i % last]);
      break;
    case Layout::LastSingleton:
      for (std::size_t i = 0; i < n; ++i) out[i] = apply(av[i], bv[i / last]);
      break;
    case Layout::General:
      for (std::size_t i = 0; i < n; ++i) out[i] = apply(av[i], bv[map[i]]);
      break;
  }

  auto bindex = [layout, last, map = std::move(map)](std::size_t i) -> std::size_t {
    switch (layout) {
      case Layout::Same: return i;
      case Layout::Trailing: return i % last;
      case Layout::LastSingleton: return i / last;
      case Layout::General: return map[i];
    }
    return i;
  };

  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [kind, bindex](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const T* g = self.grad.data();
    const std::size_t count = self.data.size();
    if (pa->requires_grad) {
      T* ga = pa->grad_buffer();
      const T* bdata = pb->data.data();
      for (std::size_t i = 0; i < count; ++i) {
        ga[i] += kind == BinaryKind::Mul ? g[i] * bdata[bindex(i)] : g[i];
      }
    }
    if (pb->requires_grad) {
      T* gb = pb->grad_buffer();
      const T* adata = pa->data.data();
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = bindex(i);
        switch (kind) {
          case BinaryKind::Add: gb[j] += g[i]; break;
          case BinaryKind::Sub: gb[j] -= g[i]; break;
          case BinaryKind::Mul: gb[j] += g[i] * adata[i]; break;
        }
      }
    }
  });
}

struct WindowGeometry {
  std::size_t batch, t, h, w, c;
  std::size_t kt, kh, kw;
  std::size_t st, sh, sw;
  std::size_t ot, oh, ow;
  std::size_t pt, ph, pw;  // leading pad
};

WindowGeometry window_geometry(const Shape& in, Extent3 window, Extent3 stride, Padding3 padding) {
  if (in.size() != 4 && in.size() != 5) {
    throw DimensionError("expected [B x T x H x W x C] or [T x H x W x C], got " + shape_to_string(in));
  }
  const std::size_t off = in.size() == 5 ? 1 : 0;
  WindowGeometry g{};
  g.batch = off ? in[0] : 1;
  g.t = in[off];
  g.h = in[off + 1];
  g.w = in[off + 2];
  g.c = in[off + 3];
  g.kt = window[0];
  g.kh = window[1];
  g.kw = window[2];
  g.st = stride[0];
  g.sh = stride[1];
  g.sw = stride[2];
  auto axis = [&](std::size_t n, std::size_t k, std::size_t s, Padding p, std::size_t& o, std::size_t& lead) {
    try {
      o = window_output_extent(n, k, s, p);
    } catch (const DimensionError&) {
      throw DimensionError("window " + std::to_string(window[0]) + "x" + std::to_string(window[1]) + "x" +
                           std::to_string(window[2]) + " does not fit input " + shape_to_string(in));
    }
    lead = p == Padding::Same ? same_padding(n, k, s).first : 0;
  };
  axis(g.t, g.kt, g.st, padding.t, g.ot, g.pt);
  axis(g.h, g.kh, g.sh, padding.h, g.oh, g.ph);
  axis(g.w, g.kw, g.sw, padding.w, g.ow, g.pw);
  return g;
}

Shape window_output_shape(const Shape& in, const WindowGeometry& g, std::size_t channels) {
  if (in.size() == 5) return {g.batch, g.ot, g.oh, g.ow, channels};
  return {g.ot, g.oh, g.ow, channels};
}

// Calls fn(row, column offset in the patch row, input offset, element count)
// once per contiguous run of in-range window cells along W.
template <typename Fn>
void for_each_window_run(const WindowGeometry& g, Fn&& fn) {
  std::size_t row = 0;
  const long t = static_cast<long>(g.t), h = static_cast<long>(g.h), w = static_cast<long>(g.w);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t ot = 0; ot < g.ot; ++ot) {
      for (std::size_t oh = 0; oh < g.oh; ++oh) {
        for (std::size_t ow = 0; ow < g.ow; ++ow, ++row) {
          const long w0 = static_cast<long>(ow * g.sw) - static_cast<long>(g.pw);
          const long kw_lo = std::max(0L, -w0);
          const long kw_hi = std::min(static_cast<long>(g.kw), w - w0);
          if (kw_hi <= kw_lo) continue;
          const std::size_t run = static_cast<std::size_t>(kw_hi - kw_lo) * g.c;
          for (std::size_t kt = 0; kt < g.kt; ++kt) {
            const long it = static_cast<long>(ot * g.st + kt) - static_cast<long>(g.pt);
            if (it < 0 || it >= t) continue;
            for (std::size_t kh = 0; kh < g.kh; ++kh) {
              const long ih = static_cast<long>(oh * g.sh + kh) - static_cast<long>(g.ph);
              if (ih < 0 || ih >= h) continue;
              const std::size_t col = ((kt * g.kh + kh) * g.kw + static_cast<std::size_t>(kw_lo)) * g.c;
              const std::size_t offset =
                  (((b * g.t + static_cast<std::size_t>(it)) * g.h + static_cast<std::size_t>(ih)) * g.w +
                   static_cast<std::size_t>(w0 + kw_lo)) *
                  g.c;
              fn(row, col, offset, run);
            }
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T> im2col(const WindowGeometry& g, const T* input) {
  const std::size_t k = g.kt * g.kh * g.kw * g.c;
  const std::size_t rows = g.batch * g.ot * g.oh * g.ow;
  std::vector<T> patches(rows * k, T(0));
  for_each_window_run(g, [&](std::size_t row, std::size_t col, std::size_t offset, std::size_t n) {
    std::copy_n(input + offset, n, patches.data() + row * k + col);
  });
  return patches;
}

template <typename T>
void col2im_add(const WindowGeometry& g, const T* patches, T* input_grad) {
  const std::size_t k = g.kt * g.kh * g.kw * g.c;
  for_each_window_run(g, [&](std::size_t row, std::size_t col, std::size_t offset, std::size_t n) {
    const T* src = patches + row * k + col;
    T* dst = input_grad + offset;
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  });
}

bool is_pointwise(const WindowGeometry& g) {
  return g.kt == 1 && g.kh == 1 && g.kw == 1 && g.st == 1 && g.sh == 1 && g.sw == 1;
}

template <typename T, typename Fn, typename Dfn>
Tensor<T> unary(const Tensor<T>& x, Fn value, Dfn derivative) {
  std::vector<T> out(x.size());
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(xv[i]);
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [derivative](Node<T>& self) {
    auto& p = self.parents[0];
    T* gx = p->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      gx[i] += self.grad[i] * derivative(p->data[i], self.data[i]);
    }
  });
}

}  // namespace

ActivationPatternFreeze::ActivationPatternFreeze() : previous_(active_freeze) { active_freeze = this; }
ActivationPatternFreeze::~ActivationPatternFreeze() { active_freeze = previous_; }

void ActivationPatternFreeze::replay() {
  replaying_ = true;
  relu_cursor_ = 0;
  pool_cursor_ = 0;
}

ActivationPatternFreeze* ActivationPatternFreeze::active() { return active_freeze; }

const std::vector<unsigned char>* ActivationPatternFreeze::relu_pattern(std::size_t size) {
  if (!replaying_) return nullptr;
  if (relu_cursor_ >= relu_.size() || relu_[relu_cursor_].size() != size) {
    throw ContractError("frozen relu pattern does not match call " + std::to_string(relu_cursor_));
  }
  return &relu_[relu_cursor_++];
}

void ActivationPatternFreeze::record_relu(std::vector<unsigned char> pattern) { relu_.push_back(std::move(pattern)); }

const std::vector<std::size_t>* ActivationPatternFreeze::pool_routes(std::size_t size) {
  if (!replaying_) return nullptr;
  if (pool_cursor_ >= pool_.size() || pool_[pool_cursor_].size() != size) {
    throw ContractError("frozen max-pool routes do not match call " + std::to_string(pool_cursor_));
  }
  return &pool_[pool_cursor_++];
}

void ActivationPatternFreeze::record_pool(std::vector<std::size_t> routes) { pool_.push_back(std::move(routes)); }

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::Add);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::Sub);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::Mul);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) gx[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul needs [m x k] * [k x n], got " + shape_to_string(a.shape()) + " * " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) detail::gemm_nt(m, n, k, self.grad.data(), pb->data.data(), pa->grad_buffer());
    if (pb->requires_grad) detail::gemm_tn(m, n, k, pa->data.data(), self.grad.data(), pb->grad_buffer());
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_to_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  return Tensor<T>::from_op({c, r}, std::move(out), {a}, [r, c](Node<T>& self) {
    T* ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, Extent3 stride, Padding3 padding) {
  if (kernel.rank() != 5) {
    throw DimensionError("conv3d kernel must be [kT x kH x kW x Cin x Cout], got " + shape_to_string(kernel.shape()));
  }
  const auto& ks = kernel.shape();
  const auto g = window_geometry(input.shape(), {ks[0], ks[1], ks[2]}, stride, padding);
  if (ks[3] != g.c) {
    throw DimensionError("conv3d input channels " + std::to_string(g.c) + " do not match kernel " +
                         shape_to_string(ks));
  }
  const std::size_t cout = ks[4];
  const std::size_t rows = g.batch * g.ot * g.oh * g.ow;
  const std::size_t k = g.kt * g.kh * g.kw * g.c;

  std::vector<T> out(rows * cout, T(0));
  if (is_pointwise(g)) {
    detail::gemm_nn(rows, cout, k, input.data().data(), kernel.data().data(), out.data());
  } else {
    const auto patches = im2col(g, input.data().data());
    detail::gemm_nn(rows, cout, k, patches.data(), kernel.data().data(), out.data());
  }

  return Tensor<T>::from_op(window_output_shape(input.shape(), g, cout), std::move(out), {input, kernel},
                            [g, rows, k, cout](Node<T>& self) {
                              auto& pin = self.parents[0];
                              auto& pk = self.parents[1];
                              const bool pointwise = is_pointwise(g);
                              if (pk->requires_grad) {
                                if (pointwise) {
                                  detail::gemm_tn(rows, cout, k, pin->data.data(), self.grad.data(), pk->grad_buffer());
                                } else {
                                  const auto patches = im2col(g, pin->data.data());
                                  detail::gemm_tn(rows, cout, k, patches.data(), self.grad.data(), pk->grad_buffer());
                                }
                              }
                              if (pin->requires_grad) {
                                if (pointwise) {
                                  detail::gemm_nt(rows, cout, k, self.grad.data(), pk->data.data(), pin->grad_buffer());
                                } else {
                                  std::vector<T> dpatches(rows * k, T(0));
                                  detail::gemm_nt(rows, cout, k, self.grad.data(), pk->data.data(), dpatches.data());
                                  col2im_add(g, dpatches.data(), pin->grad_buffer());
                                }
                              }
                            });
}

template <typename T>
Tensor<T> pool3d(const Tensor<T>& input, Extent3 window, Extent3 stride, Padding3 padding, PoolMode mode) {
  const auto g = window_geometry(input.shape(), window, stride, padding);
  const std::size_t rows = g.batch * g.ot * g.oh * g.ow;
  const T* in = input.data().data();
  std::vector<T> out(rows * g.c, mode == PoolMode::Max ? -std::numeric_limits<T>::infinity() : T(0));
  // Max: flat input index of the winner per output element. Average: per-row divisor.
  std::vector<std::size_t> route(mode == PoolMode::Max ? rows * g.c : rows, 0);

  const std::size_t c = g.c;
  auto* freeze = ActivationPatternFreeze::active();
  const std::vector<std::size_t>* frozen = mode == PoolMode::Max && freeze ? freeze->pool_routes(route.size()) : nullptr;
  if (frozen) {
    route = *frozen;
    for (std::size_t o = 0; o < route.size(); ++o) out[o] = in[route[o]];
  } else if (mode == PoolMode::Max) {
    std::vector<unsigned char> filled(rows * c, 0);
    for_each_window_run(g, [&](std::size_t row, std::size_t, std::size_t offset, std::size_t n) {
      T* o = out.data() + row * c;
      std::size_t* r = route.data() + row * c;
      unsigned char* f = filled.data() + row * c;
      for (std::size_t base = 0; base < n; base += c) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T v = in[offset + base + ch];
          // Strict '>' keeps the first maximum in scan order.
          if (!f[ch] || v > o[ch]) {
            o[ch] = v;
            r[ch] = offset + base + ch;
            f[ch] = 1;
          }
        }
      }
    });
  } else {
    for_each_window_run(g, [&](std::size_t row, std::size_t, std::size_t offset, std::size_t n) {
      route[row] += n / c;
      T* o = out.data() + row * c;
      for (std::size_t base = 0; base < n; base += c) {
        for (std::size_t ch = 0; ch < c; ++ch) o[ch] += in[offset + base + ch];
      }
    });
    for (std::size_t row = 0; row < rows; ++row) {
      const T inv = T(1) / static_cast<T>(route[row]);
      for (std::size_t ch = 0; ch < c; ++ch) out[row * c + ch] *= inv;
    }
  }
  if (mode == PoolMode::Max && freeze && !frozen) freeze->record_pool(route);

  return Tensor<T>::from_op(window_output_shape(input.shape(), g, g.c), std::move(out), {input},
                            [g, mode, route = std::move(route)](Node<T>& self) {
                              T* gin = self.parents[0]->grad_buffer();
                              if (mode == PoolMode::Max) {
                                for (std::size_t o = 0; o < self.data.size(); ++o) gin[route[o]] += self.grad[o];
                                return;
                              }
                              for_each_window_run(g, [&](std::size_t row, std::size_t, std::size_t offset, std::size_t n) {
                                const T inv = T(1) / static_cast<T>(route[row]);
                                const T* go = self.grad.data() + row * g.c;
                                for (std::size_t i = 0; i < n; ++i) gin[offset + i] += go[i % g.c] * inv;
                              });
                            });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  if (auto* freeze = ActivationPatternFreeze::active()) {
    const T* xv = x.data().data();
    if (const auto* pattern = freeze->relu_pattern(x.size())) {
      std::vector<T> mask(x.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (*pattern)[i] ? T(1) : T(0);
      return mul(x, Tensor<T>(x.shape(), std::move(mask)));
    }
    std::vector<unsigned char> pattern(x.size());
    for (std::size_t i = 0; i < pattern.size(); ++i) pattern[i] = xv[i] > T(0);
    freeze->record_relu(std::move(pattern));
  }
  return unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::tanh(v); }, [](T, T out) { return T(1) - out * out; });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax needs [batch x K], got " + shape_to_string(logits.shape()));
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  std::vector<T> out(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data().data() + r * k;
    const T top = *std::max_element(z, z + k);
    T total = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      out[r * k + j] = std::exp(z[j] - top);
      total += out[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= total;
  }
  return Tensor<T>(logits.shape(), std::move(out));
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& labels) {
  if (logits.rank() != 2 || labels.shape() != logits.shape()) {
    throw DimensionError("softmax_cross_entropy needs matching [batch x K] logits and labels, got " +
                         shape_to_string(logits.shape()) + " and " + shape_to_string(labels.shape()));
  }
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  const T* y = labels.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const T v = y[r * k + j];
      if (v == T(1)) {
        ++ones;
      } else if (v != T(0)) {
        ones = 2;
      }
    }
    if (ones != 1) throw ContractError("label row " + std::to_string(r) + " is not one-hot");
  }

  const auto probs = softmax(logits);
  const T* z = logits.data().data();
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z + r * k;
    const T top = *std::max_element(zr, zr + k);
    T total = T(0);
    for (std::size_t j = 0; j < k; ++j) total += std::exp(zr[j] - top);
    const T log_norm = top + std::log(total);
    for (std::size_t j = 0; j < k; ++j) {
      if (y[r * k + j] == T(1)) loss += log_norm - zr[j];
    }
  }
  loss /= static_cast<T>(rows);

  return Tensor<T>::from_op({1}, {loss}, {logits, labels}, [probs, rows](Node<T>& self) {
    auto& pl = self.parents[0];
    if (!pl->requires_grad) return;
    T* gz = pl->grad_buffer();
    const T* y = self.parents[1]->data.data();
    const T g = self.grad[0] / static_cast<T>(rows);
    const T* p = probs.data().data();
    for (std::size_t i = 0; i < probs.size(); ++i) gz[i] += g * (p[i] - y[i]);
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range for " + shape_to_string(first));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat along axis " + std::to_string(axis) + " of " + shape_to_string(first) + " and " +
                           shape_to_string(s));
    }
    widths.push_back(s[axis] * inner);
    out_shape[axis] += s[axis];
  }
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(outer * row);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].data().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * widths[p], widths[p], out.data() + o * row + col);
    col += widths[p];
  }
  return Tensor<T>::from_op(std::move(out_shape), std::move(out), parts, [outer, row, widths](Node<T>& self) {
    std::size_t col = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      auto& parent = self.parents[p];
      if (parent->requires_grad) {
        T* dst = parent->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * row + col;
          for (std::size_t i = 0; i < widths[p]; ++i) dst[o * widths[p] + i] += src[i];
        }
      }
      col += widths[p];
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  return Tensor<T>::from_op(std::move(shape), x.values(), {x}, [](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> select(const Tensor<T>& x, std::size_t axis, std::size_t index) {
  const Shape& s = x.shape();
  if (axis >= s.size() || index >= s[axis]) {
    throw DimensionError("select(" + std::to_string(axis) + ", " + std::to_string(index) + ") out of range for " +
                         shape_to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  const std::size_t extent = s[axis];
  std::vector<T> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * extent + index) * inner, inner, out.data() + o * inner);
  return Tensor<T>::from_op(std::move(out_shape), std::move(out), {x}, [outer, inner, extent, index](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) gx[(o * extent + index) * inner + i] += self.grad[o * inner + i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.data()) total += v;
  return Tensor<T>::from_op({1}, {total}, {x}, [](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

#define DIR3D_INSTANTIATE_OPS(T)                                                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> transpose(const Tensor<T>&);                                                         \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, Extent3, Padding3);                       \
  template Tensor<T> pool3d(const Tensor<T>&, Extent3, Extent3, Padding3, PoolMode);                      \
  template Tensor<T> relu(const Tensor<T>&);                                                              \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                           \
  template Tensor<T> tanh(const Tensor<T>&);                                                              \
  template Tensor<T> softmax(const Tensor<T>&);                                                           \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                    \
  template Tensor<T> select(const Tensor<T>&, std::size_t, std::size_t);                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                               \
  template Tensor<T> mean(const Tensor<T>&);

DIR3D_INSTANTIATE_OPS(float)
DIR3D_INSTANTIATE_OPS(double)

#undef DIR3D_INSTANTIATE_OPS

}  // namespace dir3d
