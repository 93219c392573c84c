// Copyright (c) 2026, The rfwp Authors
// SPDX-License-Identifier: Apache-2.0

#include "rfwp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "rfwp/rng.hpp"

namespace rfwp {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

template <typename T>
void accumulate(T* dst, const T* src, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Shape of `x` with the last axis replaced.
Shape with_cols(const Shape& shape, std::size_t cols) {
  Shape out = shape;
  if (out.empty()) return Shape{cols};
  out.back() = cols;
  return out;
}

struct HeadLayout {
  std::size_t batch, heads, m, n;
};

template <typename T>
HeadLayout head_layout(const Var<T>& w, std::size_t vec_rows, const char* op) {
  if (w.shape().size() != 3) {
    throw DimensionError(std::string(op) + ": fast weights must be [B*H, m, n], got " +
                         shape_string(w.shape()));
  }
  const std::size_t groups = w.shape()[0];
  if (vec_rows == 0 || groups % vec_rows != 0) {
    throw DimensionError(std::string(op) + ": batch does not divide head stack");
  }
  return {vec_rows, groups / vec_rows, w.shape()[1], w.shape()[2]};
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  Tensor<T> out(Shape{a.shape()[0], b.shape()[1]});
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.value().data(), m, k) * ConstMatMap<T>(b.value().data(), k, n);
  return make_result(std::move(out), tracking<T>({&a, &b}), [a, b, m, k, n](Node<T>& self) {
    ConstMatMap<T> g(self.grad.data(), m, n);
    if (T* ga = grad_of(a)) {
      MatMap<T>(ga, m, k).noalias() += g * ConstMatMap<T>(b.value().data(), k, n).transpose();
    }
    if (T* gb = grad_of(b)) {
      MatMap<T>(gb, k, n).noalias() += ConstMatMap<T>(a.value().data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  if (w.shape().size() != 2 || x.value().cols() != w.shape()[1] || x.shape().empty()) {
    throw DimensionError("linear: input " + shape_string(x.shape()) +
                         " does not match weight " + shape_string(w.shape()));
  }
  const auto rows = static_cast<Eigen::Index>(x.value().rows());
  const auto in = static_cast<Eigen::Index>(w.shape()[1]);
  const auto out_dim = static_cast<Eigen::Index>(w.shape()[0]);
  Tensor<T> out(with_cols(x.shape(), w.shape()[0]));
  MatMap<T>(out.data(), rows, out_dim).noalias() =
      ConstMatMap<T>(x.value().data(), rows, in) *
      ConstMatMap<T>(w.value().data(), out_dim, in).transpose();
  return make_result(std::move(out), tracking<T>({&x, &w}),
                     [x, w, rows, in, out_dim](Node<T>& self) {
                       ConstMatMap<T> g(self.grad.data(), rows, out_dim);
                       if (T* gx = grad_of(x)) {
                         MatMap<T>(gx, rows, in).noalias() +=
                             g * ConstMatMap<T>(w.value().data(), out_dim, in);
                       }
                       if (T* gw = grad_of(w)) {
                         MatMap<T>(gw, out_dim, in).noalias() +=
                             g.transpose() * ConstMatMap<T>(x.value().data(), rows, in);
                       }
                     });
}

template <typename T>
Var<T> outer(const Var<T>& u, const Var<T>& v) {
  if (u.shape().size() != 1 || v.shape().size() != 1) {
    throw DimensionError("outer: both operands must be vectors");
  }
  const std::size_t m = u.size(), n = v.size();
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = u.value()[i] * v.value()[j];
  }
  return make_result(std::move(out), tracking<T>({&u, &v}), [u, v, m, n](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* gu = grad_of(u)) {
      for (std::size_t i = 0; i < m; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * v.value()[j];
        gu[i] += acc;
      }
    }
    if (T* gv = grad_of(v)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j] * u.value()[i];
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  accumulate(out.data(), b.value().data(), out.size());
  return make_result(std::move(out), tracking<T>({&a, &b}), [a, b](Node<T>& self) {
    if (T* ga = grad_of(a)) accumulate(ga, self.grad.data(), self.grad.size());
    if (T* gb = grad_of(b)) accumulate(gb, self.grad.data(), self.grad.size());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(std::move(out), tracking<T>({&a, &b}), [a, b](Node<T>& self) {
    if (T* ga = grad_of(a)) accumulate(ga, self.grad.data(), self.grad.size());
    if (T* gb = grad_of(b)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(std::move(out), tracking<T>({&a, &b}), [a, b](Node<T>& self) {
    const T* g = self.grad.data();
    if (T* ga = grad_of(a)) {
      const T* bv = b.value().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (T* gb = grad_of(b)) {
      const T* av = a.value().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.storage()) v *= factor;
  return make_result(std::move(out), tracking<T>({&a}), [a, factor](Node<T>& self) {
    T* ga = grad_of(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += factor * self.grad[i];
  });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& bias) {
  const std::size_t cols = x.value().cols();
  if (bias.size() != cols) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.value().rows();
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) accumulate(out.data() + r * cols, bias.value().data(), cols);
  return make_result(std::move(out), tracking<T>({&x, &bias}), [x, bias, rows, cols](Node<T>& self) {
    if (T* gx = grad_of(x)) accumulate(gx, self.grad.data(), self.grad.size());
    if (T* gb = grad_of(bias)) {
      for (std::size_t r = 0; r < rows; ++r) accumulate(gb, self.grad.data() + r * cols, cols);
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v = stable_sigmoid(v);
  return make_result(std::move(out), tracking<T>({&x}), [x](Node<T>& self) {
    T* gx = grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.value[i];
      gx[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v = std::tanh(v);
  return make_result(std::move(out), tracking<T>({&x}), [x](Node<T>& self) {
    T* gx = grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.value[i];
      gx[i] += self.grad[i] * (T(1) - y * y);
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.storage()) v = v > T(0) ? v : T(0);
  return make_result(std::move(out), tracking<T>({&x}), [x](Node<T>& self) {
    T* gx = grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (x.value()[i] > T(0)) gx[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t group) {
  const std::size_t cols = x.value().cols();
  if (group == 0) group = cols;
  if (cols % group != 0) {
    throw DimensionError("softmax: group " + std::to_string(group) + " does not divide " +
                         std::to_string(cols));
  }
  Tensor<T> out = x.value();
  const std::size_t segments = out.size() / group;
  for (std::size_t s = 0; s < segments; ++s) {
    T* p = out.data() + s * group;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < group; ++i) {
      if (std::isnan(p[i])) throw NumericError("softmax: NaN input");
      mx = std::max(mx, p[i]);
    }
    T total = 0;
    for (std::size_t i = 0; i < group; ++i) {
      p[i] = std::exp(p[i] - mx);
      total += p[i];
    }
    const T inv = T(1) / total;
    for (std::size_t i = 0; i < group; ++i) p[i] *= inv;
  }
  return make_result(std::move(out), tracking<T>({&x}), [x, group, segments](Node<T>& self) {
    T* gx = grad_of(x);
    for (std::size_t s = 0; s < segments; ++s) {
      const T* y = self.value.data() + s * group;
      const T* g = self.grad.data() + s * group;
      T dot = 0;
      for (std::size_t i = 0; i < group; ++i) dot += g[i] * y[i];
      T* dst = gx + s * group;
      for (std::size_t i = 0; i < group; ++i) dst[i] += y[i] * (g[i] - dot);
    }
  });
}

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t cols = x.value().cols();
  if (gain.size() != cols || bias.size() != cols) {
    throw DimensionError("layernorm: gain/bias do not match " + shape_string(x.shape()));
  }
  const std::size_t rows = x.value().rows();
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data() + r * cols;
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= T(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= T(cols);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (in[c] - mu) * is;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * gain.value()[c] + bias.value()[c];
    }
  }
  return make_result(
      std::move(out), tracking<T>({&x, &gain, &bias}),
      [x, gain, bias, xhat, inv_std, rows, cols](Node<T>& self) {
        T* gx = grad_of(x);
        T* gg = grad_of(gain);
        T* gb = grad_of(bias);
        std::vector<T> dh(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * cols;
          const T* h = xhat->data() + r * cols;
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            if (gg) gg[c] += g[c] * h[c];
            if (gb) gb[c] += g[c];
            dh[c] = g[c] * gain.value()[c];
            mean_dh += dh[c];
            mean_dh_h += dh[c] * h[c];
          }
          if (!gx) continue;
          mean_dh /= T(cols);
          mean_dh_h /= T(cols);
          T* dst = gx + r * cols;
          const T is = (*inv_std)[r];
          for (std::size_t c = 0; c < cols; ++c) dst[c] += is * (dh[c] - mean_dh - h[c] * mean_dh_h);
        }
      });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, DropoutStream& stream) {
  if (!stream.training || rate <= 0.0) return x;
  if (rate >= 1.0) throw UsageError("dropout: rate must be below 1");
  const std::uint64_t call = hash_combine(stream.seed, stream.counter++);
  auto mask = std::make_shared<std::vector<T>>(x.size());
  const T keep_scale = T(1.0 / (1.0 - rate));
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool keep = unit_interval(hash_combine(call, i)) >= rate;
    (*mask)[i] = keep ? keep_scale : T(0);
    out[i] *= (*mask)[i];
  }
  return make_result(std::move(out), tracking<T>({&x}), [x, mask](Node<T>& self) {
    T* gx = grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * (*mask)[i];
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.value().rows();
  }
  Tensor<T> out(Shape{rows, cols});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.size(), out.data() + offset);
    offset += p.size();
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), tracking<T>(parts), [inputs](Node<T>& self) {
    std::size_t off = 0;
    for (const auto& p : inputs) {
      if (T* gp = grad_of(p)) accumulate(gp, self.grad.data() + off, p.size());
      off += p.size();
    }
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += p.value().cols();
  }
  Tensor<T> out(Shape{rows, cols});
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(p.value().data() + r * pc, p.value().data() + (r + 1) * pc,
                out.data() + r * cols + c0);
    }
    c0 += pc;
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), tracking<T>(parts), [inputs, rows, cols](Node<T>& self) {
    std::size_t off = 0;
    for (const auto& p : inputs) {
      const std::size_t pc = p.value().cols();
      if (T* gp = grad_of(p)) {
        for (std::size_t r = 0; r < rows; ++r) accumulate(gp + r * pc, self.grad.data() + r * cols + off, pc);
      }
      off += pc;
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t cols = x.value().cols();
  if (count == 0 || begin + count > x.value().rows()) {
    throw DimensionError("slice_rows: range out of bounds");
  }
  Tensor<T> out(Shape{count, cols},
                std::vector<T>(x.value().data() + begin * cols,
                               x.value().data() + (begin + count) * cols));
  return make_result(std::move(out), tracking<T>({&x}), [x, begin, cols](Node<T>& self) {
    accumulate(grad_of(x) + begin * cols, self.grad.data(), self.grad.size());
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t cols = x.value().cols();
  const std::size_t rows = x.value().rows();
  if (count == 0 || begin + count > cols) throw DimensionError("slice_cols: range out of bounds");
  Tensor<T> out(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(x.value().data() + r * cols + begin, x.value().data() + r * cols + begin + count,
              out.data() + r * count);
  }
  return make_result(std::move(out), tracking<T>({&x}), [x, begin, count, rows, cols](Node<T>& self) {
    T* gx = grad_of(x);
    for (std::size_t r = 0; r < rows; ++r) accumulate(gx + r * cols + begin, self.grad.data() + r * count, count);
  });
}

template <typename T>
Var<T> gather_cols(const Var<T>& x, std::shared_ptr<const std::vector<std::size_t>> index) {
  const std::size_t cols = x.value().cols();
  const std::size_t rows = x.value().rows();
  const std::size_t k = index->size();
  for (std::size_t c : *index) {
    if (c >= cols) throw DimensionError("gather_cols: index out of range");
  }
  Tensor<T> out(Shape{rows, k});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x.value()[r * cols + (*index)[j]];
  }
  return make_result(std::move(out), tracking<T>({&x}), [x, index, rows, cols, k](Node<T>& self) {
    T* gx = grad_of(x);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < k; ++j) gx[r * cols + (*index)[j]] += self.grad[r * k + j];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), tracking<T>({&x}), [x](Node<T>& self) {
    accumulate(grad_of(x), self.grad.data(), self.grad.size());
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (T v : x.value().span()) total += v;
  return make_result(Tensor<T>::scalar(total), tracking<T>({&x}), [x](Node<T>& self) {
    T* gx = grad_of(x);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / T(x.size()));
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  if (weights.size() != x.size()) throw DimensionError("weighted_sum: size mismatch");
  T total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) total += x.value()[i] * weights[i];
  return make_result(Tensor<T>::scalar(total), tracking<T>({&x}), [x, weights](Node<T>& self) {
    T* gx = grad_of(x);
    const T g = self.grad[0];
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g * weights[i];
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  if (table.shape().size() != 2) throw DimensionError("embedding: table must be a matrix");
  const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Tensor<T> out(Shape{ids.size(), dim});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(ids[r]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    const T* src = table.value().data() + static_cast<std::size_t>(ids[r]) * dim;
    std::copy(src, src + dim, out.data() + r * dim);
  }
  std::vector<int> kept(ids.begin(), ids.end());
  return make_result(std::move(out), tracking<T>({&table}), [table, kept, dim](Node<T>& self) {
    T* gt = grad_of(table);
    for (std::size_t r = 0; r < kept.size(); ++r) {
      accumulate(gt + static_cast<std::size_t>(kept[r]) * dim, self.grad.data() + r * dim, dim);
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, T normalizer) {
  const std::size_t classes = logits.value().cols();
  const std::size_t rows = logits.value().rows();
  if (targets.size() != rows) throw DimensionError("cross_entropy: target count mismatch");
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.value().data() + r * classes;
    T* p = probs->data() + r * classes;
    T mx = *std::max_element(z, z + classes);
    T s = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      p[c] = std::exp(z[c] - mx);
      s += p[c];
    }
    for (std::size_t c = 0; c < classes; ++c) p[c] /= s;
    const int t = targets[r];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= classes) throw DimensionError("cross_entropy: target out of range");
    total += (std::log(s) + mx - z[t]);
  }
  std::vector<int> kept(targets.begin(), targets.end());
  return make_result(Tensor<T>::scalar(total / normalizer), tracking<T>({&logits}),
                     [logits, probs, kept, classes, normalizer](Node<T>& self) {
                       T* gl = grad_of(logits);
                       const T g = self.grad[0] / normalizer;
                       for (std::size_t r = 0; r < kept.size(); ++r) {
                         if (kept[r] < 0) continue;
                         const T* p = probs->data() + r * classes;
                         T* dst = gl + r * classes;
                         for (std::size_t c = 0; c < classes; ++c) dst[c] += g * p[c];
                         dst[kept[r]] -= g;
                       }
                     });
}

template <typename T>
Var<T> head_matvec(const Var<T>& w, const Var<T>& x) {
  const HeadLayout L = head_layout(w, x.value().rows(), "head_matvec");
  if (x.value().cols() != L.heads * L.n) {
    throw DimensionError("head_matvec: vector " + shape_string(x.shape()) +
                         " does not match fast weights " + shape_string(w.shape()));
  }
  Tensor<T> out(Shape{L.batch, L.heads * L.m});
  const T* W = w.value().data();
  const T* X = x.value().data();
  for (std::size_t g = 0; g < L.batch * L.heads; ++g) {
    const T* Wg = W + g * L.m * L.n;
    const T* xg = X + g * L.n;
    T* yg = out.data() + g * L.m;
    for (std::size_t i = 0; i < L.m; ++i) {
      T acc = 0;
      const T* row = Wg + i * L.n;
      for (std::size_t j = 0; j < L.n; ++j) acc += row[j] * xg[j];
      yg[i] = acc;
    }
  }
  return make_result(std::move(out), tracking<T>({&w, &x}), [w, x, L](Node<T>& self) {
    T* gw = grad_of(w);
    T* gx = grad_of(x);
    const T* W = w.value().data();
    const T* X = x.value().data();
    for (std::size_t g = 0; g < L.batch * L.heads; ++g) {
      const T* dy = self.grad.data() + g * L.m;
      const T* xg = X + g * L.n;
      const T* Wg = W + g * L.m * L.n;
      for (std::size_t i = 0; i < L.m; ++i) {
        const T d = dy[i];
        if (gw) {
          T* row = gw + g * L.m * L.n + i * L.n;
          for (std::size_t j = 0; j < L.n; ++j) row[j] += d * xg[j];
        }
        if (gx) {
          T* dx = gx + g * L.n;
          const T* wrow = Wg + i * L.n;
          for (std::size_t j = 0; j < L.n; ++j) dx[j] += d * wrow[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> head_outer_add(const Var<T>& w, const Var<T>& a, const Var<T>& k) {
  const HeadLayout L = head_layout(w, a.value().rows(), "head_outer_add");
  if (a.value().cols() != L.heads * L.m || k.value().cols() != L.heads * L.n ||
      k.value().rows() != L.batch) {
    throw DimensionError("head_outer_add: update vectors do not match fast weights " +
                         shape_string(w.shape()));
  }
  Tensor<T> out = w.value();
  const T* A = a.value().data();
  const T* K = k.value().data();
  for (std::size_t g = 0; g < L.batch * L.heads; ++g) {
    T* Wg = out.data() + g * L.m * L.n;
    const T* ag = A + g * L.m;
    const T* kg = K + g * L.n;
    for (std::size_t i = 0; i < L.m; ++i) {
      const T ai = ag[i];
      T* row = Wg + i * L.n;
      for (std::size_t j = 0; j < L.n; ++j) row[j] += ai * kg[j];
    }
  }
  return make_result(std::move(out), tracking<T>({&w, &a, &k}), [w, a, k, L](Node<T>& self) {
    if (T* gw = grad_of(w)) accumulate(gw, self.grad.data(), self.grad.size());
    T* ga = grad_of(a);
    T* gk = grad_of(k);
    if (!ga && !gk) return;
    const T* A = a.value().data();
    const T* K = k.value().data();
    for (std::size_t g = 0; g < L.batch * L.heads; ++g) {
      const T* G = self.grad.data() + g * L.m * L.n;
      const T* ag = A + g * L.m;
      const T* kg = K + g * L.n;
      for (std::size_t i = 0; i < L.m; ++i) {
        const T* row = G + i * L.n;
        if (ga) {
          T acc = 0;
          for (std::size_t j = 0; j < L.n; ++j) acc += row[j] * kg[j];
          ga[g * L.m + i] += acc;
        }
        if (gk) {
          T* dk = gk + g * L.n;
          const T ai = ag[i];
          for (std::size_t j = 0; j < L.n; ++j) dk[j] += ai * row[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> head_delta_update(const Var<T>& w, const Var<T>& k, const Var<T>& v, const Var<T>& beta) {
  const HeadLayout L = head_layout(w, k.value().rows(), "head_delta_update");
  if (k.value().cols() != L.heads * L.n || v.value().cols() != L.heads * L.m ||
      v.value().rows() != L.batch || beta.value().rows() != L.batch ||
      beta.value().cols() != L.heads) {
    throw DimensionError("head_delta_update: k/v/beta do not match fast weights " +
                         shape_string(w.shape()));
  }
  const std::size_t groups = L.batch * L.heads;
  auto residual = std::make_shared<std::vector<T>>(groups * L.m);
  Tensor<T> out = w.value();
  const T* K = k.value().data();
  const T* V = v.value().data();
  for (std::size_t g = 0; g < groups; ++g) {
    T* Wg = out.data() + g * L.m * L.n;
    const T* kg = K + g * L.n;
    const T b = beta.value()[g];
    T* e = residual->data() + g * L.m;
    for (std::size_t i = 0; i < L.m; ++i) {
      const T* row = Wg + i * L.n;
      T acc = 0;
      for (std::size_t j = 0; j < L.n; ++j) acc += row[j] * kg[j];
      e[i] = V[g * L.m + i] - acc;
    }
    for (std::size_t i = 0; i < L.m; ++i) {
      const T s = b * e[i];
      T* row = Wg + i * L.n;
      for (std::size_t j = 0; j < L.n; ++j) row[j] += s * kg[j];
    }
  }
  return make_result(
      std::move(out), tracking<T>({&w, &k, &v, &beta}),
      [w, k, v, beta, L, residual](Node<T>& self) {
        T* gw = grad_of(w);
        T* gk = grad_of(k);
        T* gv = grad_of(v);
        T* gb = grad_of(beta);
        std::vector<T> gk_vec(L.m);
        for (std::size_t g = 0; g < L.batch * L.heads; ++g) {
          const T* G = self.grad.data() + g * L.m * L.n;
          const T* W = w.value().data() + g * L.m * L.n;
          const T* kg = k.value().data() + g * L.n;
          const T* e = residual->data() + g * L.m;
          const T b = beta.value()[g];
          for (std::size_t i = 0; i < L.m; ++i) {
            const T* row = G + i * L.n;
            T acc = 0;
            for (std::size_t j = 0; j < L.n; ++j) acc += row[j] * kg[j];
            gk_vec[i] = acc;
          }
          if (gw) {
            T* dW = gw + g * L.m * L.n;
            for (std::size_t i = 0; i < L.m; ++i) {
              const T s = b * gk_vec[i];
              for (std::size_t j = 0; j < L.n; ++j) dW[i * L.n + j] += G[i * L.n + j] - s * kg[j];
            }
          }
          if (gv) {
            for (std::size_t i = 0; i < L.m; ++i) gv[g * L.m + i] += b * gk_vec[i];
          }
          if (gb) {
            T acc = 0;
            for (std::size_t i = 0; i < L.m; ++i) acc += e[i] * gk_vec[i];
            gb[g] += acc;
          }
          if (gk) {
            T* dk = gk + g * L.n;
            for (std::size_t i = 0; i < L.m; ++i) {
              const T a = b * e[i];
              const T c = b * gk_vec[i];
              for (std::size_t j = 0; j < L.n; ++j) dk[j] += a * G[i * L.n + j] - c * W[i * L.n + j];
            }
          }
        }
      });
}

template <typename T>
Var<T> head_scale(const Var<T>& x, const Var<T>& s) {
  const std::size_t batch = x.value().rows();
  const std::size_t heads = s.value().cols();
  if (s.value().rows() != batch || heads == 0 || x.value().cols() % heads != 0) {
    throw DimensionError("head_scale: scale " + shape_string(s.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  const std::size_t m = x.value().cols() / heads;
  Tensor<T> out = x.value();
  for (std::size_t g = 0; g < batch * heads; ++g) {
    const T f = s.value()[g];
    for (std::size_t i = 0; i < m; ++i) out[g * m + i] *= f;
  }
  return make_result(std::move(out), tracking<T>({&x, &s}), [x, s, batch, heads, m](Node<T>& self) {
    T* gx = grad_of(x);
    T* gs = grad_of(s);
    for (std::size_t g = 0; g < batch * heads; ++g) {
      const T* d = self.grad.data() + g * m;
      if (gx) {
        const T f = s.value()[g];
        for (std::size_t i = 0; i < m; ++i) gx[g * m + i] += d[i] * f;
      }
      if (gs) {
        const T* xv = x.value().data() + g * m;
        T acc = 0;
        for (std::size_t i = 0; i < m; ++i) acc += d[i] * xv[i];
        gs[g] += acc;
      }
    }
  });
}

template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch,
                        std::size_t heads, std::size_t q_offset) {
  const std::size_t d = q.value().cols();
  if (k.value().cols() != d || v.value().cols() != d || heads == 0 || d % heads != 0) {
    throw DimensionError("causal_attention: projection widths disagree");
  }
  if (q.value().rows() % batch != 0 || k.value().rows() % batch != 0 ||
      v.value().rows() != k.value().rows()) {
    throw DimensionError("causal_attention: rows are not a multiple of the batch");
  }
  const std::size_t tq = q.value().rows() / batch;
  const std::size_t tk = k.value().rows() / batch;
  if (q_offset + tq > tk) throw DimensionError("causal_attention: queries run past the keys");
  const std::size_t dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(T(dh));
  Tensor<T> out(Shape{tq * batch, d});
  std::vector<T> p(tk);
  const T* Q = q.value().data();
  const T* K = k.value().data();
  const T* V = v.value().data();
  for (std::size_t i = 0; i < tq; ++i) {
    const std::size_t last = q_offset + i;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const T* qv = Q + (i * batch + b) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= last; ++j) {
          const T* kv = K + (j * batch + b) * d + h * dh;
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qv[c] * kv[c];
          p[j] = s * scale_factor;
          mx = std::max(mx, p[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j <= last; ++j) {
          p[j] = std::exp(p[j] - mx);
          total += p[j];
        }
        T* o = out.data() + (i * batch + b) * d + h * dh;
        for (std::size_t j = 0; j <= last; ++j) {
          const T w = p[j] / total;
          const T* vv = V + (j * batch + b) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += w * vv[c];
        }
      }
    }
  }
  return make_result(
      std::move(out), tracking<T>({&q, &k, &v}),
      [q, k, v, batch, heads, q_offset, tq, tk, d, dh, scale_factor](Node<T>& self) {
        T* gq = grad_of(q);
        T* gk = grad_of(k);
        T* gv = grad_of(v);
        const T* Q = q.value().data();
        const T* K = k.value().data();
        const T* V = v.value().data();
        std::vector<T> p(tk), dp(tk);
        for (std::size_t i = 0; i < tq; ++i) {
          const std::size_t last = q_offset + i;
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
              const T* qv = Q + (i * batch + b) * d + h * dh;
              const T* go = self.grad.data() + (i * batch + b) * d + h * dh;
              T mx = -std::numeric_limits<T>::infinity();
              for (std::size_t j = 0; j <= last; ++j) {
                const T* kv = K + (j * batch + b) * d + h * dh;
                T s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += qv[c] * kv[c];
                p[j] = s * scale_factor;
                mx = std::max(mx, p[j]);
              }
              T total = 0;
              for (std::size_t j = 0; j <= last; ++j) {
                p[j] = std::exp(p[j] - mx);
                total += p[j];
              }
              T weighted = 0;
              for (std::size_t j = 0; j <= last; ++j) {
                p[j] /= total;
                const T* vv = V + (j * batch + b) * d + h * dh;
                T s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vv[c];
                dp[j] = s;
                weighted += p[j] * s;
                if (gv) {
                  T* dv = gv + (j * batch + b) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dv[c] += p[j] * go[c];
                }
              }
              for (std::size_t j = 0; j <= last; ++j) {
                const T ds = p[j] * (dp[j] - weighted) * scale_factor;
                const T* kv = K + (j * batch + b) * d + h * dh;
                if (gq) {
                  T* dq = gq + (i * batch + b) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dq[c] += ds * kv[c];
                }
                if (gk) {
                  T* dk = gk + (j * batch + b) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dk[c] += ds * qv[c];
                }
              }
            }
          }
        }
      });
}

#define RFWP_INSTANTIATE_OPS(T)                                                            \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                    \
  template Var<T> linear(const Var<T>&, const Var<T>&);                                    \
  template Var<T> outer(const Var<T>&, const Var<T>&);                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                       \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                       \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                       \
  template Var<T> scale(const Var<T>&, T);                                                 \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                   \
  template Var<T> sigmoid(const Var<T>&);                                                  \
  template Var<T> tanh(const Var<T>&);                                                     \
  template Var<T> relu(const Var<T>&);                                                     \
  template Var<T> softmax(const Var<T>&, std::size_t);                                     \
  template Var<T> layernorm(const Var<T>&, const Var<T>&, const Var<T>&, T);               \
  template Var<T> dropout(const Var<T>&, double, DropoutStream&);                          \
  template Var<T> concat_rows(std::span<const Var<T>>);                                    \
  template Var<T> concat_cols(std::span<const Var<T>>);                                    \
  template Var<T> slice_rows(const Var<T>&, std::size_t, std::size_t);                     \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);                     \
  template Var<T> gather_cols(const Var<T>&, std::shared_ptr<const std::vector<std::size_t>>); \
  template Var<T> reshape(const Var<T>&, Shape);                                           \
  template Var<T> sum(const Var<T>&);                                                      \
  template Var<T> mean(const Var<T>&);                                                     \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                           \
  template Var<T> embedding(const Var<T>&, std::span<const int>);                          \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>, T);                   \
  template Var<T> head_matvec(const Var<T>&, const Var<T>&);                               \
  template Var<T> head_outer_add(const Var<T>&, const Var<T>&, const Var<T>&);             \
  template Var<T> head_delta_update(const Var<T>&, const Var<T>&, const Var<T>&,             \
                                    const Var<T>&);                                        \
  template Var<T> head_scale(const Var<T>&, const Var<T>&);                                \
  template Var<T> causal_attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, \
                                   std::size_t, std::size_t);

RFWP_INSTANTIATE_OPS(float)
RFWP_INSTANTIATE_OPS(double)

}  // namespace rfwp
