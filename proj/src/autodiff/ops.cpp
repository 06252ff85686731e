#include "zerorf/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>

namespace zerorf::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Multiple of every GEMM row-panel height Eigen uses for float/double.
constexpr std::size_t kGemmRowAlign = 48;

template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

template <typename T>
void require_defined(const char* op, const Tensor<T>& t, const char* name) {
  if (!t.defined()) shape_error(op, std::string("input '") + name + "' is undefined");
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(op, a, "a");
  require_defined(op, b, "b");
  if (a.shape() != b.shape()) {
    shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t rank, const char* name) {
  require_defined(op, t, name);
  if (t.dim() != rank) {
    shape_error(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                        shape_str(t.shape()));
  }
}

// Elementwise unary op with derivative expressed through input and output.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* name, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  require_defined(name, x, "x");
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out(x.shape(), tape != nullptr);
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  if (tape) {
    tape->record(name, [x, out, deriv]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_buffer();
      auto xv = x.values();
      auto ov = out.values();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * deriv(xv[i], ov[i]);
    });
  }
  return out;
}

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Elementwise kernels run on fixed-size aligned chunks so every element
// takes the same SIMD path regardless of buffer address or position.
constexpr Eigen::Index kChunk = 256;
template <typename T>
using Chunk = Eigen::Array<T, kChunk, 1>;

template <typename T>
void load_chunk(Chunk<T>& dst, const T* src, Eigen::Index m) {
  dst.head(m) = ConstArrMap<T>(src, m);
  dst.tail(kChunk - m).setZero();
}

// Vectorized unary op: `fwd(x)` and `deriv(x, y)` act on Eigen arrays.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_array(const char* name, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  require_defined(name, x, "x");
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out(x.shape(), tape != nullptr);
  const auto n = static_cast<Eigen::Index>(x.numel());
  {
    Chunk<T> xc, yc;
    for (Eigen::Index i0 = 0; i0 < n; i0 += kChunk) {
      const Eigen::Index m = std::min(kChunk, n - i0);
      load_chunk(xc, x.values().data() + i0, m);
      yc = fwd(xc);
      ArrMap<T>(out.values().data() + i0, m) = yc.head(m);
    }
  }
  if (tape) {
    tape->record(name, [x, out, deriv, n]() mutable {
      if (!out.has_grad()) return;
      Chunk<T> xc, yc, gc;
      T* gx = x.grad_buffer().data();
      for (Eigen::Index i0 = 0; i0 < n; i0 += kChunk) {
        const Eigen::Index m = std::min(kChunk, n - i0);
        load_chunk(xc, x.values().data() + i0, m);
        load_chunk(yc, out.values().data() + i0, m);
        load_chunk(gc, out.grad().data() + i0, m);
        gc *= deriv(xc, yc);
        ArrMap<T>(gx + i0, m) += gc.head(m);
      }
    });
  }
  return out;
}

template <typename T>
T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

struct LerpTap {
  std::size_t i0;
  std::size_t i1;
  double w1;
};

// Cell-centred lookup: normalized u maps to continuous index u * R - 0.5.
template <typename T>
LerpTap lerp_tap(T u, std::size_t extent) {
  if (extent == 1) return {0, 0, 0.0};
  double x = static_cast<double>(u) * static_cast<double>(extent) - 0.5;
  x = std::clamp(x, 0.0, static_cast<double>(extent - 1));
  auto i0 = std::min(static_cast<std::size_t>(x), extent - 2);
  return {i0, i0 + 1, x - static_cast<double>(i0)};
}

// Tap for 2x upsampling with half-pixel centres: output j samples input j/2 - 0.25.
LerpTap upsample_tap(std::size_t j, std::size_t extent) {
  if (extent == 1) return {0, 0, 0.0};
  double x = static_cast<double>(j) * 0.5 - 0.25;
  x = std::clamp(x, 0.0, static_cast<double>(extent - 1));
  auto i0 = std::min(static_cast<std::size_t>(x), extent - 2);
  return {i0, i0 + 1, x - static_cast<double>(i0)};
}

// Source index for every (kernel tap, output position) of a convolution,
// -1 where the tap reads zero padding.
struct ConvGeometry {
  std::size_t in_h, in_w, k_h, k_w, out_h, out_w;
  std::vector<std::int64_t> source;
};

ConvGeometry build_conv_geometry(const char* op, std::size_t in_h, std::size_t in_w, std::size_t k_h,
                                 std::size_t k_w, std::size_t pad_h, std::size_t pad_w, PadMode mode) {
  if (in_h + 2 * pad_h < k_h || in_w + 2 * pad_w < k_w) {
    shape_error(op, "kernel " + std::to_string(k_h) + "x" + std::to_string(k_w) +
                        " larger than padded input " + std::to_string(in_h) + "x" + std::to_string(in_w));
  }
  ConvGeometry g{in_h, in_w, k_h, k_w, in_h + 2 * pad_h - k_h + 1, in_w + 2 * pad_w - k_w + 1, {}};
  const std::size_t out_n = g.out_h * g.out_w;
  g.source.resize(k_h * k_w * out_n);
  for (std::size_t ky = 0; ky < k_h; ++ky) {
    for (std::size_t kx = 0; kx < k_w; ++kx) {
      auto* row = g.source.data() + (ky * k_w + kx) * out_n;
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          auto iy = static_cast<std::int64_t>(oy + ky) - static_cast<std::int64_t>(pad_h);
          auto ix = static_cast<std::int64_t>(ox + kx) - static_cast<std::int64_t>(pad_w);
          const auto h = static_cast<std::int64_t>(in_h);
          const auto w = static_cast<std::int64_t>(in_w);
          std::int64_t src = -1;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
            src = iy * w + ix;
          } else if (mode == PadMode::kReplicate) {
            src = std::clamp<std::int64_t>(iy, 0, h - 1) * w + std::clamp<std::int64_t>(ix, 0, w - 1);
          }
          row[oy * g.out_w + ox] = src;
        }
      }
    }
  }
  return g;
}

// Geometries are immutable and reused across calls with the same layout.
std::shared_ptr<const ConvGeometry> conv_geometry(const char* op, std::size_t in_h, std::size_t in_w,
                                                  std::size_t k_h, std::size_t k_w, std::size_t pad_h,
                                                  std::size_t pad_w, PadMode mode) {
  using Key = std::array<std::size_t, 7>;
  thread_local std::map<Key, std::shared_ptr<const ConvGeometry>> cache;
  const Key key{in_h, in_w, k_h, k_w, pad_h, pad_w, static_cast<std::size_t>(mode)};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto geom = std::make_shared<const ConvGeometry>(build_conv_geometry(op, in_h, in_w, k_h, k_w, pad_h, pad_w, mode));
  cache.emplace(key, geom);
  return geom;
}

template <typename T>
Tensor<T> conv_impl(const char* op, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                    std::shared_ptr<const ConvGeometry> geom_ptr, Shape out_shape) {
  const ConvGeometry& geom = *geom_ptr;
  const std::size_t c_in = x.size(0);
  const std::size_t c_out = w.size(0);
  const std::size_t taps = geom.k_h * geom.k_w;
  const std::size_t in_n = geom.in_h * geom.in_w;
  const std::size_t out_n = geom.out_h * geom.out_w;
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != c_out)) {
    shape_error(op, "bias shape " + shape_str(bias.shape()) + " does not match " +
                        std::to_string(c_out) + " output channels");
  }

  // im2col. The pixel axis is padded so every pixel runs through the same
  // GEMM micro-kernel; spatially constant inputs then stay bit-constant.
  const std::size_t stride = (out_n + kGemmRowAlign - 1) / kGemmRowAlign * kGemmRowAlign;
  const std::size_t rows = c_in * taps;
  auto cols = std::make_shared<std::vector<T>>(rows * stride, T(0));
  auto xv = x.values();
  for (std::size_t c = 0; c < c_in; ++c) {
    const T* src_plane = xv.data() + c * in_n;
    for (std::size_t k = 0; k < taps; ++k) {
      T* dst = cols->data() + (c * taps + k) * stride;
      const auto* idx = geom.source.data() + k * out_n;
      for (std::size_t o = 0; o < out_n; ++o) dst[o] = idx[o] >= 0 ? src_plane[idx[o]] : T(0);
    }
  }

  auto* tape = recording_tape<T>({&x, &w, &bias});
  Tensor<T> out(std::move(out_shape), tape != nullptr);
  {
    ConstMatMap<T> wm(w.values().data(), c_out, rows);
    ConstMatMap<T> cm(cols->data(), rows, stride);
    RowMat<T> full = wm * cm;
    MatMap<T> om(out.values().data(), c_out, out_n);
    om = full.leftCols(out_n);
    if (bias.defined()) {
      auto bv = bias.values();
      for (std::size_t c = 0; c < c_out; ++c) om.row(c).array() += bv[c];
    }
  }

  if (tape) {
    tape->record(op, [x, w, bias, out, cols, geom_ptr, c_in, c_out, taps, in_n, out_n, stride, rows]() mutable {
      if (!out.has_grad()) return;
      const ConvGeometry& geom = *geom_ptr;
      ConstMatMap<T> gom(out.grad().data(), c_out, out_n);
      if (w.requires_grad()) {
        StridedMap<T> cm(cols->data(), rows, out_n, Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
        MatMap<T> gw(w.grad_buffer().data(), c_out, rows);
        gw.noalias() += gom * cm.transpose();
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        const T* g = out.grad().data();
        for (std::size_t c = 0; c < c_out; ++c) {
          T s = 0;
          for (std::size_t o = 0; o < out_n; ++o) s += g[c * out_n + o];
          gb[c] += s;
        }
      }
      if (x.requires_grad()) {
        ConstMatMap<T> wm(w.values().data(), c_out, rows);
        RowMat<T> gcols = wm.transpose() * gom;
        auto gx = x.grad_buffer();
        for (std::size_t c = 0; c < c_in; ++c) {
          T* dst_plane = gx.data() + c * in_n;
          for (std::size_t k = 0; k < taps; ++k) {
            const T* src = gcols.data() + (c * taps + k) * out_n;
            const auto* idx = geom.source.data() + k * out_n;
            for (std::size_t o = 0; o < out_n; ++o) {
              if (idx[o] >= 0) dst_plane[idx[o]] += src[o];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  auto* tape = recording_tape<T>({&a, &b});
  Tensor<T> out(a.shape(), tape != nullptr);
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (tape) {
    tape->record("add", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  auto* tape = recording_tape<T>({&a, &b});
  Tensor<T> out(a.shape(), tape != nullptr);
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (tape) {
    tape->record("sub", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  auto* tape = recording_tape<T>({&a, &b});
  Tensor<T> out(a.shape(), tape != nullptr);
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (tape) {
    tape->record("mul", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto av = a.values(), bv = b.values();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("div", a, b);
  auto* tape = recording_tape<T>({&a, &b});
  Tensor<T> out(a.shape(), tape != nullptr);
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  if (tape) {
    tape->record("div", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto bv = b.values();
      auto ov = out.values();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i] * ov[i] / bv[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>("scale", a, [factor](T x) { return x * factor; },
                  [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_array<T>("exp", x, [](const auto& v) { return v.exp(); }, [](const auto&, const auto& y) { return y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_array<T>("sigmoid", x, [](const auto& v) { return v.logistic(); },
                        [](const auto&, const auto& y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary_array<T>(
      "silu", x, [](const auto& v) { return v * v.logistic(); },
      [](const auto& v, const auto&) {
        const auto s = v.logistic().eval();
        return (s * (T(1) + v * (T(1) - s))).eval();
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                  [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined("sum", x, "x");
  auto* tape = recording_tape<T>({&x});
  T total = T(0);
  for (T v : x.values()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total, tape != nullptr);
  if (tape) {
    tape->record("sum", [x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (auto& gx : x.grad_buffer()) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require_defined("mean", x, "x");
  auto* tape = recording_tape<T>({&x});
  T total = T(0);
  for (T v : x.values()) total += v;
  const T inv_n = T(1) / static_cast<T>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(total * inv_n, tape != nullptr);
  if (tape) {
    tape->record("mean", [x, out, inv_n]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] * inv_n;
      for (auto& gx : x.grad_buffer()) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2, "a");
  require_rank("matmul", b, 2, "b");
  if (a.size(1) != b.size(0)) {
    shape_error("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  auto* tape = recording_tape<T>({&a, &b});
  Tensor<T> out(Shape{m, n}, tape != nullptr);
  MatMap<T>(out.values().data(), m, n).noalias() =
      ConstMatMap<T>(a.values().data(), m, k) * ConstMatMap<T>(b.values().data(), k, n);
  if (tape) {
    tape->record("matmul", [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      ConstMatMap<T> go(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MatMap<T>(a.grad_buffer().data(), m, k).noalias() +=
            go * ConstMatMap<T>(b.values().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatMap<T>(b.grad_buffer().data(), k, n).noalias() +=
            ConstMatMap<T>(a.values().data(), m, k).transpose() * go;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank("affine", x, 2, "x");
  require_rank("affine", w, 2, "w");
  if (x.size(1) != w.size(0)) {
    shape_error("affine", "inner dimensions differ: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t m = x.size(0), k = x.size(1), n = w.size(1);
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != n)) {
    shape_error("affine", "bias shape " + shape_str(bias.shape()) + " does not match output width " +
                              std::to_string(n));
  }
  auto* tape = recording_tape<T>({&x, &w, &bias});
  Tensor<T> out(Shape{m, n}, tape != nullptr);
  MatMap<T> om(out.values().data(), m, n);
  om.noalias() = ConstMatMap<T>(x.values().data(), m, k) * ConstMatMap<T>(w.values().data(), k, n);
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.values().data(), n);
    om.rowwise() += bv;
  }
  if (tape) {
    tape->record("affine", [x, w, bias, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      ConstMatMap<T> go(out.grad().data(), m, n);
      if (x.requires_grad()) {
        MatMap<T>(x.grad_buffer().data(), m, k).noalias() +=
            go * ConstMatMap<T>(w.values().data(), k, n).transpose();
      }
      if (w.requires_grad()) {
        MatMap<T>(w.grad_buffer().data(), k, n).noalias() +=
            ConstMatMap<T>(x.values().data(), m, k).transpose() * go;
      }
      if (bias.defined() && bias.requires_grad()) {
        // Fixed-order sums; vectorized reductions over a Map depend on its address.
        auto gb = bias.grad_buffer();
        const T* g = out.grad().data();
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> broadcast(const Tensor<T>& x, const Shape& shape) {
  require_defined("broadcast", x, "x");
  const Shape& in = x.shape();
  if (in.size() > shape.size()) {
    shape_error("broadcast", "cannot broadcast " + shape_str(in) + " to lower rank " + shape_str(shape));
  }
  const std::size_t rank = shape.size();
  const std::size_t lead = rank - in.size();
  // Input strides aligned to the output rank; zero on broadcast axes.
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t axis = lead + i;
    if (in[i] == shape[axis]) {
      strides[axis] = stride;
    } else if (in[i] != 1) {
      shape_error("broadcast", "cannot broadcast " + shape_str(in) + " to " + shape_str(shape));
    }
    stride *= in[i];
  }
  // Precompute the source index of every output element.
  const std::size_t n = shape_numel(shape);
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> pos(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    (*map)[o] = src;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++pos[axis];
      src += strides[axis];
      if (pos[axis] < shape[axis]) break;
      src -= strides[axis] * shape[axis];
      pos[axis] = 0;
    }
  }

  auto* tape = recording_tape<T>({&x});
  Tensor<T> out(shape, tape != nullptr);
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t o = 0; o < n; ++o) ov[o] = xv[(*map)[o]];
  if (tape) {
    tape->record("broadcast", [x, out, map]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t o = 0; o < go.size(); ++o) gx[(*map)[o]] += go[o];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  require_defined("reshape", x, "x");
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out(shape, std::vector<T>(x.values().begin(), x.values().end()), tape != nullptr);
  if (tape) {
    tape->record("reshape", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  for (const auto& p : parts) require_defined("concat", p, "part");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_error("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) shape_error("concat", "incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  Tape<T>* tape = nullptr;
  for (const auto& p : parts) {
    if (auto* t = recording_tape<T>({&p})) tape = t;
  }
  Tensor<T> out(out_shape, tape != nullptr);
  auto ov = out.values();
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.shape()[axis] * inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * block, block, ov.data() + o * out_row + offset);
    }
    offset += block;
  }
  if (tape) {
    tape->record("concat", [parts, out, outer, out_row]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t block = p.numel() / outer;
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = go.data() + o * out_row + offset;
            T* dst = gp.data() + o * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
        offset += block;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> index_gather(const Tensor<T>& x, std::span<const std::size_t> indices) {
  require_defined("index_gather", x, "x");
  if (indices.empty()) shape_error("index_gather", "empty index list");
  const std::size_t rows = x.size(0);
  const std::size_t row = x.numel() / rows;
  for (auto i : indices) {
    if (i >= rows) {
      shape_error("index_gather", "index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out(out_shape, tape != nullptr);
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(xv.data() + indices[r] * row, row, ov.data() + r * row);
  }
  if (tape) {
    auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
    tape->record("index_gather", [x, out, idx, row]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < idx->size(); ++r) {
        T* dst = gx.data() + (*idx)[r] * row;
        const T* src = go.data() + r * row;
        for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, ConvOptions options) {
  require_rank("conv1d", x, 2, "x");
  require_rank("conv1d", w, 3, "w");
  if (w.size(1) != x.size(0)) {
    shape_error("conv1d", "kernel " + shape_str(w.shape()) + " expects " + std::to_string(w.size(1)) +
                              " input channels, input is " + shape_str(x.shape()));
  }
  auto geom = conv_geometry("conv1d", 1, x.size(1), 1, w.size(2), 0, options.padding, options.pad_mode);
  Shape out_shape{w.size(0), geom->out_w};
  return conv_impl<T>("conv1d", x, w, bias, geom, std::move(out_shape));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, ConvOptions options) {
  require_rank("conv2d", x, 3, "x");
  require_rank("conv2d", w, 4, "w");
  if (w.size(1) != x.size(0)) {
    shape_error("conv2d", "kernel " + shape_str(w.shape()) + " expects " + std::to_string(w.size(1)) +
                              " input channels, input is " + shape_str(x.shape()));
  }
  auto geom = conv_geometry("conv2d", x.size(1), x.size(2), w.size(2), w.size(3), options.padding,
                            options.padding, options.pad_mode);
  Shape out_shape{w.size(0), geom->out_h, geom->out_w};
  return conv_impl<T>("conv2d", x, w, bias, geom, std::move(out_shape));
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_defined("upsample_nearest2x", x, "x");
  if (x.dim() != 2 && x.dim() != 3) {
    shape_error("upsample_nearest2x", "expects [C,L] or [C,H,W], got " + shape_str(x.shape()));
  }
  const bool two_d = x.dim() == 3;
  const std::size_t c = x.size(0);
  const std::size_t h = two_d ? x.size(1) : 1;
  const std::size_t w = two_d ? x.size(2) : x.size(1);
  const std::size_t oh = two_d ? 2 * h : 1;
  const std::size_t ow = 2 * w;
  Shape out_shape = two_d ? Shape{c, oh, ow} : Shape{c, ow};
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out(out_shape, tape != nullptr);
  auto xv = x.values();
  auto ov = out.values();
  auto src_of = [=](std::size_t ch, std::size_t oy, std::size_t ox) {
    return ch * h * w + (two_d ? oy / 2 : 0) * w + ox / 2;
  };
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) ov[(ch * oh + oy) * ow + ox] = xv[src_of(ch, oy, ox)];
  if (tape) {
    tape->record("upsample_nearest2x", [x, out, c, oh, ow, src_of]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) gx[src_of(ch, oy, ox)] += go[(ch * oh + oy) * ow + ox];
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_linear2x(const Tensor<T>& x) {
  require_defined("upsample_linear2x", x, "x");
  if (x.dim() != 2 && x.dim() != 3) {
    shape_error("upsample_linear2x", "expects [C,L] or [C,H,W], got " + shape_str(x.shape()));
  }
  const bool two_d = x.dim() == 3;
  const std::size_t c = x.size(0);
  const std::size_t h = two_d ? x.size(1) : 1;
  const std::size_t w = two_d ? x.size(2) : x.size(1);
  const std::size_t oh = two_d ? 2 * h : 1;
  const std::size_t ow = 2 * w;
  std::vector<LerpTap> ytaps(oh), xtaps(ow);
  for (std::size_t j = 0; j < oh; ++j) ytaps[j] = two_d ? upsample_tap(j, h) : LerpTap{0, 0, 0.0};
  for (std::size_t j = 0; j < ow; ++j) xtaps[j] = upsample_tap(j, w);
  Shape out_shape = two_d ? Shape{c, oh, ow} : Shape{c, ow};
  auto* tape = recording_tape<T>({&x});
  Tensor<T> out(out_shape, tape != nullptr);
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = xv.data() + ch * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto& ty = ytaps[oy];
      const T wy1 = static_cast<T>(ty.w1), wy0 = T(1) - wy1;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto& tx = xtaps[ox];
        const T wx1 = static_cast<T>(tx.w1), wx0 = T(1) - wx1;
        ov[(ch * oh + oy) * ow + ox] =
            wy0 * (wx0 * plane[ty.i0 * w + tx.i0] + wx1 * plane[ty.i0 * w + tx.i1]) +
            wy1 * (wx0 * plane[ty.i1 * w + tx.i0] + wx1 * plane[ty.i1 * w + tx.i1]);
      }
    }
  }
  if (tape) {
    tape->record("upsample_linear2x", [x, out, c, h, w, oh, ow, ytaps, xtaps]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T* plane = gx.data() + ch * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto& ty = ytaps[oy];
          const T wy1 = static_cast<T>(ty.w1), wy0 = T(1) - wy1;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto& tx = xtaps[ox];
            const T wx1 = static_cast<T>(tx.w1), wx0 = T(1) - wx1;
            const T g = go[(ch * oh + oy) * ow + ox];
            plane[ty.i0 * w + tx.i0] += g * wy0 * wx0;
            plane[ty.i0 * w + tx.i1] += g * wy0 * wx1;
            plane[ty.i1 * w + tx.i0] += g * wy1 * wx0;
            plane[ty.i1 * w + tx.i1] += g * wy1 * wx1;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t groups, T eps) {
  require_defined("group_norm", x, "x");
  require_rank("group_norm", gamma, 1, "gamma");
  require_rank("group_norm", beta, 1, "beta");
  if (x.dim() < 2) shape_error("group_norm", "expects [C, spatial...], got " + shape_str(x.shape()));
  const std::size_t c = x.size(0);
  if (gamma.size(0) != c || beta.size(0) != c) {
    shape_error("group_norm", "affine terms " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                                  " do not match input " + shape_str(x.shape()));
  }
  if (groups == 0 || c % groups != 0) {
    shape_error("group_norm", std::to_string(groups) + " groups do not divide " + std::to_string(c) + " channels");
  }
  const std::size_t spatial = x.numel() / c;
  const std::size_t per_group = c / groups;
  const std::size_t group_n = per_group * spatial;

  auto* tape = recording_tape<T>({&x, &gamma, &beta});
  Tensor<T> out(x.shape(), tape != nullptr);
  auto normalized = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(groups);
  auto xv = x.values();
  auto ov = out.values();
  auto gv = gamma.values(), bv = beta.values();
  for (std::size_t g = 0; g < groups; ++g) {
    const T* xs = xv.data() + g * group_n;
    T mu = T(0);
    for (std::size_t i = 0; i < group_n; ++i) mu += xs[i];
    mu /= static_cast<T>(group_n);
    T var = T(0);
    for (std::size_t i = 0; i < group_n; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    var /= static_cast<T>(group_n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[g] = is;
    T* xh = normalized->data() + g * group_n;
    for (std::size_t i = 0; i < group_n; ++i) xh[i] = (xs[i] - mu) * is;
    for (std::size_t ch = g * per_group; ch < (g + 1) * per_group; ++ch) {
      const T* src = normalized->data() + ch * spatial;
      T* dst = ov.data() + ch * spatial;
      for (std::size_t i = 0; i < spatial; ++i) dst[i] = gv[ch] * src[i] + bv[ch];
    }
  }
  if (tape) {
    tape->record("group_norm", [x, gamma, beta, out, normalized, inv_std, groups, per_group, spatial, group_n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      const auto& xhat = *normalized;
      const std::size_t c = gamma.size(0);
      if (gamma.requires_grad() || beta.requires_grad()) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* g = go.data() + ch * spatial;
          const T* xh = xhat.data() + ch * spatial;
          T dg = T(0), db = T(0);
          for (std::size_t i = 0; i < spatial; ++i) {
            dg += g[i] * xh[i];
            db += g[i];
          }
          if (gamma.requires_grad()) gamma.grad_buffer()[ch] += dg;
          if (beta.requires_grad()) beta.grad_buffer()[ch] += db;
        }
      }
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        auto gv = gamma.values();
        for (std::size_t g = 0; g < groups; ++g) {
          T mean_d = T(0), mean_dx = T(0);
          for (std::size_t ch = g * per_group; ch < (g + 1) * per_group; ++ch) {
            const T* go_c = go.data() + ch * spatial;
            const T* xh = xhat.data() + ch * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              const T d = go_c[i] * gv[ch];
              mean_d += d;
              mean_dx += d * xh[i];
            }
          }
          mean_d /= static_cast<T>(group_n);
          mean_dx /= static_cast<T>(group_n);
          const T is = (*inv_std)[g];
          for (std::size_t ch = g * per_group; ch < (g + 1) * per_group; ++ch) {
            const T* go_c = go.data() + ch * spatial;
            const T* xh = xhat.data() + ch * spatial;
            T* dst = gx.data() + ch * spatial;
            for (std::size_t i = 0; i < spatial; ++i) dst[i] += is * (go_c[i] * gv[ch] - mean_d - xh[i] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear_interp_1d(const Tensor<T>& grid, std::span<const T> coords) {
  require_rank("linear_interp_1d", grid, 2, "grid");
  const std::size_t c = grid.size(0), r = grid.size(1);
  const std::size_t p = coords.size();
  if (p == 0) shape_error("linear_interp_1d", "no query coordinates");
  auto taps = std::make_shared<std::vector<LerpTap>>(p);
  for (std::size_t i = 0; i < p; ++i) (*taps)[i] = lerp_tap(coords[i], r);
  auto* tape = recording_tape<T>({&grid});
  Tensor<T> out(Shape{p, c}, tape != nullptr);
  auto gv = grid.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < p; ++i) {
    const auto& t = (*taps)[i];
    const T w1 = static_cast<T>(t.w1), w0 = T(1) - w1;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* row = gv.data() + ch * r;
      ov[i * c + ch] = w0 * row[t.i0] + w1 * row[t.i1];
    }
  }
  if (tape) {
    tape->record("linear_interp_1d", [grid, out, taps, c, r]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gg = grid.grad_buffer();
      for (std::size_t i = 0; i < taps->size(); ++i) {
        const auto& t = (*taps)[i];
        const T w1 = static_cast<T>(t.w1), w0 = T(1) - w1;
        for (std::size_t ch = 0; ch < c; ++ch) {
          T* row = gg.data() + ch * r;
          const T g = go[i * c + ch];
          row[t.i0] += w0 * g;
          row[t.i1] += w1 * g;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bilinear_interp_2d(const Tensor<T>& grid, std::span<const T> coords) {
  require_rank("bilinear_interp_2d", grid, 3, "grid");
  if (coords.size() % 2 != 0 || coords.empty()) {
    shape_error("bilinear_interp_2d", "coordinates must be non-empty (u,v) pairs, got " +
                                          std::to_string(coords.size()) + " values");
  }
  const std::size_t c = grid.size(0), r0 = grid.size(1), r1 = grid.size(2);
  const std::size_t p = coords.size() / 2;
  auto taps = std::make_shared<std::vector<LerpTap>>(2 * p);
  for (std::size_t i = 0; i < p; ++i) {
    (*taps)[2 * i] = lerp_tap(coords[2 * i], r0);
    (*taps)[2 * i + 1] = lerp_tap(coords[2 * i + 1], r1);
  }
  auto* tape = recording_tape<T>({&grid});
  Tensor<T> out(Shape{p, c}, tape != nullptr);
  auto gv = grid.values();
  auto ov = out.values();
  const std::size_t plane = r0 * r1;
  for (std::size_t i = 0; i < p; ++i) {
    const auto& tu = (*taps)[2 * i];
    const auto& tv = (*taps)[2 * i + 1];
    const T u1 = static_cast<T>(tu.w1), u0 = T(1) - u1;
    const T v1 = static_cast<T>(tv.w1), v0 = T(1) - v1;
    const std::size_t a = tu.i0 * r1 + tv.i0, b = tu.i0 * r1 + tv.i1;
    const std::size_t d = tu.i1 * r1 + tv.i0, e = tu.i1 * r1 + tv.i1;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* m = gv.data() + ch * plane;
      ov[i * c + ch] = u0 * (v0 * m[a] + v1 * m[b]) + u1 * (v0 * m[d] + v1 * m[e]);
    }
  }
  if (tape) {
    tape->record("bilinear_interp_2d", [grid, out, taps, c, r1, plane]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gg = grid.grad_buffer();
      const std::size_t p = taps->size() / 2;
      for (std::size_t i = 0; i < p; ++i) {
        const auto& tu = (*taps)[2 * i];
        const auto& tv = (*taps)[2 * i + 1];
        const T u1 = static_cast<T>(tu.w1), u0 = T(1) - u1;
        const T v1 = static_cast<T>(tv.w1), v0 = T(1) - v1;
        const std::size_t a = tu.i0 * r1 + tv.i0, b = tu.i0 * r1 + tv.i1;
        const std::size_t d = tu.i1 * r1 + tv.i0, e = tu.i1 * r1 + tv.i1;
        for (std::size_t ch = 0; ch < c; ++ch) {
          T* m = gg.data() + ch * plane;
          const T g = go[i * c + ch];
          m[a] += u0 * v0 * g;
          m[b] += u0 * v1 * g;
          m[d] += u1 * v0 * g;
          m[e] += u1 * v1 * g;
        }
      }
    });
  }
  return out;
}

#define ZERORF_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> exp(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> silu(const Tensor<T>&);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> broadcast(const Tensor<T>&, const Shape&);                               \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                 \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                      \
  template Tensor<T> index_gather(const Tensor<T>&, std::span<const std::size_t>);            \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvOptions); \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvOptions); \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                    \
  template Tensor<T> upsample_linear2x(const Tensor<T>&);                                     \
  template Tensor<T> group_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                std::size_t, T);                                              \
  template Tensor<T> linear_interp_1d(const Tensor<T>&, std::span<const T>);                  \
  template Tensor<T> bilinear_interp_2d(const Tensor<T>&, std::span<const T>);

ZERORF_INSTANTIATE_OPS(float)
ZERORF_INSTANTIATE_OPS(double)

}  // namespace zerorf::ops
