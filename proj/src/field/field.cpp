#include "zerorf/field.hpp"

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

namespace zerorf {

std::string to_string(FactorMode mode) {
  return mode == FactorMode::kVM ? "vm" : "triplane";
}

template <typename T>
void FactorizedField<T>::validate() const {
  for (std::size_t a = 0; a < 3; ++a) {
    if (!matrices[a].defined() || matrices[a].dim() != 3) {
      throw std::invalid_argument("matrix factor " + std::to_string(a) + " must be [C,R,R]");
    }
    if (!vectors[a].defined() || vectors[a].dim() != 2) {
      throw std::invalid_argument("vector factor " + std::to_string(a) + " must be [C,R]");
    }
  }
  const std::size_t c = channels(), r = resolution();
  for (std::size_t a = 0; a < 3; ++a) {
    if (matrices[a].shape() != Shape{c, r, r} || vectors[a].shape() != Shape{c, r}) {
      throw std::invalid_argument("factor pair " + std::to_string(a) + " has shapes " +
                                  shape_str(vectors[a].shape()) + " / " + shape_str(matrices[a].shape()) +
                                  ", expected [" + std::to_string(c) + "," + std::to_string(r) + "] / [" +
                                  std::to_string(c) + "," + std::to_string(r) + "," + std::to_string(r) + "]");
    }
    if (mode == FactorMode::kTriplane) {
      if (vectors[a].requires_grad()) {
        throw std::invalid_argument("triplane vector factors must not be trainable");
      }
      for (T v : vectors[a].values()) {
        if (v != T(1)) throw std::invalid_argument("triplane vector factors must be exactly 1");
      }
    }
  }
  if (!(half_extent > 0.0)) throw std::invalid_argument("bounding box half-extent must be positive");
}

template <typename T>
std::array<Tensor<T>, 3> unit_vectors(std::size_t channels, std::size_t resolution) {
  return {Tensor<T>::filled({channels, resolution}, T(1)), Tensor<T>::filled({channels, resolution}, T(1)),
          Tensor<T>::filled({channels, resolution}, T(1))};
}

double node_position(std::size_t i, std::size_t resolution, double half_extent) {
  return -half_extent + 2.0 * half_extent * (static_cast<double>(i) + 0.5) / static_cast<double>(resolution);
}

namespace {

struct AxisTap {
  std::uint32_t i0;
  std::uint32_t i1;
  double w1;
};

// Cell-centred lookup: normalized u maps to continuous index u * R - 0.5.
AxisTap axis_tap(double u, std::size_t extent) {
  if (extent == 1) return {0, 0, 0.0};
  const double x = std::clamp(u * static_cast<double>(extent) - 0.5, 0.0, static_cast<double>(extent - 1));
  const auto i0 = std::min(static_cast<std::size_t>(x), extent - 2);
  return {static_cast<std::uint32_t>(i0), static_cast<std::uint32_t>(i0 + 1), x - static_cast<double>(i0)};
}

// [C, N] -> [N, C]
template <typename T>
std::vector<T> channels_last(std::span<const T> src, std::size_t channels) {
  const std::size_t n = src.size() / channels;
  std::vector<T> out(src.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < n; ++i) out[i * channels + c] = src[c * n + i];
  return out;
}

template <typename T>
void add_channels_first(std::span<T> dst, const std::vector<T>& src, std::size_t channels) {
  const std::size_t n = src.size() / channels;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < n; ++i) dst[c * n + i] += src[i * channels + c];
}

}  // namespace

// Single fused op: the factors are transposed to channel-last layout so each
// point reads contiguous channel rows.
template <typename T>
Tensor<T> sample_field(const FactorizedField<T>& field, std::span<const T> points) {
  if (points.empty() || points.size() % 3 != 0) {
    throw std::invalid_argument("sample_field: points must be non-empty xyz triples");
  }
  const std::size_t p = points.size() / 3;
  const std::size_t ch = field.channels(), res = field.resolution();
  const bool vm = field.mode == FactorMode::kVM;
  const double inv_span = 1.0 / (2.0 * field.half_extent);
  auto taps = std::make_shared<std::vector<AxisTap>>(3 * p);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t a = 0; a < 3; ++a) {
      const double u = (static_cast<double>(points[3 * i + a]) + field.half_extent) * inv_span;
      assert(u >= -1e-4 && u <= 1 + 1e-4 && "sample_field: point outside bounding box");
      (*taps)[3 * i + a] = axis_tap(static_cast<double>(static_cast<T>(u)), res);
    }
  }
  std::array<std::vector<T>, 3> mats, vecs;
  for (std::size_t a = 0; a < 3; ++a) {
    mats[a] = channels_last(field.matrices[a].values(), ch);
    if (vm) vecs[a] = channels_last(field.vectors[a].values(), ch);
  }

  Tape<T>* tape = Tape<T>::active();
  bool record = false;
  for (std::size_t a = 0; a < 3; ++a) {
    record = record || field.matrices[a].requires_grad() || (vm && field.vectors[a].requires_grad());
  }
  record = record && tape != nullptr;
  Tensor<T> out(Shape{p, ch}, record);
  auto ov = out.values();
  for (std::size_t i = 0; i < p; ++i) {
    const AxisTap* t = taps->data() + 3 * i;
    T* o = ov.data() + i * ch;
    for (std::size_t a = 0; a < 3; ++a) {
      const auto [b, c] = kMatrixAxes[a];
      const T u1 = static_cast<T>(t[b].w1), u0 = T(1) - u1;
      const T v1 = static_cast<T>(t[c].w1), v0 = T(1) - v1;
      const T* m = mats[a].data();
      const T* m00 = m + (t[b].i0 * res + t[c].i0) * ch;
      const T* m01 = m + (t[b].i0 * res + t[c].i1) * ch;
      const T* m10 = m + (t[b].i1 * res + t[c].i0) * ch;
      const T* m11 = m + (t[b].i1 * res + t[c].i1) * ch;
      if (vm) {
        const T w1 = static_cast<T>(t[a].w1), w0 = T(1) - w1;
        const T* l0 = vecs[a].data() + t[a].i0 * ch;
        const T* l1 = vecs[a].data() + t[a].i1 * ch;
        for (std::size_t k = 0; k < ch; ++k) {
          const T mv = u0 * (v0 * m00[k] + v1 * m01[k]) + u1 * (v0 * m10[k] + v1 * m11[k]);
          o[k] += (w0 * l0[k] + w1 * l1[k]) * mv;
        }
      } else {
        for (std::size_t k = 0; k < ch; ++k) {
          o[k] += u0 * (v0 * m00[k] + v1 * m01[k]) + u1 * (v0 * m10[k] + v1 * m11[k]);
        }
      }
    }
  }
  if (record) {
    auto mat_t = std::make_shared<std::array<std::vector<T>, 3>>(std::move(mats));
    auto vec_t = std::make_shared<std::array<std::vector<T>, 3>>(std::move(vecs));
    tape->record("sample_field", [field, out, taps, mat_t, vec_t, ch, res, vm]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      const std::size_t p = taps->size() / 3;
      std::array<std::vector<T>, 3> gm, gv;
      for (std::size_t a = 0; a < 3; ++a) {
        if (field.matrices[a].requires_grad()) gm[a].assign(res * res * ch, T(0));
        if (vm && field.vectors[a].requires_grad()) gv[a].assign(res * ch, T(0));
      }
      for (std::size_t i = 0; i < p; ++i) {
        const AxisTap* t = taps->data() + 3 * i;
        const T* g = go.data() + i * ch;
        for (std::size_t a = 0; a < 3; ++a) {
          const auto [b, c] = kMatrixAxes[a];
          const T u1 = static_cast<T>(t[b].w1), u0 = T(1) - u1;
          const T v1 = static_cast<T>(t[c].w1), v0 = T(1) - v1;
          const std::size_t o00 = (t[b].i0 * res + t[c].i0) * ch, o01 = (t[b].i0 * res + t[c].i1) * ch;
          const std::size_t o10 = (t[b].i1 * res + t[c].i0) * ch, o11 = (t[b].i1 * res + t[c].i1) * ch;
          T w0 = T(1), w1 = T(0);
          const T* l0 = nullptr;
          const T* l1 = nullptr;
          if (vm) {
            w1 = static_cast<T>(t[a].w1);
            w0 = T(1) - w1;
            l0 = (*vec_t)[a].data() + t[a].i0 * ch;
            l1 = (*vec_t)[a].data() + t[a].i1 * ch;
          }
          if (!gv[a].empty()) {
            const T* m = (*mat_t)[a].data();
            T* d0 = gv[a].data() + t[a].i0 * ch;
            T* d1 = gv[a].data() + t[a].i1 * ch;
            for (std::size_t k = 0; k < ch; ++k) {
              const T mv = u0 * (v0 * m[o00 + k] + v1 * m[o01 + k]) + u1 * (v0 * m[o10 + k] + v1 * m[o11 + k]);
              d0[k] += w0 * mv * g[k];
              d1[k] += w1 * mv * g[k];
            }
          }
          if (!gm[a].empty()) {
            T* d = gm[a].data();
            for (std::size_t k = 0; k < ch; ++k) {
              const T gl = vm ? (w0 * l0[k] + w1 * l1[k]) * g[k] : g[k];
              d[o00 + k] += u0 * v0 * gl;
              d[o01 + k] += u0 * v1 * gl;
              d[o10 + k] += u1 * v0 * gl;
              d[o11 + k] += u1 * v1 * gl;
            }
          }
        }
      }
      for (std::size_t a = 0; a < 3; ++a) {
        if (!gm[a].empty()) add_channels_first(field.matrices[a].grad_buffer(), gm[a], ch);
        if (!gv[a].empty()) add_channels_first(field.vectors[a].grad_buffer(), gv[a], ch);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dense_reconstruct(const FactorizedField<T>& field) {
  field.validate();
  const std::size_t ch = field.channels(), r = field.resolution();
  if (r > kDenseReconstructMaxResolution) {
    throw std::invalid_argument("dense_reconstruct: resolution " + std::to_string(r) + " exceeds " +
                                std::to_string(kDenseReconstructMaxResolution));
  }
  Tensor<T> out(Shape{ch, r, r, r});
  auto o = out.values();
  auto v0 = field.vectors[0].values(), v1 = field.vectors[1].values(), v2 = field.vectors[2].values();
  auto m0 = field.matrices[0].values(), m1 = field.matrices[1].values(), m2 = field.matrices[2].values();
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < r; ++j) {
        for (std::size_t k = 0; k < r; ++k) {
          o[((c * r + i) * r + j) * r + k] = v0[c * r + i] * m0[(c * r + j) * r + k] +
                                             v1[c * r + j] * m1[(c * r + i) * r + k] +
                                             v2[c * r + k] * m2[(c * r + i) * r + j];
        }
      }
    }
  }
  return out;
}

template struct FactorizedField<float>;
template struct FactorizedField<double>;
template std::array<Tensor<float>, 3> unit_vectors<float>(std::size_t, std::size_t);
template std::array<Tensor<double>, 3> unit_vectors<double>(std::size_t, std::size_t);
template Tensor<float> sample_field<float>(const FactorizedField<float>&, std::span<const float>);
template Tensor<double> sample_field<double>(const FactorizedField<double>&, std::span<const double>);
template Tensor<float> dense_reconstruct<float>(const FactorizedField<float>&);
template Tensor<double> dense_reconstruct<double>(const FactorizedField<double>&);

}  // namespace zerorf
