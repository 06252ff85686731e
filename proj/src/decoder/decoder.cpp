#include "zerorf/decoder.hpp"

#include <Eigen/Core>

#include <cmath>
#include <iostream>
#include <random>
#include <stdexcept>

#include "zerorf/ops.hpp"

namespace zerorf {

template <typename T>
void sh_encode(std::array<T, 3> direction, std::size_t degree, T* out) {
  if (degree < 1 || degree > kMaxShDegree) {
    throw std::invalid_argument("sh_encode: degree must be in 1.." + std::to_string(kMaxShDegree));
  }
  const T norm = std::sqrt(direction[0] * direction[0] + direction[1] * direction[1] + direction[2] * direction[2]);
  if (std::abs(norm - T(1)) > T(1e-6)) {
#ifndef NDEBUG
    std::cerr << "sh_encode: normalizing direction of length " << norm << "\n";
#endif
    for (auto& c : direction) c /= norm;
  }
  const T x = direction[0], y = direction[1], z = direction[2];
  out[0] = T(0.28209479177387814);
  if (degree == 1) return;
  out[1] = T(0.4886025119029199) * y;
  out[2] = T(0.4886025119029199) * z;
  out[3] = T(0.4886025119029199) * x;
  if (degree == 2) return;
  const T xx = x * x, yy = y * y, zz = z * z;
  out[4] = T(1.0925484305920792) * x * y;
  out[5] = T(1.0925484305920792) * y * z;
  out[6] = T(0.31539156525252005) * (T(3) * zz - T(1));
  out[7] = T(1.0925484305920792) * x * z;
  out[8] = T(0.5462742152960396) * (xx - yy);
  if (degree == 3) return;
  out[9] = T(0.5900435899266435) * y * (T(3) * xx - yy);
  out[10] = T(2.890611442640554) * x * y * z;
  out[11] = T(0.4570457994644658) * y * (T(5) * zz - T(1));
  out[12] = T(0.3731763325901154) * z * (T(5) * zz - T(3));
  out[13] = T(0.4570457994644658) * x * (T(5) * zz - T(1));
  out[14] = T(1.445305721320277) * z * (xx - yy);
  out[15] = T(0.5900435899266435) * x * (xx - T(3) * yy);
}

template <typename T>
std::vector<T> sh_encode(std::array<T, 3> direction, std::size_t degree) {
  std::vector<T> out(degree * degree);
  sh_encode<T>(direction, degree, out.data());
  return out;
}

template <typename T>
std::vector<NamedParam<T>> DecoderParams<T>::parameters(const std::string& prefix) const {
  return {{prefix + "base.weight", base_w},   {prefix + "base.bias", base_b},
          {prefix + "sigma.weight", sigma_w}, {prefix + "sigma.bias", sigma_b},
          {prefix + "dir.weight", dir_w},     {prefix + "color.weight", color_w},
          {prefix + "color.bias", color_b}};
}

namespace {

template <typename T>
Tensor<T> uniform_weight(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  Tensor<T> w(Shape{in, out}, true);
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : w.values()) v = static_cast<T>(dist(rng));
  return w;
}

}  // namespace

template <typename T>
DecoderParams<T> init_decoder(std::size_t feature_channels, const DecoderConfig& config, std::uint64_t seed) {
  if (feature_channels == 0 || config.hidden == 0) throw std::invalid_argument("decoder: widths must be > 0");
  if (config.sh_degree < 1 || config.sh_degree > kMaxShDegree) {
    throw std::invalid_argument("decoder: sh_degree must be in 1.." + std::to_string(kMaxShDegree));
  }
  std::mt19937_64 rng(seed);
  const std::size_t h = config.hidden, s = config.sh_degree * config.sh_degree;
  DecoderParams<T> p;
  p.sh_degree = config.sh_degree;
  p.base_w = uniform_weight<T>(rng, feature_channels, h);
  p.base_b = Tensor<T>(Shape{h}, true);
  p.sigma_w = uniform_weight<T>(rng, h, 1);
  p.sigma_b = Tensor<T>::filled({1}, static_cast<T>(config.density_bias), true);
  p.dir_w = uniform_weight<T>(rng, s, h);
  p.color_w = uniform_weight<T>(rng, h, 3);
  p.color_b = Tensor<T>(Shape{3}, true);
  return p;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

constexpr Eigen::Index kDecodeBlock = 256;

template <typename T>
ConstMap<T> as_matrix(const Tensor<T>& t, Eigen::Index rows, Eigen::Index cols) {
  return ConstMap<T>(t.values().data(), rows, cols);
}

template <typename T>
Eigen::Map<const RowVec<T>> as_row(const Tensor<T>& t) {
  return Eigen::Map<const RowVec<T>>(t.values().data(), static_cast<Eigen::Index>(t.numel()));
}

template <typename T>
void accumulate(const Tensor<T>& t, const RowMat<T>& g) {
  if (!t.requires_grad()) return;
  Eigen::Map<RowMat<T>>(t.grad_buffer().data(), g.rows(), g.cols()) += g;
}

// Hidden activations of one block of samples.
template <typename T>
struct BlockState {
  RowMat<T> h, s1, a1, h2, s2, a2;

  void compute(const DecoderParams<T>& p, const ConstMap<T>& feat, const RowMat<T>& dir,
               std::span<const std::size_t> rays) {
    h = feat * as_matrix(p.base_w, feat.cols(), static_cast<Eigen::Index>(p.hidden()));
    h.rowwise() += as_row(p.base_b);
    s1 = h.array().logistic().matrix();
    a1 = h.cwiseProduct(s1);
    h2 = h;
    for (Eigen::Index i = 0; i < h2.rows(); ++i) h2.row(i) += dir.row(static_cast<Eigen::Index>(rays[i]));
    s2 = h2.array().logistic().matrix();
    a2 = h2.cwiseProduct(s2);
  }
};

// Whole decoder as one op. Activations are recomputed block by block in the
// backward pass instead of being stored.
template <typename T>
DecodedSamples<T> decode_fused(const DecoderParams<T>& p, const Tensor<T>& features, const Tensor<T>& ray_sh,
                               std::span<const std::size_t> ray_of_sample) {
  const auto n = static_cast<Eigen::Index>(features.size(0));
  const auto c = static_cast<Eigen::Index>(p.feature_channels());
  const auto hid = static_cast<Eigen::Index>(p.hidden());
  const auto r = static_cast<Eigen::Index>(ray_sh.size(0));
  const auto s = static_cast<Eigen::Index>(p.sh_size());
  for (std::size_t ray : ray_of_sample) {
    if (ray >= ray_sh.size(0)) throw std::invalid_argument("decode: ray index out of range");
  }
  auto* tape = Tape<T>::active();
  bool record = features.requires_grad() || ray_sh.requires_grad();
  for (const auto& np : p.parameters()) record = record || np.tensor.requires_grad();
  record = record && tape != nullptr;

  const RowMat<T> dir = as_matrix(ray_sh, r, s) * as_matrix(p.dir_w, s, hid);
  DecodedSamples<T> out;
  out.sigma = Tensor<T>(Shape{static_cast<std::size_t>(n), 1}, record);
  out.rgb = Tensor<T>(Shape{static_cast<std::size_t>(n), 3}, record);
  Eigen::Map<RowMat<T>> sigma(out.sigma.values().data(), n, 1), rgb(out.rgb.values().data(), n, 3);
  BlockState<T> st;
  for (Eigen::Index b0 = 0; b0 < n; b0 += kDecodeBlock) {
    const Eigen::Index bn = std::min(kDecodeBlock, n - b0);
    ConstMap<T> feat(features.values().data() + b0 * c, bn, c);
    st.compute(p, feat, dir, ray_of_sample.subspan(b0, bn));
    RowMat<T> z = st.a1 * as_matrix(p.sigma_w, hid, 1);
    z.array() += p.sigma_b.values()[0];
    // Owned temporaries keep SIMD coverage independent of output addresses.
    const RowMat<T> e = z.array().exp().matrix();
    sigma.middleRows(b0, bn) = e;
    RowMat<T> zc = st.a2 * as_matrix(p.color_w, hid, 3);
    zc.rowwise() += as_row(p.color_b);
    const RowMat<T> y = zc.array().logistic().matrix();
    rgb.middleRows(b0, bn) = y;
  }
  if (!record) return out;

  std::vector<std::size_t> rays(ray_of_sample.begin(), ray_of_sample.end());
  tape->record("decode", [p, features, ray_sh, sig = out.sigma, col = out.rgb, rays = std::move(rays), n, c, hid,
                          r, s]() {
    if (!sig.has_grad() && !col.has_grad()) return;
    const RowMat<T> dir = as_matrix(ray_sh, r, s) * as_matrix(p.dir_w, s, hid);
    RowMat<T> g_base_w = RowMat<T>::Zero(c, hid), g_base_b = RowMat<T>::Zero(1, hid);
    RowMat<T> g_sigma_w = RowMat<T>::Zero(hid, 1), g_sigma_b = RowMat<T>::Zero(1, 1);
    RowMat<T> g_color_w = RowMat<T>::Zero(hid, 3), g_color_b = RowMat<T>::Zero(1, 3);
    RowMat<T> g_dir = RowMat<T>::Zero(r, hid);
    const ConstMap<T> sigma(sig.values().data(), n, 1), rgb(col.values().data(), n, 3);
    const ConstMap<T> sigma_wt(p.sigma_w.values().data(), 1, hid), base_w = as_matrix(p.base_w, c, hid);
    const ConstMap<T> color_w = as_matrix(p.color_w, hid, 3);
    std::span<const std::size_t> all_rays(rays);
    BlockState<T> st;
    for (Eigen::Index b0 = 0; b0 < n; b0 += kDecodeBlock) {
      const Eigen::Index bn = std::min(kDecodeBlock, n - b0);
      ConstMap<T> feat(features.values().data() + b0 * c, bn, c);
      auto block_rays = all_rays.subspan(b0, bn);
      st.compute(p, feat, dir, block_rays);
      RowMat<T> gz = RowMat<T>::Zero(bn, 1), gzc = RowMat<T>::Zero(bn, 3);
      if (sig.has_grad()) gz = ConstMap<T>(sig.grad().data() + b0, bn, 1).cwiseProduct(sigma.middleRows(b0, bn));
      if (col.has_grad()) {
        const auto y = rgb.middleRows(b0, bn).array();
        gzc = (ConstMap<T>(col.grad().data() + 3 * b0, bn, 3).array() * y * (T(1) - y)).matrix();
      }
      g_sigma_w.noalias() += st.a1.transpose() * gz;
      g_sigma_b(0, 0) += gz.sum();
      g_color_w.noalias() += st.a2.transpose() * gzc;
      g_color_b += gzc.colwise().sum();
      // d silu(x)/dx = s (1 + x (1 - s))
      RowMat<T> gh2 = gzc * color_w.transpose();
      gh2.array() *= st.s2.array() * (T(1) + st.h2.array() * (T(1) - st.s2.array()));
      RowMat<T> gh = gz * sigma_wt;
      gh.array() *= st.s1.array() * (T(1) + st.h.array() * (T(1) - st.s1.array()));
      gh += gh2;
      for (Eigen::Index i = 0; i < bn; ++i) g_dir.row(static_cast<Eigen::Index>(block_rays[i])) += gh2.row(i);
      g_base_w.noalias() += feat.transpose() * gh;
      g_base_b += gh.colwise().sum();
      if (features.requires_grad()) {
        Eigen::Map<RowMat<T>>(features.grad_buffer().data() + b0 * c, bn, c).noalias() += gh * base_w.transpose();
      }
    }
    accumulate(p.base_w, g_base_w);
    accumulate(p.base_b, g_base_b);
    accumulate(p.sigma_w, g_sigma_w);
    accumulate(p.sigma_b, g_sigma_b);
    accumulate(p.color_w, g_color_w);
    accumulate(p.color_b, g_color_b);
    if (p.dir_w.requires_grad()) accumulate(p.dir_w, RowMat<T>(as_matrix(ray_sh, r, s).transpose() * g_dir));
    if (ray_sh.requires_grad()) accumulate(ray_sh, RowMat<T>(g_dir * as_matrix(p.dir_w, s, hid).transpose()));
  });
  return out;
}

}  // namespace

template <typename T>
DecodedSamples<T> decode(const DecoderParams<T>& params, const Tensor<T>& features, const Tensor<T>& ray_sh,
                         std::span<const std::size_t> ray_of_sample) {
  if (features.dim() != 2 || features.size(1) != params.feature_channels()) {
    throw std::invalid_argument("decode: features " + shape_str(features.shape()) + " do not match " +
                                std::to_string(params.feature_channels()) + " channels");
  }
  if (ray_sh.dim() != 2 || ray_sh.size(1) != params.sh_size()) {
    throw std::invalid_argument("decode: ray encodings " + shape_str(ray_sh.shape()) + " do not match " +
                                std::to_string(params.sh_size()) + " SH coefficients");
  }
  if (ray_of_sample.size() != features.size(0)) {
    throw std::invalid_argument("decode: need one ray index per sample");
  }
  return decode_fused(params, features, ray_sh, ray_of_sample);
}

template <typename T>
Tensor<T> decode_density(const DecoderParams<T>& params, const Tensor<T>& feature) {
  Tensor<T> f = ops::reshape(feature, {1, feature.numel()});
  Tensor<T> h = ops::affine(f, params.base_w, params.base_b);
  return ops::reshape(ops::exp(ops::affine(ops::silu(h), params.sigma_w, params.sigma_b)), {1});
}

template <typename T>
Tensor<T> decode_color(const DecoderParams<T>& params, const Tensor<T>& feature, std::array<T, 3> direction) {
  Tensor<T> sh(Shape{1, params.sh_size()}, sh_encode<T>(direction, params.sh_degree));
  const std::size_t zero = 0;
  auto decoded = decode(params, ops::reshape(feature, {1, feature.numel()}), sh, std::span<const std::size_t>(&zero, 1));
  return ops::reshape(decoded.rgb, {3});
}

#define ZERORF_INSTANTIATE_DECODER(T)                                                                          \
  template void sh_encode<T>(std::array<T, 3>, std::size_t, T*);                                               \
  template std::vector<T> sh_encode<T>(std::array<T, 3>, std::size_t);                                         \
  template struct DecoderParams<T>;                                                                            \
  template DecoderParams<T> init_decoder<T>(std::size_t, const DecoderConfig&, std::uint64_t);                 \
  template DecodedSamples<T> decode<T>(const DecoderParams<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                       std::span<const std::size_t>);                                          \
  template Tensor<T> decode_density<T>(const DecoderParams<T>&, const Tensor<T>&);                             \
  template Tensor<T> decode_color<T>(const DecoderParams<T>&, const Tensor<T>&, std::array<T, 3>);

ZERORF_INSTANTIATE_DECODER(float)
ZERORF_INSTANTIATE_DECODER(double)

}  // namespace zerorf
