#include "gradreg/deformation.hpp"

#include <algorithm>
#include <cmath>

namespace gradreg {

template struct GradientField<float>;
template struct GradientField<double>;
template struct DeformationField<float>;
template struct DeformationField<double>;

template <typename S>
GradientField<S> activate_increments(const Tensor<S>& raw) {
  if (raw.order() != 4 || raw.dim(0) != 3)
    throw std::invalid_argument("activate_increments: expected [3,D,H,W], got " +
                                shape_str(raw.shape()));
  return GradientField<S>{scalar_mul(sigmoid(raw), S(kMaxIncrement))};
}

template <typename S>
DeformationField<S> integrate(const GradientField<S>& g) {
  if (g.g.order() != 4 || g.g.dim(0) != 3)
    throw std::invalid_argument("integrate: expected [3,D,H,W], got " + shape_str(g.g.shape()));
  std::vector<Tensor<S>> comps;
  comps.reserve(3);
  for (int a = 0; a < 3; ++a)
    comps.push_back(cumsum_exclusive(slice_channel(g.g, a), 1 + a));
  return DeformationField<S>{concat_channels(comps)};
}

template <typename S>
DeformationField<S> identity_field(int D, int H, int W) {
  Shape shp{3, D, H, W};
  Tensor<S> phi(shp);
  S* p = phi.data();
  long n = static_cast<long>(D) * H * W;
  long v = 0;
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w, ++v) {
        p[v] = S(d);
        p[n + v] = S(h);
        p[2 * n + v] = S(w);
      }
  return DeformationField<S>{std::move(phi)};
}

template <typename S>
Tensor<S> warp_linear(const Tensor<S>& vol, const DeformationField<S>& phi) {
  if (vol.order() != 4)
    throw std::invalid_argument("warp_linear: vol must be [C,D,H,W]");
  if (vol.dim(1) != phi.phi.dim(1) || vol.dim(2) != phi.phi.dim(2) || vol.dim(3) != phi.phi.dim(3))
    throw std::invalid_argument("warp_linear: shape mismatch " + shape_str(vol.shape()) + " vs " +
                                shape_str(phi.phi.shape()));
  return trilinear_sample(vol, phi.phi);
}

template <typename S>
std::vector<uint8_t> warp_nearest(const std::vector<uint8_t>& labels, int D, int H, int W,
                                  const DeformationField<S>& phi) {
  long n = static_cast<long>(D) * H * W;
  if (static_cast<long>(labels.size()) != n)
    throw std::invalid_argument("warp_nearest: label grid size mismatch");
  if (phi.phi.dim(1) != D || phi.phi.dim(2) != H || phi.phi.dim(3) != W)
    throw std::invalid_argument("warp_nearest: field shape mismatch");
  std::vector<uint8_t> out(n);
  const S* p = phi.phi.data();
  auto idx = [](S c, int e) {
    long i = static_cast<long>(std::llround(static_cast<double>(c)));
    return std::min<long>(std::max<long>(i, 0), e - 1);
  };
  for (long v = 0; v < n; ++v) {
    long z = idx(p[v], D), y = idx(p[n + v], H), x = idx(p[2 * n + v], W);
    out[v] = labels[(z * H + y) * W + x];
  }
  return out;
}

template <typename S>
Tensor<S> jacobian_det(const DeformationField<S>& phi) {
  const Tensor<S>& f = phi.phi;
  if (f.order() != 4 || f.dim(0) != 3)
    throw std::invalid_argument("jacobian_det: expected [3,D,H,W]");
  int D = f.dim(1), H = f.dim(2), W = f.dim(3);
  if (D < 3 || H < 3 || W < 3)
    throw std::invalid_argument("jacobian_det: extents must be >= 3");
  long n = static_cast<long>(D) * H * W;
  const S* p = f.data();
  Tensor<S> det(Shape{D, H, W});
  S* dp = det.data();

  // d phi[a] / d axis_b via central differences; one-sided at borders.
  auto diff = [&](int a, long v, int i, int e, long stride) {
    const S* comp = p + a * n;
    if (i == 0) return comp[v + stride] - comp[v];
    if (i == e - 1) return comp[v] - comp[v - stride];
    return (comp[v + stride] - comp[v - stride]) * S(0.5);
  };

  long sz = static_cast<long>(H) * W, sy = W, sx = 1;
  long v = 0;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x, ++v) {
        S j00 = diff(0, v, z, D, sz), j01 = diff(0, v, y, H, sy), j02 = diff(0, v, x, W, sx);
        S j10 = diff(1, v, z, D, sz), j11 = diff(1, v, y, H, sy), j12 = diff(1, v, x, W, sx);
        S j20 = diff(2, v, z, D, sz), j21 = diff(2, v, y, H, sy), j22 = diff(2, v, x, W, sx);
        dp[v] = j00 * (j11 * j22 - j12 * j21) - j01 * (j10 * j22 - j12 * j20) +
                j02 * (j10 * j21 - j11 * j20);
      }
  return det;
}

namespace {

template <typename T>
std::vector<T> pad_even(const std::vector<T>& src, int D, int H, int W, int C, int& Dp, int& Hp,
                        int& Wp) {
  Dp = D + (D % 2), Hp = H + (H % 2), Wp = W + (W % 2);
  if (Dp == D && Hp == H && Wp == W) return src;
  std::vector<T> out(static_cast<long>(C) * Dp * Hp * Wp);
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < Dp; ++d)
      for (int h = 0; h < Hp; ++h)
        for (int w = 0; w < Wp; ++w) {
          int sd = std::min(d, D - 1), sh = std::min(h, H - 1), sw = std::min(w, W - 1);
          out[((static_cast<long>(c) * Dp + d) * Hp + h) * Wp + w] =
              src[((static_cast<long>(c) * D + sd) * H + sh) * W + sw];
        }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> avg_pool2(const Tensor<S>& x) {
  if (x.order() != 4) throw std::invalid_argument("avg_pool2: expected [C,D,H,W]");
  int C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<S> src(x.data(), x.data() + x.size());
  int Dp, Hp, Wp;
  src = pad_even(src, D, H, W, C, Dp, Hp, Wp);
  int Do = Dp / 2, Ho = Hp / 2, Wo = Wp / 2;
  Tensor<S> out(Shape{C, Do, Ho, Wo});
  S* op = out.data();
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < Do; ++d)
      for (int h = 0; h < Ho; ++h)
        for (int w = 0; w < Wo; ++w) {
          S acc = S(0);
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                acc += src[((static_cast<long>(c) * Dp + 2 * d + dz) * Hp + 2 * h + dy) * Wp +
                           2 * w + dx];
          op[((static_cast<long>(c) * Do + d) * Ho + h) * Wo + w] = acc * S(0.125);
        }
  return out;
}

std::vector<uint8_t> majority_pool2(const std::vector<uint8_t>& labels, int D, int H, int W,
                                    int num_classes, int& Do, int& Ho, int& Wo) {
  int Dp, Hp, Wp;
  std::vector<uint8_t> src = pad_even(labels, D, H, W, 1, Dp, Hp, Wp);
  Do = Dp / 2, Ho = Hp / 2, Wo = Wp / 2;
  std::vector<uint8_t> out(static_cast<long>(Do) * Ho * Wo);
  std::vector<int> count(num_classes);
  for (int d = 0; d < Do; ++d)
    for (int h = 0; h < Ho; ++h)
      for (int w = 0; w < Wo; ++w) {
        std::fill(count.begin(), count.end(), 0);
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              ++count[src[((static_cast<long>(2 * d + dz)) * Hp + 2 * h + dy) * Wp + 2 * w + dx]];
        int best = 0;
        for (int k = 1; k < num_classes; ++k)
          if (count[k] > count[best]) best = k;
        out[(static_cast<long>(d) * Ho + h) * Wo + w] = static_cast<uint8_t>(best);
      }
  return out;
}

template <typename S>
std::vector<Tensor<S>> downscale_pyramid(const Tensor<S>& x, int levels) {
  std::vector<Tensor<S>> pyr{x.detached()};
  for (int l = 1; l <= levels; ++l) pyr.push_back(avg_pool2(pyr.back()));
  return pyr;
}

#define GRADREG_INSTANTIATE(S)                                                        \
  template GradientField<S> activate_increments(const Tensor<S>&);                   \
  template DeformationField<S> integrate(const GradientField<S>&);                   \
  template DeformationField<S> identity_field(int, int, int);                        \
  template Tensor<S> warp_linear(const Tensor<S>&, const DeformationField<S>&);      \
  template std::vector<uint8_t> warp_nearest(const std::vector<uint8_t>&, int, int,  \
                                             int, const DeformationField<S>&);       \
  template Tensor<S> jacobian_det(const DeformationField<S>&);                       \
  template Tensor<S> avg_pool2(const Tensor<S>&);                                    \
  template std::vector<Tensor<S>> downscale_pyramid(const Tensor<S>&, int);

GRADREG_INSTANTIATE(float)
GRADREG_INSTANTIATE(double)
#undef GRADREG_INSTANTIATE

}  // namespace gradreg
