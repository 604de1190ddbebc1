#include "gradreg/ops.hpp"

#include <algorithm>
#include <cmath>

namespace gradreg {

namespace {

// Per-axis interpolation setup for one clamped coordinate.
template <typename S>
struct AxisTap {
  int i0, i1;
  S f;        // fraction toward i1
  S dfdc;     // 0 when the raw coordinate fell outside [0, E-1]
};

template <typename S>
AxisTap<S> axis_tap(S c, int extent) {
  AxisTap<S> t;
  S lo = S(0), hi = S(extent - 1);
  S cc = std::min(std::max(c, lo), hi);
  t.dfdc = (c >= lo && c <= hi) ? S(1) : S(0);
  if (extent == 1) {
    t.i0 = 0;
    t.i1 = 0;
    t.f = S(0);
    t.dfdc = S(0);
    return t;
  }
  int i0 = static_cast<int>(std::floor(cc));
  i0 = std::min(std::max(i0, 0), extent - 2);
  t.i0 = i0;
  t.i1 = i0 + 1;
  t.f = cc - S(i0);
  return t;
}

}  // namespace

template <typename S>
Tensor<S> trilinear_sample(const Tensor<S>& vol, const Tensor<S>& coords) {
  if (vol.order() != 4)
    throw std::invalid_argument("trilinear_sample: vol must be [C,D,H,W], got " +
                                shape_str(vol.shape()));
  if (coords.order() != 4 || coords.dim(0) != 3)
    throw std::invalid_argument("trilinear_sample: coords must be [3,D,H,W], got " +
                                shape_str(coords.shape()));
  const int C = vol.dim(0), D = vol.dim(1), H = vol.dim(2), W = vol.dim(3);
  const int Do = coords.dim(1), Ho = coords.dim(2), Wo = coords.dim(3);
  const long nvox = static_cast<long>(Do) * Ho * Wo;
  const long vol_ch = static_cast<long>(D) * H * W;
  Shape out_shape{C, Do, Ho, Wo};
  ArrayX<S> out(C * nvox);

  const S* vp = vol.data();
  const S* cp = coords.data();
  S* op = out.data();

#pragma omp parallel for schedule(static)
  for (long v = 0; v < nvox; ++v) {
    AxisTap<S> tz = axis_tap(cp[v], D);
    AxisTap<S> ty = axis_tap(cp[nvox + v], H);
    AxisTap<S> tx = axis_tap(cp[2 * nvox + v], W);
    S wz0 = S(1) - tz.f, wy0 = S(1) - ty.f, wx0 = S(1) - tx.f;
    long b000 = (static_cast<long>(tz.i0) * H + ty.i0) * W;
    long b010 = (static_cast<long>(tz.i0) * H + ty.i1) * W;
    long b100 = (static_cast<long>(tz.i1) * H + ty.i0) * W;
    long b110 = (static_cast<long>(tz.i1) * H + ty.i1) * W;
    for (int c = 0; c < C; ++c) {
      const S* vc = vp + c * vol_ch;
      S v000 = vc[b000 + tx.i0], v001 = vc[b000 + tx.i1];
      S v010 = vc[b010 + tx.i0], v011 = vc[b010 + tx.i1];
      S v100 = vc[b100 + tx.i0], v101 = vc[b100 + tx.i1];
      S v110 = vc[b110 + tx.i0], v111 = vc[b110 + tx.i1];
      op[c * nvox + v] = wz0 * (wy0 * (wx0 * v000 + tx.f * v001) + ty.f * (wx0 * v010 + tx.f * v011)) +
                         tz.f * (wy0 * (wx0 * v100 + tx.f * v101) + ty.f * (wx0 * v110 + tx.f * v111));
    }
  }

  Tape<S>* tape = joint_tape<S>({&vol, &coords});
  if (!tape) return Tensor<S>(std::move(out_shape), std::move(out));

  int iv = vol.requires_grad() ? vol.node() : -1;
  int ic = coords.requires_grad() ? coords.node() : -1;
  Tensor<S> vol_saved = vol.detached();
  Tensor<S> coords_saved = coords.detached();
  return tape->emit(
      std::move(out_shape), std::move(out), "trilinear_sample", {iv, ic},
      [iv, ic, vol_saved, coords_saved, C, D, H, W, nvox, vol_ch](Tape<S>& t, const ArrayX<S>& g) {
        const S* vp = vol_saved.data();
        const S* cp = coords_saved.data();
        const S* gp = g.data();
        if (ic >= 0) {
          ArrayX<S>& gc = t.grad_buffer(ic);
          S* gcp = gc.data();
#pragma omp parallel for schedule(static)
          for (long v = 0; v < nvox; ++v) {
            AxisTap<S> tz = axis_tap(cp[v], D);
            AxisTap<S> ty = axis_tap(cp[nvox + v], H);
            AxisTap<S> tx = axis_tap(cp[2 * nvox + v], W);
            S wz0 = S(1) - tz.f, wy0 = S(1) - ty.f, wx0 = S(1) - tx.f;
            long b000 = (static_cast<long>(tz.i0) * H + ty.i0) * W;
            long b010 = (static_cast<long>(tz.i0) * H + ty.i1) * W;
            long b100 = (static_cast<long>(tz.i1) * H + ty.i0) * W;
            long b110 = (static_cast<long>(tz.i1) * H + ty.i1) * W;
            S dz = S(0), dy = S(0), dx = S(0);
            for (int c = 0; c < C; ++c) {
              const S* vc = vp + c * vol_ch;
              S v000 = vc[b000 + tx.i0], v001 = vc[b000 + tx.i1];
              S v010 = vc[b010 + tx.i0], v011 = vc[b010 + tx.i1];
              S v100 = vc[b100 + tx.i0], v101 = vc[b100 + tx.i1];
              S v110 = vc[b110 + tx.i0], v111 = vc[b110 + tx.i1];
              S go = gp[c * nvox + v];
              // interpolated faces for the axis derivatives
              S f0 = wy0 * (wx0 * v000 + tx.f * v001) + ty.f * (wx0 * v010 + tx.f * v011);
              S f1 = wy0 * (wx0 * v100 + tx.f * v101) + ty.f * (wx0 * v110 + tx.f * v111);
              dz += go * (f1 - f0);
              S g0 = wz0 * (wx0 * v000 + tx.f * v001) + tz.f * (wx0 * v100 + tx.f * v101);
              S g1 = wz0 * (wx0 * v010 + tx.f * v011) + tz.f * (wx0 * v110 + tx.f * v111);
              dy += go * (g1 - g0);
              S h0 = wz0 * (wy0 * v000 + ty.f * v010) + tz.f * (wy0 * v100 + ty.f * v110);
              S h1 = wz0 * (wy0 * v001 + ty.f * v011) + tz.f * (wy0 * v101 + ty.f * v111);
              dx += go * (h1 - h0);
            }
            gcp[v] += dz * tz.dfdc;
            gcp[nvox + v] += dy * ty.dfdc;
            gcp[2 * nvox + v] += dx * tx.dfdc;
          }
        }
        if (iv >= 0) {
          ArrayX<S>& gv = t.grad_buffer(iv);
          S* gvp = gv.data();
#pragma omp parallel for schedule(static)
          for (int c = 0; c < C; ++c) {
            S* gvc = gvp + c * vol_ch;
            for (long v = 0; v < nvox; ++v) {
              AxisTap<S> tz = axis_tap(cp[v], D);
              AxisTap<S> ty = axis_tap(cp[nvox + v], H);
              AxisTap<S> tx = axis_tap(cp[2 * nvox + v], W);
              S wz0 = S(1) - tz.f, wy0 = S(1) - ty.f, wx0 = S(1) - tx.f;
              long b000 = (static_cast<long>(tz.i0) * H + ty.i0) * W;
              long b010 = (static_cast<long>(tz.i0) * H + ty.i1) * W;
              long b100 = (static_cast<long>(tz.i1) * H + ty.i0) * W;
              long b110 = (static_cast<long>(tz.i1) * H + ty.i1) * W;
              S go = gp[c * nvox + v];
              gvc[b000 + tx.i0] += go * wz0 * wy0 * wx0;
              gvc[b000 + tx.i1] += go * wz0 * wy0 * tx.f;
              gvc[b010 + tx.i0] += go * wz0 * ty.f * wx0;
              gvc[b010 + tx.i1] += go * wz0 * ty.f * tx.f;
              gvc[b100 + tx.i0] += go * tz.f * wy0 * wx0;
              gvc[b100 + tx.i1] += go * tz.f * wy0 * tx.f;
              gvc[b110 + tx.i0] += go * tz.f * ty.f * wx0;
              gvc[b110 + tx.i1] += go * tz.f * ty.f * tx.f;
            }
          }
        }
      });
}

template Tensor<float> trilinear_sample(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> trilinear_sample(const Tensor<double>&, const Tensor<double>&);

}  // namespace gradreg
