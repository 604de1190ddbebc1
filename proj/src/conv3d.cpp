#include "gradreg/ops.hpp"

#include <algorithm>

namespace gradreg {

namespace {

template <typename S>
using RowMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstRowMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

struct ConvDims {
  int Cin, D, H, W;
  int Cout, k;
  int stride, padding;
  int Do, Ho, Wo;
};

template <typename S>
ConvDims conv_dims(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                   int stride, int padding) {
  if (input.order() != 4)
    throw std::invalid_argument("conv3d: input must be [Cin,D,H,W], got " +
                                shape_str(input.shape()));
  if (kernel.order() != 5)
    throw std::invalid_argument("conv3d: kernel must be [Cout,Cin,k,k,k], got " +
                                shape_str(kernel.shape()));
  ConvDims d;
  d.Cin = input.dim(0);
  d.D = input.dim(1);
  d.H = input.dim(2);
  d.W = input.dim(3);
  d.Cout = kernel.dim(0);
  d.k = kernel.dim(2);
  if (kernel.dim(1) != d.Cin)
    throw std::invalid_argument("conv3d: channel mismatch, input " + shape_str(input.shape()) +
                                " vs kernel " + shape_str(kernel.shape()));
  if (kernel.dim(3) != d.k || kernel.dim(4) != d.k)
    throw std::invalid_argument("conv3d: kernel must be cubic, got " + shape_str(kernel.shape()));
  if (bias.order() != 1 || bias.dim(0) != d.Cout)
    throw std::invalid_argument("conv3d: bias must be [Cout], got " + shape_str(bias.shape()));
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv3d: bad stride/padding");
  d.stride = stride;
  d.padding = padding;
  auto ext = [&](int e) { return (e + 2 * padding - d.k) / stride + 1; };
  d.Do = ext(d.D);
  d.Ho = ext(d.H);
  d.Wo = ext(d.W);
  if (d.Do <= 0 || d.Ho <= 0 || d.Wo <= 0)
    throw std::invalid_argument("conv3d: kernel larger than padded input");
  return d;
}

// out[co] += sum_{ci,kz,ky,kx} w * in[ci], stride-1 fast path built on
// contiguous W rows. Parallel over output channels: each thread owns
// disjoint rows, so results are bitwise deterministic.
template <typename S>
void forward_stride1(const ConvDims& d, const S* in, const S* w, const S* bias, S* out) {
  long in_ch = static_cast<long>(d.D) * d.H * d.W;
  long out_ch = static_cast<long>(d.Do) * d.Ho * d.Wo;
#pragma omp parallel for schedule(static)
  for (int co = 0; co < d.Cout; ++co) {
    S* oc = out + co * out_ch;
    RowMap<S>(oc, out_ch) = bias[co];
    for (int ci = 0; ci < d.Cin; ++ci) {
      const S* icp = in + ci * in_ch;
      for (int kz = 0; kz < d.k; ++kz)
        for (int ky = 0; ky < d.k; ++ky)
          for (int kx = 0; kx < d.k; ++kx) {
            S wgt = w[(((static_cast<long>(co) * d.Cin + ci) * d.k + kz) * d.k + ky) * d.k + kx];
            int ow0 = std::max(0, d.padding - kx);
            int ow1 = std::min(d.Wo - 1, d.W - 1 + d.padding - kx);
            int len = ow1 - ow0 + 1;
            if (len <= 0) continue;
            int iw0 = ow0 - d.padding + kx;
            for (int od = 0; od < d.Do; ++od) {
              int id = od - d.padding + kz;
              if (id < 0 || id >= d.D) continue;
              for (int oh = 0; oh < d.Ho; ++oh) {
                int ih = oh - d.padding + ky;
                if (ih < 0 || ih >= d.H) continue;
                RowMap<S>(oc + (static_cast<long>(od) * d.Ho + oh) * d.Wo + ow0, len) +=
                    wgt * ConstRowMap<S>(icp + (static_cast<long>(id) * d.H + ih) * d.W + iw0, len);
              }
            }
          }
    }
  }
}

template <typename S>
void forward_generic(const ConvDims& d, const S* in, const S* w, const S* bias, S* out) {
  long out_ch = static_cast<long>(d.Do) * d.Ho * d.Wo;
#pragma omp parallel for schedule(static)
  for (int co = 0; co < d.Cout; ++co) {
    S* oc = out + co * out_ch;
    for (int od = 0; od < d.Do; ++od)
      for (int oh = 0; oh < d.Ho; ++oh)
        for (int ow = 0; ow < d.Wo; ++ow) {
          S acc = bias[co];
          for (int ci = 0; ci < d.Cin; ++ci)
            for (int kz = 0; kz < d.k; ++kz) {
              int id = od * d.stride - d.padding + kz;
              if (id < 0 || id >= d.D) continue;
              for (int ky = 0; ky < d.k; ++ky) {
                int ih = oh * d.stride - d.padding + ky;
                if (ih < 0 || ih >= d.H) continue;
                for (int kx = 0; kx < d.k; ++kx) {
                  int iw = ow * d.stride - d.padding + kx;
                  if (iw < 0 || iw >= d.W) continue;
                  acc += w[(((static_cast<long>(co) * d.Cin + ci) * d.k + kz) * d.k + ky) * d.k + kx] *
                         in[((static_cast<long>(ci) * d.D + id) * d.H + ih) * d.W + iw];
                }
              }
            }
          oc[(static_cast<long>(od) * d.Ho + oh) * d.Wo + ow] = acc;
        }
  }
}

// dL/dinput, stride-1: mirror of the forward with scatter into input rows.
// Parallel over input channels (each owns its slice of the buffer).
template <typename S>
void input_grad_stride1(const ConvDims& d, const S* gout, const S* w, S* gin) {
  long in_ch = static_cast<long>(d.D) * d.H * d.W;
  long out_ch = static_cast<long>(d.Do) * d.Ho * d.Wo;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < d.Cin; ++ci) {
    S* gc = gin + ci * in_ch;
    for (int co = 0; co < d.Cout; ++co) {
      const S* goc = gout + co * out_ch;
      for (int kz = 0; kz < d.k; ++kz)
        for (int ky = 0; ky < d.k; ++ky)
          for (int kx = 0; kx < d.k; ++kx) {
            S wgt = w[(((static_cast<long>(co) * d.Cin + ci) * d.k + kz) * d.k + ky) * d.k + kx];
            int ow0 = std::max(0, d.padding - kx);
            int ow1 = std::min(d.Wo - 1, d.W - 1 + d.padding - kx);
            int len = ow1 - ow0 + 1;
            if (len <= 0) continue;
            int iw0 = ow0 - d.padding + kx;
            for (int od = 0; od < d.Do; ++od) {
              int id = od - d.padding + kz;
              if (id < 0 || id >= d.D) continue;
              for (int oh = 0; oh < d.Ho; ++oh) {
                int ih = oh - d.padding + ky;
                if (ih < 0 || ih >= d.H) continue;
                RowMap<S>(gc + (static_cast<long>(id) * d.H + ih) * d.W + iw0, len) +=
                    wgt * ConstRowMap<S>(goc + (static_cast<long>(od) * d.Ho + oh) * d.Wo + ow0, len);
              }
            }
          }
    }
  }
}

template <typename S>
void input_grad_generic(const ConvDims& d, const S* gout, const S* w, S* gin) {
  long in_ch = static_cast<long>(d.D) * d.H * d.W;
  long out_ch = static_cast<long>(d.Do) * d.Ho * d.Wo;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < d.Cin; ++ci) {
    S* gc = gin + ci * in_ch;
    for (int co = 0; co < d.Cout; ++co) {
      const S* goc = gout + co * out_ch;
      for (int od = 0; od < d.Do; ++od)
        for (int oh = 0; oh < d.Ho; ++oh)
          for (int ow = 0; ow < d.Wo; ++ow) {
            S g = goc[(static_cast<long>(od) * d.Ho + oh) * d.Wo + ow];
            for (int kz = 0; kz < d.k; ++kz) {
              int id = od * d.stride - d.padding + kz;
              if (id < 0 || id >= d.D) continue;
              for (int ky = 0; ky < d.k; ++ky) {
                int ih = oh * d.stride - d.padding + ky;
                if (ih < 0 || ih >= d.H) continue;
                for (int kx = 0; kx < d.k; ++kx) {
                  int iw = ow * d.stride - d.padding + kx;
                  if (iw < 0 || iw >= d.W) continue;
                  gc[(static_cast<long>(id) * d.H + ih) * d.W + iw] +=
                      g * w[(((static_cast<long>(co) * d.Cin + ci) * d.k + kz) * d.k + ky) * d.k + kx];
                }
              }
            }
          }
    }
  }
}

// dL/dkernel: row dot products, parallel over output channels.
template <typename S>
void kernel_grad(const ConvDims& d, const S* gout, const S* in, S* gw) {
  long in_ch = static_cast<long>(d.D) * d.H * d.W;
  long out_ch = static_cast<long>(d.Do) * d.Ho * d.Wo;
#pragma omp parallel for schedule(static)
  for (int co = 0; co < d.Cout; ++co) {
    const S* goc = gout + co * out_ch;
    for (int ci = 0; ci < d.Cin; ++ci) {
      const S* icp = in + ci * in_ch;
      for (int kz = 0; kz < d.k; ++kz)
        for (int ky = 0; ky < d.k; ++ky)
          for (int kx = 0; kx < d.k; ++kx) {
            S acc = S(0);
            if (d.stride == 1) {
              int ow0 = std::max(0, d.padding - kx);
              int ow1 = std::min(d.Wo - 1, d.W - 1 + d.padding - kx);
              int len = ow1 - ow0 + 1;
              if (len > 0) {
                int iw0 = ow0 - d.padding + kx;
                for (int od = 0; od < d.Do; ++od) {
                  int id = od - d.padding + kz;
                  if (id < 0 || id >= d.D) continue;
                  for (int oh = 0; oh < d.Ho; ++oh) {
                    int ih = oh - d.padding + ky;
                    if (ih < 0 || ih >= d.H) continue;
                    acc += (ConstRowMap<S>(goc + (static_cast<long>(od) * d.Ho + oh) * d.Wo + ow0, len) *
                            ConstRowMap<S>(icp + (static_cast<long>(id) * d.H + ih) * d.W + iw0, len))
                               .sum();
                  }
                }
              }
            } else {
              for (int od = 0; od < d.Do; ++od) {
                int id = od * d.stride - d.padding + kz;
                if (id < 0 || id >= d.D) continue;
                for (int oh = 0; oh < d.Ho; ++oh) {
                  int ih = oh * d.stride - d.padding + ky;
                  if (ih < 0 || ih >= d.H) continue;
                  for (int ow = 0; ow < d.Wo; ++ow) {
                    int iw = ow * d.stride - d.padding + kx;
                    if (iw < 0 || iw >= d.W) continue;
                    acc += goc[(static_cast<long>(od) * d.Ho + oh) * d.Wo + ow] *
                           icp[(static_cast<long>(id) * d.H + ih) * d.W + iw];
                  }
                }
              }
            }
            gw[(((static_cast<long>(co) * d.Cin + ci) * d.k + kz) * d.k + ky) * d.k + kx] += acc;
          }
    }
  }
}

}  // namespace

template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 int stride, int padding) {
  ConvDims d = conv_dims(input, kernel, bias, stride, padding);
  Shape out_shape{d.Cout, d.Do, d.Ho, d.Wo};
  ArrayX<S> out(numel(out_shape));
  if (stride == 1)
    forward_stride1(d, input.data(), kernel.data(), bias.data(), out.data());
  else
    forward_generic(d, input.data(), kernel.data(), bias.data(), out.data());

  Tape<S>* tape = joint_tape<S>({&input, &kernel, &bias});
  if (!tape) return Tensor<S>(std::move(out_shape), std::move(out));

  int ii = input.requires_grad() ? input.node() : -1;
  int ik = kernel.requires_grad() ? kernel.node() : -1;
  int ib = bias.requires_grad() ? bias.node() : -1;
  Tensor<S> in_saved = input.detached();
  Tensor<S> k_saved = kernel.detached();
  return tape->emit(std::move(out_shape), std::move(out), "conv3d", {ii, ik, ib},
                    [d, ii, ik, ib, in_saved, k_saved](Tape<S>& t, const ArrayX<S>& g) {
                      long out_ch = static_cast<long>(d.Do) * d.Ho * d.Wo;
                      if (ib >= 0) {
                        ArrayX<S>& gb = t.grad_buffer(ib);
                        for (int co = 0; co < d.Cout; ++co)
                          gb(co) += g.segment(co * out_ch, out_ch).sum();
                      }
                      if (ii >= 0) {
                        ArrayX<S>& gi = t.grad_buffer(ii);
                        if (d.stride == 1)
                          input_grad_stride1(d, g.data(), k_saved.data(), gi.data());
                        else
                          input_grad_generic(d, g.data(), k_saved.data(), gi.data());
                      }
                      if (ik >= 0) {
                        ArrayX<S>& gk = t.grad_buffer(ik);
                        kernel_grad(d, g.data(), in_saved.data(), gk.data());
                      }
                    });
}

template Tensor<float> conv3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                              int, int);
template Tensor<double> conv3d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                               int, int);

}  // namespace gradreg
