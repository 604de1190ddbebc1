#include "gradreg/ops.hpp"

#include <cmath>

namespace gradreg {

namespace {

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// Shared skeleton for binary elementwise ops with tensor/scalar broadcast.
// ValFn(a_arr, b_arr) -> out array; the per-op lambdas below provide the
// partial accumulation for each side.
enum class BinSide { Left, Right };

template <typename S>
bool broadcast_ok(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape() || a.size() == 1 || b.size() == 1;
}

template <typename S>
ArrayX<S> spread(const Tensor<S>& t, long n) {
  if (t.size() == n) return t.array();
  return ArrayX<S>::Constant(n, t.array()(0));
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (!broadcast_ok(a, b)) require_same_shape(a, b, "add");
  const Shape& shp = a.size() >= b.size() ? a.shape() : b.shape();
  long n = numel(shp);
  ArrayX<S> out = spread(a, n) + spread(b, n);
  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return Tensor<S>(shp, std::move(out));
  int ia = a.requires_grad() ? a.node() : -1;
  int ib = b.requires_grad() ? b.node() : -1;
  long na = a.size(), nb = b.size();
  return tape->emit(shp, std::move(out), "add", {ia, ib},
                    [ia, ib, na, nb](Tape<S>& t, const ArrayX<S>& g) {
                      if (ia >= 0) {
                        if (na == g.size()) t.accumulate(ia, g);
                        else t.grad_buffer(ia)(0) += g.sum();
                      }
                      if (ib >= 0) {
                        if (nb == g.size()) t.accumulate(ib, g);
                        else t.grad_buffer(ib)(0) += g.sum();
                      }
                    });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (!broadcast_ok(a, b)) require_same_shape(a, b, "sub");
  const Shape& shp = a.size() >= b.size() ? a.shape() : b.shape();
  long n = numel(shp);
  ArrayX<S> out = spread(a, n) - spread(b, n);
  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return Tensor<S>(shp, std::move(out));
  int ia = a.requires_grad() ? a.node() : -1;
  int ib = b.requires_grad() ? b.node() : -1;
  long na = a.size(), nb = b.size();
  return tape->emit(shp, std::move(out), "sub", {ia, ib},
                    [ia, ib, na, nb](Tape<S>& t, const ArrayX<S>& g) {
                      if (ia >= 0) {
                        if (na == g.size()) t.accumulate(ia, g);
                        else t.grad_buffer(ia)(0) += g.sum();
                      }
                      if (ib >= 0) {
                        if (nb == g.size()) t.accumulate(ib, -g);
                        else t.grad_buffer(ib)(0) -= g.sum();
                      }
                    });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (!broadcast_ok(a, b)) require_same_shape(a, b, "mul");
  const Shape& shp = a.size() >= b.size() ? a.shape() : b.shape();
  long n = numel(shp);
  ArrayX<S> out = spread(a, n) * spread(b, n);
  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return Tensor<S>(shp, std::move(out));
  int ia = a.requires_grad() ? a.node() : -1;
  int ib = b.requires_grad() ? b.node() : -1;
  Tensor<S> av = a.detached(), bv = b.detached();
  return tape->emit(shp, std::move(out), "mul", {ia, ib},
                    [ia, ib, av, bv, n](Tape<S>& t, const ArrayX<S>& g) {
                      if (ia >= 0) {
                        ArrayX<S> da = g * spread(bv, n);
                        if (av.size() == n) t.accumulate(ia, da);
                        else t.grad_buffer(ia)(0) += da.sum();
                      }
                      if (ib >= 0) {
                        ArrayX<S> db = g * spread(av, n);
                        if (bv.size() == n) t.accumulate(ib, db);
                        else t.grad_buffer(ib)(0) += db.sum();
                      }
                    });
}

template <typename S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b) {
  if (!broadcast_ok(a, b)) require_same_shape(a, b, "divide");
  const Shape& shp = a.size() >= b.size() ? a.shape() : b.shape();
  long n = numel(shp);
  ArrayX<S> out = spread(a, n) / spread(b, n);
  Tape<S>* tape = joint_tape<S>({&a, &b});
  if (!tape) return Tensor<S>(shp, std::move(out));
  int ia = a.requires_grad() ? a.node() : -1;
  int ib = b.requires_grad() ? b.node() : -1;
  Tensor<S> av = a.detached(), bv = b.detached();
  return tape->emit(shp, std::move(out), "divide", {ia, ib},
                    [ia, ib, av, bv, n](Tape<S>& t, const ArrayX<S>& g) {
                      ArrayX<S> bb = spread(bv, n);
                      if (ia >= 0) {
                        ArrayX<S> da = g / bb;
                        if (av.size() == n) t.accumulate(ia, da);
                        else t.grad_buffer(ia)(0) += da.sum();
                      }
                      if (ib >= 0) {
                        ArrayX<S> db = -g * spread(av, n) / (bb * bb);
                        if (bv.size() == n) t.accumulate(ib, db);
                        else t.grad_buffer(ib)(0) += db.sum();
                      }
                    });
}

template <typename S>
Tensor<S> scalar_mul(const Tensor<S>& a, S c) {
  ArrayX<S> out = a.array() * c;
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(a.shape(), std::move(out));
  int ia = a.node();
  return tape->emit(a.shape(), std::move(out), "scalar_mul", {ia},
                    [ia, c](Tape<S>& t, const ArrayX<S>& g) { t.accumulate(ia, g * c); });
}

template <typename S>
Tensor<S> scalar_add(const Tensor<S>& a, S c) {
  ArrayX<S> out = a.array() + c;
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(a.shape(), std::move(out));
  int ia = a.node();
  return tape->emit(a.shape(), std::move(out), "scalar_add", {ia},
                    [ia](Tape<S>& t, const ArrayX<S>& g) { t.accumulate(ia, g); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scalar_mul(a, S(-1));
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  ArrayX<S> out = a.array().square();
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(a.shape(), std::move(out));
  int ia = a.node();
  Tensor<S> av = a.detached();
  return tape->emit(a.shape(), std::move(out), "square", {ia},
                    [ia, av](Tape<S>& t, const ArrayX<S>& g) {
                      t.accumulate(ia, S(2) * g * av.array());
                    });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  ArrayX<S> out = a.array().sqrt();
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(a.shape(), std::move(out));
  int ia = a.node();
  Tensor<S> y(a.shape(), out);
  return tape->emit(a.shape(), std::move(out), "sqrt", {ia},
                    [ia, y](Tape<S>& t, const ArrayX<S>& g) {
                      t.accumulate(ia, g * S(0.5) / y.array());
                    });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  ArrayX<S> out = ((-a.array()).exp() + S(1)).inverse();
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(a.shape(), std::move(out));
  int ia = a.node();
  Tensor<S> y(a.shape(), out);
  return tape->emit(a.shape(), std::move(out), "sigmoid", {ia},
                    [ia, y](Tape<S>& t, const ArrayX<S>& g) {
                      t.accumulate(ia, g * y.array() * (S(1) - y.array()));
                    });
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& a, S slope) {
  if (!(slope > S(0) && slope < S(1)))
    throw std::invalid_argument("leaky_relu: slope must be in (0,1)");
  ArrayX<S> out = (a.array() >= S(0)).select(a.array(), a.array() * slope);
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(a.shape(), std::move(out));
  int ia = a.node();
  Tensor<S> av = a.detached();
  return tape->emit(a.shape(), std::move(out), "leaky_relu", {ia},
                    [ia, av, slope](Tape<S>& t, const ArrayX<S>& g) {
                      t.accumulate(ia, (av.array() >= S(0)).select(g, g * slope));
                    });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  ArrayX<S> out(1);
  out(0) = a.array().sum();
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>({1}, std::move(out));
  int ia = a.node();
  long n = a.size();
  return tape->emit({1}, std::move(out), "sum", {ia},
                    [ia, n](Tape<S>& t, const ArrayX<S>& g) {
                      t.grad_buffer(ia) += g(0);
                    });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  ArrayX<S> out(1);
  out(0) = a.array().mean();
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>({1}, std::move(out));
  int ia = a.node();
  S inv_n = S(1) / S(a.size());
  return tape->emit({1}, std::move(out), "mean", {ia},
                    [ia, inv_n](Tape<S>& t, const ArrayX<S>& g) {
                      t.grad_buffer(ia) += g(0) * inv_n;
                    });
}

template <typename S>
Tensor<S> slice_channel(const Tensor<S>& a, int c) {
  if (a.order() < 2) throw std::invalid_argument("slice_channel: tensor order < 2");
  int C = a.dim(0);
  if (c < 0 || c >= C) throw std::invalid_argument("slice_channel: channel out of range");
  long per = a.size() / C;
  Shape shp = a.shape();
  shp[0] = 1;
  ArrayX<S> out = a.array().segment(c * per, per);
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(std::move(shp), std::move(out));
  int ia = a.node();
  return tape->emit(std::move(shp), std::move(out), "slice_channel", {ia},
                    [ia, c, per](Tape<S>& t, const ArrayX<S>& g) {
                      t.grad_buffer(ia).segment(c * per, per) += g;
                    });
}

template <typename S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  Shape base = parts[0].shape();
  int C = 0;
  for (const Tensor<S>& p : parts) {
    Shape s = p.shape();
    if (s.size() != base.size())
      throw std::invalid_argument("concat_channels: mixed tensor orders");
    for (size_t i = 1; i < s.size(); ++i)
      if (s[i] != base[i]) throw std::invalid_argument("concat_channels: spatial mismatch");
    C += s[0];
  }
  long per = parts[0].size() / parts[0].dim(0);
  Shape shp = base;
  shp[0] = C;
  ArrayX<S> out(C * per);
  long off = 0;
  for (const Tensor<S>& p : parts) {
    out.segment(off, p.size()) = p.array();
    off += p.size();
  }
  std::vector<const Tensor<S>*> ptrs;
  for (const Tensor<S>& p : parts) ptrs.push_back(&p);
  Tape<S>* tape = nullptr;
  for (const Tensor<S>* p : ptrs) {
    Tape<S>* pt = joint_tape<S>({p});
    if (pt) {
      if (tape && tape != pt)
        throw std::invalid_argument("concat_channels: operands on different tapes");
      tape = pt;
    }
  }
  if (!tape) return Tensor<S>(std::move(shp), std::move(out));
  std::vector<int> ids;
  std::vector<long> sizes;
  for (const Tensor<S>& p : parts) {
    ids.push_back(p.requires_grad() ? p.node() : -1);
    sizes.push_back(p.size());
  }
  return tape->emit(std::move(shp), std::move(out), "concat_channels", ids,
                    [ids, sizes](Tape<S>& t, const ArrayX<S>& g) {
                      long off = 0;
                      for (size_t i = 0; i < ids.size(); ++i) {
                        if (ids[i] >= 0) t.grad_buffer(ids[i]) += g.segment(off, sizes[i]);
                        off += sizes[i];
                      }
                    });
}

namespace {

// Walks lines along `axis` of a tensor with the given shape, invoking
// fn(base_offset, count, stride) once per line.
template <typename Fn>
void for_each_line(const Shape& shp, int axis, Fn&& fn) {
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shp[i];
  for (size_t i = axis + 1; i < shp.size(); ++i) inner *= shp[i];
  long n = shp[axis];
  for (long o = 0; o < outer; ++o)
    for (long r = 0; r < inner; ++r) fn(o * n * inner + r, n, inner);
}

}  // namespace

template <typename S>
Tensor<S> cumsum_exclusive(const Tensor<S>& a, int axis) {
  if (axis < 0 || axis >= a.order())
    throw std::invalid_argument("cumsum_exclusive: axis out of range for " + shape_str(a.shape()));
  ArrayX<S> out(a.size());
  const S* src = a.data();
  S* dst = out.data();
  for_each_line(a.shape(), axis, [&](long base, long n, long stride) {
    S acc = S(0);
    for (long i = 0; i < n; ++i) {
      dst[base + i * stride] = acc;
      acc += src[base + i * stride];
    }
  });
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(a.shape(), std::move(out));
  int ia = a.node();
  Shape shp = a.shape();
  return tape->emit(a.shape(), std::move(out), "cumsum_exclusive", {ia},
                    [ia, shp, axis](Tape<S>& t, const ArrayX<S>& g) {
                      ArrayX<S>& buf = t.grad_buffer(ia);
                      const S* gs = g.data();
                      S* bd = buf.data();
                      // d y[j] / d x[i] = 1 for j > i: reversed exclusive suffix sum.
                      for_each_line(shp, axis, [&](long base, long n, long stride) {
                        S acc = S(0);
                        for (long i = n - 2; i >= 0; --i) {
                          acc += gs[base + (i + 1) * stride];
                          bd[base + i * stride] += acc;
                        }
                      });
                    });
}

template <typename S>
Tensor<S> upsample_nearest2x(const Tensor<S>& a) {
  if (a.order() != 4) throw std::invalid_argument("upsample_nearest2x: expected [C,D,H,W]");
  int C = a.dim(0), D = a.dim(1), H = a.dim(2), W = a.dim(3);
  Shape shp{C, 2 * D, 2 * H, 2 * W};
  ArrayX<S> out(numel(shp));
  const S* src = a.data();
  S* dst = out.data();
  long oD = 2 * D, oH = 2 * H, oW = 2 * W;
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < oD; ++d)
      for (int h = 0; h < oH; ++h) {
        const S* srow = src + ((static_cast<long>(c) * D + d / 2) * H + h / 2) * W;
        S* drow = dst + ((static_cast<long>(c) * oD + d) * oH + h) * oW;
        for (int w = 0; w < oW; ++w) drow[w] = srow[w / 2];
      }
  Tape<S>* tape = joint_tape<S>({&a});
  if (!tape) return Tensor<S>(std::move(shp), std::move(out));
  int ia = a.node();
  return tape->emit(std::move(shp), std::move(out), "upsample_nearest2x", {ia},
                    [ia, C, D, H, W](Tape<S>& t, const ArrayX<S>& g) {
                      ArrayX<S>& buf = t.grad_buffer(ia);
                      const S* gs = g.data();
                      S* bd = buf.data();
                      long oD = 2 * D, oH = 2 * H, oW = 2 * W;
                      for (int c = 0; c < C; ++c)
                        for (long d = 0; d < oD; ++d)
                          for (long h = 0; h < oH; ++h) {
                            const S* grow = gs + ((c * oD + d) * oH + h) * oW;
                            S* brow = bd + ((static_cast<long>(c) * D + d / 2) * H + h / 2) * W;
                            for (long w = 0; w < oW; ++w) brow[w / 2] += grow[w];
                          }
                    });
}

template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x, S eps) {
  if (x.order() != 4) throw std::invalid_argument("instance_norm: expected [C,D,H,W]");
  int C = x.dim(0);
  long n = x.size() / C;
  if (n < 2) throw std::invalid_argument("instance_norm: needs at least 2 voxels per channel");
  ArrayX<S> out(x.size());
  ArrayX<S> invstd(C);
  for (int c = 0; c < C; ++c) {
    auto xc = x.array().segment(c * n, n);
    S m = xc.mean();
    S var = (xc - m).square().mean();
    S inv = S(1) / std::sqrt(var + eps);
    invstd(c) = inv;
    out.segment(c * n, n) = (xc - m) * inv;
  }
  Tape<S>* tape = joint_tape<S>({&x});
  if (!tape) return Tensor<S>(x.shape(), std::move(out));
  int ix = x.node();
  Tensor<S> xhat(x.shape(), out);
  return tape->emit(x.shape(), std::move(out), "instance_norm", {ix},
                    [ix, xhat, invstd, C, n](Tape<S>& t, const ArrayX<S>& g) {
                      ArrayX<S>& buf = t.grad_buffer(ix);
                      for (int c = 0; c < C; ++c) {
                        auto gc = g.segment(c * n, n);
                        auto hc = xhat.array().segment(c * n, n);
                        S gm = gc.mean();
                        S ghm = (gc * hc).mean();
                        buf.segment(c * n, n) += invstd(c) * (gc - gm - hc * ghm);
                      }
                    });
}

#define GRADREG_INSTANTIATE(S)                                                      \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                      \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                      \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                      \
  template Tensor<S> divide(const Tensor<S>&, const Tensor<S>&);                   \
  template Tensor<S> scalar_mul(const Tensor<S>&, S);                              \
  template Tensor<S> scalar_add(const Tensor<S>&, S);                              \
  template Tensor<S> neg(const Tensor<S>&);                                        \
  template Tensor<S> square(const Tensor<S>&);                                     \
  template Tensor<S> sqrt(const Tensor<S>&);                                       \
  template Tensor<S> sigmoid(const Tensor<S>&);                                    \
  template Tensor<S> leaky_relu(const Tensor<S>&, S);                              \
  template Tensor<S> sum(const Tensor<S>&);                                        \
  template Tensor<S> mean(const Tensor<S>&);                                       \
  template Tensor<S> slice_channel(const Tensor<S>&, int);                         \
  template Tensor<S> concat_channels(const std::vector<Tensor<S>>&);               \
  template Tensor<S> cumsum_exclusive(const Tensor<S>&, int);                      \
  template Tensor<S> upsample_nearest2x(const Tensor<S>&);                         \
  template Tensor<S> instance_norm(const Tensor<S>&, S);

GRADREG_INSTANTIATE(float)
GRADREG_INSTANTIATE(double)
#undef GRADREG_INSTANTIATE

}  // namespace gradreg
