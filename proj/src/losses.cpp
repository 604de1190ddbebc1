#include "gradreg/losses.hpp"

#include <sstream>

namespace gradreg {

Similarity similarity_from(const std::string& name) {
  if (name == "mse") return Similarity::MSE;
  if (name == "ncc") return Similarity::NCC;
  throw std::invalid_argument("similarity: unknown kind '" + name + "' (mse|ncc)");
}

std::string similarity_name(Similarity s) { return s == Similarity::MSE ? "mse" : "ncc"; }

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  return mean(square(sub(a, b)));
}

template <typename S>
Tensor<S> ncc(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> ac = sub(a, mean(a));
  Tensor<S> bc = sub(b, mean(b));
  Tensor<S> num = sum(mul(ac, bc));
  Tensor<S> den = sqrt(scalar_add(mul(sum(square(ac)), sum(square(bc))), S(1e-10)));
  return scalar_add(neg(divide(num, den)), S(1));
}

namespace {

template <typename S>
Tensor<S> class_dice(const Tensor<S>& pred, const Tensor<S>& target, int k, S eps) {
  Tensor<S> p = slice_channel(pred, k);
  Tensor<S> t = slice_channel(target, k);
  Tensor<S> num = scalar_add(scalar_mul(sum(mul(p, t)), S(2)), eps);
  Tensor<S> den = scalar_add(add(sum(p), sum(t)), eps);
  return divide(num, den);
}

}  // namespace

template <typename S>
Tensor<S> soft_dice(const Tensor<S>& pred_onehot, const Tensor<S>& target_onehot, S eps) {
  if (pred_onehot.shape() != target_onehot.shape())
    throw std::invalid_argument("soft_dice: shape mismatch");
  int K = pred_onehot.dim(0);
  if (K < 2) throw std::invalid_argument("soft_dice: needs a foreground class");
  Tensor<S> acc = Tensor<S>::scalar(S(0));
  for (int k = 1; k < K; ++k) acc = add(acc, class_dice(pred_onehot, target_onehot, k, eps));
  return scalar_add(neg(scalar_mul(acc, S(1) / S(K - 1))), S(1));
}

template <typename S>
Tensor<S> partial_dice(const Tensor<S>& pred_onehot, const Tensor<S>& target_onehot,
                       const std::vector<uint8_t>& available, bool* none_available, S eps) {
  if (pred_onehot.shape() != target_onehot.shape())
    throw std::invalid_argument("partial_dice: shape mismatch");
  int K = pred_onehot.dim(0);
  if (static_cast<int>(available.size()) != K)
    throw std::invalid_argument("partial_dice: availability mask length " +
                                std::to_string(available.size()) + " != classes " +
                                std::to_string(K));
  int n_avail = 0;
  for (int k = 1; k < K; ++k) n_avail += available[k] ? 1 : 0;
  if (none_available) *none_available = (n_avail == 0);
  if (n_avail == 0) return Tensor<S>::scalar(S(0));
  Tensor<S> acc = Tensor<S>::scalar(S(0));
  for (int k = 1; k < K; ++k) {
    if (!available[k]) continue;
    acc = add(acc, class_dice(pred_onehot, target_onehot, k, eps));
  }
  return scalar_add(neg(scalar_mul(acc, S(1) / S(n_avail))), S(1));
}

template <typename S>
Tensor<S> smoothness(const GradientField<S>& g) {
  return mean(square(scalar_add(g.g, S(-1))));
}

template <typename S>
Tensor<S> one_hot(const std::vector<uint8_t>& labels, int D, int H, int W, int num_classes) {
  long n = static_cast<long>(D) * H * W;
  if (static_cast<long>(labels.size()) != n)
    throw std::invalid_argument("one_hot: label grid size mismatch");
  Tensor<S> out(Shape{num_classes, D, H, W});
  S* p = out.data();
  for (long v = 0; v < n; ++v) p[static_cast<long>(labels[v]) * n + v] = S(1);
  return out;
}

template <typename S>
std::string LossBreakdown<S>::to_lines() const {
  std::ostringstream os;
  for (const LossTerm& t : terms)
    os << "loss dir=" << t.direction << " level=" << t.level << " sim=" << t.sim
       << " sup=" << t.sup << " smo=" << t.smo << " weighted=" << t.weighted << '\n';
  os << "loss total=" << static_cast<double>(total.value()) << '\n';
  return os.str();
}

template struct LossBreakdown<float>;
template struct LossBreakdown<double>;

namespace {

// Majority vote per voxel: argmax of pooled class fractions, ties toward the
// smaller label (matches majority_pool2).
template <typename S>
Tensor<S> harden_onehot(const Tensor<S>& soft) {
  int K = soft.dim(0);
  long n = soft.size() / K;
  Tensor<S> hard(soft.shape());
  const S* sp = soft.data();
  S* hp = hard.data();
  for (long v = 0; v < n; ++v) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (sp[k * n + v] > sp[best * n + v]) best = k;
    hp[best * n + v] = S(1);
  }
  return hard;
}

// One-hot supervision pyramid: level 0 as given, deeper levels majority-pooled.
template <typename S>
std::vector<Tensor<S>> onehot_pyramid(const Tensor<S>& onehot, int levels) {
  std::vector<Tensor<S>> pyr{onehot.detached()};
  for (int l = 1; l <= levels; ++l) pyr.push_back(harden_onehot(avg_pool2(pyr.back())));
  return pyr;
}

// One direction of the objective across supervision levels.
template <typename S>
void direction_loss(const char* name, const Tensor<S>& moving, const Tensor<S>& fixed,
                    const Tensor<S>& moving_oh, const Tensor<S>& fixed_oh,
                    const std::vector<uint8_t>& available, const std::vector<Tensor<S>>& raws,
                    const LossWeights<S>& w, Similarity sim_kind, Tensor<S>& total,
                    std::vector<LossTerm>& terms) {
  int levels = static_cast<int>(raws.size());
  std::vector<Tensor<S>> img_pyr = downscale_pyramid(moving, levels - 1);
  std::vector<Tensor<S>> fix_pyr = downscale_pyramid(fixed, levels - 1);
  std::vector<Tensor<S>> moh_pyr = onehot_pyramid(moving_oh, levels - 1);
  std::vector<Tensor<S>> foh_pyr = onehot_pyramid(fixed_oh, levels - 1);
  for (int l = 0; l < levels; ++l) {
    GradientField<S> g = activate_increments(raws[l]);
    DeformationField<S> phi = integrate(g);
    Tensor<S> warped = warp_linear(img_pyr[l], phi);
    Tensor<S> sim = sim_kind == Similarity::MSE ? mse(warped, fix_pyr[l]) : ncc(warped, fix_pyr[l]);
    Tensor<S> warped_seg = warp_linear(moh_pyr[l], phi);
    Tensor<S> sup = partial_dice(warped_seg, foh_pyr[l], available);
    Tensor<S> smo = smoothness(g);
    Tensor<S> term = add(add(scalar_mul(sim, w.alpha), scalar_mul(sup, w.beta)),
                         scalar_mul(smo, w.gamma));
    Tensor<S> weighted = scalar_mul(term, w.ds_weights[l]);
    total = add(total, weighted);
    terms.push_back(LossTerm{name, l, static_cast<double>(sim.value()),
                             static_cast<double>(sup.value()), static_cast<double>(smo.value()),
                             static_cast<double>(weighted.value())});
  }
}

}  // namespace

template <typename S>
LossBreakdown<S> total_loss(const RegistrationSample<S>& sample,
                            const std::vector<Tensor<S>>& raw_mf,
                            const std::vector<Tensor<S>>& raw_fm, const LossWeights<S>& w,
                            Similarity sim_kind) {
  w.validate();
  if (raw_mf.size() != raw_fm.size())
    throw std::invalid_argument("total_loss: direction head counts differ");
  if (w.ds_weights.size() != raw_mf.size())
    throw std::invalid_argument("total_loss: " + std::to_string(w.ds_weights.size()) +
                                " supervision weights for " + std::to_string(raw_mf.size()) +
                                " heads");
  LossBreakdown<S> out;
  out.total = Tensor<S>::scalar(S(0));
  direction_loss("mf", sample.moving, sample.fixed, sample.moving_onehot, sample.fixed_onehot,
                 sample.available, raw_mf, w, sim_kind, out.total, out.terms);
  direction_loss("fm", sample.fixed, sample.moving, sample.fixed_onehot, sample.moving_onehot,
                 sample.available, raw_fm, w, sim_kind, out.total, out.terms);
  return out;
}

#define GRADREG_INSTANTIATE(S)                                                               \
  template Tensor<S> mse(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> ncc(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> soft_dice(const Tensor<S>&, const Tensor<S>&, S);                      \
  template Tensor<S> partial_dice(const Tensor<S>&, const Tensor<S>&,                       \
                                  const std::vector<uint8_t>&, bool*, S);                   \
  template Tensor<S> smoothness(const GradientField<S>&);                                   \
  template Tensor<S> one_hot<S>(const std::vector<uint8_t>&, int, int, int, int);           \
  template LossBreakdown<S> total_loss(const RegistrationSample<S>&,                        \
                                       const std::vector<Tensor<S>>&,                       \
                                       const std::vector<Tensor<S>>&, const LossWeights<S>&, \
                                       Similarity);

GRADREG_INSTANTIATE(float)
GRADREG_INSTANTIATE(double)
#undef GRADREG_INSTANTIATE

}  // namespace gradreg
