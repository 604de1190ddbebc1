#include "gradreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace gradreg {

double dice(const LabelMap& a, const LabelMap& b, int label) {
  if (a.dims != b.dims) throw std::invalid_argument("dice: grid mismatch");
  long na = 0, nb = 0, ni = 0;
  long n = a.size();
  for (long v = 0; v < n; ++v) {
    bool in_a = a.labels[v] == label, in_b = b.labels[v] == label;
    na += in_a;
    nb += in_b;
    ni += in_a && in_b;
  }
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

double dice30(std::vector<double> scores) {
  if (scores.empty()) throw std::invalid_argument("dice30: no scores");
  std::sort(scores.begin(), scores.end());
  size_t k = static_cast<size_t>(std::ceil(0.3 * static_cast<double>(scores.size())));
  k = std::max<size_t>(k, 1);
  double acc = 0.0;
  for (size_t i = 0; i < k; ++i) acc += scores[i];
  return acc / static_cast<double>(k);
}

namespace {

// Surface voxels under 6-connectivity: in the mask with a face neighbour
// outside it (grid borders count as outside).
std::vector<std::array<int, 3>> surface_voxels(const LabelMap& m, int label) {
  int D = m.dims[0], H = m.dims[1], W = m.dims[2];
  auto in_mask = [&](int z, int y, int x) {
    if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
    return m.labels[(static_cast<long>(z) * H + y) * W + x] == label;
  };
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!in_mask(z, y, x)) continue;
        if (!in_mask(z - 1, y, x) || !in_mask(z + 1, y, x) || !in_mask(z, y - 1, x) ||
            !in_mask(z, y + 1, x) || !in_mask(z, y, x - 1) || !in_mask(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D lower-envelope pass of the exact squared Euclidean distance transform,
// with anisotropic weight w = spacing^2 (Felzenszwalb & Huttenlocher).
// Infinite entries (no seed reached yet) are skipped.
void edt_pass_1d(const double* f, double* out, int n, double w, int* v, double* z) {
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s = 0.0;
    while (k >= 0) {
      int p = v[k];
      s = ((f[q] + w * q * q) - (f[p] + w * p * p)) / (2.0 * w * (q - p));
      if (s <= z[k]) --k;
      else break;
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
    } else {
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
    }
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) out[q] = kInf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    double d = static_cast<double>(q - v[j]);
    out[q] = w * d * d + f[v[j]];
  }
}

// Exact squared EDT of a seed set over the full grid, axis passes in z,y,x
// order so the accumulation order matches the brute-force oracle convention
// ((dz^2*wz + dy^2*wy) + dx^2*wx).
std::vector<double> squared_edt(const std::vector<std::array<int, 3>>& seeds, int D, int H, int W,
                                const std::array<float, 3>& spacing) {
  long n = static_cast<long>(D) * H * W;
  std::vector<double> dist(n, kInf);
  for (const auto& s : seeds) dist[(static_cast<long>(s[0]) * H + s[1]) * W + s[2]] = 0.0;
  double wz = static_cast<double>(spacing[0]) * spacing[0];
  double wy = static_cast<double>(spacing[1]) * spacing[1];
  double wx = static_cast<double>(spacing[2]) * spacing[2];

  int max_e = std::max({D, H, W});
  std::vector<double> f(max_e), o(max_e), z(max_e + 1);
  std::vector<int> v(max_e);

  // z axis
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      for (int d = 0; d < D; ++d) f[d] = dist[(static_cast<long>(d) * H + y) * W + x];
      edt_pass_1d(f.data(), o.data(), D, wz, v.data(), z.data());
      for (int d = 0; d < D; ++d) dist[(static_cast<long>(d) * H + y) * W + x] = o[d];
    }
  // y axis
  for (int d = 0; d < D; ++d)
    for (int x = 0; x < W; ++x) {
      for (int y = 0; y < H; ++y) f[y] = dist[(static_cast<long>(d) * H + y) * W + x];
      edt_pass_1d(f.data(), o.data(), H, wy, v.data(), z.data());
      for (int y = 0; y < H; ++y) dist[(static_cast<long>(d) * H + y) * W + x] = o[y];
    }
  // x axis
  for (int d = 0; d < D; ++d)
    for (int y = 0; y < H; ++y) {
      double* row = dist.data() + (static_cast<long>(d) * H + y) * W;
      for (int x = 0; x < W; ++x) f[x] = row[x];
      edt_pass_1d(f.data(), o.data(), W, wx, v.data(), z.data());
      for (int x = 0; x < W; ++x) row[x] = o[x];
    }
  return dist;
}

double percentile_linear(std::vector<double>& values, double p) {
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  double rank = p * static_cast<double>(values.size() - 1);
  size_t lo = static_cast<size_t>(std::floor(rank));
  double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

}  // namespace

std::optional<double> hd95(const LabelMap& a, const LabelMap& b, int label,
                           const std::array<float, 3>& spacing) {
  if (a.dims != b.dims) throw std::invalid_argument("hd95: grid mismatch");
  std::vector<std::array<int, 3>> sa = surface_voxels(a, label);
  std::vector<std::array<int, 3>> sb = surface_voxels(b, label);
  if (sa.empty() || sb.empty()) return std::nullopt;
  int D = a.dims[0], H = a.dims[1], W = a.dims[2];
  std::vector<double> dist_to_b = squared_edt(sb, D, H, W, spacing);
  std::vector<double> dist_to_a = squared_edt(sa, D, H, W, spacing);
  std::vector<double> pooled;
  pooled.reserve(sa.size() + sb.size());
  for (const auto& p : sa)
    pooled.push_back(std::sqrt(dist_to_b[(static_cast<long>(p[0]) * H + p[1]) * W + p[2]]));
  for (const auto& p : sb)
    pooled.push_back(std::sqrt(dist_to_a[(static_cast<long>(p[0]) * H + p[1]) * W + p[2]]));
  return percentile_linear(pooled, 0.95);
}

double std_log_jacobian(const DeformationField<float>& phi) {
  Tensor<float> det = jacobian_det(phi);
  int D = det.dim(0), H = det.dim(1), W = det.dim(2);
  double acc = 0.0, acc2 = 0.0;
  long count = 0;
  for (int z = 1; z < D - 1; ++z)
    for (int y = 1; y < H - 1; ++y)
      for (int x = 1; x < W - 1; ++x) {
        double d = det.data()[(static_cast<long>(z) * H + y) * W + x];
        double lg = std::log(std::max(d, 1e-9));
        acc += lg;
        acc2 += lg * lg;
        ++count;
      }
  if (count == 0) throw std::invalid_argument("std_log_jacobian: no interior voxels");
  double m = acc / static_cast<double>(count);
  double var = acc2 / static_cast<double>(count) - m * m;
  return std::sqrt(std::max(var, 0.0));
}

CaseReport evaluate_case(const std::string& id, const LabelMap& m_seg, const LabelMap& f_seg,
                         const DeformationField<float>& phi) {
  if (m_seg.dims != f_seg.dims) throw std::invalid_argument("evaluate_case: grid mismatch");
  if (m_seg.num_classes != f_seg.num_classes)
    throw std::invalid_argument("evaluate_case: class count mismatch");
  CaseReport row;
  row.id = id;
  LabelMap warped = m_seg;
  warped.labels = warp_nearest(m_seg.labels, m_seg.dims[0], m_seg.dims[1], m_seg.dims[2], phi);
  for (int k = 1; k < m_seg.num_classes; ++k) {
    if (!m_seg.available[k] || !f_seg.available[k]) continue;
    row.labels.push_back(k);
    row.dice_per_label.push_back(dice(warped, f_seg, k));
    row.baseline_dice_per_label.push_back(dice(m_seg, f_seg, k));
    row.hd95_per_label.push_back(hd95(warped, f_seg, k, f_seg.spacing));
  }
  row.stdj = std_log_jacobian(phi);
  return row;
}

EvalSummary summarize(const std::vector<CaseReport>& rows) {
  EvalSummary s;
  std::vector<double> dices, base_dices, hd;
  for (const CaseReport& r : rows) {
    for (double d : r.dice_per_label) dices.push_back(d);
    for (double d : r.baseline_dice_per_label) base_dices.push_back(d);
    for (const auto& h : r.hd95_per_label) {
      if (h) hd.push_back(*h);
      else ++s.hd95_missing;
    }
    s.mean_stdj += r.stdj;
  }
  s.cases = static_cast<int>(rows.size());
  s.scored_labels = static_cast<int>(dices.size());
  if (!rows.empty()) s.mean_stdj /= static_cast<double>(rows.size());
  auto mean_of = [](const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double a = 0.0;
    for (double x : v) a += x;
    return a / static_cast<double>(v.size());
  };
  s.mean_dice = mean_of(dices);
  s.baseline_mean_dice = mean_of(base_dices);
  s.mean_hd95 = mean_of(hd);
  if (!dices.empty()) s.dice30 = dice30(dices);
  if (!base_dices.empty()) s.baseline_dice30 = dice30(base_dices);
  return s;
}

std::string report_table(const std::vector<CaseReport>& rows) {
  std::ostringstream os;
  os << "case\tlabel\tdice\thd95_mm\tbaseline_dice\n";
  for (const CaseReport& r : rows)
    for (size_t i = 0; i < r.labels.size(); ++i) {
      os << r.id << '\t' << r.labels[i] << '\t' << r.dice_per_label[i] << '\t';
      if (r.hd95_per_label[i]) os << *r.hd95_per_label[i];
      else os << "missing";
      os << '\t' << r.baseline_dice_per_label[i] << '\n';
    }
  return os.str();
}

std::string summary_lines(const EvalSummary& s) {
  std::ostringstream os;
  os << "summary kind=registered dice=" << s.mean_dice << " dice30=" << s.dice30
     << " hd95_mm=" << s.mean_hd95 << " stdj=" << s.mean_stdj << " cases=" << s.cases
     << " labels=" << s.scored_labels << " hd95_missing=" << s.hd95_missing << '\n';
  os << "summary kind=unregistered dice=" << s.baseline_mean_dice
     << " dice30=" << s.baseline_dice30 << '\n';
  return os.str();
}

}  // namespace gradreg
