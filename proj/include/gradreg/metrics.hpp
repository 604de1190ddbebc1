#pragma once

#include "gradreg/volume.hpp"

#include <optional>

namespace gradreg {

// Overlap coefficient 2|A^B|/(|A|+|B|) for one label. Both masks empty -> 1,
// exactly one empty -> 0.
double dice(const LabelMap& a, const LabelMap& b, int label);

// Mean of the lowest ceil(0.3 n) scores (robustness measure), pooled over
// whatever (case,label) scores the caller supplies.
double dice30(std::vector<double> scores);

// 95th percentile (linear interpolation between order statistics) of the
// pooled symmetric surface-to-surface Euclidean distances in mm. Surfaces via
// 6-connectivity erosion. nullopt when either mask is empty.
std::optional<double> hd95(const LabelMap& a, const LabelMap& b, int label,
                           const std::array<float, 3>& spacing);

// Standard deviation over interior voxels of log(max(det J, 1e-9)); the
// clamp guards non-diffeomorphic fields with locally negative determinants.
double std_log_jacobian(const DeformationField<float>& phi);

struct CaseReport {
  std::string id;
  std::vector<int> labels;  // evaluated foreground labels
  std::vector<double> dice_per_label;
  std::vector<std::optional<double>> hd95_per_label;
  std::vector<double> baseline_dice_per_label;  // unregistered
  double stdj = 0.0;
};

// Warps M_seg (nearest) with phi and scores it against F_seg. Labels missing
// an availability flag on either side are skipped.
CaseReport evaluate_case(const std::string& id, const LabelMap& m_seg, const LabelMap& f_seg,
                         const DeformationField<float>& phi);

struct EvalSummary {
  double mean_dice = 0.0, dice30 = 0.0;
  double mean_hd95 = 0.0;
  long hd95_missing = 0;
  double mean_stdj = 0.0;
  double baseline_mean_dice = 0.0, baseline_dice30 = 0.0;
  int cases = 0, scored_labels = 0;
};

EvalSummary summarize(const std::vector<CaseReport>& rows);

// case/label table plus summary block, tab-separated.
std::string report_table(const std::vector<CaseReport>& rows);
std::string summary_lines(const EvalSummary& s);

}  // namespace gradreg
