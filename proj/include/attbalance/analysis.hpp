#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attbalance/model.hpp"
#include "attbalance/sample.hpp"

namespace attbalance {

// One evaluated sample: everything the correlation and imbalance statistics
// need, with no tensors attached.
struct EvalRecord {
  std::uint64_t id = 0;
  std::vector<int> layers;            // captured layer indices
  std::vector<double> in_mask_sums;   // aligned with layers
  double iou = 0.0;
  double box_ratio = 0.0;
  BoxSpec pred;
  BoxSpec gt;
};

struct LayerRhoProfile {
  std::vector<int> layers;
  std::vector<double> rhos;
  std::vector<bool> degenerate;  // constant ranks on either side
};

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  int count = 0;
};

// Equal-count split of in-mask attention values, extremes omitted.
struct AttentionHistogram {
  int layer = 0;
  int retained = 0;
  std::vector<HistogramBin> bins;
};

struct RatioInterval {
  double lo = 0.0;
  double hi = 0.0;
  int count = 0;
  double mean_attention = 0.0;
  bool populated = false;
};

// Mean in-mask attention across 10 even-width box-ratio intervals.
struct BoxRatioCurve {
  int layer = 0;
  std::vector<RatioInterval> intervals;
};

struct AnalysisReport {
  int sample_count = 0;
  LayerRhoProfile rho_profile;
  AttentionHistogram histogram;
  BoxRatioCurve ratio_curve;
  double acc_at_05 = 0.0;
  double mean_in_mask_last_layer = 0.0;
};

std::vector<EvalRecord> collect(const ModelParams& params,
                                const std::vector<GroundingSample>& samples,
                                const std::vector<int>& capture_layers);

LayerRhoProfile layer_rho_profile(const std::vector<EvalRecord>& records);

// Fig. 3 left: drop sums < 0.1 or > 0.9, sort, split into 8 equal-count bins
// with the remainder going to the lowest-value bins.
AttentionHistogram attention_histogram(const std::vector<EvalRecord>& records, int layer,
                                       int n_bins = 8);

// Fig. 3 right: 10 even-width intervals over the observed box-ratio range.
BoxRatioCurve box_ratio_curve(const std::vector<EvalRecord>& records, int layer,
                              int n_intervals = 10);

// Fraction of records with iou strictly greater than the threshold.
double accuracy(const std::vector<EvalRecord>& records, double threshold);

// Mean in-mask attention at one captured layer over all records.
double mean_in_mask(const std::vector<EvalRecord>& records, int layer);

AnalysisReport analyze(const std::vector<EvalRecord>& records);

std::string report_json(const AnalysisReport& report);
void write_records_csv(const std::vector<EvalRecord>& records, const std::string& path);
std::string records_csv(const std::vector<EvalRecord>& records);
std::vector<EvalRecord> read_records_csv(const std::string& path);

}  // namespace attbalance
