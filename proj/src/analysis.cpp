#include "attbalance/analysis.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "attbalance/kv.hpp"
#include "attbalance/losses.hpp"

namespace attbalance {

namespace {

using nlohmann::json;

int layer_index(const EvalRecord& record, int layer) {
  for (std::size_t i = 0; i < record.layers.size(); ++i) {
    if (record.layers[i] == layer) return static_cast<int>(i);
  }
  throw ContractError("records carry no captured layer " + std::to_string(layer));
}

bool constant_values(const std::vector<double>& v) {
  for (const double x : v) {
    if (x != v[0]) return false;
  }
  return true;
}

}  // namespace

std::vector<EvalRecord> collect(const ModelParams& params,
                                const std::vector<GroundingSample>& samples,
                                const std::vector<int>& capture_layers) {
  NoGradGuard no_grad;
  std::vector<EvalRecord> records;
  records.reserve(samples.size());
  for (const auto& sample : samples) {
    ForwardResult result = forward(params, sample, capture_layers);
    EvalRecord rec;
    rec.id = sample.id;
    const SegMask mask = rasterize_mask(sample.box, sample.grid_h, sample.grid_w);
    for (const auto& la : result.attention.layers) {
      rec.layers.push_back(la.layer);
      rec.in_mask_sums.push_back(in_mask_sum(la, mask));
    }
    const auto& p = result.pred_box.data();
    rec.pred = {p[0], p[1], p[2], p[3]};
    rec.gt = sample.box;
    rec.iou = iou(rec.pred, rec.gt);
    rec.box_ratio = box_ratio(rec.gt);
    records.push_back(std::move(rec));
  }
  return records;
}

LayerRhoProfile layer_rho_profile(const std::vector<EvalRecord>& records) {
  if (records.size() < 2) {
    throw ContractError("layer_rho_profile: need at least 2 records");
  }
  LayerRhoProfile profile;
  profile.layers = records[0].layers;
  std::vector<double> ious(records.size());
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (records[r].layers != profile.layers) {
      throw ContractError("layer_rho_profile: records disagree on captured layers");
    }
    ious[r] = records[r].iou;
  }
  std::vector<double> sums(records.size());
  for (std::size_t i = 0; i < profile.layers.size(); ++i) {
    for (std::size_t r = 0; r < records.size(); ++r) sums[r] = records[r].in_mask_sums[i];
    profile.rhos.push_back(batch_rho(sums, ious));
    profile.degenerate.push_back(constant_values(sums) || constant_values(ious));
  }
  return profile;
}

AttentionHistogram attention_histogram(const std::vector<EvalRecord>& records, int layer,
                                       int n_bins) {
  if (n_bins < 1) throw ContractError("attention_histogram: n_bins must be >= 1");
  AttentionHistogram hist;
  hist.layer = layer;
  std::vector<double> values;
  if (!records.empty()) {
    const int li = layer_index(records[0], layer);
    for (const auto& r : records) {
      const double v = r.in_mask_sums[static_cast<std::size_t>(li)];
      if (v < 0.1 || v > 0.9) continue;  // extreme intervals omitted
      values.push_back(v);
    }
  }
  if (static_cast<int>(values.size()) < n_bins) {
    throw ContractError("attention_histogram: insufficient samples (" +
                        std::to_string(values.size()) + " retained, need " +
                        std::to_string(n_bins) + ")");
  }
  std::sort(values.begin(), values.end());
  hist.retained = static_cast<int>(values.size());
  const int base = hist.retained / n_bins;
  const int remainder = hist.retained % n_bins;
  std::size_t pos = 0;
  for (int b = 0; b < n_bins; ++b) {
    const int count = base + (b < remainder ? 1 : 0);  // earliest bins take the slack
    HistogramBin bin;
    bin.count = count;
    bin.lo = values[pos];
    bin.hi = values[pos + static_cast<std::size_t>(count) - 1];
    hist.bins.push_back(bin);
    pos += static_cast<std::size_t>(count);
  }
  return hist;
}

BoxRatioCurve box_ratio_curve(const std::vector<EvalRecord>& records, int layer,
                              int n_intervals) {
  if (records.size() < static_cast<std::size_t>(n_intervals)) {
    throw ContractError("box_ratio_curve: need at least " + std::to_string(n_intervals) +
                        " records");
  }
  const int li = layer_index(records[0], layer);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& r : records) {
    lo = std::min(lo, r.box_ratio);
    hi = std::max(hi, r.box_ratio);
  }
  BoxRatioCurve curve;
  curve.layer = layer;
  const double width = (hi - lo) / n_intervals;
  curve.intervals.resize(static_cast<std::size_t>(n_intervals));
  for (int k = 0; k < n_intervals; ++k) {
    auto& iv = curve.intervals[static_cast<std::size_t>(k)];
    iv.lo = lo + width * k;
    iv.hi = (k == n_intervals - 1) ? hi : lo + width * (k + 1);
  }
  for (const auto& r : records) {
    int idx;
    if (width <= 0.0) {
      idx = 0;  // all ratios identical
    } else {
      idx = std::min(n_intervals - 1, static_cast<int>((r.box_ratio - lo) / width));
    }
    auto& iv = curve.intervals[static_cast<std::size_t>(idx)];
    iv.count += 1;
    iv.mean_attention += r.in_mask_sums[static_cast<std::size_t>(li)];
  }
  for (auto& iv : curve.intervals) {
    if (iv.count > 0) {
      iv.mean_attention /= iv.count;
      iv.populated = true;
    } else {
      iv.mean_attention = 0.0;
      iv.populated = false;
    }
  }
  return curve;
}

double accuracy(const std::vector<EvalRecord>& records, double threshold) {
  if (records.empty()) throw ContractError("accuracy: no records");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ContractError("accuracy: threshold must lie in (0, 1)");
  }
  std::size_t hits = 0;
  for (const auto& r : records) {
    if (r.iou > threshold) ++hits;  // strictly greater
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double mean_in_mask(const std::vector<EvalRecord>& records, int layer) {
  if (records.empty()) throw ContractError("mean_in_mask: no records");
  const int li = layer_index(records[0], layer);
  double s = 0.0;
  for (const auto& r : records) s += r.in_mask_sums[static_cast<std::size_t>(li)];
  return s / static_cast<double>(records.size());
}

AnalysisReport analyze(const std::vector<EvalRecord>& records) {
  AnalysisReport report;
  report.sample_count = static_cast<int>(records.size());
  report.rho_profile = layer_rho_profile(records);
  const int last_layer = report.rho_profile.layers.back();
  report.acc_at_05 = accuracy(records, 0.5);
  report.mean_in_mask_last_layer = mean_in_mask(records, last_layer);
  try {
    report.histogram = attention_histogram(records, last_layer);
  } catch (const ContractError&) {
    report.histogram.layer = last_layer;  // too few mid-range values; left empty
  }
  report.ratio_curve = box_ratio_curve(records, last_layer);
  return report;
}

std::string report_json(const AnalysisReport& report) {
  json j;
  j["sample_count"] = report.sample_count;
  j["acc_at_05"] = report.acc_at_05;
  j["mean_in_mask_last_layer"] = report.mean_in_mask_last_layer;
  json rho;
  rho["layers"] = report.rho_profile.layers;
  rho["rhos"] = report.rho_profile.rhos;
  rho["degenerate"] = report.rho_profile.degenerate;
  j["rho_profile"] = rho;
  json hist;
  hist["layer"] = report.histogram.layer;
  hist["retained"] = report.histogram.retained;
  json bins = json::array();
  for (const auto& b : report.histogram.bins) {
    bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}});
  }
  hist["bins"] = bins;
  j["attention_histogram"] = hist;
  json curve;
  curve["layer"] = report.ratio_curve.layer;
  json intervals = json::array();
  for (const auto& iv : report.ratio_curve.intervals) {
    json e = {{"lo", iv.lo}, {"hi", iv.hi}, {"count", iv.count}};
    if (iv.populated) {
      e["mean_attention"] = iv.mean_attention;
    } else {
      e["mean_attention"] = nullptr;
    }
    intervals.push_back(e);
  }
  curve["intervals"] = intervals;
  j["box_ratio_curve"] = curve;
  return j.dump(2);
}

std::string records_csv(const std::vector<EvalRecord>& records) {
  std::ostringstream out;
  out << "id,iou,box_ratio,pred_cx,pred_cy,pred_w,pred_h,gt_cx,gt_cy,gt_w,gt_h";
  if (!records.empty()) {
    for (const int l : records[0].layers) out << ",in_mask_layer_" << l;
  }
  out << '\n';
  for (const auto& r : records) {
    out << r.id << ',' << format_double(r.iou) << ',' << format_double(r.box_ratio) << ','
        << format_double(r.pred.cx) << ',' << format_double(r.pred.cy) << ','
        << format_double(r.pred.w) << ',' << format_double(r.pred.h) << ','
        << format_double(r.gt.cx) << ',' << format_double(r.gt.cy) << ','
        << format_double(r.gt.w) << ',' << format_double(r.gt.h);
    for (const double s : r.in_mask_sums) out << ',' << format_double(s);
    out << '\n';
  }
  return out.str();
}

void write_records_csv(const std::vector<EvalRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open csv file for writing: " + path);
  out << records_csv(records);
  if (!out) throw IoError("failed writing csv file: " + path);
}

std::vector<EvalRecord> read_records_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open csv file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty csv file: " + path);
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string col;
    while (std::getline(hs, col, ',')) header.push_back(col);
  }
  const std::vector<std::string> fixed = {"id",      "iou",    "box_ratio", "pred_cx",
                                          "pred_cy", "pred_w", "pred_h",    "gt_cx",
                                          "gt_cy",   "gt_w",   "gt_h"};
  if (header.size() < fixed.size()) throw IoError("csv header too short: " + path);
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (header[i] != fixed[i]) {
      throw IoError("unexpected csv column '" + header[i] + "', expected '" + fixed[i] + "'");
    }
  }
  std::vector<int> layers;
  const std::string prefix = "in_mask_layer_";
  for (std::size_t i = fixed.size(); i < header.size(); ++i) {
    if (header[i].rfind(prefix, 0) != 0) {
      throw IoError("unexpected csv column '" + header[i] + "'");
    }
    layers.push_back(static_cast<int>(parse_int(header[i].substr(prefix.size()))));
  }
  std::vector<EvalRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) {
      throw IoError("csv row has " + std::to_string(cells.size()) + " cells, expected " +
                    std::to_string(header.size()));
    }
    EvalRecord r;
    r.id = parse_u64(cells[0]);
    r.iou = parse_double(cells[1]);
    r.box_ratio = parse_double(cells[2]);
    r.pred = {parse_double(cells[3]), parse_double(cells[4]), parse_double(cells[5]),
              parse_double(cells[6])};
    r.gt = {parse_double(cells[7]), parse_double(cells[8]), parse_double(cells[9]),
            parse_double(cells[10])};
    r.layers = layers;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      r.in_mask_sums.push_back(parse_double(cells[11 + i]));
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace attbalance
