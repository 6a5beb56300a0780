#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "config.hpp"
#include "core/tensor.hpp"

namespace nseg {

struct BinMask {
  int64_t h = 0;
  int64_t w = 0;
  std::vector<uint8_t> v;  // row-major, values 0/1

  uint8_t at(int64_t y, int64_t x) const { return v[static_cast<size_t>(y * w + x)]; }
  static BinMask make(int64_t h, int64_t w, uint8_t fill = 0);
};

// Exact per-patch pixel counts; TP+TN+FP+FN == H*W.
struct ConfusionCounts {
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  int64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

// bce: sigmoid(z) > 0.5 (strict; ties go to background). standard: argmax
// over classes, lower index wins ties. logits is [C,H,W].
BinMask binarize(const Tensor& logits, LossVariant variant);

ConfusionCounts confusion(const BinMask& pred, const BinMask& truth);

// Degenerate denominators (no positives anywhere in the term) return 1.0:
// perfect agreement on absence.
double dice(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);
double precision(const ConfusionCounts& c);
double accuracy(const ConfusionCounts& c);
double iou(const ConfusionCounts& c);

struct MetricRow {
  std::string id;
  double dice = 0, recall = 0, precision = 0, accuracy = 0, iou = 0;
};

struct MetricAggregate {
  double mean = 0;
  double stddev = 0;  // sample (n-1); 0 with the flag set when n == 1
};

struct MetricReport {
  std::vector<MetricRow> rows;
  MetricAggregate dice, recall, precision, accuracy, iou;
  bool single_row_std = false;  // stddev undefined for one row, reported as 0
  bool zero_shot = false;
  std::string split;
  std::string param_digest;

  std::string to_csv() const;   // header + one row per patch + mean/std rows
  std::string to_json() const;  // machine-readable summary
};

// Mean and sample standard deviation per metric; Errc::empty_input when no rows.
MetricReport aggregate(std::vector<MetricRow> rows);

MetricRow metrics_row(const std::string& id, const ConfusionCounts& c);

}  // namespace nseg
