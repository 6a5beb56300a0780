#include "metrics.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "core/error.hpp"

namespace nseg {

BinMask BinMask::make(int64_t h, int64_t w, uint8_t fill) {
  BinMask m;
  m.h = h;
  m.w = w;
  m.v.assign(static_cast<size_t>(h * w), fill);
  return m;
}

BinMask binarize(const Tensor& logits, LossVariant variant) {
  check(logits.rank() == 3, Errc::shape, "binarize: expects [C,H,W] logits");
  const int64_t c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  BinMask out = BinMask::make(h, w);
  if (variant == LossVariant::bce) {
    check(c == 1, Errc::variant_mismatch,
          "bce variant expects 1 logit channel, got " + std::to_string(c));
    for (int64_t i = 0; i < h * w; ++i) {
      const double z = logits[i];
      const double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      out.v[static_cast<size_t>(i)] = sig > 0.5 ? 1 : 0;
    }
    return out;
  }
  check(c >= 2, Errc::variant_mismatch,
        "standard variant expects >=2 logit channels, got " + std::to_string(c));
  for (int64_t i = 0; i < h * w; ++i) {
    int64_t best = 0;
    double best_v = logits[i];
    for (int64_t ci = 1; ci < c; ++ci) {
      const double v = logits[ci * h * w + i];
      if (v > best_v) {
        best_v = v;
        best = ci;
      }
    }
    out.v[static_cast<size_t>(i)] = best >= 1 ? 1 : 0;
  }
  return out;
}

ConfusionCounts confusion(const BinMask& pred, const BinMask& truth) {
  check(pred.h == truth.h && pred.w == truth.w, Errc::shape,
        "confusion: mask dimensions differ");
  ConfusionCounts c;
  const size_t n = pred.v.size();
  for (size_t i = 0; i < n; ++i) {
    check(pred.v[i] <= 1 && truth.v[i] <= 1, Errc::shape, "confusion: labels must be binary");
    if (pred.v[i] && truth.v[i])
      ++c.tp;
    else if (!pred.v[i] && !truth.v[i])
      ++c.tn;
    else if (pred.v[i])
      ++c.fp;
    else
      ++c.fn;
  }
  return c;
}

namespace {
double ratio(int64_t num, int64_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace

double dice(const ConfusionCounts& c) { return ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn); }
double recall(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn); }
double precision(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp); }
double accuracy(const ConfusionCounts& c) { return ratio(c.tp + c.tn, c.total()); }
double iou(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp + c.fn); }

MetricRow metrics_row(const std::string& id, const ConfusionCounts& c) {
  MetricRow r;
  r.id = id;
  r.dice = dice(c);
  r.recall = recall(c);
  r.precision = precision(c);
  r.accuracy = accuracy(c);
  r.iou = iou(c);
  return r;
}

namespace {

MetricAggregate aggregate_values(const std::vector<double>& v) {
  MetricAggregate a;
  const size_t n = v.size();
  double sum = 0;
  for (double x : v) sum += x;
  a.mean = sum / static_cast<double>(n);
  if (n > 1) {
    double ss = 0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return a;
}

}  // namespace

MetricReport aggregate(std::vector<MetricRow> rows) {
  check(!rows.empty(), Errc::empty_input, "aggregate: no metric rows");
  MetricReport rep;
  rep.single_row_std = rows.size() == 1;
  std::vector<double> d, r, p, a, i;
  for (const auto& row : rows) {
    d.push_back(row.dice);
    r.push_back(row.recall);
    p.push_back(row.precision);
    a.push_back(row.accuracy);
    i.push_back(row.iou);
  }
  rep.dice = aggregate_values(d);
  rep.recall = aggregate_values(r);
  rep.precision = aggregate_values(p);
  rep.accuracy = aggregate_values(a);
  rep.iou = aggregate_values(i);
  rep.rows = std::move(rows);
  return rep;
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "patch_id,dice,recall,precision,accuracy,iou\n";
  for (const auto& r : rows)
    os << r.id << "," << r.dice << "," << r.recall << "," << r.precision << "," << r.accuracy
       << "," << r.iou << "\n";
  os << "mean," << dice.mean << "," << recall.mean << "," << precision.mean << ","
     << accuracy.mean << "," << iou.mean << "\n";
  os << "std," << dice.stddev << "," << recall.stddev << "," << precision.stddev << ","
     << accuracy.stddev << "," << iou.stddev << "\n";
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["n_patches"] = rows.size();
  j["split"] = split;
  j["zero_shot"] = zero_shot;
  j["param_digest"] = param_digest;
  j["single_row_std"] = single_row_std;
  auto agg = [](const MetricAggregate& a) {
    return nlohmann::json{{"mean", a.mean}, {"std", a.stddev}};
  };
  j["dice"] = agg(dice);
  j["recall"] = agg(recall);
  j["precision"] = agg(precision);
  j["accuracy"] = agg(accuracy);
  j["iou"] = agg(iou);
  j["mdice"] = dice.mean;
  j["miou"] = iou.mean;
  return j.dump(2);
}

}  // namespace nseg
