#include "plots.hpp"

#include <algorithm>
#include <cmath>

#include "core/error.hpp"

namespace nseg {

namespace {

void fill_rect(Raster& img, int y0, int x0, int y1, int x1, uint8_t r, uint8_t g, uint8_t b) {
  y0 = std::max(0, y0);
  x0 = std::max(0, x0);
  y1 = std::min(img.height - 1, y1);
  x1 = std::min(img.width - 1, x1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * (static_cast<double>(v.size()) - 1.0);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return (1.0 - f) * v[lo] + f * v[hi];
}

}  // namespace

OverlayCounts render_overlay(const Tensor& image_chw, const BinMask& truth, const BinMask& pred,
                             const std::string& out_path) {
  check(image_chw.rank() == 3 && image_chw.dim(0) == 3, Errc::shape,
        "overlay: image must be [3,H,W]");
  const int h = static_cast<int>(image_chw.dim(1));
  const int w = static_cast<int>(image_chw.dim(2));
  check(truth.h == h && truth.w == w && pred.h == h && pred.w == w, Errc::shape,
        "overlay: mask dims must match image");
  Raster canvas = Raster::make(3 * w, h, 3);
  OverlayCounts counts;
  auto put = [&](int y, int x, double r, double g, double b) {
    canvas.at(y, x, 0) = static_cast<uint8_t>(std::lround(std::clamp(r, 0.0, 1.0) * 255));
    canvas.at(y, x, 1) = static_cast<uint8_t>(std::lround(std::clamp(g, 0.0, 1.0) * 255));
    canvas.at(y, x, 2) = static_cast<uint8_t>(std::lround(std::clamp(b, 0.0, 1.0) * 255));
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double r = image_chw[(0LL * h + y) * w + x];
      const double g = image_chw[(1LL * h + y) * w + x];
      const double b = image_chw[(2LL * h + y) * w + x];
      put(y, x, r, g, b);  // panel 1: input
      const double gt = truth.at(y, x) ? 1.0 : 0.0;
      put(y, x + w, gt, gt, gt);  // panel 2: ground truth, white = tumor
      // panel 3: prediction overlay
      const bool p = pred.at(y, x) != 0;
      const bool t = truth.at(y, x) != 0;
      if (p && !t) {
        put(y, x + 2 * w, 1.0, 0.0, 0.0);  // false positive: red
        ++counts.fp_tinted;
      } else if (!p && t) {
        put(y, x + 2 * w, 1.0, 1.0, 0.0);  // false negative: yellow
        ++counts.fn_tinted;
      } else if (p) {
        put(y, x + 2 * w, 0.5 + 0.5 * r, 0.5 + 0.5 * g, 0.5 + 0.5 * b);  // TP brightened
      } else {
        put(y, x + 2 * w, r, g, b);
      }
    }
  write_raster(out_path, canvas);
  return counts;
}

void render_dice_boxplot(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                         const std::string& out_path) {
  check(!series.empty(), Errc::empty_input, "boxplot: no series");
  for (const auto& [name, values] : series)
    check(!values.empty(), Errc::empty_input, "boxplot: empty series '" + name + "'");

  const int box_w = 60, gap = 40, margin = 50;
  const int width = margin * 2 + static_cast<int>(series.size()) * (box_w + gap);
  const int height = 320;
  const int plot_top = 20, plot_bottom = height - 30;
  Raster img = Raster::make(width, height, 3);
  fill_rect(img, 0, 0, height - 1, width - 1, 255, 255, 255);

  auto y_of = [&](double v) {
    v = std::clamp(v, 0.0, 1.0);  // Dice lives in [0,1]
    return plot_bottom - static_cast<int>(std::lround(v * (plot_bottom - plot_top)));
  };
  // Axis + gridlines at 0, 0.25, ..., 1.
  fill_rect(img, plot_top, margin - 8, plot_bottom, margin - 7, 0, 0, 0);
  for (int i = 0; i <= 4; ++i) {
    const int y = y_of(i * 0.25);
    fill_rect(img, y, margin - 6, y, width - margin, 210, 210, 210);
  }

  int x = margin + gap / 2;
  for (const auto& [name, values] : series) {
    const double lo = *std::min_element(values.begin(), values.end());
    const double hi = *std::max_element(values.begin(), values.end());
    const double q1 = quantile(values, 0.25);
    const double q2 = quantile(values, 0.5);
    const double q3 = quantile(values, 0.75);
    const int cx = x + box_w / 2;
    fill_rect(img, y_of(hi), cx, y_of(q3), cx, 0, 0, 0);           // upper whisker
    fill_rect(img, y_of(q1), cx, y_of(lo), cx, 0, 0, 0);           // lower whisker
    fill_rect(img, y_of(hi), cx - 10, y_of(hi), cx + 10, 0, 0, 0);  // caps
    fill_rect(img, y_of(lo), cx - 10, y_of(lo), cx + 10, 0, 0, 0);
    fill_rect(img, y_of(q3), x, y_of(q1), x + box_w, 150, 180, 230);  // box
    fill_rect(img, y_of(q3), x, y_of(q3), x + box_w, 0, 0, 0);
    fill_rect(img, y_of(q1), x, y_of(q1), x + box_w, 0, 0, 0);
    fill_rect(img, y_of(q3), x, y_of(q1), x, 0, 0, 0);
    fill_rect(img, y_of(q3), x + box_w, y_of(q1), x + box_w, 0, 0, 0);
    fill_rect(img, y_of(q2), x, y_of(q2), x + box_w, 200, 40, 40);  // median
    x += box_w + gap;
  }
  write_raster(out_path, img);
}

}  // namespace nseg
