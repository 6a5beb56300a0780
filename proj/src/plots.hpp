#pragma once

#include <string>
#include <vector>

#include "image_io.hpp"
#include "metrics.hpp"

namespace nseg {

// Side-by-side panel [input | ground truth | prediction]: the prediction pane
// shows the input with true positives brightened, false positives tinted red
// and false negatives tinted yellow (tint counts are exact pixel counts and
// match the confusion counts).
struct OverlayCounts {
  int64_t fp_tinted = 0;
  int64_t fn_tinted = 0;
};
OverlayCounts render_overlay(const Tensor& image_chw, const BinMask& truth, const BinMask& pred,
                             const std::string& out_path);

// One box per named series (min/max whiskers, quartile box, median line);
// degenerate distributions render as a flat box.
void render_dice_boxplot(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                         const std::string& out_path);

}  // namespace nseg
