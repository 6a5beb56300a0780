#pragma once

#include <array>
#include <string>
#include <vector>

#include "core/tensor.hpp"
#include "image_io.hpp"
#include "metrics.hpp"

namespace nseg {

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct PatchRecord {
  std::string patch_id;
  std::string slide_id;
  std::string image_path;
  std::string mask_path;
  Split split = Split::train;
};

// Slide-aware patch inventory. Columns: patch_id, slide_id, image_path,
// mask_path, split; header mandatory; paths are stored relative to the
// manifest file and resolved at load.
struct Manifest {
  std::string name;
  std::vector<PatchRecord> records;

  std::vector<PatchRecord> split_records(Split s) const;
  // Errc::file_not_found on the first missing referenced file.
  void verify_files() const;

  static Manifest load(const std::string& path);
  void save(const std::string& path) const;
};

// Shuffles distinct slides with the seeded RNG and partitions them so slide
// counts follow largest-remainder rounding of the ratios (ties broken in
// train > val > test order); all patches inherit their slide's split.
Manifest slide_level_split(std::vector<PatchRecord> records, std::array<int, 3> ratios,
                           uint64_t seed);

// Regular-grid extraction over a full-resolution slide; border positions that
// do not fit a whole patch are discarded. A patch is kept when its mean
// saturation clears `sat_threshold` (background filter) and its tumor
// fraction reaches `min_tumor_fraction`.
struct ExtractedPatch {
  Raster image;
  Raster mask;
  int x0 = 0, y0 = 0;
};
std::vector<ExtractedPatch> annotation_guided_extract(const Raster& slide, const Raster& mask,
                                                      int patch_size, int stride,
                                                      double min_tumor_fraction = 0.0,
                                                      double sat_threshold = 0.05);

// Deterministic synthetic patch: smooth wobbled blobs with textured interiors
// on a textured background; the mask is the exact blob support; additive
// noise scaled by noise_level (0 leaves only the smooth texture terms).
struct SynthPatch {
  Raster image;  // 3-channel
  Raster mask;   // values exactly {0, 255}
  double fg_fraction = 0.0;
};
SynthPatch synthesize_patch(uint64_t seed, int size, std::array<int, 2> blob_count_range,
                            double noise_level);
// Attainable foreground-fraction interval for the generator's geometry.
std::array<double, 2> synth_fraction_bounds(int size, std::array<int, 2> blob_count_range);

// Writes a whole synthetic cohort (images/, masks/, manifest.csv) with a
// 7:1:2 slide-level split.
Manifest synthesize_dataset(const std::string& out_dir, int slides, int patches_per_slide,
                            int size, uint64_t seed, double noise_level = 0.15,
                            const std::string& name = "synthetic");

// Image: 3-channel 8-bit -> [3,S,S] in [0,1], bilinear resize to input_size.
// Mask: single-channel with values exactly {0,255} -> {0,1}, nearest resize.
struct LoadedPatch {
  Tensor image;  // [3, input_size, input_size]
  BinMask mask;  // input_size x input_size
};
LoadedPatch load_patch(const PatchRecord& record, int input_size);

}  // namespace nseg
