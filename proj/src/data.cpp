#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "core/error.hpp"
#include "core/rng.hpp"

namespace fs = std::filesystem;

namespace nseg {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  fail(Errc::parse, "unknown split '" + s + "' (want train/val/test)");
}

std::vector<PatchRecord> Manifest::split_records(Split s) const {
  std::vector<PatchRecord> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(r);
  return out;
}

void Manifest::verify_files() const {
  for (const auto& r : records) {
    check(fs::exists(r.image_path), Errc::file_not_found, "missing image: " + r.image_path);
    check(fs::exists(r.mask_path), Errc::file_not_found, "missing mask: " + r.mask_path);
  }
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), Errc::file_not_found, "manifest not found: " + path);
  const fs::path base = fs::path(path).parent_path();
  Manifest m;
  std::string line;
  bool header_seen = false;
  std::set<std::string> ids;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string tag = "# name:";
      if (line.rfind(tag, 0) == 0) {
        std::string v = line.substr(tag.size());
        size_t a = v.find_first_not_of(' ');
        if (a != std::string::npos) m.name = v.substr(a);
      }
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!header_seen) {
      check(fields.size() == 5 && fields[0] == "patch_id" && fields[1] == "slide_id" &&
                fields[2] == "image_path" && fields[3] == "mask_path" && fields[4] == "split",
            Errc::parse, "manifest header must be patch_id,slide_id,image_path,mask_path,split");
      header_seen = true;
      continue;
    }
    check(fields.size() == 5, Errc::parse,
          "manifest line " + std::to_string(lineno) + ": expected 5 fields");
    PatchRecord r;
    r.patch_id = fields[0];
    r.slide_id = fields[1];
    auto resolve = [&](const std::string& p) {
      return fs::path(p).is_absolute() ? p : (base / p).string();
    };
    r.image_path = resolve(fields[2]);
    r.mask_path = resolve(fields[3]);
    r.split = split_from_string(fields[4]);
    check(ids.insert(r.patch_id).second, Errc::parse,
          "duplicate patch_id '" + r.patch_id + "' in manifest");
    m.records.push_back(std::move(r));
  }
  check(header_seen, Errc::parse, "manifest has no header row: " + path);
  return m;
}

void Manifest::save(const std::string& path) const {
  std::ofstream out(path);
  check(out.good(), Errc::io, "cannot write manifest: " + path);
  if (!name.empty()) out << "# name: " << name << "\n";
  out << "patch_id,slide_id,image_path,mask_path,split\n";
  for (const auto& r : records)
    out << r.patch_id << "," << r.slide_id << "," << r.image_path << "," << r.mask_path << ","
        << to_string(r.split) << "\n";
  check(out.good(), Errc::io, "failed writing manifest: " + path);
}

Manifest slide_level_split(std::vector<PatchRecord> records, std::array<int, 3> ratios,
                           uint64_t seed) {
  check(ratios[0] > 0 && ratios[1] > 0 && ratios[2] > 0, Errc::validation,
        "split ratios must be positive");
  std::vector<std::string> slides;
  for (const auto& r : records)
    if (std::find(slides.begin(), slides.end(), r.slide_id) == slides.end())
      slides.push_back(r.slide_id);
  check(slides.size() >= 3, Errc::too_few_slides,
        "need at least 3 distinct slides, got " + std::to_string(slides.size()));

  Rng rng(seed);
  rng.shuffle(slides);

  // Largest-remainder apportionment; ties resolved train > val > test.
  const int s = static_cast<int>(slides.size());
  const double total = ratios[0] + ratios[1] + ratios[2];
  int counts[3];
  double remainders[3];
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = s * ratios[static_cast<size_t>(i)] / total;
    counts[i] = static_cast<int>(std::floor(exact));
    remainders[i] = exact - counts[i];
    assigned += counts[i];
  }
  int leftover = s - assigned;
  while (leftover > 0) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (remainders[i] > remainders[best]) best = i;
    ++counts[best];
    remainders[best] = -1.0;
    --leftover;
  }

  std::map<std::string, Split> slide_split;
  int idx = 0;
  for (int i = 0; i < counts[0]; ++i) slide_split[slides[static_cast<size_t>(idx++)]] = Split::train;
  for (int i = 0; i < counts[1]; ++i) slide_split[slides[static_cast<size_t>(idx++)]] = Split::val;
  for (int i = 0; i < counts[2]; ++i) slide_split[slides[static_cast<size_t>(idx++)]] = Split::test;

  Manifest m;
  for (auto& r : records) {
    r.split = slide_split.at(r.slide_id);
    m.records.push_back(std::move(r));
  }
  return m;
}

namespace {

double pixel_saturation(const Raster& img, int y, int x) {
  const double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  return mx > 0.0 ? (mx - mn) / mx : 0.0;
}

}  // namespace

std::vector<ExtractedPatch> annotation_guided_extract(const Raster& slide, const Raster& mask,
                                                      int patch_size, int stride,
                                                      double min_tumor_fraction,
                                                      double sat_threshold) {
  check(slide.channels == 3 && mask.channels == 1, Errc::shape,
        "extract: slide must be 3-channel and mask 1-channel");
  check(slide.width == mask.width && slide.height == mask.height, Errc::shape,
        "extract: slide and mask dimensions differ");
  check(patch_size > 0 && stride > 0, Errc::shape, "extract: patch_size and stride must be > 0");
  check(patch_size <= slide.width && patch_size <= slide.height, Errc::shape,
        "extract: patch larger than slide");
  std::vector<ExtractedPatch> out;
  for (int y0 = 0; y0 + patch_size <= slide.height; y0 += stride) {
    for (int x0 = 0; x0 + patch_size <= slide.width; x0 += stride) {
      double sat = 0.0;
      int64_t tumor = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x) {
          sat += pixel_saturation(slide, y0 + y, x0 + x);
          if (mask.at(y0 + y, x0 + x, 0) > 127) ++tumor;
        }
      const double npx = static_cast<double>(patch_size) * patch_size;
      if (sat / npx < sat_threshold) continue;
      if (static_cast<double>(tumor) / npx < min_tumor_fraction) continue;
      ExtractedPatch p;
      p.x0 = x0;
      p.y0 = y0;
      p.image = Raster::make(patch_size, patch_size, 3);
      p.mask = Raster::make(patch_size, patch_size, 1);
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x) {
          for (int c = 0; c < 3; ++c) p.image.at(y, x, c) = slide.at(y0 + y, x0 + x, c);
          p.mask.at(y, x, 0) = mask.at(y0 + y, x0 + x, 0) > 127 ? 255 : 0;
        }
      out.push_back(std::move(p));
    }
  }
  return out;
}

namespace {

// Geometry constants shared by the generator and its fraction bounds.
constexpr double kRadiusMinFrac = 1.0 / 12.0;  // of patch size
constexpr double kRadiusMaxFrac = 1.0 / 7.0;
constexpr double kWobble = 0.35;  // max total radial modulation

struct Blob {
  double cx, cy, r0;
  double amp[3], phase[3];  // harmonics m = 2, 3, 4

  double radius_at(double theta) const {
    double r = 1.0;
    for (int m = 0; m < 3; ++m) r += amp[m] * std::sin((m + 2) * theta + phase[m]);
    return r0 * r;
  }
};

struct TextureField {
  double amp[3], fx[3], fy[3], phase[3];

  double at(double x, double y, double size) const {
    double t = 0.0;
    for (int j = 0; j < 3; ++j)
      t += amp[j] * std::sin(2.0 * M_PI * (fx[j] * x + fy[j] * y) / size + phase[j]);
    return t;
  }
};

TextureField draw_texture(Rng& rng) {
  TextureField f;
  for (int j = 0; j < 3; ++j) {
    f.amp[j] = rng.uniform(0.01, 0.05);
    f.fx[j] = rng.uniform(1.0, 4.0);
    f.fy[j] = rng.uniform(1.0, 4.0);
    f.phase[j] = rng.uniform(0.0, 2.0 * M_PI);
  }
  return f;
}

}  // namespace

std::array<double, 2> synth_fraction_bounds(int size, std::array<int, 2> blob_count_range) {
  const double rmin = (1.0 - kWobble) * kRadiusMinFrac;
  const double rmax = (1.0 + kWobble) * kRadiusMaxFrac + 2.0 / size;  // rasterization slack
  const double lo = 0.5 * M_PI * rmin * rmin;  // union >= half the smallest ideal blob
  const double hi = std::min(1.0, blob_count_range[1] * M_PI * rmax * rmax);
  return {lo, hi};
}

SynthPatch synthesize_patch(uint64_t seed, int size, std::array<int, 2> blob_count_range,
                            double noise_level) {
  check(size >= 32, Errc::validation, "synthesize_patch: size must be >= 32");
  check(blob_count_range[0] >= 1 && blob_count_range[1] >= blob_count_range[0], Errc::validation,
        "synthesize_patch: bad blob count range");
  Rng rng(seed);
  const int blobs = static_cast<int>(rng.randint(blob_count_range[0], blob_count_range[1] + 1));
  const double margin = (1.0 + kWobble) * kRadiusMaxFrac * size + 1.0;
  std::vector<Blob> shapes;
  for (int b = 0; b < blobs; ++b) {
    Blob blob;
    blob.cx = rng.uniform(margin, size - margin);
    blob.cy = rng.uniform(margin, size - margin);
    blob.r0 = rng.uniform(kRadiusMinFrac * size, kRadiusMaxFrac * size);
    for (int m = 0; m < 3; ++m) {
      blob.amp[m] = rng.uniform(0.0, kWobble / 3.0);
      blob.phase[m] = rng.uniform(0.0, 2.0 * M_PI);
    }
    shapes.push_back(blob);
  }
  TextureField bg_tex = draw_texture(rng);
  TextureField fg_tex = draw_texture(rng);

  SynthPatch out;
  out.mask = Raster::make(size, size, 1);
  out.image = Raster::make(size, size, 3);
  // Eosin-pink background, hematoxylin-purple nests.
  const double bg[3] = {0.86, 0.72, 0.82};
  const double fg[3] = {0.48, 0.32, 0.58};
  int64_t fg_pixels = 0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      bool inside = false;
      for (const auto& blob : shapes) {
        const double dx = x + 0.5 - blob.cx, dy = y + 0.5 - blob.cy;
        const double dist = std::sqrt(dx * dx + dy * dy);
        if (dist <= blob.radius_at(std::atan2(dy, dx))) {
          inside = true;
          break;
        }
      }
      if (inside) ++fg_pixels;
      out.mask.at(y, x, 0) = inside ? 255 : 0;
      const double t = inside ? fg_tex.at(x, y, size) : bg_tex.at(x, y, size);
      const double* base = inside ? fg : bg;
      for (int c = 0; c < 3; ++c) {
        const double noise = noise_level * 0.3 * (rng.uniform() - 0.5);
        double v = base[c] * (1.0 + t) + noise;
        v = std::min(std::max(v, 0.0), 1.0);
        out.image.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    }
  out.fg_fraction = static_cast<double>(fg_pixels) / (static_cast<double>(size) * size);
  return out;
}

Manifest synthesize_dataset(const std::string& out_dir, int slides, int patches_per_slide,
                            int size, uint64_t seed, double noise_level,
                            const std::string& name) {
  check(slides > 0 && patches_per_slide > 0, Errc::validation,
        "synthesize_dataset: counts must be positive");
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "masks");
  std::vector<PatchRecord> records;
  for (int s = 0; s < slides; ++s) {
    char slide_id[32];
    std::snprintf(slide_id, sizeof(slide_id), "slide_%03d", s);
    for (int p = 0; p < patches_per_slide; ++p) {
      const uint64_t patch_seed =
          seed ^ (static_cast<uint64_t>(s) * 0x9E3779B97F4A7C15ull + static_cast<uint64_t>(p) + 1);
      SynthPatch patch = synthesize_patch(patch_seed, size, {1, 3}, noise_level);
      char patch_id[48];
      std::snprintf(patch_id, sizeof(patch_id), "%s_p%02d", slide_id, p);
      const std::string img_rel = std::string("images/") + patch_id + ".ppm";
      const std::string mask_rel = std::string("masks/") + patch_id + ".pgm";
      write_raster((fs::path(out_dir) / img_rel).string(), patch.image);
      write_raster((fs::path(out_dir) / mask_rel).string(), patch.mask);
      PatchRecord r;
      r.patch_id = patch_id;
      r.slide_id = slide_id;
      r.image_path = img_rel;  // manifest-relative
      r.mask_path = mask_rel;
      records.push_back(std::move(r));
    }
  }
  Manifest m = slide_level_split(std::move(records), {7, 1, 2}, seed);
  m.name = name;
  m.save((fs::path(out_dir) / "manifest.csv").string());
  // Reload so record paths are resolved against the manifest location.
  Manifest resolved = Manifest::load((fs::path(out_dir) / "manifest.csv").string());
  return resolved;
}

LoadedPatch load_patch(const PatchRecord& record, int input_size) {
  Raster img = read_raster(record.image_path);
  check(img.channels == 3, Errc::parse, "patch image must be 3-channel: " + record.image_path);
  Raster mask = read_raster(record.mask_path);
  check(mask.channels == 1, Errc::parse, "patch mask must be 1-channel: " + record.mask_path);
  for (uint8_t v : mask.px)
    check(v == 0 || v == 255, Errc::bad_mask_values,
          "mask contains value " + std::to_string(static_cast<int>(v)) + " outside {0,255}: " +
              record.mask_path);

  LoadedPatch out;
  out.image = resize_bilinear_chw(raster_to_tensor(img), input_size, input_size);
  Raster mask_r = resize_nearest(mask, input_size, input_size);
  out.mask = BinMask::make(input_size, input_size);
  for (int64_t i = 0; i < static_cast<int64_t>(mask_r.px.size()); ++i) {
    const uint8_t v = mask_r.px[static_cast<size_t>(i)];
    check(v == 0 || v == 255, Errc::bad_mask_values, "mask lost binarity during resize");
    out.mask.v[static_cast<size_t>(i)] = v == 255 ? 1 : 0;
  }
  return out;
}

}  // namespace nseg
