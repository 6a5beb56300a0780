#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "core/error.hpp"
#include "data.hpp"

using namespace nseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  auto p = fs::temp_directory_path() /
           ("nseg_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

std::vector<PatchRecord> fake_records(int slides, int patches_per_slide) {
  std::vector<PatchRecord> recs;
  for (int s = 0; s < slides; ++s)
    for (int p = 0; p < patches_per_slide; ++p) {
      PatchRecord r;
      r.slide_id = "s" + std::to_string(s);
      r.patch_id = r.slide_id + "_p" + std::to_string(p);
      r.image_path = "img.ppm";
      r.mask_path = "mask.pgm";
      recs.push_back(r);
    }
  return recs;
}

}  // namespace

TEST_CASE("raster io round-trips PPM and PGM") {
  auto dir = temp_dir();
  Raster img = Raster::make(5, 3, 3);
  for (size_t i = 0; i < img.px.size(); ++i) img.px[i] = static_cast<uint8_t>(i * 7 % 256);
  write_raster((dir / "a.ppm").string(), img);
  Raster back = read_raster((dir / "a.ppm").string());
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.channels == 3);
  CHECK(back.px == img.px);

  Raster mask = Raster::make(4, 4, 1);
  mask.at(2, 1, 0) = 255;
  write_raster((dir / "m.pgm").string(), mask);
  Raster mback = read_raster((dir / "m.pgm").string());
  CHECK(mback.px == mask.px);

  CHECK_THROWS_AS(read_raster((dir / "missing.ppm").string()), Error);
  fs::remove_all(dir);
}

TEST_CASE("slide_level_split: 10 slides partition exactly 7/1/2") {
  Manifest m = slide_level_split(fake_records(10, 3), {7, 1, 2}, 42);
  std::set<std::string> tr, va, te;
  for (const auto& r : m.records) {
    if (r.split == Split::train) tr.insert(r.slide_id);
    if (r.split == Split::val) va.insert(r.slide_id);
    if (r.split == Split::test) te.insert(r.slide_id);
  }
  CHECK(tr.size() == 7);
  CHECK(va.size() == 1);
  CHECK(te.size() == 2);
}

TEST_CASE("slide_level_split: no slide leaks across splits, deterministic in seed") {
  for (uint64_t seed = 0; seed < 25; ++seed) {
    Manifest m = slide_level_split(fake_records(13, 2), {7, 1, 2}, seed);
    std::map<std::string, Split> seen;
    for (const auto& r : m.records) {
      auto it = seen.find(r.slide_id);
      if (it != seen.end())
        CHECK(it->second == r.split);
      else
        seen[r.slide_id] = r.split;
    }
  }
  Manifest a = slide_level_split(fake_records(9, 2), {7, 1, 2}, 5);
  Manifest b = slide_level_split(fake_records(9, 2), {7, 1, 2}, 5);
  REQUIRE(a.records.size() == b.records.size());
  for (size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].patch_id == b.records[i].patch_id);
    CHECK(a.records[i].split == b.records[i].split);
  }
}

TEST_CASE("slide_level_split: fewer than 3 slides is an error") {
  CHECK_THROWS_AS(slide_level_split(fake_records(2, 4), {7, 1, 2}, 0), Error);
  try {
    slide_level_split(fake_records(2, 4), {7, 1, 2}, 0);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::too_few_slides);
  }
}

TEST_CASE("largest-remainder counts for awkward slide totals") {
  // 11 slides: exact shares 7.7/1.1/2.2 -> floors 7/1/2, leftover 1 goes to
  // the largest remainder (train).
  Manifest m = slide_level_split(fake_records(11, 1), {7, 1, 2}, 3);
  int counts[3] = {0, 0, 0};
  for (const auto& r : m.records) ++counts[static_cast<int>(r.split)];
  CHECK(counts[0] == 8);
  CHECK(counts[1] == 1);
  CHECK(counts[2] == 2);
}

TEST_CASE("synthesize_patch: determinism, fraction bounds, mask binarity") {
  SynthPatch a = synthesize_patch(909, 64, {1, 3}, 0.2);
  SynthPatch b = synthesize_patch(909, 64, {1, 3}, 0.2);
  CHECK(a.image.px == b.image.px);
  CHECK(a.mask.px == b.mask.px);

  for (uint8_t v : a.mask.px) CHECK((v == 0 || v == 255));

  auto bounds = synth_fraction_bounds(64, {1, 3});
  for (uint64_t seed = 0; seed < 50; ++seed) {
    SynthPatch p = synthesize_patch(seed, 64, {1, 3}, 0.1);
    CHECK(p.fg_fraction >= bounds[0]);
    CHECK(p.fg_fraction <= bounds[1]);
  }
}

TEST_CASE("synthesize_patch: zero noise leaves a piecewise-smooth image") {
  SynthPatch p = synthesize_patch(17, 64, {1, 2}, 0.0);
  SynthPatch q = synthesize_patch(17, 64, {1, 2}, 0.0);
  CHECK(p.image.px == q.image.px);
  // away from mask edges, neighbouring pixels differ by at most a few levels
  int worst = 0;
  for (int y = 1; y < 63; ++y)
    for (int x = 1; x < 63; ++x) {
      bool near_edge = false;
      for (int dy = -1; dy <= 1 && !near_edge; ++dy)
        for (int dx = -1; dx <= 1 && !near_edge; ++dx)
          if (p.mask.at(y + dy, x + dx, 0) != p.mask.at(y, x, 0)) near_edge = true;
      if (near_edge) continue;
      for (int c = 0; c < 3; ++c)
        worst = std::max(worst, std::abs(static_cast<int>(p.image.at(y, x, c)) -
                                         static_cast<int>(p.image.at(y, x + 1, c))));
    }
  CHECK(worst <= 6);
  // and a noisy render of the same seed differs
  SynthPatch noisy = synthesize_patch(17, 64, {1, 2}, 0.5);
  CHECK(noisy.image.px != p.image.px);
  CHECK(noisy.mask.px == p.mask.px);  // geometry unchanged by noise
}

TEST_CASE("annotation_guided_extract") {
  // 128x128 "slide": left half saturated pink tissue, right half gray background.
  Raster slide = Raster::make(128, 128, 3);
  Raster mask = Raster::make(128, 128, 1);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) {
      if (x < 64) {
        slide.at(y, x, 0) = 220;
        slide.at(y, x, 1) = 140;
        slide.at(y, x, 2) = 180;
      } else {
        slide.at(y, x, 0) = slide.at(y, x, 1) = slide.at(y, x, 2) = 235;
      }
      mask.at(y, x, 0) = (x < 32 && y < 32) ? 255 : 0;
    }

  SUBCASE("grid arithmetic: 128/64 with stride 64 gives at most 4 patches") {
    auto patches = annotation_guided_extract(slide, mask, 64, 64, 0.0, 0.0);
    CHECK(patches.size() == 4);
    auto filtered = annotation_guided_extract(slide, mask, 64, 64, 0.0, 0.05);
    CHECK(filtered.size() == 2);  // right-half tiles are unsaturated background
  }
  SUBCASE("all-background slide with the filter on yields nothing") {
    Raster gray = Raster::make(128, 128, 3);
    for (auto& v : gray.px) v = 230;
    auto patches = annotation_guided_extract(gray, mask, 64, 64, 0.0, 0.05);
    CHECK(patches.empty());
  }
  SUBCASE("mask crops align with image crops pixel-for-pixel") {
    auto patches = annotation_guided_extract(slide, mask, 48, 40, 0.0, 0.0);
    REQUIRE(!patches.empty());
    for (const auto& p : patches)
      for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x)
          CHECK((p.mask.at(y, x, 0) == 255) ==
                (mask.at(p.y0 + y, p.x0 + x, 0) == 255));
  }
  SUBCASE("border patches are discarded, never padded") {
    auto patches = annotation_guided_extract(slide, mask, 100, 64, 0.0, 0.0);
    CHECK(patches.size() == 1);  // only (0,0) fits fully
  }
  SUBCASE("min tumor fraction keeps only tumor-bearing tiles") {
    auto patches = annotation_guided_extract(slide, mask, 64, 64, 0.2, 0.0);
    CHECK(patches.size() == 1);  // only the top-left tile has 25% tumor
  }
}

TEST_CASE("manifest save/load round trip and verification") {
  auto dir = temp_dir();
  Manifest m = synthesize_dataset((dir / "cohort").string(), 5, 2, 32, 7, 0.1, "unit");
  CHECK(m.records.size() == 10);
  CHECK(m.name == "unit");
  m.verify_files();

  Manifest loaded = Manifest::load((dir / "cohort" / "manifest.csv").string());
  REQUIRE(loaded.records.size() == m.records.size());
  for (size_t i = 0; i < m.records.size(); ++i) {
    CHECK(loaded.records[i].patch_id == m.records[i].patch_id);
    CHECK(loaded.records[i].split == m.records[i].split);
  }
  loaded.verify_files();

  SUBCASE("duplicate patch ids rejected") {
    std::ofstream bad(dir / "bad.csv");
    bad << "patch_id,slide_id,image_path,mask_path,split\n";
    bad << "p1,s1,a.ppm,b.pgm,train\np1,s1,a.ppm,b.pgm,val\n";
    bad.close();
    CHECK_THROWS_AS(Manifest::load((dir / "bad.csv").string()), Error);
  }
  fs::remove_all(dir);
}

TEST_CASE("load_patch: resize keeps masks binary; bad values rejected") {
  auto dir = temp_dir();
  SynthPatch p = synthesize_patch(5, 64, {1, 2}, 0.1);
  write_raster((dir / "img.ppm").string(), p.image);
  write_raster((dir / "mask.pgm").string(), p.mask);
  PatchRecord rec;
  rec.patch_id = "p";
  rec.slide_id = "s";
  rec.image_path = (dir / "img.ppm").string();
  rec.mask_path = (dir / "mask.pgm").string();

  LoadedPatch lp = load_patch(rec, 32);
  CHECK(lp.image.shape() == std::vector<int64_t>{3, 32, 32});
  CHECK(lp.mask.h == 32);
  for (uint8_t v : lp.mask.v) CHECK((v == 0 || v == 1));
  for (int64_t i = 0; i < lp.image.numel(); ++i) {
    CHECK(lp.image[i] >= 0.0);
    CHECK(lp.image[i] <= 1.0);
  }

  SUBCASE("round-trip of the mask at native size is lossless") {
    LoadedPatch same = load_patch(rec, 64);
    for (int64_t i = 0; i < 64 * 64; ++i)
      CHECK(static_cast<int>(same.mask.v[static_cast<size_t>(i)]) * 255 ==
            static_cast<int>(p.mask.px[static_cast<size_t>(i)]));
  }
  SUBCASE("mask with a value outside {0,255} raises BadMaskValues") {
    Raster bad = p.mask;
    bad.px[10] = 128;
    write_raster((dir / "bad.pgm").string(), bad);
    PatchRecord rec2 = rec;
    rec2.mask_path = (dir / "bad.pgm").string();
    try {
      load_patch(rec2, 32);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::bad_mask_values);
    }
  }
  SUBCASE("missing file raises FileNotFound") {
    PatchRecord rec3 = rec;
    rec3.image_path = (dir / "nope.ppm").string();
    try {
      load_patch(rec3, 32);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::file_not_found);
    }
  }
  fs::remove_all(dir);
}
