#include "image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "core/error.hpp"

namespace nseg {

Raster Raster::make(int w, int h, int c, uint8_t fill) {
  Raster r;
  r.width = w;
  r.height = h;
  r.channels = c;
  r.px.assign(static_cast<size_t>(w) * h * c, fill);
  return r;
}

namespace {

int read_pnm_token(std::istream& in) {
  // Skips whitespace and '#' comments per the PNM header grammar.
  while (true) {
    int ch = in.peek();
    if (ch == std::char_traits<char>::eof()) break;
    if (ch == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      in.get();
    } else {
      break;
    }
  }
  int value = 0;
  in >> value;
  return value;
}

}  // namespace

Raster read_raster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), Errc::file_not_found, "raster file not found: " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  int channels;
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    fail(Errc::parse, "unsupported raster format (want P5/P6): " + path);
  const int w = read_pnm_token(in);
  const int h = read_pnm_token(in);
  const int maxval = read_pnm_token(in);
  check(in.good() && w > 0 && h > 0, Errc::parse, "bad raster header: " + path);
  check(maxval == 255, Errc::parse, "only maxval 255 rasters supported: " + path);
  in.get();  // single whitespace after maxval
  Raster img = Raster::make(w, h, channels);
  in.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  check(in.gcount() == static_cast<std::streamsize>(img.px.size()), Errc::parse,
        "truncated raster data: " + path);
  return img;
}

void write_raster(const std::string& path, const Raster& img) {
  check(img.channels == 1 || img.channels == 3, Errc::shape, "raster must have 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  check(out.good(), Errc::io, "cannot open raster for writing: " + path);
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.px.data()),
            static_cast<std::streamsize>(img.px.size()));
  check(out.good(), Errc::io, "failed writing raster: " + path);
}

Tensor raster_to_tensor(const Raster& img) {
  Tensor t({img.channels, img.height, img.width});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t[(static_cast<int64_t>(c) * img.height + y) * img.width + x] =
            static_cast<double>(img.at(y, x, c)) / 255.0;
  return t;
}

Raster tensor_to_raster(const Tensor& chw) {
  check(chw.rank() == 3, Errc::shape, "tensor_to_raster: expects [C,H,W]");
  const int c = static_cast<int>(chw.dim(0));
  const int h = static_cast<int>(chw.dim(1));
  const int w = static_cast<int>(chw.dim(2));
  Raster img = Raster::make(w, h, c);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = chw[(static_cast<int64_t>(ci) * h + y) * w + x];
        v = std::min(std::max(v, 0.0), 1.0);
        img.at(y, x, ci) = static_cast<uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

Tensor resize_bilinear_chw(const Tensor& chw, int out_h, int out_w) {
  check(chw.rank() == 3, Errc::shape, "resize_bilinear_chw: expects [C,H,W]");
  const int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (h == out_h && w == out_w) return chw;
  Tensor out({c, out_h, out_w});
  for (int64_t ci = 0; ci < c; ++ci) {
    const double* src = chw.data() + ci * h * w;
    double* dst = out.data() + ci * static_cast<int64_t>(out_h) * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      double sy = (oy + 0.5) * static_cast<double>(h) / out_h - 0.5;
      sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
      const int64_t y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t y1 = std::min(y0 + 1, h - 1);
      const double fy = sy - static_cast<double>(y0);
      for (int ox = 0; ox < out_w; ++ox) {
        double sx = (ox + 0.5) * static_cast<double>(w) / out_w - 0.5;
        sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
        const int64_t x0 = static_cast<int64_t>(std::floor(sx));
        const int64_t x1 = std::min(x0 + 1, w - 1);
        const double fx = sx - static_cast<double>(x0);
        dst[static_cast<int64_t>(oy) * out_w + ox] =
            (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
            fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
      }
    }
  }
  return out;
}

Raster resize_nearest(const Raster& img, int out_h, int out_w) {
  if (img.height == out_h && img.width == out_w) return img;
  Raster out = Raster::make(out_w, out_h, img.channels);
  for (int oy = 0; oy < out_h; ++oy) {
    int sy = static_cast<int>((oy + 0.5) * static_cast<double>(img.height) / out_h);
    sy = std::min(std::max(sy, 0), img.height - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      int sx = static_cast<int>((ox + 0.5) * static_cast<double>(img.width) / out_w);
      sx = std::min(std::max(sx, 0), img.width - 1);
      for (int c = 0; c < img.channels; ++c) out.at(oy, ox, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace nseg
