#include "diffsr/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>

#include "binary_io.hpp"
#include "diffsr/error.hpp"

namespace diffsr {

std::array<std::uint8_t, 3> reflectivity_color(double dbz) {
  const auto& s = kReflectivityStops;
  if (!(dbz > s.front().dbz)) return s.front().rgb;
  if (dbz >= s.back().dbz) return s.back().rgb;
  std::size_t i = 1;
  while (s[i].dbz < dbz) ++i;
  const double f = (dbz - s[i - 1].dbz) / (s[i].dbz - s[i - 1].dbz);
  std::array<std::uint8_t, 3> out{};
  for (int k = 0; k < 3; ++k) {
    const double a = s[i - 1].rgb[static_cast<std::size_t>(k)], b = s[i].rgb[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(std::lround(a + f * (b - a)));
  }
  return out;
}

Image::Image(int w, int h, std::array<std::uint8_t, 3> fill) : width(w), height(h) {
  require(w >= 1 && h >= 1, ErrorKind::InvalidArgument, "image dimensions must be positive");
  rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<long>(i));
}

void Image::set(int x, int y, std::array<std::uint8_t, 3> c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  std::copy(c.begin(), c.end(), rgb.begin() + (static_cast<long>(y) * width + x) * 3);
}

void Image::fill_rect(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
}

void Image::line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

Image render_reflectivity(const Field& f) {
  require(f.units() == Units::Dbz, ErrorKind::UnitsMismatch, "render_reflectivity needs a dBZ field");
  Image img(f.cols(), f.rows());
  for (int r = 0; r < f.rows(); ++r)
    for (int c = 0; c < f.cols(); ++c) img.set(c, r, f.valid(r, c) ? reflectivity_color(f.at(r, c)) : kMaskedColor);
  return img;
}

namespace {

void on_png_error(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  *buf = msg;
  std::longjmp(png_jmpbuf(png), 1);
}

void on_png_warning(png_structp, png_const_charp) {}

void append_bytes(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

struct ReadCursor {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos;
};

void read_bytes(png_structp png, png_bytep data, png_size_t n) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + n > cur->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(data, cur->bytes->data() + cur->pos, n);
  cur->pos += n;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& img) {
  std::string err;
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  require(png != nullptr, ErrorKind::Io, "libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::Io, "PNG encoding failed: " + err);
  }
  png_set_write_fn(png, &out, append_bytes, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3);
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const Image& img, const std::string& path) { detail::write_file_bytes(path, encode_png(img)); }

Image decode_png(const std::vector<std::uint8_t>& bytes) {
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  require(png != nullptr, ErrorKind::Io, "libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  ReadCursor cur{&bytes, 0};
  Image img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::Io, "PNG decoding failed: " + err);
  }
  png_set_read_fn(png, &cur, read_bytes);
  png_read_png(png, info, PNG_TRANSFORM_STRIP_16 | PNG_TRANSFORM_PACKING | PNG_TRANSFORM_STRIP_ALPHA, nullptr);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const bool gray = png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY;
  png_bytepp rows = png_get_rows(png, info);
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < 3; ++k)
        img.rgb[(static_cast<std::size_t>(y) * w + x) * 3 + k] = gray ? rows[y][x] : rows[y][x * 3 + k];
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace {

constexpr std::array<std::uint8_t, 3> kAxis = {0, 0, 0};
constexpr int kMargin = 16;

}  // namespace

Image plot_series(const std::vector<double>& values, int width, int height) {
  Image img(width, height);
  const int x0 = kMargin, x1 = width - kMargin, y0 = height - kMargin, y1 = kMargin;
  img.line(x0, y0, x1, y0, kAxis);
  img.line(x0, y0, x0, y1, kAxis);
  if (values.empty()) return img;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  const auto px = [&](std::size_t i) {
    return x0 + static_cast<int>(std::lround(values.size() > 1 ? double(i) * (x1 - x0) / double(values.size() - 1) : 0.0));
  };
  const auto py = [&](double v) {
    return y0 - static_cast<int>(std::lround(span > 0 ? (v - lo) / span * (y0 - y1) : 0.0));
  };
  for (std::size_t i = 1; i < values.size(); ++i)
    img.line(px(i - 1), py(values[i - 1]), px(i), py(values[i]), {31, 119, 180});
  return img;
}

Image plot_bars(const std::vector<std::vector<double>>& groups, int width, int height) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 4> kPalette = {
      {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}}};
  Image img(width, height);
  const int x0 = kMargin, x1 = width - kMargin, y0 = height - kMargin, y1 = kMargin;
  img.line(x0, y0, x1, y0, kAxis);
  img.line(x0, y0, x0, y1, kAxis);
  if (groups.empty()) return img;
  const int group_w = (x1 - x0) / static_cast<int>(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& bars = groups[g];
    if (bars.empty()) continue;
    const int bar_w = std::max(1, (group_w - 8) / static_cast<int>(bars.size()));
    for (std::size_t b = 0; b < bars.size(); ++b) {
      const double v = std::clamp(std::isfinite(bars[b]) ? bars[b] : 0.0, 0.0, 1.0);
      const int left = x0 + 4 + static_cast<int>(g) * group_w + static_cast<int>(b) * bar_w;
      const int top = y0 - static_cast<int>(std::lround(v * (y0 - y1)));
      if (top < y0) img.fill_rect(left, top, left + bar_w - 2, y0 - 1, kPalette[b % kPalette.size()]);
    }
  }
  return img;
}

}  // namespace diffsr
