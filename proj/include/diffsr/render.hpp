#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffsr/field.hpp"

// Static PNG output: reflectivity maps and simple plots.
namespace diffsr {

struct ColorStop {
  double dbz;
  std::array<std::uint8_t, 3> rgb;
};

/// Reflectivity colormap, linearly interpolated between stops and rounded to nearest.
inline constexpr std::array<ColorStop, 13> kReflectivityStops = {{
    {0.0, {255, 255, 255}},
    {5.0, {4, 233, 231}},
    {10.0, {1, 159, 244}},
    {15.0, {3, 0, 244}},
    {20.0, {2, 253, 2}},
    {25.0, {1, 197, 1}},
    {30.0, {0, 142, 0}},
    {35.0, {253, 248, 2}},
    {40.0, {229, 188, 0}},
    {45.0, {253, 149, 0}},
    {50.0, {253, 0, 0}},
    {55.0, {212, 0, 0}},
    {60.0, {188, 0, 0}},
}};

inline constexpr std::array<std::uint8_t, 3> kMaskedColor = {128, 128, 128};

std::array<std::uint8_t, 3> reflectivity_color(double dbz);

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h, std::array<std::uint8_t, 3> fill = {255, 255, 255});
  void set(int x, int y, std::array<std::uint8_t, 3> c);
  void fill_rect(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c);
  void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c);
};

/// One pixel per grid cell; dBZ field required.
Image render_reflectivity(const Field& f);

std::vector<std::uint8_t> encode_png(const Image& img);
void write_png(const Image& img, const std::string& path);
Image decode_png(const std::vector<std::uint8_t>& bytes);

/// Loss against step, min-max scaled, on a plain axis frame.
Image plot_series(const std::vector<double>& values, int width = 480, int height = 240);

/// Grouped bars: one group per entry of `groups`, one bar per value, heights in [0, 1].
Image plot_bars(const std::vector<std::vector<double>>& groups, int width = 480, int height = 240);

}  // namespace diffsr
