#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "diffsr/field.hpp"

namespace diffsr {

/// Square co-located crop of a scene.
struct Patch {
  std::string scene_id;
  int row0 = 0;
  int col0 = 0;
  int size = 0;
  std::array<Field, kSatelliteChannels> satellite;
  Field radar;
};

struct FilterPolicy {
  int gamma = 1000;
  double value_threshold = 6.0;

  void validate() const;
};

/// Row-major offsets {0, stride, 2*stride, ...} of every window that fits entirely.
std::vector<std::pair<int, int>> patch_offsets(int rows, int cols, int size, int stride);

std::vector<Patch> patchify(const Scene& scene, int size, int stride);

/// Number of mask-valid radar pixels strictly above the policy threshold.
int exceedance_count(const Patch& patch, double value_threshold);

/// Keeps a patch iff its exceedance count is at least gamma. Order preserving.
std::vector<Patch> filter_patches(std::span<const Patch> patches, const FilterPolicy& policy);

struct Tile {
  int row0 = 0;
  int col0 = 0;
  Field field;
};

/// Reassembles tiles onto a rows x cols grid, averaging overlaps with uniform weights.
/// A pixel is valid if at least one covering tile marks it valid.
Field depatchify(std::span<const Tile> tiles, int rows, int cols);

/// Reassembles the radar crops of `patches`.
Field depatchify(std::span<const Patch> patches, int rows, int cols);

}  // namespace diffsr
