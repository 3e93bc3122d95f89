#include "diffsr/patching.hpp"

#include <cmath>

#include "diffsr/error.hpp"

namespace diffsr {

void FilterPolicy::validate() const {
  require(gamma >= 0, ErrorKind::InvalidArgument, "gamma must be non-negative");
  require(std::isfinite(value_threshold), ErrorKind::InvalidArgument, "value threshold must be finite");
}

std::vector<std::pair<int, int>> patch_offsets(int rows, int cols, int size, int stride) {
  require(size >= 1, ErrorKind::InvalidArgument, "patch size must be positive");
  require(stride >= 1, ErrorKind::InvalidArgument, "stride must be positive");
  require(size <= rows && size <= cols, ErrorKind::OutOfRange,
          "patch size " + std::to_string(size) + " exceeds image " + std::to_string(rows) + "x" + std::to_string(cols));
  std::vector<std::pair<int, int>> out;
  for (int r = 0; r + size <= rows; r += stride)
    for (int c = 0; c + size <= cols; c += stride) out.emplace_back(r, c);
  return out;
}

std::vector<Patch> patchify(const Scene& scene, int size, int stride) {
  scene.validate();
  std::vector<Patch> patches;
  for (const auto& [r, c] : patch_offsets(scene.rows(), scene.cols(), size, stride)) {
    Patch p;
    p.scene_id = scene.id;
    p.row0 = r;
    p.col0 = c;
    p.size = size;
    for (std::size_t k = 0; k < p.satellite.size(); ++k) p.satellite[k] = scene.satellite[k].crop(r, c, size, size);
    p.radar = scene.radar.crop(r, c, size, size);
    patches.push_back(std::move(p));
  }
  return patches;
}

int exceedance_count(const Patch& patch, double value_threshold) {
  require(patch.radar.units() == Units::Dbz, ErrorKind::UnitsMismatch, "filtering expects dBZ radar crops");
  int n = 0;
  for (std::size_t i = 0; i < patch.radar.size(); ++i)
    if (patch.radar.mask()[i] && patch.radar.values()[i] > value_threshold) ++n;
  return n;
}

std::vector<Patch> filter_patches(std::span<const Patch> patches, const FilterPolicy& policy) {
  policy.validate();
  std::vector<Patch> kept;
  for (const Patch& p : patches)
    if (exceedance_count(p, policy.value_threshold) >= policy.gamma) kept.push_back(p);
  return kept;
}

Field depatchify(std::span<const Tile> tiles, int rows, int cols) {
  require(!tiles.empty(), ErrorKind::InvalidArgument, "no tiles to reassemble");
  require(rows >= 1 && cols >= 1, ErrorKind::InvalidArgument, "target dimensions must be positive");
  const Units units = tiles.front().field.units();
  const auto n = static_cast<std::size_t>(rows) * cols;
  std::vector<double> sum(n, 0.0);
  std::vector<int> weight(n, 0);
  std::vector<int> covered(n, 0);
  for (const Tile& t : tiles) {
    const Field& f = t.field;
    require(f.units() == units, ErrorKind::UnitsMismatch, "tiles carry different units");
    require(t.row0 >= 0 && t.col0 >= 0 && t.row0 + f.rows() <= rows && t.col0 + f.cols() <= cols,
            ErrorKind::OutOfRange, "tile extends outside the target grid");
    for (int r = 0; r < f.rows(); ++r) {
      for (int c = 0; c < f.cols(); ++c) {
        const std::size_t dst = static_cast<std::size_t>(t.row0 + r) * cols + (t.col0 + c);
        covered[dst] = 1;
        if (!f.valid(r, c)) continue;
        sum[dst] += f.at(r, c);
        weight[dst] += 1;
      }
    }
  }
  std::vector<float> values(n, 0.0f);
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!covered[i])
      fail(ErrorKind::UncoveredPixel, "pixel (" + std::to_string(i / cols) + ", " + std::to_string(i % cols) +
                                          ") is not covered by any tile");
    if (weight[i] > 0) {
      values[i] = static_cast<float>(sum[i] / weight[i]);
      mask[i] = 1;
    }
  }
  return Field(rows, cols, units, std::move(values), std::move(mask));
}

Field depatchify(std::span<const Patch> patches, int rows, int cols) {
  std::vector<Tile> tiles;
  tiles.reserve(patches.size());
  for (const Patch& p : patches) tiles.push_back(Tile{p.row0, p.col0, p.radar});
  return depatchify(tiles, rows, cols);
}

}  // namespace diffsr
