#include "diffsr/tensors.hpp"

#include "diffsr/error.hpp"

namespace diffsr {

void write_satellite(const std::array<Field, kSatelliteChannels>& satellite, const NormSpec& norm, float* dst) {
  const std::size_t plane = satellite[0].size();
  for (int k = 0; k < kSatelliteChannels; ++k) {
    const Field& f = satellite[static_cast<std::size_t>(k)];
    require(f.size() == plane, ErrorKind::ShapeMismatch, "satellite channels differ in shape");
    const auto& aff = norm.channels[static_cast<std::size_t>(k)];
    float* out = dst + static_cast<std::size_t>(k) * plane;
    for (std::size_t i = 0; i < plane; ++i)
      out[i] = f.mask()[i] ? static_cast<float>((f.values()[i] - aff.offset) / aff.scale) : 0.0f;
  }
}

void write_refl(const Field& radar, const NormSpec& norm, float* dst) {
  require(radar.units() == Units::Dbz, ErrorKind::UnitsMismatch, "reflectivity must be in dBZ");
  for (std::size_t i = 0; i < radar.size(); ++i)
    dst[i] = radar.mask()[i] ? static_cast<float>(norm.refl_to_model(radar.values()[i])) : static_cast<float>(norm.model_lo);
}

nn::Tensor<float> satellite_batch(std::span<const std::array<Field, kSatelliteChannels>* const> stacks,
                                  const NormSpec& norm) {
  require(!stacks.empty(), ErrorKind::InvalidArgument, "empty satellite batch");
  const int rows = (*stacks[0])[0].rows();
  const int cols = (*stacks[0])[0].cols();
  nn::Tensor<float> t({static_cast<int>(stacks.size()), kSatelliteChannels, rows, cols});
  const std::size_t block = static_cast<std::size_t>(kSatelliteChannels) * rows * cols;
  for (std::size_t b = 0; b < stacks.size(); ++b) {
    require((*stacks[b])[0].rows() == rows && (*stacks[b])[0].cols() == cols, ErrorKind::ShapeMismatch,
            "satellite batch members differ in shape");
    write_satellite(*stacks[b], norm, t.data() + b * block);
  }
  return t;
}

Field plane_to_field(const nn::Tensor<float>& t, int batch_index, int channel, std::span<const std::uint8_t> mask) {
  require(t.ndim() == 4, ErrorKind::ShapeMismatch, "expected a 4-D tensor");
  const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
  require(batch_index >= 0 && batch_index < t.dim(0) && channel >= 0 && channel < C, ErrorKind::OutOfRange,
          "plane index out of range");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const float* src = t.data() + (static_cast<std::size_t>(batch_index) * C + channel) * plane;
  return Field(H, W, Units::Normalized, std::vector<float>(src, src + plane),
               std::vector<std::uint8_t>(mask.begin(), mask.end()));
}

nn::Tensor<float> crop_tensor(const nn::Tensor<float>& t, int row0, int col0, int rows, int cols) {
  require(t.ndim() == 4 && t.dim(0) == 1, ErrorKind::ShapeMismatch, "crop_tensor expects a (1, C, H, W) tensor");
  const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
  require(row0 >= 0 && col0 >= 0 && row0 + rows <= H && col0 + cols <= W, ErrorKind::OutOfRange,
          "crop window outside tensor");
  nn::Tensor<float> out({1, C, rows, cols});
  for (int c = 0; c < C; ++c)
    for (int r = 0; r < rows; ++r)
      for (int q = 0; q < cols; ++q)
        out[(static_cast<std::size_t>(c) * rows + r) * cols + q] =
            t[(static_cast<std::size_t>(c) * H + row0 + r) * W + col0 + q];
  return out;
}

}  // namespace diffsr
