#pragma once

#include <array>
#include <span>

#include "diffsr/field.hpp"
#include "diffsr/nn/tensor.hpp"

// Conversions between physical fields and model-space network tensors.
namespace diffsr {

/// Writes the 4 normalized satellite channels as a (4, H, W) block at `dst`.
void write_satellite(const std::array<Field, kSatelliteChannels>& satellite, const NormSpec& norm, float* dst);

/// Writes reflectivity in model space as an (H, W) block at `dst`.
void write_refl(const Field& radar, const NormSpec& norm, float* dst);

/// (B, 4, H, W) tensor from a list of satellite stacks of equal shape.
nn::Tensor<float> satellite_batch(std::span<const std::array<Field, kSatelliteChannels>* const> stacks,
                                  const NormSpec& norm);

/// Normalized field built from one (H, W) plane of a model-space tensor.
Field plane_to_field(const nn::Tensor<float>& t, int batch_index, int channel, std::span<const std::uint8_t> mask = {});

/// (1, C, h, w) crop of a (1, C, H, W) tensor.
nn::Tensor<float> crop_tensor(const nn::Tensor<float>& t, int row0, int col0, int rows, int cols);

}  // namespace diffsr
