#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace diffsr {

enum class Units { Dbz, BrightnessK, FlashDensity, Normalized };

std::string_view to_string(Units units);
Units units_from_string(std::string_view name);

inline constexpr float kDbzMin = 0.0f;
inline constexpr float kDbzMax = 60.0f;

/// Single-variable 2-D gridded scalar field, row-major, with a validity mask.
///
/// Immutable after construction. dBZ fields are clipped to [0, 60] on creation;
/// every mask-valid value must be finite.
class Field {
 public:
  Field() = default;
  /// An empty `mask` means all pixels are valid.
  Field(int rows, int cols, Units units, std::vector<float> values, std::vector<std::uint8_t> mask = {});

  static Field filled(int rows, int cols, Units units, float value);

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  Units units() const noexcept { return units_; }

  float at(int r, int c) const { return values_[static_cast<std::size_t>(r) * cols_ + c]; }
  bool valid(int r, int c) const { return mask_[static_cast<std::size_t>(r) * cols_ + c] != 0; }

  std::span<const float> values() const noexcept { return values_; }
  std::span<const std::uint8_t> mask() const noexcept { return mask_; }

  /// True when at least one pixel is masked out.
  bool has_invalid() const noexcept;
  std::size_t valid_count() const noexcept;

  bool same_shape(const Field& other) const noexcept { return rows_ == other.rows_ && cols_ == other.cols_; }

  Field crop(int row0, int col0, int rows, int cols) const;
  Field with_units(Units units, std::vector<float> values) const;

  friend bool operator==(const Field& a, const Field& b);

 private:
  int rows_ = 0;
  int cols_ = 0;
  Units units_ = Units::Normalized;
  std::vector<float> values_;
  std::vector<std::uint8_t> mask_;
};

inline constexpr int kSatelliteChannels = 4;
inline constexpr std::array<std::string_view, kSatelliteChannels> kChannelNames = {"ABI-C07", "ABI-C09", "ABI-C13",
                                                                                    "GLM"};

/// Aligned satellite stack plus radar truth for one timestamp.
struct Scene {
  std::string id;
  std::array<Field, kSatelliteChannels> satellite;
  Field radar;

  int rows() const { return radar.rows(); }
  int cols() const { return radar.cols(); }

  /// Throws unless shapes/masks agree and units are as expected.
  void validate() const;
};

struct ChannelAffine {
  double offset = 0.0;
  double scale = 1.0;
};

/// Physical <-> model-space normalization.
struct NormSpec {
  double dbz_min = 0.0;
  double dbz_max = 60.0;
  double model_lo = -1.0;
  double model_hi = 1.0;
  // normalized = (value - offset) / scale
  std::array<ChannelAffine, kSatelliteChannels> channels = {
      ChannelAffine{250.0, 70.0}, ChannelAffine{250.0, 70.0}, ChannelAffine{250.0, 70.0}, ChannelAffine{2.5, 2.5}};

  void validate() const;

  double refl_to_model(double dbz) const;
  double model_to_refl(double v) const;
};

/// Per-channel affine maps sending the observed [min, max] of each channel onto [-1, 1].
NormSpec fit_channel_norm(std::span<const Scene> scenes, NormSpec base = {});

Field normalize_refl(const Field& f, const NormSpec& spec);
Field denormalize_refl(const Field& f, const NormSpec& spec);
Field normalize_channel(const Field& f, int channel, const NormSpec& spec);

/// RGF: one JSON header line, raw little-endian f32 payload, optional packed mask bits.
void write_field(const Field& f, const std::string& path);
Field read_field(const std::string& path);

std::vector<std::uint8_t> encode_field(const Field& f);
Field decode_field(std::span<const std::uint8_t> bytes);

}  // namespace diffsr
