#include "diffsr/field.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "diffsr/error.hpp"

namespace diffsr {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::UnitsMismatch: return "units-mismatch";
    case ErrorKind::OutOfRange: return "out-of-range";
    case ErrorKind::NonFinite: return "non-finite";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::EmptyMask: return "empty-mask";
    case ErrorKind::UncoveredPixel: return "uncovered-pixel";
    case ErrorKind::MissingInput: return "missing-input";
    case ErrorKind::MalformedHeader: return "malformed-header";
    case ErrorKind::TruncatedPayload: return "truncated-payload";
    case ErrorKind::DtypeMismatch: return "dtype-mismatch";
    case ErrorKind::Io: return "io";
    case ErrorKind::Config: return "config";
  }
  return "unknown";
}

std::string_view to_string(Units units) {
  switch (units) {
    case Units::Dbz: return "dBZ";
    case Units::BrightnessK: return "K";
    case Units::FlashDensity: return "flash-density";
    case Units::Normalized: return "normalized";
  }
  return "normalized";
}

Units units_from_string(std::string_view name) {
  if (name == "dBZ") return Units::Dbz;
  if (name == "K") return Units::BrightnessK;
  if (name == "flash-density") return Units::FlashDensity;
  if (name == "normalized") return Units::Normalized;
  fail(ErrorKind::MalformedHeader, "unknown units '" + std::string(name) + "'");
}

Field::Field(int rows, int cols, Units units, std::vector<float> values, std::vector<std::uint8_t> mask)
    : rows_(rows), cols_(cols), units_(units), values_(std::move(values)), mask_(std::move(mask)) {
  require(rows >= 1 && cols >= 1, ErrorKind::InvalidArgument, "field dimensions must be positive");
  const auto n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  require(values_.size() == n, ErrorKind::ShapeMismatch,
          "value count " + std::to_string(values_.size()) + " != rows*cols " + std::to_string(n));
  if (mask_.empty()) mask_.assign(n, 1);
  require(mask_.size() == n, ErrorKind::ShapeMismatch, "mask size does not match field");
  for (std::size_t i = 0; i < n; ++i) {
    mask_[i] = mask_[i] ? 1 : 0;
    if (!mask_[i]) continue;
    require(std::isfinite(values_[i]), ErrorKind::NonFinite, "non-finite value at valid pixel " + std::to_string(i));
    if (units_ == Units::Dbz) values_[i] = std::clamp(values_[i], kDbzMin, kDbzMax);
  }
}

Field Field::filled(int rows, int cols, Units units, float value) {
  return Field(rows, cols, units, std::vector<float>(static_cast<std::size_t>(rows) * cols, value));
}

bool Field::has_invalid() const noexcept {
  return std::any_of(mask_.begin(), mask_.end(), [](std::uint8_t m) { return m == 0; });
}

std::size_t Field::valid_count() const noexcept {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{1}));
}

Field Field::crop(int row0, int col0, int rows, int cols) const {
  require(row0 >= 0 && col0 >= 0 && rows >= 1 && cols >= 1 && row0 + rows <= rows_ && col0 + cols <= cols_,
          ErrorKind::OutOfRange, "crop window outside field bounds");
  std::vector<float> v(static_cast<std::size_t>(rows) * cols);
  std::vector<std::uint8_t> m(v.size());
  for (int r = 0; r < rows; ++r) {
    const std::size_t src = static_cast<std::size_t>(row0 + r) * cols_ + col0;
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(src), cols, v.begin() + static_cast<std::ptrdiff_t>(r) * cols);
    std::copy_n(mask_.begin() + static_cast<std::ptrdiff_t>(src), cols, m.begin() + static_cast<std::ptrdiff_t>(r) * cols);
  }
  return Field(rows, cols, units_, std::move(v), std::move(m));
}

Field Field::with_units(Units units, std::vector<float> values) const {
  return Field(rows_, cols_, units, std::move(values), mask_);
}

bool operator==(const Field& a, const Field& b) {
  if (a.rows_ != b.rows_ || a.cols_ != b.cols_ || a.units_ != b.units_ || a.mask_ != b.mask_) return false;
  // bitwise, so that NaN payloads under masked pixels compare too
  return std::equal(a.values_.begin(), a.values_.end(), b.values_.begin(),
                    [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
}

void Scene::validate() const {
  for (int k = 0; k < kSatelliteChannels; ++k) {
    const Field& ch = satellite[static_cast<std::size_t>(k)];
    require(ch.same_shape(radar), ErrorKind::ShapeMismatch,
            "channel " + std::string(kChannelNames[static_cast<std::size_t>(k)]) + " shape differs from radar");
    require(std::equal(ch.mask().begin(), ch.mask().end(), radar.mask().begin()), ErrorKind::ShapeMismatch,
            "channel " + std::string(kChannelNames[static_cast<std::size_t>(k)]) + " mask differs from radar");
    const Units expected = k < 3 ? Units::BrightnessK : Units::FlashDensity;
    require(ch.units() == expected, ErrorKind::UnitsMismatch,
            "channel " + std::string(kChannelNames[static_cast<std::size_t>(k)]) + " has wrong units");
  }
  require(radar.units() == Units::Dbz, ErrorKind::UnitsMismatch, "radar field must be dBZ");
}

void NormSpec::validate() const {
  require(dbz_max > dbz_min, ErrorKind::InvalidArgument, "dbz_max must exceed dbz_min");
  require(model_hi > model_lo, ErrorKind::InvalidArgument, "model_hi must exceed model_lo");
  for (const auto& c : channels)
    require(c.scale != 0.0 && std::isfinite(c.scale) && std::isfinite(c.offset), ErrorKind::InvalidArgument,
            "channel scale must be finite and nonzero");
}

double NormSpec::refl_to_model(double dbz) const {
  const double c = std::clamp(dbz, dbz_min, dbz_max);
  return model_lo + (c - dbz_min) / (dbz_max - dbz_min) * (model_hi - model_lo);
}

double NormSpec::model_to_refl(double v) const {
  const double dbz = dbz_min + (v - model_lo) / (model_hi - model_lo) * (dbz_max - dbz_min);
  return std::clamp(dbz, dbz_min, dbz_max);
}

NormSpec fit_channel_norm(std::span<const Scene> scenes, NormSpec base) {
  require(!scenes.empty(), ErrorKind::InvalidArgument, "cannot fit normalization on an empty scene list");
  for (int k = 0; k < kSatelliteChannels; ++k) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const Scene& s : scenes) {
      const Field& f = s.satellite[static_cast<std::size_t>(k)];
      for (std::size_t i = 0; i < f.size(); ++i) {
        if (!f.mask()[i]) continue;
        lo = std::min(lo, static_cast<double>(f.values()[i]));
        hi = std::max(hi, static_cast<double>(f.values()[i]));
      }
    }
    auto& aff = base.channels[static_cast<std::size_t>(k)];
    aff.offset = std::isfinite(lo) ? 0.5 * (lo + hi) : 0.0;
    const double half = std::isfinite(lo) ? 0.5 * (hi - lo) : 1.0;
    aff.scale = half > 1e-6 ? half : 1.0;
  }
  base.validate();
  return base;
}

Field normalize_refl(const Field& f, const NormSpec& spec) {
  require(f.units() == Units::Dbz, ErrorKind::UnitsMismatch, "normalize_refl expects a dBZ field");
  spec.validate();
  std::vector<float> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = static_cast<float>(spec.refl_to_model(f.values()[i]));
  return f.with_units(Units::Normalized, std::move(out));
}

Field denormalize_refl(const Field& f, const NormSpec& spec) {
  require(f.units() == Units::Normalized, ErrorKind::UnitsMismatch, "denormalize_refl expects a normalized field");
  spec.validate();
  std::vector<float> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = static_cast<float>(spec.model_to_refl(f.values()[i]));
  return f.with_units(Units::Dbz, std::move(out));
}

Field normalize_channel(const Field& f, int channel, const NormSpec& spec) {
  require(channel >= 0 && channel < kSatelliteChannels, ErrorKind::OutOfRange, "channel index out of range");
  const Units expected = channel < 3 ? Units::BrightnessK : Units::FlashDensity;
  require(f.units() == expected, ErrorKind::UnitsMismatch, "channel units do not match its index");
  const auto& aff = spec.channels[static_cast<std::size_t>(channel)];
  std::vector<float> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i)
    out[i] = static_cast<float>((f.values()[i] - aff.offset) / aff.scale);
  return f.with_units(Units::Normalized, std::move(out));
}

// ---------------------------------------------------------------------------
// RGF encoding

std::vector<std::uint8_t> encode_field(const Field& f) {
  const bool with_mask = f.has_invalid();
  nlohmann::ordered_json header = {{"format", "RGF"},
                                   {"version", 1},
                                   {"rows", f.rows()},
                                   {"cols", f.cols()},
                                   {"units", to_string(f.units())},
                                   {"dtype", "f32"},
                                   {"endianness", "LE"},
                                   {"mask", with_mask}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(text.begin(), text.end());
  out.push_back('\n');
  detail::append_f32_le(out, f.values());
  if (with_mask) {
    std::vector<std::uint8_t> bits((f.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < f.size(); ++i)
      if (f.mask()[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    out.insert(out.end(), bits.begin(), bits.end());
  }
  return out;
}

Field decode_field(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  const std::string text = detail::split_header(bytes, offset);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::MalformedHeader, std::string("header is not valid JSON: ") + e.what());
  }
  int rows = 0;
  int cols = 0;
  std::string dtype;
  std::string endianness;
  std::string units;
  bool with_mask = false;
  try {
    require(header.at("format").get<std::string>() == "RGF", ErrorKind::MalformedHeader, "format tag is not RGF");
    rows = header.at("rows").get<int>();
    cols = header.at("cols").get<int>();
    dtype = header.at("dtype").get<std::string>();
    endianness = header.at("endianness").get<std::string>();
    units = header.at("units").get<std::string>();
    with_mask = header.at("mask").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::MalformedHeader, std::string("missing or mistyped header key: ") + e.what());
  }
  require(dtype == "f32", ErrorKind::DtypeMismatch, "expected dtype f32, found '" + dtype + "'");
  require(endianness == "LE", ErrorKind::MalformedHeader, "expected endianness LE, found '" + endianness + "'");
  require(rows >= 1 && cols >= 1, ErrorKind::MalformedHeader, "non-positive dimensions in header");

  const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  const std::size_t mask_bytes = with_mask ? (n + 7) / 8 : 0;
  const std::size_t need = offset + n * 4 + mask_bytes;
  require(bytes.size() >= need, ErrorKind::TruncatedPayload,
          "payload has " + std::to_string(bytes.size() - offset) + " bytes, expected " +
              std::to_string(need - offset));
  require(bytes.size() == need, ErrorKind::MalformedHeader, "trailing bytes after payload");

  std::vector<float> values = detail::read_f32_le(bytes.subspan(offset), n);
  std::vector<std::uint8_t> mask;
  if (with_mask) {
    mask.resize(n);
    const auto bits = bytes.subspan(offset + n * 4);
    for (std::size_t i = 0; i < n; ++i) mask[i] = (bits[i / 8] >> (i % 8)) & 1u;
  }
  return Field(rows, cols, units_from_string(units), std::move(values), std::move(mask));
}

void write_field(const Field& f, const std::string& path) { detail::write_file_bytes(path, encode_field(f)); }

Field read_field(const std::string& path) { return decode_field(detail::read_file_bytes(path)); }

}  // namespace diffsr
