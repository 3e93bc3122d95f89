#include "diffsr/nn/bundle.hpp"

#include <bit>
#include <cstdio>

#include "../binary_io.hpp"

namespace diffsr::nn {

namespace {

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

std::string ModelBundle::id() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  h = fnv1a(h, kind.data(), kind.size());
  const std::string arch = architecture.dump();
  h = fnv1a(h, arch.data(), arch.size());
  for (float w : weights) {
    const auto bits = std::bit_cast<std::uint32_t>(w);
    h = fnv1a(h, &bits, sizeof(bits));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::ordered_json norm_to_json(const NormSpec& norm) {
  nlohmann::ordered_json channels = nlohmann::ordered_json::array();
  for (const auto& c : norm.channels) channels.push_back({{"offset", c.offset}, {"scale", c.scale}});
  return {{"dbz_min", norm.dbz_min},
          {"dbz_max", norm.dbz_max},
          {"model_lo", norm.model_lo},
          {"model_hi", norm.model_hi},
          {"channels", channels}};
}

NormSpec norm_from_json(const nlohmann::json& j) {
  NormSpec n;
  n.dbz_min = j.at("dbz_min").get<double>();
  n.dbz_max = j.at("dbz_max").get<double>();
  n.model_lo = j.at("model_lo").get<double>();
  n.model_hi = j.at("model_hi").get<double>();
  const auto& ch = j.at("channels");
  require(ch.size() == n.channels.size(), ErrorKind::MalformedHeader, "norm spec must list 4 channels");
  for (std::size_t k = 0; k < n.channels.size(); ++k) {
    n.channels[k].offset = ch[k].at("offset").get<double>();
    n.channels[k].scale = ch[k].at("scale").get<double>();
  }
  n.validate();
  return n;
}

std::vector<std::uint8_t> encode_bundle(const ModelBundle& bundle) {
  nlohmann::ordered_json header = {{"version", bundle.version},
                                   {"kind", bundle.kind},
                                   {"architecture", bundle.architecture},
                                   {"norm", norm_to_json(bundle.norm)},
                                   {"meta", {{"steps", bundle.meta.steps}, {"seed", bundle.meta.seed}}},
                                   {"dtype", "f32"},
                                   {"endianness", "LE"},
                                   {"weight_count", bundle.weights.size()}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(text.begin(), text.end());
  out.push_back('\n');
  detail::append_f32_le(out, bundle.weights);
  return out;
}

ModelBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  const std::string text = detail::split_header(bytes, offset);
  ModelBundle b;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(text);
    b.version = header.at("version").get<std::string>();
    require(b.version == kBundleVersion, ErrorKind::MalformedHeader, "unsupported bundle version '" + b.version + "'");
    require(header.at("dtype").get<std::string>() == "f32", ErrorKind::DtypeMismatch, "bundle weights must be f32");
    require(header.at("endianness").get<std::string>() == "LE", ErrorKind::MalformedHeader, "bundle must be LE");
    b.kind = header.at("kind").get<std::string>();
    b.architecture = header.at("architecture");
    b.norm = norm_from_json(header.at("norm"));
    b.meta.steps = header.at("meta").at("steps").get<long>();
    b.meta.seed = header.at("meta").at("seed").get<std::uint64_t>();
    count = header.at("weight_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::MalformedHeader, std::string("bad bundle header: ") + e.what());
  }
  require(bytes.size() - offset == count * 4, ErrorKind::TruncatedPayload,
          "bundle payload has " + std::to_string(bytes.size() - offset) + " bytes, expected " +
              std::to_string(count * 4));
  b.weights = detail::read_f32_le(bytes.subspan(offset), count);
  return b;
}

void save_bundle(const ModelBundle& bundle, const std::string& path) {
  detail::write_file_bytes(path, encode_bundle(bundle));
}

ModelBundle load_bundle(const std::string& path) { return decode_bundle(detail::read_file_bytes(path)); }

}  // namespace diffsr::nn
