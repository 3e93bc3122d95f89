#include "diffsr/dataset.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "diffsr/error.hpp"

namespace fs = std::filesystem;

namespace diffsr {

const ManifestEntry* Manifest::find(const std::string& id) const {
  for (const auto& e : entries)
    if (e.id == id) return &e;
  return nullptr;
}

void write_manifest(const Manifest& manifest, const std::string& path) {
  nlohmann::ordered_json j;
  j["format"] = "diffsr-manifest";
  j["version"] = 1;
  j["scenes"] = nlohmann::ordered_json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json row;
    row["id"] = e.id;
    if (!e.radar.empty()) row["radar"] = e.radar;
    if (!e.satellite.empty()) row["satellite"] = e.satellite;
    j["scenes"].push_back(std::move(row));
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write manifest '" + path + "'");
    out << j.dump(2) << '\n';
    require(static_cast<bool>(out), ErrorKind::Io, "failed writing manifest '" + path + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorKind::Io, "cannot move manifest into place at '" + path + "'");
  }
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::MalformedHeader, "manifest '" + path + "' is not valid JSON: " + e.what());
  }
  require(j.is_object() && j.value("format", "") == "diffsr-manifest" && j.contains("scenes"),
          ErrorKind::MalformedHeader, "'" + path + "' is not a diffsr manifest");
  Manifest m;
  for (const auto& row : j.at("scenes")) {
    ManifestEntry e;
    e.id = row.at("id").get<std::string>();
    e.radar = row.value("radar", "");
    if (row.contains("satellite")) e.satellite = row.at("satellite").get<std::vector<std::string>>();
    require(e.satellite.empty() || e.satellite.size() == kSatelliteChannels, ErrorKind::MalformedHeader,
            "scene '" + e.id + "' must list " + std::to_string(kSatelliteChannels) + " satellite channels");
    m.entries.push_back(std::move(e));
  }
  return m;
}

namespace {

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::Io, "cannot create directory '" + dir.string() + "'");
}

std::string resolve(const fs::path& base, const std::string& rel) { return (base / rel).string(); }

const char* const kChannelFiles[kSatelliteChannels] = {"abi_c07.rgf", "abi_c09.rgf", "abi_c13.rgf", "glm.rgf"};

}  // namespace

std::string write_scenes(std::span<const Scene> scenes, const std::string& dir) {
  const fs::path root(dir);
  make_dir(root);
  Manifest m;
  for (const Scene& s : scenes) {
    s.validate();
    const fs::path rel = fs::path("scenes") / s.id;
    make_dir(root / rel);
    ManifestEntry e;
    e.id = s.id;
    e.radar = (rel / "radar.rgf").generic_string();
    write_field(s.radar, resolve(root, e.radar));
    for (int k = 0; k < kSatelliteChannels; ++k) {
      e.satellite.push_back((rel / kChannelFiles[k]).generic_string());
      write_field(s.satellite[static_cast<std::size_t>(k)], resolve(root, e.satellite.back()));
    }
    m.entries.push_back(std::move(e));
  }
  const std::string path = (root / "manifest.json").string();
  write_manifest(m, path);
  return path;
}

std::vector<Scene> load_scenes(const std::string& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<Scene> out;
  for (const auto& e : m.entries) {
    require(!e.radar.empty() && !e.satellite.empty(), ErrorKind::MissingInput,
            "scene '" + e.id + "' lacks radar or satellite files");
    Scene s;
    s.id = e.id;
    s.radar = read_field(resolve(base, e.radar));
    for (int k = 0; k < kSatelliteChannels; ++k)
      s.satellite[static_cast<std::size_t>(k)] = read_field(resolve(base, e.satellite[static_cast<std::size_t>(k)]));
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

std::string write_radar_fields(std::span<const NamedField> fields, const std::string& dir) {
  const fs::path root(dir);
  make_dir(root / "fields");
  Manifest m;
  for (const auto& f : fields) {
    ManifestEntry e;
    e.id = f.id;
    e.radar = (fs::path("fields") / (f.id + ".rgf")).generic_string();
    write_field(f.field, resolve(root, e.radar));
    m.entries.push_back(std::move(e));
  }
  const std::string path = (root / "manifest.json").string();
  write_manifest(m, path);
  return path;
}

std::vector<NamedField> load_radar_fields(const std::string& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<NamedField> out;
  for (const auto& e : m.entries) {
    require(!e.radar.empty(), ErrorKind::MissingInput, "scene '" + e.id + "' has no radar field");
    out.push_back(NamedField{e.id, read_field(resolve(base, e.radar))});
  }
  return out;
}

}  // namespace diffsr
