#pragma once

#include <span>
#include <string>
#include <vector>

#include "diffsr/field.hpp"

// JSON manifests listing RGF files per scene. Paths inside a manifest are relative to it.
namespace diffsr {

struct ManifestEntry {
  std::string id;
  std::string radar;                   // may be empty
  std::vector<std::string> satellite;  // empty or kSatelliteChannels paths
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  const ManifestEntry* find(const std::string& id) const;
};

/// Written via a temporary file and rename, so a failed write never leaves a partial manifest.
void write_manifest(const Manifest& manifest, const std::string& path);
Manifest read_manifest(const std::string& path);

/// Writes every field of every scene under `dir`, then `dir`/manifest.json. Returns the manifest path.
std::string write_scenes(std::span<const Scene> scenes, const std::string& dir);
std::vector<Scene> load_scenes(const std::string& manifest_path);

struct NamedField {
  std::string id;
  Field field;
};

/// Radar-only manifest (predictions).
std::string write_radar_fields(std::span<const NamedField> fields, const std::string& dir);
std::vector<NamedField> load_radar_fields(const std::string& manifest_path);

}  // namespace diffsr
