#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffsr/field.hpp"

// Forecast-verification scores, RMSE and SSIM.
namespace diffsr {

/// Cells of a pooled binary grid. A cell is evaluated when it covers at least one valid pixel.
struct BinaryGrid {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> value;
  std::vector<std::uint8_t> valid;
};

/// Exceedance (value > threshold on valid pixels), then max-pooling with kernel = stride = pool.
/// Ragged edges are truncated; pool = 1 is the plain exceedance grid.
BinaryGrid pooled_binarize(const Field& f, double threshold, int pool);

struct Contingency {
  long hits = 0;
  long misses = 0;
  long false_alarms = 0;
  long correct_negatives = 0;

  long total() const { return hits + misses + false_alarms + correct_negatives; }
  friend bool operator==(const Contingency&, const Contingency&) = default;
};

Contingency contingency(const Field& pred, const Field& truth, double threshold, int pool);
Contingency contingency(const BinaryGrid& pred, const BinaryGrid& truth);

/// Scores; a 0/0 ratio is reported as 0 with its `*_defined` flag cleared.
struct Scores {
  double pod = 0.0;
  double far = 0.0;
  double csi = 0.0;
  bool pod_defined = true;
  bool far_defined = true;
  bool csi_defined = true;

  bool degenerate() const { return !(pod_defined && far_defined && csi_defined); }
};

Scores scores(const Contingency& c);

/// Root mean squared difference over valid pixels. Masks must agree.
double rmse(const Field& pred, const Field& truth);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 60.0;
};

/// Mean local SSIM over window positions that fit entirely inside the field.
double ssim(const Field& pred, const Field& truth, const SsimOptions& opts = {});

struct MetricConfig {
  std::vector<double> thresholds = {15.0, 35.0, 50.0};
  std::vector<int> pools = {1, 4, 8};
  SsimOptions ssim;

  void validate() const;
};

struct CellScore {
  double threshold = 0.0;
  int pool = 1;
  Contingency counts;
  Scores scores;
};

struct MetricReport {
  double rmse = 0.0;
  double ssim = 0.0;
  std::vector<CellScore> cells;  // threshold-major, then pool

  const CellScore& cell(double threshold, int pool) const;
};

MetricReport evaluate(const Field& pred, const Field& truth, const MetricConfig& cfg = {});

/// CSV columns after the identifiers. The compact schema has rmse, ssim and CSI per cell;
/// the full schema has rmse, ssim, then POD, FAR and CSI per cell.
std::vector<std::string> metric_columns(const MetricConfig& cfg, bool full);
std::vector<double> metric_values(const MetricReport& report, bool full);

struct MetricRow {
  std::string scene_id;
  std::string model_id;
  std::vector<double> values;
};

/// Arithmetic mean of each column, labelled scene_id = "mean".
MetricRow aggregate_row(const std::vector<MetricRow>& rows, const std::string& model_id);

/// Header "scene_id,model_id,<columns>", one line per row, values printed with %.9g.
std::string metrics_csv(const std::vector<std::string>& columns, const std::vector<MetricRow>& rows);

}  // namespace diffsr
