#include "diffsr/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "diffsr/error.hpp"

namespace diffsr {

namespace {

void require_comparable(const Field& pred, const Field& truth) {
  require(pred.same_shape(truth), ErrorKind::ShapeMismatch,
          "fields differ in shape: " + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) + " vs " +
              std::to_string(truth.rows()) + "x" + std::to_string(truth.cols()));
  require(std::equal(pred.mask().begin(), pred.mask().end(), truth.mask().begin()), ErrorKind::ShapeMismatch,
          "fields differ in mask");
}

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

BinaryGrid pooled_binarize(const Field& f, double threshold, int pool) {
  require(pool >= 1, ErrorKind::InvalidArgument, "pool must be at least 1");
  require(pool <= std::min(f.rows(), f.cols()), ErrorKind::InvalidArgument,
          "pool " + std::to_string(pool) + " larger than field " + std::to_string(f.rows()) + "x" +
              std::to_string(f.cols()));
  BinaryGrid g;
  g.rows = f.rows() / pool;
  g.cols = f.cols() / pool;
  g.value.assign(static_cast<std::size_t>(g.rows) * g.cols, 0);
  g.valid.assign(g.value.size(), 0);
  for (int r = 0; r < g.rows * pool; ++r)
    for (int c = 0; c < g.cols * pool; ++c) {
      const std::size_t cell = static_cast<std::size_t>(r / pool) * g.cols + c / pool;
      if (!f.valid(r, c)) continue;
      g.valid[cell] = 1;
      if (f.at(r, c) > threshold) g.value[cell] = 1;
    }
  return g;
}

Contingency contingency(const BinaryGrid& pred, const BinaryGrid& truth) {
  require(pred.rows == truth.rows && pred.cols == truth.cols, ErrorKind::ShapeMismatch, "binary grids differ in shape");
  Contingency c;
  for (std::size_t i = 0; i < pred.value.size(); ++i) {
    if (!pred.valid[i] || !truth.valid[i]) continue;
    const bool p = pred.value[i] != 0, t = truth.value[i] != 0;
    if (p && t) ++c.hits;
    else if (t) ++c.misses;
    else if (p) ++c.false_alarms;
    else ++c.correct_negatives;
  }
  return c;
}

Contingency contingency(const Field& pred, const Field& truth, double threshold, int pool) {
  require_comparable(pred, truth);
  return contingency(pooled_binarize(pred, threshold, pool), pooled_binarize(truth, threshold, pool));
}

Scores scores(const Contingency& c) {
  Scores s;
  const auto ratio = [](long num, long den, bool& defined) {
    defined = den > 0;
    return defined ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
  };
  s.pod = ratio(c.hits, c.hits + c.misses, s.pod_defined);
  s.far = ratio(c.false_alarms, c.hits + c.false_alarms, s.far_defined);
  s.csi = ratio(c.hits, c.hits + c.misses + c.false_alarms, s.csi_defined);
  return s;
}

double rmse(const Field& pred, const Field& truth) {
  require_comparable(pred, truth);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!truth.mask()[i]) continue;
    const double d = static_cast<double>(pred.values()[i]) - truth.values()[i];
    acc += d * d;
    ++n;
  }
  require(n > 0, ErrorKind::EmptyMask, "rmse: no valid pixels");
  return std::sqrt(acc / static_cast<double>(n));
}

double ssim(const Field& pred, const Field& truth, const SsimOptions& o) {
  require(pred.same_shape(truth), ErrorKind::ShapeMismatch, "ssim: fields differ in shape");
  require(o.window >= 1 && o.window % 2 == 1, ErrorKind::InvalidArgument, "ssim window must be odd");
  require(o.window <= std::min(pred.rows(), pred.cols()), ErrorKind::InvalidArgument,
          "ssim window " + std::to_string(o.window) + " exceeds field size");
  require(o.data_range > 0.0 && o.sigma > 0.0, ErrorKind::InvalidArgument, "ssim needs data_range > 0 and sigma > 0");
  const int w = o.window, half = w / 2;
  std::vector<double> g(static_cast<std::size_t>(w));
  double total = 0.0;
  for (int i = 0; i < w; ++i) total += g[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - half) * (i - half) / (o.sigma * o.sigma));
  for (auto& v : g) v /= total;
  const double c1 = (o.k1 * o.data_range) * (o.k1 * o.data_range);
  const double c2 = (o.k2 * o.data_range) * (o.k2 * o.data_range);
  const int out_r = pred.rows() - w + 1, out_c = pred.cols() - w + 1;
  double acc = 0.0;
  for (int r = 0; r < out_r; ++r)
    for (int c = 0; c < out_c; ++c) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int i = 0; i < w; ++i)
        for (int j = 0; j < w; ++j) {
          const double k = g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(j)];
          const double x = pred.at(r + i, c + j), y = truth.at(r + i, c + j);
          mx += k * x;
          my += k * y;
          xx += k * x * x;
          yy += k * y * y;
          xy += k * x * y;
        }
      const double vx = xx - mx * mx, vy = yy - my * my, cov = xy - mx * my;
      acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return acc / (static_cast<double>(out_r) * out_c);
}

void MetricConfig::validate() const {
  require(!thresholds.empty() && !pools.empty(), ErrorKind::InvalidArgument, "metric grid must be non-empty");
  for (int p : pools) require(p >= 1, ErrorKind::InvalidArgument, "pool sizes must be positive");
}

const CellScore& MetricReport::cell(double threshold, int pool) const {
  for (const auto& c : cells)
    if (c.threshold == threshold && c.pool == pool) return c;
  fail(ErrorKind::OutOfRange, "no metric cell for threshold " + fmt_num(threshold) + ", pool " + std::to_string(pool));
}

MetricReport evaluate(const Field& pred, const Field& truth, const MetricConfig& cfg) {
  cfg.validate();
  require(pred.units() == Units::Dbz && truth.units() == Units::Dbz, ErrorKind::UnitsMismatch,
          "evaluate expects dBZ fields");
  MetricReport r;
  r.rmse = rmse(pred, truth);
  r.ssim = ssim(pred, truth, cfg.ssim);
  for (double thr : cfg.thresholds)
    for (int pool : cfg.pools) {
      CellScore cs;
      cs.threshold = thr;
      cs.pool = pool;
      cs.counts = contingency(pred, truth, thr, pool);
      cs.scores = scores(cs.counts);
      r.cells.push_back(cs);
    }
  return r;
}

std::vector<std::string> metric_columns(const MetricConfig& cfg, bool full) {
  std::vector<std::string> cols = {"rmse", "ssim"};
  const std::vector<std::string> kinds = full ? std::vector<std::string>{"pod", "far", "csi"} : std::vector<std::string>{"csi"};
  for (const auto& k : kinds)
    for (double thr : cfg.thresholds)
      for (int pool : cfg.pools) cols.push_back(k + "_t" + fmt_num(thr) + "_p" + std::to_string(pool));
  return cols;
}

std::vector<double> metric_values(const MetricReport& report, bool full) {
  std::vector<double> v = {report.rmse, report.ssim};
  if (full) {
    for (const auto& c : report.cells) v.push_back(c.scores.pod);
    for (const auto& c : report.cells) v.push_back(c.scores.far);
  }
  for (const auto& c : report.cells) v.push_back(c.scores.csi);
  return v;
}

MetricRow aggregate_row(const std::vector<MetricRow>& rows, const std::string& model_id) {
  require(!rows.empty(), ErrorKind::InvalidArgument, "cannot aggregate zero rows");
  MetricRow out{"mean", model_id, std::vector<double>(rows[0].values.size(), 0.0)};
  for (const auto& r : rows) {
    require(r.values.size() == out.values.size(), ErrorKind::ShapeMismatch, "metric rows differ in width");
    for (std::size_t i = 0; i < r.values.size(); ++i) out.values[i] += r.values[i];
  }
  for (auto& v : out.values) v /= static_cast<double>(rows.size());
  return out;
}

std::string metrics_csv(const std::vector<std::string>& columns, const std::vector<MetricRow>& rows) {
  std::string out = "scene_id,model_id";
  for (const auto& c : columns) out += "," + c;
  out += "\n";
  for (const auto& r : rows) {
    require(r.values.size() == columns.size(), ErrorKind::ShapeMismatch, "metric row does not match columns");
    out += r.scene_id + "," + r.model_id;
    for (double v : r.values) out += "," + fmt_num(v);
    out += "\n";
  }
  return out;
}

}  // namespace diffsr
