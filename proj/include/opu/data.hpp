// Dataset container, synthetic blob generation, and CSV ingestion.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "opu/core.hpp"
#include "opu/random.hpp"

namespace opu {

enum class Split { train, test, distill, ood };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::distill: return "distill";
    case Split::ood: return "ood";
  }
  return "?";
}

struct Dataset {
  Matrix x;
  std::vector<int> labels;  // empty for ood splits
  std::string name;
  Split split = Split::train;
};

inline void validate_dataset(const Dataset& d, int num_classes) {
  if (!all_finite(d.x.data)) throw std::invalid_argument("dataset: non-finite feature");
  if (d.split == Split::ood) {
    if (!d.labels.empty()) throw std::invalid_argument("dataset: ood split carries no labels");
    return;
  }
  if (static_cast<int>(d.labels.size()) != d.x.rows)
    throw std::invalid_argument("dataset: label count mismatch");
  for (int y : d.labels)
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("dataset: label out of range");
}

// Synthetic scenario: K Gaussian blobs on a ring, an OOD cluster displaced
// along a fixed direction so that it sits at least `ood_offset` standard
// deviations from every class center. A zero offset reproduces the in-domain
// mixture instead.
struct BlobSpec {
  int num_classes = 3;
  int per_class_train = 100;
  int per_class_distill = 100;
  int per_class_test = 100;
  int ood_count = 300;
  double radius = 2.2;
  double cov_scale = 1.0;  // per-axis standard deviation
  double ood_offset = 10.0;
  Vec ood_direction = {0.0, -1.0};
  std::vector<Vec> centers;  // defaults to a ring of `radius`
};

struct SyntheticData {
  Dataset train, distill, test, ood;
};

namespace detail {

inline std::vector<Vec> blob_centers(const BlobSpec& spec) {
  if (!spec.centers.empty()) {
    if (static_cast<int>(spec.centers.size()) != spec.num_classes)
      throw std::invalid_argument("gen_synthetic: center count must match classes");
    return spec.centers;
  }
  std::vector<Vec> centers(spec.num_classes);
  for (int k = 0; k < spec.num_classes; ++k) {
    const double angle = M_PI / 2.0 + 2.0 * M_PI * k / spec.num_classes;
    centers[k] = {spec.radius * std::cos(angle), spec.radius * std::sin(angle)};
  }
  return centers;
}

inline Dataset blob_split(const BlobSpec& spec, const std::vector<Vec>& centers,
                          int per_class, Split split, RngState& rng) {
  Dataset d;
  d.split = split;
  d.name = std::string("blobs-") + split_name(split);
  d.x = Matrix(per_class * spec.num_classes, 2);
  d.labels.resize(per_class * spec.num_classes);
  int row = 0;
  for (int k = 0; k < spec.num_classes; ++k)
    for (int i = 0; i < per_class; ++i, ++row) {
      d.x(row, 0) = centers[k][0] + spec.cov_scale * rng.normal();
      d.x(row, 1) = centers[k][1] + spec.cov_scale * rng.normal();
      d.labels[row] = k;
    }
  return d;
}

}  // namespace detail

inline SyntheticData gen_synthetic(const BlobSpec& spec, RngState& rng) {
  if (spec.num_classes < 2) throw std::invalid_argument("gen_synthetic: needs K >= 2");
  if (!(spec.cov_scale > 0.0)) throw std::invalid_argument("gen_synthetic: degenerate spread");
  const auto centers = detail::blob_centers(spec);

  SyntheticData data;
  data.train = detail::blob_split(spec, centers, spec.per_class_train, Split::train, rng);
  data.distill =
      detail::blob_split(spec, centers, spec.per_class_distill, Split::distill, rng);
  data.test = detail::blob_split(spec, centers, spec.per_class_test, Split::test, rng);

  data.ood.split = Split::ood;
  data.ood.name = "blobs-ood";
  data.ood.x = Matrix(spec.ood_count, 2);
  if (spec.ood_offset == 0.0) {
    // same mixture as the in-domain data
    for (int i = 0; i < spec.ood_count; ++i) {
      const int k = static_cast<int>(rng.next_u64() % spec.num_classes);
      data.ood.x(i, 0) = centers[k][0] + spec.cov_scale * rng.normal();
      data.ood.x(i, 1) = centers[k][1] + spec.cov_scale * rng.normal();
    }
  } else {
    Vec dir = spec.ood_direction;
    const double norm = std::hypot(dir[0], dir[1]);
    if (!(norm > 0.0)) throw std::invalid_argument("gen_synthetic: zero ood direction");
    dir[0] /= norm;
    dir[1] /= norm;
    Vec centroid = {0.0, 0.0};
    for (const auto& c : centers) {
      centroid[0] += c[0] / centers.size();
      centroid[1] += c[1] / centers.size();
    }
    double spread = 0.0;
    for (const auto& c : centers)
      spread = std::max(spread, std::hypot(c[0] - centroid[0], c[1] - centroid[1]));
    // at distance >= ood_offset * sigma from every center
    const double t = spec.ood_offset * spec.cov_scale + spread;
    const Vec ood_center = {centroid[0] + t * dir[0], centroid[1] + t * dir[1]};
    for (int i = 0; i < spec.ood_count; ++i) {
      data.ood.x(i, 0) = ood_center[0] + spec.cov_scale * rng.normal();
      data.ood.x(i, 1) = ood_center[1] + spec.cov_scale * rng.normal();
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// CSV: header row required, '#' comment lines skipped, optional label column,
// optional per-feature L2 normalization.

struct CsvSchema {
  std::vector<std::string> feature_cols;
  std::optional<std::string> label_col;
  bool l2_normalize = false;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

}  // namespace detail

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_csv: cannot open " + path);
  std::string line;
  int line_no = 0;
  // header
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    header = detail::split_csv_line(line);
    break;
  }
  if (header.empty()) throw std::runtime_error("load_csv: missing header row in " + path);

  auto col_index = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw std::runtime_error("load_csv: column '" + name + "' not in header of " + path);
  };
  std::vector<int> feat_idx;
  for (const auto& c : schema.feature_cols) feat_idx.push_back(col_index(c));
  int label_idx = -1;
  if (schema.label_col) label_idx = col_index(*schema.label_col);

  std::vector<Vec> rows;
  std::vector<int> labels;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() < header.size())
      throw std::runtime_error("load_csv: line " + std::to_string(line_no) +
                               ": expected " + std::to_string(header.size()) + " cells");
    Vec row(feat_idx.size());
    for (size_t j = 0; j < feat_idx.size(); ++j) {
      try {
        row[j] = std::stod(cells[feat_idx[j]]);
      } catch (const std::exception&) {
        throw std::runtime_error("load_csv: line " + std::to_string(line_no) +
                                 ": cannot parse '" + cells[feat_idx[j]] + "'");
      }
      if (!std::isfinite(row[j]))
        throw std::runtime_error("load_csv: line " + std::to_string(line_no) +
                                 ": non-finite entry");
    }
    rows.push_back(std::move(row));
    if (label_idx >= 0) {
      try {
        labels.push_back(std::stoi(cells[label_idx]));
      } catch (const std::exception&) {
        throw std::runtime_error("load_csv: line " + std::to_string(line_no) +
                                 ": cannot parse label '" + cells[label_idx] + "'");
      }
    }
  }

  Dataset d;
  d.name = std::filesystem::path(path).stem().string();
  d.x = Matrix(static_cast<int>(rows.size()), static_cast<int>(feat_idx.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) d.x(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  d.labels = std::move(labels);

  if (schema.l2_normalize) {
    for (int j = 0; j < d.x.cols; ++j) {
      double norm2 = 0.0;
      for (int i = 0; i < d.x.rows; ++i) norm2 += d.x(i, j) * d.x(i, j);
      const double norm = std::sqrt(norm2);
      if (norm > 0.0)
        for (int i = 0; i < d.x.rows; ++i) d.x(i, j) /= norm;
    }
  }
  return d;
}

// Writes a dataset as CSV with a config-hash comment line; deterministic
// formatting (max_digits10) so identical data gives identical bytes.
inline void save_dataset_csv(const std::string& path, const Dataset& d,
                             const std::string& config_hash) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("save_dataset_csv: cannot open " + path);
  os << "# config_hash=" << config_hash << "\n";
  for (int j = 0; j < d.x.cols; ++j) os << "f" << j << ",";
  os << (d.labels.empty() ? "id" : "label") << "\n";
  char buf[40];
  for (int i = 0; i < d.x.rows; ++i) {
    for (int j = 0; j < d.x.cols; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.x(i, j));
      os << buf << ",";
    }
    if (d.labels.empty())
      os << i << "\n";
    else
      os << d.labels[i] << "\n";
  }
}

}  // namespace opu
