#include "qm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "qm/rng.hpp"

namespace qm {

CellPartition::CellPartition(int dimension, std::vector<double> dictionary) : dimension_(dimension) {
  QM_CHECK(dimension >= 1, "cell partition: dimension " + std::to_string(dimension) + " < 1");
  scheme_ = QuantizationScheme::explicit_entries(std::move(dictionary));
}

uint64_t CellPartition::cell_count() const { return qm::cell_count(dimension_, scheme_.entries()); }

int CellPartition::axis_index(double v) const {
  const double q = scheme_.quantize_value(v);
  const auto& e = scheme_.entries();
  const auto it = std::lower_bound(e.begin(), e.end(), q);
  return static_cast<int>(it - e.begin());
}

std::vector<int> CellPartition::cell_of(const std::vector<double>& v) const {
  QM_CHECK_SHAPE(static_cast<int>(v.size()) == dimension_,
                 "cell_of: point dimension " + std::to_string(v.size()) + " != " +
                     std::to_string(dimension_));
  std::vector<int> idx(v.size());
  for (size_t i = 0; i < v.size(); ++i) idx[i] = axis_index(v[i]);
  return idx;
}

uint64_t CellPartition::flat_index(const std::vector<int>& idx) const {
  const uint64_t n = scheme_.entries().size();
  uint64_t flat = 0;
  for (int i = 0; i < dimension_; ++i) flat = flat * n + static_cast<uint64_t>(idx[static_cast<size_t>(i)]);
  return flat;
}

std::vector<int> CellPartition::unflatten(uint64_t flat) const {
  const uint64_t n = scheme_.entries().size();
  std::vector<int> idx(static_cast<size_t>(dimension_));
  for (int i = dimension_ - 1; i >= 0; --i) {
    idx[static_cast<size_t>(i)] = static_cast<int>(flat % n);
    flat /= n;
  }
  return idx;
}

std::vector<double> CellPartition::center(const std::vector<int>& idx) const {
  std::vector<double> c(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) c[i] = scheme_.entries()[static_cast<size_t>(idx[i])];
  return c;
}

bool CellPartition::inside_box(const std::vector<double>& v) const {
  for (double x : v)
    if (x < box_lo() || x > box_hi()) return false;
  return true;
}

uint64_t cell_count(int d, const std::vector<double>& dictionary) {
  QM_CHECK(d >= 1, "cell_count: dimension " + std::to_string(d) + " < 1");
  QM_CHECK(!dictionary.empty(), "cell_count: empty dictionary");
  const uint64_t n = dictionary.size();
  uint64_t total = 1;
  const uint64_t limit = uint64_t(1) << 63;
  for (int i = 0; i < d; ++i) {
    QM_CHECK(total <= limit / n, "cell_count: |D|^d overflows past 2^63 for d=" + std::to_string(d));
    total *= n;
  }
  return total;
}

std::vector<double> quantize_point(const std::vector<double>& v, const std::vector<double>& dictionary) {
  CellPartition part(static_cast<int>(v.size()), dictionary);
  return part.center(part.cell_of(v));
}

// ---------------------------------------------------------------------------
// LinearManifold
// ---------------------------------------------------------------------------

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

LinearManifold::LinearManifold(std::vector<std::vector<double>> basis, std::vector<double> offset)
    : offset_(std::move(offset)) {
  const size_t d = offset_.size();
  QM_CHECK(d >= 1, "manifold: empty offset");
  QM_CHECK(basis.size() < d, "manifold: rank " + std::to_string(basis.size()) +
                                 " must be below dimension " + std::to_string(d));
  // Gram-Schmidt; dependence shows up as a vanishing residual.
  for (auto& v : basis) {
    QM_CHECK_SHAPE(v.size() == d, "manifold: basis vector dimension mismatch");
    for (const auto& u : basis_) {
      const double c = dot(v, u);
      for (size_t i = 0; i < d; ++i) v[i] -= c * u[i];
    }
    const double n = std::sqrt(dot(v, v));
    QM_CHECK(n > 1e-12, "manifold: basis is linearly dependent");
    for (auto& x : v) x /= n;
    basis_.push_back(std::move(v));
  }
}

std::vector<double> LinearManifold::project(const std::vector<double>& p) const {
  QM_CHECK_SHAPE(p.size() == offset_.size(), "project: dimension mismatch");
  std::vector<double> rel(p.size());
  for (size_t i = 0; i < p.size(); ++i) rel[i] = p[i] - offset_[i];
  std::vector<double> out = offset_;
  for (const auto& u : basis_) {
    const double c = dot(rel, u);
    for (size_t i = 0; i < out.size(); ++i) out[i] += c * u[i];
  }
  return out;
}

std::vector<double> LinearManifold::point_at(const std::vector<double>& coeffs) const {
  QM_CHECK_SHAPE(coeffs.size() == basis_.size(), "point_at: coefficient count mismatch");
  std::vector<double> out = offset_;
  for (size_t j = 0; j < basis_.size(); ++j)
    for (size_t i = 0; i < out.size(); ++i) out[i] += coeffs[j] * basis_[j][i];
  return out;
}

// ---------------------------------------------------------------------------
// Intersection counting
// ---------------------------------------------------------------------------

IntersectionResult intersected_cells(const LinearManifold& m, const CellPartition& partition,
                                     int samples, uint64_t seed) {
  QM_CHECK(samples >= 1, "intersected_cells: samples " + std::to_string(samples) + " < 1");
  QM_CHECK_SHAPE(m.dim() == partition.dimension(), "intersected_cells: dimension mismatch");
  const int d = partition.dimension();
  const int k = m.rank();

  std::vector<double> box_center(static_cast<size_t>(d), 0.5 * (partition.box_lo() + partition.box_hi()));
  const std::vector<double> anchor = m.project(box_center);
  // Every manifold point inside the box sits within the half-diagonal of the
  // anchor (Pythagoras through the orthogonal projection), so sampling
  // coefficients in [-r, r]^k covers the whole patch.
  const double half_diag =
      0.5 * (partition.box_hi() - partition.box_lo()) * std::sqrt(static_cast<double>(d));

  Rng rng(seed);
  std::set<uint64_t> cells;
  std::vector<double> coeffs(static_cast<size_t>(k));
  std::vector<double> p;
  for (int s = 0; s < samples; ++s) {
    for (auto& c : coeffs) c = rng.uniform(-half_diag, half_diag);
    p = anchor;
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < d; ++i) p[static_cast<size_t>(i)] += coeffs[static_cast<size_t>(j)] * m.basis()[static_cast<size_t>(j)][static_cast<size_t>(i)];
    if (!partition.inside_box(p)) continue;
    cells.insert(partition.flat_index(partition.cell_of(p)));
  }

  IntersectionResult res;
  res.cells.assign(cells.begin(), cells.end());
  if (res.cells.empty()) res.outside_box_warning = true;
  return res;
}

RelaxationReport matching_relaxation_report(int trials, int d, int k,
                                            const std::vector<double>& dictionary, uint64_t seed,
                                            int samples_per_trial) {
  QM_CHECK(trials >= 1, "relaxation report: trials " + std::to_string(trials) + " < 1");
  QM_CHECK(k >= 0 && k < d, "relaxation report: need 0 <= k < d");
  CellPartition partition(d, dictionary);
  const uint64_t total = partition.cell_count();
  QM_CHECK(total <= 1000000, "relaxation report: " + std::to_string(total) +
                                 " cells is too many to enumerate");

  Rng root(seed);
  RelaxationReport report;
  report.trials.reserve(static_cast<size_t>(trials));
  double strict_sum = 0.0, relaxed_sum = 0.0;
  int covered = 0;

  for (int t = 0; t < trials; ++t) {
    Rng rng = root.split(static_cast<uint64_t>(t));
    std::vector<std::vector<double>> basis(static_cast<size_t>(k),
                                           std::vector<double>(static_cast<size_t>(d)));
    for (auto& v : basis)
      for (auto& x : v) x = rng.normal();
    std::vector<double> offset(static_cast<size_t>(d));
    for (auto& x : offset) x = rng.uniform(partition.box_lo(), partition.box_hi());
    LinearManifold m(std::move(basis), std::move(offset));

    IntersectionResult inter = intersected_cells(m, partition, samples_per_trial, rng.next_u64());
    std::set<uint64_t> hit(inter.cells.begin(), inter.cells.end());

    // Strict matching: project each center onto the manifold and ask the
    // quantized projection to recover the center. Such a projection lies both
    // on the manifold and in the cell, so strict cells are intersections too.
    uint64_t strict = 0;
    for (uint64_t flat = 0; flat < total; ++flat) {
      const std::vector<int> idx = partition.unflatten(flat);
      const std::vector<double> c = partition.center(idx);
      const std::vector<double> proj = m.project(c);
      if (partition.cell_of(proj) == idx && partition.inside_box(proj)) {
        ++strict;
        hit.insert(flat);
      }
    }

    CellTrial row;
    row.trial = t;
    row.d = d;
    row.k = k;
    row.cells_total = total;
    row.cells_hit = static_cast<uint64_t>(hit.size());
    row.strict_match = strict;
    row.relaxed_fraction = static_cast<double>(hit.size()) / static_cast<double>(total);
    report.trials.push_back(row);

    strict_sum += static_cast<double>(strict) / static_cast<double>(total);
    relaxed_sum += row.relaxed_fraction;
    if (row.cells_hit == total) ++covered;
  }

  report.mean_strict_fraction = strict_sum / trials;
  report.mean_relaxed_fraction = relaxed_sum / trials;
  report.full_coverage_fraction = static_cast<double>(covered) / trials;
  return report;
}

std::string RelaxationReport::to_csv() const {
  std::string out = "trial,d,k,cells_total,cells_hit,strict_match,relaxed_fraction\n";
  char line[160];
  for (const auto& t : trials) {
    std::snprintf(line, sizeof(line), "%d,%d,%d,%llu,%llu,%llu,%.9f\n", t.trial, t.d, t.k,
                  static_cast<unsigned long long>(t.cells_total),
                  static_cast<unsigned long long>(t.cells_hit),
                  static_cast<unsigned long long>(t.strict_match), t.relaxed_fraction);
    out += line;
  }
  return out;
}

}  // namespace qm
