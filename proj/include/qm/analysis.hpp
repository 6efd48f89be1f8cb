#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qm/quantize.hpp"

namespace qm {

// Per-axis quantization of d-dimensional feature space induces |D|^d
// axis-aligned cells; each cell's center is a dictionary vector. The
// partition's bounding box is the hull of the centers, [D_first, D_last]^d;
// boundary cells extend to its edge, matching the quantizer's clamping.
class CellPartition {
 public:
  CellPartition(int dimension, std::vector<double> dictionary);

  int dimension() const { return dimension_; }
  const std::vector<double>& dictionary() const { return scheme_.entries(); }
  uint64_t cell_count() const;

  // Eq.-1 interval rule per axis, shared with the quantize module.
  int axis_index(double v) const;
  std::vector<int> cell_of(const std::vector<double>& v) const;
  uint64_t flat_index(const std::vector<int>& idx) const;
  std::vector<int> unflatten(uint64_t flat) const;
  std::vector<double> center(const std::vector<int>& idx) const;

  double box_lo() const { return scheme_.entries().front(); }
  double box_hi() const { return scheme_.entries().back(); }
  bool inside_box(const std::vector<double>& v) const;

 private:
  int dimension_;
  QuantizationScheme scheme_;
};

// |D|^d; errors once the count would exceed 2^63.
uint64_t cell_count(int d, const std::vector<double>& dictionary);

// Per-axis quantization of a point; returns the containing cell's center.
std::vector<double> quantize_point(const std::vector<double>& v, const std::vector<double>& dictionary);

// Affine subspace offset + span(basis) with rank k < d. The basis is
// orthonormalized on construction; linearly dependent input is an error.
class LinearManifold {
 public:
  LinearManifold(std::vector<std::vector<double>> basis, std::vector<double> offset);

  int dim() const { return static_cast<int>(offset_.size()); }
  int rank() const { return static_cast<int>(basis_.size()); }
  const std::vector<std::vector<double>>& basis() const { return basis_; }
  const std::vector<double>& offset() const { return offset_; }

  // Orthogonal projection: the manifold point closest to p.
  std::vector<double> project(const std::vector<double>& p) const;
  std::vector<double> point_at(const std::vector<double>& coeffs) const;

 private:
  std::vector<std::vector<double>> basis_;  // orthonormal rows
  std::vector<double> offset_;
};

struct IntersectionResult {
  std::vector<uint64_t> cells;  // distinct flat cell indices, sorted
  bool outside_box_warning = false;
};

// Monte-Carlo lower bound on the set of cells the manifold intersects inside
// the partition's bounding box. Points are sampled around the projection of
// the box center; the sampled coefficient ball provably covers every
// box-intersecting manifold point. Fixed seed prefixes make the hit set
// monotone nondecreasing in the sample count.
IntersectionResult intersected_cells(const LinearManifold& m, const CellPartition& partition,
                                     int samples, uint64_t seed);

struct CellTrial {
  int trial = 0;
  int d = 0;
  int k = 0;
  uint64_t cells_total = 0;
  uint64_t cells_hit = 0;      // relaxed matching: cells the manifold intersects
  uint64_t strict_match = 0;   // cells whose center the manifold's closest approach quantizes to
  double relaxed_fraction = 0.0;
};

struct RelaxationReport {
  std::vector<CellTrial> trials;
  double mean_strict_fraction = 0.0;
  double mean_relaxed_fraction = 0.0;
  double full_coverage_fraction = 0.0;  // trials whose hit set covers every cell

  std::string to_csv() const;  // trial,d,k,cells_total,cells_hit,strict_match,relaxed_fraction
};

// Random rank-k manifolds vs the |D|^d partition. Strict matching asks the
// least-squares fit to each center to land in that center's cell once
// quantized; relaxed matching only asks the manifold to intersect the cell.
// Strict cells are intersected by construction, so strict <= relaxed holds on
// every trial.
RelaxationReport matching_relaxation_report(int trials, int d, int k,
                                            const std::vector<double>& dictionary, uint64_t seed,
                                            int samples_per_trial = 2048);

}  // namespace qm
