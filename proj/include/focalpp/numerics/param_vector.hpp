#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "focalpp/common.hpp"

namespace focalpp::numerics {

// One named slice of a flat parameter vector. Segments carry a matrix shape so
// models can map them directly into Eigen matrices (row-major rows*cols).
struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t length() const { return rows * cols; }
};

class ParamLayout {
 public:
  void add(std::string name, std::size_t rows, std::size_t cols);
  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t total() const { return total_; }
  std::size_t index_of(const std::string& name) const;  // throws ConfigError if absent
  bool operator==(const ParamLayout& other) const;
  // Stable hash over segment names and shapes; stored with serialized
  // parameters to reject loading into an incompatible model.
  std::uint64_t hash() const;

 private:
  std::vector<Segment> segments_;
  std::size_t total_ = 0;
};

// Flat 64-bit parameter storage plus its layout. Segments are disjoint and
// cover the vector by construction.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(ParamLayout layout);

  const ParamLayout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  std::span<double> segment(std::size_t idx);
  std::span<const double> segment(std::size_t idx) const;
  std::span<double> segment(const std::string& name) { return segment(layout_.index_of(name)); }

  // Row-major copies in and out of Eigen matrices.
  Matrix segment_matrix(std::size_t idx) const;
  void set_segment(std::size_t idx, const Matrix& m);

  bool all_finite() const;
  ParamVector zeros_like() const;
  bool same_layout(const ParamVector& other) const { return layout_ == other.layout_; }

 private:
  ParamLayout layout_;
  std::vector<double> values_;
};

}  // namespace focalpp::numerics
