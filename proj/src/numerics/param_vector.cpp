#include "focalpp/numerics/param_vector.hpp"

#include "focalpp/util/rng.hpp"

namespace focalpp::numerics {

void ParamLayout::add(std::string name, std::size_t rows, std::size_t cols) {
  require(rows > 0 && cols > 0, "segment '" + name + "' must have positive shape");
  for (const auto& s : segments_)
    require(s.name != name, "duplicate segment name '" + name + "'");
  Segment seg;
  seg.name = std::move(name);
  seg.offset = total_;
  seg.rows = rows;
  seg.cols = cols;
  total_ += seg.length();
  segments_.push_back(std::move(seg));
}

std::size_t ParamLayout::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < segments_.size(); ++i)
    if (segments_[i].name == name) return i;
  throw ConfigError("unknown parameter segment '" + name + "'");
}

bool ParamLayout::operator==(const ParamLayout& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& a = segments_[i];
    const auto& b = other.segments_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

std::uint64_t ParamLayout::hash() const {
  std::uint64_t h = 0x6f63616c2b2bULL;
  for (const auto& s : segments_) {
    for (char c : s.name) h = mix64(h ^ static_cast<std::uint64_t>(c));
    h = mix64(h ^ s.rows);
    h = mix64(h ^ s.cols);
  }
  return h;
}

ParamVector::ParamVector(ParamLayout layout)
    : layout_(std::move(layout)), values_(layout_.total(), 0.0) {}

std::span<double> ParamVector::segment(std::size_t idx) {
  const auto& s = layout_.segments().at(idx);
  return std::span<double>(values_.data() + s.offset, s.length());
}

std::span<const double> ParamVector::segment(std::size_t idx) const {
  const auto& s = layout_.segments().at(idx);
  return std::span<const double>(values_.data() + s.offset, s.length());
}

Matrix ParamVector::segment_matrix(std::size_t idx) const {
  const auto& s = layout_.segments().at(idx);
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values_.data() + s.offset, static_cast<Eigen::Index>(s.rows),
      static_cast<Eigen::Index>(s.cols));
}

void ParamVector::set_segment(std::size_t idx, const Matrix& m) {
  const auto& s = layout_.segments().at(idx);
  require(m.rows() == static_cast<Eigen::Index>(s.rows) &&
              m.cols() == static_cast<Eigen::Index>(s.cols),
          "shape mismatch writing segment '" + s.name + "'");
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values_.data() + s.offset, m.rows(), m.cols()) = m;
}

bool ParamVector::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

ParamVector ParamVector::zeros_like() const { return ParamVector(layout_); }

}  // namespace focalpp::numerics
