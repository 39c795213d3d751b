#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace aad {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Eigen::MatrixXd>;
using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXd>;

/// A named rows x cols matrix stored column-major inside a flat parameter vector.
struct BlockSpec {
  std::string name;
  std::size_t offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(rows * cols); }
};

/// Offsets of every trainable block. Optimizer state, gradients and checkpoints
/// all share this layout, so they are plain vectors of `total()` doubles.
class ParamLayout {
 public:
  const BlockSpec& add(std::string name, Eigen::Index rows, Eigen::Index cols);

  const std::vector<BlockSpec>& blocks() const noexcept { return blocks_; }
  std::size_t total() const noexcept { return total_; }
  std::optional<std::size_t> find(std::string_view name) const;

 private:
  std::vector<BlockSpec> blocks_;
  std::size_t total_ = 0;
};

inline MatrixMap view(std::span<double> data, const BlockSpec& b) {
  return MatrixMap(data.data() + b.offset, b.rows, b.cols);
}

inline ConstMatrixMap view(std::span<const double> data, const BlockSpec& b) {
  return ConstMatrixMap(data.data() + b.offset, b.rows, b.cols);
}

/// Contiguous [begin, end) range of the flat vector.
struct ParamRange {
  std::size_t begin = 0;
  std::size_t end = 0;
};

}  // namespace aad
