#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tabssm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

/// Dense row-major array of 64-bit reals. Value semantics (deep copies).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  Tensor(const Tensor& o);
  Tensor& operator=(const Tensor& o);
  Tensor(Tensor&&) noexcept = default;
  Tensor& operator=(Tensor&&) noexcept = default;

  /// Unset contents; callers must write every element before reading.
  static Tensor uninitialized(Shape shape);

  static Tensor scalar(double v);
  static Tensor full(Shape shape, double v);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor from_vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return size_; }
  std::size_t dim(std::size_t i) const { return shape_[i]; }

  double* data() { return data_.get(); }
  const double* data() const { return data_.get(); }
  double& at(std::size_t flat) { return data_[flat]; }
  double at(std::size_t flat) const { return data_[flat]; }

  std::span<const double> values() const { return {data_.get(), size_}; }
  std::span<double> values() { return {data_.get(), size_}; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::size_t size_ = 0;
  std::unique_ptr<double[]> data_;
};

std::size_t shape_numel(const Shape& s);

// Right-aligned broadcasting: axes of length 1 stretch to the partner length.
// Throws std::invalid_argument naming both shapes on mismatch.
Shape broadcast_shape(const Shape& a, const Shape& b);

std::vector<std::size_t> row_major_strides(const Shape& s);

// Strides for reading a tensor of shape `t` as if broadcast to `out`
// (stride 0 on stretched or missing leading axes). `t` must broadcast to `out`.
std::vector<std::size_t> broadcast_strides(const Shape& t, const Shape& out);

// Sums `g` over the axes that were stretched when broadcasting `target` up to
// g's shape; result has shape `target`. Used by gradient accumulation.
Tensor reduce_to_shape(const Tensor& g, const Shape& target);

}  // namespace tabssm
