#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "skillformer/rng.hpp"

namespace skillformer {

using Shape = std::vector<std::size_t>;

/// Product of extents; 1 for the rank-0 shape.
[[nodiscard]] std::size_t shape_numel(const Shape& shape) noexcept;
[[nodiscard]] std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient accumulator.
///
/// Invariants: every extent is positive, `numel() == data().size()`, and the
/// gradient, once allocated, has the same length as the data.
class Tensor {
 public:
  /// Rank-0 zero.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor normal(Shape shape, SplitMix64& rng, double stddev, double mean = 0.0);
  static Tensor uniform(Shape shape, SplitMix64& rng, double low, double high);

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
  [[nodiscard]] std::size_t numel() const noexcept { return data_.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const;

  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] std::vector<double>& storage() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Bounds-checked multi-index access.
  [[nodiscard]] double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);
  [[nodiscard]] double item() const;

  /// Same data, new shape with equal element count.
  [[nodiscard]] Tensor reshaped(Shape shape) const;
  void fill(double value) noexcept;

  [[nodiscard]] bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool flag) noexcept {
    requires_grad_ = flag;
    return *this;
  }

  [[nodiscard]] bool has_grad() const noexcept { return grad_.has_value(); }
  /// Gradient accumulator; allocated as zeros on first use.
  std::vector<double>& grad();
  [[nodiscard]] const std::vector<double>& grad() const;
  void zero_grad() noexcept;
  void clear_grad() noexcept { grad_.reset(); }

  [[nodiscard]] bool all_finite() const noexcept;
  /// Throws NumericError naming `what` if any value is NaN or infinite.
  void check_finite(std::string_view what) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

/// Compares shape and the raw bytes of the data.
[[nodiscard]] bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept;
[[nodiscard]] double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace skillformer
