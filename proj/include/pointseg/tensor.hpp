#pragma once
// Dense row-major double tensor. Copies share storage; ops allocate fresh
// outputs. All model math runs in 64-bit; float32 only appears at the
// on-disk boundary.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "pointseg/errors.hpp"

namespace pointseg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {}
  Tensor(Shape shape, double fill)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}
  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (static_cast<std::int64_t>(data_->size()) != shape_numel(shape_))
      throw ConfigError("tensor: value count does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

  double& at(std::initializer_list<std::int64_t> idx) { return (*data_)[flat(idx)]; }
  double at(std::initializer_list<std::int64_t> idx) const { return (*data_)[flat(idx)]; }

  // New tensor with the same shape/values but private storage.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
  }

  // Shares storage; only the shape changes.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ConfigError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(s));
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) { std::fill(data_->begin(), data_->end(), v); }

  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::size_t flat(std::initializer_list<std::int64_t> idx) const {
    std::int64_t off = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      off = off * shape_[k] + i;
      ++k;
    }
    return static_cast<std::size_t>(off);
  }

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
};

}  // namespace pointseg
