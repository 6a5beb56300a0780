#include "core/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace nseg {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), numel_(shape_numel(shape_)) {
  data_.assign(static_cast<size_t>(numel_), 0.0);
}

Tensor::Tensor(std::vector<int64_t> shape, double fill)
    : shape_(std::move(shape)), numel_(shape_numel(shape_)) {
  data_.assign(static_cast<size_t>(numel_), fill);
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)), numel_(shape_numel(shape_)) {
  if (static_cast<int64_t>(data_.size()) != numel_)
    throw std::invalid_argument("tensor data size does not match shape");
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::fabs(x));
  return m;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ",";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

}  // namespace nseg
