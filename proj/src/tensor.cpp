#include "tabssm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace tabssm {

namespace {

// Training allocates and frees multi-megabyte scan buffers every step; keep
// them on the freelist rather than handing the pages back to the kernel,
// which would re-zero them on the next touch.
[[maybe_unused]] const bool malloc_tuned = [] {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
  return true;
}();

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), size_(shape_numel(shape_)),
      data_(new double[size_]()) {}

Tensor Tensor::uninitialized(Shape shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.size_ = shape_numel(t.shape_);
  t.data_.reset(new double[t.size_]);
  return t;
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), size_(data.size()), data_(new double[data.size()]) {
  if (shape_numel(shape_) != size_) {
    throw std::invalid_argument("tensor data length " + std::to_string(size_) +
                                " does not match shape " + shape_str(shape_));
  }
  std::copy(data.begin(), data.end(), data_.get());
}

Tensor::Tensor(const Tensor& o)
    : shape_(o.shape_), size_(o.size_), data_(o.size_ ? new double[o.size_] : nullptr) {
  if (size_) std::copy(o.data_.get(), o.data_.get() + size_, data_.get());
}

Tensor& Tensor::operator=(const Tensor& o) {
  if (this == &o) return *this;
  shape_ = o.shape_;
  if (size_ != o.size_) data_.reset(o.size_ ? new double[o.size_] : nullptr);
  size_ = o.size_;
  if (size_) std::copy(o.data_.get(), o.data_.get() + size_, data_.get());
  return *this;
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t = uninitialized(std::move(shape));
  for (std::size_t i = 0; i < t.size_; ++i) t.data_[i] = v;
  return t;
}

Tensor Tensor::from_vector(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

bool Tensor::all_finite() const {
  for (std::size_t i = 0; i < size_; ++i)
    if (!std::isfinite(data_[i])) return false;
  return true;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("shapes not broadcast-compatible: " + shape_str(a) + " vs " +
                                  shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

std::vector<std::size_t> broadcast_strides(const Shape& t, const Shape& out) {
  const std::size_t r = out.size();
  const auto own = row_major_strides(t);
  std::vector<std::size_t> st(r, 0);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::size_t oi = r - t.size() + i;
    if (t[i] == out[oi]) {
      st[oi] = own[i];
    } else if (t[i] == 1) {
      st[oi] = 0;
    } else {
      throw std::invalid_argument("shape " + shape_str(t) + " does not broadcast to " +
                                  shape_str(out));
    }
  }
  return st;
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target);
  // common case: target matches the trailing axes of g (bias-style gradient)
  bool suffix = target.size() <= g.rank();
  for (std::size_t i = 0; suffix && i < target.size(); ++i) {
    suffix = target[target.size() - 1 - i] == g.dim(g.rank() - 1 - i);
  }
  if (suffix && out.numel() > 0) {
    const std::size_t inner = out.numel();
    const double* src = g.data();
    double* dst = out.data();
    for (std::size_t o = 0; o < g.numel() / inner; ++o) {
      const double* row = src + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
    }
    return out;
  }
  const auto st = broadcast_strides(target, g.shape());
  const std::size_t r = g.rank();
  std::vector<std::size_t> idx(r, 0);
  const double* src = g.data();
  double* dst = out.data();
  for (std::size_t flat = 0; flat < g.numel(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * st[i];
    dst[off] += src[flat];
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < g.dim(i)) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace tabssm
