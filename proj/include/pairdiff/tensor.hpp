#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pairdiff {

/// NHWC extent of a dense tensor.
struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t size() const { return std::size_t(n) * std::size_t(h) * std::size_t(w) * std::size_t(c); }
  int pixels() const { return n * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(h) + "," + std::to_string(w) + "," +
           std::to_string(c) + ")";
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense NHWC tensor backed by an Eigen vector.
///
/// The channel axis is innermost, so `mat()` views the data as a row-major
/// (pixels x channels) matrix. Convolutions and channel-wise linear maps are
/// GEMMs on that view.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), data_(Vector::Zero(Eigen::Index(shape.size()))) {}
  Tensor(Shape shape, S fill) : shape_(shape), data_(Vector::Constant(Eigen::Index(shape.size()), fill)) {}
  Tensor(Shape shape, Vector data) : shape_(shape), data_(std::move(data)) {
    if (std::size_t(data_.size()) != shape_.size()) {
      throw ShapeError("tensor data size does not match shape " + shape_.str());
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor constant(Shape shape, S value) { return Tensor(shape, value); }
  static Tensor scalar(S value) { return Tensor(Shape{1, 1, 1, 1}, value); }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  int c() const { return shape_.c; }
  std::size_t size() const { return shape_.size(); }
  bool empty() const { return shape_.size() == 0; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }
  auto array() { return data_.array(); }
  auto array() const { return data_.array(); }

  MatrixMap mat() { return MatrixMap(data_.data(), shape_.pixels(), shape_.c); }
  ConstMatrixMap mat() const { return ConstMatrixMap(data_.data(), shape_.pixels(), shape_.c); }

  std::size_t index(int n, int y, int x, int c) const {
    return ((std::size_t(n) * shape_.h + y) * shape_.w + x) * shape_.c + c;
  }
  S& operator()(int n, int y, int x, int c) { return data_[Eigen::Index(index(n, y, x, c))]; }
  S operator()(int n, int y, int x, int c) const { return data_[Eigen::Index(index(n, y, x, c))]; }

  S item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_.str());
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape.size() != size()) throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(shape, data_);
  }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, data_.template cast<T>());
  }

  /// Contiguous sub-batch [begin, begin + count).
  Tensor batch(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > shape_.n) throw ShapeError("batch slice out of range");
    Shape s = shape_;
    s.n = count;
    const std::size_t stride = std::size_t(shape_.h) * shape_.w * shape_.c;
    return Tensor(s, data_.segment(Eigen::Index(begin * stride), Eigen::Index(count * stride)));
  }

  /// Channel range [begin, begin + count) of every pixel.
  Tensor channels(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > shape_.c) throw ShapeError("channel slice out of range");
    Tensor out(Shape{shape_.n, shape_.h, shape_.w, count});
    out.mat() = mat().middleCols(begin, count);
    return out;
  }

  static Tensor stack(const std::vector<Tensor>& items) {
    if (items.empty()) throw ShapeError("stack of zero tensors");
    Shape s = items.front().shape();
    int total = 0;
    for (const auto& t : items) {
      if (t.h() != s.h || t.w() != s.w || t.c() != s.c) throw ShapeError("stack shape mismatch");
      total += t.n();
    }
    s.n = total;
    Tensor out(s);
    Eigen::Index offset = 0;
    for (const auto& t : items) {
      out.vec().segment(offset, t.vec().size()) = t.vec();
      offset += t.vec().size();
    }
    return out;
  }

  static Tensor concat_channels(const std::vector<Tensor>& items) {
    if (items.empty()) throw ShapeError("concat of zero tensors");
    Shape s = items.front().shape();
    int total = 0;
    for (const auto& t : items) {
      if (t.n() != s.n || t.h() != s.h || t.w() != s.w) throw ShapeError("concat spatial mismatch");
      total += t.c();
    }
    s.c = total;
    Tensor out(s);
    int offset = 0;
    for (const auto& t : items) {
      out.mat().middleCols(offset, t.c()) = t.mat();
      offset += t.c();
    }
    return out;
  }

 private:
  Shape shape_;
  Vector data_;
};

}  // namespace pairdiff
