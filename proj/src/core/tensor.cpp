#include "blc/tensor.hpp"

#include "blc/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace blc {

namespace {

std::size_t product(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

void check_shape(std::span<const std::size_t> shape) {
  if (shape.empty() || shape.size() > kMaxOrder) {
    std::ostringstream os;
    os << "tensor order must be 1.." << kMaxOrder << ", got " << shape.size();
    fail(ErrorKind::Argument, os.str());
  }
  for (std::size_t e : shape)
    if (e == 0) fail(ErrorKind::Argument, "tensor extents must be positive");
}

double round_to(DType dtype, double v) {
  return dtype == DType::F32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void round_all(std::vector<double>& data, DType dtype) {
  if (dtype == DType::F32)
    for (double& v : data) v = round_to(dtype, v);
}

}  // namespace

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Argument: return "argument";
    case ErrorKind::Capacity: return "capacity";
    case ErrorKind::Convergence: return "convergence";
    case ErrorKind::Training: return "training";
    case ErrorKind::Format: return "format";
    case ErrorKind::Length: return "length";
    case ErrorKind::Version: return "version";
    case ErrorKind::Integrity: return "integrity";
    case ErrorKind::Consistency: return "consistency";
    case ErrorKind::Precondition: return "precondition";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

// Internal: allows order 0 and skips validation of already-valid shapes.
Tensor make_result(std::vector<std::size_t> shape, DType dtype) {
  Tensor t;
  t.data_.assign(product(shape), 0.0);
  t.shape_ = std::move(shape);
  t.dtype_ = dtype;
  return t;
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
  check_shape(shape_);
  data_.assign(product(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data, DType dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  check_shape(shape_);
  if (data_.size() != product(shape_)) {
    std::ostringstream os;
    os << "data length " << data_.size() << " does not match shape product "
       << product(shape_);
    fail(ErrorKind::Dimension, os.str());
  }
  round_all(data_, dtype_);
}

Tensor Tensor::scalar(double value, DType dtype) {
  Tensor t = make_result({}, dtype);
  t.data_[0] = round_to(dtype, value);
  return t;
}

Tensor Tensor::from_matrix(const Matrix& m, DType dtype) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, dtype);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t.data_[i * m.cols() + j] = round_to(dtype, m(i, j));
  return t;
}

Tensor Tensor::from_vector(const Vector& v, DType dtype) {
  std::vector<double> data(v.data(), v.data() + v.size());
  return Tensor({static_cast<std::size_t>(v.size())}, std::move(data), dtype);
}

Matrix Tensor::to_matrix() const {
  if (order() != 2) fail(ErrorKind::Dimension, "to_matrix requires an order-2 tensor");
  Matrix m(shape_[0], shape_[1]);
  for (std::size_t i = 0; i < shape_[0]; ++i)
    for (std::size_t j = 0; j < shape_[1]; ++j) m(i, j) = data_[i * shape_[1] + j];
  return m;
}

Vector Tensor::to_vector() const {
  if (order() != 1) fail(ErrorKind::Dimension, "to_vector requires an order-1 tensor");
  return Eigen::Map<const Vector>(data_.data(), static_cast<Eigen::Index>(data_.size()));
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= order()) fail(ErrorKind::Argument, "axis out of range");
  return shape_[axis];
}

std::vector<std::size_t> Tensor::strides() const {
  std::vector<std::size_t> s(order(), 1);
  for (std::size_t a = order(); a-- > 1;) s[a - 1] = s[a] * shape_[a];
  return s;
}

std::size_t Tensor::offset(std::span<const std::size_t> index) const {
  if (index.size() != order()) fail(ErrorKind::Argument, "index arity does not match tensor order");
  std::size_t off = 0;
  for (std::size_t a = 0; a < order(); ++a) {
    if (index[a] >= shape_[a]) fail(ErrorKind::Argument, "index out of range");
    off = off * shape_[a] + index[a];
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) {
  return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
}

Tensor Tensor::cast(DType dtype) const {
  Tensor t = *this;
  t.dtype_ = dtype;
  round_all(t.data_, dtype);
  return t;
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.dtype_ == b.dtype_ && a.shape_ == b.shape_ && a.data_ == b.data_;
}

DType promote(DType a, DType b) noexcept {
  return (a == DType::F32 && b == DType::F32) ? DType::F32 : DType::F64;
}

namespace {

// Offsets of every multi-index over the axes of `t` other than `skip`,
// enumerated row-major over those axes in ascending axis order.
std::vector<std::size_t> surviving_offsets(const Tensor& t, std::size_t skip,
                                           std::vector<std::size_t>& extents) {
  const auto strides = t.strides();
  std::vector<std::size_t> ext, str;
  for (std::size_t a = 0; a < t.order(); ++a) {
    if (a == skip) continue;
    ext.push_back(t.shape()[a]);
    str.push_back(strides[a]);
  }
  extents = ext;
  std::vector<std::size_t> offsets(product(ext));
  std::vector<std::size_t> idx(ext.size(), 0);
  for (std::size_t n = 0; n < offsets.size(); ++n) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < ext.size(); ++a) off += idx[a] * str[a];
    offsets[n] = off;
    for (std::size_t a = ext.size(); a-- > 0;) {
      if (++idx[a] < ext[a]) break;
      idx[a] = 0;
    }
  }
  return offsets;
}

}  // namespace

Tensor tensor_inner(const Tensor& u, const Tensor& v, std::size_t axis_u, std::size_t axis_v) {
  if (u.order() == 0 || v.order() == 0) fail(ErrorKind::Argument, "cannot contract a scalar");
  if (axis_u >= u.order() || axis_v >= v.order()) {
    std::ostringstream os;
    os << "contraction axes (" << axis_u << ", " << axis_v << ") out of range for orders ("
       << u.order() << ", " << v.order() << ")";
    fail(ErrorKind::Argument, os.str());
  }
  const std::size_t len = u.shape()[axis_u];
  if (len != v.shape()[axis_v]) {
    std::ostringstream os;
    os << "contracted extents differ: left axis " << axis_u << " has extent " << len
       << ", right axis " << axis_v << " has extent " << v.shape()[axis_v];
    fail(ErrorKind::Dimension, os.str());
  }
  if (u.order() + v.order() - 2 > kMaxOrder)
    fail(ErrorKind::Argument, "contraction result would exceed the maximum tensor order");

  std::vector<std::size_t> ext_u, ext_v;
  const auto off_u = surviving_offsets(u, axis_u, ext_u);
  const auto off_v = surviving_offsets(v, axis_v, ext_v);
  const std::size_t stride_u = u.strides()[axis_u];
  const std::size_t stride_v = v.strides()[axis_v];

  std::vector<std::size_t> shape = ext_u;
  shape.insert(shape.end(), ext_v.begin(), ext_v.end());
  const DType dtype = promote(u.dtype(), v.dtype());
  Tensor t = make_result(std::move(shape), dtype);

  const double* pu = u.data().data();
  const double* pv = v.data().data();
  double* pt = t.data().data();
  const std::size_t nv = off_v.size();
  for (std::size_t a = 0; a < off_u.size(); ++a) {
    for (std::size_t b = 0; b < nv; ++b) {
      double acc = 0.0;
      const double* ru = pu + off_u[a];
      const double* rv = pv + off_v[b];
      for (std::size_t beta = 0; beta < len; ++beta)
        acc += ru[beta * stride_u] * rv[beta * stride_v];
      pt[a * nv + b] = acc;
    }
  }
  if (dtype == DType::F32) return t.cast(DType::F32);
  return t;
}

Tensor mode_unfold(const Tensor& t, std::size_t axis) {
  if (t.order() < 2) fail(ErrorKind::Argument, "mode_unfold requires order >= 2");
  if (axis >= t.order()) fail(ErrorKind::Argument, "unfold axis out of range");
  std::vector<std::size_t> ext;
  const auto cols = surviving_offsets(t, axis, ext);
  const std::size_t rows = t.shape()[axis];
  const std::size_t stride = t.strides()[axis];
  Tensor out({rows, cols.size()}, t.dtype());
  auto dst = out.data();
  auto src = t.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols.size(); ++c)
      dst[r * cols.size() + c] = src[r * stride + cols[c]];
  return out;
}

Tensor permute_axes(const Tensor& t, std::span<const std::size_t> perm) {
  if (perm.size() != t.order()) fail(ErrorKind::Argument, "permutation length must equal tensor order");
  std::vector<bool> seen(t.order(), false);
  for (std::size_t p : perm) {
    if (p >= t.order() || seen[p]) fail(ErrorKind::Argument, "not a permutation of the tensor axes");
    seen[p] = true;
  }
  if (t.order() == 0) return t;
  std::vector<std::size_t> shape(t.order());
  for (std::size_t a = 0; a < t.order(); ++a) shape[a] = t.shape()[perm[a]];
  Tensor out(shape, t.dtype());
  const auto in_strides = t.strides();
  std::vector<std::size_t> idx(t.order(), 0);
  auto dst = out.data();
  auto src = t.data();
  for (std::size_t n = 0; n < dst.size(); ++n) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < t.order(); ++a) off += idx[a] * in_strides[perm[a]];
    dst[n] = src[off];
    for (std::size_t a = t.order(); a-- > 0;) {
      if (++idx[a] < shape[a]) break;
      idx[a] = 0;
    }
  }
  return out;
}

Tensor permute_axes(const Tensor& t, std::initializer_list<std::size_t> perm) {
  return permute_axes(t, std::span<const std::size_t>(perm.begin(), perm.size()));
}

Tensor mode_product(const Tensor& t, const Matrix& m, std::size_t axis) {
  if (axis >= t.order()) fail(ErrorKind::Argument, "mode_product axis out of range");
  if (static_cast<std::size_t>(m.cols()) != t.shape()[axis]) {
    std::ostringstream os;
    os << "mode_product: matrix has " << m.cols() << " columns, axis " << axis << " has extent "
       << t.shape()[axis];
    fail(ErrorKind::Dimension, os.str());
  }
  // (m . t) contracts m's column axis with t's axis, which puts the new axis
  // first; rotate it back into place.
  Tensor r = tensor_inner(Tensor::from_matrix(m), t, 1, axis);
  std::vector<std::size_t> perm(t.order());
  for (std::size_t a = 0, src = 1; a < t.order(); ++a) perm[a] = (a == axis) ? 0 : src++;
  r = permute_axes(r, perm);
  return t.dtype() == DType::F32 ? r.cast(DType::F32) : r;
}

Vector canonicalize_column_signs(Matrix& m) {
  Vector signs = Vector::Ones(m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < m.rows(); ++r)
      if (std::abs(m(r, c)) > std::abs(m(best, c))) best = r;
    if (m(best, c) < 0) {
      m.col(c) *= -1.0;
      signs(c) = -1.0;
    }
  }
  return signs;
}

std::pair<Matrix, Vector> left_singular_vectors(const Matrix& a) {
  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeFullU);
  Matrix u = svd.matrixU();
  Vector s = Vector::Zero(a.rows());
  s.head(svd.singularValues().size()) = svd.singularValues();
  canonicalize_column_signs(u);
  return {u, s};
}

Hosvd hosvd(const Tensor& t, std::span<const std::size_t> ranks) {
  if (t.order() < 2 || t.order() > kMaxOrder) fail(ErrorKind::Argument, "hosvd requires order 2..4");
  if (!t.all_finite()) fail(ErrorKind::Argument, "hosvd input contains non-finite values");
  if (!ranks.empty() && ranks.size() != t.order())
    fail(ErrorKind::Argument, "hosvd needs one rank per mode");

  Hosvd h;
  Tensor core = t;
  for (std::size_t n = 0; n < t.order(); ++n) {
    auto [u, s] = left_singular_vectors(mode_unfold(t, n).to_matrix());
    std::size_t r = t.shape()[n];
    if (!ranks.empty()) {
      if (ranks[n] < 1 || ranks[n] > r) fail(ErrorKind::Argument, "hosvd rank out of range");
      r = ranks[n];
    }
    h.factors.push_back(u.leftCols(r));
    h.singular_values.push_back(s);
  }
  for (std::size_t n = 0; n < t.order(); ++n)
    core = mode_product(core, h.factors[n].transpose(), n);
  h.core = std::move(core);
  return h;
}

Tensor hosvd_reconstruct(const Hosvd& h) {
  Tensor t = h.core;
  for (std::size_t n = 0; n < h.factors.size(); ++n) t = mode_product(t, h.factors[n], n);
  return t;
}

double max_abs(const Tensor& t) noexcept {
  double m = 0.0;
  for (double v : t.data()) {
    if (std::isnan(v)) return v;
    m = std::max(m, std::abs(v));
  }
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!std::equal(a.shape().begin(), a.shape().end(), b.shape().begin(), b.shape().end()))
    fail(ErrorKind::Dimension, "max_abs_diff: shapes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a.data()[i] - b.data()[i]);
    if (std::isnan(d)) return d;
    m = std::max(m, d);
  }
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrorKind::Dimension, "max_abs_diff: shapes differ");
  double m = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double d = std::abs(a.data()[i] - b.data()[i]);
    if (std::isnan(d)) return d;
    m = std::max(m, d);
  }
  return m;
}

}  // namespace blc
