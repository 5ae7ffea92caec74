#include "blc/blc.h"

#include "blc/bilinear.hpp"
#include "blc/error.hpp"
#include "blc/persistence.hpp"
#include "blc/runs.hpp"
#include "blc/tensor.hpp"

#include <cstring>
#include <exception>
#include <new>
#include <string>
#include <vector>

struct blc_tensor {
  blc::Tensor t;
};

struct blc_layer {
  blc::BilinearLayer layer;
};

namespace {

thread_local std::string last_error;

blc_status status_of(blc::ErrorKind k) {
  using blc::ErrorKind;
  switch (k) {
    case ErrorKind::Dimension: return BLC_ERR_DIMENSION;
    case ErrorKind::Argument: return BLC_ERR_ARGUMENT;
    case ErrorKind::Capacity: return BLC_ERR_CAPACITY;
    case ErrorKind::Convergence: return BLC_ERR_CONVERGENCE;
    case ErrorKind::Training: return BLC_ERR_TRAINING;
    case ErrorKind::Format: return BLC_ERR_FORMAT;
    case ErrorKind::Length: return BLC_ERR_LENGTH;
    case ErrorKind::Version: return BLC_ERR_VERSION;
    case ErrorKind::Integrity: return BLC_ERR_INTEGRITY;
    case ErrorKind::Consistency: return BLC_ERR_CONSISTENCY;
    case ErrorKind::Precondition: return BLC_ERR_PRECONDITION;
    case ErrorKind::Config: return BLC_ERR_CONFIG;
    case ErrorKind::Io: return BLC_ERR_IO;
  }
  return BLC_ERR_INTERNAL;
}

template <class F>
blc_status guarded(F&& f) {
  try {
    last_error.clear();
    f();
    return BLC_OK;
  } catch (const blc::Error& e) {
    last_error = e.what();
    return status_of(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    last_error = e.what();
    return BLC_ERR_IO;
  } catch (const nlohmann::json::exception& e) {
    last_error = e.what();
    return BLC_ERR_CONFIG;
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return BLC_ERR_CAPACITY;
  } catch (const std::exception& e) {
    last_error = e.what();
    return BLC_ERR_INTERNAL;
  } catch (...) {
    last_error = "unknown exception";
    return BLC_ERR_INTERNAL;
  }
}

blc_status null_arg(const char* what) {
  last_error = std::string(what) + " is NULL";
  return BLC_ERR_ARGUMENT;
}

blc::DType to_dtype(blc_dtype d) {
  if (d == BLC_F32) return blc::DType::F32;
  if (d == BLC_F64) return blc::DType::F64;
  blc::fail(blc::ErrorKind::Argument, "unknown dtype");
}

}  // namespace

extern "C" {

const char* blc_version(void) { return blc::kToolVersion; }

const char* blc_status_name(blc_status s) {
  switch (s) {
    case BLC_OK: return "ok";
    case BLC_ERR_DIMENSION: return "dimension error";
    case BLC_ERR_ARGUMENT: return "argument error";
    case BLC_ERR_CAPACITY: return "capacity error";
    case BLC_ERR_CONVERGENCE: return "convergence error";
    case BLC_ERR_TRAINING: return "training error";
    case BLC_ERR_FORMAT: return "format error";
    case BLC_ERR_LENGTH: return "length error";
    case BLC_ERR_VERSION: return "version error";
    case BLC_ERR_INTEGRITY: return "integrity error";
    case BLC_ERR_CONSISTENCY: return "consistency error";
    case BLC_ERR_PRECONDITION: return "precondition error";
    case BLC_ERR_CONFIG: return "config error";
    case BLC_ERR_IO: return "i/o error";
    case BLC_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* blc_last_error(void) { return last_error.c_str(); }

blc_status blc_tensor_create(const size_t* shape, size_t order, const double* data, blc_dtype dtype,
                             blc_tensor** out) {
  if (!shape || !out) return null_arg("shape/out");
  return guarded([&] {
    std::vector<std::size_t> s(shape, shape + order);
    blc::Tensor t(s, to_dtype(dtype));
    if (data) t = blc::Tensor(s, std::vector<double>(data, data + t.size()), to_dtype(dtype));
    *out = new blc_tensor{std::move(t)};
  });
}

void blc_tensor_free(blc_tensor* t) { delete t; }

size_t blc_tensor_order(const blc_tensor* t) { return t ? t->t.order() : 0; }

size_t blc_tensor_extent(const blc_tensor* t, size_t axis) {
  return t && axis < t->t.order() ? t->t.extent(axis) : 0;
}

size_t blc_tensor_size(const blc_tensor* t) { return t ? t->t.size() : 0; }

blc_dtype blc_tensor_dtype(const blc_tensor* t) {
  return t && t->t.dtype() == blc::DType::F32 ? BLC_F32 : BLC_F64;
}

blc_status blc_tensor_copy_data(const blc_tensor* t, double* out, size_t n) {
  if (!t || !out) return null_arg("tensor/out");
  const auto d = t->t.data();
  std::memcpy(out, d.data(), std::min(n, d.size()) * sizeof(double));
  return BLC_OK;
}

blc_status blc_tensor_inner(const blc_tensor* u, const blc_tensor* v, size_t axis_u, size_t axis_v,
                            blc_tensor** out) {
  if (!u || !v || !out) return null_arg("operand/out");
  return guarded([&] { *out = new blc_tensor{blc::tensor_inner(u->t, v->t, axis_u, axis_v)}; });
}

blc_status blc_mode_unfold(const blc_tensor* t, size_t axis, blc_tensor** out) {
  if (!t || !out) return null_arg("tensor/out");
  return guarded([&] { *out = new blc_tensor{blc::mode_unfold(t->t, axis)}; });
}

blc_status blc_hosvd_error(const blc_tensor* t, const size_t* ranks, size_t n_ranks, double* err) {
  if (!t || !err) return null_arg("tensor/out");
  return guarded([&] {
    std::span<const std::size_t> r;
    if (ranks) r = std::span<const std::size_t>(ranks, n_ranks);
    *err = blc::max_abs_diff(blc::hosvd_reconstruct(blc::hosvd(t->t, r)), t->t);
  });
}

blc_status blc_tensor_read(const char* path, blc_tensor** out) {
  if (!path || !out) return null_arg("path/out");
  return guarded([&] { *out = new blc_tensor{blc::read_tensor(path)}; });
}

blc_status blc_tensor_write(const blc_tensor* t, const char* path) {
  if (!t || !path) return null_arg("tensor/path");
  return guarded([&] { blc::write_tensor(t->t, path); });
}

blc_status blc_layer_create(const blc_tensor* w1, const blc_tensor* w2, int one_plus, blc_layer** out) {
  if (!w1 || !w2 || !out) return null_arg("weights/out");
  return guarded([&] {
    *out = new blc_layer{blc::make_layer(w1->t.to_matrix(), w2->t.to_matrix(), one_plus != 0)};
  });
}

void blc_layer_free(blc_layer* layer) { delete layer; }

blc_status blc_layer_forward(const blc_layer* layer, const double* x, size_t n, double* y, size_t m) {
  if (!layer || !x || !y) return null_arg("layer/x/y");
  return guarded([&] {
    if (m != layer->layer.out_dim())
      blc::fail(blc::ErrorKind::Dimension, "output buffer length " + std::to_string(m) +
                                               " does not match layer output " +
                                               std::to_string(layer->layer.out_dim()));
    const blc::Vector out = blc::forward(layer->layer, Eigen::Map<const blc::Vector>(x, n));
    std::memcpy(y, out.data(), m * sizeof(double));
  });
}

blc_status blc_layer_build_b(const blc_layer* layer, blc_tensor** out) {
  if (!layer || !out) return null_arg("layer/out");
  return guarded([&] { *out = new blc_tensor{blc::build_b(layer->layer).tensor()}; });
}

blc_status blc_build_z(size_t m, blc_tensor** out) {
  if (!out) return null_arg("out");
  return guarded([&] { *out = new blc_tensor{blc::build_z(m)}; });
}

blc_status blc_run(const char* command, const char* request_json, char** report, int* verdict) {
  if (!command || !request_json || !report) return null_arg("command/request/report");
  return guarded([&] {
    nlohmann::json request;
    try {
      request = nlohmann::json::parse(request_json);
    } catch (const nlohmann::json::parse_error& e) {
      blc::fail(blc::ErrorKind::Config, std::string("request is not valid JSON: ") + e.what());
    }
    const blc::RunOutcome o = blc::run_command(command, request);
    const std::string text = o.report.dump(2);
    char* buf = static_cast<char*>(std::malloc(text.size() + 1));
    if (!buf) throw std::bad_alloc();
    std::memcpy(buf, text.c_str(), text.size() + 1);
    *report = buf;
    if (verdict) *verdict = o.verdict;
  });
}

void blc_string_free(char* s) { std::free(s); }

}  // extern "C"
