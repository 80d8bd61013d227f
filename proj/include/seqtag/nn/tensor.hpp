#pragma once

#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "seqtag/error.hpp"
#include "seqtag/random.hpp"

namespace seqtag::nn {

/// Dense row-major matrix of doubles. Vectors are 1 x n.
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix row_vector(std::vector<double> v) {
    Matrix m;
    m.rows = 1;
    m.cols = v.size();
    m.data = std::move(v);
    return m;
  }

  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  double& operator()(size_t r, size_t c) { return data[r * cols + c]; }
  double operator()(size_t r, size_t c) const { return data[r * cols + c]; }
  double* row_ptr(size_t r) { return data.data() + r * cols; }
  const double* row_ptr(size_t r) const { return data.data() + r * cols; }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// A named trainable tensor with its accumulated gradient. Embedding-style
/// parameters record which rows received gradient so updates can skip the rest.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool sparse_rows = false;
  std::set<size_t> touched;

  void zero_grad() {
    if (sparse_rows) {
      for (size_t r : touched) std::fill(grad.row_ptr(r), grad.row_ptr(r) + grad.cols, 0.0);
      touched.clear();
    } else {
      grad.zero();
    }
  }

  double grad_sq_norm() const {
    double s = 0;
    if (sparse_rows) {
      for (size_t r : touched)
        for (size_t c = 0; c < grad.cols; ++c) s += grad(r, c) * grad(r, c);
    } else {
      for (double g : grad.data) s += g * g;
    }
    return s;
  }

  void sgd_step(double lr, double scale) {
    if (sparse_rows) {
      for (size_t r : touched)
        for (size_t c = 0; c < grad.cols; ++c) value(r, c) -= lr * scale * grad(r, c);
    } else {
      for (size_t i = 0; i < value.size(); ++i) value.data[i] -= lr * scale * grad.data[i];
    }
  }
};

/// Parameters in declaration order, with stable addresses.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& o) { *this = o; }
  ParameterSet& operator=(const ParameterSet& o) {
    if (this == &o) return *this;
    params_.clear();
    for (const auto& p : o.params_) params_.push_back(std::make_unique<Parameter>(*p));
    return *this;
  }
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Parameter& add(const std::string& name, size_t rows, size_t cols, bool sparse_rows = false) {
    for (const auto& p : params_)
      if (p->name == name) throw Error(ErrorKind::InvalidConfig, "parameter " + name + " declared twice");
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = Matrix(rows, cols);
    p->grad = Matrix(rows, cols);
    p->sparse_rows = sparse_rows;
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter& get(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return *p;
    throw Error(ErrorKind::InvalidConfig, "no parameter named " + name);
  }
  const Parameter& get(const std::string& name) const { return const_cast<ParameterSet*>(this)->get(name); }
  bool contains(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return true;
    return false;
  }

  size_t size() const { return params_.size(); }
  Parameter& operator[](size_t i) { return *params_[i]; }
  const Parameter& operator[](size_t i) const { return *params_[i]; }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_) s += p->grad_sq_norm();
    return std::sqrt(s);
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

inline void init_uniform(Parameter& p, Rng& rng, double bound) {
  for (double& v : p.value.data) v = rng.uniform(-bound, bound);
}

/// Glorot-uniform fill.
inline void init_glorot(Parameter& p, Rng& rng, size_t fan_in, size_t fan_out) {
  init_uniform(p, rng, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

}  // namespace seqtag::nn
