#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dba/errors.hpp"
#include "dba/problem.hpp"

namespace dba {

/// A Structure-of-Arrays batch of dual numbers: one value lane of length n
/// plus d gradient lanes of length n each, stored lane-major so that
/// grads[j*n + i] is the derivative of value i with respect to local
/// parameter j. A batch with d = 0 behaves as a constant (zero gradient of
/// whatever dimension its operand carries).
template <typename Scalar>
class JetVector {
 public:
  JetVector() = default;
  JetVector(std::int64_t n, int d) { resize(n, d); }

  static JetVector constants(std::vector<Scalar> values) {
    JetVector jv;
    jv.n_ = static_cast<std::int64_t>(values.size());
    jv.d_ = 0;
    jv.values_ = std::move(values);
    return jv;
  }

  void resize(std::int64_t n, int d) {
    n_ = n;
    d_ = d;
    values_.assign(static_cast<std::size_t>(n), Scalar(0));
    grads_.assign(static_cast<std::size_t>(n) * d, Scalar(0));
  }

  // Resize without the clearing pass; every element is written by the kernels.
  void resize_uninitialized(std::int64_t n, int d) {
    n_ = n;
    d_ = d;
    values_.resize(static_cast<std::size_t>(n));
    grads_.resize(static_cast<std::size_t>(n) * d);
  }

  std::int64_t size() const { return n_; }
  int grad_dim() const { return d_; }

  std::span<Scalar> values() { return {values_.data(), values_.size()}; }
  std::span<const Scalar> values() const {
    return {values_.data(), values_.size()};
  }
  /// Gradient lane j as one contiguous region (the SoA layout contract).
  std::span<Scalar> grad_lane(int j) {
    return {grads_.data() + static_cast<std::size_t>(j) * n_,
            static_cast<std::size_t>(n_)};
  }
  std::span<const Scalar> grad_lane(int j) const {
    return {grads_.data() + static_cast<std::size_t>(j) * n_,
            static_cast<std::size_t>(n_)};
  }

  Scalar value(std::int64_t i) const { return values_[i]; }
  Scalar grad(std::int64_t i, int j) const {
    return grads_[static_cast<std::size_t>(j) * n_ + i];
  }

  /// Marks lane j as the seed direction: d(value_i)/d(param_j) = 1 for all i.
  void seed(int lane) {
    auto g = grad_lane(lane);
    std::fill(g.begin(), g.end(), Scalar(1));
  }

 private:
  std::int64_t n_ = 0;
  int d_ = 0;
  std::vector<Scalar> values_;
  std::vector<Scalar> grads_;
};

namespace jv {

namespace detail {

template <typename Scalar>
inline void check_match(const JetVector<Scalar>& a, const JetVector<Scalar>& b) {
  if (a.size() != b.size())
    throw ShapeError("jet batch length mismatch: " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  if (a.grad_dim() != b.grad_dim() && a.grad_dim() != 0 && b.grad_dim() != 0)
    throw ShapeError("jet gradient dimension mismatch: " +
                     std::to_string(a.grad_dim()) + " vs " +
                     std::to_string(b.grad_dim()));
}

template <typename Scalar>
inline int result_dim(const JetVector<Scalar>& a, const JetVector<Scalar>& b) {
  return a.grad_dim() != 0 ? a.grad_dim() : b.grad_dim();
}

}  // namespace detail

// Elementwise kernels. Every kernel materializes its full output; `out` may
// alias `a` (and `b` except where noted). Gradient lanes are processed before
// the value lane whenever the gradient formulas read operand values, which
// keeps aliased calls safe.

template <typename Scalar>
void add(const JetVector<Scalar>& a, const JetVector<Scalar>& b,
         JetVector<Scalar>& out) {
  detail::check_match(a, b);
  const std::int64_t n = a.size();
  const int d = detail::result_dim(a, b);
  out.resize_uninitialized(n, d);
  for (int j = 0; j < d; ++j) {
    auto go = out.grad_lane(j);
    if (a.grad_dim() == 0) {
      auto gb = b.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = gb[i];
    } else if (b.grad_dim() == 0) {
      auto ga = a.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = ga[i];
    } else {
      auto ga = a.grad_lane(j);
      auto gb = b.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = ga[i] + gb[i];
    }
  }
  auto va = a.values();
  auto vb = b.values();
  auto vo = out.values();
  for (std::int64_t i = 0; i < n; ++i) vo[i] = va[i] + vb[i];
}

template <typename Scalar>
void sub(const JetVector<Scalar>& a, const JetVector<Scalar>& b,
         JetVector<Scalar>& out) {
  detail::check_match(a, b);
  const std::int64_t n = a.size();
  const int d = detail::result_dim(a, b);
  out.resize_uninitialized(n, d);
  for (int j = 0; j < d; ++j) {
    auto go = out.grad_lane(j);
    if (a.grad_dim() == 0) {
      auto gb = b.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = -gb[i];
    } else if (b.grad_dim() == 0) {
      auto ga = a.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = ga[i];
    } else {
      auto ga = a.grad_lane(j);
      auto gb = b.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = ga[i] - gb[i];
    }
  }
  auto va = a.values();
  auto vb = b.values();
  auto vo = out.values();
  for (std::int64_t i = 0; i < n; ++i) vo[i] = va[i] - vb[i];
}

// Product rule; gradient lanes read both operands' values, so they are
// written before the value lane.
template <typename Scalar>
void mul(const JetVector<Scalar>& a, const JetVector<Scalar>& b,
         JetVector<Scalar>& out) {
  detail::check_match(a, b);
  const std::int64_t n = a.size();
  const int d = detail::result_dim(a, b);
  out.resize_uninitialized(n, d);
  auto va = a.values();
  auto vb = b.values();
  for (int j = 0; j < d; ++j) {
    auto go = out.grad_lane(j);
    if (a.grad_dim() == 0) {
      auto gb = b.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = va[i] * gb[i];
    } else if (b.grad_dim() == 0) {
      auto ga = a.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = ga[i] * vb[i];
    } else {
      auto ga = a.grad_lane(j);
      auto gb = b.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i)
        go[i] = ga[i] * vb[i] + va[i] * gb[i];
    }
  }
  auto vo = out.values();
  for (std::int64_t i = 0; i < n; ++i) vo[i] = va[i] * vb[i];
}

// Quotient rule, written as g = (ga - q*gb)/vb with q = va/vb. The quotient
// is staged in the output value lane first, so `out` must not alias `b`.
// Throws on a zero divisor, reporting the first offending element.
template <typename Scalar>
void div(const JetVector<Scalar>& a, const JetVector<Scalar>& b,
         JetVector<Scalar>& out) {
  detail::check_match(a, b);
  if (&out == &b) throw ShapeError("div output must not alias the divisor");
  const std::int64_t n = a.size();
  const int d = detail::result_dim(a, b);
  out.resize_uninitialized(n, d);
  auto va = a.values();
  auto vb = b.values();
  auto vo = out.values();
  for (std::int64_t i = 0; i < n; ++i) {
    if (vb[i] == Scalar(0))
      throw InvalidArgumentError("jet division by zero at element " +
                                 std::to_string(i));
    vo[i] = va[i] / vb[i];
  }
  for (int j = 0; j < d; ++j) {
    auto go = out.grad_lane(j);
    if (a.grad_dim() == 0) {
      auto gb = b.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = -vo[i] * gb[i] / vb[i];
    } else if (b.grad_dim() == 0) {
      auto ga = a.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i) go[i] = ga[i] / vb[i];
    } else {
      auto ga = a.grad_lane(j);
      auto gb = b.grad_lane(j);
      for (std::int64_t i = 0; i < n; ++i)
        go[i] = (ga[i] - vo[i] * gb[i]) / vb[i];
    }
  }
}

template <typename Scalar>
void add_scalar(const JetVector<Scalar>& a, Scalar s, JetVector<Scalar>& out) {
  const std::int64_t n = a.size();
  out.resize_uninitialized(n, a.grad_dim());
  for (int j = 0; j < a.grad_dim(); ++j) {
    auto ga = a.grad_lane(j);
    auto go = out.grad_lane(j);
    for (std::int64_t i = 0; i < n; ++i) go[i] = ga[i];
  }
  auto va = a.values();
  auto vo = out.values();
  for (std::int64_t i = 0; i < n; ++i) vo[i] = va[i] + s;
}

template <typename Scalar>
void mul_scalar(const JetVector<Scalar>& a, Scalar s, JetVector<Scalar>& out) {
  const std::int64_t n = a.size();
  out.resize_uninitialized(n, a.grad_dim());
  for (int j = 0; j < a.grad_dim(); ++j) {
    auto ga = a.grad_lane(j);
    auto go = out.grad_lane(j);
    for (std::int64_t i = 0; i < n; ++i) go[i] = ga[i] * s;
  }
  auto va = a.values();
  auto vo = out.values();
  for (std::int64_t i = 0; i < n; ++i) vo[i] = va[i] * s;
}

template <typename Scalar>
void neg(const JetVector<Scalar>& a, JetVector<Scalar>& out) {
  mul_scalar(a, Scalar(-1), out);
}

/// Chain rule for the square root: g / (2 sqrt(v)). Values must be positive.
template <typename Scalar>
void sqrt(const JetVector<Scalar>& a, JetVector<Scalar>& out) {
  const std::int64_t n = a.size();
  out.resize_uninitialized(n, a.grad_dim());
  auto va = a.values();
  auto vo = out.values();
  for (std::int64_t i = 0; i < n; ++i) {
    if (!(va[i] > Scalar(0)))
      throw InvalidArgumentError("jet sqrt of non-positive value at element " +
                                 std::to_string(i));
    vo[i] = std::sqrt(va[i]);
  }
  for (int j = 0; j < a.grad_dim(); ++j) {
    auto ga = a.grad_lane(j);
    auto go = out.grad_lane(j);
    for (std::int64_t i = 0; i < n; ++i)
      go[i] = ga[i] / (Scalar(2) * vo[i]);
  }
}

/// Rotation coefficients as elementwise functions of t = theta^2:
///   c = cos(theta), s1 = sin(theta)/theta, c2 = (1 - cos(theta))/theta^2,
/// with the small-angle Taylor branch below rotation_taylor_threshold so the
/// values and derivatives stay finite and continuous through theta = 0. The
/// derivative of each coefficient with respect to t feeds the chain rule:
///   dc/dt = -s1/2, ds1/dt = (c - s1)/(2t), dc2/dt = (s1/2 - c2)/t.
template <typename Scalar>
void rotation_coefficients(const JetVector<Scalar>& t, JetVector<Scalar>& c,
                           JetVector<Scalar>& s1, JetVector<Scalar>& c2) {
  const std::int64_t n = t.size();
  const int d = t.grad_dim();
  c.resize_uninitialized(n, d);
  s1.resize_uninitialized(n, d);
  c2.resize_uninitialized(n, d);
  auto vt = t.values();
  auto vc = c.values();
  auto vs1 = s1.values();
  auto vc2 = c2.values();
  // d(coefficient)/dt per element, staged once and applied to every lane.
  std::array<std::vector<Scalar>, 3> deriv;
  for (auto& v : deriv) v.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const Scalar t_i = vt[i];
    Scalar cv, s1v, c2v, dc, ds1, dc2;
    dba::detail::rotation_coefficient_values(t_i, cv, s1v, c2v);
    dba::detail::rotation_coefficient_derivatives(t_i, cv, s1v, c2v, dc, ds1,
                                                  dc2);
    vc[i] = cv;
    vs1[i] = s1v;
    vc2[i] = c2v;
    deriv[0][i] = dc;
    deriv[1][i] = ds1;
    deriv[2][i] = dc2;
  }
  for (int j = 0; j < d; ++j) {
    auto gt = t.grad_lane(j);
    auto gc = c.grad_lane(j);
    auto gs1 = s1.grad_lane(j);
    auto gc2 = c2.grad_lane(j);
    for (std::int64_t i = 0; i < n; ++i) {
      gc[i] = deriv[0][i] * gt[i];
      gs1[i] = deriv[1][i] * gt[i];
      gc2[i] = deriv[2][i] * gt[i];
    }
  }
}

}  // namespace jv

// Allocating operator sugar over the kernels, for tests and ad-hoc use. The
// batch evaluator calls the kernels directly with reused buffers instead.

template <typename Scalar>
JetVector<Scalar> operator+(const JetVector<Scalar>& a,
                            const JetVector<Scalar>& b) {
  JetVector<Scalar> out;
  jv::add(a, b, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> operator-(const JetVector<Scalar>& a,
                            const JetVector<Scalar>& b) {
  JetVector<Scalar> out;
  jv::sub(a, b, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> operator*(const JetVector<Scalar>& a,
                            const JetVector<Scalar>& b) {
  JetVector<Scalar> out;
  jv::mul(a, b, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> operator/(const JetVector<Scalar>& a,
                            const JetVector<Scalar>& b) {
  JetVector<Scalar> out;
  jv::div(a, b, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> operator+(const JetVector<Scalar>& a, Scalar s) {
  JetVector<Scalar> out;
  jv::add_scalar(a, s, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> operator-(const JetVector<Scalar>& a, Scalar s) {
  JetVector<Scalar> out;
  jv::add_scalar(a, -s, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> operator*(const JetVector<Scalar>& a, Scalar s) {
  JetVector<Scalar> out;
  jv::mul_scalar(a, s, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> operator/(const JetVector<Scalar>& a, Scalar s) {
  JetVector<Scalar> out;
  jv::mul_scalar(a, Scalar(1) / s, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> operator-(const JetVector<Scalar>& a) {
  JetVector<Scalar> out;
  jv::neg(a, out);
  return out;
}
template <typename Scalar>
JetVector<Scalar> sqrt(const JetVector<Scalar>& a) {
  JetVector<Scalar> out;
  jv::sqrt(a, out);
  return out;
}

/// Pool of reusable jet buffers. fresh() hands out cleared-to-size batches;
/// reset() rewinds without releasing storage, so steady-state evaluation does
/// not allocate. References stay valid across reset().
template <typename Scalar>
class JetArena {
 public:
  JetVector<Scalar>& fresh(std::int64_t n, int d) {
    if (used_ == slots_.size())
      slots_.push_back(std::make_unique<JetVector<Scalar>>());
    JetVector<Scalar>& jv = *slots_[used_++];
    jv.resize_uninitialized(n, d);
    return jv;
  }
  void reset() { used_ = 0; }
  std::size_t capacity() const { return slots_.size(); }

 private:
  std::vector<std::unique_ptr<JetVector<Scalar>>> slots_;
  std::size_t used_ = 0;
};

/// Rodrigues rotation R(aa) * x on jet triples, composed from the elementwise
/// kernels:
///   t = |aa|^2, (c, s1, c2) = rotation_coefficients(t),
///   out = x*c + (aa x x)*s1 + aa*(aa.x)*c2.
template <typename Scalar>
void rotate_angle_axis(const std::array<const JetVector<Scalar>*, 3>& aa,
                       const std::array<const JetVector<Scalar>*, 3>& x,
                       std::array<JetVector<Scalar>*, 3> out,
                       JetArena<Scalar>& scratch) {
  const std::int64_t n = aa[0]->size();
  const int d = aa[0]->grad_dim();

  auto& tmp = scratch.fresh(n, d);
  auto& t = scratch.fresh(n, d);
  jv::mul(*aa[0], *aa[0], t);
  jv::mul(*aa[1], *aa[1], tmp);
  jv::add(t, tmp, t);
  jv::mul(*aa[2], *aa[2], tmp);
  jv::add(t, tmp, t);

  auto& c = scratch.fresh(n, d);
  auto& s1 = scratch.fresh(n, d);
  auto& c2 = scratch.fresh(n, d);
  jv::rotation_coefficients(t, c, s1, c2);

  // dot = aa . x, scaled by c2 in place.
  auto& dot = t;  // t is free now
  jv::mul(*aa[0], *x[0], dot);
  jv::mul(*aa[1], *x[1], tmp);
  jv::add(dot, tmp, dot);
  jv::mul(*aa[2], *x[2], tmp);
  jv::add(dot, tmp, dot);
  jv::mul(dot, c2, dot);

  auto& cross = scratch.fresh(n, d);
  for (int i = 0; i < 3; ++i) {
    const int i1 = (i + 1) % 3;
    const int i2 = (i + 2) % 3;
    jv::mul(*aa[i1], *x[i2], cross);
    jv::mul(*aa[i2], *x[i1], tmp);
    jv::sub(cross, tmp, cross);
    // out_i = x_i*c + cross_i*s1 + aa_i*(dot*c2)
    jv::mul(cross, s1, cross);
    jv::mul(*x[i], c, *out[i]);
    jv::add(*out[i], cross, *out[i]);
    jv::mul(*aa[i], dot, tmp);
    jv::add(*out[i], tmp, *out[i]);
  }
}

template <typename Scalar>
std::array<JetVector<Scalar>, 3> rotate_angle_axis(
    const std::array<JetVector<Scalar>, 3>& aa,
    const std::array<JetVector<Scalar>, 3>& x) {
  JetArena<Scalar> scratch;
  std::array<JetVector<Scalar>, 3> out;
  rotate_angle_axis<Scalar>({&aa[0], &aa[1], &aa[2]}, {&x[0], &x[1], &x[2]},
                            {&out[0], &out[1], &out[2]}, scratch);
  return out;
}

}  // namespace dba
