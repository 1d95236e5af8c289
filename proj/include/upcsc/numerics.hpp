#ifndef UPCSC_NUMERICS_HPP
#define UPCSC_NUMERICS_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace upcsc {

/* Dense row-major matrix, templated on scalar. Rows are samples throughout. */
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateInputError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kNormEpsilon = 1e-12;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename DerivedA, typename DerivedB>
void require_same_shape(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                        const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": shape " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
}

template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_string(a.rows(), a.cols()) + " * " +
                     shape_string(b.rows(), b.cols()));
  return a * b;
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.rows() == 0 || m.cols() == 0) throw ShapeError("softmax_rows: empty matrix");
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const Scalar top = m.row(i).maxCoeff();
    out.row(i) = (m.row(i).array() - top).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Row-wise log-softmax, the numerically stable companion used by cross-entropy.
template <typename Derived>
MatrixX<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const Scalar top = m.row(i).maxCoeff();
    const Scalar lse = top + std::log((m.row(i).array() - top).exp().sum());
    out.row(i) = m.row(i).array() - lse;
  }
  return out;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> l2_normalize_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const Scalar n = out.row(i).norm();
    if (!(n > Scalar(kNormEpsilon)))
      throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) + " has norm " +
                                 std::to_string(static_cast<double>(n)));
    out.row(i) /= n;
  }
  return out;
}

/*
 * Backward pass of row normalization y = u / |u|.
 * Given the pre-normalized rows u, the normalized rows y and dL/dy, returns
 * dL/du = (dL/dy - y (y . dL/dy)) / |u|.
 */
template <typename DerivedU, typename DerivedY, typename DerivedG>
MatrixX<typename DerivedU::Scalar> l2_normalize_rows_backward(const Eigen::MatrixBase<DerivedU>& u,
                                                              const Eigen::MatrixBase<DerivedY>& y,
                                                              const Eigen::MatrixBase<DerivedG>& dy) {
  using Scalar = typename DerivedU::Scalar;
  MatrixX<Scalar> du(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const Scalar n = u.row(i).norm();
    const Scalar proj = y.row(i).dot(dy.row(i));
    du.row(i) = (dy.row(i) - proj * y.row(i)) / n;
  }
  return du;
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

struct LrSchedule {
  double base_rate = 0.0;
  std::size_t total_steps = 0;
};

/// Cosine decay from base_rate at step 0 to zero at total_steps.
inline double cosine_lr(const LrSchedule& schedule, std::size_t step) {
  if (!(schedule.base_rate > 0.0)) throw std::invalid_argument("cosine_lr: base_rate must be positive");
  if (schedule.total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step > schedule.total_steps)
    throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " beyond " +
                            std::to_string(schedule.total_steps));
  const double progress = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.base_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/* Trainable parameters fall into three learning-rate groups. */
enum class ParamGroup { Backbone, Classifier, Projector };

struct GroupRates {
  double backbone = 0.0;
  double classifier = 0.0;
  double projector = 0.0;

  double operator[](ParamGroup g) const {
    switch (g) {
      case ParamGroup::Backbone: return backbone;
      case ParamGroup::Classifier: return classifier;
      case ParamGroup::Projector: return projector;
    }
    return 0.0;
  }
};

template <typename Scalar>
struct ParameterRef {
  ParamGroup group;
  MatrixX<Scalar>* value;
};

template <typename Scalar>
struct ConstParameterRef {
  ParamGroup group;
  const MatrixX<Scalar>* value;
};

/* Anything exposing its trainable matrices in a fixed declaration order. */
template <typename P>
concept ParameterSet = requires(P& p, const P& cp) {
  { p.parameters() };
  { cp.parameters() };
};

/// Plain SGD: theta <- theta - rate(group) * grad. Momentum and weight decay are zero.
template <ParameterSet P>
P sgd_step(P params, const P& grads, const GroupRates& rates) {
  auto targets = params.parameters();
  const auto sources = grads.parameters();
  if (targets.size() != sources.size()) throw ShapeError("sgd_step: parameter count mismatch");
  for (std::size_t k = 0; k < targets.size(); ++k) {
    require_same_shape(*targets[k].value, *sources[k].value, "sgd_step");
    *targets[k].value -= rates[targets[k].group] * *sources[k].value;
  }
  return params;
}

template <ParameterSet P>
P zeros_like(const P& params) {
  P out = params;
  for (auto& ref : out.parameters()) ref.value->setZero();
  return out;
}

/*
 * Central finite-difference gradient of a scalar function of a parameter set:
 * (L(theta + h e_k) - L(theta - h e_k)) / (2h) for every coordinate k.
 */
template <ParameterSet P, typename LossFn>
P finite_diff_gradient(LossFn&& loss_fn, const P& params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_gradient: h must be positive");
  P probe = params;
  P grad = zeros_like(params);
  auto probe_refs = probe.parameters();
  auto grad_refs = grad.parameters();
  for (std::size_t k = 0; k < probe_refs.size(); ++k) {
    auto& m = *probe_refs[k].value;
    auto& g = *grad_refs[k].value;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double& coord = m.data()[i];
      const double saved = coord;
      coord = saved + h;
      const double up = loss_fn(static_cast<const P&>(probe));
      coord = saved - h;
      const double down = loss_fn(static_cast<const P&>(probe));
      coord = saved;
      g.data()[i] = (up - down) / (2.0 * h);
    }
  }
  return grad;
}

/// Plain-scalar overload, handy for one-dimensional checks.
template <typename LossFn>
double finite_diff_derivative(LossFn&& loss_fn, double x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_derivative: h must be positive");
  return (loss_fn(x + h) - loss_fn(x - h)) / (2.0 * h);
}

/// max_k |a_k - b_k| / max(|a_k|, |b_k|, floor) over all parameters.
template <ParameterSet P>
double max_relative_error(const P& a, const P& b, double floor = 1e-8) {
  const auto ra = a.parameters();
  const auto rb = b.parameters();
  if (ra.size() != rb.size()) throw ShapeError("max_relative_error: parameter count mismatch");
  double worst = 0.0;
  for (std::size_t k = 0; k < ra.size(); ++k) {
    require_same_shape(*ra[k].value, *rb[k].value, "max_relative_error");
    for (Eigen::Index i = 0; i < ra[k].value->size(); ++i) {
      const double x = ra[k].value->data()[i];
      const double y = rb[k].value->data()[i];
      const double denom = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / denom);
    }
  }
  return worst;
}

template <typename DerivedA, typename DerivedB>
double max_relative_error(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                          double floor = 1e-8) {
  require_same_shape(a, b, "max_relative_error");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double x = a(i, j);
      const double y = b(i, j);
      worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
  return worst;
}

}  // namespace upcsc

#endif  // UPCSC_NUMERICS_HPP
