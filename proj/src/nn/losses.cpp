#include "fruitreid/nn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fruitreid::nn {

Var cross_entropy(Var pred, const Matrix& target, PredKind kind, Reduction reduction) {
  const Matrix& p = pred.value();
  if (p.rows() != target.rows() || p.cols() != target.cols()) throw ShapeError("cross_entropy: shape mismatch");
  if ((target.array() < 0.0).any()) throw ValidationError("cross_entropy: negative target mass");
  const double norm = reduction == Reduction::Mean ? std::max<double>(1.0, static_cast<double>(p.rows())) : 1.0;

  if (kind == PredKind::Probabilities) {
    double loss = 0.0;
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        if (target(r, c) != 0.0) loss -= target(r, c) * std::log(std::max(p(r, c), kLogClamp));
      }
    Matrix out(1, 1);
    out(0, 0) = loss / norm;
    return pred.tape->record(std::move(out), {pred}, [pred, target, norm](Tape& tape, int self) {
      const double g = tape.grad_ref(self)(0, 0) / norm;
      const Matrix& pv = tape.value(pred);
      Matrix d = Matrix::Zero(pv.rows(), pv.cols());
      for (Eigen::Index r = 0; r < pv.rows(); ++r)
        for (Eigen::Index c = 0; c < pv.cols(); ++c) {
          if (target(r, c) != 0.0 && pv(r, c) > kLogClamp) d(r, c) = -g * target(r, c) / pv(r, c);
        }
      tape.accumulate(pred, d);
    });
  }

  Matrix logsm(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    const double lse = m + std::log((p.row(r).array() - m).exp().sum());
    logsm.row(r) = p.row(r).array() - lse;
  }
  double loss = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r)
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      if (target(r, c) != 0.0) loss -= target(r, c) * std::max(logsm(r, c), std::log(kLogClamp));
    }
  Matrix out(1, 1);
  out(0, 0) = loss / norm;
  return pred.tape->record(std::move(out), {pred}, [pred, target, norm, logsm](Tape& tape, int self) {
    const double g = tape.grad_ref(self)(0, 0) / norm;
    Matrix d(logsm.rows(), logsm.cols());
    for (Eigen::Index r = 0; r < logsm.rows(); ++r) {
      const double mass = target.row(r).sum();
      // Clamped entries contribute no gradient.
      Eigen::RowVectorXd t = target.row(r);
      double active = mass;
      for (Eigen::Index c = 0; c < logsm.cols(); ++c) {
        if (logsm(r, c) < std::log(kLogClamp)) {
          active -= t(c);
          t(c) = 0.0;
        }
      }
      d.row(r) = (logsm.row(r).array().exp() * active - t.array()) * g;
    }
    tape.accumulate(pred, d);
  });
}

namespace {

/// Jaccard-loss gradient weights for foreground indicators sorted by
/// decreasing error.
std::vector<double> lovasz_grad(const std::vector<double>& fg_sorted) {
  const std::size_t n = fg_sorted.size();
  const double gts = std::accumulate(fg_sorted.begin(), fg_sorted.end(), 0.0);
  std::vector<double> jac(n);
  double cum_fg = 0.0, cum_bg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_fg += fg_sorted[i];
    cum_bg += 1.0 - fg_sorted[i];
    const double inter = gts - cum_fg;
    const double uni = gts + cum_bg;
    jac[i] = 1.0 - inter / uni;
  }
  for (std::size_t i = n; i-- > 1;) jac[i] -= jac[i - 1];
  return jac;
}

}  // namespace

Var lovasz_softmax(Var probs, std::span<const int> labels) {
  const Matrix& p = probs.value();
  if (static_cast<Eigen::Index>(labels.size()) != p.rows()) throw ShapeError("lovasz_softmax: one label per row");
  const Eigen::Index n = p.rows(), classes = p.cols();
  Matrix dloss = Matrix::Zero(n, classes);
  double total = 0.0;
  int present = 0;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::vector<double> err(static_cast<std::size_t>(n)), fg(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < classes; ++c) {
    bool any = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      fg[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0;
      any = any || fg[static_cast<std::size_t>(i)] > 0.0;
      err[static_cast<std::size_t>(i)] = std::abs(fg[static_cast<std::size_t>(i)] - p(i, c));
    }
    if (!any) continue;
    ++present;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return err[static_cast<std::size_t>(a)] > err[static_cast<std::size_t>(b)];
    });
    std::vector<double> fg_sorted(static_cast<std::size_t>(n));
    for (std::size_t r = 0; r < order.size(); ++r) fg_sorted[r] = fg[static_cast<std::size_t>(order[r])];
    const auto jac = lovasz_grad(fg_sorted);
    for (std::size_t r = 0; r < order.size(); ++r) {
      const auto i = order[r];
      total += err[static_cast<std::size_t>(i)] * jac[r];
      // d|fg - p| / dp is -1 for foreground (p <= 1) and +1 for background.
      dloss(i, c) = (fg[static_cast<std::size_t>(i)] > 0.0 ? -1.0 : 1.0) * jac[r];
    }
  }
  Matrix out(1, 1);
  out(0, 0) = present ? total / present : 0.0;
  if (present) dloss /= static_cast<double>(present);
  return probs.tape->record(std::move(out), {probs}, [probs, dloss = std::move(dloss)](Tape& tape, int self) {
    tape.accumulate(probs, dloss * tape.grad_ref(self)(0, 0));
  });
}

Var mean_l1_rows(Var pred, const Matrix& target, std::vector<std::int32_t> rows) {
  const Matrix& p = pred.value();
  if (target.rows() != static_cast<Eigen::Index>(rows.size()) || target.cols() != p.cols()) {
    throw ShapeError("mean_l1_rows: target must have one row per selected row");
  }
  Matrix out = Matrix::Zero(1, 1);
  if (rows.empty()) return pred.tape->constant(out);
  Matrix diff(target.rows(), target.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    diff.row(static_cast<Eigen::Index>(r)) = p.row(rows[r]) - target.row(static_cast<Eigen::Index>(r));
  }
  if (pred.tape->requires_grad(pred)) pred.tape->note_kink(diff.cwiseAbs().minCoeff());
  const double n = static_cast<double>(rows.size());
  out(0, 0) = diff.cwiseAbs().sum() / n;
  Matrix sign = diff.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
  return pred.tape->record(std::move(out), {pred},
                           [pred, rows = std::move(rows), sign = std::move(sign), n](Tape& tape, int self) {
                             const double g = tape.grad_ref(self)(0, 0) / n;
                             tape.accumulate_with(pred, [&](Matrix& dst) {
                               for (std::size_t r = 0; r < rows.size(); ++r) {
                                 dst.row(rows[r]) += sign.row(static_cast<Eigen::Index>(r)) * g;
                               }
                             });
                           });
}

}  // namespace fruitreid::nn
