#include "fruitreid/nn/ops.hpp"

#include <cmath>
#include <string>

namespace fruitreid::nn {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " differ");
  }
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    if (tape.requires_grad(a)) tape.accumulate(a, g * tape.value(b).transpose());
    if (tape.requires_grad(b)) tape.accumulate(b, tape.value(a).transpose() * g);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value() + b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, int self) {
    tape.accumulate(a, tape.grad_ref(self));
    tape.accumulate(b, tape.grad_ref(self));
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value() - b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& tape, int self) {
    tape.accumulate(a, tape.grad_ref(self));
    tape.accumulate(b, -tape.grad_ref(self));
  });
}

Var add_row(Var x, Var row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Matrix out = x.value().rowwise() + row.value().row(0);
  return x.tape->record(std::move(out), {x, row}, [x, row](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    tape.accumulate(x, g);
    if (tape.requires_grad(row)) tape.accumulate(row, g.colwise().sum());
  });
}

Var scale(Var x, double s) {
  Matrix out = x.value() * s;
  return x.tape->record(std::move(out), {x},
                        [x, s](Tape& tape, int self) { tape.accumulate(x, tape.grad_ref(self) * s); });
}

Var add_scalar(Var x, double s) {
  Matrix out = x.value().array() + s;
  return x.tape->record(std::move(out), {x},
                        [x](Tape& tape, int self) { tape.accumulate(x, tape.grad_ref(self)); });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var relu(Var x) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  if (t.requires_grad(x)) t.note_kink(xv.size() ? xv.cwiseAbs().minCoeff() : INFINITY);
  Matrix out = xv.cwiseMax(0.0);
  return t.record(std::move(out), {x}, [x](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    const Matrix& in = tape.value(x);
    tape.accumulate(x, (in.array() > 0.0).select(g, 0.0));
  });
}

Var leaky_relu(Var x, double slope) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  if (t.requires_grad(x)) t.note_kink(xv.size() ? xv.cwiseAbs().minCoeff() : INFINITY);
  Matrix out = (xv.array() > 0.0).select(xv, xv * slope);
  return t.record(std::move(out), {x}, [x, slope](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    const Matrix& in = tape.value(x);
    tape.accumulate(x, (in.array() > 0.0).select(g, g * slope));
  });
}

Var abs(Var x) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  if (t.requires_grad(x)) t.note_kink(xv.size() ? xv.cwiseAbs().minCoeff() : INFINITY);
  Matrix out = xv.cwiseAbs();
  return t.record(std::move(out), {x}, [x](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    const Matrix& in = tape.value(x);
    Matrix d = (in.array() > 0.0).select(g, (in.array() < 0.0).select(-g, 0.0));
    tape.accumulate(x, d);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.record(std::move(out), parts, [parts](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    Eigen::Index c0 = 0;
    for (const auto& p : parts) {
      const Eigen::Index w = tape.value(p).cols();
      if (tape.requires_grad(p)) tape.accumulate(p, g.middleCols(c0, w));
      c0 += w;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.record(std::move(out), parts, [parts](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    Eigen::Index r0 = 0;
    for (const auto& p : parts) {
      const Eigen::Index h = tape.value(p).rows();
      if (tape.requires_grad(p)) tape.accumulate(p, g.middleRows(r0, h));
      r0 += h;
    }
  });
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw ShapeError("slice_rows: out of range");
  Matrix out = x.value().middleRows(start, count);
  return x.tape->record(std::move(out), {x}, [x, start, count](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    tape.accumulate_with(x, [&](Matrix& dst) { dst.middleRows(start, count) += g; });
  });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out = x.value().middleCols(start, count);
  return x.tape->record(std::move(out), {x}, [x, start, count](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    tape.accumulate_with(x, [&](Matrix& dst) { dst.middleCols(start, count) += g; });
  });
}

Var reshape(Var x, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != x.value().size()) throw ShapeError("reshape: element count changes");
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  const Eigen::Index r0 = x.rows(), c0 = x.cols();
  return x.tape->record(std::move(out), {x}, [x, r0, c0](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    tape.accumulate(x, Eigen::Map<const Matrix>(g.data(), r0, c0));
  });
}

Var gather_rows(Var x, std::vector<std::int32_t> index) {
  const Matrix& xv = x.value();
  Matrix out(static_cast<Eigen::Index>(index.size()), xv.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= xv.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = xv.row(index[r]);
  }
  return x.tape->record(std::move(out), {x}, [x, index = std::move(index)](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    tape.accumulate_with(x, [&](Matrix& dst) {
      for (std::size_t r = 0; r < index.size(); ++r) dst.row(index[r]) += g.row(static_cast<Eigen::Index>(r));
    });
  });
}

Var sum_all(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape->record(std::move(out), {x}, [x](Tape& tape, int self) {
    const double g = tape.grad_ref(self)(0, 0);
    const Matrix& in = tape.value(x);
    tape.accumulate(x, Matrix::Constant(in.rows(), in.cols(), g));
  });
}

Var mean_all(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ShapeError("mean_all: empty input");
  Matrix out(1, 1);
  out(0, 0) = x.value().sum() / n;
  return x.tape->record(std::move(out), {x}, [x, n](Tape& tape, int self) {
    const double g = tape.grad_ref(self)(0, 0) / n;
    const Matrix& in = tape.value(x);
    tape.accumulate(x, Matrix::Constant(in.rows(), in.cols(), g));
  });
}

Var sum_rows(Var x) {
  Matrix out = x.value().rowwise().sum();
  const Eigen::Index cols = x.cols();
  return x.tape->record(std::move(out), {x}, [x, cols](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    tape.accumulate(x, g.replicate(1, cols));
  });
}

Var sum_cols(Var x) {
  Matrix out = x.value().colwise().sum();
  const Eigen::Index rows = x.rows();
  return x.tape->record(std::move(out), {x}, [x, rows](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    tape.accumulate(x, g.replicate(rows, 1));
  });
}

Var segment_mean(Var x, std::vector<std::int32_t> segment, Eigen::Index count) {
  const Matrix& xv = x.value();
  if (static_cast<Eigen::Index>(segment.size()) != xv.rows()) {
    throw ShapeError("segment_mean: one segment id per row required");
  }
  std::vector<double> sizes(static_cast<std::size_t>(count), 0.0);
  Matrix out = Matrix::Zero(count, xv.cols());
  for (std::size_t r = 0; r < segment.size(); ++r) {
    if (segment[r] < 0 || segment[r] >= count) throw ShapeError("segment_mean: bad segment id");
    out.row(segment[r]) += xv.row(static_cast<Eigen::Index>(r));
    sizes[static_cast<std::size_t>(segment[r])] += 1.0;
  }
  for (Eigen::Index s = 0; s < count; ++s) {
    if (sizes[static_cast<std::size_t>(s)] == 0.0) throw EmptyInputError("segment_mean: empty segment");
    out.row(s) /= sizes[static_cast<std::size_t>(s)];
  }
  return x.tape->record(std::move(out), {x},
                        [x, segment = std::move(segment), sizes = std::move(sizes)](Tape& tape, int self) {
                          const Matrix& g = tape.grad_ref(self);
                          tape.accumulate_with(x, [&](Matrix& dst) {
                            for (std::size_t r = 0; r < segment.size(); ++r) {
                              const auto s = static_cast<std::size_t>(segment[r]);
                              dst.row(static_cast<Eigen::Index>(r)) += g.row(segment[r]) / sizes[s];
                            }
                          });
                        });
}

Var global_avg_pool(Var x) {
  if (x.rows() == 0) throw EmptyInputError("global_avg_pool: no occupied voxels");
  return segment_mean(x, std::vector<std::int32_t>(static_cast<std::size_t>(x.rows()), 0), 1);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  if (logits.size() == 0) return logits;
  Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

Var softmax_rows(Var x) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    auto e = (xv.row(r).array() - xv.row(r).maxCoeff()).exp();
    out.row(r) = e / e.sum();
  }
  return x.tape->record(out, {x}, [x](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    const Matrix& y = tape.value(self);
    Matrix d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = (g.row(r).array() * y.row(r).array()).sum();
      d.row(r) = y.row(r).array() * (g.row(r).array() - dot);
    }
    tape.accumulate(x, d);
  });
}

Var softmax_segments(Var column, std::vector<RowRange> segments) {
  const Matrix& xv = column.value();
  if (xv.cols() != 1) throw ShapeError("softmax_segments: expects an n x 1 column");
  Matrix out = Matrix::Zero(xv.rows(), 1);
  for (const auto& s : segments) {
    if (s.begin < 0 || s.end > xv.rows() || s.begin > s.end) throw ShapeError("softmax_segments: bad range");
    if (s.size() == 0) continue;
    auto block = xv.middleRows(s.begin, s.size()).array();
    auto e = (block - block.maxCoeff()).exp();
    out.middleRows(s.begin, s.size()) = e / e.sum();
  }
  return column.tape->record(out, {column}, [column, segments = std::move(segments)](Tape& tape, int self) {
    const Matrix& g = tape.grad_ref(self);
    const Matrix& y = tape.value(self);
    Matrix d = Matrix::Zero(y.rows(), 1);
    for (const auto& s : segments) {
      if (s.size() == 0) continue;
      auto ys = y.middleRows(s.begin, s.size()).array();
      auto gs = g.middleRows(s.begin, s.size()).array();
      const double dot = (ys * gs).sum();
      d.middleRows(s.begin, s.size()) = ys * (gs - dot);
    }
    tape.accumulate(column, d);
  });
}

Var batch_norm(Var x, Var gain, Var bias, Matrix& running_mean, Matrix& running_var, bool train,
               double momentum, double eps) {
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows(), c = xv.cols();
  if (n == 0) throw ShapeError("batch_norm: zero rows");
  if (gain.cols() != c || bias.cols() != c || running_mean.cols() != c || running_var.cols() != c) {
    throw ShapeError("batch_norm: channel count mismatch");
  }
  const Eigen::RowVectorXd g = gain.value().row(0);
  const Eigen::RowVectorXd b = bias.value().row(0);

  if (!train || n == 1) {
    const Eigen::RowVectorXd inv_std = (running_var.row(0).array() + eps).rsqrt();
    const Eigen::RowVectorXd mean = running_mean.row(0);
    Matrix xhat = (xv.rowwise() - mean).array().rowwise() * inv_std.array();
    Matrix out = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
    return x.tape->record(std::move(out), {x, gain, bias},
                          [x, gain, bias, inv_std, xhat = std::move(xhat), g](Tape& tape, int self) {
                            const Matrix& dy = tape.grad_ref(self);
                            if (tape.requires_grad(x)) {
                              tape.accumulate(x, dy.array().rowwise() * (g.array() * inv_std.array()));
                            }
                            if (tape.requires_grad(gain)) {
                              tape.accumulate(gain, (dy.array() * xhat.array()).colwise().sum().matrix());
                            }
                            if (tape.requires_grad(bias)) tape.accumulate(bias, dy.colwise().sum());
                          });
  }

  const Eigen::RowVectorXd mean = xv.colwise().mean();
  const Matrix centered = xv.rowwise() - mean;
  const Eigen::RowVectorXd var = centered.array().square().colwise().sum() / static_cast<double>(n);
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().rowwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * g.array()).rowwise() + b.array();

  const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
  running_mean.row(0) = (1.0 - momentum) * running_mean.row(0) + momentum * mean;
  running_var.row(0) = (1.0 - momentum) * running_var.row(0) + momentum * unbias * var;

  return x.tape->record(std::move(out), {x, gain, bias},
                        [x, gain, bias, inv_std, xhat = std::move(xhat), g](Tape& tape, int self) {
                          const Matrix& dy = tape.grad_ref(self);
                          const double nn = static_cast<double>(dy.rows());
                          if (tape.requires_grad(x)) {
                            Matrix dxhat = dy.array().rowwise() * g.array();
                            const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
                            const Eigen::RowVectorXd sum_dx = (dxhat.array() * xhat.array()).colwise().sum();
                            Matrix dx = (dxhat * nn).rowwise() - sum_d;
                            dx -= (xhat.array().rowwise() * sum_dx.array()).matrix();
                            dx = dx.array().rowwise() * (inv_std.array() / nn);
                            tape.accumulate(x, dx);
                          }
                          if (tape.requires_grad(gain)) {
                            tape.accumulate(gain, (dy.array() * xhat.array()).colwise().sum().matrix());
                          }
                          if (tape.requires_grad(bias)) tape.accumulate(bias, dy.colwise().sum());
                        });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = x.value();
  const Eigen::Index c = xv.cols();
  if (gain.cols() != c || bias.cols() != c) throw ShapeError("layer_norm: channel count mismatch");
  const Eigen::VectorXd mean = xv.rowwise().mean();
  const Matrix centered = xv.colwise() - mean;
  const Eigen::VectorXd var = centered.array().square().rowwise().sum() / static_cast<double>(c);
  const Eigen::VectorXd inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  const Eigen::RowVectorXd g = gain.value().row(0);
  Matrix out = (xhat.array().rowwise() * g.array()).rowwise() + bias.value().row(0).array();
  return x.tape->record(std::move(out), {x, gain, bias},
                        [x, gain, bias, inv_std, xhat = std::move(xhat), g](Tape& tape, int self) {
                          const Matrix& dy = tape.grad_ref(self);
                          const double cc = static_cast<double>(dy.cols());
                          if (tape.requires_grad(x)) {
                            Matrix dxhat = dy.array().rowwise() * g.array();
                            const Eigen::VectorXd sum_d = dxhat.rowwise().sum();
                            const Eigen::VectorXd sum_dx = (dxhat.array() * xhat.array()).rowwise().sum();
                            Matrix dx = (dxhat * cc).colwise() - sum_d;
                            dx -= (xhat.array().colwise() * sum_dx.array()).matrix();
                            dx = dx.array().colwise() * (inv_std.array() / cc);
                            tape.accumulate(x, dx);
                          }
                          if (tape.requires_grad(gain)) {
                            tape.accumulate(gain, (dy.array() * xhat.array()).colwise().sum().matrix());
                          }
                          if (tape.requires_grad(bias)) tape.accumulate(bias, dy.colwise().sum());
                        });
}

Var sparse_conv(Var features, Var weights, const KernelMap& map) {
  const Matrix& x = features.value();
  const Matrix& w = weights.value();
  const Eigen::Index cin = x.cols();
  const auto volume = static_cast<Eigen::Index>(map.volume());
  if (w.rows() != volume * cin) {
    throw ShapeError("sparse_conv: weight rows " + std::to_string(w.rows()) + " != kernel volume " +
                     std::to_string(volume) + " x input channels " + std::to_string(cin));
  }
  const Eigen::Index cout = w.cols();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(map.out_size()), cout);
  Matrix gathered;
  for (Eigen::Index o = 0; o < volume; ++o) {
    const auto& pairs = map.by_offset[static_cast<std::size_t>(o)];
    if (pairs.empty()) continue;
    gathered.resize(static_cast<Eigen::Index>(pairs.size()), cin);
    for (std::size_t p = 0; p < pairs.size(); ++p) gathered.row(static_cast<Eigen::Index>(p)) = x.row(pairs[p].input);
    const Matrix contrib = gathered * w.middleRows(o * cin, cin);
    for (std::size_t p = 0; p < pairs.size(); ++p) out.row(pairs[p].output) += contrib.row(static_cast<Eigen::Index>(p));
  }
  return features.tape->record(std::move(out), {features, weights}, [features, weights, &map](Tape& tape, int self) {
    const Matrix& dy = tape.grad_ref(self);
    const Matrix& xin = tape.value(features);
    const Matrix& wv = tape.value(weights);
    const Eigen::Index ci = xin.cols();
    const bool want_x = tape.requires_grad(features);
    const bool want_w = tape.requires_grad(weights);
    Matrix dx = want_x ? Matrix::Zero(xin.rows(), ci) : Matrix();
    Matrix dw = want_w ? Matrix::Zero(wv.rows(), wv.cols()) : Matrix();
    Matrix g_in, g_out;
    for (std::size_t o = 0; o < map.by_offset.size(); ++o) {
      const auto& pairs = map.by_offset[o];
      if (pairs.empty()) continue;
      const auto np = static_cast<Eigen::Index>(pairs.size());
      g_out.resize(np, dy.cols());
      for (Eigen::Index p = 0; p < np; ++p) g_out.row(p) = dy.row(pairs[static_cast<std::size_t>(p)].output);
      const auto wo = wv.middleRows(static_cast<Eigen::Index>(o) * ci, ci);
      if (want_w) {
        g_in.resize(np, ci);
        for (Eigen::Index p = 0; p < np; ++p) g_in.row(p) = xin.row(pairs[static_cast<std::size_t>(p)].input);
        dw.middleRows(static_cast<Eigen::Index>(o) * ci, ci).noalias() += g_in.transpose() * g_out;
      }
      if (want_x) {
        const Matrix back = g_out * wo.transpose();
        for (Eigen::Index p = 0; p < np; ++p) dx.row(pairs[static_cast<std::size_t>(p)].input) += back.row(p);
      }
    }
    if (want_x) tape.accumulate(features, dx);
    if (want_w) tape.accumulate(weights, dw);
  });
}

Var attention(Var q, Var k, Var v, int heads, std::vector<RowRange> segments) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  const Eigen::Index d = qv.cols();
  if (heads <= 0 || d % heads != 0) throw ConfigError("attention: width not divisible by head count");
  if (kv.rows() != qv.rows() || vv.rows() != qv.rows() || kv.cols() != d || vv.cols() != d) {
    throw ShapeError("attention: q, k, v shapes differ");
  }
  const Eigen::Index dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out = Matrix::Zero(qv.rows(), d);
  // probs[s * heads + h] holds the attention weights of segment s, head h.
  std::vector<Matrix> probs(segments.size() * static_cast<std::size_t>(heads));
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.size() == 0) continue;
    for (int h = 0; h < heads; ++h) {
      const auto qs = qv.block(seg.begin, h * dh, seg.size(), dh);
      const auto ks = kv.block(seg.begin, h * dh, seg.size(), dh);
      const auto vs = vv.block(seg.begin, h * dh, seg.size(), dh);
      Matrix scores = (qs * ks.transpose()) * sc;
      for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        auto e = (scores.row(r).array() - scores.row(r).maxCoeff()).exp();
        scores.row(r) = e / e.sum();
      }
      out.block(seg.begin, h * dh, seg.size(), dh) = scores * vs;
      probs[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = std::move(scores);
    }
  }
  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, heads, dh, sc, segments = std::move(segments), probs = std::move(probs)](Tape& tape, int self) {
        const Matrix& dy = tape.grad_ref(self);
        const Matrix& qv2 = tape.value(q);
        const Matrix& kv2 = tape.value(k);
        const Matrix& vv2 = tape.value(v);
        Matrix dq = Matrix::Zero(qv2.rows(), qv2.cols());
        Matrix dk = Matrix::Zero(kv2.rows(), kv2.cols());
        Matrix dv = Matrix::Zero(vv2.rows(), vv2.cols());
        for (std::size_t s = 0; s < segments.size(); ++s) {
          const auto& seg = segments[s];
          if (seg.size() == 0) continue;
          for (int h = 0; h < heads; ++h) {
            const Matrix& p = probs[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
            const auto qs = qv2.block(seg.begin, h * dh, seg.size(), dh);
            const auto ks = kv2.block(seg.begin, h * dh, seg.size(), dh);
            const auto vs = vv2.block(seg.begin, h * dh, seg.size(), dh);
            const auto go = dy.block(seg.begin, h * dh, seg.size(), dh);
            dv.block(seg.begin, h * dh, seg.size(), dh) += p.transpose() * go;
            const Matrix dp = go * vs.transpose();
            Matrix ds(p.rows(), p.cols());
            for (Eigen::Index r = 0; r < p.rows(); ++r) {
              const double dot = (dp.row(r).array() * p.row(r).array()).sum();
              ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
            }
            ds *= sc;
            dq.block(seg.begin, h * dh, seg.size(), dh) += ds * ks;
            dk.block(seg.begin, h * dh, seg.size(), dh) += ds.transpose() * qs;
          }
        }
        tape.accumulate(q, dq);
        tape.accumulate(k, dk);
        tape.accumulate(v, dv);
      });
}

}  // namespace fruitreid::nn
