#include "mgnt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mgnt {

std::string shape_string(const Tensor& t) {
  std::ostringstream os;
  os << "[" << t.rows() << "x" << t.cols() << "]";
  return os.str();
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

std::uint64_t n_elems(const Tensor& t) { return static_cast<std::uint64_t>(t.size()); }

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad_of(id); }

const std::string& Tape::scope() const {
  static const std::string kDefault = "default";
  return scopes_.empty() ? kDefault : scopes_.back();
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), nullptr, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), nullptr, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward,
                 std::uint64_t op_count) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw std::logic_error("Tape::record: input from another tape");
    needs = needs || nodes_[v.id].requires_grad;
  }
  if (op_count > 0) counter_.add(scope(), op_count);
  nodes_.push_back(Node{std::move(value), Tensor(), needs ? std::move(backward) : nullptr, needs});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad_of(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() == 0 && n.value.size() != 0) {
    // Unreached nodes have zero gradient; materialize lazily for callers.
    const_cast<Node&>(n).grad = Tensor::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
    throw DimensionError("Tape::accumulate: gradient " + shape_string(g) + " for value " +
                         shape_string(n.value));
  }
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var output) {
  if (output.tape != this) throw std::logic_error("Tape::backward: foreign variable");
  const Tensor& out = nodes_[output.id].value;
  if (out.rows() != 1 || out.cols() != 1) {
    throw DimensionError("Tape::backward: output must be 1x1, got " + shape_string(out));
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  accumulate(output.id, Tensor::Ones(1, 1));
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(av) + " x " +
                         shape_string(bv));
  }
  Tensor out(av.rows(), bv.cols());
  out.noalias() = av * bv;
  const Var in[] = {a, b};
  const auto ops = static_cast<std::uint64_t>(av.rows() * av.cols() * bv.cols());
  return a.tape->record(
      std::move(out), in,
      [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(a.id)) t.accumulate(a.id, g * t.value(b.id).transpose());
        if (t.requires_grad(b.id)) t.accumulate(b.id, t.value(a.id).transpose() * g);
      },
      ops);
}

Var transpose(Var a) {
  const Var in[] = {a};
  return a.tape->record(Tensor(a.value().transpose()), in, [a](Tape& t, std::size_t self) {
    t.accumulate(a.id, t.grad_of(self).transpose());
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  const Var in[] = {a, b};
  return a.tape->record(
      a.value() + b.value(), in,
      [a, b](Tape& t, std::size_t self) {
        t.accumulate(a.id, t.grad_of(self));
        t.accumulate(b.id, t.grad_of(self));
      },
      n_elems(a.value()));
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  const Var in[] = {a, b};
  return a.tape->record(
      a.value() - b.value(), in,
      [a, b](Tape& t, std::size_t self) {
        t.accumulate(a.id, t.grad_of(self));
        t.accumulate(b.id, Tensor(-t.grad_of(self)));
      },
      n_elems(a.value()));
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  const Var in[] = {a, b};
  return a.tape->record(
      a.value().cwiseProduct(b.value()), in,
      [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(a.id)) t.accumulate(a.id, g.cwiseProduct(t.value(b.id)));
        if (t.requires_grad(b.id)) t.accumulate(b.id, g.cwiseProduct(t.value(a.id)));
      },
      n_elems(a.value()));
}

Var scale(Var a, double s) {
  const Var in[] = {a};
  return a.tape->record(
      a.value() * s, in,
      [a, s](Tape& t, std::size_t self) { t.accumulate(a.id, t.grad_of(self) * s); },
      n_elems(a.value()));
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bv) + " does not match " +
                         shape_string(xv));
  }
  Tensor out = xv.rowwise() + bv.row(0);
  const Var in[] = {x, bias};
  return x.tape->record(
      std::move(out), in,
      [x, bias](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        t.accumulate(x.id, g);
        if (t.requires_grad(bias.id)) t.accumulate(bias.id, g.colwise().sum());
      },
      n_elems(xv));
}

Var add_constant(Var x, const Tensor& c) {
  require_same_shape("add_constant", x.value(), c);
  const Var in[] = {x};
  return x.tape->record(
      x.value() + c, in,
      [x](Tape& t, std::size_t self) { t.accumulate(x.id, t.grad_of(self)); }, n_elems(c));
}

Var square(Var a) {
  const Var in[] = {a};
  return a.tape->record(
      a.value().cwiseAbs2(), in,
      [a](Tape& t, std::size_t self) {
        t.accumulate(a.id, 2.0 * t.grad_of(self).cwiseProduct(t.value(a.id)));
      },
      n_elems(a.value()));
}

Var leaky_relu(Var x, double slope) {
  if (!(slope > 0.0 && slope < 1.0)) {
    throw std::invalid_argument("leaky_relu: slope must lie in (0,1)");
  }
  const Tensor& xv = x.value();
  Tensor out = xv.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
  const Var in[] = {x};
  return x.tape->record(
      std::move(out), in,
      [x, slope](Tape& t, std::size_t self) {
        // Subgradient at exactly zero takes the negative-side slope.
        Tensor d = t.value(x.id).unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
        t.accumulate(x.id, t.grad_of(self).cwiseProduct(d));
      },
      n_elems(xv));
}

Var clamp_min(Var x, double lo) {
  const Tensor& xv = x.value();
  const Var in[] = {x};
  return x.tape->record(
      xv.cwiseMax(lo), in,
      [x, lo](Tape& t, std::size_t self) {
        Tensor mask = t.value(x.id).unaryExpr([lo](double v) { return v > lo ? 1.0 : 0.0; });
        t.accumulate(x.id, t.grad_of(self).cwiseProduct(mask));
      },
      n_elems(xv));
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const Index n = xv.rows();
  const Index d = xv.cols();
  if (gain.value().rows() != 1 || gain.value().cols() != d || bias.value().rows() != 1 ||
      bias.value().cols() != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.value()) + " / bias " +
                         shape_string(bias.value()) + " do not match " + shape_string(xv));
  }
  Tensor xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Tensor out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const Var in[] = {x, gain, bias};
  return x.tape->record(
      std::move(out), in,
      [x, gain, bias, xhat = std::move(xhat), inv_std](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(gain.id)) t.accumulate(gain.id, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias.id)) t.accumulate(bias.id, g.colwise().sum());
        if (!t.requires_grad(x.id)) return;
        Tensor dxhat = (g.array().rowwise() * t.value(gain.id).row(0).array()).matrix();
        Tensor dx(g.rows(), g.cols());
        for (Index i = 0; i < g.rows(); ++i) {
          const double m1 = dxhat.row(i).mean();
          const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
          dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
        }
        t.accumulate(x.id, dx);
      },
      8 * n_elems(xv));
}

Var softmax(Var x, Axis axis) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  if (axis == Axis::Cols) {
    for (Index i = 0; i < xv.rows(); ++i) {
      const double m = xv.row(i).maxCoeff();
      out.row(i) = (xv.row(i).array() - m).exp();
      out.row(i) /= out.row(i).sum();
    }
  } else {
    for (Index j = 0; j < xv.cols(); ++j) {
      const double m = xv.col(j).maxCoeff();
      out.col(j) = (xv.col(j).array() - m).exp();
      out.col(j) /= out.col(j).sum();
    }
  }
  const Var in[] = {x};
  return x.tape->record(
      std::move(out), in,
      [x, axis](Tape& t, std::size_t self) {
        const Tensor& y = t.value(self);
        const Tensor& g = t.grad_of(self);
        Tensor gy = g.cwiseProduct(y);
        Tensor dx(y.rows(), y.cols());
        if (axis == Axis::Cols) {
          Eigen::VectorXd s = gy.rowwise().sum();
          for (Index i = 0; i < y.rows(); ++i) dx.row(i) = gy.row(i) - y.row(i) * s(i);
        } else {
          Eigen::RowVectorXd s = gy.colwise().sum();
          for (Index j = 0; j < y.cols(); ++j) dx.col(j) = gy.col(j) - y.col(j) * s(j);
        }
        t.accumulate(x.id, dx);
      },
      4 * n_elems(xv));
}

Var segment_sum(Var values, std::span<const Index> segment_ids, Index n_segments) {
  const Tensor& v = values.value();
  if (static_cast<Index>(segment_ids.size()) != v.rows()) {
    throw DimensionError("segment_sum: " + std::to_string(segment_ids.size()) + " ids for " +
                         shape_string(v));
  }
  Tensor out = Tensor::Zero(n_segments, v.cols());
  for (Index e = 0; e < v.rows(); ++e) {
    const Index s = segment_ids[static_cast<std::size_t>(e)];
    if (s < 0 || s >= n_segments) {
      throw IndexError("segment_sum: id " + std::to_string(s) + " outside [0," +
                       std::to_string(n_segments) + ")");
    }
    out.row(s) += v.row(e);
  }
  std::vector<Index> ids(segment_ids.begin(), segment_ids.end());
  const Var in[] = {values};
  return values.tape->record(
      std::move(out), in,
      [values, ids = std::move(ids)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor dv(static_cast<Index>(ids.size()), g.cols());
        for (std::size_t e = 0; e < ids.size(); ++e) dv.row(static_cast<Index>(e)) = g.row(ids[e]);
        t.accumulate(values.id, dv);
      },
      n_elems(v));
}

Var gather_rows(Var x, std::span<const Index> rows) {
  const Tensor& xv = x.value();
  Tensor out(static_cast<Index>(rows.size()), xv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= xv.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " outside " +
                       shape_string(xv));
    }
    out.row(static_cast<Index>(r)) = xv.row(rows[r]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  const Var in[] = {x};
  return x.tape->record(
      std::move(out), in,
      [x, idx = std::move(idx)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        Tensor dx = Tensor::Zero(t.value(x.id).rows(), g.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) dx.row(idx[r]) += g.row(static_cast<Index>(r));
        t.accumulate(x.id, dx);
      },
      n_elems(out));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index n = parts.front().rows();
  Index total = 0;
  for (const Var& p : parts) {
    if (p.rows() != n) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().value()) +
                           " vs " + shape_string(p.value()));
    }
    total += p.cols();
  }
  Tensor out(n, total);
  Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  std::vector<Var> in(parts.begin(), parts.end());
  return parts.front().tape->record(std::move(out), in, [in](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Index o = 0;
    for (const Var& p : in) {
      const Index c = t.value(p.id).cols();
      if (t.requires_grad(p.id)) t.accumulate(p.id, Tensor(g.middleCols(o, c)));
      o += c;
    }
  });
}

Var slice_cols(Var x, Index begin, Index count) {
  const Tensor& xv = x.value();
  if (begin < 0 || count < 0 || begin + count > xv.cols()) {
    throw IndexError("slice_cols: [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " + shape_string(xv));
  }
  const Var in[] = {x};
  return x.tape->record(Tensor(xv.middleCols(begin, count)), in,
                        [x, begin, count](Tape& t, std::size_t self) {
                          Tensor dx = Tensor::Zero(t.value(x.id).rows(), t.value(x.id).cols());
                          dx.middleCols(begin, count) = t.grad_of(self);
                          t.accumulate(x.id, dx);
                        });
}

Var row_sum(Var x) {
  const Var in[] = {x};
  return x.tape->record(
      Tensor(x.value().rowwise().sum()), in,
      [x](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Index c = t.value(x.id).cols();
        Tensor dx = g.col(0).replicate(1, c);
        t.accumulate(x.id, dx);
      },
      n_elems(x.value()));
}

Var col_sum(Var x) {
  const Var in[] = {x};
  return x.tape->record(
      Tensor(x.value().colwise().sum()), in,
      [x](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const Index r = t.value(x.id).rows();
        Tensor dx = g.row(0).replicate(r, 1);
        t.accumulate(x.id, dx);
      },
      n_elems(x.value()));
}

Var sum_all(Var x) {
  Tensor out(1, 1);
  out(0, 0) = x.value().sum();
  const Var in[] = {x};
  return x.tape->record(
      std::move(out), in,
      [x](Tape& t, std::size_t self) {
        const double g = t.grad_of(self)(0, 0);
        t.accumulate(x.id, Tensor::Constant(t.value(x.id).rows(), t.value(x.id).cols(), g));
      },
      n_elems(x.value()));
}

Var div_rows(Var x, Var s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (sv.cols() != 1 || sv.rows() != xv.rows()) {
    throw DimensionError("div_rows: divisor " + shape_string(sv) + " for " + shape_string(xv));
  }
  Tensor out = (xv.array().colwise() / sv.col(0).array()).matrix();
  const Var in[] = {x, s};
  return x.tape->record(
      std::move(out), in,
      [x, s](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const auto sc = t.value(s.id).col(0).array();
        if (t.requires_grad(x.id)) t.accumulate(x.id, Tensor((g.array().colwise() / sc).matrix()));
        if (t.requires_grad(s.id)) {
          Eigen::ArrayXd num = g.cwiseProduct(t.value(x.id)).rowwise().sum().array();
          Tensor ds = (-num / sc.square()).matrix();
          t.accumulate(s.id, ds);
        }
      },
      n_elems(xv));
}

Var mul_rows(Var x, Var s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (sv.cols() != 1 || sv.rows() != xv.rows()) {
    throw DimensionError("mul_rows: factor " + shape_string(sv) + " for " + shape_string(xv));
  }
  Tensor out = (xv.array().colwise() * sv.col(0).array()).matrix();
  const Var in[] = {x, s};
  return x.tape->record(
      std::move(out), in,
      [x, s](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        if (t.requires_grad(x.id)) {
          t.accumulate(x.id, Tensor((g.array().colwise() * t.value(s.id).col(0).array()).matrix()));
        }
        if (t.requires_grad(s.id)) {
          t.accumulate(s.id, Tensor(g.cwiseProduct(t.value(x.id)).rowwise().sum()));
        }
      },
      n_elems(xv));
}

}  // namespace mgnt
