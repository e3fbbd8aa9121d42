#include "tokalign/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>

#include "tokalign/errors.hpp"
#include "tokalign/moments.hpp"

namespace tokalign::ad {

namespace {

std::string shape_of(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_of(a.value()) + " vs " +
                         shape_of(b.value()));
}

#ifndef NDEBUG
void check_finite(const Matrix& m) {
  if (!m.allFinite()) throw ContractError("non-finite value produced by a forward op");
}
#else
void check_finite(const Matrix&) {}
#endif

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("scalar() on non-scalar " + shape_of(v));
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, true, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward) {
  check_finite(value);
  bool rg = false;
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw ContractError("op inputs live on a different tape");
    rg = rg || nodes_[v.id()].requires_grad;
  }
  Node node{std::move(value), {}, false, rg, false, {}};
  if (rg) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Gradients Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("loss belongs to a different tape");
  if (loss.value().size() != 1)
    throw ContractError("backward needs a scalar loss, got " + shape_of(loss.value()));
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  grad(loss.id()).setOnes();
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.leaf || !n.requires_grad) continue;
    out.emplace(i, n.has_grad ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols()));
  }
  return out;
}

// ---- linear algebra ------------------------------------------------------

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ " + shape_of(a.value()) + " @ " +
                         shape_of(b.value()));
  Matrix out = a.value() * b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

Var transpose(Var a) {
  const auto ia = a.id();
  return a.tape().record(a.value().transpose(), {a},
                         [ia](Tape& t, const Matrix& g) { t.grad(ia) += g.transpose(); });
}

// ---- elementwise ---------------------------------------------------------

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  const auto ia = a.id(), ib = b.id();
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

Var scale(Var a, double factor) {
  const auto ia = a.id();
  return a.tape().record(a.value() * factor, {a},
                         [ia, factor](Tape& t, const Matrix& g) { t.grad(ia) += g * factor; });
}

Var add_scalar(Var a, double c) {
  const auto ia = a.id();
  Matrix out = a.value().array() + c;
  return a.tape().record(std::move(out), {a},
                         [ia](Tape& t, const Matrix& g) { t.grad(ia) += g; });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw DimensionError("add_row: " + shape_of(row.value()) + " is not a row for " +
                         shape_of(a.value()));
  const auto ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape().record(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ir)) t.grad(ir) += g.colwise().sum();
  });
}

Var add_tiled(Var a, Var b) {
  if (b.cols() != a.cols() || b.rows() == 0 || a.rows() % b.rows() != 0)
    throw DimensionError("add_tiled: cannot tile " + shape_of(b.value()) + " over " +
                         shape_of(a.value()));
  const Index block = b.rows(), reps = a.rows() / b.rows();
  Matrix out = a.value();
  for (Index r = 0; r < reps; ++r) out.middleRows(r * block, block) += b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, block, reps](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) {
      Matrix& gb = t.grad(ib);
      for (Index r = 0; r < reps; ++r) gb += g.middleRows(r * block, block);
    }
  });
}

Var abs(Var a) {
  const auto ia = a.id();
  return a.tape().record(a.value().cwiseAbs(), {a}, [ia](Tape& t, const Matrix& g) {
    // Subgradient 0 at the kink.
    t.grad(ia).array() += g.array() * t.value(ia).array().sign();
  });
}

Var square(Var a) {
  const auto ia = a.id();
  return a.tape().record(a.value().cwiseAbs2(), {a}, [ia](Tape& t, const Matrix& g) {
    t.grad(ia).array() += 2.0 * g.array() * t.value(ia).array();
  });
}

Var pow(Var a, int exponent) {
  if (exponent < 1) throw ContractError("pow: exponent must be >= 1");
  const auto ia = a.id();
  Matrix out = a.value().array().pow(static_cast<double>(exponent));
  return a.tape().record(std::move(out), {a}, [ia, exponent](Tape& t, const Matrix& g) {
    const auto x = t.value(ia).array();
    t.grad(ia).array() += g.array() * static_cast<double>(exponent) *
                          x.pow(static_cast<double>(exponent - 1));
  });
}

Var log(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().array().log();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.grad(ia).array() += g.array() / t.value(ia).array();
  });
}

Var xlogx(Var a) {
  const auto ia = a.id();
  Matrix out = a.value().unaryExpr([](double x) { return x > 0.0 ? x * std::log(x) : 0.0; });
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.grad(ia).array() +=
        g.array() * t.value(ia).array().unaryExpr([](double x) {
          return x > 0.0 ? std::log(x) + 1.0 : 0.0;
        });
  });
}

Var clamp_min(Var a, double floor) {
  const auto ia = a.id();
  Matrix out = a.value().cwiseMax(floor);
  return a.tape().record(std::move(out), {a}, [ia, floor](Tape& t, const Matrix& g) {
    t.grad(ia).array() += (t.value(ia).array() > floor).cast<double>() * g.array();
  });
}

Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double k = 0.044715;
  const auto ia = a.id();
  Matrix out = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); });
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.grad(ia).array() += g.array() * t.value(ia).array().unaryExpr([](double x) {
      const double th = std::tanh(c * (x + k * x * x * x));
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * k * x * x);
    });
  });
}

// ---- reductions ----------------------------------------------------------

Var sum(Var a) {
  const auto ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.grad(ia).array() += g(0, 0);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var column_mean(Var a) { return column_moment(a, 1); }

Var column_moment(Var a, int order) {
  if (order < 1) throw ContractError("column_moment: order must be >= 1");
  if (a.rows() == 0) throw ContractError("column_moment: no rows");
  const RowVector mu = tokalign::column_mean(a.value());
  Matrix out = order == 1 ? Matrix(mu) : Matrix(column_central_moment(a.value(), mu, order));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, order, mu](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(ia);
    const double n = static_cast<double>(x.rows());
    Matrix& gx = t.grad(ia);
    if (order == 1) {
      gx.rowwise() += g.row(0) / n;
      return;
    }
    // d m_k / d x_i = k/n * ((x_i - mu)^(k-1) - m_(k-1)), with m_1 = 0.
    const RowVector lower = order == 2 ? RowVector(RowVector::Zero(x.cols()))
                                       : RowVector(column_central_moment(x, mu, order - 1));
    const double kn = static_cast<double>(order) / n;
    for (Index r = 0; r < x.rows(); ++r) {
      auto dev = (x.row(r) - mu).array();
      gx.row(r).array() +=
          kn * g.row(0).array() * (dev.pow(static_cast<double>(order - 1)) - lower.array());
    }
  });
}

// ---- row-structured ops --------------------------------------------------

Var softmax_rows(Var a) {
  Matrix out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r).array() = (out.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  const auto ia = a.id();
  Matrix y = out;
  return a.tape().record(std::move(out), {a}, [ia, y = std::move(y)](Tape& t, const Matrix& g) {
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    t.grad(ia).array() += y.array() * (g.colwise() - dot).array();
  });
}

Var l2_normalize_rows(Var a) {
  const Eigen::VectorXd norms = a.value().rowwise().norm();
  if ((norms.array() == 0.0).any()) throw ContractError("l2_normalize_rows: zero-norm row");
  Matrix out = a.value().array().colwise() / norms.array();
  const auto ia = a.id();
  Matrix y = out;
  return a.tape().record(std::move(out), {a},
                         [ia, y = std::move(y), norms](Tape& t, const Matrix& g) {
                           const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
                           Matrix d = g - (y.array().colwise() * dot.array()).matrix();
                           t.grad(ia).array() += d.array().colwise() / norms.array();
                         });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = x.value();
  const Index d = xv.cols();
  if (d < 2) throw ContractError("layer_norm: needs at least 2 features");
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d)
    throw DimensionError("layer_norm: affine shapes " + shape_of(gamma.value()) + ", " +
                         shape_of(beta.value()) + " for " + shape_of(xv));
  Matrix xhat(xv.rows(), d);
  Eigen::VectorXd rstd(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    rstd(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * rstd(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, xhat = std::move(xhat), rstd](Tape& t, const Matrix& g) {
        if (t.requires_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
        if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
        if (!t.requires_grad(ix)) return;
        const Matrix dxhat = g.array().rowwise() * t.value(ig).row(0).array();
        const Eigen::VectorXd m1 = dxhat.rowwise().mean();
        const Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
        Matrix& gx = t.grad(ix);
        for (Index r = 0; r < g.rows(); ++r)
          gx.row(r).array() +=
              rstd(r) * (dxhat.row(r).array() - m1(r) - xhat.row(r).array() * m2(r));
      });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(labels.size()) != z.rows())
    throw DimensionError("cross_entropy: label count differs from row count");
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  for (Index r = 0; r < z.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= z.cols()) throw ContractError("cross_entropy: label out of range");
    const double m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp();
    const double s = probs.row(r).sum();
    probs.row(r) /= s;
    total += -(z(r, y) - m - std::log(s));
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(z.rows());
  std::vector<int> ys(labels.begin(), labels.end());
  const auto il = logits.id();
  return logits.tape().record(
      std::move(out), {logits},
      [il, probs = std::move(probs), ys = std::move(ys)](Tape& t, const Matrix& g) {
        Matrix d = probs;
        for (std::size_t r = 0; r < ys.size(); ++r) d(static_cast<Index>(r), ys[r]) -= 1.0;
        t.grad(il) += d * (g(0, 0) / static_cast<double>(ys.size()));
      });
}

Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw DimensionError("slice_rows: range out of bounds for " + shape_of(a.value()));
  const auto ia = a.id();
  return a.tape().record(a.value().middleRows(start, count), {a},
                         [ia, start, count](Tape& t, const Matrix& g) {
                           t.grad(ia).middleRows(start, count) += g;
                         });
}

Var gather_rows(Var a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, idx = std::move(idx)](Tape& t, const Matrix& g) {
                           Matrix& ga = t.grad(ia);
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             ga.row(idx[i]) += g.row(static_cast<Index>(i));
                         });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<std::size_t, Index>> layout;
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    layout.emplace_back(p.id(), at);
    at += p.rows();
  }
  return parts.front().tape().record(
      std::move(out), parts, [layout = std::move(layout)](Tape& t, const Matrix& g) {
        for (const auto& [id, start] : layout)
          if (t.requires_grad(id)) {
            Matrix& gp = t.grad(id);
            gp += g.middleRows(start, gp.rows());
          }
      });
}

Var assemble_sequences(Var cls, Var prompts, Var patches, Index n_seq) {
  const Index d = cls.cols();
  if (cls.rows() != 1 || prompts.cols() != d || patches.cols() != d)
    throw DimensionError("assemble_sequences: width mismatch");
  if (n_seq <= 0 || patches.rows() % n_seq != 0)
    throw DimensionError("assemble_sequences: patch rows not divisible by sequence count");
  const Index n_prompt = prompts.rows();
  const Index n_patch = patches.rows() / n_seq;
  const Index seq_len = 1 + n_prompt + n_patch;
  Matrix out(n_seq * seq_len, d);
  for (Index s = 0; s < n_seq; ++s) {
    const Index base = s * seq_len;
    out.row(base) = cls.value().row(0);
    out.middleRows(base + 1, n_prompt) = prompts.value();
    out.middleRows(base + 1 + n_prompt, n_patch) = patches.value().middleRows(s * n_patch, n_patch);
  }
  const auto ic = cls.id(), ip = prompts.id(), ix = patches.id();
  return cls.tape().record(
      std::move(out), {cls, prompts, patches},
      [=](Tape& t, const Matrix& g) {
        for (Index s = 0; s < n_seq; ++s) {
          const Index base = s * seq_len;
          if (t.requires_grad(ic)) t.grad(ic) += g.row(base);
          if (t.requires_grad(ip)) t.grad(ip) += g.middleRows(base + 1, n_prompt);
          if (t.requires_grad(ix))
            t.grad(ix).middleRows(s * n_patch, n_patch) += g.middleRows(base + 1 + n_prompt, n_patch);
        }
      });
}

Var replace_rows(Var x, Var prompts, Index seq_len, Index offset) {
  const Index n_prompt = prompts.rows();
  if (prompts.cols() != x.cols()) throw DimensionError("replace_rows: width mismatch");
  if (seq_len <= 0 || x.rows() % seq_len != 0 || offset + n_prompt > seq_len)
    throw DimensionError("replace_rows: layout does not fit " + shape_of(x.value()));
  const Index n_seq = x.rows() / seq_len;
  Matrix out = x.value();
  for (Index s = 0; s < n_seq; ++s) out.middleRows(s * seq_len + offset, n_prompt) = prompts.value();
  const auto ix = x.id(), ip = prompts.id();
  return x.tape().record(std::move(out), {x, prompts}, [=](Tape& t, const Matrix& g) {
    if (t.requires_grad(ix)) {
      Matrix& gx = t.grad(ix);
      for (Index r = 0; r < g.rows(); ++r) {
        const Index pos = r % seq_len;
        if (pos < offset || pos >= offset + n_prompt) gx.row(r) += g.row(r);
      }
    }
    if (t.requires_grad(ip)) {
      Matrix& gp = t.grad(ip);
      for (Index s = 0; s < n_seq; ++s) gp += g.middleRows(s * seq_len + offset, n_prompt);
    }
  });
}

Var attention(Var qkv, Index seq_len, Index n_heads, bool causal) {
  const Matrix& in = qkv.value();
  if (in.cols() % 3 != 0) throw DimensionError("attention: qkv width not divisible by 3");
  const Index d = in.cols() / 3;
  if (n_heads <= 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (seq_len <= 0 || in.rows() % seq_len != 0)
    throw DimensionError("attention: rows not divisible by sequence length");
  const Index n_seq = in.rows() / seq_len;
  const Index dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(in.rows(), d);
  // Attention weights for every (sequence, head), stacked vertically.
  Matrix weights(n_seq * n_heads * seq_len, seq_len);
  Matrix scores(seq_len, seq_len);
  for (Index s = 0; s < n_seq; ++s) {
    const Index r0 = s * seq_len;
    for (Index h = 0; h < n_heads; ++h) {
      const auto q = in.block(r0, h * dh, seq_len, dh);
      const auto k = in.block(r0, d + h * dh, seq_len, dh);
      const auto v = in.block(r0, 2 * d + h * dh, seq_len, dh);
      scores.noalias() = q * k.transpose();
      scores *= inv_sqrt;
      for (Index i = 0; i < seq_len; ++i) {
        const Index visible = causal ? i + 1 : seq_len;
        const double m = scores.row(i).head(visible).maxCoeff();
        scores.row(i).head(visible).array() = (scores.row(i).head(visible).array() - m).exp();
        if (visible < seq_len) scores.row(i).tail(seq_len - visible).setZero();
        scores.row(i) /= scores.row(i).sum();
      }
      weights.middleRows((s * n_heads + h) * seq_len, seq_len) = scores;
      out.block(r0, h * dh, seq_len, dh).noalias() = scores * v;
    }
  }
  const auto iq = qkv.id();
  return qkv.tape().record(
      std::move(out), {qkv},
      [=, weights = std::move(weights)](Tape& t, const Matrix& g) {
        const Matrix& x = t.value(iq);
        Matrix& gx = t.grad(iq);
        Matrix da(seq_len, seq_len), ds(seq_len, seq_len);
        for (Index s = 0; s < n_seq; ++s) {
          const Index r0 = s * seq_len;
          for (Index h = 0; h < n_heads; ++h) {
            const auto a = weights.middleRows((s * n_heads + h) * seq_len, seq_len);
            const auto q = x.block(r0, h * dh, seq_len, dh);
            const auto k = x.block(r0, d + h * dh, seq_len, dh);
            const auto v = x.block(r0, 2 * d + h * dh, seq_len, dh);
            const auto go = g.block(r0, h * dh, seq_len, dh);
            gx.block(r0, 2 * d + h * dh, seq_len, dh).noalias() += a.transpose() * go;
            da.noalias() = go * v.transpose();
            const Eigen::VectorXd dot = da.cwiseProduct(a).rowwise().sum();
            ds = (a.array() * (da.colwise() - dot).array()) * inv_sqrt;
            gx.block(r0, h * dh, seq_len, dh).noalias() += ds * k;
            gx.block(r0, d + h * dh, seq_len, dh).noalias() += ds.transpose() * q;
          }
        }
      });
}

}  // namespace tokalign::ad
