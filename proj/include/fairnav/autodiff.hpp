#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fairnav::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Named trainable tensor. Gradients accumulate until zero_grad().
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  Parameter() = default;
  Parameter(std::string n, Matrix<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix<T>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Row ranges of a packed ragged batch: sample b owns rows
/// [offsets[b], offsets[b + 1]).
struct Segments {
  std::vector<int> offsets{0};

  int count() const { return static_cast<int>(offsets.size()) - 1; }
  int rows() const { return offsets.back(); }
  int begin(int b) const { return offsets[static_cast<std::size_t>(b)]; }
  int size(int b) const {
    return offsets[static_cast<std::size_t>(b) + 1] - offsets[static_cast<std::size_t>(b)];
  }
  void push(int n) { offsets.push_back(offsets.back() + n); }
};

struct Var {
  int id{-1};
};

/// Reverse-mode tape over dense row-major matrices. One tape per forward
/// pass; parameter leaves reference their storage instead of copying it.
template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;

  Var constant(Mat value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  /// Leaf bound to `p`. When `trainable`, backward() adds into p.grad.
  Var param(Parameter<T>& p, bool trainable = true) {
    Node n;
    n.ref = &p.value;
    if (trainable) {
      n.param = &p;
      n.requires_grad = true;
    }
    return push(std::move(n));
  }

  /// Leaf whose gradient is kept on the tape (for input-gradient checks).
  Var variable(Mat value) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
  }

  const Mat& value(Var v) const { return node(v).val(); }
  /// Gradient after backward(); zero matrix when none reached this node.
  Mat grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return Mat::Zero(n.val().rows(), n.val().cols());
    return n.grad;
  }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // ---- linear algebra -----------------------------------------------------

  Var matmul(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    if (A.cols() != B.rows()) throw ShapeError("matmul: inner dimensions differ");
    Mat out = A * B;
    return op(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
      if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
    });
  }

  /// x * W + b with b broadcast over rows.
  Var affine(Var x, Var w, Var b) {
    const Mat& X = value(x);
    const Mat& W = value(w);
    const Mat& B = value(b);
    if (X.cols() != W.rows()) throw ShapeError("affine: input width does not match weights");
    if (B.rows() != 1 || B.cols() != W.cols()) throw ShapeError("affine: bias shape");
    Mat out(X.rows(), W.cols());
    out.noalias() = X * W;
    out.rowwise() += B.row(0);
    return op(std::move(out), {x, w, b}, [x, w, b](Tape& t, const Mat& g) {
      if (t.requires_grad(x)) t.accumulate(x, g * t.value(w).transpose());
      if (t.requires_grad(w)) t.accumulate(w, t.value(x).transpose() * g);
      if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
    });
  }

  // ---- elementwise ----------------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return op(value(a) + value(b), {a, b}, [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return op(value(a) - value(b), {a, b}, [a, b](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      t.accumulate(b, -g);
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    return op(value(a).cwiseProduct(value(b)), {a, b}, [a, b](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
      if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
    });
  }

  Var scale(Var a, T s) {
    return op(value(a) * s, {a}, [a, s](Tape& t, const Mat& g) { t.accumulate(a, g * s); });
  }

  Var add_scalar(Var a, T s) {
    Mat out = value(a).array() + s;
    return op(std::move(out), {a}, [a](Tape& t, const Mat& g) { t.accumulate(a, g); });
  }

  /// a (B x n) times column c (B x 1), broadcast across columns.
  Var mul_col(Var a, Var c) {
    const Mat& A = value(a);
    const Mat& C = value(c);
    if (C.cols() != 1 || C.rows() != A.rows()) throw ShapeError("mul_col: shape");
    Mat out = A.array().colwise() * C.col(0).array();
    return op(std::move(out), {a, c}, [a, c](Tape& t, const Mat& g) {
      if (t.requires_grad(a)) {
        Mat ga = g.array().colwise() * t.value(c).col(0).array();
        t.accumulate(a, ga);
      }
      if (t.requires_grad(c)) t.accumulate(c, g.cwiseProduct(t.value(a)).rowwise().sum());
    });
  }

  /// a (B x n) plus column c (B x 1), broadcast across columns.
  Var add_col(Var a, Var c) {
    const Mat& A = value(a);
    const Mat& C = value(c);
    if (C.cols() != 1 || C.rows() != A.rows()) throw ShapeError("add_col: shape");
    Mat out = A.colwise() + C.col(0);
    return op(std::move(out), {a, c}, [a, c](Tape& t, const Mat& g) {
      t.accumulate(a, g);
      if (t.requires_grad(c)) t.accumulate(c, g.rowwise().sum());
    });
  }

  Var relu(Var a) {
    Mat out = value(a).cwiseMax(T(0));
    return op(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      Mat ga = (t.value(a).array() > T(0)).select(g.array(), T(0));
      t.accumulate(a, ga);
    });
  }

  Var tanh(Var a) {
    Mat out = value(a).array().tanh();
    const int self = next_id();
    return op(std::move(out), {a}, [a, self](Tape& t, const Mat& g) {
      const Mat& y = t.nodes_[static_cast<std::size_t>(self)].val();
      Mat ga = g.array() * (T(1) - y.array().square());
      t.accumulate(a, ga);
    });
  }

  Var exp(Var a) {
    Mat out = value(a).array().exp();
    const int self = next_id();
    return op(std::move(out), {a}, [a, self](Tape& t, const Mat& g) {
      t.accumulate(a, g.cwiseProduct(t.nodes_[static_cast<std::size_t>(self)].val()));
    });
  }

  Var log(Var a) {
    Mat out = value(a).array().log();
    return op(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      Mat ga = g.array() / t.value(a).array();
      t.accumulate(a, ga);
    });
  }

  /// log(1 + e^x), evaluated without overflow.
  Var softplus(Var a) {
    const Mat& A = value(a);
    Mat out = A.cwiseMax(T(0)).array() + (-A.array().abs()).exp().log1p();
    return op(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      Mat sig = (T(1) + (-t.value(a).array()).exp()).inverse();
      t.accumulate(a, g.cwiseProduct(sig));
    });
  }

  Var square(Var a) {
    Mat out = value(a).array().square();
    return op(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      t.accumulate(a, T(2) * g.cwiseProduct(t.value(a)));
    });
  }

  Var minimum(Var a, Var b) {
    same_shape(a, b, "minimum");
    Mat out = value(a).cwiseMin(value(b));
    return op(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
      const auto take_a = (t.value(a).array() <= t.value(b).array());
      if (t.requires_grad(a)) t.accumulate(a, Mat(take_a.select(g.array(), T(0))));
      if (t.requires_grad(b)) t.accumulate(b, Mat(take_a.select(T(0), g.array())));
    });
  }

  Var clamp(Var a, T lo, T hi) {
    Mat out = value(a).cwiseMax(lo).cwiseMin(hi);
    return op(std::move(out), {a}, [a, lo, hi](Tape& t, const Mat& g) {
      const auto& x = t.value(a).array();
      Mat ga = ((x >= lo) && (x <= hi)).select(g.array(), T(0));
      t.accumulate(a, ga);
    });
  }

  // ---- row-wise reductions and structure ------------------------------------

  Var softmax_rows(Var a) {
    Mat out = softmax(value(a));
    const int self = next_id();
    return op(std::move(out), {a}, [a, self](Tape& t, const Mat& g) {
      const Mat& y = t.nodes_[static_cast<std::size_t>(self)].val();
      Mat dot = g.cwiseProduct(y).rowwise().sum();
      Mat ga = y.array() * (g.colwise() - dot.col(0)).array();
      t.accumulate(a, ga);
    });
  }

  Var log_softmax_rows(Var a) {
    const Mat& A = value(a);
    Mat lse(A.rows(), 1);
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      const T m = A.row(r).maxCoeff();
      lse(r, 0) = m + std::log((A.row(r).array() - m).exp().sum());
    }
    Mat out = A.colwise() - lse.col(0);
    return op(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      const Mat p = softmax(t.value(a));
      Mat gs = g.rowwise().sum();
      Mat ga = g - Mat(p.array().colwise() * gs.col(0).array());
      t.accumulate(a, ga);
    });
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const Eigen::Index rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
      cols += value(p).cols();
    }
    Mat out(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      out.middleCols(c, value(p).cols()) = value(p);
      c += value(p).cols();
    }
    std::vector<Var> in(parts.begin(), parts.end());
    return op(std::move(out), in, [in](Tape& t, const Mat& g) {
      Eigen::Index off = 0;
      for (Var p : in) {
        const Eigen::Index w = t.value(p).cols();
        if (t.requires_grad(p)) t.accumulate(p, g.middleCols(off, w));
        off += w;
      }
    });
  }

  Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
  }

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    const Mat& A = value(a);
    if (start < 0 || start + count > A.cols()) throw ShapeError("slice_cols: out of range");
    Mat out = A.middleCols(start, count);
    return op(std::move(out), {a}, [a, start, count](Tape& t, const Mat& g) {
      Mat ga = Mat::Zero(t.value(a).rows(), t.value(a).cols());
      ga.middleCols(start, count) = g;
      t.accumulate(a, ga);
    });
  }

  /// Row sums: B x n -> B x 1.
  Var sum_cols(Var a) {
    Mat out = value(a).rowwise().sum();
    return op(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      Mat ga = g.col(0).replicate(1, t.value(a).cols());
      t.accumulate(a, ga);
    });
  }

  Var sum(Var a) {
    Mat out(1, 1);
    out(0, 0) = value(a).sum();
    return op(std::move(out), {a}, [a](Tape& t, const Mat& g) {
      t.accumulate(a, Mat::Constant(t.value(a).rows(), t.value(a).cols(), g(0, 0)));
    });
  }

  Var mean(Var a) {
    const auto n = static_cast<T>(value(a).size());
    return scale(sum(a), T(1) / n);
  }

  /// Column `index[r]` of each row r: B x k -> B x 1.
  Var pick(Var a, std::vector<int> index) {
    const Mat& A = value(a);
    if (static_cast<Eigen::Index>(index.size()) != A.rows()) throw ShapeError("pick: rows");
    Mat out(A.rows(), 1);
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      const int c = index[static_cast<std::size_t>(r)];
      if (c < 0 || c >= A.cols()) throw ShapeError("pick: column out of range");
      out(r, 0) = A(r, c);
    }
    return op(std::move(out), {a}, [a, index = std::move(index)](Tape& t, const Mat& g) {
      Mat ga = Mat::Zero(t.value(a).rows(), t.value(a).cols());
      for (Eigen::Index r = 0; r < ga.rows(); ++r) ga(r, index[static_cast<std::size_t>(r)]) = g(r, 0);
      t.accumulate(a, ga);
    });
  }

  // ---- set attention ----------------------------------------------------------

  /// Per-segment mean of packed rows: R x d -> B x d. Empty segments give 0.
  Var segment_mean(Var rows, const Segments& seg) {
    const Mat& X = value(rows);
    if (X.rows() != seg.rows()) throw ShapeError("segment_mean: row count");
    Mat out = Mat::Zero(seg.count(), X.cols());
    for (int b = 0; b < seg.count(); ++b) {
      const int n = seg.size(b);
      if (n == 0) continue;
      out.row(b) = X.middleRows(seg.begin(b), n).colwise().sum() / static_cast<T>(n);
    }
    return op(std::move(out), {rows}, [rows, seg](Tape& t, const Mat& g) {
      Mat gx(t.value(rows).rows(), t.value(rows).cols());
      for (int b = 0; b < seg.count(); ++b) {
        const int n = seg.size(b);
        for (int r = 0; r < n; ++r) gx.row(seg.begin(b) + r) = g.row(b) / static_cast<T>(n);
      }
      t.accumulate(rows, gx);
    });
  }

  /// One query per segment attending over that segment's keys/values:
  /// out_b = softmax(q_b K_b^T * scale) V_b. Empty segments give 0.
  Var segment_attention(Var query, Var keys, Var values, const Segments& seg, T scale) {
    const Mat& Q = value(query);
    const Mat& K = value(keys);
    const Mat& V = value(values);
    if (Q.rows() != seg.count() || K.rows() != seg.rows() || V.rows() != seg.rows() ||
        Q.cols() != K.cols()) {
      throw ShapeError("segment_attention: shapes");
    }
    Mat out = Mat::Zero(seg.count(), V.cols());
    Mat weights(seg.rows(), 1);
    for (int b = 0; b < seg.count(); ++b) {
      const int n = seg.size(b);
      if (n == 0) continue;
      const int s = seg.begin(b);
      Mat logits = (K.middleRows(s, n) * Q.row(b).transpose()) * scale;  // n x 1
      const T m = logits.maxCoeff();
      Mat e = (logits.array() - m).exp();
      e /= e.sum();
      weights.middleRows(s, n) = e;
      out.row(b) = e.transpose() * V.middleRows(s, n);
    }
    return op(std::move(out), {query, keys, values},
              [query, keys, values, seg, scale, weights](Tape& t, const Mat& g) {
                const Mat& Q = t.value(query);
                const Mat& K = t.value(keys);
                const Mat& V = t.value(values);
                Mat gq = Mat::Zero(Q.rows(), Q.cols());
                Mat gk = Mat::Zero(K.rows(), K.cols());
                Mat gv = Mat::Zero(V.rows(), V.cols());
                for (int b = 0; b < seg.count(); ++b) {
                  const int n = seg.size(b);
                  if (n == 0) continue;
                  const int s = seg.begin(b);
                  const auto a = weights.middleRows(s, n);           // n x 1
                  gv.middleRows(s, n) = a * g.row(b);                 // n x dv
                  Mat da = V.middleRows(s, n) * g.row(b).transpose();  // n x 1
                  const T avg = (a.array() * da.array()).sum();
                  Mat ds = a.array() * (da.array() - avg);             // n x 1
                  gq.row(b) = (ds.transpose() * K.middleRows(s, n)) * scale;
                  gk.middleRows(s, n) = ds * Q.row(b) * scale;
                }
                if (t.requires_grad(query)) t.accumulate(query, gq);
                if (t.requires_grad(keys)) t.accumulate(keys, gk);
                if (t.requires_grad(values)) t.accumulate(values, gv);
              });
  }

  // ---- backward ---------------------------------------------------------------

  /// Seeds d(loss)/d(loss) = 1 for a 1 x 1 loss and propagates.
  void backward(Var loss) {
    Node& l = node(loss);
    if (l.val().rows() != 1 || l.val().cols() != 1) throw ShapeError("backward: loss must be 1x1");
    if (!l.requires_grad) return;
    l.grad = Mat::Ones(1, 1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        const Mat g = n.grad;
        n.backward(*this, g);
      } else if (n.param != nullptr) {
        n.param->grad += n.grad;
      }
    }
  }

  static Mat softmax(const Mat& a) {
    Mat out(a.rows(), a.cols());
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      const T m = a.row(r).maxCoeff();
      out.row(r) = (a.row(r).array() - m).exp();
      out.row(r) /= out.row(r).sum();
    }
    return out;
  }

 private:
  using Backward = std::function<void(Tape&, const Mat&)>;

  struct Node {
    Mat owned;
    const Mat* ref{nullptr};
    Mat grad;
    Parameter<T>* param{nullptr};
    bool requires_grad{false};
    Backward backward;

    const Mat& val() const { return ref != nullptr ? *ref : owned; }
  };

  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
  int next_id() const { return static_cast<int>(nodes_.size()); }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var op(Mat out, std::initializer_list<Var> inputs, Backward bw) {
    return op(std::move(out), std::vector<Var>(inputs), std::move(bw));
  }

  Var op(Mat out, const std::vector<Var>& inputs, Backward bw) {
    Node n;
    n.owned = std::move(out);
    for (Var in : inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
    if (n.requires_grad) n.backward = std::move(bw);
    return push(std::move(n));
  }

  void accumulate(Var v, const Mat& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void same_shape(Var a, Var b, const char* what) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ShapeError(std::string(what) + ": shape mismatch");
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace fairnav::ad
