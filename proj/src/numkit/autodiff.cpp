#include "clipseg/numkit/autodiff.hpp"

#include <cmath>
#include <string>
#include <unordered_set>

namespace clipseg {

using detail::Node;
using NodeList = std::vector<std::shared_ptr<Node>>;

namespace {

thread_local Tape* g_active_tape = nullptr;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

void require_row(const Var& a, const Var& row, const char* op) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument(std::string(op) + ": expected 1 x cols row");
}

void push(const std::shared_ptr<Node>& n, const Mat& g) {
  if (n->requires_grad) n->accumulate(g);
}

// Shared backward for normalizations: y = (x - mean) / sigma over one group.
// dx = (g - mean(g) - y * mean(g * y)) / sigma.
template <typename BlockOut, typename BlockG, typename BlockY>
void normalize_backward(BlockOut dx, const BlockG& g, const BlockY& y, double sigma) {
  const double n = static_cast<double>(g.size());
  const double mg = g.sum() / n;
  const double mgy = (g.array() * y.array()).sum() / n;
  dx = ((g.array() - mg - y.array() * mgy) / sigma).matrix();
}

}  // namespace

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

double Var::item() const {
  if (value().size() != 1) throw std::invalid_argument("item: value is not a scalar");
  return value()(0, 0);
}

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }
Tape::~Tape() { g_active_tape = previous_; }
Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }

std::vector<Mat> Tape::gradient(const Var& root, std::span<const Var> params) {
  if (!root.defined() || root.value().size() != 1) throw std::invalid_argument("gradient: root is not a scalar");
  for (const auto& p : params) {
    if (!p.requires_grad()) throw std::invalid_argument("gradient: parameter is detached from the tape");
  }
  for (auto& n : nodes_) {
    n->grad.resize(0, 0);
    for (auto& in : n->inputs) in->grad.resize(0, 0);
  }
  for (const auto& p : params) p.node()->grad.resize(0, 0);
  root.node()->grad = Mat::Ones(1, 1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.grad.size() != 0 && n.backward) n.backward(n.grad);
  }
  std::vector<Mat> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    const Mat& g = p.node()->grad;
    out.push_back(g.size() == 0 ? Mat::Zero(p.rows(), p.cols()) : g);
  }
  return out;
}

Var make_op(Mat value, std::vector<Var> inputs, std::function<void(const Mat&, const NodeList&)> backward) {
  if (!value.allFinite()) throw NumericalError("non-finite value produced by kernel");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  Tape* tape = Tape::active();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    Node* self = node.get();
    node->backward = [self, fn = std::move(backward)](const Mat& g) { fn(g, self->inputs); };
    tape->record(node);
  }
  return Var::from_node(std::move(node));
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  return make_op(kernels::matmul(a.value(), b.value()), {a, b}, [](const Mat& g, const NodeList& in) {
    if (in[0]->requires_grad) in[0]->accumulate(kernels::matmul(g, in[1]->value.transpose()));
    if (in[1]->requires_grad) in[1]->accumulate(kernels::matmul(in[0]->value.transpose(), g));
  });
}

Var transpose(const Var& a) {
  return make_op(a.value().transpose(), {a}, [](const Mat& g, const NodeList& in) { push(in[0], g.transpose()); });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b}, [](const Mat& g, const NodeList& in) {
    push(in[0], g);
    push(in[1], g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [](const Mat& g, const NodeList& in) {
    push(in[0], g);
    if (in[1]->requires_grad) in[1]->accumulate(-g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](const Mat& g, const NodeList& in) {
    if (in[0]->requires_grad) in[0]->accumulate(g.cwiseProduct(in[1]->value));
    if (in[1]->requires_grad) in[1]->accumulate(g.cwiseProduct(in[0]->value));
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  return make_op(a.value().cwiseQuotient(b.value()), {a, b}, [](const Mat& g, const NodeList& in) {
    const Mat& av = in[0]->value;
    const Mat& bv = in[1]->value;
    if (in[0]->requires_grad) in[0]->accumulate(g.cwiseQuotient(bv));
    if (in[1]->requires_grad) in[1]->accumulate(-(g.array() * av.array() / bv.array().square()).matrix());
  });
}

Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a}, [s](const Mat& g, const NodeList& in) { push(in[0], g * s); });
}

Var add_scalar(const Var& a, double s) {
  return make_op((a.value().array() + s).matrix(), {a}, [](const Mat& g, const NodeList& in) { push(in[0], g); });
}

Var add_row(const Var& a, const Var& row) {
  require_row(a, row, "add_row");
  Mat v = a.value();
  v.rowwise() += row.value().row(0);
  return make_op(std::move(v), {a, row}, [](const Mat& g, const NodeList& in) {
    push(in[0], g);
    if (in[1]->requires_grad) in[1]->accumulate(g.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  require_row(a, row, "mul_row");
  Mat v = a.value();
  v.array().rowwise() *= row.value().row(0).array();
  return make_op(std::move(v), {a, row}, [](const Mat& g, const NodeList& in) {
    if (in[0]->requires_grad) {
      Mat ga = g;
      ga.array().rowwise() *= in[1]->value.row(0).array();
      in[0]->accumulate(ga);
    }
    if (in[1]->requires_grad) in[1]->accumulate(g.cwiseProduct(in[0]->value).colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  return make_op(Mat::Constant(1, 1, a.value().sum()), {a}, [](const Mat& g, const NodeList& in) {
    push(in[0], Mat::Constant(in[0]->value.rows(), in[0]->value.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(const Var& a) {
  return make_op(a.value().rowwise().sum(), {a}, [](const Mat& g, const NodeList& in) {
    Mat ga(in[0]->value.rows(), in[0]->value.cols());
    ga.colwise() = g.col(0);
    push(in[0], ga);
  });
}

// ---------------------------------------------------------------------------
// Pointwise

Var exp(const Var& a) {
  Mat v = a.value().array().exp().matrix();
  return make_op(v, {a}, [v](const Mat& g, const NodeList& in) { push(in[0], g.cwiseProduct(v)); });
}

Var log(const Var& a) {
  if ((a.value().array() <= 0.0).any()) throw NumericalError("log: non-positive input");
  return make_op(a.value().array().log().matrix(), {a},
                 [](const Mat& g, const NodeList& in) { push(in[0], g.cwiseQuotient(in[0]->value)); });
}

Var sigmoid(const Var& a) {
  Mat s = kernels::sigmoid(a.value());
  return make_op(s, {a}, [s](const Mat& g, const NodeList& in) {
    push(in[0], (g.array() * s.array() * (1.0 - s.array())).matrix());
  });
}

Var silu(const Var& a) {
  return make_op(kernels::silu(a.value()), {a}, [](const Mat& g, const NodeList& in) {
    const Mat s = kernels::sigmoid(in[0]->value);
    const auto x = in[0]->value.array();
    push(in[0], (g.array() * s.array() * (1.0 + x * (1.0 - s.array()))).matrix());
  });
}

Var softplus(const Var& a) {
  return make_op(kernels::softplus(a.value()), {a},
                 [](const Mat& g, const NodeList& in) { push(in[0], g.cwiseProduct(kernels::sigmoid(in[0]->value))); });
}

Var square(const Var& a) {
  return make_op(a.value().array().square().matrix(), {a},
                 [](const Mat& g, const NodeList& in) { push(in[0], (2.0 * g.array() * in[0]->value.array()).matrix()); });
}

Var clamp(const Var& a, double lo, double hi) {
  return make_op(a.value().cwiseMax(lo).cwiseMin(hi), {a}, [lo, hi](const Mat& g, const NodeList& in) {
    const auto x = in[0]->value.array();
    push(in[0], ((x >= lo && x <= hi).cast<double>() * g.array()).matrix());
  });
}

// ---------------------------------------------------------------------------
// Normalizations

Var softmax_rows(const Var& a) {
  Mat p = kernels::softmax(a.value(), kernels::Axis::Cols);
  return make_op(p, {a}, [p](const Mat& g, const NodeList& in) {
    // dx = p * (g - <g, p>) per row
    const Eigen::VectorXd dots = g.cwiseProduct(p).rowwise().sum();
    Mat gx = g;
    gx.colwise() -= dots;
    push(in[0], gx.cwiseProduct(p));
  });
}

Var log_softmax_rows(const Var& a) {
  Mat ls = kernels::log_softmax(a.value());
  return make_op(ls, {a}, [ls](const Mat& g, const NodeList& in) {
    const Mat p = ls.array().exp().matrix();
    Mat gx = g;
    const Eigen::VectorXd gs = g.rowwise().sum();
    gx -= (p.array().colwise() * gs.array()).matrix();
    push(in[0], gx);
  });
}

Var group_normalize(const Var& x, Index groups, double eps) {
  Mat y = kernels::group_normalize(x.value(), groups, eps);
  const Index per = x.cols() / groups;
  std::vector<double> sigma(static_cast<std::size_t>(groups));
  for (Index k = 0; k < groups; ++k) {
    const auto block = x.value().middleCols(k * per, per);
    const double n = static_cast<double>(block.size());
    const double m = block.sum() / n;
    sigma[static_cast<std::size_t>(k)] = std::sqrt((block.array() - m).square().sum() / n + eps);
  }
  return make_op(y, {x}, [y, per, groups, sigma](const Mat& g, const NodeList& in) {
    if (!in[0]->requires_grad) return;
    Mat dx(g.rows(), g.cols());
    for (Index k = 0; k < groups; ++k) {
      normalize_backward(dx.middleCols(k * per, per), g.middleCols(k * per, per), y.middleCols(k * per, per),
                         sigma[static_cast<std::size_t>(k)]);
    }
    in[0]->accumulate(dx);
  });
}

Var layer_normalize(const Var& x, double eps) {
  Mat y = kernels::layer_normalize(x.value(), eps);
  Eigen::VectorXd sigma(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r);
    const double n = static_cast<double>(row.size());
    const double m = row.sum() / n;
    sigma(r) = std::sqrt((row.array() - m).square().sum() / n + eps);
  }
  return make_op(y, {x}, [y, sigma](const Mat& g, const NodeList& in) {
    if (!in[0]->requires_grad) return;
    Mat dx(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) normalize_backward(dx.row(r), g.row(r), y.row(r), sigma(r));
    in[0]->accumulate(dx);
  });
}

Var group_norm(const Var& x, Index groups, const Var& scale, const Var& shift) {
  return add_row(mul_row(group_normalize(x, groups), scale), shift);
}

Var layer_norm(const Var& x, const Var& scale, const Var& shift) {
  return add_row(mul_row(layer_normalize(x), scale), shift);
}

Var conv1d_depthwise(const Var& x, const Var& kernel, kernels::Padding padding) {
  Mat y = kernels::conv1d_depthwise(x.value(), kernel.value(), padding);
  const Index width = kernel.rows();
  const Index offset = padding == kernels::Padding::Same ? (width - 1) / 2 : width - 1;
  return make_op(std::move(y), {x, kernel}, [width, offset](const Mat& g, const NodeList& in) {
    const Mat& xv = in[0]->value;
    const Mat& kv = in[1]->value;
    const Index len = xv.rows();
    Mat gx = Mat::Zero(xv.rows(), xv.cols());
    Mat gk = Mat::Zero(kv.rows(), kv.cols());
    for (Index s = 0; s < len; ++s) {
      for (Index j = 0; j < width; ++j) {
        const Index src = s + j - offset;
        if (src < 0 || src >= len) continue;
        gx.row(src).array() += kv.row(j).array() * g.row(s).array();
        gk.row(j).array() += xv.row(src).array() * g.row(s).array();
      }
    }
    push(in[0], gx);
    push(in[1], gk);
  });
}

// ---------------------------------------------------------------------------
// Structural

Var gather_rows(const Var& x, std::span<const Index> rows) {
  Mat v(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw std::out_of_range("gather_rows: index out of range");
    v.row(static_cast<Index>(i)) = x.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_op(std::move(v), {x}, [idx = std::move(idx)](const Mat& g, const NodeList& in) {
    if (!in[0]->requires_grad) return;
    Mat gx = Mat::Zero(in[0]->value.rows(), in[0]->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) gx.row(idx[i]) += g.row(static_cast<Index>(i));
    in[0]->accumulate(gx);
  });
}

Var gather_flat(const Var& x, std::span<const Index> index, Index rows, Index cols) {
  if (static_cast<Index>(index.size()) != rows * cols) throw std::invalid_argument("gather_flat: index size mismatch");
  Mat v(rows, cols);
  const double* src = x.value().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.value().size()) throw std::out_of_range("gather_flat: index out of range");
    v.data()[i] = src[index[i]];
  }
  std::vector<Index> idx(index.begin(), index.end());
  return make_op(std::move(v), {x}, [idx = std::move(idx)](const Mat& g, const NodeList& in) {
    if (!in[0]->requires_grad) return;
    Mat gx = Mat::Zero(in[0]->value.rows(), in[0]->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) gx.data()[idx[i]] += g.data()[i];
    in[0]->accumulate(gx);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  Mat v(total, parts[0].cols());
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op(std::move(v), std::vector<Var>(parts.begin(), parts.end()),
                 [offsets = std::move(offsets)](const Mat& g, const NodeList& in) {
                   for (std::size_t i = 0; i < in.size(); ++i) {
                     if (in[i]->requires_grad) in[i]->accumulate(g.middleRows(offsets[i], in[i]->value.rows()));
                   }
                 });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
  }
  Mat v(parts[0].rows(), total);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op(std::move(v), std::vector<Var>(parts.begin(), parts.end()),
                 [offsets = std::move(offsets)](const Mat& g, const NodeList& in) {
                   for (std::size_t i = 0; i < in.size(); ++i) {
                     if (in[i]->requires_grad) in[i]->accumulate(g.middleCols(offsets[i], in[i]->value.cols()));
                   }
                 });
}

Var slice_rows(const Var& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw std::out_of_range("slice_rows: range out of bounds");
  return make_op(x.value().middleRows(begin, count), {x}, [begin](const Mat& g, const NodeList& in) {
    if (!in[0]->requires_grad) return;
    Mat gx = Mat::Zero(in[0]->value.rows(), in[0]->value.cols());
    gx.middleRows(begin, g.rows()) = g;
    in[0]->accumulate(gx);
  });
}

Var slice_cols(const Var& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) throw std::out_of_range("slice_cols: range out of bounds");
  return make_op(x.value().middleCols(begin, count), {x}, [begin](const Mat& g, const NodeList& in) {
    if (!in[0]->requires_grad) return;
    Mat gx = Mat::Zero(in[0]->value.rows(), in[0]->value.cols());
    gx.middleCols(begin, g.cols()) = g;
    in[0]->accumulate(gx);
  });
}

}  // namespace clipseg
