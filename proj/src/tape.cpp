#include "hivemil/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hivemil::ad {

Tape::Var Tape::push(Mat value, std::function<void(Tape&)> back) {
  Node n;
  n.grad = Mat::Zero(value.rows(), value.cols());
  n.value = std::move(value);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Var Tape::constant(Mat v) { return push(std::move(v), nullptr); }

Tape::Var Tape::param(const Mat& v) { return push(v, nullptr); }

Tape::Var Tape::add(Var a, Var b) {
  Var out = push(val(a) + val(b), nullptr);
  nodes_[out.id].back = [a, b, out](Tape& t) {
    t.grad_ref(a.id) += t.grad(out);
    t.grad_ref(b.id) += t.grad(out);
  };
  return out;
}

Tape::Var Tape::sub(Var a, Var b) {
  Var out = push(val(a) - val(b), nullptr);
  nodes_[out.id].back = [a, b, out](Tape& t) {
    t.grad_ref(a.id) += t.grad(out);
    t.grad_ref(b.id) -= t.grad(out);
  };
  return out;
}

Tape::Var Tape::scale(Var a, double s) {
  Var out = push(val(a) * s, nullptr);
  nodes_[out.id].back = [a, s, out](Tape& t) {
    t.grad_ref(a.id) += s * t.grad(out);
  };
  return out;
}

Tape::Var Tape::hadamard(Var a, Var b) {
  Var out = push(val(a).cwiseProduct(val(b)), nullptr);
  nodes_[out.id].back = [a, b, out](Tape& t) {
    t.grad_ref(a.id) += t.grad(out).cwiseProduct(t.val(b));
    t.grad_ref(b.id) += t.grad(out).cwiseProduct(t.val(a));
  };
  return out;
}

Tape::Var Tape::matmul(Var a, Var b) {
  Var out = push(val(a) * val(b), nullptr);
  nodes_[out.id].back = [a, b, out](Tape& t) {
    t.grad_ref(a.id) += t.grad(out) * t.val(b).transpose();
    t.grad_ref(b.id) += t.val(a).transpose() * t.grad(out);
  };
  return out;
}

Tape::Var Tape::transpose(Var a) {
  Var out = push(val(a).transpose(), nullptr);
  nodes_[out.id].back = [a, out](Tape& t) {
    t.grad_ref(a.id) += t.grad(out).transpose();
  };
  return out;
}

Tape::Var Tape::add_row_broadcast(Var a, Var row) {
  Mat v = val(a);
  v.rowwise() += val(row).row(0);
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, row, out](Tape& t) {
    t.grad_ref(a.id) += t.grad(out);
    t.grad_ref(row.id) += t.grad(out).colwise().sum();
  };
  return out;
}

Tape::Var Tape::colsum(Var a) {
  Mat v = val(a).colwise().sum();
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out](Tape& t) {
    t.grad_ref(a.id).rowwise() += t.grad(out).row(0);
  };
  return out;
}

Tape::Var Tape::leaky_relu(Var a, double slope) {
  const Mat& x = val(a);
  Mat v = x.unaryExpr([slope](double e) { return e > 0.0 ? e : slope * e; });
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, slope, out](Tape& t) {
    const Mat& x = t.val(a);
    const Mat& g = t.grad(out);
    Mat& da = t.grad_ref(a.id);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j)
        da(i, j) += (x(i, j) > 0.0 ? 1.0 : slope) * g(i, j);
  };
  return out;
}

Tape::Var Tape::tanh_op(Var a) {
  Mat v = val(a).array().tanh();
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out](Tape& t) {
    const Mat& y = t.val(out);
    t.grad_ref(a.id).array() +=
        t.grad(out).array() * (1.0 - y.array() * y.array());
  };
  return out;
}

Tape::Var Tape::log_sigmoid(Var a) {
  const Mat& x = val(a);
  Mat v = x.unaryExpr([](double e) {
    // stable log(sigmoid(e))
    return e >= 0.0 ? -std::log1p(std::exp(-e)) : e - std::log1p(std::exp(e));
  });
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out](Tape& t) {
    const Mat& x = t.val(a);
    // d/dx log sigmoid(x) = sigmoid(-x)
    Mat s = x.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(e)); });
    t.grad_ref(a.id).array() += t.grad(out).array() * s.array();
  };
  return out;
}

Tape::Var Tape::row_l2_normalize(Var a, double eps) {
  const Mat& x = val(a);
  Mat v = x;
  std::vector<double> norms(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double n = x.row(i).norm();
    norms[static_cast<std::size_t>(i)] = n;
    if (n > eps) v.row(i) /= n;
  }
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out, eps, norms](Tape& t) {
    const Mat& y = t.val(out);
    const Mat& g = t.grad(out);
    Mat& da = t.grad_ref(a.id);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      double n = norms[static_cast<std::size_t>(i)];
      if (n <= eps) {
        da.row(i) += g.row(i);
      } else {
        double yg = y.row(i).dot(g.row(i));
        da.row(i) += (g.row(i) - yg * y.row(i)) / n;
      }
    }
  };
  return out;
}

Tape::Var Tape::sum_all(Var a) {
  Mat v(1, 1);
  v(0, 0) = val(a).sum();
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out](Tape& t) {
    t.grad_ref(a.id).array() += t.grad(out)(0, 0);
  };
  return out;
}

Tape::Var Tape::mean_all(Var a) {
  double cnt = static_cast<double>(val(a).size());
  Mat v(1, 1);
  v(0, 0) = val(a).sum() / cnt;
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out, cnt](Tape& t) {
    t.grad_ref(a.id).array() += t.grad(out)(0, 0) / cnt;
  };
  return out;
}

Tape::Var Tape::gather_rows(Var a, std::vector<int> idx) {
  const Mat& x = val(a);
  Mat v(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out, idx = std::move(idx)](Tape& t) {
    const Mat& g = t.grad(out);
    Mat& da = t.grad_ref(a.id);
    for (std::size_t i = 0; i < idx.size(); ++i)
      da.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  };
  return out;
}

Tape::Var Tape::slice_cols(Var a, int c0, int len) {
  Mat v = val(a).middleCols(c0, len);
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out, c0, len](Tape& t) {
    t.grad_ref(a.id).middleCols(c0, len) += t.grad(out);
  };
  return out;
}

Tape::Var Tape::hstack(const std::vector<Var>& xs) {
  Eigen::Index rows = val(xs.front()).rows();
  Eigen::Index cols = 0;
  for (Var x : xs) cols += val(x).cols();
  Mat v(rows, cols);
  Eigen::Index c = 0;
  for (Var x : xs) {
    v.middleCols(c, val(x).cols()) = val(x);
    c += val(x).cols();
  }
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [xs, out](Tape& t) {
    Eigen::Index c = 0;
    for (Var x : xs) {
      Eigen::Index w = t.val(x).cols();
      t.grad_ref(x.id) += t.grad(out).middleCols(c, w);
      c += w;
    }
  };
  return out;
}

Tape::Var Tape::rowwise_dot(Var a, Var b) {
  const Mat& x = val(a);
  const Mat& y = val(b);
  Mat v(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) v(i, 0) = x.row(i).dot(y.row(i));
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, b, out](Tape& t) {
    const Mat& g = t.grad(out);
    const Mat& x = t.val(a);
    const Mat& y = t.val(b);
    Mat& da = t.grad_ref(a.id);
    Mat& db = t.grad_ref(b.id);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      da.row(i) += g(i, 0) * y.row(i);
      db.row(i) += g(i, 0) * x.row(i);
    }
  };
  return out;
}

Tape::Var Tape::segment_softmax(Var scores, std::vector<int> seg, int nseg) {
  const Mat& s = val(scores);
  Eigen::Index n = s.rows();
  std::vector<double> mx(static_cast<std::size_t>(nseg),
                         -std::numeric_limits<double>::infinity());
  for (Eigen::Index i = 0; i < n; ++i)
    mx[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])] =
        std::max(mx[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])], s(i, 0));
  std::vector<double> denom(static_cast<std::size_t>(nseg), 0.0);
  Mat v(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    int g = seg[static_cast<std::size_t>(i)];
    v(i, 0) = std::exp(s(i, 0) - mx[static_cast<std::size_t>(g)]);
    denom[static_cast<std::size_t>(g)] += v(i, 0);
  }
  for (Eigen::Index i = 0; i < n; ++i)
    v(i, 0) /= denom[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])];
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [scores, out, seg = std::move(seg), nseg](Tape& t) {
    const Mat& y = t.val(out);
    const Mat& g = t.grad(out);
    // ds_i = y_i * (g_i - sum_{j in seg} y_j g_j)
    std::vector<double> dot(static_cast<std::size_t>(nseg), 0.0);
    for (Eigen::Index i = 0; i < y.rows(); ++i)
      dot[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])] +=
          y(i, 0) * g(i, 0);
    Mat& ds = t.grad_ref(scores.id);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      int sg = seg[static_cast<std::size_t>(i)];
      ds(i, 0) += y(i, 0) * (g(i, 0) - dot[static_cast<std::size_t>(sg)]);
    }
  };
  return out;
}

Tape::Var Tape::segment_weighted_rowsum(Var w, Var rows, std::vector<int> seg,
                                        int nseg, int cols_hint) {
  const Mat& r = val(rows);
  Eigen::Index cols = r.cols() > 0 ? r.cols() : cols_hint;
  Mat v = Mat::Zero(nseg, cols);
  const Mat& ww = val(w);
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    v.row(seg[static_cast<std::size_t>(i)]) += ww(i, 0) * r.row(i);
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [w, rows, out, seg = std::move(seg)](Tape& t) {
    const Mat& g = t.grad(out);
    const Mat& r = t.val(rows);
    const Mat& ww = t.val(w);
    Mat& dw = t.grad_ref(w.id);
    Mat& dr = t.grad_ref(rows.id);
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
      int sg = seg[static_cast<std::size_t>(i)];
      dw(i, 0) += g.row(sg).dot(r.row(i));
      dr.row(i) += ww(i, 0) * g.row(sg);
    }
  };
  return out;
}

Tape::Var Tape::segment_mean_rows(Var rows, std::vector<int> seg, int nseg) {
  const Mat& r = val(rows);
  std::vector<double> deg(static_cast<std::size_t>(nseg), 0.0);
  for (int g : seg) deg[static_cast<std::size_t>(g)] += 1.0;
  Mat v = Mat::Zero(nseg, r.cols());
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    v.row(seg[static_cast<std::size_t>(i)]) +=
        r.row(i) / deg[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])];
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [rows, out, seg = std::move(seg), deg = std::move(deg)](Tape& t) {
    const Mat& g = t.grad(out);
    Mat& dr = t.grad_ref(rows.id);
    for (Eigen::Index i = 0; i < dr.rows(); ++i) {
      int sg = seg[static_cast<std::size_t>(i)];
      dr.row(i) += g.row(sg) / deg[static_cast<std::size_t>(sg)];
    }
  };
  return out;
}

Tape::Var Tape::topk_mean(Var a, const std::vector<std::pair<int, int>>& cands,
                          int k, std::vector<std::pair<int, int>>* chosen_out) {
  const Mat& x = val(a);
  std::vector<std::size_t> order(cands.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return x(cands[i].first, cands[i].second) > x(cands[j].first, cands[j].second);
  });
  std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), cands.size());
  std::vector<std::pair<int, int>> coords;
  coords.reserve(take);
  double sum = 0.0;
  for (std::size_t i = 0; i < take; ++i) {
    coords.push_back(cands[order[i]]);
    sum += x(coords.back().first, coords.back().second);
  }
  if (chosen_out) *chosen_out = coords;
  Mat v(1, 1);
  v(0, 0) = take > 0 ? sum / static_cast<double>(take) : 0.0;
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [a, out, coords = std::move(coords)](Tape& t) {
    if (coords.empty()) return;
    double g = t.grad(out)(0, 0) / static_cast<double>(coords.size());
    Mat& da = t.grad_ref(a.id);
    for (const auto& [ri, ci] : coords) da(ri, ci) += g;
  };
  return out;
}

Tape::Var Tape::softmax_cross_entropy(Var logits, int label) {
  const Mat& l = val(logits);
  double mx = l.maxCoeff();
  double lse = 0.0;
  for (Eigen::Index j = 0; j < l.cols(); ++j) lse += std::exp(l(0, j) - mx);
  lse = mx + std::log(lse);
  Mat v(1, 1);
  v(0, 0) = lse - l(0, label);
  Var out = push(std::move(v), nullptr);
  nodes_[out.id].back = [logits, out, label, lse](Tape& t) {
    const Mat& l = t.val(logits);
    double g = t.grad(out)(0, 0);
    Mat& dl = t.grad_ref(logits.id);
    for (Eigen::Index j = 0; j < l.cols(); ++j) {
      double p = std::exp(l(0, j) - lse);
      dl(0, j) += g * (p - (j == label ? 1.0 : 0.0));
    }
  };
  return out;
}

void Tape::backward(Var scalar_loss) {
  for (auto& n : nodes_) n.grad.setZero();
  nodes_[scalar_loss.id].grad(0, 0) = 1.0;
  for (int i = scalar_loss.id; i >= 0; --i) {
    if (nodes_[i].back && nodes_[i].grad.cwiseAbs().sum() != 0.0)
      nodes_[i].back(*this);
  }
}

}  // namespace hivemil::ad
