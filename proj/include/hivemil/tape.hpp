#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "hivemil/common.hpp"

namespace hivemil::ad {

// Reverse-mode tape over dense double matrices. A tape is built fresh for
// every forward pass (graph topology changes per training step), so nodes are
// append-only and backward() walks them in reverse creation order.
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Var constant(Mat v);
  // Leaf whose gradient is accumulated by backward().
  Var param(const Mat& v);

  const Mat& val(Var v) const { return nodes_[v.id].value; }
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  // --- elementwise / linear ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double s);
  Var hadamard(Var a, Var b);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  // Adds a 1 x C row to every row of a.
  Var add_row_broadcast(Var a, Var row);
  // 1 x C column sums.
  Var colsum(Var a);
  Var leaky_relu(Var a, double slope);
  Var tanh_op(Var a);
  Var log_sigmoid(Var a);
  Var row_l2_normalize(Var a, double eps = kNormEps);
  Var sum_all(Var a);   // 1x1
  Var mean_all(Var a);  // 1x1

  // --- structural ---
  Var gather_rows(Var a, std::vector<int> idx);
  Var slice_cols(Var a, int c0, int len);
  Var hstack(const std::vector<Var>& xs);
  // n x d, n x d -> n x 1 per-row dot products.
  Var rowwise_dot(Var a, Var b);
  // Softmax over entries sharing a segment id (scores: n x 1).
  Var segment_softmax(Var scores, std::vector<int> seg, int nseg);
  // out[g] = sum_{i: seg[i]==g} w(i) * rows.row(i); w: n x 1.
  Var segment_weighted_rowsum(Var w, Var rows, std::vector<int> seg, int nseg,
                              int cols_hint = -1);
  // out[g] = mean of rows with seg==g; empty segments give zero rows.
  Var segment_mean_rows(Var rows, std::vector<int> seg, int nseg);

  // --- reductions with data-dependent selection ---
  // Mean of the k largest entries of a among the given candidate coordinates
  // (all candidates if k >= count). Ties break toward the earlier candidate.
  Var topk_mean(Var a, const std::vector<std::pair<int, int>>& cands, int k,
                std::vector<std::pair<int, int>>* chosen = nullptr);
  // -log softmax(logits)(label); logits: 1 x C.
  Var softmax_cross_entropy(Var logits, int label);

  void backward(Var scalar_loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Tape&)> back;  // empty for leaves/constants
  };

  Var push(Mat value, std::function<void(Tape&)> back);
  Mat& grad_ref(int id) { return nodes_[id].grad; }

  std::vector<Node> nodes_;
};

}  // namespace hivemil::ad
