#include <doctest.h>

#include "hivemil/rng.hpp"
#include "hivemil/tape.hpp"

using namespace hivemil;
using Var = ad::Tape::Var;

namespace {

// Central finite differences of a scalar expression against tape gradients.
double max_fd_error(const std::vector<Mat>& inputs,
                    const std::function<Var(ad::Tape&, const std::vector<Var>&)>& build) {
  std::vector<Mat> work = inputs;
  auto eval = [&]() {
    ad::Tape t;
    std::vector<Var> vars;
    for (const Mat& m : work) vars.push_back(t.param(m));
    return t.val(build(t, vars))(0, 0);
  };

  ad::Tape t;
  std::vector<Var> vars;
  for (const Mat& m : work) vars.push_back(t.param(m));
  Var loss = build(t, vars);
  t.backward(loss);

  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (Eigen::Index i = 0; i < work[p].rows(); ++i)
      for (Eigen::Index j = 0; j < work[p].cols(); ++j) {
        const double saved = work[p](i, j);
        work[p](i, j) = saved + h;
        const double up = eval();
        work[p](i, j) = saved - h;
        const double down = eval();
        work[p](i, j) = saved;
        const double fd = (up - down) / (2 * h);
        const double an = t.grad(vars[p])(i, j);
        worst = std::max(worst, std::abs(fd - an) /
                                    std::max({std::abs(fd), std::abs(an), 1e-6}));
      }
  }
  return worst;
}

}  // namespace

TEST_CASE("tape gradients match finite differences on composite expressions") {
  Rng rng(1);
  Mat a = rng.gaussian_mat(3, 4);
  Mat b = rng.gaussian_mat(4, 3);
  Mat row = rng.gaussian_mat(1, 4);

  SUBCASE("linear algebra chain") {
    auto build = [](ad::Tape& t, const std::vector<Var>& v) {
      Var prod = t.matmul(v[0], v[1]);
      Var sym = t.hadamard(prod, t.transpose(prod));
      return t.sum_all(t.leaky_relu(sym, 0.2));
    };
    CHECK(max_fd_error({a, b}, build) < 1e-5);
  }

  SUBCASE("broadcast, normalize, log-sigmoid") {
    auto build = [](ad::Tape& t, const std::vector<Var>& v) {
      Var x = t.add_row_broadcast(v[0], v[1]);
      Var n = t.row_l2_normalize(x);
      return t.mean_all(t.log_sigmoid(t.scale(n, 3.0)));
    };
    CHECK(max_fd_error({a, row}, build) < 1e-5);
  }

  SUBCASE("gather, segment softmax, weighted scatter") {
    std::vector<int> seg = {0, 0, 1, 1, 1};
    std::vector<int> idx = {0, 1, 2, 0, 1};
    auto build = [&](ad::Tape& t, const std::vector<Var>& v) {
      Var rows = t.gather_rows(v[0], idx);
      Var scores = t.rowwise_dot(rows, rows);
      Var beta = t.segment_softmax(scores, seg, 2);
      Var pooled = t.segment_weighted_rowsum(beta, rows, seg, 2, 4);
      return t.sum_all(t.tanh_op(pooled));
    };
    CHECK(max_fd_error({a}, build) < 1e-5);
  }

  SUBCASE("segment mean, slices, hstack, colsum") {
    std::vector<int> seg = {0, 1, 0};
    auto build = [&](ad::Tape& t, const std::vector<Var>& v) {
      Var m = t.segment_mean_rows(v[0], seg, 2);
      Var c1 = t.slice_cols(m, 0, 2);
      Var c2 = t.slice_cols(m, 2, 2);
      Var joined = t.hstack({c2, c1});
      return t.sum_all(t.colsum(t.sub(joined, t.scale(joined, 0.5))));
    };
    CHECK(max_fd_error({a}, build) < 1e-5);
  }

  SUBCASE("topk mean and cross entropy") {
    std::vector<std::pair<int, int>> cands = {{0, 0}, {0, 1}, {1, 2}, {2, 3}, {2, 0}};
    auto build = [&](ad::Tape& t, const std::vector<Var>& v) {
      Var pick = t.topk_mean(v[0], cands, 3);
      Var logits = t.hstack({pick, t.scale(pick, -0.7), t.mean_all(v[0])});
      return t.softmax_cross_entropy(logits, 1);
    };
    CHECK(max_fd_error({a}, build) < 1e-5);
  }
}

TEST_CASE("segment softmax normalizes within every segment") {
  Rng rng(2);
  ad::Tape t;
  Mat scores = rng.gaussian_mat(7, 1);
  std::vector<int> seg = {0, 2, 1, 2, 0, 2, 1};
  Var beta = t.segment_softmax(t.constant(scores), seg, 3);
  std::vector<double> sums(3, 0.0);
  for (int i = 0; i < 7; ++i) sums[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])] += t.val(beta)(i, 0);
  for (double s : sums) CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("topk_mean breaks ties deterministically and clamps k") {
  ad::Tape t;
  Mat m(2, 2);
  m << 5.0, 5.0, 1.0, 5.0;
  std::vector<std::pair<int, int>> cands = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  std::vector<std::pair<int, int>> chosen;
  Var v = t.topk_mean(t.constant(m), cands, 2, &chosen);
  CHECK(t.val(v)(0, 0) == doctest::Approx(5.0));
  CHECK(chosen == std::vector<std::pair<int, int>>{{0, 0}, {0, 1}});

  Var all = t.topk_mean(t.constant(m), cands, 10);
  CHECK(t.val(all)(0, 0) == doctest::Approx(4.0));
}

TEST_CASE("row_l2_normalize guards zero rows") {
  ad::Tape t;
  Mat m(2, 3);
  m << 3.0, 4.0, 0.0, 0.0, 0.0, 0.0;
  Var n = t.row_l2_normalize(t.constant(m));
  CHECK(t.val(n)(0, 0) == doctest::Approx(0.6));
  CHECK(t.val(n)(0, 1) == doctest::Approx(0.8));
  CHECK(t.val(n).row(1).norm() == 0.0);
}
