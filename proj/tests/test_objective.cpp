#include <doctest.h>

#include <cmath>

#include "hivemil/objective.hpp"
#include "hivemil/rng.hpp"

using namespace hivemil;
using Var = ad::Tape::Var;

namespace {

TextHierarchy small_hierarchy(int classes, int parents, int children, int dim,
                              std::uint64_t seed) {
  TextHierarchy h;
  h.num_classes = classes;
  h.parents_per_class = parents;
  h.children_per_parent = children;
  Rng rng(seed);
  h.base_parent_emb = rng.gaussian_mat(h.num_parents(), dim);
  h.base_child_emb = rng.gaussian_mat(h.num_children(), dim);
  h.context_low = Mat::Zero(1, dim);
  h.context_high = Mat::Zero(1, dim);
  return h;
}

}  // namespace

TEST_CASE("class_logits") {
  const double gamma = 4.6052;

  SUBCASE("one patch and one text per class gives gamma * sim") {
    ad::Tape t;
    Mat patch(1, 2);
    patch << 1.0, 0.0;
    Mat texts(2, 2);
    texts << 0.8, 0.6, 0.0, 1.0;
    Var logits = class_logits(t, t.constant(patch), t.constant(texts), {0, 1}, 2,
                              1, gamma);
    CHECK(t.val(logits)(0, 0) == doctest::Approx(gamma * 0.8));
    CHECK(t.val(logits)(0, 1) == doctest::Approx(gamma * 0.0));
  }

  SUBCASE("patches below the top-k never change the logits") {
    Rng rng(30);
    Mat patches = rng.gaussian_mat(4, 6);
    Mat texts = rng.gaussian_mat(4, 6);
    std::vector<int> cls = {0, 0, 1, 1};
    ad::Tape t1;
    Var a = class_logits(t1, t1.constant(patches), t1.constant(texts), cls, 2, 2, gamma);
    // append a patch orthogonal-ish and tiny so all its sims rank last
    Mat more(5, 6);
    more.topRows(4) = patches;
    more.row(4) = -10.0 * l2_normalize_rows(texts).colwise().sum();
    ad::Tape t2;
    Var b = class_logits(t2, t2.constant(more), t2.constant(texts), cls, 2, 2, gamma);
    CHECK((t1.val(a) - t2.val(b)).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("k beyond the candidate count means a plain mean") {
    Rng rng(31);
    Mat patches = rng.gaussian_mat(3, 5);
    Mat texts = rng.gaussian_mat(2, 5);
    std::vector<int> cls = {0, 1};
    ad::Tape t;
    Var logits = class_logits(t, t.constant(patches), t.constant(texts), cls, 2,
                              100, gamma);
    // brute-force mean of all class scores
    Mat pn = l2_normalize_rows(patches), tn = l2_normalize_rows(texts);
    for (int c = 0; c < 2; ++c) {
      double sum = 0.0;
      for (int i = 0; i < 3; ++i) sum += pn.row(i).dot(tn.row(c));
      CHECK(t.val(logits)(0, c) == doctest::Approx(gamma * sum / 3.0).epsilon(1e-12));
    }
  }

  SUBCASE("permutation invariance over patches and texts within a class") {
    Rng rng(32);
    Mat patches = rng.gaussian_mat(5, 4);
    Mat texts = rng.gaussian_mat(4, 4);
    std::vector<int> cls = {0, 1, 0, 1};
    ad::Tape t1;
    Var a = class_logits(t1, t1.constant(patches), t1.constant(texts), cls, 2, 3, gamma);

    Mat patches_r = patches.colwise().reverse().eval();
    Mat texts_sw = texts;
    texts_sw.row(0).swap(texts_sw.row(2));  // swap the two class-0 columns
    ad::Tape t2;
    Var b = class_logits(t2, t2.constant(patches_r), t2.constant(texts_sw), cls, 2,
                         3, gamma);
    CHECK((t1.val(a) - t2.val(b)).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("a class without text columns is a configuration error") {
    ad::Tape t;
    Mat p = Mat::Ones(1, 3), tx = Mat::Ones(1, 3);
    CHECK_THROWS_AS(class_logits(t, t.constant(p), t.constant(tx), {0}, 2, 1, gamma),
                    ConfigError);
  }
}

TEST_CASE("fuse_and_ce") {
  SUBCASE("uniform fused logits give ln C") {
    ad::Tape t;
    auto r2 = fuse_and_ce(t, t.constant(Mat::Constant(1, 2, 0.7)),
                          t.constant(Mat::Constant(1, 2, -0.7)), 1);
    CHECK(t.val(r2.ce)(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    auto r3 = fuse_and_ce(t, t.constant(Mat::Zero(1, 3)), t.constant(Mat::Zero(1, 3)), 2);
    CHECK(t.val(r3.ce)(0, 0) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("three-class case against an independent softmax") {
    Mat low(1, 3), high(1, 3);
    low << 0.4, -1.1, 2.0;
    high << -0.3, 0.9, 0.1;
    ad::Tape t;
    auto r = fuse_and_ce(t, t.constant(low), t.constant(high), 1);
    // long-double reference computation
    long double z0 = 0.1L, z1 = -0.2L, z2 = 2.1L;
    long double denom = expl(z0) + expl(z1) + expl(z2);
    long double expect = -logl(expl(z1) / denom);
    CHECK(t.val(r.ce)(0, 0) == doctest::Approx(static_cast<double>(expect)).epsilon(1e-12));
  }
  SUBCASE("argmax is invariant to constant shifts") {
    Rng rng(33);
    Mat low = rng.gaussian_mat(1, 4), high = rng.gaussian_mat(1, 4);
    ad::Tape t;
    auto r = fuse_and_ce(t, t.constant(low), t.constant(high), 0);
    auto rs = fuse_and_ce(t, t.constant(Mat(low.array() + 3.7)), t.constant(high), 0);
    int arg = 0, args = 0;
    for (int c = 1; c < 4; ++c) {
      if (t.val(r.fused)(0, c) > t.val(r.fused)(0, arg)) arg = c;
      if (t.val(rs.fused)(0, c) > t.val(rs.fused)(0, args)) args = c;
    }
    CHECK(arg == args);
  }
  SUBCASE("label out of range rejected") {
    ad::Tape t;
    auto z = t.constant(Mat::Zero(1, 2));
    CHECK_THROWS_AS(fuse_and_ce(t, z, z, 2), std::invalid_argument);
  }
}

TEST_CASE("htcl_loss") {
  const double two_ln2 = 2.0 * std::log(2.0);  // 1.3862943611198906

  SUBCASE("all-zero similarities give 2 ln 2 for every variant") {
    TextHierarchy h = small_hierarchy(2, 2, 2, 4, 34);
    Mat t_low = Mat::Zero(h.num_parents(), 4), t_high = Mat::Zero(h.num_children(), 4);
    Rng rng(35);
    for (int o = 0; o < h.num_parents(); ++o) {
      t_low(o, 0) = rng.gaussian();
      t_low(o, 1) = rng.gaussian();
    }
    for (int s = 0; s < h.num_children(); ++s) {
      t_high(s, 2) = rng.gaussian();
      t_high(s, 3) = rng.gaussian();
    }
    for (auto v : {HtclVariant::kClassWise, HtclVariant::kShareParent,
                   HtclVariant::kInstanceWise}) {
      ad::Tape t;
      Var loss = htcl_loss(t, t.constant(t_low), t.constant(t_high), h, v);
      CHECK(t.val(loss)(0, 0) == doctest::Approx(two_ln2).epsilon(1e-9));
    }
  }

  SUBCASE("perfect +1/-1 similarities give 2 * (-log sigmoid(1))") {
    // class 0 parents at +e0, class 1 parents at -e0, children aligned with
    // their class: every positive cosine is exactly +1, every negative -1
    TextHierarchy h = small_hierarchy(2, 2, 2, 4, 36);
    Mat t_low = Mat::Zero(h.num_parents(), 4), t_high = Mat::Zero(h.num_children(), 4);
    for (int o = 0; o < h.num_parents(); ++o)
      t_low(o, 0) = h.class_of_parent(o) == 0 ? 1.0 : -1.0;
    for (int s = 0; s < h.num_children(); ++s)
      t_high(s, 0) = h.class_of_child(s) == 0 ? 2.0 : -2.0;
    const double expect = 2.0 * (-std::log(1.0 / (1.0 + std::exp(-1.0))));
    CHECK(expect == doctest::Approx(0.6265233750364456).epsilon(1e-12));
    ad::Tape t;
    Var loss = htcl_loss(t, t.constant(t_low), t.constant(t_high), h,
                         HtclVariant::kClassWise);
    CHECK(t.val(loss)(0, 0) == doctest::Approx(expect).epsilon(1e-9));
  }

  SUBCASE("increasing one positive similarity strictly decreases the loss") {
    // geometry that exposes a single positive cosine as cos(theta) while all
    // other pair similarities stay fixed
    TextHierarchy h = small_hierarchy(3, 1, 1, 6, 37);
    auto build = [&](double theta) {
      Mat t_low = Mat::Zero(3, 6), t_high = Mat::Zero(3, 6);
      t_low(0, 0) = std::cos(theta);
      t_low(0, 1) = std::sin(theta);
      t_low(1, 2) = 1.0;
      t_low(2, 3) = 1.0;
      t_high(0, 0) = 1.0;
      t_high(1, 2) = 1.0;
      t_high(2, 3) = 1.0;
      ad::Tape t;
      return t.val(htcl_loss(t, t.constant(t_low), t.constant(t_high), h,
                             HtclVariant::kClassWise))(0, 0);
    };
    const double h_step = 1e-4;
    const double theta = 1.0;
    // smaller theta -> larger positive cosine -> smaller loss
    CHECK(build(theta - h_step) < build(theta));
    CHECK(build(theta + h_step) > build(theta));
  }

  SUBCASE("share-parent equals instance-wise when K = 1") {
    TextHierarchy h = small_hierarchy(2, 3, 1, 5, 39);
    Rng rng(40);
    Mat t_low = rng.gaussian_mat(h.num_parents(), 5);
    Mat t_high = rng.gaussian_mat(h.num_children(), 5);
    ad::Tape t;
    Var a = htcl_loss(t, t.constant(t_low), t.constant(t_high), h,
                      HtclVariant::kShareParent);
    Var b = htcl_loss(t, t.constant(t_low), t.constant(t_high), h,
                      HtclVariant::kInstanceWise);
    CHECK(std::abs(t.val(a)(0, 0) - t.val(b)(0, 0)) < 1e-12);
  }

  SUBCASE("class-wise with O = 1 reduces to instance-wise") {
    TextHierarchy h = small_hierarchy(2, 1, 3, 5, 41);
    Rng rng(42);
    Mat t_low = rng.gaussian_mat(h.num_parents(), 5);
    Mat t_high = rng.gaussian_mat(h.num_children(), 5);
    ad::Tape t;
    Var a = htcl_loss(t, t.constant(t_low), t.constant(t_high), h,
                      HtclVariant::kClassWise);
    Var b = htcl_loss(t, t.constant(t_low), t.constant(t_high), h,
                      HtclVariant::kInstanceWise);
    CHECK(std::abs(t.val(a)(0, 0) - t.val(b)(0, 0)) < 1e-12);
  }

  SUBCASE("strictly positive on random inputs") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      TextHierarchy h = small_hierarchy(3, 2, 2, 8, 100 + seed);
      Rng rng(200 + seed);
      Mat t_low = rng.gaussian_mat(h.num_parents(), 8);
      Mat t_high = rng.gaussian_mat(h.num_children(), 8);
      for (auto v : {HtclVariant::kClassWise, HtclVariant::kShareParent,
                     HtclVariant::kInstanceWise}) {
        ad::Tape t;
        CHECK(t.val(htcl_loss(t, t.constant(t_low), t.constant(t_high), h, v))(0, 0) > 0.0);
      }
    }
  }

  SUBCASE("a single class cannot form negative pairs") {
    TextHierarchy h = small_hierarchy(1, 2, 2, 4, 43);
    ad::Tape t;
    CHECK_THROWS_AS(htcl_loss(t, t.constant(Mat::Ones(2, 4)), t.constant(Mat::Ones(4, 4)),
                              h, HtclVariant::kClassWise),
                    ConfigError);
  }
}

TEST_CASE("total_loss") {
  ad::Tape t;
  Var ce = t.constant(Mat::Constant(1, 1, 1.0));
  Var ht = t.constant(Mat::Constant(1, 1, 2.0));

  CHECK(t.val(total_loss(t, ce, ht, 0.0))(0, 0) == doctest::Approx(1.0));
  CHECK(t.val(total_loss(t, ce, ht, 0.5))(0, 0) == doctest::Approx(2.0));

  // affine in lambda
  const double l0 = t.val(total_loss(t, ce, ht, 0.25))(0, 0);
  const double l1 = t.val(total_loss(t, ce, ht, 0.75))(0, 0);
  const double lm = t.val(total_loss(t, ce, ht, 0.5))(0, 0);
  CHECK(lm == doctest::Approx(0.5 * (l0 + l1)).epsilon(1e-12));

  CHECK_THROWS_AS(total_loss(t, ce, ht, -0.1), std::invalid_argument);
}
