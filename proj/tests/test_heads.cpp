#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ramdg/heads.hpp"

using namespace ramdg;

namespace {

Tensor<double> random_tensor(size_t r, size_t c, uint64_t seed, double scl = 1.0) {
  Tensor<double> t(r, c);
  Rng rng(seed);
  for (size_t i = 0; i < t.size(); ++i) t[i] = scl * rng.normal();
  return t;
}

template <class T>
void set_identity(Var<T> w) {
  auto& t = w.value_mut();
  t.fill(T(0));
  for (size_t i = 0; i < std::min(t.rows(), t.cols()); ++i) t.at(i, i) = T(1);
}

template <class T>
void make_identity_mha(Mha<T>& m) {
  set_identity(m.q.w);
  set_identity(m.k.w);
  set_identity(m.v.w);
  set_identity(m.o.w);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("cross-modal fusion keeps the visual length and mixes in text") {
  ParamStore<double> ps(11);
  auto fuse = CrossModalFusion<double>::create(ps, 8, 2);

  Var<double> vf = Var<double>::param(random_tensor(5, 8, 1));
  Var<double> lf = Var<double>::param(random_tensor(3, 8, 2));
  Var<double> m = fuse(vf, lf);
  REQUIRE(m.rows() == 5);
  REQUIRE(m.cols() == 8);

  backward(sum_all(hadamard(m, m)));
  double gv = 0, gl = 0;
  for (size_t i = 0; i < vf.grad().size(); ++i) gv += std::abs(vf.grad()[i]);
  for (size_t i = 0; i < lf.grad().size(); ++i) gl += std::abs(lf.grad()[i]);
  REQUIRE(gv > 0.0);
  REQUIRE(gl > 0.0);

  Var<double> narrow = Var<double>::constant(random_tensor(3, 4, 3));
  REQUIRE_THROWS_AS(fuse(vf, narrow), ConfigError);
}

TEST_CASE("cross-modal fusion over a single text row copies its value vector") {
  ParamStore<double> ps(12);
  auto fuse = CrossModalFusion<double>::create(ps, 8, 2);
  make_identity_mha(fuse.att);

  Var<double> vf = Var<double>::constant(random_tensor(4, 8, 4));
  Var<double> one = Var<double>::constant(random_tensor(1, 8, 5));
  Var<double> m = fuse(vf, one);
  for (size_t i = 0; i < 4; ++i)
    for (size_t j = 0; j < 8; ++j) REQUIRE(m.value().at(i, j) == one.value().at(0, j));
}

TEST_CASE("patch head shapes and the zero-weight midpoint") {
  ParamStore<double> ps(13);
  auto head = PatchHead<double>::create(ps, 8);

  Var<double> pats = Var<double>::constant(random_tensor(6, 8, 6));
  Var<double> lg = head.logits(pats);
  Var<double> rf = head.refined(pats);
  REQUIRE(lg.rows() == 6);
  REQUIRE(lg.cols() == 1);
  REQUIRE(rf.rows() == 6);
  REQUIRE(rf.cols() == 8);

  head.mlp.fc3.w.value_mut().fill(0.0);
  head.mlp.fc3.b.value_mut().fill(0.0);
  Var<double> probs = sigmoid(head.logits(pats));
  for (size_t i = 0; i < 6; ++i) REQUIRE(probs.value()[i] == 0.5);
}

TEST_CASE("patch labels from bbox match geometry and a rasterization oracle") {
  auto quad = patch_labels_from_bbox({0.0, 0.0, 0.5, 0.5}, 2, 2);
  REQUIRE(quad == std::vector<int>{1, 0, 0, 0});
  auto zero = patch_labels_from_bbox({0.0, 0.0, 0.0, 0.0}, 2, 2);
  REQUIRE(zero == std::vector<int>{0, 0, 0, 0});

  Rng rng(77);
  const size_t G = 8, R = 800;
  for (int trial = 0; trial < 100; ++trial) {
    double x1 = double(rng.uniform_int(90)) / 100.0;
    double y1 = double(rng.uniform_int(90)) / 100.0;
    double x2 = x1 + double(1 + rng.uniform_int(size_t(100 - x1 * 100 - 1))) / 100.0;
    double y2 = y1 + double(1 + rng.uniform_int(size_t(100 - y1 * 100 - 1))) / 100.0;
    auto labels = patch_labels_from_bbox({x1, y1, x2, y2}, G, G);

    std::vector<int> counts(G * G, 0);
    for (size_t py = 0; py < R; ++py)
      for (size_t px = 0; px < R; ++px) {
        double x = (double(px) + 0.5) / R, y = (double(py) + 0.5) / R;
        if (x > x1 && x < x2 && y > y1 && y < y2)
          ++counts[(size_t(y * G)) * G + size_t(x * G)];
      }
    for (size_t i = 0; i < G * G; ++i) REQUIRE(labels[i] == (counts[i] > 0 ? 1 : 0));
  }
}

TEST_CASE("summed binary cross-entropy hits its closed forms") {
  Tensor<double> zero4(4, 1);
  Var<double> at_half = bce_sum_logits(Var<double>::constant(zero4), {1, 0, 1, 0});
  REQUIRE(at_half.value()[0] == Catch::Approx(4.0 * std::log(2.0)).epsilon(1e-12));

  Tensor<double> two(2, 1);
  two[0] = logit(0.9);
  two[1] = logit(0.2);
  Var<double> hand = bce_sum_logits(Var<double>::constant(two), {1, 0});
  REQUIRE(hand.value()[0] ==
          Catch::Approx(-std::log(0.9) - std::log(0.8)).epsilon(1e-12));

  Tensor<double> sure(3, 1);
  sure[0] = 1000.0;
  sure[1] = -1000.0;
  sure[2] = 1000.0;
  REQUIRE(bce_sum_logits(Var<double>::constant(sure), {1, 0, 1}).value()[0] == 0.0);

  double eps = 0.05;
  size_t C = 6;
  Tensor<double> confident(C, 1);
  std::vector<int> y = {1, 0, 0, 1, 1, 0};
  for (size_t i = 0; i < C; ++i) confident[i] = y[i] ? logit(1.0 - eps) : logit(eps);
  double bound = double(C) * 2.0 * eps;
  REQUIRE(bce_sum_logits(Var<double>::constant(confident), y).value()[0] <= bound);

  REQUIRE_THROWS_AS(bce_sum_logits(Var<double>::constant(two), {1}), ConfigError);
  REQUIRE_THROWS_AS(bce_sum_logits(Var<double>::constant(two), {1, 2}), ConfigError);
}

TEST_CASE("visual refiner condenses to the query-bank size") {
  ParamStore<double> ps(14);
  auto r = VisualRefiner<double>::create(ps, 8, 2, 5);

  for (size_t pats : {size_t(4), size_t(16)}) {
    Var<double> m = Var<double>::constant(random_tensor(pats + 1, 8, 20 + pats));
    Var<double> p = Var<double>::constant(random_tensor(pats, 8, 30 + pats));
    Var<double> v = Var<double>::constant(random_tensor(pats + 1, 8, 40 + pats));
    Var<double> out = r(m, p, v);
    REQUIRE(out.rows() == 5);
    REQUIRE(out.cols() == 8);
    REQUIRE(out.value().all_finite());
  }

  Var<double> m = Var<double>::constant(random_tensor(5, 8, 50));
  Var<double> p = Var<double>::constant(random_tensor(4, 8, 51));
  REQUIRE_THROWS_AS(r(m, p, Var<double>::constant(random_tensor(6, 8, 52))), ConfigError);
  REQUIRE_THROWS_AS(r(m, Var<double>::constant(random_tensor(3, 8, 53)),
                      Var<double>::constant(random_tensor(5, 8, 54))),
                    ConfigError);
}

TEST_CASE("zero raw vision degenerates the refiner residual to the fused stream") {
  ParamStore<double> ps(15);
  auto r = VisualRefiner<double>::create(ps, 8, 2, 3);
  Var<double> m = Var<double>::constant(random_tensor(5, 8, 60));
  Var<double> p = Var<double>::constant(random_tensor(4, 8, 61));
  Var<double> zeros = Var<double>::constant(Tensor<double>(5, 8));

  Var<double> out = r(m, p, zeros);
  Var<double> summary = r.local(slice_rows(m, 0, 1), p);
  Var<double> manual = r.merge(r.collect(r.queries, summary), m);
  REQUIRE(out.value().vec() == manual.value().vec());
}

TEST_CASE("refiner summary over a single patch copies that patch under identity maps") {
  ParamStore<double> ps(16);
  auto r = VisualRefiner<double>::create(ps, 8, 2, 3);
  make_identity_mha(r.local);
  Var<double> cls = Var<double>::constant(random_tensor(1, 8, 70));
  Var<double> pat = Var<double>::constant(random_tensor(1, 8, 71));
  Var<double> summary = r.local(cls, pat);
  for (size_t j = 0; j < 8; ++j) REQUIRE(summary.value()[j] == pat.value()[j]);
}

TEST_CASE("bbox decoding is the algebraic inverse of center-size encoding") {
  Tensor<double> zeros(1, 4);
  Var<double> mid = bbox_decode_logits(Var<double>::constant(zeros));
  REQUIRE(mid.value()[0] == 0.25);
  REQUIRE(mid.value()[1] == 0.25);
  REQUIRE(mid.value()[2] == 0.75);
  REQUIRE(mid.value()[3] == 0.75);

  Rng rng(88);
  for (int t = 0; t < 200; ++t) {
    double w = 0.05 + 0.5 * rng.uniform();
    double h = 0.05 + 0.5 * rng.uniform();
    double cx = w / 2 + (1.0 - w) * rng.uniform() * 0.999 + 0.0005;
    double cy = h / 2 + (1.0 - h) * rng.uniform() * 0.999 + 0.0005;
    cx = std::min(std::max(cx, w / 2 + 1e-3), 1.0 - w / 2 - 1e-3);
    cy = std::min(std::max(cy, h / 2 + 1e-3), 1.0 - h / 2 - 1e-3);
    Tensor<double> lg(1, 4);
    lg[0] = logit(cx);
    lg[1] = logit(cy);
    lg[2] = logit(w);
    lg[3] = logit(h);
    Var<double> corners = bbox_decode_logits(Var<double>::constant(lg));
    REQUIRE(corners.value()[0] == Catch::Approx(cx - w / 2).margin(1e-6));
    REQUIRE(corners.value()[1] == Catch::Approx(cy - h / 2).margin(1e-6));
    REQUIRE(corners.value()[2] == Catch::Approx(cx + w / 2).margin(1e-6));
    REQUIRE(corners.value()[3] == Catch::Approx(cy + h / 2).margin(1e-6));
    REQUIRE(corners.value()[0] <= corners.value()[2]);
    REQUIRE(corners.value()[1] <= corners.value()[3]);
  }

  ParamStore<double> ps(17);
  auto head = BboxHead<double>::create(ps, 8);
  Var<double> bank = Var<double>::constant(random_tensor(5, 8, 80));
  Var<double> out = head(bank);
  REQUIRE(out.rows() == 1);
  REQUIRE(out.cols() == 4);
  REQUIRE(out.value()[0] <= out.value()[2]);
  REQUIRE(out.value()[1] <= out.value()[3]);
}

TEST_CASE("bbox loss: identity, worked case, degenerate target, monotone sweep") {
  Tensor<double> same(1, 4);
  same[0] = 0.2;
  same[1] = 0.3;
  same[2] = 0.7;
  same[3] = 0.9;
  REQUIRE(bbox_loss(Var<double>::constant(same), {0.2, 0.3, 0.7, 0.9}).value()[0] == 0.0);

  Tensor<double> p(1, 4);
  p[2] = 1.0 / 3.0;
  p[3] = 1.0 / 3.0;
  double expect = 8.0 / 3.0 + 16.0 / 9.0;
  REQUIRE(bbox_loss(Var<double>::constant(p), {2.0 / 3.0, 2.0 / 3.0, 1.0, 1.0}).value()[0] ==
          Catch::Approx(expect).epsilon(1e-12));

  Tensor<double> q(1, 4);
  q[0] = 0.25;
  q[1] = 0.25;
  q[2] = 0.75;
  q[3] = 0.75;
  REQUIRE(bbox_loss(Var<double>::constant(q), {0.0, 0.0, 0.0, 0.0}).value()[0] == 2.0);

  double prev = -1.0;
  for (int k = 0; k <= 10; ++k) {
    double t = 0.04 * k;
    Tensor<double> s(1, 4);
    s[0] = 0.3 + t;
    s[1] = 0.3;
    s[2] = 0.6 + t;
    s[3] = 0.6;
    double loss = bbox_loss(Var<double>::constant(s), {0.3, 0.3, 0.6, 0.6}).value()[0];
    REQUIRE(loss >= prev);
    prev = loss;
  }

  Rng rng(99);
  for (int t = 0; t < 200; ++t) {
    Tensor<double> a(1, 4);
    double ax1 = rng.uniform() * 0.8, ay1 = rng.uniform() * 0.8;
    a[0] = ax1;
    a[1] = ay1;
    a[2] = ax1 + 0.01 + (1.0 - ax1 - 0.01) * rng.uniform();
    a[3] = ay1 + 0.01 + (1.0 - ay1 - 0.01) * rng.uniform();
    double bx1 = rng.uniform() * 0.8, by1 = rng.uniform() * 0.8;
    std::array<double, 4> b = {bx1, by1, bx1 + 0.01 + (1.0 - bx1 - 0.01) * rng.uniform(),
                               by1 + 0.01 + (1.0 - by1 - 0.01) * rng.uniform()};
    REQUIRE(bbox_loss(Var<double>::constant(a), b).value()[0] >= 0.0);
  }
}

TEST_CASE("bbox gradients through decode and loss match finite differences") {
  ParamStore<double> ps(18);
  Var<double> lg = ps.create("box_logits", 1, 4, Init::Zero);
  lg.value_mut()[0] = 0.1;
  lg.value_mut()[1] = -0.2;
  lg.value_mut()[2] = -1.0;
  lg.value_mut()[3] = -0.8;
  auto build = [&]() {
    return bbox_loss(bbox_decode_logits(ps.get("box_logits")), {0.3, 0.2, 0.7, 0.9});
  };
  Rng rng(5);
  auto stats = grad_check(ps, {"box_logits"}, build, 1e-3, 4, rng);
  REQUIRE(stats.coords_checked == 4);
  REQUIRE(stats.max_rel_err < 1e-4);
}

TEST_CASE("token localizer scores every caption token") {
  ParamStore<double> ps(19);
  auto tl = TokenLocalizer<double>::create(ps, 8, 2);
  Var<double> lt = Var<double>::constant(random_tensor(7, 8, 90));
  Var<double> vf = Var<double>::constant(random_tensor(5, 8, 91));
  Var<double> mc = Var<double>::constant(random_tensor(1, 8, 92));
  Var<double> lg = tl.logits(lt, vf, mc);
  REQUIRE(lg.rows() == 7);
  REQUIRE(lg.cols() == 1);

  Var<double> loss = bce_sum_logits(lg, std::vector<int>(7, 0));
  REQUIRE(loss.value().all_finite());
  REQUIRE_THROWS_AS(bce_sum_logits(lg, std::vector<int>(6, 0)), ConfigError);

  Tensor<double> zeros(2, 1);
  REQUIRE(bce_sum_logits(Var<double>::constant(zeros), {1, 1}).value()[0] ==
          Catch::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("token context pass adds the same fused summary to every row") {
  ParamStore<double> ps(20);
  auto tl = TokenLocalizer<double>::create(ps, 8, 2);
  make_identity_mha(tl.ctx);

  Var<double> lt = Var<double>::constant(random_tensor(6, 8, 93));
  Var<double> vf = Var<double>::constant(random_tensor(4, 8, 94));
  Var<double> mc = Var<double>::constant(random_tensor(1, 8, 95));

  Var<double> grounded = tl.vis(lt, vf);
  Var<double> ctxed = tl.ctx(grounded, mc);
  for (size_t i = 0; i < 6; ++i)
    for (size_t j = 0; j < 8; ++j) REQUIRE(ctxed.value().at(i, j) == mc.value()[j]);

  Var<double> feats = tl.features(lt, vf, mc);
  for (size_t i = 0; i < 6; ++i)
    for (size_t j = 0; j < 8; ++j)
      REQUIRE(feats.value().at(i, j) ==
              Catch::Approx(grounded.value().at(i, j) + mc.value()[j]).epsilon(1e-12));
}

TEST_CASE("binary head softmax with closed-form cross-entropies") {
  ParamStore<double> ps(21);
  auto bh = BinaryHead<double>::create(ps, 8);
  Var<double> mc = Var<double>::constant(random_tensor(1, 8, 96));
  Var<double> pr = bh.probs(mc);
  REQUIRE(pr.value()[0] + pr.value()[1] == Catch::Approx(1.0).epsilon(1e-12));

  Tensor<double> lg(1, 2);
  lg[0] = 0.0;
  lg[1] = std::log(3.0);
  REQUIRE(softmax_ce(Var<double>::constant(lg), 1).value()[0] ==
          Catch::Approx(-std::log(0.75)).epsilon(1e-12));
  Tensor<double> even(1, 2);
  REQUIRE(softmax_ce(Var<double>::constant(even), 0).value()[0] ==
          Catch::Approx(std::log(2.0)).epsilon(1e-12));
  REQUIRE_THROWS_AS(softmax_ce(Var<double>::constant(lg), 2), ConfigError);

  bh.mlp.fc2.w.value_mut().fill(0.0);
  Var<double> mid = bh.probs(mc);
  REQUIRE(mid.value()[0] == 0.5);
  REQUIRE(mid.value()[1] == 0.5);

  Tensor<double> scaled = lg;
  for (size_t i = 0; i < 2; ++i) scaled[i] *= 3.0;
  auto argmax = [](const Tensor<double>& t) { return t[1] > t[0] ? 1 : 0; };
  Var<double> p1 = softmax_rows(Var<double>::constant(lg));
  Var<double> p2 = softmax_rows(Var<double>::constant(scaled));
  REQUIRE(argmax(p1.value()) == argmax(p2.value()));
}

TEST_CASE("type head: three independent sigmoids and their losses") {
  ParamStore<double> ps(22);
  auto th = TypeHead<double>::create(ps, 8);
  Var<double> mc = Var<double>::constant(random_tensor(1, 8, 97));
  Var<double> pr = th.probs(mc);
  REQUIRE(pr.cols() == 3);
  for (size_t j = 0; j < 3; ++j) {
    REQUIRE(pr.value()[j] > 0.0);
    REQUIRE(pr.value()[j] < 1.0);
  }

  Tensor<double> half(1, 3);
  REQUIRE(bce_sum_logits(Var<double>::constant(half), {0, 0, 0}).value()[0] ==
          Catch::Approx(3.0 * std::log(2.0)).epsilon(1e-12));

  Tensor<double> tenth(1, 3);
  for (size_t j = 0; j < 3; ++j) tenth[j] = logit(0.1);
  REQUIRE(bce_sum_logits(Var<double>::constant(tenth), {0, 0, 0}).value()[0] ==
          Catch::Approx(-3.0 * std::log(0.9)).epsilon(1e-12));

  Tensor<double> sharp(1, 3);
  sharp[0] = logit(1.0 - 1e-9);
  sharp[1] = logit(1e-9);
  sharp[2] = logit(1.0 - 1e-9);
  REQUIRE(bce_sum_logits(Var<double>::constant(sharp), {1, 0, 1}).value()[0] < 1e-8);
}

TEST_CASE("total loss adds six finite terms and rejects bad ones") {
  auto c = [](double v) {
    Tensor<double> t(1, 1, v);
    return Var<double>::constant(std::move(t));
  };
  LossTerms<double> terms{c(0.1), c(0.2), c(0.3), c(0.4), c(0.5), c(0.6)};
  REQUIRE(total_loss(terms).value()[0] == Catch::Approx(2.1).epsilon(1e-12));

  LossTerms<double> bad = terms;
  bad.bbox = c(std::numeric_limits<double>::infinity());
  REQUIRE_THROWS_AS(total_loss(bad), NumericError);
  LossTerms<double> missing = terms;
  missing.token = Var<double>();
  REQUIRE_THROWS_AS(total_loss(missing), ConfigError);
}

TEST_CASE("gradients through the whole head stack match finite differences") {
  ParamStore<double> ps(23);
  const size_t d = 8, heads = 2, q = 3, C = 4, n_tok = 5;
  auto fuse = CrossModalFusion<double>::create(ps, d, heads);
  auto patch = PatchHead<double>::create(ps, d);
  auto refiner = VisualRefiner<double>::create(ps, d, heads, q);
  auto bbox = BboxHead<double>::create(ps, d);
  auto tok = TokenLocalizer<double>::create(ps, d, heads);
  auto bin = BinaryHead<double>::create(ps, d);
  auto type = TypeHead<double>::create(ps, d);

  ps.create("x.v", C + 1, d, Init::TruncNormal, 0.5);
  ps.create("x.lf", n_tok + 3, d, Init::TruncNormal, 0.5);
  ps.create("x.lt", n_tok, d, Init::TruncNormal, 0.5);

  std::vector<int> y_pat = {1, 0, 0, 1};
  std::vector<int> y_tok = {0, 1, 0, 0, 1};
  std::array<double, 4> y_box = {0.3, 0.2, 0.7, 0.9};

  auto build = [&]() {
    Var<double> v = ps.get("x.v");
    Var<double> lf = ps.get("x.lf");
    Var<double> lt = ps.get("x.lt");
    Var<double> vf = v;  // celeb fusion exercised elsewhere
    Var<double> m = fuse(vf, lf);
    Var<double> v_pat = slice_rows(v, 1, C + 1);
    Var<double> m_cls = slice_rows(m, 0, 1);
    LossTerms<double> t;
    t.contrastive = Var<double>::constant(Tensor<double>(1, 1));
    t.patch = bce_sum_logits(patch.logits(v_pat), y_pat);
    Var<double> bank = refiner(m, patch.refined(v_pat), v);
    t.bbox = bbox_loss(bbox(bank), y_box);
    t.token = bce_sum_logits(tok.logits(lt, vf, m_cls), y_tok);
    t.binary = softmax_ce(bin.logits(m_cls), 1);
    t.type = bce_sum_logits(type.logits(m_cls), {1, 0, 1});
    return total_loss(t);
  };

  std::vector<std::string> names = {"x.v",
                                    "x.lf",
                                    "x.lt",
                                    "xfuse.q.w",
                                    "xfuse.o.b",
                                    "patch_head.fc1.w",
                                    "patch_head.fc3.b",
                                    "refiner.queries",
                                    "refiner.local.k.w",
                                    "refiner.merge.v.w",
                                    "bbox_head.fc2.w",
                                    "tok_vis.q.w",
                                    "tok_ctx.v.w",
                                    "tok_head.fc2.b",
                                    "bin_head.fc1.w",
                                    "type_head.fc2.w"};
  Rng rng(6);
  auto stats = grad_check(ps, names, build, 1e-3, 6, rng);
  INFO("worst param: " << stats.worst_param);
  REQUIRE(stats.coords_checked > 70);
  REQUIRE(stats.max_rel_err < 1e-4);
}
