#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ramdg/model.hpp"

using namespace ramdg;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.enc.d = 16;
  c.enc.heads = 2;
  c.enc.depth = 1;
  c.enc.text_depth = 1;
  c.enc.patch = 8;
  c.enc.image_size = 32;
  c.enc.mlp_ratio = 2;
  c.enc.vocab_size = 40;
  c.enc.max_len = 24;
  c.queries = 3;
  return c;
}

Image noise_image(size_t h, size_t w, uint64_t seed) {
  Image img(h, w);
  Rng rng(seed);
  for (auto& v : img.px) v = float(rng.uniform());
  return img;
}

template <class T>
bool all_finite(const Var<T>& v) {
  for (size_t i = 0; i < v.value().size(); ++i)
    if (!std::isfinite(double(v.value()[i]))) return false;
  return true;
}

template <class T>
double unit_norm_gap(const Var<T>& row) {
  double s = 0;
  for (size_t j = 0; j < row.cols(); ++j) s += double(row.value().at(0, j)) * double(row.value().at(0, j));
  return std::abs(std::sqrt(s) - 1.0);
}

struct Fixture {
  ModelConfig cfg = tiny_config();
  Model<double> model{cfg, 99};
  Image news = noise_image(32, 32, 1);
  Image card_a = noise_image(16, 16, 2);
  Image card_b = noise_image(16, 16, 3);

  SampleView with_cards() const {
    SampleView s;
    s.image = &news;
    s.caption = {1, 2, 3, 4, 5};
    s.noted.tokens = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    s.noted.boundary = 5;
    s.card_ids = {7, 9};
    s.card_images = {&card_a, &card_b};
    s.card_notes = {{6, 7}, {8, 9, 10}};
    return s;
  }

  SampleView bare() const {
    SampleView s;
    s.image = &news;
    s.caption = {1, 2, 3, 4, 5};
    s.noted.tokens = s.caption;
    s.noted.boundary = 5;
    return s;
  }
};

}  // namespace

TEST_CASE("forward produces the contract shapes") {
  Fixture fx;
  Forward<double> f = fx.model.forward(fx.with_cards());

  CHECK(f.V.full.rows() == 17);  // 16 patches + cls
  CHECK(f.V_f.rows() == 17);
  CHECK(f.V_f.cols() == 16);
  CHECK(f.L_f.full.rows() == 11);  // 10 tokens + cls
  CHECK(f.L.full.rows() == 6);
  CHECK(f.M.rows() == 17);
  CHECK(f.m_cls.rows() == 1);
  CHECK(f.patch_logits.rows() == 16);
  CHECK(f.patch_logits.cols() == 1);
  CHECK(f.bank.rows() == 3);  // refined to the query slots
  CHECK(f.bbox.rows() == 1);
  CHECK(f.bbox.cols() == 4);
  for (size_t j = 0; j < 4; ++j) {
    CHECK(f.bbox.value().at(0, j) >= 0.0);
    CHECK(f.bbox.value().at(0, j) <= 1.0);
  }
  CHECK(f.tok_logits.rows() == 5);
  CHECK(f.bin_logits.cols() == 2);
  CHECK(f.type_logits.cols() == 3);

  REQUIRE(f.anchors.size() == 2);
  for (const auto& a : f.anchors) {
    REQUIRE(a.v_anchor.defined());
    REQUIRE(a.t_anchor.defined());
    CHECK(unit_norm_gap(a.v_anchor) < 1e-9);
    CHECK(unit_norm_gap(a.t_anchor) < 1e-9);
  }
  CHECK(f.anchors[0].celeb_id == 7);
  CHECK(f.anchors[1].celeb_id == 9);
  REQUIRE(f.news_v_m.defined());
  REQUIRE(f.news_t_m.defined());
  CHECK(unit_norm_gap(f.news_v_m) < 1e-9);
  CHECK(unit_norm_gap(f.news_t_m) < 1e-9);
  CHECK_FALSE(f.news_v_m.requires_grad());
  CHECK_FALSE(f.news_t_m.requires_grad());
}

TEST_CASE("refiner switch reroutes the box bank") {
  Fixture fx;
  AblationFlags off;
  off.refiner = false;
  Forward<double> f = fx.model.forward(fx.with_cards(), off);

  CHECK(f.bank.rows() == 17);
  for (size_t i = 0; i < f.bank.value().size(); ++i)
    CHECK(f.bank.value()[i] == f.M.value()[i]);

  Forward<double> g = fx.model.forward(fx.with_cards());
  bool same = true;
  for (size_t j = 0; j < 4; ++j)
    if (f.bbox.value().at(0, j) != g.bbox.value().at(0, j)) same = false;
  CHECK_FALSE(same);
}

TEST_CASE("zero retrieved cards keep every output finite") {
  Fixture fx;
  Forward<double> f = fx.model.forward(fx.bare());

  CHECK(f.anchors.empty());
  REQUIRE(f.news_v_m.defined());  // still pushed, tagged with no celebrity
  for (const Var<double>* v : {&f.V_f, &f.M, &f.patch_logits, &f.bbox, &f.tok_logits,
                               &f.bin_logits, &f.type_logits, &f.news_v_m, &f.news_t_m})
    CHECK(all_finite(*v));
}

TEST_CASE("withheld card images drop the visual anchors only") {
  Fixture fx;
  SampleView s = fx.with_cards();
  s.card_images.clear();  // image knowledge withheld; notes still present
  Forward<double> f = fx.model.forward(s);

  REQUIRE(f.anchors.size() == 2);
  for (const auto& a : f.anchors) {
    CHECK_FALSE(a.v_anchor.defined());
    REQUIRE(a.t_anchor.defined());
  }

  CnclBatch<double> cb;
  cb.news_v = {f.news_v_m};
  cb.news_t = {f.news_t_m};
  for (auto a : f.anchors) {
    a.sample = 0;
    cb.anchors.push_back(a);
  }
  FeatureQueue<double> iq(4, 16), tq(4, 16);
  Temperature<double> temp = Temperature<double>::from_store(fx.model.ps);
  Var<double> loss = cncl_total(cb, iq.snapshot(), tq.snapshot(), temp);
  CHECK(std::isfinite(loss.value()[0]));
  CHECK(loss.value()[0] == 0.0);  // positives only: text-direction rows score zero
}

TEST_CASE("forward rejects inconsistent views") {
  Fixture fx;
  SampleView s = fx.with_cards();
  s.card_notes.pop_back();
  CHECK_THROWS_AS(fx.model.forward(s), ConfigError);

  SampleView t = fx.with_cards();
  t.card_images.pop_back();
  CHECK_THROWS_AS(fx.model.forward(t), ConfigError);

  SampleView u = fx.bare();
  u.caption.clear();
  u.noted.tokens.clear();
  CHECK_THROWS_AS(fx.model.forward(u), DataError);

  SampleView v = fx.bare();
  v.image = nullptr;
  CHECK_THROWS_AS(fx.model.forward(v), ConfigError);
}

TEST_CASE("identical seeds build identical models") {
  Fixture fx;
  Model<double> twin(fx.cfg, 99);
  Forward<double> a = fx.model.forward(fx.with_cards());
  Forward<double> b = twin.forward(fx.with_cards());
  for (size_t j = 0; j < 2; ++j)
    CHECK(a.bin_logits.value().at(0, j) == b.bin_logits.value().at(0, j));
  for (size_t j = 0; j < 4; ++j) CHECK(a.bbox.value().at(0, j) == b.bbox.value().at(0, j));

  Model<double> other(fx.cfg, 100);
  Forward<double> c = other.forward(fx.with_cards());
  bool same = true;
  for (size_t j = 0; j < 2; ++j)
    if (a.bin_logits.value().at(0, j) != c.bin_logits.value().at(0, j)) same = false;
  CHECK_FALSE(same);
}

TEST_CASE("config validation and json round trip") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());

  ModelConfig bad = c;
  bad.queries = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.tau_init = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.enc.vocab_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  ModelConfig back = ModelConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  AblationFlags f;
  f.cncl = false;
  f.drop.images = true;
  AblationFlags g = AblationFlags::from_json(f.to_json());
  CHECK(g.to_json() == f.to_json());
}

TEST_CASE("gradients reach both encoder stacks") {
  Fixture fx;
  fx.model.ps.zero_grads();
  Forward<double> f = fx.model.forward(fx.with_cards());
  Var<double> loss = add(sum_all(f.bbox), add(sum_all(f.tok_logits), sum_all(f.bin_logits)));
  backward(loss);

  auto grad_norm = [&](const std::string& name) {
    const auto& g = fx.model.ps.get(name).grad();
    double s = 0;
    for (size_t i = 0; i < g.size(); ++i) s += double(g[i]) * double(g[i]);
    return s;
  };
  CHECK(grad_norm("vision.proj.w") > 0.0);
  CHECK(grad_norm("text.table") > 0.0);
  CHECK(grad_norm("bbox_head.fc1.w") > 0.0);
  CHECK(fx.model.ps.get("momentum.vision.proj.w").grad().size() == 0);

  auto names = fx.model.trainable();
  CHECK(names.size() > 20);
  for (const auto& n : names) CHECK(n.rfind("momentum.", 0) != 0);
}
