#include <catch2/catch_amalgamated.hpp>

#include "ramdg/data_forge.hpp"
#include "ramdg/encoders.hpp"

using namespace ramdg;

namespace {

EncoderConfig desk_config() {
  EncoderConfig cfg;
  cfg.vocab_size = forge::build_vocab().size();
  return cfg;
}

Image random_image(size_t h, size_t w, uint64_t seed) {
  Image img(h, w);
  Rng rng(seed);
  for (auto& p : img.px) p = float(rng.uniform());
  return img;
}

template <class T>
void set_identity(Var<T> w) {
  auto& t = w.value_mut();
  t.fill(T(0));
  for (size_t i = 0; i < std::min(t.rows(), t.cols()); ++i) t.at(i, i) = T(1);
}

template <class T>
bool values_equal(const Var<T>& a, const Var<T>& b) {
  return a.value().rows() == b.value().rows() && a.value().cols() == b.value().cols() &&
         a.value().vec() == b.value().vec();
}

}  // namespace

TEST_CASE("patchify shapes and losslessness") {
  Image img4 = random_image(4, 4, 1);
  auto p4 = patchify<double>(img4, 2);
  REQUIRE(p4.rows() == 4);
  REQUIRE(p4.cols() == 12);

  Image img2 = random_image(2, 2, 2);
  auto p2 = patchify<double>(img2, 2);
  REQUIRE(p2.rows() == 1);
  for (size_t i = 0; i < img2.px.size(); ++i) REQUIRE(double(img2.px[i]) == p2[i]);

  Image img = random_image(16, 24, 3);
  Image back = unpatchify(patchify<double>(img, 4), 4, 16, 24);
  REQUIRE(back.same_content(img));

  Image odd = random_image(5, 4, 4);
  REQUIRE_THROWS_AS(patchify<double>(odd, 2), DataError);
}

TEST_CASE("patch raster order is row-major over the grid") {
  Image img(4, 4);
  for (size_t y = 0; y < 4; ++y)
    for (size_t x = 0; x < 4; ++x)
      for (size_t c = 0; c < 3; ++c) img.at(y, x, c) = float(y * 4 + x);
  auto p = patchify<double>(img, 2);
  REQUIRE(p.at(0, 0) == 0.0);   // patch (0,0) starts at pixel (0,0)
  REQUIRE(p.at(1, 0) == 2.0);   // patch (0,1) starts at pixel (0,2)
  REQUIRE(p.at(2, 0) == 8.0);   // patch (1,0) starts at pixel (2,0)
  REQUIRE(p.at(3, 0) == 10.0);  // patch (1,1) starts at pixel (2,2)
}

TEST_CASE("image encoding: shapes, determinism, gradient") {
  ParamStore<double> ps(5);
  EncoderConfig cfg = desk_config();
  auto enc = Encoders<double>::create(ps, cfg);

  Image img = random_image(64, 64, 7);
  auto e = enc.vision.encode(img);
  REQUIRE(e.full.rows() == 65);
  REQUIRE(e.seq_len() == 64);
  REQUIRE(e.full.value().all_finite());

  auto e2 = enc.vision.encode(img);
  REQUIRE(values_equal(e.full, e2.full));

  // smaller knowledge-card image flows through the same encoder
  Image small = random_image(32, 32, 8);
  auto es = enc.vision.encode(small);
  REQUIRE(es.full.rows() == 17);

  Rng rng(9);
  auto stats = grad_check<double>(
      ps, {"vision.proj.w", "vision.cls", "vision.pos"},
      [&] { return sum_all(hadamard(enc.vision.encode(img).full, enc.vision.encode(img).full)); },
      1e-3, 24, rng);
  REQUIRE(stats.max_rel_err < 1e-4);
}

TEST_CASE("text encoding: shapes, position sensitivity, validation") {
  ParamStore<double> ps(6);
  EncoderConfig cfg = desk_config();
  auto enc = Encoders<double>::create(ps, cfg);

  std::vector<int> ids = {3, 9, 4, 9};
  auto e = enc.text.encode(ids);
  REQUIRE(e.full.rows() == 5);
  REQUIRE(e.seq_len() == ids.size());

  std::vector<int> swapped = {9, 3, 4, 9};
  auto e2 = enc.text.encode(swapped);
  bool differs = false;
  for (size_t i = 0; i < e.full.value().size(); ++i)
    if (e.full.value()[i] != e2.full.value()[i]) differs = true;
  REQUIRE(differs);

  REQUIRE_THROWS_AS(enc.text.encode({int(cfg.vocab_size)}), DataError);
  REQUIRE_THROWS_AS(enc.text.encode({-1}), DataError);
  std::vector<int> overlong(cfg.max_len + 1, 1);
  REQUIRE_THROWS_AS(enc.text.encode(overlong), DataError);

  Rng rng(10);
  auto stats = grad_check<double>(
      ps, {"text.table", "text.pos"},
      [&] { return sum_all(hadamard(enc.text.encode(ids).full, enc.text.encode(ids).full)); },
      1e-3, 24, rng);
  REQUIRE(stats.max_rel_err < 1e-4);
}

TEST_CASE("note concatenation: boundary, order, truncation") {
  Vocab v = forge::build_vocab();
  CelebrityCard card;
  card.name = {"ana", "adler"};
  card.gender = "female";
  card.birth_year = 1985;
  card.occupation = "singer";
  card.achievements = {"gold_medal"};
  card.image_refs = {"a.ppm"};
  CelebrityCard card2 = card;
  card2.name = {"bea", "bram"};
  card2.gender = "male";
  card2.occupation = "boxer";

  std::vector<int> caption = v.encode({"the", "singer", "looked", "happy"});

  auto none = concat_notes(caption, {}, v, 64);
  REQUIRE(none.tokens == caption);
  REQUIRE(none.boundary == caption.size());
  REQUIRE(!none.truncated);

  auto one = concat_notes(caption, {&card}, v, 64);
  REQUIRE(one.boundary == caption.size());
  std::vector<int> want = caption;
  for (auto& w : {"[sep]", "female", "1980s", "singer", "gold_medal"})
    want.push_back(v.id(w));
  REQUIRE(one.tokens == want);

  auto two = concat_notes(caption, {&card, &card2}, v, 64);
  REQUIRE(two.tokens.size() == caption.size() + 10);
  REQUIRE(std::vector<int>(two.tokens.begin(), two.tokens.begin() + long(want.size())) == want);

  auto cut = concat_notes(caption, {&card, &card2}, v, caption.size() + 7);
  REQUIRE(cut.truncated);
  REQUIRE(cut.tokens.size() == caption.size() + 7);
  REQUIRE(cut.boundary == caption.size());
  REQUIRE(std::vector<int>(cut.tokens.begin(), cut.tokens.begin() + long(caption.size())) == caption);

  KnowledgeDrop drop;
  drop.occupation = true;
  auto dropped = concat_notes(caption, {&card}, v, 64, drop);
  REQUIRE(dropped.tokens.size() == caption.size() + 4);

  std::vector<int> huge(70, 1);
  REQUIRE_THROWS_AS(concat_notes(huge, {}, v, 64), DataError);
}

TEST_CASE("knowledge fusion: null fallback, constant-key identity, shape") {
  ParamStore<double> ps(11);
  EncoderConfig cfg = desk_config();
  auto fuse = CelebFusion<double>::create(ps, "fuse", cfg, true);

  Tensor<double> newsv(5, cfg.d);
  Rng rng(12);
  for (size_t i = 0; i < newsv.size(); ++i) newsv[i] = rng.normal();
  Var<double> news = Var<double>::constant(newsv);

  ps.zero_grads();
  Var<double> fused_null = fuse(news, {});
  REQUIRE(fused_null.rows() == 5);
  REQUIRE(fused_null.value().all_finite());
  backward(sum_all(fused_null));
  double null_grad = 0;
  for (size_t i = 0; i < fuse.null_knowledge.grad().size(); ++i)
    null_grad += std::abs(fuse.null_knowledge.grad()[i]);
  REQUIRE(null_grad > 0.0);

  for (auto leaf : {fuse.att.q.w, fuse.att.k.w, fuse.att.v.w, fuse.att.o.w}) set_identity(leaf);
  Tensor<double> ct(16, cfg.d);
  for (size_t r = 0; r < 16; ++r)
    for (size_t j = 0; j < cfg.d; ++j) ct.at(r, j) = std::sin(double(j));
  Var<double> celeb = Var<double>::constant(ct);
  Var<double> fused = fuse(news, {celeb});
  REQUIRE(fused.rows() == news.rows());
  for (size_t i = 0; i < fused.rows(); ++i)
    for (size_t j = 0; j < cfg.d; ++j)
      REQUIRE(std::abs(fused.value().at(i, j) - std::sin(double(j))) < 1e-9);

  Tensor<double> wrong(4, cfg.d + 1);
  REQUIRE_THROWS_AS(fuse(news, {Var<double>::constant(wrong)}), ConfigError);
}

TEST_CASE("projection head: unit norm and scale invariance") {
  ParamStore<double> ps(13);
  auto proj = Projection<double>::create(ps, "p", 16, true);
  Rng rng(14);
  Tensor<double> xt(6, 16);
  for (size_t i = 0; i < xt.size(); ++i) xt[i] = rng.normal();
  Var<double> x = Var<double>::constant(xt);

  Var<double> y = proj(x);
  for (size_t i = 0; i < y.rows(); ++i) {
    double n = 0;
    for (size_t j = 0; j < y.cols(); ++j) n += y.value().at(i, j) * y.value().at(i, j);
    REQUIRE(std::abs(std::sqrt(n) - 1.0) < 1e-9);
  }

  Tensor<double> x2t = xt;
  for (size_t i = 0; i < x2t.size(); ++i) x2t[i] *= 2.0;
  Var<double> y2 = proj(Var<double>::constant(x2t));
  for (size_t i = 0; i < y.value().size(); ++i)
    REQUIRE(std::abs(y.value()[i] - y2.value()[i]) < 1e-12);
}

TEST_CASE("momentum twins: sync, ema tracking, frozen gradients") {
  ParamStore<double> ps(15);
  EncoderConfig cfg = desk_config();
  cfg.ema_m = 0.9;
  auto enc = Encoders<double>::create(ps, cfg);

  for (const auto& name : ps.names()) {
    if (name.rfind("momentum.", 0) != 0) continue;
    std::string online = name.substr(9);
    CAPTURE(name);
    REQUIRE(ps.get(name).value().vec() == ps.get(online).value().vec());
    REQUIRE(!ps.get(name).requires_grad());
  }

  // frozen online params: twin converges geometrically
  Var<double> online = ps.get("vision.cls");
  Var<double> twin = ps.get("momentum.vision.cls");
  Tensor<double> start = twin.value();
  for (size_t i = 0; i < twin.value().size(); ++i) twin.value_mut()[i] += 1.0;
  double d0 = 1.0;
  enc.ema_step(ps);
  enc.ema_step(ps);
  enc.ema_step(ps);
  for (size_t i = 0; i < twin.value().size(); ++i) {
    double want = online.value()[i] + d0 * 0.9 * 0.9 * 0.9;
    REQUIRE(std::abs(twin.value()[i] - want) < 1e-12);
  }
  (void)start;

  // m=1 leaves the twin untouched
  EncoderConfig keep = cfg;
  keep.ema_m = 1.0;
  auto enc_keep = enc;
  enc_keep.cfg = keep;
  Tensor<double> before = twin.value();
  enc_keep.ema_step(ps);
  REQUIRE(twin.value().vec() == before.vec());

  // momentum forward pass carries no gradient graph
  Image img = random_image(64, 64, 99);
  auto e = enc.vision_m.encode(img);
  REQUIRE(!e.full.requires_grad());
  REQUIRE(e.full.value().all_finite());
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg = desk_config();
  cfg.d = 65;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = desk_config();
  cfg.image_size = 63;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = desk_config();
  cfg.vocab_size = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
