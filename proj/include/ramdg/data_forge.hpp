#pragma once

// Synthetic news forge. Produces image/caption pairs where manipulations stay
// semantically aligned across modalities: face swaps rewrite the caption name
// to the donor (leaving the surrounding context, notably the occupation word,
// untouched), and emotion inversions flip both the rendered face channel and
// the caption's emotion word. Every sample carries the full annotation set:
// binary label, type multi-hot, normalized bbox, and per-token labels.

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ramdg/cap_store.hpp"
#include "ramdg/common.hpp"
#include "ramdg/image_io.hpp"
#include "ramdg/vocab.hpp"

namespace ramdg::forge {

inline const std::vector<std::string>& first_names() {
  static const std::vector<std::string> v = {
      "ana",  "bea",  "cam",  "dia",  "eva",   "fay",  "gia",  "hana",
      "iris", "jun",  "kai",  "lia",  "mae",   "nia",  "ola",  "pia",
      "quin", "rosa", "sena", "tara", "uma",   "vera", "wren", "yuki"};
  return v;
}

inline const std::vector<std::string>& last_names() {
  static const std::vector<std::string> v = {
      "adler", "bram",  "chen",  "drake", "ellis", "frost", "gale",  "hart",
      "ibsen", "jolt",  "kerr",  "lund",  "marsh", "noor",  "oakes", "pike",
      "quill", "reyes", "stone", "tanaka", "ueda", "voss",  "wilde", "young"};
  return v;
}

inline const std::vector<std::string>& occupations() {
  static const std::vector<std::string> v = {"singer", "skater", "boxer",  "chef",
                                             "pilot",  "judge",  "poet",   "dancer",
                                             "farmer", "actor",  "coach",  "surgeon"};
  return v;
}

inline const std::vector<std::string>& positive_words() {
  static const std::vector<std::string> v = {"happy",    "joyful",  "elated",
                                             "cheerful", "delighted", "upbeat"};
  return v;
}

inline const std::vector<std::string>& negative_words() {
  static const std::vector<std::string> v = {"sad",      "gloomy",  "mournful",
                                             "downcast", "dejected", "somber"};
  return v;
}

inline const std::vector<std::string>& achievements_pool() {
  static const std::vector<std::string> v = {
      "gold_medal",  "city_award",  "grand_prize", "hall_of_fame",
      "world_record", "star_honor", "peace_ribbon", "royal_grant",
      "top_title",   "merit_cross", "silver_cup",  "crown_badge"};
  return v;
}

inline const std::vector<std::string>& verbs() {
  static const std::vector<std::string> v = {"looked", "seemed", "appeared"};
  return v;
}

inline const std::vector<std::string>& places() {
  static const std::vector<std::string> v = {"stadium", "gala",   "summit", "parade",
                                             "studio",  "market", "harbor", "plaza"};
  return v;
}

/// Fixed closed vocabulary shared by forge, CAP notes, and the model.
inline Vocab build_vocab() {
  Vocab v;
  v.add("[sep]");
  for (auto& w : first_names()) v.add(w);
  for (auto& w : last_names()) v.add(w);
  for (auto& w : occupations()) v.add(w);
  for (auto& w : positive_words()) v.add(w);
  for (auto& w : negative_words()) v.add(w);
  for (auto& w : achievements_pool()) v.add(w);
  for (auto& w : verbs()) v.add(w);
  for (auto& w : places()) v.add(w);
  for (auto& w : {"the", "at", "and"}) v.add(w);
  v.add("female");
  v.add("male");
  for (int d = 1900; d <= 2090; d += 10) v.add(decade_token(d));
  return v;
}

inline bool is_positive_word(const std::string& w) {
  for (auto& p : positive_words())
    if (p == w) return true;
  return false;
}

inline bool is_negative_word(const std::string& w) {
  for (auto& n : negative_words())
    if (n == w) return true;
  return false;
}

struct ForgeConfig {
  uint64_t seed = 7;
  size_t image_size = 64;
  size_t face_size = 20;
  size_t cap_image_size = 32;
  size_t n_identities = 160;
  // per split: original / swap / attribute
  std::array<size_t, 3> train_counts = {1260, 930, 810};
  std::array<size_t, 3> val_counts = {126, 93, 81};
  std::array<size_t, 3> test_counts = {252, 186, 162};
  double artifact_amplitude = 0.25;
  size_t blend_width = 2;
  double swap_clean_fraction = 0.30;  // swaps carrying no visual artifact
  double attr_augment_prob = 0.30;    // add the opposite word instead of replacing
  double two_face_prob = 0.50;
  double holdout_fraction = 0.0;      // identities kept out of the train split

  void validate() const {
    if (n_identities < 4) throw ConfigError("forge: n_identities must be >= 4");
    if (face_size >= image_size) throw ConfigError("forge: face_size must be < image_size");
    if (face_size < 8) throw ConfigError("forge: face_size must be >= 8");
    if (blend_width * 2 >= face_size) throw ConfigError("forge: blend_width too large");
    for (double p : {artifact_amplitude, swap_clean_fraction, attr_augment_prob, two_face_prob,
                     holdout_fraction})
      if (p < 0.0 || p > 1.0) throw ConfigError("forge: probabilities must lie in [0,1]");
    size_t usable = n_identities - size_t(holdout_fraction * double(n_identities));
    if (usable < 4) throw ConfigError("forge: holdout leaves too few identities for train");
    if (n_identities > first_names().size() * last_names().size())
      throw ConfigError("forge: more identities than distinct names");
  }

  static ForgeConfig from_json(const nlohmann::json& j) {
    ForgeConfig c;
    auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("seed", c.seed);
    get("image_size", c.image_size);
    get("face_size", c.face_size);
    get("cap_image_size", c.cap_image_size);
    get("n_identities", c.n_identities);
    get("artifact_amplitude", c.artifact_amplitude);
    get("blend_width", c.blend_width);
    get("swap_clean_fraction", c.swap_clean_fraction);
    get("attr_augment_prob", c.attr_augment_prob);
    get("two_face_prob", c.two_face_prob);
    get("holdout_fraction", c.holdout_fraction);
    auto counts = [&](const char* k, std::array<size_t, 3>& a) {
      if (!j.contains(k)) return;
      const auto& s = j.at(k);
      a[0] = s.at("original").get<size_t>();
      a[1] = s.at("swap").get<size_t>();
      a[2] = s.at("attribute").get<size_t>();
    };
    counts("train", c.train_counts);
    counts("val", c.val_counts);
    counts("test", c.test_counts);
    c.validate();
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["image_size"] = image_size;
    j["face_size"] = face_size;
    j["cap_image_size"] = cap_image_size;
    j["n_identities"] = n_identities;
    auto counts = [](const std::array<size_t, 3>& a) {
      return nlohmann::json{{"original", a[0]}, {"swap", a[1]}, {"attribute", a[2]}};
    };
    j["train"] = counts(train_counts);
    j["val"] = counts(val_counts);
    j["test"] = counts(test_counts);
    j["artifact_amplitude"] = artifact_amplitude;
    j["blend_width"] = blend_width;
    j["swap_clean_fraction"] = swap_clean_fraction;
    j["attr_augment_prob"] = attr_augment_prob;
    j["two_face_prob"] = two_face_prob;
    j["holdout_fraction"] = holdout_fraction;
    return j;
  }
};

struct SyntheticIdentity {
  int id = 0;
  std::vector<std::string> name;  // two tokens
  std::string gender;
  int birth_year = 0;
  std::string occupation;
  std::vector<std::string> achievements;
  std::vector<float> signature;  // S*S*3 in [0,1]
  size_t s = 0;

  /// Face pixels: channels 1-2 carry the identity texture; channel 0 carries
  /// the texture mixed with an emotion band across the middle rows
  /// (polarity +1 bright, -1 dark, 0 renders no band).
  Image render_face(int polarity) const {
    Image f(s, s);
    size_t band_lo = (s * 3) / 8, band_hi = (s * 5) / 8;
    for (size_t y = 0; y < s; ++y)
      for (size_t x = 0; x < s; ++x) {
        for (size_t c = 0; c < 3; ++c) f.at(y, x, c) = signature[(y * s + x) * 3 + c];
        if (polarity != 0 && y >= band_lo && y < band_hi) {
          float level = polarity > 0 ? 0.9f : 0.1f;
          f.at(y, x, 0) = 0.5f * f.at(y, x, 0) + 0.5f * level;
        }
      }
    return f;
  }
};

enum class SampleType { Original, Swap, Attribute };

/// Identities are deterministic in (seed, index): unique names, distinct
/// face signatures (mean absolute difference >= 0.1, resampled on collision).
inline std::vector<SyntheticIdentity> forge_identities(size_t n, uint64_t seed,
                                                       size_t face_size) {
  if (n < 2) throw ConfigError("forge: need at least 2 identities (swap needs a donor)");
  if (n > first_names().size() * last_names().size())
    throw ConfigError("forge: more identities than distinct names");
  std::vector<SyntheticIdentity> out;
  Rng rng(derive_seed(seed, fnv1a("identities")));
  std::vector<std::pair<size_t, size_t>> taken;
  for (size_t i = 0; i < n; ++i) {
    SyntheticIdentity ident;
    ident.id = int(i);
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw ConfigError("forge: cannot find a fresh name");
      size_t f = rng.uniform_int(first_names().size());
      size_t l = rng.uniform_int(last_names().size());
      if (std::find(taken.begin(), taken.end(), std::make_pair(f, l)) == taken.end()) {
        taken.emplace_back(f, l);
        ident.name = {first_names()[f], last_names()[l]};
        break;
      }
    }
    ident.gender = rng.bernoulli(0.5) ? "female" : "male";
    ident.birth_year = 1950 + int(rng.uniform_int(50));
    ident.occupation = rng.pick(occupations());
    size_t n_ach = 1 + rng.uniform_int(2);
    for (size_t idx : rng.sample_without_replacement(achievements_pool().size(), n_ach))
      ident.achievements.push_back(achievements_pool()[idx]);
    std::sort(ident.achievements.begin(), ident.achievements.end());

    ident.s = face_size;
    Rng sig_rng(derive_seed(seed, fnv1a("signature"), i));
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100) throw ConfigError("forge: signature collision unresolved");
      ident.signature.resize(face_size * face_size * 3);
      for (auto& v : ident.signature) v = float(sig_rng.uniform());
      bool ok = true;
      for (const auto& other : out) {
        double mad = 0;
        for (size_t k = 0; k < ident.signature.size(); ++k)
          mad += std::abs(double(ident.signature[k]) - double(other.signature[k]));
        mad /= double(ident.signature.size());
        if (mad < 0.1) ok = false;
      }
      if (ok) break;
    }
    out.push_back(std::move(ident));
  }
  return out;
}

struct SampleRecord {
  std::string id;
  std::string image_rel;
  std::vector<int> caption;
  std::vector<std::string> caption_text;
  int binary = 0;
  std::array<int, 3> types = {0, 0, 0};  // VS, VA, TA
  std::array<double, 4> bbox = {0, 0, 0, 0};
  std::vector<int> token_labels;
  std::vector<std::vector<std::string>> names;
};

/// Checks every annotation invariant of one manifest row.
inline void validate_record(const SampleRecord& r) {
  auto fail = [&](const std::string& why) { throw DataError("sample " + r.id + ": " + why); };
  if (r.caption.size() != r.caption_text.size()) fail("caption id/text length mismatch");
  if (r.token_labels.size() != r.caption.size()) fail("token_labels length mismatch");
  for (double v : r.bbox)
    if (v < 0.0 || v > 1.0) fail("bbox out of [0,1]");
  bool has_token = false;
  for (int t : r.token_labels)
    if (t) has_token = true;
  bool zero_box = r.bbox[0] == 0 && r.bbox[1] == 0 && r.bbox[2] == 0 && r.bbox[3] == 0;
  if (r.binary == 0) {
    if (r.types != std::array<int, 3>{0, 0, 0}) fail("clean sample with type labels");
    if (!zero_box) fail("clean sample with bbox");
    if (has_token) fail("clean sample with token labels");
  } else {
    if (r.types[0] && r.types[1]) fail("VS and VA both set");
    if (!r.types[0] && !r.types[1] && !r.types[2]) fail("manipulated sample without type");
  }
  if (r.types[0] || r.types[1]) {
    if (!(r.bbox[0] < r.bbox[2] && r.bbox[1] < r.bbox[3])) fail("visual type without positive-area bbox");
  }
  if (r.types[2] && !has_token) fail("TA without token labels");
}

inline nlohmann::json record_to_json(const SampleRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["image"] = r.image_rel;
  j["caption"] = r.caption;
  j["caption_text"] = r.caption_text;
  j["binary"] = r.binary;
  j["types"] = r.types;
  j["bbox"] = r.bbox;
  j["token_labels"] = r.token_labels;
  j["names"] = r.names;
  return j;
}

inline SampleRecord record_from_json(const nlohmann::json& j) {
  SampleRecord r;
  r.id = j.at("id").get<std::string>();
  r.image_rel = j.at("image").get<std::string>();
  r.caption = j.at("caption").get<std::vector<int>>();
  r.caption_text = j.at("caption_text").get<std::vector<std::string>>();
  r.binary = j.at("binary").get<int>();
  auto t = j.at("types").get<std::vector<int>>();
  if (t.size() != 3) throw DataError("types must have 3 entries");
  r.types = {t[0], t[1], t[2]};
  auto b = j.at("bbox").get<std::vector<double>>();
  if (b.size() != 4) throw DataError("bbox must have 4 entries");
  r.bbox = {b[0], b[1], b[2], b[3]};
  r.token_labels = j.at("token_labels").get<std::vector<int>>();
  r.names = j.at("names").get<std::vector<std::vector<std::string>>>();
  return r;
}

inline std::vector<SampleRecord> load_manifest(const std::string& path) {
  std::vector<SampleRecord> rows;
  auto lines = split_lines(read_text_file(path));
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      rows.push_back(record_from_json(nlohmann::json::parse(lines[i])));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + " line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return rows;
}

class Forge {
 public:
  explicit Forge(ForgeConfig cfg) : cfg_(cfg), vocab_(build_vocab()) {
    cfg_.validate();
    identities_ = forge_identities(cfg_.n_identities, cfg_.seed, cfg_.face_size);
  }

  const ForgeConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  const std::vector<SyntheticIdentity>& identities() const { return identities_; }

  size_t train_pool_size() const {
    return identities_.size() - size_t(cfg_.holdout_fraction * double(identities_.size()));
  }

  CelebrityCard card_for(const SyntheticIdentity& ident) const {
    CelebrityCard c;
    c.name = ident.name;
    c.gender = ident.gender;
    c.birth_year = ident.birth_year;
    c.occupation = ident.occupation;
    c.achievements = ident.achievements;
    for (int k = 0; k < 3; ++k)
      c.image_refs.push_back("cap_images/" + ident.name[0] + "_" + ident.name[1] + "_" +
                             std::to_string(k) + ".ppm");
    return c;
  }

  CapStore make_cap() const {
    std::vector<CelebrityCard> cards;
    for (const auto& ident : identities_) cards.push_back(card_for(ident));
    return CapStore::from_cards(std::move(cards));
  }

  Image render_cap_image(const SyntheticIdentity& ident, int variant) const {
    Image base = ident.render_face(0);
    size_t n = cfg_.cap_image_size;
    Image out(n, n);
    Rng rng(derive_seed(cfg_.seed, fnv1a("cap_image"), uint64_t(ident.id) * 8 + uint64_t(variant)));
    for (size_t y = 0; y < n; ++y)
      for (size_t x = 0; x < n; ++x) {
        size_t sy = y * ident.s / n, sx = x * ident.s / n;
        for (size_t c = 0; c < 3; ++c) {
          float v = base.at(sy, sx, c) + float(rng.uniform(-0.03, 0.03));
          out.at(y, x, c) = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        }
      }
    return out;
  }

  struct Built {
    Image image;
    Image background;        // pre-stamp pixels, used for seam blending
    Image pre_manipulation;  // image state before apply_swap/apply_attribute
    bool clean_swap = false;
    SampleRecord rec;
    struct Stamp {
      size_t identity;     // index into identities_
      size_t y0, x0;
      int polarity;
      size_t name_pos;     // caption index of the first name token
      size_t emo_pos;      // caption index of the emotion word
    };
    std::vector<Stamp> stamps;
  };

  /// Deterministic per (split, index, type); parallel-safe.
  Built build_sample(const std::string& split, size_t index, SampleType type) const {
    Rng rng(derive_seed(cfg_.seed, fnv1a("sample-" + split), index));
    bool train_split = split == "train";
    size_t pool = train_split ? train_pool_size() : identities_.size();

    bool clean_swap = false;
    size_t n_faces;
    if (type == SampleType::Swap) {
      clean_swap = rng.bernoulli(cfg_.swap_clean_fraction);
      n_faces = clean_swap ? 1 : (rng.bernoulli(cfg_.two_face_prob) ? 2 : 1);
    } else {
      n_faces = rng.bernoulli(cfg_.two_face_prob) ? 2 : 1;
    }

    Built b = compose_original(split, index, n_faces, pool, rng);
    b.pre_manipulation = b.image;
    b.clean_swap = type == SampleType::Swap && clean_swap;
    if (type == SampleType::Swap) apply_swap(b, pool, clean_swap, rng);
    else if (type == SampleType::Attribute) apply_attribute(b, rng);

    b.rec.caption = vocab_.encode(b.rec.caption_text);
    validate_record(b.rec);
    return b;
  }

  /// Writes the complete dataset: vocab, CAP + card images, split manifests,
  /// sample images, stats report.
  void run(const std::string& out_dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "cap_images");

    vocab_.save((fs::path(out_dir) / "vocab.json").string());
    CapStore cap = make_cap();
    cap.save((fs::path(out_dir) / "cap.jsonl").string());
    for (const auto& ident : identities_)
      for (int k = 0; k < 3; ++k)
        write_ppm((fs::path(out_dir) / card_for(ident).image_refs[size_t(k)]).string(),
                  render_cap_image(ident, k));

    nlohmann::json stats;
    stats["config"] = cfg_.to_json();
    std::map<std::string, size_t> identity_freq;
    std::map<std::string, size_t> emotion_freq;

    const std::array<std::pair<std::string, std::array<size_t, 3>>, 3> splits = {
        {{"train", cfg_.train_counts}, {"val", cfg_.val_counts}, {"test", cfg_.test_counts}}};
    for (const auto& [split, counts] : splits) {
      std::vector<SampleType> order;
      for (size_t i = 0; i < counts[0]; ++i) order.push_back(SampleType::Original);
      for (size_t i = 0; i < counts[1]; ++i) order.push_back(SampleType::Swap);
      for (size_t i = 0; i < counts[2]; ++i) order.push_back(SampleType::Attribute);
      Rng shuffle_rng(derive_seed(cfg_.seed, fnv1a("order-" + split)));
      shuffle_rng.shuffle(order);

      std::string manifest;
      size_t clean_swaps = 0;
      for (size_t i = 0; i < order.size(); ++i) {
        Built b = build_sample(split, i, order[i]);
        write_ppm((fs::path(out_dir) / b.rec.image_rel).string(), b.image);
        manifest += record_to_json(b.rec).dump();
        manifest += '\n';
        for (const auto& st : b.stamps)
          identity_freq[identities_[st.identity].name[0] + " " + identities_[st.identity].name[1]]++;
        for (size_t t = 0; t < b.rec.caption_text.size(); ++t) {
          const auto& w = b.rec.caption_text[t];
          if (is_positive_word(w) || is_negative_word(w)) emotion_freq[w]++;
        }
        if (b.clean_swap) clean_swaps++;
      }
      write_text_file((fs::path(out_dir) / (split + ".jsonl")).string(), manifest);
      stats["splits"][split] = {{"original", counts[0]},
                                {"swap", counts[1]},
                                {"attribute", counts[2]},
                                {"total", order.size()},
                                {"clean_swaps", clean_swaps}};
    }
    stats["identity_frequency"] = identity_freq;
    stats["emotion_words"] = emotion_freq;
    stats["n_identities"] = identities_.size();
    stats["train_pool"] = train_pool_size();
    stats["vocab_size"] = vocab_.size();
    write_text_file((fs::path(out_dir) / "stats.json").string(), stats.dump(2) + "\n");
  }

 private:
  static bool rects_overlap(size_t ay, size_t ax, size_t by, size_t bx, size_t s) {
    return ay < by + s && by < ay + s && ax < bx + s && bx < ax + s;
  }

  Built compose_original(const std::string& split, size_t index, size_t n_faces, size_t pool,
                         Rng& rng) const {
    size_t H = cfg_.image_size, S = cfg_.face_size;
    Built b;
    b.image = Image(H, H);
    for (auto& v : b.image.px) v = 0.35f + 0.3f * float(rng.uniform());
    b.background = b.image;

    std::vector<size_t> ids = rng.sample_without_replacement(pool, n_faces);
    for (size_t f = 0; f < n_faces; ++f) {
      int polarity = rng.bernoulli(0.5) ? 1 : -1;
      size_t y0 = 0, x0 = 0;
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        y0 = 1 + rng.uniform_int(H - S - 2);
        x0 = 1 + rng.uniform_int(H - S - 2);
        placed = true;
        for (const auto& st : b.stamps)
          if (rects_overlap(y0, x0, st.y0, st.x0, S)) placed = false;
      }
      if (!placed) throw DataError("forge: cannot place non-overlapping faces");
      stamp_face(b.image, identities_[ids[f]].render_face(polarity), y0, x0);
      b.stamps.push_back({ids[f], y0, x0, polarity, 0, 0});
    }

    // caption: [first last the OCC VERB EMO at the PLACE] per face, joined
    // with "and"
    auto& text = b.rec.caption_text;
    for (size_t f = 0; f < n_faces; ++f) {
      if (f) text.push_back("and");
      const auto& ident = identities_[b.stamps[f].identity];
      b.stamps[f].name_pos = text.size();
      text.push_back(ident.name[0]);
      text.push_back(ident.name[1]);
      text.push_back("the");
      text.push_back(ident.occupation);
      text.push_back(rng.pick(verbs()));
      b.stamps[f].emo_pos = text.size();
      text.push_back(b.stamps[f].polarity > 0 ? rng.pick(positive_words())
                                              : rng.pick(negative_words()));
      text.push_back("at");
      text.push_back("the");
      text.push_back(rng.pick(places()));
      b.rec.names.push_back(ident.name);
    }
    b.rec.token_labels.assign(text.size(), 0);
    std::string num = std::to_string(index);
    b.rec.id = split + "_" + std::string(num.size() < 6 ? 6 - num.size() : 0, '0') + num;
    b.rec.image_rel = "images/" + b.rec.id + ".ppm";
    return b;
  }

  void stamp_face(Image& img, const Image& face, size_t y0, size_t x0) const {
    for (size_t y = 0; y < face.h; ++y)
      for (size_t x = 0; x < face.w; ++x)
        for (size_t c = 0; c < 3; ++c) img.at(y0 + y, x0 + x, c) = face.at(y, x, c);
  }

  /// Soft seam plus high-frequency noise, all inside the face rectangle.
  void apply_artifact(Built& b, size_t y0, size_t x0, Rng& rng) const {
    size_t S = cfg_.face_size, W = cfg_.blend_width;
    for (size_t y = 0; y < S; ++y)
      for (size_t x = 0; x < S; ++x) {
        size_t edge = std::min(std::min(y, S - 1 - y), std::min(x, S - 1 - x));
        if (edge < W) {
          float alpha = float(edge + 1) / float(W + 1);
          for (size_t c = 0; c < 3; ++c) {
            float& p = b.image.at(y0 + y, x0 + x, c);
            p = alpha * p + (1.f - alpha) * b.background.at(y0 + y, x0 + x, c);
          }
        }
      }
    float a = float(cfg_.artifact_amplitude);
    for (size_t y = 0; y < S; ++y)
      for (size_t x = 0; x < S; ++x)
        for (size_t c = 0; c < 3; ++c) {
          float& p = b.image.at(y0 + y, x0 + x, c);
          p += a * float(2.0 * rng.uniform() - 1.0);
          p = p < 0.f ? 0.f : (p > 1.f ? 1.f : p);
        }
  }

  void set_bbox(SampleRecord& rec, size_t y0, size_t x0) const {
    double H = double(cfg_.image_size), S = double(cfg_.face_size);
    rec.bbox = {double(x0) / H, double(y0) / H, (double(x0) + S) / H, (double(y0) + S) / H};
  }

  /// Donor must be absent from the image and hold a different occupation than
  /// the victim, so the caption context always contradicts the donor's card.
  void apply_swap(Built& b, size_t pool, bool clean, Rng& rng) const {
    if (b.rec.binary != 0) throw DataError("apply_swap: sample already manipulated");
    size_t victim = rng.uniform_int(b.stamps.size());
    auto& st = b.stamps[victim];
    const std::string& victim_occ = identities_[st.identity].occupation;

    size_t donor = st.identity;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw DataError("forge: no usable swap donor");
      donor = rng.uniform_int(pool);
      bool stamped = false;
      for (const auto& s : b.stamps)
        if (s.identity == donor) stamped = true;
      if (!stamped && identities_[donor].occupation != victim_occ) break;
    }
    if (donor == st.identity) throw DataError("apply_swap: donor equals victim");
    const auto& donor_ident = identities_[donor];

    stamp_face(b.image, donor_ident.render_face(st.polarity), st.y0, st.x0);
    if (!clean) apply_artifact(b, st.y0, st.x0, rng);

    b.rec.caption_text[st.name_pos] = donor_ident.name[0];
    b.rec.caption_text[st.name_pos + 1] = donor_ident.name[1];
    b.rec.token_labels[st.name_pos] = 1;
    b.rec.token_labels[st.name_pos + 1] = 1;
    b.rec.names[victim] = donor_ident.name;
    st.identity = donor;

    set_bbox(b.rec, st.y0, st.x0);
    b.rec.binary = 1;
    b.rec.types = {1, 0, 1};
  }

  void apply_attribute(Built& b, Rng& rng) const {
    if (b.rec.binary != 0) throw DataError("apply_attribute: sample already manipulated");
    size_t target = rng.uniform_int(b.stamps.size());
    auto& st = b.stamps[target];
    st.polarity = -st.polarity;
    stamp_face(b.image, identities_[st.identity].render_face(st.polarity), st.y0, st.x0);
    apply_artifact(b, st.y0, st.x0, rng);

    const auto& pool = st.polarity > 0 ? positive_words() : negative_words();
    std::string new_word = rng.pick(pool);
    if (rng.bernoulli(cfg_.attr_augment_prob)) {
      // keep the stale word, add the contradicting one right after it
      b.rec.caption_text.insert(b.rec.caption_text.begin() + long(st.emo_pos) + 1, new_word);
      b.rec.token_labels.insert(b.rec.token_labels.begin() + long(st.emo_pos) + 1, 1);
      for (auto& other : b.stamps)
        if (other.name_pos > st.emo_pos) {
          other.name_pos++;
          other.emo_pos++;
        }
    } else {
      b.rec.caption_text[st.emo_pos] = new_word;
      b.rec.token_labels[st.emo_pos] = 1;
    }

    set_bbox(b.rec, st.y0, st.x0);
    b.rec.binary = 1;
    b.rec.types = {0, 1, 1};
  }

  ForgeConfig cfg_;
  Vocab vocab_;
  std::vector<SyntheticIdentity> identities_;
};

}  // namespace ramdg::forge
