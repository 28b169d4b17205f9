#pragma once

// Whole-detector assembly: retrieval-conditioned encoders feeding cross-modal
// fusion, the patch refinement chain, and every prediction head, built over a
// single parameter store so optimizer and checkpoint code can address each
// tensor by name.

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ramdg/cncl.hpp"
#include "ramdg/encoders.hpp"
#include "ramdg/heads.hpp"

namespace ramdg {

struct ModelConfig {
  EncoderConfig enc;
  size_t queries = 8;      // learned slots that fan out the refined patch summary
  double tau_init = 0.07;  // starting contrastive temperature

  void validate() const {
    enc.validate();
    if (queries == 0) throw ConfigError("model: queries must be positive");
    if (!(tau_init > 0.0)) throw ConfigError("model: tau_init must be positive");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"d", enc.d},
                          {"heads", enc.heads},
                          {"depth", enc.depth},
                          {"text_depth", enc.text_depth},
                          {"patch", enc.patch},
                          {"image_size", enc.image_size},
                          {"mlp_ratio", enc.mlp_ratio},
                          {"vocab_size", enc.vocab_size},
                          {"max_len", enc.max_len},
                          {"ema_m", enc.ema_m},
                          {"queries", queries},
                          {"tau_init", tau_init}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("d", c.enc.d);
    get("heads", c.enc.heads);
    get("depth", c.enc.depth);
    get("text_depth", c.enc.text_depth);
    get("patch", c.enc.patch);
    get("image_size", c.enc.image_size);
    get("mlp_ratio", c.enc.mlp_ratio);
    get("vocab_size", c.enc.vocab_size);
    get("max_len", c.enc.max_len);
    get("ema_m", c.enc.ema_m);
    get("queries", c.queries);
    get("tau_init", c.tau_init);
    return c;
  }
};

/// Ablation switches; everything on reproduces the full method.
struct AblationFlags {
  bool cncl = true;       // contrastive objective and momentum bookkeeping
  bool refiner = true;    // patch refinement chain ahead of the box head
  bool retrieval = true;  // knowledge lookup; off is unseen-entity mode
  KnowledgeDrop drop;     // field-level knowledge withholding

  nlohmann::json to_json() const {
    return nlohmann::json{{"cncl", cncl},
                          {"refiner", refiner},
                          {"retrieval", retrieval},
                          {"drop_gender", drop.gender},
                          {"drop_birth_year", drop.birth_year},
                          {"drop_occupation", drop.occupation},
                          {"drop_achievements", drop.achievements},
                          {"drop_images", drop.images}};
  }

  static AblationFlags from_json(const nlohmann::json& j) {
    AblationFlags f;
    auto get = [&](const char* k, bool& field) {
      if (j.contains(k)) field = j.at(k).get<bool>();
    };
    get("cncl", f.cncl);
    get("refiner", f.refiner);
    get("retrieval", f.retrieval);
    get("drop_gender", f.drop.gender);
    get("drop_birth_year", f.drop.birth_year);
    get("drop_occupation", f.drop.occupation);
    get("drop_achievements", f.drop.achievements);
    get("drop_images", f.drop.images);
    return f;
  }
};

/// One sample resolved to concrete model inputs. Retrieval and the knowledge
/// ablations are applied by whoever builds the view; the card lists here are
/// exactly what the model consumes.
struct SampleView {
  const Image* image = nullptr;
  std::vector<int> caption;                  // news caption token ids
  NotedText noted;                           // caption plus surviving note tokens
  std::vector<int> card_ids;                 // retrieved card indices, used as queue tags
  std::vector<const Image*> card_images;     // empty when image knowledge is withheld
  std::vector<std::vector<int>> card_notes;  // per-card note token ids
};

/// Everything one forward pass produces. Losses and predictions both read
/// from here, so training and evaluation cannot drift apart.
template <class T>
struct Forward {
  Encoded<T> V;    // news image tower output
  Var<T> V_f;      // knowledge-fused image sequence
  Encoded<T> L_f;  // caption+notes text encoding
  Encoded<T> L;    // caption-only text encoding
  Var<T> M;        // cross-modal fusion output
  Var<T> m_cls;    // its classification row

  Var<T> patch_logits;  // n_patches x 1
  Var<T> bank;          // rows feeding the box head
  Var<T> bbox;          // 1x4 decoded corners
  Var<T> tok_logits;    // caption length x 1
  Var<T> bin_logits;    // 1x2, column 1 = manipulated
  Var<T> type_logits;   // 1x3: swap, visual attribute, text attribute

  // Contrastive features; empty/undefined when the cncl switch is off.
  std::vector<CelebAnchor<T>> anchors;  // sample index filled in by the batcher
  Var<T> news_v_m, news_t_m;            // momentum features destined for the queues
};

template <class T>
struct Model {
  ModelConfig cfg;
  ParamStore<T> ps;
  Encoders<T> enc;
  CrossModalFusion<T> xfuse;
  PatchHead<T> patch_head;
  VisualRefiner<T> refiner;
  BboxHead<T> bbox_head;
  TokenLocalizer<T> tok;
  BinaryHead<T> bin;
  TypeHead<T> type;
  Temperature<T> temp;

  Model(ModelConfig c, uint64_t seed)
      : cfg(validated(std::move(c))),
        ps(seed),
        enc(Encoders<T>::create(ps, cfg.enc)),
        xfuse(CrossModalFusion<T>::create(ps, cfg.enc.d, cfg.enc.heads)),
        patch_head(PatchHead<T>::create(ps, cfg.enc.d)),
        refiner(VisualRefiner<T>::create(ps, cfg.enc.d, cfg.enc.heads, cfg.queries)),
        bbox_head(BboxHead<T>::create(ps, cfg.enc.d)),
        tok(TokenLocalizer<T>::create(ps, cfg.enc.d, cfg.enc.heads)),
        bin(BinaryHead<T>::create(ps, cfg.enc.d)),
        type(TypeHead<T>::create(ps, cfg.enc.d)),
        temp(Temperature<T>::create(ps, cfg.tau_init)) {}

  Forward<T> forward(const SampleView& s, const AblationFlags& flags = {}) const {
    if (!s.image) throw ConfigError("forward: view has no image");
    if (s.caption.empty()) throw DataError("forward: empty caption");
    if (!s.card_images.empty() && s.card_images.size() != s.card_ids.size())
      throw ConfigError("forward: card images do not match card ids");
    if (s.card_notes.size() != s.card_ids.size())
      throw ConfigError("forward: card notes do not match card ids");

    Forward<T> f;
    f.V = enc.vision.encode(*s.image);

    std::vector<Encoded<T>> card_encs;
    std::vector<Var<T>> celeb_pats;
    for (const Image* im : s.card_images) {
      card_encs.push_back(enc.vision.encode(*im));
      celeb_pats.push_back(card_encs.back().seq());
    }
    f.V_f = enc.fuse(f.V.full, celeb_pats);

    f.L_f = enc.text.encode(s.noted.tokens);
    f.L = enc.text.encode(s.caption);

    f.M = xfuse(f.V_f, f.L_f.full);
    f.m_cls = slice_rows(f.M, 0, 1);

    Var<T> v_pat = f.V.seq();
    f.patch_logits = patch_head.logits(v_pat);
    f.bank = flags.refiner ? refiner(f.M, patch_head.refined(v_pat), f.V.full) : f.M;
    f.bbox = bbox_head(f.bank);

    f.tok_logits = tok.logits(f.L.seq(), f.V_f, f.m_cls);
    f.bin_logits = bin.logits(f.m_cls);
    f.type_logits = type.logits(f.m_cls);

    if (flags.cncl) {
      f.news_v_m = enc.proj_v_m(enc.vision_m.encode(*s.image).cls());
      f.news_t_m = enc.proj_t_m(enc.text_m.encode(s.caption).cls());
      for (size_t k = 0; k < s.card_ids.size(); ++k) {
        CelebAnchor<T> a;
        a.celeb_id = s.card_ids[k];
        if (k < s.card_images.size()) a.v_anchor = enc.proj_v(card_encs[k].cls());
        a.t_anchor = enc.proj_t(enc.text.encode(s.card_notes[k]).cls());
        f.anchors.push_back(std::move(a));
      }
    }
    return f;
  }

  /// Trainable parameter names in creation order.
  std::vector<std::string> trainable() const {
    std::vector<std::string> out;
    for (const auto& name : ps.names())
      if (ps.get(name).requires_grad()) out.push_back(name);
    return out;
  }

 private:
  static ModelConfig validated(ModelConfig c) {
    c.validate();
    return c;
  }
};

}  // namespace ramdg
