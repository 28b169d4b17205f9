#pragma once

// Context-aware encoders: patch/token embedding towers, knowledge-image
// fusion over retrieved card patches, note-text concatenation, projection
// heads for contrastive similarity, and EMA-tracked momentum twins.

#include <string>
#include <vector>

#include "ramdg/cap_store.hpp"
#include "ramdg/image_io.hpp"
#include "ramdg/nn.hpp"
#include "ramdg/vocab.hpp"

namespace ramdg {

struct EncoderConfig {
  size_t d = 64;
  size_t heads = 4;
  size_t depth = 2;       // vision tower blocks (full scale uses 12)
  size_t text_depth = 2;  // text tower blocks (full scale uses 6)
  size_t patch = 8;
  size_t image_size = 64;
  size_t mlp_ratio = 4;
  size_t vocab_size = 0;
  size_t max_len = 64;  // caption + appended notes budget
  double ema_m = 0.995;

  size_t grid() const { return image_size / patch; }
  size_t n_patches() const { return grid() * grid(); }
  size_t patch_dim() const { return 3 * patch * patch; }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0)
      throw ConfigError("encoder: width must be divisible by heads");
    if (patch == 0 || image_size % patch != 0)
      throw ConfigError("encoder: image size must be divisible by patch size");
    if (vocab_size == 0) throw ConfigError("encoder: vocabulary size not set");
    if (max_len == 0) throw ConfigError("encoder: max_len must be positive");
    if (ema_m < 0.0 || ema_m > 1.0) throw ConfigError("encoder: ema_m must lie in [0,1]");
  }
};

/// Row-major patch grid; each row is one patch flattened as (y, x, channel).
/// Lossless: unpatchify inverts it exactly.
template <class T>
Tensor<T> patchify(const Image& img, size_t patch) {
  if (patch == 0 || img.h % patch != 0 || img.w % patch != 0)
    throw DataError("patchify: image dimensions not divisible by patch size");
  size_t gy = img.h / patch, gx = img.w / patch;
  Tensor<T> out(gy * gx, 3 * patch * patch);
  for (size_t py = 0; py < gy; ++py)
    for (size_t px = 0; px < gx; ++px) {
      T* row = out.row(py * gx + px);
      size_t k = 0;
      for (size_t y = 0; y < patch; ++y)
        for (size_t x = 0; x < patch; ++x)
          for (size_t c = 0; c < 3; ++c)
            row[k++] = T(img.at(py * patch + y, px * patch + x, c));
    }
  return out;
}

template <class T>
Image unpatchify(const Tensor<T>& patches, size_t patch, size_t h, size_t w) {
  if (h % patch != 0 || w % patch != 0 || patches.rows() != (h / patch) * (w / patch) ||
      patches.cols() != 3 * patch * patch)
    throw DataError("unpatchify: shape mismatch");
  Image img(h, w);
  size_t gx = w / patch;
  for (size_t r = 0; r < patches.rows(); ++r) {
    size_t py = r / gx, px = r % gx;
    const T* row = patches.row(r);
    size_t k = 0;
    for (size_t y = 0; y < patch; ++y)
      for (size_t x = 0; x < patch; ++x)
        for (size_t c = 0; c < 3; ++c)
          img.at(py * patch + y, px * patch + x, c) = float(row[k++]);
  }
  return img;
}

/// A full encoded sequence: row 0 is the classification slot, the rest are
/// patch or token slots.
template <class T>
struct Encoded {
  Var<T> full;

  Var<T> cls() const { return slice_rows(full, 0, 1); }
  Var<T> seq() const { return slice_rows(full, 1, full.rows()); }
  size_t seq_len() const { return full.rows() - 1; }
};

template <class T>
struct VisionEncoder {
  Linear<T> proj;
  Var<T> cls, pos;
  TransformerTower<T> tower;
  size_t patch = 0;

  static VisionEncoder create(ParamStore<T>& ps, const std::string& prefix,
                              const EncoderConfig& cfg, bool grad = true) {
    VisionEncoder e;
    e.proj = Linear<T>::create(ps, prefix + ".proj", cfg.patch_dim(), cfg.d, grad);
    e.cls = ps.create(prefix + ".cls", 1, cfg.d, Init::TruncNormal, 0.02, grad);
    e.pos = ps.create(prefix + ".pos", cfg.n_patches() + 1, cfg.d, Init::TruncNormal, 0.02, grad);
    e.tower = TransformerTower<T>::create(ps, prefix + ".tower", cfg.depth, cfg.d, cfg.heads,
                                          cfg.d * cfg.mlp_ratio, grad);
    e.patch = cfg.patch;
    return e;
  }

  /// Accepts any image that fits the learned position table (the knowledge
  /// card images are smaller than news images).
  Encoded<T> encode(const Image& img) const {
    Var<T> patches = Var<T>::constant(patchify<T>(img, patch));
    Var<T> x = proj(patches);
    if (x.rows() + 1 > pos.rows()) throw DataError("encode_image: too many patches for position table");
    Var<T> withcls = concat_rows<T>({cls, x});
    Var<T> seq = add(withcls, slice_rows(pos, 0, withcls.rows()));
    return Encoded<T>{tower(seq)};
  }
};

template <class T>
struct TextEncoder {
  Var<T> table, cls, pos;
  TransformerTower<T> tower;
  size_t vocab_size = 0;

  static TextEncoder create(ParamStore<T>& ps, const std::string& prefix,
                            const EncoderConfig& cfg, bool grad = true) {
    TextEncoder e;
    e.table = ps.create(prefix + ".table", cfg.vocab_size, cfg.d, Init::TruncNormal, 0.02, grad);
    e.cls = ps.create(prefix + ".cls", 1, cfg.d, Init::TruncNormal, 0.02, grad);
    e.pos = ps.create(prefix + ".pos", cfg.max_len + 1, cfg.d, Init::TruncNormal, 0.02, grad);
    e.tower = TransformerTower<T>::create(ps, prefix + ".tower", cfg.text_depth, cfg.d, cfg.heads,
                                          cfg.d * cfg.mlp_ratio, grad);
    e.vocab_size = cfg.vocab_size;
    return e;
  }

  Encoded<T> encode(const std::vector<int>& ids) const {
    if (ids.size() + 1 > pos.rows()) throw DataError("encode_text: sequence too long");
    std::vector<size_t> rows;
    rows.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || size_t(id) >= vocab_size) throw DataError("encode_text: token id out of range");
      rows.push_back(size_t(id));
    }
    Var<T> emb = embed_rows(table, rows);
    Var<T> withcls = rows.empty() ? cls : concat_rows<T>({cls, emb});
    Var<T> seq = add(withcls, slice_rows(pos, 0, withcls.rows()));
    return Encoded<T>{tower(seq)};
  }
};

/// Caption with appended per-card notes. The notes are truncated to the
/// length budget; the caption never is.
struct NotedText {
  std::vector<int> tokens;
  size_t boundary = 0;  // caption length; grounding targets stay below this
  bool truncated = false;
};

inline NotedText concat_notes(const std::vector<int>& caption,
                              const std::vector<const CelebrityCard*>& cards, const Vocab& vocab,
                              size_t max_len, const KnowledgeDrop& drop = {}) {
  if (caption.size() > max_len)
    throw DataError("concat_notes: caption alone exceeds the length budget");
  NotedText out;
  out.tokens = caption;
  out.boundary = caption.size();
  for (const auto* card : cards)
    for (const auto& w : CapStore::note_tokens(*card, drop)) {
      if (out.tokens.size() >= max_len) {
        out.truncated = true;
        return out;
      }
      out.tokens.push_back(vocab.id(w));
    }
  return out;
}

/// Knowledge-image fusion: the news sequence queries the concatenated
/// retrieved-card patch sequences; with nothing retrieved it queries a
/// learned stand-in row, keeping the graph identical.
template <class T>
struct CelebFusion {
  Mha<T> att;
  Var<T> null_knowledge;

  static CelebFusion create(ParamStore<T>& ps, const std::string& prefix,
                            const EncoderConfig& cfg, bool grad = true) {
    CelebFusion f;
    f.att = Mha<T>::create(ps, prefix + ".att", cfg.d, cfg.heads, grad);
    f.null_knowledge = ps.create(prefix + ".null", 1, cfg.d, Init::TruncNormal, 0.02, grad);
    return f;
  }

  Var<T> operator()(const Var<T>& news_full, const std::vector<Var<T>>& celeb_pats) const {
    Var<T> cb = celeb_pats.empty() ? null_knowledge : concat_rows(celeb_pats);
    if (cb.cols() != news_full.cols()) throw ConfigError("celeb fusion: width mismatch");
    Var<T> fused = att(news_full, cb);
    if (fused.rows() != news_full.rows()) throw NumericError("celeb fusion: length contract broken");
    return fused;
  }
};

/// Bias-free linear map followed by L2 normalization, so outputs live on the
/// unit sphere and are scale-invariant in the input.
template <class T>
struct Projection {
  Var<T> w;

  static Projection create(ParamStore<T>& ps, const std::string& prefix, size_t d, bool grad = true) {
    return Projection{ps.create(prefix + ".w", d, d, Init::TruncNormal, 0.02, grad)};
  }

  Var<T> operator()(const Var<T>& x) const { return l2normalize_rows(mm(x, w)); }
};

namespace detail {
inline bool has_prefix(const std::string& s, const std::string& p) {
  return s.size() >= p.size() && s.compare(0, p.size(), p) == 0;
}
}  // namespace detail

/// Copies every parameter under src_prefix onto its dst_prefix counterpart.
template <class T>
void sync_params(ParamStore<T>& ps, const std::string& src_prefix, const std::string& dst_prefix) {
  for (const auto& name : ps.names()) {
    if (!detail::has_prefix(name, src_prefix)) continue;
    std::string dst = dst_prefix + name.substr(src_prefix.size());
    if (!ps.has(dst)) throw ConfigError("sync_params: missing twin parameter " + dst);
    ps.get(dst).value_mut() = ps.get(name).value();
  }
}

/// EMA-tracks every parameter under src_prefix into its dst_prefix twin.
template <class T>
void ema_params(ParamStore<T>& ps, const std::string& src_prefix, const std::string& dst_prefix,
                double m) {
  for (const auto& name : ps.names()) {
    if (!detail::has_prefix(name, src_prefix)) continue;
    Var<T> dst = ps.get(dst_prefix + name.substr(src_prefix.size()));
    ema_update(dst, ps.get(name), m);
  }
}

/// The full encoder stack: online vision/text towers with projection heads,
/// their frozen momentum twins, and the knowledge-image fusion block.
template <class T>
struct Encoders {
  EncoderConfig cfg;
  VisionEncoder<T> vision, vision_m;
  TextEncoder<T> text, text_m;
  Projection<T> proj_v, proj_t, proj_v_m, proj_t_m;
  CelebFusion<T> fuse;

  static Encoders create(ParamStore<T>& ps, const EncoderConfig& cfg) {
    cfg.validate();
    Encoders e;
    e.cfg = cfg;
    e.vision = VisionEncoder<T>::create(ps, "vision", cfg, true);
    e.text = TextEncoder<T>::create(ps, "text", cfg, true);
    e.proj_v = Projection<T>::create(ps, "proj_v", cfg.d, true);
    e.proj_t = Projection<T>::create(ps, "proj_t", cfg.d, true);
    e.fuse = CelebFusion<T>::create(ps, "fuse", cfg, true);
    e.vision_m = VisionEncoder<T>::create(ps, "momentum.vision", cfg, false);
    e.text_m = TextEncoder<T>::create(ps, "momentum.text", cfg, false);
    e.proj_v_m = Projection<T>::create(ps, "momentum.proj_v", cfg.d, false);
    e.proj_t_m = Projection<T>::create(ps, "momentum.proj_t", cfg.d, false);
    e.sync_momentum(ps);
    return e;
  }

  /// Momentum twins start as exact copies of the online parameters.
  void sync_momentum(ParamStore<T>& ps) const {
    for (auto p : {"vision", "text", "proj_v", "proj_t"})
      sync_params(ps, p, std::string("momentum.") + p);
  }

  /// One EMA tracking step after an optimizer update.
  void ema_step(ParamStore<T>& ps) const {
    for (auto p : {"vision", "text", "proj_v", "proj_t"})
      ema_params(ps, p, std::string("momentum.") + p, cfg.ema_m);
  }
};

}  // namespace ramdg
