#pragma once

// Prediction heads on top of the fused features: cross-modal fusion,
// patch forgery scoring, query-based visual refinement, box regression,
// token localization, and the binary/type classifiers with their losses.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "ramdg/nn.hpp"

namespace ramdg {

/// Sum over entries of the full binary cross-entropy from logits:
/// softplus(x) - x*y, exact and stable for y in {0,1}.
template <class T>
Var<T> bce_sum_logits(const Var<T>& logits, const std::vector<int>& targets) {
  if (logits.value().size() != targets.size())
    throw ConfigError("bce_sum_logits: logits/targets length mismatch");
  Tensor<T> y(logits.rows(), logits.cols());
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] != 0 && targets[i] != 1) throw ConfigError("bce_sum_logits: labels must be 0/1");
    y[i] = T(targets[i]);
  }
  return sum_all(sub(softplus(logits), hadamard(logits, Var<T>::constant(std::move(y)))));
}

/// Cross-entropy of a 1×k logit row against a hard label index.
template <class T>
Var<T> softmax_ce(const Var<T>& logits, size_t label) {
  if (logits.rows() != 1 || label >= logits.cols()) throw ConfigError("softmax_ce: bad label");
  return sub(lse_rows(logits), get(logits, 0, label));
}

/// News features attend over the fused text sequence to collect textual
/// clues; output keeps the visual sequence length.
template <class T>
struct CrossModalFusion {
  Mha<T> att;

  static CrossModalFusion create(ParamStore<T>& ps, size_t d, size_t heads, bool grad = true) {
    return {Mha<T>::create(ps, "xfuse", d, heads, grad)};
  }

  Var<T> operator()(const Var<T>& v_fused, const Var<T>& l_fused) const {
    if (v_fused.cols() != l_fused.cols()) throw ConfigError("cross-modal fusion: width mismatch");
    return att(v_fused, l_fused);
  }
};

/// Per-patch forgery scorer; the activation after the first two layers is
/// reused downstream as the refined patch sequence.
template <class T>
struct PatchHead {
  Mlp3<T> mlp;

  static PatchHead create(ParamStore<T>& ps, size_t d, bool grad = true) {
    return {Mlp3<T>::create(ps, "patch_head", d, d, 1, grad)};
  }

  Var<T> logits(const Var<T>& v_pat) const { return mlp(v_pat); }
  Var<T> refined(const Var<T>& v_pat) const { return mlp.penultimate(v_pat); }
};

/// Patch grid labels: 1 iff the cell rectangle overlaps the normalized box
/// with positive area. Row-major over the grid.
inline std::vector<int> patch_labels_from_bbox(const std::array<double, 4>& bbox, size_t gy,
                                               size_t gx) {
  std::vector<int> out(gy * gx, 0);
  for (size_t r = 0; r < gy; ++r)
    for (size_t c = 0; c < gx; ++c) {
      double cx1 = double(c) / double(gx), cx2 = double(c + 1) / double(gx);
      double cy1 = double(r) / double(gy), cy2 = double(r + 1) / double(gy);
      double iw = std::min(cx2, bbox[2]) - std::max(cx1, bbox[0]);
      double ih = std::min(cy2, bbox[3]) - std::max(cy1, bbox[1]);
      if (iw > 0.0 && ih > 0.0) out[r * gx + c] = 1;
    }
  return out;
}

/// Condenses the fused stream and refined patches into a fixed bank of q
/// rows for box regression: a global summary row attends over refined
/// patches, learned queries fan it out, and the result attends over the
/// residual stream (fused + raw vision, row by row).
template <class T>
struct VisualRefiner {
  Mha<T> local, collect, merge;
  Var<T> queries;

  static VisualRefiner create(ParamStore<T>& ps, size_t d, size_t heads, size_t q,
                              bool grad = true) {
    VisualRefiner r;
    r.local = Mha<T>::create(ps, "refiner.local", d, heads, grad);
    r.collect = Mha<T>::create(ps, "refiner.collect", d, heads, grad);
    r.merge = Mha<T>::create(ps, "refiner.merge", d, heads, grad);
    r.queries = ps.create("refiner.queries", q, d, Init::TruncNormal, 0.02, grad);
    return r;
  }

  Var<T> operator()(const Var<T>& m_fused, const Var<T>& refined_pat, const Var<T>& v_raw) const {
    if (m_fused.rows() != v_raw.rows() || m_fused.cols() != v_raw.cols())
      throw ConfigError("visual refiner: fused/vision shape mismatch");
    if (refined_pat.rows() + 1 != m_fused.rows())
      throw ConfigError("visual refiner: refined patch count mismatch");
    Var<T> summary = local(slice_rows(m_fused, 0, 1), refined_pat);
    Var<T> residual = add(m_fused, v_raw);
    Var<T> fanned = collect(queries, summary);
    return merge(fanned, residual);
  }
};

/// Sigmoid-decoded (cx, cy, w, h) to corner form, clamped to the unit square.
template <class T>
Var<T> bbox_decode_logits(const Var<T>& logits) {
  if (logits.rows() != 1 || logits.cols() != 4) throw ConfigError("bbox decode: expected 1×4");
  Var<T> s = sigmoid(logits);
  Var<T> cx = slice_cols(s, 0, 1), cy = slice_cols(s, 1, 2);
  Var<T> hw = scale(slice_cols(s, 2, 3), 0.5), hh = scale(slice_cols(s, 3, 4), 0.5);
  Var<T> corners = concat_cols<T>({sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)});
  Var<T> ones = Var<T>::constant(Tensor<T>(1, 4, T(1)));
  return vmin(clamp_min(corners, 0.0), ones);
}

template <class T>
struct BboxHead {
  Mlp2<T> mlp;

  static BboxHead create(ParamStore<T>& ps, size_t d, bool grad = true) {
    return {Mlp2<T>::create(ps, "bbox_head", d, d, 4, grad)};
  }

  Var<T> operator()(const Var<T>& refined_bank) const {
    return bbox_decode_logits(mlp(mean_rows(refined_bank)));
  }
};

/// L1 plus (1 - generalized IoU) on corner boxes; a zero-area target keeps
/// only the L1 pull toward it.
template <class T>
Var<T> bbox_loss(const Var<T>& pred, const std::array<double, 4>& gt) {
  if (pred.rows() != 1 || pred.cols() != 4) throw ConfigError("bbox loss: expected 1×4");
  Tensor<T> g(1, 4);
  for (size_t j = 0; j < 4; ++j) g[j] = T(gt[j]);
  Var<T> gtv = Var<T>::constant(std::move(g));
  Var<T> l1 = sum_all(vabs(sub(pred, gtv)));

  double gt_area = (gt[2] - gt[0]) * (gt[3] - gt[1]);
  if (!(gt_area > 0.0)) return l1;

  auto col = [](const Var<T>& v, size_t j) { return slice_cols(v, j, j + 1); };
  Var<T> iw = clamp_min(sub(vmin(col(pred, 2), col(gtv, 2)), vmax(col(pred, 0), col(gtv, 0))), 0.0);
  Var<T> ih = clamp_min(sub(vmin(col(pred, 3), col(gtv, 3)), vmax(col(pred, 1), col(gtv, 1))), 0.0);
  Var<T> inter = hadamard(iw, ih);
  Var<T> area_p = hadamard(sub(col(pred, 2), col(pred, 0)), sub(col(pred, 3), col(pred, 1)));
  Var<T> uni = sub(add_scalar(area_p, gt_area), inter);
  Var<T> iou = div(inter, uni);
  Var<T> ew = sub(vmax(col(pred, 2), col(gtv, 2)), vmin(col(pred, 0), col(gtv, 0)));
  Var<T> eh = sub(vmax(col(pred, 3), col(gtv, 3)), vmin(col(pred, 1), col(gtv, 1)));
  Var<T> enc = hadamard(ew, eh);
  Var<T> giou = sub(iou, div(sub(enc, uni), enc));
  return add(l1, add_scalar(neg(giou), 1.0));
}

/// Caption tokens attend over the fused visual sequence, then each carries
/// a shared summary of the fused stream on top of its own query path; a
/// per-token scorer turns the result into manipulation logits.
template <class T>
struct TokenLocalizer {
  Mha<T> vis, ctx;
  Mlp2<T> head;

  static TokenLocalizer create(ParamStore<T>& ps, size_t d, size_t heads, bool grad = true) {
    TokenLocalizer t;
    t.vis = Mha<T>::create(ps, "tok_vis", d, heads, grad);
    t.ctx = Mha<T>::create(ps, "tok_ctx", d, heads, grad);
    t.head = Mlp2<T>::create(ps, "tok_head", d, d, 1, grad);
    return t;
  }

  Var<T> features(const Var<T>& l_tok, const Var<T>& v_fused, const Var<T>& m_cls) const {
    Var<T> grounded = vis(l_tok, v_fused);
    return add(grounded, ctx(grounded, m_cls));
  }

  Var<T> logits(const Var<T>& l_tok, const Var<T>& v_fused, const Var<T>& m_cls) const {
    return head(features(l_tok, v_fused, m_cls));
  }
};

template <class T>
struct BinaryHead {
  Mlp2<T> mlp;

  static BinaryHead create(ParamStore<T>& ps, size_t d, bool grad = true) {
    return {Mlp2<T>::create(ps, "bin_head", d, d, 2, grad)};
  }

  // logit columns: 0 = real, 1 = fake
  Var<T> logits(const Var<T>& m_cls) const { return mlp(m_cls); }
  Var<T> probs(const Var<T>& m_cls) const { return softmax_rows(logits(m_cls)); }
};

template <class T>
struct TypeHead {
  Mlp2<T> mlp;

  static TypeHead create(ParamStore<T>& ps, size_t d, bool grad = true) {
    return {Mlp2<T>::create(ps, "type_head", d, d, 3, grad)};
  }

  // logit columns: swap, attribute-edit, text-edit
  Var<T> logits(const Var<T>& m_cls) const { return mlp(m_cls); }
  Var<T> probs(const Var<T>& m_cls) const { return sigmoid(logits(m_cls)); }
};

template <class T>
struct LossTerms {
  Var<T> contrastive, binary, type, patch, bbox, token;
};

template <class T>
Var<T> total_loss(const LossTerms<T>& t) {
  const std::array<std::pair<const char*, const Var<T>*>, 6> terms = {{
      {"contrastive", &t.contrastive},
      {"binary", &t.binary},
      {"type", &t.type},
      {"patch", &t.patch},
      {"bbox", &t.bbox},
      {"token", &t.token},
  }};
  for (const auto& [name, term] : terms) {
    if (!term->defined()) throw ConfigError(std::string("total loss: missing term ") + name);
    if (!term->value().all_finite())
      throw NumericError(std::string("total loss: non-finite ") + name + " term");
  }
  return add(add(add(t.contrastive, t.binary), add(t.type, t.patch)), add(t.bbox, t.token));
}

}  // namespace ramdg
