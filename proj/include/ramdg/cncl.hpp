#pragma once

// Knowledge-news contrastive learning: learnable temperature, FIFO feature
// queues with per-entry identity tags, the four-direction InfoNCE objective
// anchored on retrieved-card features with momentum-encoded news positives.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ramdg/encoders.hpp"
#include "ramdg/nn.hpp"

namespace ramdg {

/// Log-parameterized temperature: exp(stored) stays positive through any
/// gradient step.
template <class T>
struct Temperature {
  Var<T> log_tau;

  static Temperature create(ParamStore<T>& ps, double tau_init = 0.07) {
    Temperature t{ps.create("tau.log", 1, 1, Init::Zero)};
    t.log_tau.value_mut()[0] = T(std::log(tau_init));
    return t;
  }

  static Temperature from_store(const ParamStore<T>& ps) { return {ps.get("tau.log")}; }

  Var<T> tau() const { return vexp(log_tau); }
  Var<T> inv_tau() const { return vexp(neg(log_tau)); }
  double value() const { return std::exp(double(log_tau.value()[0])); }
};

/// Immutable view of a queue taken before a step's pushes.
template <class T>
struct QueueSnapshot {
  Tensor<T> feats;                    // size × dim, oldest first
  std::vector<std::vector<int>> ids;  // identity tags per entry

  size_t size() const { return feats.rows(); }

  /// Entries usable as negatives for an anchor of this identity.
  std::vector<size_t> allowed_for(int celeb_id) const {
    std::vector<size_t> out;
    for (size_t k = 0; k < ids.size(); ++k)
      if (std::find(ids[k].begin(), ids[k].end(), celeb_id) == ids[k].end()) out.push_back(k);
    return out;
  }
};

/// Fixed-capacity FIFO of unit feature vectors tagged with the identities
/// present in the news sample they came from.
template <class T>
class FeatureQueue {
 public:
  FeatureQueue(size_t capacity, size_t dim) : capacity_(capacity), dim_(dim) {
    if (capacity == 0 || dim == 0) throw ConfigError("feature queue: zero capacity or width");
    feats_.assign(capacity * dim, T(0));
    ids_.assign(capacity, {});
  }

  size_t capacity() const { return capacity_; }
  size_t dim() const { return dim_; }
  size_t size() const { return size_; }
  size_t cursor() const { return cursor_; }

  void push(const T* feat, std::vector<int> id_tags) {
    T norm2 = T(0);
    for (size_t j = 0; j < dim_; ++j) norm2 += feat[j] * feat[j];
    if (std::abs(std::sqrt(double(norm2)) - 1.0) > 1e-6)
      throw NumericError("feature queue: non-unit vector pushed");
    std::copy(feat, feat + dim_, feats_.begin() + long(cursor_ * dim_));
    ids_[cursor_] = std::move(id_tags);
    cursor_ = (cursor_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
  }

  void push_rows(const Tensor<T>& rows, const std::vector<std::vector<int>>& id_sets) {
    if (rows.rows() != id_sets.size()) throw ConfigError("feature queue: ids/rows mismatch");
    if (rows.cols() != dim_) throw ConfigError("feature queue: width mismatch");
    for (size_t i = 0; i < rows.rows(); ++i) push(rows.row(i), id_sets[i]);
  }

  /// Contents oldest to newest.
  QueueSnapshot<T> snapshot() const {
    QueueSnapshot<T> s;
    s.feats = Tensor<T>(size_, dim_);
    s.ids.resize(size_);
    size_t start = size_ < capacity_ ? 0 : cursor_;
    for (size_t k = 0; k < size_; ++k) {
      size_t slot = (start + k) % capacity_;
      std::copy(feats_.begin() + long(slot * dim_), feats_.begin() + long((slot + 1) * dim_),
                s.feats.row(k));
      s.ids[k] = ids_[slot];
    }
    return s;
  }

  // checkpoint plumbing
  const std::vector<T>& raw_feats() const { return feats_; }
  const std::vector<std::vector<int>>& raw_ids() const { return ids_; }
  void restore(std::vector<T> feats, std::vector<std::vector<int>> ids, size_t size,
               size_t cursor) {
    if (feats.size() != capacity_ * dim_ || ids.size() != capacity_ || size > capacity_ ||
        cursor >= capacity_)
      throw DataError("feature queue: bad restored state");
    feats_ = std::move(feats);
    ids_ = std::move(ids);
    size_ = size;
    cursor_ = cursor;
  }

 private:
  size_t capacity_, dim_;
  std::vector<T> feats_;
  std::vector<std::vector<int>> ids_;
  size_t size_ = 0;
  size_t cursor_ = 0;
};

/// Cosine similarity of two projected classification features; the b side
/// comes from a momentum encoder in training.
template <class T>
Var<T> similarity(const Var<T>& a_cls, const Var<T>& b_cls, const Projection<T>& pa,
                  const Projection<T>& pb) {
  return mm_nt(pa(a_cls), pb(b_cls));
}

/// -log( e^{s+/tau} / (e^{s+/tau} + sum e^{s-/tau}) ), stabilized by the
/// max-subtraction inside lse_rows. sims is a 1×(1+K) row whose first entry
/// is the positive.
template <class T>
Var<T> infonce_row(const Var<T>& sims, const Temperature<T>& temp) {
  if (sims.rows() != 1 || sims.cols() == 0) throw ConfigError("infonce: expected a 1×n row");
  if (!sims.value().all_finite()) throw NumericError("infonce: non-finite similarity");
  Var<T> scaled = mul_scalar_var(sims, temp.inv_tau());
  return sub(lse_rows(scaled), get(scaled, 0, 0));
}

template <class T>
Var<T> infonce(const Var<T>& sim_pos, const std::vector<Var<T>>& sim_negs,
               const Temperature<T>& temp) {
  std::vector<Var<T>> parts = {sim_pos};
  parts.insert(parts.end(), sim_negs.begin(), sim_negs.end());
  return infonce_row(parts.size() == 1 ? sim_pos : concat_cols(parts), temp);
}

/// One retrieved celebrity in a batch: projected online anchor features and
/// the index of the news sample it was retrieved for. An undefined anchor
/// feature (a withheld knowledge field) drops its two directions.
template <class T>
struct CelebAnchor {
  int celeb_id = 0;
  size_t sample = 0;
  Var<T> v_anchor;  // P_v(online vision cls of the card image)
  Var<T> t_anchor;  // P_t(online text cls of the card note)
};

template <class T>
struct CnclBatch {
  std::vector<CelebAnchor<T>> anchors;
  std::vector<Var<T>> news_v;  // momentum-projected news image features per sample
  std::vector<Var<T>> news_t;  // momentum-projected news text features per sample
};

namespace detail {

template <class T>
Var<T> direction_loss(const Var<T>& anchor, const Var<T>& positive, const Var<T>& queue_all,
                      const std::vector<size_t>& allowed, const Temperature<T>& temp) {
  Var<T> pos = mm_nt(anchor, positive);
  if (allowed.empty()) return infonce_row(pos, temp);
  Var<T> negs = gather_cols(mm_nt(anchor, queue_all), allowed);
  return infonce_row(concat_cols<T>({pos, negs}), temp);
}

}  // namespace detail

/// Sum of the four directional InfoNCE losses, averaged over the retrieved
/// celebrities in the batch. Samples with no retrievals contribute nothing;
/// a batch with no retrievals at all scores exactly zero.
template <class T>
Var<T> cncl_total(const CnclBatch<T>& batch, const QueueSnapshot<T>& img_queue,
                  const QueueSnapshot<T>& txt_queue, const Temperature<T>& temp) {
  if (batch.anchors.empty()) return Var<T>::constant(Tensor<T>(1, 1));
  Var<T> img_all = Var<T>::constant(img_queue.feats);
  Var<T> txt_all = Var<T>::constant(txt_queue.feats);

  Var<T> total;
  size_t used = 0;
  for (const auto& a : batch.anchors) {
    if (a.sample >= batch.news_v.size() || a.sample >= batch.news_t.size())
      throw ConfigError("cncl: anchor sample index out of range");
    std::vector<size_t> img_ok = img_queue.allowed_for(a.celeb_id);
    std::vector<size_t> txt_ok = txt_queue.allowed_for(a.celeb_id);
    Var<T> sum;
    auto acc = [&](Var<T> term) { sum = sum.defined() ? add(sum, term) : term; };
    if (a.v_anchor.defined()) {
      acc(detail::direction_loss(a.v_anchor, batch.news_v[a.sample], img_all, img_ok, temp));
      acc(detail::direction_loss(a.v_anchor, batch.news_t[a.sample], txt_all, txt_ok, temp));
    }
    if (a.t_anchor.defined()) {
      acc(detail::direction_loss(a.t_anchor, batch.news_v[a.sample], img_all, img_ok, temp));
      acc(detail::direction_loss(a.t_anchor, batch.news_t[a.sample], txt_all, txt_ok, temp));
    }
    if (!sum.defined()) continue;
    total = total.defined() ? add(total, sum) : sum;
    ++used;
  }
  if (used == 0) return Var<T>::constant(Tensor<T>(1, 1));
  return scale(total, 1.0 / double(used));
}

}  // namespace ramdg
