#pragma once

// Training loop and everything around it: the AdamW optimizer with
// per-modality learning rates, the warmup+cosine schedule, dataset and
// knowledge-bank plumbing, checkpointing, the evaluation driver, and the
// grounding visualization writer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ramdg/cap_store.hpp"
#include "ramdg/cncl.hpp"
#include "ramdg/common.hpp"
#include "ramdg/data_forge.hpp"
#include "ramdg/heads.hpp"
#include "ramdg/image_io.hpp"
#include "ramdg/metrics.hpp"
#include "ramdg/model.hpp"
#include "ramdg/nn.hpp"
#include "ramdg/vocab.hpp"

namespace ramdg {

using forge::load_manifest;
using forge::SampleRecord;
using forge::validate_record;

struct TrainConfig {
  double text_lr = 5e-4;
  double image_lr = 2.5e-3;
  double weight_decay = 0.02;
  size_t epochs = 30;
  size_t warmup_epochs = 10;
  double min_lr = 2.5e-4;
  double warmup_start_lr = 2.5e-5;
  size_t batch = 32;
  double ema_m = 0.995;
  size_t queue_capacity = 1024;
  uint64_t seed = 7;
  std::string precision = "f32";
  AblationFlags flags;

  void validate() const {
    if (!(text_lr > 0.0) || !(image_lr > 0.0)) throw ConfigError("train: base lrs must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (batch == 0) throw ConfigError("train: batch must be positive");
    if (queue_capacity == 0) throw ConfigError("train: queue_capacity must be positive");
    if (!(min_lr > 0.0) || !(warmup_start_lr > 0.0))
      throw ConfigError("train: schedule lrs must be positive");
    if (warmup_start_lr > min_lr || min_lr > text_lr || min_lr > image_lr)
      throw ConfigError("train: lr ordering must be warmup_start <= min <= base");
    if (epochs < warmup_epochs) throw ConfigError("train: epochs must cover the warmup");
    if (!(ema_m >= 0.0 && ema_m < 1.0)) throw ConfigError("train: ema_m must lie in [0,1)");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("train: precision must be f32 or f64");
  }

  /// Swaps in the published full-scale learning rates (pretrained-backbone
  /// regime; two orders of magnitude below the from-scratch defaults).
  void apply_paper_lrs() {
    text_lr = 5e-6;
    image_lr = 2.5e-5;
    min_lr = 2.5e-6;
    warmup_start_lr = 2.5e-7;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"text_lr", text_lr},
                          {"image_lr", image_lr},
                          {"weight_decay", weight_decay},
                          {"epochs", epochs},
                          {"warmup_epochs", warmup_epochs},
                          {"min_lr", min_lr},
                          {"warmup_start_lr", warmup_start_lr},
                          {"batch", batch},
                          {"ema_m", ema_m},
                          {"queue_capacity", queue_capacity},
                          {"seed", seed},
                          {"precision", precision},
                          {"flags", flags.to_json()}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto get = [&](const char* k, auto& field) {
      if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("text_lr", c.text_lr);
    get("image_lr", c.image_lr);
    get("weight_decay", c.weight_decay);
    get("epochs", c.epochs);
    get("warmup_epochs", c.warmup_epochs);
    get("min_lr", c.min_lr);
    get("warmup_start_lr", c.warmup_start_lr);
    get("batch", c.batch);
    get("ema_m", c.ema_m);
    get("queue_capacity", c.queue_capacity);
    get("seed", c.seed);
    get("precision", c.precision);
    if (j.contains("flags")) c.flags = AblationFlags::from_json(j.at("flags"));
    return c;
  }
};

/// Linear warmup to the base lr, then cosine decay to min_lr at the final
/// epoch. Both endpoints are returned exactly, not through the closed form.
inline double lr_at(size_t epoch, size_t epochs, size_t warmup, double base, double warmup_start,
                    double min_lr) {
  if (epoch >= epochs) throw ConfigError("lr schedule: epoch out of range");
  if (epoch < warmup)
    return warmup_start + (base - warmup_start) * double(epoch) / double(warmup);
  if (epoch == warmup) return base;
  size_t span = (epochs - 1) - warmup;
  if (span == 0) return base;
  double t = double(epoch - warmup) / double(span);
  return min_lr + 0.5 * (base - min_lr) * (1.0 + std::cos(t * 3.14159265358979323846));
}

struct LrPair {
  double text = 0.0;
  double image = 0.0;
};

inline LrPair lr_schedule(size_t epoch, const TrainConfig& c) {
  return {lr_at(epoch, c.epochs, c.warmup_epochs, c.text_lr, c.warmup_start_lr, c.min_lr),
          lr_at(epoch, c.epochs, c.warmup_epochs, c.image_lr, c.warmup_start_lr, c.min_lr)};
}

/// AdamW with decoupled weight decay. Moments are kept in double regardless
/// of the parameter precision; parameters named "text.*" take the text lr,
/// everything else the image lr. Frozen parameters are skipped entirely, so
/// with zero gradients an update shrinks values by exactly (1 - lr*wd).
template <class T>
class AdamW {
 public:
  void step(ParamStore<T>& ps, double text_lr, double image_lr, double weight_decay) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (const auto& name : ps.names()) {
      Var<T> p = ps.get(name);
      if (!p.requires_grad()) continue;
      double lr = name.rfind("text.", 0) == 0 ? text_lr : image_lr;
      Tensor<T>& val = p.value_mut();
      const Tensor<T>& g = p.grad();
      bool has_grad = g.size() == val.size();
      auto& [m, v] = state_[name];
      if (m.empty()) {
        m.assign(val.size(), 0.0);
        v.assign(val.size(), 0.0);
      }
      for (size_t i = 0; i < val.size(); ++i) {
        double gi = has_grad ? double(g[i]) : 0.0;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        val[i] = T(double(val[i]) * (1.0 - lr * weight_decay) -
                   lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  size_t steps() const { return t_; }
  const std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>& state() const {
    return state_;
  }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

/// One split of a forged dataset, manifests validated and images loaded.
class Dataset {
 public:
  static constexpr size_t npos = size_t(-1);

  Dataset(const std::string& root, const std::string& split)
      : root_(root), split_(split), vocab_(Vocab::load(join(root, "vocab.json"))) {
    records_ = load_manifest(join(root, split + ".jsonl"));
    if (records_.empty()) throw DataError("dataset: split " + split + " is empty");
    for (const auto& r : records_) {
      validate_record(r);
      images_.push_back(read_ppm(join(root, r.image_rel)));
    }
  }

  size_t size() const { return records_.size(); }
  const SampleRecord& record(size_t i) const { return records_.at(i); }
  const Image& image(size_t i) const { return images_.at(i); }
  const std::vector<SampleRecord>& records() const { return records_; }
  const Vocab& vocab() const { return vocab_; }
  const std::string& root() const { return root_; }
  const std::string& split() const { return split_; }

  size_t find(const std::string& id) const {
    for (size_t i = 0; i < records_.size(); ++i)
      if (records_[i].id == id) return i;
    return npos;
  }

 private:
  static std::string join(const std::string& a, const std::string& b) {
    return (std::filesystem::path(a) / b).string();
  }

  std::string root_, split_;
  Vocab vocab_;
  std::vector<SampleRecord> records_;
  std::vector<Image> images_;
};

/// The retrieval side: celebrity cards plus their portrait variants, images
/// resolved relative to the card file. Default-constructed it is empty,
/// which is the no-retrieval (unseen-entity) mode.
class KnowledgeBank {
 public:
  KnowledgeBank() = default;

  explicit KnowledgeBank(const std::string& cap_path) : cap_(CapStore::load(cap_path)), loaded_(true) {
    std::filesystem::path dir = std::filesystem::path(cap_path).parent_path();
    for (size_t i = 0; i < cap_.size(); ++i) {
      std::vector<Image> variants;
      for (const auto& rel : cap_.card(i).image_refs)
        variants.push_back(read_ppm((dir / rel).string()));
      variants_.push_back(std::move(variants));
    }
  }

  bool empty() const { return !loaded_; }
  const CapStore& cap() const { return cap_; }
  size_t variants(size_t card) const { return variants_.at(card).size(); }
  const Image& image(size_t card, size_t variant) const { return variants_.at(card).at(variant); }

 private:
  CapStore cap_;
  std::vector<std::vector<Image>> variants_;
  bool loaded_ = false;
};

/// Resolves one record to concrete model inputs: retrieval, knowledge
/// ablations, card portrait choice. pick_rng selects a portrait variant per
/// card during training; null means the first portrait (evaluation rule).
inline SampleView make_view(const SampleRecord& rec, const Image& img, const KnowledgeBank& kb,
                            const Vocab& vocab, size_t max_len, const AblationFlags& flags,
                            Rng* pick_rng) {
  SampleView v;
  v.image = &img;
  v.caption = rec.caption;
  std::vector<const CelebrityCard*> cards;
  if (flags.retrieval && !kb.empty()) {
    for (size_t idx : kb.cap().retrieve(rec.caption_text)) {
      v.card_ids.push_back(int(idx));
      cards.push_back(&kb.cap().card(idx));
    }
  }
  for (int id : v.card_ids) {
    size_t ci = size_t(id);
    v.card_notes.push_back(vocab.encode(CapStore::note_tokens(kb.cap().card(ci), flags.drop)));
    if (!flags.drop.images) {
      size_t n = kb.variants(ci);
      if (n == 0) throw DataError("knowledge bank: card without portraits: " + kb.cap().card(ci).joined_name());
      v.card_images.push_back(&kb.image(ci, pick_rng ? pick_rng->uniform_int(n) : 0));
    }
  }
  v.noted = concat_notes(rec.caption, cards, vocab, max_len, flags.drop);
  return v;
}

/// Per-term loss values of one optimization step, already batch-averaged.
struct StepLog {
  double total = 0.0;
  double contrastive = 0.0;
  double binary = 0.0;
  double type = 0.0;
  double patch = 0.0;
  double bbox = 0.0;
  double token = 0.0;

  StepLog& operator+=(const StepLog& o) {
    total += o.total;
    contrastive += o.contrastive;
    binary += o.binary;
    type += o.type;
    patch += o.patch;
    bbox += o.bbox;
    token += o.token;
    return *this;
  }

  StepLog scaled(double s) const {
    return {total * s, contrastive * s, binary * s, type * s, patch * s, bbox * s, token * s};
  }
};

/// One batch's live loss graph plus the momentum features queued for after
/// the parameter update.
template <class T>
struct BatchGraph {
  Var<T> total;
  LossTerms<T> terms;
  StepLog log;
  std::vector<Tensor<T>> push_v, push_t;         // momentum news features, one row each
  std::vector<std::vector<int>> push_ids;        // card ids of the originating sample
};

namespace detail {

template <class T>
constexpr const char* precision_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw DataError("checkpoint: truncated header");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr char kCkptMagic[9] = "RAMDGCK1";

/// Header of a saved checkpoint, parsed without touching the payload; the
/// CLI reads it to pick the numeric type before loading.
inline nlohmann::json read_ckpt_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kCkptMagic, 8))
    throw DataError("checkpoint: bad magic in " + path);
  uint64_t len = detail::get_u64(in);
  std::string header(len, '\0');
  in.read(header.data(), std::streamsize(len));
  if (!in) throw DataError("checkpoint: truncated header in " + path);
  try {
    return nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: corrupt header: ") + e.what());
  }
}

/// Owns the model, optimizer, feature queues, and loop RNG. epoch() counts
/// completed epochs, so a reloaded trainer resumes where the saved one
/// stopped.
template <class T>
class Trainer {
 public:
  std::string data_dir, cap_path;  // echoed into checkpoints for eval/ground

  Trainer(ModelConfig mc, TrainConfig tc)
      : cfg_(validated(std::move(tc))),
        model_(with_ema(std::move(mc), cfg_), cfg_.seed),
        img_queue_(cfg_.queue_capacity, model_.cfg.enc.d),
        txt_queue_(cfg_.queue_capacity, model_.cfg.enc.d),
        rng_(derive_seed(cfg_.seed, fnv1a("train-loop"))) {}

  const TrainConfig& config() const { return cfg_; }
  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  AdamW<T>& optimizer() { return opt_; }
  FeatureQueue<T>& img_queue() { return img_queue_; }
  FeatureQueue<T>& txt_queue() { return txt_queue_; }
  Rng& rng() { return rng_; }
  size_t epoch() const { return epoch_; }

  /// Builds the full batch loss graph without touching any state. Queue
  /// snapshots are taken here, before this step's own pushes.
  BatchGraph<T> batch_losses(const Dataset& data, const std::vector<size_t>& indices,
                             const KnowledgeBank& kb, Rng* pick_rng) {
    if (indices.empty()) throw ConfigError("train step: empty batch");
    QueueSnapshot<T> img_snap = img_queue_.snapshot();
    QueueSnapshot<T> txt_snap = txt_queue_.snapshot();
    size_t grid = model_.cfg.enc.image_size / model_.cfg.enc.patch;

    BatchGraph<T> b;
    CnclBatch<T> cb;
    Var<T> binary, type, patch, box, token;
    auto acc = [](Var<T>& slot, Var<T> term) {
      slot = slot.defined() ? add(slot, term) : term;
    };
    for (size_t k = 0; k < indices.size(); ++k) {
      const SampleRecord& rec = data.record(indices[k]);
      if (rec.binary != 0 && rec.binary != 1)
        throw DataError("sample " + rec.id + ": binary label must be 0/1");
      SampleView view = make_view(rec, data.image(indices[k]), kb, data.vocab(),
                                  model_.cfg.enc.max_len, cfg_.flags, pick_rng);
      Forward<T> f = model_.forward(view, cfg_.flags);

      acc(binary, softmax_ce(f.bin_logits, size_t(rec.binary)));
      acc(type, bce_sum_logits(f.type_logits,
                               std::vector<int>(rec.types.begin(), rec.types.end())));
      acc(patch, bce_sum_logits(f.patch_logits, patch_labels_from_bbox(rec.bbox, grid, grid)));
      acc(box, bbox_loss(f.bbox, rec.bbox));
      acc(token, bce_sum_logits(f.tok_logits, rec.token_labels));

      if (cfg_.flags.cncl) {
        for (auto& a : f.anchors) {
          a.sample = k;
          cb.anchors.push_back(std::move(a));
        }
        cb.news_v.push_back(f.news_v_m);
        cb.news_t.push_back(f.news_t_m);
        b.push_v.push_back(f.news_v_m.value());
        b.push_t.push_back(f.news_t_m.value());
        b.push_ids.push_back(view.card_ids);
      }
    }

    double inv_n = 1.0 / double(indices.size());
    b.terms.binary = scale(binary, inv_n);
    b.terms.type = scale(type, inv_n);
    b.terms.patch = scale(patch, inv_n);
    b.terms.bbox = scale(box, inv_n);
    b.terms.token = scale(token, inv_n);
    b.terms.contrastive = cfg_.flags.cncl ? cncl_total(cb, img_snap, txt_snap, model_.temp)
                                          : Var<T>::constant(Tensor<T>(1, 1));
    b.total = total_loss(b.terms);

    b.log.total = double(b.total.value()[0]);
    b.log.contrastive = double(b.terms.contrastive.value()[0]);
    b.log.binary = double(b.terms.binary.value()[0]);
    b.log.type = double(b.terms.type.value()[0]);
    b.log.patch = double(b.terms.patch.value()[0]);
    b.log.bbox = double(b.terms.bbox.value()[0]);
    b.log.token = double(b.terms.token.value()[0]);
    return b;
  }

  /// Forward, backward, AdamW update, then the momentum bookkeeping (EMA
  /// step and queue pushes) — both skipped when the contrastive path is off.
  StepLog step(const Dataset& data, const std::vector<size_t>& indices, const KnowledgeBank& kb,
               LrPair lr, Rng* pick_rng) {
    model_.ps.zero_grads();
    BatchGraph<T> b = batch_losses(data, indices, kb, pick_rng);
    backward(b.total);
    opt_.step(model_.ps, lr.text, lr.image, cfg_.weight_decay);
    if (cfg_.flags.cncl) {
      model_.enc.ema_step(model_.ps);
      for (size_t i = 0; i < b.push_v.size(); ++i) {
        img_queue_.push(b.push_v[i].row(0), b.push_ids[i]);
        txt_queue_.push(b.push_t[i].row(0), b.push_ids[i]);
      }
    }
    return b.log;
  }

  /// Runs the remaining epochs; hook(epoch_index, mean_step_log) fires after
  /// each one. Sample order reshuffles per epoch from the loop RNG.
  template <class Hook>
  void train(const Dataset& data, const KnowledgeBank& kb, Hook&& hook) {
    for (; epoch_ < cfg_.epochs; ++epoch_) {
      LrPair lr = lr_schedule(epoch_, cfg_);
      std::vector<size_t> order(data.size());
      std::iota(order.begin(), order.end(), size_t(0));
      rng_.shuffle(order);
      StepLog mean;
      size_t batches = 0;
      for (size_t start = 0; start < order.size(); start += cfg_.batch) {
        size_t stop = std::min(start + cfg_.batch, order.size());
        std::vector<size_t> idx(order.begin() + long(start), order.begin() + long(stop));
        mean += step(data, idx, kb, lr, &rng_);
        ++batches;
      }
      hook(epoch_, mean.scaled(1.0 / double(batches)));
    }
  }

  /// Binary layout: magic, little-endian u64 header length, JSON header,
  /// then raw parameter values in creation order followed by both queues'
  /// feature arrays, all in the native numeric type.
  void save(const std::string& path) const {
    nlohmann::json h;
    h["precision"] = detail::precision_name<T>();
    h["model"] = model_.cfg.to_json();
    h["train"] = cfg_.to_json();
    h["epoch"] = epoch_;
    h["rng"] = rng_.save_state();
    h["data_dir"] = data_dir;
    h["cap_path"] = cap_path;
    auto params = nlohmann::json::array();
    for (const auto& name : model_.ps.names()) {
      const Tensor<T>& t = model_.ps.get(name).value();
      params.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    }
    h["params"] = params;
    auto queue_meta = [](const FeatureQueue<T>& q) {
      return nlohmann::json{{"size", q.size()}, {"cursor", q.cursor()}, {"ids", q.raw_ids()}};
    };
    h["queues"] = {{"img", queue_meta(img_queue_)}, {"txt", queue_meta(txt_queue_)}};

    std::string head = h.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot write " + path);
    out.write(kCkptMagic, 8);
    std::string len;
    detail::put_u64(len, head.size());
    out.write(len.data(), 8);
    out.write(head.data(), std::streamsize(head.size()));
    for (const auto& name : model_.ps.names()) {
      const Tensor<T>& t = model_.ps.get(name).value();
      out.write(reinterpret_cast<const char*>(t.row(0)), std::streamsize(t.size() * sizeof(T)));
    }
    for (const FeatureQueue<T>* q : {&img_queue_, &txt_queue_})
      out.write(reinterpret_cast<const char*>(q->raw_feats().data()),
                std::streamsize(q->raw_feats().size() * sizeof(T)));
    if (!out) throw DataError("checkpoint: write failed for " + path);
  }

  static Trainer load(const std::string& path) {
    nlohmann::json h = read_ckpt_header(path);
    std::string want = detail::precision_name<T>();
    std::string got = h.at("precision").get<std::string>();
    if (got != want)
      throw ConfigError("checkpoint: precision " + got + " does not match requested " + want);

    Trainer t(ModelConfig::from_json(h.at("model")), TrainConfig::from_json(h.at("train")));
    t.epoch_ = h.at("epoch").get<size_t>();
    t.rng_.load_state(h.at("rng").get<std::string>());
    t.data_dir = h.value("data_dir", std::string());
    t.cap_path = h.value("cap_path", std::string());

    std::ifstream in(path, std::ios::binary);
    in.seekg(8);
    uint64_t head_len = detail::get_u64(in);
    in.seekg(std::streamoff(16 + head_len));
    const auto& names = t.model_.ps.names();
    const auto& params = h.at("params");
    if (params.size() != names.size())
      throw DataError("checkpoint: parameter count mismatch");
    for (size_t i = 0; i < names.size(); ++i) {
      const auto& meta = params.at(i);
      if (meta.at("name").get<std::string>() != names[i])
        throw DataError("checkpoint: parameter order mismatch at " + names[i]);
      Tensor<T>& val = t.model_.ps.get(names[i]).value_mut();
      if (meta.at("rows").get<size_t>() != val.rows() ||
          meta.at("cols").get<size_t>() != val.cols())
        throw DataError("checkpoint: shape mismatch for " + names[i]);
      in.read(reinterpret_cast<char*>(val.row(0)), std::streamsize(val.size() * sizeof(T)));
    }
    auto load_queue = [&](FeatureQueue<T>& q, const nlohmann::json& meta) {
      std::vector<T> feats(q.capacity() * q.dim());
      in.read(reinterpret_cast<char*>(feats.data()), std::streamsize(feats.size() * sizeof(T)));
      q.restore(std::move(feats), meta.at("ids").get<std::vector<std::vector<int>>>(),
                meta.at("size").get<size_t>(), meta.at("cursor").get<size_t>());
    };
    load_queue(t.img_queue_, h.at("queues").at("img"));
    load_queue(t.txt_queue_, h.at("queues").at("txt"));
    if (!in) throw DataError("checkpoint: truncated payload in " + path);
    return t;
  }

 private:
  static TrainConfig validated(TrainConfig c) {
    c.validate();
    return c;
  }

  /// The EMA momentum lives in the train config but the encoders read it
  /// from theirs; keep one source of truth.
  static ModelConfig with_ema(ModelConfig mc, const TrainConfig& tc) {
    mc.enc.ema_m = tc.ema_m;
    return mc;
  }

  TrainConfig cfg_;
  Model<T> model_;
  AdamW<T> opt_;
  FeatureQueue<T> img_queue_, txt_queue_;
  Rng rng_;
  size_t epoch_ = 0;
};

/// Everything evaluation and grounding need from one sample's forward pass,
/// reduced to plain doubles.
struct Prediction {
  double binary_prob = 0.0;              // probability of the manipulated class
  std::array<double, 3> type_probs{};    // swap, visual attribute, text attribute
  std::array<double, 4> bbox{};          // decoded corners as produced by the head
  std::vector<double> token_probs;       // per caption token

  /// Boxes below the area floor collapse to the zero box, which scores IoU 1
  /// against original samples and 0 against any real ground-truth box.
  std::array<double, 4> effective_bbox() const {
    double w = std::max(0.0, bbox[2] - bbox[0]);
    double h = std::max(0.0, bbox[3] - bbox[1]);
    if (w * h < 1e-4) return {0.0, 0.0, 0.0, 0.0};
    return bbox;
  }
};

namespace detail {

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

template <class T>
Prediction predict_one(const Model<T>& m, const SampleView& view, AblationFlags flags) {
  flags.cncl = false;
  Forward<T> f = m.forward(view, flags);
  Prediction p;
  double l0 = double(f.bin_logits.value()[0]);
  double l1 = double(f.bin_logits.value()[1]);
  double hi = std::max(l0, l1);
  double e0 = std::exp(l0 - hi), e1 = std::exp(l1 - hi);
  p.binary_prob = e1 / (e0 + e1);
  for (size_t c = 0; c < 3; ++c) p.type_probs[c] = detail::sigmoid(double(f.type_logits.value()[c]));
  for (size_t k = 0; k < 4; ++k) p.bbox[k] = double(f.bbox.value()[k]);
  const Tensor<T>& tl = f.tok_logits.value();
  for (size_t i = 0; i < tl.rows(); ++i) p.token_probs.push_back(detail::sigmoid(double(tl[i])));
  return p;
}

/// Metrics over parallel record/prediction lists. Kept separate from the
/// model driver so an injected oracle predictor exercises the same path.
inline MetricsReport evaluate_records(const std::vector<SampleRecord>& recs,
                                      const std::vector<Prediction>& preds) {
  if (recs.size() != preds.size()) throw DataError("evaluate: records/predictions mismatch");
  if (recs.empty()) throw DataError("evaluate: empty split");

  std::vector<double> scores;
  std::vector<int> labels, pred_cls, gt_cls;
  std::vector<std::vector<double>> type_scores, tok_probs;
  std::vector<std::vector<int>> type_labels, tok_gt;
  std::vector<std::array<double, 4>> pred_boxes, gt_boxes, pred_manip, gt_manip;
  for (size_t i = 0; i < recs.size(); ++i) {
    const SampleRecord& r = recs[i];
    const Prediction& p = preds[i];
    scores.push_back(p.binary_prob);
    labels.push_back(r.binary);
    pred_cls.push_back(p.binary_prob >= 0.5 ? 1 : 0);
    gt_cls.push_back(r.binary);
    type_scores.push_back({p.type_probs[0], p.type_probs[1], p.type_probs[2]});
    type_labels.push_back({r.types[0], r.types[1], r.types[2]});
    std::array<double, 4> eff = p.effective_bbox();
    pred_boxes.push_back(eff);
    gt_boxes.push_back(r.bbox);
    if (r.binary == 1) {
      pred_manip.push_back(eff);
      gt_manip.push_back(r.bbox);
    }
    tok_probs.push_back(p.token_probs);
    tok_gt.push_back(r.token_labels);
  }

  MetricsReport rep;
  rep.auc = roc_auc(scores, labels);
  rep.eer = eer(scores, labels);
  rep.acc = accuracy(pred_cls, gt_cls);
  MultiLabelSummary ml = multilabel_metrics(type_scores, type_labels);
  rep.map = ml.map;
  rep.cf1 = ml.cf1;
  rep.of1 = ml.of1;
  rep.iou_all = iou_suite(pred_boxes, gt_boxes);
  if (!pred_manip.empty()) rep.iou_manip = iou_suite(pred_manip, gt_manip);
  rep.token = token_prf(tok_probs, tok_gt);
  return rep;
}

struct EvalOutput {
  MetricsReport report;
  std::vector<Prediction> preds;
};

/// Deterministic split evaluation: first portrait per card, contrastive path
/// off, samples in manifest order.
template <class T>
EvalOutput evaluate(const Model<T>& m, const Dataset& data, const KnowledgeBank& kb,
                    AblationFlags flags) {
  std::vector<Prediction> preds;
  preds.reserve(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    SampleView view = make_view(data.record(i), data.image(i), kb, data.vocab(),
                                m.cfg.enc.max_len, flags, nullptr);
    preds.push_back(predict_one(m, view, flags));
  }
  EvalOutput out;
  out.report = evaluate_records(data.records(), preds);
  out.preds = std::move(preds);
  return out;
}

struct GroundingResult {
  std::string id;
  std::vector<std::string> caption;
  int gt_binary = 0;
  std::array<double, 4> gt_bbox{};
  std::vector<int> gt_tokens;
  Prediction pred;

  nlohmann::json to_json() const {
    auto tokens = nlohmann::json::array();
    for (size_t i = 0; i < caption.size(); ++i)
      tokens.push_back({{"word", caption[i]},
                        {"prob", pred.token_probs[i]},
                        {"marked", pred.token_probs[i] >= 0.5},
                        {"gt", i < gt_tokens.size() ? gt_tokens[i] : 0}});
    return nlohmann::json{{"id", id},
                          {"binary_prob", pred.binary_prob},
                          {"type_probs", pred.type_probs},
                          {"bbox", pred.bbox},
                          {"bbox_effective", pred.effective_bbox()},
                          {"gt_binary", gt_binary},
                          {"gt_bbox", gt_bbox},
                          {"tokens", tokens}};
  }
};

template <class T>
GroundingResult ground_sample(const Model<T>& m, const SampleRecord& rec, const Image& img,
                              const KnowledgeBank& kb, const Vocab& vocab,
                              const AblationFlags& flags) {
  SampleView view = make_view(rec, img, kb, vocab, m.cfg.enc.max_len, flags, nullptr);
  GroundingResult g;
  g.id = rec.id;
  g.caption = rec.caption_text;
  g.gt_binary = rec.binary;
  g.gt_bbox = rec.bbox;
  g.gt_tokens = rec.token_labels;
  g.pred = predict_one(m, view, flags);
  return g;
}

/// Writes result.json, overlay.svg, and tokens.txt into dir. The overlay
/// embeds the sample image; ground truth draws red, the prediction blue, and
/// a prediction below the area floor is not drawn at all.
inline void write_ground_files(const std::string& dir, const GroundingResult& g,
                               const Image& img) {
  std::filesystem::create_directories(dir);
  auto path = [&](const char* f) { return (std::filesystem::path(dir) / f).string(); };

  write_text_file(path("result.json"), g.to_json().dump(2) + "\n");

  auto fmt = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9f", v);
    return std::string(buf);
  };
  auto rect = [&](const std::array<double, 4>& b, const char* color) {
    return "  <rect x=\"" + fmt(b[0]) + "\" y=\"" + fmt(b[1]) + "\" width=\"" +
           fmt(b[2] - b[0]) + "\" height=\"" + fmt(b[3] - b[1]) +
           "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"0.015\"/>\n";
  };
  std::vector<uint8_t> png = png_bytes(img);
  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" width=\"256\" "
      "height=\"256\">\n  <image href=\"data:image/png;base64," +
      base64(png.data(), png.size()) +
      "\" x=\"0\" y=\"0\" width=\"1\" height=\"1\" preserveAspectRatio=\"none\"/>\n";
  if ((g.gt_bbox[2] - g.gt_bbox[0]) * (g.gt_bbox[3] - g.gt_bbox[1]) > 0.0)
    svg += rect(g.gt_bbox, "red");
  std::array<double, 4> eff = g.pred.effective_bbox();
  if ((eff[2] - eff[0]) * (eff[3] - eff[1]) >= 1e-4) svg += rect(eff, "blue");
  svg += "</svg>\n";
  write_text_file(path("overlay.svg"), svg);

  std::string toks;
  for (size_t i = 0; i < g.caption.size(); ++i) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", g.pred.token_probs[i]);
    toks += g.caption[i] + "\t" + buf + "\t" + (g.pred.token_probs[i] >= 0.5 ? "*" : ".") + "\n";
  }
  write_text_file(path("tokens.txt"), toks);
}

}  // namespace ramdg
