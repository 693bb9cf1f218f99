#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cotrain/adam.hpp"
#include "cotrain/adversarial.hpp"
#include "cotrain/data.hpp"
#include "cotrain/errors.hpp"
#include "cotrain/losses.hpp"
#include "cotrain/metrics.hpp"
#include "cotrain/schedule.hpp"
#include "cotrain/segnet.hpp"
#include "cotrain/tape.hpp"

namespace cotrain {

enum class Method {
  kDct,
  kIndependent,
  kJsdOnly,
  kPseudoLabel,
  kMeanTeacher,
  kVatBaseline,
  kDivProbe,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kDct: return "dct";
    case Method::kIndependent: return "independent";
    case Method::kJsdOnly: return "jsd_only";
    case Method::kPseudoLabel: return "pseudo_label";
    case Method::kMeanTeacher: return "mean_teacher";
    case Method::kVatBaseline: return "vat_baseline";
    case Method::kDivProbe: return "div_probe";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::kDct, Method::kIndependent, Method::kJsdOnly, Method::kPseudoLabel,
                   Method::kMeanTeacher, Method::kVatBaseline, Method::kDivProbe})
    if (s == method_name(m)) return m;
  throw ConfigError("unknown method '" + s + "'");
}

struct CoTrainConfig {
  Method method = Method::kDct;
  int views = 2;
  int batch_size = 4;
  int epochs = 60;
  int iters_per_epoch = 0;  // 0: ceil(|U| / b), or ceil(|S| / b) when U empty
  SegModelConfig model;
  AdamConfig optim;
  int lr_decay_every = 90;
  double lr_decay_factor = 0.1;
  RampConfig ramp_cot{0.5, 1, 50};
  RampConfig ramp_div{0.05, 20, 50};
  AdvConfig adv;
  AugmentSpec augment;
  double pl_alpha_start = 50.0;  // pseudo-label confidence percentile schedule
  double pl_alpha_end = 99.0;
  double mt_ema_alpha = 0.99;
  std::uint64_t seed = 1;
  int checkpoint_interval = 10;

  bool is_cotrain_family() const {
    return method == Method::kDct || method == Method::kIndependent ||
           method == Method::kJsdOnly;
  }

  void validate() const {
    model.validate();
    adv.validate();
    augment.validate();
    ramp_cot.validate();
    ramp_div.validate();
    if (batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("trainer: epochs must be >= 0");
    if (is_cotrain_family() && views < 2)
      throw ConfigError("trainer: co-training needs views >= 2");
    if (pl_alpha_start < 50 || pl_alpha_end > 99 || pl_alpha_start > pl_alpha_end)
      throw ConfigError("trainer: pseudo-label alpha must stay within [50,99]");
    if (mt_ema_alpha < 0 || mt_ema_alpha > 1)
      throw ConfigError("trainer: ema_alpha must be in [0,1]");
  }
};

// One row per epoch; `seconds` is reported separately from the metric CSV so
// reruns stay byte-identical.
struct EpochRecord {
  int epoch = 0;
  std::string method;
  std::uint64_t seed = 0;
  std::vector<double> dsc_avg;   // per foreground class, mean over models
  double dsc_avg_mean = 0;
  std::vector<double> dsc_vote;  // per foreground class, soft vote
  double dsc_vote_mean = 0;
  double hd_vote_mean = 0;
  double l_sup = 0, l_cot = 0, l_div = 0, l_total = 0;
  double lambda_cot = 0, lambda_div = 0, lr = 0;
  double seconds = 0;
};

// Samples network pairs in blocks of ceil(k/2) iterations; every model index
// appears in every block. Within a block: shuffle the indices, pair them up,
// and for odd k close the last pair with a random distinct partner.
class PairSampler {
 public:
  PairSampler(int k, Rng rng) : k_(k), rng_(std::move(rng)) {
    if (k < 2) throw ContractError("pair sampler: needs k >= 2");
  }

  std::pair<int, int> next() {
    if (pos_ >= block_.size()) refill();
    return block_[pos_++];
  }

  static int block_len(int k) { return (k + 1) / 2; }

 private:
  void refill() {
    block_.clear();
    pos_ = 0;
    std::vector<int> perm(k_);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng_);
    for (int i = 0; i + 1 < k_; i += 2) block_.push_back({perm[i], perm[i + 1]});
    if (k_ % 2 == 1) {
      std::uniform_int_distribution<int> pick(0, k_ - 2);
      block_.push_back({perm[k_ - 1], perm[pick(rng_)]});
    }
  }

  int k_;
  Rng rng_;
  std::vector<std::pair<int, int>> block_;
  std::size_t pos_ = 0;
};

// Selects the ceil(alpha% * n) most confident entries; ties break to the
// lower index. Returns a 0/1 mask.
template <typename S>
std::vector<std::uint8_t> select_confident_pixels(const S* confidence, std::size_t n,
                                                  double alpha_pct) {
  const auto m = static_cast<std::size_t>(
      std::ceil(alpha_pct / 100.0 * static_cast<double>(n) - 1e-12));
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
    return confidence[a] > confidence[b];
  });
  std::vector<std::uint8_t> mask(n, 0);
  for (std::size_t i = 0; i < std::min(m, n); ++i) mask[idx[i]] = 1;
  return mask;
}

template <typename S>
struct TrainResult {
  std::vector<SegModel<S>> models;
  std::vector<EpochRecord> records;
};

template <typename S>
std::uint64_t model_seed(std::uint64_t experiment_seed, int model_index) {
  return detail::splitmix64(detail::splitmix64(experiment_seed) +
                            static_cast<std::uint64_t>(model_index) + 1);
}

// Validation metrics for an ensemble: per-class DSC averaged over models,
// per-class DSC/HD of the soft-vote mask.
template <typename S>
EpochRecord evaluate_ensemble(std::vector<SegModel<S>>& models, const LabeledSet<S>& val,
                              int num_classes) {
  if (models.empty() || val.size() == 0)
    throw ContractError("evaluate: needs models and validation data");
  std::vector<std::vector<SegMask>> per_model_masks(models.size());
  std::vector<SegMask> vote_masks;
  for (std::size_t v = 0; v < val.size(); ++v) {
    const auto& img = val.images[v];
    Tensor<S> batch(Shape{1, 1, img.shape[1], img.shape[2]});
    batch.data = img.data;
    std::vector<Tensor<S>> preds;
    preds.reserve(models.size());
    for (auto& m : models) preds.push_back(m.predict(batch));
    for (std::size_t i = 0; i < models.size(); ++i)
      per_model_masks[i].push_back(std::move(argmax_masks(preds[i])[0]));
    vote_masks.push_back(std::move(soft_vote(preds)[0]));
  }
  EpochRecord rec;
  rec.dsc_avg.assign(num_classes - 1, 0.0);
  for (std::size_t i = 0; i < models.size(); ++i) {
    EvalStats st = evaluate_masks(per_model_masks[i], val.masks, num_classes);
    for (int c = 0; c < num_classes - 1; ++c) rec.dsc_avg[c] += st.dsc_per_class[c];
    rec.dsc_avg_mean += st.dsc_mean;
  }
  for (auto& v : rec.dsc_avg) v /= static_cast<double>(models.size());
  rec.dsc_avg_mean /= static_cast<double>(models.size());
  EvalStats vote = evaluate_masks(vote_masks, val.masks, num_classes);
  rec.dsc_vote = vote.dsc_per_class;
  rec.dsc_vote_mean = vote.dsc_mean;
  rec.hd_vote_mean = vote.hd_mean;
  return rec;
}

// Runs one experiment: the co-training loop of the selected method, per-epoch
// validation, optional interval checkpointing into `out_dir`.
template <typename S>
class Trainer {
 public:
  Trainer(CoTrainConfig cfg, const DatasetSplit<S>* data) : cfg_(cfg), data_(data) {
    cfg_.validate();
    if (data_->labeled.size() == 0) throw ContractError("trainer: empty labeled pool");
    if (cfg_.method == Method::kDivProbe)
      throw ContractError("trainer: div_probe runs through run_div_probe()");
    apply_method_overrides();
    const int k = cfg_.is_cotrain_family() ? cfg_.views : 1;
    for (int i = 0; i < k; ++i)
      models_.emplace_back(cfg_.model, model_seed<S>(cfg_.seed, i));
    for (int i = 0; i < k; ++i) adam_.emplace_back(cfg_.optim);
    if (cfg_.method == Method::kMeanTeacher) teacher_.emplace_back(models_[0]);
    batch_rng_ = make_stream(cfg_.seed, RngPurpose::kDataOrder);
    aug_rng_ = make_stream(cfg_.seed, RngPurpose::kAugment);
    vat_rng_ = make_stream(cfg_.seed, RngPurpose::kVatInit);
    pair_sampler_.emplace(std::max(2, k), make_stream(cfg_.seed, RngPurpose::kPairSampling));
  }

  std::vector<SegModel<S>>& models() { return models_; }

  int iters_per_epoch() const {
    if (cfg_.iters_per_epoch > 0) return cfg_.iters_per_epoch;
    const std::size_t pool =
        data_->unlabeled.size() > 0 ? data_->unlabeled.size() : data_->labeled.size();
    return static_cast<int>((pool + cfg_.batch_size - 1) / cfg_.batch_size);
  }

  TrainResult<S> run(const std::string& out_dir = "") {
    TrainResult<S> result;
    const int t_max = iters_per_epoch();
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      const double lr =
          lr_at(epoch, cfg_.optim.lr, cfg_.lr_decay_every, cfg_.lr_decay_factor);
      for (auto& a : adam_) a.config().lr = lr;
      const double lambda_cot = ramp(epoch, ramp_cot_eff_);
      const double lambda_div = ramp(epoch, ramp_div_eff_);

      LossBundle epoch_mean;
      for (int it = 0; it < t_max; ++it) {
        LossBundle b = step(lambda_cot, lambda_div, epoch);
        if (!std::isfinite(b.total))
          throw NanLossError("non-finite loss", diagnostic(epoch, it, b, lr));
        epoch_mean.l_sup += b.l_sup;
        epoch_mean.l_cot += b.l_cot;
        epoch_mean.l_div += b.l_div;
        epoch_mean.total += b.total;
      }
      epoch_mean.l_sup /= t_max;
      epoch_mean.l_cot /= t_max;
      epoch_mean.l_div /= t_max;
      epoch_mean.total /= t_max;

      EpochRecord rec = evaluate();
      rec.epoch = epoch;
      rec.method = method_name(cfg_.method);
      rec.seed = cfg_.seed;
      rec.l_sup = epoch_mean.l_sup;
      rec.l_cot = epoch_mean.l_cot;
      rec.l_div = epoch_mean.l_div;
      rec.l_total = epoch_mean.total;
      rec.lambda_cot = lambda_cot;
      rec.lambda_div = lambda_div;
      rec.lr = lr;
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.records.push_back(std::move(rec));

      if (!out_dir.empty() &&
          ((epoch + 1) % cfg_.checkpoint_interval == 0 || epoch + 1 == cfg_.epochs))
        save_checkpoints(out_dir);
    }
    if (!out_dir.empty() && cfg_.epochs == 0) {
      // nothing trained; still expose the initialized models
      save_checkpoints(out_dir);
    }
    result.models = eval_models();
    return result;
  }

  // Evaluation of the current models on the validation set.
  EpochRecord evaluate() {
    return evaluate_ensemble(eval_models(), data_->val, cfg_.model.num_classes);
  }

  void save_checkpoints(const std::string& out_dir) {
    auto ms = eval_models();
    for (std::size_t i = 0; i < ms.size(); ++i)
      ms[i].save_checkpoint(out_dir + "/model_" + std::to_string(i) + ".ckpt");
  }

 private:
  // The models evaluation should see: the teacher for mean teacher, the
  // ensemble otherwise.
  std::vector<SegModel<S>>& eval_models() {
    return cfg_.method == Method::kMeanTeacher ? teacher_ : models_;
  }

  void apply_method_overrides() {
    ramp_cot_eff_ = cfg_.ramp_cot;
    ramp_div_eff_ = cfg_.ramp_div;
    if (cfg_.method == Method::kIndependent) {
      ramp_cot_eff_.lambda_max = 0;
      ramp_div_eff_.lambda_max = 0;
    } else if (cfg_.method == Method::kJsdOnly) {
      ramp_div_eff_.lambda_max = 0;
    }
  }

  LossBundle step(double lambda_cot, double lambda_div, int epoch) {
    switch (cfg_.method) {
      case Method::kDct:
      case Method::kIndependent:
      case Method::kJsdOnly:
        return step_cotrain(lambda_cot, lambda_div);
      case Method::kPseudoLabel:
        return step_pseudo_label(lambda_cot, epoch);
      case Method::kMeanTeacher:
        return step_mean_teacher(lambda_cot);
      case Method::kVatBaseline:
        return step_vat_baseline(lambda_cot);
      default:
        throw ContractError("trainer: unsupported method in step()");
    }
  }

  Tensor<S> collate(const std::vector<Tensor<S>>& imgs) const {
    const int h = imgs[0].shape[1], w = imgs[0].shape[2];
    Tensor<S> out(Shape{static_cast<int>(imgs.size()), 1, h, w});
    for (std::size_t i = 0; i < imgs.size(); ++i)
      std::copy(imgs[i].data.begin(), imgs[i].data.end(),
                out.data.begin() + static_cast<std::ptrdiff_t>(i * imgs[i].numel()));
    return out;
  }

  struct LabeledBatch {
    Tensor<S> images;
    Tensor<S> onehot;
  };

  LabeledBatch draw_labeled_batch() {
    const int b = cfg_.batch_size;
    std::uniform_int_distribution<std::size_t> pick(0, data_->labeled.size() - 1);
    std::vector<Tensor<S>> imgs;
    std::vector<std::uint8_t> labels;
    imgs.reserve(b);
    for (int i = 0; i < b; ++i) {
      const std::size_t idx = pick(batch_rng_);
      auto [img, mask] =
          augment(data_->labeled.images[idx], &data_->labeled.masks[idx], cfg_.augment, aug_rng_);
      imgs.push_back(std::move(img));
      labels.insert(labels.end(), mask.labels.begin(), mask.labels.end());
    }
    const int h = imgs[0].shape[1], w = imgs[0].shape[2];
    return {collate(imgs), one_hot<S>(labels, b, cfg_.model.num_classes, h, w)};
  }

  Tensor<S> draw_unlabeled_batch() {
    const int b = cfg_.batch_size;
    std::uniform_int_distribution<std::size_t> pick(0, data_->unlabeled.size() - 1);
    std::vector<Tensor<S>> imgs;
    imgs.reserve(b);
    for (int i = 0; i < b; ++i) {
      const std::size_t idx = pick(batch_rng_);
      imgs.push_back(
          augment<S>(data_->unlabeled.images[idx], nullptr, cfg_.augment, aug_rng_).first);
    }
    return collate(imgs);
  }

  // Unaugmented unlabeled batch plus per-image transforms (mean teacher needs
  // the same geometry on the teacher's prediction).
  std::pair<std::vector<Tensor<S>>, std::vector<GeoTransform>> draw_unlabeled_raw() {
    const int b = cfg_.batch_size;
    std::uniform_int_distribution<std::size_t> pick(0, data_->unlabeled.size() - 1);
    std::vector<Tensor<S>> imgs;
    std::vector<GeoTransform> trs;
    for (int i = 0; i < b; ++i) {
      imgs.push_back(data_->unlabeled.images[pick(batch_rng_)]);
      trs.push_back(draw_transform(cfg_.augment, aug_rng_));
    }
    return {std::move(imgs), std::move(trs)};
  }

  void warn_no_unlabeled() {
    if (!warned_no_unlabeled_) {
      std::cerr << "[cotrain] warning: unlabeled pool empty; agreement and VAT terms skipped\n";
      warned_no_unlabeled_ = true;
    }
  }

  // One inner-loop iteration of the co-training algorithm: sample a pair,
  // draw batches, build adversarials, assemble the three-term loss, update
  // the two sampled models.
  LossBundle step_cotrain(double lambda_cot, double lambda_div) {
    auto [i1, i2] = pair_sampler_->next();
    LabeledBatch s1 = draw_labeled_batch();
    LabeledBatch s2 = draw_labeled_batch();
    const bool has_unlabeled = data_->unlabeled.size() > 0;
    const bool want_unlabeled = lambda_cot > 0 || lambda_div > 0;
    if (want_unlabeled && !has_unlabeled) warn_no_unlabeled();
    const bool use_u = want_unlabeled && has_unlabeled;
    Tensor<S> xu;
    if (use_u) xu = draw_unlabeled_batch();

    AdvBatch<S> adv1, adv2;
    if (lambda_div > 0) {
      Tensor<S> empty;
      adv1 = generate_for_batch(models_[i1], s1.images, s1.onehot, use_u ? xu : empty, cfg_.adv,
                                vat_rng_);
      adv2 = generate_for_batch(models_[i2], s2.images, s2.onehot, use_u ? xu : empty, cfg_.adv,
                                vat_rng_);
    }

    Tape<S> t;
    auto p1_s = models_[i1].forward(t, t.constant(s1.images), /*train=*/true);
    auto p2_s = models_[i2].forward(t, t.constant(s2.images), /*train=*/true);
    auto l_sup = ops::add(t, sup_loss(t, p1_s, s1.onehot), sup_loss(t, p2_s, s2.onehot));
    auto total = l_sup;

    typename Tape<S>::Id p1_u = -1, p2_u = -1;
    if (use_u) {
      auto xu_id = t.constant(xu);
      p1_u = models_[i1].forward(t, xu_id, /*train=*/true);
      p2_u = models_[i2].forward(t, xu_id, /*train=*/true);
    }

    typename Tape<S>::Id l_cot = -1;
    if (lambda_cot > 0 && use_u) {
      std::vector<typename Tape<S>::Id> preds{p1_u, p2_u};
      // non-sampled views still contribute their (frozen) predictions
      for (int i = 0; i < static_cast<int>(models_.size()); ++i)
        if (i != i1 && i != i2)
          preds.push_back(models_[i].forward(t, t.constant(xu), /*train=*/false, /*frozen=*/true));
      l_cot = jsd_agreement(t, preds);
      total = ops::add(t, total, ops::scale(t, l_cot, static_cast<S>(lambda_cot)));
    }

    typename Tape<S>::Id l_div = -1;
    if (lambda_div > 0) {
      auto direction = [&](int attacked, int peer, const LabeledBatch& s, const AdvBatch<S>& adv,
                           typename Tape<S>::Id pu_attacked) {
        auto q_s = models_[peer].forward(t, t.constant(adv.labeled), /*train=*/true);
        auto ps_att = attacked == i1 ? p1_s : p2_s;
        auto ce = div_loss_direction(t, ps_att, q_s);
        if (use_u) {
          auto q_u = models_[peer].forward(t, t.constant(adv.unlabeled), /*train=*/true);
          auto ce_u = div_loss_direction(t, pu_attacked, q_u);
          ce = ops::scale(t, ops::add(t, ce, ce_u), S(0.5));
        }
        return ce;
      };
      auto d1 = direction(i1, i2, s1, adv1, p1_u);
      auto d2 = direction(i2, i1, s2, adv2, p2_u);
      l_div = ops::add(t, d1, d2);
      total = ops::add(t, total, ops::scale(t, l_div, static_cast<S>(lambda_div)));
    }

    t.backward(total);
    adam_[i1].step(models_[i1].parameters());
    adam_[i2].step(models_[i2].parameters());
    models_[i1].zero_grad();
    models_[i2].zero_grad();

    LossBundle b;
    b.l_sup = t.val(l_sup).data[0];
    b.l_cot = l_cot >= 0 ? t.val(l_cot).data[0] : 0.0;
    b.l_div = l_div >= 0 ? t.val(l_div).data[0] : 0.0;
    b.lambda_cot = lambda_cot;
    b.lambda_div = lambda_div;
    b.total = t.val(total).data[0];
    return b;
  }

  // Supervised CE plus CE against the model's own most confident predictions
  // on unlabeled pixels; the confidence percentile alpha rises linearly over
  // the training run.
  LossBundle step_pseudo_label(double weight, int epoch) {
    LabeledBatch s = draw_labeled_batch();
    const bool use_u = data_->unlabeled.size() > 0 && weight > 0;
    if (weight > 0 && data_->unlabeled.size() == 0) warn_no_unlabeled();

    Tape<S> t;
    auto p_s = models_[0].forward(t, t.constant(s.images), /*train=*/true);
    auto l_sup = sup_loss(t, p_s, s.onehot);
    auto total = l_sup;
    double l_unsup_val = 0;
    if (use_u) {
      Tensor<S> xu = draw_unlabeled_batch();
      const double alpha =
          cfg_.pl_alpha_start + (cfg_.pl_alpha_end - cfg_.pl_alpha_start) *
                                    std::min(1.0, static_cast<double>(epoch) /
                                                      std::max(1, cfg_.epochs));
      Tensor<S> pl_pred = models_[0].predict(xu);  // detached pseudo-labels
      const int b = pl_pred.shape[0], c = pl_pred.shape[1];
      const std::size_t plane = static_cast<std::size_t>(pl_pred.shape[2]) * pl_pred.shape[3];
      Tensor<S> target(pl_pred.shape);
      std::size_t selected = 0;
      std::vector<S> conf(plane);
      for (int i = 0; i < b; ++i) {
        for (std::size_t p = 0; p < plane; ++p) {
          int best = 0;
          for (int ch = 1; ch < c; ++ch)
            if (pl_pred.data[(static_cast<std::size_t>(i) * c + ch) * plane + p] >
                pl_pred.data[(static_cast<std::size_t>(i) * c + best) * plane + p])
              best = ch;
          conf[p] = pl_pred.data[(static_cast<std::size_t>(i) * c + best) * plane + p];
        }
        const auto mask = select_confident_pixels(conf.data(), plane, alpha);
        for (std::size_t p = 0; p < plane; ++p) {
          if (!mask[p]) continue;
          ++selected;
          int best = 0;
          for (int ch = 1; ch < c; ++ch)
            if (pl_pred.data[(static_cast<std::size_t>(i) * c + ch) * plane + p] >
                pl_pred.data[(static_cast<std::size_t>(i) * c + best) * plane + p])
              best = ch;
          target.data[(static_cast<std::size_t>(i) * c + best) * plane + p] = S(1);
        }
      }
      auto p_u = models_[0].forward(t, t.constant(xu), /*train=*/true);
      // -sum(selected one-hot * log p) / #selected
      auto ce = ops::sum(t, ops::mul(t, t.constant(target), ops::log_clamped(t, p_u)));
      auto l_unsup = ops::scale(t, ce, static_cast<S>(-1.0 / static_cast<double>(selected)));
      l_unsup_val = t.val(l_unsup).data[0];
      total = ops::add(t, total, ops::scale(t, l_unsup, static_cast<S>(weight)));
    }
    t.backward(total);
    adam_[0].step(models_[0].parameters());
    models_[0].zero_grad();
    LossBundle bundle;
    bundle.l_sup = t.val(l_sup).data[0];
    bundle.l_cot = l_unsup_val;
    bundle.lambda_cot = weight;
    bundle.total = t.val(total).data[0];
    return bundle;
  }

  // Student trains on supervised CE plus an L2 consistency with the teacher's
  // prediction under matched augmentation geometry; the teacher then tracks
  // the student by EMA.
  LossBundle step_mean_teacher(double weight) {
    LabeledBatch s = draw_labeled_batch();
    const bool use_u = data_->unlabeled.size() > 0 && weight > 0;
    if (weight > 0 && data_->unlabeled.size() == 0) warn_no_unlabeled();

    Tape<S> t;
    auto p_s = models_[0].forward(t, t.constant(s.images), /*train=*/true);
    auto l_sup = sup_loss(t, p_s, s.onehot);
    auto total = l_sup;
    double l_cons_val = 0;
    if (use_u) {
      auto [raw, trs] = draw_unlabeled_raw();
      std::vector<Tensor<S>> student_in;
      std::vector<Tensor<S>> teacher_target;
      for (std::size_t i = 0; i < raw.size(); ++i) {
        student_in.push_back(apply_to_field(raw[i], trs[i]));
        Tensor<S> tp = teacher_[0].predict(collate({raw[i]}));
        Tensor<S> tp_chw(Shape{tp.shape[1], tp.shape[2], tp.shape[3]}, std::move(tp.data));
        Tensor<S> moved = apply_to_field(tp_chw, trs[i]);
        teacher_target.push_back(std::move(moved));
      }
      const int c = cfg_.model.num_classes;
      const int h = student_in[0].shape[1], w = student_in[0].shape[2];
      Tensor<S> target(Shape{static_cast<int>(teacher_target.size()), c, h, w});
      for (std::size_t i = 0; i < teacher_target.size(); ++i)
        std::copy(teacher_target[i].data.begin(), teacher_target[i].data.end(),
                  target.data.begin() + static_cast<std::ptrdiff_t>(i * teacher_target[i].numel()));
      auto p_u = models_[0].forward(t, t.constant(collate(student_in)), /*train=*/true);
      auto diff = ops::sub(t, p_u, t.constant(target));
      auto l_cons = ops::mean(t, ops::mul(t, diff, diff));
      l_cons_val = t.val(l_cons).data[0];
      total = ops::add(t, total, ops::scale(t, l_cons, static_cast<S>(weight)));
    }
    t.backward(total);
    adam_[0].step(models_[0].parameters());
    models_[0].zero_grad();
    teacher_[0].ema_update_from(models_[0], cfg_.mt_ema_alpha);
    LossBundle bundle;
    bundle.l_sup = t.val(l_sup).data[0];
    bundle.l_cot = l_cons_val;
    bundle.lambda_cot = weight;
    bundle.total = t.val(total).data[0];
    return bundle;
  }

  // Supervised CE plus KL(f(x) || f(x + r_adv)) on the unlabeled batch.
  LossBundle step_vat_baseline(double weight) {
    LabeledBatch s = draw_labeled_batch();
    const bool use_u = data_->unlabeled.size() > 0 && weight > 0;
    if (weight > 0 && data_->unlabeled.size() == 0) warn_no_unlabeled();

    Tape<S> t;
    auto p_s = models_[0].forward(t, t.constant(s.images), /*train=*/true);
    auto l_sup = sup_loss(t, p_s, s.onehot);
    auto total = l_sup;
    double l_cons_val = 0;
    if (use_u) {
      Tensor<S> xu = draw_unlabeled_batch();
      Tensor<S> x_adv =
          vat_perturbation(models_[0], xu, cfg_.adv.eps_vat, cfg_.adv.xi, cfg_.adv.n_power,
                           vat_rng_);
      Tensor<S> clean = models_[0].predict(xu);  // detached target
      auto p_adv = models_[0].forward(t, t.constant(x_adv), /*train=*/true);
      auto l_cons = kl_divergence(t, t.constant(clean), p_adv);
      l_cons_val = t.val(l_cons).data[0];
      total = ops::add(t, total, ops::scale(t, l_cons, static_cast<S>(weight)));
    }
    t.backward(total);
    adam_[0].step(models_[0].parameters());
    models_[0].zero_grad();
    LossBundle bundle;
    bundle.l_sup = t.val(l_sup).data[0];
    bundle.l_cot = l_cons_val;
    bundle.lambda_cot = weight;
    bundle.total = t.val(total).data[0];
    return bundle;
  }

  std::string diagnostic(int epoch, int iter, const LossBundle& b, double lr) const {
    std::ostringstream os;
    os << "epoch=" << epoch << " iter=" << iter << " method=" << method_name(cfg_.method)
       << " seed=" << cfg_.seed << " l_sup=" << b.l_sup << " l_cot=" << b.l_cot
       << " l_div=" << b.l_div << " lambda_cot=" << b.lambda_cot
       << " lambda_div=" << b.lambda_div << " lr=" << lr;
    return os.str();
  }

  CoTrainConfig cfg_;
  const DatasetSplit<S>* data_;
  std::vector<SegModel<S>> models_;
  std::vector<SegModel<S>> teacher_;
  std::vector<AdamState<S>> adam_;
  std::optional<PairSampler> pair_sampler_;
  RampConfig ramp_cot_eff_, ramp_div_eff_;
  Rng batch_rng_, aug_rng_, vat_rng_;
  bool warned_no_unlabeled_ = false;
};

// -----------------------------------------------------------------------
// Diversity-only probe: a trainee is tied to a frozen reference solely by
// the diversity coupling. Adversarial examples for the reference are built
// with label-free FGSM targeted at its own hard predictions.
// -----------------------------------------------------------------------

struct ProbeResult {
  std::vector<double> trainee_dsc;  // per epoch, soft DSC mean on validation
  double reference_dsc = 0;
  std::vector<double> l_div;  // per epoch mean
};

template <typename S>
ProbeResult run_div_probe(const CoTrainConfig& cfg, const DatasetSplit<S>& data,
                          SegModel<S>& reference, SegModel<S>& trainee, double eps, int epochs) {
  Rng batch_rng = make_stream(cfg.seed, RngPurpose::kDataOrder);
  Rng aug_rng = make_stream(cfg.seed, RngPurpose::kAugment);
  AdamState<S> adam(cfg.optim);

  // coupling pool: every training image, labels unused
  std::vector<const Tensor<S>*> pool;
  for (const auto& img : data.labeled.images) pool.push_back(&img);
  for (const auto& img : data.unlabeled.images) pool.push_back(&img);
  if (pool.empty()) throw ContractError("probe: empty image pool");
  const int t_max = static_cast<int>((pool.size() + cfg.batch_size - 1) / cfg.batch_size);

  ProbeResult result;
  auto eval_dsc = [&](SegModel<S>& m) {
    std::vector<SegMask> masks;
    for (std::size_t v = 0; v < data.val.size(); ++v) {
      Tensor<S> img = data.val.images[v];
      Tensor<S> batch(Shape{1, 1, img.shape[1], img.shape[2]}, std::move(img.data));
      masks.push_back(std::move(argmax_masks(m.predict(batch))[0]));
    }
    return evaluate_masks(masks, data.val.masks, cfg.model.num_classes).dsc_mean;
  };
  result.reference_dsc = eval_dsc(reference);

  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double l_div_sum = 0;
    for (int it = 0; it < t_max; ++it) {
      std::vector<Tensor<S>> imgs;
      for (int i = 0; i < cfg.batch_size; ++i)
        imgs.push_back(augment<S>(*pool[pick(batch_rng)], nullptr, cfg.augment, aug_rng).first);
      const int h = imgs[0].shape[1], w = imgs[0].shape[2];
      Tensor<S> x(Shape{cfg.batch_size, 1, h, w});
      for (std::size_t i = 0; i < imgs.size(); ++i)
        std::copy(imgs[i].data.begin(), imgs[i].data.end(),
                  x.data.begin() + static_cast<std::ptrdiff_t>(i * imgs[i].numel()));

      Tensor<S> g_ref = fgsm_self_targeted(reference, x, eps);
      Tensor<S> target = reference.predict(x);
      Tape<S> t;
      auto q = trainee.forward(t, t.constant(g_ref), /*train=*/true);
      auto l_div = soft_cross_entropy(t, t.constant(target), q);
      l_div_sum += t.val(l_div).data[0];
      if (!std::isfinite(l_div_sum)) throw NanLossError("non-finite probe loss", "");
      t.backward(l_div);
      adam.step(trainee.parameters());
      trainee.zero_grad();
    }
    result.l_div.push_back(l_div_sum / t_max);
    result.trainee_dsc.push_back(eval_dsc(trainee));
  }
  return result;
}

}  // namespace cotrain
