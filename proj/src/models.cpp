#include "rlcf/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rlcf/adapt.hpp"

namespace rlcf {

namespace {

Tensor2 gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor2 t(rows, cols);
  for (double& x : t.values()) x = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

DualEncoder DualEncoder::create(std::size_t d_in, std::size_t d_emb, Tensor2 prompt,
                                Tensor2 class_table, Rng& rng, double logit_scale) {
  if (d_in == 0 || d_emb == 0) throw Error("DualEncoder: dimensions must be positive");
  if (prompt.cols() != class_table.cols()) throw Error("DualEncoder: prompt/class token width mismatch");
  if (!(logit_scale > 0.0)) throw Error("DualEncoder: logit_scale must be positive");
  const std::size_t d_tok = class_table.cols();
  DualEncoder m;
  m.logit_scale = logit_scale;
  m.params.add(std::string(block::kImageProj),
               gaussian(d_in, d_emb, 1.0 / std::sqrt(static_cast<double>(d_in)), rng));
  m.params.add(std::string(block::kTextProj),
               gaussian(d_tok, d_emb, 1.0 / std::sqrt(static_cast<double>(d_tok)), rng));
  m.params.add(std::string(block::kPrompt), std::move(prompt));
  m.params.add(std::string(block::kClassTable), std::move(class_table), false);
  return m;
}

ad::Var image_features(ad::Tape& tape, const ad::Bindings& b, const Tensor2& images) {
  return ad::normalize_rows(ad::matmul(tape.constant(images), b[block::kImageProj]));
}

ad::Var text_features(const ad::Bindings& b, ad::Var token_rows) {
  ad::Var prompt_sum = ad::sum_rows(b[block::kPrompt]);
  ad::Var pooled = ad::tanh(ad::add_row(token_rows, prompt_sum));
  return ad::normalize_rows(ad::matmul(pooled, b[block::kTextProj]));
}

ad::Var class_text_features(const ad::Bindings& b) {
  return text_features(b, b[block::kClassTable]);
}

ad::Var similarity_logits(ad::Var image_feats, ad::Var text_feats, double logit_scale) {
  return ad::scale(ad::matmul_nt(image_feats, text_feats), logit_scale);
}

Tensor2 encode_images(const DualEncoder& m, const Tensor2& images) {
  if (images.cols() != m.d_in()) {
    throw Error("encode_image: expected dimension " + std::to_string(m.d_in()) + ", got " +
                std::to_string(images.cols()));
  }
  ad::Tape tape;
  const ad::Bindings b = ad::bind(tape, m.params);
  return image_features(tape, b, images).value();
}

std::vector<double> encode_image(const DualEncoder& m, std::span<const double> v) {
  const Tensor2 out = encode_images(m, Tensor2::row_vector(v));
  return out.data();
}

Tensor2 encode_text_rows(const DualEncoder& m, const Tensor2& token_rows) {
  if (token_rows.cols() != m.d_tok()) throw Error("encode_text: token width mismatch");
  ad::Tape tape;
  const ad::Bindings b = ad::bind(tape, m.params);
  return text_features(b, tape.constant(token_rows)).value();
}

Tensor2 encode_class_texts(const DualEncoder& m) {
  ad::Tape tape;
  const ad::Bindings b = ad::bind(tape, m.params);
  return class_text_features(b).value();
}

std::vector<double> encode_class_text(const DualEncoder& m, std::size_t class_id) {
  if (class_id >= m.n_classes()) {
    throw Error("class id " + std::to_string(class_id) + " out of range [0, " +
                std::to_string(m.n_classes()) + ")");
  }
  const Tensor2& table = m.params.get(block::kClassTable);
  const Tensor2 out = encode_text_rows(m, Tensor2::row_vector(table.row(class_id)));
  return out.data();
}

std::vector<double> class_logits(const DualEncoder& m, std::span<const double> v,
                                 std::span<const std::size_t> class_set) {
  if (class_set.empty()) throw Error("class_logits: empty class set");
  const std::vector<double> img = encode_image(m, v);
  std::vector<double> out;
  out.reserve(class_set.size());
  for (std::size_t c : class_set) out.push_back(m.logit_scale * dot(img, encode_class_text(m, c)));
  return out;
}

Tensor2 all_class_logits(const DualEncoder& m, const Tensor2& images) {
  Tensor2 logits = matmul_nt(encode_images(m, images), encode_class_texts(m));
  for (double& x : logits.values()) x *= m.logit_scale;
  return logits;
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw Error("top_k: k=" + std::to_string(k) + " out of range for " +
                std::to_string(scores.size()) + " scores");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

DualEncoder pretrain_contrastive(const PretrainConfig& cfg, const ContrastiveData& data,
                                 PretrainLog* log) {
  const std::size_t classes = data.class_tokens.rows();
  if (classes < 2) throw Error("pretrain_contrastive: need at least 2 classes");
  if (cfg.d_emb == 0 || cfg.d_in == 0 || !(cfg.temperature > 0.0) || !(cfg.lr > 0.0)) {
    throw Error("pretrain_contrastive: config values must be positive");
  }
  if (data.images.cols() != cfg.d_in) throw Error("pretrain_contrastive: image dimension mismatch");
  if (data.images.rows() != data.labels.size()) throw Error("pretrain_contrastive: label count mismatch");

  Rng rng(cfg.seed);
  DualEncoder model =
      DualEncoder::create(cfg.d_in, cfg.d_emb, data.prompt, data.class_tokens, rng, cfg.logit_scale);
  model.params.train_only({block::kImageProj, block::kTextProj});

  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    if (data.labels[i] >= classes) throw Error("pretrain_contrastive: label out of range");
    by_class[data.labels[i]].push_back(i);
  }
  std::size_t iters = 0;
  for (const auto& v : by_class) {
    if (v.empty()) throw Error("pretrain_contrastive: every class needs at least one pair");
    iters = std::max(iters, v.size());
  }

  OptimizerState opt(AdamWConfig{.lr = cfg.lr});
  const double inv_tau = 1.0 / cfg.temperature;
  Tensor2 batch(classes, cfg.d_in);
  std::vector<std::size_t> diag(classes);
  std::iota(diag.begin(), diag.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto& v : by_class) rng.shuffle(v);
    double epoch_loss = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      for (std::size_t c = 0; c < classes; ++c) {
        const auto& pool = by_class[c];
        const auto src = data.images.row(pool[it % pool.size()]);
        std::copy(src.begin(), src.end(), batch.row(c).begin());
      }
      ad::LossFn loss = [&](ad::Tape& tape, const ad::Bindings& b) {
        ad::Var img = image_features(tape, b, batch);
        ad::Var txt = class_text_features(b);
        ad::Var i2t = ad::log_softmax_rows(similarity_logits(img, txt, inv_tau));
        ad::Var t2i = ad::log_softmax_rows(similarity_logits(txt, img, inv_tau));
        ad::Var pos = ad::add(ad::gather(i2t, diag, diag), ad::gather(t2i, diag, diag));
        return ad::scale(ad::mean(pos), -0.5);
      };
      ad::ValueAndGrad vg;
      try {
        vg = ad::value_and_grad(loss, model.params);
      } catch (const NumericError& e) {
        throw NumericError("pretrain_contrastive: non-finite loss at epoch " +
                           std::to_string(epoch) + " (" + e.what() + ")");
      }
      if (!std::isfinite(vg.value)) {
        throw NumericError("pretrain_contrastive: non-finite loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += vg.value;
      optimizer_step(opt, model.params, vg.grad);
    }
    if (log != nullptr) log->epoch_loss.push_back(epoch_loss / static_cast<double>(iters));
  }

  round_to_f32(model.params);
  model.params.train_only({block::kImageProj, block::kTextProj, block::kPrompt});
  return model;
}

double zero_shot_accuracy(const DualEncoder& m, const Tensor2& images,
                          std::span<const std::size_t> labels) {
  if (images.rows() != labels.size()) throw Error("zero_shot_accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  const Tensor2 logits = all_class_logits(m, images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += top_k(logits.row(i), 1)[0] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Checkpoint to_checkpoint(const DualEncoder& m) {
  Checkpoint c;
  c.params = m.params;
  c.meta = {{"kind", "dual_encoder"}, {"logit_scale", m.logit_scale}};
  return c;
}

DualEncoder dual_encoder_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "dual_encoder") throw Error("checkpoint is not a dual encoder");
  DualEncoder m;
  m.params = ckpt.params;
  m.logit_scale = ckpt.meta.value("logit_scale", 100.0);
  for (auto name : {block::kImageProj, block::kTextProj, block::kPrompt, block::kClassTable}) {
    if (!m.params.contains(name)) throw Error("dual encoder checkpoint missing block " + std::string(name));
  }
  return m;
}

}  // namespace rlcf
