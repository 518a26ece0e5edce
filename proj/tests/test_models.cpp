#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "rlcf/models.hpp"

using namespace rlcf;
using testing::random_encoder;
using testing::random_tensor;

namespace {

std::vector<std::size_t> brute_top_k(std::span<const double> s, std::size_t k) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

double norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("top_k equals a stable sort, ties to the lower index") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(1 + rng.index(10));
    for (double& x : s) x = static_cast<double>(rng.index(4));  // many ties
    const std::size_t k = 1 + rng.index(s.size());
    CHECK(top_k(s, k) == brute_top_k(s, k));
  }
  CHECK_THROWS_AS(top_k(std::vector<double>{1, 2}, 5), Error);
}

TEST_CASE("encoders produce unit embeddings and consistent logits") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const DualEncoder m = random_encoder(rng);
    const Tensor2 imgs = random_tensor(3, m.d_in(), rng);
    const Tensor2 e = encode_images(m, imgs);
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(norm(e.row(r)) == doctest::Approx(1.0));
      const auto single = encode_image(m, imgs.row(r));
      for (std::size_t j = 0; j < single.size(); ++j) CHECK(single[j] == doctest::Approx(e(r, j)).epsilon(1e-12));
    }
    const Tensor2 t = encode_class_texts(m);
    for (std::size_t c = 0; c < m.n_classes(); ++c) CHECK(norm(t.row(c)) == doctest::Approx(1.0));
    // class text c equals the free-text encoding of class_table row c
    const Tensor2 free = encode_text_rows(m, m.params.get(block::kClassTable));
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(free[i] == doctest::Approx(t[i]).epsilon(1e-12));
    const Tensor2 all = all_class_logits(m, imgs);
    std::vector<std::size_t> classes(m.n_classes());
    std::iota(classes.begin(), classes.end(), std::size_t{0});
    const auto row1 = class_logits(m, imgs.row(1), classes);
    for (std::size_t c = 0; c < classes.size(); ++c) {
      CHECK(row1[c] == doctest::Approx(all(1, c)).epsilon(1e-12));
      CHECK(std::abs(all(1, c)) <= m.logit_scale + 1e-9);
    }
    CHECK_THROWS_AS(encode_class_text(m, m.n_classes()), Error);
  }
}

TEST_CASE("similarity logits are differentiable through both branches") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(50 + seed);
    DualEncoder m = random_encoder(rng);
    m.params.train_only({block::kImageProj, block::kTextProj, block::kPrompt});
    const Tensor2 imgs = random_tensor(2, m.d_in(), rng);
    const Tensor2 w = random_tensor(2, m.n_classes(), rng);
    const ad::LossFn f = [&](ad::Tape& tape, const ad::Bindings& b) {
      return ad::weighted_sum(similarity_logits(image_features(tape, b, imgs), class_text_features(b), m.logit_scale), w);
    };
    CHECK(relative_error(ad::grad(f, m.params), ad::finite_diff(f, m.params, 1e-6)) < 1e-6);
  }
}

TEST_CASE("contrastive pretraining learns a separable toy problem") {
  Rng rng(3);
  const std::size_t C = 4, d_in = 8, d_tok = 6;
  ContrastiveData data;
  data.class_tokens = random_tensor(C, d_tok, rng);
  data.prompt = random_tensor(2, d_tok, rng, 0.3);
  const Tensor2 protos = random_tensor(C, d_in, rng);
  data.images = Tensor2(C * 20, d_in);
  for (std::size_t i = 0; i < C * 20; ++i) {
    data.labels.push_back(i % C);
    for (std::size_t j = 0; j < d_in; ++j) data.images(i, j) = protos(i % C, j) + rng.normal(0, 0.2);
  }
  PretrainConfig cfg{.d_in = d_in, .d_tok = d_tok, .d_emb = 6, .classes = C, .epochs = 20, .seed = 9};
  PretrainLog log;
  const DualEncoder m = pretrain_contrastive(cfg, data, &log);
  CHECK(log.epoch_loss.size() == 20);
  CHECK(log.epoch_loss.back() < log.epoch_loss.front());
  CHECK(zero_shot_accuracy(m, data.images, data.labels) > 0.9);
  // prompt is not trained (only rounded)
  for (std::size_t i = 0; i < data.prompt.size(); ++i) {
    CHECK(m.params.get(block::kPrompt)[i] == static_cast<double>(static_cast<float>(data.prompt[i])));
  }

  // deterministic, and rounding makes the checkpoint exact
  const DualEncoder again = pretrain_contrastive(cfg, data);
  CHECK(again.params.bit_equal(m.params));
  const auto dir = testing::scratch_dir("models_ckpt");
  save_checkpoint(dir / "enc", to_checkpoint(m));
  const DualEncoder back = dual_encoder_from_checkpoint(load_checkpoint(dir / "enc"));
  CHECK(back.params.bit_equal(m.params));
  CHECK(back.logit_scale == m.logit_scale);

  Checkpoint wrong = to_checkpoint(m);
  wrong.meta["kind"] = "captioner";
  CHECK_THROWS_AS(dual_encoder_from_checkpoint(wrong), Error);
}
