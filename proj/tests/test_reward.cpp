#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "rlcf/reward.hpp"

using namespace rlcf;
using testing::random_encoder;
using testing::random_tensor;

TEST_CASE("clip score is clamped and bounded") {
  CHECK(clip_score_from_cosine(-0.4) == 0.0);
  CHECK(clip_score_from_cosine(1.0) == 2.5);
  CHECK(clip_score_from_cosine(0.2) == doctest::Approx(0.5));
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const RewardModel rm{"m", random_encoder(rng), 1.0};
    const Tensor2 img = random_tensor(1, rm.model.d_in(), rng);
    for (std::size_t c = 0; c < rm.model.n_classes(); ++c) {
      const double s = clip_score(rm, c, img.row(0));
      CHECK(s >= 0.0);
      CHECK(s <= 2.5);
      const double cosv = cosine(encode_class_text(rm.model, c), encode_image(rm.model, img.row(0)));
      CHECK(s == doctest::Approx(clip_score_from_cosine(cosv)).epsilon(1e-12));
    }
  }
}

TEST_CASE("ensemble weights normalize") {
  Rng rng(2);
  std::vector<RewardModel> ms;
  for (double w : {10.0, 5.0, 3.0}) ms.push_back({"m", random_encoder(rng), w});
  const auto w = normalized_weights(ms);
  CHECK(w[0] == doctest::Approx(0.5556).epsilon(1e-4));
  CHECK(w[1] == doctest::Approx(0.2778).epsilon(1e-4));
  CHECK(w[2] == doctest::Approx(0.1667).epsilon(1e-4));
  CHECK_THROWS_AS(normalized_weights(std::vector<RewardModel>{}), Error);
  ms[1].weight = 0.0;
  CHECK_THROWS_AS(normalized_weights(ms), Error);
}

TEST_CASE("ensemble reduces to a single score") {
  Rng rng(3);
  const DualEncoder base = random_encoder(rng);
  const Tensor2 img = random_tensor(1, base.d_in(), rng);
  const std::vector<RewardModel> one{{"a", base, 3.0}};
  CHECK(ensemble_score(one, 2, img.row(0)) == doctest::Approx(clip_score(one[0], 2, img.row(0))).epsilon(1e-12));
  const std::vector<RewardModel> same{{"a", base, 10.0}, {"b", base, 5.0}, {"c", base, 3.0}};
  CHECK(ensemble_score(same, 1, img.row(0)) == doctest::Approx(clip_score(one[0], 1, img.row(0))).epsilon(1e-12));
  const auto row = random_tensor(1, base.d_tok(), rng);
  CHECK(ensemble_score_text(same, row.row(0), img.row(0)) ==
        doctest::Approx(clip_score_text(one[0], row.row(0), img.row(0))).epsilon(1e-12));
}

TEST_CASE("scorer matches the direct ensemble") {
  Rng rng(4);
  std::vector<RewardModel> ms{{"a", random_encoder(rng), 2.0}, {"b", random_encoder(rng), 1.0}};
  const RewardScorer scorer(ms);
  const Tensor2 imgs = random_tensor(3, 6, rng);
  const Tensor2 rows = random_tensor(2, 5, rng);
  const EnsembleEmbeddings ie = scorer.embed_images(imgs);
  const EnsembleEmbeddings te = scorer.embed_texts(rows);
  CHECK(ie.count() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 5; ++c)
      CHECK(scorer.score(scorer.class_texts(), c, ie, i) == doctest::Approx(ensemble_score(ms, c, imgs.row(i))).epsilon(1e-12));
    for (std::size_t t = 0; t < 2; ++t)
      CHECK(scorer.score(te, t, ie, i) == doctest::Approx(ensemble_score_text(ms, rows.row(t), imgs.row(i))).epsilon(1e-12));
    const auto lg = scorer.logits(ie, i, scorer.class_texts());
    for (std::size_t c = 0; c < 5; ++c) {
      const double expect = (2.0 * all_class_logits(ms[0].model, Tensor2::row_vector(imgs.row(i)))(0, c) +
                             1.0 * all_class_logits(ms[1].model, Tensor2::row_vector(imgs.row(i)))(0, c)) / 3.0;
      CHECK(lg[c] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("mean-baseline centering") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> raw(2 + rng.index(10));
    for (double& x : raw) x = 2.5 * rng.uniform();
    const RewardSignal s = center_rewards(raw);
    const double sum = std::accumulate(s.centered.begin(), s.centered.end(), 0.0);
    CHECK(std::abs(sum) <= 1e-9);
    CHECK(s.baseline == doctest::Approx(std::accumulate(raw.begin(), raw.end(), 0.0) / raw.size()));
    // property: shifting every raw reward leaves the centered rewards unchanged
    std::vector<double> shifted = raw;
    const double c = rng.normal(0, 3);
    for (double& x : shifted) x += c;
    const RewardSignal t = center_rewards(shifted);
    for (std::size_t i = 0; i < raw.size(); ++i) CHECK(std::abs(t.centered[i] - s.centered[i]) <= 1e-9);
  }
  CHECK(center_rewards(std::vector<double>{1.7}).centered == std::vector<double>{1.7});
  CHECK(center_rewards(std::vector<double>{1.7}, false).centered == std::vector<double>{0.0});
  CHECK_THROWS_AS(center_rewards(std::vector<double>{}), Error);
}
