#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "rlcf/pipelines.hpp"

using namespace rlcf;
using testing::tiny_assets;

namespace {

TTAConfig classify_cfg(Mode mode, Objective obj) {
  TTAConfig c = TTAConfig::defaults(Task::classify, mode);
  c.objective = obj;
  c.n_views = 16;
  c.rho = 0.25;
  c.lr = 1e-2;
  return c;
}

ParamTree scoped(const ParamTree& p, const TTAConfig& cfg) {
  ParamTree q = p;
  apply_scope(q, cfg);
  return q;
}

void check_scope_held(const ParamTree& before, const ParamTree& after, const TTAConfig& cfg) {
  const auto tunable = tunable_blocks(cfg);
  bool moved = false;
  for (const auto& b : before.blocks()) {
    const bool is_tunable = std::find(tunable.begin(), tunable.end(), b.name) != tunable.end();
    if (is_tunable) {
      moved = moved || !after.block_bit_equal(before, b.name);
    } else {
      CHECK_MESSAGE(after.block_bit_equal(before, b.name), "block " << b.name << " changed");
    }
  }
  CHECK(moved);
}

CaptionTextFn text_fn(const ShiftBenchmark& b) {
  return [&b](std::span<const Token> t) { return b.bag_row(b.caption_attributes(t)); };
}

}  // namespace

TEST_CASE("enum names round trip and errors list the choices") {
  for (Objective o : {Objective::none, Objective::rlcf, Objective::entropy_min, Objective::pseudo_label, Objective::kd})
    CHECK(parse_objective(to_string(o)) == o);
  for (Task t : {Task::classify, Task::retrieve_t2i, Task::retrieve_i2t, Task::caption}) CHECK(parse_task(to_string(t)) == t);
  for (Mode m : {Mode::prompt, Mode::encoder, Mode::projector}) CHECK(parse_mode(to_string(m)) == m);
  CHECK_THROWS_WITH_AS(parse_objective("tpt"), doctest::Contains("entropy_min"), Error);
}

TEST_CASE("defaults and validation") {
  const TTAConfig p = TTAConfig::defaults(Task::classify, Mode::prompt);
  CHECK(p.steps == 3);
  CHECK(p.K == 3);
  CHECK(p.n_views == 64);
  CHECK(p.rho == 0.1);
  CHECK(p.lr == 7e-3);
  CHECK(TTAConfig::defaults(Task::retrieve_t2i, Mode::encoder).K == 12);
  CHECK(TTAConfig::defaults(Task::retrieve_i2t, Mode::encoder).K == 16);
  const TTAConfig cap = TTAConfig::defaults(Task::caption, Mode::projector);
  CHECK(cap.K == 10);
  CHECK(cap.beam_width == 5);
  CHECK(cap.mode == Mode::projector);
  CHECK(MomentumConfig{}.m == 0.9998);
  CHECK(MomentumConfig{}.interval == 64);

  TTAConfig bad = p;
  bad.rho = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = p;
  bad.K = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = p;
  bad.mode = Mode::projector;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cap;
  bad.objective = Objective::kd;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("tunable blocks per mode") {
  CHECK(tunable_blocks(TTAConfig::defaults(Task::classify, Mode::prompt)) == std::vector<std::string>{"prompt"});
  CHECK(tunable_blocks(TTAConfig::defaults(Task::classify, Mode::encoder)) == std::vector<std::string>{"image_proj"});
  CHECK(tunable_blocks(TTAConfig::defaults(Task::retrieve_t2i, Mode::encoder)) == std::vector<std::string>{"text_proj"});
  CHECK(tunable_blocks(TTAConfig::defaults(Task::retrieve_i2t, Mode::encoder)) == std::vector<std::string>{"image_proj"});
  CHECK(tunable_blocks(TTAConfig::defaults(Task::caption, Mode::projector)) == std::vector<std::string>{"projector"});
}

TEST_CASE("augmented views") {
  Rng rng(1);
  std::vector<double> v(400);
  for (double& x : v) x = 1.0 + rng.uniform();
  Rng r2(2);
  const Tensor2 views = augment_views(v, 64, r2);
  CHECK(views.rows() == 64);
  for (std::size_t j = 0; j < v.size(); ++j) CHECK(views(0, j) == v[j]);
  const double sigma = 0.05 * l2_norm(v) / 20.0;
  std::size_t masked = 0;
  for (std::size_t i = 1; i < 64; ++i)
    for (std::size_t j = 0; j < v.size(); ++j) masked += std::abs(views(i, j)) < 6 * sigma;
  const double frac = static_cast<double>(masked) / (63.0 * v.size());
  CHECK(frac == doctest::Approx(0.25).epsilon(0.05));
  Rng r3(2);
  CHECK(augment_views(v, 64, r3).data() == views.data());
  CHECK_THROWS_AS(augment_views(v, 0, r3), Error);
}

TEST_CASE("confidence selection equals brute-force entropy ranking") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(70), c = 2 + rng.index(6);
    Tensor2 logits(n, c);
    for (double& x : logits.values()) x = static_cast<double>(rng.index(3));  // ties between rows
    const double rho = 0.01 + 0.99 * rng.uniform();
    const auto sel = confidence_select(logits, rho);
    const std::size_t keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rho * n)));
    REQUIRE(sel.size() == keep);
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t i = 0; i < n; ++i) order.emplace_back(entropy(softmax(logits.row(i))), i);
    std::sort(order.begin(), order.end());
    for (std::size_t k = 0; k < keep; ++k) CHECK(sel[k] == order[k].second);
  }
  CHECK(confidence_select(Tensor2(64, 3), 0.1).size() == 6);
  CHECK_THROWS_AS(confidence_select(Tensor2(4, 3), 1.5), Error);
}

TEST_CASE("objective none reproduces the zero-shot prediction") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  const TTAConfig cfg = classify_cfg(Mode::encoder, Objective::none);
  EpisodeState ep(scoped(a.student.params, cfg), cfg.optimizer());
  for (std::size_t i = 0; i < 20; ++i) {
    const auto out = tta_classify(a.bench.target.images.row(i), ep, a.student.logit_scale, scorer, cfg, i);
    const Tensor2 lg = all_class_logits(a.student, Tensor2::row_vector(a.bench.target.images.row(i)));
    CHECK(out.prediction == top_k(lg.row(0), 1)[0]);
    CHECK(out.confidence == softmax(lg.row(0))[out.prediction]);
    CHECK(out.trace.steps.size() == 3);
    CHECK(out.trace.initial_prediction == out.prediction);
  }
}

TEST_CASE("classification episodes respect scope and reset") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  for (Mode mode : {Mode::prompt, Mode::encoder}) {
    for (Objective obj : {Objective::rlcf, Objective::entropy_min, Objective::pseudo_label, Objective::kd}) {
      TTAConfig cfg = classify_cfg(mode, obj);
      cfg.momentum.enabled = true;  // to get θ̄ back
      const ParamTree pristine = scoped(a.student.params, cfg);
      EpisodeState ep(pristine, cfg.optimizer());
      const auto out = tta_classify(a.bench.target.images.row(0), ep, a.student.logit_scale, scorer, cfg, 7);
      check_scope_held(pristine, out.adapted, cfg);
      CHECK(ep.live.bit_equal(pristine));
      CHECK(ep.optimizer.is_zeroed());
      CHECK(out.top5.size() == 5);
      CHECK(out.top5.front() == out.prediction);
      for (const auto& st : out.trace.steps) {
        CHECK(st.selected_views == 4);
        if (obj == Objective::rlcf) {
          CHECK(st.candidates.size() == 4 * cfg.K);
          double s = 0;
          for (double x : st.centered) s += x;
          CHECK(std::abs(s) < 1e-9);
          for (double x : st.raw) CHECK((x >= 0.0 && x <= 2.5));
        }
      }
    }
  }
}

TEST_CASE("per-sample seeds make episodes reproducible") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  const TTAConfig cfg = classify_cfg(Mode::encoder, Objective::rlcf);
  EpisodeState ep(scoped(a.student.params, cfg), cfg.optimizer());
  const auto x = tta_classify(a.bench.target.images.row(3), ep, a.student.logit_scale, scorer, cfg, 11);
  const auto y = tta_classify(a.bench.target.images.row(3), ep, a.student.logit_scale, scorer, cfg, 11);
  CHECK(to_json(x.trace, false) == to_json(y.trace, false));
}

TEST_CASE("rlcf rejects K larger than the candidate set") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  TTAConfig cfg = classify_cfg(Mode::encoder, Objective::rlcf);
  cfg.K = a.student.n_classes() + 1;
  const ParamTree pristine = scoped(a.student.params, cfg);
  EpisodeState ep(pristine, cfg.optimizer());
  CHECK_THROWS_WITH_AS(tta_classify(a.bench.target.images.row(0), ep, 100.0, scorer, cfg, 0), doctest::Contains("K="), Error);
  CHECK(ep.live.bit_equal(pristine));
}

TEST_CASE("divergent updates surface as a trace warning") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  TTAConfig cfg = classify_cfg(Mode::encoder, Objective::rlcf);
  cfg.lr = 1e306;
  cfg.steps = 3;
  const ParamTree pristine = scoped(a.student.params, cfg);
  EpisodeState ep(pristine, cfg.optimizer());
  const auto out = tta_classify(a.bench.target.images.row(0), ep, a.student.logit_scale, scorer, cfg, 0);
  CHECK(out.trace.warning);
  CHECK(out.trace.message.find("aborted") != std::string::npos);
  CHECK(ep.live.bit_equal(pristine));
}

TEST_CASE("retrieval tunes only the query branch") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  for (Task dir : {Task::retrieve_t2i, Task::retrieve_i2t}) {
    TTAConfig cfg = TTAConfig::defaults(dir, Mode::encoder);
    cfg.objective = Objective::rlcf;
    cfg.K = 6;
    cfg.lr = 1e-2;
    cfg.momentum.enabled = true;
    const bool t2i = dir == Task::retrieve_t2i;
    const Tensor2& items = t2i ? a.bench.gallery_images : a.bench.gallery_texts;
    const Tensor2& queries = t2i ? a.bench.gallery_texts : a.bench.gallery_images;
    const RetrievalGallery g = make_gallery(dir, a.student, scorer, items);
    const ParamTree pristine = scoped(a.student.params, cfg);
    EpisodeState ep(pristine, cfg.optimizer());
    const auto out = tta_retrieve(queries.row(2), g, ep, a.student.logit_scale, scorer, cfg);
    check_scope_held(pristine, out.adapted, cfg);
    CHECK(ep.live.bit_equal(pristine));
    CHECK(out.ranking.size() == g.size());
    CHECK(std::set<std::size_t>(out.ranking.begin(), out.ranking.end()).size() == g.size());
    CHECK(out.trace.steps.size() == 8);
    TTAConfig wrong = cfg;
    wrong.task = t2i ? Task::retrieve_i2t : Task::retrieve_t2i;
    CHECK_THROWS_AS(tta_retrieve(queries.row(2), g, ep, 100.0, scorer, wrong), Error);
    cfg.K = g.size() + 1;
    CHECK_THROWS_AS(tta_retrieve(queries.row(2), g, ep, 100.0, scorer, cfg), Error);
  }
}

TEST_CASE("caption episodes tune only the projector") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  TTAConfig cfg = TTAConfig::defaults(Task::caption, Mode::projector);
  cfg.objective = Objective::rlcf;
  cfg.lr = 3e-2;
  cfg.momentum.enabled = true;
  const ToyCaptioner& cap = *a.captioner;
  const ParamTree pristine = scoped(cap.params, cfg);
  EpisodeState ep(pristine, cfg.optimizer());
  const auto img = a.bench.target.images.row(0);
  const auto embed = encode_image(a.student, img);
  const auto out = tta_caption(img, embed, ep, cap, scorer, text_fn(a.bench), cfg);
  check_scope_held(pristine, out.adapted, cfg);
  CHECK(ep.live.bit_equal(pristine));
  CHECK(out.trace.steps.size() == 4);
  for (const auto& st : out.trace.steps) {
    CHECK(st.raw.size() == st.candidate_text.size());
    CHECK(st.raw.size() <= cfg.K);
  }
  CHECK(out.reward >= 0.0);
  CHECK(out.reward <= 2.5);

  // none keeps the zero-shot caption
  cfg.objective = Objective::none;
  const auto zs = tta_caption(img, embed, ep, cap, scorer, text_fn(a.bench), cfg);
  CHECK(zs.caption == zs.initial_caption);
  CHECK(zs.reward == zs.initial_reward);
  CHECK(zs.caption == beam_search(cap, embed, 5, cap.max_len).front().tokens);
}

TEST_CASE("captions cut at max_len are flagged") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  TTAConfig cfg = TTAConfig::defaults(Task::caption, Mode::projector);
  cfg.objective = Objective::none;
  cfg.max_len = 1;
  cfg.beam_width = 1;
  const ToyCaptioner& cap = *a.captioner;
  EpisodeState ep(scoped(cap.params, cfg), cfg.optimizer());
  std::size_t warned = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto img = a.bench.target.images.row(i);
    const auto out = tta_caption(img, encode_image(a.student, img), ep, cap, scorer, text_fn(a.bench), cfg);
    CHECK(out.caption.size() == 2);
    CHECK(out.finished == (out.caption.back() == Vocab::kEos));
    if (!out.finished) {
      ++warned;
      CHECK(out.trace.warning);
      CHECK(out.trace.message.find("EOS") != std::string::npos);
    }
  }
  CHECK(warned > 0);
}

TEST_CASE("threaded streams match the sequential stream") {
  const Assets& a = tiny_assets();
  const RewardScorer scorer(a.reward_models);
  const TTAConfig cfg = classify_cfg(Mode::encoder, Objective::rlcf);
  const ParamTree pristine = scoped(a.student.params, cfg);
  auto collect = [&](std::size_t threads) {
    std::vector<std::string> out(30);
    run_stream(pristine, cfg, 30, [&](EpisodeState& ep, std::size_t i, ParamTree*) {
      out[i] = to_json(tta_classify(a.bench.target.images.row(i), ep, a.student.logit_scale, scorer, cfg, i).trace,
                       false).dump();
    }, threads);
    return out;
  };
  CHECK(collect(1) == collect(4));
  CHECK_THROWS_AS(run_stream(pristine, cfg, 10, [](EpisodeState&, std::size_t i, ParamTree*) {
    if (i == 5) throw Error("boom");
  }, 3), Error);
}

TEST_CASE("momentum streams commit every interval and move the pristine snapshot") {
  Rng rng(4);
  ParamTree p;
  p.add("w", Tensor2(1, 3));
  TTAConfig cfg = classify_cfg(Mode::encoder, Objective::rlcf);
  cfg.momentum = {.enabled = true, .m = 0.5, .interval = 4};
  std::vector<double> seen;
  const StreamStats st = run_stream(p, cfg, 10, [&](EpisodeState& ep, std::size_t, ParamTree* adapted) {
    REQUIRE(adapted != nullptr);
    seen.push_back(ep.live.get("w")[0]);
    *adapted = ep.live;
    adapted->values("w")[0] += 1.0;
  });
  CHECK(st.commits == 2);
  CHECK(st.commit_positions == std::vector<std::size_t>{4, 8});
  // before the first commit the pristine weights are untouched
  for (std::size_t i = 0; i < 4; ++i) CHECK(seen[i] == 0.0);
  CHECK(seen[4] > 0.0);
  CHECK(seen[4] == seen[7]);
  CHECK(seen[8] != seen[4]);
}

TEST_CASE("trace json round trip") {
  EpisodeTrace t;
  t.sample = 4;
  t.truth = 2;
  t.initial_prediction = 1;
  t.initial_confidence = 0.25;
  t.prediction = 2;
  t.confidence = 0.5;
  t.warning = true;
  t.message = "x";
  t.wall_ms = 3.5;
  StepTrace s;
  s.selected_views = 6;
  s.candidates = {1, 2};
  s.raw = {0.5, 0.7};
  s.centered = {-0.1, 0.1};
  s.loss = 0.3;
  s.candidate_text = {"w2", "w3"};
  t.steps.push_back(s);
  const EpisodeTrace back = trace_from_json(to_json(t));
  CHECK(to_json(back) == to_json(t));
  CHECK_FALSE(to_json(t, false).contains("wall_ms"));
}
