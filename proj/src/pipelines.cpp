#include "rlcf/pipelines.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

namespace rlcf {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<std::string_view, E> (&table)[N], const char* what) {
  for (const auto& [name, value] : table)
    if (name == s) return value;
  std::string known;
  for (const auto& [name, value] : table) known += (known.empty() ? "" : ", ") + std::string(name);
  throw Error("unknown " + std::string(what) + " '" + std::string(s) + "' (expected one of: " + known + ")");
}

constexpr std::pair<std::string_view, Task> kTasks[] = {{"classify", Task::classify},
                                                        {"retrieve_t2i", Task::retrieve_t2i},
                                                        {"retrieve_i2t", Task::retrieve_i2t},
                                                        {"caption", Task::caption}};
constexpr std::pair<std::string_view, Mode> kModes[] = {
    {"prompt", Mode::prompt}, {"encoder", Mode::encoder}, {"projector", Mode::projector}};
constexpr std::pair<std::string_view, Objective> kObjectives[] = {{"none", Objective::none},
                                                                  {"rlcf", Objective::rlcf},
                                                                  {"entropy_min", Objective::entropy_min},
                                                                  {"pseudo_label", Objective::pseudo_label},
                                                                  {"kd", Objective::kd}};

template <typename E, std::size_t N>
std::string enum_name(E v, const std::pair<std::string_view, E> (&table)[N]) {
  for (const auto& [name, value] : table)
    if (value == v) return std::string(name);
  return "?";
}

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::pair<std::size_t, double> predict(std::span<const double> logits) {
  const std::vector<double> p = softmax(logits);
  const std::size_t best = top_k(logits, 1)[0];
  return {best, p[best]};
}

/// Per-row teacher information used by the objectives.
struct RowTeacher {
  std::function<double(std::size_t row, std::size_t candidate)> reward;
  std::function<std::vector<double>(std::size_t row)> logits;
};

/// Loss over the student's logit rows (one row per selected view or query),
/// averaged across rows. Candidates and rewards go into `st`.
ad::Var objective_loss(ad::Var logits, const TTAConfig& cfg, const RowTeacher& teacher, StepTrace& st) {
  const std::size_t rows = logits.rows();
  const double inv_rows = 1.0 / static_cast<double>(rows);
  if (cfg.objective == Objective::entropy_min) return entropy_min_loss(ad::softmax_rows(logits));

  ad::Var logp = ad::log_softmax_rows(logits);
  ad::Var total;
  for (std::size_t r = 0; r < rows; ++r) {
    ad::Var term;
    switch (cfg.objective) {
      case Objective::rlcf: {
        const std::vector<std::size_t> cands = top_k(logits.value().row(r), cfg.K);
        std::vector<double> raw;
        raw.reserve(cands.size());
        for (std::size_t c : cands) raw.push_back(teacher.reward(r, c));
        const RewardSignal sig = center_rewards(raw, cfg.k1_passthrough);
        term = reinforce_loss(ad::gather_row(logp, r, cands), sig.centered);
        st.candidates.insert(st.candidates.end(), cands.begin(), cands.end());
        st.raw.insert(st.raw.end(), sig.raw.begin(), sig.raw.end());
        st.centered.insert(st.centered.end(), sig.centered.begin(), sig.centered.end());
        break;
      }
      case Objective::pseudo_label: {
        const std::vector<double> t = teacher.logits(r);
        term = pseudo_label_loss(ad::row(logp, r), top_k(t, 1)[0]);
        break;
      }
      case Objective::kd:
        term = kd_loss(ad::row(logits, r), teacher.logits(r), cfg.kd_temperature);
        break;
      default:
        throw Error("objective_loss: objective has no loss");
    }
    total = total.valid() ? ad::add(total, term) : term;
  }
  return rows == 1 ? total : ad::scale(total, inv_rows);
}

/// One optimizer step. A non-finite loss, gradient or update leaves the
/// parameters at their last finite values and marks the trace; later steps
/// are skipped by the caller.
void guarded_step(const ad::LossFn& loss, ParamTree& params, EpisodeState& ep, StepTrace& st,
                  EpisodeTrace& trace, std::size_t step) {
  ParamTree before = params;
  try {
    const ad::ValueAndGrad vg = ad::value_and_grad(loss, params);
    st.loss = vg.value;
    optimizer_step(ep.optimizer, params, vg.grad);
    for (const auto& b : params.blocks()) {
      if (!b.value.all_finite()) throw NumericError("update of block '" + b.name + "' is not finite");
    }
    ++ep.step;
  } catch (const NumericError& e) {
    params = std::move(before);
    trace.warning = true;
    trace.message = std::string("episode aborted at step ") + std::to_string(step) + ": " + e.what();
  }
}

void check_scope(const ParamTree& params, const TTAConfig& cfg) {
  for (const auto& name : tunable_blocks(cfg)) {
    if (!params.contains(name)) {
      throw Error("config mode '" + to_string(cfg.mode) + "' tunes block '" + name +
                  "', which the model does not have");
    }
  }
}

}  // namespace

std::string to_string(Task t) { return enum_name(t, kTasks); }
std::string to_string(Mode m) { return enum_name(m, kModes); }
std::string to_string(Objective o) { return enum_name(o, kObjectives); }
Task parse_task(std::string_view s) { return parse_enum(s, kTasks, "task"); }
Mode parse_mode(std::string_view s) { return parse_enum(s, kModes, "mode"); }
Objective parse_objective(std::string_view s) { return parse_enum(s, kObjectives, "objective"); }

TTAConfig TTAConfig::defaults(Task task, Mode mode) {
  TTAConfig c;
  c.task = task;
  c.mode = mode;
  switch (task) {
    case Task::classify:
      c.steps = 3;
      c.K = 3;
      c.lr = mode == Mode::prompt ? 7e-3 : 1e-5;
      c.weight_decay = 5e-4;
      break;
    case Task::retrieve_t2i:
    case Task::retrieve_i2t:
      c.mode = Mode::encoder;
      c.steps = 8;
      c.K = task == Task::retrieve_t2i ? 12 : 16;
      c.lr = 1e-6;
      c.weight_decay = 5e-4;
      break;
    case Task::caption:
      c.mode = Mode::projector;
      c.steps = 4;
      c.K = 10;
      c.lr = 2e-6;
      c.weight_decay = 0.0;
      c.beam_width = 5;
      break;
  }
  return c;
}

void TTAConfig::validate() const {
  if (K < 1) throw Error("K must be at least 1");
  if (!(rho > 0.0 && rho <= 1.0)) throw Error("rho must lie in (0, 1]");
  if (n_views < 1) throw Error("n_views must be at least 1");
  if (beam_width < 1) throw Error("beam_width must be at least 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("lr must be a finite non-negative number");
  if (!(weight_decay >= 0.0)) throw Error("weight_decay must be non-negative");
  if (!(kd_temperature > 0.0)) throw Error("kd_temperature must be positive");
  if (momentum.enabled) {
    if (!(momentum.m >= 0.0 && momentum.m < 1.0)) throw Error("momentum m must lie in [0, 1)");
    if (momentum.interval < 1) throw Error("momentum interval must be positive");
  }
  if (task == Task::classify && mode == Mode::projector) {
    throw Error("classification tunes the prompt or the image encoder, not a projector");
  }
  if (task == Task::caption && objective != Objective::none && objective != Objective::rlcf) {
    throw Error("captioning supports objectives none and rlcf only");
  }
}

std::vector<std::string> tunable_blocks(const TTAConfig& cfg) {
  switch (cfg.task) {
    case Task::classify:
      return {std::string(cfg.mode == Mode::prompt ? block::kPrompt : block::kImageProj)};
    case Task::retrieve_t2i:
      return {std::string(block::kTextProj)};
    case Task::retrieve_i2t:
      return {std::string(block::kImageProj)};
    case Task::caption:
      return {std::string(block::kProjector)};
  }
  return {};
}

void apply_scope(ParamTree& params, const TTAConfig& cfg) {
  check_scope(params, cfg);
  params.train_only(tunable_blocks(cfg));
}

nlohmann::json to_json(const EpisodeTrace& t, bool with_timing) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : t.steps) {
    nlohmann::json j = {{"selected_views", s.selected_views}, {"candidates", s.candidates},
                        {"raw", s.raw},  {"centered", s.centered},
                        {"loss", s.loss}, {"prediction", s.prediction},
                        {"confidence", s.confidence}};
    if (!s.candidate_text.empty()) j["candidate_text"] = s.candidate_text;
    steps.push_back(std::move(j));
  }
  nlohmann::json j = {{"sample", t.sample},
                      {"initial_prediction", t.initial_prediction},
                      {"initial_confidence", t.initial_confidence},
                      {"steps", steps},
                      {"prediction", t.prediction},
                      {"confidence", t.confidence}};
  if (t.truth >= 0) j["truth"] = t.truth;
  if (t.warning) {
    j["warning"] = true;
    j["message"] = t.message;
  }
  if (with_timing) j["wall_ms"] = t.wall_ms;
  return j;
}

EpisodeTrace trace_from_json(const nlohmann::json& j) {
  EpisodeTrace t;
  t.sample = j.at("sample").get<std::size_t>();
  t.initial_prediction = j.at("initial_prediction").get<std::size_t>();
  t.initial_confidence = j.at("initial_confidence").get<double>();
  t.prediction = j.at("prediction").get<std::size_t>();
  t.confidence = j.at("confidence").get<double>();
  t.truth = j.value("truth", std::int64_t{-1});
  t.warning = j.value("warning", false);
  t.message = j.value("message", "");
  t.wall_ms = j.value("wall_ms", 0.0);
  for (const auto& s : j.at("steps")) {
    StepTrace st;
    st.selected_views = s.at("selected_views").get<std::size_t>();
    st.candidates = s.at("candidates").get<std::vector<std::size_t>>();
    st.raw = s.at("raw").get<std::vector<double>>();
    st.centered = s.at("centered").get<std::vector<double>>();
    st.loss = s.at("loss").get<double>();
    st.prediction = s.at("prediction").get<std::size_t>();
    st.confidence = s.at("confidence").get<double>();
    if (s.contains("candidate_text")) st.candidate_text = s["candidate_text"].get<std::vector<std::string>>();
    t.steps.push_back(std::move(st));
  }
  return t;
}

Tensor2 augment_views(std::span<const double> v, std::size_t n, Rng& rng) {
  if (n < 1) throw Error("augment_views: n must be at least 1");
  const std::size_t d = v.size();
  Tensor2 views(n, d);
  std::copy(v.begin(), v.end(), views.row(0).begin());
  const double sigma = 0.05 * l2_norm(v) / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 1; i < n; ++i) {
    auto row = views.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const bool masked = rng.bernoulli(0.25);
      const double jitter = rng.normal(0.0, sigma);
      row[j] = (masked ? 0.0 : v[j]) + jitter;
    }
  }
  return views;
}

std::vector<std::size_t> confidence_select(const Tensor2& view_logits, double rho) {
  const std::size_t n = view_logits.rows();
  if (n == 0) throw Error("confidence_select: no views");
  if (!(rho > 0.0 && rho <= 1.0)) throw Error("confidence_select: rho must lie in (0, 1]");
  const std::size_t keep =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rho * static_cast<double>(n))));
  std::vector<double> h(n);
  for (std::size_t i = 0; i < n; ++i) h[i] = entropy(softmax(view_logits.row(i)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return h[a] < h[b]; });
  idx.resize(keep);
  return idx;
}

std::vector<std::size_t> confidence_select(const Tensor2& views, const DualEncoder& m, double rho) {
  return confidence_select(all_class_logits(m, views), rho);
}

ClassifyOutcome tta_classify(std::span<const double> v, EpisodeState& ep, double logit_scale,
                             const RewardScorer& scorer, const TTAConfig& cfg,
                             std::uint64_t sample_seed) {
  const auto start = Clock::now();
  cfg.validate();
  check_scope(ep.live, cfg);
  DualEncoder live{std::move(ep.live), logit_scale};
  const std::size_t classes = live.n_classes();
  if (cfg.objective == Objective::rlcf && cfg.K > classes) {
    ep.live = std::move(live.params);
    throw Error("K=" + std::to_string(cfg.K) + " exceeds the " + std::to_string(classes) + " classes");
  }

  ClassifyOutcome out;
  EpisodeTrace& trace = out.trace;
  const Tensor2 clean = Tensor2::row_vector(v);
  {
    const auto [p, c] = predict(all_class_logits(live, clean).row(0));
    trace.initial_prediction = p;
    trace.initial_confidence = c;
  }

  const bool adapting = cfg.objective != Objective::none && cfg.steps > 0;
  Tensor2 views;
  EnsembleEmbeddings reward_views;
  Tensor2 frozen_text;
  if (adapting) {
    Rng rng(sample_seed);
    views = augment_views(v, cfg.n_views, rng);
    reward_views = scorer.embed_images(views);
    if (cfg.mode != Mode::prompt) frozen_text = encode_class_texts(live);
  }

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    StepTrace st;
    if (adapting && !trace.warning) {
      const std::vector<std::size_t> sel = confidence_select(all_class_logits(live, views), cfg.rho);
      st.selected_views = sel.size();
      const Tensor2 chosen = select_rows(views, sel);
      RowTeacher teacher{
          [&](std::size_t r, std::size_t c) { return scorer.score(scorer.class_texts(), c, reward_views, sel[r]); },
          [&](std::size_t r) { return scorer.logits(reward_views, sel[r], scorer.class_texts()); }};
      ad::LossFn loss = [&](ad::Tape& tape, const ad::Bindings& b) {
        ad::Var img = image_features(tape, b, chosen);
        ad::Var txt = cfg.mode == Mode::prompt ? class_text_features(b) : tape.constant(frozen_text);
        st.candidates.clear();
        st.raw.clear();
        st.centered.clear();
        return objective_loss(similarity_logits(img, txt, logit_scale), cfg, teacher, st);
      };
      guarded_step(loss, live.params, ep, st, trace, step);
    }
    const auto [p, c] = predict(all_class_logits(live, clean).row(0));
    st.prediction = p;
    st.confidence = c;
    trace.steps.push_back(std::move(st));
  }

  const Tensor2 final_logits = all_class_logits(live, clean);
  const auto [p, c] = predict(final_logits.row(0));
  out.prediction = p;
  out.confidence = c;
  out.top5 = top_k(final_logits.row(0), std::min<std::size_t>(5, classes));
  trace.prediction = p;
  trace.confidence = c;
  if (cfg.momentum.enabled) out.adapted = live.params;

  ep.live = std::move(live.params);
  episodic_reset(ep);
  trace.wall_ms = elapsed_ms(start);
  return out;
}

RetrievalGallery make_gallery(Task direction, const DualEncoder& student, const RewardScorer& scorer,
                              const Tensor2& items) {
  if (items.rows() == 0) throw Error("retrieval gallery is empty");
  RetrievalGallery g;
  g.direction = direction;
  if (direction == Task::retrieve_t2i) {
    g.student_feats = encode_images(student, items);
    g.reward_feats = scorer.embed_images(items);
  } else if (direction == Task::retrieve_i2t) {
    g.student_feats = encode_text_rows(student, items);
    g.reward_feats = scorer.embed_texts(items);
  } else {
    throw Error("make_gallery: task is not a retrieval direction");
  }
  return g;
}

RetrievalOutcome tta_retrieve(std::span<const double> query, const RetrievalGallery& gallery,
                              EpisodeState& ep, double logit_scale, const RewardScorer& scorer,
                              const TTAConfig& cfg) {
  const auto start = Clock::now();
  cfg.validate();
  if (cfg.task != gallery.direction) throw Error("tta_retrieve: config task does not match gallery direction");
  check_scope(ep.live, cfg);
  const std::size_t n = gallery.size();
  if (n == 0) throw Error("retrieval gallery is empty");
  if (cfg.objective == Objective::rlcf && cfg.K > n) {
    throw Error("K=" + std::to_string(cfg.K) + " exceeds the gallery size " + std::to_string(n));
  }
  const bool t2i = cfg.task == Task::retrieve_t2i;
  DualEncoder live{std::move(ep.live), logit_scale};
  const Tensor2 q = Tensor2::row_vector(query);

  auto scores = [&]() {
    const Tensor2 f = t2i ? encode_text_rows(live, q) : encode_images(live, q);
    Tensor2 s = matmul_nt(f, gallery.student_feats);
    for (double& x : s.values()) x *= logit_scale;
    return s;
  };

  RetrievalOutcome out;
  EpisodeTrace& trace = out.trace;
  {
    const auto [p, c] = predict(scores().row(0));
    trace.initial_prediction = p;
    trace.initial_confidence = c;
  }
  const bool adapting = cfg.objective != Objective::none && cfg.steps > 0;
  EnsembleEmbeddings reward_query;
  if (adapting) reward_query = t2i ? scorer.embed_texts(q) : scorer.embed_images(q);
  // CLIP-S is symmetric in its two embeddings, so the same call covers both
  // directions.
  RowTeacher teacher{
      [&](std::size_t, std::size_t j) { return scorer.score(reward_query, 0, gallery.reward_feats, j); },
      [&](std::size_t) { return scorer.logits(reward_query, 0, gallery.reward_feats); }};

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    StepTrace st;
    if (adapting && !trace.warning) {
      st.selected_views = 1;
      ad::LossFn loss = [&](ad::Tape& tape, const ad::Bindings& b) {
        ad::Var f = t2i ? text_features(b, tape.constant(q)) : image_features(tape, b, q);
        st.candidates.clear();
        st.raw.clear();
        st.centered.clear();
        return objective_loss(similarity_logits(f, tape.constant(gallery.student_feats), logit_scale), cfg,
                              teacher, st);
      };
      guarded_step(loss, live.params, ep, st, trace, step);
    }
    const auto [p, c] = predict(scores().row(0));
    st.prediction = p;
    st.confidence = c;
    trace.steps.push_back(std::move(st));
  }

  const Tensor2 final_scores = scores();
  out.ranking = top_k(final_scores.row(0), n);
  const auto [p, c] = predict(final_scores.row(0));
  trace.prediction = p;
  trace.confidence = c;
  if (cfg.momentum.enabled) out.adapted = live.params;

  ep.live = std::move(live.params);
  episodic_reset(ep);
  trace.wall_ms = elapsed_ms(start);
  return out;
}

CaptionOutcome tta_caption(std::span<const double> image, std::span<const double> image_embed,
                           EpisodeState& ep, const ToyCaptioner& captioner,
                           const RewardScorer& scorer, const CaptionTextFn& text_of,
                           const TTAConfig& cfg) {
  const auto start = Clock::now();
  cfg.validate();
  check_scope(ep.live, cfg);
  const std::size_t max_len = cfg.max_len == 0 ? captioner.max_len : cfg.max_len;
  ToyCaptioner live{std::move(ep.live), captioner.vocab, captioner.max_len};
  const EnsembleEmbeddings reward_image = scorer.embed_images(Tensor2::row_vector(image));

  auto rewards_of = [&](const std::vector<Beam>& beams) {
    std::vector<double> flat;
    std::size_t width = 0;
    for (const Beam& bm : beams) {
      const std::vector<double> r = text_of(bm.tokens);
      width = r.size();
      flat.insert(flat.end(), r.begin(), r.end());
    }
    const EnsembleEmbeddings texts = scorer.embed_texts(Tensor2(beams.size(), width, std::move(flat)));
    std::vector<double> raw;
    for (std::size_t k = 0; k < beams.size(); ++k) raw.push_back(scorer.score(texts, k, reward_image, 0));
    return raw;
  };

  CaptionOutcome out;
  EpisodeTrace& trace = out.trace;
  {
    const std::vector<Beam> b0 = beam_search(live, image_embed, cfg.beam_width, max_len);
    trace.initial_prediction = 0;
    trace.initial_confidence = std::exp(b0.front().logprob);
    out.initial_caption = b0.front().tokens;
    out.initial_reward = rewards_of({b0.front()}).front();
  }
  const bool adapting = cfg.objective != Objective::none && cfg.steps > 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    StepTrace st;
    if (adapting && !trace.warning) {
      const std::vector<Beam> beams = beam_search(live, image_embed, cfg.K, max_len);
      std::vector<TokenSeq> seqs;
      for (const Beam& bm : beams) {
        seqs.push_back(bm.tokens);
        st.candidate_text.push_back(decode_to_text(bm.tokens, live.vocab));
      }
      const RewardSignal sig = center_rewards(rewards_of(beams), cfg.k1_passthrough);
      st.raw = sig.raw;
      st.centered = sig.centered;
      st.candidates.resize(seqs.size());
      std::iota(st.candidates.begin(), st.candidates.end(), std::size_t{0});
      const Tensor2 embed = Tensor2::row_vector(image_embed);
      ad::LossFn loss = [&](ad::Tape& tape, const ad::Bindings& b) {
        return reinforce_loss(sequence_logprobs(tape, b, embed, seqs), sig.centered);
      };
      guarded_step(loss, live.params, ep, st, trace, step);
    }
    const Beam top = beam_search(live, image_embed, cfg.beam_width, max_len).front();
    st.prediction = 0;
    st.confidence = std::exp(top.logprob);
    trace.steps.push_back(std::move(st));
  }

  const std::vector<Beam> final_beams = beam_search(live, image_embed, cfg.beam_width, max_len);
  const Beam& best = final_beams.front();
  out.caption = best.tokens;
  out.logprob = best.logprob;
  out.reward = rewards_of({best}).front();
  out.finished = std::any_of(final_beams.begin(), final_beams.end(), [](const Beam& b) { return b.finished; });
  if (!out.finished) {
    trace.warning = true;
    if (trace.message.empty()) trace.message = "no beam reached EOS within max_len; returning best partial caption";
  }
  trace.prediction = 0;
  trace.confidence = std::exp(best.logprob);
  if (cfg.momentum.enabled) out.adapted = live.params;

  ep.live = std::move(live.params);
  episodic_reset(ep);
  trace.wall_ms = elapsed_ms(start);
  return out;
}

StreamStats run_stream(const ParamTree& pristine, const TTAConfig& cfg, std::size_t n,
                       const EpisodeFn& fn, std::size_t threads) {
  StreamStats stats;
  stats.episodes = n;
  if (cfg.momentum.enabled) {
    EpisodeState ep(pristine, cfg.optimizer());
    MomentumBuffer buf(pristine, cfg.momentum.m, cfg.momentum.interval);
    for (std::size_t i = 0; i < n; ++i) {
      ParamTree adapted;
      fn(ep, i, &adapted);
      if (momentum_observe(buf, adapted, &ep.pristine)) {
        episodic_reset(ep);
        ++stats.commits;
        stats.commit_positions.push_back(i + 1);
      }
    }
    return stats;
  }

  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    EpisodeState ep(pristine, cfg.optimizer());
    for (std::size_t i = 0; i < n; ++i) fn(ep, i, nullptr);
    return stats;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        EpisodeState ep(pristine, cfg.optimizer());
        for (std::size_t i = next++; i < n; i = next++) fn(ep, i, nullptr);
      } catch (...) {
        errors[t] = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return stats;
}

}  // namespace rlcf
