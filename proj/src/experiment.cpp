#include "rlcf/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rlcf/checkpoint.hpp"

namespace rlcf {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(trim(cur));
  out.erase(std::remove(out.begin(), out.end(), std::string()), out.end());
  return out;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("config key '" + std::string(key) + "': expected " + expected + ", got '" +
                    std::string(value) + "'");
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  try {
    std::size_t pos = 0;
    const std::string s(v);
    if (s.empty() || s[0] == '-') bad_value(key, v, "a non-negative integer");
    const unsigned long long x = std::stoull(s, &pos);
    if (pos != s.size()) bad_value(key, v, "a non-negative integer");
    return x;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, v, "a non-negative integer");
  }
}

std::size_t to_size(std::string_view key, std::string_view v) { return static_cast<std::size_t>(to_u64(key, v)); }

double to_double(std::string_view key, std::string_view v) {
  try {
    std::size_t pos = 0;
    const std::string s(v);
    const double x = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(x)) bad_value(key, v, "a finite number");
    return x;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, v, "a finite number");
  }
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  bad_value(key, v, "a boolean (1/0/true/false)");
}

ExperimentKind parse_kind(std::string_view v) {
  if (v == "classify") return ExperimentKind::classify;
  if (v == "retrieve") return ExperimentKind::retrieve;
  if (v == "caption") return ExperimentKind::caption;
  bad_value("task", v, "classify, retrieve or caption");
}

using Setter = std::function<void(ExperimentConfig&, std::string_view key, std::string_view value)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = [] {
    std::vector<std::pair<std::string, Setter>> t;
    auto size_field = [&t](const char* name, auto member) {
      t.emplace_back(name, [member](ExperimentConfig& c, std::string_view k, std::string_view v) {
        member(c) = to_size(k, v);
      });
    };
    auto real_field = [&t](const char* name, auto member) {
      t.emplace_back(name, [member](ExperimentConfig& c, std::string_view k, std::string_view v) {
        member(c) = to_double(k, v);
      });
    };
    auto bool_field = [&t](const char* name, auto member) {
      t.emplace_back(name, [member](ExperimentConfig& c, std::string_view k, std::string_view v) {
        member(c) = to_bool(k, v);
      });
    };
#define RLCF_REF(expr) [](ExperimentConfig& c) -> auto& { return expr; }
    // TTA
    t.emplace_back("objectives", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
      c.objectives.clear();
      try {
        for (const auto& s : split_list(v)) c.objectives.push_back(parse_objective(s));
      } catch (const Error& e) {
        throw ConfigError("config key '" + std::string(k) + "': " + e.what());
      }
      if (c.objectives.empty()) bad_value(k, v, "a comma-separated objective list");
    });
    size_field("steps", RLCF_REF(c.tta.steps));
    size_field("K", RLCF_REF(c.tta.K));
    size_field("K_t2i", RLCF_REF(c.K_t2i));
    size_field("K_i2t", RLCF_REF(c.K_i2t));
    real_field("lr", RLCF_REF(c.tta.lr));
    real_field("weight_decay", RLCF_REF(c.tta.weight_decay));
    size_field("n_views", RLCF_REF(c.tta.n_views));
    real_field("rho", RLCF_REF(c.tta.rho));
    size_field("beam_width", RLCF_REF(c.tta.beam_width));
    size_field("max_len", RLCF_REF(c.tta.max_len));
    bool_field("k1_passthrough", RLCF_REF(c.tta.k1_passthrough));
    real_field("kd_temperature", RLCF_REF(c.tta.kd_temperature));
    bool_field("momentum", RLCF_REF(c.tta.momentum.enabled));
    real_field("momentum_m", RLCF_REF(c.tta.momentum.m));
    size_field("momentum_interval", RLCF_REF(c.tta.momentum.interval));
    // harness
    size_field("samples", RLCF_REF(c.samples));
    size_field("threads", RLCF_REF(c.threads));
    bool_field("pretrain", RLCF_REF(c.build_missing));
    bool_field("traces", RLCF_REF(c.write_traces));
    t.emplace_back("work_dir", [](ExperimentConfig& c, std::string_view, std::string_view v) { c.work_dir = std::string(v); });
    t.emplace_back("out_dir", [](ExperimentConfig& c, std::string_view, std::string_view v) { c.out_dir = std::string(v); });
    t.emplace_back("reward_weights", [](ExperimentConfig& c, std::string_view k, std::string_view v) {
      c.reward_weights.clear();
      for (const auto& s : split_list(v)) {
        const double w = to_double(k, s);
        if (!(w > 0.0)) bad_value(k, v, "positive weights");
        c.reward_weights.push_back(w);
      }
      if (c.reward_weights.empty()) bad_value(k, v, "at least one weight");
    });
    // benchmark
    size_field("classes", RLCF_REF(c.bench.classes));
    size_field("d_in", RLCF_REF(c.bench.d_in));
    size_field("d_tok", RLCF_REF(c.bench.d_tok));
    size_field("attributes", RLCF_REF(c.bench.attributes));
    size_field("attrs_per_class", RLCF_REF(c.bench.attrs_per_class));
    size_field("prompt_len", RLCF_REF(c.bench.prompt_len));
    size_field("source_per_class", RLCF_REF(c.bench.source_per_class));
    size_field("heldout_per_class", RLCF_REF(c.bench.heldout_per_class));
    size_field("teacher_source_per_class", RLCF_REF(c.bench.teacher_source_per_class));
    size_field("teacher_shift_per_class", RLCF_REF(c.bench.teacher_shift_per_class));
    size_field("target_samples", RLCF_REF(c.bench.target_samples));
    real_field("shift", RLCF_REF(c.bench.shift));
    real_field("max_angle", RLCF_REF(c.bench.max_angle));
    size_field("rotation_dims", RLCF_REF(c.bench.rotation_dims));
    real_field("bias", RLCF_REF(c.bench.bias));
    real_field("source_noise", RLCF_REF(c.bench.source_noise));
    real_field("target_noise", RLCF_REF(c.bench.target_noise));
    bool_field("complementary", RLCF_REF(c.bench.complementary));
    size_field("gallery_size", RLCF_REF(c.bench.gallery_size));
    size_field("caption_samples", RLCF_REF(c.bench.caption_samples));
    // pretraining
    size_field("student_d_emb", RLCF_REF(c.student.d_emb));
    size_field("student_epochs", RLCF_REF(c.student.epochs));
    real_field("student_lr", RLCF_REF(c.student.lr));
    real_field("student_temperature", RLCF_REF(c.student.temperature));
    real_field("logit_scale", RLCF_REF(c.student.logit_scale));
    size_field("teacher_d_emb", RLCF_REF(c.teacher.d_emb));
    size_field("teacher_epochs", RLCF_REF(c.teacher.epochs));
    real_field("teacher_lr", RLCF_REF(c.teacher.lr));
    real_field("teacher_temperature", RLCF_REF(c.teacher.temperature));
    size_field("captioner_d_hid", RLCF_REF(c.captioner.d_hid));
    size_field("captioner_max_len", RLCF_REF(c.captioner.max_len));
    size_field("captioner_epochs", RLCF_REF(c.captioner.epochs));
    size_field("captioner_batch", RLCF_REF(c.captioner.batch));
    real_field("captioner_lr", RLCF_REF(c.captioner.lr));
#undef RLCF_REF
    // sweep axes are read by run_sweep
    for (const char* name : {"sweep_K", "sweep_steps", "sweep_lr", "sweep_objective"}) {
      t.emplace_back(name, [](ExperimentConfig&, std::string_view, std::string_view) {});
    }
    return t;
  }();
  return table;
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string fmt_opt(const std::optional<double>& x) { return x ? fmt("%.6f", *x) : "-"; }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

nlohmann::json pretrain_json(const PretrainConfig& p) {
  return {{"d_in", p.d_in},     {"d_tok", p.d_tok},   {"d_emb", p.d_emb},
          {"classes", p.classes}, {"epochs", p.epochs}, {"lr", p.lr},
          {"temperature", p.temperature}, {"logit_scale", p.logit_scale}, {"seed", p.seed}};
}

nlohmann::json captioner_json(const CaptionerConfig& c) {
  return {{"d_hid", c.d_hid}, {"max_len", c.max_len}, {"epochs", c.epochs},
          {"batch", c.batch}, {"lr", c.lr},           {"seed", c.seed}};
}

void say(std::ostream* log, const std::string& msg) {
  if (log != nullptr) *log << msg << '\n';
}

std::optional<nlohmann::json> stored_config(const fs::path& stem) {
  if (!checkpoint_exists(stem)) return std::nullopt;
  std::ifstream in(manifest_path(stem));
  try {
    const nlohmann::json m = nlohmann::json::parse(in);
    if (m.contains("meta") && m["meta"].contains("config")) return m["meta"]["config"];
  } catch (const std::exception&) {
  }
  return nlohmann::json();
}

[[noreturn]] void missing_asset(const fs::path& stem, const char* what) {
  throw Error(std::string(what) + " checkpoint at '" + manifest_path(stem).string() +
              "' is missing or was built from a different config; run `rlcf pretrain` with this config "
              "(or set pretrain = 1)");
}

DualEncoder obtain_encoder(const fs::path& stem, const nlohmann::json& expected, const PretrainConfig& pc,
                           const ShiftBenchmark& bench, bool teacher, bool build, std::ostream* log,
                           const char* what) {
  const auto stored = stored_config(stem);
  if (!stored || *stored != expected) {
    if (!build) missing_asset(stem, what);
    say(log, std::string("pretraining ") + what + " -> " + stem.string());
    PretrainLog plog;
    const DualEncoder m = pretrain_contrastive(pc, bench.pretrain_data(teacher), &plog);
    const double acc = zero_shot_accuracy(m, bench.heldout.images, bench.heldout.labels);
    say(log, std::string(what) + " held-out source accuracy " + fmt("%.4f", acc));
    if (!pretrain_guardrail_ok(acc, bench.spec.classes)) {
      throw Error(std::string("pretraining guardrail failed: ") + what + " held-out accuracy " +
                  fmt("%.4f", acc) + " does not reach 3x chance; change the seed or pretraining config");
    }
    Checkpoint ck = to_checkpoint(m);
    ck.meta["config"] = expected;
    ck.meta["heldout_accuracy"] = acc;
    fs::create_directories(stem.parent_path());
    save_checkpoint(stem, ck);
  }
  return dual_encoder_from_checkpoint(load_checkpoint(stem));
}

ShiftBenchmark obtain_benchmark(const ExperimentConfig& cfg, bool build, std::ostream* log) {
  const fs::path stem = cfg.work_dir / "bench";
  const nlohmann::json expected = to_json(cfg.bench);
  if (checkpoint_exists(stem)) {
    ShiftBenchmark b = load_benchmark(stem);
    if (to_json(b.spec) == expected) return b;
  }
  if (!build) {
    throw Error("benchmark at '" + manifest_path(stem).string() +
                "' is missing or stale; run `rlcf genbench` with this config (or set pretrain = 1)");
  }
  say(log, "generating benchmark -> " + stem.string());
  fs::create_directories(cfg.work_dir);
  save_benchmark(stem, gen_benchmark(cfg.bench, cfg.bench.seed));
  return load_benchmark(stem);
}

std::vector<Task> kind_tasks(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::classify:
      return {Task::classify};
    case ExperimentKind::retrieve:
      return {Task::retrieve_t2i, Task::retrieve_i2t};
    case ExperimentKind::caption:
      return {Task::caption};
  }
  return {};
}

TTAConfig task_config(const ExperimentConfig& cfg, Task task, Objective objective) {
  TTAConfig t = cfg.tta;
  t.task = task;
  t.objective = objective;
  if (task == Task::retrieve_t2i) t.K = cfg.K_t2i;
  if (task == Task::retrieve_i2t) t.K = cfg.K_i2t;
  if (task == Task::retrieve_t2i || task == Task::retrieve_i2t) t.mode = Mode::encoder;
  if (task == Task::caption) t.mode = Mode::projector;
  t.validate();
  return t;
}

MetricsReport classification_metrics(const std::vector<std::size_t>& pred,
                                      const std::vector<std::vector<std::size_t>>& top5,
                                      const std::vector<double>& conf, std::span<const std::size_t> labels) {
  MetricsReport m;
  const std::size_t n = pred.size();
  m.samples = n;
  std::size_t c1 = 0;
  std::size_t c5 = 0;
  std::unique_ptr<bool[]> ok(new bool[std::max<std::size_t>(1, n)]);
  for (std::size_t i = 0; i < n; ++i) {
    ok[i] = pred[i] == labels[i];
    c1 += ok[i];
    c5 += std::find(top5[i].begin(), top5[i].end(), labels[i]) != top5[i].end();
  }
  const double dn = n == 0 ? 1.0 : static_cast<double>(n);
  m.top1 = static_cast<double>(c1) / dn;
  m.top5 = static_cast<double>(c5) / dn;
  m.ece = ece(conf, std::span<const bool>(ok.get(), n));
  return m;
}

std::size_t limit(std::size_t available, std::size_t requested) {
  return requested == 0 ? available : std::min(available, requested);
}

// Minimal SVG line chart.
void write_line_chart(const fs::path& path, const std::string& title, const std::string& ylabel,
                      const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const double w = 520, h = 340, left = 60, right = 140, top = 40, bottom = 50;
  double lo = 1e300, hi = -1e300;
  std::size_t steps = 1;
  for (const auto& [name, ys] : series) {
    for (double y : ys) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
    steps = std::max(steps, ys.size());
  }
  if (!(hi > lo)) {
    lo -= 0.05;
    hi += 0.05;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto px = [&](std::size_t i) {
    return left + (steps <= 1 ? 0.0 : (w - left - right) * static_cast<double>(i) / static_cast<double>(steps - 1));
  };
  auto py = [&](double y) { return top + (h - top - bottom) * (hi - y) / (hi - lo); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < steps; ++i) {
    s << "<text x=\"" << px(i) << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\">" << i << "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double y = lo + (hi - lo) * k / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt("%.3f", y) << "</text>\n";
  }
  s << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">TTA steps</text>\n";
  s << "<text x=\"16\" y=\"" << (top + h - bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (top + h - bottom) / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& [name, ys] = series[k];
    const char* col = colors[k % 6];
    s << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i) s << px(i) << "," << py(ys[i]) << " ";
    s << "\"/>\n";
    for (std::size_t i = 0; i < ys.size(); ++i) {
      s << "<circle cx=\"" << px(i) << "\" cy=\"" << py(ys[i]) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    }
    const double ly = top + 18.0 * static_cast<double>(k);
    s << "<line x1=\"" << w - right + 10 << "\" y1=\"" << ly << "\" x2=\"" << w - right + 30 << "\" y2=\"" << ly
      << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << w - right + 36 << "\" y=\"" << ly + 4 << "\">" << name << "</text>\n";
  }
  s << "</svg>\n";
  std::ofstream(path) << s.str();
}

std::vector<EpisodeTrace> read_traces(const fs::path& p) {
  std::vector<EpisodeTrace> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(trace_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace

KeyValues parse_config_text(std::string_view text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected `key = value`");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return kv;
}

KeyValues read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k{"seed", "task", "mode"};
    for (const auto& [name, fn] : setters()) k.push_back(name);
    return k;
  }();
  return keys;
}

ExperimentConfig build_config(const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    const auto& keys = config_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  ExperimentConfig c;
  c.source = kv;
  const auto seed = kv.find("seed");
  if (seed == kv.end()) throw ConfigError("config key 'seed' is required");
  c.seed = to_u64("seed", seed->second);

  if (auto it = kv.find("task"); it != kv.end()) c.kind = parse_kind(it->second);
  Mode mode = Mode::encoder;
  if (auto it = kv.find("mode"); it != kv.end()) {
    try {
      mode = parse_mode(it->second);
    } catch (const Error& e) {
      throw ConfigError(std::string("config key 'mode': ") + e.what());
    }
  }
  const Task first = kind_tasks(c.kind).front();
  c.tta = TTAConfig::defaults(first, mode);
  switch (c.kind) {
    case ExperimentKind::classify:
      c.objectives = {Objective::none, Objective::rlcf, Objective::entropy_min, Objective::pseudo_label,
                      Objective::kd};
      break;
    case ExperimentKind::retrieve:
      c.objectives = {Objective::none, Objective::rlcf, Objective::entropy_min};
      break;
    case ExperimentKind::caption:
      c.objectives = {Objective::none, Objective::rlcf};
      break;
  }
  c.teacher.d_emb = 48;

  for (const auto& [key, value] : kv) {
    for (const auto& [name, fn] : setters()) {
      if (name == key) fn(c, key, value);
    }
  }

  c.bench.seed = c.seed;
  for (PretrainConfig* p : {&c.student, &c.teacher}) {
    p->d_in = c.bench.d_in;
    p->d_tok = c.bench.d_tok;
    p->classes = c.bench.classes;
  }
  c.teacher.logit_scale = c.student.logit_scale;
  c.student.seed = derive_seed(c.seed, 101);
  c.teacher.seed = derive_seed(c.seed, 201);
  c.captioner.seed = derive_seed(c.seed, 301);
  c.tta.seed = derive_seed(c.seed, 401);
  if (c.threads == 0) throw ConfigError("config key 'threads' must be at least 1");
  try {
    for (Task t : kind_tasks(c.kind))
      for (Objective o : c.objectives) task_config(c, t, o);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("invalid TTA config: ") + e.what());
  }
  return c;
}

bool pretrain_guardrail_ok(double accuracy, std::size_t classes) {
  const double chance = 1.0 / static_cast<double>(classes);
  return accuracy >= std::min(3.0 * chance, 0.5 * (1.0 + chance));
}

void write_benchmark(const ExperimentConfig& cfg, std::ostream* log) { obtain_benchmark(cfg, true, log); }

Assets prepare_assets(const ExperimentConfig& cfg, std::ostream* log, bool need_captioner) {
  Assets a;
  a.bench = obtain_benchmark(cfg, cfg.build_missing, log);
  const nlohmann::json bench_json = to_json(cfg.bench);
  a.student = obtain_encoder(cfg.work_dir / "student",
                             {{"bench", bench_json}, {"pretrain", pretrain_json(cfg.student)}}, cfg.student,
                             a.bench, false, cfg.build_missing, log, "student");
  for (std::size_t i = 0; i < cfg.reward_weights.size(); ++i) {
    PretrainConfig pc = cfg.teacher;
    pc.seed = derive_seed(cfg.teacher.seed, i);
    const std::string name = "teacher" + std::to_string(i);
    DualEncoder t = obtain_encoder(cfg.work_dir / name, {{"bench", bench_json}, {"pretrain", pretrain_json(pc)}}, pc,
                                   a.bench, true, cfg.build_missing, log, name.c_str());
    a.reward_models.push_back(RewardModel{name, std::move(t), cfg.reward_weights[i]});
  }
  if (need_captioner) {
    const fs::path stem = cfg.work_dir / "captioner";
    const nlohmann::json expected = {{"bench", bench_json},
                                     {"student", pretrain_json(cfg.student)},
                                     {"captioner", captioner_json(cfg.captioner)}};
    const auto stored = stored_config(stem);
    if (!stored || *stored != expected) {
      if (!cfg.build_missing) missing_asset(stem, "captioner");
      say(log, "training captioner -> " + stem.string());
      const Tensor2 embeds = encode_images(a.student, a.bench.source.images);
      std::vector<TokenSeq> caps;
      for (std::size_t l : a.bench.source.labels) caps.push_back(a.bench.reference_caption(l));
      const ToyCaptioner c = train_captioner(cfg.captioner, a.bench.vocab_size(), embeds, caps);
      Checkpoint ck = to_checkpoint(c);
      ck.meta["config"] = expected;
      save_checkpoint(stem, ck);
    }
    a.captioner = captioner_from_checkpoint(load_checkpoint(stem));
  }
  return a;
}

TaskRun run_task(const Assets& assets, const ExperimentConfig& cfg, Task task, Objective objective) {
  const TTAConfig t = task_config(cfg, task, objective);
  const RewardScorer scorer(assets.reward_models);
  const ShiftBenchmark& b = assets.bench;
  const DualEncoder& student = assets.student;
  TaskRun run;
  run.row.task = to_string(task);
  run.row.objective = to_string(objective);
  MetricsReport& m = run.row.metrics;

  if (task == Task::classify) {
    const std::size_t n = limit(b.target.size(), cfg.samples);
    if (n == 0) throw Error("no target samples to evaluate");
    ParamTree pristine = student.params;
    apply_scope(pristine, t);
    std::vector<ClassifyOutcome> outs(n);
    run.stream = run_stream(pristine, t, n, [&](EpisodeState& ep, std::size_t i, ParamTree* adapted) {
      outs[i] = tta_classify(b.target.images.row(i), ep, student.logit_scale, scorer, t, derive_seed(t.seed, i));
      if (adapted != nullptr) *adapted = std::move(outs[i].adapted);
    }, t.momentum.enabled ? 1 : cfg.threads);
    std::vector<std::size_t> pred;
    std::vector<std::vector<std::size_t>> top5;
    std::vector<double> conf;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const EnsembleEmbeddings imgs = scorer.embed_images(select_rows(b.target.images, order));
    std::vector<double> reward;
    std::vector<double> gain;
    for (std::size_t i = 0; i < n; ++i) {
      auto& o = outs[i];
      o.trace.sample = i;
      o.trace.truth = static_cast<std::int64_t>(b.target.labels[i]);
      pred.push_back(o.prediction);
      top5.push_back(o.top5);
      conf.push_back(o.confidence);
      const double r = scorer.score(scorer.class_texts(), o.prediction, imgs, i);
      reward.push_back(r);
      gain.push_back(r - scorer.score(scorer.class_texts(), o.trace.initial_prediction, imgs, i));
      run.traces.push_back(std::move(o.trace));
    }
    m = classification_metrics(pred, top5, conf, std::span(b.target.labels).first(n));
    m.mean_reward = mean_of(reward);
    m.mean_reward_gain = mean_of(gain);
  } else if (task == Task::retrieve_t2i || task == Task::retrieve_i2t) {
    const bool t2i = task == Task::retrieve_t2i;
    const Tensor2& items = t2i ? b.gallery_images : b.gallery_texts;
    const Tensor2& queries = t2i ? b.gallery_texts : b.gallery_images;
    const std::size_t n = limit(queries.rows(), cfg.samples);
    if (n == 0) throw Error("no retrieval queries to evaluate");
    ParamTree pristine = student.params;
    apply_scope(pristine, t);
    const RetrievalGallery gallery = make_gallery(task, student, scorer, items);
    std::vector<RetrievalOutcome> outs(n);
    run.stream = run_stream(pristine, t, n, [&](EpisodeState& ep, std::size_t i, ParamTree* adapted) {
      outs[i] = tta_retrieve(queries.row(i), gallery, ep, student.logit_scale, scorer, t);
      if (adapted != nullptr) *adapted = std::move(outs[i].adapted);
    }, t.momentum.enabled ? 1 : cfg.threads);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const Tensor2 qs = select_rows(queries, order);
    const EnsembleEmbeddings q_emb = t2i ? scorer.embed_texts(qs) : scorer.embed_images(qs);
    std::vector<double> reward;
    std::vector<double> gain;
    for (std::size_t i = 0; i < n; ++i) {
      auto& o = outs[i];
      o.trace.sample = i;
      o.trace.truth = static_cast<std::int64_t>(i);
      const double r = scorer.score(q_emb, i, gallery.reward_feats, o.ranking.front());
      reward.push_back(r);
      gain.push_back(r - scorer.score(q_emb, i, gallery.reward_feats, o.trace.initial_prediction));
      run.rankings.push_back(std::move(o.ranking));
      run.traces.push_back(std::move(o.trace));
    }
    m.samples = n;
    std::vector<std::size_t> truths(order);
    m.recall1 = recall_at_k(run.rankings, truths, 1);
    m.recall5 = recall_at_k(run.rankings, truths, 5);
    m.recall10 = recall_at_k(run.rankings, truths, 10);
    m.mean_reward = mean_of(reward);
    m.mean_reward_gain = mean_of(gain);
  } else {
    if (!assets.captioner) throw Error("caption task needs a captioner checkpoint");
    const ToyCaptioner& cap = *assets.captioner;
    const std::size_t n = limit(b.caption_indices.size(), cfg.samples);
    if (n == 0) throw Error("no caption samples to evaluate");
    ParamTree pristine = cap.params;
    apply_scope(pristine, t);
    const CaptionTextFn text_of = [&b](std::span<const Token> tokens) { return b.bag_row(b.caption_attributes(tokens)); };
    std::vector<CaptionOutcome> outs(n);
    run.stream = run_stream(pristine, t, n, [&](EpisodeState& ep, std::size_t i, ParamTree* adapted) {
      const auto image = b.target.images.row(b.caption_indices[i]);
      const std::vector<double> embed = encode_image(student, image);
      outs[i] = tta_caption(image, embed, ep, cap, scorer, text_of, t);
      if (adapted != nullptr) *adapted = std::move(outs[i].adapted);
    }, t.momentum.enabled ? 1 : cfg.threads);
    std::vector<double> f1;
    std::vector<double> reward;
    std::vector<double> gain;
    for (std::size_t i = 0; i < n; ++i) {
      auto& o = outs[i];
      const std::size_t label = b.target.labels[b.caption_indices[i]];
      o.trace.sample = b.caption_indices[i];
      o.trace.truth = static_cast<std::int64_t>(label);
      f1.push_back(caption_attribute_f1(o.caption, b.reference_caption(label)));
      reward.push_back(o.reward);
      gain.push_back(o.reward - o.initial_reward);
      run.captions.push_back(std::move(o.caption));
      run.traces.push_back(std::move(o.trace));
    }
    m.samples = n;
    m.caption_f1 = mean_of(f1);
    m.mean_reward = mean_of(reward);
    m.mean_reward_gain = mean_of(gain);
  }
  std::vector<double> wall;
  for (const auto& tr : run.traces) wall.push_back(tr.wall_ms);
  m.mean_wall_ms = mean_of(wall);
  return run;
}

MetricsReport direct_eval(const Assets& assets, const ExperimentConfig& cfg) {
  const ShiftBenchmark& b = assets.bench;
  const std::size_t n = limit(b.target.size(), cfg.samples);
  std::vector<std::size_t> pred;
  std::vector<std::vector<std::size_t>> top5;
  std::vector<double> conf;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor2 logits = all_class_logits(assets.student, Tensor2::row_vector(b.target.images.row(i)));
    const std::vector<double> p = softmax(logits.row(0));
    pred.push_back(top_k(logits.row(0), 1)[0]);
    top5.push_back(top_k(logits.row(0), std::min<std::size_t>(5, p.size())));
    conf.push_back(p[pred.back()]);
  }
  return classification_metrics(pred, top5, conf, std::span(b.target.labels).first(n));
}

MetricsReport reward_model_eval(const Assets& assets, const ExperimentConfig& cfg) {
  const ShiftBenchmark& b = assets.bench;
  const std::size_t n = limit(b.target.size(), cfg.samples);
  const RewardScorer scorer(assets.reward_models);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const EnsembleEmbeddings imgs = scorer.embed_images(select_rows(b.target.images, order));
  std::vector<std::size_t> pred;
  std::vector<std::vector<std::size_t>> top5;
  std::vector<double> conf;
  std::vector<double> reward;
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<double> logits = scorer.logits(imgs, i, scorer.class_texts());
    const std::vector<double> p = softmax(logits);
    pred.push_back(top_k(logits, 1)[0]);
    top5.push_back(top_k(logits, std::min<std::size_t>(5, p.size())));
    conf.push_back(p[pred.back()]);
    reward.push_back(scorer.score(scorer.class_texts(), pred.back(), imgs, i));
  }
  MetricsReport m = classification_metrics(pred, top5, conf, std::span(b.target.labels).first(n));
  m.mean_reward = mean_of(reward);
  return m;
}

std::string results_header() {
  return "task\tobjective\tsamples\ttop1\ttop5\tece\trecall1\trecall5\trecall10\tcaption_f1\tmean_reward\tmean_reward_gain";
}

std::string format_row(const ResultRow& r) {
  const MetricsReport& m = r.metrics;
  std::ostringstream s;
  s << r.task << '\t' << r.objective << '\t' << m.samples << '\t' << fmt_opt(m.top1) << '\t' << fmt_opt(m.top5)
    << '\t' << fmt_opt(m.ece) << '\t' << fmt_opt(m.recall1) << '\t' << fmt_opt(m.recall5) << '\t'
    << fmt_opt(m.recall10) << '\t' << fmt_opt(m.caption_f1) << '\t' << fmt_opt(m.mean_reward) << '\t'
    << fmt_opt(m.mean_reward_gain);
  return s.str();
}

std::vector<ResultRow> read_results(const fs::path& tsv) {
  std::ifstream in(tsv);
  if (!in) throw Error("cannot read results table '" + tsv.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != results_header()) throw Error("'" + tsv.string() + "' is not a results table");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, '\t')) f.push_back(cell);
    if (f.size() != 12) throw Error("malformed row in '" + tsv.string() + "'");
    auto opt = [](const std::string& s) -> std::optional<double> {
      if (s == "-") return std::nullopt;
      return std::stod(s);
    };
    ResultRow r;
    r.task = f[0];
    r.objective = f[1];
    r.metrics.samples = std::stoul(f[2]);
    r.metrics.top1 = opt(f[3]);
    r.metrics.top5 = opt(f[4]);
    r.metrics.ece = opt(f[5]);
    r.metrics.recall1 = opt(f[6]);
    r.metrics.recall5 = opt(f[7]);
    r.metrics.recall10 = opt(f[8]);
    r.metrics.caption_f1 = opt(f[9]);
    r.metrics.mean_reward = opt(f[10]);
    r.metrics.mean_reward_gain = opt(f[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

StepCurve step_curve(const std::string& objective, const std::vector<EpisodeTrace>& traces) {
  StepCurve c;
  c.objective = objective;
  if (traces.empty()) return c;
  const std::size_t steps = traces.front().steps.size();
  for (std::size_t s = 0; s <= steps; ++s) {
    std::vector<double> conf;
    std::unique_ptr<bool[]> ok(new bool[traces.size()]);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const EpisodeTrace& t = traces[i];
      if (t.steps.size() != steps) throw Error("traces disagree on the number of steps");
      const std::size_t p = s == 0 ? t.initial_prediction : t.steps[s - 1].prediction;
      const double cf = s == 0 ? t.initial_confidence : t.steps[s - 1].confidence;
      ok[i] = static_cast<std::int64_t>(p) == t.truth;
      hits += ok[i];
      conf.push_back(cf);
    }
    c.accuracy.push_back(static_cast<double>(hits) / static_cast<double>(traces.size()));
    c.ece.push_back(ece(conf, std::span<const bool>(ok.get(), traces.size())));
  }
  return c;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  fs::create_directories(cfg.out_dir);
  const Assets assets = prepare_assets(cfg, log, cfg.kind == ExperimentKind::caption);
  ExperimentResult result;
  result.results_path = cfg.out_dir / "results.tsv";
  std::ofstream table(result.results_path);
  table << results_header() << '\n' << std::flush;
  {
    std::ofstream used(cfg.out_dir / "config_used.txt");
    for (const auto& [k, v] : cfg.source) used << k << " = " << v << '\n';
  }
  if (cfg.write_traces) fs::create_directories(cfg.out_dir / "traces");
  nlohmann::json timing = nlohmann::json::object();

  for (Task task : kind_tasks(cfg.kind)) {
    for (Objective obj : cfg.objectives) {
      say(log, "running " + to_string(task) + " / " + to_string(obj));
      TaskRun run = run_task(assets, cfg, task, obj);
      table << format_row(run.row) << '\n' << std::flush;
      timing[to_string(task)][to_string(obj)] = {{"mean_wall_ms", run.row.metrics.mean_wall_ms},
                                                 {"samples", run.row.metrics.samples}};
      if (cfg.write_traces) {
        std::ofstream tr(cfg.out_dir / "traces" / (to_string(task) + "_" + to_string(obj) + ".jsonl"));
        for (std::size_t i = 0; i < run.traces.size(); ++i) {
          nlohmann::json j = to_json(run.traces[i]);
          j["task"] = to_string(task);
          j["objective"] = to_string(obj);
          if (!run.captions.empty()) j["caption"] = decode_to_text(run.captions[i], assets.captioner->vocab);
          tr << j.dump() << '\n';
        }
      }
      result.rows.push_back(std::move(run.row));
    }
    if (task == Task::classify) {
      ResultRow r{to_string(task), "reward_model", reward_model_eval(assets, cfg)};
      table << format_row(r) << '\n' << std::flush;
      result.rows.push_back(std::move(r));
    }
  }

  std::ofstream summary(cfg.out_dir / "summary.tsv");
  summary << "task\tobjective\tmetric\tvalue\tzero_shot\tdelta\n";
  for (const auto& base : result.rows) {
    if (base.objective != "none") continue;
    for (const auto& r : result.rows) {
      if (r.task != base.task || r.objective == "none") continue;
      const std::pair<const char*, std::optional<double> MetricsReport::*> metrics[] = {
          {"top1", &MetricsReport::top1},        {"ece", &MetricsReport::ece},
          {"recall1", &MetricsReport::recall1},  {"recall5", &MetricsReport::recall5},
          {"caption_f1", &MetricsReport::caption_f1}, {"mean_reward", &MetricsReport::mean_reward}};
      for (const auto& [name, field] : metrics) {
        const auto& v = r.metrics.*field;
        const auto& z = base.metrics.*field;
        if (!v || !z) continue;
        summary << r.task << '\t' << r.objective << '\t' << name << '\t' << fmt("%.6f", *v) << '\t'
                << fmt("%.6f", *z) << '\t' << fmt("%+.6f", *v - *z) << '\n';
      }
    }
  }
  std::ofstream(cfg.out_dir / "timing.json") << timing.dump(2) << '\n';
  return result;
}

ExperimentResult run_sweep(const ExperimentConfig& cfg, std::ostream* log) {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const char* axis : {"sweep_K", "sweep_steps", "sweep_lr", "sweep_objective"}) {
    if (auto it = cfg.source.find(axis); it != cfg.source.end()) {
      auto values = split_list(it->second);
      if (values.empty()) throw ConfigError(std::string("config key '") + axis + "' is empty");
      axes.emplace_back(std::string(axis).substr(6), std::move(values));
    }
  }
  if (axes.empty()) throw ConfigError("sweep needs at least one of sweep_K, sweep_steps, sweep_lr, sweep_objective");

  std::vector<KeyValues> points{cfg.source};
  for (const auto& [key, values] : axes) {
    std::vector<KeyValues> next;
    for (const auto& p : points) {
      for (const auto& v : values) {
        KeyValues q = p;
        if (key == "objective") {
          q["objectives"] = v;
        } else if (key == "K" && cfg.kind == ExperimentKind::retrieve) {
          q["K_t2i"] = v;
          q["K_i2t"] = v;
        } else {
          q[key] = v;
        }
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  std::vector<ExperimentConfig> configs;
  for (auto& p : points) {
    for (const char* axis : {"sweep_K", "sweep_steps", "sweep_lr", "sweep_objective"}) p.erase(axis);
    configs.push_back(build_config(p));
  }

  fs::create_directories(cfg.out_dir);
  const Assets assets = prepare_assets(cfg, log, cfg.kind == ExperimentKind::caption);
  ExperimentResult result;
  result.results_path = cfg.out_dir / "sweep.tsv";
  std::ofstream table(result.results_path);
  table << "K\tsteps\tlr\t" << results_header() << '\n' << std::flush;
  for (const auto& pc : configs) {
    for (Task task : kind_tasks(pc.kind)) {
      for (Objective obj : pc.objectives) {
        const TTAConfig t = task_config(pc, task, obj);
        say(log, "sweep point K=" + std::to_string(t.K) + " steps=" + std::to_string(t.steps) + " lr=" +
                     fmt("%g", t.lr) + " " + to_string(task) + "/" + to_string(obj));
        TaskRun run = run_task(assets, pc, task, obj);
        table << t.K << '\t' << t.steps << '\t' << fmt("%g", t.lr) << '\t' << format_row(run.row) << '\n'
              << std::flush;
        result.rows.push_back(std::move(run.row));
      }
    }
  }
  return result;
}

void write_report(const std::vector<fs::path>& runs, const fs::path& out, bool charts) {
  if (runs.empty()) throw Error("report needs at least one run directory");
  fs::create_directories(out);
  struct Group {
    std::string task, objective;
    std::vector<ResultRow> rows;
  };
  std::vector<Group> groups;
  for (const auto& dir : runs) {
    for (auto& r : read_results(dir / "results.tsv")) {
      auto it = std::find_if(groups.begin(), groups.end(),
                             [&](const Group& g) { return g.task == r.task && g.objective == r.objective; });
      if (it == groups.end()) {
        groups.push_back({r.task, r.objective, {}});
        it = groups.end() - 1;
      }
      it->rows.push_back(std::move(r));
    }
  }
  const std::pair<const char*, std::optional<double> MetricsReport::*> metrics[] = {
      {"top1", &MetricsReport::top1},         {"top5", &MetricsReport::top5},
      {"ece", &MetricsReport::ece},           {"recall1", &MetricsReport::recall1},
      {"recall5", &MetricsReport::recall5},   {"recall10", &MetricsReport::recall10},
      {"caption_f1", &MetricsReport::caption_f1}, {"mean_reward", &MetricsReport::mean_reward}};
  std::ofstream summary(out / "summary.tsv");
  summary << "task\tobjective\truns\tmetric\tmean\tstd\n";
  for (const auto& g : groups) {
    for (const auto& [name, field] : metrics) {
      std::vector<double> v;
      for (const auto& r : g.rows)
        if (r.metrics.*field) v.push_back(*(r.metrics.*field));
      if (v.empty()) continue;
      const double mu = mean_of(v);
      double var = 0.0;
      for (double x : v) var += (x - mu) * (x - mu);
      const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
      summary << g.task << '\t' << g.objective << '\t' << v.size() << '\t' << name << '\t' << fmt("%.6f", mu)
              << '\t' << fmt("%.6f", sd) << '\n';
    }
  }

  // Curves from classification traces, averaged over runs.
  std::vector<StepCurve> curves;
  for (const auto& g : groups) {
    if (g.task != "classify" || g.objective == "reward_model") continue;
    StepCurve avg;
    avg.objective = g.objective;
    std::size_t used = 0;
    for (const auto& dir : runs) {
      const fs::path p = dir / "traces" / ("classify_" + g.objective + ".jsonl");
      if (!fs::exists(p)) continue;
      const StepCurve c = step_curve(g.objective, read_traces(p));
      if (c.accuracy.empty()) continue;
      if (avg.accuracy.empty()) {
        avg.accuracy.assign(c.accuracy.size(), 0.0);
        avg.ece.assign(c.ece.size(), 0.0);
      }
      if (c.accuracy.size() != avg.accuracy.size()) continue;
      for (std::size_t i = 0; i < c.accuracy.size(); ++i) {
        avg.accuracy[i] += c.accuracy[i];
        avg.ece[i] += c.ece[i];
      }
      ++used;
    }
    if (used == 0) continue;
    for (double& x : avg.accuracy) x /= static_cast<double>(used);
    for (double& x : avg.ece) x /= static_cast<double>(used);
    curves.push_back(std::move(avg));
  }
  if (curves.empty()) return;
  std::ofstream ct(out / "curves.tsv");
  ct << "objective\tstep\taccuracy\tece\n";
  for (const auto& c : curves)
    for (std::size_t s = 0; s < c.accuracy.size(); ++s)
      ct << c.objective << '\t' << s << '\t' << fmt("%.6f", c.accuracy[s]) << '\t' << fmt("%.6f", c.ece[s]) << '\n';
  if (!charts) return;
  std::vector<std::pair<std::string, std::vector<double>>> acc, ec;
  for (const auto& c : curves) {
    acc.emplace_back(c.objective, c.accuracy);
    ec.emplace_back(c.objective, c.ece);
  }
  write_line_chart(out / "accuracy_vs_steps.svg", "Top-1 accuracy vs TTA steps", "top-1", acc);
  write_line_chart(out / "ece_vs_steps.svg", "ECE vs TTA steps", "ECE", ec);
}

}  // namespace rlcf
