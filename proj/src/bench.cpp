#include "rlcf/bench.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "rlcf/checkpoint.hpp"
#include "rlcf/rng.hpp"

namespace rlcf {

namespace {

enum Stream : std::uint64_t {
  kAttrTokens = 1,
  kAttrDirs,
  kClassSets,
  kPrompt,
  kShift,
  kSource,
  kHeldout,
  kTeacherSource,
  kTeacherShift,
  kTarget,
  kGallery,
};

double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  double r = 1.0;
  for (std::size_t i = 0; i < k; ++i) r = r * static_cast<double>(n - i) / static_cast<double>(i + 1);
  return r;
}

std::vector<std::size_t> random_subset(std::size_t n, std::size_t k, Rng& rng,
                                       std::span<const std::size_t> exclude = {}) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n; ++i)
    if (std::find(exclude.begin(), exclude.end(), i) == exclude.end()) pool.push_back(i);
  rng.shuffle(pool);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

/// Distinct random k-subsets; the caller has checked capacity.
std::vector<std::vector<std::size_t>> distinct_subsets(std::size_t count, std::size_t n, std::size_t k,
                                                       Rng& rng) {
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::vector<std::size_t>> out;
  std::size_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > 1000 * (count + 10)) throw Error("could not draw enough distinct attribute sets");
    auto s = random_subset(n, k, rng);
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

Tensor2 orthonormal_columns(std::size_t d, std::size_t k, Rng& rng) {
  Tensor2 q(k, d);  // stored as rows
  for (std::size_t i = 0; i < k; ++i) {
    auto r = q.row(i);
    for (;;) {
      for (double& x : r) x = rng.normal();
      for (std::size_t j = 0; j < i; ++j) {
        const double p = dot(r, q.row(j));
        for (std::size_t t = 0; t < d; ++t) r[t] -= p * q(j, t);
      }
      const double n = l2_norm(r);
      if (n > 1e-8) {
        for (double& x : r) x /= n;
        break;
      }
    }
  }
  return q;
}

/// Rotation by `angle` in each of the planes spanned by consecutive basis
/// pairs; the identity when angle = 0.
Tensor2 subspace_rotation(std::size_t d, std::size_t dims, double angle, Rng& rng) {
  Tensor2 r(d, d);
  for (std::size_t i = 0; i < d; ++i) r(i, i) = 1.0;
  const std::size_t k = std::min(d - d % 2, dims - dims % 2);
  if (k == 0) return r;
  const Tensor2 q = orthonormal_columns(d, k, rng);
  const double c = std::cos(angle) - 1.0;
  const double s = std::sin(angle);
  for (std::size_t p = 0; p + 1 < k; p += 2) {
    auto a = q.row(p);
    auto b = q.row(p + 1);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        r(i, j) += c * (a[i] * a[j] + b[i] * b[j]) + s * (b[i] * a[j] - a[i] * b[j]);
      }
    }
  }
  return r;
}

std::vector<double> noisy(std::span<const double> mu, double sigma, Rng& rng) {
  const double s = sigma / std::sqrt(static_cast<double>(mu.size()));
  std::vector<double> x(mu.begin(), mu.end());
  for (double& v : x) v += rng.normal(0.0, s);
  return x;
}

std::vector<double> apply_shift(const ShiftBenchmark& b, std::span<const double> x, Rng& rng) {
  const std::size_t d = x.size();
  std::vector<double> y(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) y[i] = dot(b.rotation.row(i), x) + b.bias[i];
  const double extra = b.spec.shift * b.spec.target_noise;
  if (extra > 0.0) {
    const double s = extra / std::sqrt(static_cast<double>(d));
    for (double& v : y) v += rng.normal(0.0, s);
  }
  return y;
}

Split draw_split(const ShiftBenchmark& b, std::size_t per_class, std::size_t total, bool shifted, Rng& rng) {
  const std::size_t c = b.spec.classes;
  const std::size_t n = total > 0 ? total : per_class * c;
  Split s;
  s.images = Tensor2(n, b.spec.d_in);
  s.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = total > 0 ? rng.index(c) : i % c;
    std::vector<double> x = noisy(b.prototypes.row(label), b.spec.source_noise, rng);
    if (shifted) x = apply_shift(b, x, rng);
    std::copy(x.begin(), x.end(), s.images.row(i).begin());
    s.labels[i] = label;
  }
  return s;
}

std::vector<double> attribute_image(const ShiftBenchmark& b, std::span<const std::size_t> attrs) {
  std::vector<double> sum(b.spec.d_in, 0.0);
  for (std::size_t a : attrs) {
    auto dir = b.attribute_dirs.row(a);
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += dir[j];
  }
  return l2_normalize(sum);
}

}  // namespace

nlohmann::json to_json(const BenchSpec& s) {
  return {{"classes", s.classes},
          {"d_in", s.d_in},
          {"d_tok", s.d_tok},
          {"attributes", s.attributes},
          {"attrs_per_class", s.attrs_per_class},
          {"prompt_len", s.prompt_len},
          {"source_per_class", s.source_per_class},
          {"heldout_per_class", s.heldout_per_class},
          {"teacher_source_per_class", s.teacher_source_per_class},
          {"teacher_shift_per_class", s.teacher_shift_per_class},
          {"target_samples", s.target_samples},
          {"shift", s.shift},
          {"max_angle", s.max_angle},
          {"rotation_dims", s.rotation_dims},
          {"bias", s.bias},
          {"source_noise", s.source_noise},
          {"target_noise", s.target_noise},
          {"complementary", s.complementary},
          {"gallery_size", s.gallery_size},
          {"caption_samples", s.caption_samples},
          {"seed", s.seed}};
}

BenchSpec bench_spec_from_json(const nlohmann::json& j) {
  BenchSpec s;
  s.classes = j.at("classes").get<std::size_t>();
  s.d_in = j.at("d_in").get<std::size_t>();
  s.d_tok = j.at("d_tok").get<std::size_t>();
  s.attributes = j.at("attributes").get<std::size_t>();
  s.attrs_per_class = j.at("attrs_per_class").get<std::size_t>();
  s.prompt_len = j.at("prompt_len").get<std::size_t>();
  s.source_per_class = j.at("source_per_class").get<std::size_t>();
  s.heldout_per_class = j.at("heldout_per_class").get<std::size_t>();
  s.teacher_source_per_class = j.at("teacher_source_per_class").get<std::size_t>();
  s.teacher_shift_per_class = j.at("teacher_shift_per_class").get<std::size_t>();
  s.target_samples = j.at("target_samples").get<std::size_t>();
  s.shift = j.at("shift").get<double>();
  s.max_angle = j.at("max_angle").get<double>();
  s.rotation_dims = j.at("rotation_dims").get<std::size_t>();
  s.bias = j.at("bias").get<double>();
  s.source_noise = j.at("source_noise").get<double>();
  s.target_noise = j.at("target_noise").get<double>();
  s.complementary = j.at("complementary").get<bool>();
  s.gallery_size = j.at("gallery_size").get<std::size_t>();
  s.caption_samples = j.at("caption_samples").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

std::vector<double> ShiftBenchmark::bag_row(std::span<const std::size_t> attrs) const {
  std::vector<std::size_t> uniq(attrs.begin(), attrs.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<double> row(spec.d_tok, 0.0);
  if (uniq.empty()) return row;
  for (std::size_t a : uniq) {
    if (a >= spec.attributes) throw Error("attribute id " + std::to_string(a) + " out of range");
    auto e = attribute_tokens.row(a);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += e[j];
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(uniq.size()));
  for (double& x : row) x *= s;
  return row;
}

Tensor2 ShiftBenchmark::class_rows(bool teacher) const {
  const auto& sets = teacher ? teacher_class_attrs : class_attrs;
  Tensor2 t(sets.size(), spec.d_tok);
  for (std::size_t c = 0; c < sets.size(); ++c) {
    const std::vector<double> r = bag_row(sets[c]);
    std::copy(r.begin(), r.end(), t.row(c).begin());
  }
  return t;
}

std::vector<std::size_t> ShiftBenchmark::caption_attributes(std::span<const Token> tokens) const {
  std::vector<std::size_t> out;
  for (Token t : tokens) {
    if (t == Vocab::kBos || t == Vocab::kEos) continue;
    if (t < 2 || t >= vocab_size()) throw Error("caption token " + std::to_string(t) + " out of vocab");
    out.push_back(t - 2);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

TokenSeq ShiftBenchmark::reference_caption(std::size_t class_id) const {
  TokenSeq seq{Vocab::kBos};
  for (std::size_t a : class_attrs.at(class_id)) seq.push_back(attribute_token(a));
  seq.push_back(Vocab::kEos);
  return seq;
}

ContrastiveData ShiftBenchmark::pretrain_data(bool teacher) const {
  ContrastiveData d;
  d.class_tokens = class_rows(teacher);
  d.prompt = prompt;
  if (!teacher) {
    d.images = source.images;
    d.labels = source.labels;
    return d;
  }
  const std::size_t n = teacher_source.size() + teacher_shift.size();
  d.images = Tensor2(n, spec.d_in);
  for (std::size_t i = 0; i < teacher_source.size(); ++i) {
    std::copy(teacher_source.images.row(i).begin(), teacher_source.images.row(i).end(), d.images.row(i).begin());
    d.labels.push_back(teacher_source.labels[i]);
  }
  for (std::size_t i = 0; i < teacher_shift.size(); ++i) {
    const std::size_t at = teacher_source.size() + i;
    std::copy(teacher_shift.images.row(i).begin(), teacher_shift.images.row(i).end(), d.images.row(at).begin());
    d.labels.push_back(teacher_shift.labels[i]);
  }
  return d;
}

ShiftBenchmark gen_benchmark(const BenchSpec& spec_in, std::uint64_t seed) {
  BenchSpec spec = spec_in;
  spec.seed = seed;
  const std::size_t c = spec.classes;
  const std::size_t n = spec.attrs_per_class;
  if (c < 2) throw Error("benchmark needs at least 2 classes");
  if (spec.d_in < 4) throw Error("benchmark needs d_in of at least 4");
  if (spec.d_tok < 1 || n < 1 || spec.prompt_len < 1) throw Error("benchmark dimensions must be positive");
  if (!(spec.shift >= 0.0)) throw Error("shift must be non-negative");
  if (spec.complementary) {
    if (c % 2 != 0) throw Error("complementary benchmark needs an even class count");
    if (n < 2 || spec.attributes < n + 1 || binomial(spec.attributes, n - 1) < static_cast<double>(c / 2)) {
      throw Error("infeasible spec: " + std::to_string(spec.attributes) + " attributes cannot give " +
                  std::to_string(c / 2) + " twin pairs distinct coarse sets of size " + std::to_string(n - 1));
    }
  } else if (spec.attributes < n || binomial(spec.attributes, n) < static_cast<double>(c)) {
    throw Error("infeasible spec: " + std::to_string(spec.attributes) + " attributes choose " +
                std::to_string(n) + " cannot label " + std::to_string(c) + " distinct classes");
  }
  if (binomial(spec.attributes, n) < static_cast<double>(spec.gallery_size)) {
    throw Error("infeasible spec: gallery larger than the number of distinct attribute sets");
  }

  ShiftBenchmark b;
  b.spec = spec;
  {
    Rng rng(derive_seed(seed, kAttrTokens));
    b.attribute_tokens = Tensor2(spec.attributes, spec.d_tok);
    for (double& x : b.attribute_tokens.values()) x = rng.normal();
  }
  {
    Rng rng(derive_seed(seed, kAttrDirs));
    b.attribute_dirs = Tensor2(spec.attributes, spec.d_in);
    for (std::size_t a = 0; a < spec.attributes; ++a) {
      const std::vector<double> u = rng.unit_vector(spec.d_in);
      std::copy(u.begin(), u.end(), b.attribute_dirs.row(a).begin());
    }
  }
  {
    Rng rng(derive_seed(seed, kClassSets));
    if (spec.complementary) {
      const auto coarse = distinct_subsets(c / 2, spec.attributes, n - 1, rng);
      for (const auto& base : coarse) {
        const auto fine = random_subset(spec.attributes, 2, rng, base);
        for (std::size_t f : fine) {
          auto full = base;
          full.push_back(f);
          std::sort(full.begin(), full.end());
          b.class_attrs.push_back(full);
          b.teacher_class_attrs.push_back(base);
        }
      }
    } else {
      b.class_attrs = distinct_subsets(c, spec.attributes, n, rng);
      b.teacher_class_attrs = b.class_attrs;
    }
  }
  b.prototypes = Tensor2(c, spec.d_in);
  for (std::size_t k = 0; k < c; ++k) {
    const std::vector<double> mu = attribute_image(b, b.class_attrs[k]);
    std::copy(mu.begin(), mu.end(), b.prototypes.row(k).begin());
  }
  {
    Rng rng(derive_seed(seed, kPrompt));
    b.prompt = Tensor2(spec.prompt_len, spec.d_tok);
    for (double& x : b.prompt.values()) x = rng.normal(0.0, 0.3);
  }
  {
    Rng rng(derive_seed(seed, kShift));
    b.rotation = subspace_rotation(spec.d_in, spec.rotation_dims, spec.shift * spec.max_angle, rng);
    const std::vector<double> dir = rng.unit_vector(spec.d_in);
    b.bias = Tensor2(1, spec.d_in);
    for (std::size_t j = 0; j < spec.d_in; ++j) b.bias[j] = spec.shift * spec.bias * dir[j];
  }
  {
    Rng rng(derive_seed(seed, kSource));
    b.source = draw_split(b, spec.source_per_class, 0, false, rng);
  }
  {
    Rng rng(derive_seed(seed, kHeldout));
    b.heldout = draw_split(b, spec.heldout_per_class, 0, false, rng);
  }
  {
    Rng rng(derive_seed(seed, kTeacherSource));
    b.teacher_source = draw_split(b, spec.teacher_source_per_class, 0, false, rng);
  }
  {
    Rng rng(derive_seed(seed, kTeacherShift));
    b.teacher_shift = draw_split(b, spec.teacher_shift_per_class, 0, true, rng);
  }
  {
    Rng rng(derive_seed(seed, kTarget));
    if (spec.target_samples > 0) b.target = draw_split(b, 0, spec.target_samples, true, rng);
  }
  {
    Rng rng(derive_seed(seed, kGallery));
    b.gallery_attrs = distinct_subsets(spec.gallery_size, spec.attributes, n, rng);
    b.gallery_images = Tensor2(spec.gallery_size, spec.d_in);
    b.gallery_texts = Tensor2(spec.gallery_size, spec.d_tok);
    for (std::size_t i = 0; i < spec.gallery_size; ++i) {
      std::vector<double> x = noisy(attribute_image(b, b.gallery_attrs[i]), spec.source_noise, rng);
      x = apply_shift(b, x, rng);
      std::copy(x.begin(), x.end(), b.gallery_images.row(i).begin());
      const std::vector<double> t = b.bag_row(b.gallery_attrs[i]);
      std::copy(t.begin(), t.end(), b.gallery_texts.row(i).begin());
    }
  }
  const std::size_t nc = std::min(spec.caption_samples, b.target.size());
  for (std::size_t i = 0; i < nc; ++i) b.caption_indices.push_back(i);
  return b;
}

void save_benchmark(const std::filesystem::path& stem, const ShiftBenchmark& b) {
  Checkpoint ck;
  auto add = [&](const char* name, const Tensor2& t) {
    ck.params.add(name, t.empty() ? Tensor2(1, 1) : t, false);
  };
  add("attribute_tokens", b.attribute_tokens);
  add("attribute_dirs", b.attribute_dirs);
  add("prototypes", b.prototypes);
  add("prompt", b.prompt);
  add("rotation", b.rotation);
  add("bias", b.bias);
  add("source", b.source.images);
  add("heldout", b.heldout.images);
  add("teacher_source", b.teacher_source.images);
  add("teacher_shift", b.teacher_shift.images);
  add("target", b.target.images);
  add("gallery_images", b.gallery_images);
  add("gallery_texts", b.gallery_texts);
  ck.meta = {{"kind", "shift_benchmark"},
             {"spec", to_json(b.spec)},
             {"class_attrs", b.class_attrs},
             {"teacher_class_attrs", b.teacher_class_attrs},
             {"gallery_attrs", b.gallery_attrs},
             {"caption_indices", b.caption_indices},
             {"labels",
              {{"source", b.source.labels},
               {"heldout", b.heldout.labels},
               {"teacher_source", b.teacher_source.labels},
               {"teacher_shift", b.teacher_shift.labels},
               {"target", b.target.labels}}}};
  save_checkpoint(stem, ck, Dtype::f64);
}

ShiftBenchmark load_benchmark(const std::filesystem::path& stem) {
  const Checkpoint ck = load_checkpoint(stem);
  if (ck.meta.value("kind", "") != "shift_benchmark") {
    throw Error(manifest_path(stem).string() + " is not a benchmark file");
  }
  ShiftBenchmark b;
  b.spec = bench_spec_from_json(ck.meta.at("spec"));
  b.attribute_tokens = ck.params.get("attribute_tokens");
  b.attribute_dirs = ck.params.get("attribute_dirs");
  b.prototypes = ck.params.get("prototypes");
  b.prompt = ck.params.get("prompt");
  b.rotation = ck.params.get("rotation");
  b.bias = ck.params.get("bias");
  b.class_attrs = ck.meta.at("class_attrs").get<std::vector<std::vector<std::size_t>>>();
  b.teacher_class_attrs = ck.meta.at("teacher_class_attrs").get<std::vector<std::vector<std::size_t>>>();
  b.gallery_attrs = ck.meta.at("gallery_attrs").get<std::vector<std::vector<std::size_t>>>();
  b.caption_indices = ck.meta.at("caption_indices").get<std::vector<std::size_t>>();
  const auto& labels = ck.meta.at("labels");
  auto split = [&](const char* name) {
    Split s;
    s.labels = labels.at(name).get<std::vector<std::size_t>>();
    s.images = s.labels.empty() ? Tensor2(0, b.spec.d_in) : ck.params.get(name);
    return s;
  };
  b.source = split("source");
  b.heldout = split("heldout");
  b.teacher_source = split("teacher_source");
  b.teacher_shift = split("teacher_shift");
  b.target = split("target");
  if (b.gallery_attrs.empty()) {
    b.gallery_images = Tensor2(0, b.spec.d_in);
    b.gallery_texts = Tensor2(0, b.spec.d_tok);
  } else {
    b.gallery_images = ck.params.get("gallery_images");
    b.gallery_texts = ck.params.get("gallery_texts");
  }
  return b;
}

double ece(std::span<const double> confidences, std::span<const bool> correct, std::size_t bins) {
  if (confidences.size() != correct.size()) throw Error("ece: confidences and correctness flags differ in length");
  if (bins < 1) throw Error("ece: need at least one bin");
  if (confidences.empty()) return 0.0;
  std::vector<double> conf_sum(bins, 0.0);
  std::vector<double> acc_sum(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw Error("ece: confidence outside [0, 1]");
    const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)));
    conf_sum[b] += c;
    acc_sum[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = static_cast<double>(confidences.size());
  double e = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    e += std::fabs(acc_sum[b] - conf_sum[b]) / n;
  }
  return e;
}

double recall_at_k(std::span<const std::vector<std::size_t>> rankings, std::span<const std::size_t> truths,
                   std::size_t k) {
  if (k < 1) throw Error("recall_at_k: k must be at least 1");
  if (rankings.size() != truths.size()) throw Error("recall_at_k: rankings and truths differ in length");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& r = rankings[q];
    const std::size_t upto = std::min(k, r.size());
    hits += std::find(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(upto), truths[q]) !=
            r.begin() + static_cast<std::ptrdiff_t>(upto);
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double caption_attribute_f1(std::span<const Token> caption_tokens, std::span<const Token> reference) {
  auto body = [](std::span<const Token> t) {
    std::set<Token> s;
    for (Token x : t)
      if (x != Vocab::kBos && x != Vocab::kEos) s.insert(x);
    return s;
  };
  const std::set<Token> pred = body(caption_tokens);
  const std::set<Token> ref = body(reference);
  if (pred.empty() && ref.empty()) return 1.0;
  std::size_t common = 0;
  for (Token t : pred) common += ref.count(t);
  return 2.0 * static_cast<double>(common) / static_cast<double>(pred.size() + ref.size());
}

}  // namespace rlcf
