#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "rlcf/bench.hpp"

using namespace rlcf;

namespace {

BenchSpec small_spec() {
  BenchSpec s;
  s.classes = 6;
  s.attributes = 8;
  s.attrs_per_class = 2;
  s.d_in = 12;
  s.d_tok = 6;
  s.rotation_dims = 6;
  s.source_per_class = 20;
  s.heldout_per_class = 5;
  s.teacher_source_per_class = 10;
  s.teacher_shift_per_class = 4;
  s.target_samples = 50;
  s.gallery_size = 20;
  s.caption_samples = 10;
  return s;
}

// Independent re-binning: walk the bins and collect members explicitly.
double brute_ece(const std::vector<double>& conf, const std::vector<bool>& ok, std::size_t bins) {
  double total = 0;
  const double n = static_cast<double>(conf.size());
  for (std::size_t b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / bins, hi = static_cast<double>(b + 1) / bins;
    double cs = 0, hits = 0, cnt = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const bool in = (conf[i] >= lo && conf[i] < hi) || (b + 1 == bins && conf[i] == 1.0);
      if (!in) continue;
      cs += conf[i];
      hits += ok[i];
      ++cnt;
    }
    if (cnt > 0) total += cnt / n * std::abs(hits / cnt - cs / cnt);
  }
  return total;
}

double mean_dist_to_proto(const ShiftBenchmark& b, const Split& s) {
  double d = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < b.spec.d_in; ++j) {
      const double e = s.images(i, j) - b.prototypes(s.labels[i], j);
      acc += e * e;
    }
    d += std::sqrt(acc);
  }
  return d / s.size();
}

}  // namespace

TEST_CASE("generation is deterministic and shaped by the spec") {
  const BenchSpec s = small_spec();
  const ShiftBenchmark a = gen_benchmark(s, 3), b = gen_benchmark(s, 3), c = gen_benchmark(s, 4);
  CHECK(a.target.images.data() == b.target.images.data());
  CHECK(a.target.images.data() != c.target.images.data());
  CHECK(a.source.size() == 6 * 20);
  CHECK(a.heldout.size() == 6 * 5);
  CHECK(a.teacher_shift.size() == 6 * 4);
  CHECK(a.target.size() == 50);
  CHECK(a.gallery_images.rows() == 20);
  CHECK(a.caption_indices.size() == 10);
  CHECK(a.vocab_size() == 10);
  std::set<std::vector<std::size_t>> sets(a.class_attrs.begin(), a.class_attrs.end());
  CHECK(sets.size() == 6);
  std::set<std::vector<std::size_t>> g(a.gallery_attrs.begin(), a.gallery_attrs.end());
  CHECK(g.size() == 20);
  for (std::size_t k = 0; k < 6; ++k) {
    double n = 0;
    for (double x : a.prototypes.row(k)) n += x * x;
    CHECK(n == doctest::Approx(1.0));
  }
  for (std::size_t l : a.target.labels) CHECK(l < 6);
}

TEST_CASE("shift zero reduces to the source process") {
  BenchSpec s = small_spec();
  s.shift = 0.0;
  s.target_samples = 600;
  s.source_per_class = 100;
  const ShiftBenchmark b = gen_benchmark(s, 1);
  for (std::size_t i = 0; i < s.d_in; ++i)
    for (std::size_t j = 0; j < s.d_in; ++j) CHECK(b.rotation(i, j) == (i == j ? 1.0 : 0.0));
  for (double x : b.bias.values()) CHECK(x == 0.0);
  CHECK(mean_dist_to_proto(b, b.target) == doctest::Approx(mean_dist_to_proto(b, b.source)).epsilon(0.03));

  BenchSpec t = small_spec();
  t.target_samples = 600;
  const ShiftBenchmark shifted = gen_benchmark(t, 1);
  CHECK(mean_dist_to_proto(shifted, shifted.target) > 1.5 * mean_dist_to_proto(shifted, shifted.source));
  // the rotation is orthogonal
  const Tensor2 rtr = matmul_tn(shifted.rotation, shifted.rotation);
  for (std::size_t i = 0; i < t.d_in; ++i)
    for (std::size_t j = 0; j < t.d_in; ++j) CHECK(rtr(i, j) == doctest::Approx(i == j ? 1.0 : 0.0));
}

TEST_CASE("complementary twins share coarse attributes the teacher sees") {
  BenchSpec s = small_spec();
  s.complementary = true;
  s.attrs_per_class = 3;
  const ShiftBenchmark b = gen_benchmark(s, 2);
  for (std::size_t i = 0; i < 6; i += 2) {
    const auto& x = b.class_attrs[i];
    const auto& y = b.class_attrs[i + 1];
    std::vector<std::size_t> common;
    std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(common));
    CHECK(common.size() == 2);
    CHECK(b.teacher_class_attrs[i] == common);
    CHECK(b.teacher_class_attrs[i + 1] == common);
    CHECK(x != y);
  }
  const Tensor2 t = b.class_rows(true);
  for (std::size_t j = 0; j < s.d_tok; ++j) CHECK(t(0, j) == t(1, j));
}

TEST_CASE("infeasible specs are rejected") {
  BenchSpec s = small_spec();
  s.attributes = 3;  // C(3,2) = 3 < 6 classes
  CHECK_THROWS_WITH_AS(gen_benchmark(s, 0), doctest::Contains("infeasible"), Error);
  s = small_spec();
  s.classes = 1;
  CHECK_THROWS_AS(gen_benchmark(s, 0), Error);
  s = small_spec();
  s.complementary = true;
  s.classes = 5;
  CHECK_THROWS_AS(gen_benchmark(s, 0), Error);
  s = small_spec();
  s.gallery_size = 100;  // only 28 attribute pairs
  CHECK_THROWS_AS(gen_benchmark(s, 0), Error);
}

TEST_CASE("bag rows, captions and reference tokens") {
  const ShiftBenchmark b = gen_benchmark(small_spec(), 0);
  CHECK(b.bag_row(std::vector<std::size_t>{}) == std::vector<double>(6, 0.0));
  const auto r = b.bag_row(std::vector<std::size_t>{1, 3, 3});  // duplicates count once
  for (std::size_t j = 0; j < 6; ++j)
    CHECK(r[j] == doctest::Approx((b.attribute_tokens(1, j) + b.attribute_tokens(3, j)) / std::sqrt(2.0)));
  const TokenSeq ref = b.reference_caption(2);
  CHECK(ref.front() == Vocab::kBos);
  CHECK(ref.back() == Vocab::kEos);
  CHECK(b.caption_attributes(ref) == b.class_attrs[2]);
  CHECK_THROWS_AS(b.caption_attributes(TokenSeq{0, 40, 1}), Error);
  const Tensor2 rows = b.class_rows(false);
  const auto row2 = b.bag_row(b.class_attrs[2]);
  for (std::size_t j = 0; j < 6; ++j) CHECK(rows(2, j) == row2[j]);
}

TEST_CASE("benchmark files round trip bit-exactly") {
  const auto dir = testing::scratch_dir("bench_io");
  BenchSpec s = small_spec();
  s.complementary = true;
  s.attrs_per_class = 3;
  const ShiftBenchmark b = gen_benchmark(s, 9);
  save_benchmark(dir / "b", b);
  const ShiftBenchmark c = load_benchmark(dir / "b");
  CHECK(to_json(c.spec) == to_json(b.spec));
  CHECK(c.target.images.data() == b.target.images.data());
  CHECK(c.target.labels == b.target.labels);
  CHECK(c.class_attrs == b.class_attrs);
  CHECK(c.teacher_class_attrs == b.teacher_class_attrs);
  CHECK(c.gallery_texts.data() == b.gallery_texts.data());
  CHECK(c.attribute_tokens.data() == b.attribute_tokens.data());
  CHECK(c.caption_indices == b.caption_indices);
  CHECK(bench_spec_from_json(to_json(s)).complementary);
}

TEST_CASE("ece equals brute-force re-binning") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(60);
    std::vector<double> conf(n);
    std::vector<bool> ok(n);
    std::unique_ptr<bool[]> okb(new bool[n]);
    for (std::size_t i = 0; i < n; ++i) {
      conf[i] = rng.index(5) == 0 ? static_cast<double>(rng.index(11)) / 10.0 : rng.uniform();  // edge values too
      ok[i] = rng.bernoulli(conf[i]);
      okb[i] = ok[i];
    }
    const std::size_t bins = 1 + rng.index(15);
    const double e = ece(conf, std::span<const bool>(okb.get(), n), bins);
    CHECK(e == doctest::Approx(brute_ece(conf, ok, bins)).epsilon(1e-12));
    CHECK(e >= 0.0);
    CHECK(e <= 1.0);
  }
  const bool t[] = {true, false};
  CHECK(ece(std::vector<double>{1.0, 0.0}, t) == 0.0);
  CHECK_THROWS_AS(ece(std::vector<double>{0.5}, t), Error);
  const bool one[] = {true};
  CHECK_THROWS_AS(ece(std::vector<double>{1.5}, one), Error);
}

TEST_CASE("recall@k equals counting by hand") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t q = 1 + rng.index(10), g = 1 + rng.index(10);
    std::vector<std::vector<std::size_t>> ranks(q);
    std::vector<std::size_t> truth(q);
    for (std::size_t i = 0; i < q; ++i) {
      ranks[i].resize(g);
      std::iota(ranks[i].begin(), ranks[i].end(), std::size_t{0});
      rng.shuffle(ranks[i]);
      truth[i] = rng.index(g);
    }
    double prev = -1;
    for (std::size_t k = 1; k <= g; ++k) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < q; ++i)
        for (std::size_t j = 0; j < k; ++j) hits += ranks[i][j] == truth[i];
      const double r = recall_at_k(ranks, truth, k);
      CHECK(r == doctest::Approx(static_cast<double>(hits) / q));
      CHECK(r >= prev);
      prev = r;
    }
    CHECK(prev == 1.0);
  }
}

TEST_CASE("caption attribute F1") {
  CHECK(caption_attribute_f1(TokenSeq{0, 2, 3, 1}, TokenSeq{0, 3, 2, 1}) == 1.0);
  CHECK(caption_attribute_f1(TokenSeq{0, 1}, TokenSeq{0, 1}) == 1.0);
  CHECK(caption_attribute_f1(TokenSeq{0, 1}, TokenSeq{0, 2, 1}) == 0.0);
  // precision 1/2, recall 1/3
  CHECK(caption_attribute_f1(TokenSeq{0, 2, 5, 1}, TokenSeq{0, 2, 3, 4, 1}) == doctest::Approx(0.4));
  CHECK(caption_attribute_f1(TokenSeq{0, 2, 2, 1}, TokenSeq{0, 2, 1}) == 1.0);
}
