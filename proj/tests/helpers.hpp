#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "rlcf/autodiff.hpp"
#include "rlcf/bench.hpp"
#include "rlcf/experiment.hpp"
#include "rlcf/models.hpp"
#include "rlcf/rng.hpp"

namespace testing {

inline rlcf::Tensor2 random_tensor(std::size_t r, std::size_t c, rlcf::Rng& rng, double sd = 1.0) {
  rlcf::Tensor2 t(r, c);
  for (double& x : t.values()) x = rng.normal(0.0, sd);
  return t;
}

inline rlcf::Tensor2 positive_tensor(std::size_t r, std::size_t c, rlcf::Rng& rng) {
  rlcf::Tensor2 t(r, c);
  for (double& x : t.values()) x = 0.2 + rng.uniform();
  return t;
}

/// Small random encoder, not pretrained.
inline rlcf::DualEncoder random_encoder(rlcf::Rng& rng, std::size_t d_in = 6, std::size_t d_emb = 4,
                                        std::size_t d_tok = 5, std::size_t classes = 5, std::size_t prompt = 2,
                                        double scale = 10.0) {
  return rlcf::DualEncoder::create(d_in, d_emb, random_tensor(prompt, d_tok, rng, 0.3),
                                   random_tensor(classes, d_tok, rng), rng, scale);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

/// Every caption the decoder can emit within max_len tokens after BOS, scored
/// by caption_logprob and sorted (logprob desc, tokens asc).
inline std::vector<rlcf::Beam> enumerate_captions(const rlcf::ToyCaptioner& c, std::span<const double> embed,
                                                  std::size_t max_len) {
  std::vector<rlcf::Beam> out;
  std::vector<rlcf::TokenSeq> stack{{rlcf::Vocab::kBos}};
  while (!stack.empty()) {
    rlcf::TokenSeq s = std::move(stack.back());
    stack.pop_back();
    for (rlcf::Token t = 1; t < c.vocab.size(); ++t) {
      rlcf::TokenSeq n = s;
      n.push_back(t);
      if (t == rlcf::Vocab::kEos || n.size() == max_len + 1) {
        out.push_back({n, rlcf::caption_logprob(c, embed, n), t == rlcf::Vocab::kEos});
      } else {
        stack.push_back(std::move(n));
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const rlcf::Beam& a, const rlcf::Beam& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.tokens < b.tokens;
  });
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("rlcf_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Key/values for a benchmark small enough to pretrain in well under a second.
inline rlcf::KeyValues tiny_config(const std::filesystem::path& root) {
  return {{"seed", "5"},
          {"classes", "6"},
          {"attributes", "8"},
          {"attrs_per_class", "2"},
          {"d_in", "16"},
          {"d_tok", "8"},
          {"prompt_len", "2"},
          {"rotation_dims", "8"},
          {"source_per_class", "30"},
          {"heldout_per_class", "10"},
          {"teacher_source_per_class", "40"},
          {"teacher_shift_per_class", "10"},
          {"target_samples", "60"},
          {"gallery_size", "24"},
          {"caption_samples", "10"},
          {"student_d_emb", "8"},
          {"teacher_d_emb", "16"},
          {"student_epochs", "10"},
          {"teacher_epochs", "10"},
          {"captioner_d_hid", "12"},
          {"captioner_max_len", "3"},
          {"captioner_epochs", "10"},
          {"n_views", "16"},
          {"rho", "0.25"},
          {"lr", "1e-2"},
          {"work_dir", (root / "work").string()},
          {"out_dir", (root / "out").string()}};
}

/// Pretrained tiny assets (benchmark, student, teacher, captioner), built once
/// per test binary.
inline const rlcf::Assets& tiny_assets() {
  static const rlcf::Assets assets = [] {
    const auto cfg = rlcf::build_config(tiny_config(scratch_dir("tiny_assets")));
    return rlcf::prepare_assets(cfg, nullptr, true);
  }();
  return assets;
}

}  // namespace testing
