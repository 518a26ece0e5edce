#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlcf/autodiff.hpp"
#include "rlcf/checkpoint.hpp"
#include "rlcf/param_tree.hpp"
#include "rlcf/rng.hpp"

namespace rlcf {

using Token = std::size_t;
using TokenSeq = std::vector<Token>;

/// Caption vocabulary. Id 0 is BOS and id 1 is EOS; every other id maps to
/// the word "w<id>".
class Vocab {
 public:
  static constexpr Token kBos = 0;
  static constexpr Token kEos = 1;

  explicit Vocab(std::size_t size);

  std::size_t size() const { return size_; }
  /// Number of tokens the decoder can emit (everything except BOS).
  std::size_t emit_size() const { return size_ - 1; }
  const std::string& word(Token id) const;
  Token id_of(std::string_view word) const;
  bool contains(Token id) const { return id < size_; }

 private:
  std::size_t size_;
  std::vector<std::string> words_;
};

/// Words of the body (BOS/EOS stripped), space separated.
std::string decode_to_text(std::span<const Token> tokens, const Vocab& vocab);
/// Inverse of decode_to_text: wraps the words in BOS ... EOS.
TokenSeq encode_text(std::string_view text, const Vocab& vocab);

namespace block {
inline constexpr std::string_view kProjector = "projector";
inline constexpr std::string_view kDecEmbed = "dec_embed";
inline constexpr std::string_view kDecRecur = "dec_recur";
inline constexpr std::string_view kDecOut = "dec_out";
inline constexpr std::string_view kDecBias = "dec_bias";
}  // namespace block

/// Projector plus a single-layer recurrent decoder.
///
///   z   = image_embed · projector
///   s₀  = tanh(z + E[BOS])
///   P(y_t | y_<t) = softmax(s_{t−1} · O + bias)       over ids 1..V−1
///   s_t = tanh(s_{t−1} · R + E[y_t] + z)
struct ToyCaptioner {
  ParamTree params;
  Vocab vocab{2};
  std::size_t max_len = 2;

  static ToyCaptioner create(std::size_t d_emb, std::size_t d_hid, std::size_t vocab_size,
                             std::size_t max_len, Rng& rng);

  std::size_t d_emb() const { return params.get(block::kProjector).rows(); }
  std::size_t d_hid() const { return params.get(block::kProjector).cols(); }
  void freeze_decoder();
};

/// Σ_t log P(y_t | y_<t, image). `tokens` starts with BOS and ends with EOS
/// (or is truncated at max_len). Throws Error for out-of-vocab ids.
double caption_logprob(const ToyCaptioner& c, std::span<const double> image_embed,
                       std::span<const Token> tokens);

/// Per-sequence log-probabilities (1×B) recorded on the tape. `image_embeds`
/// holds one row per sequence, or a single row shared by all of them.
ad::Var sequence_logprobs(ad::Tape& tape, const ad::Bindings& b, const Tensor2& image_embeds,
                          std::span<const TokenSeq> sequences);

struct Beam {
  TokenSeq tokens;  // BOS ... EOS, or truncated at max_len
  double logprob = 0.0;
  bool finished = false;  // ended with EOS
};

/// Beam search on raw summed log-probabilities. Returns at most `width`
/// sequences sorted by logprob desc, ties broken by token order.
std::vector<Beam> beam_search(const ToyCaptioner& c, std::span<const double> image_embed,
                              std::size_t width, std::size_t max_len);

struct CaptionerConfig {
  std::size_t d_hid = 32;
  std::size_t max_len = 5;
  std::size_t epochs = 30;
  std::size_t batch = 32;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

/// Maximum-likelihood training of every block on (embedding, caption)
/// pairs; the decoder is frozen afterwards and values rounded to f32.
ToyCaptioner train_captioner(const CaptionerConfig& cfg, std::size_t vocab_size,
                             const Tensor2& image_embeds, std::span<const TokenSeq> captions,
                             std::vector<double>* epoch_loss = nullptr);

Checkpoint to_checkpoint(const ToyCaptioner& c);
ToyCaptioner captioner_from_checkpoint(const Checkpoint& ckpt);

}  // namespace rlcf
