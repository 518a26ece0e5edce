#include "rlcf/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rlcf/adapt.hpp"

namespace rlcf {

Vocab::Vocab(std::size_t size) : size_(size) {
  if (size < 2) throw Error("vocab must contain BOS and EOS");
  words_.reserve(size);
  words_.push_back("<bos>");
  words_.push_back("<eos>");
  for (std::size_t i = 2; i < size; ++i) words_.push_back("w" + std::to_string(i));
}

const std::string& Vocab::word(Token id) const {
  if (id >= size_) throw Error("unknown token id " + std::to_string(id));
  return words_[id];
}

Token Vocab::id_of(std::string_view word) const {
  for (Token i = 2; i < size_; ++i)
    if (words_[i] == word) return i;
  throw Error("unknown word '" + std::string(word) + "'");
}

std::string decode_to_text(std::span<const Token> tokens, const Vocab& vocab) {
  std::string out;
  for (Token t : tokens) {
    if (!vocab.contains(t)) throw Error("unknown token id " + std::to_string(t));
    if (t == Vocab::kBos || t == Vocab::kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.word(t);
  }
  return out;
}

TokenSeq encode_text(std::string_view text, const Vocab& vocab) {
  TokenSeq out{Vocab::kBos};
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(vocab.id_of(w));
  out.push_back(Vocab::kEos);
  return out;
}

namespace {

Tensor2 gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor2 t(rows, cols);
  for (double& x : t.values()) x = rng.normal(0.0, stddev);
  return t;
}

/// Plain forward pass of the decoder, used by beam search and the
/// non-differentiable log-probability.
class PlainDecoder {
 public:
  PlainDecoder(const ToyCaptioner& c, std::span<const double> image_embed)
      : c_(c),
        embed_(c.params.get(block::kDecEmbed)),
        recur_(c.params.get(block::kDecRecur)),
        out_(c.params.get(block::kDecOut)),
        bias_(c.params.get(block::kDecBias)) {
    if (image_embed.size() != c.d_emb()) throw Error("captioner: image embedding width mismatch");
    z_ = matmul(Tensor2::row_vector(image_embed), c.params.get(block::kProjector)).data();
  }

  std::vector<double> initial_state() const {
    std::vector<double> s(z_.size());
    auto e = embed_.row(Vocab::kBos);
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = std::tanh(z_[j] + e[j]);
    return s;
  }

  /// Log-probabilities over emit ids (index i ↔ token i+1).
  std::vector<double> next_logprobs(const std::vector<double>& s) const {
    std::vector<double> logits(bias_.data());
    for (std::size_t k = 0; k < s.size(); ++k) {
      auto o = out_.row(k);
      for (std::size_t j = 0; j < logits.size(); ++j) logits[j] += s[k] * o[j];
    }
    return log_softmax(logits);
  }

  std::vector<double> advance(const std::vector<double>& s, Token y) const {
    std::vector<double> next(z_);
    auto e = embed_.row(y);
    for (std::size_t j = 0; j < next.size(); ++j) next[j] += e[j];
    for (std::size_t k = 0; k < s.size(); ++k) {
      auto r = recur_.row(k);
      for (std::size_t j = 0; j < next.size(); ++j) next[j] += s[k] * r[j];
    }
    for (double& x : next) x = std::tanh(x);
    return next;
  }

 private:
  const ToyCaptioner& c_;
  const Tensor2& embed_;
  const Tensor2& recur_;
  const Tensor2& out_;
  const Tensor2& bias_;
  std::vector<double> z_;
};

void validate_sequence(std::span<const Token> tokens, const Vocab& vocab) {
  if (tokens.size() < 2 || tokens[0] != Vocab::kBos) {
    throw Error("caption must start with BOS and contain at least one generated token");
  }
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    if (!vocab.contains(tokens[t])) throw Error("token id " + std::to_string(tokens[t]) + " out of vocab");
    if (tokens[t] == Vocab::kBos) throw Error("BOS inside caption body");
    if (tokens[t] == Vocab::kEos && t + 1 != tokens.size()) throw Error("EOS before end of caption");
  }
}

}  // namespace

ToyCaptioner ToyCaptioner::create(std::size_t d_emb, std::size_t d_hid, std::size_t vocab_size,
                                  std::size_t max_len, Rng& rng) {
  if (max_len < 2) throw Error("captioner max_len must be at least 2");
  ToyCaptioner c;
  c.vocab = Vocab(vocab_size);
  c.max_len = max_len;
  const double hs = 1.0 / std::sqrt(static_cast<double>(d_hid));
  c.params.add(std::string(block::kProjector), gaussian(d_emb, d_hid, 1.0, rng));
  c.params.add(std::string(block::kDecEmbed), gaussian(vocab_size, d_hid, 0.5, rng));
  c.params.add(std::string(block::kDecRecur), gaussian(d_hid, d_hid, hs, rng));
  c.params.add(std::string(block::kDecOut), gaussian(d_hid, vocab_size - 1, hs, rng));
  c.params.add(std::string(block::kDecBias), Tensor2(1, vocab_size - 1));
  return c;
}

void ToyCaptioner::freeze_decoder() { params.train_only({block::kProjector}); }

double caption_logprob(const ToyCaptioner& c, std::span<const double> image_embed,
                       std::span<const Token> tokens) {
  validate_sequence(tokens, c.vocab);
  const PlainDecoder dec(c, image_embed);
  std::vector<double> s = dec.initial_state();
  double total = 0.0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    total += dec.next_logprobs(s)[tokens[t] - 1];
    if (t + 1 < tokens.size()) s = dec.advance(s, tokens[t]);
  }
  return total;
}

ad::Var sequence_logprobs(ad::Tape& tape, const ad::Bindings& b, const Tensor2& image_embeds,
                          std::span<const TokenSeq> sequences) {
  const std::size_t n = sequences.size();
  if (n == 0) throw Error("sequence_logprobs: no sequences");
  const Tensor2& embed_table = b[block::kDecEmbed].value();
  const Vocab vocab(embed_table.rows());
  std::size_t longest = 0;
  for (const auto& seq : sequences) {
    validate_sequence(seq, vocab);
    longest = std::max(longest, seq.size());
  }

  Tensor2 embeds;
  if (image_embeds.rows() == n) {
    embeds = image_embeds;
  } else if (image_embeds.rows() == 1) {
    embeds = Tensor2(n, image_embeds.cols());
    for (std::size_t i = 0; i < n; ++i)
      std::copy(image_embeds.row(0).begin(), image_embeds.row(0).end(), embeds.row(i).begin());
  } else {
    throw Error("sequence_logprobs: need one image embedding per sequence or a shared one");
  }

  ad::Var z = ad::matmul(tape.constant(embeds), b[block::kProjector]);
  const std::vector<std::size_t> bos(n, Vocab::kBos);
  ad::Var s = ad::tanh(ad::add(z, ad::select_rows(b[block::kDecEmbed], bos)));
  std::vector<std::size_t> all_rows(n);
  std::iota(all_rows.begin(), all_rows.end(), std::size_t{0});

  ad::Var total;
  for (std::size_t t = 1; t < longest; ++t) {
    ad::Var logp = ad::log_softmax_rows(
        ad::add_row(ad::matmul(s, b[block::kDecOut]), b[block::kDecBias]));
    std::vector<std::size_t> cols(n, 0);
    Tensor2 mask(1, n);
    for (std::size_t i = 0; i < n; ++i) {
      if (t < sequences[i].size()) {
        cols[i] = sequences[i][t] - 1;
        mask[i] = 1.0;
      }
    }
    ad::Var step = ad::mul(ad::gather(logp, all_rows, cols), tape.constant(mask));
    total = total.valid() ? ad::add(total, step) : step;
    if (t + 1 < longest) {
      std::vector<std::size_t> next(n, Vocab::kEos);
      for (std::size_t i = 0; i < n; ++i)
        if (t < sequences[i].size()) next[i] = sequences[i][t];
      ad::Var pre = ad::add(ad::matmul(s, b[block::kDecRecur]), ad::select_rows(b[block::kDecEmbed], next));
      s = ad::tanh(ad::add(pre, z));
    }
  }
  return total;
}

std::vector<Beam> beam_search(const ToyCaptioner& c, std::span<const double> image_embed,
                              std::size_t width, std::size_t max_len) {
  if (width < 1) throw Error("beam_search: width must be at least 1");
  if (max_len < 1) throw Error("beam_search: max_len must be at least 1");
  const PlainDecoder dec(c, image_embed);

  struct Hyp {
    Beam beam;
    std::vector<double> state;
    bool done = false;  // finished or truncated
  };
  auto better = [](const Hyp& a, const Hyp& b) {
    if (a.beam.logprob != b.beam.logprob) return a.beam.logprob > b.beam.logprob;
    return a.beam.tokens < b.beam.tokens;
  };

  std::vector<Hyp> beams;
  beams.push_back({Beam{{Vocab::kBos}, 0.0, false}, dec.initial_state(), false});
  for (std::size_t step = 1; step <= max_len; ++step) {
    std::vector<Hyp> pool;
    for (const Hyp& h : beams) {
      if (h.done) {
        pool.push_back(h);
        continue;
      }
      const std::vector<double> lp = dec.next_logprobs(h.state);
      for (std::size_t j = 0; j < lp.size(); ++j) {
        Hyp next;
        next.beam.tokens = h.beam.tokens;
        next.beam.tokens.push_back(j + 1);
        next.beam.logprob = h.beam.logprob + lp[j];
        next.beam.finished = j + 1 == Vocab::kEos;
        next.done = next.beam.finished || step == max_len;
        next.state = h.state;  // advanced after pruning
        pool.push_back(std::move(next));
      }
    }
    const std::size_t keep = std::min(width, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), better);
    pool.resize(keep);
    bool all_done = true;
    for (Hyp& h : pool) {
      if (!h.done && h.beam.tokens.size() == step + 1) {
        h.state = dec.advance(h.state, h.beam.tokens.back());
      }
      all_done = all_done && h.done;
    }
    beams = std::move(pool);
    if (all_done) break;
  }
  std::vector<Beam> out;
  out.reserve(beams.size());
  for (auto& h : beams) out.push_back(std::move(h.beam));
  return out;
}

ToyCaptioner train_captioner(const CaptionerConfig& cfg, std::size_t vocab_size,
                             const Tensor2& image_embeds, std::span<const TokenSeq> captions,
                             std::vector<double>* epoch_loss) {
  if (image_embeds.rows() != captions.size() || captions.empty()) {
    throw Error("train_captioner: need one caption per image embedding");
  }
  Rng rng(cfg.seed);
  ToyCaptioner c = ToyCaptioner::create(image_embeds.cols(), cfg.d_hid, vocab_size, cfg.max_len, rng);
  OptimizerState opt(AdamWConfig{.lr = cfg.lr});
  std::vector<std::size_t> order(captions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const std::span<const std::size_t> ids(order.data() + start, end - start);
      const Tensor2 embeds = select_rows(image_embeds, ids);
      std::vector<TokenSeq> seqs;
      for (std::size_t i : ids) seqs.push_back(captions[i]);
      ad::LossFn loss = [&](ad::Tape& tape, const ad::Bindings& b) {
        return ad::scale(ad::sum(sequence_logprobs(tape, b, embeds, seqs)),
                         -1.0 / static_cast<double>(seqs.size()));
      };
      const ad::ValueAndGrad vg = ad::value_and_grad(loss, c.params);
      total += vg.value * static_cast<double>(seqs.size());
      optimizer_step(opt, c.params, vg.grad);
    }
    if (epoch_loss != nullptr) epoch_loss->push_back(total / static_cast<double>(order.size()));
  }
  round_to_f32(c.params);
  c.freeze_decoder();
  return c;
}

Checkpoint to_checkpoint(const ToyCaptioner& c) {
  Checkpoint ckpt;
  ckpt.params = c.params;
  ckpt.meta = {{"kind", "captioner"}, {"vocab_size", c.vocab.size()}, {"max_len", c.max_len}};
  return ckpt;
}

ToyCaptioner captioner_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "captioner") throw Error("checkpoint is not a captioner");
  ToyCaptioner c;
  c.params = ckpt.params;
  c.vocab = Vocab(ckpt.meta.at("vocab_size").get<std::size_t>());
  c.max_len = ckpt.meta.at("max_len").get<std::size_t>();
  for (auto name : {block::kProjector, block::kDecEmbed, block::kDecRecur, block::kDecOut, block::kDecBias}) {
    if (!c.params.contains(name)) throw Error("captioner checkpoint missing block " + std::string(name));
  }
  c.freeze_decoder();
  return c;
}

}  // namespace rlcf
