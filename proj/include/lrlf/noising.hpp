#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lrlf/common.hpp"
#include "lrlf/corpus.hpp"
#include "lrlf/rng.hpp"
#include "lrlf/subword.hpp"

namespace lrlf {

struct NoiseConfig {
  double mask_ratio = 0.30;        // fraction of tokens to cover with spans
  double random_token_prob = 0.1;  // chance a MASK emission becomes a random token
  double poisson_lambda = 3.5;     // mean span length
  bool permute_sentences = true;
  std::uint64_t seed = 0;

  void validate() const;
};

// One denoising supervision pair: encoder sees the corrupted text plus a
// trailing LID; decoder_input is LID + original tokens, labels are the
// original tokens + EOS.
using NoisedExample = Example;

struct SpanMaskStats {
  std::vector<int> span_lengths;  // every Poisson draw, including zeros
  std::size_t covered = 0;        // distinct input positions covered
};

// Replace Poisson-length spans with single MASK tokens until at least
// mask_ratio * |tokens| positions are covered. Zero-length draws insert a
// MASK at a random gap without consuming input. Each MASK emission turns
// into a uniformly random non-special token with probability
// random_token_prob.
TokenSeq span_mask(const TokenSeq& tokens, const NoiseConfig& cfg,
                   const Vocab& v, Rng& rng, SpanMaskStats* stats = nullptr);

std::vector<TokenSeq> permute_sentences(std::vector<TokenSeq> sentences,
                                        Rng& rng);

NoisedExample make_denoising_example(const std::vector<TokenSeq>& sentences,
                                     const LangCode& lang, const Vocab& v,
                                     const NoiseConfig& cfg, Rng& rng);
NoisedExample make_denoising_example(const std::vector<std::string>& sentences,
                                     const LangCode& lang, const Vocab& v,
                                     const NoiseConfig& cfg, Rng& rng);

// Pack consecutive sentences into multi-sentence instances of at most
// `budget` tokens; a lone sentence longer than the budget is truncated.
std::vector<std::vector<TokenSeq>> pack_instances(
    const std::vector<std::string>& lines, const Vocab& v,
    std::size_t budget = 128);

}  // namespace lrlf
