#include "lrlf/noising.hpp"

#include <algorithm>
#include <cmath>

namespace lrlf {

void NoiseConfig::validate() const {
  if (mask_ratio < 0 || mask_ratio > 1)
    throw config_error("mask_ratio must be in [0,1]");
  if (random_token_prob < 0 || random_token_prob > 1)
    throw config_error("random_token_prob must be in [0,1]");
  if (poisson_lambda <= 0) throw config_error("poisson_lambda must be positive");
}

namespace {

TokenId emit_mask(const NoiseConfig& cfg, const Vocab& v, Rng& rng) {
  if (cfg.random_token_prob > 0 && rng.uniform() < cfg.random_token_prob) {
    std::size_t non_special = v.size() - v.num_specials();
    return static_cast<TokenId>(v.num_specials() +
                                rng.uniform_int(non_special));
  }
  return v.mask_id();
}

}  // namespace

TokenSeq span_mask(const TokenSeq& tokens, const NoiseConfig& cfg,
                   const Vocab& v, Rng& rng, SpanMaskStats* stats) {
  cfg.validate();
  if (tokens.empty()) throw data_error("span_mask: empty token sequence");
  for (TokenId id : tokens)
    if (v.is_special(id))
      throw data_error("span_mask: special token in input");

  const std::size_t n = tokens.size();
  const std::size_t target = static_cast<std::size_t>(
      std::ceil(cfg.mask_ratio * static_cast<double>(n) - 1e-9));

  std::vector<bool> covered(n, false);
  std::vector<std::size_t> inserts(n + 1, 0);  // zero-length MASKs per gap
  std::size_t covered_count = 0;

  while (covered_count < target) {
    std::size_t len = static_cast<std::size_t>(rng.poisson(cfg.poisson_lambda));
    if (stats) stats->span_lengths.push_back(static_cast<int>(len));
    if (len == 0) {
      ++inserts[rng.uniform_int(n + 1)];
      continue;
    }
    if (len > n) len = n;
    std::size_t start = rng.uniform_int(n - len + 1);
    for (std::size_t i = start; i < start + len; ++i) {
      if (!covered[i]) {
        covered[i] = true;
        ++covered_count;
      }
    }
  }
  if (stats) stats->covered = covered_count;

  TokenSeq out;
  out.reserve(n + 4);
  for (std::size_t i = 0; i <= n; ++i) {
    for (std::size_t k = 0; k < inserts[i]; ++k) out.push_back(emit_mask(cfg, v, rng));
    if (i == n) break;
    if (covered[i]) {
      if (i == 0 || !covered[i - 1]) out.push_back(emit_mask(cfg, v, rng));
    } else {
      out.push_back(tokens[i]);
    }
  }
  return out;
}

std::vector<TokenSeq> permute_sentences(std::vector<TokenSeq> sentences,
                                        Rng& rng) {
  if (sentences.empty()) throw data_error("permute_sentences: empty instance");
  rng.shuffle(sentences);
  return sentences;
}

NoisedExample make_denoising_example(const std::vector<TokenSeq>& sentences,
                                     const LangCode& lang, const Vocab& v,
                                     const NoiseConfig& cfg, Rng& rng) {
  cfg.validate();
  if (sentences.empty())
    throw data_error("make_denoising_example: empty instance");

  TokenSeq original;
  for (const TokenSeq& s : sentences)
    original.insert(original.end(), s.begin(), s.end());
  if (original.empty())
    throw data_error("make_denoising_example: instance has no tokens");

  std::vector<TokenSeq> noised_sents = sentences;
  if (cfg.permute_sentences) noised_sents = permute_sentences(std::move(noised_sents), rng);
  TokenSeq corrupted;
  for (const TokenSeq& s : noised_sents)
    corrupted.insert(corrupted.end(), s.begin(), s.end());
  corrupted = span_mask(corrupted, cfg, v, rng);

  const TokenId lid = v.lid_id(lang);
  NoisedExample ex;
  ex.encoder_input = std::move(corrupted);
  ex.encoder_input.push_back(lid);
  ex.decoder_input.reserve(original.size() + 1);
  ex.decoder_input.push_back(lid);
  ex.decoder_input.insert(ex.decoder_input.end(), original.begin(), original.end());
  ex.labels = std::move(original);
  ex.labels.push_back(v.eos_id());
  return ex;
}

NoisedExample make_denoising_example(const std::vector<std::string>& sentences,
                                     const LangCode& lang, const Vocab& v,
                                     const NoiseConfig& cfg, Rng& rng) {
  std::vector<TokenSeq> encoded;
  encoded.reserve(sentences.size());
  for (const std::string& s : sentences) encoded.push_back(v.encode(s));
  return make_denoising_example(encoded, lang, v, cfg, rng);
}

std::vector<std::vector<TokenSeq>> pack_instances(
    const std::vector<std::string>& lines, const Vocab& v,
    std::size_t budget) {
  if (budget == 0) throw config_error("pack_instances: zero budget");
  std::vector<std::vector<TokenSeq>> instances;
  std::vector<TokenSeq> current;
  std::size_t current_len = 0;
  for (const std::string& line : lines) {
    TokenSeq toks = v.encode(line);
    if (toks.empty()) continue;
    if (toks.size() > budget) toks.resize(budget);
    if (!current.empty() && current_len + toks.size() > budget) {
      instances.push_back(std::move(current));
      current.clear();
      current_len = 0;
    }
    current_len += toks.size();
    current.push_back(std::move(toks));
  }
  if (!current.empty()) instances.push_back(std::move(current));
  return instances;
}

}  // namespace lrlf
