#pragma once

#include <string>
#include <vector>

#include "lrlf/common.hpp"
#include "lrlf/rng.hpp"

namespace lrlf {

// Three toy languages over syllabic lexicons:
//   srca  — the source language;
//   copyb — word-for-word lexicon substitution of srca (monotone copy task);
//   revc  — lexicon substitution plus word-order reversal.
// In-domain sentences draw words from [in_lo, in_hi), out-domain from
// [out_lo, out_hi); the overlap makes out→in transfer informative.
struct SynthConfig {
  std::uint64_t seed = 7;
  int lexicon = 48;  // words per language
  int in_lo = 0, in_hi = 32;
  int out_lo = 16, out_hi = 48;
  int min_words = 3, max_words = 7;

  int in_train = 512, in_valid = 16, in_test = 24;
  int out_train = 768;
  int mono_in = 512, mono_out = 768;

  void validate() const;
};

// One language's word list plus the rendering of a source word sequence.
struct SynthLexicon {
  std::vector<std::string> srca, copyb, revc;
};

SynthLexicon make_lexicon(const SynthConfig& cfg);

// Writes corpus files plus manifest.json under dir; returns the manifest path.
std::string write_synthetic_corpus(const std::string& dir, const SynthConfig& cfg);

}  // namespace lrlf
