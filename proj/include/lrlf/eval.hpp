#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "lrlf/common.hpp"
#include "lrlf/model.hpp"

namespace lrlf {

struct BleuReport {
  double bleu = 0;                      // [0, 100]
  std::array<double, 4> precisions{};   // p1..p4
  double brevity_penalty = 1;
  std::size_t hyp_tokens = 0;
  std::size_t ref_tokens = 0;
};

// Corpus-level BLEU with clipped modified n-gram precisions (n = 1..4) and
// brevity penalty exp(1 - r/c) for c <= r. Any zero precision zeroes the
// score (no smoothing). Single reference per hypothesis.
BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                       const std::vector<std::vector<std::string>>& refs);
BleuReport corpus_bleu_ids(const std::vector<TokenSeq>& hyps,
                           const std::vector<TokenSeq>& refs);

std::vector<std::string> tokenize_line(const std::string& line,
                                       bool lowercase = false);
std::string format_bleu(const BleuReport& r);

// Mean NLL per non-pad label token, dropout-free, no smoothing.
double validation_likelihood(const Transformer<float>& model,
                             const std::vector<Example>& valid);

// One run's scores as the table renderer sees them.
struct RunSummary {
  std::string name;
  std::string pivot;                            // "-" when not applicable
  std::map<std::string, double> direction_bleu;  // "si-en" -> test BLEU
};

struct ResultTable {
  std::vector<std::string> directions;  // column order
  std::string text;                     // aligned plain-text grid
  std::string structured;               // machine-readable JSON
};

// Renders the score grid with per-direction deltas against the baseline,
// N/A for directions a run does not cover, and a top-3-improved ranking.
ResultTable emit_table(const std::vector<RunSummary>& records,
                       const RunSummary& baseline);

}  // namespace lrlf
