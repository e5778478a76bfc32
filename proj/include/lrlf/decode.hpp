#pragma once

#include <string>
#include <vector>

#include "lrlf/common.hpp"
#include "lrlf/model.hpp"
#include "lrlf/subword.hpp"

namespace lrlf {

struct DecodeConfig {
  int beam_size = 5;
  int max_output_len = 128;
  double length_penalty = 0;      // α; 0 disables the penalty
  LangCode target_lang;           // resolved to the LID token via the vocab
  bool average_logprobs = false;  // geometric-mean alternative, off by default

  void validate() const;
};

enum class EnsembleSource { SingleRunCheckpoints, MultiModel };

struct EnsembleSpec {
  std::vector<ModelCheckpoint> members;  // 1..3, same shape and vocab
  EnsembleSource source = EnsembleSource::MultiModel;

  void validate() const;
};

std::vector<Transformer<float>> build_members(const EnsembleSpec& spec);

struct Hypothesis {
  TokenSeq tokens;    // generated ids, no leading LID, no trailing EOS
  double score = 0;   // cumulative log probability (includes EOS when finished)
  bool finished = false;
};

// Feed one token to every member and return the arithmetic mean of their
// next-token distributions (renormalized). All members' states advance.
std::vector<double> ensemble_step(const std::vector<Transformer<float>>& members,
                                  std::vector<DecodeState<float>>& states,
                                  TokenId token, bool average_logprobs = false);

struct BeamResult {
  TokenSeq tokens;       // generated ids, no LID/EOS
  double score = 0;      // length-penalized when α > 0
  bool finished = false; // false → no hypothesis reached EOS (warning)
};

// Standard beam search over the ensemble distribution. Finished hypotheses
// accumulate aside while the live beam keeps the best `beam_size` unfinished
// ones; ties break toward the lexicographically smaller token sequence.
BeamResult beam_search(const std::vector<Transformer<float>>& members,
                       const DecodeConfig& cfg, const Vocab& v,
                       const TokenSeq& encoder_input);

struct ScoredCheckpoint {
  std::string path;
  CheckpointMeta meta;
};

// Top-k (k = 2 or 3) checkpoints by validation BLEU; ties toward the later
// update count.
EnsembleSpec select_ensemble_checkpoints(const std::vector<ScoredCheckpoint>& ckpts,
                                         int k);

struct TranslateSummary {
  std::size_t lines = 0;
  std::size_t failures = 0;               // lines that fell back to empty output
  std::vector<std::string> warnings;      // per-line diagnostics
};

// Line-aligned file translation; zwj repair applied to each output line when
// requested. Per-line failures are recorded, not fatal.
TranslateSummary translate_file(const std::vector<Transformer<float>>& members,
                                const DecodeConfig& cfg, const Vocab& v,
                                const LangCode& src_lang,
                                const std::string& src_path,
                                const std::string& out_path, bool repair_zwj);

// Decode one sentence string to a target string (encode + beam + strip
// specials + detokenize).
std::string translate_line(const std::vector<Transformer<float>>& members,
                           const DecodeConfig& cfg, const Vocab& v,
                           const LangCode& src_lang, const std::string& line);

}  // namespace lrlf
