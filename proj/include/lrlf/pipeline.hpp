#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lrlf/common.hpp"
#include "lrlf/corpus.hpp"
#include "lrlf/decode.hpp"
#include "lrlf/model.hpp"
#include "lrlf/noising.hpp"
#include "lrlf/subword.hpp"

namespace lrlf {

enum class StageKind { Cpt, Ft, MftSweep };
enum class FtMode { Bilingual, O2M, M2O, M2M };
enum class CptCase { A_i, A_ii, B, C1, C2_phase1, C2_phase2 };

const char* ft_mode_name(FtMode m);
const char* cpt_case_name(CptCase c);
std::optional<CptCase> parse_cpt_case(const std::string& s);

struct Direction {
  LangCode src, tgt;
  std::string str() const { return src + "-" + tgt; }
  bool operator==(const Direction& o) const { return src == o.src && tgt == o.tgt; }
};

// O2M = pivot→ℓ, M2O = ℓ→pivot, M2M = both, ℓ over languages minus pivot.
std::vector<Direction> expand_mft_directions(FtMode mode, const LangCode& pivot,
                                             const std::vector<LangCode>& languages);

struct CptSelector {
  CptCase cpt_case = CptCase::A_i;
  std::vector<LangCode> languages;  // 2 = biCPT, 3 = triCPT
};

struct FtSelector {
  FtMode mode = FtMode::Bilingual;
  DomainTag domain = DomainTag::InDomain;  // Mixed = up-sampled in+out
  std::vector<Direction> directions;
  LangCode pivot;  // multilingual modes only
};

struct StageSpec {
  std::string name;  // directory-friendly, e.g. "ft-out"
  StageKind kind = StageKind::Ft;
  CptSelector cpt;
  FtSelector ft;                   // for MftSweep: pivot + in-domain; modes implied
  TrainConfig tcfg;
};

struct PipelineRecipe {
  std::string name;
  std::vector<StageSpec> stages;
};

// Everything a preset needs besides the manifest.
struct RecipeOptions {
  Direction target;                      // final B-FT / evaluation direction
  LangCode pivot;                        // defaults to target.src
  std::vector<LangCode> cpt_languages;   // defaults: bi = target pair, tri = all
  CptCase cpt_case = CptCase::A_i;
  double scale = 0.01;                   // desk schedule scale
  std::optional<TrainConfig> tcfg;       // overrides the scaled desk config
  std::uint64_t seed = 1;
};

const std::vector<std::string>& recipe_preset_names();
PipelineRecipe expand_recipe(const std::string& name, const RecipeOptions& opts,
                             const CorpusManifest& manifest);
std::string recipe_to_json(const PipelineRecipe& recipe);  // golden-expansion form

// Per-language denoising text selection for a CPT stage.
std::vector<MonoDataset> build_cpt_data(const CorpusManifest& manifest,
                                        CptCase cpt_case,
                                        const std::vector<LangCode>& languages);

ScoredCheckpoint select_final(const std::vector<ScoredCheckpoint>& ckpts);

struct StageRunInfo {
  std::string name;
  std::string dir;                  // relative to the run directory
  std::string selected_checkpoint;  // relative to the run directory
  std::int64_t selected_update = 0;
  double selected_valid_nll = 0;
  std::optional<double> selected_valid_bleu;
  std::string chosen_mode;  // MftSweep stages: winning mode name
};

struct RunRecord {
  std::string recipe;
  std::string pivot;
  std::uint64_t seed = 0;
  std::vector<StageRunInfo> stages;
  std::map<std::string, double> valid_bleu;  // evaluated directions
  std::map<std::string, double> test_bleu;
  std::string final_checkpoint;  // relative to the run directory
};

std::string run_record_to_json(const RunRecord& r);
RunRecord run_record_from_json(const std::string& text);
RunRecord load_run_record(const std::string& path);

struct RunOptions {
  std::uint64_t seed = 1;
  int eval_beam = 5;           // test-set decoding
  int valid_beam = 1;          // per-checkpoint validation BLEU (greedy)
  int max_output_len = 64;
  std::size_t valid_bleu_sentences = 16;  // validation decode budget
  std::size_t valid_nll_examples = 64;
  int stop_after = 0;          // >0: run only that many stages (resume later)
  NoiseConfig noise;           // CPT corruption parameters
  std::string init_checkpoint; // non-empty: stage 0 starts here, not fresh
};

// Executes the recipe's stages in order under run_dir, chaining each stage
// from the previous stage's selected checkpoint. Completed stages are skipped
// on re-run (stage.json markers), giving stage-granular resumability.
RunRecord run_recipe(const PipelineRecipe& recipe, const CorpusManifest& manifest,
                     const ModelConfig& mcfg, const Vocab& vocab,
                     const std::string& run_dir, const RunOptions& opts);

// Parallel data → training examples (LID conventions applied).
std::vector<Example> make_parallel_examples(const ParallelDataset& data,
                                            const Vocab& v, int max_len);

}  // namespace lrlf
