#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lrlf/common.hpp"
#include "lrlf/rng.hpp"

namespace lrlf {

// Language codes are short lowercase ASCII identifiers ("si", "ta", "en",
// synthetic codes like "srca"). Validated on manifest load.
using LangCode = std::string;

bool valid_lang_code(const LangCode& code);

enum class DomainTag { InDomain, OutDomain, Mixed };

const char* domain_name(DomainTag d);
std::optional<DomainTag> parse_domain(const std::string& s);

struct MonoDataset {
  LangCode lang;
  DomainTag domain = DomainTag::InDomain;
  std::vector<std::string> lines;
};

struct SentencePair {
  std::string src;
  std::string tgt;
};

struct ParallelDataset {
  LangCode src_lang;
  LangCode tgt_lang;
  DomainTag domain = DomainTag::InDomain;
  std::vector<SentencePair> pairs;
};

enum class SplitRole { Train, Valid, Test };

const char* split_name(SplitRole r);

// Descriptor entries mirror the manifest file; datasets are materialized on
// demand with load_mono / load_parallel.
struct MonoEntry {
  std::string path;
  LangCode lang;
  DomainTag domain;
  std::size_t line_count = 0;  // recorded at load time
};

struct ParallelEntry {
  std::string src_path;
  std::string tgt_path;
  LangCode src_lang;
  LangCode tgt_lang;
  DomainTag domain;
  SplitRole split;
  std::size_t pair_count = 0;
};

struct CorpusManifest {
  std::vector<LangCode> languages;
  std::vector<LangCode> zwj_repair_langs;  // targets that get the joiner fix
  std::vector<MonoEntry> mono;
  std::vector<ParallelEntry> parallel;
  std::string base_dir;  // directory of the manifest file; paths resolve against it

  std::string resolve(const std::string& path) const;
  bool needs_zwj_repair(const LangCode& lang) const;
};

// Cleaning drops empty lines and lines with no letter in any script (dates,
// numbers, bare punctuation). The default letterless test is equivalent to
// the regex ^[\s\d[:punct:]\p{P}\p{S}\p{Z}]*$ over codepoints; extra drop
// patterns can be supplied as ECMAScript regexes matched against whole lines.
struct CleanRules {
  bool drop_letterless = true;
  std::vector<std::string> drop_patterns;
};

std::vector<std::string> clean(const std::vector<std::string>& lines,
                               const CleanRules& rules = CleanRules());

CorpusManifest load_manifest(const std::string& path);

std::vector<std::string> read_lines(const std::string& path);
MonoDataset load_mono(const CorpusManifest& m, const MonoEntry& e);
ParallelDataset load_parallel(const CorpusManifest& m, const ParallelEntry& e);

// Replicates the in-domain data to the size of the out-domain data (full
// copies plus a remainder drawn without replacement), concatenates both and
// shuffles. |result| == 2 * |out_domain|.
ParallelDataset upsample_mix(const ParallelDataset& in_domain,
                             const ParallelDataset& out_domain,
                             std::uint64_t seed);

struct SamplingConfig {
  double temperature = 1.5;
};

// q_i = p_i^(1/T) / sum_j p_j^(1/T) with p_i = sizes_i / sum(sizes).
std::vector<double> temperature_weights(const std::vector<std::size_t>& sizes,
                                        const SamplingConfig& cfg);

std::size_t sample_batch_language(const std::vector<double>& weights, Rng& rng);

}  // namespace lrlf
