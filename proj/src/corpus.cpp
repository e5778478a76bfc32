#include "lrlf/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lrlf/utf8.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace lrlf {

bool valid_lang_code(const LangCode& code) {
  if (code.empty()) return false;
  for (char c : code) {
    if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'))) return false;
  }
  return true;
}

const char* domain_name(DomainTag d) {
  switch (d) {
    case DomainTag::InDomain: return "in";
    case DomainTag::OutDomain: return "out";
    case DomainTag::Mixed: return "mixed";
  }
  return "?";
}

std::optional<DomainTag> parse_domain(const std::string& s) {
  if (s == "in") return DomainTag::InDomain;
  if (s == "out") return DomainTag::OutDomain;
  if (s == "mixed") return DomainTag::Mixed;
  return std::nullopt;
}

const char* split_name(SplitRole r) {
  switch (r) {
    case SplitRole::Train: return "train";
    case SplitRole::Valid: return "valid";
    case SplitRole::Test: return "test";
  }
  return "?";
}

std::string CorpusManifest::resolve(const std::string& path) const {
  fs::path p(path);
  if (p.is_absolute() || base_dir.empty()) return path;
  return (fs::path(base_dir) / p).string();
}

bool CorpusManifest::needs_zwj_repair(const LangCode& lang) const {
  return std::find(zwj_repair_langs.begin(), zwj_repair_langs.end(), lang) !=
         zwj_repair_langs.end();
}

namespace {

// Codepoint classes treated as non-letters: anything in these ranges cannot
// rescue a line from the letterless rule.
bool non_letter_codepoint(std::uint32_t cp) {
  if (cp <= 0x40) return true;                     // controls, space, digits, ASCII punct
  if (cp >= 0x5B && cp <= 0x60) return true;       // [\]^_`
  if (cp >= 0x7B && cp <= 0xBF) return true;       // {|}~, latin-1 punct/symbols
  if (cp == 0xD7 || cp == 0xF7) return true;       // multiplication/division signs
  if (cp >= 0x2000 && cp <= 0x206F) return true;   // general punctuation (incl. ZWJ)
  if (cp >= 0x20A0 && cp <= 0x20CF) return true;   // currency symbols
  if (cp >= 0x2100 && cp <= 0x2BFF) return true;   // arrows, math, misc symbols
  if (cp >= 0x3000 && cp <= 0x303F) return true;   // CJK punctuation
  if (cp >= 0xFE30 && cp <= 0xFE6F) return true;   // compat punctuation forms
  if (cp >= 0xFF01 && cp <= 0xFF20) return true;   // fullwidth digits/punct
  return false;
}

bool has_letter(const std::vector<std::uint32_t>& cps) {
  for (std::uint32_t cp : cps) {
    if (!non_letter_codepoint(cp)) return true;
  }
  return false;
}

}  // namespace

std::vector<std::string> clean(const std::vector<std::string>& lines,
                               const CleanRules& rules) {
  std::vector<std::regex> patterns;
  patterns.reserve(rules.drop_patterns.size());
  for (const std::string& p : rules.drop_patterns) {
    try {
      patterns.emplace_back(p, std::regex::ECMAScript);
    } catch (const std::regex_error& e) {
      throw config_error("bad clean pattern '" + p + "': " + e.what());
    }
  }

  std::vector<std::string> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    std::vector<std::uint32_t> cps;
    std::size_t bad = 0;
    if (!utf8_decode(line, cps, &bad)) {
      throw data_error("invalid UTF-8 at line " + std::to_string(i + 1) +
                       ", byte offset " + std::to_string(bad));
    }
    if (rules.drop_letterless && !has_letter(cps)) continue;
    bool dropped = false;
    for (const std::regex& re : patterns) {
      if (std::regex_match(line, re)) {
        dropped = true;
        break;
      }
    }
    if (!dropped) out.push_back(line);
  }
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

namespace {

std::string field(const std::string& section, std::size_t idx, const char* name) {
  std::ostringstream os;
  os << section << "[" << idx << "]." << name;
  return os.str();
}

DomainTag require_domain(const json& j, const std::string& where) {
  if (!j.is_string())
    throw manifest_error("field " + where + " must be a string (\"in\"|\"out\"|\"mixed\")");
  auto d = parse_domain(j.get<std::string>());
  if (!d) throw manifest_error("field " + where + ": unknown domain '" + j.get<std::string>() + "'");
  if (*d == DomainTag::Mixed)
    throw manifest_error("field " + where + ": raw datasets cannot be declared mixed");
  return *d;
}

std::string require_string(const json& j, const json& obj, const char* key,
                           const std::string& where) {
  if (!obj.contains(key)) throw manifest_error("missing field " + where);
  const json& v = obj.at(key);
  if (!v.is_string()) throw manifest_error("field " + where + " must be a string");
  (void)j;
  return v.get<std::string>();
}

}  // namespace

CorpusManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw manifest_error("cannot open manifest " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw manifest_error(std::string("parse failure: ") + e.what());
  }

  CorpusManifest m;
  m.base_dir = fs::path(path).parent_path().string();

  if (!j.contains("languages") || !j["languages"].is_array() || j["languages"].empty())
    throw manifest_error("missing or empty field languages");
  std::set<std::string> langs;
  for (std::size_t i = 0; i < j["languages"].size(); ++i) {
    const json& v = j["languages"][i];
    if (!v.is_string() || !valid_lang_code(v.get<std::string>()))
      throw manifest_error("field " + field("languages", i, "") +
                           ": language codes are non-empty lowercase ASCII");
    std::string code = v.get<std::string>();
    if (!langs.insert(code).second)
      throw manifest_error("duplicate language '" + code + "'");
    m.languages.push_back(code);
  }

  if (j.contains("zwj_repair")) {
    for (std::size_t i = 0; i < j["zwj_repair"].size(); ++i) {
      std::string code = j["zwj_repair"][i].get<std::string>();
      if (!langs.count(code))
        throw manifest_error("field " + field("zwj_repair", i, "") +
                             ": language '" + code + "' not in languages");
      m.zwj_repair_langs.push_back(code);
    }
  } else if (langs.count("si")) {
    m.zwj_repair_langs.push_back("si");  // Sinhala targets get the fix by default
  }

  if (j.contains("mono")) {
    for (std::size_t i = 0; i < j["mono"].size(); ++i) {
      const json& e = j["mono"][i];
      MonoEntry me;
      me.path = require_string(j, e, "path", field("mono", i, "path"));
      me.lang = require_string(j, e, "lang", field("mono", i, "lang"));
      if (!langs.count(me.lang))
        throw manifest_error("field " + field("mono", i, "lang") + ": language '" +
                             me.lang + "' not in languages");
      if (!e.contains("domain")) throw manifest_error("missing field " + field("mono", i, "domain"));
      me.domain = require_domain(e["domain"], field("mono", i, "domain"));
      std::string full = m.resolve(me.path);
      if (!fs::exists(full))
        throw manifest_error("field " + field("mono", i, "path") + ": no such file " + full);
      me.line_count = read_lines(full).size();
      m.mono.push_back(std::move(me));
    }
  }

  if (j.contains("parallel")) {
    for (std::size_t i = 0; i < j["parallel"].size(); ++i) {
      const json& e = j["parallel"][i];
      ParallelEntry pe;
      pe.src_path = require_string(j, e, "src_path", field("parallel", i, "src_path"));
      pe.tgt_path = require_string(j, e, "tgt_path", field("parallel", i, "tgt_path"));
      pe.src_lang = require_string(j, e, "src_lang", field("parallel", i, "src_lang"));
      pe.tgt_lang = require_string(j, e, "tgt_lang", field("parallel", i, "tgt_lang"));
      if (!langs.count(pe.src_lang))
        throw manifest_error("field " + field("parallel", i, "src_lang") + ": language '" +
                             pe.src_lang + "' not in languages");
      if (!langs.count(pe.tgt_lang))
        throw manifest_error("field " + field("parallel", i, "tgt_lang") + ": language '" +
                             pe.tgt_lang + "' not in languages");
      if (pe.src_lang == pe.tgt_lang)
        throw manifest_error("field " + field("parallel", i, "tgt_lang") +
                             ": src_lang and tgt_lang must differ");
      if (!e.contains("domain")) throw manifest_error("missing field " + field("parallel", i, "domain"));
      pe.domain = require_domain(e["domain"], field("parallel", i, "domain"));
      std::string split = require_string(j, e, "split", field("parallel", i, "split"));
      if (split == "train") pe.split = SplitRole::Train;
      else if (split == "valid") pe.split = SplitRole::Valid;
      else if (split == "test") pe.split = SplitRole::Test;
      else throw manifest_error("field " + field("parallel", i, "split") +
                                ": expected train|valid|test, got '" + split + "'");
      std::string sfull = m.resolve(pe.src_path), tfull = m.resolve(pe.tgt_path);
      if (!fs::exists(sfull))
        throw manifest_error("field " + field("parallel", i, "src_path") + ": no such file " + sfull);
      if (!fs::exists(tfull))
        throw manifest_error("field " + field("parallel", i, "tgt_path") + ": no such file " + tfull);
      std::size_t ns = read_lines(sfull).size(), nt = read_lines(tfull).size();
      if (ns != nt)
        throw manifest_error("field " + field("parallel", i, "src_path") + ": line count " +
                             std::to_string(ns) + " != tgt line count " + std::to_string(nt));
      pe.pair_count = ns;
      m.parallel.push_back(std::move(pe));
    }
  }

  // Exactly one valid and one test split per evaluated direction (a direction
  // is evaluated if it has any valid or test entry).
  std::set<std::pair<std::string, std::string>> seen_valid, seen_test;
  for (std::size_t i = 0; i < m.parallel.size(); ++i) {
    const ParallelEntry& pe = m.parallel[i];
    auto key = std::make_pair(pe.src_lang, pe.tgt_lang);
    if (pe.split == SplitRole::Valid && !seen_valid.insert(key).second)
      throw manifest_error("field " + field("parallel", i, "split") +
                           ": duplicate valid split for " + pe.src_lang + "-" + pe.tgt_lang);
    if (pe.split == SplitRole::Test && !seen_test.insert(key).second)
      throw manifest_error("field " + field("parallel", i, "split") +
                           ": duplicate test split for " + pe.src_lang + "-" + pe.tgt_lang);
  }
  return m;
}

MonoDataset load_mono(const CorpusManifest& m, const MonoEntry& e) {
  MonoDataset d;
  d.lang = e.lang;
  d.domain = e.domain;
  d.lines = clean(read_lines(m.resolve(e.path)));
  return d;
}

ParallelDataset load_parallel(const CorpusManifest& m, const ParallelEntry& e) {
  ParallelDataset d;
  d.src_lang = e.src_lang;
  d.tgt_lang = e.tgt_lang;
  d.domain = e.domain;
  std::vector<std::string> src = read_lines(m.resolve(e.src_path));
  std::vector<std::string> tgt = read_lines(m.resolve(e.tgt_path));
  if (src.size() != tgt.size())
    throw data_error("parallel files out of sync: " + e.src_path);
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty() || tgt[i].empty()) continue;  // drop pairs with an empty side
    d.pairs.push_back({src[i], tgt[i]});
  }
  if (d.pairs.empty()) throw data_error("parallel dataset " + e.src_path + " is empty");
  return d;
}

ParallelDataset upsample_mix(const ParallelDataset& in_domain,
                             const ParallelDataset& out_domain,
                             std::uint64_t seed) {
  if (in_domain.src_lang != out_domain.src_lang ||
      in_domain.tgt_lang != out_domain.tgt_lang)
    throw data_error("upsample_mix: language pair mismatch (" + in_domain.src_lang +
                     "-" + in_domain.tgt_lang + " vs " + out_domain.src_lang + "-" +
                     out_domain.tgt_lang + ")");
  if (in_domain.pairs.empty()) throw data_error("upsample_mix: empty in-domain data");
  const std::size_t n_in = in_domain.pairs.size();
  const std::size_t n_out = out_domain.pairs.size();
  if (n_out < n_in)
    throw data_error("upsample_mix: out-domain smaller than in-domain");

  Rng rng(seed);
  ParallelDataset mixed;
  mixed.src_lang = in_domain.src_lang;
  mixed.tgt_lang = in_domain.tgt_lang;
  mixed.domain = DomainTag::Mixed;
  mixed.pairs.reserve(2 * n_out);

  const std::size_t copies = n_out / n_in;
  for (std::size_t c = 0; c < copies; ++c)
    for (const SentencePair& p : in_domain.pairs) mixed.pairs.push_back(p);
  const std::size_t remainder = n_out - copies * n_in;
  for (std::size_t idx : rng.sample_without_replacement(n_in, remainder))
    mixed.pairs.push_back(in_domain.pairs[idx]);
  for (const SentencePair& p : out_domain.pairs) mixed.pairs.push_back(p);

  rng.shuffle(mixed.pairs);
  return mixed;
}

std::vector<double> temperature_weights(const std::vector<std::size_t>& sizes,
                                        const SamplingConfig& cfg) {
  if (sizes.empty()) throw data_error("temperature_weights: empty sizes");
  if (cfg.temperature <= 0) throw config_error("temperature must be positive");
  double total = 0;
  for (std::size_t s : sizes) {
    if (s == 0) throw data_error("temperature_weights: zero-sized dataset");
    total += static_cast<double>(s);
  }
  std::vector<double> w(sizes.size());
  double norm = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    double p = static_cast<double>(sizes[i]) / total;
    w[i] = std::pow(p, 1.0 / cfg.temperature);
    norm += w[i];
  }
  for (double& x : w) x /= norm;
  return w;
}

std::size_t sample_batch_language(const std::vector<double>& weights, Rng& rng) {
  if (weights.empty()) throw data_error("sample_batch_language: empty weights");
  double sum = 0;
  for (double w : weights) sum += w;
  if (std::abs(sum - 1.0) > 1e-6)
    throw data_error("sample_batch_language: weights do not sum to 1");
  double u = rng.uniform();
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  return weights.size() - 1;
}

}  // namespace lrlf
