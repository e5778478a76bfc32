#include "lrlf/synth.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace lrlf {

void SynthConfig::validate() const {
  if (lexicon < 2 || lexicon > 256) throw config_error("lexicon size out of range");
  if (in_lo < 0 || in_lo >= in_hi || in_hi > lexicon)
    throw config_error("bad in-domain lexicon range");
  if (out_lo < 0 || out_lo >= out_hi || out_hi > lexicon)
    throw config_error("bad out-domain lexicon range");
  if (min_words < 1 || min_words > max_words)
    throw config_error("bad sentence length range");
  if (max_words > in_hi - in_lo || max_words > out_hi - out_lo)
    throw config_error("max_words exceeds lexicon range (words are distinct per sentence)");
  if (in_train < 1 || in_valid < 1 || in_test < 1 || out_train < 1 ||
      mono_in < 1 || mono_out < 1)
    throw config_error("synthetic corpus sizes must be positive");
}

namespace {

std::vector<std::string> make_words(const char* consonants, const char* vowels,
                                    int count, Rng& rng) {
  std::vector<std::string> sylls;
  for (const char* c = consonants; *c; ++c)
    for (const char* v = vowels; *v; ++v) sylls.push_back(std::string{*c, *v});
  std::vector<std::size_t> combos(sylls.size() * sylls.size());
  for (std::size_t i = 0; i < combos.size(); ++i) combos[i] = i;
  rng.shuffle(combos);
  if (static_cast<std::size_t>(count) > combos.size())
    throw config_error("lexicon larger than syllable inventory");
  std::vector<std::string> words;
  for (int i = 0; i < count; ++i)
    words.push_back(sylls[combos[i] / sylls.size()] + sylls[combos[i] % sylls.size()]);
  return words;
}

std::string render(const std::vector<int>& idx, const std::vector<std::string>& lex,
                   bool reverse) {
  std::string out;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (k) out += ' ';
    out += lex[idx[reverse ? idx.size() - 1 - k : k]];
  }
  return out;
}

std::vector<int> draw_sentence(int lo, int hi, int min_words, int max_words,
                               Rng& rng) {
  int len = min_words + static_cast<int>(rng.uniform_int(
                            static_cast<std::uint64_t>(max_words - min_words + 1)));
  // Words are distinct within a sentence: repeated words make the reversal
  // grammar ambiguous to score and add nothing to the toy task.
  std::vector<std::size_t> pick = rng.sample_without_replacement(
      static_cast<std::size_t>(hi - lo), static_cast<std::size_t>(len));
  std::vector<int> idx(len);
  for (int k = 0; k < len; ++k) idx[k] = lo + static_cast<int>(pick[k]);
  return idx;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path);
  for (const std::string& l : lines) out << l << '\n';
}

}  // namespace

SynthLexicon make_lexicon(const SynthConfig& cfg) {
  cfg.validate();
  SynthLexicon lex;
  Rng ra(derive_seed(cfg.seed, 0x1EC5, 0));
  Rng rb(derive_seed(cfg.seed, 0x1EC5, 1));
  Rng rc(derive_seed(cfg.seed, 0x1EC5, 2));
  lex.srca = make_words("bdgk", "aeiu", cfg.lexicon, ra);
  lex.copyb = make_words("lmnp", "aeiu", cfg.lexicon, rb);
  lex.revc = make_words("rstf", "aeiu", cfg.lexicon, rc);
  return lex;
}

std::string write_synthetic_corpus(const std::string& dir, const SynthConfig& cfg) {
  cfg.validate();
  SynthLexicon lex = make_lexicon(cfg);
  fs::create_directories(dir);

  // Parallel sentence sets: one source draw per split, rendered in all three
  // languages; dedup on the source rendering so splits never overlap.
  std::set<std::string> seen;
  auto draw_block = [&](int count, int lo, int hi, Rng& rng) {
    std::vector<std::vector<int>> block;
    int guard = 0;
    while (static_cast<int>(block.size()) < count) {
      if (++guard > count * 200)
        throw config_error("synthetic sentence space too small for requested sizes");
      std::vector<int> idx = draw_sentence(lo, hi, cfg.min_words, cfg.max_words, rng);
      if (!seen.insert(render(idx, lex.srca, false)).second) continue;
      block.push_back(std::move(idx));
    }
    return block;
  };

  Rng rng_pair(derive_seed(cfg.seed, 0x9A12));
  auto in_train = draw_block(cfg.in_train, cfg.in_lo, cfg.in_hi, rng_pair);
  auto in_valid = draw_block(cfg.in_valid, cfg.in_lo, cfg.in_hi, rng_pair);
  auto in_test = draw_block(cfg.in_test, cfg.in_lo, cfg.in_hi, rng_pair);
  auto out_train = draw_block(cfg.out_train, cfg.out_lo, cfg.out_hi, rng_pair);

  auto emit_split = [&](const std::string& stem,
                        const std::vector<std::vector<int>>& block) {
    std::vector<std::string> a, b, c;
    for (const auto& idx : block) {
      a.push_back(render(idx, lex.srca, false));
      b.push_back(render(idx, lex.copyb, false));
      c.push_back(render(idx, lex.revc, true));
    }
    write_lines((fs::path(dir) / (stem + ".srca.txt")).string(), a);
    write_lines((fs::path(dir) / (stem + ".copyb.txt")).string(), b);
    write_lines((fs::path(dir) / (stem + ".revc.txt")).string(), c);
  };
  emit_split("para.in.train", in_train);
  emit_split("para.in.valid", in_valid);
  emit_split("para.in.test", in_test);
  emit_split("para.out.train", out_train);

  // Monolingual text: independent draws per language and domain.
  const char* langs[3] = {"srca", "copyb", "revc"};
  const std::vector<std::string>* lexes[3] = {&lex.srca, &lex.copyb, &lex.revc};
  for (int li = 0; li < 3; ++li) {
    for (int dom = 0; dom < 2; ++dom) {
      Rng rng(derive_seed(cfg.seed, 0x30B0 + li, dom));
      int count = dom == 0 ? cfg.mono_in : cfg.mono_out;
      int lo = dom == 0 ? cfg.in_lo : cfg.out_lo;
      int hi = dom == 0 ? cfg.in_hi : cfg.out_hi;
      std::vector<std::string> lines;
      for (int n = 0; n < count; ++n)
        lines.push_back(render(draw_sentence(lo, hi, cfg.min_words, cfg.max_words, rng),
                               *lexes[li], li == 2));
      std::string name = std::string("mono.") + langs[li] + "." +
                         (dom == 0 ? "in" : "out") + ".txt";
      write_lines((fs::path(dir) / name).string(), lines);
    }
  }

  ordered_json m;
  m["languages"] = {"srca", "copyb", "revc"};
  m["zwj_repair"] = ordered_json::array();
  ordered_json mono = ordered_json::array();
  for (int li = 0; li < 3; ++li)
    for (int dom = 0; dom < 2; ++dom) {
      ordered_json e;
      e["path"] = std::string("mono.") + langs[li] + "." +
                  (dom == 0 ? "in" : "out") + ".txt";
      e["lang"] = langs[li];
      e["domain"] = dom == 0 ? "in" : "out";
      mono.push_back(e);
    }
  m["mono"] = mono;

  ordered_json parallel = ordered_json::array();
  auto add_pair = [&](const std::string& stem, const char* domain,
                      const char* split, const std::string& a,
                      const std::string& b) {
    ordered_json e;
    e["src_path"] = stem + "." + a + ".txt";
    e["tgt_path"] = stem + "." + b + ".txt";
    e["src_lang"] = a;
    e["tgt_lang"] = b;
    e["domain"] = domain;
    e["split"] = split;
    parallel.push_back(e);
  };
  const std::pair<std::string, std::string> dirs[4] = {
      {"srca", "copyb"}, {"copyb", "srca"}, {"srca", "revc"}, {"revc", "srca"}};
  for (const auto& [a, b] : dirs) {
    add_pair("para.in.train", "in", "train", a, b);
    add_pair("para.out.train", "out", "train", a, b);
    add_pair("para.in.valid", "in", "valid", a, b);
    add_pair("para.in.test", "in", "test", a, b);
  }
  m["parallel"] = parallel;

  std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + manifest_path);
  out << m.dump(2) << "\n";
  return manifest_path;
}

}  // namespace lrlf
