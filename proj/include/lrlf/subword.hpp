#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lrlf/common.hpp"
#include "lrlf/corpus.hpp"

namespace lrlf {

// Byte-level BPE vocabulary. Ids are dense from 0: first the specials
// (PAD, BOS, EOS, MASK, one LID per language), then single-byte tokens,
// then merged tokens in merge order.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kMask = 3;

  Vocab() = default;

  std::size_t size() const { return tokens_.size(); }
  std::size_t num_specials() const { return 4 + lid_order_.size(); }
  bool is_special(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < num_specials();
  }

  TokenId pad_id() const { return kPad; }
  TokenId bos_id() const { return kBos; }
  TokenId eos_id() const { return kEos; }
  TokenId mask_id() const { return kMask; }
  TokenId lid_id(const LangCode& lang) const;
  bool has_lid(const LangCode& lang) const { return lid_.count(lang) > 0; }
  const std::vector<LangCode>& languages() const { return lid_order_; }

  const std::string& token(TokenId id) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const {
    return merges_;
  }

  TokenSeq encode(const std::string& text) const;
  std::string decode(const TokenSeq& seq) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  // Used by the trainer / loader only.
  static Vocab assemble(const std::vector<LangCode>& languages,
                        const std::vector<std::string>& learned,
                        std::vector<std::pair<std::string, std::string>> merges);

 private:
  std::vector<std::string> tokens_;                    // display strings, all ids
  std::vector<LangCode> lid_order_;                    // manifest order
  std::unordered_map<std::string, TokenId> lid_;       // lang → id
  std::unordered_map<std::string, TokenId> learned_;   // learned token → id
  std::unordered_map<std::string, TokenId> merge_rank_;  // "a\x00b" → rank
  std::vector<std::pair<std::string, std::string>> merges_;
};

// Learn a vocabulary of `target_size` ids over the given corpora. Languages
// default to order of first appearance in `corpora`; pass the manifest list
// explicitly so every language gets an LID even without mono data.
Vocab train_vocab(const std::vector<MonoDataset>& corpora,
                  std::size_t target_size, std::uint64_t seed,
                  std::vector<LangCode> languages = {});

// Reinstate zero-width joiners dropped before Sinhala consonants:
// U+0DCA SPACE U+0DBB -> U+0DCA U+200D U+0DBB, and likewise for U+0DBA.
std::string zwj_repair(const std::string& text);

}  // namespace lrlf
