#include "lrlf/subword.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace lrlf {

namespace {

std::string pair_key(const std::string& a, const std::string& b) {
  std::string k = a;
  k.push_back('\0');
  k += b;
  return k;
}

std::string escape_token(const std::string& t) {
  std::string out;
  for (unsigned char c : t) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default:
        if (c < 0x20 || c >= 0x7F) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\x%02X", c);
          out += buf;
        } else {
          out.push_back(static_cast<char>(c));
        }
    }
  }
  return out;
}

std::string unescape_token(const std::string& t, const std::string& where) {
  std::string out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] != '\\') {
      out.push_back(t[i]);
      continue;
    }
    if (i + 1 >= t.size()) throw vocab_error("truncated escape in " + where);
    char c = t[++i];
    switch (c) {
      case '\\': out.push_back('\\'); break;
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      case 'x': {
        if (i + 2 >= t.size()) throw vocab_error("truncated \\x escape in " + where);
        auto hex = [&](char h) -> int {
          if (h >= '0' && h <= '9') return h - '0';
          if (h >= 'A' && h <= 'F') return h - 'A' + 10;
          if (h >= 'a' && h <= 'f') return h - 'a' + 10;
          throw vocab_error("bad hex digit in " + where);
        };
        int v = hex(t[i + 1]) * 16 + hex(t[i + 2]);
        i += 2;
        out.push_back(static_cast<char>(v));
        break;
      }
      default:
        throw vocab_error("unknown escape '\\" + std::string(1, c) + "' in " + where);
    }
  }
  return out;
}

}  // namespace

Vocab Vocab::assemble(const std::vector<LangCode>& languages,
                      const std::vector<std::string>& learned,
                      std::vector<std::pair<std::string, std::string>> merges) {
  Vocab v;
  v.tokens_ = {"<pad>", "<s>", "</s>", "<mask>"};
  for (const LangCode& lang : languages) {
    if (v.lid_.count(lang)) throw vocab_error("duplicate LID for language '" + lang + "'");
    v.lid_[lang] = static_cast<TokenId>(v.tokens_.size());
    v.lid_order_.push_back(lang);
    v.tokens_.push_back("[" + lang + "]");
  }
  for (const std::string& t : learned) {
    TokenId id = static_cast<TokenId>(v.tokens_.size());
    if (!v.learned_.emplace(t, id).second)
      throw vocab_error("duplicate learned token at id " + std::to_string(id));
    v.tokens_.push_back(t);
  }
  v.merges_ = std::move(merges);
  for (std::size_t r = 0; r < v.merges_.size(); ++r) {
    const auto& [a, b] = v.merges_[r];
    if (!v.learned_.count(a) || !v.learned_.count(b) || !v.learned_.count(a + b))
      throw vocab_error("merge " + std::to_string(r) + " references unknown token");
    v.merge_rank_[pair_key(a, b)] = static_cast<TokenId>(r);
  }
  return v;
}

TokenId Vocab::lid_id(const LangCode& lang) const {
  auto it = lid_.find(lang);
  if (it == lid_.end()) throw vocab_error("no LID for language '" + lang + "'");
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw vocab_error("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSeq Vocab::encode(const std::string& text) const {
  TokenSeq out;
  if (text.empty()) return out;

  // Start from single bytes, then collapse the best-ranked adjacent pair
  // until no learned merge applies.
  std::vector<std::string> parts;
  parts.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    std::string b(1, text[i]);
    if (!learned_.count(b)) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "0x%02X", static_cast<unsigned char>(text[i]));
      throw vocab_error("unknown byte " + std::string(buf) + " at offset " +
                        std::to_string(i));
    }
    parts.push_back(std::move(b));
  }

  while (parts.size() > 1) {
    int best_rank = -1;
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto it = merge_rank_.find(pair_key(parts[i], parts[i + 1]));
      if (it == merge_rank_.end()) continue;
      if (best_rank < 0 || it->second < best_rank) {
        best_rank = it->second;
        best_pos = i;
      }
    }
    if (best_rank < 0) break;
    parts[best_pos] += parts[best_pos + 1];
    parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
  }

  out.reserve(parts.size());
  for (const std::string& p : parts) out.push_back(learned_.at(p));
  return out;
}

std::string Vocab::decode(const TokenSeq& seq) const {
  std::string out;
  for (TokenId id : seq) {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw vocab_error("token id " + std::to_string(id) + " out of range");
    if (is_special(id))
      throw vocab_error("special in payload: id " + std::to_string(id) + " (" +
                        tokens_[static_cast<std::size_t>(id)] + ")");
    out += tokens_[static_cast<std::size_t>(id)];
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path);
  out << "LRLF-VOCAB v1\n";
  for (std::size_t id = 0; id < tokens_.size(); ++id)
    out << id << '\t' << escape_token(tokens_[id]) << '\n';
  out << "[specials]\n";
  out << "PAD\t" << kPad << '\n';
  out << "BOS\t" << kBos << '\n';
  out << "EOS\t" << kEos << '\n';
  out << "MASK\t" << kMask << '\n';
  for (const LangCode& lang : lid_order_)
    out << "LID:" << lang << '\t' << lid_.at(lang) << '\n';
  out << "[merges]\n";
  for (const auto& [a, b] : merges_)
    out << escape_token(a) << '\t' << escape_token(b) << '\n';
  if (!out) throw io_error("write failure on " + path);
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "LRLF-VOCAB v1")
    throw vocab_error("bad header in " + path + " (expected LRLF-VOCAB v1)");

  std::vector<std::string> tokens;
  while (std::getline(in, line) && line != "[specials]") {
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw vocab_error("malformed token line: " + line);
    std::size_t id = std::stoul(line.substr(0, tab));
    if (id != tokens.size())
      throw vocab_error("non-dense token id " + std::to_string(id));
    tokens.push_back(unescape_token(line.substr(tab + 1), "token " + std::to_string(id)));
  }
  if (line != "[specials]") throw vocab_error("missing [specials] section in " + path);

  std::vector<LangCode> languages;
  std::map<std::string, std::size_t> roles;
  while (std::getline(in, line) && line != "[merges]") {
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw vocab_error("malformed specials line: " + line);
    std::string role = line.substr(0, tab);
    std::size_t id = std::stoul(line.substr(tab + 1));
    roles[role] = id;
    if (role.rfind("LID:", 0) == 0) languages.push_back(role.substr(4));
  }
  for (const char* r : {"PAD", "BOS", "EOS", "MASK"})
    if (!roles.count(r)) throw vocab_error(std::string("missing special ") + r);
  if (roles["PAD"] != 0 || roles["BOS"] != 1 || roles["EOS"] != 2 || roles["MASK"] != 3)
    throw vocab_error("special ids must be PAD=0 BOS=1 EOS=2 MASK=3");

  std::vector<std::pair<std::string, std::string>> merges;
  if (line == "[merges]") {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos) throw vocab_error("malformed merge line: " + line);
      merges.emplace_back(unescape_token(line.substr(0, tab), "merge"),
                          unescape_token(line.substr(tab + 1), "merge"));
    }
  }

  std::size_t num_specials = 4 + languages.size();
  if (tokens.size() < num_specials)
    throw vocab_error("token table shorter than specials");
  std::vector<std::string> learned(tokens.begin() +
                                       static_cast<std::ptrdiff_t>(num_specials),
                                   tokens.end());
  return assemble(languages, learned, std::move(merges));
}

Vocab train_vocab(const std::vector<MonoDataset>& corpora,
                  std::size_t target_size, std::uint64_t seed,
                  std::vector<LangCode> languages) {
  (void)seed;  // merge selection is deterministic; seed kept for interface stability
  if (languages.empty()) {
    std::set<LangCode> seen;
    for (const MonoDataset& d : corpora)
      if (seen.insert(d.lang).second) languages.push_back(d.lang);
  }

  // Base alphabet: every distinct byte observed. Merges never cross a word
  // boundary, so lines are split into chunks after each space (the separator
  // stays attached to the word before it, keeping round-trips exact).
  std::set<unsigned char> alphabet;
  std::vector<std::vector<std::string>> lines;
  for (const MonoDataset& d : corpora) {
    for (const std::string& s : d.lines) {
      if (s.empty()) continue;
      std::vector<std::string> parts;
      for (char c : s) {
        alphabet.insert(static_cast<unsigned char>(c));
        parts.emplace_back(1, c);
        if (c == ' ') {
          lines.push_back(std::move(parts));
          parts.clear();
        }
      }
      if (!parts.empty()) lines.push_back(std::move(parts));
    }
  }

  std::size_t num_specials = 4 + languages.size();
  if (target_size <= num_specials + alphabet.size())
    throw vocab_error("target size " + std::to_string(target_size) +
                      " too small: need > " +
                      std::to_string(num_specials + alphabet.size()) +
                      " (specials + byte alphabet)");

  std::vector<std::string> learned;
  std::set<std::string> learned_set;
  for (unsigned char b : alphabet) {
    learned.emplace_back(1, static_cast<char>(b));
    learned_set.insert(learned.back());
  }

  std::vector<std::pair<std::string, std::string>> merges;
  while (num_specials + learned.size() < target_size) {
    // Count adjacent pairs; ties broken by lexicographic (left, right) so the
    // result is independent of hash-map iteration order.
    std::map<std::pair<std::string, std::string>, std::size_t> counts;
    for (const auto& parts : lines)
      for (std::size_t i = 0; i + 1 < parts.size(); ++i)
        ++counts[{parts[i], parts[i + 1]}];

    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 1;  // require count >= 2
    for (const auto& [pair, count] : counts) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      }
    }
    if (!best) break;

    std::string merged = best->first + best->second;
    if (learned_set.count(merged)) {
      // Already a token via another path; still record the merge so encode
      // can reach it, but don't add a duplicate id.
      merges.push_back(*best);
    } else {
      merges.push_back(*best);
      learned.push_back(merged);
      learned_set.insert(merged);
    }

    const auto [la, lb] = *best;
    for (auto& parts : lines) {
      for (std::size_t i = 0; i + 1 < parts.size();) {
        if (parts[i] == la && parts[i + 1] == lb) {
          parts[i] = merged;
          parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(i) + 1);
        } else {
          ++i;
        }
      }
    }
  }

  return Vocab::assemble(languages, learned, std::move(merges));
}

std::string zwj_repair(const std::string& text) {
  static const std::string dcaspace = "\xE0\xB7\x8A ";
  static const std::string rakar = "\xE0\xB6\xBB";  // U+0DBB
  static const std::string yansa = "\xE0\xB6\xBA";  // U+0DBA
  static const std::string zwj = "\xE2\x80\x8D";

  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, dcaspace.size(), dcaspace) == 0) {
      std::size_t after = i + dcaspace.size();
      if (text.compare(after, rakar.size(), rakar) == 0 ||
          text.compare(after, yansa.size(), yansa) == 0) {
        out += "\xE0\xB7\x8A";
        out += zwj;
        i = after;
        continue;
      }
    }
    out.push_back(text[i]);
    ++i;
  }
  return out;
}

}  // namespace lrlf
