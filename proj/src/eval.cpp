#include "lrlf/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

using ordered_json = nlohmann::ordered_json;

namespace lrlf {

namespace {

template <typename Sym>
BleuReport bleu_impl(const std::vector<std::vector<Sym>>& hyps,
                     const std::vector<std::vector<Sym>>& refs) {
  if (hyps.size() != refs.size())
    throw eval_error("hypothesis/reference count mismatch: " +
                     std::to_string(hyps.size()) + " vs " +
                     std::to_string(refs.size()));
  if (hyps.empty()) throw eval_error("empty corpus");

  BleuReport rep;
  std::array<std::size_t, 4> match{}, total{};
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& hyp = hyps[s];
    const auto& ref = refs[s];
    rep.hyp_tokens += hyp.size();
    rep.ref_tokens += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      if (hyp.size() < n) continue;
      std::map<std::vector<Sym>, std::size_t> ref_counts;
      if (ref.size() >= n)
        for (std::size_t i = 0; i + n <= ref.size(); ++i)
          ++ref_counts[std::vector<Sym>(ref.begin() + i, ref.begin() + i + n)];
      std::map<std::vector<Sym>, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i)
        ++hyp_counts[std::vector<Sym>(hyp.begin() + i, hyp.begin() + i + n)];
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        std::size_t clip = it == ref_counts.end() ? 0 : it->second;
        match[n - 1] += std::min(count, clip);
      }
      total[n - 1] += hyp.size() - n + 1;
    }
  }

  bool zero = false;
  double log_sum = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    rep.precisions[n] =
        total[n] ? static_cast<double>(match[n]) / static_cast<double>(total[n]) : 0;
    if (rep.precisions[n] <= 0)
      zero = true;
    else
      log_sum += std::log(rep.precisions[n]);
  }

  if (rep.hyp_tokens == 0) {
    rep.brevity_penalty = 0;
    rep.bleu = 0;
    return rep;
  }
  double c = static_cast<double>(rep.hyp_tokens);
  double r = static_cast<double>(rep.ref_tokens);
  rep.brevity_penalty = c > r ? 1.0 : std::exp(1.0 - r / c);
  rep.bleu = zero ? 0 : rep.brevity_penalty * std::exp(log_sum / 4.0) * 100.0;
  return rep;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                       const std::vector<std::vector<std::string>>& refs) {
  return bleu_impl(hyps, refs);
}

BleuReport corpus_bleu_ids(const std::vector<TokenSeq>& hyps,
                           const std::vector<TokenSeq>& refs) {
  return bleu_impl(hyps, refs);
}

std::vector<std::string> tokenize_line(const std::string& line, bool lowercase) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : line) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(lowercase ? static_cast<char>(std::tolower(
                                    static_cast<unsigned char>(c)))
                              : c);
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::string format_bleu(const BleuReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << "BLEU = " << r.bleu << ", "
     << std::setprecision(1) << 100 * r.precisions[0] << "/"
     << 100 * r.precisions[1] << "/" << 100 * r.precisions[2] << "/"
     << 100 * r.precisions[3] << " (BP=" << std::setprecision(3)
     << r.brevity_penalty << ", hyp_len=" << r.hyp_tokens
     << ", ref_len=" << r.ref_tokens << ")";
  return os.str();
}

double validation_likelihood(const Transformer<float>& model,
                             const std::vector<Example>& valid) {
  if (valid.empty()) throw eval_error("empty validation set");
  LossStats stats = batch_loss(model.params(), model.config(), valid, 0.0);
  if (stats.tokens == 0) throw eval_error("validation set has no label tokens");
  return stats.mean();
}

namespace {

std::string fmt2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

std::string fmt_delta(double d) {
  // -0.004 rounds to "0.00"; print that with a plus sign.
  std::string body = fmt2(std::fabs(d));
  bool neg = d < 0 && body != "0.00";
  return std::string("(") + (neg ? "-" : "+") + body + ")";
}

}  // namespace

ResultTable emit_table(const std::vector<RunSummary>& records,
                       const RunSummary& baseline) {
  for (const RunSummary& rec : records)
    for (const auto& [dir, score] : rec.direction_bleu)
      if (!baseline.direction_bleu.count(dir))
        throw eval_error("baseline '" + baseline.name + "' missing direction " +
                         dir + " present in '" + rec.name + "'");

  ResultTable table;
  for (const auto& [dir, score] : baseline.direction_bleu)
    table.directions.push_back(dir);

  // Column widths: name, pivot, then one column per direction.
  std::size_t name_w = std::string("model").size(), pivot_w = std::string("pivot").size();
  auto cell = [&](const RunSummary& rec, const std::string& dir,
                  bool with_delta) -> std::string {
    auto it = rec.direction_bleu.find(dir);
    if (it == rec.direction_bleu.end()) return "N/A";
    std::string s = fmt2(it->second);
    if (with_delta)
      s += " " + fmt_delta(it->second - baseline.direction_bleu.at(dir));
    return s;
  };

  std::vector<std::vector<std::string>> grid;
  std::vector<const RunSummary*> rows;
  rows.push_back(&baseline);
  for (const RunSummary& rec : records) rows.push_back(&rec);
  for (const RunSummary* rec : rows) {
    std::vector<std::string> row;
    row.push_back(rec == &baseline ? rec->name + " (baseline)" : rec->name);
    row.push_back(rec->pivot.empty() ? "-" : rec->pivot);
    for (const std::string& dir : table.directions)
      row.push_back(cell(*rec, dir, rec != &baseline));
    name_w = std::max(name_w, row[0].size());
    pivot_w = std::max(pivot_w, row[1].size());
    grid.push_back(std::move(row));
  }
  std::vector<std::size_t> dir_w(table.directions.size());
  for (std::size_t d = 0; d < table.directions.size(); ++d) {
    dir_w[d] = table.directions[d].size();
    for (const auto& row : grid) dir_w[d] = std::max(dir_w[d], row[d + 2].size());
  }

  std::ostringstream text;
  auto pad = [](const std::string& s, std::size_t w) {
    return s + std::string(w > s.size() ? w - s.size() : 0, ' ');
  };
  text << pad("model", name_w) << "  " << pad("pivot", pivot_w);
  for (std::size_t d = 0; d < table.directions.size(); ++d)
    text << "  " << pad(table.directions[d], dir_w[d]);
  text << "\n";
  for (const auto& row : grid) {
    text << pad(row[0], name_w) << "  " << pad(row[1], pivot_w);
    for (std::size_t d = 0; d < table.directions.size(); ++d)
      text << "  " << pad(row[d + 2], dir_w[d]);
    text << "\n";
  }

  // Top-3 improvements over the baseline, per direction.
  ordered_json top_json = ordered_json::object();
  std::ostringstream top_text;
  for (const std::string& dir : table.directions) {
    std::vector<std::pair<double, const RunSummary*>> ranked;
    for (const RunSummary& rec : records) {
      auto it = rec.direction_bleu.find(dir);
      if (it == rec.direction_bleu.end()) continue;
      double delta = it->second - baseline.direction_bleu.at(dir);
      if (delta > 0) ranked.emplace_back(delta, &rec);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    if (ranked.size() > 3) ranked.resize(3);
    top_text << "top improved [" << dir << "]:";
    ordered_json arr = ordered_json::array();
    if (ranked.empty()) top_text << " (none)";
    top_text << "\n";
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      const RunSummary* rec = ranked[i].second;
      top_text << "  " << (i + 1) << ". " << rec->name << "  "
               << fmt2(rec->direction_bleu.at(dir)) << " "
               << fmt_delta(ranked[i].first) << "\n";
      ordered_json e;
      e["name"] = rec->name;
      e["score"] = rec->direction_bleu.at(dir);
      e["delta"] = ranked[i].first;
      arr.push_back(e);
    }
    top_json[dir] = arr;
  }
  table.text = text.str() + "\n" + top_text.str();

  ordered_json j;
  j["baseline"] = baseline.name;
  j["directions"] = table.directions;
  ordered_json jrows = ordered_json::array();
  for (const RunSummary* rec : rows) {
    ordered_json r;
    r["name"] = rec->name;
    r["pivot"] = rec->pivot.empty() ? "-" : rec->pivot;
    ordered_json scores = ordered_json::object();
    ordered_json deltas = ordered_json::object();
    for (const std::string& dir : table.directions) {
      auto it = rec->direction_bleu.find(dir);
      if (it == rec->direction_bleu.end()) {
        scores[dir] = nullptr;
        deltas[dir] = nullptr;
      } else {
        scores[dir] = it->second;
        deltas[dir] = rec == &baseline
                          ? ordered_json(nullptr)
                          : ordered_json(it->second - baseline.direction_bleu.at(dir));
      }
    }
    r["scores"] = scores;
    r["deltas"] = deltas;
    jrows.push_back(r);
  }
  j["rows"] = jrows;
  j["top_improved"] = top_json;
  table.structured = j.dump(2);
  return table;
}

}  // namespace lrlf
