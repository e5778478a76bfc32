#include "lrlf/decode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "lrlf/corpus.hpp"

namespace lrlf {

void DecodeConfig::validate() const {
  if (beam_size < 1) throw config_error("beam_size must be >= 1");
  if (max_output_len < 1) throw config_error("max_output_len must be >= 1");
  if (length_penalty < 0) throw config_error("length_penalty must be >= 0");
}

void EnsembleSpec::validate() const {
  if (members.empty() || members.size() > 3)
    throw decode_error("ensemble must have 1 to 3 members, got " +
                       std::to_string(members.size()));
  for (std::size_t i = 1; i < members.size(); ++i) {
    if (members[i].config.vocab_size != members[0].config.vocab_size)
      throw decode_error("member vocab mismatch: member " + std::to_string(i) +
                         " has vocab " + std::to_string(members[i].config.vocab_size) +
                         ", member 0 has " + std::to_string(members[0].config.vocab_size));
    if (!members[i].config.same_shape(members[0].config))
      throw decode_error("member shape mismatch at member " + std::to_string(i));
  }
}

std::vector<Transformer<float>> build_members(const EnsembleSpec& spec) {
  spec.validate();
  std::vector<Transformer<float>> models;
  models.reserve(spec.members.size());
  for (const ModelCheckpoint& m : spec.members)
    models.emplace_back(m.config, m.params);
  return models;
}

std::vector<double> ensemble_step(const std::vector<Transformer<float>>& members,
                                  std::vector<DecodeState<float>>& states,
                                  TokenId token, bool average_logprobs) {
  if (members.empty()) throw decode_error("empty ensemble");
  if (states.size() != members.size())
    throw decode_error("decode state count does not match member count");

  const std::size_t v = static_cast<std::size_t>(members[0].config().vocab_size);
  std::vector<double> mean(v, 0.0);
  for (std::size_t m = 0; m < members.size(); ++m) {
    if (static_cast<std::size_t>(members[m].config().vocab_size) != v)
      throw decode_error("member vocab mismatch");
    Mat<float> probs = members[m].decode_step(states[m], token);
    for (std::size_t i = 0; i < v; ++i) {
      double p = static_cast<double>(probs(0, static_cast<Eigen::Index>(i)));
      mean[i] += average_logprobs ? std::log(std::max(p, 1e-30)) : p;
    }
  }
  double norm = 0;
  for (std::size_t i = 0; i < v; ++i) {
    mean[i] = average_logprobs ? std::exp(mean[i] / static_cast<double>(members.size()))
                               : mean[i] / static_cast<double>(members.size());
    norm += mean[i];
  }
  for (double& p : mean) p /= norm;
  return mean;
}

namespace {

double length_penalty_factor(std::size_t len, double alpha) {
  if (alpha <= 0) return 1.0;
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

struct LiveHyp {
  TokenSeq tokens;
  double score = 0;
  std::vector<DecodeState<float>> states;  // already fed LID + tokens
  std::vector<double> dist;                // next-token distribution
};

bool better_finished(const Hypothesis& a, const Hypothesis& b, double alpha) {
  // Penalized score first; lexicographically smaller tokens on a tie.
  double pa = a.score / length_penalty_factor(a.tokens.size() + 1, alpha);
  double pb = b.score / length_penalty_factor(b.tokens.size() + 1, alpha);
  if (pa != pb) return pa > pb;
  return a.tokens < b.tokens;
}

}  // namespace

BeamResult beam_search(const std::vector<Transformer<float>>& members,
                       const DecodeConfig& cfg, const Vocab& v,
                       const TokenSeq& encoder_input) {
  cfg.validate();
  if (members.empty()) throw decode_error("empty ensemble");
  const TokenId lid = v.lid_id(cfg.target_lang);
  const TokenId eos = v.eos_id();
  const int vocab = members[0].config().vocab_size;

  LiveHyp root;
  for (const Transformer<float>& m : members)
    root.states.push_back(m.begin_decode(encoder_input));
  root.dist = ensemble_step(members, root.states, lid, cfg.average_logprobs);

  std::vector<LiveHyp> live;
  live.push_back(std::move(root));
  bool have_best = false;
  Hypothesis best;

  struct Cand {
    std::size_t parent;
    TokenId token;
    double score;
    TokenSeq tokens;  // parent tokens + token, for tie-breaking
  };

  for (int step = 0; step < cfg.max_output_len && !live.empty(); ++step) {
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(vocab));
    for (std::size_t h = 0; h < live.size(); ++h) {
      for (TokenId t = 0; t < vocab; ++t) {
        double p = live[h].dist[static_cast<std::size_t>(t)];
        if (p <= 0) continue;
        Cand c;
        c.parent = h;
        c.token = t;
        c.score = live[h].score + std::log(p);
        c.tokens = live[h].tokens;
        c.tokens.push_back(t);
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.tokens < b.tokens;
    });

    std::vector<LiveHyp> next;
    for (const Cand& c : cands) {
      if (c.token == eos) {
        Hypothesis fin;
        fin.tokens = c.tokens;
        fin.tokens.pop_back();  // drop the EOS itself
        fin.score = c.score;
        fin.finished = true;
        if (!have_best || better_finished(fin, best, cfg.length_penalty)) {
          best = std::move(fin);
          have_best = true;
        }
        continue;
      }
      // Once the beam is full the remaining candidates are only scanned for
      // EOS finishes (handled above); they can still beat a best hypothesis
      // carried over from an earlier step.
      if (next.size() < static_cast<std::size_t>(cfg.beam_size)) {
        LiveHyp h;
        h.tokens = c.tokens;
        h.score = c.score;
        h.states = live[c.parent].states;  // copy caches
        h.dist = ensemble_step(members, h.states, c.token, cfg.average_logprobs);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);

    if (have_best && !live.empty()) {
      // Upper bound on any continuation: the raw score can only drop and the
      // penalty divisor only grow, so parent_score / lp(max_len) bounds it.
      double bound = -std::numeric_limits<double>::infinity();
      double max_lp = length_penalty_factor(
          static_cast<std::size_t>(cfg.max_output_len) + 1, cfg.length_penalty);
      for (const LiveHyp& h : live)
        bound = std::max(bound, h.score / max_lp);
      double best_pen = best.score /
                        length_penalty_factor(best.tokens.size() + 1, cfg.length_penalty);
      if (best_pen >= bound) break;
    }
  }

  BeamResult res;
  if (have_best) {
    res.tokens = best.tokens;
    res.score = best.score /
                length_penalty_factor(best.tokens.size() + 1, cfg.length_penalty);
    res.finished = true;
  } else if (!live.empty()) {
    // Nothing reached EOS: return the best live hypothesis with a warning flag.
    const LiveHyp* pick = &live[0];
    for (const LiveHyp& h : live) {
      double ph = h.score / length_penalty_factor(h.tokens.size(), cfg.length_penalty);
      double pp = pick->score /
                  length_penalty_factor(pick->tokens.size(), cfg.length_penalty);
      if (ph > pp || (ph == pp && h.tokens < pick->tokens)) pick = &h;
    }
    res.tokens = pick->tokens;
    res.score = pick->score /
                length_penalty_factor(pick->tokens.size(), cfg.length_penalty);
    res.finished = false;
  } else {
    throw decode_error("beam search produced no hypotheses");
  }
  return res;
}

EnsembleSpec select_ensemble_checkpoints(const std::vector<ScoredCheckpoint>& ckpts,
                                         int k) {
  if (k != 2 && k != 3)
    throw decode_error("ensemble size must be 2 or 3, got " + std::to_string(k));
  std::vector<const ScoredCheckpoint*> scored;
  for (const ScoredCheckpoint& c : ckpts) {
    if (!c.meta.valid_bleu)
      throw decode_error("checkpoint " + c.path + " has no validation BLEU");
    scored.push_back(&c);
  }
  if (scored.size() < static_cast<std::size_t>(k))
    throw decode_error("insufficient checkpoints: need " + std::to_string(k) +
                       ", have " + std::to_string(scored.size()));
  std::sort(scored.begin(), scored.end(),
            [](const ScoredCheckpoint* a, const ScoredCheckpoint* b) {
              if (*a->meta.valid_bleu != *b->meta.valid_bleu)
                return *a->meta.valid_bleu > *b->meta.valid_bleu;
              return a->meta.update_count > b->meta.update_count;
            });
  EnsembleSpec spec;
  spec.source = EnsembleSource::SingleRunCheckpoints;
  for (int i = 0; i < k; ++i)
    spec.members.push_back(load_checkpoint(scored[static_cast<std::size_t>(i)]->path));
  spec.validate();
  return spec;
}

std::string translate_line(const std::vector<Transformer<float>>& members,
                           const DecodeConfig& cfg, const Vocab& v,
                           const LangCode& src_lang, const std::string& line) {
  TokenSeq enc = v.encode(line);
  enc.push_back(v.lid_id(src_lang));
  BeamResult r = beam_search(members, cfg, v, enc);
  TokenSeq payload;
  for (TokenId t : r.tokens)
    if (!v.is_special(t)) payload.push_back(t);
  return v.decode(payload);
}

TranslateSummary translate_file(const std::vector<Transformer<float>>& members,
                                const DecodeConfig& cfg, const Vocab& v,
                                const LangCode& src_lang,
                                const std::string& src_path,
                                const std::string& out_path, bool repair_zwj) {
  std::vector<std::string> lines = read_lines(src_path);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + out_path);

  TranslateSummary summary;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string hyp;
    try {
      if (!lines[i].empty())
        hyp = translate_line(members, cfg, v, src_lang, lines[i]);
    } catch (const Error& e) {
      ++summary.failures;
      summary.warnings.push_back("line " + std::to_string(i + 1) + ": " + e.what());
    }
    if (repair_zwj) hyp = zwj_repair(hyp);
    out << hyp << '\n';
  }
  if (!out) throw io_error("write failure on " + out_path);
  summary.lines = lines.size();
  return summary;
}

}  // namespace lrlf
