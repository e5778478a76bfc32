#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lrlf/corpus.hpp"
#include "lrlf/decode.hpp"
#include "lrlf/model.hpp"
#include "lrlf/subword.hpp"

using namespace lrlf;
namespace fs = std::filesystem;

namespace {

ModelConfig toy_config(int vocab) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.ffn_dim = 16;
  cfg.vocab_size = vocab;
  cfg.max_len = 32;
  cfg.dropout = 0;
  return cfg;
}

// Random toy model; scaling the embedding up spreads the output
// distributions enough to make decoding outcomes non-trivial.
Transformer<float> toy_model(int vocab, std::uint64_t seed, float emb_scale = 25.0f) {
  Transformer<float> m(toy_config(vocab));
  m.init_params(seed);
  m.params().embed *= emb_scale;
  return m;
}

ModelCheckpoint toy_checkpoint(int vocab, std::uint64_t seed) {
  ModelCheckpoint c;
  c.config = toy_config(vocab);
  c.params = Params<float>::shaped(c.config);
  c.params.randomize(seed);
  c.meta.stage = "ft";
  c.meta.update_count = static_cast<std::int64_t>(seed);
  c.meta.valid_nll = 1.0;
  return c;
}

// A model that emits the same next-token distribution q at every step:
// everything is zero except dec_ln.b, which points the final hidden state at
// an embedding column holding ln q. Zero probabilities are pushed below the
// float denormal range so they survive softmax as exact zeros.
ModelCheckpoint fixed_dist_model(const std::vector<double>& q) {
  ModelCheckpoint c;
  c.config = toy_config(static_cast<int>(q.size()));
  c.config.d_model = 4;
  c.config.heads = 1;
  c.config.ffn_dim = 8;
  c.params = Params<float>::shaped(c.config);
  c.params.dec_ln.b(0, 0) = 1.0f;
  for (std::size_t j = 0; j < q.size(); ++j)
    c.params.embed(static_cast<Eigen::Index>(j), 0) =
        q[j] > 0 ? static_cast<float>(std::log(q[j])) : -120.0f;
  c.meta.stage = "fixed";
  c.meta.valid_nll = 0;
  return c;
}

// Renormalized mean next-token distribution after feeding [lid]+payload,
// computed through full forward passes rather than incremental decoding.
std::vector<double> dist_after(const std::vector<Transformer<float>>& members,
                               const TokenSeq& enc, TokenId lid,
                               const TokenSeq& payload) {
  TokenSeq dec = {lid};
  dec.insert(dec.end(), payload.begin(), payload.end());
  std::size_t v = static_cast<std::size_t>(members[0].config().vocab_size);
  std::vector<double> mean(v, 0.0);
  for (const auto& m : members) {
    Mat<float> probs = m.forward(enc, dec);
    for (std::size_t i = 0; i < v; ++i)
      mean[i] +=
          static_cast<double>(probs(probs.rows() - 1, static_cast<Eigen::Index>(i)));
  }
  double norm = 0;
  for (double& p : mean) {
    p /= static_cast<double>(members.size());
    norm += p;
  }
  for (double& p : mean) p /= norm;
  return mean;
}

struct Best {
  TokenSeq tokens;
  double score = 0;
  bool set = false;
};

void consider(Best& best, const TokenSeq& tokens, double score) {
  if (!best.set || score > best.score ||
      (score == best.score && tokens < best.tokens)) {
    best.tokens = tokens;
    best.score = score;
    best.set = true;
  }
}

// Brute-force argmax over every <= max_steps-token output: a payload of
// non-EOS tokens followed by EOS, scored by chaining dist_after.
Best exhaustive_argmax(const std::vector<Transformer<float>>& members,
                       const TokenSeq& enc, TokenId lid, TokenId eos, int vocab,
                       int max_steps) {
  Best best;
  std::vector<TokenSeq> prefixes = {{}};
  for (int len = 0; len < max_steps; ++len) {
    std::vector<TokenSeq> next;
    for (const TokenSeq& p : prefixes) {
      double score = 0;
      TokenSeq cur;
      for (TokenId t : p) {
        std::vector<double> d = dist_after(members, enc, lid, cur);
        score += std::log(d[static_cast<std::size_t>(t)]);
        cur.push_back(t);
      }
      std::vector<double> d = dist_after(members, enc, lid, cur);
      if (d[static_cast<std::size_t>(eos)] > 0)
        consider(best, cur, score + std::log(d[static_cast<std::size_t>(eos)]));
      if (len < max_steps - 1)
        for (TokenId t = 0; t < vocab; ++t) {
          if (t == eos) continue;
          TokenSeq q = p;
          q.push_back(t);
          next.push_back(std::move(q));
        }
    }
    prefixes = std::move(next);
  }
  return best;
}

std::string tmp_dir(const std::string& leaf) {
  fs::path p = fs::temp_directory_path() / "lrlf_decode_tests" / leaf;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace

TEST_CASE("decode config and ensemble spec validation") {
  DecodeConfig cfg;
  cfg.target_lang = "xx";
  CHECK_NOTHROW(cfg.validate());
  cfg.beam_size = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("beam_size"), Error);
  cfg = DecodeConfig{};
  cfg.length_penalty = -1;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("length_penalty"), Error);

  EnsembleSpec spec;
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("1 to 3"), Error);
  for (int i = 0; i < 4; ++i) spec.members.push_back(toy_checkpoint(8, 1));
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("1 to 3"), Error);

  spec.members.resize(2);
  CHECK_NOTHROW(spec.validate());
  spec.members[1] = toy_checkpoint(9, 2);
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("vocab mismatch"), Error);
  spec.members[1] = toy_checkpoint(8, 2);
  spec.members[1].config.ffn_dim = 24;
  spec.members[1].params = Params<float>::shaped(spec.members[1].config);
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("shape mismatch"), Error);

  spec.members[1] = toy_checkpoint(8, 2);
  std::vector<Transformer<float>> members = build_members(spec);
  CHECK(members.size() == 2);
  CHECK(members[0].config().vocab_size == 8);
}

TEST_CASE("ensemble_step averages member distributions") {
  // Two engineered members: [0.8, .05, .05, .05, .05] and [0.6, .1, .1, .1, .1]
  // average to [0.7, .075, .075, .075, .075].
  EnsembleSpec spec;
  spec.members.push_back(fixed_dist_model({0.8, 0.05, 0.05, 0.05, 0.05}));
  spec.members.push_back(fixed_dist_model({0.6, 0.1, 0.1, 0.1, 0.1}));
  std::vector<Transformer<float>> members = build_members(spec);

  std::vector<DecodeState<float>> states;
  for (const auto& m : members) states.push_back(m.begin_decode({4}));
  std::vector<double> mean = ensemble_step(members, states, 4);
  REQUIRE(mean.size() == 5);
  CHECK(mean[0] == doctest::Approx(0.7).epsilon(1e-6));
  CHECK(mean[1] == doctest::Approx(0.075).epsilon(1e-6));
  CHECK(mean[4] == doctest::Approx(0.075).epsilon(1e-6));
  double sum = 0;
  for (double p : mean) sum += p;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

  // Log-space averaging instead takes the geometric mean.
  std::vector<DecodeState<float>> states2;
  for (const auto& m : members) states2.push_back(m.begin_decode({4}));
  std::vector<double> geo = ensemble_step(members, states2, 4, true);
  std::vector<double> want = {std::sqrt(0.8 * 0.6), std::sqrt(0.05 * 0.1),
                              std::sqrt(0.05 * 0.1), std::sqrt(0.05 * 0.1),
                              std::sqrt(0.05 * 0.1)};
  double wnorm = 0;
  for (double w : want) wnorm += w;
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(geo[i] == doctest::Approx(want[i] / wnorm).epsilon(1e-5));
}

TEST_CASE("ensemble of identical members equals the single model") {
  ModelCheckpoint base = toy_checkpoint(8, 42);
  EnsembleSpec three;
  three.members = {base, base, base};
  std::vector<Transformer<float>> trio = build_members(three);
  EnsembleSpec one;
  one.members = {base};
  std::vector<Transformer<float>> solo = build_members(one);

  std::vector<DecodeState<float>> st3, st1;
  for (const auto& m : trio) st3.push_back(m.begin_decode({5, 6, 4}));
  for (const auto& m : solo) st1.push_back(m.begin_decode({5, 6, 4}));
  for (TokenId t : {4, 5, 7}) {
    std::vector<double> d3 = ensemble_step(trio, st3, t);
    std::vector<double> d1 = ensemble_step(solo, st1, t);
    for (std::size_t i = 0; i < d3.size(); ++i)
      CHECK(d3[i] == doctest::Approx(d1[i]).epsilon(1e-12));
  }
}

TEST_CASE("ensemble_step golden mean of three distinct models") {
  EnsembleSpec spec;
  spec.members = {toy_checkpoint(8, 101), toy_checkpoint(8, 102),
                  toy_checkpoint(8, 103)};
  for (auto& m : spec.members) m.params.embed *= 25.0f;
  std::vector<Transformer<float>> members = build_members(spec);

  TokenSeq enc = {5, 6, 7, 4};
  TokenSeq fed = {4, 5, 6};  // LID then two payload tokens
  std::vector<DecodeState<float>> states;
  for (const auto& m : members) states.push_back(m.begin_decode(enc));
  std::vector<double> got;
  for (TokenId t : fed) got = ensemble_step(members, states, t);

  // Oracle: mean of the members' full-forward rows for the same prefix.
  std::vector<double> want = dist_after(members, enc, fed[0], {fed[1], fed[2]});
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-4));

  std::vector<DecodeState<float>> bad;
  CHECK_THROWS_WITH_AS(ensemble_step(members, bad, 4),
                       doctest::Contains("state count"), Error);
  CHECK_THROWS_WITH_AS(ensemble_step({}, bad, 4), doctest::Contains("empty ensemble"),
                       Error);
}

TEST_CASE("beam size one is greedy") {
  Vocab v = Vocab::assemble({"xx"}, {"a", "b", "c"}, {});
  REQUIRE(v.size() == 8);
  DecodeConfig cfg;
  cfg.beam_size = 1;
  cfg.max_output_len = 8;
  cfg.target_lang = "xx";
  const TokenId lid = v.lid_id("xx");
  const TokenId eos = v.eos_id();

  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    std::vector<Transformer<float>> members;
    members.push_back(toy_model(8, seed));
    TokenSeq enc = {5, 6, lid};

    // Direct greedy oracle over full-forward distributions: follow the
    // argmax among continuations and finish at the best EOS cut along that
    // path (the highest-scoring hypothesis a width-one beam can reach).
    TokenSeq payload;
    double score = 0;
    Best finish;
    bool greedy_hit_eos = false;
    double greedy_score = 0;
    for (int step = 0; step < cfg.max_output_len; ++step) {
      std::vector<double> d = dist_after(members, enc, lid, payload);
      consider(finish, payload, score + std::log(d[static_cast<std::size_t>(eos)]));
      TokenId pick = static_cast<TokenId>(
          std::max_element(d.begin(), d.end()) - d.begin());
      if (pick == eos && !greedy_hit_eos) {
        greedy_hit_eos = true;
        greedy_score = score + std::log(d[static_cast<std::size_t>(eos)]);
      }
      TokenId cont = pick;
      if (cont == eos) {
        std::vector<double> masked = d;
        masked[static_cast<std::size_t>(eos)] = -1;
        cont = static_cast<TokenId>(
            std::max_element(masked.begin(), masked.end()) - masked.begin());
      }
      score += std::log(d[static_cast<std::size_t>(cont)]);
      payload.push_back(cont);
    }

    BeamResult r = beam_search(members, cfg, v, enc);
    CHECK(r.finished);
    CHECK(r.tokens == finish.tokens);
    CHECK(r.score == doctest::Approx(finish.score).epsilon(1e-4));
    // Never worse than plain argmax decoding that stops at the first EOS.
    if (greedy_hit_eos) CHECK(r.score >= greedy_score - 1e-6);
  }
}

TEST_CASE("beam five matches exhaustive enumeration on toy models") {
  Vocab v = Vocab::assemble({"xx"}, {}, {});
  REQUIRE(v.size() == 5);  // PAD UNK.. plus the single LID, no learned tokens
  const TokenId lid = v.lid_id("xx");
  const TokenId eos = v.eos_id();

  DecodeConfig cfg;
  cfg.beam_size = 5;
  cfg.max_output_len = 3;
  cfg.target_lang = "xx";

  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    std::vector<Transformer<float>> members;
    members.push_back(toy_model(5, seed));
    TokenSeq enc = {1, 2, lid};
    BeamResult beam = beam_search(members, cfg, v, enc);
    Best oracle = exhaustive_argmax(members, enc, lid, eos, 5, 3);
    REQUIRE(oracle.set);
    CHECK(beam.finished);
    CHECK(beam.tokens == oracle.tokens);
    CHECK(beam.score == doctest::Approx(oracle.score).epsilon(1e-4));

    // A beam wide enough to hold every prefix is exhaustive by construction;
    // it must agree as well.
    DecodeConfig wide = cfg;
    wide.beam_size = 125;
    BeamResult full = beam_search(members, wide, v, enc);
    CHECK(full.tokens == oracle.tokens);
  }
}

TEST_CASE("widening the beam never lowers the score") {
  Vocab v = Vocab::assemble({"xx"}, {"a", "b", "c"}, {});
  DecodeConfig cfg;
  cfg.max_output_len = 8;
  cfg.target_lang = "xx";
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::vector<Transformer<float>> members;
    members.push_back(toy_model(8, seed + 100));
    TokenSeq enc = {5, 6, v.lid_id("xx")};
    double prev = -std::numeric_limits<double>::infinity();
    for (int b = 1; b <= 5; ++b) {
      cfg.beam_size = b;
      BeamResult r = beam_search(members, cfg, v, enc);
      CHECK(r.score >= prev - 1e-9);
      prev = r.score;
    }
  }
}

TEST_CASE("beam search reports unfinished output when EOS is unreachable") {
  // EOS probability is an exact zero, so nothing can finish.
  EnsembleSpec spec;
  spec.members.push_back(fixed_dist_model({0.25, 0.25, 0.0, 0.25, 0.25}));
  std::vector<Transformer<float>> members = build_members(spec);
  Vocab v = Vocab::assemble({"xx"}, {}, {});

  DecodeConfig cfg;
  cfg.beam_size = 3;
  cfg.max_output_len = 3;
  cfg.target_lang = "xx";
  BeamResult r = beam_search(members, cfg, v, {1, 4});
  CHECK_FALSE(r.finished);
  CHECK(r.tokens.size() == 3);
  // All live hypotheses tie, so the lexicographically smallest one wins.
  CHECK(r.tokens == TokenSeq{0, 0, 0});
  CHECK(r.score == doctest::Approx(3 * std::log(0.25)).epsilon(1e-5));
}

TEST_CASE("beam search is deterministic and member order does not matter") {
  Vocab v = Vocab::assemble({"xx"}, {"a", "b", "c"}, {});
  DecodeConfig cfg;
  cfg.max_output_len = 6;
  cfg.target_lang = "xx";

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelCheckpoint a = toy_checkpoint(8, seed * 7 + 1);
    ModelCheckpoint b = toy_checkpoint(8, seed * 7 + 2);
    ModelCheckpoint c = toy_checkpoint(8, seed * 7 + 3);
    for (auto* m : {&a, &b, &c}) m->params.embed *= 25.0f;

    EnsembleSpec abc, cab;
    abc.members = {a, b, c};
    cab.members = {c, a, b};
    std::vector<Transformer<float>> m1 = build_members(abc);
    std::vector<Transformer<float>> m2 = build_members(cab);

    TokenSeq enc = {5, 7, v.lid_id("xx")};
    BeamResult r1 = beam_search(m1, cfg, v, enc);
    BeamResult r1_again = beam_search(m1, cfg, v, enc);
    BeamResult r2 = beam_search(m2, cfg, v, enc);
    CHECK(r1.tokens == r1_again.tokens);
    CHECK(r1.score == r1_again.score);
    CHECK(r1.tokens == r2.tokens);
    CHECK(r1.score == doctest::Approx(r2.score).epsilon(1e-9));
  }
}

TEST_CASE("length penalty prefers longer hypotheses") {
  // One member, fixed distribution: continuing costs log(0.55), finishing
  // costs log(0.25). Without a penalty the empty output wins; with a strong
  // penalty longer outputs win.
  EnsembleSpec spec;
  spec.members.push_back(fixed_dist_model({0.1, 0.55, 0.25, 0.05, 0.05}));
  std::vector<Transformer<float>> members = build_members(spec);
  Vocab v = Vocab::assemble({"xx"}, {}, {});

  DecodeConfig plain;
  plain.beam_size = 3;
  plain.max_output_len = 6;
  plain.target_lang = "xx";
  BeamResult unpenalized = beam_search(members, plain, v, {1, 4});
  CHECK(unpenalized.tokens.empty());

  DecodeConfig pen = plain;
  pen.length_penalty = 5.0;
  BeamResult penalized = beam_search(members, pen, v, {1, 4});
  CHECK(penalized.tokens.size() > 0);
}

TEST_CASE("select_ensemble_checkpoints takes the top validation BLEU") {
  std::string dir = tmp_dir("select");
  std::vector<ScoredCheckpoint> scored;
  struct Row {
    double bleu;
    std::int64_t update;
  };
  // A BLEU tie at 30: the later update (400) must outrank the earlier (200).
  std::vector<Row> rows = {{10, 100}, {30, 200}, {20, 300}, {30, 400}, {5, 500}};
  for (const Row& r : rows) {
    ModelCheckpoint c = toy_checkpoint(8, static_cast<std::uint64_t>(r.update));
    c.meta.update_count = r.update;
    c.meta.valid_bleu = r.bleu;
    std::string path = dir + "/u" + std::to_string(r.update) + ".ckpt";
    save_checkpoint(c, path);
    scored.push_back({path, c.meta});
  }

  EnsembleSpec top3 = select_ensemble_checkpoints(scored, 3);
  CHECK(top3.source == EnsembleSource::SingleRunCheckpoints);
  REQUIRE(top3.members.size() == 3);
  CHECK(top3.members[0].meta.update_count == 400);
  CHECK(top3.members[1].meta.update_count == 200);
  CHECK(top3.members[2].meta.update_count == 300);

  EnsembleSpec top2 = select_ensemble_checkpoints(scored, 2);
  REQUIRE(top2.members.size() == 2);
  CHECK(top2.members[0].meta.update_count == 400);
  CHECK(top2.members[1].meta.update_count == 200);

  CHECK_THROWS_WITH_AS(select_ensemble_checkpoints(scored, 4),
                       doctest::Contains("2 or 3"), Error);
  CHECK_THROWS_WITH_AS(select_ensemble_checkpoints(scored, 1),
                       doctest::Contains("2 or 3"), Error);
  scored.resize(2);
  CHECK_NOTHROW(select_ensemble_checkpoints(scored, 2));
  scored.resize(1);
  CHECK_THROWS_WITH_AS(select_ensemble_checkpoints(scored, 2),
                       doctest::Contains("insufficient"), Error);

  ScoredCheckpoint unscored;
  unscored.path = dir + "/u100.ckpt";
  unscored.meta.update_count = 100;
  CHECK_THROWS_WITH_AS(select_ensemble_checkpoints({unscored, unscored}, 2),
                       doctest::Contains("no validation BLEU"), Error);
}

TEST_CASE("translate_line strips specials and is deterministic") {
  Vocab v = Vocab::assemble({"xx"}, {"a", "b", "c", " "}, {});
  std::vector<Transformer<float>> members;
  members.push_back(toy_model(static_cast<int>(v.size()), 5));
  DecodeConfig cfg;
  cfg.max_output_len = 6;
  cfg.target_lang = "xx";

  std::string out1 = translate_line(members, cfg, v, "xx", "ab c");
  std::string out2 = translate_line(members, cfg, v, "xx", "ab c");
  CHECK(out1 == out2);
  for (char ch : out1) CHECK(std::string("abc ").find(ch) != std::string::npos);

  CHECK_THROWS_WITH_AS(translate_line(members, cfg, v, "yy", "ab"),
                       doctest::Contains("no LID"), Error);
}

TEST_CASE("translate_file keeps line alignment and survives bad lines") {
  std::string dir = tmp_dir("files");
  Vocab v = Vocab::assemble({"xx"}, {"a", "b", "c", " "}, {});
  std::vector<Transformer<float>> members;
  members.push_back(toy_model(static_cast<int>(v.size()), 6));
  DecodeConfig cfg;
  cfg.max_output_len = 5;
  cfg.target_lang = "xx";

  // Empty input file translates to an empty output file.
  {
    std::ofstream(dir + "/empty.txt");
    TranslateSummary s = translate_file(members, cfg, v, "xx", dir + "/empty.txt",
                                        dir + "/empty.out", false);
    CHECK(s.lines == 0);
    CHECK(s.failures == 0);
    CHECK(read_lines(dir + "/empty.out").empty());
  }

  // Three lines; the middle one has a byte outside the vocabulary and must
  // fail alone, leaving an empty line in its place.
  {
    std::ofstream in(dir + "/src.txt");
    in << "ab c\nqq\nba\n";
    in.close();
    TranslateSummary s = translate_file(members, cfg, v, "xx", dir + "/src.txt",
                                        dir + "/out.txt", false);
    CHECK(s.lines == 3);
    CHECK(s.failures == 1);
    REQUIRE(s.warnings.size() == 1);
    CHECK(s.warnings[0].find("line 2") != std::string::npos);
    std::vector<std::string> out = read_lines(dir + "/out.txt");
    REQUIRE(out.size() == 3);
    CHECK(out[1].empty());
    CHECK(out[0] == translate_line(members, cfg, v, "xx", "ab c"));
  }

  // Blank input lines stay blank without counting as failures, and repaired
  // output is a fixed point of the repair.
  {
    std::ofstream in(dir + "/blank.txt");
    in << "ab\n\ncb a\n";
    in.close();
    TranslateSummary s = translate_file(members, cfg, v, "xx", dir + "/blank.txt",
                                        dir + "/blank.out", true);
    CHECK(s.lines == 3);
    CHECK(s.failures == 0);
    std::vector<std::string> out = read_lines(dir + "/blank.out");
    REQUIRE(out.size() == 3);
    CHECK(out[1].empty());
    for (const std::string& line : out) CHECK(zwj_repair(line) == line);
  }
}
