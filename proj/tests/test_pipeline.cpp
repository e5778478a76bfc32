#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrlf/pipeline.hpp"

using namespace lrlf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("lrlf_pipe_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  for (const auto& l : lines) out << l << '\n';
}

// Small deterministic word salad over a fixed lexicon; % mixing keeps
// neighbouring lines distinct so BPE has something to merge.
std::vector<std::string> word_lines(int count, int stride, int words,
                                    bool alt_lexicon = false) {
  static const char* lex[5] = {"ba", "da", "ga", "ka", "ma"};
  static const char* alt[5] = {"zu", "po", "re", "fi", "lo"};
  std::vector<std::string> lines;
  for (int i = 0; i < count; ++i) {
    std::string line;
    for (int w = 0; w < words; ++w) {
      if (w) line += ' ';
      line += (alt_lexicon ? alt : lex)[(i * stride + w * 7 + 3) % 5];
    }
    lines.push_back(line);
  }
  return lines;
}

// Two toy languages with in/out mono and a copy-task parallel corpus.
fs::path make_corpus_dir(const std::string& tag) {
  fs::path dir = temp_dir(tag);
  write_file(dir / "mono-in.aa", word_lines(60, 1, 5));
  write_file(dir / "mono-in.bb", word_lines(60, 2, 5));
  write_file(dir / "mono-out.aa", word_lines(40, 3, 5, true));
  write_file(dir / "mono-out.bb", word_lines(40, 4, 5, true));
  auto train = word_lines(12, 1, 3);
  auto valid = word_lines(4, 2, 3);
  auto test = word_lines(4, 3, 3);
  write_file(dir / "train.aa", train);
  write_file(dir / "train.bb", train);  // copy task
  write_file(dir / "valid.aa", valid);
  write_file(dir / "valid.bb", valid);
  write_file(dir / "test.aa", test);
  write_file(dir / "test.bb", test);
  write_file(dir / "manifest.json", {R"({
    "languages": ["aa", "bb"],
    "mono": [
      {"path": "mono-in.aa", "lang": "aa", "domain": "in"},
      {"path": "mono-out.aa", "lang": "aa", "domain": "out"},
      {"path": "mono-in.bb", "lang": "bb", "domain": "in"},
      {"path": "mono-out.bb", "lang": "bb", "domain": "out"}
    ],
    "parallel": [
      {"src_path": "train.aa", "tgt_path": "train.bb", "src_lang": "aa",
       "tgt_lang": "bb", "domain": "in", "split": "train"},
      {"src_path": "valid.aa", "tgt_path": "valid.bb", "src_lang": "aa",
       "tgt_lang": "bb", "domain": "in", "split": "valid"},
      {"src_path": "test.aa", "tgt_path": "test.bb", "src_lang": "aa",
       "tgt_lang": "bb", "domain": "in", "split": "test"}
    ]
  })"});
  return dir;
}

Vocab corpus_vocab(const CorpusManifest& m) {
  std::vector<MonoDataset> sets;
  for (const MonoEntry& e : m.mono) sets.push_back(load_mono(m, e));
  return train_vocab(sets, 80, 1, m.languages);
}

TrainConfig quick_tcfg() {
  TrainConfig t;
  t.dropout = 0.1;
  t.label_smoothing = 0.2;
  t.warmup_steps = 8;
  t.max_lr = 5e-4;
  t.max_updates = 24;
  t.batch_tokens = 128;
  t.checkpoint_interval = 0;  // -> 2
  return t;
}

RunOptions quick_opts(std::uint64_t seed) {
  RunOptions o;
  o.seed = seed;
  o.eval_beam = 2;
  o.valid_beam = 1;
  o.max_output_len = 24;
  o.valid_bleu_sentences = 4;
  o.valid_nll_examples = 16;
  return o;
}

// Flattened "kind:name" stage signature for structural preset checks.
std::vector<std::string> stage_sig(const PipelineRecipe& r) {
  std::vector<std::string> sig;
  for (const StageSpec& s : r.stages) {
    std::string kind = s.kind == StageKind::Cpt
                           ? "cpt"
                           : s.kind == StageKind::Ft ? "ft" : "sweep";
    sig.push_back(kind + ":" + s.name);
  }
  return sig;
}

}  // namespace

TEST_CASE("cpt case names parse in every documented spelling") {
  CHECK(parse_cpt_case("A(i)") == CptCase::A_i);
  CHECK(parse_cpt_case("Ai") == CptCase::A_i);
  CHECK(parse_cpt_case("A_i") == CptCase::A_i);
  CHECK(parse_cpt_case("A(ii)") == CptCase::A_ii);
  CHECK(parse_cpt_case("Aii") == CptCase::A_ii);
  CHECK(parse_cpt_case("A_ii") == CptCase::A_ii);
  CHECK(parse_cpt_case("B") == CptCase::B);
  CHECK(parse_cpt_case("C1") == CptCase::C1);
  CHECK(parse_cpt_case("C2") == CptCase::C2_phase1);  // expands to both phases
  CHECK(parse_cpt_case("C2-phase1") == CptCase::C2_phase1);
  CHECK(parse_cpt_case("C2-phase2") == CptCase::C2_phase2);
  CHECK_FALSE(parse_cpt_case("D").has_value());
  CHECK_FALSE(parse_cpt_case("").has_value());

  CHECK(std::string(cpt_case_name(CptCase::A_i)) == "A(i)");
  CHECK(std::string(cpt_case_name(CptCase::A_ii)) == "A(ii)");
  CHECK(std::string(cpt_case_name(CptCase::B)) == "B");
  CHECK(std::string(cpt_case_name(CptCase::C1)) == "C1");
  CHECK(std::string(cpt_case_name(CptCase::C2_phase1)) == "C2-phase1");
  CHECK(std::string(cpt_case_name(CptCase::C2_phase2)) == "C2-phase2");

  CHECK(std::string(ft_mode_name(FtMode::Bilingual)) == "bilingual");
  CHECK(std::string(ft_mode_name(FtMode::O2M)) == "o2m");
  CHECK(std::string(ft_mode_name(FtMode::M2O)) == "m2o");
  CHECK(std::string(ft_mode_name(FtMode::M2M)) == "m2m");
}

TEST_CASE("multilingual direction expansion is pivot-centric") {
  std::vector<LangCode> langs = {"si", "ta", "en"};

  auto o2m = expand_mft_directions(FtMode::O2M, "si", langs);
  CHECK(o2m == std::vector<Direction>{{"si", "ta"}, {"si", "en"}});

  auto m2o = expand_mft_directions(FtMode::M2O, "si", langs);
  CHECK(m2o == std::vector<Direction>{{"ta", "si"}, {"en", "si"}});

  auto m2m = expand_mft_directions(FtMode::M2M, "ta", langs);
  CHECK(m2m == std::vector<Direction>{
                   {"ta", "si"}, {"ta", "en"}, {"si", "ta"}, {"en", "ta"}});
  CHECK(m2m.size() == 4);

  // Two languages degenerate to a single direction, same as bilingual.
  auto degenerate = expand_mft_directions(FtMode::O2M, "si", {"si", "en"});
  CHECK(degenerate == std::vector<Direction>{{"si", "en"}});

  CHECK_THROWS_WITH_AS(expand_mft_directions(FtMode::O2M, "xx", langs),
                       "config-error: pivot 'xx' not among languages", Error);
  CHECK_THROWS_WITH_AS(expand_mft_directions(FtMode::M2M, "si", {"si"}),
                       "config-error: multilingual mode needs >= 2 languages",
                       Error);
  CHECK_THROWS_WITH_AS(expand_mft_directions(FtMode::Bilingual, "si", langs),
                       "config-error: bilingual mode has no pivot expansion",
                       Error);
}

TEST_CASE("the preset catalogue is fixed") {
  CHECK(recipe_preset_names() ==
        std::vector<std::string>{
            "B-FT", "O2M-FT", "M2O-FT", "M2M-FT", "3-B-FT", "biCPT,B-FT",
            "biCPT,3-B-FT", "triCPT,O2M-FT", "triCPT,M2O-FT", "triCPT,M2M-FT",
            "M-FT(best),B-FT", "triCPT,M-FT(best),B-FT", "biCPT[A(i)],B-FT",
            "biCPT[A(ii)],B-FT", "biCPT[B],B-FT", "biCPT[C1],B-FT",
            "biCPT[C2],B-FT"});
}

TEST_CASE("every preset expands to its golden stage list") {
  CorpusManifest m;
  m.languages = {"si", "ta", "en"};
  RecipeOptions opts;
  opts.target = {"si", "ta"};
  opts.tcfg = quick_tcfg();

  const std::map<std::string, std::vector<std::string>> golden = {
      {"B-FT", {"ft:ft-in"}},
      {"O2M-FT", {"ft:mft-o2m"}},
      {"M2O-FT", {"ft:mft-m2o"}},
      {"M2M-FT", {"ft:mft-m2m"}},
      {"3-B-FT", {"ft:ft-out", "ft:ft-mixed", "ft:ft-in"}},
      {"biCPT,B-FT", {"cpt:cpt", "ft:ft-in"}},
      {"biCPT,3-B-FT", {"cpt:cpt", "ft:ft-out", "ft:ft-mixed", "ft:ft-in"}},
      {"triCPT,O2M-FT", {"cpt:cpt", "ft:mft-o2m"}},
      {"triCPT,M2O-FT", {"cpt:cpt", "ft:mft-m2o"}},
      {"triCPT,M2M-FT", {"cpt:cpt", "ft:mft-m2m"}},
      {"M-FT(best),B-FT", {"sweep:mft-best", "ft:ft-in"}},
      {"triCPT,M-FT(best),B-FT", {"cpt:cpt", "sweep:mft-best", "ft:ft-in"}},
      {"biCPT[A(i)],B-FT", {"cpt:cpt", "ft:ft-in"}},
      {"biCPT[A(ii)],B-FT", {"cpt:cpt", "ft:ft-in"}},
      {"biCPT[B],B-FT", {"cpt:cpt", "ft:ft-in"}},
      {"biCPT[C1],B-FT", {"cpt:cpt", "ft:ft-in"}},
      {"biCPT[C2],B-FT", {"cpt:cpt-phase1", "cpt:cpt-phase2", "ft:ft-in"}},
  };

  for (const std::string& name : recipe_preset_names()) {
    CAPTURE(name);
    PipelineRecipe r = expand_recipe(name, opts, m);
    CHECK(r.name == name);
    REQUIRE(golden.count(name) == 1);
    CHECK(stage_sig(r) == golden.at(name));
    // Every bilingual FT stage targets the requested direction.
    for (const StageSpec& s : r.stages)
      if (s.kind == StageKind::Ft && s.ft.mode == FtMode::Bilingual)
        CHECK(s.ft.directions == std::vector<Direction>{{"si", "ta"}});
  }

  // The four-stage flagship: CPT then out -> mixed -> in fine-tuning.
  PipelineRecipe flagship = expand_recipe("biCPT,3-B-FT", opts, m);
  REQUIRE(flagship.stages.size() == 4);
  CHECK(flagship.stages[0].kind == StageKind::Cpt);
  CHECK(flagship.stages[0].cpt.languages == std::vector<LangCode>{"si", "ta"});
  CHECK(flagship.stages[1].ft.domain == DomainTag::OutDomain);
  CHECK(flagship.stages[2].ft.domain == DomainTag::Mixed);
  CHECK(flagship.stages[3].ft.domain == DomainTag::InDomain);

  // triCPT variants pre-train on every manifest language.
  PipelineRecipe tri = expand_recipe("triCPT,M2M-FT", opts, m);
  CHECK(tri.stages[0].cpt.languages == std::vector<LangCode>{"si", "ta", "en"});
  CHECK(tri.stages[1].ft.directions.size() == 4);
  CHECK(tri.stages[1].ft.pivot == "si");  // defaults to target source

  // The bracketed family pins its CPT case regardless of options.
  opts.cpt_case = CptCase::C1;
  CHECK(expand_recipe("biCPT[B],B-FT", opts, m).stages[0].cpt.cpt_case ==
        CptCase::B);
  CHECK(expand_recipe("biCPT,B-FT", opts, m).stages[0].cpt.cpt_case ==
        CptCase::C1);  // plain biCPT follows the option

  CHECK_THROWS_WITH_AS(expand_recipe("nope", opts, m),
                       "config-error: unknown recipe 'nope'", Error);
  RecipeOptions no_target;
  no_target.tcfg = quick_tcfg();
  CHECK_THROWS_WITH_AS(expand_recipe("B-FT", no_target, m),
                       "config-error: recipe needs a target direction", Error);
}

TEST_CASE("recipe json serialization is a frozen golden") {
  CorpusManifest m;
  m.languages = {"si", "ta", "en"};
  RecipeOptions opts;
  opts.target = {"si", "ta"};
  opts.tcfg = quick_tcfg();

  const std::string tcfg_json = R"x({
    "dropout": 0.1, "label_smoothing": 0.2, "warmup_steps": 8,
    "max_lr": 5e-4, "max_updates": 24, "batch_tokens": 128,
    "checkpoint_interval": 2, "lr_decay": "inverse_sqrt"
  })x";

  json want = json::parse(R"x({
    "name": "biCPT,3-B-FT",
    "stages": [
      {"name": "cpt", "kind": "cpt", "case": "A(i)", "languages": ["si", "ta"],
       "tcfg": )x" + tcfg_json + R"x(},
      {"name": "ft-out", "kind": "ft", "mode": "bilingual", "domain": "out",
       "directions": ["si-ta"], "tcfg": )x" + tcfg_json + R"x(},
      {"name": "ft-mixed", "kind": "ft", "mode": "bilingual", "domain": "mixed",
       "directions": ["si-ta"], "tcfg": )x" + tcfg_json + R"x(},
      {"name": "ft-in", "kind": "ft", "mode": "bilingual", "domain": "in",
       "directions": ["si-ta"], "tcfg": )x" + tcfg_json + R"x(}
    ]
  })x");
  CHECK(json::parse(recipe_to_json(expand_recipe("biCPT,3-B-FT", opts, m))) ==
        want);

  json sweep_want = json::parse(R"x({
    "name": "triCPT,M-FT(best),B-FT",
    "stages": [
      {"name": "cpt", "kind": "cpt", "case": "A(i)",
       "languages": ["si", "ta", "en"], "tcfg": )x" + tcfg_json + R"x(},
      {"name": "mft-best", "kind": "mft-sweep", "modes": ["o2m", "m2o", "m2m"],
       "domain": "in", "pivot": "si", "tcfg": )x" + tcfg_json + R"x(},
      {"name": "ft-in", "kind": "ft", "mode": "bilingual", "domain": "in",
       "directions": ["si-ta"], "tcfg": )x" + tcfg_json + R"x(}
    ]
  })x");
  CHECK(json::parse(recipe_to_json(
            expand_recipe("triCPT,M-FT(best),B-FT", opts, m))) == sweep_want);

  json m2m_want = json::parse(R"x({
    "name": "M2M-FT",
    "stages": [
      {"name": "mft-m2m", "kind": "ft", "mode": "m2m", "domain": "in",
       "directions": ["si-ta", "si-en", "ta-si", "en-si"], "pivot": "si",
       "tcfg": )x" + tcfg_json + R"x(}
    ]
  })x");
  CHECK(json::parse(recipe_to_json(expand_recipe("M2M-FT", opts, m))) ==
        m2m_want);
}

TEST_CASE("cpt data cases select the documented domains") {
  fs::path dir = make_corpus_dir("cptdata");
  CorpusManifest m = load_manifest((dir / "manifest.json").string());
  std::vector<LangCode> langs = {"aa", "bb"};

  auto lines_of = [&](const fs::path& p) { return clean(read_lines(p.string())); };
  auto in_aa = lines_of(dir / "mono-in.aa");
  auto out_aa = lines_of(dir / "mono-out.aa");
  auto train_aa = lines_of(dir / "train.aa");
  auto in_bb = lines_of(dir / "mono-in.bb");
  auto out_bb = lines_of(dir / "mono-out.bb");
  auto train_bb = lines_of(dir / "train.bb");

  SUBCASE("A(i): in-domain mono only") {
    auto sets = build_cpt_data(m, CptCase::A_i, langs);
    REQUIRE(sets.size() == 2);
    CHECK(sets[0].lang == "aa");
    CHECK(sets[0].domain == DomainTag::InDomain);
    CHECK(sets[0].lines == in_aa);
    CHECK(sets[1].lang == "bb");
    CHECK(sets[1].lines == in_bb);
  }
  SUBCASE("A(ii): in-domain mono plus both sides of in-domain train parallel") {
    auto sets = build_cpt_data(m, CptCase::A_ii, langs);
    auto want_aa = in_aa;
    want_aa.insert(want_aa.end(), train_aa.begin(), train_aa.end());
    auto want_bb = in_bb;
    want_bb.insert(want_bb.end(), train_bb.begin(), train_bb.end());
    CHECK(sets[0].lines == want_aa);
    CHECK(sets[1].lines == want_bb);
  }
  SUBCASE("B: out-domain mono only") {
    auto sets = build_cpt_data(m, CptCase::B, langs);
    CHECK(sets[0].domain == DomainTag::OutDomain);
    CHECK(sets[0].lines == out_aa);
    CHECK(sets[1].lines == out_bb);
  }
  SUBCASE("C1: union of in- and out-domain mono, tagged mixed") {
    auto sets = build_cpt_data(m, CptCase::C1, langs);
    auto want_aa = in_aa;
    want_aa.insert(want_aa.end(), out_aa.begin(), out_aa.end());
    CHECK(sets[0].domain == DomainTag::Mixed);
    CHECK(sets[0].lines == want_aa);
  }
  SUBCASE("C2 phases cover disjoint domains") {
    auto phase1 = build_cpt_data(m, CptCase::C2_phase1, langs);
    auto phase2 = build_cpt_data(m, CptCase::C2_phase2, langs);
    CHECK(phase1[0].lines == out_aa);
    CHECK(phase2[0].lines == in_aa);
    std::set<std::string> p1(phase1[0].lines.begin(), phase1[0].lines.end());
    for (const std::string& l : phase2[0].lines) CHECK(p1.count(l) == 0);
  }
  SUBCASE("missing domain data is an error") {
    CorpusManifest stripped = m;
    stripped.mono.erase(
        std::remove_if(stripped.mono.begin(), stripped.mono.end(),
                       [](const MonoEntry& e) {
                         return e.lang == "bb" && e.domain == DomainTag::OutDomain;
                       }),
        stripped.mono.end());
    CHECK_THROWS_WITH_AS(build_cpt_data(stripped, CptCase::B, langs),
                         "data-error: no B monolingual data for language 'bb'",
                         Error);
  }
  SUBCASE("fewer than two languages is an error") {
    CHECK_THROWS_WITH_AS(build_cpt_data(m, CptCase::A_i, {"aa"}),
                         "config-error: CPT needs at least 2 languages, got 1",
                         Error);
  }
  fs::remove_all(dir);
}

TEST_CASE("A(ii) counts each parallel file side once even when reused") {
  fs::path dir = temp_dir("aii_dedup");
  write_file(dir / "mono.aa", word_lines(8, 1, 4));
  write_file(dir / "mono.bb", word_lines(8, 2, 4));
  auto src = word_lines(5, 1, 3);
  write_file(dir / "train.aa", src);
  write_file(dir / "train1.bb", word_lines(5, 3, 3));
  write_file(dir / "train2.bb", word_lines(5, 4, 3));
  write_file(dir / "manifest.json", {R"({
    "languages": ["aa", "bb"],
    "mono": [
      {"path": "mono.aa", "lang": "aa", "domain": "in"},
      {"path": "mono.bb", "lang": "bb", "domain": "in"}
    ],
    "parallel": [
      {"src_path": "train.aa", "tgt_path": "train1.bb", "src_lang": "aa",
       "tgt_lang": "bb", "domain": "in", "split": "train"},
      {"src_path": "train.aa", "tgt_path": "train2.bb", "src_lang": "aa",
       "tgt_lang": "bb", "domain": "in", "split": "train"}
    ]
  })"});
  CorpusManifest m = load_manifest((dir / "manifest.json").string());

  auto sets = build_cpt_data(m, CptCase::A_ii, {"aa", "bb"});
  CHECK(sets[0].lines.size() == 8 + 5);       // train.aa appears once
  CHECK(sets[1].lines.size() == 8 + 5 + 5);   // both distinct target files
  fs::remove_all(dir);
}

TEST_CASE("select_final prefers lowest NLL, ties to the later update") {
  auto ck = [](const std::string& path, std::int64_t update, double nll) {
    ScoredCheckpoint c;
    c.path = path;
    c.meta.update_count = update;
    c.meta.valid_nll = nll;
    return c;
  };

  CHECK(select_final({ck("only", 10, 2.0)}).path == "only");
  CHECK(select_final({ck("a", 900, 1.2), ck("b", 1000, 1.1)}).path == "b");
  CHECK(select_final({ck("a", 1000, 1.1), ck("b", 900, 1.2)}).path == "a");
  CHECK(select_final({ck("a", 900, 1.1), ck("b", 1000, 1.1)}).path == "b");
  CHECK(select_final({ck("b", 1000, 1.1), ck("a", 900, 1.1)}).path == "b");
  CHECK_THROWS_WITH_AS(select_final({}), "train-error: no scored checkpoints",
                       Error);
}

TEST_CASE("run records survive a json round-trip") {
  RunRecord r;
  r.recipe = "triCPT,M-FT(best),B-FT";
  r.pivot = "si";
  r.seed = 42;
  StageRunInfo s0;
  s0.name = "cpt";
  s0.dir = "stage00_cpt";
  s0.selected_checkpoint = "stage00_cpt/ckpt_00000020.ckpt";
  s0.selected_update = 20;
  s0.selected_valid_nll = 3.25;
  StageRunInfo s1;
  s1.name = "mft-best";
  s1.dir = "stage01_mft-best";
  s1.selected_checkpoint = "stage01_mft-best/m2o/ckpt_00000010.ckpt";
  s1.selected_update = 10;
  s1.selected_valid_nll = 2.5;
  s1.selected_valid_bleu = 31.16;
  s1.chosen_mode = "m2o";
  r.stages = {s0, s1};
  r.valid_bleu = {{"si-ta", 30.0}, {"ta-si", 28.5}};
  r.test_bleu = {{"si-ta", 29.75}};
  r.final_checkpoint = s1.selected_checkpoint;

  RunRecord back = run_record_from_json(run_record_to_json(r));
  CHECK(back.recipe == r.recipe);
  CHECK(back.pivot == r.pivot);
  CHECK(back.seed == r.seed);
  REQUIRE(back.stages.size() == 2);
  CHECK(back.stages[0].name == "cpt");
  CHECK_FALSE(back.stages[0].selected_valid_bleu.has_value());
  CHECK(back.stages[0].chosen_mode.empty());
  CHECK(back.stages[1].selected_valid_bleu == 31.16);
  CHECK(back.stages[1].chosen_mode == "m2o");
  CHECK(back.stages[1].selected_update == 10);
  CHECK(back.valid_bleu == r.valid_bleu);
  CHECK(back.test_bleu == r.test_bleu);
  CHECK(back.final_checkpoint == r.final_checkpoint);
  // Serialization is stable once parsed back.
  CHECK(run_record_to_json(back) == run_record_to_json(r));

  // An empty pivot is rendered as "-".
  RunRecord plain;
  plain.recipe = "B-FT";
  CHECK(run_record_from_json(run_record_to_json(plain)).pivot == "-");

  CHECK_THROWS_WITH_AS(run_record_from_json("{nope"),
                       doctest::Contains("bad run record"), Error);
  CHECK_THROWS_WITH_AS(run_record_from_json("{\"recipe\": \"x\"}"),
                       doctest::Contains("bad run record"), Error);

  fs::path dir = temp_dir("runrecord");
  std::ofstream((dir / "run_record.json").string()) << run_record_to_json(r);
  RunRecord loaded = load_run_record((dir / "run_record.json").string());
  CHECK(run_record_to_json(loaded) == run_record_to_json(r));
  CHECK_THROWS_WITH_AS(load_run_record((dir / "missing.json").string()),
                       doctest::Contains("cannot open run record"), Error);
  fs::remove_all(dir);
}

TEST_CASE("parallel examples follow the LID framing conventions") {
  fs::path dir = make_corpus_dir("mkexamples");
  CorpusManifest m = load_manifest((dir / "manifest.json").string());
  Vocab v = corpus_vocab(m);

  ParallelDataset data;
  data.src_lang = "aa";
  data.tgt_lang = "bb";
  data.pairs = {{"ba da", "ka"}, {"ga", "ma ba"}};
  auto ex = make_parallel_examples(data, v, 64);
  REQUIRE(ex.size() == 2);

  TokenSeq src = v.encode("ba da");
  TokenSeq tgt = v.encode("ka");
  TokenSeq want_enc = src;
  want_enc.push_back(v.lid_id("aa"));
  CHECK(ex[0].encoder_input == want_enc);
  TokenSeq want_dec = {v.lid_id("bb")};
  want_dec.insert(want_dec.end(), tgt.begin(), tgt.end());
  CHECK(ex[0].decoder_input == want_dec);
  TokenSeq want_lab = tgt;
  want_lab.push_back(v.eos_id());
  CHECK(ex[0].labels == want_lab);

  // Length guard: overlong pairs are dropped, not truncated.
  ParallelDataset mixed = data;
  mixed.pairs.push_back({"ba da ga ka ma ba da ga ka ma", "ka"});
  std::size_t long_src = v.encode(mixed.pairs[2].src).size() + 1;
  auto kept = make_parallel_examples(mixed, v, static_cast<int>(long_src) - 1);
  CHECK(kept.size() == 2);

  ParallelDataset hopeless = data;
  CHECK_THROWS_WITH_AS(
      make_parallel_examples(hopeless, v, 2),
      "data-error: no usable pairs for aa-bb (all dropped by length guard)",
      Error);
  fs::remove_all(dir);
}

TEST_CASE("run_recipe executes, records, and reproduces a B-FT run") {
  fs::path dir = make_corpus_dir("run_bft");
  CorpusManifest m = load_manifest((dir / "manifest.json").string());
  Vocab v = corpus_vocab(m);

  ModelConfig mcfg;
  mcfg.layers = 1;
  mcfg.d_model = 16;
  mcfg.heads = 2;
  mcfg.ffn_dim = 32;
  mcfg.vocab_size = static_cast<int>(v.size());
  mcfg.max_len = 64;
  mcfg.dropout = 0.1;

  RecipeOptions ropts;
  ropts.target = {"aa", "bb"};
  ropts.tcfg = quick_tcfg();
  PipelineRecipe recipe = expand_recipe("B-FT", ropts, m);

  fs::path run1 = dir / "run1";
  RunRecord rec = run_recipe(recipe, m, mcfg, v, run1.string(), quick_opts(7));

  CHECK(rec.recipe == "B-FT");
  CHECK(rec.pivot.empty());
  CHECK(rec.seed == 7);
  REQUIRE(rec.stages.size() == 1);
  CHECK(rec.stages[0].name == "ft-in");
  CHECK(rec.stages[0].dir == "stage00_ft-in");
  CHECK(rec.stages[0].selected_checkpoint.rfind("stage00_ft-in/", 0) == 0);
  CHECK(rec.stages[0].selected_update > 0);
  CHECK(rec.stages[0].selected_valid_bleu.has_value());
  CHECK(rec.final_checkpoint == rec.stages[0].selected_checkpoint);
  REQUIRE(rec.test_bleu.count("aa-bb") == 1);
  CHECK(rec.test_bleu.at("aa-bb") >= 0.0);
  CHECK(rec.test_bleu.at("aa-bb") <= 100.0);
  CHECK(rec.valid_bleu.count("aa-bb") == 1);

  CHECK(fs::exists(run1 / "effective_config.json"));
  CHECK(fs::exists(run1 / "stage00_ft-in" / "stage.json"));
  CHECK(fs::exists(run1 / rec.final_checkpoint));
  RunRecord on_disk = load_run_record((run1 / "run_record.json").string());
  CHECK(run_record_to_json(on_disk) == run_record_to_json(rec));

  // Same seed, fresh directory: bit-identical record.
  fs::path run2 = dir / "run2";
  RunRecord rec2 = run_recipe(recipe, m, mcfg, v, run2.string(), quick_opts(7));
  CHECK(run_record_to_json(rec2) == run_record_to_json(rec));

  // Re-running a completed directory skips training via the stage markers.
  RunRecord rec3 = run_recipe(recipe, m, mcfg, v, run1.string(), quick_opts(7));
  CHECK(run_record_to_json(rec3) == run_record_to_json(rec));

  // A changed stage configuration must not silently reuse old directories.
  PipelineRecipe altered = recipe;
  altered.stages[0].tcfg.max_updates = 25;
  CHECK_THROWS_WITH_AS(
      run_recipe(altered, m, mcfg, v, run1.string(), quick_opts(7)),
      doctest::Contains("was produced by a different configuration"), Error);

  // A different seed changes the outcome paperwork (update counts may tie,
  // but the validation losses of a randomly initialised net will not).
  fs::path run3 = dir / "run3";
  RunRecord other = run_recipe(recipe, m, mcfg, v, run3.string(), quick_opts(8));
  CHECK(other.stages[0].selected_valid_nll != rec.stages[0].selected_valid_nll);
  fs::remove_all(dir);
}

TEST_CASE("run_recipe resumes a two-stage recipe at the stage boundary") {
  fs::path dir = make_corpus_dir("run_resume");
  CorpusManifest m = load_manifest((dir / "manifest.json").string());
  Vocab v = corpus_vocab(m);

  ModelConfig mcfg;
  mcfg.layers = 1;
  mcfg.d_model = 16;
  mcfg.heads = 2;
  mcfg.ffn_dim = 32;
  mcfg.vocab_size = static_cast<int>(v.size());
  mcfg.max_len = 160;  // CPT instances pack up to 128 tokens
  mcfg.dropout = 0.1;

  RecipeOptions ropts;
  ropts.target = {"aa", "bb"};
  ropts.tcfg = quick_tcfg();
  PipelineRecipe recipe = expand_recipe("biCPT,B-FT", ropts, m);
  REQUIRE(recipe.stages.size() == 2);

  // Interrupted run: only the CPT stage executes.
  fs::path part = dir / "partial";
  RunOptions stop1 = quick_opts(7);
  stop1.stop_after = 1;
  RunRecord partial = run_recipe(recipe, m, mcfg, v, part.string(), stop1);
  CHECK(partial.stages.size() == 1);
  CHECK(partial.stages[0].name == "cpt");
  CHECK(partial.final_checkpoint.empty());
  CHECK(partial.test_bleu.empty());
  CHECK(fs::exists(part / "stage00_cpt" / "stage.json"));
  CHECK_FALSE(fs::exists(part / "stage01_ft-in" / "stage.json"));

  // Resume completes the fine-tune; an uninterrupted run must match bit-wise.
  RunRecord resumed = run_recipe(recipe, m, mcfg, v, part.string(), quick_opts(7));
  REQUIRE(resumed.stages.size() == 2);
  CHECK(resumed.stages[1].name == "ft-in");
  CHECK(resumed.final_checkpoint == resumed.stages[1].selected_checkpoint);

  fs::path whole = dir / "whole";
  RunRecord straight = run_recipe(recipe, m, mcfg, v, whole.string(), quick_opts(7));
  CHECK(run_record_to_json(straight) == run_record_to_json(resumed));
  fs::remove_all(dir);
}
