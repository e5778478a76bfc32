#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lrlf/corpus.hpp"
#include "lrlf/decode.hpp"
#include "lrlf/eval.hpp"
#include "lrlf/model.hpp"
#include "lrlf/noising.hpp"
#include "lrlf/pipeline.hpp"
#include "lrlf/subword.hpp"
#include "lrlf/synth.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace lrlf;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

Direction parse_direction(const std::string& s) {
  auto dash = s.find('-');
  if (dash == std::string::npos || dash == 0 || dash + 1 == s.size())
    throw config_error("direction must look like src-tgt, got '" + s + "'");
  return {s.substr(0, dash), s.substr(dash + 1)};
}

ModelConfig model_by_name(const std::string& name, std::size_t vocab_size) {
  ModelConfig cfg;
  if (name == "tiny")
    cfg = ModelConfig::tiny(vocab_size);
  else if (name == "paper-mbart-shape")
    cfg = ModelConfig::paper_mbart_shape(vocab_size);
  else
    throw config_error("unknown model preset '" + name + "' (tiny, paper-mbart-shape)");
  return cfg;
}

// Shared training-schedule flags; values <= 0 mean "keep the scaled default".
struct TrainFlags {
  double scale = 0.01;
  std::int64_t updates = 0;
  std::int64_t warmup = 0;
  std::int64_t batch_tokens = 0;
  double max_lr = 0;
  double dropout = -1;
  double smoothing = -1;
  std::int64_t interval = 0;

  TrainConfig build() const {
    TrainConfig t = TrainConfig::desk(scale);
    if (updates > 0) t.max_updates = updates;
    if (warmup > 0) t.warmup_steps = warmup;
    if (batch_tokens > 0) t.batch_tokens = batch_tokens;
    if (max_lr > 0) t.max_lr = max_lr;
    if (dropout >= 0) t.dropout = dropout;
    if (smoothing >= 0) t.label_smoothing = smoothing;
    if (interval > 0) t.checkpoint_interval = interval;
    t.validate();
    return t;
  }
};

void add_train_flags(CLI::App* cmd, TrainFlags& tf) {
  cmd->add_option("--scale", tf.scale, "desk schedule scale (fraction of the full recipe)");
  cmd->add_option("--updates", tf.updates, "override max updates");
  cmd->add_option("--warmup", tf.warmup, "override warmup steps");
  cmd->add_option("--batch-tokens", tf.batch_tokens, "override batch token budget");
  cmd->add_option("--max-lr", tf.max_lr, "override peak learning rate");
  cmd->add_option("--dropout", tf.dropout, "override dropout");
  cmd->add_option("--smoothing", tf.smoothing, "override label smoothing");
  cmd->add_option("--ckpt-interval", tf.interval, "override checkpoint interval");
}

void print_record_summary(const RunRecord& rec, const std::string& run_dir) {
  std::cout << "recipe " << rec.recipe << ": " << rec.stages.size()
            << " stage(s) done\n";
  for (const auto& [dir, bleu] : rec.test_bleu) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << bleu;
    std::cout << "  test BLEU " << dir << " = " << os.str() << "\n";
  }
  std::cout << "run record: " << (fs::path(run_dir) / "run_record.json").string()
            << "\n";
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"lrlf — desk-scale recipes for low-resource translation"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  int threads = 1;
  app.add_option("--seed", seed, "global RNG seed")->envname("LRLF_SEED");
  app.add_option("--threads", threads,
                 "worker cap (1 guarantees determinism; no stage currently fans out)")
      ->check(CLI::PositiveNumber);

  // ---------------------------------------------------------------- prepare
  auto* prepare = app.add_subcommand("prepare", "materialize a corpus directory");
  bool synthetic = false;
  std::string prep_out;
  SynthConfig synth_cfg;
  prepare->add_flag("--synthetic", synthetic, "generate the three toy languages");
  prepare->add_option("--out", prep_out, "output directory")->required();
  prepare->add_option("--lexicon", synth_cfg.lexicon, "words per language");
  prepare->add_option("--in-train", synth_cfg.in_train, "in-domain train pairs");
  prepare->add_option("--in-valid", synth_cfg.in_valid, "in-domain valid pairs");
  prepare->add_option("--in-test", synth_cfg.in_test, "in-domain test pairs");
  prepare->add_option("--out-train", synth_cfg.out_train, "out-domain train pairs");
  prepare->add_option("--mono-in", synth_cfg.mono_in, "in-domain mono lines per language");
  prepare->add_option("--mono-out", synth_cfg.mono_out, "out-domain mono lines per language");
  prepare->callback([&] {
    if (!synthetic)
      throw config_error("only --synthetic corpora can be prepared; real corpora "
                         "are described by a hand-written manifest.json");
    synth_cfg.seed = seed;
    std::string manifest = write_synthetic_corpus(prep_out, synth_cfg);
    ordered_json frozen;
    frozen["seed"] = synth_cfg.seed;
    frozen["lexicon"] = synth_cfg.lexicon;
    frozen["in_train"] = synth_cfg.in_train;
    frozen["in_valid"] = synth_cfg.in_valid;
    frozen["in_test"] = synth_cfg.in_test;
    frozen["out_train"] = synth_cfg.out_train;
    frozen["mono_in"] = synth_cfg.mono_in;
    frozen["mono_out"] = synth_cfg.mono_out;
    std::ofstream cfg_out(fs::path(prep_out) / "synth_config.json");
    cfg_out << frozen.dump(2) << "\n";
    std::cout << manifest << "\n";
  });

  // ------------------------------------------------------------ train-vocab
  auto* tv = app.add_subcommand("train-vocab", "learn a byte-BPE vocabulary");
  std::string tv_manifest, tv_out;
  std::size_t tv_size = 256;
  tv->add_option("--manifest", tv_manifest, "corpus manifest")->required();
  tv->add_option("--size", tv_size, "total vocabulary size (ids)");
  tv->add_option("--out", tv_out, "output vocab file")->required();
  tv->callback([&] {
    CorpusManifest m = load_manifest(tv_manifest);
    std::vector<MonoDataset> corpora;
    for (const MonoEntry& e : m.mono) corpora.push_back(load_mono(m, e));
    Vocab v = train_vocab(corpora, tv_size, seed, m.languages);
    v.save(tv_out);
    ordered_json frozen;
    frozen["manifest"] = tv_manifest;
    frozen["size"] = tv_size;
    frozen["seed"] = seed;
    frozen["languages"] = m.languages;
    std::ofstream cfg_out(tv_out + ".train.json");
    cfg_out << frozen.dump(2) << "\n";
    std::cout << tv_out << " (" << v.size() << " ids, "
              << v.num_specials() << " specials)\n";
  });

  // -------------------------------------------------------------------- cpt
  auto* cpt = app.add_subcommand("cpt", "continual pre-training (denoising)");
  std::string cpt_manifest, cpt_vocab, cpt_out, cpt_case_str = "A(i)",
              cpt_langs_str, cpt_model = "tiny", cpt_init;
  TrainFlags cpt_tf;
  cpt->add_option("--manifest", cpt_manifest, "corpus manifest")->required();
  cpt->add_option("--vocab", cpt_vocab, "vocab file")->required();
  cpt->add_option("--out", cpt_out, "run directory")->required();
  cpt->add_option("--case", cpt_case_str, "A(i) | A(ii) | B | C1 | C2");
  cpt->add_option("--langs", cpt_langs_str, "comma list (default: all manifest languages)");
  cpt->add_option("--model", cpt_model, "model preset (tiny, paper-mbart-shape)");
  cpt->add_option("--init", cpt_init, "start from this checkpoint");
  add_train_flags(cpt, cpt_tf);
  cpt->callback([&] {
    CorpusManifest m = load_manifest(cpt_manifest);
    Vocab v = Vocab::load(cpt_vocab);
    auto parsed = parse_cpt_case(cpt_case_str);
    if (!parsed) throw config_error("unknown CPT case '" + cpt_case_str + "'");
    std::vector<LangCode> langs =
        cpt_langs_str.empty() ? m.languages : split_commas(cpt_langs_str);
    TrainConfig tcfg = cpt_tf.build();

    PipelineRecipe recipe;
    recipe.name = "cpt[" + cpt_case_str + "]";
    auto stage = [&](const char* nm, CptCase c) {
      StageSpec s;
      s.name = nm;
      s.kind = StageKind::Cpt;
      s.cpt.cpt_case = c;
      s.cpt.languages = langs;
      s.tcfg = tcfg;
      return s;
    };
    if (cpt_case_str == "C2")
      recipe.stages = {stage("cpt-phase1", CptCase::C2_phase1),
                       stage("cpt-phase2", CptCase::C2_phase2)};
    else
      recipe.stages = {stage("cpt", *parsed)};

    ModelConfig mcfg = model_by_name(cpt_model, v.size());
    RunOptions opts;
    opts.seed = seed;
    opts.init_checkpoint = cpt_init;
    RunRecord rec = run_recipe(recipe, m, mcfg, v, cpt_out, opts);
    print_record_summary(rec, cpt_out);
  });

  // --------------------------------------------------------------- finetune
  auto* ft = app.add_subcommand("finetune", "one fine-tuning stage");
  std::string ft_manifest, ft_vocab, ft_out, ft_dir_str, ft_mode_str = "bilingual",
              ft_pivot, ft_domain_str = "in", ft_model = "tiny", ft_init;
  TrainFlags ft_tf;
  ft->add_option("--manifest", ft_manifest, "corpus manifest")->required();
  ft->add_option("--vocab", ft_vocab, "vocab file")->required();
  ft->add_option("--out", ft_out, "run directory")->required();
  ft->add_option("--direction", ft_dir_str, "src-tgt (bilingual mode)");
  ft->add_option("--mode", ft_mode_str, "bilingual | o2m | m2o | m2m");
  ft->add_option("--pivot", ft_pivot, "pivot language (multilingual modes)");
  ft->add_option("--domain", ft_domain_str, "in | out | mixed");
  ft->add_option("--model", ft_model, "model preset");
  ft->add_option("--init", ft_init, "start from this checkpoint");
  add_train_flags(ft, ft_tf);
  ft->callback([&] {
    CorpusManifest m = load_manifest(ft_manifest);
    Vocab v = Vocab::load(ft_vocab);
    StageSpec s;
    s.kind = StageKind::Ft;
    s.tcfg = ft_tf.build();
    if (ft_mode_str == "bilingual") {
      if (ft_dir_str.empty()) throw config_error("bilingual finetune needs --direction");
      s.ft.mode = FtMode::Bilingual;
      s.ft.directions = {parse_direction(ft_dir_str)};
      s.name = "ft";
    } else {
      FtMode mode;
      if (ft_mode_str == "o2m") mode = FtMode::O2M;
      else if (ft_mode_str == "m2o") mode = FtMode::M2O;
      else if (ft_mode_str == "m2m") mode = FtMode::M2M;
      else throw config_error("unknown mode '" + ft_mode_str + "'");
      if (ft_pivot.empty()) throw config_error("multilingual finetune needs --pivot");
      s.ft.mode = mode;
      s.ft.pivot = ft_pivot;
      s.ft.directions = expand_mft_directions(mode, ft_pivot, m.languages);
      s.name = std::string("mft-") + ft_mode_name(mode);
    }
    auto dom = parse_domain(ft_domain_str);
    if (!dom) throw config_error("unknown domain '" + ft_domain_str + "'");
    s.ft.domain = *dom;

    PipelineRecipe recipe;
    recipe.name = "finetune";
    recipe.stages = {s};
    ModelConfig mcfg = model_by_name(ft_model, v.size());
    RunOptions opts;
    opts.seed = seed;
    opts.init_checkpoint = ft_init;
    RunRecord rec = run_recipe(recipe, m, mcfg, v, ft_out, opts);
    print_record_summary(rec, ft_out);
  });

  // --------------------------------------------------------------- pipeline
  auto* pipe = app.add_subcommand("pipeline", "named multistage recipes");
  pipe->require_subcommand(1);
  auto* pipe_list = pipe->add_subcommand("list", "list recipe presets");
  pipe_list->callback([&] {
    for (const std::string& n : recipe_preset_names()) std::cout << n << "\n";
  });

  auto* pipe_run = pipe->add_subcommand("run", "execute a recipe preset");
  std::string pr_name, pr_manifest, pr_vocab, pr_out, pr_target, pr_pivot,
      pr_case = "A(i)", pr_cpt_langs, pr_model = "tiny";
  TrainFlags pr_tf;
  int pr_stop_after = 0, pr_eval_beam = 5, pr_valid_beam = 1, pr_max_out = 64;
  pipe_run->add_option("recipe", pr_name, "preset name (see `pipeline list`)")->required();
  pipe_run->add_option("--manifest", pr_manifest, "corpus manifest")->required();
  pipe_run->add_option("--vocab", pr_vocab, "vocab file")->required();
  pipe_run->add_option("--out", pr_out, "run directory")->required();
  pipe_run->add_option("--target", pr_target, "target direction src-tgt")->required();
  pipe_run->add_option("--pivot", pr_pivot, "pivot language (defaults to target source)");
  pipe_run->add_option("--case", pr_case, "CPT case for CPT stages");
  pipe_run->add_option("--cpt-langs", pr_cpt_langs, "comma list for CPT stages");
  pipe_run->add_option("--model", pr_model, "model preset");
  pipe_run->add_option("--stop-after", pr_stop_after, "run only the first N stages");
  pipe_run->add_option("--eval-beam", pr_eval_beam, "test-set beam size");
  pipe_run->add_option("--valid-beam", pr_valid_beam, "validation beam size");
  pipe_run->add_option("--max-output-len", pr_max_out, "decode length cap");
  add_train_flags(pipe_run, pr_tf);
  pipe_run->callback([&] {
    CorpusManifest m = load_manifest(pr_manifest);
    Vocab v = Vocab::load(pr_vocab);
    RecipeOptions ropts;
    ropts.target = parse_direction(pr_target);
    ropts.pivot = pr_pivot;
    auto parsed = parse_cpt_case(pr_case);
    if (!parsed) throw config_error("unknown CPT case '" + pr_case + "'");
    ropts.cpt_case = *parsed;
    if (!pr_cpt_langs.empty()) ropts.cpt_languages = split_commas(pr_cpt_langs);
    ropts.scale = pr_tf.scale;
    ropts.tcfg = pr_tf.build();
    ropts.seed = seed;
    PipelineRecipe recipe = expand_recipe(pr_name, ropts, m);
    ModelConfig mcfg = model_by_name(pr_model, v.size());
    RunOptions opts;
    opts.seed = seed;
    opts.eval_beam = pr_eval_beam;
    opts.valid_beam = pr_valid_beam;
    opts.max_output_len = pr_max_out;
    opts.stop_after = pr_stop_after;
    RunRecord rec = run_recipe(recipe, m, mcfg, v, pr_out, opts);
    if (pr_stop_after > 0 &&
        rec.stages.size() < recipe.stages.size()) {
      std::cout << "stopped after " << rec.stages.size() << " of "
                << recipe.stages.size() << " stages; re-run to resume\n";
      return;
    }
    print_record_summary(rec, pr_out);
  });

  // -------------------------------------------------------------- translate
  auto* tr = app.add_subcommand("translate", "decode a file with 1-3 models");
  std::string tr_models, tr_vocab, tr_src_lang, tr_tgt_lang, tr_in, tr_out_path;
  int tr_beam = 5, tr_max_len = 128;
  double tr_alpha = 0;
  bool tr_avg_log = false, tr_repair = false;
  tr->add_option("--model", tr_models, "checkpoint path(s), comma-separated (max 3)")->required();
  tr->add_option("--vocab", tr_vocab, "vocab file")->required();
  tr->add_option("--src-lang", tr_src_lang, "source language code")->required();
  tr->add_option("--tgt-lang", tr_tgt_lang, "target language code")->required();
  tr->add_option("--in", tr_in, "source file")->required();
  tr->add_option("--out", tr_out_path, "output file")->required();
  tr->add_option("--beam", tr_beam, "beam size");
  tr->add_option("--max-len", tr_max_len, "output length cap");
  tr->add_option("--alpha", tr_alpha, "length penalty exponent");
  tr->add_flag("--avg-logprobs", tr_avg_log, "geometric instead of arithmetic mean");
  tr->add_flag("--repair-zwj", tr_repair, "apply joiner repair to outputs");
  tr->callback([&] {
    Vocab v = Vocab::load(tr_vocab);
    EnsembleSpec spec;
    for (const std::string& path : split_commas(tr_models))
      spec.members.push_back(load_checkpoint(path));
    spec.source = EnsembleSource::MultiModel;
    spec.validate();
    std::vector<Transformer<float>> members = build_members(spec);
    DecodeConfig dc;
    dc.beam_size = tr_beam;
    dc.max_output_len = tr_max_len;
    dc.length_penalty = tr_alpha;
    dc.target_lang = tr_tgt_lang;
    dc.average_logprobs = tr_avg_log;
    TranslateSummary sum =
        translate_file(members, dc, v, tr_src_lang, tr_in, tr_out_path, tr_repair);
    for (const std::string& w : sum.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "translated " << sum.lines << " lines (" << sum.failures
              << " failures) -> " << tr_out_path << "\n";
  });

  // ------------------------------------------------------------------ score
  auto* sc = app.add_subcommand("score", "corpus BLEU of a hypothesis file");
  std::string sc_hyp, sc_ref;
  bool sc_lc = false;
  sc->add_option("--hyp", sc_hyp, "hypothesis file")->required();
  sc->add_option("--ref", sc_ref, "reference file")->required();
  sc->add_flag("--lc", sc_lc, "lowercase both sides before scoring");
  sc->callback([&] {
    std::vector<std::string> hyp_lines = read_lines(sc_hyp);
    std::vector<std::string> ref_lines = read_lines(sc_ref);
    std::vector<std::vector<std::string>> hyps, refs;
    for (const std::string& l : hyp_lines) hyps.push_back(tokenize_line(l, sc_lc));
    for (const std::string& l : ref_lines) refs.push_back(tokenize_line(l, sc_lc));
    std::cout << format_bleu(corpus_bleu(hyps, refs)) << "\n";
  });

  // ----------------------------------------------------------------- report
  auto* rp = app.add_subcommand("report", "score table with deltas vs a baseline");
  std::string rp_runs, rp_baseline, rp_out, rp_json;
  rp->add_option("--runs", rp_runs, "comma list of run directories")->required();
  rp->add_option("--baseline", rp_baseline, "recipe name of the baseline run")->required();
  rp->add_option("--out", rp_out, "also write the text table here");
  rp->add_option("--json", rp_json, "also write the structured form here");
  rp->callback([&] {
    std::vector<RunSummary> records;
    for (const std::string& dir : split_commas(rp_runs)) {
      std::string path = fs::is_directory(dir)
                             ? (fs::path(dir) / "run_record.json").string()
                             : dir;
      RunRecord rec = load_run_record(path);
      RunSummary s;
      s.name = rec.recipe;
      s.pivot = rec.pivot.empty() ? "-" : rec.pivot;
      s.direction_bleu = rec.test_bleu;
      records.push_back(std::move(s));
    }
    const RunSummary* baseline = nullptr;
    for (const RunSummary& s : records)
      if (s.name == rp_baseline) baseline = &s;
    if (!baseline)
      throw config_error("baseline '" + rp_baseline + "' not among --runs");
    ResultTable table = emit_table(records, *baseline);
    std::cout << table.text;
    if (!rp_out.empty()) {
      std::ofstream out(rp_out, std::ios::trunc);
      if (!out) throw io_error("cannot write " + rp_out);
      out << table.text;
    }
    if (!rp_json.empty()) {
      std::ofstream out(rp_json, std::ios::trunc);
      if (!out) throw io_error("cannot write " + rp_json);
      out << table.structured << "\n";
    }
  });

  // ------------------------------------------------------------- repair-zwj
  auto* rz = app.add_subcommand("repair-zwj", "restore dropped zero-width joiners");
  std::string rz_in, rz_out;
  rz->add_option("--in", rz_in, "input file (default stdin)");
  rz->add_option("--out", rz_out, "output file (default stdout)");
  rz->callback([&] {
    std::string text;
    if (rz_in.empty()) {
      std::ostringstream buf;
      buf << std::cin.rdbuf();
      text = buf.str();
    } else {
      std::ifstream in(rz_in, std::ios::binary);
      if (!in) throw io_error("cannot open " + rz_in);
      std::ostringstream buf;
      buf << in.rdbuf();
      text = buf.str();
    }
    std::string fixed = zwj_repair(text);
    if (rz_out.empty()) {
      std::cout << fixed;
    } else {
      std::ofstream out(rz_out, std::ios::binary | std::ios::trunc);
      if (!out) throw io_error("cannot write " + rz_out);
      out << fixed;
    }
  });

  // ------------------------------------------------------------ make-denoise
  auto* md = app.add_subcommand("make-denoise", "dump denoising examples for inspection");
  std::string md_vocab, md_lang, md_in, md_out;
  NoiseConfig md_noise;
  std::size_t md_budget = 128;
  bool md_no_permute = false;
  md->add_option("--vocab", md_vocab, "vocab file")->required();
  md->add_option("--lang", md_lang, "language code of the text")->required();
  md->add_option("--in", md_in, "monolingual text file")->required();
  md->add_option("--out", md_out, "output JSON-lines dump")->required();
  md->add_option("--mask-ratio", md_noise.mask_ratio, "target covered fraction");
  md->add_option("--lambda", md_noise.poisson_lambda, "span length Poisson mean");
  md->add_option("--random-token-prob", md_noise.random_token_prob,
                 "chance a mask emission becomes a random token");
  md->add_option("--budget", md_budget, "instance packing budget (tokens)");
  md->add_flag("--no-permute", md_no_permute, "keep sentence order");
  md->callback([&] {
    Vocab v = Vocab::load(md_vocab);
    md_noise.permute_sentences = !md_no_permute;
    md_noise.seed = seed;
    md_noise.validate();
    std::vector<std::string> lines = clean(read_lines(md_in));
    auto instances = pack_instances(lines, v, md_budget);
    std::ofstream out(md_out, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write " + md_out);
    for (std::size_t i = 0; i < instances.size(); ++i) {
      Rng rng(derive_seed(seed, i));
      Example ex = make_denoising_example(instances[i], md_lang, v, md_noise, rng);
      ordered_json j;
      j["instance"] = i;
      j["encoder_input"] = ex.encoder_input;
      j["decoder_input"] = ex.decoder_input;
      j["labels"] = ex.labels;
      ordered_json toks = ordered_json::array();
      for (TokenId id : ex.encoder_input) toks.push_back(v.token(id));
      j["encoder_tokens"] = toks;
      out << j.dump() << "\n";
    }
    std::cout << "wrote " << instances.size() << " instances -> " << md_out << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return 0;
}

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const Error& err) {
    std::cerr << err.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "internal-error: " << ex.what() << "\n";
    return 1;
  }
}
