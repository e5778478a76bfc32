#include "lrlf/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lrlf/eval.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace lrlf {

const char* ft_mode_name(FtMode m) {
  switch (m) {
    case FtMode::Bilingual: return "bilingual";
    case FtMode::O2M: return "o2m";
    case FtMode::M2O: return "m2o";
    case FtMode::M2M: return "m2m";
  }
  return "?";
}

const char* cpt_case_name(CptCase c) {
  switch (c) {
    case CptCase::A_i: return "A(i)";
    case CptCase::A_ii: return "A(ii)";
    case CptCase::B: return "B";
    case CptCase::C1: return "C1";
    case CptCase::C2_phase1: return "C2-phase1";
    case CptCase::C2_phase2: return "C2-phase2";
  }
  return "?";
}

std::optional<CptCase> parse_cpt_case(const std::string& s) {
  if (s == "A(i)" || s == "Ai" || s == "A_i") return CptCase::A_i;
  if (s == "A(ii)" || s == "Aii" || s == "A_ii") return CptCase::A_ii;
  if (s == "B") return CptCase::B;
  if (s == "C1") return CptCase::C1;
  if (s == "C2") return CptCase::C2_phase1;  // caller expands the two phases
  if (s == "C2-phase1") return CptCase::C2_phase1;
  if (s == "C2-phase2") return CptCase::C2_phase2;
  return std::nullopt;
}

std::vector<Direction> expand_mft_directions(FtMode mode, const LangCode& pivot,
                                             const std::vector<LangCode>& languages) {
  if (std::find(languages.begin(), languages.end(), pivot) == languages.end())
    throw config_error("pivot '" + pivot + "' not among languages");
  std::vector<Direction> dirs;
  auto others = [&]() {
    std::vector<LangCode> o;
    for (const LangCode& l : languages)
      if (l != pivot) o.push_back(l);
    return o;
  }();
  if (others.empty()) throw config_error("multilingual mode needs >= 2 languages");
  switch (mode) {
    case FtMode::Bilingual:
      throw config_error("bilingual mode has no pivot expansion");
    case FtMode::O2M:
      for (const LangCode& l : others) dirs.push_back({pivot, l});
      break;
    case FtMode::M2O:
      for (const LangCode& l : others) dirs.push_back({l, pivot});
      break;
    case FtMode::M2M:
      for (const LangCode& l : others) dirs.push_back({pivot, l});
      for (const LangCode& l : others) dirs.push_back({l, pivot});
      break;
  }
  return dirs;
}

// ---------------------------------------------------------------- presets

namespace {

const char* domain_json_name(DomainTag d) { return domain_name(d); }

TrainConfig base_tcfg(const RecipeOptions& opts) {
  return opts.tcfg ? *opts.tcfg : TrainConfig::desk(opts.scale);
}

StageSpec cpt_stage(const std::string& name, CptCase c,
                    const std::vector<LangCode>& langs, const RecipeOptions& opts) {
  StageSpec s;
  s.name = name;
  s.kind = StageKind::Cpt;
  s.cpt.cpt_case = c;
  s.cpt.languages = langs;
  s.tcfg = base_tcfg(opts);
  return s;
}

StageSpec ft_stage(const std::string& name, FtMode mode, DomainTag domain,
                   std::vector<Direction> dirs, const LangCode& pivot,
                   const RecipeOptions& opts) {
  StageSpec s;
  s.name = name;
  s.kind = StageKind::Ft;
  s.ft.mode = mode;
  s.ft.domain = domain;
  s.ft.directions = std::move(dirs);
  s.ft.pivot = pivot;
  s.tcfg = base_tcfg(opts);
  return s;
}

StageSpec sweep_stage(const std::string& name, const LangCode& pivot,
                      const RecipeOptions& opts) {
  StageSpec s;
  s.name = name;
  s.kind = StageKind::MftSweep;
  s.ft.domain = DomainTag::InDomain;
  s.ft.pivot = pivot;
  s.tcfg = base_tcfg(opts);
  return s;
}

}  // namespace

const std::vector<std::string>& recipe_preset_names() {
  static const std::vector<std::string> names = {
      "B-FT",
      "O2M-FT",
      "M2O-FT",
      "M2M-FT",
      "3-B-FT",
      "biCPT,B-FT",
      "biCPT,3-B-FT",
      "triCPT,O2M-FT",
      "triCPT,M2O-FT",
      "triCPT,M2M-FT",
      "M-FT(best),B-FT",
      "triCPT,M-FT(best),B-FT",
      "biCPT[A(i)],B-FT",
      "biCPT[A(ii)],B-FT",
      "biCPT[B],B-FT",
      "biCPT[C1],B-FT",
      "biCPT[C2],B-FT",
  };
  return names;
}

PipelineRecipe expand_recipe(const std::string& name, const RecipeOptions& opts,
                             const CorpusManifest& manifest) {
  if (opts.target.src.empty() || opts.target.tgt.empty())
    throw config_error("recipe needs a target direction");
  const LangCode pivot = opts.pivot.empty() ? opts.target.src : opts.pivot;
  const std::vector<LangCode> bi = opts.cpt_languages.empty()
                                       ? std::vector<LangCode>{opts.target.src, opts.target.tgt}
                                       : opts.cpt_languages;
  const std::vector<LangCode> tri =
      opts.cpt_languages.empty() ? manifest.languages : opts.cpt_languages;
  const std::vector<Direction> target{opts.target};

  auto bft = [&](const char* nm, DomainTag d) {
    return ft_stage(nm, FtMode::Bilingual, d, target, "", opts);
  };
  auto mft = [&](FtMode mode) {
    return ft_stage(std::string("mft-") + ft_mode_name(mode), mode,
                    DomainTag::InDomain,
                    expand_mft_directions(mode, pivot, manifest.languages), pivot,
                    opts);
  };

  PipelineRecipe r;
  r.name = name;
  if (name == "B-FT") {
    r.stages = {bft("ft-in", DomainTag::InDomain)};
  } else if (name == "O2M-FT") {
    r.stages = {mft(FtMode::O2M)};
  } else if (name == "M2O-FT") {
    r.stages = {mft(FtMode::M2O)};
  } else if (name == "M2M-FT") {
    r.stages = {mft(FtMode::M2M)};
  } else if (name == "3-B-FT") {
    r.stages = {bft("ft-out", DomainTag::OutDomain), bft("ft-mixed", DomainTag::Mixed),
                bft("ft-in", DomainTag::InDomain)};
  } else if (name == "biCPT,B-FT") {
    r.stages = {cpt_stage("cpt", opts.cpt_case, bi, opts), bft("ft-in", DomainTag::InDomain)};
  } else if (name == "biCPT,3-B-FT") {
    r.stages = {cpt_stage("cpt", opts.cpt_case, bi, opts),
                bft("ft-out", DomainTag::OutDomain), bft("ft-mixed", DomainTag::Mixed),
                bft("ft-in", DomainTag::InDomain)};
  } else if (name == "triCPT,O2M-FT") {
    r.stages = {cpt_stage("cpt", opts.cpt_case, tri, opts), mft(FtMode::O2M)};
  } else if (name == "triCPT,M2O-FT") {
    r.stages = {cpt_stage("cpt", opts.cpt_case, tri, opts), mft(FtMode::M2O)};
  } else if (name == "triCPT,M2M-FT") {
    r.stages = {cpt_stage("cpt", opts.cpt_case, tri, opts), mft(FtMode::M2M)};
  } else if (name == "M-FT(best),B-FT") {
    r.stages = {sweep_stage("mft-best", pivot, opts), bft("ft-in", DomainTag::InDomain)};
  } else if (name == "triCPT,M-FT(best),B-FT") {
    r.stages = {cpt_stage("cpt", opts.cpt_case, tri, opts),
                sweep_stage("mft-best", pivot, opts), bft("ft-in", DomainTag::InDomain)};
  } else if (name == "biCPT[A(i)],B-FT") {
    r.stages = {cpt_stage("cpt", CptCase::A_i, bi, opts), bft("ft-in", DomainTag::InDomain)};
  } else if (name == "biCPT[A(ii)],B-FT") {
    r.stages = {cpt_stage("cpt", CptCase::A_ii, bi, opts), bft("ft-in", DomainTag::InDomain)};
  } else if (name == "biCPT[B],B-FT") {
    r.stages = {cpt_stage("cpt", CptCase::B, bi, opts), bft("ft-in", DomainTag::InDomain)};
  } else if (name == "biCPT[C1],B-FT") {
    r.stages = {cpt_stage("cpt", CptCase::C1, bi, opts), bft("ft-in", DomainTag::InDomain)};
  } else if (name == "biCPT[C2],B-FT") {
    r.stages = {cpt_stage("cpt-phase1", CptCase::C2_phase1, bi, opts),
                cpt_stage("cpt-phase2", CptCase::C2_phase2, bi, opts),
                bft("ft-in", DomainTag::InDomain)};
  } else {
    throw config_error("unknown recipe '" + name + "'");
  }
  return r;
}

namespace {

ordered_json tcfg_to_json(const TrainConfig& t) {
  ordered_json j;
  j["dropout"] = t.dropout;
  j["label_smoothing"] = t.label_smoothing;
  j["warmup_steps"] = t.warmup_steps;
  j["max_lr"] = t.max_lr;
  j["max_updates"] = t.max_updates;
  j["batch_tokens"] = t.batch_tokens;
  j["checkpoint_interval"] = t.effective_interval();
  j["lr_decay"] = t.lr_decay;
  return j;
}

}  // namespace

std::string recipe_to_json(const PipelineRecipe& recipe) {
  ordered_json j;
  j["name"] = recipe.name;
  ordered_json stages = ordered_json::array();
  for (const StageSpec& s : recipe.stages) {
    ordered_json js;
    js["name"] = s.name;
    switch (s.kind) {
      case StageKind::Cpt: {
        js["kind"] = "cpt";
        js["case"] = cpt_case_name(s.cpt.cpt_case);
        js["languages"] = s.cpt.languages;
        break;
      }
      case StageKind::Ft: {
        js["kind"] = "ft";
        js["mode"] = ft_mode_name(s.ft.mode);
        js["domain"] = domain_json_name(s.ft.domain);
        ordered_json dirs = ordered_json::array();
        for (const Direction& d : s.ft.directions) dirs.push_back(d.str());
        js["directions"] = dirs;
        if (!s.ft.pivot.empty()) js["pivot"] = s.ft.pivot;
        break;
      }
      case StageKind::MftSweep: {
        js["kind"] = "mft-sweep";
        js["modes"] = {"o2m", "m2o", "m2m"};
        js["domain"] = domain_json_name(s.ft.domain);
        js["pivot"] = s.ft.pivot;
        break;
      }
    }
    js["tcfg"] = tcfg_to_json(s.tcfg);
    stages.push_back(js);
  }
  j["stages"] = stages;
  return j.dump(2);
}

// ---------------------------------------------------------------- cpt data

std::vector<MonoDataset> build_cpt_data(const CorpusManifest& manifest,
                                        CptCase cpt_case,
                                        const std::vector<LangCode>& languages) {
  if (languages.size() < 2)
    throw config_error("CPT needs at least 2 languages, got " +
                       std::to_string(languages.size()));
  auto wants_domain = [&](DomainTag d) {
    switch (cpt_case) {
      case CptCase::A_i:
      case CptCase::A_ii:
      case CptCase::C2_phase2: return d == DomainTag::InDomain;
      case CptCase::B:
      case CptCase::C2_phase1: return d == DomainTag::OutDomain;
      case CptCase::C1: return true;
    }
    return false;
  };
  DomainTag tag;
  switch (cpt_case) {
    case CptCase::B:
    case CptCase::C2_phase1: tag = DomainTag::OutDomain; break;
    case CptCase::C1: tag = DomainTag::Mixed; break;
    default: tag = DomainTag::InDomain; break;
  }

  std::vector<MonoDataset> out;
  for (const LangCode& lang : languages) {
    MonoDataset d;
    d.lang = lang;
    d.domain = tag;
    for (const MonoEntry& e : manifest.mono) {
      if (e.lang != lang || !wants_domain(e.domain)) continue;
      MonoDataset part = load_mono(manifest, e);
      d.lines.insert(d.lines.end(), part.lines.begin(), part.lines.end());
    }
    if (cpt_case == CptCase::A_ii) {
      // Both sides of in-domain training parallel data used as mono; each
      // (file, language) side counted once even if the manifest reuses it.
      std::set<std::string> seen;
      for (const ParallelEntry& e : manifest.parallel) {
        if (e.split != SplitRole::Train || e.domain != DomainTag::InDomain) continue;
        if (e.src_lang == lang && seen.insert(e.src_path).second) {
          auto lines = clean(read_lines(manifest.resolve(e.src_path)));
          d.lines.insert(d.lines.end(), lines.begin(), lines.end());
        }
        if (e.tgt_lang == lang && seen.insert(e.tgt_path).second) {
          auto lines = clean(read_lines(manifest.resolve(e.tgt_path)));
          d.lines.insert(d.lines.end(), lines.begin(), lines.end());
        }
      }
    }
    if (d.lines.empty())
      throw data_error("no " + std::string(cpt_case_name(cpt_case)) +
                       " monolingual data for language '" + lang + "'");
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------- selection

ScoredCheckpoint select_final(const std::vector<ScoredCheckpoint>& ckpts) {
  if (ckpts.empty()) throw train_error("no scored checkpoints");
  const ScoredCheckpoint* best = &ckpts[0];
  for (const ScoredCheckpoint& c : ckpts) {
    if (c.meta.valid_nll < best->meta.valid_nll ||
        (c.meta.valid_nll == best->meta.valid_nll &&
         c.meta.update_count > best->meta.update_count))
      best = &c;
  }
  return *best;
}

// ---------------------------------------------------------------- run record

std::string run_record_to_json(const RunRecord& r) {
  ordered_json j;
  j["recipe"] = r.recipe;
  j["pivot"] = r.pivot.empty() ? "-" : r.pivot;
  j["seed"] = r.seed;
  ordered_json stages = ordered_json::array();
  for (const StageRunInfo& s : r.stages) {
    ordered_json js;
    js["name"] = s.name;
    js["dir"] = s.dir;
    js["selected_checkpoint"] = s.selected_checkpoint;
    js["selected_update"] = s.selected_update;
    js["valid_nll"] = s.selected_valid_nll;
    if (s.selected_valid_bleu)
      js["valid_bleu"] = *s.selected_valid_bleu;
    else
      js["valid_bleu"] = nullptr;
    if (!s.chosen_mode.empty()) js["chosen_mode"] = s.chosen_mode;
    stages.push_back(js);
  }
  j["stages"] = stages;
  j["valid_bleu"] = r.valid_bleu;
  j["test_bleu"] = r.test_bleu;
  j["final_checkpoint"] = r.final_checkpoint;
  return j.dump(2) + "\n";
}

RunRecord run_record_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::exception& e) {
    throw data_error(std::string("bad run record: ") + e.what());
  }
  RunRecord r;
  try {
    r.recipe = j.at("recipe").get<std::string>();
    r.pivot = j.at("pivot").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& js : j.at("stages")) {
      StageRunInfo s;
      s.name = js.at("name").get<std::string>();
      s.dir = js.at("dir").get<std::string>();
      s.selected_checkpoint = js.at("selected_checkpoint").get<std::string>();
      s.selected_update = js.at("selected_update").get<std::int64_t>();
      s.selected_valid_nll = js.at("valid_nll").get<double>();
      if (!js.at("valid_bleu").is_null())
        s.selected_valid_bleu = js.at("valid_bleu").get<double>();
      if (js.contains("chosen_mode"))
        s.chosen_mode = js.at("chosen_mode").get<std::string>();
      r.stages.push_back(std::move(s));
    }
    for (const auto& [k, v] : j.at("valid_bleu").items())
      r.valid_bleu[k] = v.get<double>();
    for (const auto& [k, v] : j.at("test_bleu").items())
      r.test_bleu[k] = v.get<double>();
    r.final_checkpoint = j.at("final_checkpoint").get<std::string>();
  } catch (const ordered_json::exception& e) {
    throw data_error(std::string("bad run record: ") + e.what());
  }
  return r;
}

RunRecord load_run_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open run record " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return run_record_from_json(buf.str());
}

// ---------------------------------------------------------------- run_recipe

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string stage_fingerprint(const StageSpec& stage, std::uint64_t stage_seed,
                              const ModelConfig& mcfg) {
  PipelineRecipe one;
  one.name = "fp";
  one.stages = {stage};
  std::ostringstream os;
  os << recipe_to_json(one) << "|" << stage_seed << "|" << mcfg.layers << ","
     << mcfg.d_model << "," << mcfg.heads << "," << mcfg.ffn_dim << ","
     << mcfg.vocab_size << "," << mcfg.max_len;
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(os.str());
  return hex.str();
}

ParallelDataset load_train(const CorpusManifest& m, const Direction& dir,
                           DomainTag domain) {
  for (const ParallelEntry& e : m.parallel)
    if (e.src_lang == dir.src && e.tgt_lang == dir.tgt && e.domain == domain &&
        e.split == SplitRole::Train)
      return load_parallel(m, e);
  throw data_error("manifest has no " + std::string(domain_name(domain)) +
                   "-domain train data for " + dir.str());
}

// Valid/test sets are unique per direction (the manifest enforces this), so
// no domain filter applies.
ParallelDataset load_split(const CorpusManifest& m, const Direction& dir,
                           SplitRole split) {
  for (const ParallelEntry& e : m.parallel)
    if (e.src_lang == dir.src && e.tgt_lang == dir.tgt && e.split == split)
      return load_parallel(m, e);
  throw data_error("manifest has no " + std::string(split_name(split)) +
                   " data for " + dir.str());
}

struct StagePaths {
  std::string dir_abs;
  std::string dir_rel;
  std::string marker_abs;
};

StagePaths stage_paths(const std::string& run_dir, std::size_t idx,
                       const std::string& name) {
  std::ostringstream os;
  os << "stage" << std::setw(2) << std::setfill('0') << idx << "_" << name;
  StagePaths p;
  p.dir_rel = os.str();
  p.dir_abs = (fs::path(run_dir) / p.dir_rel).string();
  p.marker_abs = (fs::path(p.dir_abs) / "stage.json").string();
  return p;
}

std::string rel_to_run(const std::string& run_dir, const std::string& abs) {
  return fs::relative(abs, run_dir).generic_string();
}

struct StageOutcome {
  std::string selected_abs;
  CheckpointMeta meta;
  std::string chosen_mode;
};

// Greedy/beam BLEU of `model` on raw source/reference lines.
double model_bleu(const Transformer<float>& model, const Vocab& vocab,
                  const Direction& dir, const std::vector<std::string>& src_lines,
                  const std::vector<std::string>& ref_lines, int beam,
                  int max_output_len, bool repair) {
  std::vector<Transformer<float>> members;
  members.push_back(model);
  DecodeConfig dc;
  dc.beam_size = beam;
  dc.max_output_len = max_output_len;
  dc.target_lang = dir.tgt;
  std::vector<std::vector<std::string>> hyps, refs;
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    std::string hyp;
    if (!src_lines[i].empty())
      hyp = translate_line(members, dc, vocab, dir.src, src_lines[i]);
    if (repair) hyp = zwj_repair(hyp);
    hyps.push_back(tokenize_line(hyp));
    refs.push_back(tokenize_line(ref_lines[i]));
  }
  return corpus_bleu(hyps, refs).bleu;
}

struct FtData {
  std::vector<Direction> dirs;
  std::vector<std::vector<Example>> train;  // per direction
  std::vector<double> weights;
  std::vector<Example> valid_examples;
  Direction bleu_dir;
  std::vector<std::string> bleu_src, bleu_ref;
};

FtData prepare_ft_data(const FtSelector& ft, const CorpusManifest& manifest,
                       const Vocab& vocab, const ModelConfig& mcfg,
                       const RunOptions& opts, std::uint64_t stage_seed,
                       const Direction& recipe_target) {
  FtData d;
  d.dirs = ft.directions;
  if (d.dirs.empty()) throw config_error("fine-tuning stage with no directions");

  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < d.dirs.size(); ++i) {
    ParallelDataset data;
    if (ft.domain == DomainTag::Mixed) {
      ParallelDataset in = load_train(manifest, d.dirs[i], DomainTag::InDomain);
      ParallelDataset out = load_train(manifest, d.dirs[i], DomainTag::OutDomain);
      data = upsample_mix(in, out, derive_seed(stage_seed, 0x4D58, i));
    } else {
      data = load_train(manifest, d.dirs[i], ft.domain);
    }
    std::vector<Example> ex = make_parallel_examples(data, vocab, mcfg.max_len);
    sizes.push_back(ex.size());
    d.train.push_back(std::move(ex));
  }
  d.weights = d.dirs.size() == 1 ? std::vector<double>{1.0}
                                 : temperature_weights(sizes, SamplingConfig{});

  // Validation NLL pool: the valid split of every direction, deterministic cap.
  for (const Direction& dir : d.dirs) {
    ParallelDataset v = load_split(manifest, dir, SplitRole::Valid);
    std::vector<Example> ex = make_parallel_examples(v, vocab, mcfg.max_len);
    for (Example& e : ex) {
      if (d.valid_examples.size() >= opts.valid_nll_examples) break;
      d.valid_examples.push_back(std::move(e));
    }
  }
  if (d.valid_examples.empty())
    throw data_error("fine-tuning stage has no validation examples");

  // Validation BLEU direction: the recipe target when this stage covers it
  // (or for sweep-mode selection), else the first direction.
  d.bleu_dir = recipe_target;
  ParallelDataset v = load_split(manifest, d.bleu_dir, SplitRole::Valid);
  for (const SentencePair& p : v.pairs) {
    if (d.bleu_src.size() >= opts.valid_bleu_sentences) break;
    d.bleu_src.push_back(p.src);
    d.bleu_ref.push_back(p.tgt);
  }
  return d;
}

struct CptData {
  std::vector<LangCode> langs;
  std::vector<std::vector<std::vector<TokenSeq>>> instances;  // per lang
  std::vector<double> weights;
  std::vector<Example> valid_examples;  // fixed noise holdout
};

CptData prepare_cpt_data(const CptSelector& sel, const CorpusManifest& manifest,
                         const Vocab& vocab, const RunOptions& opts,
                         std::uint64_t stage_seed) {
  std::vector<MonoDataset> sets = build_cpt_data(manifest, sel.cpt_case, sel.languages);
  CptData d;
  std::vector<std::size_t> sizes;
  NoiseConfig noise = opts.noise;
  std::size_t holdout_budget = 32;
  std::size_t holdout_per_lang = std::max<std::size_t>(1, holdout_budget / sets.size());

  std::size_t next_holdout_stream = 0;
  for (const MonoDataset& set : sets) {
    auto packed = pack_instances(set.lines, vocab, 128);
    if (packed.empty())
      throw data_error("language '" + set.lang + "' produced no CPT instances");
    // Deterministic holdout: a strided slice, removed from training.
    std::vector<std::vector<TokenSeq>> train_insts;
    std::size_t stride = std::max<std::size_t>(2, packed.size() / holdout_per_lang);
    std::size_t held = 0;
    for (std::size_t i = 0; i < packed.size(); ++i) {
      if (i % stride == 0 && held < holdout_per_lang && packed.size() > 1) {
        Rng rng(derive_seed(stage_seed, 0x7A11D, next_holdout_stream++));
        d.valid_examples.push_back(
            make_denoising_example(packed[i], set.lang, vocab, noise, rng));
        ++held;
      } else {
        train_insts.push_back(std::move(packed[i]));
      }
    }
    sizes.push_back(train_insts.size());
    d.langs.push_back(set.lang);
    d.instances.push_back(std::move(train_insts));
  }
  if (d.valid_examples.empty())
    throw data_error("CPT stage has no validation instances");
  d.weights = temperature_weights(sizes, SamplingConfig{});
  return d;
}

ordered_json stage_marker_json(const StageRunInfo& info, const std::string& fp) {
  ordered_json j;
  j["name"] = info.name;
  j["fingerprint"] = fp;
  j["selected_checkpoint"] = info.selected_checkpoint;
  j["selected_update"] = info.selected_update;
  j["valid_nll"] = info.selected_valid_nll;
  if (info.selected_valid_bleu)
    j["valid_bleu"] = *info.selected_valid_bleu;
  else
    j["valid_bleu"] = nullptr;
  if (!info.chosen_mode.empty()) j["chosen_mode"] = info.chosen_mode;
  return j;
}

}  // namespace

std::vector<Example> make_parallel_examples(const ParallelDataset& data,
                                            const Vocab& v, int max_len) {
  std::vector<Example> out;
  const TokenId src_lid = v.lid_id(data.src_lang);
  const TokenId tgt_lid = v.lid_id(data.tgt_lang);
  for (const SentencePair& p : data.pairs) {
    Example ex;
    ex.encoder_input = v.encode(p.src);
    ex.encoder_input.push_back(src_lid);
    TokenSeq tgt = v.encode(p.tgt);
    if (ex.encoder_input.size() > static_cast<std::size_t>(max_len) ||
        tgt.size() + 1 > static_cast<std::size_t>(max_len))
      continue;  // desk-scale guard: drop overlong pairs
    ex.decoder_input.push_back(tgt_lid);
    ex.decoder_input.insert(ex.decoder_input.end(), tgt.begin(), tgt.end());
    ex.labels = std::move(tgt);
    ex.labels.push_back(v.eos_id());
    out.push_back(std::move(ex));
  }
  if (out.empty())
    throw data_error("no usable pairs for " + data.src_lang + "-" + data.tgt_lang +
                     " (all dropped by length guard)");
  return out;
}

RunRecord run_recipe(const PipelineRecipe& recipe, const CorpusManifest& manifest,
                     const ModelConfig& mcfg, const Vocab& vocab,
                     const std::string& run_dir, const RunOptions& opts) {
  if (recipe.stages.empty()) throw config_error("recipe has no stages");
  mcfg.validate();
  fs::create_directories(run_dir);

  // The recipe's target direction: the last bilingual stage's direction, or
  // the first direction of the final stage.
  Direction recipe_target;
  bool have_target = false;
  for (auto it = recipe.stages.rbegin(); it != recipe.stages.rend(); ++it) {
    if (it->kind == StageKind::Ft && it->ft.mode == FtMode::Bilingual &&
        !it->ft.directions.empty()) {
      recipe_target = it->ft.directions[0];
      have_target = true;
      break;
    }
  }
  if (!have_target) {
    for (auto it = recipe.stages.rbegin(); it != recipe.stages.rend(); ++it) {
      if (it->kind == StageKind::Ft && !it->ft.directions.empty()) {
        recipe_target = it->ft.directions[0];
        have_target = true;
        break;
      }
    }
  }
  bool cpt_only = std::all_of(recipe.stages.begin(), recipe.stages.end(),
                              [](const StageSpec& s) { return s.kind == StageKind::Cpt; });
  if (!have_target && !cpt_only)
    throw config_error("recipe has no fine-tuning stage");

  RunRecord record;
  record.recipe = recipe.name;
  record.seed = opts.seed;
  for (const StageSpec& s : recipe.stages)
    if (!s.ft.pivot.empty()) record.pivot = s.ft.pivot;

  // Freeze the effective configuration once per run directory.
  {
    ordered_json eff;
    eff["recipe"] = ordered_json::parse(recipe_to_json(recipe));
    eff["seed"] = opts.seed;
    ordered_json model;
    model["layers"] = mcfg.layers;
    model["d_model"] = mcfg.d_model;
    model["heads"] = mcfg.heads;
    model["ffn_dim"] = mcfg.ffn_dim;
    model["vocab_size"] = mcfg.vocab_size;
    model["max_len"] = mcfg.max_len;
    model["dropout"] = mcfg.dropout;
    eff["model"] = model;
    ordered_json run;
    run["eval_beam"] = opts.eval_beam;
    run["valid_beam"] = opts.valid_beam;
    run["max_output_len"] = opts.max_output_len;
    run["valid_bleu_sentences"] = opts.valid_bleu_sentences;
    run["valid_nll_examples"] = opts.valid_nll_examples;
    ordered_json noise;
    noise["mask_ratio"] = opts.noise.mask_ratio;
    noise["random_token_prob"] = opts.noise.random_token_prob;
    noise["poisson_lambda"] = opts.noise.poisson_lambda;
    noise["permute_sentences"] = opts.noise.permute_sentences;
    run["noise"] = noise;
    eff["run"] = run;
    std::string path = (fs::path(run_dir) / "effective_config.json").string();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write " + path);
    out << eff.dump(2) << "\n";
  }

  std::string prev_selected_abs = opts.init_checkpoint;  // empty → fresh init

  auto run_training = [&](const StageSpec& stage, const std::string& dir_abs,
                          std::uint64_t stage_seed, const FtSelector* ft_override)
      -> std::pair<std::string, CheckpointMeta> {
    TrainConfig tcfg = stage.tcfg;
    tcfg.seed = stage_seed;

    Transformer<float> model(mcfg);
    if (prev_selected_abs.empty())
      model.init_params(derive_seed(opts.seed, 0xF2E54));
    else
      model.params() = load_checkpoint(prev_selected_abs, &mcfg).params;

    BatchProvider provider;
    Validator validator;
    if (stage.kind == StageKind::Cpt) {
      auto data = std::make_shared<CptData>(
          prepare_cpt_data(stage.cpt, manifest, vocab, opts, stage_seed));
      NoiseConfig noise = opts.noise;
      std::int64_t batch_tokens = tcfg.batch_tokens;
      provider = [data, &vocab, noise, batch_tokens](std::int64_t, Rng& rng) {
        std::vector<Example> batch;
        std::size_t lang = sample_batch_language(data->weights, rng);
        const auto& insts = data->instances[lang];
        std::int64_t toks = 0;
        while (toks < batch_tokens && batch.size() < 128) {
          const auto& inst = insts[rng.uniform_int(insts.size())];
          Example ex = make_denoising_example(inst, data->langs[lang], vocab,
                                              noise, rng);
          toks += static_cast<std::int64_t>(ex.encoder_input.size() +
                                            ex.labels.size());
          batch.push_back(std::move(ex));
        }
        return batch;
      };
      validator = [data](const Transformer<float>& m, CheckpointMeta& meta) {
        meta.valid_nll = validation_likelihood(m, data->valid_examples);
      };
    } else {
      FtSelector sel = ft_override ? *ft_override : stage.ft;
      auto data = std::make_shared<FtData>(prepare_ft_data(
          sel, manifest, vocab, mcfg, opts, stage_seed, recipe_target));
      std::int64_t batch_tokens = tcfg.batch_tokens;
      provider = [data, batch_tokens](std::int64_t, Rng& rng) {
        std::vector<Example> batch;
        std::size_t di = data->dirs.size() == 1
                             ? 0
                             : sample_batch_language(data->weights, rng);
        const auto& pool = data->train[di];
        std::int64_t toks = 0;
        while (toks < batch_tokens && batch.size() < 128) {
          const Example& ex = pool[rng.uniform_int(pool.size())];
          toks += static_cast<std::int64_t>(ex.encoder_input.size() +
                                            ex.labels.size());
          batch.push_back(ex);
        }
        return batch;
      };
      const Vocab* vptr = &vocab;
      int valid_beam = opts.valid_beam;
      int max_out = opts.max_output_len;
      bool repair = manifest.needs_zwj_repair(data->bleu_dir.tgt);
      validator = [data, vptr, valid_beam, max_out,
                   repair](const Transformer<float>& m, CheckpointMeta& meta) {
        meta.valid_nll = validation_likelihood(m, data->valid_examples);
        if (!data->bleu_src.empty())
          meta.valid_bleu = model_bleu(m, *vptr, data->bleu_dir, data->bleu_src,
                                       data->bleu_ref, valid_beam, max_out, repair);
      };
    }

    StageResult result = train_stage(model, tcfg, stage.name, dir_abs, provider,
                                     validator);
    return {result.best_path, result.best_meta};
  };

  std::size_t executed = 0;
  for (std::size_t idx = 0; idx < recipe.stages.size(); ++idx) {
    const StageSpec& stage = recipe.stages[idx];
    StagePaths paths = stage_paths(run_dir, idx, stage.name);
    std::uint64_t stage_seed = derive_seed(opts.seed, 0x57A6E, idx);
    std::string fp = stage_fingerprint(stage, stage_seed, mcfg);

    StageRunInfo info;
    info.name = stage.name;
    info.dir = paths.dir_rel;

    if (fs::exists(paths.marker_abs)) {
      std::ifstream in(paths.marker_abs);
      ordered_json j;
      try {
        in >> j;
      } catch (const ordered_json::exception&) {
        throw data_error("corrupt stage marker " + paths.marker_abs);
      }
      if (j.at("fingerprint").get<std::string>() != fp)
        throw config_error("stage directory " + paths.dir_rel +
                           " was produced by a different configuration; remove it to re-run");
      info.selected_checkpoint = j.at("selected_checkpoint").get<std::string>();
      info.selected_update = j.at("selected_update").get<std::int64_t>();
      info.selected_valid_nll = j.at("valid_nll").get<double>();
      if (!j.at("valid_bleu").is_null())
        info.selected_valid_bleu = j.at("valid_bleu").get<double>();
      if (j.contains("chosen_mode"))
        info.chosen_mode = j.at("chosen_mode").get<std::string>();
      record.stages.push_back(info);
      prev_selected_abs = (fs::path(run_dir) / info.selected_checkpoint).string();
      continue;
    }

    if (opts.stop_after > 0 && static_cast<int>(executed) >= opts.stop_after)
      return record;  // partial run; markers carry the state for resume
    ++executed;

    fs::create_directories(paths.dir_abs);
    if (stage.kind == StageKind::MftSweep) {
      const FtMode modes[3] = {FtMode::O2M, FtMode::M2O, FtMode::M2M};
      std::string best_path;
      CheckpointMeta best_meta;
      std::string best_mode;
      double best_bleu = -1;
      std::string saved_prev = prev_selected_abs;
      for (std::size_t m = 0; m < 3; ++m) {
        FtSelector sel;
        sel.mode = modes[m];
        sel.domain = stage.ft.domain;
        sel.pivot = stage.ft.pivot;
        sel.directions =
            expand_mft_directions(modes[m], stage.ft.pivot, manifest.languages);
        std::string mode_dir =
            (fs::path(paths.dir_abs) / ft_mode_name(modes[m])).string();
        prev_selected_abs = saved_prev;  // every mode starts from the same init
        auto [path, meta] = run_training(stage, mode_dir,
                                         derive_seed(stage_seed, m + 1), &sel);
        double bleu = meta.valid_bleu.value_or(0);
        if (bleu > best_bleu) {
          best_bleu = bleu;
          best_path = path;
          best_meta = meta;
          best_mode = ft_mode_name(modes[m]);
        }
      }
      prev_selected_abs = best_path;
      info.selected_checkpoint = rel_to_run(run_dir, best_path);
      info.selected_update = best_meta.update_count;
      info.selected_valid_nll = best_meta.valid_nll;
      info.selected_valid_bleu = best_meta.valid_bleu;
      info.chosen_mode = best_mode;
    } else {
      auto [path, meta] = run_training(stage, paths.dir_abs, stage_seed, nullptr);
      prev_selected_abs = path;
      info.selected_checkpoint = rel_to_run(run_dir, path);
      info.selected_update = meta.update_count;
      info.selected_valid_nll = meta.valid_nll;
      info.selected_valid_bleu = meta.valid_bleu;
    }

    std::ofstream out(paths.marker_abs, std::ios::trunc);
    if (!out) throw io_error("cannot write " + paths.marker_abs);
    out << stage_marker_json(info, fp).dump(2) << "\n";
    record.stages.push_back(info);
  }

  record.final_checkpoint = record.stages.back().selected_checkpoint;

  // Evaluated directions: the final stage's coverage.
  const StageSpec& final_stage = recipe.stages.back();
  std::vector<Direction> eval_dirs;
  if (final_stage.kind == StageKind::Ft) {
    eval_dirs = final_stage.ft.directions;
  } else if (final_stage.kind == StageKind::MftSweep) {
    FtMode chosen = FtMode::M2M;
    for (FtMode m : {FtMode::O2M, FtMode::M2O, FtMode::M2M})
      if (record.stages.back().chosen_mode == ft_mode_name(m)) chosen = m;
    eval_dirs = expand_mft_directions(chosen, final_stage.ft.pivot,
                                      manifest.languages);
  } else if (have_target) {
    eval_dirs = {recipe_target};
  }

  if (eval_dirs.empty()) {
    std::string record_path = (fs::path(run_dir) / "run_record.json").string();
    std::ofstream rout(record_path, std::ios::binary | std::ios::trunc);
    if (!rout) throw io_error("cannot write " + record_path);
    rout << run_record_to_json(record);
    return record;
  }

  ModelCheckpoint final_ckpt = load_checkpoint(
      (fs::path(run_dir) / record.final_checkpoint).string(), &mcfg);
  Transformer<float> final_model(final_ckpt.config, final_ckpt.params);
  for (const Direction& dir : eval_dirs) {
    bool repair = manifest.needs_zwj_repair(dir.tgt);
    ParallelDataset valid = load_split(manifest, dir, SplitRole::Valid);
    ParallelDataset test = load_split(manifest, dir, SplitRole::Test);
    std::vector<std::string> vsrc, vref, tsrc, tref;
    for (const SentencePair& p : valid.pairs) {
      vsrc.push_back(p.src);
      vref.push_back(p.tgt);
    }
    for (const SentencePair& p : test.pairs) {
      tsrc.push_back(p.src);
      tref.push_back(p.tgt);
    }
    record.valid_bleu[dir.str()] = model_bleu(final_model, vocab, dir, vsrc, vref,
                                              opts.eval_beam, opts.max_output_len,
                                              repair);
    record.test_bleu[dir.str()] = model_bleu(final_model, vocab, dir, tsrc, tref,
                                             opts.eval_beam, opts.max_output_len,
                                             repair);
  }

  std::string record_path = (fs::path(run_dir) / "run_record.json").string();
  std::ofstream out(record_path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + record_path);
  out << run_record_to_json(record);
  return record;
}

}  // namespace lrlf
