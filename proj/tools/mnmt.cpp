// mnmt: preprocessing, training, translation, scoring and evaluation.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mnmt/bundle.hpp"
#include "mnmt/gradcheck.hpp"
#include "mnmt/pipeline.hpp"
#include "mnmt/synth.hpp"

using namespace mnmt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int exit_code = 0;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::size_t thread_count() {
  const char* env = std::getenv("MNMT_THREADS");
  if (!env || !*env) return 1;
  const long n = std::strtol(env, nullptr, 10);
  if (n < 1) throw UsageError("MNMT_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

// Manifest next to the primary output, or ./run.json for stdout-only runs.
fs::path manifest_for(const std::string& explicit_path, const std::string& out) {
  if (!explicit_path.empty()) return explicit_path;
  if (!out.empty()) return out + ".run.json";
  return "run.json";
}

void manifest(const fs::path& file, const std::string& command, json config, std::uint64_t seed = 0) {
  config["threads"] = thread_count();
  write_run_manifest_file(file, command, config, seed);
}

// ---------------------------------------------------------------------------
// Training configuration: one flat JSON object. Precedence: command line,
// then --config file, then the preset.

json preset_json(const std::string& name) {
  ModelConfig m;
  TrainConfig t;
  std::size_t merges = 8000;
  if (name == "tiny") {
    m = ModelConfig::tiny(0);
    const auto desk = ExperimentConfig::desk();
    t = desk.baseline;
    t.weights = LossWeights{};
    merges = desk.bpe_merges;
  } else if (name != "base") {
    throw UsageError("unknown preset '" + name + "' (expected tiny or base)");
  }
  return {{"arch", to_string(m.arch)},
          {"d_model", m.d_model},
          {"d_ffn", m.d_ffn},
          {"heads", m.heads},
          {"enc_layers", m.enc_layers},
          {"dec_layers", m.dec_layers},
          {"dropout", m.dropout},
          {"label_smoothing", m.label_smoothing},
          {"mention_threshold", m.mention_threshold},
          {"lr0", t.lr0},
          {"warmup_steps", t.warmup_steps},
          {"max_epochs", t.max_epochs},
          {"token_batch_size", t.token_batch_size},
          {"loss_weight_mt", t.weights.mt},
          {"loss_weight_src", t.weights.src},
          {"loss_weight_tgt", t.weights.tgt},
          {"seed", t.seed},
          {"precision", t.precision},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"bpe_merges", merges}};
}

void merge_flat(json& into, const json& from, const std::string& origin) {
  if (!from.is_object()) throw UsageError(origin + ": expected a flat JSON object");
  for (const auto& [k, v] : from.items()) {
    if (k == "preset") continue;
    if (!into.contains(k)) throw UsageError(origin + ": unknown key '" + k + "'");
    if (v.is_object() || v.is_array()) throw UsageError(origin + ": '" + k + "' must be a scalar");
    into[k] = v;
  }
}

ModelConfig model_config(const json& c, std::size_t vocab) {
  ModelConfig m;
  m.arch = parse_arch(c.at("arch").get<std::string>());
  c.at("d_model").get_to(m.d_model);
  c.at("d_ffn").get_to(m.d_ffn);
  c.at("heads").get_to(m.heads);
  c.at("enc_layers").get_to(m.enc_layers);
  c.at("dec_layers").get_to(m.dec_layers);
  c.at("dropout").get_to(m.dropout);
  c.at("label_smoothing").get_to(m.label_smoothing);
  c.at("mention_threshold").get_to(m.mention_threshold);
  m.vocab_size = vocab;
  return m;
}

TrainConfig train_config(const json& c) {
  TrainConfig t;
  c.at("lr0").get_to(t.lr0);
  c.at("warmup_steps").get_to(t.warmup_steps);
  c.at("max_epochs").get_to(t.max_epochs);
  c.at("token_batch_size").get_to(t.token_batch_size);
  c.at("loss_weight_mt").get_to(t.weights.mt);
  c.at("loss_weight_src").get_to(t.weights.src);
  c.at("loss_weight_tgt").get_to(t.weights.tgt);
  c.at("seed").get_to(t.seed);
  c.at("precision").get_to(t.precision);
  c.at("adam_beta1").get_to(t.adam_beta1);
  c.at("adam_beta2").get_to(t.adam_beta2);
  c.at("adam_eps").get_to(t.adam_eps);
  t.validate();
  return t;
}

// Runs f(bundle) with the bundle loaded at the checkpoint's own precision.
template <class F>
void with_bundle(const std::string& dir, F&& f) {
  if (load_checkpoint(dir).dtype == "float64") {
    const auto b = load_bundle<double>(dir);
    f(b);
  } else {
    const auto b = load_bundle<float>(dir);
    f(b);
  }
}

MaskSource parse_mask_mode(const std::string& s) {
  if (s == "predicted") return MaskSource::predicted;
  if (s == "gold") return MaskSource::gold;
  throw UsageError("--mask-mode must be predicted or gold");
}

std::vector<std::vector<MentionTag>> word_tags(const std::string& path, const Corpus& text) {
  const auto sents = read_tag_file(path);
  if (sents.size() != text.size())
    throw AlignmentError(path + ": " + std::to_string(sents.size()) + " tagged sentences for " +
                         std::to_string(text.size()) + " lines");
  std::vector<std::vector<MentionTag>> out;
  for (std::size_t i = 0; i < sents.size(); ++i) {
    if (sents[i].tokens != text[i])
      throw AlignmentError(path + ": sentence " + std::to_string(i + 1) + " tokens differ from the input");
    std::vector<MentionTag> tags;
    for (const auto& t : sents[i].tags) {
      MentionTag m;
      tags.push_back(parse_mention_tag(t, m) ? m : pos_to_mention(t));
    }
    out.push_back(std::move(tags));
  }
  return out;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mention-aware Transformer translation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  app.fallthrough();
  std::string manifest_opt;
  app.add_option("--manifest", manifest_opt, "run manifest path (default: next to the output)");

  // bpe-learn ---------------------------------------------------------------
  auto* bl = app.add_subcommand("bpe-learn", "learn joint BPE merges from tokenized text");
  std::vector<std::string> bl_inputs;
  std::size_t bl_merges = 8000;
  std::string bl_out;
  bl->add_option("--input", bl_inputs, "tokenized text files")->required()->check(CLI::ExistingFile);
  bl->add_option("--merges", bl_merges, "number of merge operations")->required();
  bl->add_option("--out", bl_out, "merge list")->required();
  bl->callback([&] {
    std::vector<std::string> tokens;
    for (const auto& f : bl_inputs)
      for (const auto& s : read_tokenized(f)) tokens.insert(tokens.end(), s.begin(), s.end());
    const auto model = bpe_learn(tokens, bl_merges);
    save_bpe(model, bl_out);
    std::cout << model.merges.size() << " merges learned\n";
    manifest(manifest_for(manifest_opt, bl_out), "bpe-learn", {{"input", bl_inputs}, {"merges", bl_merges}});
  });

  // bpe-apply ---------------------------------------------------------------
  auto* ba = app.add_subcommand("bpe-apply", "segment tokenized text with learned merges");
  std::string ba_model, ba_input, ba_out;
  ba->add_option("--model", ba_model, "merge list")->required()->check(CLI::ExistingFile);
  ba->add_option("--input", ba_input, "tokenized text")->required()->check(CLI::ExistingFile);
  ba->add_option("--out", ba_out, "segmented text")->required();
  ba->callback([&] {
    const BpeApplier applier(load_bpe(ba_model));
    std::vector<std::string> lines;
    for (const auto& s : read_tokenized(ba_input)) lines.push_back(join(applier.apply(s).subwords));
    write_lines(ba_out, lines);
    manifest(manifest_for(manifest_opt, ba_out), "bpe-apply", {{"model", ba_model}, {"input", ba_input}});
  });

  // tag-map -----------------------------------------------------------------
  auto* tm = app.add_subcommand("tag-map", "map universal POS tags to mention/none");
  std::string tm_in, tm_out;
  tm->add_option("--pos-tags", tm_in, "token<TAB>POS file")->required()->check(CLI::ExistingFile);
  tm->add_option("--out", tm_out, "token<TAB>mention file")->required();
  tm->callback([&] {
    auto sents = read_tag_file(tm_in);
    for (auto& s : sents)
      for (auto& t : s.tags) t = to_string(pos_to_mention(t));
    write_tag_file(tm_out, sents);
    manifest(manifest_for(manifest_opt, tm_out), "tag-map", {{"pos_tags", tm_in}});
  });

  // tag-propagate -----------------------------------------------------------
  auto* tp = app.add_subcommand("tag-propagate", "copy word tags onto BPE subwords");
  std::string tp_tags, tp_bpe, tp_out;
  tp->add_option("--tags", tp_tags, "word-level tag file")->required()->check(CLI::ExistingFile);
  tp->add_option("--bpe-boundaries", tp_bpe, "BPE-segmented text (@@ continuation marks)")
      ->required()
      ->check(CLI::ExistingFile);
  tp->add_option("--out", tp_out, "subword-level tag file")->required();
  tp->callback([&] {
    const auto words = read_mention_tags(tp_tags);
    const auto subwords = read_tokenized(tp_bpe);
    if (words.size() != subwords.size())
      throw AlignmentError("tag file has " + std::to_string(words.size()) + " sentences, BPE file " +
                           std::to_string(subwords.size()));
    std::vector<TaggedTokens> out;
    for (std::size_t i = 0; i < words.size(); ++i) {
      const auto tags = propagate_tags(words[i], boundaries_from_subwords(subwords[i]));
      TaggedTokens s{subwords[i], {}};
      for (auto t : tags) s.tags.push_back(to_string(t));
      out.push_back(std::move(s));
    }
    write_tag_file(tp_out, out);
    manifest(manifest_for(manifest_opt, tp_out), "tag-propagate", {{"tags", tp_tags}, {"bpe", tp_bpe}});
  });

  // make-synth --------------------------------------------------------------
  auto* ms = app.add_subcommand("make-synth", "generate the synthetic ambiguous-pronoun task");
  std::uint64_t ms_seed = 7;
  SynthSizes ms_sizes;
  std::string ms_out;
  ms->add_option("--seed", ms_seed);
  ms->add_option("--train", ms_sizes.train);
  ms->add_option("--dev", ms_sizes.dev);
  ms->add_option("--test", ms_sizes.test);
  ms->add_option("--contrastive", ms_sizes.contrastive);
  ms->add_option("--out", ms_out, "output directory")->required();
  ms->callback([&] {
    const auto task = make_synthetic_task(ms_seed, ms_sizes);
    write_synthetic_task(task, ms_out);
    std::cout << task.train.size() << " train, " << task.dev.size() << " dev, " << task.test.size() << " test, "
              << task.contrastive.size() << " contrastive sets in " << ms_out << '\n';
    manifest(manifest_opt.empty() ? fs::path(ms_out) / "run.json" : fs::path(manifest_opt), "make-synth",
             {{"train", ms_sizes.train},
              {"dev", ms_sizes.dev},
              {"test", ms_sizes.test},
              {"contrastive", ms_sizes.contrastive}},
             ms_seed);
  });

  // train -------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train a baseline or mention model");
  std::string tr_config, tr_preset, tr_arch, tr_init, tr_data, tr_save, tr_precision, tr_bpe;
  std::uint64_t tr_seed = 1;
  std::size_t tr_epochs = 0, tr_warmup = 0, tr_tokens = 0, tr_merges = 0;
  double tr_lr = 0;
  tr->add_option("--config", tr_config, "flat JSON config")->check(CLI::ExistingFile);
  tr->add_option("--preset", tr_preset, "tiny (desk scale) or base");
  auto* o_arch = tr->add_option("--arch", tr_arch, "baseline or mention");
  tr->add_option("--init-from", tr_init, "warm-start checkpoint directory")->check(CLI::ExistingDirectory);
  tr->add_option("--bpe", tr_bpe, "BPE merges from bpe-learn (default: learned from the training split)")
      ->check(CLI::ExistingFile);
  tr->add_option("--data", tr_data, "directory with train/dev .src/.tgt (+ .tags)")
      ->required()
      ->check(CLI::ExistingDirectory);
  tr->add_option("--save", tr_save, "output directory")->required();
  auto* o_seed = tr->add_option("--seed", tr_seed);
  auto* o_epochs = tr->add_option("--epochs", tr_epochs);
  auto* o_warmup = tr->add_option("--warmup", tr_warmup);
  auto* o_tokens = tr->add_option("--batch-tokens", tr_tokens);
  auto* o_lr = tr->add_option("--lr", tr_lr);
  auto* o_merges = tr->add_option("--bpe-merges", tr_merges);
  auto* o_prec = tr->add_option("--precision", tr_precision, "float32 or float64");
  tr->callback([&] {
    json file = json::object();
    if (!tr_config.empty()) {
      std::ifstream in(tr_config);
      try {
        file = json::parse(in);
      } catch (const json::parse_error& e) {
        throw UsageError(tr_config + ": " + e.what());
      }
    }
    std::string preset = tr_preset;
    if (preset.empty()) preset = file.value("preset", std::string("base"));
    json cfg = preset_json(preset);
    merge_flat(cfg, file, tr_config);
    if (o_arch->count()) cfg["arch"] = tr_arch;
    if (o_seed->count()) cfg["seed"] = tr_seed;
    if (o_epochs->count()) cfg["max_epochs"] = tr_epochs;
    if (o_warmup->count()) cfg["warmup_steps"] = tr_warmup;
    if (o_tokens->count()) cfg["token_batch_size"] = tr_tokens;
    if (o_lr->count()) cfg["lr0"] = tr_lr;
    if (o_merges->count()) cfg["bpe_merges"] = tr_merges;
    if (o_prec->count()) cfg["precision"] = tr_precision;
    cfg["preset"] = preset;

    const TrainConfig tc = train_config(cfg);
    PreparedCorpus corpus;
    std::optional<Checkpoint> init;
    if (!tr_init.empty() && !tr_bpe.empty())
      throw UsageError("config conflict: --bpe and --init-from both define the subword model");
    if (!tr_init.empty()) {
      init = load_checkpoint(tr_init);
      const Vocab vocab = Vocab::load((fs::path(tr_init) / "vocab.txt").string());
      corpus = prepare_corpus(tr_data, load_bpe((fs::path(tr_init) / "bpe.codes").string()), vocab);
      cfg["init_from"] = tr_init;
    } else if (!tr_bpe.empty()) {
      const BpeModel bpe = load_bpe(tr_bpe);
      const Vocab vocab = build_joint_vocab(load_word_pairs(tr_data, "train"), BpeApplier(bpe));
      corpus = prepare_corpus(tr_data, bpe, vocab);
      cfg["bpe"] = tr_bpe;
    } else {
      corpus = prepare_corpus(tr_data, cfg.at("bpe_merges").get<std::size_t>());
    }
    ModelConfig mc = model_config(cfg, corpus.vocab.size());
    mc.validate();
    if (init) {
      const ModelConfig& ic = init->config;
      const std::vector<std::tuple<std::string, std::size_t, std::size_t>> dims{
          {"d_model", mc.d_model, ic.d_model}, {"d_ffn", mc.d_ffn, ic.d_ffn}, {"heads", mc.heads, ic.heads},
          {"enc_layers", mc.enc_layers, ic.enc_layers}, {"dec_layers", mc.dec_layers, ic.dec_layers}};
      for (const auto& [key, a, b] : dims)
        if (a != b)
          throw UsageError("config conflict: " + key + " is " + std::to_string(a) +
                           " but --init-from has " + std::to_string(b));
    }
    if (mc.arch == Arch::mention)
      for (const auto* split : {&corpus.train, &corpus.dev})
        for (const auto& e : *split)
          if (e.src_tags.empty() || e.tgt_tags.empty())
            throw ContractError("the mention architecture needs .src.tags and .tgt.tags for train and dev");

    manifest(fs::path(tr_save) / "run.json", "train", cfg, tc.seed);
    auto extras = [&](const fs::path& d) { write_bundle_extras(d, corpus.vocab, corpus.bpe); };
    auto run = [&](auto& model) {
      std::cerr << to_string(mc.arch) << " model, " << model.parameters().num_values() << " parameters, "
                << corpus.train.size() << " training pairs\n";
      if (init) {
        const auto rep = warm_start(model, *init);
        std::cerr << "warm start: " << rep.copied.size() << " arrays copied, " << rep.fresh.size() << " fresh\n";
      }
      const auto res = train_model(model, corpus.train, corpus.dev, tc, tr_save, extras, &std::cerr);
      std::cout << "best epoch " << res.best.epoch << " dev perplexity " << res.best.dev_perplexity << '\n';
    };
    if (tc.precision == "float64") {
      Model<double> m(mc, tc.seed);
      run(m);
    } else {
      Model<float> m(mc, tc.seed);
      run(m);
    }
  });

  // translate ---------------------------------------------------------------
  auto* tl = app.add_subcommand("translate", "translate tokenized source text");
  std::string tl_ckpt, tl_input, tl_out, tl_mask = "predicted", tl_tags;
  DecodeOptions tl_opt;
  tl->add_option("--ckpt", tl_ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  tl->add_option("--input", tl_input, "tokenized source")->required()->check(CLI::ExistingFile);
  tl->add_option("--out", tl_out, "translations")->required();
  tl->add_option("--beam", tl_opt.beam);
  tl->add_option("--max-len", tl_opt.max_len);
  tl->add_option("--length-penalty", tl_opt.length_penalty);
  tl->add_option("--mask-mode", tl_mask, "predicted or gold");
  tl->add_option("--src-tags", tl_tags, "word-level source tags (gold mask mode)")->check(CLI::ExistingFile);
  tl->callback([&] {
    tl_opt.mask_source = parse_mask_mode(tl_mask);
    if (tl_opt.beam == 0) throw UsageError("--beam must be at least 1");
    const auto src = read_tokenized(tl_input);
    std::optional<std::vector<std::vector<MentionTag>>> tags;
    if (!tl_tags.empty()) tags = word_tags(tl_tags, src);
    if (tl_opt.mask_source == MaskSource::gold && !tags) throw UsageError("--mask-mode gold needs --src-tags");
    with_bundle(tl_ckpt, [&](const auto& b) {
      const auto hyps = translate_corpus(b, src, tl_opt, tags ? &*tags : nullptr);
      std::vector<std::string> lines;
      std::ofstream meta(tl_out + ".meta.jsonl");
      for (std::size_t i = 0; i < hyps.size(); ++i) {
        lines.push_back(join(b.words(hyps[i].tokens)));
        meta << json{{"line", i + 1},
                     {"log_prob", hyps[i].log_prob},
                     {"score", hyps[i].score},
                     {"truncated", hyps[i].truncated},
                     {"mention_mask", hyps[i].mention_mask}}
                    .dump()
             << '\n';
      }
      write_lines(tl_out, lines);
    });
    manifest(manifest_for(manifest_opt, tl_out), "translate",
             {{"ckpt", tl_ckpt},
              {"input", tl_input},
              {"beam", tl_opt.beam},
              {"max_len", tl_opt.max_len},
              {"length_penalty", tl_opt.length_penalty},
              {"mask_mode", tl_mask}});
  });

  // score -------------------------------------------------------------------
  auto* sc = app.add_subcommand("score", "teacher-forced log-probabilities of target sentences");
  std::string sc_ckpt, sc_src, sc_tgt, sc_out;
  sc->add_option("--ckpt", sc_ckpt)->required()->check(CLI::ExistingDirectory);
  sc->add_option("--src", sc_src)->required()->check(CLI::ExistingFile);
  sc->add_option("--tgt", sc_tgt)->required()->check(CLI::ExistingFile);
  sc->add_option("--out", sc_out, "scores.jsonl")->required();
  sc->callback([&] {
    const auto src = read_tokenized(sc_src), tgt = read_tokenized(sc_tgt);
    if (src.size() != tgt.size()) throw UsageError("--src and --tgt line counts differ");
    with_bundle(sc_ckpt, [&](const auto& b) {
      std::vector<Example> pairs;
      for (std::size_t i = 0; i < src.size(); ++i) pairs.push_back(b.encode(src[i], tgt[i]));
      std::ofstream out(sc_out);
      constexpr std::size_t kChunk = 32;
      for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, pairs.size() - start);
        const auto scores = score_sequences(b.model, std::span<const Example>(pairs.data() + start, n));
        for (std::size_t k = 0; k < n; ++k)
          out << json{{"line", start + k + 1}, {"log_prob", scores[k]}, {"tokens", pairs[start + k].tgt.size() + 1}}
                     .dump()
              << '\n';
      }
    });
    manifest(manifest_for(manifest_opt, sc_out), "score", {{"ckpt", sc_ckpt}, {"src", sc_src}, {"tgt", sc_tgt}});
  });

  // eval-bleu ---------------------------------------------------------------
  auto* eb = app.add_subcommand("eval-bleu", "corpus BLEU-4");
  std::string eb_cand, eb_ref;
  bool eb_smooth = false;
  eb->add_option("--cand", eb_cand)->required()->check(CLI::ExistingFile);
  eb->add_option("--ref", eb_ref)->required()->check(CLI::ExistingFile);
  eb->add_flag("--smooth", eb_smooth, "add-one smoothing for n >= 2");
  eb->callback([&] {
    const auto r = bleu(read_tokenized(eb_cand), read_tokenized(eb_ref), eb_smooth);
    std::cout << std::fixed << std::setprecision(2) << "BLEU = " << r.score << " (" << r.precisions[0] * 100 << '/'
              << r.precisions[1] * 100 << '/' << r.precisions[2] * 100 << '/' << r.precisions[3] * 100
              << ", BP = " << std::setprecision(4) << r.brevity_penalty << ")\n";
    manifest(manifest_for(manifest_opt, ""), "eval-bleu", {{"cand", eb_cand}, {"ref", eb_ref}, {"smooth", eb_smooth}});
  });

  // eval-apt ----------------------------------------------------------------
  auto* ea = app.add_subcommand("eval-apt", "accuracy of pronoun translation");
  std::string ea_src, ea_cand, ea_ref, ea_align_ref, ea_align_cand, ea_lexicon, ea_equiv, ea_out;
  std::vector<std::string> ea_pronouns;
  ea->add_option("--src", ea_src)->required()->check(CLI::ExistingFile);
  ea->add_option("--cand", ea_cand)->required()->check(CLI::ExistingFile);
  ea->add_option("--ref", ea_ref)->required()->check(CLI::ExistingFile);
  ea->add_option("--align-ref", ea_align_ref)->required()->check(CLI::ExistingFile);
  ea->add_option("--align-cand", ea_align_cand, "candidate alignments (or use --lexicon)")
      ->check(CLI::ExistingFile);
  ea->add_option("--lexicon", ea_lexicon, "translation lexicon for aligning candidates")->check(CLI::ExistingFile);
  ea->add_option("--equivalents", ea_equiv, "pronoun equivalence lexicon")->check(CLI::ExistingFile);
  ea->add_option("--pronouns", ea_pronouns, "tracked source pronouns");
  ea->add_option("--out", ea_out, "JSON report");
  ea->callback([&] {
    const auto src = read_tokenized(ea_src), cand = read_tokenized(ea_cand), ref = read_tokenized(ea_ref);
    std::vector<Alignment> align_cand;
    if (!ea_align_cand.empty()) {
      align_cand = read_alignments(ea_align_cand);
    } else if (!ea_lexicon.empty()) {
      const auto lex = read_lexicon(ea_lexicon);
      for (std::size_t i = 0; i < src.size() && i < cand.size(); ++i)
        align_cand.push_back(align_by_lexicon(src[i], cand[i], lex));
    } else {
      throw UsageError("eval-apt needs --align-cand or --lexicon");
    }
    const EquivalenceLexicon eq = ea_equiv.empty() ? EquivalenceLexicon{} : read_lexicon(ea_equiv);
    const auto r = apt(src, cand, ref, read_alignments(ea_align_ref), align_cand,
                       ea_pronouns.empty() ? default_tracked_pronouns() : ea_pronouns, eq);
    const json j = to_json(r);
    std::cout << j.dump(2) << '\n';
    if (!ea_out.empty()) write_json(ea_out, j);
    manifest(manifest_for(manifest_opt, ea_out), "eval-apt",
             {{"src", ea_src}, {"cand", ea_cand}, {"ref", ea_ref}, {"pronouns", ea_pronouns}});
  });

  // eval-contrastive --------------------------------------------------------
  auto* ec = app.add_subcommand("eval-contrastive", "contrastive pronoun evaluation");
  std::string ec_ckpt, ec_sets, ec_out;
  ec->add_option("--ckpt", ec_ckpt)->required()->check(CLI::ExistingDirectory);
  ec->add_option("--sets", ec_sets, "contrastive sets (JSONL)")->required()->check(CLI::ExistingFile);
  ec->add_option("--out", ec_out, "JSON report");
  ec->callback([&] {
    const auto sets = read_contrastive_sets(ec_sets);
    json j;
    with_bundle(ec_ckpt, [&](const auto& b) { j = to_json(contrastive_eval(sets, bundle_scorer(b))); });
    std::cout << j.dump(2) << '\n';
    if (!ec_out.empty()) write_json(ec_out, j);
    manifest(manifest_for(manifest_opt, ec_out), "eval-contrastive", {{"ckpt", ec_ckpt}, {"sets", ec_sets}});
  });

  // evaluate ----------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "BLEU, APT, contrastive and classifier agreement on a data directory");
  std::string ev_ckpt, ev_data, ev_out, ev_system;
  std::uint64_t ev_seed = 0;
  DecodeOptions ev_opt;
  ev->add_option("--ckpt", ev_ckpt)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--data", ev_data, "directory with test split, lexicon.tsv, contrastive.jsonl")
      ->required()
      ->check(CLI::ExistingDirectory);
  ev->add_option("--out", ev_out, "directory for eval.json and test.hyp")->required();
  ev->add_option("--system", ev_system, "label in reports (default: architecture)");
  ev->add_option("--seed", ev_seed, "seed label in reports");
  ev->add_option("--beam", ev_opt.beam);
  ev->callback([&] {
    with_bundle(ev_ckpt, [&](const auto& b) {
      const std::string system = ev_system.empty() ? to_string(b.model.config().arch) : ev_system;
      const auto s = evaluate_system(b, ev_data, ev_opt, system, ev_seed, ev_out);
      std::cout << to_json(s).dump(2) << '\n';
    });
    manifest(manifest_opt.empty() ? fs::path(ev_out) / "eval.run.json" : fs::path(manifest_opt), "evaluate",
             {{"ckpt", ev_ckpt}, {"data", ev_data}, {"beam", ev_opt.beam}}, ev_seed);
  });

  // grad-check --------------------------------------------------------------
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check at 64-bit precision");
  std::string gc_arch = "mention";
  std::uint64_t gc_seed = 1;
  double gc_tol = 1e-4;
  std::size_t gc_probes = 20, gc_vocab = 40;
  gc->add_option("--arch", gc_arch, "baseline or mention");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--tolerance", gc_tol);
  gc->add_option("--probes", gc_probes, "random probes in addition to one per mention array");
  gc->add_option("--vocab", gc_vocab);
  gc->callback([&] {
    const auto r = grad_check(ModelConfig::tiny(gc_vocab, parse_arch(gc_arch)), gc_seed, gc_probes);
    for (const auto& p : r.probes)
      std::cout << std::left << std::setw(40) << p.name + "[" + std::to_string(p.index) + "]" << std::scientific
                << std::setprecision(3) << " analytic " << p.analytic << " numeric " << p.numeric << " rel "
                << p.rel_error << '\n';
    std::cout << "max relative error " << std::scientific << std::setprecision(3) << r.max_rel_error << " over "
              << r.probes.size() << " probes (" << r.mention_arrays_probed.size() << " mention arrays)\n";
    if (!(r.max_rel_error < gc_tol)) {
      std::cerr << "error: gradient check exceeds tolerance " << gc_tol << '\n';
      exit_code = 1;
    }
    manifest(manifest_for(manifest_opt, ""), "grad-check",
             {{"arch", gc_arch}, {"tolerance", gc_tol}, {"probes", gc_probes}, {"vocab", gc_vocab}}, gc_seed);
  });

  // report ------------------------------------------------------------------
  auto* rp = app.add_subcommand("report", "summary table over every eval.json below a run directory");
  std::string rp_run;
  rp->add_option("--run", rp_run)->required()->check(CLI::ExistingDirectory);
  rp->callback([&] {
    const auto evals = collect_evals(rp_run);
    if (evals.empty()) throw UsageError("no eval.json below " + rp_run);
    std::cout << render_table(evals);
  });

  // align-lexicon -----------------------------------------------------------
  auto* al = app.add_subcommand("align-lexicon", "word alignments from a translation lexicon");
  std::string al_src, al_tgt, al_lex, al_out;
  al->add_option("--src", al_src)->required()->check(CLI::ExistingFile);
  al->add_option("--tgt", al_tgt)->required()->check(CLI::ExistingFile);
  al->add_option("--lexicon", al_lex)->required()->check(CLI::ExistingFile);
  al->add_option("--out", al_out)->required();
  al->callback([&] {
    const auto src = read_tokenized(al_src), tgt = read_tokenized(al_tgt);
    if (src.size() != tgt.size()) throw UsageError("--src and --tgt line counts differ");
    const auto lex = read_lexicon(al_lex);
    std::vector<std::string> lines;
    for (std::size_t i = 0; i < src.size(); ++i) lines.push_back(format_alignment(align_by_lexicon(src[i], tgt[i], lex)));
    write_lines(al_out, lines);
    manifest(manifest_for(manifest_opt, al_out), "align-lexicon", {{"src", al_src}, {"tgt", al_tgt}, {"lexicon", al_lex}});
  });

  try {
    thread_count();
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return exit_code;
}
