#pragma once

// End-to-end experiment: BPE + vocabulary, baseline training, warm-started
// mention training, and evaluation (BLEU, APT, contrastive, classifier
// agreement), with per-run manifests and a summary table.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mnmt/bundle.hpp"
#include "mnmt/parameters.hpp"

namespace mnmt {

inline constexpr const char* kVersion = "0.3.0";

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// run.json: everything needed to replay an invocation. No timestamps, so two
// identical runs write identical files.
inline void write_run_manifest_file(const std::filesystem::path& file, const std::string& command,
                                    const nlohmann::json& config, std::uint64_t seed) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  nlohmann::json m = {{"command", command},
                      {"config", config},
                      {"config_hash", hex64(fnv1a(config.dump()))},
                      {"seed", seed},
                      {"version", kVersion},
                      {"compiler", __VERSION__},
                      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                    "." + std::to_string(EIGEN_MINOR_VERSION)}};
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << m.dump(2) << '\n';
}

inline void write_run_manifest(const std::filesystem::path& dir, const std::string& command,
                               const nlohmann::json& config, std::uint64_t seed) {
  write_run_manifest_file(dir / "run.json", command, config, seed);
}

struct PreparedCorpus {
  BpeModel bpe;
  Vocab vocab;
  std::vector<Example> train, dev;
};

// Joint BPE learned on both sides of the training split.
inline BpeModel learn_joint_bpe(const std::vector<WordPair>& pairs, std::size_t merges) {
  std::vector<std::string> tokens;
  for (const auto& p : pairs) {
    tokens.insert(tokens.end(), p.src.begin(), p.src.end());
    tokens.insert(tokens.end(), p.tgt.begin(), p.tgt.end());
  }
  return bpe_learn(tokens, merges);
}

inline PreparedCorpus prepare_corpus(const std::filesystem::path& data_dir, std::size_t merges) {
  const auto train_words = load_word_pairs(data_dir, "train");
  PreparedCorpus c;
  c.bpe = learn_joint_bpe(train_words, merges);
  const BpeApplier applier(c.bpe);
  c.vocab = build_joint_vocab(train_words, applier);
  c.train = to_examples(train_words, applier, c.vocab);
  c.dev = to_examples(load_word_pairs(data_dir, "dev"), applier, c.vocab);
  return c;
}

// Reuses an existing BPE model and vocabulary (e.g. from a warm-start source).
inline PreparedCorpus prepare_corpus(const std::filesystem::path& data_dir, const BpeModel& bpe,
                                     const Vocab& vocab) {
  PreparedCorpus c{bpe, vocab, {}, {}};
  const BpeApplier applier(c.bpe);
  c.train = to_examples(load_word_pairs(data_dir, "train"), applier, c.vocab);
  c.dev = to_examples(load_word_pairs(data_dir, "dev"), applier, c.vocab);
  return c;
}

struct EvalSummary {
  std::string system;
  std::uint64_t seed = 0;
  double bleu = 0;
  AptReport apt;
  ContrastiveReport contrastive;
  std::optional<double> agreement;  // mention architecture only
  std::size_t truncated = 0;
};

inline nlohmann::json to_json(const EvalSummary& s) {
  return {{"system", s.system},
          {"seed", s.seed},
          {"bleu", s.bleu},
          {"apt", to_json(s.apt)},
          {"contrastive", to_json(s.contrastive)},
          {"classifier_agreement", s.agreement ? nlohmann::json(*s.agreement) : nlohmann::json(nullptr)},
          {"truncated_translations", s.truncated}};
}

template <class T>
std::vector<Translation> translate_corpus(const Bundle<T>& b, const std::vector<std::vector<std::string>>& src,
                                          const DecodeOptions& opt,
                                          const std::vector<std::vector<MentionTag>>* src_tags = nullptr) {
  std::vector<Example> ex;
  for (std::size_t i = 0; i < src.size(); ++i) ex.push_back(b.encode(src[i], {}, src_tags ? (*src_tags)[i] : std::vector<MentionTag>{}));
  std::vector<Translation> out(src.size());
  if (opt.beam > 1) {
    for (std::size_t i = 0; i < ex.size(); ++i) out[i] = translate(b.model, ex[i], opt);
    return out;
  }
  // Greedy: length-sorted chunks keep padding small; results are per row.
  std::vector<std::size_t> order(ex.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t c) { return ex[a].src.size() < ex[c].src.size(); });
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < order.size(); start += kChunk) {
    std::vector<Example> chunk;
    for (std::size_t k = start; k < std::min(order.size(), start + kChunk); ++k) chunk.push_back(ex[order[k]]);
    const auto res = translate_greedy_batch(b.model, std::span<const Example>(chunk), opt);
    for (std::size_t k = 0; k < res.size(); ++k) out[order[start + k]] = res[k];
  }
  return out;
}

// Evaluates on <data>/test.{src,tgt,align}, <data>/contrastive.jsonl and,
// for the mention model, classifier agreement on the dev split.
template <class T>
EvalSummary evaluate_system(const Bundle<T>& b, const std::filesystem::path& data_dir, const DecodeOptions& opt,
                            const std::string& system, std::uint64_t seed,
                            const std::filesystem::path& out_dir = {}) {
  EvalSummary s;
  s.system = system;
  s.seed = seed;
  const auto test = load_word_pairs(data_dir, "test");
  Corpus src, ref, cand;
  for (const auto& p : test) {
    src.push_back(p.src);
    ref.push_back(p.tgt);
  }
  const auto hyps = translate_corpus(b, src, opt);
  for (const auto& h : hyps) {
    cand.push_back(b.words(h.tokens));
    s.truncated += h.truncated;
  }
  s.bleu = bleu(cand, ref).score;

  const auto lexicon = read_lexicon((data_dir / "lexicon.tsv").string());
  std::vector<Alignment> align_ref, align_cand;
  const auto ref_align_path = data_dir / "test.align";
  if (std::filesystem::exists(ref_align_path)) align_ref = read_alignments(ref_align_path.string());
  else
    for (std::size_t i = 0; i < src.size(); ++i) align_ref.push_back(align_by_lexicon(src[i], ref[i], lexicon));
  for (std::size_t i = 0; i < src.size(); ++i) align_cand.push_back(align_by_lexicon(src[i], cand[i], lexicon));
  s.apt = apt(src, cand, ref, align_ref, align_cand);

  const auto sets = read_contrastive_sets((data_dir / "contrastive.jsonl").string());
  s.contrastive = contrastive_eval(sets, bundle_scorer(b));

  if (b.model.has_mention()) {
    const auto dev = to_examples(load_word_pairs(data_dir, "dev"), b.applier, b.vocab);
    s.agreement = mention_agreement(b.model, dev);
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> lines;
    for (const auto& c : cand) lines.push_back(join(c));
    write_lines((out_dir / "test.hyp").string(), lines);
    std::ofstream(out_dir / "eval.json") << to_json(s).dump(2) << '\n';
  }
  return s;
}

struct ExperimentConfig {
  std::size_t bpe_merges = 300;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  TrainConfig baseline;
  TrainConfig mention;
  DecodeOptions decode;
  double dropout = 0.1;

  static ExperimentConfig desk() {
    ExperimentConfig c;
    c.baseline.warmup_steps = c.mention.warmup_steps = 200;
    c.baseline.token_batch_size = c.mention.token_batch_size = 2000;
    c.baseline.max_epochs = 10;
    c.mention.max_epochs = 3;
    c.baseline.weights = {1.0, 0.0, 0.0};
    return c;
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"bpe_merges", c.bpe_merges}, {"seeds", c.seeds},          {"baseline", c.baseline},
          {"mention", c.mention},       {"beam", c.decode.beam},     {"max_len", c.decode.max_len},
          {"length_penalty", c.decode.length_penalty},              {"dropout", c.dropout}};
}

struct ExperimentResult {
  std::vector<EvalSummary> baseline, mention;
};

// Per seed: train the baseline, warm-start the mention model from its best
// checkpoint, train it, evaluate both. Layout: out/seed_<s>/{baseline,mention}.
inline ExperimentResult run_experiment(const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                                       const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  write_run_manifest(out_dir, "experiment", to_json(cfg), cfg.seeds.empty() ? 0 : cfg.seeds.front());
  const PreparedCorpus corpus = prepare_corpus(data_dir, cfg.bpe_merges);
  auto extras = [&](const std::filesystem::path& d) { write_bundle_extras(d, corpus.vocab, corpus.bpe); };
  ExperimentResult res;
  for (const auto seed : cfg.seeds) {
    const auto seed_dir = out_dir / ("seed_" + std::to_string(seed));
    ModelConfig mc = ModelConfig::tiny(corpus.vocab.size(), Arch::baseline);
    mc.dropout = cfg.dropout;

    TrainConfig bt = cfg.baseline;
    bt.seed = seed;
    {
      Model<float> base(mc, seed);
      if (progress) *progress << "[seed " << seed << "] baseline, " << base.parameters().num_values() << " parameters\n";
      train_model(base, corpus.train, corpus.dev, bt, seed_dir / "baseline", extras, progress);
    }
    const auto base_best = load_bundle<float>(seed_dir / "baseline" / "best");
    res.baseline.push_back(evaluate_system(base_best, data_dir, cfg.decode, "baseline", seed, seed_dir / "baseline"));

    TrainConfig mt = cfg.mention;
    mt.seed = seed;
    mc.arch = Arch::mention;
    Model<float> men(mc, seed);
    const auto report = warm_start(men, load_checkpoint(seed_dir / "baseline" / "best"));
    if (progress)
      *progress << "[seed " << seed << "] mention, warm start copied " << report.copied.size() << " arrays, "
                << report.fresh.size() << " fresh\n";
    train_model(men, corpus.train, corpus.dev, mt, seed_dir / "mention", extras, progress);
    const auto men_best = load_bundle<float>(seed_dir / "mention" / "best");
    res.mention.push_back(evaluate_system(men_best, data_dir, cfg.decode, "mention", seed, seed_dir / "mention"));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Summary table

inline std::string fmt_opt(const nlohmann::json& v, double scale = 100.0) {
  if (v.is_null()) return "n/a";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(1) << v.get<double>() * scale;
  return ss.str();
}

// Columns: BLEU | APT all | APT ambiguous | contrastive overall | by distance.
inline std::string render_table(const std::vector<nlohmann::json>& evals) {
  std::ostringstream out;
  auto row = [&](const std::vector<std::string>& cells) {
    static const int widths[] = {16, 7, 8, 8, 8, 7, 7, 7};
    for (std::size_t i = 0; i < cells.size(); ++i)
      out << (i == 0 ? std::left : std::right) << std::setw(widths[i]) << cells[i] << (i + 1 < cells.size() ? " " : "");
    out << '\n';
  };
  row({"system", "BLEU", "APT", "APT-amb", "Acc", "d=0", "d=1", "d>1"});
  auto line = [&](const std::string& name, const nlohmann::json& e) {
    const auto& c = e.at("contrastive");
    row({name, fmt_opt(e.at("bleu"), 1.0), fmt_opt(e.at("apt").at("all").at("score")),
         fmt_opt(e.at("apt").at("ambiguous").at("score")), fmt_opt(c.at("accuracy")),
         fmt_opt(c.at("buckets").at("0").at("accuracy")), fmt_opt(c.at("buckets").at("1").at("accuracy")),
         fmt_opt(c.at("buckets").at(">1").at("accuracy"))});
  };
  std::map<std::string, std::vector<const nlohmann::json*>> by_system;
  for (const auto& e : evals) {
    line(e.at("system").get<std::string>() + " s" + std::to_string(e.at("seed").get<std::uint64_t>()), e);
    by_system[e.at("system").get<std::string>()].push_back(&e);
  }
  // Means over seeds; an undefined entry makes the mean undefined.
  for (const auto& [system, list] : by_system) {
    if (list.size() < 2) continue;
    auto mean = [&](auto get) -> nlohmann::json {
      double sum = 0;
      for (const auto* e : list) {
        const nlohmann::json v = get(*e);
        if (v.is_null()) return nullptr;
        sum += v.get<double>();
      }
      return sum / static_cast<double>(list.size());
    };
    nlohmann::json m;
    m["bleu"] = mean([](const nlohmann::json& e) { return e.at("bleu"); });
    m["apt"]["all"]["score"] = mean([](const nlohmann::json& e) { return e.at("apt").at("all").at("score"); });
    m["apt"]["ambiguous"]["score"] =
        mean([](const nlohmann::json& e) { return e.at("apt").at("ambiguous").at("score"); });
    m["contrastive"]["accuracy"] = mean([](const nlohmann::json& e) { return e.at("contrastive").at("accuracy"); });
    for (const char* k : {"0", "1", ">1"})
      m["contrastive"]["buckets"][k]["accuracy"] =
          mean([k](const nlohmann::json& e) { return e.at("contrastive").at("buckets").at(k).at("accuracy"); });
    line(system + " mean", m);
  }
  return out.str();
}

// All eval.json files below a run directory, in path order.
inline std::vector<nlohmann::json> collect_evals(const std::filesystem::path& run_dir) {
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::recursive_directory_iterator(run_dir))
    if (e.is_regular_file() && e.path().filename() == "eval.json") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<nlohmann::json> out;
  for (const auto& p : paths) out.push_back(nlohmann::json::parse(std::ifstream(p)));
  return out;
}

}  // namespace mnmt
