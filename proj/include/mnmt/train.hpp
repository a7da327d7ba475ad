#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mnmt/batch.hpp"
#include "mnmt/checkpoint.hpp"
#include "mnmt/model.hpp"
#include "mnmt/rng.hpp"

namespace mnmt {

struct TrainConfig {
  double lr0 = 5e-4;
  std::size_t warmup_steps = 4000;
  std::size_t max_epochs = 20;
  std::size_t token_batch_size = 4000;
  LossWeights weights;
  std::uint64_t seed = 1;
  std::string precision = "float32";
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;

  void validate() const {
    if (!(lr0 > 0) || warmup_steps == 0 || max_epochs == 0 || token_batch_size == 0)
      throw std::invalid_argument("training hyperparameters must be positive");
    if (weights.mt < 0 || weights.src < 0 || weights.tgt < 0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (precision != "float32" && precision != "float64")
      throw std::invalid_argument("precision must be float32 or float64");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr0", c.lr0},
       {"warmup_steps", c.warmup_steps},
       {"max_epochs", c.max_epochs},
       {"token_batch_size", c.token_batch_size},
       {"loss_weight_mt", c.weights.mt},
       {"loss_weight_src", c.weights.src},
       {"loss_weight_tgt", c.weights.tgt},
       {"seed", c.seed},
       {"precision", c.precision},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps}};
}

// Linear warmup to lr0 at step == warmup, then inverse square-root decay.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  if (step == 0) throw ContractError("lr_schedule: steps are counted from 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  return cfg.lr0 * std::min(s / w, std::sqrt(w / s));
}

template <class T>
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  explicit Adam(const TrainConfig& c) : Adam(c.adam_beta1, c.adam_beta2, c.adam_eps) {}

  // One bias-corrected update of every parameter that has a gradient.
  void step(ParameterSet<T>& params, double lr) {
    if (m_.empty()) {
      for (const auto& t : params.tensors()) {
        m_.emplace_back(t.size(), T(0));
        v_.emplace_back(t.size(), T(0));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& tensors = params.tensors();
    for (std::size_t p = 0; p < tensors.size(); ++p) {
      auto& t = tensors[p];
      if (!t.has_grad()) continue;
      auto w = t.mutable_data();
      const auto g = t.grad();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = static_cast<T>(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
        v[i] = static_cast<T>(beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i]);
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        w[i] = static_cast<T>(w[i] - lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// Groups examples of similar length so that batch_size * longest side stays
// within token_cap, then shuffles batch order. Deterministic in (seed, epoch).
inline std::vector<std::vector<std::size_t>> make_token_batches(const std::vector<Example>& data,
                                                                std::size_t token_cap,
                                                                std::uint64_t seed,
                                                                std::uint64_t epoch) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix64(seed) ^ mix64(epoch + 0x5151));
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  auto len = [&](std::size_t i) { return std::max(data[i].src.size(), data[i].tgt.size()) + 1; };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return len(a) < len(b); });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t longest = 0;
  for (const std::size_t i : idx) {
    const std::size_t l = std::max(longest, len(i));
    if (!cur.empty() && l * (cur.size() + 1) > token_cap) {
      batches.push_back(std::move(cur));
      cur.clear();
      longest = 0;
    }
    cur.push_back(i);
    longest = std::max(longest, len(i));
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  for (std::size_t i = batches.size(); i > 1; --i) std::swap(batches[i - 1], batches[rng.below(i)]);
  return batches;
}

inline Batch gather_batch(const std::vector<Example>& data, const std::vector<std::size_t>& ids,
                          bool with_tags) {
  std::vector<Example> picked;
  picked.reserve(ids.size());
  for (const auto i : ids) picked.push_back(data[i]);
  return make_batch(picked, with_tags);
}

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0, mt = 0, src = 0, tgt = 0, total = 0;
};

inline void to_json(nlohmann::json& j, const StepLog& s) {
  j = {{"step", s.step}, {"lr", s.lr}, {"L_mt", s.mt}, {"L_src", s.src}, {"L_tgt", s.tgt},
       {"total", s.total}};
}

template <class T>
struct TrainState {
  explicit TrainState(const TrainConfig& cfg) : adam(cfg) {}
  Adam<T> adam;
  std::size_t step = 0;
};

struct EpochStats {
  double mt = 0, src = 0, tgt = 0, total = 0;
  std::size_t steps = 0;
};

// One optimizer step on a batch: forward, joint loss, backward, Adam.
template <class T>
StepLog train_step(Model<T>& model, const Batch& batch, const TrainConfig& cfg, TrainState<T>& state,
                   MentionPath path = MentionPath::full) {
  const std::size_t step = state.step + 1;
  ForwardOptions opt;
  opt.train = true;
  opt.seed = cfg.seed;
  opt.step = step;
  opt.path = path;
  opt.mask_source = MaskSource::gold;
  model.parameters().zero_grad();
  const auto fwd = model.forward(batch, opt);
  const auto loss = model.loss(batch, fwd, cfg.weights, model.config().label_smoothing);
  const double total = static_cast<double>(loss.total.item());
  if (!std::isfinite(total)) throw NonFiniteError("loss is not finite");
  backward(loss.total);
  const double lr = lr_schedule(step, cfg);
  state.adam.step(model.parameters(), lr);
  state.step = step;
  return {step, lr, loss.mt, loss.src, loss.tgt, total};
}

template <class T>
EpochStats train_epoch(Model<T>& model, const std::vector<Example>& data, const TrainConfig& cfg,
                       TrainState<T>& state, std::uint64_t epoch, std::ostream* log = nullptr,
                       MentionPath path = MentionPath::full) {
  const bool tagged = model.has_mention();
  const auto batches = make_token_batches(data, cfg.token_batch_size, cfg.seed, epoch);
  EpochStats stats;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch batch = gather_batch(data, batches[bi], tagged);
    StepLog s;
    try {
      s = train_step(model, batch, cfg, state, path);
    } catch (const NonFiniteError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(state.step + 1) +
                             " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                             "): " + e.what());
    }
    if (log) *log << nlohmann::json(s).dump() << '\n';
    stats.mt += s.mt;
    stats.src += s.src;
    stats.tgt += s.tgt;
    stats.total += s.total;
    ++stats.steps;
  }
  if (stats.steps) {
    const double n = static_cast<double>(stats.steps);
    stats.mt /= n;
    stats.src /= n;
    stats.tgt /= n;
    stats.total /= n;
  }
  return stats;
}

// exp of the mean per-token cross-entropy (no smoothing, no dropout). The
// mention model uses its own predicted source masks.
template <class T>
double perplexity(const Model<T>& model, const std::vector<Example>& data,
                  std::size_t token_cap = 4000) {
  double nll = 0;
  std::size_t tokens = 0;
  for (const auto& ids : make_token_batches(data, token_cap, 0, 0)) {
    const Batch b = gather_batch(data, ids, false);
    ForwardOptions opt;
    opt.mask_source = MaskSource::predicted;
    const auto r = model.forward(b, opt);
    const auto ce = cross_entropy(r.logits, b.tgt_out, b.tgt_valid, 0.0);
    const std::size_t n = b.tgt_tokens();
    nll += static_cast<double>(ce.item()) * static_cast<double>(n);
    tokens += n;
  }
  return tokens ? std::exp(nll / static_cast<double>(tokens)) : 1.0;
}

struct CheckpointRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double dev_perplexity = 0;
  std::string path;
};

inline void to_json(nlohmann::json& j, const CheckpointRecord& r) {
  j = {{"epoch", r.epoch}, {"step", r.step}, {"dev_perplexity", r.dev_perplexity}, {"path", r.path}};
}
inline void from_json(const nlohmann::json& j, CheckpointRecord& r) {
  j.at("epoch").get_to(r.epoch);
  j.at("step").get_to(r.step);
  j.at("dev_perplexity").get_to(r.dev_perplexity);
  j.at("path").get_to(r.path);
}

// Lowest dev perplexity; the earliest epoch wins ties.
inline const CheckpointRecord& select_best(const std::vector<CheckpointRecord>& records) {
  if (records.empty()) throw std::invalid_argument("no checkpoints to select from");
  const CheckpointRecord* best = &records.front();
  for (const auto& r : records)
    if (r.dev_perplexity < best->dev_perplexity) best = &r;
  return *best;
}

struct TrainingResult {
  std::vector<CheckpointRecord> records;
  CheckpointRecord best;
};

// Full loop: every epoch is saved under out_dir/last, and copied to
// out_dir/best when its dev perplexity improves. write_extras adds bundle
// files (vocabulary, BPE codes) to each saved directory.
template <class T>
TrainingResult train_model(Model<T>& model, const std::vector<Example>& train,
                           const std::vector<Example>& dev, const TrainConfig& cfg,
                           const std::filesystem::path& out_dir,
                           const std::function<void(const std::filesystem::path&)>& write_extras = {},
                           std::ostream* progress = nullptr) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl");
  TrainState<T> state(cfg);
  TrainingResult result;
  double best_ppl = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const EpochStats stats = train_epoch(model, train, cfg, state, epoch, &log);
    const double ppl = perplexity(model, dev);
    const auto last = out_dir / "last";
    save_checkpoint(model, last);
    if (write_extras) write_extras(last);
    // Only the best epoch keeps a retained checkpoint directory.
    CheckpointRecord rec{epoch, state.step, ppl, ""};
    if (ppl < best_ppl) {
      rec.path = "best";  // relative to out_dir
      best_ppl = ppl;
      save_checkpoint(model, out_dir / "best");
      if (write_extras) write_extras(out_dir / "best");
      result.best = rec;
    }
    result.records.push_back(rec);
    if (progress)
      *progress << "epoch " << epoch << " step " << state.step << " loss " << stats.total
                << " mt " << stats.mt << " src " << stats.src << " tgt " << stats.tgt
                << " dev_ppl " << ppl << std::endl;
  }
  std::ofstream(out_dir / "records.json") << nlohmann::json(result.records).dump(2) << '\n';
  return result;
}

}  // namespace mnmt
