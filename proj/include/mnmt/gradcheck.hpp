#pragma once

// Central finite-difference check of the full training loss (translation
// cross-entropy plus both mention classifier terms) at 64-bit precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mnmt/batch.hpp"
#include "mnmt/model.hpp"
#include "mnmt/rng.hpp"

namespace mnmt {

struct GradProbe {
  std::string name;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckResult {
  std::vector<GradProbe> probes;
  double max_rel_error = 0;
  std::vector<std::string> mention_arrays_probed;
};

// Below the floor the error is effectively absolute: central differences
// at eps 1e-5 carry round-off of order 1e-11, so a gradient that is exactly
// zero (an attention key bias, say) would otherwise look wrong.
inline constexpr double kGradFloor = 1e-5;

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kGradFloor});
}

// Random tagged batch over ids [4, vocab).
inline Batch random_batch(Rng& rng, std::size_t vocab, std::size_t batch, std::size_t max_len) {
  std::vector<Example> ex(batch);
  for (auto& e : ex) {
    const std::size_t ls = 2 + rng.below(max_len - 1), lt = 2 + rng.below(max_len - 1);
    for (std::size_t j = 0; j < ls; ++j) {
      e.src.push_back(static_cast<std::int32_t>(4 + rng.below(vocab - 4)));
      e.src_tags.push_back(rng.uniform() < 0.4 ? MentionTag::mention : MentionTag::none);
    }
    for (std::size_t j = 0; j < lt; ++j) {
      e.tgt.push_back(static_cast<std::int32_t>(4 + rng.below(vocab - 4)));
      e.tgt_tags.push_back(rng.uniform() < 0.4 ? MentionTag::mention : MentionTag::none);
    }
  }
  return make_batch(ex, true);
}

// Probes `random_probes` entries drawn uniformly over all parameters, plus
// one entry of every mention-specific array.
inline GradCheckResult grad_check(const ModelConfig& config, std::uint64_t seed, std::size_t random_probes = 20,
                                  double eps = 1e-5) {
  ModelConfig cfg = config;
  cfg.dropout = 0.0;
  Model<double> model(cfg, seed);
  Rng rng(mix64(seed) ^ 0x6c);
  // Gold-mask batch; at least one mention per source keeps the full path live.
  Batch b = random_batch(rng, cfg.vocab_size, 2, 6);
  for (std::size_t i = 0; i < b.size; ++i) b.src_tags[i * b.src_len] = 1;
  ForwardOptions opt;
  opt.mask_source = MaskSource::gold;
  const LossWeights weights;
  auto loss_value = [&] {
    const auto r = model.forward(b, opt);
    return static_cast<double>(model.loss(b, r, weights, cfg.label_smoothing).total.item());
  };
  model.parameters().zero_grad();
  {
    const auto r = model.forward(b, opt);
    backward(model.loss(b, r, weights, cfg.label_smoothing).total);
  }
  auto& ps = model.parameters();
  std::vector<std::pair<std::size_t, std::size_t>> targets;
  const std::size_t total = ps.num_values();
  for (std::size_t k = 0; k < random_probes; ++k) {
    std::size_t flat = rng.below(total);
    for (std::size_t p = 0; p < ps.size(); ++p) {
      if (flat < ps.tensors()[p].size()) {
        targets.emplace_back(p, flat);
        break;
      }
      flat -= ps.tensors()[p].size();
    }
  }
  GradCheckResult result;
  for (std::size_t p = 0; p < ps.size(); ++p) {
    if (ps.names()[p].rfind(kMentionPrefix, 0) != 0) continue;
    targets.emplace_back(p, rng.below(ps.tensors()[p].size()));
    result.mention_arrays_probed.push_back(ps.names()[p]);
  }
  for (const auto& [p, i] : targets) {
    auto& t = ps.tensors()[p];
    const double analytic = t.grad()[i];
    const double orig = t.data()[i];
    t.mutable_data()[i] = orig + eps;
    const double up = loss_value();
    t.mutable_data()[i] = orig - eps;
    const double down = loss_value();
    t.mutable_data()[i] = orig;
    const double numeric = (up - down) / (2 * eps);
    GradProbe probe{ps.names()[p], i, analytic, numeric, relative_error(analytic, numeric)};
    result.max_rel_error = std::max(result.max_rel_error, probe.rel_error);
    result.probes.push_back(probe);
  }
  return result;
}

}  // namespace mnmt
