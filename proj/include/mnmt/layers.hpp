#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mnmt/parameters.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt {

template <class T>
struct AttentionWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct FeedForwardWeights {
  Tensor<T> w1, b1, w2, b2;
};

template <class T>
struct NormWeights {
  Tensor<T> gain, bias;
};

template <class T>
AttentionWeights<T> register_attention(ParameterSet<T>& ps, const std::string& prefix,
                                       std::size_t d, std::uint64_t seed) {
  auto w = [&](const std::string& n) {
    return ps.add(prefix + "." + n, {d, d}, init_values<T>(Init::xavier, {d, d}, seed, prefix + "." + n));
  };
  auto b = [&](const std::string& n) { return ps.add(prefix + "." + n, {d}, std::vector<T>(d, T(0))); };
  AttentionWeights<T> a;
  a.wq = w("q.weight");
  a.bq = b("q.bias");
  a.wk = w("k.weight");
  a.bk = b("k.bias");
  a.wv = w("v.weight");
  a.bv = b("v.bias");
  a.wo = w("out.weight");
  a.bo = b("out.bias");
  return a;
}

template <class T>
FeedForwardWeights<T> register_ffn(ParameterSet<T>& ps, const std::string& prefix, std::size_t d_in,
                                   std::size_t d_hidden, std::size_t d_out, std::uint64_t seed) {
  FeedForwardWeights<T> f;
  f.w1 = ps.add(prefix + ".fc1.weight", {d_in, d_hidden},
                init_values<T>(Init::xavier, {d_in, d_hidden}, seed, prefix + ".fc1.weight"));
  f.b1 = ps.add(prefix + ".fc1.bias", {d_hidden}, std::vector<T>(d_hidden, T(0)));
  f.w2 = ps.add(prefix + ".fc2.weight", {d_hidden, d_out},
                init_values<T>(Init::xavier, {d_hidden, d_out}, seed, prefix + ".fc2.weight"));
  f.b2 = ps.add(prefix + ".fc2.bias", {d_out}, std::vector<T>(d_out, T(0)));
  return f;
}

template <class T>
NormWeights<T> register_norm(ParameterSet<T>& ps, const std::string& prefix, std::size_t d) {
  return {ps.add(prefix + ".gain", {d}, std::vector<T>(d, T(1))),
          ps.add(prefix + ".bias", {d}, std::vector<T>(d, T(0)))};
}

// Dropout calls draw consecutive stream ids, so the i-th dropout site of a
// forward pass at a given (seed, step) always sees the same mask.
class DropoutStream {
 public:
  DropoutStream() = default;
  DropoutStream(double rate, std::uint64_t seed, std::uint64_t step)
      : rate_(rate), seed_(seed), step_(step) {}

  template <class T>
  Tensor<T> operator()(const Tensor<T>& x) {
    if (rate_ <= 0.0) return x;
    return dropout(x, rate_, seed_, mix64(step_) ^ counter_++);
  }

  bool active() const { return rate_ > 0.0; }

 private:
  double rate_ = 0.0;
  std::uint64_t seed_ = 0;
  std::uint64_t step_ = 0;
  std::uint64_t counter_ = 0;
};

template <class T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& f) {
  return linear(relu(linear(x, f.w1, f.b1)), f.w2, f.b2);
}

template <class T>
Tensor<T> norm(const Tensor<T>& x, const NormWeights<T>& n) {
  return layer_norm(x, n.gain, n.bias);
}

// Multi-head attention including the output projection. queries has
// shape.batch*shape.q_len rows, keys_values shape.batch*shape.k_len.
template <class T>
AttentionOutput<T> multi_head_attention(const Tensor<T>& queries, const Tensor<T>& keys_values,
                                        std::span<const std::uint8_t> key_mask,
                                        const AttentionShape& shape, const AttentionWeights<T>& w) {
  const Tensor<T> q = linear(queries, w.wq, w.bq);
  const Tensor<T> k = linear(keys_values, w.wk, w.bk);
  const Tensor<T> v = linear(keys_values, w.wv, w.bv);
  AttentionOutput<T> a = attention(q, k, v, key_mask, shape);
  a.context = linear(a.context, w.wo, w.bo);
  return a;
}

// Sinusoidal position table [len, d].
template <class T>
std::vector<T> positional_encoding(std::size_t len, std::size_t d) {
  std::vector<T> pe(len * d);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = static_cast<T>(std::sin(angle));
      if (i + 1 < d) pe[pos * d + i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

}  // namespace mnmt
