#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mnmt/rng.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt {

// Named learnable arrays in registration order.
template <class T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(Tensor<T>::parameter(std::move(shape), std::move(values)));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return tensors_[it->second];
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).get(name));
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

// FNV-1a, used to give each parameter its own init stream.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

enum class Init { xavier, normal_embedding, zeros, ones };

// Values depend only on (seed, name, shape), never on registration order.
template <class T>
std::vector<T> init_values(Init kind, const Shape& shape, std::uint64_t seed,
                           const std::string& name) {
  const std::size_t n = shape_size(shape);
  std::vector<T> v(n);
  Rng rng(seed ^ fnv1a(name));
  switch (kind) {
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(v.begin(), v.end(), T(1));
      break;
    case Init::xavier: {
      const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      break;
    }
    case Init::normal_embedding: {
      const double sd = 1.0 / std::sqrt(static_cast<double>(shape[1]));
      for (auto& x : v) x = static_cast<T>(rng.normal() * sd);
      break;
    }
  }
  return v;
}

}  // namespace mnmt
