#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrec/autodiff/tape.hpp"
#include "mmrec/errors.hpp"

namespace mmrec {

// Owns the model's parameters in creation order. Addresses are stable, so
// raw Parameter pointers stay valid for the store's lifetime.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& uniform(const std::string& name, Shape shape, double bound) {
    Tensor t = Tensor::zeros(shape);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : t.data()) v = u(rng_);
    return add(name, std::move(t));
  }
  Parameter& constant(const std::string& name, Shape shape, double value) {
    return add(name, Tensor::filled(std::move(shape), value));
  }
  // uniform(+-1/sqrt(fan_in)) for a [fan_in x fan_out] weight.
  Parameter& weight(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    return uniform(name, {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("no parameter named '" + name + "'");
    return *params_[it->second];
  }
  const Parameter& get(const std::string& name) const { return const_cast<ParameterStore*>(this)->get(name); }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<Parameter*> trainable() {
    std::vector<Parameter*> out;
    for (auto& p : params_) {
      if (!p->frozen()) out.push_back(p.get());
    }
    return out;
  }
  std::size_t num_scalars(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      if (!trainable_only || !p->frozen()) n += p->size();
    }
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  Parameter& add(const std::string& name, Tensor t) {
    if (index_.contains(name)) throw ValidationError("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back(std::make_unique<Parameter>(name, std::move(t)));
    return *params_.back();
  }

  std::mt19937_64 rng_;
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mmrec
