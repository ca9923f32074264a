#pragma once

#include <map>
#include <string>
#include <vector>

#include "saccader/tape.hpp"
#include "saccader/tensor.hpp"

namespace saccader {

// Partition of trainable tensors: representation parameters (the patch
// encoder and its heads) vs location parameters (attention network, mixing
// convolution, cell query). Every trainable tensor belongs to exactly one
// group by construction. Non-trainable buffers (BN running stats) ride along
// so checkpoints capture full model state.
enum class ParamGroup { kRepr, kLoc };

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
  ParamGroup group = ParamGroup::kRepr;
};

template <typename T>
class ParameterSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value, bool trainable, ParamGroup group) {
    if (index_.count(name)) throw std::invalid_argument("ParameterSet: duplicate name " + name);
    index_[name] = entries_.size();
    entries_.push_back(ParamEntry<T>{name, std::move(value), trainable, group});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) { return entry(name).value; }
  const Tensor<T>& at(const std::string& name) const { return entry(name).value; }

  ParamEntry<T>& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParameterSet: unknown name " + name);
    return entries_[it->second];
  }
  const ParamEntry<T>& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParameterSet: unknown name " + name);
    return entries_[it->second];
  }

  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::vector<ParamEntry<T>>& entries() { return entries_; }

  std::vector<std::string> trainable_names(ParamGroup group) const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
      if (e.trainable && e.group == group) out.push_back(e.name);
    }
    return out;
  }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.value.numel();
    }
    return n;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable, e.group);
    return out;
  }

 private:
  std::vector<ParamEntry<T>> entries_;  // insertion order, deterministic
  std::map<std::string, size_t> index_;
};

// Parameters copied onto a tape as leaves for one forward/backward pass.
// grad_repr / grad_loc control which partition participates in the sweep
// (stage 2 freezes the representation side entirely).
template <typename T>
struct LeasedParams {
  std::map<std::string, typename Tape<T>::Var> vars;

  typename Tape<T>::Var at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::invalid_argument("LeasedParams: unknown name " + name);
    return it->second;
  }
};

template <typename T>
LeasedParams<T> lease_params(Tape<T>& tape, const ParameterSet<T>& ps, bool grad_repr,
                             bool grad_loc) {
  LeasedParams<T> lp;
  for (const auto& e : ps.entries()) {
    if (!e.trainable) continue;  // buffers are read through the ParameterSet directly
    const bool rg = e.group == ParamGroup::kRepr ? grad_repr : grad_loc;
    lp.vars[e.name] = tape.input(e.value, rg);
  }
  return lp;
}

}  // namespace saccader
