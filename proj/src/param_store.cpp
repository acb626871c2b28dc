#include "hct/param_store.hpp"

#include "hct/errors.hpp"

namespace hct::nn {

ad::Var ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
  auto var = ad::Var::parameter(std::move(init));
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, var);
  return var;
}

const ad::Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, var] : entries_) n += var.value().size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, var] : entries_) var.zero_grad();
}

}  // namespace hct::nn
