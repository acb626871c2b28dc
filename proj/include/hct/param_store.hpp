#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hct/autograd.hpp"

namespace hct::nn {

/// Named, insertion-ordered collection of trainable leaves. Each parameter
/// owns its gradient buffer (the leaf node's grad).
class ParamStore {
 public:
  using Entry = std::pair<std::string, ad::Var>;

  /// Registers a parameter; duplicate names are an ArgumentError.
  ad::Var add(const std::string& name, Tensor init);

  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  /// Total number of scalar parameters.
  std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace hct::nn
