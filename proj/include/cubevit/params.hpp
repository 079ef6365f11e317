#pragma once

#include <map>
#include <string>
#include <vector>

#include "cubevit/autodiff.hpp"

namespace cubevit {

/// Named trainable tensors. Names iterate in lexicographic order, which is
/// also the checkpoint order.
class ParamStore {
 public:
  const ad::Var& add(const std::string& name, Tensor init);
  const ad::Var& get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_elements() const;
  std::vector<std::string> names() const;

  // Copies values from `other` for every shared name; shapes must match.
  void load_values(const ParamStore& other);
  // Deep copy of the current values into fresh leaves.
  ParamStore clone() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, ad::Var> params_;
};

// Initializers.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor normal_init(Shape shape, double stddev, Rng& rng);

}  // namespace cubevit
