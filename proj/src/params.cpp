#include "cubevit/params.hpp"

#include <cmath>

#include "cubevit/errors.hpp"

namespace cubevit {

const ad::Var& ParamStore::add(const std::string& name, Tensor init) {
  auto [it, inserted] = params_.emplace(name, ad::Var::parameter(std::move(init)));
  if (!inserted) throw UsageError("duplicate parameter name '" + name + "'");
  return it->second;
}

const ad::Var& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, v] : params_) {
    ad::Var copy = v;
    copy.zero_grad();
  }
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += v.value().numel();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

void ParamStore::load_values(const ParamStore& other) {
  for (const auto& [name, v] : other.params_) {
    auto it = params_.find(name);
    if (it == params_.end()) continue;
    if (it->second.shape() != v.shape()) {
      throw ShapeError("parameter '" + name + "' expects shape " + shape_str(it->second.shape()) +
                       ", got " + shape_str(v.shape()));
    }
    ad::Var dst = it->second;
    dst.set_value(v.value());
  }
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, v] : params_) out.add(name, v.value());
  return out;
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::uniform({fan_in, fan_out}, rng, -limit, limit);
}

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, stddev);
}

}  // namespace cubevit
