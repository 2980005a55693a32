#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "stabletrain/common.hpp"
#include "stabletrain/nn.hpp"

namespace stabletrain {

// SGD with Nesterov momentum: v <- beta*v + g; w <- w - eta*(g + beta*v).
template <typename T>
struct OptimizerState {
  std::map<std::string, std::vector<T>> velocity;
  T learning_rate = T(0.01);
  T momentum = T(0.9);

  static OptimizerState make(const ModelParams<T>& params, T lr, T beta) {
    OptimizerState s;
    s.learning_rate = lr;
    s.momentum = beta;
    for (const auto& [name, t] : params.tensors)
      s.velocity.emplace(name, std::vector<T>(t.size(), T(0)));
    return s;
  }
};

template <typename T>
void sgd_nesterov_step(ModelParams<T>& params, OptimizerState<T>& state) {
  for (auto& [name, t] : params.tensors) {
    auto vit = state.velocity.find(name);
    if (vit == state.velocity.end() || vit->second.size() != t.size())
      throw ShapeError("sgd step: velocity for '" + name +
                       "' missing or mis-sized");
    std::vector<T>& v = vit->second;
    const std::vector<T>& g = t.grad();
    std::vector<T>& w = t.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("sgd step: non-finite gradient in '" + name +
                           "' at element " + std::to_string(i));
      v[i] = state.momentum * v[i] + g[i];
      w[i] -= state.learning_rate * (g[i] + state.momentum * v[i]);
    }
  }
}

}  // namespace stabletrain
