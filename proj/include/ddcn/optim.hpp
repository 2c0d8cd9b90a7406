#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ddcn/errors.hpp"
#include "ddcn/network.hpp"
#include "ddcn/tensor.hpp"

namespace ddcn {

struct SgdConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;

  void check() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  }
};

// v <- momentum * v - lr * g;  p <- p + v
template <Real T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, const SgdConfig& cfg) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw ShapeError("sgd_step: parameter (" + std::to_string(params.size()) + "), gradient (" +
                     std::to_string(grads.size()) + ") and velocity (" +
                     std::to_string(velocity.size()) + ") sizes differ");
  const T mu = static_cast<T>(cfg.momentum);
  const T lr = static_cast<T>(cfg.learning_rate);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = mu * velocity[i] - lr * grads[i];
    params[i] += velocity[i];
  }
}

// Momentum state for every parameter of a network, zero-initialized.
template <Real T>
class Sgd {
 public:
  Sgd(Network<T>& net, SgdConfig cfg) : net_(&net), cfg_(cfg) {
    cfg_.check();
    for (const auto& p : net.parameters()) velocity_.emplace_back(p.value.size(), T(0));
  }

  void step() {
    auto params = net_->parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
      sgd_step<T>(params[i].value, params[i].grad, velocity_[i], cfg_);
  }

  std::vector<std::vector<T>>& velocities() { return velocity_; }
  const std::vector<std::vector<T>>& velocities() const { return velocity_; }
  const SgdConfig& config() const { return cfg_; }

 private:
  Network<T>* net_;
  SgdConfig cfg_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace ddcn
