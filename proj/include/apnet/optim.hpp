#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "apnet/tensor.hpp"

namespace apnet {

// AdamW with decoupled weight decay, per-group learning-rate multipliers
// (the point branch trains at 5x the base rate) and a multiplicative
// per-epoch decay applied by epoch_end().
template <class S>
class AdamW {
 public:
  struct Group {
    std::vector<Value<S>> params;
    double lr_multiplier = 1.0;
  };

  struct Config {
    double lr = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double epoch_decay = 0.95;
  };

  AdamW(std::vector<Group> groups, Config cfg) : groups_(std::move(groups)), cfg_(cfg) {
    for (auto& g : groups_) {
      for (auto& p : g.params) {
        APNET_REQUIRE(p.defined() && p.is_leaf(), "AdamW: parameters must be leaf values");
        m_.emplace_back(p.numel(), S(0));
        v_.emplace_back(p.numel(), S(0));
      }
    }
  }

  void step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_count_));
    std::size_t slot = 0;
    for (auto& g : groups_) {
      const double lr = cfg_.lr * g.lr_multiplier;
      for (auto& p : g.params) {
        APNET_REQUIRE(p.grad().size() == p.numel(),
                      "AdamW: parameter has no gradient (backward not run?)");
        auto& m = m_[slot];
        auto& v = v_[slot];
        ++slot;
        auto& data = p.data();
        const auto& grad = p.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
          const double gi = double(grad[i]);
          m[i] = S(cfg_.beta1 * double(m[i]) + (1.0 - cfg_.beta1) * gi);
          v[i] = S(cfg_.beta2 * double(v[i]) + (1.0 - cfg_.beta2) * gi * gi);
          const double mhat = double(m[i]) / bc1;
          const double vhat = double(v[i]) / bc2;
          data[i] = S(double(data[i]) -
                      lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                            cfg_.weight_decay * double(data[i])));
        }
      }
    }
  }

  void epoch_end() { cfg_.lr *= cfg_.epoch_decay; }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p.zero_grad();
  }

  double learning_rate() const { return cfg_.lr; }
  double group_learning_rate(std::size_t i) const {
    return cfg_.lr * groups_.at(i).lr_multiplier;
  }
  long step_count() const { return step_count_; }

 private:
  std::vector<Group> groups_;
  Config cfg_;
  std::vector<std::vector<S>> m_, v_;
  long step_count_ = 0;
};

}  // namespace apnet
