// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "toolshed/error.hpp"

namespace toolshed::grpo {

inline constexpr double kDefaultSigmaFloor = 1e-6;
inline constexpr double kDefaultKlCoefficient = 1e-4;

/// One prompt's N rollouts. Probability ratios and KL terms come from the
/// trainer; this module only combines them.
struct RolloutGroup {
  std::vector<double> rewards;
  std::vector<double> ratios;
  std::vector<double> kl_terms;

  std::size_t size() const { return rewards.size(); }
};

struct LossParams {
  double epsilon = 0.2;
  double beta = kDefaultKlCoefficient;
};

inline double clip(double rho, double epsilon) { return std::min(std::max(rho, 1.0 - epsilon), 1.0 + epsilon); }

/// Standardizes rewards within a group: (r - mean) / max(std, floor), with the
/// population standard deviation.
inline std::vector<double> group_advantages(std::span<const double> rewards, double sigma_floor = kDefaultSigmaFloor) {
  if (rewards.size() < 2) throw BadArgs("group_advantages needs at least two rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  const double sd = std::sqrt(var);
  std::vector<double> adv(rewards.size());
  if (sd < sigma_floor) {
    // Identical rewards carry no relative signal.
    std::fill(adv.begin(), adv.end(), 0.0);
    return adv;
  }
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

/// Per-rollout term -min(rho*A, clip(rho)*A) + beta*kl.
inline double grpo_term(double rho, double advantage, double kl, const LossParams& p) {
  return -std::min(rho * advantage, clip(rho, p.epsilon) * advantage) + p.beta * kl;
}

/// Clipped, KL-regularized objective averaged over the group.
inline double grpo_loss(const RolloutGroup& g, const LossParams& p, double sigma_floor = kDefaultSigmaFloor) {
  if (!(p.epsilon > 0.0 && p.epsilon < 1.0)) throw BadArgs("epsilon must lie in (0,1)");
  if (!(p.beta >= 0.0)) throw BadArgs("beta must be non-negative");
  const std::size_t n = g.size();
  if (g.ratios.size() != n || g.kl_terms.size() != n) throw BadArgs("group arrays must have equal length");
  for (double r : g.ratios)
    if (!(r > 0.0)) throw BadArgs("probability ratios must be positive");
  for (double k : g.kl_terms)
    if (!(k >= 0.0)) throw BadArgs("KL terms must be non-negative");
  const auto adv = group_advantages(g.rewards, sigma_floor);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += grpo_term(g.ratios[i], adv[i], g.kl_terms[i], p);
  return sum / static_cast<double>(n);
}

}  // namespace toolshed::grpo
