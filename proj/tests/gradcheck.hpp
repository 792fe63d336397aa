#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "upcycle/moe.hpp"
#include "upcycle/random.hpp"
#include "upcycle/training.hpp"

namespace upcycle::testing {

struct GradProbe {
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::size_t skipped = 0;  // routing changed inside the finite-difference step
  double worst_rel = 0.0;
  std::string worst_name;
};

// Relative error with a floor so that vanishing gradients compare on an
// absolute scale instead of dividing by zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline std::vector<std::vector<std::size_t>> routing_of(const MoECheckpoint<double>& moe, const TokenSequences& batch) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& seq : batch) {
    std::vector<RoutingRecord> trace;
    moe_forward(moe, seq, &trace);
    for (const auto& r : trace) out.push_back(r.indices);
  }
  return out;
}

// Central differences at `n_coords` random coordinates of the trainable set.
inline GradProbe probe_moe_gradients(const MoECheckpoint<double>& moe, const TokenSequences& batch, double lambda,
                                     TrainableSet trainable, std::size_t n_coords, std::uint64_t seed,
                                     double step = 1e-5, double tol = 1e-3) {
  const auto grads = moe_gradients(moe, batch, lambda, trainable);
  std::vector<std::string> names;
  for (const auto& [name, g] : grads) names.push_back(name);
  const auto base_routing = routing_of(moe, batch);

  GradProbe out;
  Rng rng(seed);
  MoECheckpoint<double> work = moe;
  auto find = [&](const std::string& name) -> TensorD* {
    TensorD* hit = nullptr;
    for_each_tensor(work, [&](const std::string& n, TensorD& t) {
      if (n == name) hit = &t;
    });
    return hit;
  };
  std::size_t attempts = 0;
  while (out.checked < n_coords && attempts < 20 * n_coords) {
    ++attempts;
    const std::string& name = names[rng.below(names.size())];
    TensorD* t = find(name);
    const std::size_t j = rng.below(t->size());
    const double orig = (*t)[j];
    (*t)[j] = orig + step;
    const double up = moe_loss_value(work, batch, lambda);
    const bool same_up = routing_of(work, batch) == base_routing;
    (*t)[j] = orig - step;
    const double down = moe_loss_value(work, batch, lambda);
    const bool same_down = routing_of(work, batch) == base_routing;
    (*t)[j] = orig;
    if (!same_up || !same_down) {
      ++out.skipped;
      continue;
    }
    const double fd = (up - down) / (2 * step);
    const double rel = relative_error(grads.at(name)[j], fd);
    ++out.checked;
    if (rel > tol) ++out.failed;
    if (rel > out.worst_rel) {
      out.worst_rel = rel;
      out.worst_name = name + "[" + std::to_string(j) + "]";
    }
  }
  return out;
}

}  // namespace upcycle::testing
