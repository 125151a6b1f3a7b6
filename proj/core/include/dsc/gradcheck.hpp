#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsc/model.hpp"

namespace dsc {

/// |a-b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// gradient sits below the central-difference noise floor from dominating.
double relative_error(double a, double b, double floor);

struct GradCheckConfig {
  ModelConfig model;      // the network under test
  std::uint64_t seed = 1;
  std::size_t t_app = 3;  // synthetic feature extents
  std::size_t t_mot = 2;
  std::size_t k_regions = 4;
  std::size_t prefix_len = 4;  // includes BOS and tag
  double step = 1e-6;          // central-difference h
  double floor = 2e-5;         // denominator floor over the fd noise level
};

struct GroupReport {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GroupReport> groups;
  double max_rel_error = 0.0;
};

/// Compare reverse-mode gradients of the dual-stream loss against central
/// finite differences for every parameter coordinate, grouped by parameter
/// name. The finite-difference side only ever runs forward passes.
GradCheckReport run_grad_check(const GradCheckConfig& config);

}  // namespace dsc
