#include "dsc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dsc/training.hpp"

namespace dsc {

double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

namespace {

Tensor random_features(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = unit(rng);
  return Tensor::matrix(rows, cols, std::move(v));
}

}  // namespace

GradCheckReport run_grad_check(const GradCheckConfig& config) {
  const ModelConfig& mc = config.model;
  mc.validate();
  std::mt19937_64 rng(mix_seed(config.seed, 0x96ad));

  BoundarySample sample;
  sample.boundary_id = "grad-check";
  sample.appearance = random_features(rng, config.t_app, mc.d_app);
  sample.motion = random_features(rng, config.t_mot, mc.d_mot);
  sample.regions = random_features(rng, config.k_regions, mc.d_reg);
  sample.boundary_type_id = 0;

  std::vector<int> prefix = {Vocabulary::kBos, Vocabulary::kSubjectTag};
  std::uniform_int_distribution<int> word(Vocabulary::kNumReserved,
                                          static_cast<int>(mc.vocab_size) - 1);
  while (prefix.size() < config.prefix_len) prefix.push_back(word(rng));
  std::vector<int> targets(prefix.size());
  for (auto& t : targets) t = word(rng);

  ModelParams params(mc, mix_seed(config.seed, 0xc0de));

  const auto loss_value = [&]() {
    Graph g;
    ForwardResult fwd = model_forward(g, sample, prefix, params, mc);
    return dual_stream_loss(g, fwd.p_local, fwd.p_global, targets, mc.lambda1, mc.lambda2)
        .value();
  };

  // Reverse-mode gradients once.
  GradientTable analytic;
  {
    Graph g;
    ForwardResult fwd = model_forward(g, sample, prefix, params, mc);
    Tensor loss =
        dual_stream_loss(g, fwd.p_local, fwd.p_global, targets, mc.lambda1, mc.lambda2);
    analytic = g.gradients(loss);
  }

  GradCheckReport report;
  for (auto& named : params.ordered()) {
    const std::vector<double> grad = analytic.of(named.tensor);
    auto values = named.tensor.values_mut();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + config.step;
      const double up = loss_value();
      values[i] = original - config.step;
      const double down = loss_value();
      values[i] = original;
      const double fd = (up - down) / (2.0 * config.step);
      worst = std::max(worst, relative_error(grad[i], fd, config.floor));
    }
    report.groups.push_back({named.name, worst});
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

}  // namespace dsc
