#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsc/data.hpp"
#include "dsc/model.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t max_epochs = 10;
  std::size_t batch_size = 100;
  std::size_t max_steps = 0;  // 0 = bounded by max_epochs only
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  std::uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t threads = 1;
  /// Optional: token-embedding rows loaded over the seeded init before
  /// training starts (the table stays learnable).
  std::filesystem::path pretrained_embeddings;

  void validate() const;
};

/// -(1/L) * sum_t [ lambda1 log P_l(t, y_t) + lambda2 log P_g(t, y_t) ].
/// Probabilities are clamped below at 1e-12 inside the log.
Tensor dual_stream_loss(Graph& g, const Tensor& p_local, const Tensor& p_global,
                        std::span<const int> targets, double lambda1, double lambda2);

/// First/second moment buffers per parameter, in ModelParams::ordered() order.
struct OptimizerState {
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::vector<Moments> moments;
  std::size_t step = 0;

  static OptimizerState for_params(const ModelParams& params);
};

/// Gradient buffers aligned with ModelParams::ordered().
using GradVector = std::vector<std::vector<double>>;

/// One bias-corrected Adam update over a single buffer; `step` is 1-based.
void adam_update(std::span<double> values, std::span<const double> grad,
                 std::span<double> m, std::span<double> v, std::size_t step,
                 const TrainConfig& config);

/// Standard bias-corrected Adam update, applied in parameter order.
void adam_step(ModelParams& params, const GradVector& grads, OptimizerState& state,
               const TrainConfig& config);

/// Decoder input for one (boundary, field) example: [BOS, tag, tokens...],
/// with targets [tokens..., EOS] aligned to prefix rows 1..L-1. The BOS row,
/// whose successor is the externally supplied field tag, carries no loss.
struct TrainingExample {
  std::size_t sample_index;
  CaptionField field;
  std::vector<int> prefix;
  std::vector<int> targets;
};

TrainingExample make_training_example(const Dataset& dataset, std::size_t sample_index,
                                      CaptionField field, const ModelConfig& config);

struct StepRecord {
  std::size_t epoch;
  std::size_t step;  // global batch counter, 1-based
  double loss;
};

struct TrainResult {
  ModelParams params;
  std::vector<StepRecord> log;
  std::vector<double> epoch_mean_loss;
  std::size_t steps = 0;
};

/// Teacher-forced training: seeded init, seeded per-epoch shuffle over
/// (boundary, field) examples, per-batch gradient averaging in fixed example
/// order (bitwise identical for any thread count), Adam updates.
TrainResult train(const Dataset& dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config);

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& log);

}  // namespace dsc
