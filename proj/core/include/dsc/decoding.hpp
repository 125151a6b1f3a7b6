#pragma once

#include <memory>
#include <vector>

#include "dsc/data.hpp"
#include "dsc/model.hpp"

namespace dsc {

/// Next-token distribution source for the decoding loops. The production
/// implementation wraps (ModelParams, ModelConfig); tests substitute scripted
/// tables.
class CaptionScorer {
 public:
  virtual ~CaptionScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  /// Longest prefix the scorer accepts; decoding stops when it is reached.
  virtual std::size_t max_prefix_len() const { return SIZE_MAX; }
  /// Fused probability vector over the vocabulary for the next token after
  /// `prefix` ([BOS, tag, tokens...]).
  virtual std::vector<double> next_token_probs(const BoundarySample& sample,
                                               std::span<const int> prefix) const = 0;
};

class ModelScorer final : public CaptionScorer {
 public:
  ModelScorer(const ModelParams& params, const ModelConfig& config)
      : params_(&params), config_(config) {
    config_.validate();
  }
  std::size_t vocab_size() const override { return config_.vocab_size; }
  std::size_t max_prefix_len() const override { return config_.max_caption_len; }
  std::vector<double> next_token_probs(const BoundarySample& sample,
                                       std::span<const int> prefix) const override;
  const ModelConfig& config() const { return config_; }

 private:
  const ModelParams* params_;
  ModelConfig config_;
};

/// Lowest-id argmax over a probability vector.
std::size_t argmax_lowest_id(std::span<const double> probs);

/// Greedy autoregressive decoding from [BOS, field-tag]. Stops at EOS or
/// after max_len generated tokens; the returned caption contains no
/// structural tokens (PAD / BOS / field tags are dropped, EOS terminates).
std::vector<int> greedy_decode(const BoundarySample& sample, CaptionField field,
                               const CaptionScorer& model, std::size_t max_len);

/// Word-level ensemble: at each step the models' fused probability vectors
/// for the shared prefix are summed, the argmax becomes the next token, and
/// that token feeds back into every model.
std::vector<int> ensemble_decode(const BoundarySample& sample, CaptionField field,
                                 const std::vector<const CaptionScorer*>& models,
                                 std::size_t max_len);

}  // namespace dsc
