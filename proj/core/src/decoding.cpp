#include "dsc/decoding.hpp"

#include <algorithm>
#include <stdexcept>

namespace dsc {

std::vector<double> ModelScorer::next_token_probs(const BoundarySample& sample,
                                                  std::span<const int> prefix) const {
  Graph g;
  ForwardResult fwd = model_forward(g, sample, prefix, *params_, config_);
  const std::size_t last = fwd.p_fused.rows() - 1;
  const std::size_t v = fwd.p_fused.cols();
  std::vector<double> probs(v);
  for (std::size_t j = 0; j < v; ++j) probs[j] = fwd.p_fused.at(last, j);
  return probs;
}

std::size_t argmax_lowest_id(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("argmax over empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;  // strict: ties keep the lowest id
  }
  return best;
}

namespace {

bool is_structural(int id) {
  return id == Vocabulary::kPad || id == Vocabulary::kBos ||
         id == Vocabulary::kSubjectTag || id == Vocabulary::kBeforeTag ||
         id == Vocabulary::kAfterTag;
}

std::vector<int> strip_structural(const std::vector<int>& tokens) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (int id : tokens) {
    if (!is_structural(id)) out.push_back(id);
  }
  return out;
}

std::vector<int> decode_loop(const BoundarySample& sample, CaptionField field,
                             const std::vector<const CaptionScorer*>& models,
                             std::size_t max_len) {
  if (models.empty()) throw std::invalid_argument("decode: need at least one model");
  const std::size_t vocab = models.front()->vocab_size();
  for (const auto* m : models) {
    if (m->vocab_size() != vocab) {
      throw std::invalid_argument("decode: models disagree on vocabulary size: " +
                                  std::to_string(vocab) + " vs " +
                                  std::to_string(m->vocab_size()));
    }
  }

  std::size_t max_prefix = SIZE_MAX;
  for (const auto* m : models) max_prefix = std::min(max_prefix, m->max_prefix_len());

  std::vector<int> prefix = {Vocabulary::kBos, field_tag_id(field)};
  std::vector<int> generated;
  for (std::size_t step = 0; step < max_len && prefix.size() < max_prefix; ++step) {
    std::vector<double> summed(vocab, 0.0);
    for (const auto* m : models) {
      const std::vector<double> probs = m->next_token_probs(sample, prefix);
      if (probs.size() != vocab) {
        throw std::invalid_argument("decode: model returned a vector of size " +
                                    std::to_string(probs.size()) + ", expected " +
                                    std::to_string(vocab));
      }
      for (std::size_t j = 0; j < vocab; ++j) summed[j] += probs[j];
    }
    const int token = static_cast<int>(argmax_lowest_id(summed));
    if (token == Vocabulary::kEos) break;
    generated.push_back(token);
    prefix.push_back(token);
  }
  return strip_structural(generated);
}

}  // namespace

std::vector<int> greedy_decode(const BoundarySample& sample, CaptionField field,
                               const CaptionScorer& model, std::size_t max_len) {
  return decode_loop(sample, field, {&model}, max_len);
}

std::vector<int> ensemble_decode(const BoundarySample& sample, CaptionField field,
                                 const std::vector<const CaptionScorer*>& models,
                                 std::size_t max_len) {
  return decode_loop(sample, field, models, max_len);
}

}  // namespace dsc
