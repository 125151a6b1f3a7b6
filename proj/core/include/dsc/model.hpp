#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsc/data.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

struct ModelConfig {
  std::size_t layers = 3;
  std::size_t d = 768;
  std::size_t heads = 12;
  std::size_t d_emb = 300;
  std::size_t d_app = 512;
  std::size_t d_mot = 768;
  std::size_t d_reg = 2048;
  std::size_t d_typ = 300;
  std::size_t vocab_size = 0;
  std::size_t num_boundary_types = 1;
  std::size_t max_caption_len = 32;
  std::size_t max_temporal_len = 64;
  double lambda1 = 0.5;  // local-stream weight, shared by loss and fusion
  double lambda2 = 0.5;  // global-stream weight

  void validate() const;
  std::size_t head_dim() const { return d / heads; }
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormParams {
  Tensor gain, offset;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;  // d -> 4d -> d
};

struct StreamLayerParams {
  AttentionParams self_attn;
  AttentionParams cross_attn;
  LayerNormParams norm_self, norm_cross, norm_ffn;
  FeedForwardParams ffn;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

/// Every learnable tensor of the dual-stream network. Construction with a
/// seed draws uniform +-1/sqrt(fan_in) matrices, sigma=0.02 normal embedding
/// and positional tables, zero biases, unit layer-norm gains.
class ModelParams {
 public:
  ModelParams(const ModelConfig& config, std::uint64_t seed);
  /// All-zeros skeleton used by the checkpoint loader.
  static ModelParams zeros_like(const ModelConfig& config);

  Tensor token_embedding;  // V x d_emb
  Tensor type_embedding;   // num_boundary_types x d_typ
  Tensor w_app, b_app;     // d_app -> d
  Tensor w_mot, b_mot;
  Tensor w_reg, b_reg;
  Tensor w_typ, b_typ;
  Tensor w_cap, b_cap;     // d_emb -> d
  Tensor pos_temporal;     // max_temporal_len x d, appearance/motion rows
  Tensor pos_caption;      // max_caption_len x d
  std::vector<StreamLayerParams> local_layers;
  std::vector<StreamLayerParams> global_layers;
  Tensor head_local_w, head_local_b;    // d -> V
  Tensor head_global_w, head_global_b;

  /// Deterministic enumeration; fixes optimizer, checkpoint, and grad-check
  /// ordering.
  std::vector<NamedParam> ordered() const;
  std::size_t parameter_count() const;
  const ModelConfig& config() const { return config_; }

 private:
  explicit ModelParams(const ModelConfig& config);
  ModelConfig config_;
};

struct ProjectedFeatures {
  Tensor appearance;  // T_a x d, temporal positions added
  Tensor motion;      // T_m x d, temporal positions added
  Tensor regions;     // K x d, no positional encoding
  Tensor boundary;    // 1 x d from the type embedding
  Tensor caption;     // L x d token embeddings + caption positions
};

/// Row-count bookkeeping for the two streams; caption rows are the trailing
/// block of each.
struct StreamLayout {
  std::size_t local_rows = 0;
  std::size_t global_rows = 0;
  std::size_t caption_len = 0;
  std::size_t local_caption_start = 0;
  std::size_t global_caption_start = 0;

  bool local_is_caption(std::size_t row) const { return row >= local_caption_start; }
  bool global_is_caption(std::size_t row) const { return row >= global_caption_start; }
};

struct Streams {
  Tensor local;   // [X_R; X_B; X_C]
  Tensor global;  // [X_A; X_M; X_B; X_C]
  StreamLayout layout;
};

/// Attention weight matrices recorded during a forward pass, with the masks
/// they were computed under.
struct AttentionRecord {
  std::size_t layer;
  bool local_stream;
  bool cross;
  std::size_t head;
  Tensor weights;
  AttentionMask mask;
};

struct ForwardTrace {
  std::vector<AttentionRecord> attention;
};

ProjectedFeatures project_features(Graph& g, const BoundarySample& sample,
                                   std::span<const int> prefix_ids,
                                   const ModelParams& params, const ModelConfig& config);

Streams build_streams(Graph& g, const ProjectedFeatures& feats);

/// Masks: causal among caption rows, feature rows never attend caption rows,
/// cross-attention keys exclude the other stream's caption rows.
AttentionMask self_attention_mask(const StreamLayout& layout, bool local_stream);
AttentionMask cross_attention_mask(const StreamLayout& layout, bool local_queries);

std::pair<Tensor, Tensor> encode_layer(Graph& g, const Tensor& x_local,
                                       const Tensor& x_global,
                                       const StreamLayerParams& local_params,
                                       const StreamLayerParams& global_params,
                                       const StreamLayout& layout, std::size_t heads,
                                       std::size_t layer_index = 0,
                                       ForwardTrace* trace = nullptr);

struct ForwardResult {
  Tensor p_local;   // L x V, rows sum to 1
  Tensor p_global;  // L x V
  Tensor p_fused;   // (lambda1 P_l + lambda2 P_g) / (lambda1 + lambda2)
  StreamLayout layout;
};

/// Full network: projections, stream assembly, `layers` encode layers, dual
/// softmax heads over the caption rows, and the fused distribution.
ForwardResult model_forward(Graph& g, const BoundarySample& sample,
                            std::span<const int> prefix_ids, const ModelParams& params,
                            const ModelConfig& config, ForwardTrace* trace = nullptr);

/// Nonempty, within max_caption_len, every id inside the vocabulary.
void validate_prefix_ids(std::span<const int> prefix_ids, const ModelConfig& config);
/// validate_prefix_ids plus the decoder convention [BOS, field-tag, ...].
void validate_prefix(std::span<const int> prefix_ids, const ModelConfig& config);

}  // namespace dsc
