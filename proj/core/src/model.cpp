#include "dsc/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace dsc {

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw std::invalid_argument("model config: d=" + std::to_string(d) +
                                " must be a positive multiple of heads=" +
                                std::to_string(heads));
  }
  if (layers == 0) throw std::invalid_argument("model config: layers must be >= 1");
  if (vocab_size < Vocabulary::kNumReserved) {
    throw std::invalid_argument("model config: vocab_size " + std::to_string(vocab_size) +
                                " smaller than the reserved token set");
  }
  if (num_boundary_types == 0) {
    throw std::invalid_argument("model config: num_boundary_types must be >= 1");
  }
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda1 + lambda2 <= 0.0) {
    throw std::invalid_argument("model config: stream weights must be nonnegative with "
                                "lambda1 + lambda2 > 0");
  }
  if (max_caption_len < 3) {
    throw std::invalid_argument("model config: max_caption_len must fit BOS, tag, and "
                                "at least one token");
  }
  if (d_emb == 0 || d_app == 0 || d_mot == 0 || d_reg == 0 || d_typ == 0) {
    throw std::invalid_argument("model config: input widths must be positive");
  }
}

namespace {

class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : rng_(seed) {}

  Tensor linear(std::size_t in, std::size_t out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(in * out);
    for (double& x : v) x = u(rng_);
    return Tensor::matrix(in, out, std::move(v), true);
  }

  Tensor embedding(std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> n(0.0, 0.02);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = n(rng_);
    return Tensor::matrix(rows, cols, std::move(v), true);
  }

  Tensor bias(std::size_t cols) { return Tensor::zeros({1, cols}, true); }
  Tensor ones_row(std::size_t cols) { return Tensor::full({1, cols}, 1.0, true); }

 private:
  std::mt19937_64 rng_;
};

StreamLayerParams init_stream_layer(ParamInit& init, std::size_t d) {
  StreamLayerParams p;
  for (AttentionParams* attn : {&p.self_attn, &p.cross_attn}) {
    attn->wq = init.linear(d, d);
    attn->bq = init.bias(d);
    attn->wk = init.linear(d, d);
    attn->bk = init.bias(d);
    attn->wv = init.linear(d, d);
    attn->bv = init.bias(d);
    attn->wo = init.linear(d, d);
    attn->bo = init.bias(d);
  }
  for (LayerNormParams* norm : {&p.norm_self, &p.norm_cross, &p.norm_ffn}) {
    norm->gain = init.ones_row(d);
    norm->offset = init.bias(d);
  }
  p.ffn.w1 = init.linear(d, 4 * d);
  p.ffn.b1 = init.bias(4 * d);
  p.ffn.w2 = init.linear(4 * d, d);
  p.ffn.b2 = init.bias(d);
  return p;
}

StreamLayerParams zero_stream_layer(std::size_t d) {
  StreamLayerParams p;
  for (AttentionParams* attn : {&p.self_attn, &p.cross_attn}) {
    attn->wq = Tensor::zeros({d, d}, true);
    attn->bq = Tensor::zeros({1, d}, true);
    attn->wk = Tensor::zeros({d, d}, true);
    attn->bk = Tensor::zeros({1, d}, true);
    attn->wv = Tensor::zeros({d, d}, true);
    attn->bv = Tensor::zeros({1, d}, true);
    attn->wo = Tensor::zeros({d, d}, true);
    attn->bo = Tensor::zeros({1, d}, true);
  }
  for (LayerNormParams* norm : {&p.norm_self, &p.norm_cross, &p.norm_ffn}) {
    norm->gain = Tensor::zeros({1, d}, true);
    norm->offset = Tensor::zeros({1, d}, true);
  }
  p.ffn.w1 = Tensor::zeros({d, 4 * d}, true);
  p.ffn.b1 = Tensor::zeros({1, 4 * d}, true);
  p.ffn.w2 = Tensor::zeros({4 * d, d}, true);
  p.ffn.b2 = Tensor::zeros({1, d}, true);
  return p;
}

}  // namespace

ModelParams::ModelParams(const ModelConfig& config) : config_(config) {}

ModelParams::ModelParams(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config.validate();
  ParamInit init(seed);
  token_embedding = init.embedding(config.vocab_size, config.d_emb);
  type_embedding = init.embedding(config.num_boundary_types, config.d_typ);
  w_app = init.linear(config.d_app, config.d);
  b_app = init.bias(config.d);
  w_mot = init.linear(config.d_mot, config.d);
  b_mot = init.bias(config.d);
  w_reg = init.linear(config.d_reg, config.d);
  b_reg = init.bias(config.d);
  w_typ = init.linear(config.d_typ, config.d);
  b_typ = init.bias(config.d);
  w_cap = init.linear(config.d_emb, config.d);
  b_cap = init.bias(config.d);
  pos_temporal = init.embedding(config.max_temporal_len, config.d);
  pos_caption = init.embedding(config.max_caption_len, config.d);
  for (std::size_t i = 0; i < config.layers; ++i) {
    local_layers.push_back(init_stream_layer(init, config.d));
    global_layers.push_back(init_stream_layer(init, config.d));
  }
  head_local_w = init.linear(config.d, config.vocab_size);
  head_local_b = init.bias(config.vocab_size);
  head_global_w = init.linear(config.d, config.vocab_size);
  head_global_b = init.bias(config.vocab_size);
}

ModelParams ModelParams::zeros_like(const ModelConfig& config) {
  config.validate();
  ModelParams p(config);
  p.token_embedding = Tensor::zeros({config.vocab_size, config.d_emb}, true);
  p.type_embedding = Tensor::zeros({config.num_boundary_types, config.d_typ}, true);
  p.w_app = Tensor::zeros({config.d_app, config.d}, true);
  p.b_app = Tensor::zeros({1, config.d}, true);
  p.w_mot = Tensor::zeros({config.d_mot, config.d}, true);
  p.b_mot = Tensor::zeros({1, config.d}, true);
  p.w_reg = Tensor::zeros({config.d_reg, config.d}, true);
  p.b_reg = Tensor::zeros({1, config.d}, true);
  p.w_typ = Tensor::zeros({config.d_typ, config.d}, true);
  p.b_typ = Tensor::zeros({1, config.d}, true);
  p.w_cap = Tensor::zeros({config.d_emb, config.d}, true);
  p.b_cap = Tensor::zeros({1, config.d}, true);
  p.pos_temporal = Tensor::zeros({config.max_temporal_len, config.d}, true);
  p.pos_caption = Tensor::zeros({config.max_caption_len, config.d}, true);
  for (std::size_t i = 0; i < config.layers; ++i) {
    p.local_layers.push_back(zero_stream_layer(config.d));
    p.global_layers.push_back(zero_stream_layer(config.d));
  }
  p.head_local_w = Tensor::zeros({config.d, config.vocab_size}, true);
  p.head_local_b = Tensor::zeros({1, config.vocab_size}, true);
  p.head_global_w = Tensor::zeros({config.d, config.vocab_size}, true);
  p.head_global_b = Tensor::zeros({1, config.vocab_size}, true);
  return p;
}

namespace {

void append_stream_layer(std::vector<NamedParam>& out, const std::string& prefix,
                         const StreamLayerParams& p) {
  const std::pair<const char*, const AttentionParams*> attns[] = {
      {"self_attn", &p.self_attn}, {"cross_attn", &p.cross_attn}};
  for (const auto& [kind, attn] : attns) {
    const std::string base = prefix + "." + kind + ".";
    out.push_back({base + "wq", attn->wq});
    out.push_back({base + "bq", attn->bq});
    out.push_back({base + "wk", attn->wk});
    out.push_back({base + "bk", attn->bk});
    out.push_back({base + "wv", attn->wv});
    out.push_back({base + "bv", attn->bv});
    out.push_back({base + "wo", attn->wo});
    out.push_back({base + "bo", attn->bo});
  }
  const std::pair<const char*, const LayerNormParams*> norms[] = {
      {"norm_self", &p.norm_self}, {"norm_cross", &p.norm_cross}, {"norm_ffn", &p.norm_ffn}};
  for (const auto& [kind, norm] : norms) {
    out.push_back({prefix + "." + kind + ".gain", norm->gain});
    out.push_back({prefix + "." + kind + ".offset", norm->offset});
  }
  out.push_back({prefix + ".ffn.w1", p.ffn.w1});
  out.push_back({prefix + ".ffn.b1", p.ffn.b1});
  out.push_back({prefix + ".ffn.w2", p.ffn.w2});
  out.push_back({prefix + ".ffn.b2", p.ffn.b2});
}

}  // namespace

std::vector<NamedParam> ModelParams::ordered() const {
  std::vector<NamedParam> out;
  out.push_back({"token_embedding", token_embedding});
  out.push_back({"type_embedding", type_embedding});
  out.push_back({"input.appearance.w", w_app});
  out.push_back({"input.appearance.b", b_app});
  out.push_back({"input.motion.w", w_mot});
  out.push_back({"input.motion.b", b_mot});
  out.push_back({"input.regions.w", w_reg});
  out.push_back({"input.regions.b", b_reg});
  out.push_back({"input.type.w", w_typ});
  out.push_back({"input.type.b", b_typ});
  out.push_back({"input.caption.w", w_cap});
  out.push_back({"input.caption.b", b_cap});
  out.push_back({"pos_temporal", pos_temporal});
  out.push_back({"pos_caption", pos_caption});
  for (std::size_t i = 0; i < local_layers.size(); ++i) {
    append_stream_layer(out, "layers." + std::to_string(i) + ".local", local_layers[i]);
    append_stream_layer(out, "layers." + std::to_string(i) + ".global", global_layers[i]);
  }
  out.push_back({"head.local.w", head_local_w});
  out.push_back({"head.local.b", head_local_b});
  out.push_back({"head.global.w", head_global_w});
  out.push_back({"head.global.b", head_global_b});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : ordered()) n += p.tensor.numel();
  return n;
}

void validate_prefix_ids(std::span<const int> prefix_ids, const ModelConfig& config) {
  if (prefix_ids.empty()) {
    throw std::invalid_argument("prefix must contain at least one token");
  }
  if (prefix_ids.size() > config.max_caption_len) {
    throw std::invalid_argument("prefix length " + std::to_string(prefix_ids.size()) +
                                " exceeds max_caption_len " +
                                std::to_string(config.max_caption_len));
  }
  for (int id : prefix_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
      throw std::invalid_argument("prefix token " + std::to_string(id) +
                                  " outside vocabulary of size " +
                                  std::to_string(config.vocab_size));
    }
  }
}

void validate_prefix(std::span<const int> prefix_ids, const ModelConfig& config) {
  validate_prefix_ids(prefix_ids, config);
  if (prefix_ids.size() < 2) {
    throw std::invalid_argument("prefix must start with BOS and a field tag");
  }
  if (prefix_ids[0] != Vocabulary::kBos) {
    throw std::invalid_argument("prefix must begin with BOS");
  }
  if (prefix_ids[1] != Vocabulary::kSubjectTag && prefix_ids[1] != Vocabulary::kBeforeTag &&
      prefix_ids[1] != Vocabulary::kAfterTag) {
    throw std::invalid_argument("prefix position 1 must be a field tag");
  }
}

namespace {

Tensor linear_rows(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b) {
  return g.add_rowwise(g.matmul(x, w), b);
}

std::vector<std::size_t> iota_ids(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = start + i;
  return ids;
}

}  // namespace

ProjectedFeatures project_features(Graph& g, const BoundarySample& sample,
                                   std::span<const int> prefix_ids,
                                   const ModelParams& params, const ModelConfig& config) {
  validate_prefix_ids(prefix_ids, config);
  const auto check_width = [&](const Tensor& t, std::size_t want, const char* what) {
    if (t.cols() != want) {
      throw std::invalid_argument(std::string(what) + " width " + std::to_string(t.cols()) +
                                  " does not match config width " + std::to_string(want));
    }
  };
  check_width(sample.appearance, config.d_app, "appearance feature");
  check_width(sample.motion, config.d_mot, "motion feature");
  check_width(sample.regions, config.d_reg, "region feature");
  if (sample.appearance.rows() > config.max_temporal_len ||
      sample.motion.rows() > config.max_temporal_len) {
    throw std::invalid_argument("temporal feature length exceeds max_temporal_len " +
                                std::to_string(config.max_temporal_len));
  }
  if (sample.boundary_type_id < 0 ||
      static_cast<std::size_t>(sample.boundary_type_id) >= config.num_boundary_types) {
    throw std::invalid_argument("boundary type id " + std::to_string(sample.boundary_type_id) +
                                " outside the type lexicon");
  }

  ProjectedFeatures f;
  f.appearance = g.add(linear_rows(g, sample.appearance, params.w_app, params.b_app),
                       g.gather_rows(params.pos_temporal, iota_ids(sample.appearance.rows())));
  f.motion = g.add(linear_rows(g, sample.motion, params.w_mot, params.b_mot),
                   g.gather_rows(params.pos_temporal, iota_ids(sample.motion.rows())));
  f.regions = linear_rows(g, sample.regions, params.w_reg, params.b_reg);

  Tensor type_row = g.gather_rows(params.type_embedding,
                                  {static_cast<std::size_t>(sample.boundary_type_id)});
  f.boundary = linear_rows(g, type_row, params.w_typ, params.b_typ);

  std::vector<std::size_t> token_rows(prefix_ids.size());
  for (std::size_t i = 0; i < prefix_ids.size(); ++i) {
    token_rows[i] = static_cast<std::size_t>(prefix_ids[i]);
  }
  Tensor embedded = g.gather_rows(params.token_embedding, std::move(token_rows));
  f.caption = g.add(linear_rows(g, embedded, params.w_cap, params.b_cap),
                    g.gather_rows(params.pos_caption, iota_ids(prefix_ids.size())));
  return f;
}

Streams build_streams(Graph& g, const ProjectedFeatures& feats) {
  Streams s;
  s.local = g.concat_rows({feats.regions, feats.boundary, feats.caption});
  s.global = g.concat_rows({feats.appearance, feats.motion, feats.boundary, feats.caption});
  s.layout.caption_len = feats.caption.rows();
  s.layout.local_rows = s.local.rows();
  s.layout.global_rows = s.global.rows();
  s.layout.local_caption_start = feats.regions.rows() + 1;
  s.layout.global_caption_start = feats.appearance.rows() + feats.motion.rows() + 1;
  return s;
}

AttentionMask self_attention_mask(const StreamLayout& layout, bool local_stream) {
  const std::size_t n = local_stream ? layout.local_rows : layout.global_rows;
  const std::size_t cap0 = local_stream ? layout.local_caption_start
                                        : layout.global_caption_start;
  AttentionMask mask(n, n, true);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = cap0; j < n; ++j) {
      const bool allowed = i >= cap0 && j <= i;  // causal among captions only
      mask.set(i, j, allowed);
    }
  }
  return mask;
}

AttentionMask cross_attention_mask(const StreamLayout& layout, bool local_queries) {
  const std::size_t q = local_queries ? layout.local_rows : layout.global_rows;
  const std::size_t k = local_queries ? layout.global_rows : layout.local_rows;
  const std::size_t key_cap0 = local_queries ? layout.global_caption_start
                                             : layout.local_caption_start;
  AttentionMask mask(q, k, true);
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = key_cap0; j < k; ++j) mask.set(i, j, false);
  }
  return mask;
}

namespace {

Tensor multi_head_attention(Graph& g, const Tensor& query_src, const Tensor& key_src,
                            const AttentionParams& p, const AttentionMask& mask,
                            std::size_t heads, std::size_t layer_index, bool local_stream,
                            bool cross, ForwardTrace* trace) {
  Tensor q = linear_rows(g, query_src, p.wq, p.bq);
  Tensor k = linear_rows(g, key_src, p.wk, p.bk);
  Tensor v = linear_rows(g, key_src, p.wv, p.bv);
  const std::size_t dh = q.cols() / heads;
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = g.slice_cols(q, h * dh, dh);
    Tensor kh = g.slice_cols(k, h * dh, dh);
    Tensor vh = g.slice_cols(v, h * dh, dh);
    Tensor weights;
    Tensor out = g.scaled_dot_attention(qh, kh, vh, &mask, trace ? &weights : nullptr);
    if (trace) {
      trace->attention.push_back({layer_index, local_stream, cross, h, weights, mask});
    }
    head_outputs.push_back(out);
  }
  Tensor merged = heads == 1 ? head_outputs.front() : g.concat_cols(head_outputs);
  return linear_rows(g, merged, p.wo, p.bo);
}

Tensor sublayer_norm(Graph& g, const Tensor& x, const Tensor& delta,
                     const LayerNormParams& norm) {
  return g.layer_norm(g.add(x, delta), norm.gain, norm.offset);
}

Tensor feed_forward(Graph& g, const Tensor& x, const FeedForwardParams& p) {
  return linear_rows(g, g.gelu(linear_rows(g, x, p.w1, p.b1)), p.w2, p.b2);
}

}  // namespace

std::pair<Tensor, Tensor> encode_layer(Graph& g, const Tensor& x_local,
                                       const Tensor& x_global,
                                       const StreamLayerParams& local_params,
                                       const StreamLayerParams& global_params,
                                       const StreamLayout& layout, std::size_t heads,
                                       std::size_t layer_index, ForwardTrace* trace) {
  if (x_local.rows() != layout.local_rows || x_global.rows() != layout.global_rows) {
    throw std::invalid_argument("encode_layer: stream shapes disagree with layout");
  }
  const AttentionMask self_l = self_attention_mask(layout, true);
  const AttentionMask self_g = self_attention_mask(layout, false);

  Tensor self_out_l = multi_head_attention(g, x_local, x_local, local_params.self_attn,
                                           self_l, heads, layer_index, true, false, trace);
  Tensor x_l1 = sublayer_norm(g, x_local, self_out_l, local_params.norm_self);
  Tensor self_out_g = multi_head_attention(g, x_global, x_global, global_params.self_attn,
                                           self_g, heads, layer_index, false, false, trace);
  Tensor x_g1 = sublayer_norm(g, x_global, self_out_g, global_params.norm_self);

  // Local queries attend global keys/values and vice versa; the other
  // stream's caption rows are never visible as keys.
  const AttentionMask cross_l = cross_attention_mask(layout, true);
  const AttentionMask cross_g = cross_attention_mask(layout, false);
  Tensor cross_out_l = multi_head_attention(g, x_l1, x_g1, local_params.cross_attn,
                                            cross_l, heads, layer_index, true, true, trace);
  Tensor x_l2 = sublayer_norm(g, x_l1, cross_out_l, local_params.norm_cross);
  Tensor cross_out_g = multi_head_attention(g, x_g1, x_l1, global_params.cross_attn,
                                            cross_g, heads, layer_index, false, true, trace);
  Tensor x_g2 = sublayer_norm(g, x_g1, cross_out_g, global_params.norm_cross);

  Tensor x_l3 = sublayer_norm(g, x_l2, feed_forward(g, x_l2, local_params.ffn),
                              local_params.norm_ffn);
  Tensor x_g3 = sublayer_norm(g, x_g2, feed_forward(g, x_g2, global_params.ffn),
                              global_params.norm_ffn);
  return {x_l3, x_g3};
}

ForwardResult model_forward(Graph& g, const BoundarySample& sample,
                            std::span<const int> prefix_ids, const ModelParams& params,
                            const ModelConfig& config, ForwardTrace* trace) {
  config.validate();
  validate_prefix(prefix_ids, config);
  ProjectedFeatures feats = project_features(g, sample, prefix_ids, params, config);
  Streams streams = build_streams(g, feats);

  Tensor x_l = streams.local;
  Tensor x_g = streams.global;
  for (std::size_t layer = 0; layer < config.layers; ++layer) {
    auto [next_l, next_g] = encode_layer(g, x_l, x_g, params.local_layers[layer],
                                         params.global_layers[layer], streams.layout,
                                         config.heads, layer, trace);
    x_l = next_l;
    x_g = next_g;
  }

  const std::size_t caption_len = streams.layout.caption_len;
  Tensor cap_l = g.gather_rows(x_l, iota_ids(caption_len, streams.layout.local_caption_start));
  Tensor cap_g = g.gather_rows(x_g, iota_ids(caption_len, streams.layout.global_caption_start));

  ForwardResult result;
  result.layout = streams.layout;
  result.p_local =
      g.softmax_rows(linear_rows(g, cap_l, params.head_local_w, params.head_local_b));
  result.p_global =
      g.softmax_rows(linear_rows(g, cap_g, params.head_global_w, params.head_global_b));
  const double lam_sum = config.lambda1 + config.lambda2;
  result.p_fused = g.scale(g.add(g.scale(result.p_local, config.lambda1),
                                 g.scale(result.p_global, config.lambda2)),
                           1.0 / lam_sum);
  return result;
}

}  // namespace dsc
