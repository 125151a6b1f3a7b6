#include "dsc/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>

namespace dsc {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw std::invalid_argument("train config: learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda1 + lambda2 <= 0.0) {
    throw std::invalid_argument("train config: stream weights must be nonnegative with "
                                "lambda1 + lambda2 > 0");
  }
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
    throw std::invalid_argument("train config: Adam betas must lie in [0, 1)");
  }
  if (threads < 1) throw std::invalid_argument("train config: threads must be >= 1");
}

Tensor dual_stream_loss(Graph& g, const Tensor& p_local, const Tensor& p_global,
                        std::span<const int> targets, double lambda1, double lambda2) {
  if (p_local.shape() != p_global.shape()) {
    throw std::invalid_argument("dual_stream_loss: stream shapes disagree: " +
                                shape_to_string(p_local.shape()) + " vs " +
                                shape_to_string(p_global.shape()));
  }
  if (targets.size() != p_local.rows()) {
    throw std::invalid_argument("dual_stream_loss: " + std::to_string(p_local.rows()) +
                                " probability rows but " + std::to_string(targets.size()) +
                                " targets");
  }
  return g.add(g.scale(g.cross_entropy(p_local, targets), lambda1),
               g.scale(g.cross_entropy(p_global, targets), lambda2));
}

OptimizerState OptimizerState::for_params(const ModelParams& params) {
  OptimizerState state;
  for (const auto& p : params.ordered()) {
    state.moments.push_back({std::vector<double>(p.tensor.numel(), 0.0),
                             std::vector<double>(p.tensor.numel(), 0.0)});
  }
  return state;
}

void adam_update(std::span<double> values, std::span<const double> grad,
                 std::span<double> m, std::span<double> v, std::size_t step,
                 const TrainConfig& config) {
  const double t = static_cast<double>(step);
  const double bc1 = 1.0 - std::pow(config.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(config.adam_beta2, t);
  for (std::size_t j = 0; j < values.size(); ++j) {
    m[j] = config.adam_beta1 * m[j] + (1.0 - config.adam_beta1) * grad[j];
    v[j] = config.adam_beta2 * v[j] + (1.0 - config.adam_beta2) * grad[j] * grad[j];
    const double m_hat = m[j] / bc1;
    const double v_hat = v[j] / bc2;
    values[j] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_epsilon);
  }
}

void adam_step(ModelParams& params, const GradVector& grads, OptimizerState& state,
               const TrainConfig& config) {
  auto named = params.ordered();
  if (grads.size() != named.size()) {
    throw std::invalid_argument("adam_step: got " + std::to_string(grads.size()) +
                                " gradient buffers for " + std::to_string(named.size()) +
                                " parameters");
  }
  if (state.moments.size() != named.size()) {
    throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (grads[i].size() != named[i].tensor.numel()) {
      throw std::invalid_argument("adam_step: missing or mis-sized gradient for parameter '" +
                                  named[i].name + "'");
    }
  }
  state.step += 1;
  for (std::size_t i = 0; i < named.size(); ++i) {
    adam_update(named[i].tensor.values_mut(), grads[i], state.moments[i].m,
                state.moments[i].v, state.step, config);
  }
}

TrainingExample make_training_example(const Dataset& dataset, std::size_t sample_index,
                                      CaptionField field, const ModelConfig& config) {
  const BoundarySample& sample = dataset.samples.at(sample_index);
  std::vector<int> tokens = sample.captions.of(field);
  const std::size_t max_tokens = config.max_caption_len - 2;
  if (tokens.size() > max_tokens) tokens.resize(max_tokens);

  TrainingExample ex;
  ex.sample_index = sample_index;
  ex.field = field;
  ex.prefix.reserve(tokens.size() + 2);
  ex.prefix.push_back(Vocabulary::kBos);
  ex.prefix.push_back(field_tag_id(field));
  ex.prefix.insert(ex.prefix.end(), tokens.begin(), tokens.end());
  ex.targets = tokens;
  ex.targets.push_back(Vocabulary::kEos);
  return ex;
}

namespace {

struct ExampleGrad {
  double loss = 0.0;
  GradientTable table;
};

ExampleGrad example_gradients(const TrainingExample& ex, const Dataset& dataset,
                              const ModelParams& params, const ModelConfig& model_config,
                              const TrainConfig& train_config) {
  Graph g;
  const BoundarySample& sample = dataset.samples[ex.sample_index];
  ForwardResult fwd = model_forward(g, sample, ex.prefix, params, model_config);
  // Rows 1..L-1 predict [tokens..., EOS]; row 0 would predict the given tag.
  std::vector<std::size_t> rows(ex.targets.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i + 1;
  Tensor p_l = g.gather_rows(fwd.p_local, rows);
  Tensor p_g = g.gather_rows(fwd.p_global, rows);
  Tensor loss = dual_stream_loss(g, p_l, p_g, ex.targets, train_config.lambda1,
                                 train_config.lambda2);
  ExampleGrad out;
  out.loss = loss.value();
  out.table = g.gradients(loss);
  return out;
}

}  // namespace

TrainResult train(const Dataset& dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config) {
  model_config.validate();
  train_config.validate();
  if (dataset.samples.empty()) throw std::invalid_argument("train: dataset is empty");
  if (dataset.vocab.size() != model_config.vocab_size) {
    throw std::invalid_argument("train: dataset vocabulary size " +
                                std::to_string(dataset.vocab.size()) +
                                " does not match config vocab_size " +
                                std::to_string(model_config.vocab_size));
  }
  if (dataset.header.boundary_types.size() != model_config.num_boundary_types) {
    throw std::invalid_argument("train: boundary-type lexicon size mismatch with config");
  }

  TrainResult result{ModelParams(model_config, mix_seed(train_config.seed, 0x1217)), {}, {}, 0};
  ModelParams& params = result.params;
  if (!train_config.pretrained_embeddings.empty()) {
    apply_pretrained_embeddings(params.token_embedding, dataset.vocab,
                                train_config.pretrained_embeddings);
  }
  auto named = params.ordered();
  OptimizerState state = OptimizerState::for_params(params);

  std::vector<TrainingExample> examples;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    for (CaptionField f : kAllFields) {
      examples.push_back(make_training_example(dataset, i, f, model_config));
    }
  }

  std::mt19937_64 shuffle_rng(mix_seed(train_config.seed, 0x50f1e));
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  bool stop = false;
  for (std::size_t epoch = 0; epoch < train_config.max_epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss_sum = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t batch_start = 0; batch_start < order.size() && !stop;
         batch_start += train_config.batch_size) {
      const std::size_t batch_end =
          std::min(order.size(), batch_start + train_config.batch_size);
      const std::size_t batch_n = batch_end - batch_start;

      std::vector<ExampleGrad> per_example(batch_n);
      const std::size_t workers = std::min<std::size_t>(train_config.threads, batch_n);
      if (workers <= 1) {
        for (std::size_t i = 0; i < batch_n; ++i) {
          per_example[i] = example_gradients(examples[order[batch_start + i]], dataset,
                                             params, model_config, train_config);
        }
      } else {
        std::vector<std::thread> pool;
        std::exception_ptr first_error;
        std::mutex error_mutex;
        for (std::size_t w = 0; w < workers; ++w) {
          pool.emplace_back([&, w]() {
            try {
              for (std::size_t i = w; i < batch_n; i += workers) {
                per_example[i] = example_gradients(examples[order[batch_start + i]], dataset,
                                                   params, model_config, train_config);
              }
            } catch (...) {
              std::lock_guard<std::mutex> lock(error_mutex);
              if (!first_error) first_error = std::current_exception();
            }
          });
        }
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
      }

      // Reduce in example order so the result is thread-count independent.
      GradVector master(named.size());
      for (std::size_t p = 0; p < named.size(); ++p) {
        master[p].assign(named[p].tensor.numel(), 0.0);
      }
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < batch_n; ++i) {
        batch_loss += per_example[i].loss;
        for (std::size_t p = 0; p < named.size(); ++p) {
          if (const auto* buf = per_example[i].table.find(named[p].tensor.node())) {
            auto& acc = master[p];
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += (*buf)[j];
          }
        }
      }
      const double inv_n = 1.0 / static_cast<double>(batch_n);
      batch_loss *= inv_n;
      for (auto& buf : master) {
        for (double& x : buf) x *= inv_n;
      }

      adam_step(params, master, state, train_config);
      result.steps += 1;
      result.log.push_back({epoch, result.steps, batch_loss});
      epoch_loss_sum += batch_loss;
      epoch_batches += 1;
      if (train_config.max_steps > 0 && result.steps >= train_config.max_steps) stop = true;
    }
    if (epoch_batches > 0) {
      result.epoch_mean_loss.push_back(epoch_loss_sum / static_cast<double>(epoch_batches));
    }
  }
  return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write loss log: " + path.string());
  out << "epoch,step,loss\n";
  char buf[64];
  for (const auto& rec : log) {
    std::snprintf(buf, sizeof(buf), "%.17g", rec.loss);
    out << rec.epoch << "," << rec.step << "," << buf << "\n";
  }
}

}  // namespace dsc
