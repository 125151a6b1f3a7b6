// dsc: dual-stream boundary captioner command-line interface.
//
// Subcommands: synth-data | train | generate | ensemble-generate | evaluate |
// grad-check. Flag precedence: built-in defaults < --profile preset < --config
// JSON file < explicit flags. Every command writes a run manifest naming the
// resolved configuration, seeds, inputs, and hashed outputs; timing lives in
// its own field so manifests of identical runs differ nowhere else.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsc/checkpoint.hpp"
#include "dsc/data.hpp"
#include "dsc/decoding.hpp"
#include "dsc/gradcheck.hpp"
#include "dsc/metrics.hpp"
#include "dsc/model.hpp"
#include "dsc/training.hpp"

namespace {

using nlohmann::json;

std::uint64_t fnv1a64_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot hash missing file: " + path.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setfill('0') << std::setw(16) << v;
  return os.str();
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

class ManifestWriter {
 public:
  ManifestWriter(std::string command, json config, json seeds)
      : started_(std::chrono::steady_clock::now()),
        doc_{{"command", std::move(command)},
             {"config", std::move(config)},
             {"seeds", std::move(seeds)},
             {"inputs", json::array()},
             {"outputs", json::array()},
             {"timing", {{"started_utc", utc_now()}, {"wall_ms", 0}}}} {}

  void add_input(const std::filesystem::path& p) { doc_["inputs"].push_back(p.string()); }
  void add_output(const std::filesystem::path& p) {
    doc_["outputs"].push_back({{"path", p.string()}, {"fnv1a64", hex64(fnv1a64_file(p))}});
  }

  void write(const std::filesystem::path& path) {
    finalize();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
    out << doc_.dump(2) << "\n";
  }

  void print() {
    finalize();
    std::cout << doc_.dump(2) << "\n";
  }

 private:
  void finalize() {
    const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - started_);
    doc_["timing"]["wall_ms"] = wall.count();
  }

  std::chrono::steady_clock::time_point started_;
  json doc_;
};

std::uint64_t resolve_seed(const CLI::Option* seed_opt, std::uint64_t flag_value,
                           const json& file_config) {
  if (seed_opt->count() > 0) return flag_value;
  if (file_config.contains("seed")) return file_config["seed"].get<std::uint64_t>();
  if (const char* env = std::getenv("DSC_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return flag_value;
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  json j;
  in >> j;
  if (!j.is_object()) throw std::runtime_error("config file must hold a JSON object");
  return j;
}

// Applies a config-file value unless the flag was given explicitly.
template <typename T>
void layer_option(const CLI::App& app, const json& file_config, const std::string& key, T& var) {
  if (!file_config.contains(key)) return;
  const CLI::Option* opt = app.get_option_no_throw("--" + key);
  if (opt != nullptr && opt->count() > 0) return;
  var = file_config.at(key).get<T>();
}

struct ModelFlags {
  std::size_t layers = 3;
  std::size_t d = 768;
  std::size_t heads = 12;
  std::size_t d_emb = 300;
  std::size_t max_caption_len = 32;
  std::size_t max_temporal_len = 64;
  double lambda1 = 0.5;
  double lambda2 = 0.5;
};

struct TrainFlags {
  double lr = 1e-4;
  std::size_t epochs = 10;
  std::size_t batch = 100;
  std::size_t max_steps = 0;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
};

void apply_profile(const std::string& profile, ModelFlags& mf, TrainFlags& tf) {
  if (profile.empty() || profile == "full") return;  // full-size defaults
  if (profile == "desk") {
    mf.layers = 2;
    mf.d = 32;
    mf.heads = 4;
    mf.d_emb = 16;
    mf.max_caption_len = 16;
    mf.max_temporal_len = 16;
    tf.batch = 8;
    return;
  }
  throw CLI::ValidationError("--profile", "unknown profile '" + profile + "'");
}

dsc::ModelConfig model_config_for(const dsc::Dataset& ds, const ModelFlags& mf) {
  dsc::ModelConfig mc;
  mc.layers = mf.layers;
  mc.d = mf.d;
  mc.heads = mf.heads;
  mc.d_emb = mf.d_emb;
  mc.d_app = ds.header.d_app;
  mc.d_mot = ds.header.d_mot;
  mc.d_reg = ds.header.d_reg;
  mc.d_typ = ds.header.d_typ;
  mc.vocab_size = ds.vocab.size();
  mc.num_boundary_types = ds.header.boundary_types.size();
  mc.max_caption_len = mf.max_caption_len;
  mc.max_temporal_len = mf.max_temporal_len;
  mc.lambda1 = mf.lambda1;
  mc.lambda2 = mf.lambda2;
  return mc;
}

json model_config_json(const dsc::ModelConfig& c) {
  return json{{"layers", c.layers},         {"d", c.d},
              {"heads", c.heads},           {"d_emb", c.d_emb},
              {"d_app", c.d_app},           {"d_mot", c.d_mot},
              {"d_reg", c.d_reg},           {"d_typ", c.d_typ},
              {"vocab_size", c.vocab_size}, {"num_boundary_types", c.num_boundary_types},
              {"max_caption_len", c.max_caption_len},
              {"max_temporal_len", c.max_temporal_len},
              {"lambda1", c.lambda1},       {"lambda2", c.lambda2}};
}

dsc::PredictionSet decode_all(const dsc::Dataset& ds,
                              const std::vector<const dsc::CaptionScorer*>& models,
                              std::size_t max_len) {
  dsc::PredictionSet preds;
  for (const auto& sample : ds.samples) {
    dsc::CaptionText text;
    text.subject = dsc::detokenize(
        dsc::ensemble_decode(sample, dsc::CaptionField::kSubject, models, max_len), ds.vocab);
    text.before = dsc::detokenize(
        dsc::ensemble_decode(sample, dsc::CaptionField::kBefore, models, max_len), ds.vocab);
    text.after = dsc::detokenize(
        dsc::ensemble_decode(sample, dsc::CaptionField::kAfter, models, max_len), ds.vocab);
    preds.emplace(sample.boundary_id, std::move(text));
  }
  return preds;
}

void check_checkpoint_matches_dataset(const dsc::ModelConfig& mc, const dsc::Dataset& ds,
                                      const std::string& ckpt_name) {
  if (mc.vocab_size != ds.vocab.size()) {
    throw std::runtime_error("checkpoint '" + ckpt_name + "' was trained with vocabulary size " +
                             std::to_string(mc.vocab_size) + " but the dataset builds " +
                             std::to_string(ds.vocab.size()));
  }
  if (mc.d_app != ds.header.d_app || mc.d_mot != ds.header.d_mot ||
      mc.d_reg != ds.header.d_reg || mc.d_typ != ds.header.d_typ) {
    throw std::runtime_error("checkpoint '" + ckpt_name +
                             "' feature widths disagree with the dataset header");
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"dual-stream boundary captioner"};
  app.require_subcommand(1);

  // ---- synth-data ----------------------------------------------------------
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic dataset file");
  std::string synth_out;
  std::uint64_t synth_seed = 1;
  dsc::SynthConfig synth_cfg;
  std::string synth_config_path;
  synth->add_option("--out", synth_out, "output dataset path")->required();
  auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--n", synth_cfg.n, "number of boundaries");
  synth->add_option("--t-app", synth_cfg.t_app, "appearance rows per sample");
  synth->add_option("--t-mot", synth_cfg.t_mot, "motion rows per sample");
  synth->add_option("--k-regions", synth_cfg.k_regions, "region rows per sample");
  synth->add_option("--d-app", synth_cfg.d_app, "appearance width");
  synth->add_option("--d-mot", synth_cfg.d_mot, "motion width");
  synth->add_option("--d-reg", synth_cfg.d_reg, "region width");
  synth->add_option("--d-typ", synth_cfg.d_typ, "type embedding width");
  synth->add_option("--config", synth_config_path, "JSON config file");

  // ---- train ---------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  std::string train_data, train_out, train_loss_csv, train_profile, train_config_path;
  ModelFlags mf;
  TrainFlags tf;
  train_cmd->add_option("--data", train_data, "dataset file")->required();
  train_cmd->add_option("--out", train_out, "checkpoint output path")->required();
  train_cmd->add_option("--loss-csv", train_loss_csv, "loss log path (default <out>.loss.csv)");
  train_cmd->add_option("--profile", train_profile, "preset: desk | full");
  train_cmd->add_option("--config", train_config_path, "JSON config file");
  train_cmd->add_option("--layers", mf.layers, "encoder layers");
  train_cmd->add_option("--d", mf.d, "model width");
  train_cmd->add_option("--heads", mf.heads, "attention heads");
  train_cmd->add_option("--d-emb", mf.d_emb, "token embedding width");
  train_cmd->add_option("--max-caption-len", mf.max_caption_len, "maximum decoder prefix");
  train_cmd->add_option("--max-temporal-len", mf.max_temporal_len, "maximum temporal rows");
  train_cmd->add_option("--lambda1", mf.lambda1, "local stream weight");
  train_cmd->add_option("--lambda2", mf.lambda2, "global stream weight");
  train_cmd->add_option("--lr", tf.lr, "Adam learning rate");
  train_cmd->add_option("--epochs", tf.epochs, "training epochs");
  train_cmd->add_option("--batch", tf.batch, "batch size");
  train_cmd->add_option("--max-steps", tf.max_steps, "stop after this many batches (0 = off)");
  train_cmd->add_option("--threads", tf.threads, "worker threads for batch gradients");
  std::string train_embeddings;
  train_cmd->add_option("--pretrained-embeddings", train_embeddings,
                        "JSON embedding table loaded over the seeded init");
  auto* train_seed_opt = train_cmd->add_option("--seed", tf.seed, "training seed");

  // ---- generate / ensemble-generate ----------------------------------------
  auto* gen = app.add_subcommand("generate", "greedy-decode captions with one checkpoint");
  std::string gen_data, gen_out;
  std::vector<std::string> gen_ckpts;
  std::size_t gen_max_len = 0;
  gen->add_option("--data", gen_data, "dataset file")->required();
  gen->add_option("--checkpoint", gen_ckpts, "checkpoint path")->required();
  gen->add_option("--out", gen_out, "predictions output path")->required();
  gen->add_option("--max-len", gen_max_len, "max generated tokens (default from config)");

  auto* ens = app.add_subcommand("ensemble-generate",
                                 "word-level ensemble decoding over several checkpoints");
  std::string ens_data, ens_out;
  std::vector<std::string> ens_ckpts;
  std::size_t ens_max_len = 0;
  ens->add_option("--data", ens_data, "dataset file")->required();
  ens->add_option("--checkpoint", ens_ckpts, "checkpoint path (repeat; at least two)")
      ->required();
  ens->add_option("--out", ens_out, "predictions output path")->required();
  ens->add_option("--max-len", ens_max_len, "max generated tokens (default from config)");

  // ---- evaluate --------------------------------------------------------------
  auto* eval = app.add_subcommand("evaluate", "score predictions against references");
  std::string eval_preds, eval_refs, eval_out;
  eval->add_option("--predictions", eval_preds, "predictions JSONL")->required();
  eval->add_option("--references", eval_refs, "reference JSONL or dataset file")->required();
  eval->add_option("--out", eval_out, "report output path")->required();

  // ---- grad-check ------------------------------------------------------------
  auto* gc = app.add_subcommand("grad-check",
                                "finite-difference audit of the reverse-mode gradients");
  dsc::GradCheckConfig gc_cfg;
  gc_cfg.model.layers = 1;
  gc_cfg.model.d = 16;
  gc_cfg.model.heads = 2;
  gc_cfg.model.d_emb = 12;
  gc_cfg.model.d_app = 8;
  gc_cfg.model.d_mot = 6;
  gc_cfg.model.d_reg = 10;
  gc_cfg.model.d_typ = 5;
  gc_cfg.model.vocab_size = 20;
  gc_cfg.model.num_boundary_types = 2;
  gc_cfg.model.max_caption_len = 8;
  gc_cfg.model.max_temporal_len = 8;
  double gc_tol = 1e-4;
  std::string gc_out;
  gc->add_option("--d", gc_cfg.model.d, "model width");
  gc->add_option("--heads", gc_cfg.model.heads, "attention heads");
  gc->add_option("--layers", gc_cfg.model.layers, "encoder layers");
  gc->add_option("--d-emb", gc_cfg.model.d_emb, "token embedding width");
  gc->add_option("--vocab", gc_cfg.model.vocab_size, "vocabulary size");
  gc->add_option("--t-app", gc_cfg.t_app, "appearance rows");
  gc->add_option("--t-mot", gc_cfg.t_mot, "motion rows");
  gc->add_option("--k", gc_cfg.k_regions, "region rows");
  gc->add_option("--len", gc_cfg.prefix_len, "caption prefix length");
  gc->add_option("--fd-step", gc_cfg.step, "finite-difference step");
  gc->add_option("--floor", gc_cfg.floor, "relative-error denominator floor");
  gc->add_option("--tol", gc_tol, "failure threshold on the max relative error");
  gc->add_option("--out", gc_out, "optional JSON report path");
  auto* gc_seed_opt = gc->add_option("--seed", gc_cfg.seed, "probe seed");

  CLI11_PARSE(app, argc, argv);

  // ------------------------------------------------------------------------
  if (synth->parsed()) {
    const json file_cfg = load_config_file(synth_config_path);
    layer_option(*synth, file_cfg, "n", synth_cfg.n);
    layer_option(*synth, file_cfg, "t-app", synth_cfg.t_app);
    layer_option(*synth, file_cfg, "t-mot", synth_cfg.t_mot);
    layer_option(*synth, file_cfg, "k-regions", synth_cfg.k_regions);
    synth_seed = resolve_seed(synth_seed_opt, synth_seed, file_cfg);

    dsc::synth_dataset(synth_seed, synth_cfg, synth_out);
    ManifestWriter manifest("synth-data",
                            json{{"n", synth_cfg.n},
                                 {"t_app", synth_cfg.t_app},
                                 {"t_mot", synth_cfg.t_mot},
                                 {"k_regions", synth_cfg.k_regions},
                                 {"d_app", synth_cfg.d_app},
                                 {"d_mot", synth_cfg.d_mot},
                                 {"d_reg", synth_cfg.d_reg},
                                 {"d_typ", synth_cfg.d_typ}},
                            json{{"seed", synth_seed}});
    manifest.add_output(synth_out);
    manifest.write(synth_out + ".manifest.json");
    std::cout << "wrote " << synth_out << " (" << synth_cfg.n << " boundaries)\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    const json file_cfg = load_config_file(train_config_path);
    apply_profile(train_profile, mf, tf);
    layer_option(*train_cmd, file_cfg, "layers", mf.layers);
    layer_option(*train_cmd, file_cfg, "d", mf.d);
    layer_option(*train_cmd, file_cfg, "heads", mf.heads);
    layer_option(*train_cmd, file_cfg, "d-emb", mf.d_emb);
    layer_option(*train_cmd, file_cfg, "max-caption-len", mf.max_caption_len);
    layer_option(*train_cmd, file_cfg, "max-temporal-len", mf.max_temporal_len);
    layer_option(*train_cmd, file_cfg, "lambda1", mf.lambda1);
    layer_option(*train_cmd, file_cfg, "lambda2", mf.lambda2);
    layer_option(*train_cmd, file_cfg, "lr", tf.lr);
    layer_option(*train_cmd, file_cfg, "epochs", tf.epochs);
    layer_option(*train_cmd, file_cfg, "batch", tf.batch);
    layer_option(*train_cmd, file_cfg, "max-steps", tf.max_steps);
    layer_option(*train_cmd, file_cfg, "threads", tf.threads);
    tf.seed = resolve_seed(train_seed_opt, tf.seed, file_cfg);
    if (train_loss_csv.empty()) train_loss_csv = train_out + ".loss.csv";

    const dsc::Dataset ds = dsc::load_dataset(train_data);
    const dsc::ModelConfig mc = model_config_for(ds, mf);
    dsc::TrainConfig tc;
    tc.learning_rate = tf.lr;
    tc.max_epochs = tf.epochs;
    tc.batch_size = tf.batch;
    tc.max_steps = tf.max_steps;
    tc.lambda1 = mf.lambda1;
    tc.lambda2 = mf.lambda2;
    tc.seed = tf.seed;
    tc.threads = tf.threads;
    tc.pretrained_embeddings = train_embeddings;

    const dsc::TrainResult result = dsc::train(ds, mc, tc);
    dsc::save_checkpoint(train_out, result.params);
    dsc::write_loss_csv(train_loss_csv, result.log);

    ManifestWriter manifest("train",
                            json{{"model", model_config_json(mc)},
                                 {"lr", tc.learning_rate},
                                 {"epochs", tc.max_epochs},
                                 {"batch", tc.batch_size},
                                 {"max_steps", tc.max_steps},
                                 {"threads", tc.threads},
                                 {"pretrained_embeddings", train_embeddings}},
                            json{{"seed", tc.seed}});
    manifest.add_input(train_data);
    manifest.add_output(train_out);
    manifest.add_output(train_loss_csv);
    manifest.write(train_out + ".manifest.json");

    const double final_loss = result.epoch_mean_loss.empty() ? 0.0
                                                             : result.epoch_mean_loss.back();
    std::cout << "trained " << result.steps << " steps over "
              << result.epoch_mean_loss.size() << " epochs; final epoch mean loss "
              << final_loss << "\n"
              << "wrote " << train_out << " and " << train_loss_csv << "\n";
    return 0;
  }

  if (gen->parsed() || ens->parsed()) {
    const bool ensemble = ens->parsed();
    const std::string& data_path = ensemble ? ens_data : gen_data;
    const std::string& out_path = ensemble ? ens_out : gen_out;
    const std::vector<std::string>& ckpt_paths = ensemble ? ens_ckpts : gen_ckpts;
    std::size_t max_len = ensemble ? ens_max_len : gen_max_len;
    if (ensemble && ckpt_paths.size() < 2) {
      std::cerr << "ensemble-generate needs at least two --checkpoint arguments\n";
      return 2;
    }
    if (!ensemble && ckpt_paths.size() != 1) {
      std::cerr << "generate takes exactly one --checkpoint\n";
      return 2;
    }

    const dsc::Dataset ds = dsc::load_dataset(data_path);
    std::vector<dsc::Checkpoint> ckpts;
    std::vector<std::unique_ptr<dsc::ModelScorer>> scorers;
    std::vector<const dsc::CaptionScorer*> models;
    ckpts.reserve(ckpt_paths.size());
    for (const auto& p : ckpt_paths) {
      ckpts.push_back(dsc::load_checkpoint(p));
      check_checkpoint_matches_dataset(ckpts.back().config, ds, p);
    }
    for (const auto& c : ckpts) {
      scorers.push_back(std::make_unique<dsc::ModelScorer>(c.params, c.config));
      models.push_back(scorers.back().get());
    }
    if (max_len == 0) max_len = ckpts.front().config.max_caption_len - 2;

    const dsc::PredictionSet preds = decode_all(ds, models, max_len);
    dsc::write_predictions(out_path, preds);

    json ckpt_list = json::array();
    for (const auto& p : ckpt_paths) ckpt_list.push_back(p);
    ManifestWriter manifest(ensemble ? "ensemble-generate" : "generate",
                            json{{"max_len", max_len}, {"checkpoints", ckpt_list}},
                            json::object());
    manifest.add_input(data_path);
    for (const auto& p : ckpt_paths) manifest.add_input(p);
    manifest.add_output(out_path);
    manifest.write(out_path + ".manifest.json");
    std::cout << "wrote " << out_path << " (" << preds.size() << " boundaries)\n";
    return 0;
  }

  if (eval->parsed()) {
    const dsc::PredictionSet preds = dsc::load_predictions(eval_preds);
    const dsc::ReferenceSet refs = dsc::load_references(eval_refs);
    const dsc::EvalReport report = dsc::triplet_average(preds, refs);
    dsc::write_report(eval_out, report);

    ManifestWriter manifest("evaluate", json::object(), json::object());
    manifest.add_input(eval_preds);
    manifest.add_input(eval_refs);
    manifest.add_output(eval_out);
    manifest.write(eval_out + ".manifest.json");

    std::cout << "corpus " << report.corpus_size << "\n"
              << "rouge_l  subject " << report.rouge_l.subject << "  before "
              << report.rouge_l.before << "  after " << report.rouge_l.after << "  avg "
              << report.rouge_l_average << "\n"
              << "cider_d  subject " << report.cider_d.subject << "  before "
              << report.cider_d.before << "  after " << report.cider_d.after << "  avg "
              << report.cider_d_average << "\n";
    return 0;
  }

  if (gc->parsed()) {
    const json file_cfg = json::object();
    gc_cfg.seed = resolve_seed(gc_seed_opt, gc_cfg.seed, file_cfg);
    const dsc::GradCheckReport report = dsc::run_grad_check(gc_cfg);
    std::cout << std::left;
    for (const auto& g : report.groups) {
      std::cout << "  " << std::setw(34) << g.name << " max rel err " << std::scientific
                << std::setprecision(3) << g.max_rel_error << std::defaultfloat << "\n";
    }
    std::cout << "max relative error " << std::scientific << std::setprecision(3)
              << report.max_rel_error << std::defaultfloat << " (tolerance " << gc_tol
              << ")\n";

    json report_json = {{"max_rel_error", report.max_rel_error},
                        {"tolerance", gc_tol},
                        {"groups", json::array()}};
    for (const auto& g : report.groups) {
      report_json["groups"].push_back({{"name", g.name}, {"max_rel_error", g.max_rel_error}});
    }
    ManifestWriter manifest("grad-check",
                            json{{"model", model_config_json(gc_cfg.model)},
                                 {"t_app", gc_cfg.t_app},
                                 {"t_mot", gc_cfg.t_mot},
                                 {"k_regions", gc_cfg.k_regions},
                                 {"prefix_len", gc_cfg.prefix_len},
                                 {"h", gc_cfg.step},
                                 {"floor", gc_cfg.floor}},
                            json{{"seed", gc_cfg.seed}});
    if (!gc_out.empty()) {
      std::ofstream out(gc_out, std::ios::binary);
      out << report_json.dump(2) << "\n";
      manifest.add_output(gc_out);
      manifest.write(gc_out + ".manifest.json");
    } else {
      manifest.print();
    }
    return report.max_rel_error < gc_tol ? 0 : 1;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
