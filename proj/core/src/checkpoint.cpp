#include "dsc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace dsc {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

json config_to_json(const ModelConfig& c) {
  return json{{"layers", c.layers},
              {"d", c.d},
              {"heads", c.heads},
              {"d_emb", c.d_emb},
              {"d_app", c.d_app},
              {"d_mot", c.d_mot},
              {"d_reg", c.d_reg},
              {"d_typ", c.d_typ},
              {"vocab_size", c.vocab_size},
              {"num_boundary_types", c.num_boundary_types},
              {"max_caption_len", c.max_caption_len},
              {"max_temporal_len", c.max_temporal_len},
              {"lambda1", c.lambda1},
              {"lambda2", c.lambda2}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.d = j.at("d").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.d_emb = j.at("d_emb").get<std::size_t>();
  c.d_app = j.at("d_app").get<std::size_t>();
  c.d_mot = j.at("d_mot").get<std::size_t>();
  c.d_reg = j.at("d_reg").get<std::size_t>();
  c.d_typ = j.at("d_typ").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.num_boundary_types = j.at("num_boundary_types").get<std::size_t>();
  c.max_caption_len = j.at("max_caption_len").get<std::size_t>();
  c.max_temporal_len = j.at("max_temporal_len").get<std::size_t>();
  c.lambda1 = j.at("lambda1").get<double>();
  c.lambda2 = j.at("lambda2").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  const auto named = params.ordered();
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& p : named) {
    manifest.push_back({{"name", p.name},
                        {"shape", p.tensor.shape()},
                        {"offset", offset}});
    offset += p.tensor.numel() * sizeof(double);
  }
  json header = {{"schema_version", 1},
                 {"model_config", config_to_json(params.config())},
                 {"manifest", std::move(manifest)}};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out << header.dump() << "\n";
  for (const auto& p : named) {
    const auto values = p.tensor.values();
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) {
    throw std::runtime_error("checkpoint missing header line: " + path.string());
  }
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw std::runtime_error("bad checkpoint header: " + std::string(e.what()));
  }
  if (header.at("schema_version").get<int>() != 1) {
    throw std::runtime_error("unsupported checkpoint schema_version");
  }

  const ModelConfig cfg = config_from_json(header.at("model_config"));
  Checkpoint ckpt{cfg, ModelParams::zeros_like(cfg)};
  auto named = ckpt.params.ordered();
  const auto& manifest = header.at("manifest");
  if (manifest.size() != named.size()) {
    throw std::runtime_error("checkpoint manifest lists " + std::to_string(manifest.size()) +
                             " parameters, model has " + std::to_string(named.size()));
  }
  const std::streampos data_start = in.tellg();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& entry = manifest[i];
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    if (name != named[i].name || shape != named[i].tensor.shape()) {
      throw std::runtime_error("checkpoint manifest entry '" + name +
                               "' does not match expected parameter '" + named[i].name +
                               "' of shape " + shape_to_string(named[i].tensor.shape()));
    }
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    auto values = named[i].tensor.values_mut();
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) {
      throw std::runtime_error("checkpoint truncated while reading parameter '" + name + "'");
    }
  }
  return ckpt;
}

}  // namespace dsc
