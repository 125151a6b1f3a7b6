#include "dsc/data.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dsc {

namespace {

using nlohmann::json;

const char* kReservedTokens[Vocabulary::kNumReserved] = {
    "<pad>", "<bos>", "<eos>", "<unk>", "<subj>", "<bef>", "<aft>"};

[[noreturn]] void fail_line(const std::filesystem::path& path, std::size_t line_no,
                            const std::string& what) {
  throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + what);
}

Tensor parse_feature_matrix(const json& arr, std::size_t expect_cols,
                            const std::string& sample_id, const char* field) {
  if (!arr.is_array() || arr.empty()) {
    throw std::runtime_error("sample '" + sample_id + "': " + field +
                             " must be a nonempty array of rows");
  }
  std::vector<double> data;
  data.reserve(arr.size() * expect_cols);
  for (const auto& row : arr) {
    if (!row.is_array() || row.size() != expect_cols) {
      throw std::runtime_error("sample '" + sample_id + "': " + field + " row has " +
                               std::to_string(row.is_array() ? row.size() : 0) +
                               " entries, header declares " + std::to_string(expect_cols));
    }
    for (const auto& v : row) {
      if (!v.is_number()) {
        throw std::runtime_error("sample '" + sample_id + "': non-numeric entry in " + field);
      }
      const double x = v.get<double>();
      if (!std::isfinite(x)) {
        throw std::runtime_error("sample '" + sample_id + "': non-finite entry in " + field);
      }
      data.push_back(x);
    }
  }
  return Tensor::matrix(arr.size(), expect_cols, std::move(data));
}

}  // namespace

Vocabulary::Vocabulary() {
  for (int i = 0; i < kNumReserved; ++i) {
    tokens_.emplace_back(kReservedTokens[i]);
    ids_.emplace(kReservedTokens[i], i);
  }
}

int Vocabulary::add_word(const std::string& word) {
  auto it = ids_.find(word);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(word);
  ids_.emplace(word, id);
  return id;
}

int Vocabulary::id_of(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return ids_.count(std::string(word)) > 0;
}

const std::string& Vocabulary::token_text(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::invalid_argument("vocabulary: id " + std::to_string(id) +
                                " outside [0, " + std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int field_tag_id(CaptionField field) {
  switch (field) {
    case CaptionField::kSubject: return Vocabulary::kSubjectTag;
    case CaptionField::kBefore: return Vocabulary::kBeforeTag;
    case CaptionField::kAfter: return Vocabulary::kAfterTag;
  }
  throw std::logic_error("field_tag_id: bad field");
}

std::string_view field_name(CaptionField field) {
  switch (field) {
    case CaptionField::kSubject: return "subject";
    case CaptionField::kBefore: return "before";
    case CaptionField::kAfter: return "after";
  }
  throw std::logic_error("field_name: bad field");
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc) || c == '\'') {
      current.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<int> encode_words(const std::vector<std::string>& words, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(vocab.id_of(w));
  return ids;
}

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab) {
  return encode_words(split_words(text), vocab);
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.token_text(id);
  }
  return out;
}

const std::vector<int>& CaptionTriplet::of(CaptionField f) const {
  switch (f) {
    case CaptionField::kSubject: return subject;
    case CaptionField::kBefore: return before;
    case CaptionField::kAfter: return after;
  }
  throw std::logic_error("CaptionTriplet::of: bad field");
}

const std::string& CaptionText::of(CaptionField f) const {
  switch (f) {
    case CaptionField::kSubject: return subject;
    case CaptionField::kBefore: return before;
    case CaptionField::kAfter: return after;
  }
  throw std::logic_error("CaptionText::of: bad field");
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path.string());

  Dataset ds;
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) {
    throw std::runtime_error(path.string() + ": missing header line");
  }
  ++line_no;
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    fail_line(path, line_no, std::string("bad header JSON: ") + e.what());
  }
  try {
    ds.header.schema_version = header.at("schema_version").get<int>();
    if (ds.header.schema_version != 1) {
      fail_line(path, line_no,
                "unsupported schema_version " + std::to_string(ds.header.schema_version));
    }
    ds.header.d_app = header.at("d_app").get<std::size_t>();
    ds.header.d_mot = header.at("d_mot").get<std::size_t>();
    ds.header.d_reg = header.at("d_reg").get<std::size_t>();
    ds.header.d_typ = header.at("d_typ").get<std::size_t>();
    // absent in older files; 10 matches the top-10 detection convention
    ds.header.max_regions = header.value("max_regions", std::size_t{10});
    ds.header.boundary_types = header.at("boundary_types").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail_line(path, line_no, std::string("bad header field: ") + e.what());
  }
  if (ds.header.boundary_types.empty()) {
    fail_line(path, line_no, "boundary_types must be nonempty");
  }

  std::unordered_map<std::string, int> type_ids;
  for (std::size_t i = 0; i < ds.header.boundary_types.size(); ++i) {
    type_ids.emplace(ds.header.boundary_types[i], static_cast<int>(i));
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail_line(path, line_no, std::string("malformed sample JSON: ") + e.what());
    }
    BoundarySample s;
    try {
      s.boundary_id = rec.at("boundary_id").get<std::string>();
      s.appearance = parse_feature_matrix(rec.at("appearance"), ds.header.d_app,
                                          s.boundary_id, "appearance");
      s.motion = parse_feature_matrix(rec.at("motion"), ds.header.d_mot,
                                      s.boundary_id, "motion");
      s.regions = parse_feature_matrix(rec.at("regions"), ds.header.d_reg,
                                       s.boundary_id, "regions");
      s.boundary_type = rec.at("boundary_type").get<std::string>();
      const auto& caps = rec.at("captions");
      s.caption_text.subject = caps.at("subject").get<std::string>();
      s.caption_text.before = caps.at("before").get<std::string>();
      s.caption_text.after = caps.at("after").get<std::string>();
    } catch (const json::exception& e) {
      fail_line(path, line_no, std::string("bad sample field: ") + e.what());
    }
    if (s.regions.rows() > ds.header.max_regions) {
      throw std::runtime_error("sample '" + s.boundary_id + "': " +
                               std::to_string(s.regions.rows()) +
                               " region rows exceed declared max_regions=" +
                               std::to_string(ds.header.max_regions));
    }
    auto type_it = type_ids.find(s.boundary_type);
    if (type_it == type_ids.end()) {
      throw std::runtime_error("sample '" + s.boundary_id + "': boundary_type '" +
                               s.boundary_type + "' not in the header lexicon");
    }
    s.boundary_type_id = type_it->second;
    for (CaptionField f : kAllFields) {
      if (split_words(s.caption_text.of(f)).empty()) {
        throw std::runtime_error("sample '" + s.boundary_id + "': empty " +
                                 std::string(field_name(f)) + " caption");
      }
    }
    ds.samples.push_back(std::move(s));
  }

  // Vocabulary in first-appearance order over all reference captions.
  for (const auto& s : ds.samples) {
    for (CaptionField f : kAllFields) {
      for (const auto& w : split_words(s.caption_text.of(f))) ds.vocab.add_word(w);
    }
  }
  for (auto& s : ds.samples) {
    s.captions.subject = tokenize(s.caption_text.subject, ds.vocab);
    s.captions.before = tokenize(s.caption_text.before, ds.vocab);
    s.captions.after = tokenize(s.caption_text.after, ds.vocab);
  }
  return ds;
}

std::size_t apply_pretrained_embeddings(Tensor& table, const Vocabulary& vocab,
                                        const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw std::runtime_error("bad embedding file " + path.string() + ": " + e.what());
  }
  const std::size_t width = doc.at("width").get<std::size_t>();
  if (width != table.cols()) {
    throw std::runtime_error("embedding file width " + std::to_string(width) +
                             " does not match table width " + std::to_string(table.cols()));
  }
  std::size_t replaced = 0;
  auto values = table.values_mut();
  for (const auto& [word, vec] : doc.at("embeddings").items()) {
    if (!vocab.contains(word)) continue;
    const int id = vocab.id_of(word);
    if (vec.size() != width) {
      throw std::runtime_error("embedding for '" + word + "' has " +
                               std::to_string(vec.size()) + " entries, expected " +
                               std::to_string(width));
    }
    for (std::size_t j = 0; j < width; ++j) {
      values[static_cast<std::size_t>(id) * width + j] = vec[j].get<double>();
    }
    ++replaced;
  }
  return replaced;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t role) {
  // splitmix64 over seed ^ golden-ratio-scaled role
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (role + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

// Template grammar: 12 distinct words, caption lengths 2..6.
const char* kNouns[] = {"dog", "cat", "bird", "car"};
const char* kVerbs[] = {"runs", "sits", "jumps", "stops"};
const char* kMods[] = {"quickly", "slowly", "around"};
const char* kTypeLexicon[] = {"change of action", "change of subject", "change of speed"};

struct TemplateCaptions {
  std::string subject, before, after;
};

// Captions are a pure function of the latent template id.
TemplateCaptions expand_template(std::uint64_t tid) {
  const std::size_t noun = tid % 4;
  const std::size_t v1 = (tid / 4) % 4;
  const std::size_t v2 = (tid / 16) % 4;
  const std::size_t m1 = (tid / 64) % 3;
  const std::size_t m2 = (tid / 192) % 3;
  const std::size_t variant = (tid / 576) % 2;
  TemplateCaptions c;
  c.subject = std::string("the ") + kNouns[noun];
  if (variant == 0) {
    c.before = std::string(kVerbs[v1]) + " " + kMods[m1];
    c.after = std::string(kVerbs[v2]) + " " + kMods[m2];
  } else {
    c.before = std::string("the ") + kNouns[noun] + " " + kVerbs[v1] + " " + kMods[m1];
    c.after = std::string(kVerbs[v2]) + " " + kMods[m2] + " " + kMods[m1];
  }
  return c;
}

constexpr std::uint64_t kNumTemplates = 4ULL * 4 * 4 * 3 * 3 * 2;  // 1152

json feature_rows(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> unit(0.0, 1.0);
  json out = json::array();
  for (std::size_t i = 0; i < rows; ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < cols; ++j) row.push_back(unit(rng));
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace

void synth_dataset(std::uint64_t seed, const SynthConfig& config,
                   const std::filesystem::path& out_path) {
  if (config.n < 1) throw std::invalid_argument("synth_dataset: n must be >= 1");

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset file: " + out_path.string());

  json header = {
      {"schema_version", 1},
      {"d_app", config.d_app},
      {"d_mot", config.d_mot},
      {"d_reg", config.d_reg},
      {"d_typ", config.d_typ},
      {"max_regions", config.k_regions},
      {"boundary_types", json::array({kTypeLexicon[0], kTypeLexicon[1], kTypeLexicon[2]})},
  };
  out << header.dump() << "\n";

  std::mt19937_64 rng(mix_seed(seed, 0xda7a));
  std::uniform_int_distribution<std::uint64_t> template_draw(0, kNumTemplates - 1);
  std::uniform_int_distribution<int> type_draw(0, 2);

  for (std::size_t i = 0; i < config.n; ++i) {
    const std::uint64_t tid = template_draw(rng);
    const TemplateCaptions caps = expand_template(tid);
    const int type_id = type_draw(rng);
    json rec = {
        {"boundary_id", "synth-" + std::to_string(seed) + "-" + std::to_string(i)},
        {"appearance", feature_rows(rng, config.t_app, config.d_app)},
        {"motion", feature_rows(rng, config.t_mot, config.d_mot)},
        {"regions", feature_rows(rng, config.k_regions, config.d_reg)},
        {"boundary_type", kTypeLexicon[type_id]},
        {"captions", {{"subject", caps.subject}, {"before", caps.before}, {"after", caps.after}}},
    };
    out << rec.dump() << "\n";
  }
}

}  // namespace dsc
