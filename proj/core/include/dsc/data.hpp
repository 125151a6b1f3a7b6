#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dsc/tensor.hpp"

namespace dsc {

/// Closed token inventory. Ids 0..6 are reserved: padding, sequence start and
/// end, the unknown-word bucket, and the three caption-field tags. Word ids
/// follow in first-appearance order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSubjectTag = 4;
  static constexpr int kBeforeTag = 5;
  static constexpr int kAfterTag = 6;
  static constexpr int kNumReserved = 7;

  Vocabulary();

  int add_word(const std::string& word);      // idempotent, returns the id
  int id_of(std::string_view word) const;     // kUnk when absent
  bool contains(std::string_view word) const;
  const std::string& token_text(int id) const;
  std::size_t size() const { return tokens_.size(); }
  static bool is_reserved(int id) { return id >= 0 && id < kNumReserved; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

enum class CaptionField { kSubject, kBefore, kAfter };

constexpr std::array<CaptionField, 3> kAllFields = {
    CaptionField::kSubject, CaptionField::kBefore, CaptionField::kAfter};

int field_tag_id(CaptionField field);
std::string_view field_name(CaptionField field);

/// Lowercase, split on whitespace and punctuation; punctuation is dropped.
std::vector<std::string> split_words(std::string_view text);
std::vector<int> encode_words(const std::vector<std::string>& words, const Vocabulary& vocab);
std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

/// Reference captions as token-id sequences, one per field.
struct CaptionTriplet {
  std::vector<int> subject;
  std::vector<int> before;
  std::vector<int> after;

  const std::vector<int>& of(CaptionField f) const;
};

struct CaptionText {
  std::string subject;
  std::string before;
  std::string after;

  const std::string& of(CaptionField f) const;
};

/// One video boundary: multi-granularity features standing in for the frozen
/// backbone outputs, the boundary-type id, and its reference captions.
struct BoundarySample {
  std::string boundary_id;
  Tensor appearance;  // T_a x d_app frame features, 2 fps convention
  Tensor motion;      // T_m x d_mot clip features
  Tensor regions;     // K x d_reg detected-region features, K <= max_regions
  int boundary_type_id = 0;
  std::string boundary_type;
  CaptionText caption_text;
  CaptionTriplet captions;  // encoded against the dataset vocabulary
};

struct DatasetHeader {
  int schema_version = 1;
  std::size_t d_app = 0;
  std::size_t d_mot = 0;
  std::size_t d_reg = 0;
  std::size_t d_typ = 0;
  std::size_t max_regions = 10;
  std::vector<std::string> boundary_types;
};

struct Dataset {
  DatasetHeader header;
  std::vector<BoundarySample> samples;
  Vocabulary vocab;  // reserved tokens + caption words in first-appearance order
};

/// Parse a JSON Lines dataset file (header line, then one sample per line).
/// Throws with the offending line number or sample id on malformed input.
Dataset load_dataset(const std::filesystem::path& path);

struct SynthConfig {
  std::size_t n = 8;
  std::size_t t_app = 4;
  std::size_t t_mot = 3;
  std::size_t k_regions = 5;
  std::size_t d_app = 16;
  std::size_t d_mot = 12;
  std::size_t d_reg = 20;
  std::size_t d_typ = 8;
};

/// Deterministically generate a dataset file: unit-normal features, captions
/// expanded from a small template grammar keyed by a per-boundary latent id.
void synth_dataset(std::uint64_t seed, const SynthConfig& config,
                   const std::filesystem::path& out_path);

/// Optional pretrained-embedding hook. The file is a JSON object
/// {"width": d_emb, "embeddings": {"word": [d_emb floats], ...}}; rows of
/// vocabulary words present in the file are overwritten, everything else
/// keeps its current values. Returns the number of rows replaced.
std::size_t apply_pretrained_embeddings(Tensor& table, const Vocabulary& vocab,
                                        const std::filesystem::path& path);

/// seed -> derived seed for a named role; keeps independent streams decoupled.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t role);

}  // namespace dsc
