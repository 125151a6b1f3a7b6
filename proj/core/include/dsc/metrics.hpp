#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dsc/data.hpp"

namespace dsc {

using TokenSeq = std::vector<std::string>;

/// Longest common subsequence length (dynamic programming).
std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b);

/// LCS-based F-measure with beta = 1.2, maximized over references.
/// An empty candidate scores 0.
double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references);

struct CiderScores {
  std::vector<double> per_sample;
  double mean = 0.0;
};

/// CIDEr-D over n-grams n=1..4: clipped tf-idf cosine per n with a Gaussian
/// length penalty (sigma = 6), averaged over references and n, scaled by 10.
/// Document frequencies come from the reference sets of the given corpus,
/// which must contain at least two samples.
CiderScores cider_d(const std::vector<TokenSeq>& candidates,
                    const std::vector<std::vector<TokenSeq>>& references,
                    double sigma = 6.0);

/// Reference captions per boundary: one list of strings per field.
struct ReferenceEntry {
  std::vector<std::string> subject;
  std::vector<std::string> before;
  std::vector<std::string> after;

  const std::vector<std::string>& of(CaptionField f) const;
};

using PredictionSet = std::map<std::string, CaptionText>;   // boundary_id -> captions
using ReferenceSet = std::map<std::string, ReferenceEntry>; // boundary_id -> references

struct FieldScores {
  double subject = 0.0;
  double before = 0.0;
  double after = 0.0;
  double field_average() const { return (subject + before + after) / 3.0; }
};

struct SampleScores {
  std::string boundary_id;
  FieldScores rouge_l;
  FieldScores cider_d;
};

/// Per-metric per-field scores plus both "AVG" groupings: the mean over the
/// three fields for each metric, and the overall mean of those per-metric
/// averages.
struct EvalReport {
  std::size_t corpus_size = 0;
  FieldScores rouge_l;
  FieldScores cider_d;
  double rouge_l_average = 0.0;
  double cider_d_average = 0.0;
  double overall_average = 0.0;
  std::vector<SampleScores> per_sample;
};

/// Every reference id must have a prediction and vice versa; each field is
/// scored as an independent corpus and averaged.
EvalReport triplet_average(const PredictionSet& predictions, const ReferenceSet& references);

PredictionSet load_predictions(const std::filesystem::path& path);
/// Accepts either the reference JSONL format (captions as string lists) or a
/// dataset file, whose single reference captions are promoted to lists.
ReferenceSet load_references(const std::filesystem::path& path);
void write_predictions(const std::filesystem::path& path, const PredictionSet& predictions);
void write_report(const std::filesystem::path& path, const EvalReport& report);

}  // namespace dsc
