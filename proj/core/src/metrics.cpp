#include "dsc/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace dsc {

namespace {

using nlohmann::json;

constexpr double kRougeBeta = 1.2;
constexpr int kMaxNgram = 4;

}  // namespace

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1]) {
        cur[j] = prev[j - 1] + 1;
      } else {
        cur[j] = std::max(prev[j], cur[j - 1]);
      }
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references) {
  if (references.empty()) throw std::invalid_argument("rouge_l: need at least one reference");
  for (const auto& r : references) {
    if (r.empty()) throw std::invalid_argument("rouge_l: empty reference");
  }
  if (candidate.empty()) return 0.0;
  const double beta2 = kRougeBeta * kRougeBeta;
  double best = 0.0;
  for (const auto& ref : references) {
    const double lcs = static_cast<double>(lcs_length(candidate, ref));
    if (lcs == 0.0) continue;
    const double recall = lcs / static_cast<double>(ref.size());
    const double precision = lcs / static_cast<double>(candidate.size());
    const double f = (1.0 + beta2) * recall * precision / (recall + beta2 * precision);
    best = std::max(best, f);
  }
  return best;
}

namespace {

// n-gram multiset per order; key is the space-joined token run.
using NgramCounts = std::unordered_map<std::string, double>;

std::array<NgramCounts, kMaxNgram> count_ngrams(const TokenSeq& tokens) {
  std::array<NgramCounts, kMaxNgram> counts;
  for (int n = 1; n <= kMaxNgram; ++n) {
    if (tokens.size() < static_cast<std::size_t>(n)) break;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string key = tokens[i];
      for (int j = 1; j < n; ++j) {
        key.push_back(' ');
        key += tokens[i + j];
      }
      counts[n - 1][key] += 1.0;
    }
  }
  return counts;
}

struct TfIdfVec {
  std::array<NgramCounts, kMaxNgram> weights;
  std::array<double, kMaxNgram> norm{};
  double length = 0.0;  // unigram count
};

TfIdfVec to_tfidf(const std::array<NgramCounts, kMaxNgram>& counts,
                  const NgramCounts& doc_freq, double log_corpus_size) {
  TfIdfVec vec;
  for (int n = 0; n < kMaxNgram; ++n) {
    double norm_sq = 0.0;
    for (const auto& [ngram, tf] : counts[n]) {
      auto df_it = doc_freq.find(ngram);
      const double df = std::log(std::max(1.0, df_it == doc_freq.end() ? 0.0 : df_it->second));
      const double w = tf * (log_corpus_size - df);
      vec.weights[n].emplace(ngram, w);
      norm_sq += w * w;
      if (n == 0) vec.length += tf;
    }
    vec.norm[n] = std::sqrt(norm_sq);
  }
  return vec;
}

// Clipped cosine per n-gram order with the Gaussian length penalty.
std::array<double, kMaxNgram> cider_similarity(const TfIdfVec& hyp, const TfIdfVec& ref,
                                               double sigma) {
  std::array<double, kMaxNgram> val{};
  const double delta = hyp.length - ref.length;
  const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
  for (int n = 0; n < kMaxNgram; ++n) {
    double dot = 0.0;
    for (const auto& [ngram, w_hyp] : hyp.weights[n]) {
      auto it = ref.weights[n].find(ngram);
      if (it != ref.weights[n].end()) dot += std::min(w_hyp, it->second) * it->second;
    }
    if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) dot /= hyp.norm[n] * ref.norm[n];
    val[n] = dot * penalty;
  }
  return val;
}

}  // namespace

CiderScores cider_d(const std::vector<TokenSeq>& candidates,
                    const std::vector<std::vector<TokenSeq>>& references, double sigma) {
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("cider_d: " + std::to_string(candidates.size()) +
                                " candidates vs " + std::to_string(references.size()) +
                                " reference sets");
  }
  if (candidates.size() < 2) {
    throw std::invalid_argument("cider_d: corpus must contain at least 2 samples for idf");
  }
  for (const auto& refs : references) {
    if (refs.empty()) throw std::invalid_argument("cider_d: sample without references");
  }

  // Document frequency: number of samples whose reference set contains the n-gram.
  NgramCounts doc_freq;
  std::vector<std::vector<std::array<NgramCounts, kMaxNgram>>> ref_counts(references.size());
  for (std::size_t s = 0; s < references.size(); ++s) {
    std::unordered_set<std::string> seen;
    for (const auto& ref : references[s]) {
      ref_counts[s].push_back(count_ngrams(ref));
      for (const auto& per_n : ref_counts[s].back()) {
        for (const auto& [ngram, tf] : per_n) seen.insert(ngram);
      }
    }
    for (const auto& ngram : seen) doc_freq[ngram] += 1.0;
  }
  const double log_corpus_size = std::log(static_cast<double>(references.size()));

  CiderScores out;
  out.per_sample.reserve(candidates.size());
  double total = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const TfIdfVec hyp = to_tfidf(count_ngrams(candidates[s]), doc_freq, log_corpus_size);
    std::array<double, kMaxNgram> acc{};
    for (const auto& counts : ref_counts[s]) {
      const TfIdfVec ref = to_tfidf(counts, doc_freq, log_corpus_size);
      const auto val = cider_similarity(hyp, ref, sigma);
      for (int n = 0; n < kMaxNgram; ++n) acc[n] += val[n];
    }
    double score = 0.0;
    for (int n = 0; n < kMaxNgram; ++n) score += acc[n];
    score /= static_cast<double>(kMaxNgram);
    score /= static_cast<double>(references[s].size());
    score *= 10.0;
    out.per_sample.push_back(score);
    total += score;
  }
  out.mean = total / static_cast<double>(candidates.size());
  return out;
}

const std::vector<std::string>& ReferenceEntry::of(CaptionField f) const {
  switch (f) {
    case CaptionField::kSubject: return subject;
    case CaptionField::kBefore: return before;
    case CaptionField::kAfter: return after;
  }
  throw std::logic_error("ReferenceEntry::of: bad field");
}

namespace {

void field_set(FieldScores& s, CaptionField f, double v) {
  switch (f) {
    case CaptionField::kSubject: s.subject = v; break;
    case CaptionField::kBefore: s.before = v; break;
    case CaptionField::kAfter: s.after = v; break;
  }
}

}  // namespace

EvalReport triplet_average(const PredictionSet& predictions, const ReferenceSet& references) {
  std::vector<std::string> missing;
  for (const auto& [id, refs] : references) {
    if (!predictions.count(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw std::invalid_argument("evaluate: missing predictions for reference ids: " + ids);
  }
  for (const auto& [id, pred] : predictions) {
    if (!references.count(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw std::invalid_argument("evaluate: predictions without references: " + ids);
  }
  if (references.empty()) throw std::invalid_argument("evaluate: empty corpus");

  EvalReport report;
  report.corpus_size = references.size();
  report.per_sample.resize(references.size());
  std::size_t idx = 0;
  for (const auto& [id, refs] : references) {
    report.per_sample[idx++].boundary_id = id;
  }

  for (CaptionField field : kAllFields) {
    std::vector<TokenSeq> cands;
    std::vector<std::vector<TokenSeq>> refs;
    cands.reserve(references.size());
    refs.reserve(references.size());
    for (const auto& [id, entry] : references) {
      cands.push_back(split_words(predictions.at(id).of(field)));
      std::vector<TokenSeq> ref_tokens;
      for (const auto& r : entry.of(field)) ref_tokens.push_back(split_words(r));
      refs.push_back(std::move(ref_tokens));
    }

    double rouge_sum = 0.0;
    for (std::size_t s = 0; s < cands.size(); ++s) {
      const double r = rouge_l(cands[s], refs[s]);
      field_set(report.per_sample[s].rouge_l, field, r);
      rouge_sum += r;
    }
    field_set(report.rouge_l, field, rouge_sum / static_cast<double>(cands.size()));

    const CiderScores cider = cider_d(cands, refs);
    for (std::size_t s = 0; s < cands.size(); ++s) {
      field_set(report.per_sample[s].cider_d, field, cider.per_sample[s]);
    }
    field_set(report.cider_d, field, cider.mean);
  }

  report.rouge_l_average = report.rouge_l.field_average();
  report.cider_d_average = report.cider_d.field_average();
  report.overall_average = (report.rouge_l_average + report.cider_d_average) / 2.0;
  return report;
}

PredictionSet load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open predictions file: " + path.string());
  PredictionSet preds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
      CaptionText text;
      text.subject = rec.at("subject").get<std::string>();
      text.before = rec.at("before").get<std::string>();
      text.after = rec.at("after").get<std::string>();
      preds.emplace(rec.at("boundary_id").get<std::string>(), std::move(text));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": bad prediction line: " + e.what());
    }
  }
  return preds;
}

ReferenceSet load_references(const std::filesystem::path& path) {
  {
    // A dataset file starts with a schema header; promote its captions.
    std::ifstream probe(path);
    if (!probe) throw std::runtime_error("cannot open references file: " + path.string());
    std::string first;
    std::getline(probe, first);
    json header = json::parse(first, nullptr, false);
    if (header.is_object() && header.contains("schema_version")) {
      Dataset ds = load_dataset(path);
      ReferenceSet refs;
      for (const auto& s : ds.samples) {
        ReferenceEntry entry;
        entry.subject = {s.caption_text.subject};
        entry.before = {s.caption_text.before};
        entry.after = {s.caption_text.after};
        refs.emplace(s.boundary_id, std::move(entry));
      }
      return refs;
    }
  }
  std::ifstream in(path);
  ReferenceSet refs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json rec = json::parse(line);
      const auto& caps = rec.at("captions");
      ReferenceEntry entry;
      entry.subject = caps.at("subject").get<std::vector<std::string>>();
      entry.before = caps.at("before").get<std::vector<std::string>>();
      entry.after = caps.at("after").get<std::vector<std::string>>();
      refs.emplace(rec.at("boundary_id").get<std::string>(), std::move(entry));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": bad reference line: " + e.what());
    }
  }
  return refs;
}

void write_predictions(const std::filesystem::path& path, const PredictionSet& predictions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write predictions file: " + path.string());
  for (const auto& [id, text] : predictions) {
    json rec = {{"boundary_id", id},
                {"subject", text.subject},
                {"before", text.before},
                {"after", text.after}};
    out << rec.dump() << "\n";
  }
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  json per_sample = json::array();
  for (const auto& s : report.per_sample) {
    per_sample.push_back({{"boundary_id", s.boundary_id},
                          {"rouge_l",
                           {{"subject", s.rouge_l.subject},
                            {"before", s.rouge_l.before},
                            {"after", s.rouge_l.after}}},
                          {"cider_d",
                           {{"subject", s.cider_d.subject},
                            {"before", s.cider_d.before},
                            {"after", s.cider_d.after}}}});
  }
  json doc = {
      {"corpus_size", report.corpus_size},
      {"rouge_l",
       {{"subject", report.rouge_l.subject},
        {"before", report.rouge_l.before},
        {"after", report.rouge_l.after},
        {"field_average", report.rouge_l_average}}},
      {"cider_d",
       {{"subject", report.cider_d.subject},
        {"before", report.cider_d.before},
        {"after", report.cider_d.after},
        {"field_average", report.cider_d_average}}},
      {"overall_average_of_metric_averages", report.overall_average},
      {"per_sample", std::move(per_sample)},
  };
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report file: " + path.string());
  out << doc.dump(2) << "\n";
}

}  // namespace dsc
