#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "aov/error.hpp"
#include "aov/expert.hpp"
#include "aov/feature_io.hpp"
#include "aov/ltfm.hpp"
#include "aov/params.hpp"

namespace aov {

// Probability that a random positive outranks a random negative, ties 0.5.
// Midrank arithmetic stays in exactly representable multiples of 0.5, so the
// result is bit-identical to brute-force pairwise counting.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const std::size_t n = scores.size();
  if (n == 0 || labels.size() != n)
    throw ShapeError("auroc: scores and labels must be equal-length and non-empty");
  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("auroc: labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw DataError("auroc: both classes required, got " + std::to_string(n_pos) +
                    " positives out of " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1) rank_sum_pos += midrank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline bool word_boundary_char(char c) {
  return !(std::isalnum(static_cast<unsigned char>(c)) || c == '_');
}

// Case-sensitive standalone-word match: "Yes" counts, "Yesterday" does not.
inline bool contains_standalone_yes(const std::string& text) {
  const std::string word = "Yes";
  std::size_t pos = 0;
  while ((pos = text.find(word, pos)) != std::string::npos) {
    const bool left_ok = pos == 0 || word_boundary_char(text[pos - 1]);
    const std::size_t end = pos + word.size();
    const bool right_ok = end == text.size() || word_boundary_char(text[end]);
    if (left_ok && right_ok) return true;
    pos += 1;
  }
  return false;
}

struct DetectionMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  bool precision_defined = true;
  bool recall_defined = true;
  bool f1_defined = true;
};

inline DetectionMetrics detection_metrics(const std::vector<std::string>& answers,
                                          const std::vector<int>& labels) {
  const std::size_t n = answers.size();
  if (n == 0 || labels.size() != n)
    throw ShapeError("detection_metrics: answers and labels must be equal-length and non-empty");
  DetectionMetrics m;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw DataError("detection_metrics: labels must be 0 or 1");
    const bool pred = contains_standalone_yes(answers[i]);
    if (pred && labels[i] == 1) m.tp++;
    else if (pred && labels[i] == 0) m.fp++;
    else if (!pred && labels[i] == 1) m.fn++;
    else m.tn++;
  }
  m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(n);
  if (m.tp + m.fp == 0) {
    m.precision_defined = false;
  } else {
    m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  }
  if (m.tp + m.fn == 0) {
    m.recall_defined = false;
  } else {
    m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  }
  if (m.precision_defined && m.recall_defined && m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.f1 = 0.0;
    m.f1_defined = false;
  }
  return m;
}

namespace detail {

inline std::vector<std::string> lower_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

// LCS F-score over lowercased whitespace tokens, harmonic mean of P and R.
inline double rouge_l(const std::string& candidate, const std::string& reference) {
  auto c = detail::lower_tokens(candidate);
  auto r = detail::lower_tokens(reference);
  if (c.empty() && r.empty()) return 1.0;
  if (c.empty() || r.empty()) return 0.0;
  const double lcs = static_cast<double>(detail::lcs_length(c, r));
  const double p = lcs / static_cast<double>(c.size());
  const double rec = lcs / static_cast<double>(r.size());
  if (p + rec == 0.0) return 0.0;
  return 2.0 * p * rec / (p + rec);
}

// g x g binary PGM (P5), pixel = round-half-up of 255*m.
template <typename Real>
void export_map(const SignificanceMap<Real>& sig, std::size_t crop, const std::string& path) {
  if (crop >= sig.averaged.size())
    throw UsageError("export_map: crop " + std::to_string(crop) + " out of range, have " +
                     std::to_string(sig.averaged.size()));
  const auto& m = sig.averaged[crop]->data;
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(m.size()))));
  if (g * g != m.size()) throw ShapeError("export_map: map length is not a perfect square");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("export_map: cannot open " + path);
  os << "P5\n" << g << " " << g << "\n255\n";
  for (Real v : m) {
    double px = std::floor(255.0 * static_cast<double>(v) + 0.5);
    px = std::min(255.0, std::max(0.0, px));
    os.put(static_cast<char>(static_cast<unsigned char>(px)));
  }
  if (!os) throw DataError("export_map: write failed for " + path);
}

inline std::size_t eval_thread_count(std::size_t n_items) {
  std::size_t n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("AOV_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw UsageError("AOV_THREADS must be a positive integer, got \"" + std::string(env) + "\"");
    n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, n_items));
}

// Scores every bundle with a fixed-partition thread map; output order is the
// dataset order regardless of thread count.
template <typename Real>
std::vector<double> score_dataset(const std::vector<FeatureBundle>& dataset,
                                  const ExpertParams<Real>& params) {
  std::vector<double> scores(dataset.size(), 0.0);
  if (dataset.empty()) return scores;
  const std::size_t n_threads = eval_thread_count(dataset.size());
  std::vector<std::thread> workers;
  std::vector<std::string> errors(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) {
    workers.emplace_back([&, t]() {
      try {
        for (std::size_t i = t; i < dataset.size(); i += n_threads)
          scores[i] = static_cast<double>(score_bundle(dataset[i], params));
      } catch (const std::exception& e) {
        errors[t] = e.what();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& e : errors)
    if (!e.empty()) throw NumericError("score_dataset: " + e);
  return scores;
}

struct BenchmarkReport {
  std::vector<std::pair<std::uint32_t, double>> per_class;
  double mean_auroc = 0.0;
  std::size_t n_images = 0;
};

inline nlohmann::json benchmark_to_json(const BenchmarkReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (auto& [cid, a] : r.per_class) classes.push_back({{"class", cid}, {"auroc", a}});
  return nlohmann::json{
      {"per_class", classes}, {"mean_auroc", r.mean_auroc}, {"n_images", r.n_images}};
}

inline std::string benchmark_to_text(const BenchmarkReport& r) {
  std::ostringstream os;
  char line[64];
  std::snprintf(line, sizeof(line), "%-8s %10s\n", "class", "auroc");
  os << line;
  for (auto& [cid, a] : r.per_class) {
    std::snprintf(line, sizeof(line), "%-8u %10.4f\n", cid, a);
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-8s %10.4f\n", "mean", r.mean_auroc);
  os << line;
  return os.str();
}

template <typename Real>
BenchmarkReport run_benchmark(const std::vector<FeatureBundle>& dataset,
                              const ExpertParams<Real>& params) {
  if (dataset.empty()) throw DataError("run_benchmark: empty dataset");
  auto scores = score_dataset(dataset, params);
  std::map<std::uint32_t, std::pair<std::vector<double>, std::vector<int>>> by_class;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto& bucket = by_class[dataset[i].class_id];
    bucket.first.push_back(scores[i]);
    bucket.second.push_back(static_cast<int>(dataset[i].label));
  }
  BenchmarkReport report;
  report.n_images = dataset.size();
  double sum = 0.0;
  for (auto& [cid, bucket] : by_class) {
    double a;
    try {
      a = auroc(bucket.first, bucket.second);
    } catch (const DataError& e) {
      throw DataError("run_benchmark: class " + std::to_string(cid) + ": " + e.what());
    }
    report.per_class.emplace_back(cid, a);
    sum += a;
  }
  report.mean_auroc = sum / static_cast<double>(report.per_class.size());
  return report;
}

// Reserved hook for similarity judges run outside this process; the null
// implementation reports "no judgement" for every pair.
struct ExternalJudge {
  virtual ~ExternalJudge() = default;
  virtual std::optional<double> judge(const std::string& candidate,
                                      const std::string& reference) = 0;
};

struct NullJudge final : ExternalJudge {
  std::optional<double> judge(const std::string&, const std::string&) override {
    return std::nullopt;
  }
};

struct AnswerRecord {
  std::string answer;
  int label = 0;
  std::string reference;
};

inline std::vector<AnswerRecord> read_answer_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open answer manifest " + path);
  std::vector<AnswerRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
    }
    AnswerRecord rec;
    if (!j.contains("answer") || !j.contains("label"))
      throw DataError(path + ":" + std::to_string(lineno) + ": need \"answer\" and \"label\"");
    rec.answer = j.at("answer").get<std::string>();
    const auto label = j.at("label").get<long long>();
    if (label != 0 && label != 1)
      throw DataError(path + ":" + std::to_string(lineno) + ": label must be 0 or 1");
    rec.label = static_cast<int>(label);
    if (j.contains("reference")) rec.reference = j.at("reference").get<std::string>();
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace aov
