#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aov/error.hpp"
#include "aov/rng.hpp"

namespace aov {

enum class Polarity { anomalous, normal };

inline std::string polarity_name(Polarity p) {
  return p == Polarity::anomalous ? "anomalous" : "normal";
}

enum class Verdict { keep_normal, keep_anomalous, discard, pending };

struct CollectedItem {
  std::string id;
  std::string search_prompt;
  std::string class_name;
  Polarity hint = Polarity::normal;
  std::vector<double> embedding;
  std::optional<Verdict> verdict;
};

struct ClientError : DataError {
  using DataError::DataError;
};

// One swap point for every external service the collection pipeline touches:
// phrase generation, image search, and label adjudication. Mocks must be pure
// functions of (request, seed).
struct PipelineClient {
  virtual ~PipelineClient() = default;
  virtual std::vector<std::string> list_class_names(std::size_t count) = 0;
  virtual std::vector<std::string> phrases(const std::string& class_name, Polarity polarity,
                                           std::size_t count) = 0;
  virtual std::vector<std::string> search(const std::string& prompt, std::size_t count) = 0;
  virtual Verdict adjudicate(const CollectedItem& item) = 0;
};

enum class MockJudgeMode { echo_hint, invert_hint, discard_all };

struct MockClient final : PipelineClient {
  std::uint64_t seed = 1;
  MockJudgeMode mode = MockJudgeMode::echo_hint;
  std::size_t duplicate_every = 0;  // >0: every k-th phrase repeats the first

  std::vector<std::string> list_class_names(std::size_t count) override {
    std::vector<std::string> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back("object_" + std::to_string(i));
    return out;
  }

  std::vector<std::string> phrases(const std::string& class_name, Polarity polarity,
                                   std::size_t count) override {
    std::vector<std::string> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t k = duplicate_every > 0 && i % duplicate_every == 0 && i > 0 ? 0 : i;
      out.push_back(class_name + " with " + polarity_name(polarity) + " condition " +
                    std::to_string(seed % 10) + "_" + std::to_string(k));
    }
    return out;
  }

  std::vector<std::string> search(const std::string& prompt, std::size_t count) override {
    std::vector<std::string> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
      out.push_back("img://" + std::to_string(seed) + "/" + prompt + "/" + std::to_string(i));
    return out;
  }

  Verdict adjudicate(const CollectedItem& item) override {
    switch (mode) {
      case MockJudgeMode::discard_all:
        return Verdict::discard;
      case MockJudgeMode::invert_hint:
        return item.hint == Polarity::anomalous ? Verdict::keep_normal : Verdict::keep_anomalous;
      case MockJudgeMode::echo_hint:
      default:
        return item.hint == Polarity::anomalous ? Verdict::keep_anomalous : Verdict::keep_normal;
    }
  }
};

// Delegates everything, but adjudication fails on chosen item ids.
struct FailingClient final : PipelineClient {
  PipelineClient& inner;
  std::set<std::string> fail_ids;

  explicit FailingClient(PipelineClient& wrapped) : inner(wrapped) {}

  std::vector<std::string> list_class_names(std::size_t count) override {
    return inner.list_class_names(count);
  }
  std::vector<std::string> phrases(const std::string& class_name, Polarity polarity,
                                   std::size_t count) override {
    if (fail_ids.count("class:" + class_name))
      throw ClientError("phrase generation failed for " + class_name);
    return inner.phrases(class_name, polarity, count);
  }
  std::vector<std::string> search(const std::string& prompt, std::size_t count) override {
    return inner.search(prompt, count);
  }
  Verdict adjudicate(const CollectedItem& item) override {
    if (fail_ids.count(item.id)) throw ClientError("adjudication failed for " + item.id);
    return inner.adjudicate(item);
  }
};

namespace detail {

inline double embedding_norm(const std::vector<double>& v, std::size_t idx) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (!(n > 0.0))
    throw DataError("dedup: zero-norm embedding at index " + std::to_string(idx));
  return n;
}

}  // namespace detail

// Greedy scan in input order: drop an item iff its cosine similarity to some
// already-kept item is strictly above the threshold. First kept wins.
inline std::vector<std::size_t> dedup(const std::vector<std::vector<double>>& embeddings,
                                      double threshold = 0.99) {
  std::vector<std::size_t> kept;
  std::vector<double> norms(embeddings.size());
  for (std::size_t i = 0; i < embeddings.size(); ++i)
    norms[i] = detail::embedding_norm(embeddings[i], i);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (i > 0 && embeddings[i].size() != embeddings[0].size())
      throw ShapeError("dedup: embedding dimensions differ at index " + std::to_string(i));
    bool duplicate = false;
    for (std::size_t k : kept) {
      double dot = 0.0;
      for (std::size_t c = 0; c < embeddings[i].size(); ++c)
        dot += embeddings[i][c] * embeddings[k][c];
      if (dot / (norms[i] * norms[k]) > threshold) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) kept.push_back(i);
  }
  return kept;
}

// Per-class dedup: items are partitioned by class_name and deduplicated
// within each class only; returns kept indices in input order.
inline std::vector<std::size_t> dedup_per_class(const std::vector<CollectedItem>& items,
                                                double threshold = 0.99) {
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < items.size(); ++i) by_class[items[i].class_name].push_back(i);
  std::vector<char> keep(items.size(), 0);
  for (auto& [cls, idxs] : by_class) {
    std::vector<std::vector<double>> embs;
    embs.reserve(idxs.size());
    for (auto i : idxs) embs.push_back(items[i].embedding);
    for (auto local : dedup(embs, threshold)) keep[idxs[local]] = 1;
  }
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (keep[i]) kept.push_back(i);
  return kept;
}

struct LabelPartition {
  std::vector<CollectedItem> normal;
  std::vector<CollectedItem> anomalous;
  std::vector<CollectedItem> discarded;
  std::vector<CollectedItem> pending;

  std::size_t total() const {
    return normal.size() + anomalous.size() + discarded.size() + pending.size();
  }
};

// Every item is adjudicated independently; a client failure parks the item as
// pending rather than silently keeping it.
inline LabelPartition clean_labels(const std::vector<CollectedItem>& items,
                                   PipelineClient& judge) {
  LabelPartition out;
  for (const auto& item : items) {
    CollectedItem judged = item;
    Verdict v;
    try {
      v = judge.adjudicate(item);
    } catch (const std::exception&) {
      judged.verdict = Verdict::pending;
      out.pending.push_back(std::move(judged));
      continue;
    }
    judged.verdict = v;
    switch (v) {
      case Verdict::keep_normal:
        out.normal.push_back(std::move(judged));
        break;
      case Verdict::keep_anomalous:
        out.anomalous.push_back(std::move(judged));
        break;
      case Verdict::discard:
        out.discarded.push_back(std::move(judged));
        break;
      case Verdict::pending:
        out.pending.push_back(std::move(judged));
        break;
    }
  }
  return out;
}

struct PromptEntry {
  std::string class_name;
  Polarity polarity = Polarity::normal;
  std::string phrase;
};

struct PromptSet {
  std::vector<PromptEntry> entries;
  std::size_t duplicates_removed = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // (class, reason)
};

// Requests phrases_per_class phrases per polarity for every class; duplicates
// are removed within a class (across both polarities) and counted.
inline PromptSet build_prompt_set(const std::vector<std::string>& classes,
                                  PipelineClient& client, std::size_t phrases_per_class = 10) {
  if (phrases_per_class == 0) throw UsageError("phrases_per_class must be positive");
  PromptSet out;
  for (const auto& cls : classes) {
    std::vector<std::pair<Polarity, std::vector<std::string>>> generated;
    try {
      generated.emplace_back(Polarity::anomalous,
                             client.phrases(cls, Polarity::anomalous, phrases_per_class));
      generated.emplace_back(Polarity::normal,
                             client.phrases(cls, Polarity::normal, phrases_per_class));
    } catch (const std::exception& e) {
      out.failures.emplace_back(cls, e.what());
      continue;
    }
    std::set<std::string> seen;
    for (auto& [polarity, phrases] : generated) {
      for (auto& phrase : phrases) {
        if (!seen.insert(phrase).second) {
          out.duplicates_removed++;
          continue;
        }
        out.entries.push_back({cls, polarity, phrase});
      }
    }
  }
  return out;
}

}  // namespace aov
