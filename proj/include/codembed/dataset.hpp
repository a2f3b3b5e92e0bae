#pragma once

// Training pairs, retrieval datasets, batching and the planted-pair corpus.

#include <codembed/prefixes.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace codembed {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PairRecord {
  std::string id;
  std::string query;
  std::string document;
  TaskType task = TaskType::NL2Code;

  bool operator==(const PairRecord&) const = default;
};

struct TrainingBatch {
  std::vector<PairRecord> pairs;
  std::size_t size() const { return pairs.size(); }
};

struct TextRecord {
  std::string text;
  TaskType task = TaskType::NL2Code;

  bool operator==(const TextRecord&) const = default;
};

/// Corpus, queries and graded relevance judgments. std::map keeps every
/// iteration in ascending id order.
struct RetrievalDataset {
  std::map<std::string, TextRecord> corpus;
  std::map<std::string, TextRecord> queries;
  std::map<std::string, std::map<std::string, int>> qrels;

  /// Throws DatasetError if a judgment references an unknown id or has a
  /// negative grade.
  void validate() const;
  bool operator==(const RetrievalDataset&) const = default;
};

/// Line-delimited JSON objects with keys id, query, document, task. All
/// problems in the file are collected into one DatasetError, each tagged
/// with its line number.
std::vector<PairRecord> load_pairs(const std::filesystem::path& path);
std::vector<PairRecord> parse_pairs(const std::string& contents, const std::string& source = "<memory>");
void write_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& pairs);

/// Reads corpus.jsonl, queries.jsonl and qrels.tsv from `dir`.
RetrievalDataset load_retrieval_dataset(const std::filesystem::path& dir);
void write_retrieval_dataset(const std::filesystem::path& dir, const RetrievalDataset& ds);

/// Shuffles deterministically from (seed, epoch), then cuts consecutive
/// batches of n; the short remainder is dropped.
std::vector<TrainingBatch> make_batches(const std::vector<PairRecord>& pairs, std::size_t n,
                                        std::uint64_t seed, std::uint64_t epoch);

struct PlantedOptions {
  std::size_t heldout_queries = 0;  // 0: max(16, n_pairs / 4)
  int marker_length = 6;
  int min_filler = 3;
  int max_filler = 10;
};

struct PlantedCorpus {
  std::vector<PairRecord> train;
  RetrievalDataset heldout;
};

/// Synthetic pairs whose query and document share a unique marker drawn
/// from an alphabet (uppercase letters and digits) disjoint from the
/// lowercase filler around it, so a marker occurs in exactly one pair.
/// Tasks rotate round-robin. The held-out split uses fresh markers and one
/// relevant document per query.
PlantedCorpus generate_planted(std::size_t n_pairs, std::uint64_t seed, const PlantedOptions& options = {});

}  // namespace codembed
