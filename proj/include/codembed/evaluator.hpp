#pragma once

// Exact cosine retrieval, ranking metrics, per-width evaluation reports and
// the pooling ablation runner.

#include <codembed/dataset.hpp>
#include <codembed/model.hpp>
#include <codembed/trainer.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace codembed {

/// Rows of unit-norm embeddings with their record ids and tasks.
struct EmbeddingSet {
  std::vector<std::string> ids;
  std::vector<TaskType> tasks;
  Matrix<double> vectors;
};

struct ScoredDoc {
  std::string doc_id;
  double score = 0;
};

/// Scores non-increasing; equal scores ordered by ascending doc id.
struct RankedList {
  std::string query_id;
  std::vector<ScoredDoc> docs;
};

using Judgments = std::map<std::string, int>;

/// Leading `dims` columns of each raw row, renormalized to unit length.
Matrix<double> truncate_normalize(const Matrix<double>& raw, int dims);

/// Rows scaled to unit length without truncation.
Matrix<double> normalize_embeddings(const Matrix<double>& raw);

/// Raw (un-normalized) full-width embeddings of the queries and the corpus.
struct RawEmbeddings {
  EmbeddingSet queries;
  EmbeddingSet corpus;
};

/// With role_aware, queries take query prefixes and documents document
/// prefixes; otherwise both sides use the query prefix.
template <typename Scalar>
RawEmbeddings embed_raw(const RetrievalDataset& ds, const EmbeddingModel<Scalar>& model, bool role_aware = true);

/// Prefixed, embedded, truncated to `dims` and renormalized.
template <typename Scalar>
std::pair<EmbeddingSet, EmbeddingSet> embed_corpus(const RetrievalDataset& ds, const EmbeddingModel<Scalar>& model,
                                                   bool role_aware, int dims);

/// Full Q * D^T scan; k larger than the corpus returns the full ranking.
std::vector<RankedList> search_exact(const EmbeddingSet& queries, const EmbeddingSet& corpus, std::size_t k);

/// Gain (2^grade - 1) / log2(rank + 1), normalized by the ideal DCG at k.
double ndcg_at_k(const RankedList& ranked, const Judgments& qrels, std::size_t k);
/// Reciprocal rank of the first document with grade > 0 within k, else 0.
double mrr_at_k(const RankedList& ranked, const Judgments& qrels, std::size_t k);
/// Fraction of documents with grade > 0 that appear within the top k.
double recall_at_k(const RankedList& ranked, const Judgments& qrels, std::size_t k);

struct QueryMetrics {
  std::string query_id;
  TaskType task = TaskType::NL2Code;
  double ndcg10 = 0, mrr10 = 0, recall1 = 0, recall10 = 0;
};

struct MetricSummary {
  double ndcg10 = 0, mrr10 = 0, recall1 = 0, recall10 = 0;
  std::size_t queries = 0;
};

struct MetricReport {
  int dims = 0;
  std::string pooling;
  std::string model_id;
  std::vector<QueryMetrics> per_query;
  std::map<TaskType, MetricSummary> per_task;
  MetricSummary micro;  // mean over queries
  MetricSummary macro;  // mean over task types
  std::size_t excluded_queries = 0;  // queries without judgments
};

/// Metrics of ranked lists against judgments; queries absent from qrels are
/// counted in excluded_queries.
MetricReport score_rankings(const std::vector<RankedList>& rankings, const std::map<std::string, TaskType>& query_tasks,
                            const std::map<std::string, Judgments>& qrels);

struct EvalOptions {
  bool role_aware = true;
  bool truncate = true;  // false: normalize full-width vectors directly (dims must equal d_model)
  std::string model_id;
};

/// Embeds once at full width, then truncates, searches and scores per width.
template <typename Scalar>
std::vector<MetricReport> run_eval(const RetrievalDataset& ds, const EmbeddingModel<Scalar>& model,
                                   const std::vector<int>& dims, const EvalOptions& options = {});

/// Aligned text table: one block per width with per-task and average rows.
std::string format_report_table(const std::vector<MetricReport>& reports);
/// One record per query plus one summary record per width.
std::string format_report_jsonl(const std::vector<MetricReport>& reports);

struct AblationArm {
  PoolingKind kind = PoolingKind::LastToken;
  FitResult fit;
  MetricReport trained;
  MetricReport untrained;
};

struct AblationResult {
  std::vector<AblationArm> arms;
  std::string table;  // aligned text: benchmark column + one column per arm
  std::string csv;
  std::string baseline_csv;
};

class AblationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trains one model per pooling kind from the same seed, data and
/// hyperparameters (only the pooling kind differs), then evaluates each
/// trained model and its untrained initialization at full width on the
/// held-out split. Arm outputs go to out_dir/<kind>/.
AblationResult run_ablation(const std::vector<PairRecord>& train, const RetrievalDataset& heldout, TrainConfig base,
                            const std::vector<PoolingKind>& kinds, const std::filesystem::path& out_dir,
                            const FitOptions& options = {});

}  // namespace codembed
