#include <codembed/checkpoint.hpp>
#include <codembed/evaluator.hpp>
#include <codembed/io.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include <json.hpp>

namespace codembed {

namespace fs = std::filesystem;

Matrix<double> normalize_embeddings(const Matrix<double>& raw) {
  Matrix<double> out(raw.rows(), raw.cols());
  for (Index i = 0; i < raw.rows(); ++i) {
    const double n = raw.row(i).norm();
    if (!(n > 0)) throw NormalizationError("normalize: row " + std::to_string(i) + " has zero norm", i);
    out.row(i) = raw.row(i) / n;
  }
  return out;
}

Matrix<double> truncate_normalize(const Matrix<double>& raw, int dims) {
  if (dims < 1 || dims > raw.cols()) {
    throw DimensionError("truncate: width " + std::to_string(dims) + " outside [1, " + std::to_string(raw.cols()) + "]");
  }
  const Matrix<double> head = raw.leftCols(dims);
  return normalize_embeddings(head);
}

template <typename Scalar>
RawEmbeddings embed_raw(const RetrievalDataset& ds, const EmbeddingModel<Scalar>& model, bool role_aware) {
  auto encode = [&](const std::map<std::string, TextRecord>& records, Role role) {
    EmbeddingSet set;
    std::vector<EncodeInput> inputs;
    for (const auto& [id, rec] : records) {
      set.ids.push_back(id);
      set.tasks.push_back(rec.task);
      inputs.push_back({rec.task, role_aware ? role : Role::Query, rec.text});
    }
    set.vectors = model.embed_raw(inputs).template cast<double>();
    return set;
  };
  return RawEmbeddings{encode(ds.queries, Role::Query), encode(ds.corpus, Role::Document)};
}

template <typename Scalar>
std::pair<EmbeddingSet, EmbeddingSet> embed_corpus(const RetrievalDataset& ds, const EmbeddingModel<Scalar>& model,
                                                   bool role_aware, int dims) {
  if (dims < 1 || dims > model.d_model()) {
    throw DimensionError("embed_corpus: dims " + std::to_string(dims) + " exceeds d_model " +
                         std::to_string(model.d_model()));
  }
  RawEmbeddings raw = embed_raw(ds, model, role_aware);
  raw.queries.vectors = truncate_normalize(raw.queries.vectors, dims);
  raw.corpus.vectors = truncate_normalize(raw.corpus.vectors, dims);
  return {std::move(raw.queries), std::move(raw.corpus)};
}

std::vector<RankedList> search_exact(const EmbeddingSet& queries, const EmbeddingSet& corpus, std::size_t k) {
  if (k < 1) throw std::invalid_argument("search_exact: k must be >= 1");
  if (queries.vectors.cols() != corpus.vectors.cols()) {
    throw DimensionError("search_exact: query width " + std::to_string(queries.vectors.cols()) +
                         " differs from corpus width " + std::to_string(corpus.vectors.cols()));
  }
  const Matrix<double> scores = queries.vectors * corpus.vectors.transpose();
  const std::size_t n_docs = corpus.ids.size();
  const std::size_t keep = std::min(k, n_docs);
  std::vector<RankedList> out(queries.ids.size());
  std::vector<std::size_t> order(n_docs);
  for (std::size_t q = 0; q < queries.ids.size(); ++q) {
    for (std::size_t j = 0; j < n_docs; ++j) order[j] = j;
    auto better = [&](std::size_t a, std::size_t b) {
      const double sa = scores(static_cast<Index>(q), static_cast<Index>(a));
      const double sb = scores(static_cast<Index>(q), static_cast<Index>(b));
      if (sa != sb) return sa > sb;
      return corpus.ids[a] < corpus.ids[b];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
    out[q].query_id = queries.ids[q];
    out[q].docs.reserve(keep);
    for (std::size_t r = 0; r < keep; ++r) {
      out[q].docs.push_back({corpus.ids[order[r]], scores(static_cast<Index>(q), static_cast<Index>(order[r]))});
    }
  }
  return out;
}

namespace {

int grade_of(const Judgments& qrels, const std::string& doc) {
  auto it = qrels.find(doc);
  return it == qrels.end() ? 0 : it->second;
}

std::size_t relevant_count(const Judgments& qrels) {
  return static_cast<std::size_t>(std::count_if(qrels.begin(), qrels.end(), [](const auto& kv) { return kv.second > 0; }));
}

}  // namespace

double ndcg_at_k(const RankedList& ranked, const Judgments& qrels, std::size_t k) {
  double dcg = 0;
  for (std::size_t r = 0; r < std::min(k, ranked.docs.size()); ++r) {
    const int g = grade_of(qrels, ranked.docs[r].doc_id);
    if (g > 0) dcg += (std::exp2(static_cast<double>(g)) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  std::vector<int> grades;
  for (const auto& [doc, g] : qrels) {
    if (g > 0) grades.push_back(g);
  }
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double ideal = 0;
  for (std::size_t r = 0; r < std::min(k, grades.size()); ++r) {
    ideal += (std::exp2(static_cast<double>(grades[r])) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  return ideal > 0 ? dcg / ideal : 0.0;
}

double mrr_at_k(const RankedList& ranked, const Judgments& qrels, std::size_t k) {
  for (std::size_t r = 0; r < std::min(k, ranked.docs.size()); ++r) {
    if (grade_of(qrels, ranked.docs[r].doc_id) > 0) return 1.0 / static_cast<double>(r + 1);
  }
  return 0.0;
}

double recall_at_k(const RankedList& ranked, const Judgments& qrels, std::size_t k) {
  const std::size_t total = relevant_count(qrels);
  if (total == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t r = 0; r < std::min(k, ranked.docs.size()); ++r) {
    if (grade_of(qrels, ranked.docs[r].doc_id) > 0) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

MetricReport score_rankings(const std::vector<RankedList>& rankings, const std::map<std::string, TaskType>& query_tasks,
                            const std::map<std::string, Judgments>& qrels) {
  MetricReport report;
  std::map<TaskType, std::vector<const QueryMetrics*>> by_task;
  for (const auto& ranked : rankings) {
    auto it = qrels.find(ranked.query_id);
    if (it == qrels.end() || it->second.empty()) {
      ++report.excluded_queries;
      continue;
    }
    QueryMetrics m;
    m.query_id = ranked.query_id;
    auto t = query_tasks.find(ranked.query_id);
    if (t == query_tasks.end()) throw DatasetError("score_rankings: no task for query \"" + ranked.query_id + "\"");
    m.task = t->second;
    m.ndcg10 = ndcg_at_k(ranked, it->second, 10);
    m.mrr10 = mrr_at_k(ranked, it->second, 10);
    m.recall1 = recall_at_k(ranked, it->second, 1);
    m.recall10 = recall_at_k(ranked, it->second, 10);
    report.per_query.push_back(std::move(m));
  }
  auto average = [](const std::vector<const QueryMetrics*>& rows) {
    MetricSummary s;
    for (const auto* r : rows) {
      s.ndcg10 += r->ndcg10;
      s.mrr10 += r->mrr10;
      s.recall1 += r->recall1;
      s.recall10 += r->recall10;
    }
    s.queries = rows.size();
    if (!rows.empty()) {
      const double n = static_cast<double>(rows.size());
      s.ndcg10 /= n;
      s.mrr10 /= n;
      s.recall1 /= n;
      s.recall10 /= n;
    }
    return s;
  };
  std::vector<const QueryMetrics*> all;
  for (const auto& m : report.per_query) {
    all.push_back(&m);
    by_task[m.task].push_back(&m);
  }
  report.micro = average(all);
  for (const auto& [task, rows] : by_task) report.per_task[task] = average(rows);
  MetricSummary macro;
  for (const auto& [task, s] : report.per_task) {
    macro.ndcg10 += s.ndcg10;
    macro.mrr10 += s.mrr10;
    macro.recall1 += s.recall1;
    macro.recall10 += s.recall10;
  }
  if (!report.per_task.empty()) {
    const double n = static_cast<double>(report.per_task.size());
    macro.ndcg10 /= n;
    macro.mrr10 /= n;
    macro.recall1 /= n;
    macro.recall10 /= n;
  }
  macro.queries = all.size();
  report.macro = macro;
  return report;
}

template <typename Scalar>
std::vector<MetricReport> run_eval(const RetrievalDataset& ds, const EmbeddingModel<Scalar>& model,
                                   const std::vector<int>& dims, const EvalOptions& options) {
  ds.validate();
  const RawEmbeddings raw = embed_raw(ds, model, options.role_aware);
  std::map<std::string, TaskType> query_tasks;
  for (const auto& [id, rec] : ds.queries) query_tasks[id] = rec.task;

  std::vector<MetricReport> reports;
  for (int m : dims) {
    EmbeddingSet q = raw.queries, d = raw.corpus;
    if (options.truncate) {
      q.vectors = truncate_normalize(raw.queries.vectors, m);
      d.vectors = truncate_normalize(raw.corpus.vectors, m);
    } else {
      if (m != model.d_model()) throw std::invalid_argument("run_eval: truncation disabled but dims != d_model");
      q.vectors = normalize_embeddings(raw.queries.vectors);
      d.vectors = normalize_embeddings(raw.corpus.vectors);
    }
    MetricReport r = score_rankings(search_exact(q, d, 10), query_tasks, ds.qrels);
    r.dims = m;
    r.pooling = std::string(to_string(model.config().pooling));
    r.model_id = options.model_id;
    reports.push_back(std::move(r));
  }
  return reports;
}

namespace {

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad_right(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}

std::string pad_left(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}

}  // namespace

std::string format_report_table(const std::vector<MetricReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    out += "model " + (r.model_id.empty() ? std::string("-") : r.model_id) + "  pooling " + r.pooling + "  dims " +
           std::to_string(r.dims) + "  queries " + std::to_string(r.micro.queries) + "  excluded " +
           std::to_string(r.excluded_queries) + "\n";
    out += pad_right("split", 22) + pad_left("queries", 8) + pad_left("NDCG@10", 10) + pad_left("MRR@10", 10) +
           pad_left("R@1", 10) + pad_left("R@10", 10) + "\n";
    auto row = [&out](const std::string& name, const MetricSummary& s) {
      out += pad_right(name, 22) + pad_left(std::to_string(s.queries), 8) + pad_left(fixed(s.ndcg10), 10) +
             pad_left(fixed(s.mrr10), 10) + pad_left(fixed(s.recall1), 10) + pad_left(fixed(s.recall10), 10) + "\n";
    };
    for (const auto& [task, s] : r.per_task) row(std::string(to_string(task)), s);
    row("overall (micro)", r.micro);
    row("overall (macro)", r.macro);
    out += "\n";
  }
  return out;
}

std::string format_report_jsonl(const std::vector<MetricReport>& reports) {
  using json = nlohmann::ordered_json;
  std::string out;
  auto summary = [](const MetricSummary& s) {
    json j;
    j["queries"] = s.queries;
    j["ndcg@10"] = s.ndcg10;
    j["mrr@10"] = s.mrr10;
    j["recall@1"] = s.recall1;
    j["recall@10"] = s.recall10;
    return j;
  };
  for (const auto& r : reports) {
    for (const auto& q : r.per_query) {
      json j;
      j["type"] = "query";
      j["dims"] = r.dims;
      j["query_id"] = q.query_id;
      j["task"] = std::string(to_string(q.task));
      j["ndcg@10"] = q.ndcg10;
      j["mrr@10"] = q.mrr10;
      j["recall@1"] = q.recall1;
      j["recall@10"] = q.recall10;
      out += j.dump() + "\n";
    }
    json j;
    j["type"] = "summary";
    j["dims"] = r.dims;
    j["pooling"] = r.pooling;
    j["model_id"] = r.model_id;
    j["excluded_queries"] = r.excluded_queries;
    json tasks = json::object();
    for (const auto& [task, s] : r.per_task) tasks[std::string(to_string(task))] = summary(s);
    j["per_task"] = tasks;
    j["micro"] = summary(r.micro);
    j["macro"] = summary(r.macro);
    out += j.dump() + "\n";
  }
  return out;
}

namespace {

struct TableRow {
  std::string name;
  std::vector<double> values;
};

std::vector<TableRow> ablation_rows(const std::vector<const MetricReport*>& cols) {
  std::set<TaskType> tasks;
  for (const auto* r : cols) {
    for (const auto& [t, s] : r->per_task) tasks.insert(t);
  }
  std::vector<TableRow> rows;
  for (TaskType t : tasks) {
    TableRow row{std::string(to_string(t)), {}};
    for (const auto* r : cols) {
      auto it = r->per_task.find(t);
      row.values.push_back(it == r->per_task.end() ? 0.0 : it->second.ndcg10);
    }
    rows.push_back(std::move(row));
  }
  TableRow micro{"Overall AVG (micro)", {}}, macro{"Overall AVG (macro)", {}};
  for (const auto* r : cols) {
    micro.values.push_back(r->micro.ndcg10);
    macro.values.push_back(r->macro.ndcg10);
  }
  rows.push_back(std::move(micro));
  rows.push_back(std::move(macro));
  return rows;
}

std::string rows_to_csv(const std::vector<std::string>& header, const std::vector<TableRow>& rows) {
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
  out += "\n";
  for (const auto& row : rows) {
    out += row.name;
    for (double v : row.values) out += "," + fixed(v, 6);
    out += "\n";
  }
  return out;
}

std::string rows_to_table(const std::vector<std::string>& header, const std::vector<TableRow>& rows) {
  std::string out = pad_right(header[0], 22);
  for (std::size_t i = 1; i < header.size(); ++i) out += pad_left(header[i], 18);
  out += "\n";
  for (const auto& row : rows) {
    out += pad_right(row.name, 22);
    for (double v : row.values) out += pad_left(fixed(100.0 * v, 2) + "%", 18);
    out += "\n";
  }
  return out;
}

}  // namespace

AblationResult run_ablation(const std::vector<PairRecord>& train, const RetrievalDataset& heldout, TrainConfig base,
                            const std::vector<PoolingKind> & kinds, const fs::path& out_dir, const FitOptions& options) {
  if (kinds.empty()) throw std::invalid_argument("run_ablation: no pooling kinds requested");
  base.validate();
  AblationResult result;
  for (PoolingKind kind : kinds) {
    const std::string name(to_string(kind));
    try {
      TrainConfig cfg = base;
      cfg.model.pooling = kind;
      const fs::path arm_dir = out_dir / name;
      AblationArm arm;
      arm.kind = kind;
      arm.fit = fit(cfg, train, arm_dir, options);
      CheckpointInfo info;
      const auto trained = load_model<float>(arm.fit.checkpoint_dir, &info);
      arm.trained = run_eval(heldout, trained, {trained.d_model()}, {true, true, info.model_id}).front();
      CheckpointInfo base_info;
      const auto untrained = load_model<float>(arm_dir / "untrained", &base_info);
      arm.untrained = run_eval(heldout, untrained, {untrained.d_model()}, {true, true, base_info.model_id}).front();
      result.arms.push_back(std::move(arm));
    } catch (const std::exception& e) {
      throw AblationError("ablation arm " + name + " failed: " + e.what());
    }
  }

  std::vector<std::string> header{"benchmark"};
  std::vector<const MetricReport*> trained, untrained;
  for (const auto& arm : result.arms) {
    header.emplace_back(to_string(arm.kind));
    trained.push_back(&arm.trained);
    untrained.push_back(&arm.untrained);
  }
  const auto rows = ablation_rows(trained);
  const auto base_rows = ablation_rows(untrained);
  result.csv = rows_to_csv(header, rows);
  result.baseline_csv = rows_to_csv(header, base_rows);
  result.table = "NDCG@10 on the held-out split after " + std::to_string(base.steps) + " steps (seed " +
                 std::to_string(base.seed) + ")\n" + rows_to_table(header, rows) +
                 "\nUntrained initialization\n" + rows_to_table(header, base_rows);
  std::string ids;
  for (const auto& arm : result.arms) {
    ids += std::string(to_string(arm.kind)) + ":";
    for (const auto& id : arm.fit.first_batch_ids) ids += " " + id;
    ids += "\n";
  }
  result.table += "\nFirst batch per arm\n" + ids;
  return result;
}

template RawEmbeddings embed_raw(const RetrievalDataset&, const EmbeddingModel<float>&, bool);
template RawEmbeddings embed_raw(const RetrievalDataset&, const EmbeddingModel<double>&, bool);
template std::pair<EmbeddingSet, EmbeddingSet> embed_corpus(const RetrievalDataset&, const EmbeddingModel<float>&, bool, int);
template std::pair<EmbeddingSet, EmbeddingSet> embed_corpus(const RetrievalDataset&, const EmbeddingModel<double>&, bool, int);
template std::vector<MetricReport> run_eval(const RetrievalDataset&, const EmbeddingModel<float>&, const std::vector<int>&,
                                            const EvalOptions&);
template std::vector<MetricReport> run_eval(const RetrievalDataset&, const EmbeddingModel<double>&,
                                            const std::vector<int>&, const EvalOptions&);

}  // namespace codembed
