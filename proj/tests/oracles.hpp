#pragma once
// Reference implementations written from the textbook definitions, shared by
// the unit tests and the acceptance run.

#include "support.hpp"

#include <codembed/evaluator.hpp>

#include <map>
#include <string>
#include <vector>

namespace testing {

/// -sum_i log softmax(S/tau)_ii with a max-shifted log-sum-exp in long double.
inline double nce_oracle(const Mat& S, double tau) {
  long double total = 0;
  for (Index i = 0; i < S.rows(); ++i) {
    long double mx = -1e300L;
    for (Index k = 0; k < S.cols(); ++k) mx = std::max<long double>(mx, S(i, k) / tau);
    long double z = 0;
    for (Index k = 0; k < S.cols(); ++k) z += std::exp(static_cast<long double>(S(i, k)) / tau - mx);
    total -= static_cast<long double>(S(i, i)) / tau - mx - std::log(z);
  }
  return static_cast<double>(total);
}

inline double ref_ndcg(const std::vector<std::string>& ranking, const std::map<std::string, int>& grades,
                       std::size_t k) {
  double dcg = 0;
  for (std::size_t i = 0; i < ranking.size() && i < k; ++i) {
    auto it = grades.find(ranking[i]);
    const int g = it == grades.end() ? 0 : it->second;
    if (g > 0) dcg += (std::pow(2.0, g) - 1) / std::log2(double(i) + 2);
  }
  std::vector<int> ideal;
  for (const auto& kv : grades) ideal.push_back(kv.second);
  std::sort(ideal.rbegin(), ideal.rend());
  double idcg = 0;
  for (std::size_t i = 0; i < ideal.size() && i < k; ++i) {
    if (ideal[i] > 0) idcg += (std::pow(2.0, ideal[i]) - 1) / std::log2(double(i) + 2);
  }
  return idcg == 0 ? 0 : dcg / idcg;
}

inline double ref_mrr(const std::vector<std::string>& ranking, const std::map<std::string, int>& grades,
                      std::size_t k) {
  for (std::size_t i = 0; i < ranking.size() && i < k; ++i) {
    if (grades.count(ranking[i]) && grades.at(ranking[i]) > 0) return 1.0 / double(i + 1);
  }
  return 0;
}

inline double ref_recall(const std::vector<std::string>& ranking, const std::map<std::string, int>& grades,
                         std::size_t k) {
  double relevant = 0, found = 0;
  for (const auto& kv : grades) relevant += kv.second > 0;
  for (std::size_t i = 0; i < ranking.size() && i < k; ++i) {
    if (grades.count(ranking[i]) && grades.at(ranking[i]) > 0) ++found;
  }
  return relevant == 0 ? 0 : found / relevant;
}

/// Ranked list with strictly decreasing scores in the given order.
inline codembed::RankedList as_ranked(const std::vector<std::string>& ids) {
  codembed::RankedList r;
  r.query_id = "q";
  double s = 1.0;
  for (const auto& id : ids) r.docs.push_back({id, s -= 0.01});
  return r;
}

struct MetricInstance {
  std::vector<std::string> ranking;
  std::map<std::string, int> grades;
};

/// Random ranking prefix over up to 25 docs, with sparse graded judgments
/// that may name documents missing from the ranking.
inline MetricInstance random_metric_instance(std::mt19937_64& rng) {
  const int n_docs = 1 + static_cast<int>(rng() % 25);
  std::vector<std::string> ids;
  for (int i = 0; i < n_docs; ++i) ids.push_back("d" + std::to_string(i));
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t shown = 1 + rng() % ids.size();
  MetricInstance m;
  m.ranking.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(shown));
  for (int i = 0; i < n_docs + 3; ++i) {
    if (rng() % 3 == 0) m.grades["d" + std::to_string(i)] = static_cast<int>(rng() % 4);
  }
  return m;
}

}  // namespace testing
