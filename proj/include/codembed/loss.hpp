#pragma once

// Contrastive objective: cosine similarity matrix over in-batch pairs,
// InfoNCE with the diagonal as positives, summed over nested widths.

#include <codembed/ops.hpp>

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace codembed {

enum class LossDirection { QueryToDoc, Symmetric };

std::string_view to_string(LossDirection d);
LossDirection parse_loss_direction(std::string_view label);

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossConfig {
  double temperature = 0.05;
  std::vector<int> matryoshka_dims;      // descending, first == d_model
  std::vector<double> matryoshka_weights;
  LossDirection direction = LossDirection::QueryToDoc;

  /// {d, d/2, d/4, d/8} (widths that reach zero are skipped), equal weights.
  static LossConfig defaults(int d_model);

  /// Checks the invariants against `d_model` and rescales weights to sum 1.
  void validate(int d_model);

  bool operator==(const LossConfig&) const = default;
};

/// S = Q * D^T for unit rows, i.e. cos(q_i, d_j).
template <typename Scalar>
Var<Scalar> similarity_matrix(const Var<Scalar>& queries, const Var<Scalar>& documents) {
  if (queries.cols() != documents.cols() || queries.rows() != documents.rows()) {
    throw DimensionError("similarity_matrix: query embeddings " + queries.shape() +
                         " and document embeddings " + documents.shape() + " disagree");
  }
  return matmul_nt(queries, documents);
}

/// -sum_i log softmax(S / tau)[i, i].
template <typename Scalar>
Var<Scalar> info_nce(const Var<Scalar>& similarity, double temperature) {
  if (similarity.rows() != similarity.cols()) {
    throw DimensionError("info_nce: similarity matrix must be square, got " + similarity.shape());
  }
  if (similarity.rows() < 2) throw DimensionError("info_nce: need at least two pairs");
  if (!(temperature > 0)) throw std::invalid_argument("info_nce: temperature must be positive");
  if (!similarity.value().allFinite()) throw NonFiniteError("info_nce: similarity matrix has non-finite entries");
  Var<Scalar> logits = scale(similarity, static_cast<Scalar>(1.0 / temperature));
  return scale(sum(diagonal(log_softmax_rows(logits))), Scalar(-1));
}

/// Weighted InfoNCE over leading-prefix truncations of the raw embeddings,
/// each renormalized at its own width.
template <typename Scalar>
Var<Scalar> matryoshka_loss(const Var<Scalar>& query_raw, const Var<Scalar>& doc_raw, const LossConfig& cfg) {
  if (cfg.matryoshka_dims.empty() || cfg.matryoshka_dims.size() != cfg.matryoshka_weights.size()) {
    throw std::invalid_argument("matryoshka_loss: dims and weights must be non-empty and equally long");
  }
  Var<Scalar> total;
  for (std::size_t r = 0; r < cfg.matryoshka_dims.size(); ++r) {
    const Index m = cfg.matryoshka_dims[r];
    Var<Scalar> q = normalize_rows(slice_cols(query_raw, 0, m));
    Var<Scalar> d = normalize_rows(slice_cols(doc_raw, 0, m));
    Var<Scalar> s = similarity_matrix(q, d);
    Var<Scalar> term = info_nce(s, cfg.temperature);
    if (cfg.direction == LossDirection::Symmetric) {
      term = scale(add(term, info_nce(transpose(s), cfg.temperature)), Scalar(0.5));
    }
    term = scale(term, static_cast<Scalar>(cfg.matryoshka_weights[r]));
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

}  // namespace codembed
