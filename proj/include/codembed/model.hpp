#pragma once

#include <codembed/backbone.hpp>
#include <codembed/pooling.hpp>
#include <codembed/prefixes.hpp>

#include <span>
#include <string>
#include <vector>

namespace codembed {

struct ModelConfig {
  BackboneConfig backbone;
  PoolingKind pooling = PoolingKind::LastToken;
  LatentAttentionConfig latent;

  bool operator==(const ModelConfig&) const = default;
};

/// One text to embed together with the task/role that selects its prefix.
struct EncodeInput {
  TaskType task = TaskType::NL2Code;
  Role role = Role::Query;
  std::string text;
};

/// Backbone plus pooling head: prefixed text in, raw embedding rows out.
template <typename Scalar>
class EmbeddingModel {
 public:
  explicit EmbeddingModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  int d_model() const { return cfg_.backbone.d_model; }
  Index parameter_count() const;

  /// Prefix-preserving tokenization at the backbone's max_seq_len.
  std::vector<TokenSequence> tokenize(std::span<const EncodeInput> inputs) const;

  /// Raw (un-normalized) embeddings, one row per input.
  Var<Scalar> encode(Tape<Scalar>& tape, std::span<const EncodeInput> inputs);
  Var<Scalar> encode(Tape<Scalar>& tape, std::span<const EncodeInput> inputs) const;
  Var<Scalar> encode_tokens(Tape<Scalar>& tape, std::span<const TokenSequence> batch);
  Var<Scalar> encode_tokens(Tape<Scalar>& tape, std::span<const TokenSequence> batch) const;

  /// Inference without gradient recording, processed in chunks.
  Matrix<Scalar> embed_raw(std::span<const EncodeInput> inputs, std::size_t chunk = 64) const;

  Backbone<Scalar>& backbone() { return backbone_; }
  const Backbone<Scalar>& backbone() const { return backbone_; }
  PoolingHead<Scalar>& pooling() { return pooling_; }
  const PoolingHead<Scalar>& pooling() const { return pooling_; }

  /// Backbone parameters first, pooling head parameters after.
  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;

  void set_backbone_trainable(bool trainable);

 private:
  ModelConfig cfg_;
  Backbone<Scalar> backbone_;
  PoolingHead<Scalar> pooling_;
};

/// Seed of the pooling head derived from the backbone seed.
std::uint64_t pooling_seed(std::uint64_t backbone_seed);

extern template class EmbeddingModel<float>;
extern template class EmbeddingModel<double>;

}  // namespace codembed
