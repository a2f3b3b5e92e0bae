#include <codembed/model.hpp>

namespace codembed {

std::uint64_t pooling_seed(std::uint64_t backbone_seed) { return backbone_seed ^ 0x9e3779b97f4a7c15ULL; }

template <typename Scalar>
EmbeddingModel<Scalar>::EmbeddingModel(const ModelConfig& cfg)
    : cfg_(cfg),
      backbone_(cfg.backbone),
      pooling_(cfg.pooling, cfg.backbone.d_model, pooling_seed(cfg.backbone.seed), cfg.latent) {}

template <typename Scalar>
Index EmbeddingModel<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

template <typename Scalar>
std::vector<TokenSequence> EmbeddingModel<Scalar>::tokenize(std::span<const EncodeInput> inputs) const {
  std::vector<TokenSequence> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    out.push_back(codembed::tokenize(prefix_for(in.task, in.role), in.text, cfg_.backbone.max_seq_len));
  }
  return out;
}

template <typename Scalar>
Var<Scalar> EmbeddingModel<Scalar>::encode_tokens(Tape<Scalar>& tape, std::span<const TokenSequence> batch) {
  return pooling_.pool(tape, backbone_.forward(tape, batch));
}

template <typename Scalar>
Var<Scalar> EmbeddingModel<Scalar>::encode_tokens(Tape<Scalar>& tape,
                                                  std::span<const TokenSequence> batch) const {
  return pooling_.pool(tape, backbone_.forward(tape, batch));
}

template <typename Scalar>
Var<Scalar> EmbeddingModel<Scalar>::encode(Tape<Scalar>& tape, std::span<const EncodeInput> inputs) {
  const auto tokens = tokenize(inputs);
  return encode_tokens(tape, tokens);
}

template <typename Scalar>
Var<Scalar> EmbeddingModel<Scalar>::encode(Tape<Scalar>& tape, std::span<const EncodeInput> inputs) const {
  const auto tokens = tokenize(inputs);
  return encode_tokens(tape, tokens);
}

template <typename Scalar>
Matrix<Scalar> EmbeddingModel<Scalar>::embed_raw(std::span<const EncodeInput> inputs, std::size_t chunk) const {
  Matrix<Scalar> out(static_cast<Index>(inputs.size()), cfg_.backbone.d_model);
  if (chunk == 0) chunk = 1;
  Tape<Scalar> tape(/*grad_enabled=*/false);
  for (std::size_t begin = 0; begin < inputs.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, inputs.size() - begin);
    Var<Scalar> e = encode(tape, inputs.subspan(begin, n));
    out.middleRows(static_cast<Index>(begin), static_cast<Index>(n)) = e.value();
    tape.reset();
  }
  return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> EmbeddingModel<Scalar>::parameters() {
  auto out = backbone_.parameters();
  for (auto* p : pooling_.parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> EmbeddingModel<Scalar>::parameters() const {
  auto out = backbone_.parameters();
  for (const auto* p : pooling_.parameters()) out.push_back(p);
  return out;
}

template <typename Scalar>
void EmbeddingModel<Scalar>::set_backbone_trainable(bool trainable) {
  for (auto* p : backbone_.parameters()) p->trainable = trainable;
}

template class EmbeddingModel<float>;
template class EmbeddingModel<double>;

}  // namespace codembed
