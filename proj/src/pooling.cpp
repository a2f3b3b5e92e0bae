#include <codembed/init.hpp>
#include <codembed/pooling.hpp>

#include <random>

namespace codembed {

std::string_view to_string(PoolingKind kind) {
  switch (kind) {
    case PoolingKind::LastToken: return "last_token";
    case PoolingKind::Mean: return "mean";
    case PoolingKind::LatentAttention: return "latent_attention";
  }
  return "unknown";
}

PoolingKind parse_pooling_kind(std::string_view label) {
  if (label == "last_token") return PoolingKind::LastToken;
  if (label == "mean") return PoolingKind::Mean;
  if (label == "latent_attention") return PoolingKind::LatentAttention;
  throw std::invalid_argument("unknown pooling kind: \"" + std::string(label) + "\"");
}

Index pooling_parameter_count(PoolingKind kind, int d_model, const LatentAttentionConfig& latent) {
  if (kind != PoolingKind::LatentAttention) return 0;
  const Index d = d_model, r = latent.num_latents, f = Index{latent.d_ff_multiplier} * d;
  return r * d + 2 * d * d + (d * f + f) + (f * d + d);
}

template <typename Scalar>
PoolingHead<Scalar>::PoolingHead(PoolingKind kind, int d_model, std::uint64_t seed,
                                 LatentAttentionConfig latent)
    : kind_(kind), d_model_(d_model), latent_cfg_(latent) {
  if (kind_ != PoolingKind::LatentAttention) return;
  if (latent_cfg_.num_latents < 1 || latent_cfg_.d_ff_multiplier < 1) {
    throw std::invalid_argument("latent attention: num_latents and d_ff_multiplier must be >= 1");
  }
  std::mt19937_64 rng(seed);
  const Index d = d_model_, r = latent_cfg_.num_latents, f = Index{latent_cfg_.d_ff_multiplier} * d;
  constexpr double kStd = 0.02;
  latents_ = Parameter<Scalar>("pooling.latents", normal_matrix<Scalar>(r, d, kStd, rng));
  key_weight_ = Parameter<Scalar>("pooling.key.weight", normal_matrix<Scalar>(d, d, kStd, rng));
  value_weight_ = Parameter<Scalar>("pooling.value.weight", normal_matrix<Scalar>(d, d, kStd, rng));
  mlp_in_weight_ = Parameter<Scalar>("pooling.mlp_in.weight", normal_matrix<Scalar>(d, f, kStd, rng));
  mlp_in_bias_ = Parameter<Scalar>("pooling.mlp_in.bias", Matrix<Scalar>::Zero(1, f));
  mlp_out_weight_ = Parameter<Scalar>("pooling.mlp_out.weight", normal_matrix<Scalar>(f, d, kStd, rng));
  mlp_out_bias_ = Parameter<Scalar>("pooling.mlp_out.bias", Matrix<Scalar>::Zero(1, d));
}

template <typename Scalar>
template <typename Self>
Var<Scalar> PoolingHead<Scalar>::pool_impl(Self& self, Tape<Scalar>& tape, const HiddenStates<Scalar>& h) {
  for (std::size_t b = 0; b < h.lengths.size(); ++b) {
    if (h.lengths[b] < 1) {
      throw DimensionError("pool: sequence " + std::to_string(b) + " has zero length");
    }
  }
  switch (self.kind_) {
    case PoolingKind::LastToken: {
      std::vector<Index> rows(h.lengths.size());
      for (std::size_t b = 0; b < rows.size(); ++b) {
        rows[b] = static_cast<Index>(b) * h.seq_len + h.lengths[b] - 1;
      }
      return gather_rows(h.states, std::move(rows));
    }
    case PoolingKind::Mean:
      return segment_mean(h.states, h.seq_len, h.lengths);
    case PoolingKind::LatentAttention: {
      const Index r = self.latent_cfg_.num_latents;
      Var<Scalar> keys = matmul(h.states, tape.param(self.key_weight_));
      Var<Scalar> values = matmul(h.states, tape.param(self.value_weight_));
      Var<Scalar> queries = tile_rows(tape.param(self.latents_), h.batch);
      AttentionLayout layout;
      layout.segments = h.batch;
      layout.query_rows = r;
      layout.key_rows = h.seq_len;
      layout.key_lengths = h.lengths;
      layout.causal = false;
      layout.n_heads = 1;
      Var<Scalar> attended = attention(queries, keys, values, layout);
      Var<Scalar> pooled = segment_mean(attended, r, std::vector<Index>(static_cast<std::size_t>(h.batch), r));
      Var<Scalar> hidden = gelu(add_row_vector(matmul(pooled, tape.param(self.mlp_in_weight_)),
                                               tape.param(self.mlp_in_bias_)));
      return add_row_vector(matmul(hidden, tape.param(self.mlp_out_weight_)), tape.param(self.mlp_out_bias_));
    }
  }
  throw std::logic_error("pool: unhandled pooling kind");
}

template <typename Scalar>
Var<Scalar> PoolingHead<Scalar>::pool(Tape<Scalar>& tape, const HiddenStates<Scalar>& h) {
  return pool_impl(*this, tape, h);
}

template <typename Scalar>
Var<Scalar> PoolingHead<Scalar>::pool(Tape<Scalar>& tape, const HiddenStates<Scalar>& h) const {
  return pool_impl(*this, tape, h);
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> PoolingHead<Scalar>::parameters() {
  if (kind_ != PoolingKind::LatentAttention) return {};
  return {&latents_, &key_weight_, &value_weight_, &mlp_in_weight_, &mlp_in_bias_,
          &mlp_out_weight_, &mlp_out_bias_};
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> PoolingHead<Scalar>::parameters() const {
  if (kind_ != PoolingKind::LatentAttention) return {};
  return {&latents_, &key_weight_, &value_weight_, &mlp_in_weight_, &mlp_in_bias_,
          &mlp_out_weight_, &mlp_out_bias_};
}

template class PoolingHead<float>;
template class PoolingHead<double>;

}  // namespace codembed
