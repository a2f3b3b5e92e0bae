#pragma once

#include <codembed/backbone.hpp>

#include <cstdint>
#include <string_view>
#include <vector>

namespace codembed {

enum class PoolingKind { LastToken, Mean, LatentAttention };

/// Manifest labels: `last_token`, `mean`, `latent_attention`.
std::string_view to_string(PoolingKind kind);
PoolingKind parse_pooling_kind(std::string_view label);

struct LatentAttentionConfig {
  int num_latents = 32;
  int d_ff_multiplier = 4;

  bool operator==(const LatentAttentionConfig&) const = default;
};

/// Trainable parameters a pooling head adds on top of the backbone.
Index pooling_parameter_count(PoolingKind kind, int d_model, const LatentAttentionConfig& latent = {});

/// Reduces hidden states to one (un-normalized) row per sequence.
///
/// LastToken picks row length-1 (the EOS position). Mean averages the real
/// positions. LatentAttention lets a trainable latent array cross-attend to
/// the projected hidden states, averages the latent outputs and feeds them
/// through a two-layer GELU MLP. All three read only real positions, so the
/// result does not depend on how much right padding the batch carries.
template <typename Scalar>
class PoolingHead {
 public:
  PoolingHead(PoolingKind kind, int d_model, std::uint64_t seed, LatentAttentionConfig latent = {});

  PoolingKind kind() const { return kind_; }
  const LatentAttentionConfig& latent_config() const { return latent_cfg_; }

  Var<Scalar> pool(Tape<Scalar>& tape, const HiddenStates<Scalar>& h);
  Var<Scalar> pool(Tape<Scalar>& tape, const HiddenStates<Scalar>& h) const;

  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;

 private:
  template <typename Self>
  static Var<Scalar> pool_impl(Self& self, Tape<Scalar>& tape, const HiddenStates<Scalar>& h);

  PoolingKind kind_;
  int d_model_;
  LatentAttentionConfig latent_cfg_;
  Parameter<Scalar> latents_, key_weight_, value_weight_;
  Parameter<Scalar> mlp_in_weight_, mlp_in_bias_, mlp_out_weight_, mlp_out_bias_;
};

/// Unit-L2 rows; gradient flows through the normalization.
template <typename Scalar>
Var<Scalar> normalize(const Var<Scalar>& embeddings) {
  return normalize_rows(embeddings);
}

extern template class PoolingHead<float>;
extern template class PoolingHead<double>;

}  // namespace codembed
