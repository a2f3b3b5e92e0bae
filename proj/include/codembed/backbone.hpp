#pragma once

// Byte-level tokenizer and a small decoder-only transformer that maps token
// sequences to final-layer hidden states.

#include <codembed/ops.hpp>
#include <codembed/tensor.hpp>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace codembed {

inline constexpr int kBosId = 256;
inline constexpr int kEosId = 257;
inline constexpr int kPadId = 258;
inline constexpr int kMinVocabSize = 259;

class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

enum class PositionEncoding { Rotary, Learned };

std::string_view to_string(PositionEncoding p);
PositionEncoding parse_position_encoding(std::string_view label);

struct BackboneConfig {
  int vocab_size = kMinVocabSize;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 512;
  std::uint64_t seed = 42;
  PositionEncoding position = PositionEncoding::Rotary;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  Index parameter_count() const;

  bool operator==(const BackboneConfig&) const = default;
};

/// Token ids with right padding; `length` counts real tokens only.
struct TokenSequence {
  std::vector<int> ids;
  int length = 0;
};

/// BOS + bytes + EOS, dropping the tail of `text` to fit max_seq_len.
TokenSequence tokenize(std::string_view text, int max_seq_len);

/// BOS + prefix + payload + EOS. Only the payload tail is dropped; a prefix
/// that cannot fit raises LengthError.
TokenSequence tokenize(std::string_view prefix, std::string_view payload, int max_seq_len);

/// Append pad tokens up to `seq_len` ids.
TokenSequence pad_to(TokenSequence seq, int seq_len);

/// Final-layer states for a padded batch, flattened to [batch*seq_len x d]:
/// row b*seq_len + t holds position t of sequence b.
template <typename Scalar>
struct HiddenStates {
  Var<Scalar> states;
  Index batch = 0;
  Index seq_len = 0;
  std::vector<Index> lengths;
};

template <typename Scalar>
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& cfg);

  const BackboneConfig& config() const { return cfg_; }

  /// Parameters are bound for gradient accumulation.
  HiddenStates<Scalar> forward(Tape<Scalar>& tape, std::span<const TokenSequence> batch);
  /// Parameters enter the tape as constants.
  HiddenStates<Scalar> forward(Tape<Scalar>& tape, std::span<const TokenSequence> batch) const;

  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;

 private:
  struct Layer {
    Parameter<Scalar> attn_norm, qkv_weight, qkv_bias, out_weight;
    Parameter<Scalar> mlp_norm, up_weight, up_bias, down_weight, down_bias;
  };

  template <typename Self>
  static HiddenStates<Scalar> forward_impl(Self& self, Tape<Scalar>& tape,
                                           std::span<const TokenSequence> batch);
  template <typename Self, typename Ptr>
  static std::vector<Ptr> collect(Self& self);

  BackboneConfig cfg_;
  Parameter<Scalar> embed_;
  Parameter<Scalar> position_;  // learned positions only
  std::vector<Layer> layers_;
  Parameter<Scalar> final_norm_;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace codembed
