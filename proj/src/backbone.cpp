#include <codembed/backbone.hpp>
#include <codembed/init.hpp>

#include <algorithm>
#include <random>

namespace codembed {

std::string_view to_string(PositionEncoding p) {
  return p == PositionEncoding::Rotary ? "rope" : "learned";
}

PositionEncoding parse_position_encoding(std::string_view label) {
  if (label == "rope") return PositionEncoding::Rotary;
  if (label == "learned") return PositionEncoding::Learned;
  throw std::invalid_argument("unknown position encoding: \"" + std::string(label) + "\"");
}

void BackboneConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("backbone config: " + m); };
  if (vocab_size < kMinVocabSize) fail("vocab_size must be >= 259");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1) fail("sizes must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (position == PositionEncoding::Rotary && (d_model / n_heads) % 2 != 0) {
    fail("rotary encoding needs an even head width");
  }
  if (max_seq_len < 1) fail("max_seq_len must be >= 1");
}

Index BackboneConfig::parameter_count() const {
  const Index d = d_model, f = d_ff;
  Index n = Index{vocab_size} * d + d;
  if (position == PositionEncoding::Learned) n += Index{max_seq_len} * d;
  const Index per_layer = d + (d * 3 * d + 3 * d) + d * d + d + (d * f + f) + (f * d + d);
  return n + Index{n_layers} * per_layer;
}

TokenSequence tokenize(std::string_view text, int max_seq_len) {
  return tokenize(std::string_view{}, text, max_seq_len);
}

TokenSequence tokenize(std::string_view prefix, std::string_view payload, int max_seq_len) {
  const auto fixed = static_cast<long>(prefix.size()) + 2;
  if (fixed > max_seq_len) {
    throw LengthError("tokenize: prefix of " + std::to_string(prefix.size()) +
                      " bytes does not fit max_seq_len " + std::to_string(max_seq_len));
  }
  const std::size_t room = static_cast<std::size_t>(max_seq_len - fixed);
  const std::size_t kept = std::min(room, payload.size());
  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(fixed) + kept);
  seq.ids.push_back(kBosId);
  for (char c : prefix) seq.ids.push_back(static_cast<unsigned char>(c));
  for (std::size_t i = 0; i < kept; ++i) seq.ids.push_back(static_cast<unsigned char>(payload[i]));
  seq.ids.push_back(kEosId);
  seq.length = static_cast<int>(seq.ids.size());
  return seq;
}

TokenSequence pad_to(TokenSequence seq, int seq_len) {
  if (static_cast<int>(seq.ids.size()) < seq_len) seq.ids.resize(static_cast<std::size_t>(seq_len), kPadId);
  return seq;
}

template <typename Scalar>
Backbone<Scalar>::Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const Index d = cfg_.d_model, f = cfg_.d_ff;
  constexpr double kStd = 0.02;
  auto zeros = [](Index r, Index c) { return Matrix<Scalar>::Zero(r, c).eval(); };
  auto ones = [](Index c) { return Matrix<Scalar>::Ones(1, c).eval(); };

  embed_ = Parameter<Scalar>("backbone.embed", normal_matrix<Scalar>(cfg_.vocab_size, d, kStd, rng));
  if (cfg_.position == PositionEncoding::Learned) {
    position_ = Parameter<Scalar>("backbone.position", normal_matrix<Scalar>(cfg_.max_seq_len, d, kStd, rng));
  }
  layers_.reserve(static_cast<std::size_t>(cfg_.n_layers));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "backbone.layers." + std::to_string(l) + ".";
    Layer layer;
    layer.attn_norm = Parameter<Scalar>(p + "attn_norm", ones(d));
    layer.qkv_weight = Parameter<Scalar>(p + "qkv.weight", normal_matrix<Scalar>(d, 3 * d, kStd, rng));
    layer.qkv_bias = Parameter<Scalar>(p + "qkv.bias", zeros(1, 3 * d));
    layer.out_weight = Parameter<Scalar>(p + "out.weight", normal_matrix<Scalar>(d, d, kStd, rng));
    layer.mlp_norm = Parameter<Scalar>(p + "mlp_norm", ones(d));
    layer.up_weight = Parameter<Scalar>(p + "up.weight", normal_matrix<Scalar>(d, f, kStd, rng));
    layer.up_bias = Parameter<Scalar>(p + "up.bias", zeros(1, f));
    layer.down_weight = Parameter<Scalar>(p + "down.weight", normal_matrix<Scalar>(f, d, kStd, rng));
    layer.down_bias = Parameter<Scalar>(p + "down.bias", zeros(1, d));
    layers_.push_back(std::move(layer));
  }
  final_norm_ = Parameter<Scalar>("backbone.final_norm", ones(d));
}

template <typename Scalar>
template <typename Self>
HiddenStates<Scalar> Backbone<Scalar>::forward_impl(Self& self, Tape<Scalar>& tape,
                                                    std::span<const TokenSequence> batch) {
  const BackboneConfig& cfg = self.cfg_;
  if (batch.empty()) throw DimensionError("backbone forward: empty batch");
  Index seq_len = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b];
    if (s.length < 1 || s.length > static_cast<int>(s.ids.size())) {
      throw DimensionError("backbone forward: sequence " + std::to_string(b) + " has invalid length");
    }
    if (static_cast<int>(s.ids.size()) > cfg.max_seq_len) {
      throw LengthError("backbone forward: sequence " + std::to_string(b) + " has " +
                        std::to_string(s.ids.size()) + " tokens, max_seq_len is " +
                        std::to_string(cfg.max_seq_len));
    }
    seq_len = std::max<Index>(seq_len, s.length);
  }

  const Index B = static_cast<Index>(batch.size());
  std::vector<Index> ids(static_cast<std::size_t>(B * seq_len), kPadId);
  std::vector<Index> lengths(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    const auto& s = batch[static_cast<std::size_t>(b)];
    lengths[static_cast<std::size_t>(b)] = s.length;
    for (Index t = 0; t < s.length; ++t) {
      const int id = s.ids[static_cast<std::size_t>(t)];
      if (id < 0 || id >= cfg.vocab_size) {
        throw DimensionError("backbone forward: token id " + std::to_string(id) + " outside vocabulary");
      }
      ids[static_cast<std::size_t>(b * seq_len + t)] = id;
    }
  }

  Var<Scalar> x = gather_rows(tape.param(self.embed_), ids);
  if (cfg.position == PositionEncoding::Learned) {
    std::vector<Index> pos(ids.size());
    for (std::size_t r = 0; r < pos.size(); ++r) pos[r] = static_cast<Index>(r) % seq_len;
    x = add(x, gather_rows(tape.param(self.position_), std::move(pos)));
  }

  const Index d = cfg.d_model;
  AttentionLayout layout;
  layout.segments = B;
  layout.query_rows = seq_len;
  layout.key_rows = seq_len;
  layout.key_lengths = lengths;
  layout.query_lengths = lengths;
  layout.causal = true;
  layout.n_heads = cfg.n_heads;

  for (auto& layer : self.layers_) {
    Var<Scalar> h = rms_norm_rows(x, tape.param(layer.attn_norm));
    Var<Scalar> qkv = add_row_vector(matmul(h, tape.param(layer.qkv_weight)), tape.param(layer.qkv_bias));
    Var<Scalar> q = slice_cols(qkv, 0, d);
    Var<Scalar> k = slice_cols(qkv, d, d);
    Var<Scalar> v = slice_cols(qkv, 2 * d, d);
    if (cfg.position == PositionEncoding::Rotary) {
      q = rope(q, seq_len, Index{cfg.n_heads});
      k = rope(k, seq_len, Index{cfg.n_heads});
    }
    Var<Scalar> a = attention(q, k, v, layout);
    x = add(x, matmul(a, tape.param(layer.out_weight)));

    h = rms_norm_rows(x, tape.param(layer.mlp_norm));
    Var<Scalar> u = gelu(add_row_vector(matmul(h, tape.param(layer.up_weight)), tape.param(layer.up_bias)));
    x = add(x, add_row_vector(matmul(u, tape.param(layer.down_weight)), tape.param(layer.down_bias)));
  }
  x = rms_norm_rows(x, tape.param(self.final_norm_));
  return HiddenStates<Scalar>{x, B, seq_len, std::move(lengths)};
}

template <typename Scalar>
HiddenStates<Scalar> Backbone<Scalar>::forward(Tape<Scalar>& tape, std::span<const TokenSequence> batch) {
  return forward_impl(*this, tape, batch);
}

template <typename Scalar>
HiddenStates<Scalar> Backbone<Scalar>::forward(Tape<Scalar>& tape,
                                               std::span<const TokenSequence> batch) const {
  return forward_impl(*this, tape, batch);
}

template <typename Scalar>
template <typename Self, typename Ptr>
std::vector<Ptr> Backbone<Scalar>::collect(Self& self) {
  std::vector<Ptr> out{&self.embed_};
  if (self.cfg_.position == PositionEncoding::Learned) out.push_back(&self.position_);
  for (auto& l : self.layers_) {
    for (auto* p : {&l.attn_norm, &l.qkv_weight, &l.qkv_bias, &l.out_weight, &l.mlp_norm,
                    &l.up_weight, &l.up_bias, &l.down_weight, &l.down_bias}) {
      out.push_back(p);
    }
  }
  out.push_back(&self.final_norm_);
  return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> Backbone<Scalar>::parameters() {
  return collect<Backbone, Parameter<Scalar>*>(*this);
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> Backbone<Scalar>::parameters() const {
  return collect<const Backbone, const Parameter<Scalar>*>(*this);
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace codembed
