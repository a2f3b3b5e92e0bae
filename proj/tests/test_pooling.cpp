#include "support.hpp"

#include <codembed/model.hpp>

#include <doctest.h>

using namespace codembed;
using testing::Mat;

namespace {

BackboneConfig small_backbone() {
  BackboneConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 128;
  c.seed = 3;
  return c;
}

constexpr PoolingKind kKinds[] = {PoolingKind::LastToken, PoolingKind::Mean, PoolingKind::LatentAttention};

double gelu_ref(double x) { return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x))); }

/// Latent-array pooling written out with plain loops.
Mat latent_reference(const PoolingHead<double>& head, const Mat& states, Index seq_len, const std::vector<Index>& lengths) {
  const auto ps = head.parameters();
  auto find = [&](const std::string& name) -> const Mat& {
    for (const auto* p : ps) {
      if (p->name == name) return p->value;
    }
    throw std::runtime_error("missing " + name);
  };
  const Mat& lat = find("pooling.latents");
  const Mat& wk = find("pooling.key.weight");
  const Mat& wv = find("pooling.value.weight");
  const Mat& w1 = find("pooling.mlp_in.weight");
  const Mat& b1 = find("pooling.mlp_in.bias");
  const Mat& w2 = find("pooling.mlp_out.weight");
  const Mat& b2 = find("pooling.mlp_out.bias");
  const Index d = lat.cols(), r = lat.rows();
  Mat out(static_cast<Index>(lengths.size()), d);
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const Index n = lengths[b];
    const Mat H = states.block(static_cast<Index>(b) * seq_len, 0, n, d);
    const Mat K = H * wk, V = H * wv;
    Mat pooled = Mat::Zero(1, d);
    for (Index i = 0; i < r; ++i) {
      std::vector<double> s(static_cast<std::size_t>(n));
      double mx = -1e300;
      for (Index j = 0; j < n; ++j) {
        s[static_cast<std::size_t>(j)] = lat.row(i).dot(K.row(j)) / std::sqrt(double(d));
        mx = std::max(mx, s[static_cast<std::size_t>(j)]);
      }
      double z = 0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (Index j = 0; j < n; ++j) pooled += s[static_cast<std::size_t>(j)] / z * V.row(j);
    }
    pooled /= double(r);
    Mat hid = pooled * w1 + b1;
    for (Index k = 0; k < hid.size(); ++k) hid.data()[k] = gelu_ref(hid.data()[k]);
    out.row(static_cast<Index>(b)) = hid * w2 + b2;
  }
  return out;
}

}  // namespace

TEST_CASE("pooling kinds parse from their labels") {
  for (auto k : kKinds) CHECK(parse_pooling_kind(to_string(k)) == k);
  CHECK(to_string(PoolingKind::LastToken) == "last_token");
  CHECK_THROWS_AS(parse_pooling_kind("cls"), std::invalid_argument);
}

TEST_CASE("pooling outputs match direct computations on the hidden states") {
  Backbone<double> bb(small_backbone());
  Tape<double> t(false);
  const std::vector<TokenSequence> batch{tokenize("pool me", 32), tokenize("and me too, longer", 32)};
  const auto h = bb.forward(t, batch);
  const Mat H = h.states.value();

  PoolingHead<double> last(PoolingKind::LastToken, 8, 1), avg(PoolingKind::Mean, 8, 1),
      lat(PoolingKind::LatentAttention, 8, 1, {4, 2});
  const Mat pl = last.pool(t, h).value();
  const Mat pm = avg.pool(t, h).value();
  const Mat pa = lat.pool(t, h).value();
  REQUIRE(pl.rows() == 2);
  for (Index b = 0; b < 2; ++b) {
    const Index n = h.lengths[static_cast<std::size_t>(b)];
    CHECK((pl.row(b) - H.row(b * h.seq_len + n - 1)).norm() == doctest::Approx(0.0));
    Mat m = Mat::Zero(1, 8);
    for (Index i = 0; i < n; ++i) m += H.row(b * h.seq_len + i);
    CHECK((pm.row(b) - m / double(n)).cwiseAbs().maxCoeff() <= 1e-12);
  }
  const Mat ref = latent_reference(lat, H, h.seq_len, h.lengths);
  CHECK((pa - ref).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("pooling is invariant to the amount of right padding") {
  ModelConfig cfg;
  cfg.backbone = small_backbone();
  for (auto kind : kKinds) {
    cfg.pooling = kind;
    EmbeddingModel<double> model(cfg);
    const TokenSequence s = tokenize("padding probe", 32);
    Tape<double> t(false);
    const Mat alone = model.encode_tokens(t, std::vector<TokenSequence>{s}).value();
    for (int len : {16, 24, 32}) {
      const Mat padded = model.encode_tokens(t, std::vector<TokenSequence>{pad_to(s, len)}).value();
      CHECK((padded - alone).cwiseAbs().maxCoeff() <= 1e-10);
    }
    const Mat batched =
        model.encode_tokens(t, std::vector<TokenSequence>{tokenize("x", 32), s, tokenize(std::string(29, 'y'), 32)})
            .value();
    CHECK((batched.row(1) - alone.row(0)).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("normalized embeddings have unit norm") {
  ModelConfig cfg;
  cfg.backbone = small_backbone();
  for (auto kind : kKinds) {
    cfg.pooling = kind;
    EmbeddingModel<float> model(cfg);
    Tape<float> t(false);
    const std::vector<EncodeInput> in{{TaskType::Code2NL, Role::Query, "int main() {}"},
                                      {TaskType::TechQA, Role::Document, "use a mutex"}};
    const auto e = normalize(model.encode(t, in)).value();
    for (Index i = 0; i < e.rows(); ++i) CHECK(std::abs(e.row(i).norm() - 1.0f) <= 1e-5f);
  }
}

TEST_CASE("latent attention parameters join the model parameter set") {
  ModelConfig cfg;
  cfg.backbone = small_backbone();
  cfg.pooling = PoolingKind::LatentAttention;
  cfg.latent = {5, 3};
  EmbeddingModel<double> model(cfg);
  const auto params = model.parameters();
  Index pool_total = 0;
  std::size_t pool_count = 0;
  for (auto* p : params) {
    if (p->name.rfind("pooling.", 0) == 0) {
      pool_total += p->size();
      ++pool_count;
    }
  }
  CHECK(pool_count == 7);
  const Index d = 8, r = 5, f = 24;
  CHECK(pool_total == r * d + 2 * d * d + d * f + f + f * d + d);
  CHECK(pool_total == pooling_parameter_count(PoolingKind::LatentAttention, 8, cfg.latent));
  CHECK(model.parameter_count() == cfg.backbone.parameter_count() + pool_total);
  CHECK(pooling_parameter_count(PoolingKind::Mean, 8) == 0);
  CHECK_THROWS_AS(PoolingHead<double>(PoolingKind::LatentAttention, 8, 1, {0, 4}), std::invalid_argument);
}

TEST_CASE("frozen backbone leaves only pooling parameters trainable") {
  ModelConfig cfg;
  cfg.backbone = small_backbone();
  cfg.pooling = PoolingKind::LatentAttention;
  EmbeddingModel<double> model(cfg);
  model.set_backbone_trainable(false);
  for (auto* p : model.parameters()) CHECK(p->trainable == (p->name.rfind("pooling.", 0) == 0));
}
