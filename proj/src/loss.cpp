#include <codembed/loss.hpp>

#include <numeric>

namespace codembed {

std::string_view to_string(LossDirection d) {
  return d == LossDirection::QueryToDoc ? "query_to_doc" : "symmetric";
}

LossDirection parse_loss_direction(std::string_view label) {
  if (label == "query_to_doc") return LossDirection::QueryToDoc;
  if (label == "symmetric") return LossDirection::Symmetric;
  throw std::invalid_argument("unknown loss direction: \"" + std::string(label) + "\"");
}

LossConfig LossConfig::defaults(int d_model) {
  LossConfig cfg;
  for (int div : {1, 2, 4, 8}) {
    if (d_model / div >= 1 && (cfg.matryoshka_dims.empty() || cfg.matryoshka_dims.back() != d_model / div)) {
      cfg.matryoshka_dims.push_back(d_model / div);
    }
  }
  cfg.matryoshka_weights.assign(cfg.matryoshka_dims.size(), 1.0 / static_cast<double>(cfg.matryoshka_dims.size()));
  return cfg;
}

void LossConfig::validate(int d_model) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("loss config: " + m); };
  if (!(temperature > 0) || !std::isfinite(temperature)) fail("temperature must be positive");
  if (matryoshka_dims.empty()) fail("matryoshka_dims must not be empty");
  if (matryoshka_weights.size() != matryoshka_dims.size()) fail("matryoshka_weights must match matryoshka_dims");
  if (matryoshka_dims.front() != d_model) fail("largest matryoshka dim must equal d_model " + std::to_string(d_model));
  for (std::size_t i = 0; i < matryoshka_dims.size(); ++i) {
    if (matryoshka_dims[i] < 1 || matryoshka_dims[i] > d_model) fail("matryoshka dims must lie in [1, d_model]");
    if (i > 0 && matryoshka_dims[i] > matryoshka_dims[i - 1]) fail("matryoshka dims must be descending");
    if (!(matryoshka_weights[i] > 0) || !std::isfinite(matryoshka_weights[i])) fail("matryoshka weights must be positive");
  }
  const double total = std::accumulate(matryoshka_weights.begin(), matryoshka_weights.end(), 0.0);
  for (double& w : matryoshka_weights) w /= total;
}

}  // namespace codembed
