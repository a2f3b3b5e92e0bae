#pragma once
// Every differentiable op on small random inputs, each as a scalar function
// for gradcheck().

#include "support.hpp"

namespace testing {

struct OpCase {
  std::string name;
  ScalarFn fn;
  std::vector<Mat> inputs;
};

inline std::vector<OpCase> op_cases() {
  using namespace codembed;
  std::vector<OpCase> out;
  auto check_op = [&out](const char* name, ScalarFn fn, std::vector<Mat> inputs) {
    out.push_back({name, std::move(fn), std::move(inputs)});
  };
  std::mt19937_64 rng(2024);
  const Mat A = random_matrix(3, 4, rng), B = random_matrix(4, 5, rng), C = random_matrix(3, 4, rng);
  const Mat row = random_matrix(1, 4, rng), one = random_matrix(1, 1, rng);

  check_op("matmul", [](auto&, const auto& v) { return weighted_sum(matmul(v[0], v[1])); }, {A, B});
  check_op("matmul_nt", [](auto&, const auto& v) { return weighted_sum(matmul_nt(v[0], v[1])); }, {A, C});
  check_op("transpose", [](auto&, const auto& v) { return weighted_sum(transpose(v[0])); }, {A});
  check_op("add", [](auto&, const auto& v) { return weighted_sum(add(v[0], v[1])); }, {A, C});
  check_op("add scalar", [](auto&, const auto& v) { return weighted_sum(add(v[0], v[1])); }, {A, one});
  check_op("sub", [](auto&, const auto& v) { return weighted_sum(sub(v[0], v[1])); }, {A, C});
  check_op("mul", [](auto&, const auto& v) { return weighted_sum(mul(v[0], v[1])); }, {A, C});
  check_op("scale", [](auto&, const auto& v) { return weighted_sum(scale(v[0], -2.5)); }, {A});
  check_op("add_row_vector", [](auto&, const auto& v) { return weighted_sum(add_row_vector(v[0], v[1])); },
           {A, row});
  check_op("tanh", [](auto&, const auto& v) { return weighted_sum(codembed::tanh(v[0])); }, {A});
  check_op("gelu", [](auto&, const auto& v) { return weighted_sum(gelu(v[0])); }, {Mat(3.0 * A)});
  check_op("sum", [](auto&, const auto& v) { return sum(v[0]); }, {A});
  check_op("mean", [](auto&, const auto& v) { return mean(v[0]); }, {A});
  check_op("row_l2norm", [](auto&, const auto& v) { return weighted_sum(row_l2norm(v[0])); }, {A});
  check_op("normalize_rows", [](auto&, const auto& v) { return weighted_sum(normalize_rows(v[0])); }, {A});
  check_op("softmax_rows", [](auto&, const auto& v) { return weighted_sum(softmax_rows(v[0])); }, {Mat(4.0 * A)});
  check_op("log_softmax_rows", [](auto&, const auto& v) { return weighted_sum(log_softmax_rows(v[0])); },
           {Mat(4.0 * A)});
  check_op("diagonal", [](auto&, const auto& v) { return weighted_sum(diagonal(v[0])); },
           {random_matrix(4, 4, rng)});
  check_op("slice_cols", [](auto&, const auto& v) { return weighted_sum(slice_cols(v[0], 1, 2)); }, {A});
  check_op("gather_rows", [](auto&, const auto& v) { return weighted_sum(gather_rows(v[0], {2, 0, 2})); }, {A});
  check_op("tile_rows", [](auto&, const auto& v) { return weighted_sum(tile_rows(v[0], 3)); }, {row});
  check_op("segment_mean", [](auto&, const auto& v) { return weighted_sum(segment_mean(v[0], 3, {2, 3})); },
           {random_matrix(6, 4, rng)});
  check_op("rms_norm_rows", [](auto&, const auto& v) { return weighted_sum(rms_norm_rows(v[0], v[1])); },
           {A, Mat(row.array() + 1.5)});
  check_op("rope", [](auto&, const auto& v) { return weighted_sum(rope(v[0], 3, 2)); }, {random_matrix(6, 8, rng)});

  std::mt19937_64 arng(11);
  {
    AttentionLayout layout{2, 4, 4, {3, 4}, {3, 4}, true, 2};
    check_op(
        "attention causal",
        [layout](auto&, const auto& v) { return weighted_sum(attention(v[0], v[1], v[2], layout)); },
        {random_matrix(8, 6, arng), random_matrix(8, 6, arng), random_matrix(8, 6, arng)});
  }
  {
    AttentionLayout layout{2, 3, 5, {5, 2}, {}, false, 1};
    check_op(
        "attention cross",
        [layout](auto&, const auto& v) { return weighted_sum(attention(v[0], v[1], v[2], layout)); },
        {random_matrix(6, 4, arng), random_matrix(10, 4, arng), random_matrix(10, 4, arng)});
  }
  return out;
}

}  // namespace testing
