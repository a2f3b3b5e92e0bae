#pragma once

#include <codembed/ops.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testing {

using codembed::Index;
using codembed::Matrix;
using codembed::Tape;
using codembed::Var;
using Mat = Matrix<double>;

inline Mat random_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_relative = 0;
  std::size_t coordinates = 0;
  std::size_t within = 0;  // coordinates under the tolerance passed to gradcheck
  double fraction_within() const { return coordinates ? double(within) / double(coordinates) : 1.0; }
};

/// Scalar function of tape variables built from `inputs`.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Analytic gradient of fn against central differences with step h, over
/// every coordinate of every input.
inline GradCheck gradcheck(const ScalarFn& fn, std::vector<Mat> inputs, double tolerance, double h = 1e-4) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& m : inputs) vars.push_back(tape.variable(m));
  Var<double> out = fn(tape, vars);
  tape.backward(out);
  std::vector<Mat> analytic;
  for (const auto& v : vars) analytic.push_back(v.grad());

  auto eval = [&](const std::vector<Mat>& ins) {
    Tape<double> t(false);
    std::vector<Var<double>> vs;
    for (const auto& m : ins) vs.push_back(t.constant(m));
    return fn(t, vs).item();
  };

  GradCheck r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Index c = 0; c < inputs[i].size(); ++c) {
      const double x0 = inputs[i].data()[c];
      inputs[i].data()[c] = x0 + h;
      const double up = eval(inputs);
      inputs[i].data()[c] = x0 - h;
      const double down = eval(inputs);
      inputs[i].data()[c] = x0;
      const double numeric = (up - down) / (2 * h);
      const double rel = relative_error(analytic[i].data()[c], numeric);
      r.max_relative = std::max(r.max_relative, rel);
      ++r.coordinates;
      if (rel <= tolerance) ++r.within;
    }
  }
  return r;
}

/// Reduce an arbitrary-shaped op output to a scalar with fixed random weights,
/// so every output entry contributes a distinct gradient.
inline Var<double> weighted_sum(const Var<double>& out, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  Mat w = random_matrix(out.rows(), out.cols(), rng);
  return codembed::sum(codembed::mul(out, out.tape()->constant(w)));
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("codembed_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
