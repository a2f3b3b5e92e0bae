#pragma once

// Checkpoint directory layout:
//   manifest.txt  `key = value` text; config under `config.*`, then one line
//                 per tensor: `<tensor name> = <rows>x<cols> @ <byte offset>`
//   weights.bin   little-endian float32 values of every tensor, row-major,
//                 concatenated in manifest order
// Both files are written atomically (temp file, then rename).

#include <codembed/loss.hpp>
#include <codembed/model.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace codembed {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointInfo {
  ModelConfig model;
  LossConfig loss;
  std::string model_id;
};

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& dir, const EmbeddingModel<Scalar>& model, const LossConfig& loss);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

/// Loads weights into an existing model. The manifest's configuration must
/// match the model's, and every tensor shape must agree.
template <typename Scalar>
void load_weights(const std::filesystem::path& dir, EmbeddingModel<Scalar>& model);

template <typename Scalar>
EmbeddingModel<Scalar> load_model(const std::filesystem::path& dir, CheckpointInfo* info = nullptr);

}  // namespace codembed
