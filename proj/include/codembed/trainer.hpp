#pragma once

// Contrastive fine-tuning: prefix -> tokenize -> backbone -> pool for every
// query and document of a batch, Matryoshka InfoNCE, backward, clip, AdamW.

#include <codembed/dataset.hpp>
#include <codembed/loss.hpp>
#include <codembed/model.hpp>
#include <codembed/optimizer.hpp>

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace codembed {

enum class Precision { F32, F64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view label);

/// Every hyperparameter of a run. Serialized as `key = value` text; see
/// to_config_text() for the key names.
struct TrainConfig {
  ModelConfig model;
  LossConfig loss = LossConfig::defaults(64);
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;  // model init and batch order
  double lr = 3e-4;
  double warmup_fraction = 0.05;
  double min_lr_ratio = 0.1;
  AdamWConfig adam;
  double grad_clip = 1.0;
  bool freeze_backbone = false;
  Precision precision = Precision::F32;
  std::vector<std::string> train_data;

  LearningRateSchedule schedule() const { return {lr, warmup_fraction, min_lr_ratio, steps}; }
  /// Checks every field and normalizes the Matryoshka weights.
  void validate();
};

/// Defaults overridden by the keys in `text`. Unknown keys are rejected.
/// Matryoshka dims default to {d, d/2, d/4, d/8} of the configured d_model.
TrainConfig parse_train_config(std::string_view text, const std::string& source = "<config>");
TrainConfig load_train_config(const std::filesystem::path& path);
std::string to_config_text(const TrainConfig& cfg);

/// Applies one `key = value` override (same keys as the config file).
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepReport {
  std::size_t step = 0;  // one-based
  double loss = 0;
  double grad_norm = 0;
  double lr = 0;
};

/// Loss of one batch on `tape`: queries take query prefixes, documents take
/// document prefixes, each per its pair's task.
template <typename Scalar>
Var<Scalar> batch_loss(EmbeddingModel<Scalar>& model, Tape<Scalar>& tape, const TrainingBatch& batch,
                       const LossConfig& loss);

template <typename Scalar>
class Trainer {
 public:
  Trainer(EmbeddingModel<Scalar>& model, const TrainConfig& cfg);

  /// Raises TrainingError naming the step and tensor if the loss or any
  /// gradient is non-finite; parameters are not updated in that case.
  StepReport train_step(const TrainingBatch& batch);

  std::size_t steps_taken() const { return optimizer_.step_count(); }
  std::size_t last_tape_size() const { return last_tape_size_; }

 private:
  EmbeddingModel<Scalar>& model_;
  TrainConfig cfg_;
  std::vector<Parameter<Scalar>*> params_;
  AdamW<Scalar> optimizer_;
  std::size_t last_tape_size_ = 0;
};

struct FitOptions {
  std::function<void(const StepReport&)> on_step;
};

struct FitResult {
  std::filesystem::path checkpoint_dir;
  std::string model_id;
  std::vector<StepReport> reports;
  std::vector<std::string> first_batch_ids;
};

/// Trains from scratch (init from cfg.seed) for cfg.steps steps, cycling
/// epochs of make_batches(pairs, batch_size, seed, epoch). Writes into
/// out_dir: checkpoint/, untrained/ (the initial weights), metrics.jsonl
/// (step, loss, grad_norm, lr), timing.jsonl (wall time), run.cfg and
/// first_batch.txt.
FitResult fit(TrainConfig cfg, const std::vector<PairRecord>& pairs, const std::filesystem::path& out_dir,
              const FitOptions& options = {});

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace codembed
