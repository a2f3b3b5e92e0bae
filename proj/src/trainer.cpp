#include <codembed/checkpoint.hpp>
#include <codembed/io.hpp>
#include <codembed/trainer.hpp>

#include <chrono>
#include <fstream>

namespace codembed {

namespace fs = std::filesystem;

std::string_view to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view label) {
  if (label == "f32") return Precision::F32;
  if (label == "f64") return Precision::F64;
  throw std::invalid_argument("unknown precision: \"" + std::string(label) + "\"");
}

namespace {

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument(key + ": expected an integer, got \"" + v + "\"");
  return x;
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  const long long x = parse_int(key, v);
  if (x < 0) throw std::invalid_argument(key + ": must be non-negative");
  return static_cast<std::size_t>(x);
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument(key + ": expected a number, got \"" + v + "\"");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(key + ": expected true or false, got \"" + v + "\"");
}

}  // namespace

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto& b = cfg.model.backbone;
  if (key == "steps") cfg.steps = parse_count(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_count(key, value);
  else if (key == "seed") {
    cfg.seed = static_cast<std::uint64_t>(parse_count(key, value));
    b.seed = cfg.seed;
  }
  else if (key == "temperature") cfg.loss.temperature = parse_real(key, value);
  else if (key == "lr") cfg.lr = parse_real(key, value);
  else if (key == "warmup_fraction") cfg.warmup_fraction = parse_real(key, value);
  else if (key == "min_lr_ratio") cfg.min_lr_ratio = parse_real(key, value);
  else if (key == "weight_decay") cfg.adam.weight_decay = parse_real(key, value);
  else if (key == "adam_beta1") cfg.adam.beta1 = parse_real(key, value);
  else if (key == "adam_beta2") cfg.adam.beta2 = parse_real(key, value);
  else if (key == "adam_eps") cfg.adam.eps = parse_real(key, value);
  else if (key == "grad_clip") cfg.grad_clip = parse_real(key, value);
  else if (key == "freeze_backbone") cfg.freeze_backbone = parse_bool(key, value);
  else if (key == "precision") cfg.precision = parse_precision(value);
  else if (key == "pooling") cfg.model.pooling = parse_pooling_kind(value);
  else if (key == "direction") cfg.loss.direction = parse_loss_direction(value);
  else if (key == "matryoshka_dims") {
    cfg.loss.matryoshka_dims.clear();
    for (const auto& s : split(value, ',')) cfg.loss.matryoshka_dims.push_back(static_cast<int>(parse_int(key, s)));
  } else if (key == "matryoshka_weights") {
    cfg.loss.matryoshka_weights.clear();
    for (const auto& s : split(value, ',')) cfg.loss.matryoshka_weights.push_back(parse_real(key, s));
  }
  else if (key == "vocab_size") b.vocab_size = static_cast<int>(parse_int(key, value));
  else if (key == "d_model") b.d_model = static_cast<int>(parse_int(key, value));
  else if (key == "n_layers") b.n_layers = static_cast<int>(parse_int(key, value));
  else if (key == "n_heads") b.n_heads = static_cast<int>(parse_int(key, value));
  else if (key == "d_ff") b.d_ff = static_cast<int>(parse_int(key, value));
  else if (key == "max_seq_len") b.max_seq_len = static_cast<int>(parse_int(key, value));
  else if (key == "position") b.position = parse_position_encoding(value);
  else if (key == "num_latents") cfg.model.latent.num_latents = static_cast<int>(parse_int(key, value));
  else if (key == "latent_ff_multiplier") cfg.model.latent.d_ff_multiplier = static_cast<int>(parse_int(key, value));
  else if (key == "train_data") {
    cfg.train_data.clear();
    for (const auto& s : split(value, ',')) {
      if (!s.empty()) cfg.train_data.push_back(s);
    }
  } else {
    throw std::invalid_argument("unknown config key \"" + key + "\"");
  }
}

TrainConfig parse_train_config(std::string_view text, const std::string& source) {
  TrainConfig cfg;
  const auto kv = parse_key_values(text, source);
  for (const auto& [key, value] : kv) {
    try {
      set_config_value(cfg, key, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(source + ": " + e.what());
    }
  }
  if (!kv.contains("matryoshka_dims")) {
    const auto d = LossConfig::defaults(cfg.model.backbone.d_model);
    cfg.loss.matryoshka_dims = d.matryoshka_dims;
    if (!kv.contains("matryoshka_weights")) cfg.loss.matryoshka_weights = d.matryoshka_weights;
  } else if (!kv.contains("matryoshka_weights")) {
    cfg.loss.matryoshka_weights.assign(cfg.loss.matryoshka_dims.size(), 1.0);
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const fs::path& path) { return parse_train_config(read_file(path), path.string()); }

void TrainConfig::validate() {
  model.backbone.seed = seed;
  model.backbone.validate();
  loss.validate(model.backbone.d_model);
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (steps < 1) fail("steps must be >= 1");
  if (batch_size < 2) fail("batch_size must be >= 2");
  if (!(lr > 0)) fail("lr must be positive");
  if (warmup_fraction < 0 || warmup_fraction > 1) fail("warmup_fraction must lie in [0, 1]");
  if (min_lr_ratio < 0 || min_lr_ratio > 1) fail("min_lr_ratio must lie in [0, 1]");
  if (grad_clip < 0) fail("grad_clip must be non-negative");
}

std::string to_config_text(const TrainConfig& cfg) {
  const auto& b = cfg.model.backbone;
  std::string s;
  auto put = [&s](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
  put("steps", std::to_string(cfg.steps));
  put("batch_size", std::to_string(cfg.batch_size));
  put("seed", std::to_string(cfg.seed));
  put("temperature", format_double(cfg.loss.temperature));
  std::string dims, weights;
  for (std::size_t i = 0; i < cfg.loss.matryoshka_dims.size(); ++i) {
    dims += (i ? "," : "") + std::to_string(cfg.loss.matryoshka_dims[i]);
    weights += (i ? "," : "") + format_double(cfg.loss.matryoshka_weights[i]);
  }
  put("matryoshka_dims", dims);
  put("matryoshka_weights", weights);
  put("direction", std::string(to_string(cfg.loss.direction)));
  put("pooling", std::string(to_string(cfg.model.pooling)));
  put("num_latents", std::to_string(cfg.model.latent.num_latents));
  put("latent_ff_multiplier", std::to_string(cfg.model.latent.d_ff_multiplier));
  put("lr", format_double(cfg.lr));
  put("warmup_fraction", format_double(cfg.warmup_fraction));
  put("min_lr_ratio", format_double(cfg.min_lr_ratio));
  put("weight_decay", format_double(cfg.adam.weight_decay));
  put("adam_beta1", format_double(cfg.adam.beta1));
  put("adam_beta2", format_double(cfg.adam.beta2));
  put("adam_eps", format_double(cfg.adam.eps));
  put("grad_clip", format_double(cfg.grad_clip));
  put("freeze_backbone", cfg.freeze_backbone ? "true" : "false");
  put("precision", std::string(to_string(cfg.precision)));
  put("vocab_size", std::to_string(b.vocab_size));
  put("d_model", std::to_string(b.d_model));
  put("n_layers", std::to_string(b.n_layers));
  put("n_heads", std::to_string(b.n_heads));
  put("d_ff", std::to_string(b.d_ff));
  put("max_seq_len", std::to_string(b.max_seq_len));
  put("position", std::string(to_string(b.position)));
  std::string data;
  for (std::size_t i = 0; i < cfg.train_data.size(); ++i) data += (i ? "," : "") + cfg.train_data[i];
  if (!data.empty()) put("train_data", data);
  return s;
}

template <typename Scalar>
Var<Scalar> batch_loss(EmbeddingModel<Scalar>& model, Tape<Scalar>& tape, const TrainingBatch& batch,
                       const LossConfig& loss) {
  std::vector<EncodeInput> queries, documents;
  queries.reserve(batch.size());
  documents.reserve(batch.size());
  for (const auto& p : batch.pairs) {
    queries.push_back({p.task, Role::Query, p.query});
    documents.push_back({p.task, Role::Document, p.document});
  }
  Var<Scalar> q = model.encode(tape, queries);
  Var<Scalar> d = model.encode(tape, documents);
  return matryoshka_loss(q, d, loss);
}

template <typename Scalar>
Trainer<Scalar>::Trainer(EmbeddingModel<Scalar>& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), params_(model.parameters()), optimizer_(params_, cfg.adam) {
  cfg_.validate();
  model_.set_backbone_trainable(!cfg_.freeze_backbone);
}

template <typename Scalar>
StepReport Trainer<Scalar>::train_step(const TrainingBatch& batch) {
  const std::size_t step = optimizer_.step_count() + 1;
  for (auto* p : params_) {
    if (!p->value.allFinite()) {
      throw TrainingError("step " + std::to_string(step) + ": non-finite values in parameter " + p->name);
    }
    p->zero_grad();
  }

  Tape<Scalar> tape;
  Var<Scalar> loss;
  try {
    loss = batch_loss(model_, tape, batch, cfg_.loss);
  } catch (const NonFiniteError& e) {
    throw TrainingError("step " + std::to_string(step) + ": " + e.what());
  } catch (const NormalizationError& e) {
    throw TrainingError("step " + std::to_string(step) + ": " + e.what());
  }
  const double loss_value = static_cast<double>(loss.item());
  if (!std::isfinite(loss_value)) throw TrainingError("step " + std::to_string(step) + ": loss is non-finite");
  tape.backward(loss);
  last_tape_size_ = tape.size();
  tape.reset();

  for (const auto* p : params_) {
    if (p->trainable && !p->grad.allFinite()) {
      throw TrainingError("step " + std::to_string(step) + ": non-finite gradient in " + p->name);
    }
  }
  const double norm = clip_gradients(params_, cfg_.grad_clip);
  const double lr = cfg_.schedule().at(step - 1);
  optimizer_.step(lr);
  return StepReport{step, loss_value, norm, lr};
}

namespace {

template <typename Scalar>
FitResult fit_impl(const TrainConfig& cfg, const std::vector<PairRecord>& pairs, const fs::path& out_dir,
                   const FitOptions& options) {
  if (pairs.size() < cfg.batch_size) {
    throw std::invalid_argument("fit: " + std::to_string(pairs.size()) + " pairs cannot fill a batch of " +
                                std::to_string(cfg.batch_size));
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  EmbeddingModel<Scalar> model(cfg.model);
  save_checkpoint(out_dir / "untrained", model, cfg.loss);
  Trainer<Scalar> trainer(model, cfg);

  FitResult result;
  std::string metrics, timing;
  const auto start = std::chrono::steady_clock::now();
  std::uint64_t epoch = 0;
  auto batches = make_batches(pairs, cfg.batch_size, cfg.seed, epoch);
  std::size_t cursor = 0;
  for (auto& p : batches.front().pairs) result.first_batch_ids.push_back(p.id);

  for (std::size_t s = 0; s < cfg.steps; ++s) {
    if (cursor == batches.size()) {
      batches = make_batches(pairs, cfg.batch_size, cfg.seed, ++epoch);
      cursor = 0;
    }
    const StepReport r = trainer.train_step(batches[cursor++]);
    result.reports.push_back(r);
    metrics += "{\"step\":" + std::to_string(r.step) + ",\"loss\":" + format_double(r.loss) +
               ",\"grad_norm\":" + format_double(r.grad_norm) + ",\"lr\":" + format_double(r.lr) + "}\n";
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    timing += "{\"step\":" + std::to_string(r.step) + ",\"wall_seconds\":" + format_double(wall) + "}\n";
    if (options.on_step) options.on_step(r);
  }

  result.checkpoint_dir = out_dir / "checkpoint";
  save_checkpoint(result.checkpoint_dir, model, cfg.loss);
  result.model_id = read_checkpoint_info(result.checkpoint_dir).model_id;
  std::string ids;
  for (const auto& id : result.first_batch_ids) ids += id + "\n";
  write_file_atomic(out_dir / "metrics.jsonl", metrics);
  write_file_atomic(out_dir / "timing.jsonl", timing);
  write_file_atomic(out_dir / "run.cfg", to_config_text(cfg));
  write_file_atomic(out_dir / "first_batch.txt", ids);
  return result;
}

}  // namespace

FitResult fit(TrainConfig cfg, const std::vector<PairRecord>& pairs, const fs::path& out_dir,
              const FitOptions& options) {
  cfg.validate();
  return cfg.precision == Precision::F64 ? fit_impl<double>(cfg, pairs, out_dir, options)
                                         : fit_impl<float>(cfg, pairs, out_dir, options);
}

template Var<float> batch_loss(EmbeddingModel<float>&, Tape<float>&, const TrainingBatch&, const LossConfig&);
template Var<double> batch_loss(EmbeddingModel<double>&, Tape<double>&, const TrainingBatch&, const LossConfig&);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace codembed
