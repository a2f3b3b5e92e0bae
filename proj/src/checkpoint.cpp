#include <codembed/checkpoint.hpp>
#include <codembed/io.hpp>

#include <cstdio>

namespace codembed {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kFormat = "codembed-checkpoint-v1";

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

std::string config_text(const ModelConfig& m, const LossConfig& loss) {
  const auto& b = m.backbone;
  std::string s;
  auto put = [&s](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
  put("config.vocab_size", std::to_string(b.vocab_size));
  put("config.d_model", std::to_string(b.d_model));
  put("config.n_layers", std::to_string(b.n_layers));
  put("config.n_heads", std::to_string(b.n_heads));
  put("config.d_ff", std::to_string(b.d_ff));
  put("config.max_seq_len", std::to_string(b.max_seq_len));
  put("config.seed", std::to_string(b.seed));
  put("config.position", std::string(to_string(b.position)));
  put("config.pooling", std::string(to_string(m.pooling)));
  put("config.num_latents", std::to_string(m.latent.num_latents));
  put("config.latent_ff_multiplier", std::to_string(m.latent.d_ff_multiplier));
  put("config.temperature", format_double(loss.temperature));
  put("config.matryoshka_dims", join_ints(loss.matryoshka_dims));
  put("config.matryoshka_weights", join_doubles(loss.matryoshka_weights));
  put("config.direction", std::string(to_string(loss.direction)));
  return s;
}

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint manifest: missing key \"" + key + "\"");
  return it->second;
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint manifest: \"" + key + "\" is not an integer: " + v);
  }
}

struct TensorEntry {
  Index rows = 0, cols = 0;
  std::size_t offset = 0;
};

TensorEntry parse_entry(const std::string& name, const std::string& v) {
  unsigned long long r = 0, c = 0, off = 0;
  char tail = 0;
  if (std::sscanf(v.c_str(), "%llux%llu @ %llu%c", &r, &c, &off, &tail) != 3) {
    throw CheckpointError("checkpoint manifest: bad tensor entry for \"" + name + "\": " + v);
  }
  return {static_cast<Index>(r), static_cast<Index>(c), static_cast<std::size_t>(off)};
}

std::map<std::string, std::string> read_manifest(const fs::path& dir) {
  std::string text;
  try {
    text = read_file(dir / "manifest.txt");
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
  auto kv = parse_key_values(text, (dir / "manifest.txt").string());
  if (require(kv, "format") != kFormat) throw CheckpointError("checkpoint manifest: unsupported format " + kv["format"]);
  return kv;
}

CheckpointInfo info_from(const std::map<std::string, std::string>& kv) {
  CheckpointInfo info;
  auto& b = info.model.backbone;
  auto i = [&kv](const std::string& k) { return to_int(k, require(kv, k)); };
  try {
    b.vocab_size = static_cast<int>(i("config.vocab_size"));
    b.d_model = static_cast<int>(i("config.d_model"));
    b.n_layers = static_cast<int>(i("config.n_layers"));
    b.n_heads = static_cast<int>(i("config.n_heads"));
    b.d_ff = static_cast<int>(i("config.d_ff"));
    b.max_seq_len = static_cast<int>(i("config.max_seq_len"));
    b.seed = static_cast<std::uint64_t>(std::stoull(require(kv, "config.seed")));
    b.position = parse_position_encoding(require(kv, "config.position"));
    info.model.pooling = parse_pooling_kind(require(kv, "config.pooling"));
    info.model.latent.num_latents = static_cast<int>(i("config.num_latents"));
    info.model.latent.d_ff_multiplier = static_cast<int>(i("config.latent_ff_multiplier"));
    info.loss.temperature = std::stod(require(kv, "config.temperature"));
    for (const auto& s : split(require(kv, "config.matryoshka_dims"), ',')) {
      info.loss.matryoshka_dims.push_back(static_cast<int>(to_int("config.matryoshka_dims", s)));
    }
    for (const auto& s : split(require(kv, "config.matryoshka_weights"), ',')) {
      info.loss.matryoshka_weights.push_back(std::stod(s));
    }
    info.loss.direction = parse_loss_direction(require(kv, "config.direction"));
    b.validate();
    info.loss.validate(b.d_model);
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint manifest: ") + e.what());
  }
  info.model_id = require(kv, "model_id");
  return info;
}

char hex_digit(unsigned v) { return "0123456789abcdef"[v & 0xf]; }

}  // namespace

template <typename Scalar>
void save_checkpoint(const fs::path& dir, const EmbeddingModel<Scalar>& model, const LossConfig& loss) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  std::string blob;
  std::string tensors;
  for (const auto* p : model.parameters()) {
    tensors += p->name + " = " + std::to_string(p->value.rows()) + "x" + std::to_string(p->value.cols()) + " @ " +
               std::to_string(blob.size()) + "\n";
    for (Index k = 0; k < p->value.size(); ++k) append_le32(blob, static_cast<float>(p->value.data()[k]));
  }
  const std::string config = config_text(model.config(), loss);
  const std::uint64_t h = fnv1a64(blob, fnv1a64(config));
  std::string id = "codembed-";
  for (int s = 60; s >= 0; s -= 4) id.push_back(hex_digit(static_cast<unsigned>(h >> s)));

  std::string manifest;
  manifest += "format = " + std::string(kFormat) + "\n";
  manifest += "model_id = " + id + "\n";
  manifest += "weights = weights.bin\n";
  manifest += config;
  manifest += tensors;
  try {
    write_file_atomic(dir / "weights.bin", blob);
    write_file_atomic(dir / "manifest.txt", manifest);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) { return info_from(read_manifest(dir)); }

template <typename Scalar>
void load_weights(const fs::path& dir, EmbeddingModel<Scalar>& model) {
  const auto kv = read_manifest(dir);
  const CheckpointInfo info = info_from(kv);
  if (!(info.model == model.config())) {
    throw CheckpointError("checkpoint " + dir.string() + ": manifest configuration disagrees with the model");
  }
  std::string blob;
  try {
    blob = read_file(dir / require(kv, "weights"));
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  std::size_t expected_tensors = 0;
  for (const auto& [key, value] : kv) {
    if (key.find("config.") != 0 && key != "format" && key != "model_id" && key != "weights") ++expected_tensors;
  }
  auto params = model.parameters();
  if (expected_tensors != params.size()) {
    throw CheckpointError("checkpoint " + dir.string() + ": manifest lists " + std::to_string(expected_tensors) +
                          " tensors, model has " + std::to_string(params.size()));
  }
  for (auto* p : params) {
    auto it = kv.find(p->name);
    if (it == kv.end()) throw CheckpointError("checkpoint " + dir.string() + ": missing tensor " + p->name);
    const TensorEntry e = parse_entry(p->name, it->second);
    if (e.rows != p->value.rows() || e.cols != p->value.cols()) {
      throw CheckpointError("checkpoint tensor " + p->name + ": shape " + shape_string(e.rows, e.cols) +
                            " disagrees with model " + shape_string(p->value));
    }
    const std::size_t n = static_cast<std::size_t>(p->value.size());
    if (e.offset + 4 * n > blob.size()) {
      throw CheckpointError("checkpoint tensor " + p->name + ": data runs past end of weights blob");
    }
    for (std::size_t k = 0; k < n; ++k) {
      p->value.data()[k] = static_cast<Scalar>(read_le32(bytes + e.offset + 4 * k));
    }
    p->zero_grad();
  }
}

template <typename Scalar>
EmbeddingModel<Scalar> load_model(const fs::path& dir, CheckpointInfo* info) {
  CheckpointInfo meta = read_checkpoint_info(dir);
  EmbeddingModel<Scalar> model(meta.model);
  load_weights(dir, model);
  if (info) *info = std::move(meta);
  return model;
}

template void save_checkpoint(const fs::path&, const EmbeddingModel<float>&, const LossConfig&);
template void save_checkpoint(const fs::path&, const EmbeddingModel<double>&, const LossConfig&);
template void load_weights(const fs::path&, EmbeddingModel<float>&);
template void load_weights(const fs::path&, EmbeddingModel<double>&);
template EmbeddingModel<float> load_model(const fs::path&, CheckpointInfo*);
template EmbeddingModel<double> load_model(const fs::path&, CheckpointInfo*);

}  // namespace codembed
