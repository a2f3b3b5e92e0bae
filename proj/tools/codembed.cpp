// codembed command-line interface: gen-data, train, embed, eval, ablate, serve.

#include <codembed/checkpoint.hpp>
#include <codembed/dataset.hpp>
#include <codembed/evaluator.hpp>
#include <codembed/io.hpp>
#include <codembed/service.hpp>
#include <codembed/trainer.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace codembed;

namespace {

/// Removes whatever a failed command created under --out.
class OutputGuard {
 public:
  explicit OutputGuard(fs::path out) : out_(std::move(out)) {
    existed_ = fs::exists(out_);
    if (existed_ && fs::is_directory(out_)) {
      for (const auto& e : fs::directory_iterator(out_)) before_.insert(e.path());
    }
    fs::create_directories(out_);
  }
  ~OutputGuard() {
    if (committed_) return;
    std::error_code ec;
    if (!existed_) {
      fs::remove_all(out_, ec);
      return;
    }
    for (const auto& e : fs::directory_iterator(out_, ec)) {
      if (!before_.contains(e.path())) fs::remove_all(e.path(), ec);
    }
  }
  void commit() { committed_ = true; }

 private:
  fs::path out_;
  bool existed_ = false;
  bool committed_ = false;
  std::set<fs::path> before_;
};

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--config", c.config, "Run config file (key = value)");
  auto* o = cmd->add_option("--out", c.out, "Output directory; nothing outside it is written");
  if (out_required) o->required();
}

TrainConfig resolve_config(const Common& c, const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  std::string text = c.config.empty() ? std::string() : read_file(c.config);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got \"" + kv + "\"");
    text += "\n" + kv;
  }
  if (c.seed) text += "\nseed = " + std::to_string(*c.seed);
  // Later lines override earlier ones: fold duplicates before parsing.
  std::map<std::string, std::string> merged;
  std::vector<std::string> order;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config: expected `key = value`, got \"" + t + "\"");
    const std::string key = trim(t.substr(0, eq));
    if (!merged.contains(key)) order.push_back(key);
    merged[key] = trim(t.substr(eq + 1));
  }
  std::string folded;
  for (const auto& k : order) folded += k + " = " + merged[k] + "\n";
  cfg = parse_train_config(folded, c.config.empty() ? "<flags>" : c.config);
  return cfg;
}

std::vector<PairRecord> load_all_pairs(const std::vector<std::string>& paths) {
  if (paths.empty()) throw std::invalid_argument("no training data: pass --train or set train_data in the config");
  std::vector<PairRecord> all;
  std::set<std::string> ids;
  for (const auto& p : paths) {
    for (auto& rec : load_pairs(p)) {
      if (!ids.insert(rec.id).second) throw DatasetError(p + ": id \"" + rec.id + "\" already defined in another file");
      all.push_back(std::move(rec));
    }
  }
  return all;
}

FitOptions progress_printer(bool quiet, std::size_t every) {
  FitOptions opt;
  if (!quiet) {
    opt.on_step = [every](const StepReport& r) {
      if (r.step == 1 || r.step % every == 0) {
        std::fprintf(stderr, "step %5zu  loss %.5f  grad_norm %.4f  lr %.3g\n", r.step, r.loss, r.grad_norm, r.lr);
      }
    };
  }
  return opt;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& part : split(s, ',')) {
    if (!part.empty()) out.push_back(std::stoi(part));
  }
  return out;
}

ServiceHost* g_host = nullptr;

void on_signal(int) {
  if (g_host) g_host->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"codembed: task-prefixed code embeddings with contrastive training"};
  app.require_subcommand(1);

  Common gen_c, train_c, embed_c, eval_c, ablate_c, serve_c;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic planted-pair corpus");
  add_common(gen, gen_c);
  std::size_t gen_pairs = 512, gen_heldout = 0;
  gen->add_option("--pairs", gen_pairs, "Training pairs (>= 16)");
  gen->add_option("--heldout", gen_heldout, "Held-out queries (0: max(16, pairs/4))");

  auto* train = app.add_subcommand("train", "Contrastive training run");
  add_common(train, train_c);
  std::vector<std::string> train_files, train_sets;
  bool train_quiet = false;
  std::size_t log_every = 25;
  train->add_option("--train", train_files, "Pair file(s) (line-delimited JSON)");
  train->add_option("--set", train_sets, "Config override key=value (repeatable)");
  train->add_flag("--quiet", train_quiet, "No progress output");
  train->add_option("--log-every", log_every, "Progress interval in steps");

  auto* embed = app.add_subcommand("embed", "Embed a text file (one text per line)");
  add_common(embed, embed_c);
  std::string embed_ckpt, embed_input, embed_task = "nl2code", embed_role = "query", embed_format = "bin";
  int embed_dims = 0;
  embed->add_option("--checkpoint", embed_ckpt, "Checkpoint directory")->required();
  embed->add_option("--input", embed_input, "Input text file")->required();
  embed->add_option("--task", embed_task, "Task label");
  embed->add_option("--role", embed_role, "query or document");
  embed->add_option("--dims", embed_dims, "Output width (default d_model)");
  embed->add_option("--format", embed_format, "bin or jsonl")->check(CLI::IsMember({"bin", "jsonl"}));

  auto* eval = app.add_subcommand("eval", "Retrieval evaluation on a corpus/queries/qrels directory");
  add_common(eval, eval_c);
  std::string eval_ckpt, eval_data, eval_dims;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", eval_data, "Directory with corpus.jsonl, queries.jsonl, qrels.tsv")->required();
  eval->add_option("--dims", eval_dims, "Comma-separated widths (default: trained widths)");

  auto* ablate = app.add_subcommand("ablate", "Pooling ablation: one run per pooling kind");
  add_common(ablate, ablate_c);
  std::vector<std::string> ablate_train, ablate_sets;
  std::string ablate_heldout, ablate_kinds = "last_token,mean,latent_attention";
  bool ablate_quiet = false;
  ablate->add_option("--train", ablate_train, "Pair file(s)");
  ablate->add_option("--heldout", ablate_heldout, "Held-out retrieval directory")->required();
  ablate->add_option("--kinds", ablate_kinds, "Comma-separated pooling kinds");
  ablate->add_option("--set", ablate_sets, "Config override key=value (repeatable)");
  ablate->add_flag("--quiet", ablate_quiet, "No progress output");

  auto* serve = app.add_subcommand("serve", "HTTP embedding service");
  add_common(serve, serve_c, /*out_required=*/false);
  std::string serve_ckpt, serve_host = "127.0.0.1";
  int serve_port = 8080;
  serve->add_option("--checkpoint", serve_ckpt, "Checkpoint directory")->required();
  serve->add_option("--host", serve_host, "Bind address");
  serve->add_option("--port", serve_port, "Port (0 picks a free one)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      OutputGuard guard(gen_c.out);
      PlantedOptions opt;
      opt.heldout_queries = gen_heldout;
      const auto corpus = generate_planted(gen_pairs, gen_c.seed.value_or(42), opt);
      write_pairs(fs::path(gen_c.out) / "train.jsonl", corpus.train);
      write_retrieval_dataset(fs::path(gen_c.out) / "heldout", corpus.heldout);
      guard.commit();
      std::cout << "wrote " << corpus.train.size() << " training pairs and " << corpus.heldout.queries.size()
                << " held-out queries to " << gen_c.out << "\n";
    } else if (train->parsed()) {
      TrainConfig cfg = resolve_config(train_c, train_sets);
      if (!train_files.empty()) cfg.train_data = train_files;
      const auto pairs = load_all_pairs(cfg.train_data);
      OutputGuard guard(train_c.out);
      EmbeddingModel<float> probe(cfg.model);
      std::cerr << "parameters: " << probe.parameter_count() << " (backbone "
                << cfg.model.backbone.parameter_count() << ")\n";
      const FitResult r = fit(cfg, pairs, train_c.out, progress_printer(train_quiet, log_every));
      guard.commit();
      std::cout << "checkpoint " << r.checkpoint_dir.string() << " (" << r.model_id << "), final loss "
                << r.reports.back().loss << "\n";
    } else if (embed->parsed()) {
      CheckpointInfo info;
      const auto model = load_model<float>(embed_ckpt, &info);
      const int dims = embed_dims > 0 ? embed_dims : model.d_model();
      const TaskType task = parse_task(embed_task);
      const Role role = parse_role(embed_role);
      std::vector<EncodeInput> inputs;
      {
        std::istringstream ss(read_file(embed_input));
        std::string line;
        while (std::getline(ss, line)) inputs.push_back({task, role, line});
      }
      const Matrix<double> vectors = truncate_normalize(model.embed_raw(inputs).cast<double>(), dims);
      OutputGuard guard(embed_c.out);
      std::string out;
      if (embed_format == "bin") {
        append_le64(out, static_cast<std::uint64_t>(vectors.rows()));
        append_le64(out, static_cast<std::uint64_t>(vectors.cols()));
        for (Index i = 0; i < vectors.size(); ++i) append_le32(out, static_cast<float>(vectors.data()[i]));
        write_file_atomic(fs::path(embed_c.out) / "vectors.bin", out);
      } else {
        for (Index i = 0; i < vectors.rows(); ++i) {
          nlohmann::json row = nlohmann::json::array();
          for (Index j = 0; j < vectors.cols(); ++j) row.push_back(static_cast<float>(vectors(i, j)));
          out += row.dump() + "\n";
        }
        write_file_atomic(fs::path(embed_c.out) / "vectors.jsonl", out);
      }
      guard.commit();
      std::cout << "embedded " << vectors.rows() << " texts at width " << dims << "\n";
    } else if (eval->parsed()) {
      CheckpointInfo info;
      const auto model = load_model<float>(eval_ckpt, &info);
      const auto ds = load_retrieval_dataset(eval_data);
      const std::vector<int> dims = eval_dims.empty() ? info.loss.matryoshka_dims : parse_int_list(eval_dims);
      const auto reports = run_eval(ds, model, dims, {true, true, info.model_id});
      OutputGuard guard(eval_c.out);
      const std::string table = format_report_table(reports);
      write_file_atomic(fs::path(eval_c.out) / "report.txt", table);
      write_file_atomic(fs::path(eval_c.out) / "report.jsonl", format_report_jsonl(reports));
      guard.commit();
      std::cout << table;
    } else if (ablate->parsed()) {
      TrainConfig cfg = resolve_config(ablate_c, ablate_sets);
      if (!ablate_train.empty()) cfg.train_data = ablate_train;
      const auto pairs = load_all_pairs(cfg.train_data);
      const auto heldout = load_retrieval_dataset(ablate_heldout);
      std::vector<PoolingKind> kinds;
      for (const auto& k : split(ablate_kinds, ',')) kinds.push_back(parse_pooling_kind(k));
      OutputGuard guard(ablate_c.out);
      const auto result = run_ablation(pairs, heldout, cfg, kinds, ablate_c.out, progress_printer(ablate_quiet, 50));
      write_file_atomic(fs::path(ablate_c.out) / "ablation.txt", result.table);
      write_file_atomic(fs::path(ablate_c.out) / "ablation.csv", result.csv);
      write_file_atomic(fs::path(ablate_c.out) / "ablation_baseline.csv", result.baseline_csv);
      guard.commit();
      std::cout << result.table;
    } else if (serve->parsed()) {
      ServiceHost host;
      g_host = &host;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const int port = host.start(serve_host, serve_port);
      host.load_async(serve_ckpt);
      std::cerr << "listening on " << serve_host << ":" << port << "\n";
      host.wait();
      g_host = nullptr;
      if (!host.load_error().empty()) {
        std::cerr << "error: " << host.load_error() << "\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
