#include <codembed/dataset.hpp>

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

namespace codembed {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << contents;
  if (!out) throw DatasetError("write failed for " + path.string());
}

std::vector<std::string> split_lines(const std::string& contents) {
  std::vector<std::string> lines;
  std::istringstream ss(contents);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::string required_string(const ordered_json& obj, const char* key) {
  if (!obj.contains(key)) throw std::invalid_argument(std::string("missing field \"") + key + "\"");
  const auto& v = obj.at(key);
  if (!v.is_string()) throw std::invalid_argument(std::string("field \"") + key + "\" must be a string");
  return v.get<std::string>();
}

std::map<std::string, TextRecord> load_text_records(const fs::path& path) {
  std::map<std::string, TextRecord> out;
  std::vector<std::string> errors;
  const auto lines = split_lines(read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const std::string where = path.string() + ":" + std::to_string(i + 1) + ": ";
    try {
      const auto obj = ordered_json::parse(lines[i]);
      std::string id = required_string(obj, "id");
      TextRecord rec{required_string(obj, "text"), parse_task(required_string(obj, "task"))};
      if (id.empty()) throw std::invalid_argument("empty id");
      if (!out.emplace(id, std::move(rec)).second) throw std::invalid_argument("duplicate id \"" + id + "\"");
    } catch (const std::exception& e) {
      errors.push_back(where + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg;
    for (const auto& e : errors) msg += e + "\n";
    throw DatasetError(msg);
  }
  return out;
}

void write_text_records(const fs::path& path, const std::map<std::string, TextRecord>& records) {
  std::string out;
  for (const auto& [id, rec] : records) {
    ordered_json obj;
    obj["id"] = id;
    obj["text"] = rec.text;
    obj["task"] = std::string(to_string(rec.task));
    out += obj.dump() + "\n";
  }
  write_file(path, out);
}

/// splitmix64 finalizer
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void RetrievalDataset::validate() const {
  for (const auto& [qid, docs] : qrels) {
    if (!queries.contains(qid)) throw DatasetError("qrels: unknown query id \"" + qid + "\"");
    for (const auto& [did, grade] : docs) {
      if (!corpus.contains(did)) throw DatasetError("qrels: unknown doc id \"" + did + "\" for query \"" + qid + "\"");
      if (grade < 0) throw DatasetError("qrels: negative grade for (" + qid + ", " + did + ")");
    }
  }
}

std::vector<PairRecord> parse_pairs(const std::string& contents, const std::string& source) {
  std::vector<PairRecord> pairs;
  std::vector<std::string> errors;
  std::unordered_map<std::string, std::size_t> first_line;
  const auto lines = split_lines(contents);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const std::size_t line_no = i + 1;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    try {
      const auto obj = ordered_json::parse(lines[i]);
      if (!obj.is_object()) throw std::invalid_argument("record must be a JSON object");
      PairRecord rec;
      rec.id = required_string(obj, "id");
      rec.query = required_string(obj, "query");
      rec.document = required_string(obj, "document");
      rec.task = parse_task(required_string(obj, "task"));
      if (rec.id.empty()) throw std::invalid_argument("empty field \"id\"");
      if (rec.query.empty()) throw std::invalid_argument("empty field \"query\"");
      if (rec.document.empty()) throw std::invalid_argument("empty field \"document\"");
      auto [it, inserted] = first_line.emplace(rec.id, line_no);
      if (!inserted) {
        throw std::invalid_argument("duplicate id \"" + rec.id + "\" (lines " + std::to_string(it->second) +
                                    " and " + std::to_string(line_no) + ")");
      }
      pairs.push_back(std::move(rec));
    } catch (const std::exception& e) {
      errors.push_back(where + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg;
    for (const auto& e : errors) msg += e + "\n";
    throw DatasetError(msg);
  }
  return pairs;
}

std::vector<PairRecord> load_pairs(const fs::path& path) { return parse_pairs(read_file(path), path.string()); }

void write_pairs(const fs::path& path, const std::vector<PairRecord>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    ordered_json obj;
    obj["id"] = p.id;
    obj["query"] = p.query;
    obj["document"] = p.document;
    obj["task"] = std::string(to_string(p.task));
    out += obj.dump() + "\n";
  }
  write_file(path, out);
}

RetrievalDataset load_retrieval_dataset(const fs::path& dir) {
  RetrievalDataset ds;
  ds.corpus = load_text_records(dir / "corpus.jsonl");
  ds.queries = load_text_records(dir / "queries.jsonl");
  const auto lines = split_lines(read_file(dir / "qrels.tsv"));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    std::vector<std::string> fields;
    std::istringstream ss(lines[i]);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (i == 0 && !fields.empty() && fields[0] == "query-id") continue;
    const std::string where = (dir / "qrels.tsv").string() + ":" + std::to_string(i + 1) + ": ";
    if (fields.size() != 3) throw DatasetError(where + "expected 3 tab-separated fields");
    int grade = 0;
    try {
      std::size_t used = 0;
      grade = std::stoi(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DatasetError(where + "grade \"" + fields[2] + "\" is not an integer");
    }
    ds.qrels[fields[0]][fields[1]] = grade;
  }
  ds.validate();
  return ds;
}

void write_retrieval_dataset(const fs::path& dir, const RetrievalDataset& ds) {
  fs::create_directories(dir);
  write_text_records(dir / "corpus.jsonl", ds.corpus);
  write_text_records(dir / "queries.jsonl", ds.queries);
  std::string out = "query-id\tdoc-id\tgrade\n";
  for (const auto& [qid, docs] : ds.qrels) {
    for (const auto& [did, grade] : docs) out += qid + "\t" + did + "\t" + std::to_string(grade) + "\n";
  }
  write_file(dir / "qrels.tsv", out);
}

std::vector<TrainingBatch> make_batches(const std::vector<PairRecord>& pairs, std::size_t n, std::uint64_t seed,
                                        std::uint64_t epoch) {
  if (n < 2) throw std::invalid_argument("make_batches: batch size must be >= 2");
  if (n > pairs.size()) {
    throw std::invalid_argument("make_batches: batch size " + std::to_string(n) + " exceeds " +
                                std::to_string(pairs.size()) + " pairs");
  }
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix(seed ^ mix(epoch)));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<TrainingBatch> batches(pairs.size() / n);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    batches[b].pairs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) batches[b].pairs.push_back(pairs[order[b * n + i]]);
  }
  return batches;
}

PlantedCorpus generate_planted(std::size_t n_pairs, std::uint64_t seed, const PlantedOptions& options) {
  if (n_pairs < 16) throw std::invalid_argument("generate_planted: need at least 16 pairs");
  if (options.marker_length < 1 || options.min_filler < 0 || options.max_filler < options.min_filler) {
    throw std::invalid_argument("generate_planted: invalid options");
  }
  static constexpr std::string_view kMarkerAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  static constexpr std::string_view kFillerAlphabet = "abcdefghijklmnopqrstuvwxyz ";

  std::mt19937_64 rng(mix(seed));
  auto pick = [&rng](std::string_view alphabet) {
    return alphabet[std::uniform_int_distribution<std::size_t>(0, alphabet.size() - 1)(rng)];
  };
  auto filler = [&] {
    const int len = std::uniform_int_distribution<int>(options.min_filler, options.max_filler)(rng);
    std::string s;
    for (int i = 0; i < len; ++i) s += pick(kFillerAlphabet);
    return s;
  };
  std::set<std::string> used;
  auto marker = [&] {
    for (;;) {
      std::string m;
      for (int i = 0; i < options.marker_length; ++i) m += pick(kMarkerAlphabet);
      if (used.insert(m).second) return m;
    }
  };
  auto embed = [&](const std::string& m) { return filler() + m + filler(); };
  auto id = [](char tag, std::size_t i) {
    std::string digits = std::to_string(i);
    return std::string(1, tag) + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
  };

  PlantedCorpus out;
  out.train.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const std::string m = marker();
    PairRecord rec;
    rec.id = id('p', i);
    rec.task = kAllTasks[i % kAllTasks.size()];
    rec.query = embed(m);
    rec.document = embed(m);
    out.train.push_back(std::move(rec));
  }
  const std::size_t n_heldout = options.heldout_queries ? options.heldout_queries : std::max<std::size_t>(16, n_pairs / 4);
  for (std::size_t i = 0; i < n_heldout; ++i) {
    const std::string m = marker();
    const TaskType task = kAllTasks[i % kAllTasks.size()];
    const std::string qid = id('q', i), did = id('d', i);
    out.heldout.queries[qid] = TextRecord{embed(m), task};
    out.heldout.corpus[did] = TextRecord{embed(m), task};
    out.heldout.qrels[qid][did] = 1;
  }
  return out;
}

}  // namespace codembed
