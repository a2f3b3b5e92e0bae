#include "support.hpp"

#include <codembed/io.hpp>

#include <doctest.h>
#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <set>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(CODEMBED_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::set<std::string> entries(const fs::path& dir) {
  std::set<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out.insert(e.path().filename().string());
  return out;
}

const std::string kSmall =
    " --set steps=4 --set d_model=16 --set n_layers=1 --set n_heads=2 --set d_ff=32"
    " --set batch_size=8 --set matryoshka_dims=16,8 --quiet";

}  // namespace

TEST_CASE("command line workflow from data generation to evaluation") {
  const fs::path root = testing::scratch_dir("cli_flow");
  const std::string r = root.string();
  REQUIRE(run("gen-data --seed 3 --pairs 64 --out " + r + "/data") == 0);
  CHECK(entries(root) == std::set<std::string>{"data"});
  CHECK(fs::exists(root / "data" / "heldout" / "qrels.tsv"));

  REQUIRE(run("train --seed 3 --train " + r + "/data/train.jsonl --out " + r + "/run" + kSmall) == 0);
  CHECK(entries(root) == std::set<std::string>{"data", "run"});
  CHECK(fs::exists(root / "run" / "metrics.jsonl"));
  CHECK(fs::exists(root / "run" / "checkpoint"));

  codembed::write_file_atomic(root / "data" / "texts.txt", "first line\nsecond line\nthird\n");
  const std::string embed = "embed --checkpoint " + r + "/run/checkpoint --input " + r +
                            "/data/texts.txt --task nl2code --role query --dims 8";
  REQUIRE(run(embed + " --format bin --out " + r + "/bin") == 0);
  const std::string raw = codembed::read_file(root / "bin" / "vectors.bin");
  REQUIRE(raw.size() == 16 + 3 * 8 * 4);
  std::uint64_t header[2];
  std::memcpy(header, raw.data(), sizeof header);
  CHECK(header[0] == 3);
  CHECK(header[1] == 8);
  std::vector<float> bin(24);
  std::memcpy(bin.data(), raw.data() + 16, bin.size() * sizeof(float));

  REQUIRE(run(embed + " --format jsonl --out " + r + "/jsonl") == 0);
  const auto lines = codembed::split(codembed::read_file(root / "jsonl" / "vectors.jsonl"), '\n');
  std::size_t row = 0;
  for (const auto& line : lines) {
    if (line.empty()) continue;
    const auto v = nlohmann::json::parse(line).get<std::vector<double>>();
    REQUIRE(v.size() == 8);
    double sq = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      sq += v[j] * v[j];
      CHECK(std::abs(v[j] - bin[row * 8 + j]) <= 1e-6);
    }
    CHECK(std::abs(sq - 1.0) <= 1e-4);
    ++row;
  }
  CHECK(row == 3);

  REQUIRE(run("eval --checkpoint " + r + "/run/checkpoint --data " + r + "/data/heldout --out " + r + "/eval") == 0);
  const std::string report = codembed::read_file(root / "eval" / "report.txt");
  CHECK(report.find("overall (micro)") != std::string::npos);
  CHECK(report.find("overall (macro)") != std::string::npos);
  CHECK(entries(root) == std::set<std::string>{"data", "run", "bin", "jsonl", "eval"});
}

TEST_CASE("failed commands exit nonzero and leave no partial output") {
  const fs::path root = testing::scratch_dir("cli_fail");
  const std::string r = root.string();
  codembed::write_file_atomic(root / "bad.jsonl", "{\"id\":\"a\",\"query\":\"q\"}\nnot json\n");
  CHECK(run("train --train " + r + "/bad.jsonl --out " + r + "/run" + kSmall) != 0);
  CHECK_FALSE(fs::exists(root / "run"));

  fs::create_directories(root / "kept");
  codembed::write_file_atomic(root / "kept" / "keep.txt", "x");
  CHECK(run("train --train " + r + "/bad.jsonl --out " + r + "/kept" + kSmall) != 0);
  CHECK(entries(root / "kept") == std::set<std::string>{"keep.txt"});

  CHECK(run("train --out " + r + "/run2 --set steps=zero") != 0);
  CHECK_FALSE(fs::exists(root / "run2"));
  CHECK(run("embed --checkpoint " + r + "/missing --input " + r + "/bad.jsonl --out " + r + "/emb") != 0);
  CHECK_FALSE(fs::exists(root / "emb"));
  CHECK(run("gen-data") != 0);
}
