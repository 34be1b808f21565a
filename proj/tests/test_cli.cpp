#include <fstream>
#include <map>
#include <sstream>

#include "atelier/checkpoint.hpp"
#include "atelier/dataset.hpp"
#include "atelier/model.hpp"
#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace atelier;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

const char* kSmallConfig = R"({"epochs": 2, "batch_size": 4, "mode": "adapters_only", "learning_rate": 0.003,
  "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "lora_rank": 2, "lora_alpha": 4}})";

// gen-data + split once for the whole suite.
const fs::path& workspace() {
  static const fs::path dir = [] {
    const fs::path d = oracle::scratch_dir("cli");
    REQUIRE(run({"gen-data", "--n", "20", "--seed", "4", "--out", (d / "data").string()}).code == 0);
    REQUIRE(run({"split", "--data", (d / "data").string(), "--seed", "4", "--out", (d / "split.json").string()}).code == 0);
    std::ofstream(d / "config.json") << kSmallConfig;
    return d;
  }();
  return dir;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with code 1 and print usage") {
  const Result none = run({});
  CHECK(none.code == cli::kExitUsage);
  CHECK(none.err.find("Usage") != std::string::npos);
  const Result unknown = run({"paint"});
  CHECK(unknown.code == cli::kExitUsage);
  CHECK(unknown.err.find("gen-data") != std::string::npos);
  const Result flag = run({"gen-data", "--out", "x", "--colour", "red"});
  CHECK(flag.code == cli::kExitUsage);
  CHECK(run({"split", "--seed", "3"}).code == cli::kExitUsage);
}

TEST_CASE("help lists every flag with its default") {
  const Result top = run({"--help"});
  CHECK(top.code == 0);
  for (auto cmd : {"gen-data", "split", "train", "eval", "score", "report"}) CHECK(top.out.find(cmd) != std::string::npos);
  const Result gen = run({"gen-data", "--help"});
  CHECK(gen.code == 0);
  for (auto flag : {"--n", "--seed", "--out", "[1000]", "[7]"}) CHECK(gen.out.find(flag) != std::string::npos);
  const Result train = run({"train", "--help"});
  for (auto flag : {"--data", "--split", "--config", "--out"}) CHECK(train.out.find(flag) != std::string::npos);
  const Result score = run({"score", "--help"});
  for (auto flag : {"--model", "--image", "--description", "--vocab"}) CHECK(score.out.find(flag) != std::string::npos);
}

TEST_CASE("gen-data is byte-identical across runs") {
  const fs::path dir = oracle::scratch_dir("cli_gen");
  CHECK(run({"gen-data", "--n", "12", "--seed", "9", "--out", (dir / "a").string()}).code == 0);
  CHECK(run({"gen-data", "--n", "12", "--seed", "9", "--out", (dir / "b").string()}).code == 0);
  auto a = tree(dir / "a"), b = tree(dir / "b");
  CHECK(a.count("manifest.jsonl") == 1);
  CHECK(a.count("run_manifest.json") == 1);
  CHECK(a["manifest.jsonl"] == b["manifest.jsonl"]);
  const auto ma = nlohmann::json::parse(a["run_manifest.json"]);
  for (auto key : {"command", "config", "seed", "inputs", "outputs", "tool_version", "started_at", "finished_at"})
    CHECK(ma.contains(key));
  CHECK(ma["seed"] == 9);
  a.erase("run_manifest.json");
  b.erase("run_manifest.json");
  CHECK(a == b);
  CHECK(run({"gen-data", "--n", "3", "--out", (dir / "c").string()}).code == cli::kExitData);
}

TEST_CASE("split reports the 80/20 partition") {
  const fs::path dir = oracle::scratch_dir("cli_split");
  REQUIRE(run({"gen-data", "--n", "1000", "--seed", "7", "--out", (dir / "data").string()}).code == 0);
  const Result r = run({"split", "--data", (dir / "data").string(), "--seed", "7", "--out", (dir / "split.json").string()});
  CHECK(r.code == 0);
  CHECK(r.out == "train=800 test=200\n");
  const DatasetSplit s = load_split(dir / "split.json");
  CHECK(s.train.size() == 800);
  CHECK(fs::exists(dir / "split.json.run.json"));
}

TEST_CASE("train, eval, score and report") {
  const fs::path& w = workspace();
  const auto inputs_before = tree(w / "data");
  const std::string data = (w / "data").string(), split = (w / "split.json").string();

  const Result tr = run({"train", "--data", data, "--split", split, "--config", (w / "config.json").string(), "--out",
                         (w / "run").string()});
  REQUIRE(tr.code == 0);
  for (auto f : {"model.ckpt", "adapters.ckpt", "train_log.csv", "run_manifest.json"}) CHECK(fs::exists(w / "run" / f));
  const auto manifest = nlohmann::json::parse(slurp(w / "run" / "run_manifest.json"));
  CHECK(manifest["config"]["epochs"] == 2);
  CHECK(manifest["config"]["model"]["d_model"] == 16);
  CHECK(manifest["config"]["model"]["vocab_size"] == Tokenizer::build_default().size());
  CHECK(slurp(w / "run" / "train_log.csv").rfind("epoch,step,total,l1,ce,held_out_mae,wall_time\n", 0) == 0);

  REQUIRE(run({"train", "--data", data, "--split", split, "--config", (w / "config.json").string(), "--out",
               (w / "run2").string()})
              .code == 0);
  CHECK(slurp(w / "run" / "model.ckpt") == slurp(w / "run2" / "model.ckpt"));

  const Result ev = run({"eval", "--model", (w / "run" / "model.ckpt").string(), "--data", data, "--split", split,
                         "--out", (w / "eval").string()});
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("mae") != std::string::npos);
  for (auto f : {"report.json", "report.csv", "report.svg", "run_manifest.json"}) CHECK(fs::exists(w / "eval" / f));
  const auto report = nlohmann::json::parse(slurp(w / "eval" / "report.json"));
  CHECK(report["n_samples"] == load_split(w / "split.json").test.size());

  const Result rp = run({"report", "--eval", (w / "eval" / "report.json").string(), "--svg", (w / "scatter.svg").string()});
  CHECK(rp.code == 0);
  CHECK(slurp(w / "scatter.svg") == slurp(w / "eval" / "report.svg"));

  const std::string image = (w / "data" / "images" / "art-0000.ppm").string();
  const Result sc = run({"score", "--model", (w / "run" / "model.ckpt").string(), "--image", image, "--description",
                         "a child 's drawing of a red circle at the center on a plain blue background with smooth brushwork ."});
  REQUIRE(sc.code == 0);
  std::istringstream lines(sc.out);
  std::string first, second, third;
  std::getline(lines, first);
  std::getline(lines, second);
  std::getline(lines, third);
  CHECK(first.rfind("total: ", 0) == 0);
  CHECK(first.find('.') == first.size() - 2);
  CHECK(second.find("originality") != std::string::npos);
  CHECK(third == "--- critique ---");

  CHECK(tree(w / "data") == inputs_before);
}

TEST_CASE("an untrained head scores 50.0") {
  const fs::path& w = workspace();
  ModelConfig c;
  c.vocab_size = Tokenizer::build_default().size();
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  save_model(VlmModel(c), w / "untrained.ckpt");
  const Result sc = run({"score", "--model", (w / "untrained.ckpt").string(), "--image",
                         (w / "data" / "images" / "art-0003.ppm").string(), "--description", "a painting of an empty scene"});
  REQUIRE(sc.code == 0);
  CHECK(sc.out.rfind("total: 50.0\n", 0) == 0);
}

TEST_CASE("data errors exit 2 and numerical aborts exit 3") {
  const fs::path& w = workspace();
  const std::string data = (w / "data").string(), split = (w / "split.json").string();
  CHECK(run({"split", "--data", (w / "nowhere").string(), "--out", (w / "s.json").string()}).code == cli::kExitData);
  std::ofstream(w / "bad.json") << R"({"epochs": 1, "learning_rat": 0.1})";
  const Result bad = run({"train", "--data", data, "--split", split, "--config", (w / "bad.json").string(), "--out",
                          (w / "bad_run").string()});
  CHECK(bad.code == cli::kExitData);
  CHECK(bad.err.find("learning_rat") != std::string::npos);
  std::ofstream(w / "zero.json") << R"({"lambda_reg": 0, "lambda_gen": 0})";
  CHECK(run({"train", "--data", data, "--split", split, "--config", (w / "zero.json").string(), "--out",
             (w / "zero_run").string()})
            .code == cli::kExitData);
  CHECK(run({"score", "--model", (w / "missing.ckpt").string(), "--image", "x.ppm", "--description", "a"}).code ==
        cli::kExitData);

  std::ofstream(w / "explode.json") << R"({"epochs": 3, "learning_rate": 1e300, "mode": "full",
    "model": {"d_model": 16, "n_heads": 2, "n_layers": 1}})";
  const Result boom = run({"train", "--data", data, "--split", split, "--config", (w / "explode.json").string(), "--out",
                           (w / "explode_run").string()});
  CHECK(boom.code == cli::kExitNumerical);
  CHECK(boom.err.find("step") != std::string::npos);
}

}  // TEST_SUITE
