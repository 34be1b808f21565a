#include "cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "atelier/binary_io.hpp"
#include "atelier/checkpoint.hpp"
#include "atelier/corpus.hpp"
#include "atelier/dataset.hpp"
#include "atelier/errors.hpp"
#include "atelier/evaluator.hpp"
#include "atelier/lora.hpp"
#include "atelier/model.hpp"
#include "atelier/rng.hpp"
#include "atelier/special_tokens.hpp"
#include "atelier/trainer.hpp"
#include "json.hpp"

#ifndef ATELIER_VERSION
#define ATELIER_VERSION "0.0.0"
#endif

namespace atelier::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

// Timestamps are the only fields that differ between identical reruns.
struct Manifest {
  json doc;

  Manifest(const std::string& command, std::uint64_t seed) {
    doc["command"] = command;
    doc["seed"] = seed;
    doc["tool_version"] = ATELIER_VERSION;
    doc["started_at"] = utc_now();
    doc["inputs"] = json::object();
    doc["outputs"] = json::object();
    doc["config"] = json::object();
  }

  void write(const fs::path& path) {
    doc["finished_at"] = utc_now();
    write_file_atomic(path, doc.dump(2) + "\n");
  }
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create directory " + dir.string() + ": " + ec.message());
}

struct ModelSpec {
  ModelConfig config;
  LoraTargets targets;
};

json model_config_json(const ModelConfig& c, const LoraTargets& t) {
  json j;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["image_size"] = c.image_size;
  j["patch_size"] = c.patch_size;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["lora_rank"] = c.lora_rank;
  j["lora_alpha"] = c.lora_alpha;
  j["quant_block"] = c.quant_block;
  j["seed"] = c.seed;
  json targets = json::array();
  if (t.attention) targets.push_back("attention");
  if (t.mlp) targets.push_back("mlp");
  j["lora_targets"] = targets;
  return j;
}

// The optional "model" object of a train config.
ModelSpec parse_model_spec(const json& j) {
  ModelSpec spec;
  auto& c = spec.config;
  if (!j.is_object()) throw FormatError("train config: \"model\" must be an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "d_model") c.d_model = value.get<std::size_t>();
      else if (key == "n_layers") c.n_layers = value.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
      else if (key == "patch_size") c.patch_size = value.get<std::size_t>();
      else if (key == "max_seq_len") c.max_seq_len = value.get<std::size_t>();
      else if (key == "lora_rank") c.lora_rank = value.get<std::size_t>();
      else if (key == "lora_alpha") c.lora_alpha = value.get<double>();
      else if (key == "quant_block") c.quant_block = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "lora_targets") {
        spec.targets = LoraTargets{false, false};
        for (const auto& t : value) {
          const auto name = t.get<std::string>();
          if (name == "attention") spec.targets.attention = true;
          else if (name == "mlp") spec.targets.mlp = true;
          else throw FormatError("train config: unknown LoRA target '" + name + "'");
        }
      } else {
        throw FormatError("train config: unknown model field '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return spec;
}

std::vector<TrainSample> samples_for(const Dataset& ds, const std::vector<std::string>& ids) {
  std::vector<TrainSample> out;
  for (const auto* rec : ds.select(ids)) out.push_back(rec->sample);
  return out;
}

std::vector<std::string> reference_corpus(const Dataset& ds) {
  std::vector<std::string> docs;
  for (const auto& r : ds.records) docs.push_back(r.critique);
  return docs;
}

int cmd_gen_data(std::size_t n, std::uint64_t seed, const fs::path& out_dir, std::ostream& out) {
  Manifest manifest("gen-data", seed);
  manifest.doc["config"] = {{"n", n}, {"seed", seed}};
  manifest.doc["outputs"] = {{"dataset", out_dir.string()}};
  const Tokenizer tokenizer = Tokenizer::build_default();
  const Dataset ds = generate_dataset(n, seed, tokenizer);
  ensure_dir(out_dir);
  save_dataset(ds, tokenizer, out_dir);
  const CategoryCounts counts = category_counts(n);
  out << "generated " << n << " artworks (child=" << counts.child << " professional=" << counts.professional
      << " masterpiece=" << counts.masterpiece << ") in " << out_dir.string() << "\n";
  manifest.write(out_dir / "run_manifest.json");
  return kExitOk;
}

int cmd_split(const fs::path& data, std::uint64_t seed, const fs::path& out_path, std::ostream& out) {
  Manifest manifest("split", seed);
  manifest.doc["config"] = {{"seed", seed}};
  manifest.doc["inputs"] = {{"data", data.string()}};
  manifest.doc["outputs"] = {{"split", out_path.string()}};
  const auto [ds, tokenizer] = load_dataset(data);
  const DatasetSplit split = split_dataset(ds, seed);
  if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());
  save_split(split, out_path);
  out << "train=" << split.train.size() << " test=" << split.test.size() << "\n";
  fs::path mpath = out_path;
  mpath += ".run.json";
  manifest.write(mpath);
  return kExitOk;
}

int cmd_train(const fs::path& data, const fs::path& split_path, const std::string& config_path,
              const fs::path& out_dir, std::ostream& out) {
  TrainConfig config;
  ModelSpec spec;
  if (!config_path.empty()) {
    json j;
    try {
      j = json::parse(read_text(config_path));
    } catch (const json::exception& e) {
      throw FormatError("train config is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_object()) throw FormatError("train config must be a JSON object");
    if (j.contains("model")) {
      spec = parse_model_spec(j["model"]);
      j.erase("model");
    }
    config = train_config_from_json(j.dump());
  }
  config.validate();

  auto [ds, tokenizer] = load_dataset(data);
  const DatasetSplit split = load_split(split_path);
  spec.config.vocab_size = tokenizer.size();
  spec.config.image_size = ds.options.image_size;

  Manifest manifest("train", config.seed);
  manifest.doc["config"] = json::parse(train_config_to_json(config));
  manifest.doc["config"]["model"] = model_config_json(spec.config, spec.targets);
  manifest.doc["inputs"] = {{"data", data.string()}, {"split", split_path.string()}, {"config", config_path}};

  VlmModel model(spec.config);
  if (config.mode == TrainMode::adapters_only) {
    inject_lora(model, spec.targets, spec.config.lora_rank, spec.config.lora_alpha, derive_seed(spec.config.seed, 1));
  }
  const auto train_samples = samples_for(ds, split.train);
  const auto held_out = samples_for(ds, split.test);

  ensure_dir(out_dir);
  const fs::path log_path = out_dir / "train_log.csv";
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw FormatError("cannot write " + log_path.string());
  TrainHooks hooks;
  hooks.log = &log;
  hooks.on_epoch = [&out](const EpochRecord& r, const VlmModel&) {
    out << "epoch " << r.epoch << " total=" << std::setprecision(6) << r.total << " l1=" << r.l1 << " ce=" << r.ce;
    if (r.held_out_mae) out << " held_out_mae=" << *r.held_out_mae;
    out << "\n";
    out.flush();
    return true;
  };
  const TrainState state = train(model, train_samples, held_out, config, {}, hooks);
  log.close();

  const fs::path ckpt = out_dir / "model.ckpt";
  save_checkpoint(model, config, state, ckpt);
  json outputs = {{"checkpoint", ckpt.string()}, {"log", log_path.string()}};
  if (model.has_adapters()) {
    const fs::path adapters = out_dir / "adapters.ckpt";
    save_adapters(model, adapters);
    outputs["adapters"] = adapters.string();
  }
  manifest.doc["outputs"] = outputs;
  manifest.doc["epochs_run"] = state.epoch;
  manifest.doc["steps"] = state.step;
  out << "trained " << state.epoch << " epochs (" << state.step << " steps); checkpoint " << ckpt.string() << "\n";
  manifest.write(out_dir / "run_manifest.json");
  return kExitOk;
}

int cmd_eval(const fs::path& model_path, const fs::path& data, const fs::path& split_path, const fs::path& out_dir,
             std::ostream& out) {
  const VlmModel model = load_model(model_path);
  auto [ds, tokenizer] = load_dataset(data);
  const DatasetSplit split = load_split(split_path);
  if (model.config().vocab_size != tokenizer.size()) {
    throw FormatError("model vocabulary (" + std::to_string(model.config().vocab_size) +
                      ") does not match the dataset vocabulary (" + std::to_string(tokenizer.size()) + ")");
  }
  Manifest manifest("eval", split.seed);
  manifest.doc["inputs"] = {{"model", model_path.string()}, {"data", data.string()}, {"split", split_path.string()}};
  const auto docs = reference_corpus(ds);
  const HashedIdfEmbedder embedder(docs);
  const auto records = ds.select(split.test);
  const EvaluationReport report = evaluate(model, tokenizer, records, embedder);
  ensure_dir(out_dir);
  const fs::path json_path = out_dir / "report.json";
  write_report(report, json_path);
  manifest.doc["outputs"] = {{"report", json_path.string()},
                             {"table", (out_dir / "report.csv").string()},
                             {"scatter", (out_dir / "report.svg").string()}};
  out << text_summary(report);
  manifest.write(out_dir / "run_manifest.json");
  return kExitOk;
}

int cmd_score(const fs::path& model_path, const fs::path& image_path, const std::string& description,
              const std::string& vocab_path, std::ostream& out) {
  const VlmModel model = load_model(model_path);
  const Tokenizer tokenizer = vocab_path.empty() ? Tokenizer::build_default() : Tokenizer::load(vocab_path);
  if (model.config().vocab_size != tokenizer.size()) {
    throw FormatError("model vocabulary (" + std::to_string(model.config().vocab_size) +
                      ") does not match the tokenizer (" + std::to_string(tokenizer.size()) + "); pass --vocab");
  }
  const Image image = read_ppm(image_path);
  const auto prompt = build_prompt(tokenizer, rubric_preamble(), description,
                                   model.config().max_seq_len - model.config().visual_tokens() - kCritiqueBudget);
  const Tensor visual = model.encode_image(image);
  const std::size_t scoring_pos = prompt.size() - 2;
  double score = 0.0;
  {
    NoGradGuard no_grad;
    score = model.forward(visual, prompt, scoring_pos).score;
  }
  auto critique = model.generate_critique(visual, prompt, kCritiqueBudget);
  if (!critique.empty() && critique.back() == special::kEos) critique.pop_back();
  out << "total: " << std::fixed << std::setprecision(1) << score << "\n";
  out << "context: scored against originality, color, composition, texture and content, 20 points each, "
         "100 in total\n";
  out << "--- critique ---\n";
  out << tokenizer.decode(critique) << "\n";
  return kExitOk;
}

int cmd_report(const fs::path& eval_path, const std::string& svg_out, std::ostream& out) {
  const EvaluationReport report = read_report(eval_path);
  fs::path svg = svg_out;
  if (svg.empty()) {
    svg = eval_path;
    svg.replace_extension(".svg");
  }
  write_file_atomic(svg, render_scatter_svg(report));
  out << text_summary(report);
  out << "scatter: " << svg.string() << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic artwork assessment: data generation, full or QLoRA training, evaluation and scoring", "atelier"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", ATELIER_VERSION);

  std::size_t n = 1000;
  std::uint64_t gen_seed = 7;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic painting corpus");
  gen->add_option("--n", n, "Number of artworks (at least 10)");
  gen->add_option("--seed", gen_seed, "Generation seed");
  gen->add_option("--out", gen_out, "Output dataset directory")->required();

  std::string split_data, split_out;
  std::uint64_t split_seed = 7;
  auto* sp = app.add_subcommand("split", "Write the 80/20 train/test split of a dataset");
  sp->add_option("--data", split_data, "Dataset directory")->required();
  sp->add_option("--seed", split_seed, "Shuffle seed");
  sp->add_option("--out", split_out, "Output split file (JSON)")->required();

  std::string train_data, train_split, train_config, train_out;
  auto* tr = app.add_subcommand("train", "Train the model and write a checkpoint plus a CSV log");
  tr->add_option("--data", train_data, "Dataset directory")->required();
  tr->add_option("--split", train_split, "Split file")->required();
  tr->add_option("--config", train_config, "Train config JSON (TrainConfig fields, optional \"model\" object)");
  tr->add_option("--out", train_out, "Output directory")->required();

  std::string eval_model, eval_data, eval_split, eval_out;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  ev->add_option("--model", eval_model, "Model or training checkpoint")->required();
  ev->add_option("--data", eval_data, "Dataset directory")->required();
  ev->add_option("--split", eval_split, "Split file")->required();
  ev->add_option("--out", eval_out, "Output directory for report.json/.csv/.svg")->required();

  std::string score_model, score_image, score_desc, score_vocab;
  auto* sc = app.add_subcommand("score", "Score one artwork and print its critique");
  sc->add_option("--model", score_model, "Model or training checkpoint")->required();
  sc->add_option("--image", score_image, "PPM image")->required();
  sc->add_option("--description", score_desc, "Artwork description")->required();
  sc->add_option("--vocab", score_vocab, "Vocabulary file (default: the built-in vocabulary)");

  std::string report_eval, report_svg;
  auto* rp = app.add_subcommand("report", "Render the scatter plot and a summary of an evaluation report");
  rp->add_option("--eval", report_eval, "report.json written by eval")->required();
  rp->add_option("--svg", report_svg, "SVG output path (default: next to the report)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    out << ATELIER_VERSION << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help("", CLI::AppFormatMode::All);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(n, gen_seed, gen_out, out);
    if (*sp) return cmd_split(split_data, split_seed, split_out, out);
    if (*tr) return cmd_train(train_data, train_split, train_config, train_out, out);
    if (*ev) return cmd_eval(eval_model, eval_data, eval_split, eval_out, out);
    if (*sc) return cmd_score(score_model, score_image, score_desc, score_vocab, out);
    if (*rp) return cmd_report(report_eval, report_svg, out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace atelier::cli
