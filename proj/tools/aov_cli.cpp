#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aov/data_pipeline.hpp"
#include "aov/eval.hpp"
#include "aov/expert.hpp"
#include "aov/feature_io.hpp"
#include "aov/params.hpp"
#include "aov/schema.hpp"
#include "aov/scoring.hpp"
#include "aov/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
  aov::SynthConfig synth;
  aov::ExpertConfig expert;
  aov::TrainConfig train;
};

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw aov::UsageError("config key " + key + " expects true/false, got \"" + v + "\"");
}

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(x);
  } catch (const std::exception&) {
    throw aov::UsageError("config key " + key + " expects a non-negative integer, got \"" + v +
                          "\"");
  }
}

double parse_f64(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw aov::UsageError("config key " + key + " expects a number, got \"" + v + "\"");
  }
}

void apply_kv(RunConfig& c, const std::string& key, const std::string& value) {
  auto u = [&] { return parse_u64(value, key); };
  auto f = [&] { return parse_f64(value, key); };
  auto b = [&] { return parse_bool(value, key); };

  if (key == "synth.n_classes") c.synth.n_classes = u();
  else if (key == "synth.images_per_class") c.synth.images_per_class = u();
  else if (key == "synth.anomaly_fraction") c.synth.anomaly_fraction = f();
  else if (key == "synth.g") c.synth.g = u();
  else if (key == "synth.d_enc") c.synth.d_enc = u();
  else if (key == "synth.d") c.synth.d = u();
  else if (key == "synth.n_crops") c.synth.n_crops = u();
  else if (key == "synth.patch_size") c.synth.patch_size = u();
  else if (key == "synth.anomaly_shift_norm") c.synth.anomaly_shift_norm = f();
  else if (key == "synth.noise_sigma") c.synth.noise_sigma = f();
  else if (key == "synth.seed") c.synth.seed = u();
  else if (key == "expert.d") c.expert.d = u();
  else if (key == "expert.n_heads") c.expert.n_heads = u();
  else if (key == "expert.pool_h") c.expert.pool_h = u();
  else if (key == "expert.pool_w") c.expert.pool_w = u();
  else if (key == "expert.tau") c.expert.tau = f();
  else if (key == "expert.s_low") c.expert.s_low = f();
  else if (key == "expert.s_high") c.expert.s_high = f();
  else if (key == "expert.lookback_bias") c.expert.lookback_bias = b();
  else if (key == "expert.residual") c.expert.residual = b();
  else if (key == "expert.train_tau") c.expert.train_tau = b();
  else if (key == "train.lr0") c.train.lr0 = f();
  else if (key == "train.batch_size") c.train.batch_size = u();
  else if (key == "train.epochs") c.train.epochs = u();
  else if (key == "train.beta1") c.train.beta1 = f();
  else if (key == "train.beta2") c.train.beta2 = f();
  else if (key == "train.eps") c.train.eps = f();
  else if (key == "train.weight_decay") c.train.weight_decay = f();
  else if (key == "train.seed") c.train.seed = u();
  else if (key == "train.eta_min") c.train.eta_min = f();
  else if (key == "train.val_fraction") c.train.val_fraction = f();
  else
    throw aov::UsageError("unknown config key \"" + key +
                          "\" (expert.g/expert.d_enc are derived from the data)");
}

std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw aov::DataError("cannot open config file " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw aov::UsageError(path + ":" + std::to_string(lineno) +
                            ": expected key=value, got \"" + line + "\"");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool json = false;
};

void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--config", opts.config_path, "flat key=value config file");
  sub->add_option("--set", opts.sets, "config override key=value (repeatable)");
  sub->add_option("--seed", opts.seed, "seed for data generation and training");
  sub->add_flag("--json", opts.json, "machine-readable JSON on stdout");
}

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig c;
  if (!opts.config_path.empty())
    for (auto& [k, v] : parse_config_file(opts.config_path)) apply_kv(c, k, v);
  for (auto& s : opts.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw aov::UsageError("--set expects key=value, got \"" + s + "\"");
    apply_kv(c, s.substr(0, eq), s.substr(eq + 1));
  }
  if (opts.seed) {
    c.synth.seed = *opts.seed;
    c.train.seed = *opts.seed;
  }
  return c;
}

json config_to_json(const RunConfig& c) {
  return json{
      {"synth",
       {{"n_classes", c.synth.n_classes},
        {"images_per_class", c.synth.images_per_class},
        {"anomaly_fraction", c.synth.anomaly_fraction},
        {"g", c.synth.g},
        {"d_enc", c.synth.d_enc},
        {"d", c.synth.d},
        {"n_crops", c.synth.n_crops},
        {"patch_size", c.synth.patch_size},
        {"anomaly_shift_norm", c.synth.anomaly_shift_norm},
        {"noise_sigma", c.synth.noise_sigma},
        {"seed", c.synth.seed}}},
      {"expert",
       {{"d", c.expert.d},
        {"n_heads", c.expert.n_heads},
        {"pool_h", c.expert.pool_h},
        {"pool_w", c.expert.pool_w},
        {"tau", c.expert.tau},
        {"s_low", c.expert.s_low},
        {"s_high", c.expert.s_high},
        {"lookback_bias", c.expert.lookback_bias},
        {"residual", c.expert.residual},
        {"train_tau", c.expert.train_tau}}},
      {"train",
       {{"lr0", c.train.lr0},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"weight_decay", c.train.weight_decay},
        {"seed", c.train.seed},
        {"eta_min", c.train.eta_min},
        {"val_fraction", c.train.val_fraction}}}};
}

void log_resolved(const std::string& sub, const RunConfig& c) {
  std::cerr << "[" << sub << "] resolved config: " << config_to_json(c).dump() << "\n";
}

std::string bundle_filename(std::size_t class_id, std::size_t index) {
  return "c" + std::to_string(class_id) + "_i" + std::to_string(index) + ".aovf";
}

json cmd_synth(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto bundles = aov::synth_generate(cfg.synth);
  std::vector<aov::ManifestEntry> entries;
  std::vector<std::size_t> index_in_class(cfg.synth.n_classes, 0);
  std::size_t n_anom = 0;
  for (auto& b : bundles) {
    const auto name = bundle_filename(b.class_id, index_in_class[b.class_id]++);
    aov::save_bundle(b, (fs::path(out_dir) / name).string());
    entries.push_back({name, static_cast<int>(b.label), static_cast<std::int32_t>(b.class_id),
                       std::nullopt});
    n_anom += b.label;
  }
  const auto manifest = (fs::path(out_dir) / "manifest.jsonl").string();
  aov::write_manifest(entries, manifest);
  return json{{"out", out_dir},
              {"manifest", manifest},
              {"n_images", bundles.size()},
              {"n_anomalous", n_anom}};
}

std::vector<aov::FeatureBundle> load_bundles(const std::string& manifest_path) {
  auto entries = aov::read_manifest(manifest_path);
  if (entries.empty()) throw aov::DataError("manifest " + manifest_path + " lists no bundles");
  const auto base = fs::path(manifest_path).parent_path();
  std::vector<aov::FeatureBundle> bundles;
  bundles.reserve(entries.size());
  for (auto& e : entries) {
    fs::path p(e.path);
    if (p.is_relative()) p = base / p;
    aov::FeatureBundle b;
    try {
      b = aov::load_bundle(p.string());
    } catch (const aov::Error& err) {
      throw aov::DataError(std::string(err.what()) + " (from manifest " + manifest_path + ")");
    }
    if (static_cast<int>(b.label) != e.label ||
        static_cast<std::int32_t>(b.class_id) != e.class_id)
      throw aov::DataError("manifest " + manifest_path + ": entry " + e.path +
                           " disagrees with the bundle header");
    bundles.push_back(std::move(b));
  }
  return bundles;
}

aov::ExpertConfig expert_cfg_for(const RunConfig& cfg, const aov::FeatureBundle& first) {
  auto e = cfg.expert;
  e.g = first.layout.g;
  e.d_enc = first.d_enc;
  e.validate();
  return e;
}

json train_summary(const aov::TrainResult<double>& result, const std::string& ckpt) {
  json epochs = json::array();
  for (auto& ep : result.report.epochs) {
    json j{{"mean_loss", ep.mean_loss}, {"train_auroc", ep.train_auroc}};
    if (ep.val_auroc_defined) j["val_auroc"] = ep.val_auroc;
    epochs.push_back(j);
  }
  return json{{"checkpoint", ckpt},
              {"steps", result.state.step},
              {"steps_per_epoch", result.report.steps_per_epoch},
              {"restart_period", result.report.restart_period},
              {"n_train", result.report.n_train},
              {"n_val", result.report.n_val},
              {"single_class_batches", result.report.single_class_batches},
              {"epochs", epochs},
              {"wall_time_s", result.report.wall_time_s}};
}

json cmd_train(const RunConfig& cfg, const std::string& manifest, const std::string& out) {
  auto bundles = load_bundles(manifest);
  auto expert_cfg = expert_cfg_for(cfg, bundles.front());
  auto result = aov::train_stage1<double>(bundles, expert_cfg, cfg.train);
  if (!out.empty()) {
    if (const auto dir = fs::path(out).parent_path(); !dir.empty()) fs::create_directories(dir);
    aov::save_checkpoint(result.params, out, &result.state);
  }
  return train_summary(result, out);
}

json cmd_score(const RunConfig& cfg, const std::string& ckpt_path,
               const std::string& bundle_path) {
  auto ckpt = aov::load_checkpoint<double>(ckpt_path);
  auto bundle = aov::load_bundle(bundle_path);
  aov::Tape<double> tape;
  aov::NoGrad<double> guard(tape);
  auto sel = aov::expert_forward(tape, bundle, ckpt.params);
  auto layout = aov::assemble_prompt(bundle, sel, ckpt.params.cfg.s_low, ckpt.params.cfg.s_high);
  (void)cfg;
  return aov::prompt_to_json(layout);
}

json detection_to_json(const aov::DetectionMetrics& m) {
  return json{{"accuracy", m.accuracy},
              {"precision", m.precision},
              {"recall", m.recall},
              {"f1", m.f1},
              {"tp", m.tp},
              {"fp", m.fp},
              {"fn", m.fn},
              {"tn", m.tn},
              {"precision_defined", m.precision_defined},
              {"recall_defined", m.recall_defined},
              {"f1_defined", m.f1_defined}};
}

json cmd_eval(const RunConfig& cfg, const std::string& manifest, const std::string& ckpt_path) {
  std::ifstream is(manifest);
  if (!is) throw aov::DataError("cannot open manifest " + manifest);
  std::string first_line;
  while (std::getline(is, first_line) && first_line.empty()) {
  }
  if (first_line.empty()) throw aov::DataError("manifest " + manifest + " is empty");
  json probe;
  try {
    probe = json::parse(first_line);
  } catch (const json::exception& e) {
    throw aov::DataError(manifest + ":1: bad JSON: " + e.what());
  }

  if (probe.contains("answer")) {
    auto records = aov::read_answer_records(manifest);
    std::vector<std::string> answers;
    std::vector<int> labels;
    double rouge_sum = 0.0;
    std::size_t rouge_n = 0;
    for (auto& r : records) {
      answers.push_back(r.answer);
      labels.push_back(r.label);
      if (!r.reference.empty()) {
        rouge_sum += aov::rouge_l(r.answer, r.reference);
        rouge_n++;
      }
    }
    auto out = detection_to_json(aov::detection_metrics(answers, labels));
    out["n"] = records.size();
    if (rouge_n > 0) out["rouge_l_mean"] = rouge_sum / static_cast<double>(rouge_n);
    return out;
  }

  if (probe.contains("score")) {
    is.clear();
    is.seekg(0);
    std::vector<double> scores;
    std::vector<int> labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw aov::DataError(manifest + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
      }
      if (!j.contains("score") || !j.contains("label"))
        throw aov::DataError(manifest + ":" + std::to_string(lineno) +
                             ": need \"score\" and \"label\"");
      scores.push_back(j.at("score").get<double>());
      const auto label = j.at("label").get<long long>();
      if (label != 0 && label != 1)
        throw aov::DataError(manifest + ":" + std::to_string(lineno) + ": label must be 0 or 1");
      labels.push_back(static_cast<int>(label));
    }
    return json{{"auroc", aov::auroc(scores, labels)}, {"n", scores.size()}};
  }

  if (ckpt_path.empty())
    throw aov::UsageError("eval over feature bundles requires --checkpoint");
  auto ckpt = aov::load_checkpoint<double>(ckpt_path);
  auto bundles = load_bundles(manifest);
  (void)cfg;
  auto report = aov::run_benchmark(bundles, ckpt.params);
  return aov::benchmark_to_json(report);
}

json cmd_maps(const std::string& ckpt_path, const std::string& bundle_path,
              const std::string& out_dir) {
  auto ckpt = aov::load_checkpoint<double>(ckpt_path);
  auto bundle = aov::load_bundle(bundle_path);
  fs::create_directories(out_dir);
  aov::Tape<double> tape;
  aov::NoGrad<double> guard(tape);
  auto sig = aov::significance_image(tape, bundle, ckpt.params);
  json paths = json::array();
  for (std::size_t j = 0; j < sig.averaged.size(); ++j) {
    const auto path = (fs::path(out_dir) / ("map_crop" + std::to_string(j) + ".pgm")).string();
    aov::export_map(sig, j, path);
    paths.push_back(path);
  }
  return json{{"maps", paths}, {"g", bundle.layout.g}, {"n_crops", sig.averaged.size()}};
}

json cmd_dedup(const std::string& in_path, double threshold, const std::string& out_path) {
  std::ifstream is(in_path);
  if (!is) throw aov::DataError("cannot open " + in_path);
  std::vector<aov::CollectedItem> items;
  std::vector<json> raw;
  std::string line;
  std::size_t lineno = 0;
  bool any_class = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw aov::DataError(in_path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
    }
    if (!j.contains("id") || !j.contains("embedding"))
      throw aov::DataError(in_path + ":" + std::to_string(lineno) +
                           ": need \"id\" and \"embedding\"");
    aov::CollectedItem item;
    item.id = j.at("id").get<std::string>();
    item.embedding = j.at("embedding").get<std::vector<double>>();
    if (j.contains("class")) {
      item.class_name = j.at("class").get<std::string>();
      any_class = true;
    }
    items.push_back(std::move(item));
    raw.push_back(std::move(j));
  }
  if (items.empty()) throw aov::DataError(in_path + " lists no embeddings");

  std::vector<std::size_t> kept;
  if (any_class) {
    kept = aov::dedup_per_class(items, threshold);
  } else {
    std::vector<std::vector<double>> embs;
    embs.reserve(items.size());
    for (auto& it : items) embs.push_back(it.embedding);
    kept = aov::dedup(embs, threshold);
  }
  json kept_ids = json::array();
  for (auto i : kept) kept_ids.push_back(items[i].id);
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    if (!os) throw aov::DataError("cannot open " + out_path);
    for (auto i : kept) os << raw[i].dump() << "\n";
  }
  return json{{"kept_ids", kept_ids},
              {"n_in", items.size()},
              {"n_kept", kept.size()},
              {"threshold", threshold}};
}

json cmd_run(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::string stage_synth = "synth", stage_train = "train", stage_eval = "eval";

  std::vector<aov::FeatureBundle> bundles;
  try {
    bundles = aov::synth_generate(cfg.synth);
  } catch (const aov::Error& e) {
    throw aov::DataError("stage " + stage_synth + " failed: " + e.what());
  }

  aov::TrainResult<double> result;
  std::string ckpt = (fs::path(out_dir) / "ckpt.aovc").string();
  try {
    auto expert_cfg = expert_cfg_for(cfg, bundles.front());
    result = aov::train_stage1<double>(bundles, expert_cfg, cfg.train);
    aov::save_checkpoint(result.params, ckpt, &result.state);
  } catch (const aov::UsageError&) {
    throw;
  } catch (const aov::Error& e) {
    throw aov::DataError("stage " + stage_train + " failed: " + e.what());
  }

  json report;
  try {
    std::vector<std::size_t> train_idx, val_idx;
    aov::split_train_val(bundles, cfg.train.val_fraction, train_idx, val_idx);
    std::vector<aov::FeatureBundle> val;
    for (auto i : val_idx) val.push_back(bundles[i]);
    if (val.empty()) val = bundles;
    auto bench = aov::run_benchmark(val, result.params);

    json maps = json::array();
    for (std::size_t i = 0; i < val.size(); ++i) {
      if (val[i].label != 1) continue;
      aov::Tape<double> tape;
      aov::NoGrad<double> guard(tape);
      auto sig = aov::significance_image(tape, val[i], result.params);
      const auto path = (fs::path(out_dir) / "map_val0_crop0.pgm").string();
      aov::export_map(sig, 0, path);
      maps.push_back(path);
      break;
    }

    json per_class = json::array();
    for (auto& [cid, a] : bench.per_class)
      per_class.push_back({{"class", cid}, {"auroc", a}});
    json epochs = json::array();
    for (auto& ep : result.report.epochs) {
      json j{{"mean_loss", ep.mean_loss}, {"train_auroc", ep.train_auroc}};
      if (ep.val_auroc_defined) j["val_auroc"] = ep.val_auroc;
      epochs.push_back(j);
    }
    report = json{{"auroc", bench.mean_auroc},
                  {"per_class", per_class},
                  {"loss_curve", result.report.step_losses},
                  {"epochs", epochs},
                  {"n_images", bundles.size()},
                  {"seed", cfg.synth.seed},
                  {"maps", maps},
                  {"wall_time_s", result.report.wall_time_s},
                  {"checkpoint", ckpt}};
  } catch (const aov::Error& e) {
    throw aov::DataError("stage " + stage_eval + " failed: " + e.what());
  }

  const auto schema_path = std::string(SCHEMA_DIR) + "/report.schema.json";
  auto errors = aov::validate_schema(aov::load_json_file(schema_path), report);
  if (!errors.empty())
    throw aov::DataError("report does not match " + schema_path + ": " + errors.front());

  const auto report_path = (fs::path(out_dir) / "report.json").string();
  std::ofstream os(report_path);
  if (!os) throw aov::DataError("cannot open " + report_path);
  os << report.dump(2) << "\n";
  report["report_path"] = report_path;
  return report;
}

void emit(const json& result, bool as_json) {
  if (as_json) {
    std::cout << result.dump() << "\n";
    return;
  }
  for (auto& [key, value] : result.items())
    std::cout << key << ": " << (value.is_string() ? value.get<std::string>() : value.dump())
              << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anomaly expert toolkit: synthetic features, training, scoring, evaluation"};
  app.require_subcommand(1);

  CommonOpts synth_opts, train_opts, score_opts, eval_opts, maps_opts, dedup_opts, run_opts;
  std::string synth_out, train_manifest, train_out, score_ckpt, score_bundle, eval_manifest,
      eval_ckpt, maps_ckpt, maps_bundle, maps_out, dedup_in, dedup_out, run_out;
  double dedup_threshold = 0.99;
  std::optional<std::uint64_t> run_epochs;

  auto* synth = app.add_subcommand("synth", "generate synthetic feature bundles");
  add_common(synth, synth_opts);
  synth->add_option("--out", synth_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train the expert head on a bundle manifest");
  add_common(train, train_opts);
  train->add_option("--manifest", train_manifest, "bundle manifest (JSONL)")->required();
  train->add_option("--out", train_out, "checkpoint output path");

  auto* score = app.add_subcommand("score", "score one bundle with a checkpoint");
  add_common(score, score_opts);
  score->add_option("--checkpoint", score_ckpt, "checkpoint path")->required();
  score->add_option("--bundle", score_bundle, "feature bundle path")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a manifest (bundles, scores, or answers)");
  add_common(eval, eval_opts);
  eval->add_option("--manifest", eval_manifest, "evaluation manifest (JSONL)")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint (needed for bundle manifests)");

  auto* maps = app.add_subcommand("maps", "export significance maps as PGM images");
  add_common(maps, maps_opts);
  maps->add_option("--checkpoint", maps_ckpt, "checkpoint path")->required();
  maps->add_option("--bundle", maps_bundle, "feature bundle path")->required();
  maps->add_option("--out", maps_out, "output directory")->required();

  auto* dedup = app.add_subcommand("dedup", "drop near-duplicate embeddings");
  add_common(dedup, dedup_opts);
  dedup->add_option("--in", dedup_in, "embeddings JSONL ({\"id\",\"embedding\"[,\"class\"]})")
      ->required();
  dedup->add_option("--threshold", dedup_threshold, "cosine threshold (strict >)");
  dedup->add_option("--out", dedup_out, "write surviving records here");

  auto* run = app.add_subcommand("run", "synth -> train -> eval pipeline, writes report.json");
  add_common(run, run_opts);
  run->add_option("--out", run_out, "output directory")->required();
  run->add_option("--epochs", run_epochs, "override train.epochs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  }

  try {
    json result;
    bool as_json = false;
    if (synth->parsed()) {
      auto cfg = resolve_config(synth_opts);
      log_resolved("synth", cfg);
      result = cmd_synth(cfg, synth_out);
      as_json = synth_opts.json;
    } else if (train->parsed()) {
      auto cfg = resolve_config(train_opts);
      log_resolved("train", cfg);
      if (train_out.empty())
        train_out = (fs::path(train_manifest).parent_path() / "ckpt.aovc").string();
      result = cmd_train(cfg, train_manifest, train_out);
      as_json = train_opts.json;
    } else if (score->parsed()) {
      auto cfg = resolve_config(score_opts);
      log_resolved("score", cfg);
      result = cmd_score(cfg, score_ckpt, score_bundle);
      as_json = score_opts.json;
    } else if (eval->parsed()) {
      auto cfg = resolve_config(eval_opts);
      log_resolved("eval", cfg);
      result = cmd_eval(cfg, eval_manifest, eval_ckpt);
      as_json = eval_opts.json;
    } else if (maps->parsed()) {
      auto cfg = resolve_config(maps_opts);
      log_resolved("maps", cfg);
      result = cmd_maps(maps_ckpt, maps_bundle, maps_out);
      as_json = maps_opts.json;
    } else if (dedup->parsed()) {
      auto cfg = resolve_config(dedup_opts);
      log_resolved("dedup", cfg);
      result = cmd_dedup(dedup_in, dedup_threshold, dedup_out);
      as_json = dedup_opts.json;
    } else if (run->parsed()) {
      auto cfg = resolve_config(run_opts);
      if (run_epochs) cfg.train.epochs = *run_epochs;
      log_resolved("run", cfg);
      result = cmd_run(cfg, run_out);
      as_json = run_opts.json;
    }
    emit(result, as_json);
    return 0;
  } catch (const aov::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
