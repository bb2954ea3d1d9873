// steerkit: prepare per-user steering dictionaries, steer generation, tune the
// injection layer and strength, and run evaluation sweeps.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "steerkit/binary_io.hpp"
#include "steerkit/corpus.hpp"
#include "steerkit/evalkit.hpp"
#include "steerkit/steer_infer.hpp"
#include "steerkit/steer_prep.hpp"
#include "steerkit/steer_store.hpp"
#include "steerkit/tiny_lm.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace steerkit;

namespace {

struct ModelArgs {
  std::string kind = "random";
  std::string weights;
  int layers = 4;
  int d_model = 64;
  int heads = 4;
  int d_ff = 128;
  int max_seq_len = 512;
  std::string markers = "#@";
  int probe_target = 'x';
};

struct InjectArgs {
  std::optional<int> layer;
  double gamma = kDefaultGamma;
  std::optional<double> alpha;
  std::optional<double> beta;
  int topk = kDefaultTopK;
  std::string agg = "attentive";
  std::string granularity = "attn+mlp";
};

void add_model_options(CLI::App* cmd, ModelArgs& m) {
  cmd->add_option("--model", m.kind, "Model: random, probe or marker")
      ->check(CLI::IsMember({"random", "probe", "marker"}))
      ->capture_default_str();
  cmd->add_option("--weights", m.weights, "TLMW weight file (overrides --model)");
  cmd->add_option("--n-layers", m.layers, "Transformer blocks")->capture_default_str();
  cmd->add_option("--d-model", m.d_model, "Residual width")->capture_default_str();
  cmd->add_option("--n-heads", m.heads, "Attention heads")->capture_default_str();
  cmd->add_option("--d-ff", m.d_ff, "MLP hidden width")->capture_default_str();
  cmd->add_option("--max-seq-len", m.max_seq_len, "Context length")->capture_default_str();
  cmd->add_option("--markers", m.markers, "Marker bytes of the marker model")->capture_default_str();
  cmd->add_option("--probe-target", m.probe_target, "Target token of the probe model")
      ->check(CLI::Range(1, 255))
      ->capture_default_str();
}

void add_inject_options(CLI::App* cmd, InjectArgs& a, bool with_gamma) {
  cmd->add_option("--layer", a.layer, "Injection / hook layer (default: floor(L/2))");
  if (with_gamma) {
    cmd->add_option("--gamma", a.gamma, "Steering strength")->check(CLI::NonNegativeNumber)->capture_default_str();
    cmd->add_option("--alpha", a.alpha, "Attention strength (default: gamma)")->check(CLI::NonNegativeNumber);
    cmd->add_option("--beta", a.beta, "MLP strength (default: gamma)")->check(CLI::NonNegativeNumber);
  }
  cmd->add_option("--topk", a.topk, "Steering entries per query")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--agg", a.agg, "Aggregation: mean or attentive")
      ->check(CLI::IsMember({"mean", "attentive"}))
      ->capture_default_str();
  cmd->add_option("--granularity", a.granularity, "Injection sites: attn, mlp, whole or attn+mlp")
      ->check(CLI::IsMember({"attn", "mlp", "whole", "attn+mlp"}))
      ->capture_default_str();
}

TinyLm load_model(const ModelArgs& m, std::uint64_t seed) {
  if (!m.weights.empty()) return TinyLm(load_weights(m.weights, m.max_seq_len));
  ModelConfig cfg;
  cfg.n_layers = m.layers;
  cfg.d_model = m.d_model;
  cfg.n_heads = m.heads;
  cfg.d_ff = m.d_ff;
  cfg.max_seq_len = m.max_seq_len;
  cfg.seed = seed;
  if (m.kind == "probe") return TinyLm(make_probe_model(cfg, m.probe_target, seed).weights);
  if (m.kind == "marker") {
    MarkerModelSpec spec;
    spec.markers = m.markers;
    spec.active_layer = default_layer(cfg.n_layers);
    return TinyLm(make_marker_model(spec, cfg));
  }
  return TinyLm(init_weights(cfg));
}

ordered_json model_json(const ModelArgs& m, const TinyLm& model) {
  const auto& c = model.config();
  ordered_json j;
  j["kind"] = m.weights.empty() ? m.kind : "weights";
  j["weights"] = m.weights;
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["max_seq_len"] = c.max_seq_len;
  j["markers"] = m.markers;
  j["probe_target"] = m.probe_target;
  j["fingerprint"] = to_hex(model.fingerprint());
  return j;
}

ordered_json inject_json(const InjectionConfig& c) {
  ordered_json j;
  j["layer"] = c.layer;
  j["granularity"] = std::string(to_string(c.granularity));
  j["alpha"] = c.effective_alpha();
  j["beta"] = c.effective_beta();
  j["gamma"] = c.gamma;
  j["top_k"] = c.top_k;
  j["aggregation"] = std::string(to_string(c.aggregation));
  return j;
}

InjectionConfig injection_from(const InjectArgs& a) {
  InjectionConfig c;
  c.layer = a.layer.value_or(-1);
  c.gamma = a.gamma;
  c.alpha = a.alpha;
  c.beta = a.beta;
  c.top_k = a.topk;
  c.aggregation = parse_aggregation(a.agg);
  c.granularity = parse_granularity(a.granularity);
  return c;
}

void write_manifest(const fs::path& path, const std::string& command, ordered_json params) {
  ordered_json j;
  j["command"] = command;
  j["parameters"] = std::move(params);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file_atomic(path.string(), j.dump(2) + "\n");
}

std::uint64_t env_seed() {
  const char* v = std::getenv("FINTS_SEED");
  if (!v || !*v) return 0;
  try {
    std::size_t used = 0;
    const unsigned long long s = std::stoull(v, &used);
    if (used == std::string(v).size()) return s;
  } catch (const std::exception&) {
  }
  throw InvalidArgument(std::string("FINTS_SEED is not an unsigned integer: '") + v + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Per-user activation steering for a small transformer"};
  app.require_subcommand(1);
  // Global options (--seed, --config) may also follow the subcommand.
  app.fallthrough();
  app.set_config("--config", "", "TOML/INI file with option values; command-line flags take precedence");

  std::uint64_t seed = 0;
  try {
    seed = env_seed();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  app.add_option("--seed", seed, "Seed for model init and sampling (default: $FINTS_SEED or 0)")->capture_default_str();

  ModelArgs model_args;
  InjectArgs inject;
  std::string corpus_path, dict_dir, manifest_path;
  double test_fraction = kDefaultTestFraction;

  // prepare
  auto* prepare = app.add_subcommand("prepare", "Build and save one steering dictionary per user");
  int negatives = kDefaultNegatives;
  int context = kDefaultContextRecords;
  prepare->add_option("--corpus", corpus_path, "Interaction log (JSON lines)")->required();
  prepare->add_option("--dicts", dict_dir, "Output directory for .fnts files")->required();
  prepare->add_option("--layer", inject.layer, "Hook layer (default: floor(L/2))");
  prepare->add_option("--negatives", negatives, "Contrastive pairs per record")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  prepare->add_option("--context", context, "Records per context block")->check(CLI::NonNegativeNumber)->capture_default_str();
  prepare->add_option("--test-fraction", test_fraction, "Share of each user's latest records held out")
      ->check(CLI::Range(0.0, 0.99))
      ->capture_default_str();
  prepare->add_option("--manifest", manifest_path, "Run manifest path (default: <dicts>/prepare.manifest.json)");
  add_model_options(prepare, model_args);

  // steer
  auto* steer = app.add_subcommand("steer", "Generate a steered answer for one user");
  std::string user, query;
  int max_new = 32;
  bool audit = false, no_steering = false, allow_cold_start = false;
  steer->add_option("--dicts", dict_dir, "Directory with .fnts files")->required();
  steer->add_option("--user", user, "User id")->required();
  steer->add_option("--query", query, "Query text")->required();
  steer->add_option("--max-new", max_new, "Maximum generated tokens")->check(CLI::NonNegativeNumber)->capture_default_str();
  steer->add_flag("--audit", audit, "Print selected pair ids, distances and weights");
  steer->add_flag("--no-steering", no_steering, "Generate without injection");
  steer->add_flag("--allow-cold-start", allow_cold_start, "Fall back to unsteered output when the user has no dict");
  steer->add_option("--manifest", manifest_path, "Run manifest path (default: <dicts>/steer.manifest.json)");
  add_inject_options(steer, inject, true);
  add_model_options(steer, model_args);

  // tune
  auto* tune_cmd = app.add_subcommand("tune", "Grid-search injection layer and strength");
  std::string validation_path, report_path;
  tune_cmd->add_option("--corpus", corpus_path, "Interaction log (JSON lines)")->required();
  tune_cmd->add_option("--validation", validation_path,
                       "JSON lines with user_id, query, answer (default: each user's last train record)");
  tune_cmd->add_option("--report", report_path, "Tuning report (JSON lines)")->required();
  tune_cmd->add_option("--negatives", negatives, "Contrastive pairs per record")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  tune_cmd->add_option("--context", context, "Records per context block")->check(CLI::NonNegativeNumber)->capture_default_str();
  tune_cmd->add_option("--test-fraction", test_fraction, "Share of each user's latest records held out")
      ->check(CLI::Range(0.0, 0.99))
      ->capture_default_str();
  tune_cmd->add_option("--max-new", max_new, "Maximum generated tokens")->check(CLI::NonNegativeNumber)->capture_default_str();
  tune_cmd->add_option("--manifest", manifest_path, "Run manifest path (default: <report>.manifest.json)");
  {
    InjectArgs* a = &inject;
    tune_cmd->add_option("--topk", a->topk, "Steering entries per query")->check(CLI::PositiveNumber)->capture_default_str();
    tune_cmd->add_option("--agg", a->agg, "Aggregation: mean or attentive")
        ->check(CLI::IsMember({"mean", "attentive"}))
        ->capture_default_str();
    tune_cmd->add_option("--granularity", a->granularity, "Injection sites: attn, mlp, whole or attn+mlp")
        ->check(CLI::IsMember({"attn", "mlp", "whole", "attn+mlp"}))
        ->capture_default_str();
  }
  add_model_options(tune_cmd, model_args);

  // eval
  auto* eval = app.add_subcommand("eval", "Compare methods across data fractions");
  std::string methods_arg = "zeroshot,icl,steer";
  std::vector<double> fractions = kDefaultFractions;
  std::string window = "latest";
  bool no_tune = false;
  int latency = 0;
  SynthSpec synth;
  bool use_synth = false;
  int synth_users = synth.n_users, synth_records = synth.records_per_user, synth_subpops = synth.n_subpopulations;
  double synth_drift = 0.5, synth_drifting = synth.drifting_user_fraction;
  max_new = 32;
  auto* corpus_opt = eval->add_option("--corpus", corpus_path, "Interaction log (JSON lines)");
  auto* synth_flag = eval->add_flag("--synth", use_synth, "Evaluate on a generated synthetic corpus");
  corpus_opt->excludes(synth_flag);
  eval->add_option("--users", synth_users, "Synthetic users")->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--records", synth_records, "Synthetic records per user")->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--subpops", synth_subpops, "Synthetic subpopulations")->check(CLI::Range(1, 8))->capture_default_str();
  eval->add_option("--drift", synth_drift, "Drift point in (0,1); 0 disables drift")->check(CLI::Range(0.0, 0.99))->capture_default_str();
  eval->add_option("--drifting", synth_drifting, "Share of drifting users")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  eval->add_option("--methods", methods_arg, "Comma list of zeroshot, icl[:k], steer[:granularity[:agg]]")
      ->capture_default_str();
  eval->add_option("--fractions", fractions, "Train data fractions")->delimiter(',')->capture_default_str();
  eval->add_option("--window", window, "Which train records a fraction keeps: latest or earliest")
      ->check(CLI::IsMember({"latest", "earliest"}))
      ->capture_default_str();
  eval->add_flag("--no-tune", no_tune, "Use --layer/--gamma instead of tuning per fraction");
  eval->add_option("--latency", latency, "Queries in the latency study (0 skips it)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  eval->add_option("--report", report_path, "EvalReport path (JSON lines)")->required();
  eval->add_option("--negatives", negatives, "Contrastive pairs per record")->check(CLI::PositiveNumber)->capture_default_str();
  eval->add_option("--context", context, "Records per context block")->check(CLI::NonNegativeNumber)->capture_default_str();
  eval->add_option("--test-fraction", test_fraction, "Share of each user's latest records held out")
      ->check(CLI::Range(0.0, 0.99))
      ->capture_default_str();
  eval->add_option("--max-new", max_new, "Maximum generated tokens")->check(CLI::NonNegativeNumber)->capture_default_str();
  eval->add_option("--manifest", manifest_path, "Run manifest path (default: <report>.manifest.json)");
  add_inject_options(eval, inject, true);
  add_model_options(eval, model_args);

  CLI11_PARSE(app, argc, argv);

  try {
    const TinyLm model = load_model(model_args, seed);
    const int n_layers = model.config().n_layers;

    if (*prepare) {
      const UserCorpus corpus = load_logs(corpus_path, test_fraction);
      HookConfig hook;
      hook.layer = inject.layer.value_or(default_layer(n_layers));
      PrepConfig prep;
      prep.n_negatives = negatives;
      prep.context_records = context;
      prep.seed = seed;
      fs::create_directories(dict_dir);
      int warnings = 0;
      for (const auto& u : corpus.users()) {
        BuildReport rep;
        const SteeringDict dict = build_dict(u, corpus, model, hook, prep, &rep);
        save_dict(dict, dict_path(dict_dir, u));
        for (const auto& w : rep.warnings) std::cerr << "warning: " << u << ": " << w << "\n";
        warnings += static_cast<int>(rep.warnings.size());
        std::cout << u << "\t" << dict.entries.size() << " entries\n";
      }
      ordered_json p;
      p["corpus"] = corpus_path;
      p["dicts"] = dict_dir;
      p["seed"] = seed;
      p["layer"] = hook.layer;
      p["negatives"] = negatives;
      p["context"] = context;
      p["test_fraction"] = test_fraction;
      p["key_encoder"] = "hashed-trigram";
      p["key_dim"] = prep.encoder.dim();
      p["model"] = model_json(model_args, model);
      write_manifest(manifest_path.empty() ? fs::path(dict_dir) / "prepare.manifest.json" : fs::path(manifest_path),
                     "prepare", p);
      return 0;
    }

    if (*steer) {
      InjectionConfig cfg = injection_from(inject);
      GenerateOptions gen;
      gen.max_new = max_new;
      const fs::path path = dict_path(dict_dir, user);
      ordered_json p;
      p["dicts"] = dict_dir;
      p["user"] = user;
      p["query"] = query;
      p["seed"] = seed;
      p["max_new"] = max_new;
      p["no_steering"] = no_steering;
      p["allow_cold_start"] = allow_cold_start;
      p["model"] = model_json(model_args, model);
      std::optional<SteeringDict> dict;
      if (!no_steering) {
        if (fs::exists(path)) {
          LoadedDict loaded = load_dict(path, model.fingerprint());
          for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
          dict = std::move(loaded.dict);
        } else if (!allow_cold_start) {
          std::cerr << "error: no steering dictionary for user '" << user << "' (" << path.string()
                    << "); pass --allow-cold-start to answer unsteered\n";
          return 1;
        } else {
          dict = SteeringDict{};
          dict->user_id = user;
        }
      }
      if (!dict || dict->entries.empty()) {
        if (dict) std::cerr << "note: cold start, answering without steering\n";
        std::cout << plain_generate(query, model, gen) << "\n";
        p["injection"] = nullptr;
      } else {
        if (cfg.layer < 0) cfg.layer = dict->layer;
        const SteeredOutput out = steered_generate(query, *dict, model, cfg, gen);
        std::cout << out.text << "\n";
        if (audit) {
          const auto& a = out.aggregation;
          std::cout << "audit layer=" << out.layer << " aggregation=" << to_string(cfg.aggregation)
                    << (a.mean_fallback ? " (mean fallback)" : "") << "\n";
          for (std::size_t i = 0; i < a.weights.size(); ++i) {
            std::cout << "audit pair_id=" << a.selected_pair_ids[i] << " distance=" << a.distances[i]
                      << " weight=" << a.weights[i] << "\n";
          }
        }
        p["injection"] = inject_json(cfg);
      }
      write_manifest(manifest_path.empty() ? fs::path(dict_dir) / "steer.manifest.json" : fs::path(manifest_path),
                     "steer", p);
      return 0;
    }

    if (*tune_cmd) {
      const UserCorpus corpus = load_logs(corpus_path, test_fraction);
      std::vector<ValidationExample> validation;
      if (!validation_path.empty()) {
        const UserCorpus v = load_logs(validation_path, 0.0);
        for (const auto& u : v.users()) {
          for (const auto& r : v.records(u)) validation.push_back({r.user_id, r.query, r.answer});
        }
      } else {
        for (const auto& u : corpus.users()) {
          const auto train = corpus.train(u);
          validation.push_back({u, train.back().query, train.back().answer});
        }
      }
      PrepConfig prep;
      prep.n_negatives = negatives;
      prep.context_records = context;
      prep.seed = seed;
      const auto layers = tune_layers(n_layers);
      std::map<int, std::map<std::string, SteeringDict>> dicts;
      for (const auto& u : corpus.users()) {
        auto built = build_dicts(u, corpus, model, layers, prep);
        for (std::size_t i = 0; i < layers.size(); ++i) dicts[layers[i]].emplace(u, std::move(built[i]));
      }
      const SteeringDict empty;
      InjectionConfig base = injection_from(inject);
      GenerateOptions gen;
      gen.max_new = max_new;
      const TuneResult result = tune(
          validation,
          [&](const std::string& u, int layer) -> const SteeringDict& {
            const auto& m = dicts.at(layer);
            auto it = m.find(u);
            return it == m.end() ? empty : it->second;
          },
          model, base, gen);
      io::write_file_atomic(report_path, tune_report_jsonl(result.rows));
      std::cout << "layer " << result.layer << " gamma " << result.gamma
                << (result.steered ? "" : " (no grid point passed the log-probability guard)") << "\n";
      ordered_json p;
      p["corpus"] = corpus_path;
      p["validation"] = validation_path;
      p["report"] = report_path;
      p["seed"] = seed;
      p["negatives"] = negatives;
      p["context"] = context;
      p["test_fraction"] = test_fraction;
      p["max_new"] = max_new;
      p["layers"] = layers;
      p["gammas"] = tune_gammas();
      p["guard"] = kLogprobGuard;
      p["injection"] = inject_json(base);
      p["result"] = {{"layer", result.layer}, {"gamma", result.gamma}, {"steered", result.steered}};
      p["model"] = model_json(model_args, model);
      write_manifest(manifest_path.empty() ? fs::path(report_path + ".manifest.json") : fs::path(manifest_path),
                     "tune", p);
      return 0;
    }

    if (*eval) {
      UserCorpus corpus;
      std::map<RecordId, RecordLabel> labels;
      if (use_synth) {
        synth.n_users = synth_users;
        synth.records_per_user = synth_records;
        synth.n_subpopulations = synth_subpops;
        synth.drift_point = synth_drift > 0 ? std::optional<double>(synth_drift) : std::nullopt;
        synth.drifting_user_fraction = synth_drifting;
        synth.seed = seed;
        SynthCorpus sc = synth_corpus(synth, test_fraction);
        corpus = std::move(sc.corpus);
        labels = std::move(sc.labels);
      } else if (!corpus_path.empty()) {
        corpus = load_logs(corpus_path, test_fraction);
      } else {
        std::cerr << "error: eval needs --corpus or --synth\n";
        return 1;
      }
      ExperimentSpec spec;
      spec.methods.clear();
      std::string cur;
      for (char c : methods_arg + ",") {
        if (c == ',') {
          if (!cur.empty()) spec.methods.push_back(parse_method(cur));
          cur.clear();
        } else {
          cur.push_back(c);
        }
      }
      spec.fractions = fractions;
      spec.window = window == "latest" ? TrainWindow::kLatest : TrainWindow::kEarliest;
      spec.prep.n_negatives = negatives;
      spec.prep.context_records = context;
      spec.injection = injection_from(inject);
      spec.tune = !no_tune;
      spec.max_new = max_new;
      spec.latency_queries = latency;
      spec.seed = seed;
      const EvalReport report = run_experiment(corpus, labels, model, spec, fs::path(report_path));
      std::cout << report.summary_table();
      if (report.latency) io::write_file_atomic(report_path + ".latency.json", report.latency_json() + "\n");
      ordered_json p;
      p["corpus"] = use_synth ? ordered_json(nullptr) : ordered_json(corpus_path);
      if (use_synth) {
        p["synth"] = {{"users", synth_users}, {"records", synth_records}, {"subpops", synth_subpops},
                      {"drift", synth_drift}, {"drifting", synth_drifting}};
      }
      std::vector<std::string> names;
      for (const auto& m : spec.methods) names.push_back(m.name());
      p["methods"] = names;
      p["fractions"] = fractions;
      p["window"] = window;
      p["tune"] = spec.tune;
      p["latency_queries"] = latency;
      p["report"] = report_path;
      p["seed"] = seed;
      p["negatives"] = negatives;
      p["context"] = context;
      p["test_fraction"] = test_fraction;
      p["max_new"] = max_new;
      p["injection"] = inject_json(spec.injection);
      p["model"] = model_json(model_args, model);
      write_manifest(manifest_path.empty() ? fs::path(report_path + ".manifest.json") : fs::path(manifest_path),
                     "eval", p);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
