#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "steerkit/error.hpp"
#include "steerkit/evalkit.hpp"

namespace steerkit {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  const InteractionRecord* record;
  double rouge1;
  double rougeL;
};

nlohmann::ordered_json row_json(const EvalRow& row) {
  nlohmann::ordered_json j;
  j["method"] = row.method;
  j["fraction"] = row.fraction;
  j["subpop"] = row.subpop;
  j["cohort"] = row.cohort;
  j["seed"] = row.seed;
  j["n_queries"] = row.n_queries;
  j["rouge1"] = row.rouge1;
  j["rougeL"] = row.rougeL;
  if (row.layer) j["layer"] = *row.layer;
  if (row.gamma) j["gamma"] = *row.gamma;
  return j;
}

std::vector<EvalRow> rows_for(const std::vector<Outcome>& outcomes, const std::map<RecordId, RecordLabel>& labels,
                              const EvalRow& base) {
  auto label_of = [&](RecordId id) {
    auto it = labels.find(id);
    return it == labels.end() ? RecordLabel{} : it->second;
  };
  std::map<int, std::vector<const Outcome*>> by_subpop;
  std::vector<const Outcome*> drifted;
  for (const auto& o : outcomes) {
    const RecordLabel label = label_of(o.record->id);
    by_subpop[label.subpop].push_back(&o);
    if (label.drifting_user && label.post_drift) drifted.push_back(&o);
  }
  auto make = [&](const std::vector<const Outcome*>& group, int subpop, const char* cohort) {
    EvalRow row = base;
    row.subpop = subpop;
    row.cohort = cohort;
    row.n_queries = static_cast<int>(group.size());
    for (const auto* o : group) {
      row.rouge1 += o->rouge1;
      row.rougeL += o->rougeL;
    }
    row.rouge1 /= static_cast<double>(group.size());
    row.rougeL /= static_cast<double>(group.size());
    return row;
  };
  std::vector<EvalRow> rows;
  for (const auto& [subpop, group] : by_subpop) rows.push_back(make(group, subpop, "subpop"));
  if (!drifted.empty()) rows.push_back(make(drifted, -1, "drifting_post_drift"));
  return rows;
}

std::string fmt(double v, int prec) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

}  // namespace

std::string icl_prompt(std::string_view query, std::string_view user, const UserCorpus& corpus, int k,
                       const TinyLm& model, int max_new) {
  if (k < 0) throw InvalidArgument("icl k must be >= 0");
  const ContextBlock block = retrieve_positive(query, user, corpus, k);
  std::vector<const InteractionRecord*> examples;
  for (RecordId id : block.source_record_ids) examples.push_back(&corpus.record(id));
  const auto budget = static_cast<std::size_t>(model.config().max_seq_len);
  for (;;) {
    std::string prompt = render_query_prompt(render_examples(examples), query);
    if (prompt.size() + static_cast<std::size_t>(max_new) <= budget || examples.empty()) return prompt;
    auto oldest = std::min_element(examples.begin(), examples.end(),
                                   [](const auto* a, const auto* b) { return a->ts < b->ts; });
    examples.erase(oldest);
  }
}

std::string run_icl_baseline(std::string_view query, std::string_view user, const UserCorpus& corpus, int k,
                             const TinyLm& model, int max_new) {
  const auto prompt = tokenize(icl_prompt(query, user, corpus, k, model, max_new));
  GenerateOptions opt;
  opt.max_new = max_new;
  return detokenize(model.generate(prompt, nullptr, opt));
}

std::string MethodSpec::name() const {
  switch (kind) {
    case Kind::kZeroShot:
      return "zeroshot";
    case Kind::kIcl:
      return "icl:" + std::to_string(icl_k);
    case Kind::kSteer:
      return "steer:" + std::string(to_string(granularity)) + ":" + std::string(to_string(aggregation));
  }
  return "";
}

MethodSpec parse_method(std::string_view text) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : text) {
    if (c == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  MethodSpec m;
  const std::string& kind = parts[0];
  if (kind == "zeroshot" && parts.size() == 1) {
    m.kind = MethodSpec::Kind::kZeroShot;
  } else if (kind == "icl" && parts.size() <= 2) {
    m.kind = MethodSpec::Kind::kIcl;
    if (parts.size() == 2) {
      try {
        std::size_t used = 0;
        m.icl_k = std::stoi(parts[1], &used);
        if (used != parts[1].size() || m.icl_k < 0) throw std::invalid_argument("k");
      } catch (const std::exception&) {
        throw InvalidArgument("bad icl example count in '" + std::string(text) + "'");
      }
    }
  } else if (kind == "steer" && parts.size() <= 3) {
    m.kind = MethodSpec::Kind::kSteer;
    if (parts.size() >= 2) m.granularity = parse_granularity(parts[1]);
    if (parts.size() == 3) m.aggregation = parse_aggregation(parts[2]);
  } else {
    throw InvalidArgument("unknown method '" + std::string(text) + "' (expected zeroshot, icl[:k], steer[:g[:agg]])");
  }
  return m;
}

std::string to_json_line(const EvalRow& row) { return row_json(row).dump(); }

std::string EvalReport::to_jsonl() const {
  std::string out;
  for (const auto& row : rows) out += to_json_line(row) + "\n";
  return out;
}

std::string EvalReport::latency_json() const {
  if (!latency) return "{}";
  nlohmann::ordered_json j;
  j["n_queries"] = latency->n_queries;
  j["max_new"] = latency->max_new;
  j["direct_seconds"] = latency->direct_seconds;
  j["steered_seconds"] = latency->steered_seconds;
  j["retrieval_seconds"] = latency->retrieval_seconds;
  j["injection_seconds"] = latency->injection_seconds;
  j["ratio"] = latency->ratio();
  return j.dump(2);
}

std::string EvalReport::summary_table() const {
  std::vector<std::string> methods;
  std::set<double> fractions;
  std::map<std::pair<std::string, double>, std::array<double, 3>> pooled;  // r1 sum, rL sum, n
  for (const auto& row : rows) {
    if (std::find(methods.begin(), methods.end(), row.method) == methods.end()) methods.push_back(row.method);
    fractions.insert(row.fraction);
    if (row.cohort != "subpop") continue;
    auto& p = pooled[{row.method, row.fraction}];
    p[0] += row.rouge1 * row.n_queries;
    p[1] += row.rougeL * row.n_queries;
    p[2] += row.n_queries;
  }
  std::ostringstream os;
  os << "method";
  for (double f : fractions) os << "\tR1@" << fmt(f, 2) << "\tRL@" << fmt(f, 2);
  os << "\n";
  for (const auto& m : methods) {
    os << m;
    for (double f : fractions) {
      const auto& p = pooled[{m, f}];
      os << "\t" << (p[2] > 0 ? fmt(p[0] / p[2], 4) : "-") << "\t" << (p[2] > 0 ? fmt(p[1] / p[2], 4) : "-");
    }
    os << "\n";
  }
  if (latency) {
    os << "latency: direct " << fmt(latency->direct_seconds, 3) << " s, steered " << fmt(latency->steered_seconds, 3)
       << " s (retrieval " << fmt(latency->retrieval_seconds, 3) << " s, injection "
       << fmt(latency->injection_seconds, 3) << " s), ratio " << fmt(latency->ratio(), 3) << " over "
       << latency->n_queries << " queries\n";
  }
  return os.str();
}

std::map<std::string, SteeringDict> build_all_dicts(const UserCorpus& corpus, const TinyLm& model, int layer,
                                                    const PrepConfig& prep) {
  std::map<std::string, SteeringDict> out;
  HookConfig hook;
  hook.layer = layer;
  for (const auto& user : corpus.users()) out.emplace(user, build_dict(user, corpus, model, hook, prep));
  return out;
}

LatencyReport run_latency_study(const UserCorpus& corpus, const std::map<std::string, SteeringDict>& dicts,
                                const TinyLm& model, const InjectionConfig& cfg, int n_queries, int max_new,
                                const KeyEncoder& encoder) {
  if (n_queries < 1) throw InvalidArgument("latency study needs at least one query");
  std::vector<const InteractionRecord*> pool;
  for (const auto& user : corpus.users()) {
    for (const auto& r : corpus.test(user)) pool.push_back(&r);
  }
  if (pool.empty()) throw CorpusError("latency study: corpus has no test records");
  GenerateOptions opt;
  opt.max_new = max_new;
  opt.stop_at_eos = false;
  static const SteeringDict kEmpty;
  LatencyReport rep;
  rep.n_queries = n_queries;
  rep.max_new = max_new;
  double steered_generation = 0;
  for (int i = 0; i < n_queries; ++i) {
    const auto& rec = *pool[static_cast<std::size_t>(i) % pool.size()];
    const auto t0 = Clock::now();
    plain_generate(rec.query, model, opt);
    rep.direct_seconds += seconds_since(t0);
    auto it = dicts.find(rec.user_id);
    const auto t1 = Clock::now();
    const SteeredOutput s = steered_generate(rec.query, it == dicts.end() ? kEmpty : it->second, model, cfg, opt,
                                             encoder);
    rep.steered_seconds += seconds_since(t1);
    rep.retrieval_seconds += s.retrieval_seconds;
    steered_generation += s.generation_seconds;
  }
  rep.injection_seconds = steered_generation - rep.direct_seconds;
  return rep;
}

EvalReport run_experiment(const UserCorpus& corpus, const std::map<RecordId, RecordLabel>& labels,
                          const TinyLm& model, const ExperimentSpec& spec,
                          const std::optional<std::filesystem::path>& report_path) {
  if (spec.methods.empty()) throw InvalidArgument("no methods to evaluate");
  if (spec.fractions.empty()) throw InvalidArgument("no data fractions");
  for (double f : spec.fractions) {
    if (!(f > 0 && f <= 1)) throw InvalidArgument("data fractions must be in (0, 1]");
  }
  spec.injection.validate();
  std::ofstream sink;
  if (report_path) {
    sink.open(*report_path, std::ios::binary | std::ios::trunc);
    if (!sink) throw Error("cannot write report '" + report_path->string() + "'");
  }
  PrepConfig prep = spec.prep;
  prep.seed = spec.seed;
  GenerateOptions gen;
  gen.max_new = spec.max_new;

  EvalReport report;
  auto emit = [&](std::vector<EvalRow> rows) {
    for (auto& row : rows) {
      if (sink) {
        sink << to_json_line(row) << '\n';
        sink.flush();
      }
      report.rows.push_back(std::move(row));
    }
  };

  std::vector<const InteractionRecord*> tests;
  for (const auto& user : corpus.users()) {
    for (const auto& r : corpus.test(user)) tests.push_back(&r);
  }
  if (tests.empty()) throw CorpusError("corpus has no test records");

  std::map<RecordId, std::string> zero_shot;
  auto zero_shot_text = [&](const InteractionRecord& r) -> const std::string& {
    auto it = zero_shot.find(r.id);
    if (it == zero_shot.end()) it = zero_shot.emplace(r.id, plain_generate(r.query, model, gen)).first;
    return it->second;
  };

  std::optional<InjectionConfig> latency_cfg;
  std::map<std::string, SteeringDict> latency_dicts;
  const int default_l = spec.injection.layer >= 0 ? spec.injection.layer : default_layer(model.config().n_layers);

  for (double fraction : spec.fractions) {
    const UserCorpus window = corpus.with_train_fraction(fraction, spec.window);
    std::map<int, std::map<std::string, SteeringDict>> dicts_by_layer;
    auto ensure_layers = [&](const std::vector<int>& layers) {
      std::vector<int> missing;
      for (int l : layers) {
        if (!dicts_by_layer.count(l)) missing.push_back(l);
      }
      if (missing.empty()) return;
      for (const auto& user : window.users()) {
        auto built = build_dicts(user, window, model, missing, prep);
        for (std::size_t i = 0; i < missing.size(); ++i) dicts_by_layer[missing[i]].emplace(user, std::move(built[i]));
      }
    };
    auto dicts_at = [&](int layer) -> const std::map<std::string, SteeringDict>& {
      ensure_layers({layer});
      return dicts_by_layer.at(layer);
    };
    for (const auto& method : spec.methods) {
      EvalRow base;
      base.method = method.name();
      base.fraction = fraction;
      base.seed = spec.seed;
      std::vector<Outcome> outcomes;
      auto score = [&](const InteractionRecord& r, const std::string& text) {
        outcomes.push_back({&r, rouge1(text, r.answer), rougeL(text, r.answer)});
      };
      switch (method.kind) {
        case MethodSpec::Kind::kZeroShot:
          for (const auto* r : tests) score(*r, zero_shot_text(*r));
          break;
        case MethodSpec::Kind::kIcl:
          for (const auto* r : tests) score(*r, run_icl_baseline(r->query, r->user_id, window, method.icl_k, model, spec.max_new));
          break;
        case MethodSpec::Kind::kSteer: {
          InjectionConfig cfg = spec.injection;
          cfg.granularity = method.granularity;
          cfg.aggregation = method.aggregation;
          cfg.layer = default_l;
          cfg.override_layer = false;
          if (spec.tune) {
            std::vector<ValidationExample> validation;
            for (const auto& user : window.users()) {
              const auto train = window.train(user);
              validation.push_back({user, train.back().query, train.back().answer});
            }
            ensure_layers(tune_layers(model.config().n_layers));
            const TuneResult tuned = tune(
                validation,
                [&](const std::string& user, int layer) -> const SteeringDict& { return dicts_at(layer).at(user); },
                model, cfg, gen, prep.encoder);
            cfg.layer = tuned.layer;
            cfg.gamma = tuned.gamma;
            cfg.alpha = tuned.gamma;
            cfg.beta = tuned.gamma;
          }
          const auto& dicts = dicts_at(cfg.layer);
          for (const auto* r : tests) {
            score(*r, steered_generate(r->query, dicts.at(r->user_id), model, cfg, gen, prep.encoder).text);
          }
          base.layer = cfg.layer;
          base.gamma = cfg.gamma;
          // The latency study reuses the last steering setup evaluated.
          latency_cfg = cfg;
          latency_dicts = dicts;
          break;
        }
      }
      emit(rows_for(outcomes, labels, base));
    }
  }

  if (spec.latency_queries > 0) {
    if (!latency_cfg) {
      latency_cfg = spec.injection;
      latency_cfg->layer = default_l;
      latency_dicts = build_all_dicts(corpus.with_train_fraction(spec.fractions.back(), spec.window), model,
                                      default_l, prep);
    }
    report.latency = run_latency_study(corpus, latency_dicts, model, *latency_cfg, spec.latency_queries,
                                       spec.latency_max_new, prep.encoder);
  }
  return report;
}

}  // namespace steerkit
