#include "synapse/runner.hpp"

#include <bit>
#include <chrono>
#include <sstream>

#include "synapse/random.hpp"
#include "synapse/trainer.hpp"

namespace synapse {

namespace {

constexpr const char* kAttackNames[] = {"silence",         "gaussian_cls", "logit_bias", "embedding_noise",
                                        "fgsm",            "balanced_push", "bias_only"};

nlohmann::json selection_json(const SelectionSpec& s) {
  static const char* const kinds[] = {"global", "class", "directed"};
  nlohmann::json j{{"kind", kinds[s.kind.kind]}, {"scope", scope_name(s.scope)}, {"p", s.p}};
  j["class"] = s.kind.kind == SelectionKind::Global ? nlohmann::json(nullptr) : nlohmann::json(s.kind.target);
  return j;
}

SelectionSpec selection_from_json(const nlohmann::json& j) {
  SelectionSpec s;
  s.p = j.at("p").get<double>();
  s.scope = scope_from_name(j.at("scope").get<std::string>());
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "global") {
    s.kind = SelectionKind::global();
  } else if (kind == "class") {
    s.kind = SelectionKind::per_class(j.at("class").get<int>());
  } else if (kind == "directed") {
    s.kind = SelectionKind::directed(j.at("class").get<int>());
  } else {
    throw ConfigError("unknown selection kind '" + kind + "'");
  }
  return s;
}

bool bit_equal(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

nlohmann::json optional_json(const std::optional<int>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

/// Restores a head edit when leaving scope, including on exceptions.
class HeadEditGuard {
 public:
  HeadEditGuard(EncoderWeights& w, const HeadEdit& edit) : w_(w), backup_(apply_head_edit(w, edit)) {}
  ~HeadEditGuard() {
    if (!released_) {
      try {
        restore_head(w_, backup_);
      } catch (...) {
      }
    }
  }
  void restore() {
    restore_head(w_, backup_);
    released_ = true;
  }
  HeadEditGuard(const HeadEditGuard&) = delete;
  HeadEditGuard& operator=(const HeadEditGuard&) = delete;

 private:
  EncoderWeights& w_;
  HeadBackup backup_;
  bool released_ = false;
};

}  // namespace

std::string attack_name(AttackKind k) { return kAttackNames[static_cast<int>(k)]; }

AttackKind attack_from_name(const std::string& name) {
  std::string n = name;
  for (auto& ch : n)
    if (ch == '-') ch = '_';
  for (int i = 0; i < 7; ++i)
    if (n == kAttackNames[i]) return static_cast<AttackKind>(i);
  throw ConfigError("unknown attack variant '" + name + "'");
}

bool AttackConfig::uses_neurons() const {
  return kind == AttackKind::Silence || kind == AttackKind::GaussianCls || kind == AttackKind::BalancedPush;
}

bool AttackConfig::has_target() const {
  return kind == AttackKind::LogitBias || kind == AttackKind::BalancedPush || kind == AttackKind::BiasOnly;
}

nlohmann::json to_json(const AttackConfig& a) {
  return {{"variant", attack_name(a.kind)},
          {"selection", selection_json(a.selection)},
          {"random_selection", a.random_selection},
          {"sigma", a.sigma},
          {"bias", a.bias},
          {"balanced_delta", a.balanced_delta},
          {"epsilon", a.epsilon},
          {"delta", a.delta},
          {"target", a.target},
          {"balanced", a.balanced},
          {"suppress", optional_json(a.suppress)},
          {"max_columns", optional_json(a.max_columns)},
          {"seed", a.seed}};
}

AttackConfig attack_from_json(const nlohmann::json& j) {
  try {
    AttackConfig a;
    a.kind = attack_from_name(j.at("variant").get<std::string>());
    a.selection = selection_from_json(j.at("selection"));
    a.random_selection = j.at("random_selection").get<bool>();
    a.sigma = j.at("sigma").get<double>();
    a.bias = j.at("bias").get<double>();
    a.balanced_delta = j.at("balanced_delta").get<double>();
    a.epsilon = j.at("epsilon").get<double>();
    a.delta = j.at("delta").get<double>();
    a.target = j.at("target").get<int>();
    a.balanced = j.at("balanced").get<bool>();
    if (!j.at("suppress").is_null()) a.suppress = j["suppress"].get<int>();
    if (!j.at("max_columns").is_null()) a.max_columns = j["max_columns"].get<int>();
    a.seed = j.at("seed").get<std::uint64_t>();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("attack config: ") + e.what());
  }
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"model", c.model_path},
          {"probe_data", c.probe_data_path},
          {"test_data", c.test_data_path},
          {"ranking", c.ranking_path ? nlohmann::json(*c.ranking_path) : nlohmann::json(nullptr)},
          {"output_dir", c.output_dir},
          {"probe", {{"lr", c.probe.lr}, {"epochs", c.probe.epochs}, {"l2", c.probe.l2}, {"seed", c.probe.seed}}},
          {"attack", to_json(c.attack)}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  try {
    ExperimentConfig c;
    c.model_path = j.at("model").get<std::string>();
    c.probe_data_path = j.at("probe_data").get<std::string>();
    c.test_data_path = j.at("test_data").get<std::string>();
    if (!j.at("ranking").is_null()) c.ranking_path = j["ranking"].get<std::string>();
    c.output_dir = j.at("output_dir").get<std::string>();
    const auto& p = j.at("probe");
    c.probe = {p.at("lr").get<double>(), p.at("epochs").get<int>(), p.at("l2").get<double>(),
               p.at("seed").get<std::uint64_t>()};
    c.attack = attack_from_json(j.at("attack"));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("experiment config: ") + e.what());
  }
}

nlohmann::json to_json(const ExperimentLog& log, bool include_wall_clock) {
  nlohmann::json j{{"config", log.config},
                   {"ranking", log.ranking},
                   {"intervention", log.intervention},
                   {"steps", log.steps},
                   {"baseline", to_json(log.baseline)},
                   {"attacked", to_json(log.attacked)},
                   {"delta_pct", log.delta_pct},
                   {"transition_matrix", to_json(log.transitions)},
                   {"flips", log.flips ? to_json(*log.flips) : nlohmann::json(nullptr)},
                   {"weight_hash_before", fingerprint_hex(log.weight_hash_before)},
                   {"weight_hash_after", fingerprint_hex(log.weight_hash_after)},
                   {"verified", log.verified},
                   {"verification", log.verification},
                   {"status", log.verified ? "complete" : "failed"}};
  if (include_wall_clock) j["wall_clock_seconds"] = log.wall_clock_seconds;
  return j;
}

void require_verified(const ExperimentLog& log) {
  if (!log.verified) throw IntegrityError("verification failed: " + log.verification);
}

ExperimentSession::ExperimentSession(EncoderWeights weights, Dataset probe_set, Dataset test_set, ProbeHyper probe_hyper)
    : weights_(std::move(weights)),
      probe_set_(std::move(probe_set)),
      test_(std::move(test_set)),
      probe_hyper_(probe_hyper) {
  weights_.config.validate();
}

const ProbeModel& ExperimentSession::probe() {
  if (!probe_) {
    const ActivationSet acts = extract_activations(weights_, probe_set_);
    probe_ = train_probe(acts, probe_hyper_, weights_.config.classes);
  }
  return *probe_;
}

Baseline ExperimentSession::compute_baseline() {
  Baseline b;
  b.predictions = predict(weights_, test_);
  b.report = compute_metrics(test_.labels, b.predictions, weights_.config.classes);
  b.weight_hash = fingerprint(weights_);
  return b;
}

const Baseline& ExperimentSession::baseline() {
  if (!baseline_) baseline_ = compute_baseline();
  return *baseline_;
}

ExperimentLog ExperimentSession::run(const AttackConfig& attack, const std::optional<RankingRecord>& preset) {
  const auto start = std::chrono::steady_clock::now();
  const ModelConfig& config = weights_.config;
  ExperimentLog log;
  log.config = {{"attack", to_json(attack)}};
  const Baseline base = baseline();
  log.baseline = base.report;
  log.weight_hash_before = fingerprint(weights_);

  // 1. Ranking
  NeuronRefs neurons;
  std::optional<ProbeModel> ranked;
  if (attack.uses_neurons()) {
    attack.selection.validate(config.classes);
    if (preset) {
      if (preset->fingerprint != log.weight_hash_before) {
        throw StalenessError("ranking was computed for model " + fingerprint_hex(preset->fingerprint) +
                             ", current model is " + fingerprint_hex(log.weight_hash_before));
      }
    } else if (!attack.random_selection) {
      ranked = probe();
    }
  }
  log.steps.emplace_back("ranking");

  // 2. Selection
  if (attack.uses_neurons()) {
    std::string source;
    SelectionSpec sel = attack.selection;
    if (preset) {
      neurons = preset->neurons;
      sel = preset->selection;
      source = "file";
    } else if (attack.random_selection) {
      neurons = select_random(attack.selection, config, derive_seed(attack.seed, "random_selection"));
      source = "random";
    } else {
      neurons = select_neurons(*ranked, attack.selection, config);
      source = "probe";
    }
    std::vector<int> ids;
    for (const auto& n : neurons) ids.push_back(n.global_index);
    log.ranking = selection_json(sel);
    log.ranking["source"] = source;
    log.ranking["k"] = neurons.size();
    log.ranking["fingerprint"] = fingerprint_hex(log.weight_hash_before);
    log.ranking["neurons"] = ids;
    if (ranked) log.ranking["probe_train_accuracy"] = ranked->train_accuracy;
  }
  log.steps.emplace_back("selection");

  // 3. Intervention
  OptionalSpec spec;
  std::optional<HeadEdit> edit;
  switch (attack.kind) {
    case AttackKind::Silence:
      spec = make_silence(neurons);
      break;
    case AttackKind::GaussianCls:
      spec = make_gaussian_cls(neurons, attack.sigma, derive_seed(attack.seed, "gaussian_cls"));
      break;
    case AttackKind::LogitBias:
      spec = make_logit_bias(attack.target, attack.bias, attack.balanced_delta);
      break;
    case AttackKind::EmbeddingNoise:
      spec = make_embedding_noise(attack.epsilon, derive_seed(attack.seed, "embedding_noise"));
      break;
    case AttackKind::Fgsm:
      spec = make_fgsm(attack.epsilon);
      break;
    case AttackKind::BalancedPush: {
      BalancedPush p;
      p.target = attack.target;
      p.delta = attack.delta;
      p.columns = columns_from_refs(
          neurons, attack.max_columns ? std::optional<std::size_t>(static_cast<std::size_t>(*attack.max_columns))
                                      : std::nullopt);
      p.balanced = attack.balanced;
      p.suppress = attack.suppress;
      edit = p;
      break;
    }
    case AttackKind::BiasOnly:
      edit = BiasOnly{attack.target, attack.delta};
      break;
  }
  if (spec) validate_spec(*spec, config);
  if (spec) {
    nlohmann::json sj = to_json(*spec);
    // Target lists are already recorded under "ranking".
    if (sj.contains("targets")) sj["targets"] = sj["targets"].size();
    log.intervention = sj;
  } else {
    log.intervention = to_json(*edit);
  }
  log.steps.emplace_back("intervention");

  // 4. Inference, 5. Cleanup
  std::vector<int> attacked;
  if (edit) {
    HeadEditGuard guard(weights_, *edit);
    attacked = predict(weights_, test_, std::nullopt);
    log.steps.emplace_back("inference");
    if (hook_) hook_(weights_);
    guard.restore();
  } else {
    attacked = predict(weights_, test_, spec);
    log.steps.emplace_back("inference");
    if (hook_) hook_(weights_);
  }
  log.steps.emplace_back("cleanup");
  log.attacked = compute_metrics(test_.labels, attacked, config.classes);
  log.delta_pct = delta_f1(log.baseline, log.attacked);
  log.transitions = transition_matrix(base.predictions, attacked, config.classes);
  if (attack.has_target()) log.flips = flip_stats(log.transitions, attack.target);

  // 6. Verification
  const Baseline again = compute_baseline();
  log.weight_hash_after = again.weight_hash;
  std::ostringstream why;
  if (again.weight_hash != base.weight_hash) why << "weight hash changed; ";
  if (again.predictions != base.predictions) why << "baseline predictions changed; ";
  if (!bit_equal(again.report.weighted_f1, base.report.weighted_f1)) why << "baseline weighted F1 changed; ";
  log.verified = why.str().empty();
  log.verification = log.verified ? "baseline recomputed: weights, predictions and weighted F1 identical" : why.str();
  log.steps.emplace_back("verification");

  log.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

ExperimentLog run_experiment(const ExperimentConfig& cfg) {
  ExperimentSession session(load_weights(cfg.model_path), load_dataset(cfg.probe_data_path),
                            load_dataset(cfg.test_data_path), cfg.probe);
  std::optional<RankingRecord> preset;
  if (cfg.ranking_path) preset = load_ranking(*cfg.ranking_path, fingerprint(session.weights()));
  ExperimentLog log = session.run(cfg.attack, preset);
  log.config = to_json(cfg);
  return log;
}

AttackConfig with_axis_value(AttackConfig a, const std::string& axis, double value) {
  if (axis == "p") a.selection.p = value;
  else if (axis == "sigma") a.sigma = value;
  else if (axis == "bias") a.bias = value;
  else if (axis == "epsilon") a.epsilon = value;
  else if (axis == "delta") a.delta = value;
  else if (axis == "balanced_delta") a.balanced_delta = value;
  else if (axis == "seed") a.seed = static_cast<std::uint64_t>(value);
  else if (axis == "target") a.target = static_cast<int>(value);
  else throw ConfigError("unknown sweep axis '" + axis + "'");
  return a;
}

SweepResult run_sweep(ExperimentSession& session, const AttackConfig& base, const SweepAxis& axis,
                      const std::optional<RankingRecord>& preset) {
  if (axis.values.empty()) throw ConfigError("sweep: empty grid");
  SweepResult out;
  for (const double v : axis.values) {
    ExperimentLog log = session.run(with_axis_value(base, axis.name, v), preset);
    const bool ok = log.verified;
    out.logs.push_back(std::move(log));
    if (!ok) {
      out.complete = false;
      out.error = "integrity failure at " + axis.name + "=" + format_double(v) + ": " + out.logs.back().verification;
      break;
    }
  }
  return out;
}

SweepResult run_sweep(const ExperimentConfig& base, const SweepAxis& axis) {
  ExperimentSession session(load_weights(base.model_path), load_dataset(base.probe_data_path),
                            load_dataset(base.test_data_path), base.probe);
  std::optional<RankingRecord> preset;
  if (base.ranking_path) preset = load_ranking(*base.ranking_path, fingerprint(session.weights()));
  SweepResult result = run_sweep(session, base.attack, axis, preset);
  for (std::size_t i = 0; i < result.logs.size(); ++i) {
    ExperimentConfig point = base;
    point.attack = with_axis_value(base.attack, axis.name, axis.values[i]);
    result.logs[i].config = to_json(point);
  }
  return result;
}

std::string sweep_csv(const SweepResult& result) {
  std::ostringstream os;
  os << "variant,kind,class,scope,p,k,sigma,bias,epsilon,delta,target,seed,weighted_f1,macro_f1,accuracy,delta_pct,"
        "pct_pred_target,flips,verified\n";
  for (const auto& log : result.logs) {
    const auto& a = log.config.contains("attack") ? log.config["attack"] : log.config;
    const auto& sel = a.at("selection");
    os << a.at("variant").get<std::string>() << ',' << sel.at("kind").get<std::string>() << ','
       << (sel.at("class").is_null() ? std::string() : std::to_string(sel["class"].get<int>())) << ','
       << sel.at("scope").get<std::string>() << ',' << format_double(sel.at("p").get<double>()) << ','
       << (log.ranking.is_null() ? std::string() : std::to_string(log.ranking["k"].get<std::size_t>())) << ','
       << format_double(a.at("sigma").get<double>()) << ',' << format_double(a.at("bias").get<double>()) << ','
       << format_double(a.at("epsilon").get<double>()) << ',' << format_double(a.at("delta").get<double>()) << ','
       << a.at("target").get<int>() << ',' << a.at("seed").get<std::uint64_t>() << ','
       << format_double(log.attacked.weighted_f1) << ',' << format_double(log.attacked.macro_f1) << ','
       << format_double(log.attacked.accuracy) << ',' << format_double(log.delta_pct) << ',';
    if (log.flips) {
      os << format_double(log.flips->pct_pred_target) << ','
         << (log.flips->pct_flips_nontarget ? format_double(*log.flips->pct_flips_nontarget) : std::string());
    } else {
      os << ',';
    }
    os << ',' << (log.verified ? "true" : "false") << '\n';
  }
  return os.str();
}

}  // namespace synapse
