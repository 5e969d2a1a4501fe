#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "synapse/runner.hpp"
#include "synapse/trainer.hpp"

namespace synapse {

namespace {

namespace fs = std::filesystem;

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

// Flags shared by `rank`, `attack` and `sweep`.
struct SelectionFlags {
  std::string kind = "global";
  int cls = -1;
  double p = 0.05;
  std::string scope = "all";

  void add(CLI::App& app) {
    app.add_option("--kind", kind, "global | class | directed")->check(CLI::IsMember({"global", "class", "directed"}));
    app.add_option("--class", cls, "class for --kind class or directed");
    app.add_option("--p", p, "fraction of neurons");
    app.add_option("--scope", scope, "all | last")->check(CLI::IsMember({"all", "last"}));
  }

  SelectionSpec build() const {
    SelectionSpec s;
    s.p = p;
    s.scope = scope_from_name(scope);
    if (kind == "global") {
      s.kind = SelectionKind::global();
    } else {
      if (cls < 0) throw ConfigError("--kind " + kind + " needs --class");
      s.kind = kind == "class" ? SelectionKind::per_class(cls) : SelectionKind::directed(cls);
    }
    return s;
  }
};

struct ExperimentFlags {
  std::string model = "model.synw";
  std::string probe_data = "probe.synd";
  std::string test_data = "test.synd";
  std::string ranking;
  std::string variant = "silence";
  SelectionFlags selection;
  bool random = false;
  double sigma = 0.0, bias = 0.0, balanced_delta = 0.0, epsilon = 0.0, delta = 0.0;
  int target = 0;
  bool unbalanced = false;
  int suppress = -1;
  int max_columns = -1;
  std::uint64_t seed = 0;
  ProbeHyper probe;

  void add(CLI::App& app) {
    app.add_option("--model", model);
    app.add_option("--probe-data", probe_data);
    app.add_option("--test-data", test_data);
    app.add_option("--ranking", ranking, "precomputed ranking JSON instead of training a probe");
    app.add_option("--variant", variant,
                   "silence | gaussian-cls | logit-bias | embedding-noise | fgsm | balanced-push | bias-only");
    selection.add(app);
    app.add_flag("--random", random, "draw the k neurons uniformly instead of from the probe");
    app.add_option("--sigma", sigma);
    app.add_option("--bias", bias);
    app.add_option("--balanced-delta", balanced_delta);
    app.add_option("--epsilon", epsilon);
    app.add_option("--delta", delta);
    app.add_option("--target", target);
    app.add_flag("--unbalanced", unbalanced, "balanced-push without the counter-push on other classes");
    app.add_option("--suppress", suppress, "balanced-push: also subtract delta from this class");
    app.add_option("--max-cols", max_columns);
    app.add_option("--seed", seed);
    app.add_option("--probe-lr", probe.lr);
    app.add_option("--probe-epochs", probe.epochs);
    app.add_option("--probe-l2", probe.l2);
  }

  ExperimentConfig build() const {
    ExperimentConfig c;
    c.model_path = model;
    c.probe_data_path = probe_data;
    c.test_data_path = test_data;
    if (!ranking.empty()) c.ranking_path = ranking;
    c.probe = probe;
    AttackConfig& a = c.attack;
    a.kind = attack_from_name(variant);
    a.selection = selection.build();
    a.random_selection = random;
    a.sigma = sigma;
    a.bias = bias;
    a.balanced_delta = balanced_delta;
    a.epsilon = epsilon;
    a.delta = delta;
    a.target = target;
    a.balanced = !unbalanced;
    if (suppress >= 0) a.suppress = suppress;
    if (max_columns >= 0) a.max_columns = max_columns;
    a.seed = seed;
    return c;
  }
};

void print_summary(const ExperimentLog& log) {
  std::cout << "baseline weighted F1 " << format_double(log.baseline.weighted_f1) << ", attacked "
            << format_double(log.attacked.weighted_f1) << " (" << format_double(log.delta_pct) << "%)\n";
  if (log.flips) {
    std::cout << "predicted target " << format_double(log.flips->pct_pred_target) << "%";
    if (log.flips->pct_flips_nontarget) std::cout << ", flips to target " << format_double(*log.flips->pct_flips_nontarget) << "%";
    std::cout << '\n';
  }
  std::cout << "verification: " << (log.verified ? "passed" : "FAILED") << " (" << log.verification << ")\n";
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--values: not a number: '" + item + "'");
    }
  }
  return out;
}

}  // namespace

int cli(int argc, const char* const* argv) {
  CLI::App app{"Neuron analysis and perturbation toolkit for a small Transformer encoder"};
  app.require_subcommand(1);

  // gen-data
  GenSpec gen;
  SplitFractions fractions;
  std::string data_dir = ".";
  std::uint64_t split_seed = 0;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic dataset and its train/probe/test split");
  gen_cmd->add_option("--out-dir", data_dir);
  gen_cmd->add_option("--classes", gen.classes);
  gen_cmd->add_option("--vocab", gen.vocab);
  gen_cmd->add_option("--seq-len", gen.seq_len, "sequence length including [CLS]");
  gen_cmd->add_option("--motif-len", gen.motif_len);
  gen_cmd->add_option("--noise", gen.noise_rate);
  gen_cmd->add_option("--per-class", gen.per_class);
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--split-seed", split_seed);
  gen_cmd->add_option("--train-frac", fractions.train);
  gen_cmd->add_option("--probe-frac", fractions.probe);
  gen_cmd->add_option("--test-frac", fractions.test);

  // train
  ModelConfig model_cfg;
  TrainHyper train_hyper;
  std::string train_data = "train.synd", model_out = "model.synw", train_log, eval_data;
  auto* train_cmd = app.add_subcommand("train", "train the encoder");
  train_cmd->add_option("--data", train_data);
  train_cmd->add_option("--out", model_out);
  train_cmd->add_option("--layers", model_cfg.layers);
  train_cmd->add_option("--hidden", model_cfg.hidden);
  train_cmd->add_option("--heads", model_cfg.heads);
  train_cmd->add_option("--ffn", model_cfg.ffn);
  train_cmd->add_option("--lr", train_hyper.lr);
  train_cmd->add_option("--epochs", train_hyper.epochs);
  train_cmd->add_option("--batch", train_hyper.batch);
  train_cmd->add_option("--seed", train_hyper.seed);
  train_cmd->add_option("--log", train_log, "write per-epoch loss JSON here");
  train_cmd->add_option("--eval", eval_data, "report metrics on this dataset after training");

  // extract
  std::string extract_model = "model.synw", extract_data = "probe.synd", acts_out = "acts.syna";
  auto* extract_cmd = app.add_subcommand("extract", "record per-layer [CLS] activations");
  extract_cmd->add_option("--model", extract_model);
  extract_cmd->add_option("--data", extract_data);
  extract_cmd->add_option("--out", acts_out);

  // probe
  std::string probe_acts = "acts.syna", probe_out = "probe.json";
  ProbeHyper probe_hyper;
  auto* probe_cmd = app.add_subcommand("probe", "train the linear probe on activations");
  probe_cmd->add_option("--acts", probe_acts);
  probe_cmd->add_option("--out", probe_out);
  probe_cmd->add_option("--lr", probe_hyper.lr);
  probe_cmd->add_option("--epochs", probe_hyper.epochs);
  probe_cmd->add_option("--l2", probe_hyper.l2);
  probe_cmd->add_option("--seed", probe_hyper.seed);

  // rank
  std::string rank_probe = "probe.json", rank_out = "ranking.json";
  SelectionFlags rank_sel;
  bool rank_random = false;
  std::uint64_t rank_seed = 0;
  auto* rank_cmd = app.add_subcommand("rank", "select top-k neurons from the probe");
  rank_cmd->add_option("--probe", rank_probe);
  rank_cmd->add_option("--out", rank_out);
  rank_sel.add(*rank_cmd);
  rank_cmd->add_flag("--random", rank_random, "uniform draw of k neurons");
  rank_cmd->add_option("--seed", rank_seed);

  // attack
  ExperimentFlags attack_flags;
  std::string attack_out = "experiment.json";
  auto* attack_cmd = app.add_subcommand("attack", "run one experiment through the six-step protocol");
  attack_flags.add(*attack_cmd);
  attack_cmd->add_option("--out", attack_out);

  // sweep
  ExperimentFlags sweep_flags;
  std::string axis, values, sweep_out = "sweep.csv", sweep_logs;
  auto* sweep_cmd = app.add_subcommand("sweep", "run one experiment per grid value with a shared baseline");
  sweep_flags.add(*sweep_cmd);
  sweep_cmd->add_option("--axis", axis, "p | sigma | bias | balanced_delta | epsilon | delta | seed | target")
      ->required();
  sweep_cmd->add_option("--values", values, "comma-separated grid")->required();
  sweep_cmd->add_option("--out", sweep_out);
  sweep_cmd->add_option("--logs", sweep_logs, "write every experiment log as a JSON array");

  // report
  std::string report_log = "experiment.json";
  bool replay = false;
  auto* report_cmd = app.add_subcommand("report", "print a logged experiment, optionally re-running it");
  report_cmd->add_option("--log", report_log);
  report_cmd->add_flag("--replay", replay, "re-execute from the logged config and compare metrics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen_cmd) {
      const Dataset all = generate(gen);
      const DatasetSplits parts = split(all, fractions, split_seed);
      const fs::path dir(data_dir);
      fs::create_directories(dir);
      save_dataset(all, dir / "all.synd");
      save_dataset(parts.train, dir / "train.synd");
      save_dataset(parts.probe, dir / "probe.synd");
      save_dataset(parts.test, dir / "test.synd");
      std::cout << "wrote " << all.size() << " samples (train " << parts.train.size() << ", probe "
                << parts.probe.size() << ", test " << parts.test.size() << ") to " << dir.string() << '\n';
    } else if (*train_cmd) {
      const Dataset ds = load_dataset(train_data);
      model_cfg.vocab = ds.vocab;
      model_cfg.classes = ds.classes;
      model_cfg.max_seq = std::max(model_cfg.max_seq, ds.seq_len);
      const TrainResult result = train_encoder(model_cfg, ds, train_hyper);
      save_weights(result.weights, model_out);
      std::cout << "final loss " << format_double(result.epoch_loss.back()) << ", fingerprint "
                << fingerprint_hex(fingerprint(result.weights)) << '\n';
      if (!train_log.empty()) {
        write_text(train_log, nlohmann::json{{"epoch_loss", result.epoch_loss},
                                             {"seed", train_hyper.seed},
                                             {"lr", train_hyper.lr},
                                             {"epochs", train_hyper.epochs},
                                             {"batch", train_hyper.batch}}
                                  .dump(2));
      }
      if (!eval_data.empty()) {
        const MetricsReport r = evaluate(result.weights, load_dataset(eval_data));
        std::cout << "eval weighted F1 " << format_double(r.weighted_f1) << ", macro F1 " << format_double(r.macro_f1)
                  << ", accuracy " << format_double(r.accuracy) << '\n';
      }
    } else if (*extract_cmd) {
      const ActivationSet acts = extract_activations(load_weights(extract_model), load_dataset(extract_data));
      save_activations(acts, acts_out);
      std::cout << "wrote " << acts.size() << " x " << acts.layers * acts.hidden << " activations\n";
    } else if (*probe_cmd) {
      const ProbeModel probe = train_probe(load_activations(probe_acts), probe_hyper);
      save_probe(probe, probe_out);
      std::cout << "probe train accuracy " << format_double(probe.train_accuracy) << '\n';
    } else if (*rank_cmd) {
      const ProbeModel probe = load_probe(rank_probe);
      ModelConfig shape;
      shape.layers = probe.layers;
      shape.hidden = probe.hidden;
      shape.classes = probe.classes();
      RankingRecord rec;
      rec.selection = rank_sel.build();
      rec.selection.validate(probe.classes());
      rec.seed = rank_seed;
      rec.fingerprint = probe.fingerprint;
      rec.neurons = rank_random ? select_random(rec.selection, shape, rank_seed)
                                : select_neurons(probe, rec.selection, shape);
      rec.k = static_cast<int>(rec.neurons.size());
      persist_ranking(rec, rank_out);
      std::cout << "selected k=" << rec.k << " neurons\n";
    } else if (*attack_cmd) {
      const ExperimentLog log = run_experiment(attack_flags.build());
      write_text(attack_out, to_json(log).dump(2));
      print_summary(log);
      require_verified(log);
    } else if (*sweep_cmd) {
      const SweepResult result = run_sweep(sweep_flags.build(), SweepAxis{axis, parse_values(values)});
      write_text(sweep_out, sweep_csv(result));
      if (!sweep_logs.empty()) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& log : result.logs) arr.push_back(to_json(log));
        write_text(sweep_logs, arr.dump(2));
      }
      std::cout << "wrote " << result.logs.size() << " rows to " << sweep_out << '\n';
      if (!result.complete) throw IntegrityError(result.error);
    } else if (*report_cmd) {
      const nlohmann::json logged = read_json(report_log);
      std::cout << logged.dump(2) << '\n';
      if (replay) {
        const ExperimentLog again = run_experiment(experiment_config_from_json(logged.at("config")));
        const nlohmann::json fresh = to_json(again, false);
        bool same = true;
        for (const char* key : {"baseline", "attacked", "delta_pct", "transition_matrix", "flips"}) {
          if (fresh.at(key).dump() != logged.at(key).dump()) {
            std::cerr << "replay mismatch in '" << key << "'\n";
            same = false;
          }
        }
        if (!same) throw IntegrityError("replay did not reproduce the logged metrics");
        std::cout << "replay: identical\n";
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace synapse
